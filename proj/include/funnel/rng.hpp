#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace funnel {

/// Philox4x32-10 counter-based generator (Salmon et al.).
/// One call maps a (counter, key) pair to 128 pseudo-random bits; the
/// key carries the (seed, stream) identity so independent streams are
/// just different keys over the same counter sequence.
struct Philox4x32 {
  using ctr_t = std::array<std::uint32_t, 4>;
  using key_t = std::array<std::uint32_t, 2>;

  static ctr_t block(ctr_t ctr, key_t key);
};

/// Well-known stream ids. Streams derived from the same seed but
/// different ids are independent; trajectories depend only on
/// (seed, stream, draw index), never on call interleaving elsewhere.
namespace stream {
inline constexpr std::uint32_t kContexts = 0;      // environment context draws
inline constexpr std::uint32_t kArmBase = 1;       // arm a rewards use kArmBase + a
inline constexpr std::uint32_t kArmParams = 1u << 20;  // env generation, + arm index
inline constexpr std::uint32_t kExplore = 1u << 21;    // policy exploration
inline constexpr std::uint32_t kReplayPick = 1u << 22; // replay record resampling
inline constexpr std::uint32_t kActions = 1u << 23;    // randomized-action phases
inline constexpr std::uint32_t kScratch = 1u << 24;    // tests, ad-hoc draws
}  // namespace stream

/// A single reproducible random stream: Philox keyed by (seed, stream id),
/// counter incremented once per 128-bit block.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t seed, std::uint32_t stream_id);

  /// Uniform double in (0, 1).
  double uniform();
  /// Standard normal via Box-Muller (second value cached).
  double normal();
  /// Uniform integer in [0, n), exact (rejection sampling). n >= 1.
  std::uint32_t uniform_int(std::uint32_t n);
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t seed() const { return seed_; }
  std::uint32_t stream_id() const { return stream_; }

 private:
  std::uint32_t next_u32();

  std::uint64_t seed_;
  std::uint32_t stream_;
  std::uint64_t counter_ = 0;
  Philox4x32::ctr_t buf_{};
  int buf_pos_ = 4;  // empty
  double cached_normal_ = 0.0;
  bool has_cached_normal_ = false;
};

/// Stream factory; the canonical way to split streams off one run seed.
inline RngStream make_stream(std::uint64_t seed, std::uint32_t stream_id) {
  return RngStream(seed, stream_id);
}

}  // namespace funnel
