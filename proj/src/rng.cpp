#include "funnel/rng.hpp"

namespace funnel {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                    std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

inline Philox4x32::ctr_t round_once(Philox4x32::ctr_t c, Philox4x32::key_t k) {
  std::uint32_t hi0, lo0, hi1, lo1;
  mulhilo(kMul0, c[0], hi0, lo0);
  mulhilo(kMul1, c[2], hi1, lo1);
  return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
}

}  // namespace

Philox4x32::ctr_t Philox4x32::block(ctr_t ctr, key_t key) {
  for (int r = 0; r < 10; ++r) {
    if (r > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    ctr = round_once(ctr, key);
  }
  return ctr;
}

RngStream::RngStream(std::uint64_t seed, std::uint32_t stream_id)
    : seed_(seed), stream_(stream_id) {}

std::uint32_t RngStream::next_u32() {
  if (buf_pos_ >= 4) {
    Philox4x32::ctr_t ctr = {static_cast<std::uint32_t>(counter_),
                             static_cast<std::uint32_t>(counter_ >> 32),
                             stream_, 0u};
    Philox4x32::key_t key = {static_cast<std::uint32_t>(seed_),
                             static_cast<std::uint32_t>(seed_ >> 32)};
    buf_ = Philox4x32::block(ctr, key);
    ++counter_;
    buf_pos_ = 0;
  }
  return buf_[buf_pos_++];
}

double RngStream::uniform() {
  // (x + 0.5) / 2^32 is strictly inside (0, 1).
  return (static_cast<double>(next_u32()) + 0.5) * 0x1.0p-32;
}

double RngStream::normal() {
  if (has_cached_normal_) {
    has_cached_normal_ = false;
    return cached_normal_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * M_PI * u2;
  cached_normal_ = r * std::sin(a);
  has_cached_normal_ = true;
  return r * std::cos(a);
}

std::uint32_t RngStream::uniform_int(std::uint32_t n) {
  if (n <= 1) return 0;
  // Rejection sampling over the largest multiple of n below 2^32.
  const std::uint32_t limit = UINT32_MAX - UINT32_MAX % n;
  std::uint32_t x;
  do {
    x = next_u32();
  } while (x >= limit);
  return x % n;
}

}  // namespace funnel
