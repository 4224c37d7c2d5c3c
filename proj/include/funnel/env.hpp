#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "funnel/glm.hpp"
#include "funnel/rng.hpp"
#include "funnel/types.hpp"

namespace funnel::env {

/// Ground-truth funnel: J layers of true parameters plus the mean function.
/// Each interaction draws z_j ~ Bernoulli(mu(x . theta_j*)) per layer and
/// reveals the running products r_j = z_1 ... z_j.
struct Funnel {
  int J = 0;
  glm::ThetaStack stack;
  glm::MeanFunction mean;
};

/// Draw one reward chain. All J latent z's are drawn even past the first
/// zero, so the stream advances by exactly J draws per call.
RewardVector funnel_sample(const Funnel& fu, const Vec& x, RngStream& rng);

struct ContextDistribution {
  enum class Kind { Gaussian, Replay };
  Kind kind = Kind::Gaussian;
  int d = 0;
  double sigma_x = 1.0;
  /// Norm cap d_x; Gaussian draws above it are rescaled onto the sphere.
  double clip_norm = 0.0;
};

/// 99.9% quantile of the norm of N(0, sigma_x^2 I_d), the default context
/// norm cap (Wilson-Hilferty chi-square approximation).
double default_context_cap(int d, double sigma_x);

Vec sample_context(const ContextDistribution& dist, RngStream& rng);

struct LoggedInteraction {
  Vec context;
  int action = 0;
  RewardVector rewards;
};

/// Abstract step/act protocol. step() yields the context (and, for
/// simulated environments, the oracle per-arm true funnel values); act()
/// must follow each step exactly once.
class BanditEnv {
 public:
  virtual ~BanditEnv() = default;

  struct Step {
    Vec x;
    /// True P_J per arm; empty when the environment has no oracle.
    Vec oracle;
  };

  virtual int arms() const = 0;
  virtual int layers() const = 0;
  virtual int dim() const = 0;
  virtual bool has_oracle() const = 0;

  const Step& step();
  RewardVector act(int arm);

 protected:
  virtual Step do_step() = 0;
  virtual RewardVector do_act(int arm) = 0;

 private:
  Step current_;
  bool pending_act_ = false;
};

/// Simulated bandit with one funnel per arm.
class SimBanditEnv final : public BanditEnv {
 public:
  SimBanditEnv(std::vector<Funnel> funnels, ContextDistribution ctx,
               std::uint64_t seed);

  int arms() const override { return static_cast<int>(funnels_.size()); }
  int layers() const override { return funnels_.front().J; }
  int dim() const override { return ctx_.d; }
  bool has_oracle() const override { return true; }

  const Funnel& funnel(int a) const { return funnels_[a]; }
  double true_value(const Vec& x, int a) const;

 protected:
  Step do_step() override;
  RewardVector do_act(int arm) override;

 private:
  std::vector<Funnel> funnels_;
  ContextDistribution ctx_;
  RngStream ctx_rng_;
  std::vector<RngStream> arm_rngs_;
  Vec last_x_;
};

/// Paper-style sequential environment: theta_{a,1} ~ N(0, sigma^2 I_d),
/// theta_{a,j} ~ N(theta_{a,j-1}, (sigma^2/j) I_d); Gaussian contexts
/// clipped to the 99.9% norm quantile.
SimBanditEnv gen_sequential_bandit_env(int A, int J, int d, double sigma,
                                       double sigma_x, std::uint64_t seed);

struct BinSpec {
  int bins_per_dim = 5;
  /// What act() returns when the (bin, action) cell has no records:
  /// an all-zero reward, or a resample from the nearest non-empty bin
  /// with the same action. Both count as fallback events.
  enum class Fallback { ZeroReward, NearestBin };
  Fallback fallback = Fallback::ZeroReward;
};

/// Log-replay environment: contexts resampled uniformly from the log;
/// rewards resampled among records sharing the action and the quantile-bin
/// signature of the context. Empty cells fall back to an all-zero reward
/// (counted in fallback_events).
class ReplayEnv final : public BanditEnv {
 public:
  ReplayEnv(std::vector<LoggedInteraction> records, int arms, BinSpec bins,
            std::uint64_t seed);

  int arms() const override { return arms_; }
  int layers() const override { return J_; }
  int dim() const override { return d_; }
  bool has_oracle() const override { return false; }

  std::int64_t fallback_events() const { return fallback_events_; }
  /// Bin signature of a context (exposed for cell-statistics tests).
  std::vector<int> bin_of(const Vec& x) const;

 protected:
  Step do_step() override;
  RewardVector do_act(int arm) override;

 private:
  std::vector<LoggedInteraction> records_;
  int arms_ = 0;
  int J_ = 0;
  int d_ = 0;
  BinSpec bins_;
  std::vector<Vec> edges_;  // per-dim quantile bin edges
  std::map<std::pair<std::vector<int>, int>, std::vector<int>> cells_;
  RngStream pick_rng_;
  std::int64_t fallback_events_ = 0;
  int last_record_ = -1;
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Logged-interaction CSV: header ctx_0..ctx_{d-1},action,r_1..r_J.
/// Malformed rows raise ParseError naming the 1-based line number.
std::vector<LoggedInteraction> read_log_csv(const std::string& path);
void write_log_csv(const std::string& path,
                   const std::vector<LoggedInteraction>& records);

}  // namespace funnel::env
