#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "funnel/bandit.hpp"
#include "funnel/env.hpp"
#include "funnel/mtl.hpp"

namespace funnel::harness {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat key=value configuration with dotted section keys. '#' starts a
/// comment; whitespace around keys and values is trimmed.
class Config {
 public:
  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text,
                            const std::string& origin = "<string>");

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  std::string get(const std::string& key, const std::string& dflt) const;
  double get_num(const std::string& key, double dflt) const;
  int get_int(const std::string& key, int dflt) const;
  std::vector<double> get_list(const std::string& key,
                               const std::vector<double>& dflt) const;
  std::vector<std::string> get_names(const std::string& key,
                                     const std::vector<std::string>& dflt) const;
  void set(const std::string& key, const std::string& value);

  /// Sorted key=value dump; the input to the config hash.
  std::string canonical() const;

 private:
  std::map<std::string, std::string> kv_;
};

std::uint64_t fnv1a64(const std::string& s);
std::string hash_hex(const std::string& s);

/// Collects emitted files and writes manifest.json (config hash, artifact
/// version, file list; the timestamp is informational and excluded from
/// the hash).
class ResultBundle {
 public:
  ResultBundle(std::filesystem::path dir, std::string config_hash);

  const std::filesystem::path& dir() const { return dir_; }
  /// Register and return the absolute path for a file about to be written.
  std::filesystem::path file(const std::string& name);
  void write_manifest();
  const std::vector<std::string>& files() const { return files_; }

 private:
  std::filesystem::path dir_;
  std::string config_hash_;
  std::vector<std::string> files_;
};

// --- bound curves ----------------------------------------------------------

struct BoundCurvePoint {
  double n = 0;
  int layer = 0;
  double bound_mtl = 0;
  double bound_plain = 0;
  int j0 = 0;
  bool preconditions_ok = true;
};

/// Normalized Theorem-1 sweep: prefactor 1, q_j = (12-2j)/100,
/// n_j = decay^{j-1} n, n log-spaced over [n_min, n_max].
std::vector<BoundCurvePoint> bound_curves(const Config& cfg);
void run_bound_curves(const Config& cfg, ResultBundle& out);

// --- supervised simulation ---------------------------------------------------

struct SupervisedRun {
  Vec err_bar;  // per-layer L2 error of theta_bar
  Vec err_hat;  // per-layer L2 error of theta_hat
  bool covered = false;  // true params inside every refined-set ball
  bool fallback = false;
};

/// One seeded draw of the 5-layer sequential funnel study: sample a chain
/// truth, n funnel interactions, run the estimator, report errors.
SupervisedRun supervised_run(const Config& cfg, int n, std::uint64_t seed);

struct SupervisedResult {
  std::vector<int> n_sweep;
  std::vector<std::uint64_t> seeds;
  // err_*[k] is a (#seeds x J) matrix for n_sweep[k].
  std::vector<Mat> err_bar;
  std::vector<Mat> err_hat;
};

SupervisedResult supervised_sim(const Config& cfg,
                                const std::vector<std::uint64_t>& seeds);
void write_supervised_csv(const SupervisedResult& res, ResultBundle& out);
void run_supervised_sim(const Config& cfg,
                        const std::vector<std::uint64_t>& seeds,
                        ResultBundle& out);

// --- bandit simulation -------------------------------------------------------

struct BanditSimResult {
  std::vector<std::string> policies;
  // runs[policy][i] is the run for seeds[i].
  std::map<std::string, std::vector<bandit::RunRecord>> runs;
  std::vector<std::uint64_t> seeds;
  int T = 0;
};

bandit::PolicyConfig policy_config(const Config& cfg, const std::string& name,
                                   int A, int J, int d, int T, double d_x,
                                   double theta_scale);

BanditSimResult bandit_sim(const Config& cfg,
                           const std::vector<std::uint64_t>& seeds,
                           bool paper_scale);
void write_bandit_outputs(const BanditSimResult& res, ResultBundle& out);
void run_bandit_sim(const Config& cfg, const std::vector<std::uint64_t>& seeds,
                    bool paper_scale, ResultBundle& out);

// --- replay experiment -------------------------------------------------------

struct ReplayResult {
  std::vector<std::string> policies;
  std::vector<std::uint64_t> seeds;
  int T = 0;
  // Lift phase: policy-driven runs plus the random reference per seed.
  std::map<std::string, std::vector<bandit::RunRecord>> lift_runs;
  std::vector<bandit::RunRecord> random_runs;
  // Prediction phase (randomized actions): cumulative squared error curves.
  std::map<std::string, std::vector<Vec>> prederr;
};

ReplayResult replay_bandit(const Config& cfg, const std::string& log_path,
                           const std::vector<std::uint64_t>& seeds);
void write_replay_outputs(const ReplayResult& res, int checkpoint,
                          ResultBundle& out);
void run_replay_bandit(const Config& cfg, const std::string& log_path,
                       const std::vector<std::uint64_t>& seeds,
                       ResultBundle& out);

// --- synthetic log generator -------------------------------------------------

/// Emit n logged interactions from a synthetic profile funnel whose
/// conditional layer rates track `rates` (logit intercepts plus small
/// context and arm effects), actions uniformly random.
std::vector<env::LoggedInteraction> gen_log(const std::vector<double>& rates,
                                            int n, int arms, int d,
                                            std::uint64_t seed);

/// CLI entry point (subcommands: bounds, supervised, bandit, replay,
/// gen-log). Returns 0 on success, 1 on configuration errors, 2 on
/// runtime failures.
int cli_main(int argc, const char* const* argv);

}  // namespace funnel::harness
