#include "funnel/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"

namespace funnel::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

std::string format_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

double mean_of(const Vec& v) { return v.size() ? v.mean() : 0.0; }

double sd_of(const Vec& v) {
  if (v.size() < 2) return 0.0;
  const double m = v.mean();
  return std::sqrt((v.array() - m).square().sum() / (v.size() - 1));
}

int worker_count(const Config& cfg, int tasks) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  const int w = cfg.get_int("harness.threads", hw);
  return std::max(1, std::min(w, tasks));
}

template <typename F>
void parallel_for(int n_tasks, int workers, F&& f) {
  if (workers <= 1 || n_tasks <= 1) {
    for (int i = 0; i < n_tasks; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(n_tasks);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n_tasks; i = next.fetch_add(1)) {
        try {
          f(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

Config Config::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_string(ss.str(), path);
}

Config Config::from_string(const std::string& text, const std::string& origin) {
  Config c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ": line " + std::to_string(lineno) +
                        ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(origin + ": line " + std::to_string(lineno) +
                        ": empty key");
    }
    c.kv_[key] = val;
  }
  return c;
}

std::string Config::get(const std::string& key, const std::string& dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : it->second;
}

double Config::get_num(const std::string& key, double dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  try {
    std::size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::invalid_argument(it->second);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: " + it->second);
  }
}

int Config::get_int(const std::string& key, int dflt) const {
  const double v = get_num(key, dflt);
  const int i = static_cast<int>(std::llround(v));
  if (std::abs(v - i) > 1e-9) {
    throw ConfigError("config key '" + key + "': not an integer");
  }
  return i;
}

std::vector<double> Config::get_list(const std::string& key,
                                     const std::vector<double>& dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  std::vector<double> out;
  for (const auto& tok : split(it->second, ',')) {
    if (tok.empty()) continue;
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "': bad list entry: " + tok);
    }
  }
  return out;
}

std::vector<std::string> Config::get_names(
    const std::string& key, const std::vector<std::string>& dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  std::vector<std::string> out;
  for (const auto& tok : split(it->second, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

void Config::set(const std::string& key, const std::string& value) {
  kv_[key] = value;
}

std::string Config::canonical() const {
  std::string out;
  for (const auto& [k, v] : kv_) {
    out += k;
    out += "=";
    out += v;
    out += "\n";
  }
  return out;
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hash_hex(const std::string& s) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(s)));
  return buf;
}

// ---------------------------------------------------------------------------
// ResultBundle

ResultBundle::ResultBundle(fs::path dir, std::string config_hash)
    : dir_(std::move(dir)), config_hash_(std::move(config_hash)) {
  fs::create_directories(dir_);
}

fs::path ResultBundle::file(const std::string& name) {
  files_.push_back(name);
  return dir_ / name;
}

void ResultBundle::write_manifest() {
  nlohmann::json j;
  j["artifact_version"] = "1.0.0";
  j["config_hash"] = config_hash_;
  j["files"] = files_;
  const auto now = std::chrono::system_clock::now();
  j["created_unix"] =
      std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch())
          .count();
  std::ofstream out(dir_ / "manifest.json");
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Bound curves

std::vector<BoundCurvePoint> bound_curves(const Config& cfg) {
  const int J = cfg.get_int("bounds.J", 5);
  const double n_min = cfg.get_num("bounds.n_min", 1e2);
  const double n_max = cfg.get_num("bounds.n_max", 1e6);
  const int points = cfg.get_int("bounds.points", 41);
  const double decay = cfg.get_num("bounds.decay", 0.2);

  std::vector<double> q_default(J);
  for (int j = 1; j <= J; ++j) q_default[j - 1] = (12.0 - 2.0 * j) / 100.0;
  const auto qv = cfg.get_list("bounds.q", q_default);
  if (static_cast<int>(qv.size()) != J) {
    throw ConfigError("bounds.q must have bounds.J entries");
  }

  mtl::BoundInputs b;
  b.J = J;
  b.q = Eigen::Map<const Vec>(qv.data(), J);
  b.n.resize(J);
  b.d = 1.0;
  b.c_mu = 1.0;
  b.lambda = 1.0;
  b.kappa = 1.0;
  b.delta = 0.05;
  b.c_delta_override = 1.0;  // prefactor ||x|| c_delta sqrt(d)/(c_mu lambda) = 1

  std::vector<BoundCurvePoint> out;
  for (int k = 0; k < points; ++k) {
    const double frac = points == 1 ? 0.0 : static_cast<double>(k) / (points - 1);
    const double n = n_min * std::pow(n_max / n_min, frac);
    for (int j = 1; j <= J; ++j) b.n(j - 1) = std::pow(decay, j - 1) * n;
    const auto thr = mtl::threshold_j0(b);
    for (int j = 1; j <= J; ++j) {
      BoundCurvePoint p;
      p.n = n;
      p.layer = j;
      p.j0 = thr.j0;
      p.preconditions_ok = thr.preconditions_ok;
      p.bound_mtl = mtl::sequential_bound(b, 1.0, j, thr.j0);
      p.bound_plain = mtl::sequential_bound(b, 1.0, j, J + 1);
      out.push_back(p);
    }
  }
  return out;
}

void run_bound_curves(const Config& cfg, ResultBundle& out) {
  const auto pts = bound_curves(cfg);
  std::ofstream csv(out.file("bounds.csv"));
  csv << "n,layer,bound_mtl,bound_plain,j0\n";
  bool flagged = false;
  for (const auto& p : pts) {
    csv << format_num(p.n) << "," << p.layer << "," << format_num(p.bound_mtl)
        << "," << format_num(p.bound_plain) << "," << p.j0 << "\n";
    flagged |= !p.preconditions_ok;
  }
  if (flagged) {
    std::cerr << "warning: some rows violate the sequential-bound "
                 "preconditions (n ratio or q monotonicity)\n";
  }
}

// ---------------------------------------------------------------------------
// Supervised simulation

namespace {

Vec random_unit(int d, RngStream& rng) {
  Vec u(d);
  double n = 0.0;
  do {
    for (int i = 0; i < d; ++i) u(i) = rng.normal();
    n = u.norm();
  } while (n == 0.0);
  return u / n;
}

struct SupervisedSetup {
  int d, J;
  Vec q;
  double sigma_x, d_x, delta, c_delta_scale;
};

SupervisedSetup supervised_setup(const Config& cfg) {
  SupervisedSetup s;
  s.d = cfg.get_int("sup.d", 5);
  s.J = cfg.get_int("sup.J", 5);
  std::vector<double> q_default(s.J);
  for (int j = 1; j <= s.J; ++j) q_default[j - 1] = 1.2 - 0.2 * j;
  const auto qv = cfg.get_list("sup.q", q_default);
  if (static_cast<int>(qv.size()) != s.J) {
    throw ConfigError("sup.q must have sup.J entries");
  }
  s.q = Eigen::Map<const Vec>(qv.data(), s.J);
  s.sigma_x = cfg.get_num("sup.sigma_x", 1.0);
  s.d_x = env::default_context_cap(s.d, s.sigma_x);
  s.delta = cfg.get_num("sup.delta", 0.1);
  // The theoretical 80 d_x sqrt(2 ln(8J/delta)) / c_mu prefactor is hugely
  // conservative here (c_mu is the logistic derivative at the worst
  // attainable |x.theta|); this scale brings the radius to a few times the
  // observed estimation error, which keeps coverage while letting the
  // refined sets bind.
  s.c_delta_scale = cfg.get_num("sup.c_delta_scale", 5e-9);
  return s;
}

}  // namespace

SupervisedRun supervised_run(const Config& cfg, int n, std::uint64_t seed) {
  const SupervisedSetup s = supervised_setup(cfg);

  // Chain truth: theta_1 on the q_1 sphere, then unit-direction steps of
  // length q_{j+1} so the stack sits inside the sequential class.
  RngStream truth_rng = make_stream(seed, stream::kArmParams);
  glm::ThetaStack truth(s.d, s.J);
  Vec th = random_unit(s.d, truth_rng) * s.q(0);
  truth.set_layer(1, th);
  for (int j = 2; j <= s.J; ++j) {
    th += random_unit(s.d, truth_rng) * s.q(j - 1);
    truth.set_layer(j, th);
  }

  const glm::MeanFunction f =
      glm::MeanFunction::logistic_for(s.d_x, s.q.sum());
  env::ContextDistribution ctx;
  ctx.d = s.d;
  ctx.sigma_x = s.sigma_x;
  ctx.clip_norm = s.d_x;

  RngStream ctx_rng = make_stream(seed, stream::kContexts);
  RngStream rew_rng = make_stream(seed, stream::kArmBase);
  Mat X(n, s.d);
  Eigen::MatrixXi R(n, s.J);
  env::Funnel fu{s.J, truth, f};
  for (int i = 0; i < n; ++i) {
    const Vec x = env::sample_context(ctx, ctx_rng);
    X.row(i) = x.transpose();
    R.row(i) = env::funnel_sample(fu, x, rew_rng).transpose();
  }

  mtl::MtlOptions opts;
  opts.delta = s.delta;
  opts.c_delta_scale = s.c_delta_scale;
  opts.d_x = s.d_x;
  const auto est = mtl::mtl_estimate(
      glm::LayeredDataset::from_observations(X, R),
      mtl::ConstraintSet::sequential(s.q), f, s.delta, opts);

  SupervisedRun out;
  out.err_bar.resize(s.J);
  out.err_hat.resize(s.J);
  out.covered = true;
  for (int j = 1; j <= s.J; ++j) {
    out.err_bar(j - 1) = (est.theta_bar.layer(j) - truth.layer(j)).norm();
    out.err_hat(j - 1) = (est.theta_hat.layer(j) - truth.layer(j)).norm();
    for (const auto& ball : est.sets[j - 1]) {
      if (!ball.contains(truth.layer(j), 1e-9)) out.covered = false;
    }
  }
  out.fallback = est.any_fallback();
  return out;
}

SupervisedResult supervised_sim(const Config& cfg,
                                const std::vector<std::uint64_t>& seeds) {
  SupervisedResult res;
  const auto ns = cfg.get_list("sup.n_sweep", {300, 1000, 3000, 10000});
  for (double n : ns) res.n_sweep.push_back(static_cast<int>(n));
  res.seeds = seeds;
  const int J = cfg.get_int("sup.J", 5);
  const int S = static_cast<int>(seeds.size());
  res.err_bar.assign(res.n_sweep.size(), Mat::Zero(S, J));
  res.err_hat.assign(res.n_sweep.size(), Mat::Zero(S, J));

  const int cells = static_cast<int>(res.n_sweep.size()) * S;
  parallel_for(cells, worker_count(cfg, cells), [&](int c) {
    const int k = c / S;
    const int si = c % S;
    const auto run = supervised_run(cfg, res.n_sweep[k], seeds[si]);
    res.err_bar[k].row(si) = run.err_bar.transpose();
    res.err_hat[k].row(si) = run.err_hat.transpose();
  });
  return res;
}

void write_supervised_csv(const SupervisedResult& res, ResultBundle& out) {
  std::ofstream csv(out.file("supervised.csv"));
  csv << "n,layer,err_bar,err_hat,err_bar_sd,err_hat_sd\n";
  for (std::size_t k = 0; k < res.n_sweep.size(); ++k) {
    for (int j = 0; j < res.err_bar[k].cols(); ++j) {
      const Vec eb = res.err_bar[k].col(j);
      const Vec eh = res.err_hat[k].col(j);
      csv << res.n_sweep[k] << "," << (j + 1) << "," << format_num(mean_of(eb))
          << "," << format_num(mean_of(eh)) << "," << format_num(sd_of(eb))
          << "," << format_num(sd_of(eh)) << "\n";
    }
  }
}

void run_supervised_sim(const Config& cfg,
                        const std::vector<std::uint64_t>& seeds,
                        ResultBundle& out) {
  const auto res = supervised_sim(cfg, seeds);
  write_supervised_csv(res, out);
}

// ---------------------------------------------------------------------------
// Bandit simulation

bandit::PolicyConfig policy_config(const Config& cfg, const std::string& name,
                                   int A, int J, int d, int T, double d_x,
                                   double theta_scale) {
  bandit::PolicyConfig pc;
  pc.kind = bandit::policy_from_name(name);
  pc.arms = A;
  pc.layers = J;
  pc.dim = d;
  pc.horizon = T;
  // Per-policy overrides (policy.<name>.<key>) fall back to shared keys.
  auto num = [&](const std::string& key, double dflt) {
    return cfg.get_num("policy." + name + "." + key,
                       cfg.get_num("policy." + key, dflt));
  };
  pc.epsilon = num("epsilon", 0.05);
  pc.lambda_pen = num("lambda_pen", 0.005);
  pc.alpha = num("alpha", 0.2);
  pc.delta = cfg.get_num("policy.delta", 0.05);
  pc.c_delta_scale = cfg.get_num("policy.c_delta_scale", 0.002);
  pc.d_x = d_x;
  pc.theta_norm_bound =
      cfg.get_num("policy.norm_cap", 3.0 * std::max(theta_scale, 1.0));
  pc.fit.norm_cap = pc.theta_norm_bound;
  pc.refit_dense_until = cfg.get_int("policy.refit_dense_until", 200);
  pc.refit_every_step = cfg.get_int("policy.refit_every_step", 0) != 0;

  const double q_scale = cfg.get_num("policy.q_scale", 2.0);
  const auto qv = cfg.get_list("policy.q", {});
  if (!qv.empty()) {
    if (static_cast<int>(qv.size()) != J) {
      throw ConfigError("policy.q must have env.J entries");
    }
    pc.q = Eigen::Map<const Vec>(qv.data(), J);
  } else {
    // High-probability slack for the generator's N(theta_{j-1}, sigma^2/j)
    // chain: q_j ~ q_scale * sigma * sqrt(d/j).
    const double sigma = cfg.get_num("env.sigma", 1.0);
    pc.q.resize(J);
    for (int j = 1; j <= J; ++j) {
      pc.q(j - 1) = q_scale * sigma * std::sqrt(static_cast<double>(d) / j);
    }
  }
  return pc;
}

BanditSimResult bandit_sim(const Config& cfg,
                           const std::vector<std::uint64_t>& seeds,
                           bool paper_scale) {
  const int A = paper_scale ? 50 : cfg.get_int("env.A", 10);
  const int J = paper_scale ? 8 : cfg.get_int("env.J", 4);
  const int d = paper_scale ? 45 : cfg.get_int("env.d", 10);
  const double sigma = cfg.get_num("env.sigma", 1.0);
  const double sigma_x =
      paper_scale ? 0.08 : cfg.get_num("env.sigma_x", 0.12);
  const int T = paper_scale ? 3000 : cfg.get_int("run.T", 2000);

  BanditSimResult res;
  res.seeds = seeds;
  res.T = T;
  res.policies = cfg.get_names(
      "policies", {"multilayer_sequential", "multilayer_clustered", "target",
                   "mix", "sequential", "random"});

  // The random reference is always run; lifts are measured against it.
  std::vector<std::string> to_run = res.policies;
  if (std::find(to_run.begin(), to_run.end(), "random") == to_run.end()) {
    to_run.push_back("random");
  }

  const double d_x = env::default_context_cap(d, sigma_x);
  double var_sum = 1.0;
  for (int j = 2; j <= J; ++j) var_sum += 1.0 / j;
  const double theta_scale = sigma * std::sqrt(d * var_sum);

  for (const auto& name : to_run) {
    res.runs[name].resize(seeds.size());
  }
  struct Cell {
    std::string policy;
    int seed_idx;
  };
  std::vector<Cell> cells;
  for (const auto& name : to_run) {
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      cells.push_back({name, static_cast<int>(i)});
    }
  }
  parallel_for(static_cast<int>(cells.size()),
               worker_count(cfg, static_cast<int>(cells.size())), [&](int c) {
                 const auto& cell = cells[c];
                 const std::uint64_t seed = seeds[cell.seed_idx];
                 auto e = env::gen_sequential_bandit_env(A, J, d, sigma,
                                                         sigma_x, seed);
                 auto pcfg = policy_config(cfg, cell.policy, A, J, d, T, d_x,
                                           theta_scale);
                 auto p = bandit::make_policy(pcfg);
                 res.runs[cell.policy][cell.seed_idx] =
                     bandit::run_policy(e, *p, T, seed);
               });
  return res;
}

namespace {

/// mean/sd per step of the cumulative-regret curves; audited against an
/// independent recomputation before anything is written.
struct Aggregate {
  Vec mean, sd;
};

Aggregate aggregate_curves(const std::vector<Vec>& curves) {
  const auto T = curves.front().size();
  Aggregate agg{Vec(T), Vec(T)};
  Vec tmp(static_cast<Eigen::Index>(curves.size()));
  for (Eigen::Index t = 0; t < T; ++t) {
    for (std::size_t s = 0; s < curves.size(); ++s) {
      tmp(static_cast<Eigen::Index>(s)) = curves[s](t);
    }
    agg.mean(t) = mean_of(tmp);
    agg.sd(t) = sd_of(tmp);
  }
  return agg;
}

void audit_aggregate(const Aggregate& agg, const std::vector<Vec>& curves) {
  // Recompute with a different accumulation order (per-curve running sums).
  const auto T = agg.mean.size();
  const double S = static_cast<double>(curves.size());
  Vec sum = Vec::Zero(T), sumsq = Vec::Zero(T);
  for (const auto& c : curves) {
    sum += c;
    sumsq += c.cwiseProduct(c);
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    const double m = sum(t) / S;
    const double var =
        curves.size() < 2 ? 0.0
                          : std::max(0.0, (sumsq(t) - S * m * m) / (S - 1.0));
    if (std::abs(m - agg.mean(t)) > 1e-9 * std::max(1.0, std::abs(m)) ||
        std::abs(std::sqrt(var) - agg.sd(t)) > 1e-6 * std::max(1.0, agg.sd(t)) + 1e-9) {
      throw std::logic_error("aggregate self-audit failed");
    }
  }
}

void write_run_files(const std::map<std::string, std::vector<bandit::RunRecord>>& runs,
                     const std::vector<std::uint64_t>& seeds,
                     ResultBundle& out) {
  for (const auto& [name, recs] : runs) {
    for (std::size_t i = 0; i < recs.size(); ++i) {
      std::ofstream nd(out.file("run_" + name + "_" + std::to_string(seeds[i]) +
                                ".ndjson"));
      nd << bandit::to_ndjson(recs[i]);
    }
  }
}

void write_summary(const std::map<std::string, std::vector<bandit::RunRecord>>& runs,
                   const std::vector<bandit::RunRecord>& random_ref,
                   const std::vector<std::uint64_t>& seeds, int T, int J,
                   bool has_oracle, ResultBundle& out) {
  std::ofstream csv(out.file("summary.csv"));
  csv << "seed,policy,T,final_cum_regret";
  for (int j = 1; j <= J; ++j) csv << ",lift_layer_" << j;
  csv << "\n";
  for (const auto& [name, recs] : runs) {
    for (std::size_t i = 0; i < recs.size(); ++i) {
      csv << seeds[i] << "," << name << "," << T << ",";
      csv << (has_oracle ? format_num(recs[i].steps.back().cum_regret) : "nan");
      const Vec lifts = bandit::layer_lifts(recs[i], random_ref[i]);
      for (int j = 0; j < J; ++j) csv << "," << format_num(lifts(j));
      csv << "\n";
    }
  }
}

}  // namespace

void write_bandit_outputs(const BanditSimResult& res, ResultBundle& out) {
  const int J = static_cast<int>(
      res.runs.begin()->second.front().steps.front().rewards.size());

  for (const auto& name : res.policies) {
    const auto& recs = res.runs.at(name);
    std::vector<Vec> curves;
    curves.reserve(recs.size());
    for (const auto& r : recs) curves.push_back(bandit::cumulative_regret(r));
    const auto agg = aggregate_curves(curves);
    audit_aggregate(agg, curves);
    std::ofstream csv(out.file("regret_" + name + ".csv"));
    csv << "t,mean_cum_regret,sd_cum_regret\n";
    for (Eigen::Index t = 0; t < agg.mean.size(); ++t) {
      csv << (t + 1) << "," << format_num(agg.mean(t)) << ","
          << format_num(agg.sd(t)) << "\n";
    }
  }

  write_run_files(res.runs, res.seeds, out);
  write_summary(res.runs, res.runs.at("random"), res.seeds, res.T, J, true,
                out);
}

void run_bandit_sim(const Config& cfg, const std::vector<std::uint64_t>& seeds,
                    bool paper_scale, ResultBundle& out) {
  const auto res = bandit_sim(cfg, seeds, paper_scale);
  write_bandit_outputs(res, out);
}

// ---------------------------------------------------------------------------
// Replay experiment

ReplayResult replay_bandit(const Config& cfg, const std::string& log_path,
                           const std::vector<std::uint64_t>& seeds) {
  const auto records = env::read_log_csv(log_path);
  int arms = cfg.get_int("replay.arms", 0);
  if (arms <= 0) {
    for (const auto& r : records) arms = std::max(arms, r.action + 1);
  }
  env::BinSpec bins;
  bins.bins_per_dim = cfg.get_int("replay.bins", 5);
  const std::string fb = cfg.get("replay.fallback", "zero");
  if (fb == "nearest") {
    bins.fallback = env::BinSpec::Fallback::NearestBin;
  } else if (fb != "zero") {
    throw ConfigError("replay.fallback must be 'zero' or 'nearest'");
  }
  const int T = cfg.get_int("replay.T", 10000);
  const int d = static_cast<int>(records.front().context.size());
  const int J = static_cast<int>(records.front().rewards.size());
  double d_x = 0.0;
  for (const auto& r : records) d_x = std::max(d_x, r.context.norm());

  ReplayResult res;
  res.seeds = seeds;
  res.T = T;
  res.policies = cfg.get_names(
      "policies", {"multilayer_sequential", "multilayer_clustered", "target",
                   "mix", "sequential"});

  res.random_runs.resize(seeds.size());
  for (const auto& name : res.policies) {
    res.lift_runs[name].resize(seeds.size());
    res.prederr[name].resize(seeds.size());
  }

  struct Cell {
    int kind;  // 0 = lift run, 1 = prediction run, 2 = random reference
    std::string policy;
    int seed_idx;
  };
  std::vector<Cell> cells;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    cells.push_back({2, "random", static_cast<int>(i)});
  }
  for (const auto& name : res.policies) {
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      cells.push_back({0, name, static_cast<int>(i)});
      cells.push_back({1, name, static_cast<int>(i)});
    }
  }

  parallel_for(static_cast<int>(cells.size()),
               worker_count(cfg, static_cast<int>(cells.size())), [&](int c) {
                 const auto& cell = cells[c];
                 const std::uint64_t seed = seeds[cell.seed_idx];
                 env::ReplayEnv e(records, arms, bins, seed);
                 auto pcfg = policy_config(cfg, cell.policy, arms, J, d, T,
                                           d_x, 1.0);
                 auto p = bandit::make_policy(pcfg);
                 if (cell.kind == 2) {
                   res.random_runs[cell.seed_idx] =
                       bandit::run_policy(e, *p, T, seed);
                 } else if (cell.kind == 0) {
                   res.lift_runs[cell.policy][cell.seed_idx] =
                       bandit::run_policy(e, *p, T, seed);
                 } else {
                   const auto rec = bandit::run_policy(e, *p, T, seed, true);
                   res.prederr[cell.policy][cell.seed_idx] =
                       bandit::cumulative_sq_prediction_error(rec);
                 }
               });
  return res;
}

void write_replay_outputs(const ReplayResult& res, int checkpoint,
                          ResultBundle& out) {
  const int J = static_cast<int>(
      res.random_runs.front().steps.front().rewards.size());

  std::ofstream lift(out.file("lift_table.csv"));
  lift << "policy,layer,lift_mean,lift_sd\n";
  for (const auto& name : res.policies) {
    const auto& recs = res.lift_runs.at(name);
    Mat lifts(static_cast<Eigen::Index>(recs.size()), J);
    for (std::size_t i = 0; i < recs.size(); ++i) {
      lifts.row(static_cast<Eigen::Index>(i)) =
          bandit::layer_lifts(recs[i], res.random_runs[i]).transpose();
    }
    for (int j = 0; j < J; ++j) {
      const Vec col = lifts.col(j);
      lift << name << "," << (j + 1) << "," << format_num(mean_of(col)) << ","
           << format_num(sd_of(col)) << "\n";
    }
  }

  std::ofstream pe(out.file("prederr.csv"));
  pe << "policy,t,mean_cum_sq_err,sd_cum_sq_err\n";
  for (const auto& name : res.policies) {
    const auto& curves = res.prederr.at(name);
    for (int t = checkpoint; t <= res.T; t += checkpoint) {
      Vec vals(static_cast<Eigen::Index>(curves.size()));
      for (std::size_t i = 0; i < curves.size(); ++i) {
        vals(static_cast<Eigen::Index>(i)) = curves[i](t - 1);
      }
      pe << name << "," << t << "," << format_num(mean_of(vals)) << ","
         << format_num(sd_of(vals)) << "\n";
    }
  }

  write_run_files(res.lift_runs, res.seeds, out);
  write_summary(res.lift_runs, res.random_runs, res.seeds, res.T, J, false,
                out);
}

void run_replay_bandit(const Config& cfg, const std::string& log_path,
                       const std::vector<std::uint64_t>& seeds,
                       ResultBundle& out) {
  const auto res = replay_bandit(cfg, log_path, seeds);
  write_replay_outputs(res, cfg.get_int("replay.checkpoint", 500), out);
}

// ---------------------------------------------------------------------------
// Synthetic log generator

std::vector<env::LoggedInteraction> gen_log(const std::vector<double>& rates,
                                            int n, int arms, int d,
                                            std::uint64_t seed) {
  if (rates.empty() || n <= 0 || arms <= 0 || d < 1) {
    throw std::invalid_argument("gen_log: bad shape");
  }
  for (double r : rates) {
    if (!(r > 0.0 && r < 1.0)) {
      throw std::invalid_argument("gen_log: rates must be in (0,1)");
    }
  }
  const int J = static_cast<int>(rates.size());
  const glm::MeanFunction f = glm::MeanFunction::logistic(20.0);

  // Per-arm truth: intercept at logit(rate) plus an arm effect, small
  // coefficients on the non-bias features. Feature 0 is a constant 1.
  // Arm effects are de-meaned per layer so the population conversion rate
  // stays pinned to the requested one.
  RngStream jit_rng = make_stream(seed, stream::kArmParams + (1u << 16));
  Mat arm_effect(arms, J);
  for (int j = 0; j < J; ++j) {
    for (int a = 0; a < arms; ++a) arm_effect(a, j) = 0.15 * jit_rng.normal();
    arm_effect.col(j).array() -= arm_effect.col(j).mean();
  }
  std::vector<env::Funnel> funnels(arms);
  for (int a = 0; a < arms; ++a) {
    RngStream prm = make_stream(seed, stream::kArmParams + a);
    glm::ThetaStack stack(d, J);
    for (int j = 1; j <= J; ++j) {
      Vec th(d);
      const double base = std::log(rates[j - 1] / (1.0 - rates[j - 1]));
      th(0) = base + arm_effect(a, j - 1);
      for (int k = 1; k < d; ++k) th(k) = 0.08 * prm.normal();
      stack.set_layer(j, th);
    }
    funnels[a] = env::Funnel{J, std::move(stack), f};
  }

  RngStream ctx_rng = make_stream(seed, stream::kContexts);
  RngStream act_rng = make_stream(seed, stream::kActions);
  std::vector<RngStream> rew;
  for (int a = 0; a < arms; ++a) rew.push_back(make_stream(seed, stream::kArmBase + a));

  std::vector<env::LoggedInteraction> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    env::LoggedInteraction rec;
    rec.context.resize(d);
    rec.context(0) = 1.0;
    for (int k = 1; k < d; ++k) rec.context(k) = 0.5 * ctx_rng.normal();
    rec.action = static_cast<int>(act_rng.uniform_int(arms));
    rec.rewards = env::funnel_sample(funnels[rec.action], rec.context,
                                     rew[rec.action]);
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CLI

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& tok : split(s, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stoull(tok));
  }
  if (out.empty()) throw ConfigError("--seed: need at least one seed");
  return out;
}

Config load_config(const std::string& path) {
  if (path.empty()) return Config{};
  return Config::from_file(path);
}

std::string seeds_string(const std::vector<std::uint64_t>& seeds) {
  std::string s;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(seeds[i]);
  }
  return s;
}

std::string bundle_hash(const Config& cfg,
                        const std::vector<std::uint64_t>& seeds,
                        const std::string& extra = "") {
  return hash_hex(cfg.canonical() + "seeds=" + seeds_string(seeds) + "\n" +
                  extra);
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Multi-task contextual bandits with funnel structure"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "results";
  std::string seed_str = "1,2,3,4,5,6,7,8,9,10";
  std::string log_path;
  bool paper_scale = false;

  auto add_common = [&](CLI::App* sub, bool with_seeds = true) {
    sub->add_option("--config", config_path, "flat key=value config file");
    sub->add_option("--out", out_dir, "output directory");
    if (with_seeds) sub->add_option("--seed", seed_str, "comma-separated seeds");
  };

  auto* sc_bounds =
      app.add_subcommand("bounds", "prediction-error bound curves (CSV)");
  add_common(sc_bounds, false);

  auto* sc_sup =
      app.add_subcommand("supervised", "sequential-funnel estimation study");
  add_common(sc_sup);

  auto* sc_bandit = app.add_subcommand("bandit", "simulated bandit regret runs");
  add_common(sc_bandit);
  sc_bandit->add_flag("--paper-scale", paper_scale,
                      "A=50 J=8 d=45 T=3000 configuration");

  auto* sc_replay = app.add_subcommand("replay", "logged-data replay runs");
  add_common(sc_replay);
  sc_replay->add_option("--log", log_path, "logged-interaction CSV")
      ->required();

  auto* sc_genlog = app.add_subcommand("gen-log", "synthetic interaction log");
  std::string rates_str = "0.1,0.04,0.025";
  int gl_n = 100000, gl_arms = 6, gl_d = 5;
  std::uint64_t gl_seed = 1;
  std::string gl_out = "log.csv";
  sc_genlog->add_option("--rates", rates_str, "conditional layer rates");
  sc_genlog->add_option("--n", gl_n, "record count");
  sc_genlog->add_option("--arms", gl_arms, "action count");
  sc_genlog->add_option("--d", gl_d, "context dimension (feature 0 is a bias)");
  sc_genlog->add_option("--seed", gl_seed, "seed");
  sc_genlog->add_option("--out", gl_out, "output CSV path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (sc_genlog->parsed()) {
      std::vector<double> rates;
      for (const auto& tok : split(rates_str, ','))
        if (!tok.empty()) rates.push_back(std::stod(tok));
      const auto log = gen_log(rates, gl_n, gl_arms, gl_d, gl_seed);
      env::write_log_csv(gl_out, log);
      // Empirical conditional rates for a quick sanity read.
      std::vector<std::int64_t> seen(rates.size(), 0), hits(rates.size(), 0);
      for (const auto& rec : log) {
        int prev = 1;
        for (int j = 0; j < static_cast<int>(rates.size()); ++j) {
          if (prev == 1) {
            ++seen[j];
            hits[j] += rec.rewards(j);
          }
          prev = rec.rewards(j);
        }
      }
      std::cout << "wrote " << log.size() << " records to " << gl_out << "\n";
      std::cout << "layer,target_rate,empirical_rate,observations\n";
      for (std::size_t j = 0; j < rates.size(); ++j) {
        const double emp = seen[j] ? static_cast<double>(hits[j]) / seen[j] : 0.0;
        std::cout << (j + 1) << "," << format_num(rates[j]) << ","
                  << format_num(emp) << "," << seen[j] << "\n";
      }
      return 0;
    }

    Config cfg = load_config(config_path);
    const auto seeds = parse_seeds(seed_str);

    if (sc_bounds->parsed()) {
      ResultBundle out(out_dir, bundle_hash(cfg, {}, "experiment=bounds"));
      run_bound_curves(cfg, out);
      out.write_manifest();
      const auto pts = bound_curves(cfg);
      std::cout << "n,j0\n";
      double last_n = -1;
      for (const auto& p : pts) {
        if (p.n != last_n) {
          std::cout << format_num(p.n) << "," << p.j0 << "\n";
          last_n = p.n;
        }
      }
      std::cout << "wrote " << (out.dir() / "bounds.csv").string() << "\n";
      return 0;
    }

    if (sc_sup->parsed()) {
      ResultBundle out(out_dir, bundle_hash(cfg, seeds, "experiment=supervised"));
      const auto res = supervised_sim(cfg, seeds);
      write_supervised_csv(res, out);
      out.write_manifest();
      std::cout << "n,layer,err_bar,err_hat\n";
      for (std::size_t k = 0; k < res.n_sweep.size(); ++k) {
        for (int j = 0; j < res.err_bar[k].cols(); ++j) {
          std::cout << res.n_sweep[k] << "," << (j + 1) << ","
                    << format_num(mean_of(res.err_bar[k].col(j))) << ","
                    << format_num(mean_of(res.err_hat[k].col(j))) << "\n";
        }
      }
      return 0;
    }

    if (sc_bandit->parsed()) {
      ResultBundle out(out_dir,
                       bundle_hash(cfg, seeds,
                                   paper_scale ? "experiment=bandit,paper" :
                                                 "experiment=bandit"));
      const auto res = bandit_sim(cfg, seeds, paper_scale);
      write_bandit_outputs(res, out);
      out.write_manifest();
      std::cout << "policy,final_regret_mean,final_regret_sd\n";
      for (const auto& name : res.policies) {
        Vec finals(static_cast<Eigen::Index>(seeds.size()));
        for (std::size_t i = 0; i < seeds.size(); ++i) {
          finals(static_cast<Eigen::Index>(i)) =
              res.runs.at(name)[i].steps.back().cum_regret;
        }
        std::cout << name << "," << format_num(mean_of(finals)) << ","
                  << format_num(sd_of(finals)) << "\n";
      }
      return 0;
    }

    if (sc_replay->parsed()) {
      ResultBundle out(out_dir, bundle_hash(cfg, seeds, "experiment=replay"));
      run_replay_bandit(cfg, log_path, seeds, out);
      out.write_manifest();
      std::ifstream lift(out.dir() / "lift_table.csv");
      std::cout << lift.rdbuf();
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace funnel::harness
