#include "funnel/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace funnel::env {

RewardVector funnel_sample(const Funnel& fu, const Vec& x, RngStream& rng) {
  RewardVector r(fu.J);
  int running = 1;
  for (int j = 1; j <= fu.J; ++j) {
    const double p = glm::mu(fu.mean, x.dot(fu.stack.layer(j)));
    const int z = rng.bernoulli(p) ? 1 : 0;
    running &= z;
    r(j - 1) = running;
  }
  return r;
}

double default_context_cap(int d, double sigma_x) {
  // Wilson-Hilferty: chi2_q(p, k) ~ k (1 - 2/(9k) + z_p sqrt(2/(9k)))^3.
  const double z = 3.090232306167814;  // Phi^{-1}(0.999)
  const double k = static_cast<double>(d);
  const double t = 1.0 - 2.0 / (9.0 * k) + z * std::sqrt(2.0 / (9.0 * k));
  return sigma_x * std::sqrt(k * t * t * t);
}

Vec sample_context(const ContextDistribution& dist, RngStream& rng) {
  if (dist.kind != ContextDistribution::Kind::Gaussian) {
    throw std::logic_error("sample_context: replay contexts come from the log");
  }
  Vec x(dist.d);
  for (int i = 0; i < dist.d; ++i) x(i) = dist.sigma_x * rng.normal();
  if (dist.clip_norm > 0.0) {
    const double n = x.norm();
    if (n > dist.clip_norm) x *= dist.clip_norm / n;
  }
  return x;
}

const BanditEnv::Step& BanditEnv::step() {
  if (pending_act_) {
    throw std::logic_error("BanditEnv: step() called with an act() pending");
  }
  current_ = do_step();
  pending_act_ = true;
  return current_;
}

RewardVector BanditEnv::act(int arm) {
  if (!pending_act_) {
    throw std::logic_error("BanditEnv: act() called before step()");
  }
  if (arm < 0 || arm >= arms()) {
    throw std::out_of_range("BanditEnv: arm out of range");
  }
  pending_act_ = false;
  return do_act(arm);
}

SimBanditEnv::SimBanditEnv(std::vector<Funnel> funnels,
                           ContextDistribution ctx, std::uint64_t seed)
    : funnels_(std::move(funnels)),
      ctx_(ctx),
      ctx_rng_(make_stream(seed, stream::kContexts)) {
  if (funnels_.empty()) throw std::invalid_argument("SimBanditEnv: no arms");
  for (std::size_t a = 0; a < funnels_.size(); ++a) {
    arm_rngs_.push_back(
        make_stream(seed, stream::kArmBase + static_cast<std::uint32_t>(a)));
  }
}

double SimBanditEnv::true_value(const Vec& x, int a) const {
  const Funnel& fu = funnels_[a];
  return glm::predict_funnel(fu.mean, fu.stack, x, fu.J);
}

BanditEnv::Step SimBanditEnv::do_step() {
  Step s;
  s.x = sample_context(ctx_, ctx_rng_);
  s.oracle.resize(arms());
  for (int a = 0; a < arms(); ++a) s.oracle(a) = true_value(s.x, a);
  last_x_ = s.x;
  return s;
}

RewardVector SimBanditEnv::do_act(int arm) {
  return funnel_sample(funnels_[arm], last_x_, arm_rngs_[arm]);
}

SimBanditEnv gen_sequential_bandit_env(int A, int J, int d, double sigma,
                                       double sigma_x, std::uint64_t seed) {
  if (A < 1 || J < 1 || d < 1 || sigma < 0.0 || sigma_x <= 0.0) {
    throw std::invalid_argument("gen_sequential_bandit_env: bad shape");
  }
  ContextDistribution ctx;
  ctx.kind = ContextDistribution::Kind::Gaussian;
  ctx.d = d;
  ctx.sigma_x = sigma_x;
  ctx.clip_norm = default_context_cap(d, sigma_x);

  // theta norms stay near sigma * sqrt(d * (1 + sum 1/j)); domain bound uses
  // a generous multiple of that scale.
  double var_sum = 1.0;
  for (int j = 2; j <= J; ++j) var_sum += 1.0 / j;
  const double theta_scale = sigma * std::sqrt(static_cast<double>(d) * var_sum);
  const glm::MeanFunction mean =
      glm::MeanFunction::logistic_for(ctx.clip_norm, 3.0 * theta_scale);

  std::vector<Funnel> funnels(A);
  for (int a = 0; a < A; ++a) {
    RngStream rng = make_stream(
        seed, stream::kArmParams + static_cast<std::uint32_t>(a));
    glm::ThetaStack stack(d, J);
    Vec prev = Vec::Zero(d);
    for (int j = 1; j <= J; ++j) {
      const double sd = (j == 1) ? sigma : sigma / std::sqrt(static_cast<double>(j));
      Vec th(d);
      for (int i = 0; i < d; ++i) th(i) = prev(i) + sd * rng.normal();
      stack.set_layer(j, th);
      prev = th;
    }
    funnels[a] = Funnel{J, std::move(stack), mean};
  }
  return SimBanditEnv(std::move(funnels), ctx, seed);
}

ReplayEnv::ReplayEnv(std::vector<LoggedInteraction> records, int arms,
                     BinSpec bins, std::uint64_t seed)
    : records_(std::move(records)),
      arms_(arms),
      bins_(bins),
      pick_rng_(make_stream(seed, stream::kReplayPick)) {
  if (records_.empty()) throw std::invalid_argument("ReplayEnv: empty log");
  d_ = static_cast<int>(records_.front().context.size());
  J_ = static_cast<int>(records_.front().rewards.size());

  // Quantile bin edges per dimension (interior edges only).
  const int B = std::max(1, bins.bins_per_dim);
  edges_.resize(d_);
  std::vector<double> col(records_.size());
  for (int k = 0; k < d_; ++k) {
    for (std::size_t i = 0; i < records_.size(); ++i)
      col[i] = records_[i].context(k);
    std::sort(col.begin(), col.end());
    Vec e(B - 1);
    for (int b = 1; b < B; ++b) {
      // Edge = last value of the lower quantile block; ties bin low.
      std::size_t idx = static_cast<std::size_t>(
          static_cast<double>(b) * records_.size() / B);
      idx = std::min(std::max<std::size_t>(idx, 1), records_.size()) - 1;
      e(b - 1) = col[idx];
    }
    edges_[k] = e;
  }

  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& rec = records_[i];
    if (rec.action < 0 || rec.action >= arms_) {
      throw std::invalid_argument("ReplayEnv: action out of range in log");
    }
    cells_[{bin_of(rec.context), rec.action}].push_back(static_cast<int>(i));
  }
}

std::vector<int> ReplayEnv::bin_of(const Vec& x) const {
  std::vector<int> sig(d_);
  for (int k = 0; k < d_; ++k) {
    const Vec& e = edges_[k];
    int b = 0;
    while (b < e.size() && x(k) > e(b)) ++b;
    sig[k] = b;
  }
  return sig;
}

BanditEnv::Step ReplayEnv::do_step() {
  last_record_ = static_cast<int>(
      pick_rng_.uniform_int(static_cast<std::uint32_t>(records_.size())));
  Step s;
  s.x = records_[last_record_].context;
  return s;
}

RewardVector ReplayEnv::do_act(int arm) {
  const auto sig = bin_of(records_[last_record_].context);
  auto it = cells_.find({sig, arm});
  if (it == cells_.end() || it->second.empty()) {
    ++fallback_events_;
    if (bins_.fallback == BinSpec::Fallback::ZeroReward) {
      return RewardVector::Zero(J_);
    }
    // Borrow from the nearest non-empty bin with the same action
    // (L1 distance on bin indices; ties keep the lexicographically
    // smallest signature for determinism).
    const std::vector<int>* best = nullptr;
    long best_dist = -1;
    for (const auto& [key, cell] : cells_) {
      if (key.second != arm || cell.empty()) continue;
      long dist = 0;
      for (int k = 0; k < d_; ++k) dist += std::abs(key.first[k] - sig[k]);
      if (best == nullptr || dist < best_dist) {
        best = &cell;
        best_dist = dist;
      }
    }
    if (best == nullptr) return RewardVector::Zero(J_);
    const int pick = static_cast<int>(
        pick_rng_.uniform_int(static_cast<std::uint32_t>(best->size())));
    return records_[(*best)[pick]].rewards;
  }
  const auto& cell = it->second;
  const int pick = static_cast<int>(
      pick_rng_.uniform_int(static_cast<std::uint32_t>(cell.size())));
  return records_[cell[pick]].rewards;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::vector<LoggedInteraction> read_log_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open log file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file");

  const auto header = split_csv(line);
  int d = 0, J = 0;
  for (const auto& h : header) {
    if (h.rfind("ctx_", 0) == 0) ++d;
    else if (h.rfind("r_", 0) == 0) ++J;
  }
  if (d == 0 || J == 0 ||
      header.size() != static_cast<std::size_t>(d + 1 + J) ||
      header[d] != "action") {
    throw ParseError(path + ": line 1: bad header (want ctx_*,action,r_*)");
  }

  std::vector<LoggedInteraction> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != header.size()) {
      throw ParseError(path + ": line " + std::to_string(lineno) +
                       ": wrong field count");
    }
    LoggedInteraction rec;
    rec.context.resize(d);
    rec.rewards.resize(J);
    try {
      std::size_t pos = 0;
      for (int k = 0; k < d; ++k) {
        rec.context(k) = std::stod(f[k], &pos);
        if (pos != f[k].size()) throw std::invalid_argument(f[k]);
      }
      rec.action = std::stoi(f[d], &pos);
      if (pos != f[d].size()) throw std::invalid_argument(f[d]);
      int prev = 1;
      for (int j = 0; j < J; ++j) {
        const int r = std::stoi(f[d + 1 + j], &pos);
        if (pos != f[d + 1 + j].size() || (r != 0 && r != 1) || r > prev) {
          throw std::invalid_argument(f[d + 1 + j]);
        }
        rec.rewards(j) = r;
        prev = r;
      }
    } catch (const std::exception&) {
      throw ParseError(path + ": line " + std::to_string(lineno) +
                       ": malformed row");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void write_log_csv(const std::string& path,
                   const std::vector<LoggedInteraction>& records) {
  if (records.empty()) {
    throw std::invalid_argument("write_log_csv: nothing to write");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  const int d = static_cast<int>(records.front().context.size());
  const int J = static_cast<int>(records.front().rewards.size());
  for (int k = 0; k < d; ++k) out << "ctx_" << k << ",";
  out << "action";
  for (int j = 1; j <= J; ++j) out << ",r_" << j;
  out << "\n";
  char buf[32];
  for (const auto& rec : records) {
    for (int k = 0; k < d; ++k) {
      std::snprintf(buf, sizeof(buf), "%.9g", rec.context(k));
      out << buf << ",";
    }
    out << rec.action;
    for (int j = 0; j < J; ++j) out << "," << rec.rewards(j);
    out << "\n";
  }
}

}  // namespace funnel::env
