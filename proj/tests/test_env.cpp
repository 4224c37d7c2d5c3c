#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <map>

#include "funnel/env.hpp"
#include "oracles.hpp"

using namespace funnel;

namespace {

env::Funnel zero_funnel(int d, int J) {
  return env::Funnel{J, glm::ThetaStack(d, J),
                     glm::MeanFunction::logistic(5.0)};
}

}  // namespace

TEST_CASE("funnel_sample") {
  SUBCASE("layer-1 failure zeroes the chain") {
    glm::ThetaStack stack(2, 3);
    Vec th(2);
    th << -100.0, 0.0;  // mu ~ 0 for x with positive first coordinate
    stack.set_layer(1, th);
    env::Funnel fu{3, stack, glm::MeanFunction::logistic(200.0)};
    RngStream rng = make_stream(1, stream::kScratch);
    Vec x(2);
    x << 1.0, 0.0;
    for (int i = 0; i < 200; ++i) {
      const RewardVector r = env::funnel_sample(fu, x, rng);
      CHECK(r.sum() == 0);
    }
  }

  SUBCASE("zero parameters halve each layer") {
    const auto fu = zero_funnel(2, 3);
    RngStream rng = make_stream(2, stream::kScratch);
    Vec x = Vec::Ones(2);
    const int n = 100000;
    Eigen::Vector3i counts = Eigen::Vector3i::Zero();
    for (int i = 0; i < n; ++i) {
      counts += env::funnel_sample(fu, x, rng);
    }
    for (int j = 0; j < 3; ++j) {
      const double p = std::pow(0.5, j + 1);
      CHECK(oracle::binomial_sigmas(counts(j), n, p) < 3.0);
    }
  }

  SUBCASE("rewards are always monotone") {
    glm::ThetaStack stack(3, 4);
    RngStream prm = make_stream(3, stream::kScratch);
    for (int j = 1; j <= 4; ++j) {
      Vec th(3);
      for (int i = 0; i < 3; ++i) th(i) = prm.normal();
      stack.set_layer(j, th);
    }
    env::Funnel fu{4, stack, glm::MeanFunction::logistic(10.0)};
    RngStream rng = make_stream(4, stream::kScratch);
    for (int i = 0; i < 20000; ++i) {
      Vec x(3);
      for (int k = 0; k < 3; ++k) x(k) = prm.normal();
      const RewardVector r = env::funnel_sample(fu, x, rng);
      for (int j = 1; j < 4; ++j) CHECK(r(j) <= r(j - 1));
    }
  }
}

TEST_CASE("observation sparsity at depth") {
  // All-zero parameters, J=8: layer-j observations (r_{j-1}=1) thin at
  // 0.5^{j-1} per step.
  const auto fu = zero_funnel(2, 8);
  RngStream rng = make_stream(5, stream::kScratch);
  Vec x = Vec::Ones(2);
  const int n = 20000;
  std::vector<int> obs(8, 0);
  for (int i = 0; i < n; ++i) {
    const RewardVector r = env::funnel_sample(fu, x, rng);
    int prev = 1;
    for (int j = 0; j < 8; ++j) {
      obs[j] += prev;
      prev = r(j);
    }
  }
  for (int j = 0; j < 8; ++j) {
    const double p = std::pow(0.5, j);
    CHECK(oracle::binomial_sigmas(obs[j], n, p) < 4.0);
  }
}

TEST_CASE("gen_sequential_bandit_env") {
  SUBCASE("sigma 0 collapses every layer to zero") {
    auto e = env::gen_sequential_bandit_env(3, 4, 5, 0.0, 0.1, 11);
    for (int a = 0; a < 3; ++a) {
      CHECK(e.funnel(a).stack.matrix().norm() == 0.0);
    }
  }

  SUBCASE("same seed reproduces the environment bit for bit") {
    auto e1 = env::gen_sequential_bandit_env(4, 3, 6, 1.0, 0.2, 77);
    auto e2 = env::gen_sequential_bandit_env(4, 3, 6, 1.0, 0.2, 77);
    for (int a = 0; a < 4; ++a) {
      CHECK((e1.funnel(a).stack.matrix() - e2.funnel(a).stack.matrix())
                .norm() == 0.0);
    }
    for (int t = 0; t < 50; ++t) {
      const Vec x1 = e1.step().x;
      const Vec x2 = e2.step().x;
      CHECK((x1 - x2).norm() == 0.0);
      const RewardVector r1 = e1.act(t % 4);
      const RewardVector r2 = e2.act(t % 4);
      CHECK((r1 - r2).norm() == 0);
    }
  }

  SUBCASE("paper configuration constructs") {
    auto e = env::gen_sequential_bandit_env(50, 8, 45, 1.0, 0.08, 1);
    CHECK(e.arms() == 50);
    CHECK(e.layers() == 8);
    CHECK(e.dim() == 45);
    const auto& s = e.step();
    CHECK(s.x.size() == 45);
    CHECK(s.oracle.size() == 50);
    e.act(0);
  }

  SUBCASE("contexts respect the norm cap") {
    auto e = env::gen_sequential_bandit_env(2, 2, 8, 1.0, 0.5, 3);
    const double cap = env::default_context_cap(8, 0.5);
    for (int t = 0; t < 2000; ++t) {
      CHECK(e.step().x.norm() <= cap * (1.0 + 1e-12));
      e.act(0);
    }
  }
}

TEST_CASE("step/act protocol") {
  auto e = env::gen_sequential_bandit_env(3, 2, 4, 1.0, 0.2, 5);
  CHECK_THROWS_AS(e.act(0), std::logic_error);  // act before step
  e.step();
  CHECK_THROWS_AS(e.step(), std::logic_error);  // step with act pending
  e.act(1);
  CHECK_THROWS_AS(e.act(1), std::logic_error);  // double act
  e.step();
  CHECK_THROWS_AS(e.act(99), std::out_of_range);
}

TEST_CASE("oracle values") {
  SUBCASE("single arm means zero regret for any policy") {
    auto e = env::gen_sequential_bandit_env(1, 3, 4, 1.0, 0.2, 9);
    for (int t = 0; t < 100; ++t) {
      const auto& s = e.step();
      CHECK(s.oracle.maxCoeff() == s.oracle(0));
      e.act(0);
    }
  }

  SUBCASE("oracle equals the independent product recomputation") {
    auto e = env::gen_sequential_bandit_env(3, 3, 5, 1.0, 0.3, 13);
    for (int t = 0; t < 10000; ++t) {
      const auto& s = e.step();
      for (int a = 0; a < 3; ++a) {
        const double want =
            oracle::product_value(e.funnel(a).stack.matrix(), s.x, 3);
        CHECK(s.oracle(a) == doctest::Approx(want).epsilon(1e-12));
      }
      e.act(0);
    }
  }

  SUBCASE("a dominating arm keeps a constant argmax") {
    glm::ThetaStack hi(1, 2), lo(1, 2);
    hi.matrix().setConstant(5.0);
    lo.matrix().setConstant(-5.0);
    const auto f = glm::MeanFunction::logistic(10.0);
    std::vector<env::Funnel> funnels = {{2, hi, f}, {2, lo, f}};
    env::ContextDistribution ctx;
    ctx.d = 1;
    ctx.sigma_x = 0.3;
    ctx.clip_norm = 1.0;
    env::SimBanditEnv e(funnels, ctx, 21);
    for (int t = 0; t < 500; ++t) {
      const auto& s = e.step();
      Eigen::Index best;
      s.oracle.maxCoeff(&best);
      // mu is increasing and both layers move together, so the sign of x
      // decides the better arm.
      const int want = s.x(0) >= 0.0 ? 0 : 1;
      CHECK(static_cast<int>(best) == want);
      e.act(0);
    }
  }
}

TEST_CASE("log csv round trip and validation") {
  const std::string path = "test_log_roundtrip.csv";
  std::vector<env::LoggedInteraction> recs;
  RngStream rng = make_stream(31, stream::kScratch);
  for (int i = 0; i < 50; ++i) {
    env::LoggedInteraction r;
    r.context.resize(3);
    for (int k = 0; k < 3; ++k) r.context(k) = rng.normal();
    r.action = static_cast<int>(rng.uniform_int(4));
    r.rewards.resize(2);
    r.rewards(0) = rng.bernoulli(0.5) ? 1 : 0;
    r.rewards(1) = r.rewards(0) ? (rng.bernoulli(0.5) ? 1 : 0) : 0;
    recs.push_back(std::move(r));
  }
  env::write_log_csv(path, recs);
  const auto back = env::read_log_csv(path);
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK((back[i].context - recs[i].context).norm() < 1e-8);
    CHECK(back[i].action == recs[i].action);
    CHECK((back[i].rewards - recs[i].rewards).norm() == 0);
  }
  std::remove(path.c_str());

  SUBCASE("malformed rows name their line") {
    const std::string bad = "test_log_bad.csv";
    std::ofstream out(bad);
    out << "ctx_0,action,r_1\n";
    out << "0.5,1,1\n";
    out << "0.5,1,2\n";  // reward not in {0,1}
    out.close();
    try {
      env::read_log_csv(bad);
      CHECK(false);
    } catch (const env::ParseError& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
    std::remove(bad.c_str());
  }

  SUBCASE("non-monotone rewards are rejected") {
    const std::string bad = "test_log_bad2.csv";
    std::ofstream out(bad);
    out << "ctx_0,action,r_1,r_2\n";
    out << "0.5,0,0,1\n";  // r_2 > r_1
    out.close();
    CHECK_THROWS_AS(env::read_log_csv(bad), env::ParseError);
    std::remove(bad.c_str());
  }
}

TEST_CASE("replay environment") {
  SUBCASE("single record always replays") {
    env::LoggedInteraction r;
    r.context = Vec::Ones(2);
    r.action = 0;
    r.rewards.resize(2);
    r.rewards << 1, 0;
    env::ReplayEnv e({r}, 1, env::BinSpec{3}, 5);
    for (int t = 0; t < 50; ++t) {
      const auto& s = e.step();
      CHECK((s.x - r.context).norm() == 0.0);
      const RewardVector got = e.act(0);
      CHECK((got - r.rewards).norm() == 0);
    }
    CHECK(e.fallback_events() == 0);
  }

  SUBCASE("uniform cells replay deterministically") {
    // Two well-separated context clusters, rewards constant per cluster.
    std::vector<env::LoggedInteraction> recs;
    for (int i = 0; i < 40; ++i) {
      env::LoggedInteraction r;
      r.context = Vec::Constant(1, i < 20 ? -1.0 + 0.01 * i : 1.0 + 0.01 * i);
      r.action = 0;
      r.rewards.resize(1);
      r.rewards << (i < 20 ? 0 : 1);
      recs.push_back(r);
    }
    env::ReplayEnv e(recs, 1, env::BinSpec{2}, 9);
    for (int t = 0; t < 200; ++t) {
      const auto& s = e.step();
      const RewardVector got = e.act(0);
      CHECK(got(0) == (s.x(0) > 0 ? 1 : 0));
    }
  }

  SUBCASE("empty cells fall back to zero rewards") {
    // Action 1 only ever logged on positive contexts.
    std::vector<env::LoggedInteraction> recs;
    for (int i = 0; i < 40; ++i) {
      env::LoggedInteraction r;
      r.context = Vec::Constant(1, i < 20 ? -1.0 - 0.01 * i : 1.0 + 0.01 * i);
      r.action = (i < 20) ? 0 : 1;
      r.rewards = RewardVector::Ones(1);
      recs.push_back(r);
    }
    env::ReplayEnv e(recs, 2, env::BinSpec{2}, 9);
    int fallbacks = 0;
    for (int t = 0; t < 400; ++t) {
      const auto& s = e.step();
      const RewardVector got = e.act(1);
      if (s.x(0) < 0) {
        CHECK(got(0) == 0);
        ++fallbacks;
      } else {
        CHECK(got(0) == 1);
      }
    }
    CHECK(e.fallback_events() == fallbacks);
    CHECK(fallbacks > 0);
  }

  SUBCASE("nearest-bin borrowing resamples the adjacent cell") {
    // Same log as above, but the fallback borrows from the nearest bin
    // with the same action, whose rewards are all ones.
    std::vector<env::LoggedInteraction> recs;
    for (int i = 0; i < 40; ++i) {
      env::LoggedInteraction r;
      r.context = Vec::Constant(1, i < 20 ? -1.0 - 0.01 * i : 1.0 + 0.01 * i);
      r.action = (i < 20) ? 0 : 1;
      r.rewards = RewardVector::Ones(1);
      recs.push_back(r);
    }
    env::BinSpec bins{2};
    bins.fallback = env::BinSpec::Fallback::NearestBin;
    env::ReplayEnv e(recs, 2, bins, 9);
    for (int t = 0; t < 200; ++t) {
      e.step();
      CHECK(e.act(1)(0) == 1);
    }
    CHECK(e.fallback_events() > 0);
  }

  SUBCASE("cell resampling preserves cell means") {
    RngStream rng = make_stream(61, stream::kScratch);
    std::vector<env::LoggedInteraction> recs;
    for (int i = 0; i < 4000; ++i) {
      env::LoggedInteraction r;
      r.context = Vec::Constant(1, rng.normal());
      r.action = static_cast<int>(rng.uniform_int(2));
      const double p = oracle::sigmoid((r.action ? 1.0 : -1.0) * r.context(0));
      r.rewards = RewardVector::Constant(1, rng.bernoulli(p) ? 1 : 0);
      recs.push_back(r);
    }
    env::ReplayEnv e(recs, 2, env::BinSpec{2}, 13);

    std::map<std::pair<std::vector<int>, int>, std::pair<double, int>> log_cells;
    for (const auto& r : recs) {
      auto& c = log_cells[{e.bin_of(r.context), r.action}];
      c.first += r.rewards(0);
      c.second += 1;
    }
    std::map<std::pair<std::vector<int>, int>, std::pair<double, int>> rep_cells;
    RngStream act_rng = make_stream(14, stream::kScratch);
    for (int t = 0; t < 100000; ++t) {
      const auto& s = e.step();
      const int a = static_cast<int>(act_rng.uniform_int(2));
      const RewardVector got = e.act(a);
      auto& c = rep_cells[{e.bin_of(s.x), a}];
      c.first += got(0);
      c.second += 1;
    }
    for (const auto& [key, rep] : rep_cells) {
      const auto it = log_cells.find(key);
      REQUIRE(it != log_cells.end());
      const double p = it->second.first / it->second.second;
      if (p <= 0.0 || p >= 1.0) continue;
      CHECK(oracle::binomial_sigmas(rep.first, rep.second, p) < 3.5);
    }
  }
}
