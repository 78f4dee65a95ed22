#include "support.hpp"

#include "ssod/errors.hpp"
#include "ssod/mining.hpp"

#include <doctest.h>

#include <cmath>
#include <set>

using namespace ssod;
using namespace ssod::testing;

namespace {

std::vector<Detection> scored(std::initializer_list<double> scores) {
  std::vector<Detection> d;
  double x = 0.0;
  for (double s : scores) {
    d.push_back(Detection::single_class({x, 0, x + 0.1, 0.1}, 0, s, 1));
    x += 0.1;
  }
  return d;
}

std::vector<double> confidences(const std::vector<PseudoLabel>& labels) {
  std::vector<double> out;
  for (const auto& l : labels) out.push_back(l.confidence);
  return out;
}

std::vector<double> bimodal(Rng& rng, double m1, double s1, double m2, double s2, int n) {
  std::normal_distribution<double> a(m1, s1), b(m2, s2);
  std::vector<double> x;
  for (int i = 0; i < n; ++i) x.push_back(a(rng));
  for (int i = 0; i < n; ++i) x.push_back(b(rng));
  return x;
}

}  // namespace

TEST_CASE("fixed threshold filter") {
  CHECK(confidences(filter_fixed(scored({0.39, 0.9, 0.41}), 0.4)) == std::vector<double>{0.9, 0.41});
  CHECK(filter_fixed(scored({0.1, 0.2}), 0.4).empty());
  CHECK(filter_fixed(scored({0.1, 0.0, 0.3}), 0.0).size() == 2);
  CHECK(filter_fixed(scored({0.4}), 0.4).empty());
  const auto kept = filter_fixed(scored({0.39, 0.9, 0.41}), 0.4);
  CHECK(kept[0].source_index == 1u);
}

TEST_CASE("fixed threshold is monotone") {
  Rng rng(40);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Detection> d;
    for (int i = 0; i < 20; ++i) d.push_back(Detection::single_class(random_box(rng), 0, uniform(rng, 0, 1), 1));
    const double lo = uniform(rng, 0, 1), hi = uniform(rng, lo, 1);
    std::set<std::size_t> a, b;
    for (const auto& p : filter_fixed(d, lo)) a.insert(*p.source_index);
    for (const auto& p : filter_fixed(d, hi)) b.insert(*p.source_index);
    CHECK(std::includes(a.begin(), a.end(), b.begin(), b.end()));
  }
}

TEST_CASE("top-k filter") {
  CHECK(filter_topk(scored({0.2, 0.5, 0.1}), 9).size() == 3);
  CHECK(confidences(filter_topk(scored({0.2, 0.5, 0.1}), 1)) == std::vector<double>{0.5});
  Rng rng(41);
  std::vector<double> s;
  std::vector<Detection> d;
  for (int i = 0; i < 12; ++i) {
    s.push_back(uniform(rng, 0, 1));
    d.push_back(Detection::single_class(random_box(rng), 0, s.back(), 1));
  }
  std::sort(s.begin(), s.end(), std::greater<>());
  s.resize(9);
  CHECK(confidences(filter_topk(d, 9)) == s);
}

TEST_CASE("mean plus std filter") {
  CHECK(filter_mean_std(scored({0.3, 0.3, 0.3})).size() == 3);
  CHECK(confidences(filter_mean_std(scored({0.9, 0.5, 0.1}))) == std::vector<double>{0.9});
  CHECK(mean_std_threshold(scored({0.9, 0.5, 0.1})) == doctest::Approx(0.5 + std::sqrt(0.32 / 3)).epsilon(1e-14));
  CHECK(filter_mean_std(scored({0.2})).size() == 1);
  CHECK(filter_mean_std({}).empty());
  CHECK(std::isnan(mean_std_threshold({})));
}

TEST_CASE("mixture fit on a seeded bimodal sample") {
  Rng rng(42);
  const auto x = bimodal(rng, 1.0, 0.1, 4.0, 0.5, 200);
  const GmmFit fit = fit_gmm_1d(x);
  CHECK(std::abs(fit.mu_r - 1.0) < 0.1);
  CHECK(std::abs(fit.mu_u - 4.0) < 0.3);
  CHECK(std::abs(fit.w_r - 0.5) < 0.1);
  CHECK(std::abs(fit.w_r + fit.w_u_mix - 1.0) < 1e-9);
  CHECK(fit.converged);
  CHECK(std::abs(mining_threshold(fit) - 1.0) < 0.1);
  CHECK(fit.log_likelihood == doctest::Approx(gmm_log_likelihood(fit, x)).epsilon(1e-12));
  const double b = posterior_boundary(fit);
  CHECK(b > fit.mu_r);
  CHECK(b < fit.mu_u);
  CHECK(fit.reliable_posterior(b) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("mixture fit edge cases") {
  const GmmFit fit = fit_gmm_1d({1, 1, 1, 4, 4, 4});
  CHECK(fit.mu_r == doctest::Approx(1.0));
  CHECK(fit.mu_u == doctest::Approx(4.0));
  CHECK(fit.sigma_r == doctest::Approx(fit.sigma_floor));
  CHECK(fit.sigma_floor == doctest::Approx(3e-4));
  CHECK_THROWS_AS(fit_gmm_1d({2, 2, 2, 2, 2}), DegenerateFit);
  CHECK_THROWS_AS(fit_gmm_1d({1, 2, 3}), DegenerateFit);
  CHECK_THROWS_AS(fit_gmm_1d({1, 2, 3, NAN}), InvalidArgument);
}

TEST_CASE("mixture invariants on random samples") {
  Rng rng(43);
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = bimodal(rng, uniform(rng, -3, 3), uniform(rng, 0.05, 1), uniform(rng, -3, 3), uniform(rng, 0.05, 1),
                           uniform_int(rng, 3, 60));
    EmSettings s;
    s.n_restarts = trial % 3;
    const GmmFit fit = fit_gmm_1d(x, s);
    CHECK(fit.mu_r <= fit.mu_u);
    CHECK(std::abs(fit.w_r + fit.w_u_mix - 1.0) < 1e-9);
    CHECK(fit.sigma_r >= fit.sigma_floor);
    CHECK(fit.sigma_u >= fit.sigma_floor);
    CHECK(mining_threshold(fit) == std::min(fit.mu_r, fit.mu_u));
    const auto& tr = fit.log_likelihood_trace;
    for (std::size_t i = 1; i < tr.size(); ++i) CHECK(tr[i] >= tr[i - 1] - 1e-9 * std::max(1.0, std::abs(tr[i - 1])));
  }
}

TEST_CASE("threshold uses the smaller mean whatever the labels") {
  GmmFit fit;
  fit.mu_r = 1.2;
  fit.mu_u = 3.0;
  CHECK(mining_threshold(fit) == 1.2);
  std::swap(fit.mu_r, fit.mu_u);
  CHECK(mining_threshold(fit) == 1.2);
}

TEST_CASE("mixture fit does not depend on sample order") {
  Rng rng(44);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = bimodal(rng, 0.0, 0.3, 3.0, 0.6, 50);
    const GmmFit a = fit_gmm_1d(x);
    std::shuffle(x.begin(), x.end(), rng);
    const GmmFit b = fit_gmm_1d(x);
    CHECK(a.mu_r == doctest::Approx(b.mu_r).epsilon(1e-9));
    CHECK(a.mu_u == doctest::Approx(b.mu_u).epsilon(1e-9));
    std::size_t kept_a = 0, kept_b = 0;
    for (double c : x) {
      kept_a += c < mining_threshold(a);
      kept_b += c < mining_threshold(b);
    }
    CHECK(kept_a == kept_b);
  }
}

TEST_CASE("cost-based mining on a constructed image") {
  // Four pseudo boxes are reproduced by confident proposals, four are matched only to far-away garbage.
  const CostWeights w;
  std::vector<PseudoLabel> initial;
  std::vector<Detection> proposals;
  const double scores[] = {0.6, 0.7, 0.8, 0.9};
  for (int i = 0; i < 8; ++i) {
    PseudoLabel p;
    p.box = Boxd::from_center(0.1 + 0.1 * i, 0.2 + 0.05 * i, 0.08, 0.1);
    p.confidence = 0.5;
    p.source_index = static_cast<std::size_t>(i);
    initial.push_back(p);
    if (i < 4) proposals.push_back(Detection::single_class(p.box, 0, scores[i], 1));
    else proposals.push_back(Detection::single_class(Boxd::from_center(0.9 - 0.02 * i, 0.95, 0.05, 0.05), 0, 0.1, 1));
  }
  const MiningResult r = mine_cost_based({MiningImage{initial, proposals}}, w);
  REQUIRE(r.fit.has_value());
  REQUIRE(!r.fell_back);

  // Cost inspection: reproduced boxes cost lambda_cls * focal(s) - lambda_giou; their mean is the reliable center.
  double mean = 0.0;
  std::vector<double> cost(4);
  for (int i = 0; i < 4; ++i) {
    cost[i] = w.lambda_cls * focal_cls_cost(scores[i], true, w) - w.lambda_giou;
    mean += cost[i] / 4;
  }
  CHECK(*r.tau_c == doctest::Approx(mean).epsilon(1e-6));
  std::vector<std::size_t> expected, got;
  for (int i = 0; i < 4; ++i)
    if (cost[i] < mean) expected.push_back(static_cast<std::size_t>(i));
  for (const auto& p : r.kept[0]) {
    got.push_back(*p.source_index);
    CHECK(p.match_cost.has_value());
  }
  CHECK(got == expected);
  CHECK(!got.empty());
}

TEST_CASE("cost-based mining fallbacks and bookkeeping") {
  const CostWeights w;
  PseudoLabel p;
  p.box = {0.1, 0.1, 0.3, 0.3};
  SUBCASE("identical costs keep everything") {
    std::vector<PseudoLabel> initial(4, p);
    std::vector<Detection> props(4, Detection::single_class(p.box, 0, 0.8, 1));
    const MiningResult r = mine_cost_based({MiningImage{initial, props}}, w);
    CHECK(r.fell_back);
    CHECK(r.kept[0].size() == 4);
  }
  SUBCASE("empty initial set") {
    CHECK(mine_cost_based({}, {Detection::single_class(p.box, 0, 0.8, 1)}, w).empty());
  }
  SUBCASE("image without proposals is dropped and counted") {
    Rng rng(45);
    std::vector<MiningImage> batch(2);
    for (int i = 0; i < 6; ++i) {
      batch[0].initial.push_back(random_target(rng, 1));
      batch[0].proposals.push_back(random_detection(rng, 1));
    }
    batch[1].initial = {p, p};
    const MiningResult r = mine_cost_based(batch, w);
    CHECK(r.dropped_without_proposals == 2);
    CHECK(r.kept[1].empty());
    CHECK(r.initial_count == 8);
  }
  SUBCASE("more boxes than proposals") {
    Rng rng(46);
    MiningImage img;
    for (int i = 0; i < 6; ++i) img.initial.push_back(random_target(rng, 1));
    for (int i = 0; i < 4; ++i) img.proposals.push_back(random_detection(rng, 1));
    const MiningResult r = mine_cost_based({img}, w);
    CHECK(r.dropped_unmatched == 2);
  }
}

TEST_CASE("mined labels are a subset of the initial labels") {
  Rng rng(47);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<MiningImage> batch(3);
    for (auto& img : batch) {
      const int n = uniform_int(rng, 0, 6);
      for (int i = 0; i < n; ++i) {
        PseudoLabel t = random_target(rng, 2);
        t.source_index = static_cast<std::size_t>(i);
        img.initial.push_back(t);
      }
      for (int j = 0, m = uniform_int(rng, 0, 10); j < m; ++j) img.proposals.push_back(random_detection(rng, 2));
    }
    const MiningResult r = mine_cost_based(batch, CostWeights{});
    for (std::size_t i = 0; i < batch.size(); ++i) {
      CHECK(r.kept[i].size() <= batch[i].initial.size());
      for (const auto& k : r.kept[i]) {
        const auto& src = batch[i].initial[*k.source_index];
        CHECK(src.box == k.box);
        CHECK(src.class_id == k.class_id);
        CHECK(std::isfinite(*k.match_cost));
      }
    }
  }
}
