#include "ssod/mining.hpp"

#include "ssod/assignment.hpp"
#include "ssod/errors.hpp"
#include "ssod/hungarian.hpp"
#include "ssod/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace ssod {

std::vector<PseudoLabel> filter_fixed(const std::vector<Detection>& dets, double tau_s) {
  std::vector<PseudoLabel> out;
  for (std::size_t i : order_by_score(dets))
    if (dets[i].score > tau_s) out.push_back(to_pseudo_label(dets[i], i));
  return out;
}

std::vector<PseudoLabel> filter_topk(const std::vector<Detection>& dets, std::size_t k) {
  if (k == 0) throw InvalidArgument("top-k needs k >= 1");
  std::vector<PseudoLabel> out;
  for (std::size_t i : order_by_score(dets)) {
    if (out.size() == k) break;
    out.push_back(to_pseudo_label(dets[i], i));
  }
  return out;
}

double mean_std_threshold(const std::vector<Detection>& dets) {
  if (dets.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(dets.size());
  double mean = 0.0;
  for (const auto& d : dets) mean += d.score;
  mean /= n;
  double var = 0.0;
  for (const auto& d : dets) var += (d.score - mean) * (d.score - mean);
  return mean + std::sqrt(var / n);
}

std::vector<PseudoLabel> filter_mean_std(const std::vector<Detection>& dets) {
  std::vector<PseudoLabel> out;
  if (dets.empty()) return out;
  // Slack absorbs rounding in the mean when all scores are equal.
  const double thr = mean_std_threshold(dets) - kThresholdSlack;
  for (std::size_t i : order_by_score(dets))
    if (dets[i].score >= thr) out.push_back(to_pseudo_label(dets[i], i));
  return out;
}

double GmmFit::reliable_posterior(double c) const {
  const auto log_comp = [c](double w, double mu, double sigma) {
    const double z = (c - mu) / sigma;
    return std::log(w) - std::log(sigma) - 0.5 * z * z;
  };
  const double lr = log_comp(w_r, mu_r, sigma_r);
  const double lu = log_comp(w_u_mix, mu_u, sigma_u);
  return 1.0 / (1.0 + std::exp(lu - lr));
}

namespace {

struct Params {
  double w[2];
  double mu[2];
  double sigma[2];
};

double log_normal(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -0.5 * std::log(2.0 * std::numbers::pi) - std::log(sigma) - 0.5 * z * z;
}

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double log_likelihood(const Params& p, const std::vector<double>& x) {
  double ll = 0.0;
  for (double v : x)
    ll += log_sum_exp(std::log(p.w[0]) + log_normal(v, p.mu[0], p.sigma[0]),
                      std::log(p.w[1]) + log_normal(v, p.mu[1], p.sigma[1]));
  return ll;
}

Params split_init(const std::vector<double>& sorted, std::size_t split, double floor) {
  Params p{};
  const std::size_t bounds[3] = {0, split, sorted.size()};
  for (int k = 0; k < 2; ++k) {
    const std::size_t lo = bounds[k], hi = bounds[k + 1];
    const double cnt = static_cast<double>(hi - lo);
    double mean = 0.0;
    for (std::size_t i = lo; i < hi; ++i) mean += sorted[i];
    mean /= cnt;
    double var = 0.0;
    for (std::size_t i = lo; i < hi; ++i) var += (sorted[i] - mean) * (sorted[i] - mean);
    p.w[k] = cnt / static_cast<double>(sorted.size());
    p.mu[k] = mean;
    p.sigma[k] = std::max(std::sqrt(var / cnt), floor);
  }
  return p;
}

Params em_step(const Params& p, const std::vector<double>& x, double floor) {
  double nk[2] = {0, 0}, sx[2] = {0, 0};
  std::vector<double> r0(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = std::log(p.w[0]) + log_normal(x[i], p.mu[0], p.sigma[0]);
    const double b = std::log(p.w[1]) + log_normal(x[i], p.mu[1], p.sigma[1]);
    r0[i] = std::exp(a - log_sum_exp(a, b));
    nk[0] += r0[i];
    nk[1] += 1.0 - r0[i];
    sx[0] += r0[i] * x[i];
    sx[1] += (1.0 - r0[i]) * x[i];
  }
  Params q = p;
  const double n = static_cast<double>(x.size());
  for (int k = 0; k < 2; ++k) {
    q.w[k] = nk[k] / n;
    if (nk[k] <= std::numeric_limits<double>::min()) continue;  // empty component keeps its shape
    q.mu[k] = sx[k] / nk[k];
  }
  double sv[2] = {0, 0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    sv[0] += r0[i] * (x[i] - q.mu[0]) * (x[i] - q.mu[0]);
    sv[1] += (1.0 - r0[i]) * (x[i] - q.mu[1]) * (x[i] - q.mu[1]);
  }
  for (int k = 0; k < 2; ++k)
    if (nk[k] > std::numeric_limits<double>::min()) q.sigma[k] = std::max(std::sqrt(sv[k] / nk[k]), floor);
  return q;
}

GmmFit run_em(const std::vector<double>& x, Params p, const EmSettings& s, double floor) {
  GmmFit fit;
  fit.sigma_floor = floor;
  double ll = log_likelihood(p, x);
  fit.log_likelihood_trace.push_back(ll);
  for (int it = 1; it <= s.max_iterations; ++it) {
    const Params next = em_step(p, x, floor);
    const double next_ll = log_likelihood(next, x);
    fit.log_likelihood_trace.push_back(next_ll);
    fit.iterations = it;
    p = next;
    const double gain = next_ll - ll;
    ll = next_ll;
    if (gain < s.tolerance) {
      fit.converged = true;
      break;
    }
  }
  const int r = p.mu[0] <= p.mu[1] ? 0 : 1;
  fit.w_r = p.w[r];
  fit.w_u_mix = p.w[1 - r];
  fit.mu_r = p.mu[r];
  fit.mu_u = p.mu[1 - r];
  fit.sigma_r = p.sigma[r];
  fit.sigma_u = p.sigma[1 - r];
  fit.log_likelihood = ll;
  return fit;
}

}  // namespace

GmmFit fit_gmm_1d(const std::vector<double>& costs, const EmSettings& settings) {
  if (costs.size() < 4) throw DegenerateFit("mixture fit needs at least 4 samples");
  for (double c : costs)
    if (!std::isfinite(c)) throw InvalidArgument("mixture samples must be finite");
  std::vector<double> sorted = costs;
  std::sort(sorted.begin(), sorted.end());
  const double spread = sorted.back() - sorted.front();
  if (!(spread > 0)) throw DegenerateFit("mixture samples have zero spread");
  const double floor = settings.relative_sigma_floor * spread;
  const std::size_t n = sorted.size();

  std::vector<std::size_t> splits{n / 2};
  for (int r = 1; r <= settings.n_restarts; ++r) {
    const double q = (static_cast<double>(r) - 0.5) / settings.n_restarts;
    splits.push_back(std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(q * n)), 1, n - 1));
  }
  std::optional<GmmFit> best;
  for (std::size_t split : splits) {
    GmmFit fit = run_em(costs, split_init(sorted, split, floor), settings, floor);
    if (!best || fit.log_likelihood > best->log_likelihood) best = std::move(fit);
  }
  return *best;
}

double gmm_log_likelihood(const GmmFit& fit, const std::vector<double>& costs) {
  const Params p{{fit.w_r, fit.w_u_mix}, {fit.mu_r, fit.mu_u}, {fit.sigma_r, fit.sigma_u}};
  return log_likelihood(p, costs);
}

double mining_threshold(const GmmFit& fit) { return std::min(fit.mu_r, fit.mu_u); }

double posterior_boundary(const GmmFit& fit) {
  double lo = fit.mu_r, hi = fit.mu_u;
  const auto f = [&](double c) { return fit.reliable_posterior(c) - 0.5; };
  if (f(lo) <= 0) return lo;
  if (f(hi) >= 0) return hi;
  for (int i = 0; i < 200 && hi - lo > 1e-12 * std::max(1.0, std::abs(hi)); ++i) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) > 0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

namespace {

struct MatchedImage {
  std::vector<PseudoLabel> matched;
  std::size_t no_proposals = 0;
  std::size_t unmatched = 0;
};

MatchedImage match_image(const MiningImage& img, const CostWeights& w) {
  MatchedImage out;
  if (img.initial.empty()) return out;
  if (img.proposals.empty()) {
    out.no_proposals = img.initial.size();
    return out;
  }
  const CostMatrix cm = build_cost_matrix(img.initial, img.proposals, w);
  std::vector<Eigen::Index> col_of(img.initial.size(), -1);
  if (cm.num_targets() <= cm.num_proposals()) {
    const auto cols = solve_assignment(cm.values);
    for (std::size_t t = 0; t < cols.size(); ++t) col_of[t] = cols[t];
  } else {
    const Eigen::MatrixXd transposed = cm.values.transpose();
    const auto rows = solve_assignment(transposed);
    for (std::size_t p = 0; p < rows.size(); ++p) col_of[rows[p]] = static_cast<Eigen::Index>(p);
  }
  for (std::size_t t = 0; t < img.initial.size(); ++t) {
    if (col_of[t] < 0) {
      ++out.unmatched;
      continue;
    }
    PseudoLabel p = img.initial[t];
    p.match_cost = cm.values(static_cast<Eigen::Index>(t), col_of[t]);
    out.matched.push_back(std::move(p));
  }
  return out;
}

}  // namespace

MiningResult mine_cost_based(const std::vector<MiningImage>& batch, const CostWeights& w,
                             const EmSettings& settings) {
  std::vector<MatchedImage> matched(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { matched[i] = match_image(batch[i], w); });

  MiningResult result;
  result.kept.resize(batch.size());
  std::vector<double> pooled;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    result.initial_count += batch[i].initial.size();
    result.dropped_without_proposals += matched[i].no_proposals;
    result.dropped_unmatched += matched[i].unmatched;
    for (const auto& p : matched[i].matched) pooled.push_back(*p.match_cost);
  }
  try {
    result.fit = fit_gmm_1d(pooled, settings);
  } catch (const DegenerateFit&) {
    result.fell_back = true;
  }
  if (result.fit) {
    result.tau_c = mining_threshold(*result.fit);
    result.boundary = posterior_boundary(*result.fit);
  }
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (auto& p : matched[i].matched)
      if (result.fell_back || *p.match_cost < *result.tau_c) result.kept[i].push_back(std::move(p));
  return result;
}

std::vector<PseudoLabel> mine_cost_based(const std::vector<PseudoLabel>& initial,
                                         const std::vector<Detection>& proposals,
                                         const CostWeights& w, const EmSettings& settings) {
  MiningResult r = mine_cost_based({MiningImage{initial, proposals}}, w, settings);
  return std::move(r.kept.front());
}

}  // namespace ssod
