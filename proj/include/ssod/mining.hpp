#pragma once

#include "ssod/cost.hpp"
#include "ssod/geometry.hpp"

#include <cstddef>
#include <optional>
#include <vector>

namespace ssod {

inline constexpr double kDefaultScoreThreshold = 0.4;
inline constexpr std::size_t kDefaultPseudoTopK = 9;

/// Detections with score > tau_s, by descending score.
std::vector<PseudoLabel> filter_fixed(const std::vector<Detection>& dets,
                                      double tau_s = kDefaultScoreThreshold);

/// The k highest-scoring detections (all when fewer), ties by lowest index.
std::vector<PseudoLabel> filter_topk(const std::vector<Detection>& dets,
                                     std::size_t k = kDefaultPseudoTopK);

/// Detections scoring at least mean + population std of the image's scores.
std::vector<PseudoLabel> filter_mean_std(const std::vector<Detection>& dets);

/// Image-level threshold used by filter_mean_std; NaN for an empty list.
double mean_std_threshold(const std::vector<Detection>& dets);

struct EmSettings {
  double tolerance = 1e-6;
  int max_iterations = 200;
  /// Extra deterministic restarts, each initialized by splitting the sorted
  /// samples at a different quantile. The highest-likelihood fit wins.
  int n_restarts = 0;
  /// Component sigma floor, relative to the sample range.
  double relative_sigma_floor = 1e-4;

  friend bool operator==(const EmSettings&, const EmSettings&) = default;
};

/// Two-component univariate Gaussian mixture; component r is the low-mean one.
struct GmmFit {
  double w_r = 0.5, w_u_mix = 0.5;
  double mu_r = 0.0, mu_u = 0.0;
  double sigma_r = 1.0, sigma_u = 1.0;
  double log_likelihood = 0.0;
  int iterations = 0;
  bool converged = false;
  double sigma_floor = 0.0;
  /// Log-likelihood after initialization and after every EM step.
  std::vector<double> log_likelihood_trace;

  /// Posterior probability that cost c belongs to the low-cost component.
  double reliable_posterior(double c) const;
};

/// Fits the mixture by EM from a median-split initialization. Stops when the
/// log-likelihood gain drops below tolerance or after max_iterations.
/// Throws DegenerateFit for fewer than 4 samples or zero spread.
GmmFit fit_gmm_1d(const std::vector<double>& costs, const EmSettings& settings = {});

/// Mixture log-likelihood of the samples.
double gmm_log_likelihood(const GmmFit& fit, const std::vector<double>& costs);

/// Mining threshold: the mean of the low-cost component.
double mining_threshold(const GmmFit& fit);

/// Cost between the two means where both components are equally likely
/// a posteriori. Reported alongside the threshold; not used for filtering.
double posterior_boundary(const GmmFit& fit);

struct MiningImage {
  std::vector<PseudoLabel> initial;
  std::vector<Detection> proposals;
};

struct MiningResult {
  /// Kept pseudo labels per image, each carrying its match_cost.
  std::vector<std::vector<PseudoLabel>> kept;
  std::optional<GmmFit> fit;
  std::optional<double> tau_c;
  std::optional<double> boundary;
  /// True when the mixture could not be fitted and every matched box was kept.
  bool fell_back = false;
  /// Initial boxes dropped because their image had no proposals to match.
  std::size_t dropped_without_proposals = 0;
  /// Initial boxes dropped because the image had fewer proposals than boxes.
  std::size_t dropped_unmatched = 0;
  std::size_t initial_count = 0;
};

/// Cost-based mining over one batch: every initial pseudo box is matched to a
/// proposal of its image by Hungarian assignment on the pairwise cost, the
/// matched costs of the whole batch are fitted with the two-component mixture
/// and boxes cheaper than the low-cost mean are kept.
MiningResult mine_cost_based(const std::vector<MiningImage>& batch, const CostWeights& w,
                             const EmSettings& settings = {});

/// Single-image convenience overload.
std::vector<PseudoLabel> mine_cost_based(const std::vector<PseudoLabel>& initial,
                                         const std::vector<Detection>& proposals,
                                         const CostWeights& w, const EmSettings& settings = {});

}  // namespace ssod
