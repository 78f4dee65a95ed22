#pragma once

#include "ssod/geometry.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <vector>

namespace ssod {

inline constexpr double kProbEps = 1e-8;

inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

/// Weights of the pairwise matching cost and the focal classification term.
struct CostWeights {
  double lambda_cls = 2.0;
  double lambda_giou = 2.0;
  double lambda_l1 = 5.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;

  void validate() const;
  friend bool operator==(const CostWeights&, const CostWeights&) = default;
};

/// Exponents of the one-to-many matching score m = s^alpha * u^beta.
struct MatchScoreParams {
  double alpha = 1.0;
  double beta = 6.0;

  void validate() const;
  friend bool operator==(const MatchScoreParams&, const MatchScoreParams&) = default;
};

/// Dense [targets x proposals] cost table. Empty when either side is empty.
struct CostMatrix {
  Eigen::MatrixXd values;
  std::vector<std::size_t> target_ids;
  std::vector<std::size_t> proposal_ids;

  bool empty() const { return values.rows() == 0 || values.cols() == 0; }
  Eigen::Index num_targets() const { return values.rows(); }
  Eigen::Index num_proposals() const { return values.cols(); }
};

inline double match_score(double s, double u, const MatchScoreParams& params = {}) {
  return std::pow(s, params.alpha) * std::pow(u, params.beta);
}

/// Positive / negative halves of the binary focal cost at probability p.
double focal_pos_cost(double p, const CostWeights& w);
double focal_neg_cost(double p, const CostWeights& w);

/// Classification matching cost for one (target, proposal) pair. For the
/// target's class this is pos_cost(p) - neg_cost(p); other classes do not
/// enter the pair cost and yield 0.
double focal_cls_cost(double score, bool is_target_class, const CostWeights& w);

/// Scalar cost of one pair: lambda_cls*C_cls + lambda_giou*(-GIoU) + lambda_l1*L1.
double pair_cost(const PseudoLabel& target, const Detection& proposal, const CostWeights& w);

CostMatrix build_cost_matrix(const std::vector<PseudoLabel>& targets,
                             const std::vector<Detection>& proposals, const CostWeights& w);

/// [targets x proposals] IoU table.
Eigen::MatrixXd iou_matrix(const std::vector<PseudoLabel>& targets,
                           const std::vector<Detection>& proposals);

/// [targets x proposals] table of m = s^alpha * u^beta, where s is the
/// proposal's probability for the target's class.
Eigen::MatrixXd match_score_matrix(const std::vector<PseudoLabel>& targets,
                                   const std::vector<Detection>& proposals,
                                   const MatchScoreParams& params);

}  // namespace ssod
