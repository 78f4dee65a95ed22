#include "ssod/cost.hpp"

#include "ssod/errors.hpp"
#include "ssod/parallel.hpp"

#include <cmath>

namespace ssod {

void CostWeights::validate() const {
  for (double v : {lambda_cls, lambda_giou, lambda_l1, focal_alpha, focal_gamma})
    if (!std::isfinite(v)) throw InvalidArgument("cost weights must be finite");
  if (lambda_cls < 0 || lambda_giou < 0 || lambda_l1 < 0)
    throw InvalidArgument("cost lambdas must be non-negative");
  if (lambda_cls == 0 && lambda_giou == 0 && lambda_l1 == 0)
    throw InvalidArgument("at least one cost lambda must be positive");
  if (!(focal_alpha > 0 && focal_alpha < 1)) throw InvalidArgument("focal_alpha must lie in (0, 1)");
  if (focal_gamma < 0) throw InvalidArgument("focal_gamma must be non-negative");
}

void MatchScoreParams::validate() const {
  if (!(alpha >= 0) || !(beta >= 0)) throw InvalidArgument("match score exponents must be >= 0");
}

double focal_pos_cost(double p, const CostWeights& w) {
  p = clamp_prob(p);
  return w.focal_alpha * std::pow(1.0 - p, w.focal_gamma) * -std::log(p);
}

double focal_neg_cost(double p, const CostWeights& w) {
  p = clamp_prob(p);
  return (1.0 - w.focal_alpha) * std::pow(p, w.focal_gamma) * -std::log(1.0 - p);
}

double focal_cls_cost(double score, bool is_target_class, const CostWeights& w) {
  if (!is_target_class) return 0.0;
  return focal_pos_cost(score, w) - focal_neg_cost(score, w);
}

namespace {
double class_prob(const Detection& d, int class_id) {
  if (class_id < 0 || class_id >= d.scores.size())
    throw InvalidArgument("target class id outside the proposal score vector");
  return d.scores[class_id];
}
}  // namespace

double pair_cost(const PseudoLabel& target, const Detection& proposal, const CostWeights& w) {
  const double cls = focal_cls_cost(class_prob(proposal, target.class_id), true, w);
  return w.lambda_cls * cls + w.lambda_giou * -giou(proposal.box, target.box) +
         w.lambda_l1 * l1_center_form(proposal.box, target.box);
}

CostMatrix build_cost_matrix(const std::vector<PseudoLabel>& targets,
                             const std::vector<Detection>& proposals, const CostWeights& w) {
  CostMatrix out;
  if (targets.empty() || proposals.empty()) return out;
  const auto rows = static_cast<Eigen::Index>(targets.size());
  const auto cols = static_cast<Eigen::Index>(proposals.size());
  out.values.resize(rows, cols);
  out.target_ids.resize(targets.size());
  out.proposal_ids.resize(proposals.size());
  for (std::size_t i = 0; i < targets.size(); ++i) out.target_ids[i] = i;
  for (std::size_t j = 0; j < proposals.size(); ++j) out.proposal_ids[j] = j;
  parallel_for(targets.size(), [&](std::size_t i) {
    for (Eigen::Index j = 0; j < cols; ++j)
      out.values(static_cast<Eigen::Index>(i), j) = pair_cost(targets[i], proposals[j], w);
  });
  return out;
}

Eigen::MatrixXd iou_matrix(const std::vector<PseudoLabel>& targets,
                           const std::vector<Detection>& proposals) {
  Eigen::MatrixXd u(targets.size(), proposals.size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = 0; j < proposals.size(); ++j)
      u(i, j) = iou(proposals[j].box, targets[i].box);
  return u;
}

Eigen::MatrixXd match_score_matrix(const std::vector<PseudoLabel>& targets,
                                   const std::vector<Detection>& proposals,
                                   const MatchScoreParams& params) {
  Eigen::MatrixXd m(targets.size(), proposals.size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = 0; j < proposals.size(); ++j)
      m(i, j) = match_score(class_prob(proposals[j], targets[i].class_id),
                            iou(proposals[j].box, targets[i].box), params);
  return m;
}

}  // namespace ssod
