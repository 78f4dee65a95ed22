#pragma once

#include "ssod/cost.hpp"
#include "ssod/geometry.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <optional>
#include <vector>

namespace ssod {

enum class AssignMode { OneToOne, OneToMany };

inline constexpr int kBackground = -1;

/// Target -> proposal assignment with an optional inverse map.
struct Assignment {
  AssignMode mode = AssignMode::OneToOne;
  std::size_t num_proposals = 0;
  /// Proposals assigned to each target, in rank order.
  std::vector<std::vector<std::size_t>> per_target;
  /// proposal -> target, kBackground for negatives. Absent when a proposal
  /// may serve several targets (one-to-many without conflict resolution).
  std::optional<std::vector<int>> per_proposal;
  /// Set when a requested k exceeded the number of proposals.
  bool truncated = false;

  std::size_t num_targets() const { return per_target.size(); }
  /// Sorted, de-duplicated indices of all positive proposals.
  std::vector<std::size_t> positives() const;
  /// Checks bounds, one-to-one distinctness and per_target/per_proposal agreement.
  bool consistent() const;
};

/// Fills per_proposal from per_target. Requires each proposal to appear at most once.
void rebuild_inverse(Assignment& a);

double assignment_cost(const Eigen::MatrixXd& cost, const Assignment& a);

/// Optimal one-to-one matching on a cost matrix. Throws Infeasible when
/// there are fewer proposals than targets.
Assignment hungarian(const CostMatrix& costs);
Assignment hungarian(const Eigen::MatrixXd& costs);

inline constexpr std::size_t kDefaultTopK = 13;

/// Ranked one-to-many assignment on a [targets x proposals] matching-score
/// table: each target takes its k highest-m proposals (ties by lowest index).
/// With resolve_conflicts, a proposal claimed by several targets stays with
/// the one scoring it highest (ties by lowest target index); no refill.
Assignment one_to_many(const Eigen::MatrixXd& scores, std::size_t k, bool resolve_conflicts = true);

Assignment one_to_many(const std::vector<PseudoLabel>& targets,
                       const std::vector<Detection>& proposals, const MatchScoreParams& params,
                       std::size_t k = kDefaultTopK, bool resolve_conflicts = true);

/// Max-IoU assignment: a proposal is positive for its highest-IoU target when
/// that IoU >= pos_thresh. With rescue, each target also claims its best proposal.
Assignment max_iou_assign(const std::vector<PseudoLabel>& targets,
                          const std::vector<Detection>& proposals, double pos_thresh = 0.5,
                          bool rescue = false);

/// Single-level ATSS: per target, the candidate_k center-nearest proposals
/// form the candidate set; positives have IoU >= mean + std of the candidate
/// IoUs and a center inside the target box.
Assignment atss_assign(const std::vector<PseudoLabel>& targets,
                       const std::vector<Detection>& proposals, std::size_t candidate_k = 9);

/// SimOTA with dynamic k = clamp(round(sum of top-10 IoUs), 1, N) and cost
/// lambda_cls * C_cls + 3 * -log(IoU + 1e-8); conflicts go to the cheaper target.
Assignment simota_assign(const std::vector<PseudoLabel>& targets,
                         const std::vector<Detection>& proposals, const CostWeights& w);

/// Tolerance used when comparing against data-derived thresholds (mean + std).
inline constexpr double kThresholdSlack = 1e-12;

}  // namespace ssod
