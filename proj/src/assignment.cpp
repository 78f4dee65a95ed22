#include "ssod/assignment.hpp"

#include "ssod/errors.hpp"
#include "ssod/hungarian.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace ssod {

std::vector<std::size_t> Assignment::positives() const {
  std::set<std::size_t> s;
  for (const auto& props : per_target) s.insert(props.begin(), props.end());
  return {s.begin(), s.end()};
}

bool Assignment::consistent() const {
  std::vector<int> seen(num_proposals, 0);
  for (std::size_t t = 0; t < per_target.size(); ++t) {
    if (mode == AssignMode::OneToOne && per_target[t].size() > 1) return false;
    for (std::size_t p : per_target[t]) {
      if (p >= num_proposals) return false;
      ++seen[p];
    }
  }
  if (mode == AssignMode::OneToOne || per_proposal) {
    for (int c : seen)
      if (c > 1) return false;
  }
  if (per_proposal) {
    if (per_proposal->size() != num_proposals) return false;
    for (std::size_t p = 0; p < num_proposals; ++p) {
      const int t = (*per_proposal)[p];
      if (t == kBackground) {
        if (seen[p] != 0) return false;
        continue;
      }
      if (t < 0 || static_cast<std::size_t>(t) >= per_target.size()) return false;
      const auto& props = per_target[t];
      if (std::find(props.begin(), props.end(), p) == props.end()) return false;
    }
  }
  return true;
}

void rebuild_inverse(Assignment& a) {
  std::vector<int> inv(a.num_proposals, kBackground);
  for (std::size_t t = 0; t < a.per_target.size(); ++t)
    for (std::size_t p : a.per_target[t]) {
      if (inv[p] != kBackground) throw InvalidArgument("proposal assigned to two targets");
      inv[p] = static_cast<int>(t);
    }
  a.per_proposal = std::move(inv);
}

double assignment_cost(const Eigen::MatrixXd& cost, const Assignment& a) {
  double total = 0.0;
  for (std::size_t t = 0; t < a.per_target.size(); ++t)
    for (std::size_t p : a.per_target[t]) total += cost(t, p);
  return total;
}

Assignment hungarian(const Eigen::MatrixXd& costs) {
  if (!costs.allFinite()) throw InvalidArgument("cost matrix has non-finite entries");
  Assignment a;
  a.mode = AssignMode::OneToOne;
  a.num_proposals = static_cast<std::size_t>(costs.cols());
  a.per_target.resize(costs.rows());
  const auto cols = solve_assignment(costs);
  for (std::size_t t = 0; t < cols.size(); ++t)
    a.per_target[t].push_back(static_cast<std::size_t>(cols[t]));
  rebuild_inverse(a);
  return a;
}

Assignment hungarian(const CostMatrix& costs) { return hungarian(costs.values); }

namespace {

/// Indices of the row sorted by descending value, ties by lowest index.
std::vector<std::size_t> rank_descending(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::vector<std::size_t> order(row.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  return order;
}

/// Keeps each contested proposal with the target preferred by `better`
/// (earlier target wins ties) and removes it from the others.
template <typename Better>
void resolve_to_single_owner(Assignment& a, Better better) {
  std::vector<int> owner(a.num_proposals, kBackground);
  for (std::size_t t = 0; t < a.per_target.size(); ++t)
    for (std::size_t p : a.per_target[t])
      if (owner[p] == kBackground || better(t, static_cast<std::size_t>(owner[p]), p))
        owner[p] = static_cast<int>(t);
  for (std::size_t t = 0; t < a.per_target.size(); ++t) {
    auto& props = a.per_target[t];
    props.erase(std::remove_if(props.begin(), props.end(),
                               [&](std::size_t p) { return owner[p] != static_cast<int>(t); }),
                props.end());
  }
  a.per_proposal = std::move(owner);
}

}  // namespace

Assignment one_to_many(const Eigen::MatrixXd& scores, std::size_t k, bool resolve_conflicts) {
  if (k == 0) throw InvalidArgument("one-to-many k must be positive");
  Assignment a;
  a.mode = AssignMode::OneToMany;
  a.num_proposals = static_cast<std::size_t>(scores.cols());
  a.per_target.resize(scores.rows());
  if (scores.cols() == 0) return a;
  const std::size_t take = std::min<std::size_t>(k, a.num_proposals);
  a.truncated = k > a.num_proposals;
  for (Eigen::Index t = 0; t < scores.rows(); ++t) {
    auto order = rank_descending(scores.row(t));
    order.resize(take);
    a.per_target[t] = std::move(order);
  }
  if (resolve_conflicts)
    resolve_to_single_owner(a, [&](std::size_t t, std::size_t cur, std::size_t p) {
      return scores(t, p) > scores(cur, p);
    });
  return a;
}

Assignment one_to_many(const std::vector<PseudoLabel>& targets,
                       const std::vector<Detection>& proposals, const MatchScoreParams& params,
                       std::size_t k, bool resolve_conflicts) {
  if (proposals.empty()) throw InvalidArgument("one-to-many needs at least one proposal");
  return one_to_many(match_score_matrix(targets, proposals, params), k, resolve_conflicts);
}

Assignment max_iou_assign(const std::vector<PseudoLabel>& targets,
                          const std::vector<Detection>& proposals, double pos_thresh,
                          bool rescue) {
  Assignment a;
  a.mode = AssignMode::OneToMany;
  a.num_proposals = proposals.size();
  a.per_target.resize(targets.size());
  std::vector<int> owner(proposals.size(), kBackground);
  if (targets.empty()) {
    a.per_proposal = owner;
    return a;
  }
  const Eigen::MatrixXd u = iou_matrix(targets, proposals);
  for (Eigen::Index p = 0; p < u.cols(); ++p) {
    Eigen::Index best = 0;
    for (Eigen::Index t = 1; t < u.rows(); ++t)
      if (u(t, p) > u(best, p)) best = t;
    if (u(best, p) >= pos_thresh) owner[p] = static_cast<int>(best);
  }
  if (rescue) {
    for (Eigen::Index t = 0; t < u.rows(); ++t) {
      Eigen::Index best = 0;
      for (Eigen::Index p = 1; p < u.cols(); ++p)
        if (u(t, p) > u(t, best)) best = p;
      if (u.cols() > 0 && u(t, best) > 0) owner[best] = static_cast<int>(t);
    }
  }
  for (std::size_t p = 0; p < owner.size(); ++p)
    if (owner[p] != kBackground) a.per_target[owner[p]].push_back(p);
  a.per_proposal = std::move(owner);
  return a;
}

Assignment atss_assign(const std::vector<PseudoLabel>& targets,
                       const std::vector<Detection>& proposals, std::size_t candidate_k) {
  if (candidate_k == 0) throw InvalidArgument("ATSS candidate_k must be positive");
  Assignment a;
  a.mode = AssignMode::OneToMany;
  a.num_proposals = proposals.size();
  a.per_target.resize(targets.size());
  if (proposals.empty() || targets.empty()) {
    a.per_proposal = std::vector<int>(proposals.size(), kBackground);
    return a;
  }
  const Eigen::MatrixXd u = iou_matrix(targets, proposals);
  const std::size_t take = std::min(candidate_k, proposals.size());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto tc = targets[t].box.center_form();
    Eigen::RowVectorXd neg_dist(proposals.size());
    for (std::size_t p = 0; p < proposals.size(); ++p) {
      const auto pc = proposals[p].box.center_form();
      neg_dist[p] = -std::hypot(pc[0] - tc[0], pc[1] - tc[1]);
    }
    auto cand = rank_descending(neg_dist);
    cand.resize(take);
    double mean = 0.0;
    for (std::size_t p : cand) mean += u(t, p);
    mean /= static_cast<double>(take);
    double var = 0.0;
    for (std::size_t p : cand) var += (u(t, p) - mean) * (u(t, p) - mean);
    const double thr = mean + std::sqrt(var / static_cast<double>(take));
    for (std::size_t p : cand) {
      const auto pc = proposals[p].box.center_form();
      if (u(t, p) >= thr - kThresholdSlack && targets[t].box.contains(pc[0], pc[1]))
        a.per_target[t].push_back(p);
    }
  }
  resolve_to_single_owner(
      a, [&](std::size_t t, std::size_t cur, std::size_t p) { return u(t, p) > u(cur, p); });
  return a;
}

Assignment simota_assign(const std::vector<PseudoLabel>& targets,
                         const std::vector<Detection>& proposals, const CostWeights& w) {
  Assignment a;
  a.mode = AssignMode::OneToMany;
  a.num_proposals = proposals.size();
  a.per_target.resize(targets.size());
  if (proposals.empty() || targets.empty()) {
    a.per_proposal = std::vector<int>(proposals.size(), kBackground);
    return a;
  }
  const Eigen::MatrixXd u = iou_matrix(targets, proposals);
  Eigen::MatrixXd cost(u.rows(), u.cols());
  for (Eigen::Index t = 0; t < u.rows(); ++t)
    for (Eigen::Index p = 0; p < u.cols(); ++p) {
      const double s = proposals[p].scores[targets[t].class_id];
      cost(t, p) = w.lambda_cls * focal_cls_cost(s, true, w) + 3.0 * -std::log(u(t, p) + 1e-8);
    }
  const auto n = static_cast<long>(proposals.size());
  for (Eigen::Index t = 0; t < u.rows(); ++t) {
    const auto by_iou = rank_descending(u.row(t));
    double top_sum = 0.0;
    for (std::size_t r = 0; r < std::min<std::size_t>(10, by_iou.size()); ++r) top_sum += u(t, by_iou[r]);
    const long dynamic_k = std::clamp(std::lround(top_sum), 1L, n);
    auto by_cost = rank_descending(-cost.row(t));
    by_cost.resize(static_cast<std::size_t>(dynamic_k));
    a.per_target[t] = std::move(by_cost);
  }
  resolve_to_single_owner(
      a, [&](std::size_t t, std::size_t cur, std::size_t p) { return cost(t, p) < cost(cur, p); });
  return a;
}

}  // namespace ssod
