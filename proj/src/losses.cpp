#include "ssod/losses.hpp"

#include "ssod/errors.hpp"

#include <cmath>
#include <string>

namespace ssod {

const char* to_string(Stage s) { return s == Stage::OneToMany ? "one_to_many" : "one_to_one"; }

NormalizedScore normalize_match_scores(const Assignment& assignment,
                                       const std::vector<std::vector<double>>& m,
                                       const std::vector<std::vector<double>>& u,
                                       ScoreNormalization mode) {
  const std::size_t n = assignment.per_target.size();
  if (m.size() != n || u.size() != n) throw InvalidArgument("score lists must align with targets");
  NormalizedScore out;
  out.m_hat.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t k = assignment.per_target[t].size();
    if (m[t].size() != k || u[t].size() != k)
      throw InvalidArgument("score lists must align with assigned proposals");
    if (mode == ScoreNormalization::None) {
      out.m_hat[t] = m[t];
      continue;
    }
    double max_m = 0.0, max_u = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
      max_m = std::max(max_m, m[t][r]);
      max_u = std::max(max_u, u[t][r]);
    }
    out.m_hat[t].assign(k, 0.0);
    if (max_m <= 0.0) continue;
    for (std::size_t r = 0; r < k; ++r) out.m_hat[t][r] = m[t][r] * max_u / max_m;
  }
  return out;
}

double bce(double s, double target) {
  s = clamp_prob(s);
  return -target * std::log(s) - (1.0 - target) * std::log(1.0 - s);
}

namespace {

bool clamped(double s) { return s < kProbEps || s > 1.0 - kProbEps; }

double bce_grad(double s, double target) { return -target / s + (1.0 - target) / (1.0 - s); }

// |d|^gamma and its derivative with respect to d.
double abs_pow(double d, double gamma) { return gamma == 0.0 ? 1.0 : std::pow(std::abs(d), gamma); }
double abs_pow_grad(double d, double gamma) {
  if (gamma == 0.0 || d == 0.0) return 0.0;
  return gamma * std::pow(std::abs(d), gamma - 1.0) * (d > 0 ? 1.0 : -1.0);
}

}  // namespace

ClsLoss o2m_cls_loss(std::span<const QualityTerm> positives, std::span<const double> negatives,
                     double gamma) {
  if (gamma < 0) throw InvalidArgument("gamma must be non-negative");
  ClsLoss out;
  out.grad_pos = Eigen::VectorXd::Zero(positives.size());
  out.grad_neg = Eigen::VectorXd::Zero(negatives.size());
  for (std::size_t i = 0; i < positives.size(); ++i) {
    const double s = clamp_prob(positives[i].score);
    const double q = positives[i].quality;
    const double d = s - q;
    const double weight = abs_pow(d, gamma);
    const double ce = bce(s, q);
    out.value += weight * ce;
    if (!clamped(positives[i].score))
      out.grad_pos[i] = abs_pow_grad(d, gamma) * ce + weight * bce_grad(s, q);
  }
  for (std::size_t j = 0; j < negatives.size(); ++j) {
    const double s = clamp_prob(negatives[j]);
    const double weight = abs_pow(s, gamma);
    const double ce = -std::log(1.0 - s);
    out.value += weight * ce;
    if (!clamped(negatives[j])) out.grad_neg[j] = abs_pow_grad(s, gamma) * ce + weight / (1.0 - s);
  }
  return out;
}

Eigen::Vector4d giou_grad_center(const Boxd& p, const Boxd& g) {
  // Gradient in corner coordinates (x1, y1, x2, y2) first.
  Eigen::Vector4d dI = Eigen::Vector4d::Zero();
  const double iw = std::min(p.x_max, g.x_max) - std::max(p.x_min, g.x_min);
  const double ih = std::min(p.y_max, g.y_max) - std::max(p.y_min, g.y_min);
  double inter = 0.0;
  if (iw > 0 && ih > 0) {
    inter = iw * ih;
    dI << (p.x_min > g.x_min ? -ih : 0.0), (p.y_min > g.y_min ? -iw : 0.0),
        (p.x_max < g.x_max ? ih : 0.0), (p.y_max < g.y_max ? iw : 0.0);
  }
  const double pw = p.width(), ph = p.height();
  const Eigen::Vector4d dA(-ph, -pw, ph, pw);
  const double uni = p.area() + g.area() - inter;
  if (uni <= 0) return Eigen::Vector4d::Zero();
  const Eigen::Vector4d dU = dA - dI;
  Eigen::Vector4d dG = dI / uni - inter * dU / (uni * uni);

  const double hw = std::max(p.x_max, g.x_max) - std::min(p.x_min, g.x_min);
  const double hh = std::max(p.y_max, g.y_max) - std::min(p.y_min, g.y_min);
  const double enclosing = hw * hh;
  if (enclosing > 0) {
    const Eigen::Vector4d dC(p.x_min < g.x_min ? -hh : 0.0, p.y_min < g.y_min ? -hw : 0.0,
                             p.x_max > g.x_max ? hh : 0.0, p.y_max > g.y_max ? hw : 0.0);
    // giou = I/U - 1 + U/C
    dG += dU / enclosing - uni * dC / (enclosing * enclosing);
  }
  // x1 = cx - w/2, x2 = cx + w/2 (same for y).
  return {dG[0] + dG[2], dG[1] + dG[3], (dG[2] - dG[0]) / 2, (dG[3] - dG[1]) / 2};
}

Eigen::Vector4d l1_grad_center(const Boxd& box, const Boxd& target) {
  const Eigen::Vector4d d = box.center_form() - target.center_form();
  return d.unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

RegLoss o2m_reg_loss(std::span<const RegTerm> positives) {
  RegLoss out;
  out.grad.reserve(positives.size());
  for (const RegTerm& t : positives) {
    out.giou_part += t.weight * (1.0 - giou(t.box, t.target));
    out.l1_part += t.weight * l1_center_form(t.box, t.target);
    out.grad.push_back(t.weight * (l1_grad_center(t.box, t.target) - giou_grad_center(t.box, t.target)));
  }
  out.value = out.giou_part + out.l1_part;
  return out;
}

double focal_loss(double p, bool positive, double alpha, double gamma) {
  p = clamp_prob(p);
  if (positive) return alpha * std::pow(1.0 - p, gamma) * -std::log(p);
  return (1.0 - alpha) * std::pow(p, gamma) * -std::log(1.0 - p);
}

double focal_loss_grad(double p, bool positive, double alpha, double gamma) {
  if (clamped(p)) return 0.0;
  if (positive) {
    const double q = 1.0 - p;
    const double lead = gamma == 0.0 ? 0.0 : -gamma * std::pow(q, gamma - 1.0) * -std::log(p);
    return alpha * (lead - std::pow(q, gamma) / p);
  }
  const double lead = gamma == 0.0 ? 0.0 : gamma * std::pow(p, gamma - 1.0) * -std::log(1.0 - p);
  return (1.0 - alpha) * (lead + std::pow(p, gamma) / (1.0 - p));
}

namespace {

Eigen::Index class_count(const std::vector<Detection>& proposals) {
  if (proposals.empty()) return 0;
  const Eigen::Index c = proposals.front().scores.size();
  for (const auto& d : proposals)
    if (d.scores.size() != c) throw InvalidArgument("proposals disagree on class count");
  return c;
}

void check_target_classes(const std::vector<PseudoLabel>& targets, Eigen::Index classes) {
  for (const auto& t : targets)
    if (t.class_id < 0 || t.class_id >= classes)
      throw InvalidArgument("target class outside the proposal score vector");
}

}  // namespace

Eigen::VectorXd flatten_proposals(const std::vector<Detection>& proposals) {
  const Eigen::Index n = static_cast<Eigen::Index>(proposals.size());
  const Eigen::Index c = class_count(proposals);
  Eigen::VectorXd flat(n * c + n * 4);
  for (Eigen::Index j = 0; j < n; ++j) {
    flat.segment(j * c, c) = proposals[j].scores;
    flat.segment(n * c + 4 * j, 4) = proposals[j].box.center_form();
  }
  return flat;
}

std::vector<Detection> unflatten_proposals(const std::vector<Detection>& like,
                                           const Eigen::VectorXd& flat) {
  const Eigen::Index n = static_cast<Eigen::Index>(like.size());
  const Eigen::Index c = class_count(like);
  if (flat.size() != n * c + n * 4) throw InvalidArgument("flat vector size mismatch");
  std::vector<Detection> out;
  out.reserve(like.size());
  for (Eigen::Index j = 0; j < n; ++j)
    out.emplace_back(Boxd::from_center(Eigen::Vector4d(flat.segment(n * c + 4 * j, 4))),
                     Eigen::VectorXd(flat.segment(j * c, c)));
  return out;
}

LossBreakdown o2o_losses(const Assignment& assignment, const std::vector<Detection>& proposals,
                         const std::vector<PseudoLabel>& targets, const CostWeights& w) {
  if (assignment.mode != AssignMode::OneToOne) throw InvalidArgument("o2o losses need a one-to-one assignment");
  if (assignment.num_targets() != targets.size() || assignment.num_proposals != proposals.size())
    throw InvalidArgument("assignment does not match targets/proposals");
  const Eigen::Index n = static_cast<Eigen::Index>(proposals.size());
  const Eigen::Index c = class_count(proposals);
  check_target_classes(targets, c);

  Eigen::MatrixXi label = Eigen::MatrixXi::Zero(n, c);
  for (std::size_t t = 0; t < targets.size(); ++t)
    for (std::size_t p : assignment.per_target[t]) label(p, targets[t].class_id) = 1;

  LossBreakdown out;
  out.flavor = Stage::OneToOne;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(n * c + n * 4);
  double cls = 0.0;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index k = 0; k < c; ++k) {
      const bool pos = label(j, k) == 1;
      const double p = proposals[j].scores[k];
      cls += focal_loss(p, pos, w.focal_alpha, w.focal_gamma);
      grad[j * c + k] = w.lambda_cls * focal_loss_grad(p, pos, w.focal_alpha, w.focal_gamma);
    }
  double g = 0.0, l1 = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t)
    for (std::size_t p : assignment.per_target[t]) {
      const Boxd& b = proposals[p].box;
      g += 1.0 - giou(b, targets[t].box);
      l1 += l1_center_form(b, targets[t].box);
      grad.segment(n * c + 4 * static_cast<Eigen::Index>(p), 4) +=
          -w.lambda_giou * giou_grad_center(b, targets[t].box) +
          w.lambda_l1 * l1_grad_center(b, targets[t].box);
    }
  out.cls = w.lambda_cls * cls;
  out.reg_giou = w.lambda_giou * g;
  out.reg_l1 = w.lambda_l1 * l1;
  out.grads = std::move(grad);
  out.update_total();
  return out;
}

LossBreakdown o2m_losses(const Assignment& assignment, const NormalizedScore& m_hat,
                         const std::vector<Detection>& proposals,
                         const std::vector<PseudoLabel>& targets, double gamma) {
  if (assignment.num_targets() != targets.size() || assignment.num_proposals != proposals.size() ||
      m_hat.m_hat.size() != targets.size())
    throw InvalidArgument("assignment does not match targets/proposals");
  const Eigen::Index n = static_cast<Eigen::Index>(proposals.size());
  const Eigen::Index c = class_count(proposals);
  check_target_classes(targets, c);

  // Quality target per (proposal, class); negative means background.
  Eigen::MatrixXd quality = Eigen::MatrixXd::Constant(n, c, -1.0);
  std::vector<RegTerm> reg;
  std::vector<std::size_t> reg_prop;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto& props = assignment.per_target[t];
    if (m_hat.m_hat[t].size() != props.size()) throw InvalidArgument("m-hat misaligned with assignment");
    for (std::size_t r = 0; r < props.size(); ++r) {
      double& q = quality(props[r], targets[t].class_id);
      q = std::max(q, m_hat.m_hat[t][r]);
      reg.push_back({m_hat.m_hat[t][r], proposals[props[r]].box, targets[t].box});
      reg_prop.push_back(props[r]);
    }
  }

  std::vector<QualityTerm> pos;
  std::vector<double> neg;
  std::vector<Eigen::Index> pos_idx, neg_idx;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index k = 0; k < c; ++k) {
      const double s = proposals[j].scores[k];
      if (quality(j, k) >= 0.0) {
        pos.push_back({s, quality(j, k)});
        pos_idx.push_back(j * c + k);
      } else {
        neg.push_back(s);
        neg_idx.push_back(j * c + k);
      }
    }
  const ClsLoss cls = o2m_cls_loss(pos, neg, gamma);
  const RegLoss rl = o2m_reg_loss(reg);

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(n * c + n * 4);
  for (std::size_t i = 0; i < pos_idx.size(); ++i) grad[pos_idx[i]] = cls.grad_pos[i];
  for (std::size_t i = 0; i < neg_idx.size(); ++i) grad[neg_idx[i]] = cls.grad_neg[i];
  for (std::size_t i = 0; i < reg_prop.size(); ++i)
    grad.segment(n * c + 4 * static_cast<Eigen::Index>(reg_prop[i]), 4) += rl.grad[i];

  LossBreakdown out;
  out.flavor = Stage::OneToMany;
  out.cls = cls.value;
  out.reg_giou = rl.giou_part;
  out.reg_l1 = rl.l1_part;
  out.grads = std::move(grad);
  out.update_total();
  return out;
}

double total_loss(long t, long T1, const LossBreakdown& sup, const LossBreakdown& unsup,
                  double consistency, double w_u, double w_c) {
  const Stage stage = stage_for_iteration(t, T1);
  if (sup.flavor != stage || unsup.flavor != stage)
    throw StageMismatch(std::string("iteration ") + std::to_string(t) + " is in stage " +
                        to_string(stage) + " but received " + to_string(sup.flavor) + "/" +
                        to_string(unsup.flavor) + " losses");
  return sup.total + w_u * unsup.total + w_c * consistency;
}

}  // namespace ssod
