#pragma once

#include "ssod/assignment.hpp"
#include "ssod/cost.hpp"
#include "ssod/geometry.hpp"

#include <Eigen/Core>

#include <optional>
#include <span>
#include <vector>

namespace ssod {

/// Training stage; also tags which loss family a breakdown was built with.
enum class Stage { OneToMany, OneToOne };

const char* to_string(Stage s);

/// Loss parts are stored already weighted, so total == cls + reg_giou + reg_l1 + consistency.
struct LossBreakdown {
  Stage flavor = Stage::OneToOne;
  double cls = 0.0;
  double reg_giou = 0.0;
  double reg_l1 = 0.0;
  double consistency = 0.0;
  double total = 0.0;
  /// Gradient w.r.t. the flattened proposals (see flatten_proposals).
  std::optional<Eigen::VectorXd> grads;

  void update_total() { total = cls + reg_giou + reg_l1 + consistency; }
};

enum class ScoreNormalization { MaxIou, None };

/// m-hat per positive, aligned with Assignment::per_target.
struct NormalizedScore {
  std::vector<std::vector<double>> m_hat;
};

/// Rescales each target's matching scores so that the largest equals the
/// largest IoU among its positives. A target whose scores are all zero gets
/// all-zero m-hat. m and u are aligned with assignment.per_target.
NormalizedScore normalize_match_scores(const Assignment& assignment,
                                       const std::vector<std::vector<double>>& m,
                                       const std::vector<std::vector<double>>& u,
                                       ScoreNormalization mode = ScoreNormalization::MaxIou);

/// Binary cross entropy with natural log; s is clamped to [1e-8, 1 - 1e-8].
double bce(double s, double target);

struct QualityTerm {
  double score;
  double quality;
};

struct ClsLoss {
  double value = 0.0;
  Eigen::VectorXd grad_pos;
  Eigen::VectorXd grad_neg;
};

inline constexpr double kDefaultQualityGamma = 2.0;

/// Quality-weighted classification loss:
///   sum_pos |q - s|^gamma BCE(s, q) + sum_neg s^gamma BCE(s, 0).
ClsLoss o2m_cls_loss(std::span<const QualityTerm> positives, std::span<const double> negatives,
                     double gamma = kDefaultQualityGamma);

struct RegTerm {
  double weight;
  Boxd box;
  Boxd target;
};

struct RegLoss {
  double giou_part = 0.0;
  double l1_part = 0.0;
  double value = 0.0;
  /// d loss / d (cx, cy, w, h) of each term's box.
  std::vector<Eigen::Vector4d> grad;
};

/// sum_i w_i (1 - GIoU(b_i, t_i)) + sum_i w_i L1(b_i, t_i).
RegLoss o2m_reg_loss(std::span<const RegTerm> positives);

/// d GIoU(box, target) / d (cx, cy, w, h) of box. Kinks take the one-sided
/// branch where the predicted edge is not the active one.
Eigen::Vector4d giou_grad_center(const Boxd& box, const Boxd& target);
/// d L1(box, target) / d (cx, cy, w, h) of box (sign, 0 at equality).
Eigen::Vector4d l1_grad_center(const Boxd& box, const Boxd& target);

/// Sigmoid-focal loss at probability p for a 0/1 label, and its derivative in p.
double focal_loss(double p, bool positive, double alpha, double gamma);
double focal_loss_grad(double p, bool positive, double alpha, double gamma);

/// Flat layout: [scores row-major (N x C) | boxes (N x 4, cx cy w h)].
Eigen::VectorXd flatten_proposals(const std::vector<Detection>& proposals);
std::vector<Detection> unflatten_proposals(const std::vector<Detection>& like,
                                           const Eigen::VectorXd& flat);

/// One-to-one losses: focal classification over every (proposal, class)
/// with a 1 label only at matched pairs, plus GIoU and L1 on matched pairs.
/// Parts weighted by lambda_cls, lambda_giou, lambda_l1.
LossBreakdown o2o_losses(const Assignment& assignment, const std::vector<Detection>& proposals,
                         const std::vector<PseudoLabel>& targets, const CostWeights& w);

/// One-to-many losses over a ranked assignment with normalized scores: the
/// quality-weighted classification loss on every (proposal, class) entry and
/// the m-hat-weighted GIoU and L1 terms on each assigned pair.
LossBreakdown o2m_losses(const Assignment& assignment, const NormalizedScore& m_hat,
                         const std::vector<Detection>& proposals,
                         const std::vector<PseudoLabel>& targets,
                         double gamma = kDefaultQualityGamma);

/// Stage indicator: one-to-many while t <= T1.
inline Stage stage_for_iteration(long t, long T1) {
  return t <= T1 ? Stage::OneToMany : Stage::OneToOne;
}

inline constexpr double kDefaultUnsupWeight = 4.0;
inline constexpr double kDefaultConsistencyWeight = 1.0;

/// sup + w_u * unsup + w_c * consistency for the stage selected by t <= T1.
/// Throws StageMismatch when sup or unsup carry the other stage's flavor.
double total_loss(long t, long T1, const LossBreakdown& sup, const LossBreakdown& unsup,
                  double consistency, double w_u = kDefaultUnsupWeight,
                  double w_c = kDefaultConsistencyWeight);

}  // namespace ssod
