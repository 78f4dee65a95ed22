#pragma once

#include "ssod/consistency.hpp"
#include "ssod/cost.hpp"
#include "ssod/losses.hpp"
#include "ssod/mining.hpp"
#include "ssod/simulator.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace ssod {

/// Flat parameter vector of a model.
using ParamVector = Eigen::VectorXd;

inline constexpr double kDefaultEmaMomentum = 0.999;

/// teacher' = momentum * teacher + (1 - momentum) * student, elementwise.
template <typename DerivedT, typename DerivedS>
ParamVector ema_update(const Eigen::MatrixBase<DerivedT>& teacher, const Eigen::MatrixBase<DerivedS>& student,
                       double momentum) {
  return momentum * teacher + (1.0 - momentum) * student;
}

struct StageConfig {
  long T1 = 60000;
  long total_iters = 120000;
  double tau_s = kDefaultScoreThreshold;
  double w_u = kDefaultUnsupWeight;
  double w_c = kDefaultConsistencyWeight;
  double ema_momentum = kDefaultEmaMomentum;

  void validate() const;
  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

inline Stage stage_of(long t, const StageConfig& cfg) { return stage_for_iteration(t, cfg.T1); }

/// Everything a training iteration needs besides the stage schedule.
struct PipelineSettings {
  CostWeights cost;
  MatchScoreParams match;
  EmSettings em;
  std::size_t o2m_k = kDefaultTopK;
  double quality_gamma = kDefaultQualityGamma;
  double nms_iou = kDefaultNmsIou;
  int labeled_per_batch = 1;
  int unlabeled_per_batch = 4;
  int feature_channels = 4;
  int feature_size = 16;
  int model_dim = 8;
  int model_heads = 2;
  int roi_size = 3;
  /// Feature noise of the weak (teacher) and strong (student) views.
  double weak_feature_noise = 0.05;
  double strong_feature_noise = 0.2;
  /// Object queries per view, taken from the highest-scoring proposals.
  int object_queries = 6;
  /// Scale of the random walk that stands in for student optimization.
  double student_drift = 1e-3;

  void validate() const;
  friend bool operator==(const PipelineSettings&, const PipelineSettings&) = default;
};

struct PipelineState {
  std::uint64_t seed = 0;
  ConsistencyModel student;
  ConsistencyModel teacher;
  long iteration = 0;

  /// Student initialized at random from the seed; the teacher starts as a copy.
  static PipelineState create(std::uint64_t seed, const PipelineSettings& settings);
};

struct Batch {
  std::vector<ImageSample> labeled;
  /// Ground truth of unlabeled images is used for diagnostics only.
  std::vector<ImageSample> unlabeled;
};

/// Images of iteration t: a contiguous block of labeled + unlabeled indices.
Batch make_batch(const Scenario& scn, long t, const PipelineSettings& settings);

struct StepDiagnostics {
  long iteration = 0;
  Stage stage = Stage::OneToMany;
  /// Score-filtered labels that feed classification and regression.
  std::size_t pseudo_count = 0;
  double pseudo_precision = 1.0;
  double pseudo_recall = 0.0;
  /// Cost-mined labels that feed the consistency term.
  std::size_t mined_count = 0;
  double mined_precision = 1.0;
  double mined_recall = 0.0;
  std::optional<double> tau_c;
  double sup_loss = 0.0;
  double unsup_loss = 0.0;
  double consistency_loss = 0.0;
  double total_loss = 0.0;
  /// Euclidean distance between teacher and student parameters after the step.
  double teacher_student_gap = 0.0;
};

struct StepResult {
  LossBreakdown sup;
  LossBreakdown unsup;
  double consistency = 0.0;
  double total = 0.0;
  StepDiagnostics diagnostics;
  /// Labels used per unlabeled image, exposed so routing can be checked.
  std::vector<std::vector<PseudoLabel>> cls_reg_labels;
  std::vector<std::vector<PseudoLabel>> consistency_labels;
};

/// Losses of one image set under the given stage: one-to-many ranked
/// assignment with normalized scores, or Hungarian with one-to-one losses.
/// Images without targets contribute nothing.
LossBreakdown stage_losses(Stage stage, const std::vector<std::vector<PseudoLabel>>& targets,
                           const std::vector<std::vector<Detection>>& proposals, const PipelineSettings& settings);

/// One iteration: teacher outputs on the weak view are score-filtered for
/// classification/regression and cost-mined for consistency, the stage picks
/// the assignment, losses are combined with total_loss, then the student
/// drifts and the teacher follows by EMA. Advances state.iteration.
StepResult semi_step(PipelineState& state, const Batch& batch, const StageConfig& cfg,
                     const PipelineSettings& settings);

/// Runs iterations 1..steps on batches drawn from the scenario.
std::vector<StepDiagnostics> run_pipeline(const Scenario& scn, const StageConfig& cfg,
                                          const PipelineSettings& settings, long steps);

}  // namespace ssod
