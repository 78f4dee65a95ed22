#pragma once

#include "ssod/assignment.hpp"
#include "ssod/consistency.hpp"
#include "ssod/cost.hpp"
#include "ssod/geometry.hpp"
#include "ssod/mining.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ssod {

/// Teacher/student confidence as a function of the box's IoU with its source
/// object: clamp(Normal(offset + slope * IoU, sd), 0, 1).
struct ScoreCalibration {
  double offset = 0.2;
  double slope = 0.75;
  double sd = 0.1;

  friend bool operator==(const ScoreCalibration&, const ScoreCalibration&) = default;
};

struct NoiseModel {
  /// Center shift, in units of the box size (weak view).
  double center_jitter_sigma = 0.1;
  /// Log-scale size perturbation (weak view).
  double scale_jitter_sigma = 0.1;
  ScoreCalibration calibration;
  /// Expected spurious boxes per image (Poisson).
  double false_positive_rate = 25.0;
  /// Expected extra, poorly localized teacher boxes per object (Poisson).
  double duplicate_rate = 0.0;
  /// Jitter multiplier of duplicates relative to the weak view.
  double duplicate_jitter_factor = 3.0;
  /// Per-object confidence penalty drawn uniformly from [0, difficulty].
  double difficulty = 0.8;
  /// Spurious boxes get a confidence penalty drawn uniformly from [0, false_positive_penalty].
  double false_positive_penalty = 0.5;
  /// Whether the object penalty also lowers the student's scores.
  bool student_difficulty = true;
  /// Upper bound of student proposal scores.
  double student_score_cap = 0.95;
  double class_flip_prob = 0.05;
  /// Jitter multiplier of the strong (student) view relative to the weak view.
  double strong_view_factor = 2.0;
  /// Off-class probabilities are drawn in [0, background_score) and kept below the main score.
  double background_score = 0.05;

  /// No jitter, perfect calibration, no spurious boxes, no flips.
  static NoiseModel noiseless();
  void validate() const;
  friend bool operator==(const NoiseModel&, const NoiseModel&) = default;
};

struct Scenario {
  std::uint64_t seed = 0;
  int num_images = 200;
  int boxes_min = 2;
  int boxes_max = 8;
  int num_classes = 5;
  NoiseModel noise;
  int proposals_per_image = 60;
  /// Share of student proposals placed around objects (the rest are background).
  double proposal_object_fraction = 0.5;
  /// Exponent shaping how unevenly object proposals spread across objects.
  double proposal_cluster_skew = 3.0;
  /// Images pooled per mixture fit.
  int batch_size = 4;

  void validate() const;
  friend bool operator==(const Scenario&, const Scenario&) = default;
};

struct GtBox {
  Boxd box;
  int class_id = 0;
};

struct ImageSample {
  std::vector<GtBox> gt;
  /// Teacher outputs on the weak view; teacher_source[i] is the GT index or -1.
  std::vector<Detection> teacher;
  std::vector<int> teacher_source;
  /// Student proposals on the strong view; student_source[j] is the GT index or -1.
  std::vector<Detection> student;
  std::vector<int> student_source;
};

struct Dataset {
  Scenario scenario;
  std::vector<ImageSample> images;
};

/// Per-image random stream derived from (seed, image index, stream tag).
std::mt19937_64 image_rng(std::uint64_t seed, std::uint64_t image, std::uint64_t stream = 0);

ImageSample generate_image(const Scenario& scn, std::uint64_t image_index);

/// Deterministic for a given scenario regardless of worker count.
Dataset generate(const Scenario& scn);

std::vector<PseudoLabel> gt_as_targets(const std::vector<GtBox>& gt);

/// Synthetic backbone features: each object adds its class pattern over its
/// box footprint, plus Gaussian view noise.
FeatureGrid render_features(const std::vector<GtBox>& gt, int channels, int size, double noise_sd,
                            std::mt19937_64& rng);

enum class FilterStrategy { Fixed, TopK, MeanStd, CostGmm };

struct FilterSpec {
  FilterStrategy strategy = FilterStrategy::Fixed;
  double tau_s = kDefaultScoreThreshold;
  std::size_t k = kDefaultPseudoTopK;

  std::string label() const;
};

/// Fixed(0.4), Top-K(9), Mean+Std, Cost-based GMM.
std::vector<FilterSpec> default_filter_specs();

struct FilterRow {
  std::string strategy;
  std::size_t kept = 0;
  std::size_t true_positives = 0;
  std::size_t ground_truth = 0;
  double precision = 1.0;
  double recall = 0.0;
  /// precision is reported as 1 by convention when nothing was kept.
  bool empty_kept = false;
};

struct QualityRow {
  std::size_t k = 0;
  std::size_t boxes = 0;
  double mean_i1 = 0.0;
  double mean_i2 = 0.0;
  double frac_i2_ge_i1 = 0.0;
};

struct AblationRow {
  std::string strategy;
  std::size_t targets = 0;
  double mean_positives = 0.0;
  double frac_zero_positive = 0.0;
  std::size_t max_positives = 0;
  double mean_positive_iou = 0.0;
};

struct EvalReport {
  std::vector<FilterRow> filtering;
  std::vector<QualityRow> quality;
  std::vector<AblationRow> ablation;
};

struct EvalSettings {
  CostWeights cost;
  MatchScoreParams match;
  EmSettings em;
  double tau_s = kDefaultScoreThreshold;
  double eval_iou = 0.5;
  double max_iou_thresh = 0.5;
  bool max_iou_rescue = false;
  std::size_t atss_candidate_k = 9;
  std::size_t o2m_k = kDefaultTopK;
};

/// True positives of a pseudo-label set: greedy by confidence, each GT
/// matched at most once by a same-class box with IoU >= iou_thresh.
std::size_t count_true_positives(const std::vector<PseudoLabel>& labels, const std::vector<GtBox>& gt,
                                 double iou_thresh = 0.5);

std::vector<FilterRow> eval_filtering(const Dataset& data, const std::vector<FilterSpec>& strategies,
                                      const EvalSettings& settings = {});

/// Pseudo labels (score > tau_s) that come from a real object, with that object's index.
struct SourcedLabels {
  std::vector<PseudoLabel> labels;
  std::vector<int> gt_index;
};
SourcedLabels sourced_pseudo_labels(const ImageSample& img, double tau_s);

/// Per sourced pseudo box: I1 = IoU of the one-to-one proposals chosen under
/// the pseudo box and under its true box; I2 = best IoU between the top-k
/// ranked set under the pseudo box and the true box's one-to-one proposal.
QualityRow eval_assignment_quality(const Dataset& data, std::size_t k, const EvalSettings& settings = {});

/// Max-IoU, ATSS, SimOTA and ranked one-to-many on the fixed-threshold pseudo labels.
std::vector<AblationRow> eval_strategy_ablation(const Dataset& data, const EvalSettings& settings = {});

}  // namespace ssod
