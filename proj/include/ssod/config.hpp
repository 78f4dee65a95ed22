#pragma once

#include "ssod/cost.hpp"
#include "ssod/mining.hpp"
#include "ssod/simulator.hpp"
#include "ssod/teacher_student.hpp"

#include <string>
#include <vector>

namespace ssod {

struct AnalysisConfig {
  /// k values of the assignment-quality sweep.
  std::vector<std::size_t> quality_ks{1, 5, 9, 13};
  std::size_t topk = kDefaultPseudoTopK;
  double eval_iou = 0.5;
  double max_iou_thresh = 0.5;
  bool max_iou_rescue = false;
  std::size_t atss_candidate_k = 9;
  /// Training iterations traced by `simulate`.
  long pipeline_steps = 4;

  friend bool operator==(const AnalysisConfig&, const AnalysisConfig&) = default;
};

enum class ReportFormat { Csv, Json };

struct OutputConfig {
  std::string dir = "out";
  ReportFormat format = ReportFormat::Csv;

  friend bool operator==(const OutputConfig&, const OutputConfig&) = default;
};

struct RunConfig {
  Scenario scenario;
  StageConfig stage;
  CostWeights cost;
  MatchScoreParams match;
  EmSettings mining;
  /// cost, match and em are mirrored from the top-level sections.
  PipelineSettings pipeline;
  AnalysisConfig analysis;
  OutputConfig output;

  EvalSettings eval_settings() const;
  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

const char* to_string(ReportFormat f);
ReportFormat parse_format(const std::string& s);

/// Parses configuration text. Missing keys keep their defaults; when stage.T1
/// is absent it is half of stage.total_iters. Unknown keys, wrong types and
/// out-of-range values raise ConfigError with the key path and line.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

/// Full effective configuration as JSON text (also valid configuration input).
std::string echo_config(const RunConfig& cfg);

}  // namespace ssod
