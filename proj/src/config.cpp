#include "ssod/config.hpp"

#include "ssod/errors.hpp"

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

namespace ssod {

const char* to_string(ReportFormat f) { return f == ReportFormat::Csv ? "csv" : "json"; }

ReportFormat parse_format(const std::string& s) {
  if (s == "csv") return ReportFormat::Csv;
  if (s == "json") return ReportFormat::Json;
  throw InvalidArgument("unknown report format '" + s + "' (expected csv or json)");
}

EvalSettings RunConfig::eval_settings() const {
  EvalSettings e;
  e.cost = cost;
  e.match = match;
  e.em = mining;
  e.tau_s = stage.tau_s;
  e.eval_iou = analysis.eval_iou;
  e.max_iou_thresh = analysis.max_iou_thresh;
  e.max_iou_rescue = analysis.max_iou_rescue;
  e.atss_candidate_k = analysis.atss_candidate_k;
  e.o2m_k = pipeline.o2m_k;
  return e;
}

void RunConfig::validate() const {
  scenario.validate();
  stage.validate();
  cost.validate();
  match.validate();
  pipeline.validate();
}

namespace {

using Handler = std::function<void(const YAML::Node&, const std::string&)>;
using Fields = std::map<std::string, Handler>;

int line_of(const YAML::Node& n) {
  const YAML::Mark m = n.Mark();
  return m.is_null() ? 0 : m.line + 1;
}

[[noreturn]] void fail(const YAML::Node& n, const std::string& path, const std::string& what) {
  throw ConfigError(path, line_of(n), what);
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void read_section(const YAML::Node& node, const std::string& path, const Fields& fields) {
  if (!node.IsDefined() || node.IsNull()) return;
  if (!node.IsMap()) fail(node, path.empty() ? "config" : path, "expected a mapping");
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    const auto it = fields.find(key);
    if (it == fields.end()) fail(kv.first, join(path, key), "unknown key");
    it->second(kv.second, join(path, key));
  }
}

template <typename T>
T scalar(const YAML::Node& n, const std::string& path, const char* type) {
  if (!n.IsScalar()) fail(n, path, std::string("expected ") + type);
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    fail(n, path, std::string("expected ") + type + ", got '" + n.Scalar() + "'");
  }
}

struct Range {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  bool lo_open = false;
  bool hi_open = false;

  bool contains(double v) const {
    return (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
  }
  std::string describe() const {
    std::ostringstream os;
    os << "must lie in " << (lo_open ? "(" : "[") << lo << ", " << hi << (hi_open ? ")" : "]");
    return os.str();
  }
};

const Range kAny{};
const Range kNonNegative{0.0};
const Range kPositive{0.0, std::numeric_limits<double>::infinity(), true};
const Range kUnit{0.0, 1.0};
const Range kUnitOpenLow{0.0, 1.0, true};
const Range kMomentum{0.0, 1.0, false, true};

Handler real(double& out, Range r = kAny) {
  return [&out, r](const YAML::Node& n, const std::string& path) {
    const double v = scalar<double>(n, path, "a number");
    if (!std::isfinite(v)) fail(n, path, "must be finite");
    if (!r.contains(v)) fail(n, path, r.describe() + ", got " + n.Scalar());
    out = v;
  };
}

template <typename Int>
Handler integer(Int& out, long long lo, long long hi = std::numeric_limits<long long>::max()) {
  return [&out, lo, hi](const YAML::Node& n, const std::string& path) {
    const long long v = scalar<long long>(n, path, "an integer");
    if (v < lo || v > hi)
      fail(n, path, "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "], got " + n.Scalar());
    out = static_cast<Int>(v);
  };
}

Handler unsigned64(std::uint64_t& out) {
  return [&out](const YAML::Node& n, const std::string& path) { out = scalar<std::uint64_t>(n, path, "a non-negative integer"); };
}

Handler boolean(bool& out) {
  return [&out](const YAML::Node& n, const std::string& path) { out = scalar<bool>(n, path, "true or false"); };
}

struct Parser {
  RunConfig cfg;
  int t1_line = 0;
  bool t1_given = false;
  int total_line = 0;
  int boxes_line = 0;
  int heads_line = 0;

  void parse(const YAML::Node& root) {
    Scenario& s = cfg.scenario;
    NoiseModel& nm = s.noise;
    StageConfig& st = cfg.stage;
    PipelineSettings& p = cfg.pipeline;
    AnalysisConfig& a = cfg.analysis;

    const Fields noise{
        {"center_jitter_sigma", real(nm.center_jitter_sigma, kNonNegative)},
        {"scale_jitter_sigma", real(nm.scale_jitter_sigma, kNonNegative)},
        {"calibration_offset", real(nm.calibration.offset)},
        {"calibration_slope", real(nm.calibration.slope)},
        {"calibration_sd", real(nm.calibration.sd, kNonNegative)},
        {"false_positive_rate", real(nm.false_positive_rate, kNonNegative)},
        {"false_positive_penalty", real(nm.false_positive_penalty, kNonNegative)},
        {"duplicate_rate", real(nm.duplicate_rate, kNonNegative)},
        {"duplicate_jitter_factor", real(nm.duplicate_jitter_factor, kNonNegative)},
        {"difficulty", real(nm.difficulty, kNonNegative)},
        {"student_difficulty", boolean(nm.student_difficulty)},
        {"student_score_cap", real(nm.student_score_cap, kUnit)},
        {"class_flip_prob", real(nm.class_flip_prob, kUnit)},
        {"strong_view_factor", real(nm.strong_view_factor, kNonNegative)},
        {"background_score", real(nm.background_score, kUnit)},
    };
    const Fields scenario{
        {"seed", unsigned64(s.seed)},
        {"num_images", integer(s.num_images, 1, 1000000)},
        {"boxes_min", integer(s.boxes_min, 1, 10000)},
        {"boxes_max",
         [&](const YAML::Node& n, const std::string& path) {
           integer(s.boxes_max, 1, 10000)(n, path);
           boxes_line = line_of(n);
         }},
        {"num_classes", integer(s.num_classes, 1, 100000)},
        {"proposals_per_image", integer(s.proposals_per_image, 1, 100000)},
        {"proposal_object_fraction", real(s.proposal_object_fraction, kUnit)},
        {"proposal_cluster_skew", real(s.proposal_cluster_skew, kNonNegative)},
        {"batch_size", integer(s.batch_size, 1, 100000)},
        {"noise", [&](const YAML::Node& n, const std::string& path) { read_section(n, path, noise); }},
    };
    const Fields stage{
        {"T1",
         [&](const YAML::Node& n, const std::string& path) {
           integer(st.T1, 1)(n, path);
           t1_given = true;
           t1_line = line_of(n);
         }},
        {"total_iters",
         [&](const YAML::Node& n, const std::string& path) {
           integer(st.total_iters, 1)(n, path);
           total_line = line_of(n);
         }},
        {"tau_s", real(st.tau_s, kUnit)},
        {"w_u", real(st.w_u, kNonNegative)},
        {"w_c", real(st.w_c, kNonNegative)},
        {"ema_momentum", real(st.ema_momentum, kMomentum)},
    };
    const Fields cost{
        {"lambda_cls", real(cfg.cost.lambda_cls, kNonNegative)},
        {"lambda_giou", real(cfg.cost.lambda_giou, kNonNegative)},
        {"lambda_l1", real(cfg.cost.lambda_l1, kNonNegative)},
        {"focal_alpha", real(cfg.cost.focal_alpha, kUnit)},
        {"focal_gamma", real(cfg.cost.focal_gamma, kNonNegative)},
    };
    const Fields match{
        {"alpha", real(cfg.match.alpha, kNonNegative)},
        {"beta", real(cfg.match.beta, kNonNegative)},
    };
    const Fields mining{
        {"tolerance", real(cfg.mining.tolerance, kPositive)},
        {"max_iterations", integer(cfg.mining.max_iterations, 1, 1000000)},
        {"n_restarts", integer(cfg.mining.n_restarts, 0, 1000)},
        {"relative_sigma_floor", real(cfg.mining.relative_sigma_floor, kPositive)},
    };
    const Fields pipeline{
        {"o2m_k", integer(p.o2m_k, 1, 100000)},
        {"quality_gamma", real(p.quality_gamma, kNonNegative)},
        {"nms_iou", real(p.nms_iou, kUnitOpenLow)},
        {"labeled_per_batch", integer(p.labeled_per_batch, 0, 10000)},
        {"unlabeled_per_batch", integer(p.unlabeled_per_batch, 0, 10000)},
        {"feature_channels", integer(p.feature_channels, 1, 4096)},
        {"feature_size", integer(p.feature_size, 1, 4096)},
        {"model_dim", integer(p.model_dim, 1, 4096)},
        {"model_heads",
         [&](const YAML::Node& n, const std::string& path) {
           integer(p.model_heads, 1, 4096)(n, path);
           heads_line = line_of(n);
         }},
        {"roi_size", integer(p.roi_size, 1, 64)},
        {"object_queries", integer(p.object_queries, 0, 10000)},
        {"weak_feature_noise", real(p.weak_feature_noise, kNonNegative)},
        {"strong_feature_noise", real(p.strong_feature_noise, kNonNegative)},
        {"student_drift", real(p.student_drift, kNonNegative)},
    };
    const Fields analysis{
        {"quality_ks",
         [&](const YAML::Node& n, const std::string& path) {
           if (!n.IsSequence()) fail(n, path, "expected a list of integers");
           a.quality_ks.clear();
           for (std::size_t i = 0; i < n.size(); ++i) {
             std::size_t k = 0;
             integer(k, 1, 100000)(n[i], path + "[" + std::to_string(i) + "]");
             a.quality_ks.push_back(k);
           }
         }},
        {"topk", integer(a.topk, 1, 100000)},
        {"eval_iou", real(a.eval_iou, kUnitOpenLow)},
        {"max_iou_thresh", real(a.max_iou_thresh, kUnit)},
        {"max_iou_rescue", boolean(a.max_iou_rescue)},
        {"atss_candidate_k", integer(a.atss_candidate_k, 1, 100000)},
        {"pipeline_steps", integer(a.pipeline_steps, 0, 1000000)},
    };
    const Fields output{
        {"dir", [&](const YAML::Node& n, const std::string& path) { cfg.output.dir = scalar<std::string>(n, path, "a path"); }},
        {"format",
         [&](const YAML::Node& n, const std::string& path) {
           const std::string f = scalar<std::string>(n, path, "csv or json");
           if (f != "csv" && f != "json") fail(n, path, "expected csv or json, got '" + f + "'");
           cfg.output.format = parse_format(f);
         }},
    };
    const Fields top{
        {"scenario", [&](const YAML::Node& n, const std::string& path) { read_section(n, path, scenario); }},
        {"stage", [&](const YAML::Node& n, const std::string& path) { read_section(n, path, stage); }},
        {"cost", [&](const YAML::Node& n, const std::string& path) { read_section(n, path, cost); }},
        {"match", [&](const YAML::Node& n, const std::string& path) { read_section(n, path, match); }},
        {"mining", [&](const YAML::Node& n, const std::string& path) { read_section(n, path, mining); }},
        {"pipeline", [&](const YAML::Node& n, const std::string& path) { read_section(n, path, pipeline); }},
        {"analysis", [&](const YAML::Node& n, const std::string& path) { read_section(n, path, analysis); }},
        {"output", [&](const YAML::Node& n, const std::string& path) { read_section(n, path, output); }},
    };
    read_section(root, "", top);

    if (!t1_given) st.T1 = std::max(1L, st.total_iters / 2);
    if (st.T1 > st.total_iters)
      throw ConfigError(t1_given ? "stage.T1" : "stage.total_iters", t1_given ? t1_line : total_line,
                        "T1 must not exceed total_iters");
    if (s.boxes_max < s.boxes_min) throw ConfigError("scenario.boxes_max", boxes_line, "must be >= boxes_min");
    if (p.model_dim % p.model_heads != 0)
      throw ConfigError("pipeline.model_heads", heads_line, "must divide pipeline.model_dim");
    p.cost = cfg.cost;
    p.match = cfg.match;
    p.em = cfg.mining;
  }
};

}  // namespace

RunConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("config", e.mark.line + 1, "malformed file: " + e.msg);
  }
  Parser p;
  p.parse(root);
  try {
    p.cfg.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError("config", 0, e.what());
  }
  return p.cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path, 0, "cannot open file");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

std::string echo_config(const RunConfig& c) {
  using nlohmann::ordered_json;
  const NoiseModel& nm = c.scenario.noise;
  const PipelineSettings& p = c.pipeline;
  ordered_json j;
  j["scenario"] = {{"seed", c.scenario.seed},
                   {"num_images", c.scenario.num_images},
                   {"boxes_min", c.scenario.boxes_min},
                   {"boxes_max", c.scenario.boxes_max},
                   {"num_classes", c.scenario.num_classes},
                   {"proposals_per_image", c.scenario.proposals_per_image},
                   {"proposal_object_fraction", c.scenario.proposal_object_fraction},
                   {"proposal_cluster_skew", c.scenario.proposal_cluster_skew},
                   {"batch_size", c.scenario.batch_size},
                   {"noise",
                    {{"center_jitter_sigma", nm.center_jitter_sigma},
                     {"scale_jitter_sigma", nm.scale_jitter_sigma},
                     {"calibration_offset", nm.calibration.offset},
                     {"calibration_slope", nm.calibration.slope},
                     {"calibration_sd", nm.calibration.sd},
                     {"false_positive_rate", nm.false_positive_rate},
                     {"false_positive_penalty", nm.false_positive_penalty},
                     {"duplicate_rate", nm.duplicate_rate},
                     {"duplicate_jitter_factor", nm.duplicate_jitter_factor},
                     {"difficulty", nm.difficulty},
                     {"student_difficulty", nm.student_difficulty},
                     {"student_score_cap", nm.student_score_cap},
                     {"class_flip_prob", nm.class_flip_prob},
                     {"strong_view_factor", nm.strong_view_factor},
                     {"background_score", nm.background_score}}}};
  j["stage"] = {{"T1", c.stage.T1},       {"total_iters", c.stage.total_iters}, {"tau_s", c.stage.tau_s},
                {"w_u", c.stage.w_u},     {"w_c", c.stage.w_c},                 {"ema_momentum", c.stage.ema_momentum}};
  j["cost"] = {{"lambda_cls", c.cost.lambda_cls},
               {"lambda_giou", c.cost.lambda_giou},
               {"lambda_l1", c.cost.lambda_l1},
               {"focal_alpha", c.cost.focal_alpha},
               {"focal_gamma", c.cost.focal_gamma}};
  j["match"] = {{"alpha", c.match.alpha}, {"beta", c.match.beta}};
  j["mining"] = {{"tolerance", c.mining.tolerance},
                 {"max_iterations", c.mining.max_iterations},
                 {"n_restarts", c.mining.n_restarts},
                 {"relative_sigma_floor", c.mining.relative_sigma_floor}};
  j["pipeline"] = {{"o2m_k", p.o2m_k},
                   {"quality_gamma", p.quality_gamma},
                   {"nms_iou", p.nms_iou},
                   {"labeled_per_batch", p.labeled_per_batch},
                   {"unlabeled_per_batch", p.unlabeled_per_batch},
                   {"feature_channels", p.feature_channels},
                   {"feature_size", p.feature_size},
                   {"model_dim", p.model_dim},
                   {"model_heads", p.model_heads},
                   {"roi_size", p.roi_size},
                   {"object_queries", p.object_queries},
                   {"weak_feature_noise", p.weak_feature_noise},
                   {"strong_feature_noise", p.strong_feature_noise},
                   {"student_drift", p.student_drift}};
  j["analysis"] = {{"quality_ks", c.analysis.quality_ks},
                   {"topk", c.analysis.topk},
                   {"eval_iou", c.analysis.eval_iou},
                   {"max_iou_thresh", c.analysis.max_iou_thresh},
                   {"max_iou_rescue", c.analysis.max_iou_rescue},
                   {"atss_candidate_k", c.analysis.atss_candidate_k},
                   {"pipeline_steps", c.analysis.pipeline_steps}};
  j["output"] = {{"dir", c.output.dir}, {"format", to_string(c.output.format)}};
  return j.dump(2) + "\n";
}

}  // namespace ssod
