#include "ssod/cli.hpp"

#include "ssod/config.hpp"
#include "ssod/errors.hpp"
#include "ssod/ingest.hpp"
#include "ssod/report.hpp"
#include "ssod/selfcheck.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace ssod {

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string format;
  bool strict = false;
};

void add_common(CLI::App& cmd, CommonOptions& o) {
  cmd.add_option("--config", o.config, "Configuration file (YAML or JSON)")->check(CLI::ExistingFile);
  cmd.add_option("--seed", o.seed, "Override scenario.seed");
  cmd.add_option("--out", o.out, "Output directory (overrides output.dir)");
  cmd.add_option("--format", o.format, "Report format: csv or json")->check(CLI::IsMember({"csv", "json"}));
  cmd.add_flag("--strict", o.strict, "Abort on the first malformed input record");
}

RunConfig effective_config(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? parse_config("") : load_config(o.config);
  if (o.seed) cfg.scenario.seed = *o.seed;
  if (!o.out.empty()) cfg.output.dir = o.out;
  if (!o.format.empty()) cfg.output.format = parse_format(o.format);
  return cfg;
}

std::string write_with_echo(const RunConfig& cfg, const Table& t, std::ostream& out) {
  const std::string echo = echo_config(cfg);
  const std::string path = write_table(cfg.output.dir, t, cfg.output.format, echo);
  out << "wrote " << path << "\n";
  return path;
}

void write_config_echo(const RunConfig& cfg, std::ostream& out) {
  if (cfg.output.format != ReportFormat::Csv) return;
  std::filesystem::create_directories(cfg.output.dir);
  const auto path = std::filesystem::path(cfg.output.dir) / "config.json";
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << echo_config(cfg);
  out << "wrote " << path.string() << "\n";
}

int run_simulate(const CommonOptions& o, std::ostream& out) {
  const RunConfig cfg = effective_config(o);
  const EvalSettings es = cfg.eval_settings();
  const Dataset data = generate(cfg.scenario);

  std::vector<FilterSpec> specs = default_filter_specs();
  for (auto& s : specs) {
    s.tau_s = cfg.stage.tau_s;
    s.k = cfg.analysis.topk;
  }
  std::vector<QualityRow> quality;
  for (std::size_t k : cfg.analysis.quality_ks) quality.push_back(eval_assignment_quality(data, k, es));
  const auto trace = run_pipeline(cfg.scenario, cfg.stage, cfg.pipeline, cfg.analysis.pipeline_steps);

  write_config_echo(cfg, out);
  write_with_echo(cfg, filtering_table(eval_filtering(data, specs, es)), out);
  write_with_echo(cfg, quality_table(quality), out);
  write_with_echo(cfg, ablation_table(eval_strategy_ablation(data, es)), out);
  write_with_echo(cfg, trace_table(trace), out);
  return kExitOk;
}

struct MineOptions {
  std::string predictions;
  std::string proposals;
  std::string strategy = "gmm";
};

std::vector<std::vector<Detection>> align_groups(const IngestResult& ref, const IngestResult& other) {
  std::vector<std::vector<Detection>> out(ref.image_ids.size());
  for (std::size_t i = 0; i < ref.image_ids.size(); ++i) {
    const long g = other.find(ref.image_ids[i]);
    if (g >= 0) out[i] = other.groups[static_cast<std::size_t>(g)];
  }
  return out;
}

std::vector<Detection> widen(std::vector<Detection> dets, int num_classes) {
  for (auto& d : dets) {
    if (d.scores.size() >= num_classes) continue;
    Eigen::VectorXd s = Eigen::VectorXd::Zero(num_classes);
    s.head(d.scores.size()) = d.scores;
    d.scores = std::move(s);
  }
  return dets;
}

int run_mine(const CommonOptions& o, const MineOptions& m, std::ostream& out) {
  const RunConfig cfg = effective_config(o);
  IngestOptions io;
  io.strict = o.strict;
  const IngestResult preds = ingest_predictions_file(m.predictions, io);
  const IngestResult props = m.proposals.empty() ? preds : ingest_predictions_file(m.proposals, io);
  const int classes = std::max(preds.num_classes, props.num_classes);
  const auto proposal_groups = align_groups(preds, props);
  const std::size_t n = preds.image_ids.size();

  std::vector<std::vector<PseudoLabel>> kept(n);
  std::size_t fell_back = 0, batches = 0;
  if (m.strategy == "fixed") {
    for (std::size_t i = 0; i < n; ++i) kept[i] = filter_fixed(preds.groups[i], cfg.stage.tau_s);
  } else if (m.strategy == "topk") {
    for (std::size_t i = 0; i < n; ++i) kept[i] = filter_topk(preds.groups[i], cfg.analysis.topk);
  } else if (m.strategy == "meanstd") {
    for (std::size_t i = 0; i < n; ++i) kept[i] = filter_mean_std(preds.groups[i]);
  } else {
    const std::size_t batch = static_cast<std::size_t>(cfg.scenario.batch_size);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      std::vector<MiningImage> mb;
      for (std::size_t i = start; i < end; ++i)
        mb.push_back({filter_mean_std(widen(preds.groups[i], classes)), widen(proposal_groups[i], classes)});
      MiningResult r = mine_cost_based(mb, cfg.cost, cfg.mining);
      ++batches;
      fell_back += r.fell_back ? 1 : 0;
      for (std::size_t i = start; i < end; ++i) kept[i] = std::move(r.kept[i - start]);
    }
  }

  Table t{"pseudo_labels", {"image_id", "x_min", "y_min", "x_max", "y_max", "score", "category_id", "match_cost"}, {}};
  std::size_t total_kept = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [w, h] = preds.image_sizes[i];
    for (const auto& p : kept[i]) {
      t.add({preds.image_ids[i], p.box.x_min * w, p.box.y_min * h, p.box.x_max * w, p.box.y_max * h, p.confidence,
             static_cast<long long>(p.class_id), p.match_cost ? Cell{*p.match_cost} : Cell{std::string()}});
      ++total_kept;
    }
  }
  write_with_echo(cfg, t, out);
  out << "strategy " << m.strategy << ": kept " << total_kept << " of " << preds.kept << " detections over " << n
      << " images";
  if (m.strategy == "gmm") out << " (" << fell_back << " of " << batches << " batches fell back)";
  out << "; skipped " << preds.skipped << " of " << preds.records << " records\n";
  for (const auto& e : preds.errors) out << "  line " << e.line << ": " << e.message << "\n";
  return kExitOk;
}

struct AssignOptions {
  std::string predictions;
  std::string gt;
  std::string strategy = "o2m";
};

int run_assign(const CommonOptions& o, const AssignOptions& a, std::ostream& out) {
  const RunConfig cfg = effective_config(o);
  const EvalSettings es = cfg.eval_settings();
  IngestOptions io;
  io.strict = o.strict;
  const IngestResult props = ingest_predictions_file(a.predictions, io);
  io.require_score = false;
  const IngestResult gt = ingest_predictions_file(a.gt, io);
  const int classes = std::max(props.num_classes, gt.num_classes);
  const auto proposal_groups = align_groups(gt, props);

  Table t{"assignment", {"image_id", "target", "category_id", "positives", "best_iou", "mean_iou"}, {}};
  std::size_t targets = 0, covered = 0;
  for (std::size_t i = 0; i < gt.image_ids.size(); ++i) {
    const auto proposals = widen(proposal_groups[i], classes);
    std::vector<PseudoLabel> tg;
    for (const auto& d : gt.groups[i]) tg.push_back(to_pseudo_label(d));
    Assignment asg;
    if (a.strategy == "o2o") {
      if (proposals.size() < tg.size())
        throw InvalidArgument("image '" + gt.image_ids[i] + "' has fewer proposals than ground-truth boxes");
      asg = hungarian(build_cost_matrix(tg, proposals, es.cost));
    } else if (a.strategy == "o2m") {
      asg = one_to_many(tg, proposals, es.match, es.o2m_k, true);
    } else if (a.strategy == "max_iou") {
      asg = max_iou_assign(tg, proposals, es.max_iou_thresh, es.max_iou_rescue);
    } else if (a.strategy == "atss") {
      asg = atss_assign(tg, proposals, es.atss_candidate_k);
    } else {
      asg = simota_assign(tg, proposals, es.cost);
    }
    for (std::size_t k = 0; k < tg.size(); ++k) {
      const auto& pos = asg.per_target[k];
      double best = 0.0, sum = 0.0;
      for (std::size_t p : pos) {
        const double u = iou(proposals[p].box, tg[k].box);
        best = std::max(best, u);
        sum += u;
      }
      t.add({gt.image_ids[i], static_cast<long long>(k), static_cast<long long>(tg[k].class_id),
             static_cast<long long>(pos.size()), best, pos.empty() ? 0.0 : sum / pos.size()});
      ++targets;
      covered += pos.empty() ? 0 : 1;
    }
  }
  write_with_echo(cfg, t, out);
  out << "strategy " << a.strategy << ": " << covered << " of " << targets << " targets have positives\n";
  return kExitOk;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic semi-supervised detection toolkit", "ssod"};
  app.require_subcommand(1);
  CommonOptions common;
  MineOptions mine;
  AssignOptions assign;

  CLI::App* simulate = app.add_subcommand("simulate", "Generate a scenario and write evaluation reports");
  add_common(*simulate, common);

  CLI::App* mine_cmd = app.add_subcommand("mine", "Filter ingested predictions into pseudo labels");
  add_common(*mine_cmd, common);
  mine_cmd->add_option("--predictions", mine.predictions, "Teacher predictions (NDJSON)")->required()->check(CLI::ExistingFile);
  mine_cmd->add_option("--proposals", mine.proposals, "Student proposals (NDJSON); defaults to the predictions")
      ->check(CLI::ExistingFile);
  mine_cmd->add_option("--strategy", mine.strategy, "fixed, topk, meanstd or gmm")
      ->check(CLI::IsMember({"fixed", "topk", "meanstd", "gmm"}));

  CLI::App* assign_cmd = app.add_subcommand("assign", "Assign ingested proposals to ground truth");
  add_common(*assign_cmd, common);
  assign_cmd->add_option("--predictions", assign.predictions, "Proposals (NDJSON)")->required()->check(CLI::ExistingFile);
  assign_cmd->add_option("--gt", assign.gt, "Ground truth (NDJSON, score optional)")->required()->check(CLI::ExistingFile);
  assign_cmd->add_option("--strategy", assign.strategy, "o2o, o2m, max_iou, atss or simota")
      ->check(CLI::IsMember({"o2o", "o2m", "max_iou", "atss", "simota"}));

  CLI::App* check = app.add_subcommand("check", "Run the oracle and property suite");
  std::uint64_t check_seed = 0;
  check->add_option("--seed", check_seed, "Random seed of the suite");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (*simulate) return run_simulate(common, out);
    if (*mine_cmd) return run_mine(common, mine, out);
    if (*assign_cmd) return run_assign(common, assign, out);
    const SelfcheckSummary s = run_selfcheck(out, check_seed);
    out << s.passed() << " passed, " << s.failed() << " failed\n";
    return s.failed() == 0 ? kExitOk : kExitValidation;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace ssod
