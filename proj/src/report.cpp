#include "ssod/report.hpp"

#include "ssod/errors.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace ssod {

void Table::add(std::vector<Cell> row) {
  if (row.size() != columns.size()) throw InvalidArgument("row width does not match the table header");
  rows.push_back(std::move(row));
}

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string cell_text(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return csv_field(*s);
  if (const auto* i = std::get_if<long long>(&c)) return std::to_string(*i);
  return format_real(std::get<double>(c));
}

nlohmann::ordered_json cell_json(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  if (const auto* i = std::get_if<long long>(&c)) return *i;
  const double v = std::get<double>(c);
  if (!std::isfinite(v)) return nullptr;
  return std::stod(format_real(v));
}

long long count(std::size_t n) { return static_cast<long long>(n); }

Cell optional_real(const std::optional<double>& v) { return v ? Cell{*v} : Cell{std::string()}; }

}  // namespace

std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out += (i ? "," : "") + csv_field(t.columns[i]);
  out += "\n";
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + cell_text(row[i]);
    out += "\n";
  }
  return out;
}

std::string to_json(const Table& t, const std::string& config_json) {
  nlohmann::ordered_json j;
  j["schema_version"] = kReportSchemaVersion;
  j["table"] = t.name;
  j["config"] = config_json.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json::parse(config_json);
  j["columns"] = t.columns;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : t.rows) {
    nlohmann::ordered_json r;
    for (std::size_t i = 0; i < row.size(); ++i) r[t.columns[i]] = cell_json(row[i]);
    j["rows"].push_back(std::move(r));
  }
  return j.dump(2) + "\n";
}

std::string render(const Table& t, ReportFormat format, const std::string& config_json) {
  return format == ReportFormat::Csv ? to_csv(t) : to_json(t, config_json);
}

std::string write_table(const std::string& dir, const Table& t, ReportFormat format,
                        const std::string& config_json) {
  std::filesystem::create_directories(dir);
  const std::string path = (std::filesystem::path(dir) / (t.name + "." + to_string(format))).string();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << render(t, format, config_json);
  return path;
}

Table filtering_table(const std::vector<FilterRow>& rows) {
  Table t{"filtering", {"strategy", "kept", "true_positives", "ground_truth", "precision", "recall", "empty_kept"}, {}};
  for (const auto& r : rows)
    t.add({r.strategy, count(r.kept), count(r.true_positives), count(r.ground_truth), r.precision, r.recall,
           static_cast<long long>(r.empty_kept)});
  return t;
}

Table quality_table(const std::vector<QualityRow>& rows) {
  Table t{"assignment_quality", {"k", "boxes", "mean_i1", "mean_i2", "frac_i2_ge_i1"}, {}};
  for (const auto& r : rows) t.add({count(r.k), count(r.boxes), r.mean_i1, r.mean_i2, r.frac_i2_ge_i1});
  return t;
}

Table ablation_table(const std::vector<AblationRow>& rows) {
  Table t{"assignment_ablation",
          {"strategy", "targets", "mean_positives", "frac_zero_positive", "max_positives", "mean_positive_iou"},
          {}};
  for (const auto& r : rows)
    t.add({r.strategy, count(r.targets), r.mean_positives, r.frac_zero_positive, count(r.max_positives),
           r.mean_positive_iou});
  return t;
}

Table trace_table(const std::vector<StepDiagnostics>& rows) {
  Table t{"pipeline_trace",
          {"iteration", "stage", "pseudo_count", "pseudo_precision", "pseudo_recall", "mined_count", "mined_precision",
           "mined_recall", "tau_c", "sup_loss", "unsup_loss", "consistency_loss", "total_loss", "teacher_student_gap"},
          {}};
  for (const auto& d : rows)
    t.add({static_cast<long long>(d.iteration), std::string(to_string(d.stage)), count(d.pseudo_count),
           d.pseudo_precision, d.pseudo_recall, count(d.mined_count), d.mined_precision, d.mined_recall,
           optional_real(d.tau_c), d.sup_loss, d.unsup_loss, d.consistency_loss, d.total_loss,
           d.teacher_student_gap});
  return t;
}

}  // namespace ssod
