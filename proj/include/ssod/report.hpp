#pragma once

#include "ssod/config.hpp"
#include "ssod/simulator.hpp"
#include "ssod/teacher_student.hpp"

#include <string>
#include <variant>
#include <vector>

namespace ssod {

inline constexpr int kReportSchemaVersion = 1;

/// Empty string marks a missing value.
using Cell = std::variant<std::string, long long, double>;

struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add(std::vector<Cell> row);
};

/// Six significant digits, "nan"/"inf"/"-inf" for non-finite values.
std::string format_real(double v);

/// Header line plus one line per row; strings are quoted when needed.
std::string to_csv(const Table& t);
/// {"schema_version", "table", "config", "columns", "rows"}; config_json may be empty.
std::string to_json(const Table& t, const std::string& config_json);
std::string render(const Table& t, ReportFormat format, const std::string& config_json);

/// Writes <dir>/<table.name>.<csv|json>, creating dir, and returns the path.
std::string write_table(const std::string& dir, const Table& t, ReportFormat format,
                        const std::string& config_json);

Table filtering_table(const std::vector<FilterRow>& rows);
Table quality_table(const std::vector<QualityRow>& rows);
Table ablation_table(const std::vector<AblationRow>& rows);
Table trace_table(const std::vector<StepDiagnostics>& rows);

}  // namespace ssod
