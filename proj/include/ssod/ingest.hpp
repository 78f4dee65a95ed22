#pragma once

#include "ssod/geometry.hpp"

#include <cstddef>
#include <istream>
#include <string>
#include <vector>

namespace ssod {

struct IngestError {
  std::size_t line = 0;
  std::string message;
};

/// Records grouped by image_id in order of first appearance. Boxes are
/// normalized by the image size; pixel dimensions are kept for output.
struct IngestResult {
  std::vector<std::string> image_ids;
  std::vector<std::vector<Detection>> groups;
  std::vector<std::pair<double, double>> image_sizes;  // width, height
  std::size_t records = 0;
  std::size_t kept = 0;
  std::size_t skipped = 0;
  std::vector<IngestError> errors;
  int num_classes = 0;

  /// Group index of an image id, or -1.
  long find(const std::string& image_id) const;
};

struct IngestOptions {
  /// Abort on the first bad record instead of skipping it.
  bool strict = false;
  /// Ground-truth files may omit the score (taken as 1).
  bool require_score = true;
  /// Minimum score-vector length; grows with the largest category_id seen.
  int num_classes = 1;
};

/// Reads newline-delimited JSON records:
///   {"image_id": str, "bbox": [x_min, y_min, x_max, y_max], "width": w,
///    "height": h, "score": s, "category_id": c}
/// Blank lines are ignored. Bad records are counted and reported with their
/// line number; in strict mode the first one raises ConfigError.
IngestResult ingest_predictions(std::istream& in, const IngestOptions& opts = {});
IngestResult ingest_predictions_file(const std::string& path, const IngestOptions& opts = {});

}  // namespace ssod
