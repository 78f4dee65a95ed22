#include "ssod/ingest.hpp"

#include "ssod/errors.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <unordered_map>

namespace ssod {

long IngestResult::find(const std::string& image_id) const {
  for (std::size_t i = 0; i < image_ids.size(); ++i)
    if (image_ids[i] == image_id) return static_cast<long>(i);
  return -1;
}

namespace {

struct Record {
  std::string image_id;
  double box[4];
  double width, height, score;
  int category;
};

struct BadRecord {
  std::string what;
};

double number(const nlohmann::json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end()) throw BadRecord{std::string("missing field '") + key + "'"};
  if (!it->is_number()) throw BadRecord{std::string("field '") + key + "' must be a number"};
  const double v = it->get<double>();
  if (!std::isfinite(v)) throw BadRecord{std::string("field '") + key + "' is not finite"};
  return v;
}

Record parse_record(const std::string& line, bool require_score) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw BadRecord{std::string("malformed JSON: ") + e.what()};
  }
  if (!j.is_object()) throw BadRecord{"record must be a JSON object"};
  Record r{};
  const auto id = j.find("image_id");
  if (id == j.end()) throw BadRecord{"missing field 'image_id'"};
  if (!id->is_string()) throw BadRecord{"field 'image_id' must be a string"};
  r.image_id = id->get<std::string>();

  const auto bbox = j.find("bbox");
  if (bbox == j.end()) throw BadRecord{"missing field 'bbox'"};
  if (!bbox->is_array() || bbox->size() != 4) throw BadRecord{"field 'bbox' must be [x_min, y_min, x_max, y_max]"};
  for (std::size_t k = 0; k < 4; ++k) {
    if (!(*bbox)[k].is_number()) throw BadRecord{"bbox entries must be numbers"};
    r.box[k] = (*bbox)[k].get<double>();
    if (!std::isfinite(r.box[k])) throw BadRecord{"bbox entries must be finite"};
  }
  if (r.box[2] < r.box[0] || r.box[3] < r.box[1]) throw BadRecord{"inverted bbox (max < min)"};

  r.width = number(j, "width");
  r.height = number(j, "height");
  if (r.width <= 0 || r.height <= 0) throw BadRecord{"width and height must be positive"};
  if (require_score || j.contains("score")) {
    r.score = number(j, "score");
    if (r.score < 0 || r.score > 1) throw BadRecord{"score must lie in [0, 1]"};
  } else {
    r.score = 1.0;
  }
  const auto cat = j.find("category_id");
  if (cat == j.end()) throw BadRecord{"missing field 'category_id'"};
  if (!cat->is_number_integer() || cat->get<long long>() < 0 || cat->get<long long>() > 1000000)
    throw BadRecord{"field 'category_id' must be a non-negative integer"};
  r.category = static_cast<int>(cat->get<long long>());
  return r;
}

}  // namespace

IngestResult ingest_predictions(std::istream& in, const IngestOptions& opts) {
  IngestResult out;
  std::vector<Record> kept;
  std::vector<std::size_t> group_of;
  std::unordered_map<std::string, std::size_t> index;
  int max_class = opts.num_classes - 1;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    ++out.records;
    try {
      Record r = parse_record(line, opts.require_score);
      auto [it, inserted] = index.try_emplace(r.image_id, out.image_ids.size());
      if (inserted) {
        out.image_ids.push_back(r.image_id);
        out.image_sizes.emplace_back(r.width, r.height);
      } else if (out.image_sizes[it->second] != std::make_pair(r.width, r.height)) {
        throw BadRecord{"image size differs from earlier records of image '" + r.image_id + "'"};
      }
      max_class = std::max(max_class, r.category);
      group_of.push_back(it->second);
      kept.push_back(std::move(r));
    } catch (const BadRecord& bad) {
      if (opts.strict) throw ConfigError("line " + std::to_string(line_no), static_cast<int>(line_no), bad.what);
      out.errors.push_back({line_no, bad.what});
      ++out.skipped;
    }
  }

  out.num_classes = max_class + 1;
  out.groups.resize(out.image_ids.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const Record& r = kept[i];
    const Boxd box{r.box[0] / r.width, r.box[1] / r.height, r.box[2] / r.width, r.box[3] / r.height};
    out.groups[group_of[i]].push_back(Detection::single_class(box, r.category, r.score, out.num_classes));
  }
  out.kept = kept.size();
  return out;
}

IngestResult ingest_predictions_file(const std::string& path, const IngestOptions& opts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path, 0, "cannot open file");
  return ingest_predictions(in, opts);
}

}  // namespace ssod
