#include "ssod/geometry.hpp"

#include "ssod/errors.hpp"

#include <numeric>

namespace ssod {

Detection::Detection(const Boxd& b, Eigen::VectorXd s) : box(b), scores(std::move(s)) {
  if (scores.size() == 0) throw InvalidArgument("detection needs at least one class score");
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < scores.size(); ++c)
    if (scores[c] > scores[best]) best = c;
  class_id = static_cast<int>(best);
  score = scores[best];
}

Detection Detection::single_class(const Boxd& b, int class_id, double score, int num_classes) {
  if (class_id < 0 || class_id >= num_classes) throw InvalidArgument("class id out of range");
  Eigen::VectorXd s = Eigen::VectorXd::Zero(num_classes);
  s[class_id] = score;
  Detection d(b, std::move(s));
  // A zero score would otherwise argmax to class 0.
  d.class_id = class_id;
  return d;
}

PseudoLabel to_pseudo_label(const Detection& d, std::optional<std::size_t> source) {
  PseudoLabel p;
  p.box = d.box;
  p.class_id = d.class_id;
  p.confidence = d.score;
  p.source_index = source;
  return p;
}

std::vector<std::size_t> order_by_score(const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh, bool class_wise) {
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0))
    throw InvalidArgument("nms iou threshold must lie in (0, 1]");
  std::vector<Detection> kept;
  for (std::size_t idx : order_by_score(dets)) {
    const Detection& cand = dets[idx];
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (class_wise && k.class_id != cand.class_id) continue;
      if (iou(k.box, cand.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

}  // namespace ssod
