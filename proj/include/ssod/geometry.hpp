#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

namespace ssod {

/// Axis-aligned box in normalized image coordinates, stored in corner form.
template <typename Scalar>
struct Box {
  Scalar x_min{0}, y_min{0}, x_max{0}, y_max{0};

  using CenterForm = Eigen::Matrix<Scalar, 4, 1>;

  static Box from_center(Scalar cx, Scalar cy, Scalar w, Scalar h) {
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  }
  static Box from_center(const CenterForm& c) { return from_center(c[0], c[1], c[2], c[3]); }

  /// (cx, cy, w, h)
  CenterForm center_form() const {
    CenterForm c;
    c << (x_min + x_max) / 2, (y_min + y_max) / 2, x_max - x_min, y_max - y_min;
    return c;
  }

  Scalar width() const { return x_max - x_min; }
  Scalar height() const { return y_max - y_min; }
  Scalar area() const { return width() * height(); }
  bool valid() const { return x_min <= x_max && y_min <= y_max; }
  bool contains(Scalar x, Scalar y) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

using Boxd = Box<double>;

namespace detail {
template <typename Scalar>
Scalar intersection_area(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const Scalar ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return Scalar(0);
  return iw * ih;
}

template <typename Scalar>
Box<Scalar> hull(const Box<Scalar>& a, const Box<Scalar>& b) {
  return {std::min(a.x_min, b.x_min), std::min(a.y_min, b.y_min), std::max(a.x_max, b.x_max),
          std::max(a.y_max, b.y_max)};
}
}  // namespace detail

/// Intersection over union. Zero-area unions (degenerate boxes) give 0.
template <typename Scalar>
Scalar iou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar inter = detail::intersection_area(a, b);
  const Scalar uni = a.area() + b.area() - inter;
  if (uni <= 0) return Scalar(0);
  return inter / uni;
}

/// Generalized IoU. A degenerate enclosing box contributes no penalty.
template <typename Scalar>
Scalar giou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar inter = detail::intersection_area(a, b);
  const Scalar uni = a.area() + b.area() - inter;
  const Scalar u = uni <= 0 ? Scalar(0) : inter / uni;
  const Scalar enclosing = detail::hull(a, b).area();
  if (enclosing <= 0) return u;
  return u - (enclosing - uni) / enclosing;
}

/// L1 distance between the (cx, cy, w, h) encodings.
template <typename Scalar>
Scalar l1_center_form(const Box<Scalar>& a, const Box<Scalar>& b) {
  return (a.center_form() - b.center_form()).cwiseAbs().sum();
}

/// A detector output row: box plus per-class probabilities.
struct Detection {
  Boxd box;
  Eigen::VectorXd scores;
  int class_id{0};
  double score{0.0};

  Detection() = default;
  /// Derives class_id/score from scores (lowest index wins ties).
  Detection(const Boxd& b, Eigen::VectorXd s);

  static Detection single_class(const Boxd& b, int class_id, double score, int num_classes);
};

/// A filtered teacher output used as a training target.
struct PseudoLabel {
  Boxd box;
  int class_id{0};
  double confidence{0.0};
  std::optional<double> match_cost;
  /// Index of the detection this label was taken from, when known.
  std::optional<std::size_t> source_index;
};

PseudoLabel to_pseudo_label(const Detection& d, std::optional<std::size_t> source = std::nullopt);

/// Indices of `dets` ordered by descending score, ties by lowest index.
std::vector<std::size_t> order_by_score(const std::vector<Detection>& dets);

inline constexpr double kDefaultNmsIou = 0.7;

/// Greedy NMS. Suppresses a box whose IoU with an already-kept box exceeds
/// iou_thresh (same class only when class_wise). Output by descending score.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh = kDefaultNmsIou,
                           bool class_wise = true);

}  // namespace ssod
