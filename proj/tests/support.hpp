#pragma once

#include "ssod/geometry.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace ssod::testing {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0,
                                     double hi = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, lo, hi);
  return m;
}

inline Eigen::MatrixXd random_integer_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, int lo, int hi) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform_int(rng, lo, hi);
  return m;
}

/// Box with center in [0.25, 0.75]^2 and sides in [0.1, 0.5].
inline Boxd random_box(Rng& rng) {
  return Boxd::from_center(uniform(rng, 0.25, 0.75), uniform(rng, 0.25, 0.75), uniform(rng, 0.1, 0.5),
                           uniform(rng, 0.1, 0.5));
}

inline Boxd near_box(Rng& rng, const Boxd& b, double spread) {
  const auto c = b.center_form();
  return Boxd::from_center(c[0] + uniform(rng, -spread, spread) * c[2], c[1] + uniform(rng, -spread, spread) * c[3],
                           c[2] * std::exp(uniform(rng, -spread, spread)),
                           c[3] * std::exp(uniform(rng, -spread, spread)));
}

inline Detection random_detection(Rng& rng, int classes, double lo = 0.05, double hi = 0.95) {
  Eigen::VectorXd s(classes);
  for (int c = 0; c < classes; ++c) s[c] = uniform(rng, lo, hi);
  return Detection(random_box(rng), s);
}

inline PseudoLabel random_target(Rng& rng, int classes) {
  PseudoLabel t;
  t.box = random_box(rng);
  t.class_id = uniform_int(rng, 0, classes - 1);
  t.confidence = uniform(rng, 0.4, 1.0);
  return t;
}

/// Minimum over all injections rows -> columns, by enumerating column permutations.
inline double brute_force_injection_min(const Eigen::MatrixXd& c) {
  std::vector<Eigen::Index> cols(static_cast<std::size_t>(c.cols()));
  std::iota(cols.begin(), cols.end(), Eigen::Index{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (Eigen::Index r = 0; r < c.rows(); ++r) s += c(r, cols[static_cast<std::size_t>(r)]);
    best = std::min(best, s);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

template <typename F>
double central_difference(F&& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

inline bool grad_close(double analytic, double numeric, double rel = 1e-4, double abs_floor = 1e-7) {
  return std::abs(analytic - numeric) <= std::max(rel * std::max(std::abs(analytic), std::abs(numeric)), abs_floor);
}

inline bool rel_close(double a, double b, double rel) {
  return std::abs(a - b) <= rel * std::max({std::abs(a), std::abs(b), 1e-300});
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Compares against tests/golden/<name>; rewrites the file when SSOD_UPDATE_GOLDEN is set.
inline bool matches_golden(const std::string& name, const std::string& actual) {
  const std::string path = std::string(SSOD_GOLDEN_DIR) + "/" + name;
  if (std::getenv("SSOD_UPDATE_GOLDEN")) {
    std::ofstream(path, std::ios::binary) << actual;
    return true;
  }
  return std::ifstream(path).good() && read_file(path) == actual;
}

inline std::string fixture_path(const std::string& name) { return std::string(SSOD_FIXTURE_DIR) + "/" + name; }

}  // namespace ssod::testing
