#pragma once

#include "ssod/errors.hpp"

#include <Eigen/Core>

#include <limits>
#include <vector>

namespace ssod {

/// Minimum-cost injection of rows into columns (rows <= cols), by the
/// shortest-augmenting-path form of the Hungarian method with row/column
/// potentials. O(rows^2 * cols). Returns the column assigned to each row.
template <typename Derived>
std::vector<Eigen::Index> solve_assignment(const Eigen::MatrixBase<Derived>& cost) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();
  if (n == 0) return {};
  if (m < n) throw Infeasible("assignment needs at least as many proposals as targets");

  const Scalar inf = std::numeric_limits<Scalar>::infinity();
  // 1-based; column 0 is the virtual source of each augmentation.
  std::vector<Scalar> u(n + 1, Scalar(0)), v(m + 1, Scalar(0));
  std::vector<Eigen::Index> owner(m + 1, 0), way(m + 1, 0);

  for (Eigen::Index row = 1; row <= n; ++row) {
    owner[0] = row;
    Eigen::Index j0 = 0;
    std::vector<Scalar> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const Eigen::Index i0 = owner[j0];
      Scalar delta = inf;
      Eigen::Index j1 = 0;
      for (Eigen::Index j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const Scalar reduced = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (reduced < minv[j]) {
          minv[j] = reduced;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Eigen::Index j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const Eigen::Index j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<Eigen::Index> row_to_col(n, -1);
  for (Eigen::Index j = 1; j <= m; ++j)
    if (owner[j] != 0) row_to_col[owner[j] - 1] = j - 1;
  return row_to_col;
}

}  // namespace ssod
