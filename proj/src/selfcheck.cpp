#include "ssod/selfcheck.hpp"

#include "ssod/assignment.hpp"
#include "ssod/consistency.hpp"
#include "ssod/hungarian.hpp"
#include "ssod/losses.hpp"
#include "ssod/mining.hpp"
#include "ssod/teacher_student.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace ssod {

std::size_t SelfcheckSummary::passed() const {
  return static_cast<std::size_t>(std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.passed; }));
}

std::size_t SelfcheckSummary::failed() const { return outcomes.size() - passed(); }

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -1.0, 1.0);
  return m;
}

Boxd random_box(Rng& rng) {
  const double w = uniform(rng, 0.1, 0.5), h = uniform(rng, 0.1, 0.5);
  return Boxd::from_center(uniform(rng, 0.25, 0.75), uniform(rng, 0.25, 0.75), w, h);
}

bool close(double analytic, double numeric) {
  return std::abs(analytic - numeric) <= std::max(1e-4 * std::max(std::abs(analytic), std::abs(numeric)), 1e-7);
}

template <typename F>
double central_difference(F&& f, double x, double h = 1e-5) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

long long brute_force_min(const Eigen::MatrixXd& c) {
  std::vector<int> cols(static_cast<std::size_t>(c.cols()));
  std::iota(cols.begin(), cols.end(), 0);
  long long best = std::numeric_limits<long long>::max();
  // Enumerate ordered selections by permuting all columns and reading the first rows() entries.
  do {
    long long s = 0;
    for (Eigen::Index r = 0; r < c.rows(); ++r) s += static_cast<long long>(c(r, cols[static_cast<std::size_t>(r)]));
    best = std::min(best, s);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

CheckOutcome check_hungarian(Rng& rng) {
  for (int trial = 0; trial < 200; ++trial) {
    const int n = uniform_int(rng, 1, 5), m = uniform_int(rng, n, 6);
    Eigen::MatrixXd c(n, m);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = uniform_int(rng, -50, 50);
    const auto cols = solve_assignment(c);
    long long got = 0;
    for (int r = 0; r < n; ++r) got += static_cast<long long>(c(r, cols[static_cast<std::size_t>(r)]));
    if (got != brute_force_min(c))
      return {"hungarian_brute_force", false, "trial " + std::to_string(trial) + " not optimal"};
  }
  return {"hungarian_brute_force", true, "200 matrices"};
}

CheckOutcome check_gradients(Rng& rng) {
  for (int trial = 0; trial < 10; ++trial) {
    // Quality-weighted classification loss.
    std::vector<QualityTerm> pos{{uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95)},
                                 {uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95)}};
    std::vector<double> neg{uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95)};
    const ClsLoss cls = o2m_cls_loss(pos, neg);
    for (std::size_t i = 0; i < pos.size(); ++i) {
      const double fd = central_difference(
          [&](double s) {
            auto p = pos;
            p[i].score = s;
            return o2m_cls_loss(p, neg).value;
          },
          pos[i].score);
      if (!close(cls.grad_pos[static_cast<Eigen::Index>(i)], fd)) return {"gradients", false, "o2m_cls positive"};
    }
    for (std::size_t j = 0; j < neg.size(); ++j) {
      const double fd = central_difference(
          [&](double s) {
            auto n = neg;
            n[j] = s;
            return o2m_cls_loss(pos, n).value;
          },
          neg[j]);
      if (!close(cls.grad_neg[static_cast<Eigen::Index>(j)], fd)) return {"gradients", false, "o2m_cls negative"};
    }

    // Weighted GIoU + L1 regression loss.
    const std::vector<RegTerm> reg{{uniform(rng, 0.1, 1.0), random_box(rng), random_box(rng)}};
    const RegLoss rl = o2m_reg_loss(reg);
    const Eigen::Vector4d c0 = reg[0].box.center_form();
    for (int k = 0; k < 4; ++k) {
      const double fd = central_difference(
          [&](double x) {
            Eigen::Vector4d c = c0;
            c[k] = x;
            auto r = reg;
            r[0].box = Boxd::from_center(c);
            return o2m_reg_loss(r).value;
          },
          c0[k]);
      if (!close(rl.grad[0][k], fd)) return {"gradients", false, "o2m_reg"};
    }

    // One-to-one losses on the flattened proposals.
    std::vector<Detection> props;
    for (int j = 0; j < 3; ++j) {
      Eigen::VectorXd s(2);
      s << uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95);
      props.emplace_back(random_box(rng), s);
    }
    std::vector<PseudoLabel> targets(2);
    for (auto& t : targets) {
      t.box = random_box(rng);
      t.class_id = uniform_int(rng, 0, 1);
      t.confidence = 1.0;
    }
    const CostWeights w;
    const Assignment a = hungarian(build_cost_matrix(targets, props, w));
    const LossBreakdown lb = o2o_losses(a, props, targets, w);
    const Eigen::VectorXd flat = flatten_proposals(props);
    for (Eigen::Index k = 0; k < flat.size(); ++k) {
      const double fd = central_difference(
          [&](double x) {
            Eigen::VectorXd f = flat;
            f[k] = x;
            return o2o_losses(a, unflatten_proposals(props, f), targets, w).total;
          },
          flat[k]);
      if (!close((*lb.grads)[k], fd)) return {"gradients", false, "o2o component " + std::to_string(k)};
    }

    // Consistency MSE.
    Eigen::MatrixXd s = random_matrix(rng, 3, 4), t = random_matrix(rng, 3, 4);
    const ConsistencyLoss cl = consistency_loss(s, t);
    for (Eigen::Index k = 0; k < s.size(); ++k) {
      const double fd = central_difference(
          [&](double x) {
            Eigen::MatrixXd m = s;
            m.data()[k] = x;
            return consistency_loss(m, t).value;
          },
          s.data()[k]);
      if (!close(cl.grad_student.data()[k], fd)) return {"gradients", false, "consistency"};
    }
  }
  return {"gradients", true, "10 instances per loss"};
}

CheckOutcome check_gmm(Rng& rng) {
  int ok = 0;
  for (int seed = 0; seed < 10; ++seed) {
    std::vector<double> x;
    std::normal_distribution<double> a(1.0, 0.1), b(4.0, 0.5);
    for (int i = 0; i < 200; ++i) x.push_back(a(rng));
    for (int i = 0; i < 200; ++i) x.push_back(b(rng));
    const GmmFit fit = fit_gmm_1d(x);
    const auto& tr = fit.log_likelihood_trace;
    for (std::size_t i = 1; i < tr.size(); ++i)
      if (tr[i] < tr[i - 1] - 1e-9 * std::max(1.0, std::abs(tr[i - 1])))
        return {"gmm_recovery", false, "log-likelihood decreased"};
    if (std::abs(fit.mu_r - 1.0) < 0.3 && std::abs(fit.mu_u - 4.0) < 0.3 && std::abs(fit.w_r - 0.5) < 0.1) ++ok;
  }
  return {"gmm_recovery", ok >= 9, std::to_string(ok) + "/10 fits recovered"};
}

CheckOutcome check_leakage(Rng& rng) {
  for (int trial = 0; trial < 10; ++trial) {
    const int heads = uniform_int(rng, 1, 3), dim = heads * uniform_int(rng, 2, 4), channels = uniform_int(rng, 1, 4);
    const DecoderParams p = DecoderParams::random(dim, heads, channels, dim, rng);
    const Eigen::MatrixXd memory = random_matrix(rng, uniform_int(rng, 1, 6), channels);
    const int nq = uniform_int(rng, 1, 5), nc = uniform_int(rng, 1, 5);
    QuerySet base{random_matrix(rng, nq, dim), std::vector<QueryGroup>(static_cast<std::size_t>(nq), QueryGroup::Matching)};
    QuerySet full = base;
    full.embeddings.conservativeResize(nq + nc, dim);
    full.embeddings.bottomRows(nc) = random_matrix(rng, nc, dim);
    full.groups.resize(static_cast<std::size_t>(nq + nc), QueryGroup::Consistency);
    const Eigen::MatrixXd alone = toy_decode(base, memory, build_attention_mask(base.groups), p);
    const Eigen::MatrixXd joint = toy_decode(full, memory, build_attention_mask(full.groups), p);
    if (!(joint.topRows(nq).array() == alone.array()).all()) return {"leakage", false, "matching outputs changed"};
  }
  return {"leakage", true, "10 decoder configurations"};
}

CheckOutcome check_ema() {
  const double m = kDefaultEmaMomentum;
  Eigen::VectorXd t = Eigen::VectorXd::Constant(3, -2.0);
  const Eigen::VectorXd s = Eigen::VectorXd::Constant(3, 5.0);
  for (int k = 0; k < 10; ++k) t = ema_update(t, s, m);
  const double expected = -2.0 * std::pow(m, 10) + 5.0 * (1.0 - std::pow(m, 10));
  const bool ok = ((t.array() - expected).abs() <= 1e-12 * std::abs(expected)).all();
  return {"ema_closed_form", ok, "10 updates"};
}

CheckOutcome check_nms(Rng& rng) {
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Detection> dets;
    for (int i = 0; i < 12; ++i) dets.push_back(Detection::single_class(random_box(rng), uniform_int(rng, 0, 1), uniform(rng, 0, 1), 2));
    const auto once = nms(dets, 0.5, true);
    const auto twice = nms(once, 0.5, true);
    if (once.size() != twice.size()) return {"nms_idempotent", false, "second pass removed boxes"};
  }
  return {"nms_idempotent", true, "50 sets"};
}

}  // namespace

SelfcheckSummary run_selfcheck(std::ostream& log, std::uint64_t seed) {
  Rng rng(seed);
  SelfcheckSummary summary;
  summary.outcomes.push_back(check_hungarian(rng));
  summary.outcomes.push_back(check_gradients(rng));
  summary.outcomes.push_back(check_gmm(rng));
  summary.outcomes.push_back(check_leakage(rng));
  summary.outcomes.push_back(check_ema());
  summary.outcomes.push_back(check_nms(rng));
  for (const auto& o : summary.outcomes) log << (o.passed ? "PASS " : "FAIL ") << o.name << " (" << o.detail << ")\n";
  return summary;
}

}  // namespace ssod
