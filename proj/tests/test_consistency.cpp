#include "support.hpp"

#include "ssod/consistency.hpp"
#include "ssod/errors.hpp"

#include <doctest.h>

#include <cmath>

using namespace ssod;
using namespace ssod::testing;

namespace {

FeatureGrid random_grid(Rng& rng, int c, int h, int w) {
  FeatureGrid g = FeatureGrid::zeros(c, h, w);
  g.values = random_matrix(rng, c, static_cast<Eigen::Index>(h) * w);
  return g;
}

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

Mat to_rows(const Eigen::MatrixXd& m) {
  Mat out(static_cast<std::size_t>(m.rows()), Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

Vec matvec(const Eigen::MatrixXd& w, const Vec& x) {
  Vec y(static_cast<std::size_t>(w.rows()), 0.0);
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) y[i] += w(i, j) * x[j];
  return y;
}

Vec add(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

Vec linear(const Linear& l, const Vec& x) {
  Vec y = matvec(l.weight, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += l.bias[i];
  return y;
}

// Scalar multi-head attention of one query over the allowed key/value rows.
Vec attention(const Vec& q, const Mat& keys, const Mat& vals, const std::vector<std::size_t>& allowed, int heads) {
  const std::size_t dim = q.size(), dh = dim / heads;
  Vec out(dim, 0.0);
  for (int h = 0; h < heads; ++h) {
    Vec logit;
    for (std::size_t a : allowed) {
      double s = 0.0;
      for (std::size_t d = 0; d < dh; ++d) s += q[h * dh + d] * keys[a][h * dh + d];
      logit.push_back(s / std::sqrt(static_cast<double>(dh)));
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0.0;
    for (double& l : logit) z += (l = std::exp(l - mx));
    for (std::size_t r = 0; r < allowed.size(); ++r)
      for (std::size_t d = 0; d < dh; ++d) out[h * dh + d] += logit[r] / z * vals[allowed[r]][h * dh + d];
  }
  return out;
}

Mat oracle_decode(const Mat& x, const Mat& memory, const std::vector<std::vector<bool>>& blocked, const DecoderParams& p) {
  Mat k_self, v_self, k_mem, v_mem;
  for (const auto& r : x) {
    k_self.push_back(matvec(p.self_attn.wk, r));
    v_self.push_back(matvec(p.self_attn.wv, r));
  }
  for (const auto& r : memory) {
    k_mem.push_back(matvec(p.cross_attn.wk, r));
    v_mem.push_back(matvec(p.cross_attn.wv, r));
  }
  std::vector<std::size_t> tokens(memory.size());
  std::iota(tokens.begin(), tokens.end(), std::size_t{0});
  Mat out;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<std::size_t> allowed;
    for (std::size_t j = 0; j < x.size(); ++j)
      if (!blocked[i][j]) allowed.push_back(j);
    const Vec x1 = add(x[i], matvec(p.self_attn.wo, attention(matvec(p.self_attn.wq, x[i]), k_self, v_self, allowed, p.heads)));
    const Vec x2 = add(x1, matvec(p.cross_attn.wo, attention(matvec(p.cross_attn.wq, x1), k_mem, v_mem, tokens, p.heads)));
    Vec hidden = linear(p.ffn_in, x2);
    for (double& v : hidden) v = std::max(v, 0.0);
    out.push_back(add(x2, linear(p.ffn_out, hidden)));
  }
  return out;
}

QuerySet grouped(const Eigen::MatrixXd& e, int matching) {
  QuerySet q{e, {}};
  for (Eigen::Index i = 0; i < e.rows(); ++i) q.groups.push_back(i < matching ? QueryGroup::Matching : QueryGroup::Consistency);
  return q;
}

}  // namespace

TEST_CASE("roi align on a constant grid") {
  FeatureGrid g = FeatureGrid::zeros(2, 5, 6);
  g.values.row(0).setConstant(3.0);
  g.values.row(1).setConstant(-1.5);
  const Eigen::MatrixXd out = roi_align(g, Boxd{0.1, 0.2, 0.9, 0.7}, 4, 3, 2);
  CHECK(out.rows() == 2);
  CHECK(out.cols() == 12);
  CHECK((out.row(0).array() - 3.0).abs().maxCoeff() < 1e-14);
  CHECK((out.row(1).array() + 1.5).abs().maxCoeff() < 1e-14);
}

TEST_CASE("roi align against hand bilinear arithmetic") {
  FeatureGrid g = FeatureGrid::zeros(1, 2, 2);
  g.at(0, 0, 0) = 1;
  g.at(0, 0, 1) = 2;
  g.at(0, 1, 0) = 3;
  g.at(0, 1, 1) = 4;
  // Full box, 2x2 bins, one sample per bin: samples land on pixel centers.
  const Eigen::MatrixXd same = roi_align(g, Boxd{0, 0, 1, 1}, 2, 2, 1);
  CHECK(same(0, 0) == 1.0);
  CHECK(same(0, 1) == 2.0);
  CHECK(same(0, 2) == 3.0);
  CHECK(same(0, 3) == 4.0);
  // One bin: the sample sits at (0.5, 0.5) in pixel units, the mean of all four.
  CHECK(roi_align(g, Boxd{0, 0, 1, 1}, 1, 1, 1)(0, 0) == doctest::Approx(2.5).epsilon(1e-15));

  FeatureGrid h = FeatureGrid::zeros(1, 3, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) h.at(0, y, x) = y * 3 + x;
  // Box [0, 0.5]^2 on a 3x3 grid: sample at (0.25, 0.25).
  const double expected = 0.75 * 0.75 * 0 + 0.75 * 0.25 * 1 + 0.25 * 0.75 * 3 + 0.25 * 0.25 * 4;
  CHECK(roi_align(h, Boxd{0, 0, 0.5, 0.5}, 1, 1, 1)(0, 0) == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("roi align on a linear ramp gives bin-center averages") {
  FeatureGrid g = FeatureGrid::zeros(1, 8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) g.at(0, y, x) = x;
  const Boxd box{0.2, 0.3, 0.7, 0.8};
  const Eigen::MatrixXd out = roi_align(g, box, 3, 3, 2);
  const double start = box.x_min * 8 - 0.5, bin = box.width() * 8 / 3;
  for (int ph = 0; ph < 3; ++ph)
    for (int pw = 0; pw < 3; ++pw) CHECK(out(0, ph * 3 + pw) == doctest::Approx(start + (pw + 0.5) * bin).epsilon(1e-13));
}

TEST_CASE("roi align is linear in the grid") {
  Rng rng(50);
  for (int trial = 0; trial < 50; ++trial) {
    const FeatureGrid a = random_grid(rng, 3, 7, 9), b = random_grid(rng, 3, 7, 9);
    const double s = uniform(rng, -2, 2), t = uniform(rng, -2, 2);
    FeatureGrid c = a;
    c.values = s * a.values + t * b.values;
    const Boxd box = random_box(rng);
    const Eigen::MatrixXd lhs = roi_align(c, box, 3, 3, 2);
    const Eigen::MatrixXd rhs = s * roi_align(a, box, 3, 3, 2) + t * roi_align(b, box, 3, 3, 2);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("roi align rejects degenerate input") {
  const FeatureGrid g = FeatureGrid::zeros(1, 4, 4);
  CHECK_THROWS_AS(roi_align(g, Boxd{0.2, 0.2, 0.2, 0.5}), InvalidArgument);
  CHECK_THROWS_AS(roi_align(g, Boxd{0.2, 0.2, 0.5, 0.5}, 0, 2), InvalidArgument);
  CHECK_THROWS_AS(FeatureGrid::zeros(1, 0, 4), InvalidArgument);
}

TEST_CASE("query embedding") {
  Rng rng(51);
  const std::vector<Eigen::MatrixXd> pooled{random_matrix(rng, 2, 4), random_matrix(rng, 2, 4)};
  SUBCASE("zero parameters") {
    Mlp m;
    m.layers.push_back({Eigen::MatrixXd::Zero(3, 8), Eigen::VectorXd::Zero(3)});
    m.layers.push_back({Eigen::MatrixXd::Zero(5, 3), Eigen::VectorXd::Zero(5)});
    CHECK(embed_queries(pooled, m).isZero(0.0));
  }
  SUBCASE("identity layer on a constant input") {
    Mlp m;
    m.layers.push_back({Eigen::MatrixXd::Identity(8, 8), Eigen::VectorXd::Zero(8)});
    const Eigen::MatrixXd e = embed_queries({Eigen::MatrixXd::Constant(2, 4, 0.7)}, m);
    CHECK((e.array() - 0.7).abs().maxCoeff() == 0.0);
  }
  SUBCASE("scalar forward pass") {
    const Mlp m = Mlp::random(8, 3, 5, 2, rng);
    const Eigen::MatrixXd e = embed_queries(pooled, m);
    for (std::size_t q = 0; q < pooled.size(); ++q) {
      Vec x;
      for (Eigen::Index c = 0; c < 2; ++c)
        for (Eigen::Index k = 0; k < 4; ++k) x.push_back(pooled[q](c, k));
      Vec h = linear(m.layers[0], x);
      for (double& v : h) v = std::max(v, 0.0);
      const Vec y = linear(m.layers[1], h);
      for (int d = 0; d < 5; ++d) CHECK(e(static_cast<Eigen::Index>(q), d) == doctest::Approx(y[d]).epsilon(1e-13));
    }
  }
}

TEST_CASE("attention mask patterns") {
  using G = QueryGroup;
  CHECK(!build_attention_mask({G::Matching, G::Matching, G::Matching}).blocked.any());
  const BoolMatrix b = build_attention_mask({G::Matching, G::Matching, G::Consistency, G::Consistency}).blocked;
  BoolMatrix expected(4, 4);
  expected << false, false, true, true,
              false, false, true, true,
              true, true, false, false,
              true, true, false, false;
  CHECK(b == expected);
  CHECK(!build_attention_mask({G::Consistency, G::Consistency}).blocked.any());
}

TEST_CASE("toy decoder matches a scalar oracle") {
  Rng rng(52);
  for (int trial = 0; trial < 20; ++trial) {
    const int heads = uniform_int(rng, 1, 2), dim = heads * 2, channels = 3;
    const DecoderParams p = DecoderParams::random(dim, heads, channels, 5, rng);
    const Eigen::MatrixXd x = random_matrix(rng, 3, dim), memory = random_matrix(rng, 4, channels);
    const QuerySet q = grouped(x, trial % 2 ? 2 : 3);
    const AttentionMask mask = build_attention_mask(q.groups);
    std::vector<std::vector<bool>> blocked(3, std::vector<bool>(3));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) blocked[i][j] = mask.blocked(i, j);
    const Mat expected = oracle_decode(to_rows(x), to_rows(memory), blocked, p);
    const Eigen::MatrixXd got = toy_decode(q, memory, mask, p);
    for (int i = 0; i < 3; ++i)
      for (int d = 0; d < dim; ++d) CHECK(got(i, d) == doctest::Approx(expected[i][d]).epsilon(1e-12));
  }
}

TEST_CASE("toy decoder degenerate masks") {
  Rng rng(53);
  const DecoderParams p = DecoderParams::random(4, 2, 2, 4, rng);
  const Eigen::MatrixXd memory = random_matrix(rng, 3, 2);
  SUBCASE("single query attends to itself") {
    const Eigen::MatrixXd x = random_matrix(rng, 1, 4);
    const QuerySet q = grouped(x, 1);
    const Eigen::MatrixXd out = toy_decode(q, memory, build_attention_mask(q.groups), p);
    // Softmax over one key: the self-attention output is wo * wv * x.
    const Vec x0 = to_rows(x)[0];
    const Vec x1 = add(x0, matvec(p.self_attn.wo, matvec(p.self_attn.wv, x0)));
    Mat k_mem, v_mem;
    for (const auto& r : to_rows(memory)) {
      k_mem.push_back(matvec(p.cross_attn.wk, r));
      v_mem.push_back(matvec(p.cross_attn.wv, r));
    }
    const Vec x2 = add(x1, matvec(p.cross_attn.wo, attention(matvec(p.cross_attn.wq, x1), k_mem, v_mem, {0, 1, 2}, 2)));
    Vec hidden = linear(p.ffn_in, x2);
    for (double& v : hidden) v = std::max(v, 0.0);
    const Vec expected = add(x2, linear(p.ffn_out, hidden));
    for (int d = 0; d < 4; ++d) CHECK(out(0, d) == doctest::Approx(expected[d]).epsilon(1e-12));
  }
  SUBCASE("self-only mask equals decoding each query alone") {
    const Eigen::MatrixXd x = random_matrix(rng, 3, 4);
    QuerySet q = grouped(x, 3);
    AttentionMask self_only{BoolMatrix::Constant(3, 3, true)};
    for (int i = 0; i < 3; ++i) self_only.blocked(i, i) = false;
    const Eigen::MatrixXd joint = toy_decode(q, memory, self_only, p);
    for (int i = 0; i < 3; ++i) {
      const QuerySet alone = grouped(x.row(i), 1);
      CHECK((toy_decode(alone, memory, build_attention_mask(alone.groups), p).row(0).array() == joint.row(i).array()).all());
    }
  }
  SUBCASE("shape errors") {
    const QuerySet q = grouped(random_matrix(rng, 2, 3), 2);
    CHECK_THROWS_AS(toy_decode(q, memory, build_attention_mask(q.groups), p), InvalidArgument);
    CHECK_THROWS_AS(DecoderParams::random(5, 2, 2, 4, rng), InvalidArgument);
  }
}

TEST_CASE("matching queries do not see consistency queries") {
  Rng rng(54);
  for (int trial = 0; trial < 30; ++trial) {
    const int heads = uniform_int(rng, 1, 3), dim = heads * uniform_int(rng, 1, 4), channels = uniform_int(rng, 1, 4);
    const DecoderParams p = DecoderParams::random(dim, heads, channels, uniform_int(rng, 1, 8), rng);
    const Eigen::MatrixXd memory = random_matrix(rng, uniform_int(rng, 1, 9), channels);
    const int nq = uniform_int(rng, 1, 6), nc = uniform_int(rng, 0, 6);
    const Eigen::MatrixXd x = random_matrix(rng, nq + nc, dim);
    const QuerySet full = grouped(x, nq);
    const QuerySet base = grouped(x.topRows(nq), nq);
    const Eigen::MatrixXd joint = toy_decode(full, memory, build_attention_mask(full.groups), p);
    const Eigen::MatrixXd alone = toy_decode(base, memory, build_attention_mask(base.groups), p);
    CHECK((joint.topRows(nq).array() == alone.array()).all());
  }
}

TEST_CASE("consistency loss") {
  Rng rng(55);
  const Eigen::MatrixXd t = random_matrix(rng, 3, 4);
  CHECK(consistency_loss(t, t).value == 0.0);
  CHECK(consistency_loss(t.array() + 1.0, t).value == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(consistency_loss(t, random_matrix(rng, 2, 4)), InvalidArgument);
  CHECK(consistency_loss(Eigen::MatrixXd(0, 4), Eigen::MatrixXd(0, 4)).value == 0.0);

  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd s = random_matrix(rng, 2, 3), tt = random_matrix(rng, 2, 3);
    const ConsistencyLoss l = consistency_loss(s, tt);
    CHECK(l.value == doctest::Approx((s - tt).array().square().sum() / 6.0).epsilon(1e-14));
    CHECK(l.value >= 0.0);
    CHECK(l.grad_teacher.isZero(0.0));
    for (Eigen::Index k = 0; k < s.size(); ++k) {
      const double fd = central_difference(
          [&](double v) {
            Eigen::MatrixXd m = s;
            m.data()[k] = v;
            return consistency_loss(m, tt).value;
          },
          s.data()[k]);
      CHECK(grad_close(l.grad_student.data()[k], fd));
    }
  }
}

TEST_CASE("cross-view decoding") {
  Rng rng(56);
  const int channels = 3, dim = 4;
  const ConsistencyModel model = ConsistencyModel::random(channels, dim, 2, rng, 3);
  auto view = [&] {
    ViewInputs v;
    v.features = random_grid(rng, channels, 8, 8);
    v.object_queries = random_matrix(rng, 5, dim);
    v.memory = v.features.tokens();
    return v;
  };
  const ViewInputs t = view(), s = view();
  const std::vector<Boxd> boxes{random_box(rng), random_box(rng)};
  const CrossViewOutput out = cross_view_decode(t, s, boxes, model, model);
  CHECK(out.o_hat_t.rows() == 2);
  CHECK(out.o_t.rows() == 5);

  SUBCASE("swapping the views swaps the outputs") {
    const CrossViewOutput sw = cross_view_decode(s, t, boxes, model, model);
    CHECK((sw.o_hat_t.array() == out.o_hat_s.array()).all());
    CHECK((sw.o_hat_s.array() == out.o_hat_t.array()).all());
    CHECK((sw.o_t.array() == out.o_s.array()).all());
  }
  SUBCASE("object outputs ignore the consistency queries") {
    const CrossViewOutput none = cross_view_decode(t, s, {}, model, model);
    CHECK(none.o_hat_t.rows() == 0);
    CHECK((none.o_t.array() == out.o_t.array()).all());
    CHECK((none.o_s.array() == out.o_s.array()).all());
  }
  SUBCASE("rows follow the boxes") {
    const CrossViewOutput rev = cross_view_decode(t, s, {boxes[1], boxes[0]}, model, model);
    CHECK((rev.o_hat_s.row(0) - out.o_hat_s.row(1)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((rev.o_hat_t.row(1) - out.o_hat_t.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("model parameters round trip through a flat vector") {
  Rng rng(57);
  ConsistencyModel m = ConsistencyModel::random(2, 4, 2, rng, 3);
  const Eigen::VectorXd flat = m.flatten();
  ConsistencyModel other = ConsistencyModel::random(2, 4, 2, rng, 3);
  other.assign(flat);
  CHECK(other.flatten() == flat);
  CHECK(other.decoder.ffn_out.bias == m.decoder.ffn_out.bias);
  CHECK_THROWS_AS(other.assign(Eigen::VectorXd::Zero(3)), InvalidArgument);
}
