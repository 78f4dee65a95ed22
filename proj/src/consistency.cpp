#include "ssod/consistency.hpp"

#include "ssod/errors.hpp"

#include <cmath>
#include <limits>

namespace ssod {

FeatureGrid FeatureGrid::zeros(int channels, int height, int width) {
  if (channels < 1 || height < 1 || width < 1) throw InvalidArgument("feature grid dims must be >= 1");
  FeatureGrid g;
  g.channels = channels;
  g.height = height;
  g.width = width;
  g.values = Eigen::MatrixXd::Zero(channels, static_cast<Eigen::Index>(height) * width);
  return g;
}

namespace {

// Bilinear sample in pixel coordinates (pixel centers at integers), zero
// outside the [-1, size] border band and clamped inside it.
void bilinear_accumulate(const FeatureGrid& g, double y, double x, double weight,
                         Eigen::Ref<Eigen::VectorXd> acc) {
  if (y < -1.0 || y > g.height || x < -1.0 || x > g.width) return;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  int y_low = static_cast<int>(y), x_low = static_cast<int>(x);
  int y_high, x_high;
  if (y_low >= g.height - 1) {
    y_high = y_low = g.height - 1;
    y = y_low;
  } else {
    y_high = y_low + 1;
  }
  if (x_low >= g.width - 1) {
    x_high = x_low = g.width - 1;
    x = x_low;
  } else {
    x_high = x_low + 1;
  }
  const double ly = y - y_low, lx = x - x_low;
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  acc += weight * (hy * hx * g.values.col(y_low * g.width + x_low) +
                   hy * lx * g.values.col(y_low * g.width + x_high) +
                   ly * hx * g.values.col(y_high * g.width + x_low) +
                   ly * lx * g.values.col(y_high * g.width + x_high));
}

}  // namespace

Eigen::MatrixXd roi_align(const FeatureGrid& grid, const Boxd& box, int out_h, int out_w,
                          int sampling) {
  if (out_h < 1 || out_w < 1 || sampling < 1) throw InvalidArgument("roi_align dims must be >= 1");
  if (!box.valid() || !(box.area() > 0)) throw InvalidArgument("roi_align needs a positive-area box");
  const double start_x = box.x_min * grid.width - 0.5;
  const double start_y = box.y_min * grid.height - 0.5;
  const double bin_w = box.width() * grid.width / out_w;
  const double bin_h = box.height() * grid.height / out_h;
  const double weight = 1.0 / (sampling * sampling);

  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(grid.channels, static_cast<Eigen::Index>(out_h) * out_w);
  for (int ph = 0; ph < out_h; ++ph)
    for (int pw = 0; pw < out_w; ++pw) {
      auto cell = out.col(ph * out_w + pw);
      for (int iy = 0; iy < sampling; ++iy) {
        const double y = start_y + ph * bin_h + (iy + 0.5) * bin_h / sampling;
        for (int ix = 0; ix < sampling; ++ix) {
          const double x = start_x + pw * bin_w + (ix + 0.5) * bin_w / sampling;
          bilinear_accumulate(grid, y, x, weight, cell);
        }
      }
    }
  return out;
}

Eigen::VectorXd flatten_pooled(const Eigen::MatrixXd& pooled) {
  Eigen::VectorXd flat(pooled.size());
  for (Eigen::Index c = 0; c < pooled.rows(); ++c) flat.segment(c * pooled.cols(), pooled.cols()) = pooled.row(c).transpose();
  return flat;
}

namespace {
Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

Linear random_linear(int in, int out, std::mt19937_64& rng) {
  Linear l{random_matrix(out, in, rng), Eigen::VectorXd::Zero(out)};
  std::normal_distribution<double> normal(0.0, 0.01);
  for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = normal(rng);
  return l;
}

Eigen::VectorXd relu(Eigen::VectorXd v) { return v.cwiseMax(0.0); }
}  // namespace

Eigen::VectorXd Mlp::forward(const Eigen::VectorXd& x) const {
  Eigen::VectorXd h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = relu(std::move(h));
  }
  return h;
}

Mlp Mlp::random(int in, int hidden, int out, int num_layers, std::mt19937_64& rng) {
  if (num_layers < 1) throw InvalidArgument("MLP needs at least one layer");
  Mlp m;
  int width = in;
  for (int i = 0; i < num_layers; ++i) {
    const int next = i + 1 == num_layers ? out : hidden;
    m.layers.push_back(random_linear(width, next, rng));
    width = next;
  }
  return m;
}

Eigen::MatrixXd embed_queries(const std::vector<Eigen::MatrixXd>& roi_feats, const Mlp& mlp) {
  if (mlp.layers.empty()) throw InvalidArgument("empty MLP");
  const Eigen::Index dim = mlp.layers.back().weight.rows();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(roi_feats.size()), dim);
  for (std::size_t i = 0; i < roi_feats.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = mlp.forward(flatten_pooled(roi_feats[i])).transpose();
  return out;
}

AttentionMask build_attention_mask(const std::vector<QueryGroup>& groups) {
  const auto n = static_cast<Eigen::Index>(groups.size());
  AttentionMask mask{BoolMatrix::Constant(n, n, false)};
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) mask.blocked(i, j) = groups[i] != groups[j];
  return mask;
}

DecoderParams DecoderParams::random(int dim, int heads, int memory_channels, int ffn_hidden,
                                    std::mt19937_64& rng) {
  if (dim < 1 || heads < 1 || dim % heads != 0) throw InvalidArgument("dim must be a positive multiple of heads");
  DecoderParams p;
  p.dim = dim;
  p.heads = heads;
  p.self_attn = {random_matrix(dim, dim, rng), random_matrix(dim, dim, rng), random_matrix(dim, dim, rng),
                 random_matrix(dim, dim, rng)};
  p.cross_attn = {random_matrix(dim, dim, rng), random_matrix(dim, memory_channels, rng),
                  random_matrix(dim, memory_channels, rng), random_matrix(dim, dim, rng)};
  p.ffn_in = random_linear(dim, ffn_hidden, rng);
  p.ffn_out = random_linear(ffn_hidden, dim, rng);
  return p;
}

namespace {

// Multi-head attention for a single query against precomputed keys/values,
// restricted to `allowed` key rows (ascending order).
Eigen::VectorXd attend(const Eigen::VectorXd& q, const Eigen::MatrixXd& keys, const Eigen::MatrixXd& values,
                       const std::vector<Eigen::Index>& allowed, int heads) {
  const Eigen::Index dim = q.size();
  const Eigen::Index dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
  if (allowed.empty()) return out;
  std::vector<double> logits(allowed.size());
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.segment(h * dh, dh);
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < allowed.size(); ++a) {
      logits[a] = qh.dot(keys.row(allowed[a]).segment(h * dh, dh).transpose()) * scale;
      max_logit = std::max(max_logit, logits[a]);
    }
    double denom = 0.0;
    for (double& l : logits) {
      l = std::exp(l - max_logit);
      denom += l;
    }
    auto oh = out.segment(h * dh, dh);
    for (std::size_t a = 0; a < allowed.size(); ++a)
      oh += (logits[a] / denom) * values.row(allowed[a]).segment(h * dh, dh).transpose();
  }
  return out;
}

Eigen::MatrixXd project_rows(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w) {
  Eigen::MatrixXd out(x.rows(), w.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = (w * x.row(i).transpose()).transpose();
  return out;
}

}  // namespace

Eigen::MatrixXd toy_decode(const QuerySet& queries, const Eigen::MatrixXd& memory,
                           const AttentionMask& mask, const DecoderParams& p) {
  const Eigen::Index n = queries.embeddings.rows();
  if (queries.embeddings.cols() != p.dim) throw InvalidArgument("query dim does not match decoder dim");
  if (static_cast<Eigen::Index>(queries.groups.size()) != n || mask.blocked.rows() != n ||
      mask.blocked.cols() != n)
    throw InvalidArgument("mask/group sizes must match the query count");
  if (memory.cols() != p.cross_attn.wk.cols()) throw InvalidArgument("memory channels do not match decoder");

  const Eigen::MatrixXd& x = queries.embeddings;
  const Eigen::MatrixXd k_self = project_rows(x, p.self_attn.wk);
  const Eigen::MatrixXd v_self = project_rows(x, p.self_attn.wv);
  Eigen::MatrixXd x1(n, p.dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<Eigen::Index> allowed;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!mask.blocked(i, j)) allowed.push_back(j);
    const Eigen::VectorXd qi = p.self_attn.wq * x.row(i).transpose();
    const Eigen::VectorXd att = attend(qi, k_self, v_self, allowed, p.heads);
    x1.row(i) = x.row(i) + (p.self_attn.wo * att).transpose();
  }

  const Eigen::MatrixXd k_mem = project_rows(memory, p.cross_attn.wk);
  const Eigen::MatrixXd v_mem = project_rows(memory, p.cross_attn.wv);
  std::vector<Eigen::Index> all_tokens(static_cast<std::size_t>(memory.rows()));
  for (Eigen::Index t = 0; t < memory.rows(); ++t) all_tokens[t] = t;

  Eigen::MatrixXd out(n, p.dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd qi = p.cross_attn.wq * x1.row(i).transpose();
    const Eigen::VectorXd x2 = x1.row(i).transpose() + p.cross_attn.wo * attend(qi, k_mem, v_mem, all_tokens, p.heads);
    const Eigen::VectorXd hidden = relu(p.ffn_in(x2));
    out.row(i) = (x2 + p.ffn_out(hidden)).transpose();
  }
  return out;
}

ConsistencyModel ConsistencyModel::random(int channels, int dim, int heads, std::mt19937_64& rng,
                                          int roi_size) {
  ConsistencyModel m;
  m.roi_size = roi_size;
  m.mlp = Mlp::random(channels * roi_size * roi_size, dim, dim, 2, rng);
  m.decoder = DecoderParams::random(dim, heads, channels, dim, rng);
  return m;
}

namespace {
template <typename Visitor>
void visit_params(ConsistencyModel& m, Visitor&& visit) {
  for (auto& l : m.mlp.layers) {
    visit(l.weight);
    visit(l.bias);
  }
  for (AttentionWeights* a : {&m.decoder.self_attn, &m.decoder.cross_attn}) {
    visit(a->wq);
    visit(a->wk);
    visit(a->wv);
    visit(a->wo);
  }
  visit(m.decoder.ffn_in.weight);
  visit(m.decoder.ffn_in.bias);
  visit(m.decoder.ffn_out.weight);
  visit(m.decoder.ffn_out.bias);
}
}  // namespace

Eigen::VectorXd ConsistencyModel::flatten() const {
  ConsistencyModel copy = *this;
  Eigen::Index total = 0;
  visit_params(copy, [&](auto& block) { total += block.size(); });
  Eigen::VectorXd flat(total);
  Eigen::Index offset = 0;
  visit_params(copy, [&](auto& block) {
    flat.segment(offset, block.size()) = Eigen::Map<const Eigen::VectorXd>(block.data(), block.size());
    offset += block.size();
  });
  return flat;
}

void ConsistencyModel::assign(const Eigen::VectorXd& flat) {
  Eigen::Index total = 0;
  visit_params(*this, [&](auto& block) { total += block.size(); });
  if (total != flat.size()) throw InvalidArgument("parameter vector size mismatch");
  Eigen::Index offset = 0;
  visit_params(*this, [&](auto& block) {
    Eigen::Map<Eigen::VectorXd>(block.data(), block.size()) = flat.segment(offset, block.size());
    offset += block.size();
  });
}

namespace {

Eigen::MatrixXd decode_with_consistency(const Eigen::MatrixXd& cross_view, const ViewInputs& view,
                                        const DecoderParams& decoder, Eigen::MatrixXd& object_out) {
  const Eigen::Index nc = cross_view.rows();
  const Eigen::Index nq = view.object_queries.rows();
  QuerySet qs;
  qs.embeddings.resize(nc + nq, decoder.dim);
  qs.embeddings << cross_view, view.object_queries;
  qs.groups.assign(static_cast<std::size_t>(nc), QueryGroup::Consistency);
  qs.groups.insert(qs.groups.end(), static_cast<std::size_t>(nq), QueryGroup::Matching);
  const Eigen::MatrixXd decoded = toy_decode(qs, view.memory, build_attention_mask(qs.groups), decoder);
  object_out = decoded.bottomRows(nq);
  return decoded.topRows(nc);
}

Eigen::MatrixXd roi_embeddings(const FeatureGrid& grid, const std::vector<Boxd>& boxes,
                               const ConsistencyModel& model) {
  std::vector<Eigen::MatrixXd> pooled;
  pooled.reserve(boxes.size());
  for (const auto& b : boxes) pooled.push_back(roi_align(grid, b, model.roi_size, model.roi_size, model.roi_sampling));
  Eigen::MatrixXd emb = embed_queries(pooled, model.mlp);
  if (boxes.empty()) emb.resize(0, model.decoder.dim);
  return emb;
}

}  // namespace

CrossViewOutput cross_view_decode(const ViewInputs& teacher, const ViewInputs& student,
                                  const std::vector<Boxd>& boxes, const ConsistencyModel& teacher_model,
                                  const ConsistencyModel& student_model) {
  const Eigen::MatrixXd c_t = roi_embeddings(teacher.features, boxes, teacher_model);
  const Eigen::MatrixXd c_s = roi_embeddings(student.features, boxes, student_model);
  CrossViewOutput out;
  out.o_hat_t = decode_with_consistency(c_s, teacher, teacher_model.decoder, out.o_t);
  out.o_hat_s = decode_with_consistency(c_t, student, student_model.decoder, out.o_s);
  return out;
}

ConsistencyLoss consistency_loss(const Eigen::MatrixXd& o_hat_s, const Eigen::MatrixXd& o_hat_t) {
  if (o_hat_s.rows() != o_hat_t.rows() || o_hat_s.cols() != o_hat_t.cols())
    throw InvalidArgument("consistency inputs must have matching shapes");
  ConsistencyLoss out;
  out.grad_teacher = Eigen::MatrixXd::Zero(o_hat_t.rows(), o_hat_t.cols());
  if (o_hat_s.size() == 0) {
    out.grad_student = Eigen::MatrixXd::Zero(o_hat_s.rows(), o_hat_s.cols());
    return out;
  }
  const Eigen::MatrixXd diff = o_hat_s - o_hat_t;
  const double n = static_cast<double>(diff.size());
  out.value = diff.squaredNorm() / n;
  out.grad_student = 2.0 * diff / n;
  return out;
}

}  // namespace ssod
