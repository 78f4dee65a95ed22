#pragma once

#include "ssod/geometry.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <vector>

namespace ssod {

/// Dense [channels x height x width] grid spanning the normalized unit square.
/// values is channels x (height * width); pixel (y, x) lives in column y * width + x.
struct FeatureGrid {
  int channels = 0;
  int height = 0;
  int width = 0;
  Eigen::MatrixXd values;

  static FeatureGrid zeros(int channels, int height, int width);

  double at(int c, int y, int x) const { return values(c, y * width + x); }
  double& at(int c, int y, int x) { return values(c, y * width + x); }
  /// (height * width) x channels, one row per spatial token.
  Eigen::MatrixXd tokens() const { return values.transpose(); }
};

inline constexpr int kDefaultRoiSize = 7;
inline constexpr int kDefaultRoiSampling = 2;

/// RoIAlign with half-pixel alignment: the box is split into out_h x out_w
/// bins and each bin averages sampling x sampling bilinear samples. Returns
/// channels x (out_h * out_w). Throws InvalidArgument for a zero-area box.
Eigen::MatrixXd roi_align(const FeatureGrid& grid, const Boxd& box, int out_h = kDefaultRoiSize,
                          int out_w = kDefaultRoiSize, int sampling = kDefaultRoiSampling);

/// Channel-major flattening of a pooled tensor.
Eigen::VectorXd flatten_pooled(const Eigen::MatrixXd& pooled);

struct Linear {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;

  Eigen::VectorXd operator()(const Eigen::VectorXd& x) const { return weight * x + bias; }
};

/// Linear layers with max(0, .) between them (not after the last).
struct Mlp {
  std::vector<Linear> layers;

  Eigen::VectorXd forward(const Eigen::VectorXd& x) const;
  static Mlp random(int in, int hidden, int out, int num_layers, std::mt19937_64& rng);
};

/// One query embedding per pooled RoI tensor (rows of the result).
Eigen::MatrixXd embed_queries(const std::vector<Eigen::MatrixXd>& roi_feats, const Mlp& mlp);

enum class QueryGroup : std::uint8_t { Matching, Consistency };

struct QuerySet {
  Eigen::MatrixXd embeddings;  // num_queries x dim
  std::vector<QueryGroup> groups;
};

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// blocked(i, j): query i may not attend to query j.
struct AttentionMask {
  BoolMatrix blocked;
};

/// Queries attend only within their own group.
AttentionMask build_attention_mask(const std::vector<QueryGroup>& groups);

struct AttentionWeights {
  Eigen::MatrixXd wq, wk, wv, wo;
};

struct DecoderParams {
  int dim = 16;
  int heads = 2;
  AttentionWeights self_attn;
  AttentionWeights cross_attn;  // wk, wv map memory channels to dim
  Linear ffn_in;
  Linear ffn_out;

  static DecoderParams random(int dim, int heads, int memory_channels, int ffn_hidden,
                              std::mt19937_64& rng);
};

/// One decoder block: masked multi-head self-attention over the queries,
/// cross-attention to the memory tokens, then a ReLU feed-forward layer, each
/// with a residual connection. Blocked pairs are excluded from the softmax.
/// Every query row is computed with its own matrix-vector products, so a
/// query's output depends only on the queries it may attend to.
Eigen::MatrixXd toy_decode(const QuerySet& queries, const Eigen::MatrixXd& memory,
                           const AttentionMask& mask, const DecoderParams& params);

/// Query embedding MLP plus decoder of one model (teacher or student).
struct ConsistencyModel {
  Mlp mlp;
  DecoderParams decoder;
  int roi_size = kDefaultRoiSize;
  int roi_sampling = kDefaultRoiSampling;

  static ConsistencyModel random(int channels, int dim, int heads, std::mt19937_64& rng,
                                 int roi_size = kDefaultRoiSize);

  Eigen::VectorXd flatten() const;
  /// Overwrites every parameter from a vector laid out as flatten().
  void assign(const Eigen::VectorXd& flat);
};

struct ViewInputs {
  FeatureGrid features;         // backbone features used for RoI pooling
  Eigen::MatrixXd object_queries;  // original matching queries
  Eigen::MatrixXd memory;       // encoded tokens, (tokens x channels)
};

struct CrossViewOutput {
  Eigen::MatrixXd o_hat_t, o_t, o_hat_s, o_s;
};

/// Cross-view decoding: RoI embeddings from each view are attached in front
/// of the other view's object queries ([c_s, q_t] for the teacher,
/// [c_t, q_s] for the student) and decoded under the group mask.
CrossViewOutput cross_view_decode(const ViewInputs& teacher, const ViewInputs& student,
                                  const std::vector<Boxd>& boxes, const ConsistencyModel& teacher_model,
                                  const ConsistencyModel& student_model);

struct ConsistencyLoss {
  double value = 0.0;
  Eigen::MatrixXd grad_student;
  /// Always zero: the teacher side is detached.
  Eigen::MatrixXd grad_teacher;
};

/// Mean squared error between student and detached teacher decodings.
ConsistencyLoss consistency_loss(const Eigen::MatrixXd& o_hat_s, const Eigen::MatrixXd& o_hat_t);

}  // namespace ssod
