#include "ssod/teacher_student.hpp"

#include "ssod/errors.hpp"
#include "ssod/parallel.hpp"

#include <algorithm>
#include <cmath>

namespace ssod {

void StageConfig::validate() const {
  if (T1 <= 0 || T1 > total_iters) throw InvalidArgument("stage.T1 must satisfy 0 < T1 <= total_iters");
  if (!(tau_s >= 0.0 && tau_s <= 1.0)) throw InvalidArgument("stage.tau_s must lie in [0, 1]");
  if (!(w_u >= 0.0) || !(w_c >= 0.0)) throw InvalidArgument("loss weights must be non-negative");
  if (!(ema_momentum >= 0.0 && ema_momentum < 1.0)) throw InvalidArgument("stage.ema_momentum must lie in [0, 1)");
}

void PipelineSettings::validate() const {
  cost.validate();
  match.validate();
  if (o2m_k == 0) throw InvalidArgument("pipeline.o2m_k must be >= 1");
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) throw InvalidArgument("pipeline.nms_iou must lie in (0, 1]");
  if (labeled_per_batch < 0 || unlabeled_per_batch < 0) throw InvalidArgument("batch sizes must be non-negative");
  if (feature_channels < 1 || feature_size < 1 || model_dim < 1 || model_heads < 1 || roi_size < 1 ||
      object_queries < 0)
    throw InvalidArgument("model sizes must be positive");
  if (model_dim % model_heads != 0) throw InvalidArgument("pipeline.model_dim must be divisible by model_heads");
  if (weak_feature_noise < 0 || strong_feature_noise < 0 || student_drift < 0)
    throw InvalidArgument("noise levels must be non-negative");
}

namespace {

// Stream tags keep the random sources of one image independent.
constexpr std::uint64_t kModelStream = 101;
constexpr std::uint64_t kWeakFeatureStream = 102;
constexpr std::uint64_t kStrongFeatureStream = 103;
constexpr std::uint64_t kDriftStream = 104;

struct ImageViews {
  ViewInputs weak;
  ViewInputs strong;
};

std::vector<Boxd> top_boxes(const std::vector<Detection>& dets, int n) {
  std::vector<Boxd> out;
  for (std::size_t i : order_by_score(dets)) {
    if (static_cast<int>(out.size()) == n) break;
    if (dets[i].box.area() > 0) out.push_back(dets[i].box);
  }
  return out;
}

Eigen::MatrixXd query_embeddings(const FeatureGrid& grid, const std::vector<Boxd>& boxes,
                                 const ConsistencyModel& model) {
  std::vector<Eigen::MatrixXd> pooled;
  for (const auto& b : boxes) pooled.push_back(roi_align(grid, b, model.roi_size, model.roi_size, model.roi_sampling));
  if (pooled.empty()) return Eigen::MatrixXd(0, model.decoder.dim);
  return embed_queries(pooled, model.mlp);
}

ImageViews render_views(const PipelineState& state, std::uint64_t image_index, const ImageSample& img,
                        const PipelineSettings& settings) {
  ImageViews v;
  std::mt19937_64 weak_rng = image_rng(state.seed, image_index, kWeakFeatureStream);
  std::mt19937_64 strong_rng = image_rng(state.seed, image_index, kStrongFeatureStream);
  v.weak.features = render_features(img.gt, settings.feature_channels, settings.feature_size,
                                    settings.weak_feature_noise, weak_rng);
  v.strong.features = render_features(img.gt, settings.feature_channels, settings.feature_size,
                                      settings.strong_feature_noise, strong_rng);
  v.weak.memory = v.weak.features.tokens();
  v.strong.memory = v.strong.features.tokens();
  v.weak.object_queries = query_embeddings(v.weak.features, top_boxes(img.teacher, settings.object_queries), state.teacher);
  v.strong.object_queries =
      query_embeddings(v.strong.features, top_boxes(img.student, settings.object_queries), state.student);
  return v;
}

void accumulate(LossBreakdown& into, const LossBreakdown& part) {
  into.cls += part.cls;
  into.reg_giou += part.reg_giou;
  into.reg_l1 += part.reg_l1;
}

struct Quality {
  double precision = 1.0;
  double recall = 0.0;
  std::size_t count = 0;
};

Quality label_quality(const std::vector<std::vector<PseudoLabel>>& labels, const std::vector<ImageSample>& images) {
  std::size_t kept = 0, tp = 0, gt = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    kept += labels[i].size();
    gt += images[i].gt.size();
    tp += count_true_positives(labels[i], images[i].gt);
  }
  Quality q;
  q.count = kept;
  if (kept > 0) q.precision = static_cast<double>(tp) / kept;
  q.recall = gt == 0 ? 1.0 : static_cast<double>(tp) / gt;
  return q;
}

}  // namespace

PipelineState PipelineState::create(std::uint64_t seed, const PipelineSettings& settings) {
  settings.validate();
  PipelineState s;
  s.seed = seed;
  std::mt19937_64 rng = image_rng(seed, 0, kModelStream);
  s.student = ConsistencyModel::random(settings.feature_channels, settings.model_dim, settings.model_heads, rng,
                                       settings.roi_size);
  s.teacher = s.student;
  return s;
}

Batch make_batch(const Scenario& scn, long t, const PipelineSettings& settings) {
  if (t < 1) throw InvalidArgument("iterations start at 1");
  const std::uint64_t per_batch = static_cast<std::uint64_t>(settings.labeled_per_batch + settings.unlabeled_per_batch);
  const std::uint64_t base = static_cast<std::uint64_t>(t - 1) * per_batch;
  Batch b;
  b.labeled.resize(static_cast<std::size_t>(settings.labeled_per_batch));
  b.unlabeled.resize(static_cast<std::size_t>(settings.unlabeled_per_batch));
  parallel_for(per_batch, [&](std::size_t j) {
    ImageSample img = generate_image(scn, base + j);
    if (j < b.labeled.size())
      b.labeled[j] = std::move(img);
    else
      b.unlabeled[j - b.labeled.size()] = std::move(img);
  });
  return b;
}

LossBreakdown stage_losses(Stage stage, const std::vector<std::vector<PseudoLabel>>& targets,
                           const std::vector<std::vector<Detection>>& proposals, const PipelineSettings& settings) {
  if (targets.size() != proposals.size()) throw InvalidArgument("targets and proposals disagree on image count");
  std::vector<LossBreakdown> parts(targets.size());
  parallel_for(targets.size(), [&](std::size_t i) {
    parts[i].flavor = stage;
    // Keep at most as many targets as there are proposals so one-to-one matching stays feasible.
    std::vector<PseudoLabel> tg(targets[i].begin(),
                                targets[i].begin() + static_cast<std::ptrdiff_t>(std::min(targets[i].size(), proposals[i].size())));
    if (tg.empty()) return;
    const auto& props = proposals[i];
    if (stage == Stage::OneToOne) {
      parts[i] = o2o_losses(hungarian(build_cost_matrix(tg, props, settings.cost)), props, tg, settings.cost);
      return;
    }
    const Assignment a = one_to_many(tg, props, settings.match, settings.o2m_k, true);
    const Eigen::MatrixXd m = match_score_matrix(tg, props, settings.match);
    const Eigen::MatrixXd u = iou_matrix(tg, props);
    std::vector<std::vector<double>> ms(tg.size()), us(tg.size());
    for (std::size_t t = 0; t < tg.size(); ++t)
      for (std::size_t p : a.per_target[t]) {
        ms[t].push_back(m(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(p)));
        us[t].push_back(u(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(p)));
      }
    parts[i] = o2m_losses(a, normalize_match_scores(a, ms, us), props, tg, settings.quality_gamma);
  });
  LossBreakdown out;
  out.flavor = stage;
  for (const auto& p : parts) accumulate(out, p);
  out.update_total();
  return out;
}

StepResult semi_step(PipelineState& state, const Batch& batch, const StageConfig& cfg,
                     const PipelineSettings& settings) {
  cfg.validate();
  const long t = state.iteration + 1;
  const Stage stage = stage_of(t, cfg);
  const std::size_t n_u = batch.unlabeled.size();
  StepResult r;

  // Supervised branch: ground truth against the student's proposals.
  std::vector<std::vector<PseudoLabel>> sup_targets;
  std::vector<std::vector<Detection>> sup_props;
  for (const auto& img : batch.labeled) {
    sup_targets.push_back(gt_as_targets(img.gt));
    sup_props.push_back(img.student);
  }
  r.sup = stage_losses(stage, sup_targets, sup_props, settings);

  // Teacher outputs on the weak view: score filtering for cls/reg, cost mining for consistency.
  r.cls_reg_labels.resize(n_u);
  std::vector<MiningImage> mining(n_u);
  parallel_for(n_u, [&](std::size_t i) {
    const auto& img = batch.unlabeled[i];
    r.cls_reg_labels[i] = filter_fixed(nms(img.teacher, settings.nms_iou, true), cfg.tau_s);
    mining[i] = {filter_mean_std(img.teacher), img.student};
  });
  MiningResult mined = mine_cost_based(mining, settings.cost, settings.em);
  r.consistency_labels = std::move(mined.kept);

  std::vector<std::vector<Detection>> unsup_props;
  for (const auto& img : batch.unlabeled) unsup_props.push_back(img.student);
  r.unsup = stage_losses(stage, r.cls_reg_labels, unsup_props, settings);

  // Cross-view consistency on the mined boxes.
  std::vector<double> cons(n_u, 0.0);
  std::vector<std::size_t> cons_n(n_u, 0);
  const std::uint64_t per_batch = static_cast<std::uint64_t>(batch.labeled.size() + n_u);
  parallel_for(n_u, [&](std::size_t i) {
    std::vector<Boxd> boxes;
    for (const auto& p : r.consistency_labels[i])
      if (p.box.area() > 0) boxes.push_back(p.box);
    if (boxes.empty()) return;
    const std::uint64_t image_index = static_cast<std::uint64_t>(t - 1) * per_batch + batch.labeled.size() + i;
    const ImageViews v = render_views(state, image_index, batch.unlabeled[i], settings);
    const CrossViewOutput out = cross_view_decode(v.weak, v.strong, boxes, state.teacher, state.student);
    cons[i] = consistency_loss(out.o_hat_s, out.o_hat_t).value;
    cons_n[i] = 1;
  });
  std::size_t used = 0;
  for (std::size_t i = 0; i < n_u; ++i) {
    r.consistency += cons[i];
    used += cons_n[i];
  }
  if (used > 0) r.consistency /= static_cast<double>(used);

  r.total = total_loss(t, cfg.T1, r.sup, r.unsup, r.consistency, cfg.w_u, cfg.w_c);

  // Student drift in place of an optimizer step, then the EMA teacher update.
  ParamVector student = state.student.flatten();
  if (settings.student_drift > 0) {
    std::mt19937_64 rng = image_rng(state.seed, static_cast<std::uint64_t>(t), kDriftStream);
    std::normal_distribution<double> n(0.0, settings.student_drift);
    for (Eigen::Index k = 0; k < student.size(); ++k) student[k] += n(rng);
    state.student.assign(student);
  }
  const ParamVector teacher = ema_update(state.teacher.flatten(), student, cfg.ema_momentum);
  state.teacher.assign(teacher);
  state.iteration = t;

  StepDiagnostics& d = r.diagnostics;
  d.iteration = t;
  d.stage = stage;
  const Quality pq = label_quality(r.cls_reg_labels, batch.unlabeled);
  d.pseudo_count = pq.count;
  d.pseudo_precision = pq.precision;
  d.pseudo_recall = pq.recall;
  const Quality mq = label_quality(r.consistency_labels, batch.unlabeled);
  d.mined_count = mq.count;
  d.mined_precision = mq.precision;
  d.mined_recall = mq.recall;
  d.tau_c = mined.tau_c;
  d.sup_loss = r.sup.total;
  d.unsup_loss = r.unsup.total;
  d.consistency_loss = r.consistency;
  d.total_loss = r.total;
  d.teacher_student_gap = (teacher - student).norm();
  return r;
}

std::vector<StepDiagnostics> run_pipeline(const Scenario& scn, const StageConfig& cfg,
                                          const PipelineSettings& settings, long steps) {
  scn.validate();
  cfg.validate();
  PipelineState state = PipelineState::create(scn.seed, settings);
  std::vector<StepDiagnostics> trace;
  for (long t = 1; t <= steps; ++t) trace.push_back(semi_step(state, make_batch(scn, t, settings), cfg, settings).diagnostics);
  return trace;
}

}  // namespace ssod
