#include "ssod/simulator.hpp"

#include "ssod/errors.hpp"
#include "ssod/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ssod {

NoiseModel NoiseModel::noiseless() {
  NoiseModel n;
  n.center_jitter_sigma = 0.0;
  n.scale_jitter_sigma = 0.0;
  n.calibration = {0.0, 1.0, 0.0};
  n.false_positive_rate = 0.0;
  n.class_flip_prob = 0.0;
  n.duplicate_rate = 0.0;
  n.difficulty = 0.0;
  n.false_positive_penalty = 0.0;
  n.student_score_cap = 1.0;
  n.background_score = 0.0;
  return n;
}

void NoiseModel::validate() const {
  if (center_jitter_sigma < 0 || scale_jitter_sigma < 0 || calibration.sd < 0)
    throw InvalidArgument("noise sigmas must be non-negative");
  if (duplicate_rate < 0 || duplicate_jitter_factor < 0 || difficulty < 0)
    throw InvalidArgument("duplicate and difficulty settings must be non-negative");
  if (false_positive_rate < 0) throw InvalidArgument("false_positive_rate must be non-negative");
  if (class_flip_prob < 0 || class_flip_prob > 1) throw InvalidArgument("class_flip_prob must lie in [0, 1]");
  if (strong_view_factor < 0) throw InvalidArgument("strong_view_factor must be non-negative");
  if (background_score < 0 || background_score > 1) throw InvalidArgument("background_score must lie in [0, 1]");
}

void Scenario::validate() const {
  if (num_images < 1 || boxes_min < 1 || boxes_max < boxes_min || proposals_per_image < 1 || batch_size < 1)
    throw InvalidArgument("scenario counts must be positive (boxes_max >= boxes_min)");
  if (num_classes < 1) throw InvalidArgument("num_classes must be >= 1");
  if (proposal_object_fraction < 0 || proposal_object_fraction > 1)
    throw InvalidArgument("proposal_object_fraction must lie in [0, 1]");
  if (proposal_cluster_skew < 0) throw InvalidArgument("proposal_cluster_skew must be non-negative");
  noise.validate();
}

std::mt19937_64 image_rng(std::uint64_t seed, std::uint64_t image, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(image), static_cast<std::uint32_t>(image >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

namespace {

struct Sampler {
  std::mt19937_64& rng;

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  double normal(double sd) { return sd > 0 ? std::normal_distribution<double>(0.0, sd)(rng) : 0.0; }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  bool bernoulli(double p) { return p > 0 && std::bernoulli_distribution(p)(rng); }
  int poisson(double mean) { return mean > 0 ? std::poisson_distribution<int>(mean)(rng) : 0; }

  Boxd random_box() {
    const double w = std::exp(uniform(std::log(0.05), std::log(0.4)));
    const double h = std::exp(uniform(std::log(0.05), std::log(0.4)));
    return Boxd::from_center(uniform(w / 2, 1 - w / 2), uniform(h / 2, 1 - h / 2), w, h);
  }

  Boxd jitter(const Boxd& b, double center_sigma, double scale_sigma) {
    if (center_sigma == 0 && scale_sigma == 0) return b;
    const auto c = b.center_form();
    const double w = c[2] * std::exp(normal(scale_sigma));
    const double h = c[3] * std::exp(normal(scale_sigma));
    Boxd out = Boxd::from_center(c[0] + normal(center_sigma) * c[2], c[1] + normal(center_sigma) * c[3], w, h);
    out.x_min = std::clamp(out.x_min, 0.0, 1.0);
    out.y_min = std::clamp(out.y_min, 0.0, 1.0);
    out.x_max = std::clamp(out.x_max, 0.0, 1.0);
    out.y_max = std::clamp(out.y_max, 0.0, 1.0);
    return out;
  }

  double calibrated_score(const ScoreCalibration& cal, double u) {
    return std::clamp(cal.offset + cal.slope * u + normal(cal.sd), 0.0, 1.0);
  }

  int maybe_flip(int cls, int num_classes, double p) {
    if (num_classes < 2 || !bernoulli(p)) return cls;
    const int other = integer(0, num_classes - 2);
    return other >= cls ? other + 1 : other;
  }

  Detection make_detection(const Boxd& box, int cls, double score, int num_classes, double background) {
    Eigen::VectorXd s(num_classes);
    const double cap = std::min(score, background);
    for (int c = 0; c < num_classes; ++c) s[c] = c == cls ? score : (cap > 0 ? uniform(0.0, cap) : 0.0);
    Detection d(box, std::move(s));
    d.class_id = cls;
    return d;
  }
};

double best_iou(const Boxd& b, const std::vector<GtBox>& gt) {
  double best = 0.0;
  for (const auto& g : gt) best = std::max(best, iou(b, g.box));
  return best;
}

}  // namespace

ImageSample generate_image(const Scenario& scn, std::uint64_t image_index) {
  std::mt19937_64 rng = image_rng(scn.seed, image_index);
  Sampler s{rng};
  const NoiseModel& nm = scn.noise;
  ImageSample img;

  const int n_gt = s.integer(scn.boxes_min, scn.boxes_max);
  for (int g = 0; g < n_gt; ++g) {
    GtBox gt;
    gt.box = s.random_box();
    gt.class_id = s.integer(0, scn.num_classes - 1);
    img.gt.push_back(gt);
  }

  std::vector<double> penalty(n_gt);
  for (double& p : penalty) p = nm.difficulty > 0 ? s.uniform(0.0, nm.difficulty) : 0.0;

  // Teacher, weak view: one detection per object, loose duplicates, spurious boxes.
  for (int g = 0; g < n_gt; ++g) {
    const int copies = 1 + s.poisson(nm.duplicate_rate);
    for (int c = 0; c < copies; ++c) {
      const double f = c == 0 ? 1.0 : nm.duplicate_jitter_factor;
      const Boxd b = s.jitter(img.gt[g].box, nm.center_jitter_sigma * f, nm.scale_jitter_sigma * f);
      const double score = std::max(0.0, s.calibrated_score(nm.calibration, iou(b, img.gt[g].box)) - penalty[g]);
      const int cls = s.maybe_flip(img.gt[g].class_id, scn.num_classes, nm.class_flip_prob);
      img.teacher.push_back(s.make_detection(b, cls, score, scn.num_classes, nm.background_score));
      img.teacher_source.push_back(g);
    }
  }
  const int n_fp = s.poisson(nm.false_positive_rate);
  for (int f = 0; f < n_fp; ++f) {
    const Boxd b = s.random_box();
    const int cls = s.integer(0, scn.num_classes - 1);
    double score = s.calibrated_score(nm.calibration, best_iou(b, img.gt));
    if (nm.false_positive_penalty > 0) score = std::max(0.0, score - s.uniform(0.0, nm.false_positive_penalty));
    img.teacher.push_back(s.make_detection(b, cls, score, scn.num_classes, nm.background_score));
    img.teacher_source.push_back(-1);
  }

  // Student, strong view: every object gets one proposal, the remaining object
  // proposals cluster unevenly over objects, the rest cover the background.
  const double strong_c = nm.center_jitter_sigma * nm.strong_view_factor;
  const double strong_s = nm.scale_jitter_sigma * nm.strong_view_factor;
  const int n_obj = std::max(n_gt, static_cast<int>(std::lround(scn.proposal_object_fraction * scn.proposals_per_image)));
  std::vector<double> weight(n_gt);
  for (double& w : weight) w = std::pow(s.uniform(0.0, 1.0), scn.proposal_cluster_skew);
  if (std::accumulate(weight.begin(), weight.end(), 0.0) <= 0) std::fill(weight.begin(), weight.end(), 1.0);
  std::discrete_distribution<int> pick(weight.begin(), weight.end());
  for (int q = 0; q < std::max(n_obj, scn.proposals_per_image); ++q) {
    Boxd b;
    int cls;
    int source;
    double score;
    if (q < n_obj) {
      source = q < n_gt ? q : pick(rng);
      b = s.jitter(img.gt[source].box, strong_c, strong_s);
      score = s.calibrated_score(nm.calibration, iou(b, img.gt[source].box));
      if (nm.student_difficulty) score = std::max(0.0, score - penalty[source]);
      cls = s.maybe_flip(img.gt[source].class_id, scn.num_classes, nm.class_flip_prob);
    } else {
      source = -1;
      b = s.random_box();
      score = s.calibrated_score(nm.calibration, 0.0);
      cls = s.integer(0, scn.num_classes - 1);
    }
    score = std::min(score, nm.student_score_cap);
    img.student.push_back(s.make_detection(b, cls, score, scn.num_classes, nm.background_score));
    img.student_source.push_back(source);
  }
  return img;
}

Dataset generate(const Scenario& scn) {
  scn.validate();
  Dataset data;
  data.scenario = scn;
  data.images.resize(static_cast<std::size_t>(scn.num_images));
  parallel_for(data.images.size(), [&](std::size_t i) { data.images[i] = generate_image(scn, i); });
  return data;
}

std::vector<PseudoLabel> gt_as_targets(const std::vector<GtBox>& gt) {
  std::vector<PseudoLabel> out;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    PseudoLabel p;
    p.box = gt[i].box;
    p.class_id = gt[i].class_id;
    p.confidence = 1.0;
    p.source_index = i;
    out.push_back(p);
  }
  return out;
}

FeatureGrid render_features(const std::vector<GtBox>& gt, int channels, int size, double noise_sd,
                            std::mt19937_64& rng) {
  FeatureGrid grid = FeatureGrid::zeros(channels, size, size);
  for (const auto& g : gt) {
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double px = (x + 0.5) / size, py = (y + 0.5) / size;
        if (!g.box.contains(px, py)) continue;
        for (int c = 0; c < channels; ++c)
          grid.at(c, y, x) += (c % std::max(1, g.class_id + 1) == 0 ? 1.0 : 0.25);
      }
  }
  if (noise_sd > 0) {
    std::normal_distribution<double> n(0.0, noise_sd);
    for (Eigen::Index i = 0; i < grid.values.size(); ++i) grid.values.data()[i] += n(rng);
  }
  return grid;
}

std::string FilterSpec::label() const {
  char buf[64];
  switch (strategy) {
    case FilterStrategy::Fixed:
      std::snprintf(buf, sizeof buf, "Fixed(%g)", tau_s);
      return buf;
    case FilterStrategy::TopK:
      std::snprintf(buf, sizeof buf, "Top-K(K=%zu)", k);
      return buf;
    case FilterStrategy::MeanStd:
      return "Mean+Std";
    case FilterStrategy::CostGmm:
      return "Cost-based GMM";
  }
  return "?";
}

std::vector<FilterSpec> default_filter_specs() {
  return {{FilterStrategy::Fixed, kDefaultScoreThreshold, kDefaultPseudoTopK},
          {FilterStrategy::TopK, kDefaultScoreThreshold, kDefaultPseudoTopK},
          {FilterStrategy::MeanStd, kDefaultScoreThreshold, kDefaultPseudoTopK},
          {FilterStrategy::CostGmm, kDefaultScoreThreshold, kDefaultPseudoTopK}};
}

std::size_t count_true_positives(const std::vector<PseudoLabel>& labels, const std::vector<GtBox>& gt,
                                 double iou_thresh) {
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return labels[a].confidence > labels[b].confidence; });
  std::vector<bool> taken(gt.size(), false);
  std::size_t tp = 0;
  for (std::size_t i : order) {
    int best = -1;
    double best_iou = iou_thresh;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (taken[g] || gt[g].class_id != labels[i].class_id) continue;
      const double u = iou(labels[i].box, gt[g].box);
      if (u >= best_iou && (best < 0 || u > best_iou)) {
        best = static_cast<int>(g);
        best_iou = u;
      }
    }
    if (best >= 0) {
      taken[best] = true;
      ++tp;
    }
  }
  return tp;
}

namespace {

std::vector<std::vector<PseudoLabel>> apply_filter(const Dataset& data, const FilterSpec& spec,
                                                   const EvalSettings& settings) {
  const auto& images = data.images;
  std::vector<std::vector<PseudoLabel>> kept(images.size());
  switch (spec.strategy) {
    case FilterStrategy::Fixed:
      parallel_for(images.size(), [&](std::size_t i) { kept[i] = filter_fixed(images[i].teacher, spec.tau_s); });
      break;
    case FilterStrategy::TopK:
      parallel_for(images.size(), [&](std::size_t i) { kept[i] = filter_topk(images[i].teacher, spec.k); });
      break;
    case FilterStrategy::MeanStd:
      parallel_for(images.size(), [&](std::size_t i) { kept[i] = filter_mean_std(images[i].teacher); });
      break;
    case FilterStrategy::CostGmm: {
      const std::size_t batch = static_cast<std::size_t>(data.scenario.batch_size);
      for (std::size_t start = 0; start < images.size(); start += batch) {
        const std::size_t end = std::min(images.size(), start + batch);
        std::vector<MiningImage> mb;
        for (std::size_t i = start; i < end; ++i)
          mb.push_back({filter_mean_std(images[i].teacher), images[i].student});
        MiningResult r = mine_cost_based(mb, settings.cost, settings.em);
        for (std::size_t i = start; i < end; ++i) kept[i] = std::move(r.kept[i - start]);
      }
      break;
    }
  }
  return kept;
}

}  // namespace

std::vector<FilterRow> eval_filtering(const Dataset& data, const std::vector<FilterSpec>& strategies,
                                      const EvalSettings& settings) {
  std::vector<FilterRow> rows;
  for (const auto& spec : strategies) {
    const auto kept = apply_filter(data, spec, settings);
    FilterRow row;
    row.strategy = spec.label();
    for (std::size_t i = 0; i < data.images.size(); ++i) {
      row.kept += kept[i].size();
      row.ground_truth += data.images[i].gt.size();
      row.true_positives += count_true_positives(kept[i], data.images[i].gt, settings.eval_iou);
    }
    row.empty_kept = row.kept == 0;
    row.precision = row.empty_kept ? 1.0 : static_cast<double>(row.true_positives) / row.kept;
    row.recall = row.ground_truth == 0 ? 1.0 : static_cast<double>(row.true_positives) / row.ground_truth;
    rows.push_back(row);
  }
  return rows;
}

SourcedLabels sourced_pseudo_labels(const ImageSample& img, double tau_s) {
  SourcedLabels out;
  for (auto& p : filter_fixed(img.teacher, tau_s)) {
    const int src = img.teacher_source[*p.source_index];
    if (src < 0) continue;
    out.labels.push_back(std::move(p));
    out.gt_index.push_back(src);
  }
  return out;
}

QualityRow eval_assignment_quality(const Dataset& data, std::size_t k, const EvalSettings& settings) {
  struct ImageStats {
    std::vector<double> i1, i2;
  };
  std::vector<ImageStats> stats(data.images.size());
  parallel_for(data.images.size(), [&](std::size_t idx) {
    const ImageSample& img = data.images[idx];
    const SourcedLabels pd = sourced_pseudo_labels(img, settings.tau_s);
    if (pd.labels.empty() || img.student.size() < std::max(pd.labels.size(), img.gt.size())) return;
    const Assignment a_pd = hungarian(build_cost_matrix(pd.labels, img.student, settings.cost));
    const Assignment a_gt = hungarian(build_cost_matrix(gt_as_targets(img.gt), img.student, settings.cost));
    const Assignment a_o2m = one_to_many(pd.labels, img.student, settings.match, k, false);
    for (std::size_t i = 0; i < pd.labels.size(); ++i) {
      const Boxd& gt_side = img.student[a_gt.per_target[pd.gt_index[i]].front()].box;
      const Boxd& pd_side = img.student[a_pd.per_target[i].front()].box;
      double best = 0.0;
      for (std::size_t p : a_o2m.per_target[i]) best = std::max(best, iou(img.student[p].box, gt_side));
      stats[idx].i1.push_back(iou(pd_side, gt_side));
      stats[idx].i2.push_back(best);
    }
  });
  QualityRow row;
  row.k = k;
  std::size_t ge = 0;
  for (const auto& s : stats)
    for (std::size_t i = 0; i < s.i1.size(); ++i) {
      ++row.boxes;
      row.mean_i1 += s.i1[i];
      row.mean_i2 += s.i2[i];
      if (s.i2[i] >= s.i1[i]) ++ge;
    }
  if (row.boxes > 0) {
    row.mean_i1 /= row.boxes;
    row.mean_i2 /= row.boxes;
    row.frac_i2_ge_i1 = static_cast<double>(ge) / row.boxes;
  }
  return row;
}

std::vector<AblationRow> eval_strategy_ablation(const Dataset& data, const EvalSettings& settings) {
  const char* names[] = {"Max-IoU", "ATSS", "SimOTA", "Ranked top-k"};
  struct Acc {
    std::size_t targets = 0, positives = 0, zero = 0, max_pos = 0;
    double iou_sum = 0.0;
  };
  std::vector<std::array<Acc, 4>> per_image(data.images.size());
  parallel_for(data.images.size(), [&](std::size_t idx) {
    const ImageSample& img = data.images[idx];
    const auto targets = filter_fixed(img.teacher, settings.tau_s);
    if (targets.empty()) return;
    const Assignment results[4] = {
        max_iou_assign(targets, img.student, settings.max_iou_thresh, settings.max_iou_rescue),
        atss_assign(targets, img.student, settings.atss_candidate_k),
        simota_assign(targets, img.student, settings.cost),
        one_to_many(targets, img.student, settings.match, settings.o2m_k, true)};
    for (int s = 0; s < 4; ++s) {
      Acc& acc = per_image[idx][s];
      for (std::size_t t = 0; t < targets.size(); ++t) {
        const auto& props = results[s].per_target[t];
        ++acc.targets;
        acc.positives += props.size();
        acc.max_pos = std::max(acc.max_pos, props.size());
        if (props.empty()) ++acc.zero;
        for (std::size_t p : props) acc.iou_sum += iou(img.student[p].box, targets[t].box);
      }
    }
  });
  std::vector<AblationRow> rows;
  for (int s = 0; s < 4; ++s) {
    Acc total;
    for (const auto& im : per_image) {
      total.targets += im[s].targets;
      total.positives += im[s].positives;
      total.zero += im[s].zero;
      total.max_pos = std::max(total.max_pos, im[s].max_pos);
      total.iou_sum += im[s].iou_sum;
    }
    AblationRow row;
    row.strategy = names[s];
    row.targets = total.targets;
    row.max_positives = total.max_pos;
    if (total.targets > 0) {
      row.mean_positives = static_cast<double>(total.positives) / total.targets;
      row.frac_zero_positive = static_cast<double>(total.zero) / total.targets;
    }
    if (total.positives > 0) row.mean_positive_iou = total.iou_sum / total.positives;
    rows.push_back(row);
  }
  return rows;
}

}  // namespace ssod
