#include "support.hpp"

#include "ssod/errors.hpp"
#include "ssod/report.hpp"
#include "ssod/teacher_student.hpp"

#include <doctest.h>

using namespace ssod;
using namespace ssod::testing;

namespace {

Scenario small_scenario(std::uint64_t seed) {
  Scenario s;
  s.seed = seed;
  s.num_images = 20;
  s.boxes_min = 2;
  s.boxes_max = 4;
  s.proposals_per_image = 20;
  return s;
}

StageConfig short_schedule() {
  StageConfig c;
  c.T1 = 2;
  c.total_iters = 4;
  return c;
}

bool same_labels(const std::vector<PseudoLabel>& a, const std::vector<PseudoLabel>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].box == b[i].box) || a[i].class_id != b[i].class_id || a[i].confidence != b[i].confidence ||
        a[i].match_cost != b[i].match_cost || a[i].source_index != b[i].source_index)
      return false;
  return true;
}

}  // namespace

TEST_CASE("ema update examples") {
  ParamVector t = ParamVector::Zero(1), s = ParamVector::Ones(1);
  const ParamVector out = ema_update(t, s, 0.999);
  CHECK(out[0] == 1.0 - 0.999);
  CHECK(out[0] == doctest::Approx(0.001).epsilon(1e-12));

  Rng rng(60);
  const ParamVector x = random_matrix(rng, 10, 1);
  CHECK((ema_update(x, x, 0.9) - x).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("ema update properties") {
  Rng rng(61);
  for (int trial = 0; trial < 100; ++trial) {
    const double m = uniform(rng, 0.0, 0.9999);
    const ParamVector t = random_matrix(rng, 6, 1, -3, 3), s = random_matrix(rng, 6, 1, -3, 3);
    const ParamVector out = ema_update(t, s, m);
    for (Eigen::Index i = 0; i < 6; ++i) {
      CHECK(out[i] >= std::min(t[i], s[i]) - 1e-15);
      CHECK(out[i] <= std::max(t[i], s[i]) + 1e-15);
    }
    CHECK((out - s).norm() == doctest::Approx(m * (t - s).norm()).epsilon(1e-12));

    ParamVector k = t;
    const int steps = uniform_int(rng, 1, 20);
    for (int i = 0; i < steps; ++i) k = ema_update(k, s, m);
    const ParamVector closed = s + std::pow(m, steps) * (t - s);
    CHECK((k - closed).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("stage schedule boundary") {
  StageConfig c;
  c.T1 = 10;
  c.total_iters = 20;
  CHECK(stage_of(1, c) == Stage::OneToMany);
  CHECK(stage_of(10, c) == Stage::OneToMany);
  CHECK(stage_of(11, c) == Stage::OneToOne);
  c.T1 = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.T1 = 30;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("batches are contiguous image blocks") {
  const Scenario scn = small_scenario(3);
  const PipelineSettings settings;
  const Batch b = make_batch(scn, 2, settings);
  REQUIRE(b.labeled.size() == 1);
  REQUIRE(b.unlabeled.size() == 4);
  CHECK(b.labeled[0].gt.size() == generate_image(scn, 5).gt.size());
  CHECK(b.unlabeled[3].teacher.size() == generate_image(scn, 9).teacher.size());
  CHECK_THROWS_AS(make_batch(scn, 0, settings), InvalidArgument);
}

TEST_CASE("zero unsupervised weights leave only the supervised loss") {
  const Scenario scn = small_scenario(4);
  const PipelineSettings settings;
  StageConfig cfg = short_schedule();
  cfg.w_u = 0.0;
  cfg.w_c = 0.0;
  PipelineState state = PipelineState::create(scn.seed, settings);
  for (long t = 1; t <= 3; ++t) {
    const StepResult r = semi_step(state, make_batch(scn, t, settings), cfg, settings);
    CHECK(r.total == r.sup.total);
    CHECK(r.diagnostics.iteration == t);
  }
}

TEST_CASE("teacher outputs are routed by purpose") {
  const Scenario scn = small_scenario(5);
  const PipelineSettings settings;
  const StageConfig cfg = short_schedule();
  PipelineState state = PipelineState::create(scn.seed, settings);
  for (long t = 1; t <= 3; ++t) {
    const Batch batch = make_batch(scn, t, settings);
    const StepResult r = semi_step(state, batch, cfg, settings);
    CHECK(r.diagnostics.stage == stage_of(t, cfg));

    std::vector<MiningImage> mining;
    std::vector<std::vector<Detection>> props;
    for (std::size_t i = 0; i < batch.unlabeled.size(); ++i) {
      const auto& img = batch.unlabeled[i];
      CHECK(same_labels(r.cls_reg_labels[i], filter_fixed(nms(img.teacher, settings.nms_iou, true), cfg.tau_s)));
      mining.push_back({filter_mean_std(img.teacher), img.student});
      props.push_back(img.student);
    }
    const MiningResult mined = mine_cost_based(mining, settings.cost, settings.em);
    REQUIRE(mined.kept.size() == r.consistency_labels.size());
    for (std::size_t i = 0; i < mined.kept.size(); ++i) CHECK(same_labels(mined.kept[i], r.consistency_labels[i]));

    const LossBreakdown unsup = stage_losses(stage_of(t, cfg), r.cls_reg_labels, props, settings);
    CHECK(unsup.total == r.unsup.total);
    CHECK(r.total == doctest::Approx(r.sup.total + cfg.w_u * r.unsup.total + cfg.w_c * r.consistency).epsilon(1e-14));
  }
}

TEST_CASE("the teacher follows the student by ema after each step") {
  const Scenario scn = small_scenario(6);
  const PipelineSettings settings;
  const StageConfig cfg = short_schedule();
  PipelineState state = PipelineState::create(scn.seed, settings);
  CHECK(state.teacher.flatten() == state.student.flatten());
  for (long t = 1; t <= 2; ++t) {
    const ParamVector before = state.teacher.flatten();
    const StepResult r = semi_step(state, make_batch(scn, t, settings), cfg, settings);
    const ParamVector student = state.student.flatten();
    CHECK(state.teacher.flatten() == ema_update(before, student, cfg.ema_momentum));
    CHECK(r.diagnostics.teacher_student_gap == doctest::Approx((state.teacher.flatten() - student).norm()));
    CHECK(r.diagnostics.teacher_student_gap > 0.0);
  }
}

TEST_CASE("noiseless teacher gives zero regression loss in the one-to-one stage") {
  Scenario scn = small_scenario(7);
  scn.noise = NoiseModel::noiseless();
  const PipelineSettings settings;
  const StageConfig cfg = short_schedule();
  PipelineState state = PipelineState::create(scn.seed, settings);
  state.iteration = cfg.T1;
  const Batch batch = make_batch(scn, cfg.T1 + 1, settings);
  const StepResult r = semi_step(state, batch, cfg, settings);
  CHECK(r.unsup.flavor == Stage::OneToOne);
  std::size_t labels = 0;
  for (std::size_t i = 0; i < batch.unlabeled.size(); ++i) {
    labels += r.cls_reg_labels[i].size();
    for (const auto& p : r.cls_reg_labels[i]) CHECK(p.confidence == 1.0);
  }
  CHECK(labels > 0);
  CHECK(r.unsup.reg_giou == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.unsup.reg_l1 == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.sup.reg_giou == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.diagnostics.pseudo_precision == 1.0);
  CHECK(r.diagnostics.pseudo_recall == 1.0);
}

TEST_CASE("a step is bit-reproducible") {
  const Scenario scn = small_scenario(8);
  const PipelineSettings settings;
  const StageConfig cfg = short_schedule();
  PipelineState a = PipelineState::create(scn.seed, settings), b = PipelineState::create(scn.seed, settings);
  for (long t = 1; t <= 3; ++t) {
    const StepResult ra = semi_step(a, make_batch(scn, t, settings), cfg, settings);
    const StepResult rb = semi_step(b, make_batch(scn, t, settings), cfg, settings);
    CHECK(ra.total == rb.total);
    CHECK(ra.consistency == rb.consistency);
    CHECK(a.teacher.flatten() == b.teacher.flatten());
  }
}

TEST_CASE("pipeline trace golden") {
  Scenario scn = small_scenario(9);
  PipelineSettings settings;
  const StageConfig cfg = short_schedule();
  const auto trace = run_pipeline(scn, cfg, settings, 4);
  REQUIRE(trace.size() == 4);
  CHECK(trace[1].stage == Stage::OneToMany);
  CHECK(trace[2].stage == Stage::OneToOne);
  CHECK(matches_golden("pipeline_trace.csv", to_csv(trace_table(trace))));
}
