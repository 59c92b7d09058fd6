#include <cmath>
#include <filesystem>
#include <memory>

#include <gtest/gtest.h>

#include "cigocc/pipeline.hpp"

using namespace cigocc;
using config::RunConfig;

namespace {

const double kLn2 = std::log(2.0);

RunConfig base_config() {
  RunConfig c;
  c.stage1.steps = 100;
  c.stage2.steps = 60;
  return c;
}

// Four default scenes and a stage-1 model trained once for the whole suite.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = std::make_unique<RunConfig>(base_config());
    scenes_ = std::make_unique<std::vector<pipeline::Scene>>(pipeline::make_scenes(*cfg_));
    initial_ = std::make_unique<pipeline::StepLog>(
        pipeline::stage1_dataset_losses(*cfg_, *scenes_, pipeline::stage1_init(*cfg_)));
    stage1_ = std::make_unique<pipeline::Stage1Result>(pipeline::train_stage1(*cfg_, *scenes_));
  }
  static void TearDownTestSuite() {
    stage1_.reset();
    initial_.reset();
    scenes_.reset();
    cfg_.reset();
  }

  static std::unique_ptr<RunConfig> cfg_;
  static std::unique_ptr<std::vector<pipeline::Scene>> scenes_;
  static std::unique_ptr<pipeline::StepLog> initial_;
  static std::unique_ptr<pipeline::Stage1Result> stage1_;
};

std::unique_ptr<RunConfig> Pipeline::cfg_;
std::unique_ptr<std::vector<pipeline::Scene>> Pipeline::scenes_;
std::unique_ptr<pipeline::StepLog> Pipeline::initial_;
std::unique_ptr<pipeline::Stage1Result> Pipeline::stage1_;

}  // namespace

TEST_F(Pipeline, StageOneLossFallsBelowQuarterOfInitial) {
  ASSERT_EQ(stage1_->log.size(), 100u);
  const auto after = pipeline::stage1_dataset_losses(*cfg_, *scenes_, stage1_->params);
  EXPECT_LT(after.get("total"), 0.25 * initial_->get("total"))
      << "initial " << initial_->get("total") << " final " << after.get("total");
}

TEST_F(Pipeline, StageOneInitialLossMatchesUniformPrediction) {
  // Small initial logits: the weighted CE sits near ln 20 and the binary loss near ln 2.
  EXPECT_NEAR(initial_->get("l_ssc"), std::log(20.0), 0.2);
  EXPECT_NEAR(initial_->get("l_occ"), kLn2, 0.05);
}

TEST_F(Pipeline, SscOnlyStageTwoHalvesSscLoss) {
  RunConfig c = *cfg_;
  c.lambdas = {0, 0, 0, 1};
  const auto prepared = pipeline::prepare_stage2(c, *scenes_, stage1_->params);
  const auto before = pipeline::stage2_dataset_losses(c, *scenes_, prepared, pipeline::stage2_init(c));
  const auto r = pipeline::train_stage2(c, *scenes_, stage1_->params);
  const auto after = pipeline::stage2_dataset_losses(c, *scenes_, prepared, r.params);
  EXPECT_LE(after.get("l_ssc"), 0.5 * before.get("l_ssc"))
      << "before " << before.get("l_ssc") << " after " << after.get("l_ssc");
  EXPECT_DOUBLE_EQ(after.get("total"), after.get("l_ssc"));
}

TEST_F(Pipeline, BceOnlyStageTwoDropsBelowLn2) {
  RunConfig c = *cfg_;
  c.lambdas = {1, 0, 0, 0};
  c.stage2.steps = 30;
  const auto r = pipeline::train_stage2(c, *scenes_, stage1_->params);
  EXPECT_NEAR(r.log.front().get("l_bce"), kLn2, 1e-6);
  const auto prepared = pipeline::prepare_stage2(c, *scenes_, stage1_->params);
  const auto after = pipeline::stage2_dataset_losses(c, *scenes_, prepared, r.params);
  EXPECT_LT(after.get("l_bce"), kLn2);
}

TEST_F(Pipeline, StageTwoLeavesStageOneUntouched) {
  RunConfig c = *cfg_;
  c.stage2.steps = 2;
  const auto before = nd::checksum(stage1_->params.named());
  const auto r = pipeline::train_stage2(c, *scenes_, stage1_->params);
  EXPECT_EQ(r.stage1_checksum, before);
  EXPECT_EQ(nd::checksum(stage1_->params.named()), before);
  for (const auto& [name, p] : stage1_->params.named()) {
    EXPECT_FALSE(p.requires_grad()) << name;
    EXPECT_FALSE(p.has_grad()) << name;
  }
}

TEST_F(Pipeline, StageTwoLogsEveryComponent) {
  RunConfig c = *cfg_;
  c.stage2.steps = 1;
  std::size_t calls = 0;
  const auto r = pipeline::train_stage2(c, *scenes_, stage1_->params, [&](const pipeline::StepLog&) { ++calls; });
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(calls, 1u);
  const auto& l = r.log.front();
  const double sum = l.get("l_bce") + l.get("l_scal_geo") + l.get("l_scal_sem") + l.get("l_ssc");
  EXPECT_NEAR(l.get("total"), sum, 1e-4 * sum);
}

TEST_F(Pipeline, EvaluateScoresEveryRange) {
  RunConfig c = *cfg_;
  c.stage2.steps = 1;
  const auto r = pipeline::train_stage2(c, *scenes_, stage1_->params);
  std::vector<semkitti::LabelGrid> preds;
  const auto scores = pipeline::evaluate(c, *scenes_, stage1_->params, r.params, &preds);
  ASSERT_EQ(scores.size(), c.ranges.size());
  EXPECT_EQ(preds.size(), scenes_->size());
  for (std::size_t i = 0; i < scores.size(); ++i) EXPECT_DOUBLE_EQ(scores[i].range_m, c.ranges[i]);
}

TEST(PipelineRuns, ZeroLearningRateKeepsLossConstant) {
  RunConfig c;
  c.scenes = 2;
  c.stage1 = {3, 0.0, 0.9, 5.0, 0};
  const auto scenes = pipeline::make_scenes(c);
  const auto r = pipeline::train_stage1(c, scenes);
  ASSERT_EQ(r.log.size(), 3u);
  for (const auto& l : r.log) EXPECT_EQ(l.get("total"), r.log.front().get("total"));
}

TEST(PipelineRuns, IdenticalSeedAndConfigAreBitIdentical) {
  RunConfig c;
  c.scenes = 2;
  c.stage1.steps = 3;
  c.stage2.steps = 2;
  auto run = [&] {
    const auto scenes = pipeline::make_scenes(c);
    auto s1 = pipeline::train_stage1(c, scenes);
    auto s2 = pipeline::train_stage2(c, scenes, s1.params);
    return std::make_tuple(s1.log, s2.log, nd::checksum(s1.params.named()), nd::checksum(s2.params.named()));
  };
  const auto a = run();
  const auto b = run();
  auto same = [](const std::vector<pipeline::StepLog>& x, const std::vector<pipeline::StepLog>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i].to_json().dump() != y[i].to_json().dump()) return false;
    return true;
  };
  EXPECT_TRUE(same(std::get<0>(a), std::get<0>(b)));
  EXPECT_TRUE(same(std::get<1>(a), std::get<1>(b)));
  EXPECT_EQ(std::get<2>(a), std::get<2>(b));
  EXPECT_EQ(std::get<3>(a), std::get<3>(b));
}

TEST(PipelineRuns, DivergenceAbortsWithStepIndex) {
  RunConfig c;
  c.scenes = 1;
  c.stage1 = {20, 1e30, 0.9, 0.0, 0};
  const auto scenes = pipeline::make_scenes(c);
  try {
    pipeline::train_stage1(c, scenes);
    FAIL() << "training with an absurd learning rate finished";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(PipelineRuns, EmptySceneListIsRejected) {
  const RunConfig c;
  EXPECT_THROW(pipeline::train_stage1(c, {}), DataError);
}

TEST(SceneWeights, InverseFrequencyOverPresentClasses) {
  RunConfig c;
  c.scenes = 1;
  auto scenes = pipeline::make_scenes(c);
  auto& gt = scenes[0].raw.gt.values;
  std::fill(gt.begin(), gt.end(), 0);
  for (std::size_t i = 0; i < gt.size() / 4; ++i) gt[i] = 5;
  const auto w = pipeline::scene_class_weights(scenes);
  ASSERT_EQ(w.size(), pipeline::kClasses);
  // Frequencies 3/4 and 1/4: inverse 4/3 and 4, mean 8/3.
  EXPECT_NEAR(w[0], 0.5, 1e-12);
  EXPECT_NEAR(w[5], 1.5, 1e-12);
  EXPECT_DOUBLE_EQ(w[1], 1.0);
  c.weighting = config::ClassWeighting::uniform;
  EXPECT_EQ(pipeline::ssc_weights(c, scenes), std::vector<double>(pipeline::kClasses, 1.0));
}

TEST(SceneFiles, SaveLoadRoundTrip) {
  RunConfig c;
  c.scenes = 2;
  const auto scenes = pipeline::make_scenes(c);
  const auto root = std::filesystem::temp_directory_path() / "cigocc_scene_roundtrip";
  std::filesystem::remove_all(root);
  for (const auto& s : scenes) pipeline::save_scene(root / s.name, s.raw);
  const auto loaded = pipeline::load_scenes(root);
  ASSERT_EQ(loaded.size(), scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(loaded[i].name, scenes[i].name);
    EXPECT_TRUE(loaded[i].raw == scenes[i].raw);
    EXPECT_EQ(loaded[i].raw.camera.rotation, scenes[i].raw.camera.rotation);
    EXPECT_EQ(loaded[i].occ.values, scenes[i].occ.values);
  }
  std::filesystem::remove_all(root);
}

TEST(SceneFiles, MissingOrTruncatedFilesAreDataErrors) {
  RunConfig c;
  c.scenes = 1;
  const auto scenes = pipeline::make_scenes(c);
  const auto root = std::filesystem::temp_directory_path() / "cigocc_scene_broken";
  std::filesystem::remove_all(root);
  EXPECT_THROW(pipeline::load_scenes(root), DataError);
  pipeline::save_scene(root / "a", scenes[0].raw);
  io::write_file(root / "a" / "depth.f32", io::Bytes(10, 0));
  EXPECT_THROW(pipeline::load_scenes(root), DataError);
  std::filesystem::remove_all(root);
}

TEST(SceneFiles, MaskTargetsComeFromMajorityDownsampling) {
  RunConfig c;
  c.scenes = 1;
  const auto s = pipeline::make_scenes(c).front();
  const std::size_t w = c.image_width / pipeline::kMaskFactor, h = c.image_height / pipeline::kMaskFactor;
  ASSERT_EQ(s.mask_targets.shape(), (nd::Shape{pipeline::kClasses - 1, h, w}));
  const auto down = cig::downsample_majority(s.raw.mask, c.image_width, c.image_height, pipeline::kMaskFactor);
  for (std::size_t i = 0; i < w * h; ++i) {
    double on = 0;
    for (std::size_t k = 0; k + 1 < pipeline::kClasses; ++k) on += s.mask_targets[k * w * h + i];
    const bool labelled = down[i] >= 1 && down[i] < pipeline::kClasses;
    EXPECT_EQ(on, labelled ? 1.0 : 0.0) << i;
    if (labelled) EXPECT_EQ(s.mask_targets[(down[i] - 1) * w * h + i], 1.0f);
  }
}
