#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "fixture.hpp"
#include "magneto/learner.hpp"

namespace magneto {
namespace {

namespace fs = std::filesystem;

class LearnerTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new fixture::Fixture(fixture::make());
    bundle_ = new EdgeBundle(pretrain(data_->train, fixture::quick_config()));
  }
  static void TearDownTestSuite() {
    delete bundle_;
    delete data_;
  }

  static const fixture::Fixture& data() { return *data_; }
  static const EdgeBundle& bundle() { return *bundle_; }

  static fs::path temp_path(const std::string& name) {
    return fs::temp_directory_path() / ("magneto_learner_" + std::to_string(::getpid()) + "_" + name);
  }

 private:
  static inline fixture::Fixture* data_ = nullptr;
  static inline EdgeBundle* bundle_ = nullptr;
};

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::kIo;
}

TEST_F(LearnerTest, PretrainBuildsVersionOneBundle) {
  const auto& b = bundle();
  EXPECT_EQ(b.model_version, 1u);
  EXPECT_EQ(b.registry().size(), 5u);
  for (const auto& [name, _] : data().train) {
    const auto id = b.registry().find(name);
    ASSERT_TRUE(id);
    EXPECT_EQ(b.registry().info(*id).origin, Origin::kPretrained);
    EXPECT_EQ(b.support.exemplars(*id).size(), 40u);
  }
  EXPECT_EQ(b.params.dims, (std::vector<std::size_t>{80, 64, 32}));
}

TEST_F(LearnerTest, PretrainIsBitIdenticalForSameSeed) {
  const auto again = pretrain(data().train, fixture::quick_config());
  EXPECT_EQ(encode_bundle(again), encode_bundle(bundle()));
  auto cfg = fixture::quick_config();
  cfg.seed = 7;
  EXPECT_NE(encode_bundle(pretrain(data().train, cfg)), encode_bundle(bundle()));
}

TEST_F(LearnerTest, PretrainRejectsSingleClass) {
  ClassWindows one{{"walk", data().train.at("walk")}};
  EXPECT_EQ(code_of([&] { pretrain(one, fixture::quick_config()); }), ErrorCode::kInvalidArgument);
}

TEST_F(LearnerTest, PretrainRejectsWrongWindowShape) {
  auto bad = data().train;
  bad["walk"].push_back(make_window(std::vector<SensorFrame>(60, SensorFrame{0, std::vector<double>(10, 0.0)})));
  EXPECT_EQ(code_of([&] { pretrain(bad, fixture::quick_config()); }), ErrorCode::kInvalidArgument);
}

TEST_F(LearnerTest, SupportSetAccuracyIsHigh) {
  const Recognizer rec(std::make_shared<const EdgeBundle>(bundle()));
  const auto r = evaluate_features(rec, bundle().support.classes());
  EXPECT_GE(r.overall_accuracy, 0.95);
}

TEST_F(LearnerTest, EvaluationConfusionRowsSumToCounts) {
  const auto windows = fixture::labeled(data().test, bundle().registry());
  const auto r = evaluate(bundle(), windows);
  EXPECT_EQ(r.count, windows.size());
  std::size_t diag = 0;
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    std::size_t row = 0;
    for (auto v : r.confusion[i]) row += v;
    EXPECT_EQ(row, r.counts[i]);
    EXPECT_EQ(r.counts[i], 100u);
    diag += r.confusion[i][i];
  }
  EXPECT_DOUBLE_EQ(r.overall_accuracy, static_cast<double>(diag) / static_cast<double>(r.count));
  const json j = r;
  EXPECT_EQ(j.at("per_class").size(), 5u);
}

TEST_F(LearnerTest, EvaluationRejectsUnknownOrMissingLabels) {
  auto w = data().test.begin()->second.front();
  w.label = ActivityId{99};
  EXPECT_EQ(code_of([&] { evaluate(bundle(), std::vector<Window>{w}); }), ErrorCode::kNotFound);
  w.label.reset();
  EXPECT_EQ(code_of([&] { evaluate(bundle(), std::vector<Window>{w}); }), ErrorCode::kInvalidArgument);
}

TEST_F(LearnerTest, LearnClassRegistersAndReports) {
  const auto res = learn_class(bundle(), data().new_name, data().new_train, fixture::quick_config());
  const auto& b = res.bundle;
  EXPECT_EQ(b.model_version, 2u);
  EXPECT_EQ(b.registry().size(), 6u);
  const auto id = b.registry().find(data().new_name);
  ASSERT_TRUE(id);
  EXPECT_EQ(b.registry().info(*id).origin, Origin::kUserAdded);
  EXPECT_EQ(b.registry().info(*id).created_at, 1u);
  EXPECT_EQ(b.support.exemplars(*id).size(), 40u);
  for (const auto& [old_id, ex] : bundle().support.classes()) EXPECT_EQ(b.support.exemplars(old_id), ex);
  EXPECT_EQ(b.normalizer.mean, bundle().normalizer.mean);

  const auto& r = res.report;
  EXPECT_EQ(r.new_class, *id);
  EXPECT_EQ(r.old_classes.size(), 5u);
  ASSERT_EQ(r.before.size(), r.after.size());
  double max_drop = -1.0;
  for (std::size_t i = 0; i < r.drops.size(); ++i) {
    EXPECT_NEAR(r.drops[i], r.before[i] - r.after[i], 1e-12);
    max_drop = std::max(max_drop, r.drops[i]);
  }
  EXPECT_DOUBLE_EQ(r.max_drop, max_drop);
  EXPECT_EQ(r.model_version_before, 1u);
  EXPECT_EQ(r.model_version_after, 2u);
}

TEST_F(LearnerTest, LearnClassIsDeterministic) {
  const auto a = learn_class(bundle(), data().new_name, data().new_train, fixture::quick_config());
  const auto b = learn_class(bundle(), data().new_name, data().new_train, fixture::quick_config());
  EXPECT_EQ(encode_bundle(a.bundle), encode_bundle(b.bundle));
}

TEST_F(LearnerTest, LearnClassErrors) {
  const auto cfg = fixture::quick_config();
  EXPECT_EQ(code_of([&] { learn_class(bundle(), "Walk", data().new_train, cfg); }), ErrorCode::kConflict);
  const std::vector<Window> few(data().new_train.begin(), data().new_train.begin() + 29);
  EXPECT_EQ(code_of([&] { learn_class(bundle(), "wave", few, cfg); }), ErrorCode::kInvalidArgument);
  const std::vector<Window> enough(data().new_train.begin(), data().new_train.begin() + 30);
  EXPECT_NO_THROW(learn_class(bundle(), "wave", enough, cfg));
}

TEST_F(LearnerTest, CalibrateReplacesTargetExemplars) {
  const auto id = *bundle().registry().find("walk");
  const std::vector<Window> recs(data().test.at("walk").begin(), data().test.at("walk").begin() + 35);
  const auto res = calibrate_class(bundle(), id, recs, fixture::quick_config());
  EXPECT_EQ(res.bundle.model_version, 2u);
  EXPECT_EQ(res.bundle.registry().size(), 5u);
  EXPECT_EQ(res.bundle.support.exemplars(id), featurize(recs, 5, bundle().normalizer));
  for (const auto& [other, ex] : bundle().support.classes()) {
    if (other != id) EXPECT_EQ(res.bundle.support.exemplars(other), ex);
  }
  EXPECT_EQ(res.report.old_classes.size(), 4u);
  EXPECT_EQ(res.report.new_class, id);
}

TEST_F(LearnerTest, SelfCalibrationKeepsOldAccuracies) {
  const auto id = *bundle().registry().find("run");
  const auto res = calibrate_class(bundle(), id, data().train.at("run"), fixture::quick_config());
  const auto windows = fixture::labeled(data().test, bundle().registry());
  const auto before = evaluate(bundle(), windows);
  const auto after = evaluate(res.bundle, windows);
  for (std::size_t i = 0; i < before.classes.size(); ++i) {
    EXPECT_NEAR(*after.per_class_accuracy[i], *before.per_class_accuracy[i], 0.05) << before.names[i];
  }
}

TEST_F(LearnerTest, CalibrateUnknownClass) {
  EXPECT_EQ(code_of([&] { calibrate_class(bundle(), ActivityId{42}, data().new_train, fixture::quick_config()); }),
            ErrorCode::kNotFound);
}

TEST_F(LearnerTest, FailedUpdateLeavesBundleUntouched) {
  const auto before = encode_bundle(bundle());
  const auto abort_at_two = [](const TrainProgress& p) {
    if (p.epoch == 2) throw Error(ErrorCode::kTraining, "induced failure");
  };
  EXPECT_EQ(code_of([&] { learn_class(bundle(), data().new_name, data().new_train, fixture::quick_config(), abort_at_two); }),
            ErrorCode::kTraining);
  EXPECT_EQ(encode_bundle(bundle()), before);

  auto cfg = fixture::quick_config();
  cfg.temperature = 1e-45;  // underflows to a denormal in f32, logits overflow
  EXPECT_EQ(code_of([&] { learn_class(bundle(), data().new_name, data().new_train, cfg); }), ErrorCode::kTraining);
  EXPECT_EQ(encode_bundle(bundle()), before);
}

TEST_F(LearnerTest, ProgressReportsEveryEpoch) {
  std::vector<TrainProgress> seen;
  learn_class(bundle(), data().new_name, data().new_train, fixture::quick_config(),
              [&](const TrainProgress& p) { seen.push_back(p); });
  ASSERT_EQ(seen.size(), 4u);
  for (std::size_t i = 0; i < seen.size(); ++i) {
    EXPECT_EQ(seen[i].phase, "add_class");
    EXPECT_EQ(seen[i].epoch, i + 1);
    EXPECT_EQ(seen[i].epochs, 4u);
    EXPECT_TRUE(std::isfinite(seen[i].loss));
  }
}

TEST_F(LearnerTest, BundleRoundTrip) {
  const auto path = temp_path("roundtrip.mgbd");
  const auto sizes = save_bundle(bundle(), path);
  EXPECT_EQ(fs::file_size(path), sizes.total);
  EXPECT_EQ(sizes.total, 4 + 2 + 4 * 8 + sizes.model + sizes.support + sizes.normalizer + sizes.metadata);
  const auto loaded = load_bundle(path);
  EXPECT_EQ(encode_bundle(loaded), encode_bundle(bundle()));
  EXPECT_EQ(loaded.config, bundle().config);
  EXPECT_EQ(loaded.model_version, 1u);
  EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
  fs::remove(path);
}

TEST_F(LearnerTest, BundleCorruptionIsDetected) {
  const auto bytes = encode_bundle(bundle());
  auto flipped = bytes;
  flipped[100] ^= 0x01;
  EXPECT_EQ(code_of([&] { decode_bundle(flipped); }), ErrorCode::kChecksum);
  const Bytes cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2));
  EXPECT_EQ(code_of([&] { decode_bundle(cut); }), ErrorCode::kTruncated);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(code_of([&] { decode_bundle(magic); }), ErrorCode::kFormat);
  EXPECT_EQ(code_of([] { load_bundle("/nonexistent/dir/x.mgbd"); }), ErrorCode::kIo);
}

TEST_F(LearnerTest, OverBudgetBundleIsRefused) {
  // 6 classes x 5000 exemplars x 80 floats = 9.6 MB of support payload.
  EdgeBundle big = bundle();
  big.config.capacity = 5000;
  big.support = SupportSet(5000, 80);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g;
  for (int c = 0; c < 6; ++c) {
    const auto id = big.support.registry().add("class" + std::to_string(c), Origin::kPretrained, 0);
    std::vector<Exemplar> ex(5000, Exemplar(80));
    for (auto& v : ex)
      for (auto& x : v) x = g(rng);
    big.support = big.support.updated(id, ex, UpdateMode::kReplace);
  }
  const auto path = temp_path("big.mgbd");
  try {
    save_bundle(big, path);
    ADD_FAILURE() << "expected budget error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kBudget);
    EXPECT_NE(std::string(e.what()).find("support"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(path));
  EXPECT_FALSE(fs::exists(path.string() + ".tmp"));
}

TEST(TrainConfigTest, JsonRoundTripAndPartialFiles) {
  TrainConfig c;
  c.distill_weight = 0.0;
  c.capacity = 17;
  c.hidden_dims = {8, 4};
  const json j = c;
  EXPECT_EQ(j.get<TrainConfig>(), c);
  const auto partial = json::parse(R"({"lambda": 0.5, "seed": 9})").get<TrainConfig>();
  EXPECT_EQ(partial.distill_weight, 0.5);
  EXPECT_EQ(partial.seed, 9u);
  EXPECT_EQ(partial.batch_size, 64u);
  EXPECT_EQ(partial.capacity, 200u);
}

TEST(TrainConfigTest, ValidationRejectsBadValues) {
  TrainConfig c;
  c.kernel = 4;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.lr = 0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.hop = 121;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

}  // namespace
}  // namespace magneto
