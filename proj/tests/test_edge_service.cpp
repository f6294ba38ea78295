#include <gtest/gtest.h>

#include <thread>

#include "fixture.hpp"
#include "magneto/edge_service.hpp"

namespace magneto::service {
namespace {

using namespace std::chrono_literals;

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    auto data = fixture::make({12.5, 5.5, 30.0, 0.15});
    bundle_ = new EdgeBundle(pretrain(data.train, fixture::quick_config()));
  }
  static void TearDownTestSuite() { delete bundle_; }

  static const EdgeBundle& bundle() { return *bundle_; }

  static EngineOptions options(std::size_t epochs = 4) {
    EngineOptions o;
    o.train = fixture::quick_config();
    o.train.incremental_epochs = epochs;
    return o;
  }

  // Frames of one synthetic activity, timestamps starting at `t0_us`.
  static std::vector<SensorFrame> frames(const std::string& cls, double seconds, std::int64_t t0_us = 0) {
    for (auto spec : synthetic::demo_classes()) {
      if (spec.class_name != cls) continue;
      spec.duration_s = seconds;
      auto out = synthesize_trace(spec).frames;
      for (auto& f : out) f.timestamp_us += t0_us;
      return out;
    }
    ADD_FAILURE() << "no class " << cls;
    return {};
  }

 private:
  static inline EdgeBundle* bundle_ = nullptr;
};

// -- engine ------------------------------------------------------------------

TEST_F(ServiceTest, OneWindowPerHundredTwentyFrames) {
  EdgeEngine engine(bundle(), options());
  const auto f = frames("walk", 1.5);
  const std::vector<SensorFrame> first(f.begin(), f.begin() + 60), second(f.begin() + 60, f.begin() + 120);
  auto r = engine.ingest(first);
  EXPECT_EQ(r.windows_emitted, 0u);
  EXPECT_FALSE(r.latest_prediction);
  r = engine.ingest(second);
  EXPECT_EQ(r.windows_emitted, 1u);
  ASSERT_TRUE(r.latest_prediction);
  EXPECT_EQ(r.latest_prediction->model_version, 1u);
  EXPECT_EQ(r.latest_prediction->t, f[119].timestamp_us + 1);
  EXPECT_EQ(engine.predictions(10).size(), 1u);
}

TEST_F(ServiceTest, RejectedBatchConsumesNothing) {
  EdgeEngine engine(bundle(), options());
  auto f = frames("still", 1.0);
  auto bad = f;
  bad[100].channels.pop_back();
  EXPECT_THROW(engine.ingest(bad), Error);
  bad = f;
  bad[100].timestamp_us = 0;
  EXPECT_THROW(engine.ingest(bad), Error);
  EXPECT_EQ(engine.ingest(f).windows_emitted, 1u);
}

TEST_F(ServiceTest, PredictionLogIsBoundedAndNewestFirst) {
  auto o = options();
  o.log_capacity = 4;
  EdgeEngine engine(bundle(), o);
  engine.ingest(frames("run", 7.0));  // 840 frames -> 7 windows
  const auto all = engine.predictions(100);
  ASSERT_EQ(all.size(), 4u);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_GT(all[i - 1].t, all[i].t);
  EXPECT_EQ(engine.predictions(2).size(), 2u);
  EXPECT_EQ(engine.latency().count, 7u);
}

TEST_F(ServiceTest, UncertainFlagFollowsMargin) {
  EdgeEngine engine(bundle(), options());
  engine.ingest(frames("walk", 20.0));
  for (const auto& p : engine.predictions(256)) {
    EXPECT_EQ(p.uncertain, p.margin < bundle().config.margin_threshold);
  }
}

TEST_F(ServiceTest, RecordingLifecycle) {
  EdgeEngine engine(bundle(), options());
  EXPECT_THROW(engine.stop_recording("gesture_hi"), Error);
  engine.start_recording();
  try {
    engine.start_recording();
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConflict);
  }
  engine.ingest(frames("gesture_hi", 30.0));  // 3600 frames
  EXPECT_EQ(engine.recording_status().at("frames"), 3600);
  try {
    engine.stop_recording("");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvalidArgument);
  }
  EXPECT_EQ(engine.stop_recording("gesture_hi"), 59u);
  EXPECT_EQ(engine.recording_status().at("pending").at("gesture_hi"), 59);
  engine.discard("gesture_hi");
  EXPECT_TRUE(engine.recording_status().at("pending").empty());
}

TEST_F(ServiceTest, TrainingSwapsModelAndKeepsReport) {
  EdgeEngine engine(bundle(), options());
  EXPECT_FALSE(engine.forgetting_report());
  engine.start_recording();
  engine.ingest(frames("gesture_hi", 30.0));
  engine.stop_recording("gesture_hi");
  const auto id = engine.start_training(TrainMode::kAddClass, "gesture_hi");
  EXPECT_EQ(id, 1u);
  const auto done = engine.wait_for_job();
  EXPECT_EQ(done.state, JobState::kIdle) << done.reason;
  EXPECT_EQ(engine.bundle()->model_version, 2u);
  EXPECT_TRUE(engine.bundle()->registry().find("gesture_hi"));
  EXPECT_TRUE(engine.recording_status().at("pending").empty());
  const auto report = engine.forgetting_report();
  ASSERT_TRUE(report);
  EXPECT_EQ(report->before.size(), report->after.size());
  EXPECT_EQ(report->before.size(), 5u);
  EXPECT_LT(engine.bundle_bytes(), kBundleBudgetBytes);
  EXPECT_EQ(engine.bundle_bytes(), encode_bundle(*engine.bundle()).size());

  const auto r = engine.ingest(frames("gesture_hi", 1.0, 100'000'000));
  ASSERT_TRUE(r.latest_prediction);
  EXPECT_EQ(r.latest_prediction->model_version, 2u);
}

TEST_F(ServiceTest, TrainingPreconditions) {
  EdgeEngine engine(bundle(), options());
  auto code = [&](TrainMode m, const std::string& label) {
    try {
      engine.start_training(m, label);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kIo;
  };
  EXPECT_EQ(code(TrainMode::kAddClass, "gesture_hi"), ErrorCode::kNotFound);
  EXPECT_EQ(code(TrainMode::kCalibrate, "gesture_hi"), ErrorCode::kNotFound);
  engine.start_recording();
  engine.ingest(frames("walk", 30.0));
  engine.stop_recording("walk");
  EXPECT_EQ(code(TrainMode::kAddClass, "walk"), ErrorCode::kConflict);
}

TEST_F(ServiceTest, InferenceContinuesDuringTraining) {
  EdgeEngine engine(bundle(), options(100000));
  engine.start_recording();
  engine.ingest(frames("gesture_hi", 30.0));
  engine.stop_recording("gesture_hi");
  engine.start_training(TrainMode::kAddClass, "gesture_hi");
  while (engine.job().epoch == 0) std::this_thread::sleep_for(5ms);
  const auto job = engine.job();
  EXPECT_EQ(job.state, JobState::kRunning);
  EXPECT_EQ(job.phase, "add_class");
  EXPECT_THROW(engine.start_training(TrainMode::kAddClass, "gesture_hi"), Error);
  const auto r = engine.ingest(frames("walk", 2.0, 100'000'000));
  ASSERT_TRUE(r.latest_prediction);
  EXPECT_EQ(r.latest_prediction->model_version, 1u);
  // The destructor cancels the job.
}

TEST_F(ServiceTest, FailedJobKeepsOldBundle) {
  auto o = options();
  o.train.temperature = 1e-45;
  EdgeEngine engine(bundle(), o);
  const auto before = encode_bundle(*engine.bundle());
  engine.start_recording();
  engine.ingest(frames("gesture_hi", 30.0));
  engine.stop_recording("gesture_hi");
  engine.start_training(TrainMode::kAddClass, "gesture_hi");
  const auto done = engine.wait_for_job();
  EXPECT_EQ(done.state, JobState::kFailed);
  EXPECT_NE(done.reason.find("non-finite"), std::string::npos);
  EXPECT_EQ(encode_bundle(*engine.bundle()), before);
  EXPECT_EQ(engine.status().at("job").at("state"), "failed");
  EXPECT_FALSE(engine.forgetting_report());
}

// -- HTTP --------------------------------------------------------------------

class HttpTest : public ServiceTest {
 protected:
  void SetUp() override {
    engine_ = std::make_unique<EdgeEngine>(bundle(), options());
    server_ = std::make_unique<EdgeServer>(*engine_, ServerOptions{"127.0.0.1", 0});
    server_->start_background();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", server_->port());
  }
  void TearDown() override {
    server_->stop();
    server_.reset();
    engine_.reset();
  }

  json post(const std::string& path, const json& body, int expect) {
    auto res = client_->Post(path, body.dump(), "application/json");
    EXPECT_TRUE(res);
    if (!res) return {};
    EXPECT_EQ(res->status, expect) << path << " " << res->body;
    return json::parse(res->body);
  }
  json get(const std::string& path, int expect) {
    auto res = client_->Get(path);
    EXPECT_TRUE(res);
    if (!res) return {};
    EXPECT_EQ(res->status, expect) << path << " " << res->body;
    return json::parse(res->body);
  }

  std::unique_ptr<EdgeEngine> engine_;
  std::unique_ptr<EdgeServer> server_;
  std::unique_ptr<httplib::Client> client_;
};

TEST_F(HttpTest, FramesEndpoint) {
  const auto f = frames("walk", 1.5);
  auto r = post("/api/frames", frames_to_json(std::span(f).first(60)), 200);
  EXPECT_EQ(r.at("windows_emitted"), 0);
  EXPECT_FALSE(r.contains("latest_prediction"));
  r = post("/api/frames", frames_to_json(std::span(f).subspan(60, 60)), 200);
  EXPECT_EQ(r.at("windows_emitted"), 1);
  const auto& p = r.at("latest_prediction");
  for (const char* key : {"t", "label_name", "score", "margin", "uncertain"}) EXPECT_TRUE(p.contains(key)) << key;

  auto wrong = frames_to_json(std::span(f).subspan(120, 1));
  wrong["frames"][0]["channels"].erase(0);
  r = post("/api/frames", wrong, 409);
  EXPECT_EQ(r.at("code"), "conflict");
  EXPECT_NE(r.at("message").get<std::string>().find("expected 10, got 9"), std::string::npos);

  auto res = client_->Post("/api/frames", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_TRUE(json::parse(res->body).contains("message"));
  r = post("/api/frames", json{{"frames", {{{"timestamp_us", "x"}}}}}, 400);
  EXPECT_EQ(r.at("code"), "invalid_argument");
}

TEST_F(HttpTest, PredictionsEndpoint) {
  EXPECT_EQ(get("/api/predictions", 200), json::array());
  post("/api/frames", frames_to_json(frames("still", 3.0)), 200);
  EXPECT_EQ(get("/api/predictions", 200).size(), 3u);
  const auto one = get("/api/predictions?limit=1", 200);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0].at("uncertain"), one[0].at("margin").get<double>() < 0.05);
  get("/api/predictions?limit=-1", 400);
}

TEST_F(HttpTest, RecordAndTrainLifecycle) {
  EXPECT_EQ(get("/api/status", 200).at("job").at("state"), "idle");
  const auto err = get("/api/report/forgetting", 404);
  EXPECT_EQ(err.at("code"), "not_found");
  EXPECT_TRUE(err.contains("message"));

  post("/api/recordings", {{"action", "start"}}, 200);
  post("/api/recordings", {{"action", "start"}}, 409);
  post("/api/frames", frames_to_json(frames("gesture_hi", 30.0)), 200);
  post("/api/recordings", {{"action", "stop"}}, 400);
  const auto stopped = post("/api/recordings", {{"action", "stop"}, {"label", "gesture_hi"}}, 200);
  EXPECT_EQ(stopped.at("windows"), 59);
  EXPECT_EQ(stopped.at("active"), false);

  post("/api/train", {{"mode", "calibrate"}, {"label", "nope"}}, 404);
  post("/api/train", {{"mode", "teleport"}, {"label", "gesture_hi"}}, 400);
  const auto accepted = post("/api/train", {{"mode", "add_class"}, {"label", "gesture_hi"}}, 202);
  EXPECT_EQ(accepted.at("job_id"), 1);
  engine_->wait_for_job();

  const auto status = get("/api/status", 200);
  EXPECT_EQ(status.at("model_version"), 2);
  EXPECT_EQ(status.at("job").at("state"), "idle");
  EXPECT_EQ(status.at("activities").size(), 6u);
  EXPECT_LT(status.at("bundle_bytes").get<std::size_t>(), kBundleBudgetBytes);
  for (const char* key : {"uptime_s", "latency"}) EXPECT_TRUE(status.contains(key)) << key;

  const auto report = get("/api/report/forgetting", 200);
  const auto before = report.at("before").get<std::vector<double>>();
  const auto after = report.at("after").get<std::vector<double>>();
  const auto drops = report.at("drops").get<std::vector<double>>();
  ASSERT_EQ(before.size(), after.size());
  ASSERT_EQ(before.size(), drops.size());
  for (std::size_t i = 0; i < drops.size(); ++i) EXPECT_NEAR(drops[i], before[i] - after[i], 1e-9);
  post("/api/train", {{"mode", "add_class"}, {"label", "gesture_hi"}}, 409);
}

TEST_F(HttpTest, DiscardClearsPending) {
  post("/api/recordings", {{"action", "start"}}, 200);
  post("/api/frames", frames_to_json(frames("run", 10.0)), 200);
  post("/api/recordings", {{"action", "stop"}, {"label", "sprint"}}, 200);
  const auto r = post("/api/recordings", {{"action", "discard"}}, 200);
  EXPECT_TRUE(r.at("pending").empty());
  post("/api/train", {{"mode", "add_class"}, {"label", "sprint"}}, 404);
}

TEST_F(HttpTest, UnknownRouteAndDefaults) {
  const auto r = get("/api/nothing", 404);
  EXPECT_EQ(r.at("code"), "not_found");
  EXPECT_EQ(ServerOptions{}.host, "127.0.0.1");
  EXPECT_EQ(ServerOptions{}.port, 8787);
}

TEST_F(HttpTest, PortConflictIsReported) {
  EdgeServer second(*engine_, ServerOptions{"127.0.0.1", server_->port()});
  try {
    second.bind();
    ADD_FAILURE() << "expected bind failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
  }
}

}  // namespace
}  // namespace magneto::service
