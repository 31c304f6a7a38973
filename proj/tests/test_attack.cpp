#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <mimic/attack.hpp>
#include <mimic/data.hpp>
#include <mimic/oracle.hpp>

using namespace mimic;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto d = fs::temp_directory_path() / ("mimic-attack-" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

NetworkSpec victim_spec() {
  NetworkSpec s;
  s.role = "victim";
  s.name = "flat-victim";
  s.class_count = 3;
  s.input_side = 16;
  s.input_channels = 3;
  s.layers = {};
  return s;
}

NetworkSpec student_spec() {
  auto s = victim_spec();
  s.role = "student";
  s.name = "flat-student";
  return s;
}

NetworkSpec generator_spec() {
  NetworkSpec s;
  s.role = "generator";
  s.name = "flat-generator";
  s.class_count = 3;
  s.input_side = 16;
  s.input_channels = 3;
  s.latent_dim = 8;
  s.layers = {LayerSpec{"dense", {{"units", 16 * 16 * 3}}},
              LayerSpec{"reshape", {{"h", 16}, {"w", 16}, {"c", 3}}},
              LayerSpec{"sigmoid", {}}};
  return s;
}

// Q=10240 with the default block shape: one outer iteration costs
// 1*(1+1)*256 + 5*256 = 1792 image-queries, so five blocks fit.
AttackConfig small_config(std::uint64_t seed = 7) {
  AttackConfig c;
  c.query_budget = 10'240;
  c.batch_size = 256;
  c.latent_dim = 8;
  c.estimator_directions = 1;
  c.n_generator = 1;
  c.n_student = 5;
  c.seed = seed;
  c.checkpoint_every = 1000;
  c.eval_every = 1000;
  return c;
}

// Oracle that drops the connection on its nth query call.
class FlakyOracle : public Oracle {
 public:
  FlakyOracle(Detector<float>& victim, long long budget, int fail_at_call)
      : inner_(victim, budget), fail_at_(fail_at_call) {}
  std::vector<Detection> query(const Tensor<float>& batch) override {
    if (++calls_ == fail_at_) throw TransportError("connection reset mid-run");
    return inner_.query(batch);
  }
  long long remaining() const override { return inner_.remaining(); }
  OracleInfo info() const override { return inner_.info(); }
  long long consumed() const { return inner_.consumed(); }

 private:
  InProcessOracle inner_;
  int fail_at_;
  int calls_ = 0;
};

}  // namespace

TEST(LearningRate, StaircaseHandValuesAndGuards) {
  EXPECT_DOUBLE_EQ(lr_at(0, 0.02, 0.96), 0.02);
  EXPECT_DOUBLE_EQ(lr_at(999, 0.02, 0.96), 0.02);
  EXPECT_DOUBLE_EQ(lr_at(1000, 0.02, 0.96), 0.0192);
  EXPECT_DOUBLE_EQ(lr_at(1999, 0.02, 0.96), 0.0192);
  EXPECT_DOUBLE_EQ(lr_at(2500, 0.01, 0.8), 0.0064);  // two decays
  EXPECT_DOUBLE_EQ(lr_at(7, 0.004, 0.5, 2), 0.004 * 0.125);
  EXPECT_THROW(lr_at(-1, 0.01, 0.9), std::invalid_argument);
}

TEST(AttackConfigRules, ValidateCatchesEachKnob) {
  EXPECT_NO_THROW(AttackConfig{}.validate());
  EXPECT_EQ(AttackConfig{}.outer_cost(), 1792);

  auto broken = [](auto&& tweak) {
    AttackConfig c;
    tweak(c);
    return c;
  };
  EXPECT_THROW(broken([](auto& c) { c.query_budget = -1; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.batch_size = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.n_generator = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.n_student = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.latent_dim = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.lr_student = 0.1; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.lr_student = 0.0001; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.lr_generator = 0.0005; c.lr_student = 0.001; }).validate(),
               std::invalid_argument);  // eta_G must exceed eta_S
  EXPECT_THROW(broken([](auto& c) { c.lr_generator = c.lr_student; }).validate(),
               std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.decay_student = 0.0; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.decay_generator = 1.5; }).validate(),
               std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.decay_every = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.checkpoint_every = 0; }).validate(),
               std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.eval_every = 0; }).validate(), std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.cls_loss_mode = "argmax"; }).validate(),
               std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.latent_dist = "uniform"; }).validate(),
               std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.estimator_directions = 0; }).validate(),
               std::invalid_argument);
  EXPECT_THROW(broken([](auto& c) { c.estimator_epsilon = -1; }).validate(),
               std::invalid_argument);
}

TEST(AttackConfigRules, JsonRoundTripDefaultsAndUnknownField) {
  AttackConfig c = small_config(42);
  c.cls_loss_mode = "logit_l1";
  c.latent_dist = "laplacian";
  c.estimator_epsilon = 0.5;
  nlohmann::json j = c;
  auto back = j.get<AttackConfig>();
  EXPECT_EQ(back.query_budget, c.query_budget);
  EXPECT_EQ(back.batch_size, c.batch_size);
  EXPECT_EQ(back.latent_dim, c.latent_dim);
  EXPECT_EQ(back.latent_dist, c.latent_dist);
  EXPECT_EQ(back.cls_loss_mode, c.cls_loss_mode);
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_DOUBLE_EQ(back.estimator_epsilon, 0.5);
  EXPECT_EQ(back.outer_cost(), c.outer_cost());

  auto defaults = nlohmann::json::object().get<AttackConfig>();
  EXPECT_EQ(defaults.query_budget, 1'000'000);
  EXPECT_EQ(defaults.n_student, 5);

  try {
    nlohmann::json::parse(R"({"query_budjet": 10})").get<AttackConfig>();
    FAIL() << "unknown field accepted";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("query_budjet"), std::string::npos);
  }
}

TEST(AttackRun, WorkedBudgetExample) {
  auto victim = build_detector<float>(victim_spec(), 100);
  InProcessOracle oracle(victim, 10'240);
  Attacker attacker(small_config(), student_spec(), generator_spec());
  EXPECT_EQ(attacker.outer_cost(), 1792);

  auto res = attacker.run(oracle);
  EXPECT_EQ(res.status, AttackStatus::Completed);
  EXPECT_EQ(res.outer_iterations, 5);   // floor(10240 / 1792)
  EXPECT_EQ(res.consumed, 8'960);       // 5 * 1792
  EXPECT_EQ(oracle.remaining(), 1'280);  // left on the table, below one block
  EXPECT_EQ(attacker.consumed(), 8'960);

  const auto& recs = attacker.history().records;
  ASSERT_EQ(recs.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(recs[i].iteration, i + 1);
    EXPECT_EQ(recs[i].consumed, 1792LL * (i + 1));
    EXPECT_TRUE(std::isfinite(recs[i].generator_loss));
    EXPECT_TRUE(std::isfinite(recs[i].student_loss));
    EXPECT_GT(recs[i].student_loss, 0.0);
  }
}

TEST(AttackRun, AlternationOrderIsGeneratorThenStudents) {
  auto victim = build_detector<float>(victim_spec(), 101);
  InProcessOracle oracle(victim, 2 * 1792);
  Attacker attacker(small_config(), student_spec(), generator_spec());

  std::string steps;
  std::vector<long long> iterations;
  AttackCallbacks cb;
  cb.on_step = [&](char kind, int i) { steps += kind + std::to_string(i); };
  cb.on_iteration = [&](const OuterRecord& r) { iterations.push_back(r.iteration); };
  auto res = attacker.run(oracle, nullptr, "", cb);

  EXPECT_EQ(res.outer_iterations, 2);
  EXPECT_EQ(steps, "G0S0S1S2S3S4G0S0S1S2S3S4");
  EXPECT_EQ(iterations, (std::vector<long long>{1, 2}));
}

TEST(AttackRun, RefusesBudgetBelowOneIteration) {
  auto victim = build_detector<float>(victim_spec(), 102);
  InProcessOracle oracle(victim, 1791);  // one query short of a block
  Attacker attacker(small_config(), student_spec(), generator_spec());

  auto res = attacker.run(oracle);
  EXPECT_EQ(res.status, AttackStatus::BudgetTooSmall);
  EXPECT_EQ(res.outer_iterations, 0);
  EXPECT_EQ(res.consumed, 0);
  EXPECT_EQ(oracle.remaining(), 1791);  // nothing was charged
  EXPECT_NE(res.message.find("cannot cover"), std::string::npos);
  EXPECT_TRUE(attacker.history().records.empty());
}

TEST(AttackRun, VictimStaysFrozenWhileStudentLearns) {
  auto victim = build_detector<float>(victim_spec(), 103);
  const auto victim_sum = victim.checksum();
  InProcessOracle oracle(victim, 10'240);

  Attacker attacker(small_config(), student_spec(), generator_spec());
  const auto student0 = attacker.student().checksum();
  const auto generator0 = attacker.generator().checksum();
  attacker.run(oracle);

  EXPECT_EQ(victim.checksum(), victim_sum);
  EXPECT_NE(attacker.student().checksum(), student0);
  EXPECT_NE(attacker.generator().checksum(), generator0);
}

TEST(AttackRun, SameSeedReproducesTheRunExactly) {
  auto victim = build_detector<float>(victim_spec(), 104);

  auto run_once = [&](std::uint64_t seed) {
    InProcessOracle oracle(victim, 10'240);
    Attacker attacker(small_config(seed), student_spec(), generator_spec());
    attacker.run(oracle);
    return std::pair{attacker.student().checksum(), attacker.history()};
  };

  auto [sum_a, hist_a] = run_once(7);
  auto [sum_b, hist_b] = run_once(7);
  EXPECT_EQ(sum_a, sum_b);
  ASSERT_EQ(hist_a.records.size(), hist_b.records.size());
  for (std::size_t i = 0; i < hist_a.records.size(); ++i) {
    EXPECT_EQ(hist_a.records[i].generator_loss, hist_b.records[i].generator_loss);
    EXPECT_EQ(hist_a.records[i].student_loss, hist_b.records[i].student_loss);
  }

  auto [sum_c, hist_c] = run_once(8);
  EXPECT_NE(sum_a, sum_c);
  bool any_diff = false;
  for (std::size_t i = 0; i < hist_c.records.size(); ++i)
    any_diff = any_diff || hist_a.records[i].student_loss != hist_c.records[i].student_loss;
  EXPECT_TRUE(any_diff);
}

TEST(AttackRun, RecordedRatesFollowTheStaircase) {
  auto victim = build_detector<float>(victim_spec(), 105);
  auto cfg = small_config();
  cfg.decay_every = 5;  // student takes 5 optimizer steps per outer iteration
  InProcessOracle oracle(victim, 10'240);
  Attacker attacker(cfg, student_spec(), generator_spec());
  attacker.run(oracle);

  const auto& recs = attacker.history().records;
  ASSERT_EQ(recs.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    EXPECT_DOUBLE_EQ(recs[i].lr_student, lr_at(5LL * (i + 1), cfg.lr_student,
                                               cfg.decay_student, cfg.decay_every));
    EXPECT_DOUBLE_EQ(recs[i].lr_generator, lr_at(i + 1, cfg.lr_generator,
                                                 cfg.decay_generator, cfg.decay_every));
  }
  // the student rate actually stepped down; the generator's first decay only
  // lands on the very last record
  EXPECT_LT(recs[4].lr_student, recs[0].lr_student);
  EXPECT_DOUBLE_EQ(recs[3].lr_generator, cfg.lr_generator);
  EXPECT_DOUBLE_EQ(recs[4].lr_generator, cfg.lr_generator * cfg.decay_generator);
}

TEST(AttackRun, SplitBudgetResumesBitExactly) {
  auto victim = build_detector<float>(victim_spec(), 106);
  const auto dir_full = temp_dir("full");
  const auto dir_half = temp_dir("half");

  Attacker full(small_config(9), student_spec(), generator_spec());
  InProcessOracle oracle_full(victim, 8'960);
  full.run(oracle_full, nullptr, dir_full.string());
  ASSERT_EQ(full.history().records.size(), 5u);

  Attacker first(small_config(9), student_spec(), generator_spec());
  InProcessOracle oracle_a(victim, 3'584);  // exactly two blocks
  auto res_a = first.run(oracle_a, nullptr, dir_half.string());
  EXPECT_EQ(res_a.status, AttackStatus::Completed);
  EXPECT_EQ(res_a.outer_iterations, 2);

  auto second = Attacker::resume_from(dir_half.string());
  EXPECT_EQ(second.consumed(), 3'584);
  InProcessOracle oracle_b(victim, 8'960 - 3'584);
  auto res_b = second.run(oracle_b, nullptr, dir_half.string());
  EXPECT_EQ(res_b.status, AttackStatus::Completed);
  EXPECT_EQ(res_b.outer_iterations, 5);
  EXPECT_EQ(res_b.consumed, 8'960);

  EXPECT_EQ(second.student().checksum(), full.student().checksum());
  EXPECT_EQ(second.generator().checksum(), full.generator().checksum());
  const auto& ra = full.history().records;
  const auto& rb = second.history().records;
  ASSERT_EQ(rb.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(ra[i].iteration, rb[i].iteration);
    EXPECT_EQ(ra[i].consumed, rb[i].consumed);
    EXPECT_EQ(ra[i].generator_loss, rb[i].generator_loss);
    EXPECT_EQ(ra[i].student_loss, rb[i].student_loss);
  }
}

TEST(AttackRun, TransportFailureCheckpointsForResume) {
  auto victim = build_detector<float>(victim_spec(), 107);
  const auto dir = temp_dir("halt");

  // 7 query calls per outer iteration (2 for the gradient estimate, 5 for
  // student steps); call 17 dies inside iteration 3 after its generator step.
  FlakyOracle oracle(victim, 8'960, 17);
  Attacker attacker(small_config(10), student_spec(), generator_spec());
  auto res = attacker.run(oracle, nullptr, dir.string());

  EXPECT_EQ(res.status, AttackStatus::TransportHalted);
  EXPECT_EQ(res.outer_iterations, 2);
  EXPECT_EQ(res.consumed, 2 * 1792 + 512);  // the partial block's estimate was paid for
  EXPECT_NE(res.message.find("resume"), std::string::npos);
  ASSERT_TRUE(fs::exists(dir / "resume.json"));
  ASSERT_TRUE(fs::exists(dir / "student.ckpt.json"));
  ASSERT_TRUE(fs::exists(dir / "generator.ckpt.json"));

  auto resumed = Attacker::resume_from(dir.string());
  EXPECT_EQ(resumed.consumed(), res.consumed);
  InProcessOracle fresh(victim, 8'960 - res.consumed);
  auto res2 = resumed.run(fresh);
  EXPECT_EQ(res2.status, AttackStatus::Completed);
  EXPECT_EQ(res2.outer_iterations, 4);  // 2 done + floor(4864 / 1792)
  EXPECT_EQ(res2.consumed, res.consumed + 2 * 1792);
}

TEST(AttackRun, ResumeRejectsMissingOrForeignState) {
  const auto dir = temp_dir("noresume");
  EXPECT_THROW(Attacker::resume_from(dir.string()), std::runtime_error);

  std::ofstream(dir / "resume.json") << R"({"format": "bogus-v9"})" << "\n";
  try {
    Attacker::resume_from(dir.string());
    FAIL() << "foreign format accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("unrecognized resume format"), std::string::npos);
  }
}

TEST(AttackRun, LatentDimMismatchIsRejected) {
  auto cfg = small_config();
  cfg.latent_dim = 16;  // generator spec says 8
  try {
    Attacker attacker(cfg, student_spec(), generator_spec());
    FAIL() << "mismatch accepted";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("latent_dim"), std::string::npos);
  }
}

TEST(AttackRun, EvalSnapshotsFollowTheCadence) {
  const auto data_dir = temp_dir("evalset");
  DatasetSpec dspec;
  dspec.class_count = 3;
  dspec.image_side = 16;
  dspec.sample_count = 12;
  dspec.seed = 21;
  generate_shapes_dataset(dspec, data_dir.string());
  auto eval_set = load_dataset(data_dir.string());

  auto victim = build_detector<float>(victim_spec(), 108);
  InProcessOracle oracle(victim, 10'240);
  auto cfg = small_config();
  cfg.eval_every = 2;
  Attacker attacker(cfg, student_spec(), generator_spec());
  attacker.run(oracle, &eval_set);

  const auto& recs = attacker.history().records;
  ASSERT_EQ(recs.size(), 5u);
  EXPECT_TRUE(recs[0].eval.has_value());   // always snapshot the first block
  EXPECT_TRUE(recs[1].eval.has_value());   // 2 % 2
  EXPECT_FALSE(recs[2].eval.has_value());
  EXPECT_TRUE(recs[3].eval.has_value());   // 4 % 2
  EXPECT_TRUE(recs[4].eval.has_value());   // forced on the final record
  for (const auto& r : recs) {
    if (!r.eval) continue;
    EXPECT_GE(r.eval->accuracy, 0.0);
    EXPECT_LE(r.eval->accuracy, 1.0);
    EXPECT_GE(r.eval->mean_iou, 0.0);
    EXPECT_LE(r.eval->mean_iou, 1.0);
  }
}

TEST(RunHistoryFiles, JsonlRoundTripAndMissingFile) {
  const auto dir = temp_dir("history");
  RunHistory h;
  for (int i = 1; i <= 3; ++i) {
    OuterRecord r;
    r.iteration = i;
    r.consumed = 1792LL * i;
    r.generator_loss = 0.125 * i;
    r.student_loss = 1.0 / i;
    r.lr_student = 0.001;
    r.lr_generator = 0.004;
    if (i == 2) r.eval = EvalSnapshot{0.5, 0.25};
    h.records.push_back(r);
  }
  const auto path = (dir / "history.jsonl").string();
  h.save_jsonl(path);

  auto back = RunHistory::load_jsonl(path);
  ASSERT_EQ(back.records.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(back.records[i].iteration, h.records[i].iteration);
    EXPECT_EQ(back.records[i].consumed, h.records[i].consumed);
    EXPECT_EQ(back.records[i].generator_loss, h.records[i].generator_loss);
    EXPECT_EQ(back.records[i].student_loss, h.records[i].student_loss);
    EXPECT_EQ(back.records[i].eval.has_value(), h.records[i].eval.has_value());
  }
  EXPECT_DOUBLE_EQ(back.records[1].eval->accuracy, 0.5);
  EXPECT_DOUBLE_EQ(back.records[1].eval->mean_iou, 0.25);

  EXPECT_THROW(RunHistory::load_jsonl((dir / "absent.jsonl").string()), std::runtime_error);
}
