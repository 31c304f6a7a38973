#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mimic/attack.hpp"
#include "mimic/data.hpp"
#include "mimic/eval.hpp"
#include "mimic/nn/specs.hpp"
#include "mimic/oracle.hpp"
#include "mimic/plots.hpp"
#include "mimic/train.hpp"

namespace mimic {

struct EvalOptions {
  double iou_threshold = 0.5;
  double test_fraction = 1.0 / 6;  // 600 samples -> 100 held out
  int overlay_count = 8;
  int scatter_count = 100;

  void validate() const {
    if (!(iou_threshold > 0 && iou_threshold <= 1))
      throw std::invalid_argument("EvalOptions: iou_threshold must be in (0,1]");
    if (!(test_fraction > 0 && test_fraction < 1))
      throw std::invalid_argument("EvalOptions: test_fraction must be in (0,1)");
    if (overlay_count < 0 || scatter_count < 1)
      throw std::invalid_argument("EvalOptions: counts out of range");
  }
};

inline void to_json(nlohmann::json& j, const EvalOptions& e) {
  j = {{"iou_threshold", e.iou_threshold},
       {"test_fraction", e.test_fraction},
       {"overlay_count", e.overlay_count},
       {"scatter_count", e.scatter_count}};
}
inline void from_json(const nlohmann::json& j, EvalOptions& e) {
  const EvalOptions d;
  e.iou_threshold = j.value("iou_threshold", d.iou_threshold);
  e.test_fraction = j.value("test_fraction", d.test_fraction);
  e.overlay_count = j.value("overlay_count", d.overlay_count);
  e.scatter_count = j.value("scatter_count", d.scatter_count);
}

/// Default root for run directories: $MIMIC_OUT_ROOT, else "runs".
inline std::string default_out_root() {
  if (const char* env = std::getenv("MIMIC_OUT_ROOT"); env && *env) return env;
  return "runs";
}

/// One config file drives the whole pipeline. The global seed deterministically
/// derives every stage seed (dataset, split, victim, attack), so two runs with
/// the same config produce identical reports with the in-process oracle.
struct ExperimentConfig {
  std::string name = "exp";
  std::string out_root;  // empty -> default_out_root()
  std::uint64_t seed = 0;
  DatasetSpec dataset;
  std::string victim = "victim-a";  // preset network names
  std::string student = "student-a";
  std::string generator = "generator-a";
  VictimTrainConfig victim_train;
  AttackConfig attack;
  EvalOptions eval;

  void validate() const {
    if (name.empty()) throw std::invalid_argument("ExperimentConfig: name must be nonempty");
    dataset.validate();
    victim_train.validate();
    attack.validate();
    eval.validate();
    preset_spec(victim);  // throws for unknown names
    preset_spec(student);
    preset_spec(generator);
  }

  /// Copy with all stage seeds derived from the global seed.
  ExperimentConfig resolved() const {
    ExperimentConfig c = *this;
    if (c.out_root.empty()) c.out_root = default_out_root();
    c.dataset.seed = derive_seed(seed, 0xd5u);
    c.victim_train.seed = derive_seed(seed, 0xd6u);
    c.attack.seed = derive_seed(seed, 0xd7u);
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"name", c.name},         {"out_root", c.out_root}, {"seed", c.seed},
       {"dataset", c.dataset},   {"victim", c.victim},     {"student", c.student},
       {"generator", c.generator}, {"victim_train", c.victim_train}, {"attack", c.attack},
       {"eval", c.eval}};
}
inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  const ExperimentConfig d;
  c.name = j.value("name", d.name);
  c.out_root = j.value("out_root", d.out_root);
  c.seed = j.value("seed", d.seed);
  if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
  c.victim = j.value("victim", d.victim);
  c.student = j.value("student", d.student);
  c.generator = j.value("generator", d.generator);
  if (j.contains("victim_train")) j.at("victim_train").get_to(c.victim_train);
  if (j.contains("attack")) j.at("attack").get_to(c.attack);
  if (j.contains("eval")) j.at("eval").get_to(c.eval);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return j.get<ExperimentConfig>();
}

/// root/name, or root/name-2, -3, ... when taken.
inline std::string unique_run_dir(const std::string& root, const std::string& name) {
  namespace fs = std::filesystem;
  fs::path base = fs::path(root) / name;
  if (!fs::exists(base)) return base.string();
  for (int i = 2; i < 1000; ++i) {
    fs::path p = fs::path(root) / (name + "-" + std::to_string(i));
    if (!fs::exists(p)) return p.string();
  }
  throw std::runtime_error("cannot find a free run directory under '" + root + "'");
}

struct ExperimentResult {
  std::string run_dir;
  EvalReport baseline;       // victim on the held-out split
  EvalReport attack_report;  // student on the held-out split
  ComparisonReport comparison;
  AttackResult attack;
};

/// Overlay renders, the accuracy-versus-queries curve, and the generated-vs-
/// real scatter, written under fig_dir.
inline void emit_figures(Detector<float>& victim, Detector<float>& student,
                         Generator<float>& generator, const RunHistory& history,
                         const Dataset& test_set, const EvalOptions& eval,
                         const std::string& fig_dir, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(fig_dir);
  const int n_overlay = std::min<int>(eval.overlay_count, test_set.size());
  if (n_overlay > 0) {
    std::vector<int> idx(n_overlay);
    for (int i = 0; i < n_overlay; ++i) idx[i] = i;
    Tensor<float> imgs = gather_items(test_set.images, idx);
    const auto vdets = victim.detect(imgs);
    const auto sdets = student.detect(imgs);
    std::vector<std::array<double, 4>> gt, vb, sb;
    for (int i = 0; i < n_overlay; ++i) {
      gt.push_back(test_set.boxes[i].as_array());
      vb.push_back(repair_box(vdets[i].box));
      sb.push_back(repair_box(sdets[i].box));
    }
    render_overlays(imgs, gt, vb, sb, (fs::path(fig_dir) / "overlays").string());
  }

  std::vector<CurvePoint> pts;
  for (const auto& r : history.records)
    if (r.eval) pts.push_back({static_cast<double>(r.consumed), r.eval->accuracy});
  if (!pts.empty())
    accuracy_curve(pts, (fs::path(fig_dir) / "accuracy_curve.png").string());

  const int n_scatter = std::min<int>(eval.scatter_count, test_set.size());
  if (n_scatter >= 1) {
    Rng rng(derive_seed(seed, 0xdbu));
    auto z = sample_latent<float>(n_scatter, generator.latent_dim(), LatentDist::Gaussian, rng);
    Tensor<float> gen = generator.forward(z, false);
    std::vector<int> idx(n_scatter);
    for (int i = 0; i < n_scatter; ++i) idx[i] = i;
    Tensor<float> real = gather_items(test_set.images, idx);
    latent_scatter(gen, real, (fs::path(fig_dir) / "scatter.png").string());
  }
}

/// The full pipeline: generate data, train the victim, run the extraction
/// attack through a budgeted in-process oracle, evaluate both models on the
/// held-out split, and emit the report plus figure files — all under one run
/// directory. With resume=true, finished stages found on disk are reused.
inline ExperimentResult run_all(
    const ExperimentConfig& raw, bool resume = false,
    const std::function<void(const std::string&)>& log = {}) {
  namespace fs = std::filesystem;
  raw.validate();
  const ExperimentConfig cfg = raw.resolved();
  const auto say = [&](const std::string& m) {
    if (log) log(m);
  };

  std::string run_dir;
  if (resume && fs::exists(fs::path(cfg.out_root) / cfg.name))
    run_dir = (fs::path(cfg.out_root) / cfg.name).string();
  else
    run_dir = unique_run_dir(cfg.out_root, cfg.name);
  fs::create_directories(run_dir);
  {
    std::ofstream out(fs::path(run_dir) / "config.json");
    out << nlohmann::json(cfg).dump(2) << '\n';
  }

  // --- data ---
  const std::string data_dir = (fs::path(run_dir) / "data").string();
  if (!(resume && fs::exists(fs::path(data_dir) / "dataset.json"))) {
    say("generating " + std::to_string(cfg.dataset.sample_count) + " images");
    generate_shapes_dataset(cfg.dataset, data_dir);
  } else {
    say("reusing dataset in " + data_dir);
  }
  Dataset full = load_dataset(data_dir);
  auto [train_set, test_set] =
      train_test_split(full, cfg.eval.test_fraction, derive_seed(cfg.seed, 0xd8u));
  say("split: " + std::to_string(train_set.size()) + " train / " +
      std::to_string(test_set.size()) + " test");

  // --- victim ---
  const std::string victim_ckpt = (fs::path(run_dir) / "victim.ckpt.json").string();
  NetworkSpec victim_spec = preset_spec(cfg.victim);
  victim_spec.class_count = cfg.dataset.class_count;
  victim_spec.input_side = cfg.dataset.image_side;
  Detector<float> victim = [&] {
    if (resume && fs::exists(victim_ckpt)) {
      say("reusing victim checkpoint");
      return load_detector<float>(victim_ckpt, "victim").net;
    }
    auto v = build_detector<float>(victim_spec, derive_seed(cfg.victim_train.seed, 0xd9u));
    TrainHistory h = train_victim(v, train_set, cfg.victim_train, [&](const EpochRecord& e) {
      say("victim epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.train_loss));
    });
    h.save_jsonl((fs::path(run_dir) / "victim_train.jsonl").string());
    save_detector(victim_ckpt, victim_spec, v);
    return v;
  }();
  EvalReport baseline = evaluate_detector(victim, test_set, cfg.eval.iou_threshold);
  say("victim baseline: accuracy " + std::to_string(baseline.accuracy) + ", mean IoU " +
      std::to_string(baseline.mean_iou));

  // --- attack ---
  NetworkSpec student_spec = preset_spec(cfg.student);
  student_spec.class_count = cfg.dataset.class_count;
  student_spec.input_side = cfg.dataset.image_side;
  NetworkSpec generator_spec = preset_spec(cfg.generator);
  generator_spec.input_side = cfg.dataset.image_side;
  AttackConfig atk_cfg = cfg.attack;
  atk_cfg.latent_dim = generator_spec.latent_dim;

  InProcessOracle oracle(victim, atk_cfg.query_budget);
  const std::string attack_dir = (fs::path(run_dir) / "attack").string();
  std::optional<Attacker> attacker;
  if (resume && fs::exists(fs::path(attack_dir) / "resume.json")) {
    say("resuming attack state");
    attacker.emplace(Attacker::resume_from(attack_dir));
    oracle.budget().restore_consumed(attacker->consumed());
  } else {
    attacker.emplace(atk_cfg, student_spec, generator_spec);
  }
  AttackCallbacks cb;
  cb.on_iteration = [&](const OuterRecord& r) {
    if (r.iteration % 25 == 0 || r.eval)
      say("attack iteration " + std::to_string(r.iteration) + ": consumed " +
          std::to_string(r.consumed) + ", student loss " + std::to_string(r.student_loss) +
          (r.eval ? ", eval accuracy " + std::to_string(r.eval->accuracy) : ""));
  };
  AttackResult atk_res = attacker->run(oracle, &test_set, attack_dir, cb);
  say("attack " + std::string(to_string(atk_res.status)) + " after " +
      std::to_string(atk_res.outer_iterations) + " iterations, " +
      std::to_string(atk_res.consumed) + " queries: " + atk_res.message);

  // --- evaluation & report ---
  EvalReport attacked =
      evaluate_detector(attacker->student(), test_set, cfg.eval.iou_threshold);
  ComparisonReport cmp = compare(baseline, attacked);
  {
    nlohmann::json j{{"comparison", cmp},
                     {"victim", cfg.victim},
                     {"student", cfg.student},
                     {"attack", {{"status", to_string(atk_res.status)},
                                 {"outer_iterations", atk_res.outer_iterations},
                                 {"consumed", atk_res.consumed},
                                 {"message", atk_res.message}}}};
    std::ofstream out(fs::path(run_dir) / "report.json");
    out << j.dump(2) << '\n';
  }
  const std::vector<ComparisonRow> rows{{cfg.victim, cfg.student, cmp}};
  {
    std::ofstream out(fs::path(run_dir) / "table.txt");
    out << comparison_table_text(rows);
  }
  {
    std::ofstream out(fs::path(run_dir) / "table.csv");
    out << comparison_table_csv(rows);
  }

  // --- figures ---
  const fs::path fig_dir = fs::path(run_dir) / "figures";
  fs::create_directories(fig_dir);
  emit_figures(victim, attacker->student(), attacker->generator(), attacker->history(),
               test_set, cfg.eval, fig_dir.string(), derive_seed(cfg.seed, 0xdau));

  say("report written to " + run_dir);
  return {run_dir, baseline, attacked, cmp, atk_res};
}

}  // namespace mimic
