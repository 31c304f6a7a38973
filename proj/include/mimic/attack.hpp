#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mimic/data.hpp"
#include "mimic/eval.hpp"
#include "mimic/grad_estim.hpp"
#include "mimic/losses.hpp"
#include "mimic/nn/adam.hpp"
#include "mimic/nn/specs.hpp"
#include "mimic/oracle.hpp"

namespace mimic {

/// Staircase exponential decay: initial * rate^floor(step / every).
inline double lr_at(long long step, double initial, double rate, long long every = 1000) {
  if (step < 0) throw std::invalid_argument("lr_at: step must be >= 0");
  return initial * std::pow(rate, static_cast<double>(step / every));
}

struct AttackConfig {
  long long query_budget = 1'000'000;  // Q, in image-queries
  int n_generator = 1;                 // generator steps per outer iteration
  int n_student = 5;                   // student steps per outer iteration
  int batch_size = 256;                // B
  int latent_dim = 256;                // d
  std::string latent_dist = "gaussian";
  double lr_student = 0.001;    // eta_S
  double lr_generator = 0.004;  // eta_G, must exceed eta_S
  double decay_student = 0.8;
  double decay_generator = 0.96;
  long long decay_every = 1000;  // optimizer steps per staircase level
  double weight_cls = 1.0;
  double weight_reg = 1.0;
  std::string cls_loss_mode = "probability";
  int estimator_directions = 1;     // m
  double estimator_epsilon = 1e-3;  // eps
  std::uint64_t seed = 0;
  long long checkpoint_every = 10;  // outer iterations
  long long eval_every = 25;        // outer iterations between eval snapshots

  long long outer_cost() const {
    return static_cast<long long>(n_generator) * (estimator_directions + 1) * batch_size +
           static_cast<long long>(n_student) * batch_size;
  }

  void validate() const {
    if (query_budget < 0) throw std::invalid_argument("AttackConfig: query_budget must be >= 0");
    if (n_generator < 1 || n_student < 1 || batch_size < 1 || latent_dim < 1)
      throw std::invalid_argument("AttackConfig: counts must be positive");
    const auto lr_ok = [](double v) { return v >= 0.0002 && v <= 0.02; };
    if (!lr_ok(lr_student) || !lr_ok(lr_generator))
      throw std::invalid_argument(
          "AttackConfig: learning rates must lie in [0.0002, 0.02], got lr_student=" +
          std::to_string(lr_student) + ", lr_generator=" + std::to_string(lr_generator));
    if (!(lr_generator > lr_student))
      throw std::invalid_argument("AttackConfig: lr_generator must exceed lr_student");
    if (!(decay_student > 0 && decay_student <= 1 && decay_generator > 0 &&
          decay_generator <= 1))
      throw std::invalid_argument("AttackConfig: decay rates must be in (0,1]");
    if (decay_every < 1) throw std::invalid_argument("AttackConfig: decay_every must be >= 1");
    if (checkpoint_every < 1 || eval_every < 1)
      throw std::invalid_argument("AttackConfig: cadences must be >= 1");
    parse_cls_loss_mode(cls_loss_mode);
    parse_latent_dist(latent_dist);
    EstimatorConfig{estimator_directions, estimator_epsilon}.validate();
  }
};

inline void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = {{"query_budget", c.query_budget},
       {"n_generator", c.n_generator},
       {"n_student", c.n_student},
       {"batch_size", c.batch_size},
       {"latent_dim", c.latent_dim},
       {"latent_dist", c.latent_dist},
       {"lr_student", c.lr_student},
       {"lr_generator", c.lr_generator},
       {"decay_student", c.decay_student},
       {"decay_generator", c.decay_generator},
       {"decay_every", c.decay_every},
       {"weight_cls", c.weight_cls},
       {"weight_reg", c.weight_reg},
       {"cls_loss_mode", c.cls_loss_mode},
       {"estimator_directions", c.estimator_directions},
       {"estimator_epsilon", c.estimator_epsilon},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"eval_every", c.eval_every}};
}

inline void from_json(const nlohmann::json& j, AttackConfig& c) {
  const AttackConfig d;
  for (const auto& [key, _] : j.items()) {
    static const char* known[] = {
        "query_budget",   "n_generator",     "n_student",     "batch_size",
        "latent_dim",     "latent_dist",     "lr_student",    "lr_generator",
        "decay_student",  "decay_generator", "decay_every",   "weight_cls",
        "weight_reg",     "cls_loss_mode",   "estimator_directions",
        "estimator_epsilon", "seed",         "checkpoint_every", "eval_every"};
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::invalid_argument("AttackConfig: unknown field '" + key + "'");
  }
  c.query_budget = j.value("query_budget", d.query_budget);
  c.n_generator = j.value("n_generator", d.n_generator);
  c.n_student = j.value("n_student", d.n_student);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.latent_dist = j.value("latent_dist", d.latent_dist);
  c.lr_student = j.value("lr_student", d.lr_student);
  c.lr_generator = j.value("lr_generator", d.lr_generator);
  c.decay_student = j.value("decay_student", d.decay_student);
  c.decay_generator = j.value("decay_generator", d.decay_generator);
  c.decay_every = j.value("decay_every", d.decay_every);
  c.weight_cls = j.value("weight_cls", d.weight_cls);
  c.weight_reg = j.value("weight_reg", d.weight_reg);
  c.cls_loss_mode = j.value("cls_loss_mode", d.cls_loss_mode);
  c.estimator_directions = j.value("estimator_directions", d.estimator_directions);
  c.estimator_epsilon = j.value("estimator_epsilon", d.estimator_epsilon);
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.eval_every = j.value("eval_every", d.eval_every);
}

struct EvalSnapshot {
  double accuracy = 0;
  double mean_iou = 0;
};

struct OuterRecord {
  long long iteration = 0;  // 1-based outer iteration index
  long long consumed = 0;   // cumulative image-queries after this iteration
  double generator_loss = 0;
  double student_loss = 0;
  double lr_student = 0;
  double lr_generator = 0;
  std::optional<EvalSnapshot> eval;
};

inline void to_json(nlohmann::json& j, const OuterRecord& r) {
  j = {{"iteration", r.iteration},
       {"consumed", r.consumed},
       {"generator_loss", r.generator_loss},
       {"student_loss", r.student_loss},
       {"lr_student", r.lr_student},
       {"lr_generator", r.lr_generator}};
  if (r.eval) j["eval"] = {{"accuracy", r.eval->accuracy}, {"mean_iou", r.eval->mean_iou}};
}
inline void from_json(const nlohmann::json& j, OuterRecord& r) {
  j.at("iteration").get_to(r.iteration);
  j.at("consumed").get_to(r.consumed);
  j.at("generator_loss").get_to(r.generator_loss);
  j.at("student_loss").get_to(r.student_loss);
  j.at("lr_student").get_to(r.lr_student);
  j.at("lr_generator").get_to(r.lr_generator);
  if (j.contains("eval"))
    r.eval = EvalSnapshot{j.at("eval").at("accuracy").get<double>(),
                          j.at("eval").at("mean_iou").get<double>()};
}

struct RunHistory {
  std::vector<OuterRecord> records;

  void save_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write history '" + path + "'");
    for (const auto& r : records) out << nlohmann::json(r).dump() << '\n';
  }

  static RunHistory load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open history '" + path + "'");
    RunHistory h;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      h.records.push_back(nlohmann::json::parse(line).get<OuterRecord>());
    }
    return h;
  }
};

enum class AttackStatus { Completed, BudgetTooSmall, TransportHalted };

inline const char* to_string(AttackStatus s) {
  switch (s) {
    case AttackStatus::Completed: return "completed";
    case AttackStatus::BudgetTooSmall: return "budget_too_small";
    default: return "transport_halt";
  }
}

struct AttackResult {
  AttackStatus status = AttackStatus::Completed;
  long long outer_iterations = 0;
  long long consumed = 0;  // attacker-side count of accepted image-queries
  std::string message;
};

struct AttackCallbacks {
  /// (kind, index within the outer iteration); kind is 'G' or 'S'.
  std::function<void(char, int)> on_step;
  std::function<void(const OuterRecord&)> on_iteration;
};

/// The alternating min-max extraction loop: per outer iteration, n_G
/// generator ascent steps (zeroth-order through the oracle) followed by n_S
/// student descent steps, while the remaining budget covers a full block.
class Attacker {
 public:
  Attacker(AttackConfig cfg, NetworkSpec student_spec, NetworkSpec generator_spec)
      : cfg_(std::move(cfg)),
        student_spec_(std::move(student_spec)),
        generator_spec_(std::move(generator_spec)),
        student_(build_detector<float>(student_spec_, derive_seed(cfg_.seed, 1))),
        generator_(build_generator<float>(generator_spec_, derive_seed(cfg_.seed, 2))),
        rng_(derive_seed(cfg_.seed, 3)),
        adam_student_(student_.params()),
        adam_generator_(generator_.params()) {
    cfg_.validate();
    if (generator_spec_.latent_dim != cfg_.latent_dim)
      throw std::invalid_argument("AttackConfig latent_dim " + std::to_string(cfg_.latent_dim) +
                                  " does not match generator spec latent_dim " +
                                  std::to_string(generator_spec_.latent_dim));
    mode_ = parse_cls_loss_mode(cfg_.cls_loss_mode);
    dist_ = parse_latent_dist(cfg_.latent_dist);
  }

  const AttackConfig& config() const { return cfg_; }
  Detector<float>& student() { return student_; }
  Generator<float>& generator() { return generator_; }
  const RunHistory& history() const { return history_; }
  long long consumed() const { return spent_; }
  long long outer_cost() const { return cfg_.outer_cost(); }

  /// One ascent step on the extraction loss w.r.t. generator parameters.
  /// Returns the batch-mean loss at the generated images; spends
  /// (m+1)*batch_size image-queries.
  double generator_step(Oracle& oracle) {
    const auto z = sample_latent<float>(cfg_.batch_size, cfg_.latent_dim, dist_, rng_);
    Tensor<float> x = generator_.forward(z, true);
    EstimatorConfig est_cfg{cfg_.estimator_directions, cfg_.estimator_epsilon};
    auto est = estimate_input_gradient(oracle, student_, x, weights(), mode_, est_cfg, rng_);
    spent_ += est.queries;
    // est.grad is the per-image loss gradient; the generator maximizes the
    // batch-mean loss, so descend along its negation scaled by 1/B.
    Tensor<float> dimage = est.grad;
    const float scale = -1.0f / static_cast<float>(cfg_.batch_size);
    for (auto& v : dimage.v) v *= scale;
    generator_.backward(dimage);
    adam_generator_.step(
        lr_at(adam_generator_.steps(), cfg_.lr_generator, cfg_.decay_generator,
              cfg_.decay_every));
    return est.base_loss;
  }

  /// One exact descent step on the extraction loss w.r.t. student parameters.
  /// Returns the batch-mean loss; spends batch_size image-queries.
  double student_step(Oracle& oracle) {
    const auto z = sample_latent<float>(cfg_.batch_size, cfg_.latent_dim, dist_, rng_);
    Tensor<float> x = generator_.forward(z, false);
    const auto perm = rng_.permutation(cfg_.batch_size);
    Tensor<float> shuffled = gather_items(x, perm);
    const auto dets = oracle.query(shuffled);
    spent_ += cfg_.batch_size;
    auto s_out = student_.forward(shuffled, true);
    Tensor<float> v_probs, v_box;
    detections_to_tensors(dets, student_.class_count(), v_probs, v_box);
    auto sg = student_loss_grads(v_probs, v_box, s_out, weights(), mode_);
    student_.backward_heads(sg.dlabel, sg.dbox, sg.dpre);
    adam_student_.step(
        lr_at(adam_student_.steps(), cfg_.lr_student, cfg_.decay_student, cfg_.decay_every));
    return sg.values.l_total;
  }

  /// Full run against the oracle. If out_dir is nonempty, periodic and final
  /// checkpoints, resumable state, and the history file land there. eval_set
  /// (optional) feeds periodic accuracy/IoU snapshots — never charged.
  AttackResult run(Oracle& oracle, const Dataset* eval_set = nullptr,
                   const std::string& out_dir = "", const AttackCallbacks& cb = {}) {
    AttackResult res;
    const long long cost = cfg_.outer_cost();
    if (iter_ == 0 && oracle.remaining() < cost) {
      res.status = AttackStatus::BudgetTooSmall;
      res.outer_iterations = iter_;
      res.consumed = spent_;
      res.message = "budget too small: remaining " + std::to_string(oracle.remaining()) +
                    " cannot cover one outer iteration costing " + std::to_string(cost);
      return res;
    }
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    while (oracle.remaining() >= cost) {
      double gen_loss = 0, stu_loss = 0;
      try {
        for (int g = 0; g < cfg_.n_generator; ++g) {
          gen_loss += generator_step(oracle);
          if (cb.on_step) cb.on_step('G', g);
        }
        for (int s = 0; s < cfg_.n_student; ++s) {
          stu_loss += student_step(oracle);
          if (cb.on_step) cb.on_step('S', s);
        }
      } catch (const TransportError& e) {
        res.status = AttackStatus::TransportHalted;
        res.message = std::string("oracle transport failed: ") + e.what() +
                      "; state checkpointed for resume";
        if (!out_dir.empty()) save_state(out_dir);
        res.outer_iterations = iter_;
        res.consumed = spent_;
        return res;
      } catch (const BudgetExhausted& e) {
        // Only possible when another client drains a shared remote budget
        // mid-block; treat as normal termination.
        res.message = std::string("budget exhausted mid-iteration: ") + e.what();
        break;
      }
      ++iter_;
      OuterRecord rec;
      rec.iteration = iter_;
      rec.consumed = spent_;
      rec.generator_loss = gen_loss / cfg_.n_generator;
      rec.student_loss = stu_loss / cfg_.n_student;
      rec.lr_student = lr_at(adam_student_.steps(), cfg_.lr_student, cfg_.decay_student,
                             cfg_.decay_every);
      rec.lr_generator = lr_at(adam_generator_.steps(), cfg_.lr_generator,
                               cfg_.decay_generator, cfg_.decay_every);
      if (eval_set && (iter_ == 1 || iter_ % cfg_.eval_every == 0)) rec.eval = snapshot(*eval_set);
      history_.records.push_back(rec);
      if (cb.on_iteration) cb.on_iteration(rec);
      if (!out_dir.empty() && iter_ % cfg_.checkpoint_every == 0) save_state(out_dir);
    }

    if (eval_set && !history_.records.empty() && !history_.records.back().eval)
      history_.records.back().eval = snapshot(*eval_set);
    if (!out_dir.empty()) save_state(out_dir);
    res.status = AttackStatus::Completed;
    res.outer_iterations = iter_;
    res.consumed = spent_;
    if (res.message.empty())
      res.message = "stopped with remaining " + std::to_string(oracle.remaining()) +
                    " below outer iteration cost " + std::to_string(cost);
    return res;
  }

  /// Persist weights, optimizer moments, RNG state, and history under dir.
  void save_state(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    save_detector((fs::path(dir) / "student.ckpt.json").string(), student_spec_, student_);
    save_generator((fs::path(dir) / "generator.ckpt.json").string(), generator_spec_,
                   generator_);
    nlohmann::json j{{"format", "mimic-attack-resume-v1"},
                     {"config", cfg_},
                     {"iteration", iter_},
                     {"spent", spent_},
                     {"rng", rng_.save_state()},
                     {"adam_student", adam_student_.state_to_json()},
                     {"adam_generator", adam_generator_.state_to_json()}};
    std::ofstream out(fs::path(dir) / "resume.json");
    if (!out) throw std::runtime_error("cannot write resume state in '" + dir + "'");
    out << j.dump() << '\n';
    history_.save_jsonl((fs::path(dir) / "history.jsonl").string());
  }

  /// Rebuild an attacker mid-run from a directory written by save_state.
  static Attacker resume_from(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream in(fs::path(dir) / "resume.json");
    if (!in) throw std::runtime_error("no resume state in '" + dir + "'");
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "mimic-attack-resume-v1")
      throw std::runtime_error("unrecognized resume format in '" + dir + "'");
    AttackConfig cfg = j.at("config").get<AttackConfig>();
    const auto spath = (fs::path(dir) / "student.ckpt.json").string();
    const auto gpath = (fs::path(dir) / "generator.ckpt.json").string();
    auto sj = detail::read_checkpoint_file(spath, "student");
    auto gj = detail::read_checkpoint_file(gpath, "generator");
    Attacker a(cfg, sj.at("spec").get<NetworkSpec>(), gj.at("spec").get<NetworkSpec>());
    detail::params_from_json(sj.at("params"), a.student_.params(),
                             "checkpoint '" + spath + "'");
    detail::params_from_json(gj.at("params"), a.generator_.params(),
                             "checkpoint '" + gpath + "'");
    if (sj.contains("checksum") &&
        sj.at("checksum").get<std::uint64_t>() != a.student_.checksum())
      throw std::runtime_error("checkpoint '" + spath + "' failed its weight checksum");
    if (gj.contains("checksum") &&
        gj.at("checksum").get<std::uint64_t>() != a.generator_.checksum())
      throw std::runtime_error("checkpoint '" + gpath + "' failed its weight checksum");
    a.rng_.restore_state(j.at("rng").get<std::string>());
    a.adam_student_.restore_state(j.at("adam_student"));
    a.adam_generator_.restore_state(j.at("adam_generator"));
    a.iter_ = j.at("iteration").get<long long>();
    a.spent_ = j.at("spent").get<long long>();
    const auto hist = fs::path(dir) / "history.jsonl";
    if (fs::exists(hist)) a.history_ = RunHistory::load_jsonl(hist.string());
    return a;
  }

 private:
  EvalSnapshot snapshot(const Dataset& eval_set) {
    auto rep = evaluate_detector(student_, eval_set);
    return {rep.accuracy, rep.mean_iou};
  }

  LossWeights weights() const { return {cfg_.weight_cls, cfg_.weight_reg}; }

  AttackConfig cfg_;
  NetworkSpec student_spec_, generator_spec_;
  Detector<float> student_;
  Generator<float> generator_;
  Rng rng_;
  nn::Adam<float> adam_student_;
  nn::Adam<float> adam_generator_;
  ClsLossMode mode_ = ClsLossMode::Probability;
  LatentDist dist_ = LatentDist::Gaussian;
  long long spent_ = 0;
  long long iter_ = 0;
  RunHistory history_;
};

}  // namespace mimic
