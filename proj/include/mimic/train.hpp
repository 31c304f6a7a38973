#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "mimic/data.hpp"
#include "mimic/losses.hpp"
#include "mimic/nn/adam.hpp"
#include "mimic/nn/network.hpp"
#include "mimic/rng.hpp"

namespace mimic {

struct VictimTrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double lr = 0.001;
  double plateau_factor = 0.5;
  int plateau_patience = 3;
  double lr_floor = 0.0001;
  bool negative_class_term = true;  // push non-target class probabilities down too
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs <= 0 || batch_size <= 0)
      throw std::invalid_argument("VictimTrainConfig: epochs and batch_size must be positive");
    if (!(plateau_factor > 0 && plateau_factor < 1))
      throw std::invalid_argument("VictimTrainConfig: plateau_factor must be in (0,1)");
    if (plateau_patience < 1)
      throw std::invalid_argument("VictimTrainConfig: plateau_patience must be >= 1");
    if (!(lr > 0) || !(lr_floor > 0) || lr_floor > lr)
      throw std::invalid_argument("VictimTrainConfig: need lr >= lr_floor > 0");
  }
};

inline void to_json(nlohmann::json& j, const VictimTrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"plateau_factor", c.plateau_factor},
       {"plateau_patience", c.plateau_patience},
       {"lr_floor", c.lr_floor},
       {"negative_class_term", c.negative_class_term},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, VictimTrainConfig& c) {
  VictimTrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.plateau_factor = j.value("plateau_factor", d.plateau_factor);
  c.plateau_patience = j.value("plateau_patience", d.plateau_patience);
  c.lr_floor = j.value("lr_floor", d.lr_floor);
  c.negative_class_term = j.value("negative_class_term", d.negative_class_term);
  c.seed = j.value("seed", d.seed);
}

/// Learning-rate schedule that halves (by `factor`) after `patience`
/// consecutive epochs without improvement and never drops below the floor.
class PlateauSchedule {
 public:
  PlateauSchedule(double initial, double factor, int patience, double floor)
      : lr_(initial), factor_(factor), floor_(floor), patience_(patience) {}

  double lr() const { return lr_; }

  /// Feed the end-of-epoch metric (lower is better).
  void observe(double metric) {
    if (metric < best_ - 1e-12) {
      best_ = metric;
      stale_ = 0;
      return;
    }
    if (++stale_ >= patience_) {
      lr_ = std::max(lr_ * factor_, floor_);
      stale_ = 0;
    }
  }

 private:
  double lr_, factor_, floor_;
  int patience_, stale_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double cls_loss = 0;
  double reg_loss = 0;
  double lr = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  void save_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write training history '" + path + "'");
    for (const auto& e : epochs)
      out << nlohmann::json{{"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"cls_loss", e.cls_loss},
                            {"reg_loss", e.reg_loss},
                            {"lr", e.lr}}
                 .dump()
          << '\n';
  }
};

/// Supervised training of the victim detector: cross-entropy on class heads,
/// RMSLE on box heads, Adam with a plateau-driven learning rate.
template <typename T>
TrainHistory train_victim(Detector<T>& victim, const Dataset& train,
                          const VictimTrainConfig& cfg,
                          const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train.size() < 2) throw std::invalid_argument("train_victim: dataset too small");
  nn::Adam<T> opt(victim.params());
  PlateauSchedule sched(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_floor);
  Rng rng(derive_seed(cfg.seed, 0x76696374));
  TrainHistory hist;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = rng.permutation(train.size());
    double sum_total = 0, sum_cls = 0, sum_reg = 0;
    int batches = 0;
    for (int start = 0; start < train.size(); start += cfg.batch_size) {
      const int end = std::min(start + cfg.batch_size, train.size());
      std::vector<int> idx(order.begin() + start, order.begin() + end);
      Tensor<T> x = gather_items(train.images, idx).template cast<T>();
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (int i : idx) labels.push_back(train.labels[i]);
      Tensor<T> tbox = train.box_tensor(idx).template cast<T>();

      auto out = victim.forward(x, true);
      auto g = supervised_loss_grads<T>(labels, tbox, out, cfg.negative_class_term);
      if (!std::isfinite(g.total))
        throw std::runtime_error("train_victim: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(batches) +
                                 " (cls=" + std::to_string(g.cls) +
                                 ", reg=" + std::to_string(g.reg) + ")");
      victim.backward_heads(g.dlabel, g.dbox);
      opt.step(sched.lr());
      sum_total += g.total;
      sum_cls += g.cls;
      sum_reg += g.reg;
      ++batches;
    }
    EpochRecord rec{epoch, sum_total / batches, sum_cls / batches, sum_reg / batches,
                    sched.lr()};
    hist.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    sched.observe(rec.train_loss);
  }
  return hist;
}

}  // namespace mimic
