#pragma once

#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimic/nn/network.hpp"
#include "mimic/tensor.hpp"

namespace mimic {

/// Raised when a query would overdraw the budget. The whole batch is rejected;
/// nothing is consumed.
class BudgetExhausted : public std::runtime_error {
 public:
  BudgetExhausted(long long remaining, long long requested)
      : std::runtime_error("query budget exhausted: remaining " + std::to_string(remaining) +
                           ", requested " + std::to_string(requested)),
        remaining(remaining),
        requested(requested) {}
  long long remaining;
  long long requested;
};

/// Wire/connection failure — distinguishable from budget exhaustion.
class TransportError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Linearizable image-query counter. A batch of B images costs B; the check
/// is all-or-nothing.
class QueryBudget {
 public:
  explicit QueryBudget(long long allowed) : allowed_(allowed) {
    if (allowed < 0) throw std::invalid_argument("QueryBudget: allowed must be >= 0");
  }

  /// Consume n units atomically; false (and no change) if that would overdraw.
  bool try_consume(long long n) {
    std::lock_guard<std::mutex> lock(mu_);
    if (n < 0 || consumed_ + n > allowed_) return false;
    consumed_ += n;
    return true;
  }

  long long remaining() const {
    std::lock_guard<std::mutex> lock(mu_);
    return allowed_ - consumed_;
  }
  long long consumed() const {
    std::lock_guard<std::mutex> lock(mu_);
    return consumed_;
  }
  long long allowed() const { return allowed_; }

  /// Reinstate a prior consumed count (resuming an interrupted run).
  void restore_consumed(long long consumed) {
    std::lock_guard<std::mutex> lock(mu_);
    if (consumed < 0 || consumed > allowed_)
      throw std::invalid_argument("QueryBudget: restored count outside [0, allowed]");
    consumed_ = consumed;
  }

 private:
  long long allowed_;
  long long consumed_ = 0;
  mutable std::mutex mu_;
};

struct OracleInfo {
  int protocol = 1;
  int class_count = 0;
  int height = 0, width = 0, channels = 0;
  std::string victim_id;
};

/// Black-box boundary around the victim: predictions only, budget enforced.
class Oracle {
 public:
  virtual ~Oracle() = default;
  /// One Detection per image; consumes batch-size budget units atomically.
  virtual std::vector<Detection> query(const Tensor<float>& batch) = 0;
  virtual long long remaining() const = 0;
  virtual OracleInfo info() const = 0;
};

/// Oracle over a victim living in the same process. The victim reference is
/// held frozen — nothing here can touch its parameters.
class InProcessOracle : public Oracle {
 public:
  InProcessOracle(Detector<float>& victim, long long budget, std::string victim_id = "victim")
      : victim_(victim), budget_(budget), id_(std::move(victim_id)) {}

  std::vector<Detection> query(const Tensor<float>& batch) override {
    if (batch.n() <= 0) throw std::invalid_argument("oracle query: empty batch");
    if (!budget_.try_consume(batch.n())) throw BudgetExhausted(budget_.remaining(), batch.n());
    std::lock_guard<std::mutex> lock(mu_);
    return victim_.detect(batch);
  }

  long long remaining() const override { return budget_.remaining(); }
  long long consumed() const { return budget_.consumed(); }
  QueryBudget& budget() { return budget_; }

  OracleInfo info() const override {
    auto hwc = victim_.input_hwc();
    return {1, victim_.class_count(), hwc[0], hwc[1], hwc[2], id_};
  }

  /// Experimenter-side prediction path for evaluation — does not touch the
  /// budget and is not part of the attacker-facing surface.
  std::vector<Detection> predict_uncharged(const Tensor<float>& batch) {
    std::lock_guard<std::mutex> lock(mu_);
    return victim_.detect(batch);
  }

 private:
  Detector<float>& victim_;
  QueryBudget budget_;
  std::string id_;
  std::mutex mu_;
};

}  // namespace mimic
