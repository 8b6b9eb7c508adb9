#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "smlp/data.hpp"
#include "smlp/model.hpp"
#include "smlp/ops.hpp"
#include "smlp/optim.hpp"

namespace smlp {

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;  // rate of the epoch's last step
  double train_loss = 0.0;
  double train_acc = 0.0;  // running accuracy of the train-mode forwards
  double eval_acc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;  // plain cross-entropy
  std::size_t count = 0;
};

inline std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  return (samples + batch_size - 1) / batch_size;
}

inline void write_epoch_csv(std::ostream& os, const std::vector<EpochRecord>& epochs) {
  os << "epoch,lr,train_loss,train_acc,eval_acc\n";
  const auto flags = os.flags();
  os.precision(9);
  for (const auto& e : epochs) {
    os << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.train_acc << ',';
    if (!std::isnan(e.eval_acc)) os << e.eval_acc;
    os << '\n';
  }
  os.flags(flags);
}

inline void write_step_csv(std::ostream& os, const std::vector<StepRecord>& steps) {
  os << "step,epoch,lr,loss\n";
  const auto flags = os.flags();
  os.precision(9);
  for (const auto& s : steps) os << s.step << ',' << s.epoch << ',' << s.lr << ',' << s.loss << '\n';
  os.flags(flags);
}

namespace detail {

inline std::size_t argmax_row(const float* row, std::size_t k) {
  return static_cast<std::size_t>(std::max_element(row, row + k) - row);
}

inline std::size_t argmax_row(const double* row, std::size_t k) {
  return static_cast<std::size_t>(std::max_element(row, row + k) - row);
}

// Fisher-Yates with the portable uniform01 draw.
inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace detail

// Eval mode (running BN statistics, DropPath off); no augmentation.
template <typename T>
EvalResult evaluate(SmlpNet<T>& net, const Dataset& data, const Normalization& norm, std::size_t batch_size = 128) {
  if (data.empty()) throw std::invalid_argument("evaluate: dataset is empty");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch_size must be positive");
  std::size_t correct = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = make_batch<T>(data, idx, norm);
    Tape<T> tape(false);
    Var<T> logits = net.forward(tape, tape.constant(batch.images), Mode::eval);
    Var<T> loss = label_smoothing_ce<T>(logits, batch.labels, T(0));
    loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(idx.size());
    const std::size_t k = logits.shape()[1];
    const T* lv = logits.value().data().data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      correct += detail::argmax_row(lv + i * k, k) == static_cast<std::size_t>(batch.labels[i]);
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(data.size()), loss_sum / static_cast<double>(data.size()),
          data.size()};
}

struct TrainHooks {
  // Called after every epoch; the returned value stops training when false.
  std::function<bool(const EpochRecord&)> on_epoch;
  std::function<void(const StepRecord&)> on_step;
};

// Owns the optimizer and the training random stream, so a run can be
// checkpointed between epochs.
template <typename T>
class Trainer {
 public:
  Trainer(SmlpNet<T>& net, TrainConfig cfg, Normalization norm = {}, Augmentation aug = {})
      : net_(net),
        cfg_(std::move(cfg)),
        norm_(norm),
        aug_(aug),
        opt_(net.parameters(), cfg_.weight_decay),
        rng_(cfg_.seed ^ 0x9e3779b97f4a7c15ULL) {
    cfg_.validate();
  }

  // Runs the remaining epochs of the schedule over `train_set`.
  TrainLog fit(const Dataset& train_set, const Dataset* eval_set = nullptr, const TrainHooks& hooks = {}) {
    if (train_set.empty()) throw std::invalid_argument("train: dataset is empty");
    const auto& mc = net_.config();
    if (train_set.height != mc.image_height || train_set.width != mc.image_width) {
      throw ShapeError("train: dataset images are " + std::to_string(train_set.height) + "x" +
                       std::to_string(train_set.width) + " but the model expects " + std::to_string(mc.image_height) +
                       "x" + std::to_string(mc.image_width));
    }
    const std::size_t per_epoch = steps_per_epoch(train_set.size(), cfg_.batch_size);
    std::vector<std::size_t> order(train_set.size());
    TrainLog log;
    for (; epoch_ < cfg_.total_epochs; ++epoch_) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      detail::shuffle_indices(order, rng_);
      EpochRecord rec;
      rec.epoch = epoch_ + 1;
      double loss_sum = 0.0;
      std::size_t correct = 0;
      for (std::size_t b = 0; b < per_epoch; ++b) {
        const std::size_t start = b * cfg_.batch_size;
        const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
        const std::span<const std::size_t> idx(order.data() + start, end - start);
        const double lr = lr_at(cfg_, step_, per_epoch);
        const auto [loss, hits] = step(train_set, idx, lr);
        StepRecord s{step_, epoch_ + 1, lr, loss};
        log.steps.push_back(s);
        if (hooks.on_step) hooks.on_step(s);
        loss_sum += loss * static_cast<double>(idx.size());
        correct += hits;
        rec.lr = lr;
        ++step_;
      }
      rec.train_loss = loss_sum / static_cast<double>(train_set.size());
      rec.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
      if (eval_set && !eval_set->empty()) rec.eval_acc = evaluate(net_, *eval_set, norm_).accuracy;
      log.epochs.push_back(rec);
      if (hooks.on_epoch && !hooks.on_epoch(rec)) {
        ++epoch_;
        break;
      }
    }
    return log;
  }

  // One optimizer update on the given samples. Returns the batch loss and the
  // number of correct train-mode predictions.
  std::pair<double, std::size_t> step(const Dataset& data, std::span<const std::size_t> idx, double lr) {
    const auto batch = make_batch<T>(data, idx, norm_, cfg_.augment ? &aug_ : nullptr, &rng_);
    opt_.zero_grad();
    Tape<T> tape;
    Var<T> logits = net_.forward(tape, tape.constant(batch.images), Mode::train, &rng_);
    Var<T> loss = label_smoothing_ce<T>(logits, batch.labels, static_cast<T>(cfg_.label_smoothing));
    tape.backward(loss);
    opt_.step(lr);
    const std::size_t k = logits.shape()[1];
    const T* lv = logits.value().data().data();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      hits += detail::argmax_row(lv + i * k, k) == static_cast<std::size_t>(batch.labels[i]);
    }
    return {static_cast<double>(loss.value().item()), hits};
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  AdamW<T>& optimizer() noexcept { return opt_; }
  Rng& rng() noexcept { return rng_; }
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t global_step() const noexcept { return step_; }

  // Resumes the schedule position (e.g. after restoring a checkpoint).
  void set_position(std::size_t epoch, std::size_t step) noexcept {
    epoch_ = epoch;
    step_ = step;
  }

 private:
  SmlpNet<T>& net_;
  TrainConfig cfg_;
  Normalization norm_;
  Augmentation aug_;
  AdamW<T> opt_;
  Rng rng_;
  std::size_t epoch_ = 0;
  std::size_t step_ = 0;
};

template <typename T>
TrainLog train(SmlpNet<T>& net, const Dataset& train_set, const TrainConfig& cfg, const Normalization& norm = {},
               const Augmentation& aug = {}, const Dataset* eval_set = nullptr, const TrainHooks& hooks = {}) {
  Trainer<T> trainer(net, cfg, norm, aug);
  return trainer.fit(train_set, eval_set, hooks);
}

}  // namespace smlp
