#pragma once

// Single-sequence training loop with Adam and a plateau learning-rate schedule.
// Each epoch draws its randomness from (seed, epoch) only, so a run resumed
// from a checkpoint replays exactly the epochs it would have run anyway.

#include <algorithm>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "beatkit/checkpoint.hpp"
#include "beatkit/encoder.hpp"
#include "beatkit/targets.hpp"

namespace beatkit {

struct Example {
  std::string name;
  DemixedClip clip;
  TargetTrack targets;
};

inline constexpr std::size_t kMaxTrainFrames = 8192;

// Builds targets on the whole clip, then cuts clip and targets into pieces of
// at most `max_frames`. Tempo targets come from the full annotation.
inline std::vector<Example> prepare_examples(const std::string& name, const DemixedClip& clip, const Annotation& ann,
                                             std::size_t tempo_classes = 300,
                                             std::size_t max_frames = kMaxTrainFrames) {
  if (max_frames == 0) throw ConfigError("max_frames must be positive");
  const std::size_t T = clip.frames(), C = clip.channels(), F = clip.bins();
  const TargetTrack full = make_targets(ann, T, clip.fps, tempo_classes);
  std::vector<Example> out;
  for (std::size_t s = 0, part = 0; s < T; s += max_frames, ++part) {
    const std::size_t n = std::min(max_frames, T - s);
    Example ex;
    ex.name = T > max_frames ? name + "#" + std::to_string(part) : name;
    ex.clip.fps = clip.fps;
    ex.clip.channel_names = clip.channel_names;
    const auto& src = clip.values.data();
    ex.clip.values = Tensor::from({n, C, F}, std::vector<double>(src.begin() + static_cast<long>(s * C * F),
                                                                 src.begin() + static_cast<long>((s + n) * C * F)));
    ex.targets.beat.assign(full.beat.begin() + static_cast<long>(s), full.beat.begin() + static_cast<long>(s + n));
    ex.targets.downbeat.assign(full.downbeat.begin() + static_cast<long>(s),
                               full.downbeat.begin() + static_cast<long>(s + n));
    ex.targets.tempo = full.tempo;
    out.push_back(std::move(ex));
  }
  return out;
}

// Fixed-seed validation split: returns (train, validation) index lists.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_val(std::size_t n, double fraction,
                                                                                     std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) throw ConfigError("validation fraction must lie in [0, 1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t nv = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  if (fraction > 0 && nv == 0 && n >= 2) nv = 1;
  if (nv >= n) nv = n - 1;
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<long>(nv));
  std::vector<std::size_t> train(idx.begin() + static_cast<long>(nv), idx.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {train, val};
}

// ---------------------------------------------------------------------------

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t steps = 0;
  std::map<std::string, std::vector<double>> m, v;

  void step(const std::vector<std::pair<std::string, Tensor>>& params, double lr) {
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (auto [name, p] : params) {
      if (!p.has_grad()) continue;
      auto& mm = m[name];
      auto& vv = v[name];
      if (mm.empty()) {
        mm.assign(p.numel(), 0.0);
        vv.assign(p.numel(), 0.0);
      }
      const auto g = p.grad();
      auto w = p.mutable_data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i];
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
        w[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + eps);
      }
    }
  }
};

// Divides the rate by `factor` once the validation loss has failed to improve
// for `patience` consecutive epochs, never going below `min_lr`.
struct PlateauSchedule {
  double lr = 1e-3;
  double factor = 5.0;
  std::size_t patience = 2;
  double min_lr = 1e-7;
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;

  bool step(double metric) {
    if (metric < best) {
      best = metric;
      bad_epochs = 0;
      return false;
    }
    if (++bad_epochs < patience) return false;
    bad_epochs = 0;
    const double next = std::max(lr / factor, min_lr);
    const bool changed = next < lr;
    lr = next;
    return changed;
  }
};

struct TrainConfig {
  std::size_t epochs = 20;
  double lr = 1e-3;
  double lr_factor = 5.0;
  std::size_t patience = 2;
  double min_lr = 1e-7;
  double val_fraction = 0.2;
  bool augment = true;
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0, val_loss = 0, lr = 0;
};

class Trainer {
 public:
  Trainer(Model model, std::vector<Example> data, TrainConfig cfg) : model_(std::move(model)), cfg_(cfg) {
    if (data.empty()) throw DataError("training set is empty");
    auto [tr, va] = split_train_val(data.size(), cfg.val_fraction, cfg.seed);
    for (std::size_t i : tr) train_.push_back(std::move(data[i]));
    for (std::size_t i : va) val_.push_back(std::move(data[i]));
    schedule_.lr = cfg.lr;
    schedule_.factor = cfg.lr_factor;
    schedule_.patience = cfg.patience;
    schedule_.min_lr = cfg.min_lr;
  }

  EpochStats run_epoch() {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      static_cast<std::uint32_t>(epoch_)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    const auto params = model_.params.named();
    const double lr = schedule_.lr;
    double total = 0.0;
    for (std::size_t i : order) {
      const Example& ex = train_[i];
      const DemixedClip clip =
          cfg_.augment && ex.clip.channels() == 5 ? partial_demix_augment(ex.clip, rng) : ex.clip;
      for (auto [name, p] : params) p.zero_grad();
      Tape::active().clear();
      double value = 0.0;
      try {
        const EncoderOutput out = encoder_forward(clip, model_, RunMode{true, &rng});
        const LossTerms loss = multitask_loss(out, ex.targets);
        value = loss.total.item();
        if (!std::isfinite(value)) throw NumericError("non-finite loss");
        backward(loss.total);
      } catch (const NumericError& e) {
        Tape::active().clear();
        throw NumericError("training diverged at epoch " + std::to_string(epoch_ + 1) + ", clip '" + ex.name +
                           "': " + e.what());
      }
      Tape::active().clear();
      adam_.step(params, lr);
      total += value;
    }
    EpochStats st;
    st.epoch = ++epoch_;
    st.train_loss = total / static_cast<double>(train_.size());
    try {
      st.val_loss = val_.empty() ? st.train_loss : validation_loss();
    } catch (const NumericError& e) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch_) + " (validation): " + e.what());
    }
    if (!std::isfinite(st.val_loss))
      throw NumericError("training diverged at epoch " + std::to_string(epoch_) + ": non-finite validation loss");
    st.lr = lr;
    schedule_.step(st.val_loss);
    history_.push_back(st);
    return st;
  }

  void run(const std::function<void(const EpochStats&)>& on_epoch = {}) {
    while (epoch_ < cfg_.epochs) {
      const EpochStats st = run_epoch();
      if (on_epoch) on_epoch(st);
    }
  }

  double validation_loss() const {
    NoGradGuard guard;
    double s = 0.0;
    for (const Example& ex : val_) s += multitask_loss(encoder_forward(ex.clip, model_), ex.targets).total.item();
    return s / static_cast<double>(val_.size());
  }

  // Model parameters plus optimizer, schedule and history.
  std::vector<NamedArray> state_arrays() const {
    std::vector<NamedArray> out = model_.params.to_arrays();
    for (const auto& [name, t] : model_.params.named()) {
      const auto it = adam_.m.find(name);
      if (it == adam_.m.end()) continue;
      out.push_back({"adam.m." + name, t.shape(), it->second});
      out.push_back({"adam.v." + name, t.shape(), adam_.v.at(name)});
    }
    out.push_back({"train.state",
                   {6},
                   {static_cast<double>(epoch_), static_cast<double>(adam_.steps), schedule_.lr, schedule_.best,
                    static_cast<double>(schedule_.bad_epochs), static_cast<double>(cfg_.seed)}});
    std::vector<double> h;
    for (const EpochStats& s : history_) h.insert(h.end(), {static_cast<double>(s.epoch), s.train_loss, s.val_loss, s.lr});
    if (!history_.empty()) out.push_back({"train.history", {history_.size(), 4}, h});
    return out;
  }

  void load_state(const std::vector<NamedArray>& arrays) {
    model_.params.load(arrays);
    adam_.m.clear();
    adam_.v.clear();
    history_.clear();
    bool have_state = false;
    for (const NamedArray& a : arrays) {
      if (a.name.rfind("adam.m.", 0) == 0) adam_.m[a.name.substr(7)] = a.values;
      else if (a.name.rfind("adam.v.", 0) == 0) adam_.v[a.name.substr(7)] = a.values;
      else if (a.name == "train.state") {
        if (a.values.size() != 6) throw DataError("checkpoint: malformed train.state");
        epoch_ = static_cast<std::size_t>(a.values[0]);
        adam_.steps = static_cast<std::uint64_t>(a.values[1]);
        schedule_.lr = a.values[2];
        schedule_.best = a.values[3];
        schedule_.bad_epochs = static_cast<std::size_t>(a.values[4]);
        have_state = true;
      } else if (a.name == "train.history") {
        for (std::size_t r = 0; r + 3 < a.values.size(); r += 4)
          history_.push_back({static_cast<std::size_t>(a.values[r]), a.values[r + 1], a.values[r + 2], a.values[r + 3]});
      }
    }
    if (!have_state) throw DataError("checkpoint carries no training state; cannot resume");
  }

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const std::vector<EpochStats>& history() const { return history_; }
  std::size_t epoch() const { return epoch_; }
  double lr() const { return schedule_.lr; }
  const std::vector<Example>& train_set() const { return train_; }
  const std::vector<Example>& validation_set() const { return val_; }

 private:
  Model model_;
  TrainConfig cfg_;
  std::vector<Example> train_, val_;
  Adam adam_;
  PlateauSchedule schedule_;
  std::size_t epoch_ = 0;
  std::vector<EpochStats> history_;
};

}  // namespace beatkit
