#pragma once

// Adam training loop: seeded shuffling, on-the-fly augmentation, per-epoch
// train/val curves, best-by-val-loss snapshotting, and inference helpers that
// emit the two softmax outputs used downstream as image features.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "colearn/autodiff.hpp"
#include "colearn/common.hpp"
#include "colearn/network.hpp"
#include "colearn/preprocess.hpp"
#include "colearn/tensor.hpp"

namespace colearn {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 4;
  int epochs = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;
  std::optional<std::array<double, 2>> class_weights;  // default uniform
  std::optional<std::string> aux_training_manifest;    // extra train-only subjects
  double augment_rotation_deg = 10.0;
  int augment_shift_voxels = 4;
};

struct Sample {
  std::string subject_id;
  InputTensor input;
  int label = -1;  // 0 benign, 1 malignant
};
using SampleSet = std::vector<Sample>;

inline std::array<double, 2> inverse_frequency_weights(const SampleSet& s) {
  int64_t n0 = 0, n1 = 0;
  for (const auto& x : s) (x.label == 0 ? n0 : n1)++;
  require(n0 > 0 && n1 > 0, "class weighting needs both classes present");
  const double n = double(n0 + n1);
  return {n / (2.0 * double(n0)), n / (2.0 * double(n1))};
}

struct AdamState {
  struct Slot {
    Tensor<float> m, v;
  };
  std::vector<Slot> slots;  // one per trainable entry, in graph order
  int64_t t = 0;
};

inline AdamState init_adam(const ParamGraph<float>& pg) {
  AdamState st;
  for (const auto& e : pg.entries)
    if (e.trainable)
      st.slots.push_back({Tensor<float>::zeros(e.value.shape),
                          Tensor<float>::zeros(e.value.shape)});
  return st;
}

inline void adam_step(ParamGraph<float>& pg, AdamState& st, const TrainConfig& cfg) {
  st.t += 1;
  const float b1 = float(cfg.beta1), b2 = float(cfg.beta2);
  const float lr = float(cfg.learning_rate), eps = float(cfg.eps);
  const float c1 = 1.0f / (1.0f - float(std::pow(cfg.beta1, double(st.t))));
  const float c2 = 1.0f / (1.0f - float(std::pow(cfg.beta2, double(st.t))));
  size_t slot = 0;
  for (auto& e : pg.entries) {
    if (!e.trainable) continue;
    auto& s = st.slots[slot++];
    const float* g = e.grad.ptr();
    const int64_t n = e.value.numel();
    for (int64_t i = 0; i < n; ++i)
      if (!std::isfinite(g[i]))
        fail_numeric("non-finite gradient in parameter ", e.name, " at element ", i);
    float* m = s.m.ptr();
    float* v = s.v.ptr();
    float* w = e.value.ptr();
    parallel_for(n, [&](int64_t i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const float mh = m[i] * c1;
      const float vh = v[i] * c2;
      w[i] -= lr * mh / (std::sqrt(vh) + eps);
    });
  }
  require(slot == st.slots.size(), "adam state does not match the parameter graph");
}

struct History {
  std::vector<double> train_loss, train_acc, val_loss, val_acc;
  int best_epoch = -1;  // index of the minimum validation loss, earliest on ties

  size_t epochs() const { return train_loss.size(); }
};

inline void write_history_csv(const std::string& path, const History& h) {
  std::ofstream f(path);
  if (!f) fail_data("cannot write ", path);
  f << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  char buf[128];
  for (size_t i = 0; i < h.epochs(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", i + 1,
                  h.train_loss[i], h.train_acc[i], h.val_loss[i], h.val_acc[i]);
    f << buf;
  }
  if (!f) fail_data("short write on ", path);
}

namespace detail {

inline Tensor<float> assemble_batch(const SampleSet& set, const std::vector<size_t>& idx,
                                    size_t begin, size_t end) {
  const int64_t s = set[idx[begin]].input.side();
  Tensor<float> batch({int64_t(end - begin), 2, s, s, s});
  const int64_t per = 2 * s * s * s;
  for (size_t i = begin; i < end; ++i) {
    const auto& in = set[idx[i]].input.data;
    std::copy(in.data.begin(), in.data.end(), batch.data.begin() + int64_t(i - begin) * per);
  }
  return batch;
}

inline uint64_t stream_seed(uint64_t seed, const char* tag, uint64_t a, uint64_t b = 0) {
  return hash_combine(hash_combine(hash_combine(seed, fnv1a(tag)), a), b);
}

}  // namespace detail

// Weighted mean loss and accuracy of an inference-mode pass over a whole set.
// Pure: running batchnorm stats are read, never written.
inline std::pair<double, double> evaluate_split(ParamGraph<float>& pg,
                                                const SampleSet& set,
                                                std::array<double, 2> weights,
                                                int batch_size = 4) {
  require(!set.empty(), "evaluate_split: empty sample set");
  std::vector<size_t> idx(set.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  double loss_sum = 0, wsum = 0;
  int64_t correct = 0;
  for (size_t b = 0; b < set.size(); b += size_t(batch_size)) {
    const size_t e = std::min(set.size(), b + size_t(batch_size));
    Tape<float> tape;
    ForwardNodes fw =
        forward(tape, pg, detail::assemble_batch(set, idx, b, e), false);
    const Tensor<float>& probs = tape.value(fw.probs);
    const Tensor<float>& logits = tape.value(fw.logits);
    for (size_t i = b; i < e; ++i) {
      const int64_t r = int64_t(i - b);
      const int lab = set[i].label;
      const float a = logits.at2(r, 0), bb = logits.at2(r, 1);
      const float mx = std::max(a, bb);
      const double lse = double(mx) + std::log(std::exp(double(a - mx)) + std::exp(double(bb - mx)));
      const double nll = lse - double(lab == 0 ? a : bb);
      const double w = weights[size_t(lab)];
      loss_sum += w * nll;
      wsum += w;
      const int pred = probs.at2(r, 1) > probs.at2(r, 0) ? 1 : 0;
      correct += pred == lab;
    }
  }
  return {loss_sum / wsum, double(correct) / double(set.size())};
}

struct FitResult {
  History history;
  ParamGraph<float> best;  // parameters (and running stats) at the best epoch
};

// One epoch = seeded shuffle of train plus aux subjects, augmented batches,
// forward/backward/adam per batch, then an inference-mode validation pass.
// Aux subjects join training batches only and never appear in validation.
inline FitResult fit(ParamGraph<float>& pg, const SampleSet& train, const SampleSet& val,
                     const TrainConfig& cfg, const SampleSet& aux = {},
                     const std::function<void(int, const History&)>& on_epoch = {}) {
  if (train.empty()) fail_data("fit: empty training split");
  if (val.empty()) fail_data("fit: empty validation split");
  require(cfg.batch_size >= 1 && cfg.epochs >= 1, "fit: batch size and epochs must be >= 1");

  {
    std::set<std::string> train_ids, val_ids;
    for (const auto& s : train)
      if (!train_ids.insert(s.subject_id).second)
        fail_data("fit: duplicate training subject ", s.subject_id);
    for (const auto& s : val)
      if (!val_ids.insert(s.subject_id).second)
        fail_data("fit: duplicate validation subject ", s.subject_id);
    for (const auto& id : val_ids)
      if (train_ids.count(id)) fail_data("fit: subject ", id, " in both train and val");
    for (const auto& s : aux) {
      if (train_ids.count(s.subject_id))
        fail_data("fit: aux subject ", s.subject_id, " overlaps the training split");
      if (val_ids.count(s.subject_id))
        fail_data("fit: aux subject ", s.subject_id, " overlaps the validation split");
    }
  }
  for (const SampleSet* set : {&train, &val, &aux})
    for (const auto& s : *set)
      require(s.label == 0 || s.label == 1,
              "fit: subject " + s.subject_id + " has no binary label");

  const std::array<double, 2> w =
      cfg.class_weights ? *cfg.class_weights : std::array<double, 2>{1.0, 1.0};
  const std::array<float, 2> wf{float(w[0]), float(w[1])};

  // the combined training pool: train first, then aux
  std::vector<const Sample*> pool;
  pool.reserve(train.size() + aux.size());
  for (const auto& s : train) pool.push_back(&s);
  for (const auto& s : aux) pool.push_back(&s);

  AdamState adam = init_adam(pg);
  FitResult out;
  double best_loss = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order(pool.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(detail::stream_seed(cfg.seed, "shuffle", uint64_t(epoch)));
    for (size_t i = order.size(); i > 1; --i) {
      const size_t j = size_t(shuffle_rng.uniform_int(0, int64_t(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0, wsum = 0;
    int64_t correct = 0;
    for (size_t b = 0; b < order.size(); b += size_t(cfg.batch_size)) {
      const size_t e = std::min(order.size(), b + size_t(cfg.batch_size));
      const int64_t B = int64_t(e - b);
      const int64_t s = pool[order[b]]->input.side();
      Tensor<float> batch({B, 2, s, s, s});
      std::vector<int> labels(static_cast<size_t>(B));
      const int64_t per = 2 * s * s * s;
      for (size_t i = b; i < e; ++i) {
        const Sample& src = *pool[order[i]];
        AugmentSpec aspec;
        aspec.max_rotation_deg = cfg.augment_rotation_deg;
        aspec.max_shift_voxels = cfg.augment_shift_voxels;
        aspec.rng_seed = detail::stream_seed(cfg.seed, "augment", uint64_t(epoch),
                                             fnv1a(src.subject_id));
        InputTensor aug = augment(src.input, aspec);
        std::copy(aug.data.data.begin(), aug.data.data.end(),
                  batch.data.begin() + int64_t(i - b) * per);
        labels[i - b] = src.label;
      }

      Tape<float> tape;
      ForwardNodes fw = forward(tape, pg, std::move(batch), true);
      NodeId loss = tape.cross_entropy(fw.logits, labels, wf);
      const double batch_loss = double(tape.value(loss).ptr()[0]);
      if (!std::isfinite(batch_loss))
        fail_numeric("training loss became non-finite at epoch ", epoch + 1);
      double batch_w = 0;
      for (int lab : labels) batch_w += w[size_t(lab)];
      loss_sum += batch_loss * batch_w;
      wsum += batch_w;
      const Tensor<float>& probs = tape.value(fw.probs);
      for (int64_t r = 0; r < B; ++r)
        correct += (probs.at2(r, 1) > probs.at2(r, 0) ? 1 : 0) == labels[size_t(r)];

      pg.zero_grads();
      tape.backward(loss);
      adam_step(pg, adam, cfg);
    }

    const auto [vloss, vacc] = evaluate_split(pg, val, w, cfg.batch_size);
    out.history.train_loss.push_back(loss_sum / wsum);
    out.history.train_acc.push_back(double(correct) / double(pool.size()));
    out.history.val_loss.push_back(vloss);
    out.history.val_acc.push_back(vacc);
    if (out.history.best_epoch < 0 || vloss < best_loss) {
      best_loss = vloss;
      out.history.best_epoch = epoch;
      out.best = pg;  // snapshot of weights and running stats
    }
    if (on_epoch) on_epoch(epoch, out.history);
  }
  return out;
}

struct Prediction {
  std::string subject_id;
  double prob_benign = 0;     // image_feature_0
  double prob_malignant = 0;  // image_feature_1
};

inline std::vector<Prediction> predict(ParamGraph<float>& pg, const SampleSet& set,
                                       int batch_size = 4) {
  require(batch_size >= 1, "predict: batch size must be >= 1");
  std::vector<Prediction> out;
  out.reserve(set.size());
  std::vector<size_t> idx(set.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (size_t b = 0; b < set.size(); b += size_t(batch_size)) {
    const size_t e = std::min(set.size(), b + size_t(batch_size));
    Tape<float> tape;
    ForwardNodes fw =
        forward(tape, pg, detail::assemble_batch(set, idx, b, e), false);
    const Tensor<float>& probs = tape.value(fw.probs);
    for (size_t i = b; i < e; ++i) {
      const int64_t r = int64_t(i - b);
      out.push_back({set[i].subject_id, double(probs.at2(r, 0)), double(probs.at2(r, 1))});
    }
  }
  return out;
}

inline void write_predictions_csv(const std::string& path,
                                  const std::vector<Prediction>& rows) {
  std::ofstream f(path);
  if (!f) fail_data("cannot write ", path);
  f << "subject_id,image_feature_0,image_feature_1\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", r.prob_benign, r.prob_malignant);
    f << r.subject_id << buf;
  }
  if (!f) fail_data("short write on ", path);
}

inline std::vector<Prediction> read_predictions_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_data("cannot open ", path);
  std::string line;
  if (!std::getline(f, line)) fail_data("empty predictions file ", path);
  while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
  if (line != "subject_id,image_feature_0,image_feature_1")
    fail_data(path, ": unexpected header '", line, "'");
  std::vector<Prediction> out;
  size_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
    if (c2 == std::string::npos) fail_data(path, " line ", lineno, ": expected 3 columns");
    Prediction p;
    p.subject_id = line.substr(0, c1);
    try {
      size_t used = 0;
      const std::string a = line.substr(c1 + 1, c2 - c1 - 1);
      p.prob_benign = std::stod(a, &used);
      if (used != a.size()) throw std::invalid_argument(a);
      const std::string b = line.substr(c2 + 1);
      p.prob_malignant = std::stod(b, &used);
      if (used != b.size()) throw std::invalid_argument(b);
    } catch (const std::exception&) {
      fail_data(path, " line ", lineno, ": malformed numeric field");
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace colearn
