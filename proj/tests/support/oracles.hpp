#pragma once

// Independent reference implementations used as test oracles. Everything here
// is deliberately written as plain nested loops or pairwise brute force so a
// bug in the library's fast paths cannot hide in a shared helper.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "colearn/autodiff.hpp"
#include "colearn/common.hpp"
#include "colearn/tensor.hpp"

namespace oracles {

using colearn::NodeId;
using colearn::Shape;
using colearn::Tape;
using colearn::Tensor;

template <typename T>
Tensor<T> rand_tensor(const Shape& shape, colearn::Rng& rng, double lo = -1.0,
                      double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = T(rng.uniform(lo, hi));
  return t;
}

// Keep values away from relu/maxpool kinks so finite differences are valid.
template <typename T>
void push_away_from(Tensor<T>& t, double point, double margin) {
  for (auto& v : t.data) {
    if (std::abs(double(v) - point) < margin)
      v = T(point + (double(v) >= point ? margin : -margin));
  }
}

template <typename T>
Tensor<T> conv3d_loop(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                      int stride, int pad) {
  const int64_t N = x.shape[0], Ci = x.shape[1], D = x.shape[2], H = x.shape[3],
                W = x.shape[4];
  const int64_t Co = w.shape[0], k = w.shape[2];
  const int64_t Do = (D + 2 * pad - k) / stride + 1;
  const int64_t Ho = (H + 2 * pad - k) / stride + 1;
  const int64_t Wo = (W + 2 * pad - k) / stride + 1;
  Tensor<T> out({N, Co, Do, Ho, Wo});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t co = 0; co < Co; ++co)
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t xx = 0; xx < Wo; ++xx) {
            T acc = b.data[size_t(co)];
            for (int64_t ci = 0; ci < Ci; ++ci)
              for (int64_t dz = 0; dz < k; ++dz)
                for (int64_t dy = 0; dy < k; ++dy)
                  for (int64_t dx = 0; dx < k; ++dx) {
                    const int64_t iz = z * stride - pad + dz;
                    const int64_t iy = y * stride - pad + dy;
                    const int64_t ix = xx * stride - pad + dx;
                    if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 ||
                        ix >= W)
                      continue;
                    acc += x.data[size_t(
                               (((n * Ci + ci) * D + iz) * H + iy) * W + ix)] *
                           w.data[size_t(
                               (((co * Ci + ci) * k + dz) * k + dy) * k + dx)];
                  }
            out.data[size_t((((n * Co + co) * Do + z) * Ho + y) * Wo + xx)] =
                acc;
          }
  return out;
}

template <typename T>
Tensor<T> maxpool_loop(const Tensor<T>& x, int k, int stride) {
  const int64_t N = x.shape[0], C = x.shape[1], D = x.shape[2], H = x.shape[3],
                W = x.shape[4];
  const int64_t Do = (D - k) / stride + 1, Ho = (H - k) / stride + 1,
                Wo = (W - k) / stride + 1;
  Tensor<T> out({N, C, Do, Ho, Wo});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t xx = 0; xx < Wo; ++xx) {
            T best = -std::numeric_limits<T>::infinity();
            for (int64_t dz = 0; dz < k; ++dz)
              for (int64_t dy = 0; dy < k; ++dy)
                for (int64_t dx = 0; dx < k; ++dx) {
                  const T v = x.data[size_t(
                      (((n * C + c) * D + z * stride + dz) * H + y * stride +
                       dy) *
                          W +
                      xx * stride + dx)];
                  if (v > best) best = v;
                }
            out.data[size_t((((n * C + c) * Do + z) * Ho + y) * Wo + xx)] =
                best;
          }
  return out;
}

template <typename T>
Tensor<T> avgpool_loop(const Tensor<T>& x, int k, int stride) {
  const int64_t N = x.shape[0], C = x.shape[1], D = x.shape[2], H = x.shape[3],
                W = x.shape[4];
  const int64_t Do = (D - k) / stride + 1, Ho = (H - k) / stride + 1,
                Wo = (W - k) / stride + 1;
  Tensor<T> out({N, C, Do, Ho, Wo});
  const T inv = T(1) / T(k * k * k);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t z = 0; z < Do; ++z)
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t xx = 0; xx < Wo; ++xx) {
            T acc = 0;
            for (int64_t dz = 0; dz < k; ++dz)
              for (int64_t dy = 0; dy < k; ++dy)
                for (int64_t dx = 0; dx < k; ++dx)
                  acc += x.data[size_t(
                      (((n * C + c) * D + z * stride + dz) * H + y * stride +
                       dy) *
                          W +
                      xx * stride + dx)];
            out.data[size_t((((n * C + c) * Do + z) * Ho + y) * Wo + xx)] =
                acc * inv;
          }
  return out;
}

template <typename T>
Tensor<T> global_avgpool_loop(const Tensor<T>& x) {
  const int64_t N = x.shape[0], C = x.shape[1];
  const int64_t S = x.shape[2] * x.shape[3] * x.shape[4];
  Tensor<T> out({N, C});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      T acc = 0;
      for (int64_t i = 0; i < S; ++i)
        acc += x.data[size_t((n * C + c) * S + i)];
      out.data[size_t(n * C + c)] = acc / T(S);
    }
  return out;
}

template <typename T>
Tensor<T> dense_loop(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const int64_t N = x.shape[0], F = x.shape[1], K = w.shape[1];
  Tensor<T> out({N, K});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t kk = 0; kk < K; ++kk) {
      T acc = b.data[size_t(kk)];
      for (int64_t f = 0; f < F; ++f)
        acc += x.data[size_t(n * F + f)] * w.data[size_t(f * K + kk)];
      out.data[size_t(n * K + kk)] = acc;
    }
  return out;
}

template <typename T>
double max_abs_rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double x = double(a.data[i]), y = double(b.data[i]);
    const double d = std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)});
    worst = std::max(worst, d);
  }
  return worst;
}

// Mann-Whitney concordance with ties counted one half.
inline double concordance_auc(const std::vector<double>& scores,
                              const std::vector<int>& labels) {
  double num = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        num += 1.0;
      else if (scores[i] == scores[j])
        num += 0.5;
    }
  }
  return num / double(pairs);
}

// Central finite-difference gradient checker. `build` records a scalar loss on
// a fresh tape from the given leaves and must be a pure function of them; it
// runs once per probe, so keep leaf counts modest.
struct FdReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

template <typename T>
using BuildFn =
    std::function<NodeId(Tape<T>&, const std::vector<NodeId>&)>;

template <typename T>
double eval_loss(std::vector<Tensor<T>>& leaves, const BuildFn<T>& build) {
  Tape<T> tape;
  std::vector<NodeId> ids;
  ids.reserve(leaves.size());
  for (auto& l : leaves) ids.push_back(tape.input(l, false));
  NodeId loss = build(tape, ids);
  return double(tape.value(loss).data[0]);
}

template <typename T>
FdReport fd_check(std::vector<Tensor<T>> leaves, const BuildFn<T>& build,
                  double h = 1e-4, int64_t max_probes_per_leaf = 0) {
  std::vector<Tensor<T>> grads;
  grads.reserve(leaves.size());
  for (auto& l : leaves) grads.emplace_back(l.shape);
  {
    Tape<T> tape;
    std::vector<NodeId> ids;
    for (size_t i = 0; i < leaves.size(); ++i)
      ids.push_back(tape.param(&leaves[i], &grads[i]));
    NodeId loss = build(tape, ids);
    tape.backward(loss);
  }
  FdReport rep;
  for (size_t li = 0; li < leaves.size(); ++li) {
    const int64_t n = leaves[li].numel();
    const int64_t step =
        (max_probes_per_leaf > 0 && n > max_probes_per_leaf)
            ? n / max_probes_per_leaf
            : 1;
    for (int64_t e = 0; e < n; e += step) {
      const T orig = leaves[li].data[size_t(e)];
      leaves[li].data[size_t(e)] = T(double(orig) + h);
      const double fp = eval_loss(leaves, build);
      leaves[li].data[size_t(e)] = T(double(orig) - h);
      const double fm = eval_loss(leaves, build);
      leaves[li].data[size_t(e)] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = double(grads[li].data[size_t(e)]);
      const double rel =
          std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.checked;
    }
  }
  return rep;
}

// 32-bit mode: float analytic gradients probed against double-precision
// central differences of the same graph (FD in float would drown in roundoff).
inline FdReport fd_check_f32(const std::vector<Tensor<double>>& leaves_d,
                             const BuildFn<double>& build_d,
                             const BuildFn<float>& build_f, double h = 1e-4,
                             int64_t max_probes_per_leaf = 0) {
  std::vector<Tensor<float>> leaves_f;
  std::vector<Tensor<float>> grads_f;
  for (const auto& l : leaves_d) {
    Tensor<float> t(l.shape);
    for (size_t i = 0; i < l.data.size(); ++i) t.data[i] = float(l.data[i]);
    leaves_f.push_back(std::move(t));
    grads_f.emplace_back(l.shape);
  }
  {
    Tape<float> tape;
    std::vector<NodeId> ids;
    for (size_t i = 0; i < leaves_f.size(); ++i)
      ids.push_back(tape.param(&leaves_f[i], &grads_f[i]));
    NodeId loss = build_f(tape, ids);
    tape.backward(loss);
  }
  std::vector<Tensor<double>> work = leaves_d;
  FdReport rep;
  for (size_t li = 0; li < work.size(); ++li) {
    const int64_t n = work[li].numel();
    const int64_t step = (max_probes_per_leaf > 0 && n > max_probes_per_leaf)
                             ? n / max_probes_per_leaf
                             : 1;
    for (int64_t e = 0; e < n; e += step) {
      const double orig = work[li].data[size_t(e)];
      work[li].data[size_t(e)] = orig + h;
      const double fp = eval_loss(work, build_d);
      work[li].data[size_t(e)] = orig - h;
      const double fm = eval_loss(work, build_d);
      work[li].data[size_t(e)] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = double(grads_f[li].data[size_t(e)]);
      const double rel =
          std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace oracles
