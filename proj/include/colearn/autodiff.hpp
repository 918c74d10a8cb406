#pragma once

// Reverse-mode tape over dense [N,C,D,H,W] tensors. Records ops in forward
// order; backward() runs the closures once in reverse and accumulates
// gradients additively on fan-out. Templated on the scalar so gradient checks
// can run in double while training runs in float.
//
// Determinism contract: within any output element, accumulation is sequential
// in a fixed index order; threads only split independent output elements (or
// independent (n,c) slices where windows overlap), so results are bitwise
// identical for any thread count.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "colearn/common.hpp"
#include "colearn/tensor.hpp"

namespace colearn {

struct NodeId {
  int32_t idx = -1;
  uint32_t gen = 0;
};

// Plain 7-loop convolution, stride s, zero padding p. This is the contract
// the im2col fast path is tested against, and is usable on its own.
template <class T>
Tensor<T> conv3d_reference(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
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
          for (int64_t xo = 0; xo < Wo; ++xo) {
            T acc = b.numel() ? b.ptr()[co] : T(0);
            for (int64_t ci = 0; ci < Ci; ++ci)
              for (int64_t dz = 0; dz < k; ++dz)
                for (int64_t dy = 0; dy < k; ++dy)
                  for (int64_t dx = 0; dx < k; ++dx) {
                    const int64_t zi = z * stride - pad + dz;
                    const int64_t yi = y * stride - pad + dy;
                    const int64_t xi = xo * stride - pad + dx;
                    if (zi < 0 || zi >= D || yi < 0 || yi >= H || xi < 0 || xi >= W)
                      continue;
                    acc += x.at5(n, ci, zi, yi, xi) * w.at5(co, ci, dz, dy, dx);
                  }
            out.at5(n, co, z, y, xo) = acc;
          }
  return out;
}

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf holding a copy of v. needs_grad=true makes grad(id) meaningful.
  NodeId input(Tensor<T> v, bool needs_grad = false) {
    Node n;
    n.stored = std::move(v);
    n.needs_grad = needs_grad;
    return push(std::move(n));
  }

  // Leaf bound to external parameter storage. After backward(), d loss /
  // d param has been added into *grad_out.
  NodeId param(const Tensor<T>* value, Tensor<T>* grad_out) {
    require(value != nullptr && grad_out != nullptr, "param: null tensor");
    if (!value->same_shape(*grad_out))
      fail_data("param: value/grad shape mismatch ", shape_str(value->shape), " vs ",
                shape_str(grad_out->shape));
    Node n;
    n.external = value;
    n.external_grad = grad_out;
    n.needs_grad = true;
    return push(std::move(n));
  }

  const Tensor<T>& value(NodeId id) const { return node(id).val(); }

  // Gradient of the last backward() w.r.t. this node (zeros if none flowed).
  const Tensor<T>& grad(NodeId id) {
    Node& n = node(id);
    if (!n.grad_live) {
      n.grad = Tensor<T>::zeros(n.val().shape);
      n.grad_live = true;
    }
    return n.grad;
  }

  size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    ++gen_;
  }

  // -------------------------------------------------------------------- ops

  NodeId conv3d(NodeId xid, NodeId wid, NodeId bid, int stride, int pad) {
    const Tensor<T>& x = value(xid);
    const Tensor<T>& w = value(wid);
    const Tensor<T>& b = value(bid);
    require(x.shape.size() == 5, "conv3d: input must be 5-d, got " + shape_str(x.shape));
    require(w.shape.size() == 5, "conv3d: weight must be 5-d, got " + shape_str(w.shape));
    require(stride >= 1 && pad >= 0, "conv3d: stride must be >= 1 and pad >= 0");
    const int64_t k = w.shape[2];
    require(k >= 1 && k % 2 == 1, "conv3d: kernel must be odd");
    require(w.shape[3] == k && w.shape[4] == k, "conv3d: kernel must be cubic");
    if (w.shape[1] != x.shape[1])
      fail_data("conv3d: channel mismatch, input has ", x.shape[1], " weight expects ",
                w.shape[1]);
    require(b.shape.size() == 1 && b.shape[0] == w.shape[0],
            "conv3d: bias must have shape [out_channels]");

    const int64_t N = x.shape[0], Ci = x.shape[1];
    const int64_t Co = w.shape[0];
    std::array<int64_t, 3> in{x.shape[2], x.shape[3], x.shape[4]}, od;
    for (int i = 0; i < 3; ++i) {
      const int64_t span = in[size_t(i)] + 2 * pad - k;
      if (span < 0 || span % stride != 0)
        fail_data("conv3d: non-integral output dim for input extent ", in[size_t(i)],
                  " with kernel ", k, " stride ", stride, " pad ", pad);
      od[size_t(i)] = span / stride + 1;
    }
    const int64_t Do = od[0], Ho = od[1], Wo = od[2];
    const int64_t rows = Ci * k * k * k;
    const int64_t cols = Do * Ho * Wo;

    Tensor<T> out({N, Co, Do, Ho, Wo});
    {
      std::vector<T> col(size_t(rows * cols));
      for (int64_t n = 0; n < N; ++n) {
        im2col(x.ptr() + n * Ci * in[0] * in[1] * in[2], Ci, in, od, k, stride, pad,
               col.data());
        gemm_nn(Co, rows, cols, w.ptr(), col.data(), out.ptr() + n * Co * cols);
      }
      const T* bp = b.ptr();
      T* op = out.ptr();
      parallel_for(N * Co, [&](int64_t nc) {
        const T bv = bp[nc % Co];
        T* row = op + nc * cols;
        for (int64_t j = 0; j < cols; ++j) row[j] += bv;
      });
    }

    const bool wx = wants(xid), ww = wants(wid), wb = wants(bid);
    NodeId oid = push_op(std::move(out), wx || ww || wb);
    if (!node(oid).needs_grad) return oid;

    record(oid, [this, xid, wid, bid, oid, stride, pad, N, Ci, Co, in, od, k, rows,
                 cols, wx, ww, wb]() {
      const Tensor<T>& x = value(xid);
      const Tensor<T>& w = value(wid);
      const Tensor<T>& g = node(oid).grad;
      const int64_t Do = od[0], Ho = od[1], Wo = od[2];

      if (wb) {
        Tensor<T>& db = mutable_grad(bid);
        T* dbp = db.ptr();
        const T* gp = g.ptr();
        parallel_for(Co, [&](int64_t co) {
          T acc = 0;
          for (int64_t n = 0; n < N; ++n) {
            const T* row = gp + (n * Co + co) * cols;
            for (int64_t j = 0; j < cols; ++j) acc += row[j];
          }
          dbp[co] += acc;
        });
      }
      if (ww) {
        Tensor<T>& dw = mutable_grad(wid);
        std::vector<T> col(size_t(rows * cols)), colT(size_t(rows * cols));
        for (int64_t n = 0; n < N; ++n) {
          im2col(x.ptr() + n * Ci * in[0] * in[1] * in[2], Ci, in, od, k, stride, pad,
                 col.data());
          transpose2d(rows, cols, col.data(), colT.data());
          gemm_nn(Co, cols, rows, g.ptr() + n * Co * cols, colT.data(), dw.ptr(), true);
        }
      }
      if (wx) {
        Tensor<T>& dx = mutable_grad(xid);
        std::vector<T> wT(size_t(rows * Co)), dcol(size_t(rows * cols));
        transpose2d(Co, rows, w.ptr(), wT.data());
        const int64_t D = in[0], H = in[1], W = in[2];
        for (int64_t n = 0; n < N; ++n) {
          gemm_nn(rows, Co, cols, wT.data(), g.ptr() + n * Co * cols, dcol.data());
          T* dxn = dx.ptr() + n * Ci * D * H * W;
          // Gather form of col2im: each input voxel sums its own
          // contributions over kernel offsets in fixed order.
          parallel_for(Ci * D, [&](int64_t cz) {
            const int64_t ci = cz / D, zi = cz % D;
            for (int64_t yi = 0; yi < H; ++yi)
              for (int64_t xi = 0; xi < W; ++xi) {
                T acc = 0;
                for (int64_t dz = 0; dz < k; ++dz) {
                  const int64_t zn = zi + pad - dz;
                  if (zn < 0 || zn % stride != 0) continue;
                  const int64_t z = zn / stride;
                  if (z >= Do) continue;
                  for (int64_t dy = 0; dy < k; ++dy) {
                    const int64_t yn = yi + pad - dy;
                    if (yn < 0 || yn % stride != 0) continue;
                    const int64_t y = yn / stride;
                    if (y >= Ho) continue;
                    for (int64_t dxo = 0; dxo < k; ++dxo) {
                      const int64_t xn = xi + pad - dxo;
                      if (xn < 0 || xn % stride != 0) continue;
                      const int64_t xo = xn / stride;
                      if (xo >= Wo) continue;
                      const int64_t r = ((ci * k + dz) * k + dy) * k + dxo;
                      acc += dcol[size_t(r * cols + (z * Ho + y) * Wo + xo)];
                    }
                  }
                }
                dxn[(ci * D + zi) * H * W + yi * W + xi] += acc;
              }
          });
        }
      }
    });
    return oid;
  }

  NodeId batchnorm3d(NodeId xid, NodeId gid, NodeId bid, Tensor<T>* running_mean,
                     Tensor<T>* running_var, bool training, T momentum = T(0.1),
                     T eps = T(1e-5)) {
    const Tensor<T>& x = value(xid);
    require(x.shape.size() == 5, "batchnorm3d: input must be 5-d");
    const int64_t N = x.shape[0], C = x.shape[1];
    const int64_t spatial = x.shape[2] * x.shape[3] * x.shape[4];
    const int64_t m = N * spatial;
    const Tensor<T>& gamma = value(gid);
    const Tensor<T>& beta = value(bid);
    require(gamma.shape.size() == 1 && gamma.shape[0] == C &&
                beta.shape.size() == 1 && beta.shape[0] == C,
            "batchnorm3d: gamma/beta must have shape [C]");
    require(running_mean && running_var && running_mean->numel() == C &&
                running_var->numel() == C,
            "batchnorm3d: running stats must have shape [C]");
    if (training && m < 2) fail_data("batchnorm3d: training needs N*D*H*W >= 2, got ", m);

    std::vector<T> mu(static_cast<size_t>(C)), invstd(static_cast<size_t>(C));
    const T* xp = x.ptr();
    if (training) {
      std::vector<T> var(static_cast<size_t>(C));
      parallel_for(C, [&](int64_t c) {
        T s = 0;
        for (int64_t n = 0; n < N; ++n) {
          const T* p = xp + (n * C + c) * spatial;
          for (int64_t i = 0; i < spatial; ++i) s += p[i];
        }
        const T mean = s / T(m);
        T sq = 0;
        for (int64_t n = 0; n < N; ++n) {
          const T* p = xp + (n * C + c) * spatial;
          for (int64_t i = 0; i < spatial; ++i) {
            const T d = p[i] - mean;
            sq += d * d;
          }
        }
        mu[size_t(c)] = mean;
        T v = sq / T(m);
        if (v < 0) v = 0;
        var[size_t(c)] = v;
        invstd[size_t(c)] = T(1) / std::sqrt(v + eps);
      });
      // biased variance normalizes; the running estimate stores unbiased
      T* rm = running_mean->ptr();
      T* rv = running_var->ptr();
      const T unbias = T(m) / T(m - 1);
      for (int64_t c = 0; c < C; ++c) {
        rm[c] = (T(1) - momentum) * rm[c] + momentum * mu[size_t(c)];
        rv[c] = (T(1) - momentum) * rv[c] + momentum * var[size_t(c)] * unbias;
      }
    } else {
      const T* rm = running_mean->ptr();
      const T* rv = running_var->ptr();
      for (int64_t c = 0; c < C; ++c) {
        mu[size_t(c)] = rm[c];
        T v = rv[c];
        if (v < 0) v = 0;
        invstd[size_t(c)] = T(1) / std::sqrt(v + eps);
      }
    }

    Tensor<T> out(x.shape);
    {
      const T* gp = gamma.ptr();
      const T* bp = beta.ptr();
      T* op = out.ptr();
      parallel_for(N * C, [&](int64_t nc) {
        const int64_t c = nc % C;
        const T mc = mu[size_t(c)], is = invstd[size_t(c)], ga = gp[c], be = bp[c];
        const T* p = xp + nc * spatial;
        T* q = op + nc * spatial;
        for (int64_t i = 0; i < spatial; ++i) q[i] = ga * (p[i] - mc) * is + be;
      });
    }

    const bool wx = wants(xid), wg = wants(gid), wb = wants(bid);
    NodeId oid = push_op(std::move(out), wx || wg || wb);
    if (!node(oid).needs_grad) return oid;

    record(oid, [this, xid, gid, bid, oid, training, N, C, spatial, m,
                 mu = std::move(mu), invstd = std::move(invstd), wx, wg, wb]() {
      const Tensor<T>& x = value(xid);
      const Tensor<T>& gamma = value(gid);
      const Tensor<T>& g = node(oid).grad;
      const T* xp = x.ptr();
      const T* gp = g.ptr();
      const T* gap = gamma.ptr();

      // per channel: sum dy and sum dy*xhat (needed by all three grads)
      std::vector<T> sum_dy(static_cast<size_t>(C)), sum_dyx(static_cast<size_t>(C));
      parallel_for(C, [&](int64_t c) {
        const T mc = mu[size_t(c)], is = invstd[size_t(c)];
        T s0 = 0, s1 = 0;
        for (int64_t n = 0; n < N; ++n) {
          const T* dp = gp + (n * C + c) * spatial;
          const T* pp = xp + (n * C + c) * spatial;
          for (int64_t i = 0; i < spatial; ++i) {
            s0 += dp[i];
            s1 += dp[i] * (pp[i] - mc) * is;
          }
        }
        sum_dy[size_t(c)] = s0;
        sum_dyx[size_t(c)] = s1;
      });

      if (wg) {
        Tensor<T>& dg = mutable_grad(gid);
        for (int64_t c = 0; c < C; ++c) dg.ptr()[c] += sum_dyx[size_t(c)];
      }
      if (wb) {
        Tensor<T>& db = mutable_grad(bid);
        for (int64_t c = 0; c < C; ++c) db.ptr()[c] += sum_dy[size_t(c)];
      }
      if (wx) {
        Tensor<T>& dx = mutable_grad(xid);
        T* dxp = dx.ptr();
        parallel_for(N * C, [&](int64_t nc) {
          const int64_t c = nc % C;
          const T mc = mu[size_t(c)], is = invstd[size_t(c)], ga = gap[c];
          const T* dp = gp + nc * spatial;
          const T* pp = xp + nc * spatial;
          T* q = dxp + nc * spatial;
          if (training) {
            const T mean_dy = sum_dy[size_t(c)] / T(m);
            const T mean_dyx = sum_dyx[size_t(c)] / T(m);
            for (int64_t i = 0; i < spatial; ++i) {
              const T xh = (pp[i] - mc) * is;
              q[i] += ga * is * (dp[i] - mean_dy - xh * mean_dyx);
            }
          } else {
            for (int64_t i = 0; i < spatial; ++i) q[i] += ga * is * dp[i];
          }
        });
      }
    });
    return oid;
  }

  NodeId relu(NodeId xid) {
    const Tensor<T>& x = value(xid);
    Tensor<T> out(x.shape);
    const T* xp = x.ptr();
    T* op = out.ptr();
    parallel_for(x.numel(), [&](int64_t i) { op[i] = xp[i] > T(0) ? xp[i] : T(0); });
    NodeId oid = push_op(std::move(out), wants(xid));
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, xid, oid]() {
      const Tensor<T>& x = value(xid);
      const Tensor<T>& g = node(oid).grad;
      Tensor<T>& dx = mutable_grad(xid);
      const T* xp = x.ptr();
      const T* gp = g.ptr();
      T* dp = dx.ptr();
      // derivative at exactly 0 taken as 0
      parallel_for(x.numel(), [&](int64_t i) { dp[i] += xp[i] > T(0) ? gp[i] : T(0); });
    });
    return oid;
  }

  NodeId sigmoid(NodeId xid) {
    const Tensor<T>& x = value(xid);
    Tensor<T> out(x.shape);
    const T* xp = x.ptr();
    T* op = out.ptr();
    parallel_for(x.numel(), [&](int64_t i) { op[i] = T(1) / (T(1) + std::exp(-xp[i])); });
    NodeId oid = push_op(std::move(out), wants(xid));
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, xid, oid]() {
      const Tensor<T>& y = node(oid).val();
      const Tensor<T>& g = node(oid).grad;
      Tensor<T>& dx = mutable_grad(xid);
      const T* yp = y.ptr();
      const T* gp = g.ptr();
      T* dp = dx.ptr();
      parallel_for(y.numel(), [&](int64_t i) { dp[i] += gp[i] * yp[i] * (T(1) - yp[i]); });
    });
    return oid;
  }

  NodeId softmax(NodeId xid) {
    const Tensor<T>& x = value(xid);
    require(x.shape.size() == 2, "softmax: input must be [N,K]");
    const int64_t N = x.shape[0], K = x.shape[1];
    Tensor<T> out(x.shape);
    const T* xp = x.ptr();
    T* op = out.ptr();
    parallel_for(N, [&](int64_t n) {
      const T* r = xp + n * K;
      T* o = op + n * K;
      T mx = r[0];
      for (int64_t k = 1; k < K; ++k) mx = std::max(mx, r[k]);
      T s = 0;
      for (int64_t k = 0; k < K; ++k) {
        o[k] = std::exp(r[k] - mx);
        s += o[k];
      }
      for (int64_t k = 0; k < K; ++k) o[k] /= s;
    });
    NodeId oid = push_op(std::move(out), wants(xid));
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, xid, oid, N, K]() {
      const Tensor<T>& y = node(oid).val();
      const Tensor<T>& g = node(oid).grad;
      Tensor<T>& dx = mutable_grad(xid);
      const T* yp = y.ptr();
      const T* gp = g.ptr();
      T* dp = dx.ptr();
      parallel_for(N, [&](int64_t n) {
        const T* yr = yp + n * K;
        const T* gr = gp + n * K;
        T dot = 0;
        for (int64_t k = 0; k < K; ++k) dot += gr[k] * yr[k];
        T* dr = dp + n * K;
        for (int64_t k = 0; k < K; ++k) dr[k] += yr[k] * (gr[k] - dot);
      });
    });
    return oid;
  }

  NodeId maxpool3d(NodeId xid, int k = 2, int stride = 2) {
    auto geo = pool_geometry(value(xid), k, stride, "maxpool3d");
    const Tensor<T>& x = value(xid);
    const int64_t N = x.shape[0], C = x.shape[1];
    const auto [in, od] = geo;
    Tensor<T> out({N, C, od[0], od[1], od[2]});
    const int64_t ovox = od[0] * od[1] * od[2];
    const int64_t ivox = in[0] * in[1] * in[2];
    std::vector<int64_t> arg(size_t(N * C * ovox));
    const T* xp = x.ptr();
    T* op = out.ptr();
    parallel_for(N * C, [&](int64_t nc) {
      const T* src = xp + nc * ivox;
      T* dst = op + nc * ovox;
      int64_t* am = arg.data() + nc * ovox;
      int64_t o = 0;
      for (int64_t z = 0; z < od[0]; ++z)
        for (int64_t y = 0; y < od[1]; ++y)
          for (int64_t xo = 0; xo < od[2]; ++xo, ++o) {
            T best = 0;
            int64_t bi = -1;
            for (int64_t dz = 0; dz < k; ++dz)
              for (int64_t dy = 0; dy < k; ++dy)
                for (int64_t dx = 0; dx < k; ++dx) {
                  const int64_t idx = ((z * stride + dz) * in[1] + y * stride + dy) * in[2] +
                                      xo * stride + dx;
                  // first strictly-greater wins, so ties keep scan order
                  if (bi < 0 || src[idx] > best) {
                    best = src[idx];
                    bi = idx;
                  }
                }
            dst[o] = best;
            am[o] = bi;
          }
    });
    NodeId oid = push_op(std::move(out), wants(xid));
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, xid, oid, arg = std::move(arg), N, C, ovox, ivox]() {
      const Tensor<T>& g = node(oid).grad;
      Tensor<T>& dx = mutable_grad(xid);
      const T* gp = g.ptr();
      T* dp = dx.ptr();
      // scatter stays inside one (n,c) slice, so slices parallelize safely
      parallel_for(N * C, [&](int64_t nc) {
        const T* gr = gp + nc * ovox;
        const int64_t* am = arg.data() + nc * ovox;
        T* dr = dp + nc * ivox;
        for (int64_t o = 0; o < ovox; ++o) dr[am[o]] += gr[o];
      });
    });
    return oid;
  }

  NodeId avgpool3d(NodeId xid, int k, int stride) {
    auto geo = pool_geometry(value(xid), k, stride, "avgpool3d");
    const Tensor<T>& x = value(xid);
    const int64_t N = x.shape[0], C = x.shape[1];
    const auto [in, od] = geo;
    Tensor<T> out({N, C, od[0], od[1], od[2]});
    const int64_t ovox = od[0] * od[1] * od[2];
    const int64_t ivox = in[0] * in[1] * in[2];
    const T inv = T(1) / T(int64_t(k) * k * k);
    const T* xp = x.ptr();
    T* op = out.ptr();
    const auto ind = in;
    parallel_for(N * C, [&](int64_t nc) {
      const T* src = xp + nc * ivox;
      T* dst = op + nc * ovox;
      int64_t o = 0;
      for (int64_t z = 0; z < od[0]; ++z)
        for (int64_t y = 0; y < od[1]; ++y)
          for (int64_t xo = 0; xo < od[2]; ++xo, ++o) {
            T acc = 0;
            for (int64_t dz = 0; dz < k; ++dz)
              for (int64_t dy = 0; dy < k; ++dy)
                for (int64_t dx = 0; dx < k; ++dx)
                  acc += src[((z * stride + dz) * ind[1] + y * stride + dy) * ind[2] +
                             xo * stride + dx];
            dst[o] = acc * inv;
          }
    });
    NodeId oid = push_op(std::move(out), wants(xid));
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, xid, oid, k, stride, N, C, ovox, ivox, od, ind, inv]() {
      const Tensor<T>& g = node(oid).grad;
      Tensor<T>& dx = mutable_grad(xid);
      const T* gp = g.ptr();
      T* dp = dx.ptr();
      parallel_for(N * C, [&](int64_t nc) {
        const T* gr = gp + nc * ovox;
        T* dr = dp + nc * ivox;
        int64_t o = 0;
        for (int64_t z = 0; z < od[0]; ++z)
          for (int64_t y = 0; y < od[1]; ++y)
            for (int64_t xo = 0; xo < od[2]; ++xo, ++o) {
              const T v = gr[o] * inv;
              for (int64_t dz = 0; dz < k; ++dz)
                for (int64_t dy = 0; dy < k; ++dy)
                  for (int64_t dx = 0; dx < k; ++dx)
                    dr[((z * stride + dz) * ind[1] + y * stride + dy) * ind[2] +
                       xo * stride + dx] += v;
            }
      });
    });
    return oid;
  }

  NodeId global_avgpool(NodeId xid) {
    const Tensor<T>& x = value(xid);
    require(x.shape.size() == 5, "global_avgpool: input must be 5-d");
    const int64_t N = x.shape[0], C = x.shape[1];
    const int64_t vox = x.shape[2] * x.shape[3] * x.shape[4];
    Tensor<T> out({N, C});
    const T* xp = x.ptr();
    T* op = out.ptr();
    parallel_for(N * C, [&](int64_t nc) {
      const T* p = xp + nc * vox;
      T acc = 0;
      for (int64_t i = 0; i < vox; ++i) acc += p[i];
      op[nc] = acc / T(vox);
    });
    NodeId oid = push_op(std::move(out), wants(xid));
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, xid, oid, N, C, vox]() {
      const Tensor<T>& g = node(oid).grad;
      Tensor<T>& dx = mutable_grad(xid);
      const T* gp = g.ptr();
      T* dp = dx.ptr();
      parallel_for(N * C, [&](int64_t nc) {
        const T v = gp[nc] / T(vox);
        T* q = dp + nc * vox;
        for (int64_t i = 0; i < vox; ++i) q[i] += v;
      });
    });
    return oid;
  }

  NodeId dense(NodeId xid, NodeId wid, NodeId bid) {
    const Tensor<T>& x = value(xid);
    const Tensor<T>& w = value(wid);
    const Tensor<T>& b = value(bid);
    require(x.shape.size() == 2 && w.shape.size() == 2, "dense: x and W must be 2-d");
    if (x.shape[1] != w.shape[0])
      fail_data("dense: inner dims disagree, x is ", shape_str(x.shape), " W is ",
                shape_str(w.shape));
    const int64_t N = x.shape[0], F = x.shape[1], K = w.shape[1];
    require(b.shape.size() == 1 && b.shape[0] == K, "dense: bias must have shape [K]");

    Tensor<T> out({N, K});
    gemm_nn(N, F, K, x.ptr(), w.ptr(), out.ptr());
    {
      const T* bp = b.ptr();
      T* op = out.ptr();
      parallel_for(N, [&](int64_t n) {
        for (int64_t j = 0; j < K; ++j) op[n * K + j] += bp[j];
      });
    }
    const bool wx = wants(xid), ww = wants(wid), wb = wants(bid);
    NodeId oid = push_op(std::move(out), wx || ww || wb);
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, xid, wid, bid, oid, N, F, K, wx, ww, wb]() {
      const Tensor<T>& x = value(xid);
      const Tensor<T>& w = value(wid);
      const Tensor<T>& g = node(oid).grad;
      if (wb) {
        Tensor<T>& db = mutable_grad(bid);
        T* dbp = db.ptr();
        const T* gp = g.ptr();
        parallel_for(K, [&](int64_t j) {
          T acc = 0;
          for (int64_t n = 0; n < N; ++n) acc += gp[n * K + j];
          dbp[j] += acc;
        });
      }
      if (ww) {
        Tensor<T>& dw = mutable_grad(wid);
        std::vector<T> xT(size_t(F * N));
        transpose2d(N, F, x.ptr(), xT.data());
        gemm_nn(F, N, K, xT.data(), g.ptr(), dw.ptr(), true);
      }
      if (wx) {
        Tensor<T>& dx = mutable_grad(xid);
        std::vector<T> wT(size_t(K * F));
        transpose2d(F, K, w.ptr(), wT.data());
        gemm_nn(N, K, F, g.ptr(), wT.data(), dx.ptr(), true);
      }
    });
    return oid;
  }

  NodeId concat(const std::vector<NodeId>& xs, int axis) {
    require(!xs.empty(), "concat: needs at least one input");
    const Shape& s0 = value(xs[0]).shape;
    const int rank = int(s0.size());
    require(axis >= 0 && axis < rank, "concat: axis out of range");
    int64_t axis_total = 0;
    for (NodeId id : xs) {
      const Shape& s = value(id).shape;
      if (int(s.size()) != rank) fail_data("concat: rank mismatch");
      for (int d = 0; d < rank; ++d)
        if (d != axis && s[size_t(d)] != s0[size_t(d)])
          fail_data("concat: off-axis shape mismatch, ", shape_str(s0), " vs ",
                    shape_str(s));
      axis_total += s[size_t(axis)];
    }
    Shape os = s0;
    os[size_t(axis)] = axis_total;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[size_t(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= s0[size_t(d)];

    Tensor<T> out(os);
    {
      int64_t off = 0;
      for (NodeId id : xs) {
        const Tensor<T>& x = value(id);
        const int64_t ax = x.shape[size_t(axis)];
        const T* xp = x.ptr();
        T* op = out.ptr();
        parallel_for(outer, [&](int64_t o) {
          const T* src = xp + o * ax * inner;
          T* dst = op + (o * axis_total + off) * inner;
          for (int64_t i = 0; i < ax * inner; ++i) dst[i] = src[i];
        });
        off += ax;
      }
    }
    bool any = false;
    for (NodeId id : xs) any = any || wants(id);
    NodeId oid = push_op(std::move(out), any);
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, xs, oid, axis, axis_total, outer, inner]() {
      const Tensor<T>& g = node(oid).grad;
      const T* gp = g.ptr();
      int64_t off = 0;
      for (NodeId id : xs) {
        const int64_t ax = value(id).shape[size_t(axis)];
        if (wants(id)) {
          Tensor<T>& dx = mutable_grad(id);
          T* dp = dx.ptr();
          parallel_for(outer, [&](int64_t o) {
            const T* src = gp + (o * axis_total + off) * inner;
            T* dst = dp + o * ax * inner;
            for (int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
          });
        }
        off += ax;
      }
    });
    return oid;
  }

  // Align-corners trilinear interpolation to a spatial target >= source.
  NodeId trilinear_upsample(NodeId xid, std::array<int64_t, 3> to) {
    const Tensor<T>& x = value(xid);
    require(x.shape.size() == 5, "trilinear_upsample: input must be 5-d");
    const int64_t N = x.shape[0], C = x.shape[1];
    const std::array<int64_t, 3> in{x.shape[2], x.shape[3], x.shape[4]};
    for (int i = 0; i < 3; ++i) {
      require(to[size_t(i)] >= in[size_t(i)],
              "trilinear_upsample: target must be >= source per axis");
      require(to[size_t(i)] >= 1, "trilinear_upsample: target must be positive");
    }
    const std::array<T, 3> scale{
        to[0] > 1 ? T(in[0] - 1) / T(to[0] - 1) : T(0),
        to[1] > 1 ? T(in[1] - 1) / T(to[1] - 1) : T(0),
        to[2] > 1 ? T(in[2] - 1) / T(to[2] - 1) : T(0)};

    const int64_t ivox = in[0] * in[1] * in[2];
    const int64_t ovox = to[0] * to[1] * to[2];
    Tensor<T> out({N, C, to[0], to[1], to[2]});
    const T* xp = x.ptr();
    T* op = out.ptr();

    auto corner = [](T src, int64_t n, int64_t& i0, int64_t& i1, T& f) {
      i0 = int64_t(std::floor(src));
      if (i0 > n - 1) i0 = n - 1;
      if (i0 < 0) i0 = 0;
      i1 = std::min(i0 + 1, n - 1);
      f = src - T(i0);
    };
    parallel_for(N * C, [&](int64_t nc) {
      const T* src = xp + nc * ivox;
      T* dst = op + nc * ovox;
      int64_t o = 0;
      for (int64_t z = 0; z < to[0]; ++z) {
        int64_t z0, z1;
        T fz;
        corner(T(z) * scale[0], in[0], z0, z1, fz);
        for (int64_t y = 0; y < to[1]; ++y) {
          int64_t y0, y1;
          T fy;
          corner(T(y) * scale[1], in[1], y0, y1, fy);
          for (int64_t xo = 0; xo < to[2]; ++xo, ++o) {
            int64_t x0, x1;
            T fx;
            corner(T(xo) * scale[2], in[2], x0, x1, fx);
            auto at = [&](int64_t zz, int64_t yy, int64_t xx) {
              return src[(zz * in[1] + yy) * in[2] + xx];
            };
            const T c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
            const T c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
            const T c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
            const T c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
            dst[o] = (c00 * (1 - fy) + c01 * fy) * (1 - fz) +
                     (c10 * (1 - fy) + c11 * fy) * fz;
          }
        }
      }
    });
    NodeId oid = push_op(std::move(out), wants(xid));
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, xid, oid, N, C, in, to, scale, ivox, ovox, corner]() {
      const Tensor<T>& g = node(oid).grad;
      Tensor<T>& dx = mutable_grad(xid);
      const T* gp = g.ptr();
      T* dp = dx.ptr();
      // adjoint scatters into the 8 corners; confined to one (n,c) slice
      parallel_for(N * C, [&](int64_t nc) {
        const T* gr = gp + nc * ovox;
        T* dr = dp + nc * ivox;
        int64_t o = 0;
        for (int64_t z = 0; z < to[0]; ++z) {
          int64_t z0, z1;
          T fz;
          corner(T(z) * scale[0], in[0], z0, z1, fz);
          for (int64_t y = 0; y < to[1]; ++y) {
            int64_t y0, y1;
            T fy;
            corner(T(y) * scale[1], in[1], y0, y1, fy);
            for (int64_t xo = 0; xo < to[2]; ++xo, ++o) {
              int64_t x0, x1;
              T fx;
              corner(T(xo) * scale[2], in[2], x0, x1, fx);
              const T v = gr[o];
              auto add = [&](int64_t zz, int64_t yy, int64_t xx, T w) {
                dr[(zz * in[1] + yy) * in[2] + xx] += v * w;
              };
              add(z0, y0, x0, (1 - fz) * (1 - fy) * (1 - fx));
              add(z0, y0, x1, (1 - fz) * (1 - fy) * fx);
              add(z0, y1, x0, (1 - fz) * fy * (1 - fx));
              add(z0, y1, x1, (1 - fz) * fy * fx);
              add(z1, y0, x0, fz * (1 - fy) * (1 - fx));
              add(z1, y0, x1, fz * (1 - fy) * fx);
              add(z1, y1, x0, fz * fy * (1 - fx));
              add(z1, y1, x1, fz * fy * fx);
            }
          }
        }
      });
    });
    return oid;
  }

  NodeId add(NodeId aid, NodeId bid) {
    const Tensor<T>& a = value(aid);
    const Tensor<T>& b = value(bid);
    if (!a.same_shape(b))
      fail_data("add: shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape));
    Tensor<T> out(a.shape);
    const T* ap = a.ptr();
    const T* bp = b.ptr();
    T* op = out.ptr();
    parallel_for(a.numel(), [&](int64_t i) { op[i] = ap[i] + bp[i]; });
    const bool wa = wants(aid), wb = wants(bid);
    NodeId oid = push_op(std::move(out), wa || wb);
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, aid, bid, oid, wa, wb]() {
      const Tensor<T>& g = node(oid).grad;
      const T* gp = g.ptr();
      if (wa) {
        T* dp = mutable_grad(aid).ptr();
        parallel_for(g.numel(), [&](int64_t i) { dp[i] += gp[i]; });
      }
      if (wb) {
        T* dp = mutable_grad(bid).ptr();
        parallel_for(g.numel(), [&](int64_t i) { dp[i] += gp[i]; });
      }
    });
    return oid;
  }

  // out[n,c,...] = alpha[n,0,...] * x[n,c,...]; the single-channel gate
  // broadcasts across the channels of x.
  NodeId mul_gate(NodeId aid, NodeId xid) {
    const Tensor<T>& alpha = value(aid);
    const Tensor<T>& x = value(xid);
    require(alpha.shape.size() == 5 && x.shape.size() == 5,
            "mul_gate: inputs must be 5-d");
    require(alpha.shape[1] == 1, "mul_gate: gate must have a single channel");
    if (alpha.shape[0] != x.shape[0] || alpha.shape[2] != x.shape[2] ||
        alpha.shape[3] != x.shape[3] || alpha.shape[4] != x.shape[4])
      fail_data("mul_gate: gate shape ", shape_str(alpha.shape),
                " incompatible with input ", shape_str(x.shape));
    const int64_t N = x.shape[0], C = x.shape[1];
    const int64_t vox = x.shape[2] * x.shape[3] * x.shape[4];
    Tensor<T> out(x.shape);
    const T* ap = alpha.ptr();
    const T* xp = x.ptr();
    T* op = out.ptr();
    parallel_for(N * C, [&](int64_t nc) {
      const T* g = ap + (nc / C) * vox;
      const T* p = xp + nc * vox;
      T* q = op + nc * vox;
      for (int64_t i = 0; i < vox; ++i) q[i] = g[i] * p[i];
    });
    const bool wa = wants(aid), wx = wants(xid);
    NodeId oid = push_op(std::move(out), wa || wx);
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, aid, xid, oid, N, C, vox, wa, wx]() {
      const Tensor<T>& alpha = value(aid);
      const Tensor<T>& x = value(xid);
      const Tensor<T>& g = node(oid).grad;
      const T* ap = alpha.ptr();
      const T* xp = x.ptr();
      const T* gp = g.ptr();
      if (wx) {
        Tensor<T>& dx = mutable_grad(xid);
        T* dp = dx.ptr();
        parallel_for(N * C, [&](int64_t nc) {
          const T* gate = ap + (nc / C) * vox;
          const T* gr = gp + nc * vox;
          T* q = dp + nc * vox;
          for (int64_t i = 0; i < vox; ++i) q[i] += gate[i] * gr[i];
        });
      }
      if (wa) {
        Tensor<T>& da = mutable_grad(aid);
        T* dp = da.ptr();
        // gate gradient sums over channels in ascending c order
        parallel_for(N, [&](int64_t n) {
          T* q = dp + n * vox;
          for (int64_t c = 0; c < C; ++c) {
            const T* gr = gp + (n * C + c) * vox;
            const T* p = xp + (n * C + c) * vox;
            for (int64_t i = 0; i < vox; ++i) q[i] += gr[i] * p[i];
          }
        });
      }
    });
    return oid;
  }

  // Mean over the batch of -log softmax(logits)[label], optionally weighted
  // per class; weighted form is sum(w_i * nll_i) / sum(w_i).
  NodeId cross_entropy(NodeId lid, const std::vector<int>& labels,
                       std::array<T, 2> class_weights = {T(1), T(1)}) {
    const Tensor<T>& logits = value(lid);
    require(logits.shape.size() == 2 && logits.shape[1] == 2,
            "cross_entropy: logits must be [N,2]");
    const int64_t N = logits.shape[0];
    if (int64_t(labels.size()) != N)
      fail_data("cross_entropy: ", labels.size(), " labels for batch of ", N);
    for (size_t i = 0; i < labels.size(); ++i)
      if (labels[i] != 0 && labels[i] != 1)
        fail_data("cross_entropy: label outside {0,1} at index ", i, ": ", labels[i]);
    require(class_weights[0] > 0 && class_weights[1] > 0,
            "cross_entropy: class weights must be positive");

    const T* lp = logits.ptr();
    T wsum = 0, loss = 0;
    for (int64_t n = 0; n < N; ++n) {
      const T a = lp[n * 2], b = lp[n * 2 + 1];
      const T mx = std::max(a, b);
      const T lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
      const T nll = lse - (labels[size_t(n)] == 0 ? a : b);
      const T w = class_weights[size_t(labels[size_t(n)])];
      loss += w * nll;
      wsum += w;
    }
    Tensor<T> out({1});
    out.ptr()[0] = loss / wsum;

    NodeId oid = push_op(std::move(out), wants(lid));
    if (!node(oid).needs_grad) return oid;
    record(oid, [this, lid, oid, labels, class_weights, N, wsum]() {
      const Tensor<T>& logits = value(lid);
      const T gs = node(oid).grad.ptr()[0];
      Tensor<T>& dl = mutable_grad(lid);
      const T* lp = logits.ptr();
      T* dp = dl.ptr();
      parallel_for(N, [&](int64_t n) {
        const T a = lp[n * 2], b = lp[n * 2 + 1];
        const T mx = std::max(a, b);
        const T ea = std::exp(a - mx), eb = std::exp(b - mx);
        const T p0 = ea / (ea + eb);
        const int lab = labels[size_t(n)];
        const T w = class_weights[size_t(lab)] / wsum;
        dp[n * 2] += gs * w * (p0 - (lab == 0 ? T(1) : T(0)));
        dp[n * 2 + 1] += gs * w * ((T(1) - p0) - (lab == 1 ? T(1) : T(0)));
      });
    });
    return oid;
  }

  // ---------------------------------------------------------------- backward

  void backward(NodeId loss) {
    Node& ln = node(loss);
    if (ln.val().numel() != 1)
      fail_data("backward: loss must be scalar, got shape ", shape_str(ln.val().shape));
    // reset gradient state from any previous pass
    for (Node& n : nodes_) {
      n.grad = Tensor<T>();
      n.grad_live = false;
    }
    {
      Node& l = node(loss);
      l.grad = Tensor<T>::full(l.val().shape, T(1));
      l.grad_live = true;
    }
    for (int32_t i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (!n.grad_live) continue;  // nothing downstream consumed this node
      if (n.backfn) n.backfn();
      if (n.external_grad) {
        T* dst = n.external_grad->ptr();
        const T* src = n.grad.ptr();
        const int64_t m = n.grad.numel();
        parallel_for(m, [&](int64_t j) { dst[j] += src[j]; });
      }
    }
  }

 private:
  struct Node {
    Tensor<T> stored;
    const Tensor<T>* external = nullptr;
    Tensor<T>* external_grad = nullptr;
    Tensor<T> grad;
    bool grad_live = false;
    bool needs_grad = false;
    std::function<void()> backfn;

    const Tensor<T>& val() const { return external ? *external : stored; }
  };

  std::vector<Node> nodes_;
  uint32_t gen_ = 1;

  Node& node(NodeId id) {
    if (id.gen != gen_) fail_data("tape: node id used after tape reset");
    if (id.idx < 0 || size_t(id.idx) >= nodes_.size())
      fail_data("tape: node id out of range");
    return nodes_[size_t(id.idx)];
  }
  const Node& node(NodeId id) const {
    return const_cast<Tape*>(this)->node(id);
  }

  bool wants(NodeId id) { return node(id).needs_grad; }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeId{int32_t(nodes_.size() - 1), gen_};
  }

  NodeId push_op(Tensor<T> value, bool needs_grad) {
    Node n;
    n.stored = std::move(value);
    n.needs_grad = needs_grad;
    return push(std::move(n));
  }

  void record(NodeId id, std::function<void()> fn) {
    node(id).backfn = std::move(fn);
  }

  // Grad tensor of id, allocated on first touch during backward.
  Tensor<T>& mutable_grad(NodeId id) {
    Node& n = node(id);
    if (!n.grad_live) {
      n.grad = Tensor<T>::zeros(n.val().shape);
      n.grad_live = true;
    }
    return n.grad;
  }

  static std::pair<std::array<int64_t, 3>, std::array<int64_t, 3>> pool_geometry(
      const Tensor<T>& x, int k, int stride, const char* what) {
    require(x.shape.size() == 5, strcat_msg(what, ": input must be 5-d"));
    require(k >= 1 && stride >= 1, strcat_msg(what, ": window and stride must be >= 1"));
    std::array<int64_t, 3> in{x.shape[2], x.shape[3], x.shape[4]}, od;
    for (int i = 0; i < 3; ++i) {
      const int64_t span = in[size_t(i)] - k;
      if (span < 0 || span % stride != 0)
        fail_data(what, ": extent ", in[size_t(i)], " not coverable by window ", k,
                  " stride ", stride);
      od[size_t(i)] = span / stride + 1;
    }
    return {in, od};
  }

  // col[(ci,dz,dy,dx), (z,y,x)] layout, zero outside bounds.
  static void im2col(const T* x, int64_t Ci, std::array<int64_t, 3> in,
                     std::array<int64_t, 3> od, int64_t k, int64_t stride, int64_t pad,
                     T* col) {
    const int64_t D = in[0], H = in[1], W = in[2];
    const int64_t Do = od[0], Ho = od[1], Wo = od[2];
    const int64_t cols = Do * Ho * Wo;
    parallel_for(Ci * k * k * k, [&](int64_t r) {
      const int64_t ci = r / (k * k * k);
      const int64_t rem = r % (k * k * k);
      const int64_t dz = rem / (k * k), dy = (rem / k) % k, dx = rem % k;
      const T* src = x + ci * D * H * W;
      T* dst = col + r * cols;
      int64_t o = 0;
      for (int64_t z = 0; z < Do; ++z) {
        const int64_t zi = z * stride - pad + dz;
        const bool zin = zi >= 0 && zi < D;
        for (int64_t y = 0; y < Ho; ++y) {
          const int64_t yi = y * stride - pad + dy;
          const bool yin = yi >= 0 && yi < H;
          for (int64_t xo = 0; xo < Wo; ++xo, ++o) {
            const int64_t xi = xo * stride - pad + dx;
            dst[o] = (zin && yin && xi >= 0 && xi < W) ? src[(zi * H + yi) * W + xi]
                                                       : T(0);
          }
        }
      }
    });
  }
};

}  // namespace colearn
