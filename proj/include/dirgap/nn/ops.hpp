#pragma once

// Differentiable primitives: exactly what a GPT-2 style block and the
// character MLP need. Matrices are row-major; a linear layer stores its
// weight as [out, in] and computes y = x W^T + b.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "dirgap/errors.hpp"
#include "dirgap/nn/tape.hpp"
#include "dirgap/rng.hpp"

namespace dirgap::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using RowVecMap = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>;

namespace detail {

inline void require(bool ok, const char* what) {
  if (!ok) throw ConfigError(what);
}

template <class T>
MatMap<T> mat(T* p, std::size_t rows, std::size_t cols) {
  return MatMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

}  // namespace detail

/// y = x W^T (+ b). x: [N, in], W: [out, in], b: [out].
template <class T>
Var linear(Tape<T>& tape, Var x, Var w, const Var* b = nullptr) {
  const auto& xs = tape.shape(x);
  const auto& ws = tape.shape(w);
  detail::require(xs.size() == 2 && ws.size() == 2 && xs[1] == ws[1],
                  "linear: shape mismatch");
  const std::size_t n = xs[0], in = xs[1], out = ws[0];
  if (b) detail::require(tape.size(*b) == out, "linear: bias size mismatch");
  const bool rg = tape.requires_grad(x) || tape.requires_grad(w) ||
                  (b && tape.requires_grad(*b));
  Var y = tape.make({n, out}, rg);
  {
    auto Y = detail::mat(tape.node(y).value, n, out);
    auto X = detail::mat(tape.node(x).value, n, in);
    auto W = detail::mat(tape.node(w).value, out, in);
    Y.noalias() = X * W.transpose();
    if (b) Y.rowwise() += RowVecMap<T>(tape.node(*b).value, static_cast<Eigen::Index>(out));
  }
  ensure_finite<T>(tape.value(y), "linear");
  if (rg) {
    const Var bias = b ? *b : Var{};
    const bool has_bias = b != nullptr;
    tape.on_backward([&tape, x, w, y, bias, has_bias, n, in, out] {
      auto dY = detail::mat(tape.node(y).grad, n, out);
      if (tape.requires_grad(x))
        detail::mat(tape.node(x).grad, n, in).noalias() +=
            dY * detail::mat(tape.node(w).value, out, in);
      if (tape.requires_grad(w))
        detail::mat(tape.node(w).grad, out, in).noalias() +=
            dY.transpose() * detail::mat(tape.node(x).value, n, in);
      if (has_bias && tape.requires_grad(bias))
        RowVecMap<T>(tape.node(bias).grad, static_cast<Eigen::Index>(out)) +=
            dY.colwise().sum();
    });
  }
  return y;
}

template <class T>
Var linear(Tape<T>& tape, Var x, Var w, Var b) {
  return linear(tape, x, w, &b);
}

/// Rows of `table` [V, d] selected by ids -> [ids.size(), d].
template <class T>
Var embedding(Tape<T>& tape, Var table, std::span<const std::int32_t> ids) {
  const auto& ts = tape.shape(table);
  detail::require(ts.size() == 2, "embedding: table must be 2-D");
  const std::size_t vocab = ts[0], d = ts[1], n = ids.size();
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw ConfigError("embedding: id " + std::to_string(id) + " out of range");
  Var y = tape.make({n, d}, tape.requires_grad(table));
  const T* src = tape.node(table).value;
  T* dst = tape.node(y).value;
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(src + static_cast<std::size_t>(ids[i]) * d, d, dst + i * d);
  if (tape.requires_grad(table)) {
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    tape.on_backward([&tape, table, y, d, saved = std::move(saved)] {
      T* g = tape.node(table).grad;
      const T* dy = tape.node(y).grad;
      for (std::size_t i = 0; i < saved.size(); ++i) {
        T* row = g + static_cast<std::size_t>(saved[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += dy[i * d + j];
      }
    });
  }
  return y;
}

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  detail::require(tape.shape(a) == tape.shape(b), "add: shape mismatch");
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  Var y = tape.make(tape.shape(a), rg);
  const std::size_t n = tape.size(a);
  {
    const T* pa = tape.node(a).value;
    const T* pb = tape.node(b).value;
    T* py = tape.node(y).value;
    for (std::size_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
  }
  if (rg) {
    tape.on_backward([&tape, a, b, y, n] {
      const T* dy = tape.node(y).grad;
      for (Var v : {a, b})
        if (T* g = tape.node(v).grad)
          for (std::size_t i = 0; i < n; ++i) g[i] += dy[i];
    });
  }
  return y;
}

template <class T>
Var scale(Tape<T>& tape, Var x, T factor) {
  Var y = tape.make(tape.shape(x), tape.requires_grad(x));
  const std::size_t n = tape.size(x);
  for (std::size_t i = 0; i < n; ++i) tape.node(y).value[i] = factor * tape.node(x).value[i];
  if (tape.requires_grad(x)) {
    tape.on_backward([&tape, x, y, n, factor] {
      T* g = tape.node(x).grad;
      const T* dy = tape.node(y).grad;
      for (std::size_t i = 0; i < n; ++i) g[i] += factor * dy[i];
    });
  }
  return y;
}

// Same storage under a new shape; gradients flow through the shared buffer.
template <class T>
Var view(Tape<T>& tape, Var x, Shape shape) {
  detail::require(numel(shape) == tape.size(x), "view: element count mismatch");
  Var y = tape.make({1}, false);
  auto& n = tape.node(y);
  n.own_value.clear();
  n.shape = std::move(shape);
  n.value = tape.node(x).value;
  n.grad = tape.node(x).grad;
  return y;
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
  Var y = tape.make({1}, tape.requires_grad(x));
  const std::size_t n = tape.size(x);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += tape.node(x).value[i];
  tape.node(y).value[0] = static_cast<T>(acc);
  if (tape.requires_grad(x)) {
    tape.on_backward([&tape, x, y, n] {
      const T g = tape.node(y).grad[0];
      T* dx = tape.node(x).grad;
      for (std::size_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return y;
}

// 0.5 * sum(x^2)
template <class T>
Var half_sum_squares(Tape<T>& tape, Var x) {
  Var y = tape.make({1}, tape.requires_grad(x));
  const std::size_t n = tape.size(x);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = tape.node(x).value[i];
    acc += 0.5 * v * v;
  }
  tape.node(y).value[0] = static_cast<T>(acc);
  if (tape.requires_grad(x)) {
    tape.on_backward([&tape, x, y, n] {
      const T g = tape.node(y).grad[0];
      T* dx = tape.node(x).grad;
      const T* xv = tape.node(x).value;
      for (std::size_t i = 0; i < n; ++i) dx[i] += g * xv[i];
    });
  }
  return y;
}

/// Row-wise layer normalization over the last dimension.
template <class T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, T eps = T(1e-5)) {
  const auto& xs = tape.shape(x);
  detail::require(xs.size() == 2, "layer_norm: input must be 2-D");
  const std::size_t n = xs[0], d = xs[1];
  detail::require(tape.size(gain) == d && tape.size(bias) == d, "layer_norm: param size");
  const bool rg =
      tape.requires_grad(x) || tape.requires_grad(gain) || tape.requires_grad(bias);
  Var y = tape.make({n, d}, rg);
  T* xhat = tape.scratch(n * d);
  T* rstd = tape.scratch(n);
  {
    const T* px = tape.node(x).value;
    const T* g = tape.node(gain).value;
    const T* b = tape.node(bias).value;
    T* py = tape.node(y).value;
    for (std::size_t r = 0; r < n; ++r) {
      const T* row = px + r * d;
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += row[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = row[j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
      rstd[r] = static_cast<T>(rs);
      for (std::size_t j = 0; j < d; ++j) {
        const T xh = static_cast<T>((row[j] - mean) * rs);
        xhat[r * d + j] = xh;
        py[r * d + j] = xh * g[j] + b[j];
      }
    }
  }
  ensure_finite<T>(tape.value(y), "layer_norm");
  if (rg) {
    tape.on_backward([&tape, x, gain, bias, y, n, d, xhat, rstd] {
      const T* dy = tape.node(y).grad;
      const T* g = tape.node(gain).value;
      T* dg = tape.node(gain).grad;
      T* db = tape.node(bias).grad;
      T* dx = tape.node(x).grad;
      for (std::size_t r = 0; r < n; ++r) {
        const T* dyr = dy + r * d;
        const T* xh = xhat + r * d;
        if (dg)
          for (std::size_t j = 0; j < d; ++j) dg[j] += dyr[j] * xh[j];
        if (db)
          for (std::size_t j = 0; j < d; ++j) db[j] += dyr[j];
        if (dx) {
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
          }
          mean_dxh /= static_cast<double>(d);
          mean_dxh_xh /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = dyr[j] * g[j];
            dx[r * d + j] +=
                static_cast<T>(rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh));
          }
        }
      }
    });
  }
  return y;
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
  Var y = tape.make(tape.shape(x), tape.requires_grad(x));
  const std::size_t n = tape.size(x);
  const T* px = tape.node(x).value;
  T* py = tape.node(y).value;
  for (std::size_t i = 0; i < n; ++i) py[i] = px[i] > T{0} ? px[i] : T{0};
  if (tape.requires_grad(x)) {
    tape.on_backward([&tape, x, y, n] {
      const T* xv = tape.node(x).value;
      const T* dy = tape.node(y).grad;
      T* dx = tape.node(x).grad;
      for (std::size_t i = 0; i < n; ++i)
        if (xv[i] > T{0}) dx[i] += dy[i];
    });
  }
  return y;
}

/// GELU, tanh approximation (the GPT-2 variant).
template <class T>
Var gelu(Tape<T>& tape, Var x) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  Var y = tape.make(tape.shape(x), tape.requires_grad(x));
  const std::size_t n = tape.size(x);
  const T* px = tape.node(x).value;
  T* py = tape.node(y).value;
  T* th = tape.scratch(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T v = px[i];
    th[i] = std::tanh(kC * (v + kA * v * v * v));
    py[i] = T(0.5) * v * (T(1) + th[i]);
  }
  if (tape.requires_grad(x)) {
    tape.on_backward([&tape, x, y, n, th] {
      const T* xv = tape.node(x).value;
      const T* dy = tape.node(y).grad;
      T* dx = tape.node(x).grad;
      for (std::size_t i = 0; i < n; ++i) {
        const T v = xv[i];
        const T t = th[i];
        const T dt = (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v);
        dx[i] += dy[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
      }
    });
  }
  return y;
}

/// Inverted dropout. Identity (the same node) outside training or when p = 0.
template <class T>
Var dropout(Tape<T>& tape, Var x, double p, Rng* rng, bool train) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  if (!rng) throw ConfigError("dropout needs an rng");
  const std::size_t n = tape.size(x);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  T* mask = tape.scratch(n);
  for (std::size_t i = 0; i < n; ++i) mask[i] = rng->bernoulli(p) ? T{0} : keep_scale;
  Var y = tape.make(tape.shape(x), tape.requires_grad(x));
  const T* px = tape.node(x).value;
  T* py = tape.node(y).value;
  for (std::size_t i = 0; i < n; ++i) py[i] = px[i] * mask[i];
  if (tape.requires_grad(x)) {
    tape.on_backward([&tape, x, y, n, mask] {
      const T* dy = tape.node(y).grad;
      T* dx = tape.node(x).grad;
      for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * mask[i];
    });
  }
  return y;
}

/// Multi-head self-attention with a causal mask.
///
/// qkv: [batch * seq, 3 * d] holding q | k | v blocks (GPT-2 c_attn layout);
/// head h reads columns [h*hd, (h+1)*hd) of each block. Position t attends
/// only to positions <= t. Returns the concatenated heads, [batch * seq, d].
template <class T>
Var causal_self_attention(Tape<T>& tape, Var qkv, std::size_t batch, std::size_t seq,
                          std::size_t heads, double attn_dropout, Rng* rng, bool train) {
  const auto& s = tape.shape(qkv);
  detail::require(s.size() == 2 && s[0] == batch * seq && s[1] % 3 == 0,
                  "attention: qkv must be [batch*seq, 3d]");
  const std::size_t d = s[1] / 3;
  detail::require(heads > 0 && d % heads == 0, "attention: d not divisible by heads");
  const std::size_t hd = d / heads;
  const auto T_ = static_cast<Eigen::Index>(seq);
  const auto HD = static_cast<Eigen::Index>(hd);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  const bool use_drop = train && attn_dropout > 0.0;
  if (use_drop && !rng) throw ConfigError("attention dropout needs an rng");

  Var y = tape.make({batch * seq, d}, tape.requires_grad(qkv));
  // Saved softmax probabilities and dropout multipliers, [batch, heads, seq, seq].
  T* probs = tape.scratch(batch * heads * seq * seq);
  T* drop = use_drop ? tape.scratch(batch * heads * seq * seq) : nullptr;
  const T keep_scale = use_drop ? static_cast<T>(1.0 / (1.0 - attn_dropout)) : T{1};

  const T* base = tape.node(qkv).value;
  T* out = tape.node(y).value;
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));
  RowMat<T> scores(T_, T_), pd(T_, T_);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* q0 = base + b * seq * 3 * d + h * hd;
      StridedMap<T> Q(const_cast<T*>(q0), T_, HD, in_stride);
      StridedMap<T> K(const_cast<T*>(q0 + d), T_, HD, in_stride);
      StridedMap<T> V(const_cast<T*>(q0 + 2 * d), T_, HD, in_stride);
      StridedMap<T> O(out + b * seq * d + h * hd, T_, HD, out_stride);
      scores.noalias() = (Q * K.transpose()) * scale;
      T* P = probs + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        T m = scores(static_cast<Eigen::Index>(i), 0);
        for (std::size_t j = 1; j <= i; ++j)
          m = std::max(m, scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T e = std::exp(
              scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - m);
          P[i * seq + j] = e;
          z += e;
        }
        const T inv = static_cast<T>(1.0 / z);
        for (std::size_t j = 0; j <= i; ++j) P[i * seq + j] *= inv;
      }
      MatMap<T> Pm(P, T_, T_);
      if (use_drop) {
        T* D = drop + (b * heads + h) * seq * seq;
        for (std::size_t i = 0; i < seq; ++i)
          for (std::size_t j = 0; j <= i; ++j)
            D[i * seq + j] = rng->bernoulli(attn_dropout) ? T{0} : keep_scale;
        pd = Pm.cwiseProduct(MatMap<T>(D, T_, T_));
        O.noalias() = pd * V;
      } else {
        O.noalias() = Pm * V;
      }
    }
  }
  ensure_finite<T>(tape.value(y), "causal_self_attention");

  if (tape.requires_grad(qkv)) {
    tape.on_backward([&tape, qkv, y, batch, seq, heads, d, hd, scale, use_drop, probs,
                      drop] {
      const auto T_ = static_cast<Eigen::Index>(seq);
      const auto HD = static_cast<Eigen::Index>(hd);
      const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * d));
      const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(d));
      const T* base = tape.node(qkv).value;
      T* gbase = tape.node(qkv).grad;
      T* dout = tape.node(y).grad;
      RowMat<T> dP(T_, T_), dS(T_, T_), pd(T_, T_);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = b * seq * 3 * d + h * hd;
          StridedMap<T> Q(const_cast<T*>(base + off), T_, HD, in_stride);
          StridedMap<T> K(const_cast<T*>(base + off + d), T_, HD, in_stride);
          StridedMap<T> V(const_cast<T*>(base + off + 2 * d), T_, HD, in_stride);
          StridedMap<T> dQ(gbase + off, T_, HD, in_stride);
          StridedMap<T> dK(gbase + off + d, T_, HD, in_stride);
          StridedMap<T> dV(gbase + off + 2 * d, T_, HD, in_stride);
          StridedMap<T> dO(dout + b * seq * d + h * hd, T_, HD, out_stride);
          const std::size_t poff = (b * heads + h) * seq * seq;
          MatMap<T> Pm(probs + poff, T_, T_);
          dP.noalias() = dO * V.transpose();
          if (use_drop) {
            MatMap<T> D(drop + poff, T_, T_);
            pd = Pm.cwiseProduct(D);
            dV.noalias() += pd.transpose() * dO;
            dP = dP.cwiseProduct(D);
          } else {
            dV.noalias() += Pm.transpose() * dO;
          }
          for (Eigen::Index i = 0; i < T_; ++i) {
            double dot = 0.0;
            for (Eigen::Index j = 0; j <= i; ++j) dot += Pm(i, j) * dP(i, j);
            for (Eigen::Index j = 0; j < T_; ++j)
              dS(i, j) = j <= i ? Pm(i, j) * (dP(i, j) - static_cast<T>(dot)) : T{0};
          }
          dQ.noalias() += (dS * K) * scale;
          dK.noalias() += (dS.transpose() * Q) * scale;
        }
      }
    });
  }
  return y;
}

}  // namespace dirgap::nn
