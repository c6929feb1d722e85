// Copyright 2026 The qsn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Differentiable building blocks for the embedding network: LSTM, dense,
// batch normalization, dropout, the triplet hinge and Adam with step decay.
// Everything is templated on the scalar so gradient checks can run in
// double (or wider) while training runs in float.
//
// Matrices hold one example per column. Sequences of `steps` frames over a
// batch of `batch` examples are stored time-major: column t * batch + b.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qsn/error.hpp"

namespace qsn::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Rng = std::mt19937_64;

enum class Mode { kTrain, kEval };

/// Uniform draw in [0, 1) from the top 53 bits; independent of the standard
/// library's distribution implementations.
inline double Uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double UniformRange(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * Uniform01(rng);
}

/// Index in [0, n) without modulo bias worth caring about for n << 2^64.
inline size_t UniformIndex(Rng& rng, size_t n) {
  return static_cast<size_t>(Uniform01(rng) * static_cast<double>(n));
}

template <typename T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  Param() = default;
  Param(std::string n, long rows, long cols)
      : name(std::move(n)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)) {}

  void ZeroGrad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
void InitUniform(Param<T>& p, double bound, Rng& rng) {
  for (long i = 0; i < p.value.size(); ++i) {
    p.value.data()[i] = static_cast<T>(UniformRange(rng, -bound, bound));
  }
}

template <typename T>
auto Sigmoid(const Eigen::ArrayBase<T>& x) {
  return x.logistic();
}

// ---- Dense ----------------------------------------------------------------

enum class Activation { kNone, kRelu, kSigmoid };

template <typename T>
Mat<T> ApplyActivation(Mat<T> z, Activation act) {
  switch (act) {
    case Activation::kNone: break;
    case Activation::kRelu: z = z.cwiseMax(T(0)); break;
    case Activation::kSigmoid: z = z.array().logistic().matrix(); break;
  }
  return z;
}

/// activation(W * input + b), one example per column.
template <typename T>
Mat<T> Dense(const Mat<T>& input, const Mat<T>& w, const Mat<T>& b, Activation act) {
  if (w.cols() != input.rows() || b.rows() != w.rows() || b.cols() != 1) {
    Fail(ErrorCode::kShapeMismatch, "dense: W is " + std::to_string(w.rows()) + "x" +
                                        std::to_string(w.cols()) + ", input has " +
                                        std::to_string(input.rows()) + " rows");
  }
  Mat<T> z = w * input;
  z.colwise() += b.col(0);
  return ApplyActivation<T>(std::move(z), act);
}

template <typename T>
class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(const std::string& name, int in, int out)
      : w(name + ".weight", out, in), b(name + ".bias", out, 1) {}

  void Init(Rng& rng) {
    InitUniform(w, 1.0 / std::sqrt(static_cast<double>(w.value.cols())), rng);
    b.value.setZero();
  }

  Mat<T> Forward(const Mat<T>& x) const { return Dense<T>(x, w.value, b.value, Activation::kNone); }

  /// Accumulates parameter gradients; returns dL/dx.
  Mat<T> Backward(const Mat<T>& x, const Mat<T>& dy) {
    w.grad.noalias() += dy * x.transpose();
    b.grad += dy.rowwise().sum();
    return w.value.transpose() * dy;
  }

  Param<T> w, b;
};

// ---- Batch normalization --------------------------------------------------

template <typename T>
class BatchNorm {
 public:
  static constexpr double kEps = 1e-5;

  struct Cache {
    Mat<T> xhat;
    Vec<T> inv_std;
  };

  BatchNorm() = default;
  BatchNorm(const std::string& name, int features)
      : gamma(name + ".gamma", features, 1),
        beta(name + ".beta", features, 1),
        running_mean(Vec<T>::Zero(features)),
        running_var(Vec<T>::Ones(features)),
        name_(name) {
    gamma.value.setOnes();
  }

  /// Train mode normalizes with the statistics of `x`; running statistics are
  /// updated from columns [stats_first, stats_first + stats_count) when
  /// stats_count > 0. Eval mode uses the running statistics.
  Mat<T> Forward(const Mat<T>& x, Mode mode, double momentum, Cache* cache,
                 long stats_first = 0, long stats_count = -1) {
    if (x.rows() != gamma.value.rows()) Fail(ErrorCode::kShapeMismatch, name_ + ": feature count");
    if (mode == Mode::kEval) {
      const Vec<T> inv = (running_var.array() + T(kEps)).rsqrt();
      Mat<T> y = (x.colwise() - running_mean).array().colwise() * (inv.array() * gamma.value.col(0).array());
      y.colwise() += beta.value.col(0);
      return y;
    }
    const long n = x.cols();
    if (n < 2) Fail(ErrorCode::kBatchTooSmall, name_ + ": train mode needs at least 2 examples");
    const Vec<T> mean = x.rowwise().mean();
    const Mat<T> centered = x.colwise() - mean;
    const Vec<T> var = centered.array().square().rowwise().mean();
    const Vec<T> inv = (var.array() + T(kEps)).rsqrt();
    Mat<T> xhat = centered.array().colwise() * inv.array();
    Mat<T> y = xhat.array().colwise() * gamma.value.col(0).array();
    y.colwise() += beta.value.col(0);

    if (stats_count < 0) stats_count = n;
    if (stats_count > 0) {
      const auto sub = x.middleCols(stats_first, stats_count);
      const Vec<T> sub_mean = sub.rowwise().mean();
      const Vec<T> sub_var = (sub.colwise() - sub_mean).array().square().rowwise().mean();
      const T m = static_cast<T>(momentum);
      running_mean = m * running_mean + (T(1) - m) * sub_mean;
      running_var = m * running_var + (T(1) - m) * sub_var;
    }
    if (cache != nullptr) {
      cache->xhat = std::move(xhat);
      cache->inv_std = inv;
    }
    return y;
  }

  Mat<T> Backward(const Cache& cache, const Mat<T>& dy) {
    const T n = static_cast<T>(dy.cols());
    gamma.grad += (dy.array() * cache.xhat.array()).rowwise().sum().matrix();
    beta.grad += dy.rowwise().sum();
    const Mat<T> dxhat = dy.array().colwise() * gamma.value.col(0).array();
    const Vec<T> sum_dxhat = dxhat.rowwise().sum();
    const Vec<T> sum_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum();
    Mat<T> dx = (n * dxhat.array()).colwise() - sum_dxhat.array();
    dx.array() -= cache.xhat.array().colwise() * sum_dxhat_xhat.array();
    dx.array().colwise() *= cache.inv_std.array() / n;
    return dx;
  }

  Param<T> gamma, beta;
  Vec<T> running_mean, running_var;

 private:
  std::string name_;
};

// ---- Dropout --------------------------------------------------------------

/// Inverted dropout. In train mode each entry is zeroed with probability p
/// and survivors are scaled by 1 / (1 - p); the applied mask is returned
/// through `mask` when requested.
template <typename T>
Mat<T> Dropout(const Mat<T>& x, double p, Mode mode, Rng& rng, Mat<T>* mask = nullptr) {
  if (!(p >= 0.0 && p < 1.0)) Fail(ErrorCode::kInvalidConfig, "dropout p must lie in [0, 1)");
  if (mode == Mode::kEval || p == 0.0) {
    if (mask != nullptr) *mask = Mat<T>::Ones(x.rows(), x.cols());
    return x;
  }
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Mat<T> m(x.rows(), x.cols());
  for (long i = 0; i < m.size(); ++i) {
    m.data()[i] = Uniform01(rng) < p ? T(0) : keep_scale;
  }
  Mat<T> y = x.cwiseProduct(m);
  if (mask != nullptr) *mask = std::move(m);
  return y;
}

// ---- LSTM -----------------------------------------------------------------

/// Single LSTM layer, gate rows ordered input, forget, cell candidate, output.
/// Zero initial hidden and cell state.
template <typename T>
class LstmLayer {
 public:
  struct Cache {
    int steps = 0;
    int batch = 0;
    Mat<T> x;       // D x steps*batch
    Mat<T> gates;   // 4H x steps*batch, post-activation
    Mat<T> c;       // H x steps*batch
    Mat<T> tanh_c;  // H x steps*batch
    Mat<T> h;       // H x steps*batch
  };

  struct Grads {
    Mat<T> dwx, dwh, db;
    Mat<T> da;  // workspace, reused across calls
    void Reset(const LstmLayer& l) {
      dwx.setZero(l.wx.value.rows(), l.wx.value.cols());
      dwh.setZero(l.wh.value.rows(), l.wh.value.cols());
      db.setZero(l.b.value.rows(), 1);
    }
  };

  LstmLayer() = default;
  LstmLayer(const std::string& name, int input_dim, int hidden)
      : wx(name + ".wx", 4L * hidden, input_dim),
        wh(name + ".wh", 4L * hidden, hidden),
        b(name + ".bias", 4L * hidden, 1),
        hidden_(hidden),
        name_(name) {}

  int hidden() const { return hidden_; }
  int input_dim() const { return static_cast<int>(wx.value.cols()); }

  /// Uniform(-k, k) weights with k = 1/sqrt(fan_in); forget-gate bias 1.
  void Init(Rng& rng) {
    InitUniform(wx, 1.0 / std::sqrt(static_cast<double>(input_dim())), rng);
    InitUniform(wh, 1.0 / std::sqrt(static_cast<double>(hidden_)), rng);
    b.value.setZero();
    b.value.middleRows(hidden_, hidden_).setOnes();
  }

  /// Time steps per block. Input projections and weight-gradient products
  /// run block by block so the gate slices are still cache-resident.
  static constexpr int kBlock = 16;

  /// Runs the recurrence over the whole sequence and fills `cache`; returns
  /// the hidden state at every step (H x steps*batch).
  const Mat<T>& Forward(const Mat<T>& x, int steps, int batch, Cache& cache) const {
    const int h = hidden_;
    const long cols = static_cast<long>(steps) * batch;
    if (x.rows() != input_dim() || x.cols() != cols || steps < 1 || batch < 1) {
      Fail(ErrorCode::kShapeMismatch, name_ + ": expected " + std::to_string(input_dim()) + "x" +
                                          std::to_string(cols) + " input");
    }
    cache.steps = steps;
    cache.batch = batch;
    if (&x != &cache.x) cache.x = x;
    cache.gates.resize(4L * h, cols);
    cache.c.resize(h, cols);
    cache.tanh_c.resize(h, cols);
    cache.h.resize(h, cols);

    for (int t0 = 0; t0 < steps; t0 += kBlock) {
      const long bcol = static_cast<long>(t0) * batch;
      const long bcols = static_cast<long>(std::min(kBlock, steps - t0)) * batch;
      auto gblock = cache.gates.middleCols(bcol, bcols);
      gblock.noalias() = wx.value * cache.x.middleCols(bcol, bcols);
      gblock.colwise() += b.value.col(0);
      const int t1 = std::min(steps, t0 + kBlock);
      for (int t = t0; t < t1; ++t) {
        const long col = static_cast<long>(t) * batch;
        auto g = cache.gates.middleCols(col, batch);
        if (t > 0) g.noalias() += wh.value * cache.h.middleCols(col - batch, batch);
        g.topRows(2L * h) = g.topRows(2L * h).array().logistic().matrix();
        g.middleRows(2L * h, h) = g.middleRows(2L * h, h).array().tanh().matrix();
        g.bottomRows(h) = g.bottomRows(h).array().logistic().matrix();
        auto c = cache.c.middleCols(col, batch);
        if (t > 0) {
          c.array() = g.topRows(h).array() * g.middleRows(2L * h, h).array() +
                      g.middleRows(h, h).array() * cache.c.middleCols(col - batch, batch).array();
        } else {
          c.array() = g.topRows(h).array() * g.middleRows(2L * h, h).array();
        }
        auto tc = cache.tanh_c.middleCols(col, batch);
        tc = c.array().tanh().matrix();
        cache.h.middleCols(col, batch).array() = g.bottomRows(h).array() * tc.array();
      }
    }
    return cache.h;
  }

  /// Backpropagation through time. `dh` is either the gradient w.r.t. every
  /// hidden state (H x steps*batch) or, when `last_only`, w.r.t. the final
  /// state only (H x batch). Parameter gradients are accumulated into
  /// `grads`; dL/dx is written to `dx` when non-null.
  void Backward(const Cache& cache, const Mat<T>& dh, bool last_only, Grads& grads,
                Mat<T>* dx) const {
    const int h = hidden_;
    const int steps = cache.steps, batch = cache.batch;
    const long cols = static_cast<long>(steps) * batch;
    if (dh.rows() != h || dh.cols() != (last_only ? batch : cols)) {
      Fail(ErrorCode::kShapeMismatch, name_ + ": hidden-state gradient shape");
    }
    if (dx != nullptr) dx->resize(input_dim(), cols);
    // Gate pre-activation gradients for one block of steps.
    Mat<T>& da = grads.da;
    da.resize(4L * h, static_cast<long>(kBlock) * batch);
    Mat<T> dh_next = Mat<T>::Zero(h, batch);
    Mat<T> dc_next = Mat<T>::Zero(h, batch);
    Mat<T> dht(h, batch);
    const Mat<T> zeros = Mat<T>::Zero(h, batch);  // cell state before step 0
    const int n_blocks = (steps + kBlock - 1) / kBlock;
    for (int blk = n_blocks - 1; blk >= 0; --blk) {
      const int t0 = blk * kBlock;
      const int t1 = std::min(steps, t0 + kBlock);
      const long bcol = static_cast<long>(t0) * batch;
      const long bcols = static_cast<long>(t1 - t0) * batch;
      for (int t = t1 - 1; t >= t0; --t) {
        const long col = static_cast<long>(t) * batch;
        dht = dh_next;
        if (!last_only) {
          dht += dh.middleCols(col, batch);
        } else if (t == steps - 1) {
          dht += dh;
        }
        // One fused pass over the step's gates (no transcendental work here).
        auto dat = da.middleCols(col - bcol, batch);
        const T* __restrict gp = cache.gates.data() + col * 4L * h;
        const T* __restrict tcp = cache.tanh_c.data() + col * h;
        const T* __restrict cprev = t > 0 ? cache.c.data() + (col - batch) * h : zeros.data();
        T* __restrict dap = dat.data();
        T* __restrict dcn = dc_next.data();
        const T* __restrict dhp = dht.data();
        for (int bi = 0; bi < batch; ++bi) {
          const T* __restrict g = gp + bi * 4L * h;
          T* __restrict d = dap + bi * 4L * h;
          const long o = static_cast<long>(bi) * h;
          for (int j = 0; j < h; ++j) {
            const T ig = g[j], fg = g[h + j], cg = g[2 * h + j], og = g[3 * h + j];
            const T tc = tcp[o + j];
            const T dcv = dcn[o + j] + dhp[o + j] * og * (T(1) - tc * tc);
            d[j] = dcv * cg * ig * (T(1) - ig);
            d[h + j] = dcv * cprev[o + j] * fg * (T(1) - fg);
            d[2 * h + j] = dcv * ig * (T(1) - cg * cg);
            d[3 * h + j] = dhp[o + j] * tc * og * (T(1) - og);
            dcn[o + j] = dcv * fg;
          }
        }
        if (t > 0) dh_next.noalias() = wh.value.transpose() * dat;
      }
      const auto dab = da.leftCols(bcols);
      grads.dwx.noalias() += dab * cache.x.middleCols(bcol, bcols).transpose();
      grads.db += dab.rowwise().sum();
      if (t0 > 0) {
        grads.dwh.noalias() += dab * cache.h.middleCols(bcol - batch, bcols).transpose();
      } else if (bcols > batch) {
        grads.dwh.noalias() += dab.rightCols(bcols - batch) * cache.h.leftCols(bcols - batch).transpose();
      }
      if (dx != nullptr) dx->middleCols(bcol, bcols).noalias() = wx.value.transpose() * dab;
    }
  }

  Param<T> wx, wh, b;

 private:
  int hidden_ = 0;
  std::string name_;
};

/// Convenience wrapper: one LSTM layer over a batch of sequences, returning
/// either the full hidden sequence or only the final state.
template <typename T>
Mat<T> Lstm(const LstmLayer<T>& layer, const Mat<T>& x, int steps, int batch, bool last_only) {
  typename LstmLayer<T>::Cache cache;
  const Mat<T>& h = layer.Forward(x, steps, batch, cache);
  return last_only ? Mat<T>(h.rightCols(batch)) : h;
}

// ---- Triplet hinge --------------------------------------------------------

/// max(0, d_p^2 - d_n^2 + alpha) on unsquared distances.
template <typename T>
T TripletLoss(T d_pos, T d_neg, T alpha) {
  return std::max(T(0), d_pos * d_pos - d_neg * d_neg + alpha);
}

/// True where the hinge has a nonzero slope (subgradient 0 at the kink).
template <typename T>
bool TripletActive(T d_pos, T d_neg, T alpha) {
  return d_pos * d_pos - d_neg * d_neg + alpha > T(0);
}

// ---- Optimization ---------------------------------------------------------

struct TrainConfig {
  double margin_alpha = 0.2;
  int batch_size = 64;
  double lr0 = 1e-3;
  long decay_every = 5000;
  double decay_factor = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double dropout_p = 0.2;
  double bn_momentum = 0.99;
  uint64_t seed = 7;
  long max_steps = 2000;
  long max_epochs = 0;

  bool operator==(const TrainConfig&) const = default;
};

inline void Validate(const TrainConfig& cfg) {
  if (!(cfg.margin_alpha > 0.0)) Fail(ErrorCode::kInvalidConfig, "margin_alpha must be positive");
  if (!(cfg.dropout_p >= 0.0 && cfg.dropout_p < 1.0)) {
    Fail(ErrorCode::kInvalidConfig, "dropout_p must lie in [0, 1)");
  }
  if (!(cfg.decay_factor > 0.0 && cfg.decay_factor <= 1.0)) {
    Fail(ErrorCode::kInvalidConfig, "decay_factor must lie in (0, 1]");
  }
  if (cfg.batch_size < 1 || cfg.decay_every < 1 || !(cfg.lr0 > 0.0)) {
    Fail(ErrorCode::kInvalidConfig, "batch_size, decay_every and lr0 must be positive");
  }
  if (!(cfg.bn_momentum >= 0.0 && cfg.bn_momentum < 1.0)) {
    Fail(ErrorCode::kInvalidConfig, "bn_momentum must lie in [0, 1)");
  }
}

/// lr0 * decay_factor^floor(step / decay_every).
inline double LearningRate(const TrainConfig& cfg, long step) {
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(step / cfg.decay_every));
}

template <typename T>
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  /// One bias-corrected Adam update at zero-based `step`. Throws
  /// NonFiniteGradient (naming the parameter) before touching any value.
  void Step(const std::vector<Param<T>*>& params, long step) {
    for (const Param<T>* p : params) {
      if (!p->grad.allFinite()) {
        Fail(ErrorCode::kNonFiniteGradient, "parameter " + p->name + " at step " + std::to_string(step));
      }
    }
    if (m_.size() != params.size()) {
      m_.clear();
      v_.clear();
      for (const Param<T>* p : params) {
        m_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Mat<T>::Zero(p->value.rows(), p->value.cols()));
      }
    }
    const double lr = LearningRate(cfg_, step);
    const double t = static_cast<double>(step + 1);
    const T b1 = static_cast<T>(cfg_.adam_beta1), b2 = static_cast<T>(cfg_.adam_beta2);
    const T corr1 = static_cast<T>(1.0 - std::pow(cfg_.adam_beta1, t));
    const T corr2 = static_cast<T>(1.0 - std::pow(cfg_.adam_beta2, t));
    const T eps = static_cast<T>(cfg_.adam_eps);
    const T rate = static_cast<T>(lr);
    for (size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = *params[i];
      m_[i] = b1 * m_[i] + (T(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (T(1) - b2) * p.grad.cwiseAbs2();
      p.value.array() -=
          rate * (m_[i].array() / corr1) / ((v_[i].array() / corr2).sqrt() + eps);
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Mat<T>> m_, v_;
};

}  // namespace qsn::nn
