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

// The shared-weight embedding network and its triplet training step.
//
//   frames x features -> LSTM(full sequence) -> LSTM(last state)
//     -> dense -> BN -> ReLU -> dropout
//     -> dense -> BN -> ReLU -> dropout
//     -> dense -> sigmoid                      (embedding in (0, 1)^E)

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <omp.h>
#include <Eigen/Dense>

#include "qsn/error.hpp"
#include "qsn/nn.hpp"

namespace qsn {

struct Architecture {
  int input_dim = 48;
  int lstm1 = 64;
  int lstm2 = 64;
  int dense1 = 512;
  int dense2 = 256;
  int embed_dim = 128;

  bool operator==(const Architecture&) const = default;
};

template <typename T>
struct TripletOutput {
  std::vector<T> d_pos;
  std::vector<T> d_neg;
  std::vector<T> loss;
  T mean_loss = T(0);
};

/// Euclidean distance between two embedding columns.
template <typename T, typename A, typename B>
T Distance(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != b.size()) {
    Fail(ErrorCode::kLengthMismatch, "embeddings of length " + std::to_string(a.size()) +
                                         " and " + std::to_string(b.size()));
  }
  return static_cast<T>((a - b).norm());
}

template <typename T>
class Network {
 public:
  using Matrix = nn::Mat<T>;
  /// Sequences are embedded in fixed-size chunks so that results (and the
  /// order of gradient reductions) do not depend on the thread count.
  static constexpr int kChunk = 32;

  explicit Network(const Architecture& arch = {})
      : arch_(arch),
        lstm1_("lstm1", arch.input_dim, arch.lstm1),
        lstm2_("lstm2", arch.lstm1, arch.lstm2),
        dense1_("dense1", arch.lstm2, arch.dense1),
        bn1_("bn1", arch.dense1),
        dense2_("dense2", arch.dense1, arch.dense2),
        bn2_("bn2", arch.dense2),
        dense3_("dense3", arch.dense2, arch.embed_dim) {}

  /// Randomly initialized network (uniform +-1/sqrt(fan_in), forget bias 1).
  static Network Initialized(const Architecture& arch, uint64_t seed) {
    Network net(arch);
    nn::Rng rng(seed);
    net.lstm1_.Init(rng);
    net.lstm2_.Init(rng);
    net.dense1_.Init(rng);
    net.dense2_.Init(rng);
    net.dense3_.Init(rng);
    return net;
  }

  const Architecture& arch() const { return arch_; }

  /// Trainable parameters in a fixed order (also the checkpoint order).
  std::vector<nn::Param<T>*> Params() {
    return {&lstm1_.wx, &lstm1_.wh, &lstm1_.b,   &lstm2_.wx,  &lstm2_.wh,
            &lstm2_.b,  &dense1_.w, &dense1_.b,  &bn1_.gamma, &bn1_.beta,
            &dense2_.w, &dense2_.b, &bn2_.gamma, &bn2_.beta,  &dense3_.w,
            &dense3_.b};
  }
  std::vector<const nn::Param<T>*> Params() const {
    auto p = const_cast<Network*>(this)->Params();
    return {p.begin(), p.end()};
  }

  /// Batch-norm running statistics, by name.
  std::vector<std::pair<std::string, nn::Vec<T>*>> Buffers() {
    return {{"bn1.running_mean", &bn1_.running_mean},
            {"bn1.running_var", &bn1_.running_var},
            {"bn2.running_mean", &bn2_.running_mean},
            {"bn2.running_var", &bn2_.running_var}};
  }

  void SetThreads(int threads) { threads_ = std::max(1, threads); }
  void SetDropout(double p) { dropout_p_ = p; }
  void SetBatchNormMomentum(double m) { bn_momentum_ = m; }
  double dropout() const { return dropout_p_; }

  /// Embeds a batch of feature maps (features x frames each, equal frame
  /// counts); returns embed_dim x N. Train mode requires N >= 2 (batch
  /// norm) and an rng for dropout, and records the pass for Backward().
  /// Running statistics are updated from inputs [stats_first, +stats_count).
  Matrix Embed(std::span<const Matrix* const> inputs, nn::Mode mode, nn::Rng* rng = nullptr,
               long stats_first = 0, long stats_count = -1) {
    if (inputs.empty()) Fail(ErrorCode::kShapeMismatch, "empty input batch");
    const long steps = inputs.front()->cols();
    for (const Matrix* x : inputs) {
      if (x->rows() != arch_.input_dim || x->cols() != steps || steps < 1) {
        Fail(ErrorCode::kShapeMismatch,
             "expected " + std::to_string(arch_.input_dim) + "x" + std::to_string(steps) +
                 " feature map, got " + std::to_string(x->rows()) + "x" + std::to_string(x->cols()));
      }
    }
    if (mode == nn::Mode::kTrain && rng == nullptr) {
      Fail(ErrorCode::kInvalidConfig, "train mode needs a random generator");
    }
    const long n = static_cast<long>(inputs.size());
    // Buffers of the previous pass are recycled; reallocating the
    // per-step caches costs more than the arithmetic on one core.
    if (record_) spare_ = std::move(record_);
    std::unique_ptr<Record> rec = spare_ ? std::move(spare_) : std::make_unique<Record>();
    rec->d_embedding.resize(0, 0);
    rec->steps = static_cast<int>(steps);

    const long n_chunks = (n + kChunk - 1) / kChunk;
    rec->chunks.resize(static_cast<size_t>(n_chunks));
    Matrix z(arch_.lstm2, n);
#pragma omp parallel for schedule(static) num_threads(threads_) if (threads_ > 1 && n_chunks > 1)
    for (long c = 0; c < n_chunks; ++c) {
      const long first = c * kChunk;
      const int count = static_cast<int>(std::min<long>(kChunk, n - first));
      ChunkCache& cc = rec->chunks[static_cast<size_t>(c)];
      cc.first = first;
      cc.count = count;
      Matrix& x = cc.lstm1.x;
      x.resize(arch_.input_dim, steps * count);
      for (long t = 0; t < steps; ++t) {
        for (int b = 0; b < count; ++b) x.col(t * count + b) = inputs[static_cast<size_t>(first + b)]->col(t);
      }
      const Matrix& h1 = lstm1_.Forward(x, static_cast<int>(steps), count, cc.lstm1);
      const Matrix& h2 = lstm2_.Forward(h1, static_cast<int>(steps), count, cc.lstm2);
      z.middleCols(first, count) = h2.rightCols(count);
    }

    rec->z = z;
    rec->a1 = dense1_.Forward(z);
    Matrix y1 = bn1_.Forward(rec->a1, mode, bn_momentum_, &rec->bn1, stats_first, stats_count);
    rec->relu1 = (y1.array() > T(0)).template cast<T>();
    Matrix u1 = y1.cwiseMax(T(0));
    if (mode == nn::Mode::kTrain) {
      u1 = nn::Dropout<T>(u1, dropout_p_, mode, *rng, &rec->drop1);
    }
    rec->u1 = u1;
    rec->a2 = dense2_.Forward(u1);
    Matrix y2 = bn2_.Forward(rec->a2, mode, bn_momentum_, &rec->bn2, stats_first, stats_count);
    rec->relu2 = (y2.array() > T(0)).template cast<T>();
    Matrix u2 = y2.cwiseMax(T(0));
    if (mode == nn::Mode::kTrain) {
      u2 = nn::Dropout<T>(u2, dropout_p_, mode, *rng, &rec->drop2);
    }
    rec->u2 = u2;
    Matrix e = dense3_.Forward(u2).array().logistic().matrix();
    rec->e = e;
    if (mode == nn::Mode::kTrain) {
      record_ = std::move(rec);
    } else {
      spare_ = std::move(rec);
    }
    return e;
  }

  Matrix Embed(const Matrix& input, nn::Mode mode = nn::Mode::kEval, nn::Rng* rng = nullptr) {
    const Matrix* ptr = &input;
    return Embed(std::span<const Matrix* const>(&ptr, 1), mode, rng);
  }

  /// Embeds anchors, positives and negatives through the same weights as one
  /// stacked batch (batch-norm statistics over all 3B examples; running
  /// statistics from the anchor branch only) and evaluates the mean triplet
  /// hinge. In train mode the pass is recorded for Backward().
  TripletOutput<T> ForwardTriplets(std::span<const Matrix* const> anchors,
                                   std::span<const Matrix* const> positives,
                                   std::span<const Matrix* const> negatives, T alpha,
                                   nn::Mode mode, nn::Rng* rng = nullptr) {
    const size_t b = anchors.size();
    if (b == 0 || positives.size() != b || negatives.size() != b) {
      Fail(ErrorCode::kShapeMismatch, "triplet branches must be non-empty and equally sized");
    }
    std::vector<const Matrix*> all;
    all.reserve(3 * b);
    all.insert(all.end(), anchors.begin(), anchors.end());
    all.insert(all.end(), positives.begin(), positives.end());
    all.insert(all.end(), negatives.begin(), negatives.end());
    const Matrix e = Embed(all, mode, rng, 0, static_cast<long>(b));

    TripletOutput<T> out;
    const long nb = static_cast<long>(b);
    Matrix de = Matrix::Zero(e.rows(), e.cols());
    const T scale = T(2) / static_cast<T>(b);
    for (long i = 0; i < nb; ++i) {
      const auto ea = e.col(i), ep = e.col(nb + i), en = e.col(2 * nb + i);
      const T dp = Distance<T>(ea, ep);
      const T dn = Distance<T>(ea, en);
      out.d_pos.push_back(dp);
      out.d_neg.push_back(dn);
      out.loss.push_back(nn::TripletLoss(dp, dn, alpha));
      out.mean_loss += out.loss.back();
      // Squared distances are differentiated directly (no sqrt at zero).
      const T hinge = (ea - ep).squaredNorm() - (ea - en).squaredNorm() + alpha;
      if (hinge > T(0)) {
        de.col(i) += scale * (en - ep);
        de.col(nb + i) += scale * (ep - ea);
        de.col(2 * nb + i) += scale * (ea - en);
      }
    }
    out.mean_loss /= static_cast<T>(b);
    if (record_) record_->d_embedding = std::move(de);
    return out;
  }

  /// Reverse-mode pass for the recorded triplet forward: overwrites every
  /// parameter's grad with d(mean triplet loss)/d(param).
  void Backward() {
    if (!record_ || record_->d_embedding.size() == 0) {
      Fail(ErrorCode::kNoForwardRecorded, "call ForwardTriplets in train mode first");
    }
    BackwardFrom(record_->d_embedding);
  }

  /// Reverse-mode pass from an arbitrary gradient w.r.t. the recorded
  /// embeddings (embed_dim x N).
  void BackwardFrom(const Matrix& d_embedding) {
    if (!record_) Fail(ErrorCode::kNoForwardRecorded, "no train-mode forward pass recorded");
    Record& r = *record_;
    if (d_embedding.rows() != r.e.rows() || d_embedding.cols() != r.e.cols()) {
      Fail(ErrorCode::kShapeMismatch, "embedding gradient shape");
    }
    for (nn::Param<T>* p : Params()) p->ZeroGrad();

    Matrix da3 = d_embedding.cwiseProduct((r.e.array() * (T(1) - r.e.array())).matrix());
    Matrix du2 = dense3_.Backward(r.u2, da3);
    du2 = du2.cwiseProduct(r.drop2).cwiseProduct(r.relu2);
    Matrix da2 = bn2_.Backward(r.bn2, du2);
    Matrix du1 = dense2_.Backward(r.u1, da2);
    du1 = du1.cwiseProduct(r.drop1).cwiseProduct(r.relu1);
    Matrix da1 = bn1_.Backward(r.bn1, du1);
    const Matrix dz = dense1_.Backward(r.z, da1);

    const long n_chunks = static_cast<long>(r.chunks.size());
    auto& g1 = grads1_;
    auto& g2 = grads2_;
    g1.resize(r.chunks.size());
    g2.resize(r.chunks.size());
#pragma omp parallel for schedule(static) num_threads(threads_) if (threads_ > 1 && n_chunks > 1)
    for (long c = 0; c < n_chunks; ++c) {
      ChunkCache& cc = r.chunks[static_cast<size_t>(c)];
      g1[static_cast<size_t>(c)].Reset(lstm1_);
      g2[static_cast<size_t>(c)].Reset(lstm2_);
      lstm2_.Backward(cc.lstm2, dz.middleCols(cc.first, cc.count), true, g2[static_cast<size_t>(c)], &cc.dh1);
      lstm1_.Backward(cc.lstm1, cc.dh1, false, g1[static_cast<size_t>(c)], nullptr);
    }
    // Fixed-order reduction keeps results independent of scheduling.
    for (size_t c = 0; c < r.chunks.size(); ++c) {
      lstm1_.wx.grad += g1[c].dwx;
      lstm1_.wh.grad += g1[c].dwh;
      lstm1_.b.grad += g1[c].db;
      lstm2_.wx.grad += g2[c].dwx;
      lstm2_.wh.grad += g2[c].dwh;
      lstm2_.b.grad += g2[c].db;
    }
    spare_ = std::move(record_);
  }

  bool HasRecord() const { return static_cast<bool>(record_); }
  void ClearRecord() { record_.reset(); }

  template <typename U>
  Network<U> Cast() const {
    Network<U> out(arch_);
    auto src = Params();
    auto dst = out.Params();
    for (size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
    auto sb = const_cast<Network*>(this)->Buffers();
    auto db = out.Buffers();
    for (size_t i = 0; i < sb.size(); ++i) *db[i].second = sb[i].second->template cast<U>();
    out.SetDropout(dropout_p_);
    out.SetBatchNormMomentum(bn_momentum_);
    return out;
  }

 private:
  struct ChunkCache {
    long first = 0;
    int count = 0;
    typename nn::LstmLayer<T>::Cache lstm1, lstm2;
    Matrix dh1;
  };
  struct Record {
    int steps = 0;
    std::vector<ChunkCache> chunks;
    Matrix z, a1, relu1, drop1, u1, a2, relu2, drop2, u2, e;
    typename nn::BatchNorm<T>::Cache bn1, bn2;
    Matrix d_embedding;
  };

  Architecture arch_;
  nn::LstmLayer<T> lstm1_, lstm2_;
  nn::DenseLayer<T> dense1_;
  nn::BatchNorm<T> bn1_;
  nn::DenseLayer<T> dense2_;
  nn::BatchNorm<T> bn2_;
  nn::DenseLayer<T> dense3_;
  double dropout_p_ = 0.2;
  double bn_momentum_ = 0.99;
  int threads_ = 1;
  std::unique_ptr<Record> record_;
  std::unique_ptr<Record> spare_;
  std::vector<typename nn::LstmLayer<T>::Grads> grads1_, grads2_;
};

}  // namespace qsn
