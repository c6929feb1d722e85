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

// Trained-model container and its on-disk format:
//
//   "QSNM" | u32 version | u32 header_len | header (UTF-8 JSON) | blobs
//
// Blobs are the tensors listed in header["tensors"], in that order, as
// row-major little-endian float32.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qsn/config_json.hpp"
#include "qsn/error.hpp"
#include "qsn/network.hpp"
#include "qsn/nn.hpp"
#include "qsn/spectral.hpp"

namespace qsn {

inline constexpr char kCheckpointMagic[4] = {'Q', 'S', 'N', 'M'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct Model {
  Network<float> net;
  NormStats norm;
  nn::TrainConfig train;
  SpectralConfig spectral;
  PrepConfig prep;
  long step = 0;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace internal {

using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TensorSlot {
  Eigen::MatrixXf* matrix = nullptr;
  Eigen::VectorXf* vector = nullptr;
  long rows() const { return matrix ? matrix->rows() : vector->size(); }
  long cols() const { return matrix ? matrix->cols() : 1; }
};

inline std::vector<std::pair<std::string, TensorSlot>> Slots(Network<float>& net) {
  std::vector<std::pair<std::string, TensorSlot>> slots;
  for (nn::Param<float>* p : net.Params()) slots.push_back({p->name, {&p->value, nullptr}});
  for (auto& [name, buf] : net.Buffers()) slots.push_back({name, {nullptr, buf}});
  return slots;
}

}  // namespace internal

inline std::string EncodeCheckpoint(const Model& model) {
  Model& m = const_cast<Model&>(model);
  nlohmann::json header;
  header["format"] = "qsn-model";
  header["version"] = kCheckpointVersion;
  header["architecture"] = m.net.arch();
  header["train_config"] = m.train;
  header["spectral_config"] = m.spectral;
  header["prep_config"] = m.prep;
  header["norm_stats"] = m.norm;
  header["step"] = m.step;
  header["metadata"] = m.metadata;
  header["layout"] = "row-major float32 LE";
  auto slots = internal::Slots(m.net);
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, slot] : slots) {
    tensors.push_back({{"name", name}, {"rows", slot.rows()}, {"cols", slot.cols()}});
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 4);
  auto put_u32 = [&](uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  put_u32(kCheckpointVersion);
  put_u32(static_cast<uint32_t>(text.size()));
  out += text;
  for (const auto& [name, slot] : slots) {
    internal::RowMajorF rm = slot.matrix ? internal::RowMajorF(*slot.matrix)
                                         : internal::RowMajorF(*slot.vector);
    out.append(reinterpret_cast<const char*>(rm.data()), static_cast<size_t>(rm.size()) * 4);
  }
  return out;
}

inline Model DecodeCheckpoint(const std::string& bytes, const std::string& origin) {
  auto corrupt = [&](const std::string& why) { Fail(ErrorCode::kCorruptCheckpoint, origin + ": " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) corrupt("bad magic");
  uint32_t version, header_len;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&header_len, bytes.data() + 8, 4);
  if (version != kCheckpointVersion) {
    corrupt("unsupported checkpoint version " + std::to_string(version) + " (expected " +
            std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() - 12 < header_len) corrupt("truncated header");

  Model model;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    model.net = Network<float>(header.at("architecture").get<Architecture>());
    model.train = header.at("train_config").get<nn::TrainConfig>();
    model.spectral = header.at("spectral_config").get<SpectralConfig>();
    model.prep = header.at("prep_config").get<PrepConfig>();
    model.norm = header.at("norm_stats").get<NormStats>();
    model.step = header.at("step").get<long>();
    model.metadata = header.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    corrupt(std::string("bad header: ") + e.what());
  }
  model.net.SetDropout(model.train.dropout_p);
  model.net.SetBatchNormMomentum(model.train.bn_momentum);

  auto slots = internal::Slots(model.net);
  std::map<std::string, internal::TensorSlot> by_name(slots.begin(), slots.end());
  size_t pos = 12 + header_len;
  size_t filled = 0;
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.value("name", "");
    auto it = by_name.find(name);
    if (it == by_name.end()) corrupt("unknown tensor '" + name + "'");
    const long rows = t.value("rows", -1L), cols = t.value("cols", -1L);
    if (rows != it->second.rows() || cols != it->second.cols()) {
      corrupt("tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    const size_t n = static_cast<size_t>(rows * cols) * 4;
    if (bytes.size() - pos < n) corrupt("truncated tensor data for '" + name + "'");
    internal::RowMajorF rm(rows, cols);
    std::memcpy(rm.data(), bytes.data() + pos, n);
    pos += n;
    if (!rm.allFinite()) corrupt("non-finite values in '" + name + "'");
    if (it->second.matrix) {
      *it->second.matrix = rm;
    } else {
      *it->second.vector = Eigen::Map<const Eigen::VectorXf>(rm.data(), rows);
    }
    by_name.erase(it);
    ++filled;
  }
  if (!by_name.empty()) corrupt("missing tensor '" + by_name.begin()->first + "'");
  if (pos != bytes.size()) corrupt("trailing bytes after tensor data");
  if (model.norm.mean.size() != model.net.arch().input_dim ||
      model.norm.stddev.size() != model.net.arch().input_dim) {
    corrupt("normalization stats do not match the input dimension");
  }
  (void)filled;
  return model;
}

inline void SaveCheckpoint(const Model& model, const std::filesystem::path& path) {
  const std::string bytes = EncodeCheckpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) Fail(ErrorCode::kIoError, path.string() + ": write failed");
}

inline Model LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorCode::kIoError, path.string() + ": cannot open");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return DecodeCheckpoint(bytes, path.string());
}

/// Eval- or train-mode embedding of one standardized feature map.
inline Eigen::VectorXf Embed(const FeatureMap& features, Network<float>& net,
                             nn::Mode mode = nn::Mode::kEval, nn::Rng* rng = nullptr) {
  return net.Embed(features.values, mode, rng).col(0);
}

/// Eval-mode embeddings of many standardized feature maps, one column each.
inline Eigen::MatrixXf EmbedAll(Network<float>& net, std::span<const Eigen::MatrixXf> maps) {
  Eigen::MatrixXf out(net.arch().embed_dim, static_cast<long>(maps.size()));
  constexpr size_t kBatch = Network<float>::kChunk * 4;
  for (size_t first = 0; first < maps.size(); first += kBatch) {
    const size_t count = std::min(kBatch, maps.size() - first);
    std::vector<const Eigen::MatrixXf*> ptrs;
    for (size_t i = 0; i < count; ++i) ptrs.push_back(&maps[first + i]);
    out.middleCols(static_cast<long>(first), static_cast<long>(count)) =
        net.Embed(ptrs, nn::Mode::kEval);
  }
  return out;
}

}  // namespace qsn
