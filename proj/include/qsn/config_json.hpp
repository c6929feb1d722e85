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

// JSON bindings for the configuration structs. Missing keys keep their
// defaults, so partial config files are valid overrides.

#pragma once

#include <vector>

#include "json.hpp"
#include "qsn/network.hpp"
#include "qsn/nn.hpp"
#include "qsn/signal_prep.hpp"
#include "qsn/spectral.hpp"

namespace qsn {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PrepConfig, target_rate, frame_len, frame_hop,
                                                vad_energy_db, band_low, band_high, preemph,
                                                target_duration)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SpectralConfig, sample_rate, clip_samples,
                                                fft_size, hop, win_length, mel_bands, mel_fmin,
                                                mel_fmax, contrast_bands, contrast_fmin,
                                                contrast_quantile, envelope_rows, log_floor)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Architecture, input_dim, lstm1, lstm2, dense1,
                                                dense2, embed_dim)

inline void to_json(nlohmann::json& j, const NormStats& s) {
  j = nlohmann::json{{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
                     {"stddev", std::vector<double>(s.stddev.data(), s.stddev.data() + s.stddev.size())}};
}

inline void from_json(const nlohmann::json& j, NormStats& s) {
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto stddev = j.at("stddev").get<std::vector<double>>();
  s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<long>(mean.size()));
  s.stddev = Eigen::Map<const Eigen::VectorXd>(stddev.data(), static_cast<long>(stddev.size()));
}

namespace nn {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, margin_alpha, batch_size, lr0,
                                                decay_every, decay_factor, adam_beta1, adam_beta2,
                                                adam_eps, dropout_p, bn_momentum, seed, max_steps,
                                                max_epochs)
}  // namespace nn

}  // namespace qsn
