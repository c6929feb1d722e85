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

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "qsn/error.hpp"

namespace qsn {

enum class Label { kBonafide = 0, kSpoof = 1 };

inline std::string_view LabelName(Label l) { return l == Label::kBonafide ? "bonafide" : "spoof"; }

inline Label ParseLabel(std::string_view s) {
  if (s == "bonafide") return Label::kBonafide;
  if (s == "spoof") return Label::kSpoof;
  Fail(ErrorCode::kMalformedLine, "unknown label '" + std::string(s) + "'");
}

/// One labelled recording. Bona fide utterances carry no attack id.
struct Utterance {
  std::string id;
  std::filesystem::path path;
  std::string speaker;
  Label label = Label::kBonafide;
  std::optional<std::string> attack_id;

  /// Attack id as written in tables and CSVs ("-" for bona fide).
  std::string AttackOrDash() const { return attack_id.value_or("-"); }
  bool operator==(const Utterance&) const = default;
};

struct Manifest {
  std::vector<Utterance> utterances;
  std::string source;
  bool operator==(const Manifest&) const = default;
};

}  // namespace qsn
