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

// Episodic protocol: speaker-disjoint train / support / query splits,
// triplet sampling for training, and one-shot classification of queries
// against a labelled support set.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qsn/error.hpp"
#include "qsn/metrics.hpp"
#include "qsn/network.hpp"
#include "qsn/nn.hpp"
#include "qsn/utterance.hpp"

namespace qsn {

/// Relative shares of speakers assigned to train, support and query.
struct SplitRatios {
  double train = 4.0;
  double support = 1.0;
  double query = 1.0;
  bool operator==(const SplitRatios&) const = default;
};

enum class SupportMode { kPerClass, kPerAttack };

struct EpisodeSplit {
  std::vector<Utterance> train;
  std::vector<Utterance> support;
  std::vector<Utterance> query;
};

template <typename Range>
std::set<std::string> SpeakerSet(const Range& utts) {
  std::set<std::string> s;
  for (const Utterance& u : utts) s.insert(u.speaker);
  return s;
}

template <typename Range>
std::set<Label> LabelSet(const Range& utts) {
  std::set<Label> s;
  for (const Utterance& u : utts) s.insert(u.label);
  return s;
}

template <typename V>
void SeededShuffle(std::vector<V>& v, nn::Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[nn::UniformIndex(rng, i)]);
}

/// Partitions speakers (not utterances) into train / support / query.
/// Classes are processed smallest first; a speaker keeps the subset it was
/// first given, and the unassigned speakers of each class are shuffled and
/// dealt out so that every subset holds at least one speaker of the class
/// before support and query are topped up to their shares. The support set
/// keeps one randomly chosen utterance per class (or per attack id).
inline EpisodeSplit SplitDataset(std::span<const Utterance> manifest, const SplitRatios& ratios,
                                 uint64_t seed, SupportMode mode = SupportMode::kPerClass) {
  const double total = ratios.train + ratios.support + ratios.query;
  if (!(ratios.train > 0 && ratios.support > 0 && ratios.query > 0)) {
    Fail(ErrorCode::kInvalidConfig, "split ratios must be positive");
  }
  std::map<Label, std::set<std::string>> speakers_of;
  for (const Utterance& u : manifest) speakers_of[u.label].insert(u.speaker);
  for (Label l : {Label::kBonafide, Label::kSpoof}) {
    if (speakers_of[l].empty()) {
      Fail(ErrorCode::kClassMissing, "manifest has no " + std::string(LabelName(l)) + " utterances");
    }
    if (speakers_of[l].size() < 3) {
      Fail(ErrorCode::kInsufficientSpeakers, std::string(LabelName(l)) + " has " +
                                                 std::to_string(speakers_of[l].size()) +
                                                 " speakers, need at least 3");
    }
  }

  enum Subset { kTrain = 0, kSupport = 1, kQuery = 2 };
  std::map<std::string, int> assigned;
  nn::Rng rng(seed);
  // The smaller class goes first so that shared speakers cannot starve it.
  std::vector<Label> order = {Label::kBonafide, Label::kSpoof};
  if (speakers_of[Label::kSpoof].size() < speakers_of[Label::kBonafide].size()) {
    std::swap(order[0], order[1]);
  }
  for (Label l : order) {
    const auto& spk = speakers_of[l];
    const double n = static_cast<double>(spk.size());
    const long want_support = std::max(1L, std::lround(n * ratios.support / total));
    const long want_query = std::max(1L, std::lround(n * ratios.query / total));
    long have[3] = {0, 0, 0};
    std::vector<std::string> fresh;
    for (const std::string& s : spk) {
      auto it = assigned.find(s);
      if (it != assigned.end()) ++have[it->second];
      else fresh.push_back(s);
    }
    SeededShuffle(fresh, rng);
    for (const std::string& s : fresh) {
      int target = kTrain;
      if (have[kSupport] == 0) target = kSupport;
      else if (have[kQuery] == 0) target = kQuery;
      else if (have[kTrain] == 0) target = kTrain;
      else if (have[kSupport] < want_support) target = kSupport;
      else if (have[kQuery] < want_query) target = kQuery;
      assigned[s] = target;
      ++have[target];
    }
    for (int sub : {kTrain, kSupport, kQuery}) {
      if (have[sub] == 0) {
        static const char* kNames[] = {"train", "support", "query"};
        Fail(ErrorCode::kInsufficientSpeakers, std::string("no ") + std::string(LabelName(l)) +
                                                   " speakers left for the " + kNames[sub] + " subset");
      }
    }
  }

  EpisodeSplit split;
  std::map<std::string, std::vector<const Utterance*>> support_pool;
  for (const Utterance& u : manifest) {
    switch (assigned.at(u.speaker)) {
      case kTrain: split.train.push_back(u); break;
      case kQuery: split.query.push_back(u); break;
      default: {
        const std::string key = mode == SupportMode::kPerClass
                                    ? std::string(LabelName(u.label))
                                    : std::string(LabelName(u.label)) + "/" + u.AttackOrDash();
        support_pool[key].push_back(&u);
      }
    }
  }
  for (auto& [key, pool] : support_pool) {
    std::sort(pool.begin(), pool.end(), [](const Utterance* a, const Utterance* b) { return a->id < b->id; });
    split.support.push_back(*pool[nn::UniformIndex(rng, pool.size())]);
  }
  return split;
}

enum class TripletStrategy { kRandom, kSemiHard };

/// Indices into the training list.
struct Triplet {
  size_t anchor = 0;
  size_t positive = 0;
  size_t negative = 0;
};

/// Embedding lookup for semi-hard mining: returns embeddings (one column per
/// requested index).
using EmbedIndices = std::function<Eigen::MatrixXf(std::span<const size_t>)>;

/// Random triplets: anchor class drawn with equal probability, anchor
/// uniform within it, positive uniform among the other utterances of that
/// class, negative uniform over the other class. Semi-hard mining replaces
/// each negative by one from the batch's candidate pool with
/// d_p < d_n < sqrt(d_p^2 + alpha) when one exists, else by the closest.
inline std::vector<Triplet> SampleTriplets(std::span<const Utterance> train, int batch_size,
                                           TripletStrategy strategy, nn::Rng& rng,
                                           const EmbedIndices& embed = {}, double alpha = 0.2) {
  std::vector<size_t> by_class[2];
  for (size_t i = 0; i < train.size(); ++i) by_class[static_cast<int>(train[i].label)].push_back(i);
  for (int c = 0; c < 2; ++c) {
    if (by_class[c].size() < 2) {
      Fail(ErrorCode::kClassMissing, std::string(LabelName(static_cast<Label>(c))) +
                                         " needs at least two training utterances");
    }
  }
  std::vector<Triplet> out;
  out.reserve(static_cast<size_t>(batch_size));
  for (int k = 0; k < batch_size; ++k) {
    const int cls = nn::Uniform01(rng) < 0.5 ? 0 : 1;
    const auto& same = by_class[cls];
    const auto& other = by_class[1 - cls];
    const size_t a = nn::UniformIndex(rng, same.size());
    size_t p = nn::UniformIndex(rng, same.size() - 1);
    if (p >= a) ++p;
    out.push_back({same[a], same[p], other[nn::UniformIndex(rng, other.size())]});
  }
  if (strategy == TripletStrategy::kRandom) return out;
  if (!embed) Fail(ErrorCode::kModelNotLoaded, "semi-hard mining needs an embedding function");

  std::vector<size_t> unique;
  for (const Triplet& t : out) unique.insert(unique.end(), {t.anchor, t.positive, t.negative});
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  const Eigen::MatrixXf emb = embed(unique);
  auto column = [&](size_t idx) {
    return emb.col(std::lower_bound(unique.begin(), unique.end(), idx) - unique.begin());
  };
  std::vector<size_t> candidates;
  for (const Triplet& t : out) candidates.push_back(t.negative);

  for (Triplet& t : out) {
    const Label anchor_label = train[t.anchor].label;
    const double dp = (column(t.anchor) - column(t.positive)).norm();
    const double upper = std::sqrt(dp * dp + alpha);
    std::vector<size_t> semi_hard, hardest;
    double best = std::numeric_limits<double>::infinity();
    for (size_t c : candidates) {
      if (train[c].label == anchor_label) continue;
      const double dn = (column(t.anchor) - column(c)).norm();
      if (dp < dn && dn < upper) semi_hard.push_back(c);
      if (dn < best) {
        best = dn;
        hardest.assign(1, c);
      } else if (dn == best) {
        hardest.push_back(c);
      }
    }
    const auto& pick = semi_hard.empty() ? hardest : semi_hard;
    if (!pick.empty()) t.negative = pick[nn::UniformIndex(rng, pick.size())];
  }
  return out;
}

enum class DecisionRule { kNearest, kThreshold };

inline constexpr double kDefaultThreshold = 1e-3;

struct SupportEntry {
  Label label = Label::kBonafide;
  Eigen::VectorXf embedding;
};

struct Decision {
  Label label = Label::kBonafide;
  double score = 0;  // distance to the closest bona fide support
};

/// One-shot decision for a query embedding. The score is the distance to
/// the closest bona fide support embedding. `kNearest` takes the class of
/// the globally closest support (ties go to bona fide unless
/// `ties_to_bonafide` is false); `kThreshold` says spoof iff score > t.
inline Decision ClassifyQuery(const Eigen::VectorXf& query, std::span<const SupportEntry> support,
                              DecisionRule rule, double threshold = kDefaultThreshold,
                              bool ties_to_bonafide = true) {
  if (support.empty()) Fail(ErrorCode::kEmptySupport, "support set is empty");
  double best_bona = std::numeric_limits<double>::infinity();
  double best_spoof = std::numeric_limits<double>::infinity();
  for (const SupportEntry& s : support) {
    const double d = Distance<float>(query, s.embedding);
    double& slot = s.label == Label::kBonafide ? best_bona : best_spoof;
    slot = std::min(slot, d);
  }
  Decision out;
  out.score = best_bona;
  if (rule == DecisionRule::kThreshold) {
    if (std::isinf(best_bona)) Fail(ErrorCode::kNoBonafideSupport, "threshold rule needs a bona fide support");
    out.label = out.score > threshold ? Label::kSpoof : Label::kBonafide;
  } else if (best_bona < best_spoof || (best_bona == best_spoof && ties_to_bonafide)) {
    out.label = Label::kBonafide;
  } else {
    out.label = Label::kSpoof;
  }
  return out;
}

/// Embeds utterances in eval mode, one column each.
using EmbedUtterances = std::function<Eigen::MatrixXf(std::span<const Utterance>)>;

/// Classifies every query against the support set. Predictions see only
/// embeddings; labels are attached to the records afterwards.
inline std::vector<QueryRecord> Evaluate(const EpisodeSplit& split, const EmbedUtterances& embed,
                                         DecisionRule rule, double threshold = kDefaultThreshold,
                                         bool ties_to_bonafide = true) {
  std::vector<QueryRecord> records;
  if (split.query.empty()) return records;
  if (split.support.empty()) Fail(ErrorCode::kEmptySupport, "support set is empty");
  const Eigen::MatrixXf support_emb = embed(split.support);
  std::vector<SupportEntry> support;
  for (size_t i = 0; i < split.support.size(); ++i) {
    support.push_back({split.support[i].label, support_emb.col(static_cast<long>(i))});
  }
  const Eigen::MatrixXf query_emb = embed(split.query);
  records.reserve(split.query.size());
  for (size_t i = 0; i < split.query.size(); ++i) {
    const Decision d = ClassifyQuery(query_emb.col(static_cast<long>(i)), support, rule, threshold,
                                     ties_to_bonafide);
    const Utterance& u = split.query[i];
    records.push_back({u.id, u.speaker, u.AttackOrDash(), u.label, d.label, d.score});
  }
  return records;
}

}  // namespace qsn
