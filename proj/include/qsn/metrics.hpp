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

// Detection scoring: EER by threshold sweep, DET points, confusion-based
// classification metrics and per-attack breakdowns. Spoof (label 1) is the
// positive class and higher scores are more spoof-like.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "qsn/error.hpp"
#include "qsn/utterance.hpp"

namespace qsn {

struct ScoreSet {
  std::vector<double> scores;
  std::vector<int> labels;  // 1 = spoof / positive

  void Add(double score, int label) {
    scores.push_back(score);
    labels.push_back(label);
  }
};

struct DetPoint {
  double far = 0;
  double frr = 0;
  double threshold = 0;
};

struct EerResult {
  double eer = 0;
  double threshold = 0;
};

/// Operating points for every distinct score used as threshold (decide
/// spoof when score >= threshold) plus a final threshold just above the
/// largest score. FAR = FP / negatives, FRR = FN / positives.
inline std::vector<DetPoint> DetCurve(const ScoreSet& s) {
  if (s.scores.size() != s.labels.size()) Fail(ErrorCode::kLengthMismatch, "scores vs labels");
  const long positives = std::count(s.labels.begin(), s.labels.end(), 1);
  const long negatives = static_cast<long>(s.labels.size()) - positives;
  if (positives == 0 || negatives == 0) {
    Fail(ErrorCode::kOneClassOnly, "both classes are required");
  }
  std::vector<size_t> order(s.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return s.scores[a] < s.scores[b]; });

  std::vector<DetPoint> points;
  long pos_below = 0, neg_below = 0;
  size_t i = 0;
  while (i < order.size()) {
    const double theta = s.scores[order[i]];
    points.push_back({static_cast<double>(negatives - neg_below) / negatives,
                      static_cast<double>(pos_below) / positives, theta});
    for (; i < order.size() && s.scores[order[i]] == theta; ++i) {
      (s.labels[order[i]] == 1 ? pos_below : neg_below) += 1;
    }
  }
  const double top = s.scores[order.back()];
  points.push_back({0.0, 1.0, std::nextafter(top, std::numeric_limits<double>::infinity())});
  return points;
}

/// Equal error rate at the FAR/FRR crossing of the sweep, interpolated
/// linearly between the two bracketing operating points.
inline EerResult ComputeEer(const ScoreSet& s) {
  const std::vector<DetPoint> pts = DetCurve(s);
  for (size_t k = 1; k < pts.size(); ++k) {
    if (pts[k].frr < pts[k].far) continue;
    if (pts[k].frr == pts[k].far) return {pts[k].far, pts[k].threshold};
    const DetPoint& a = pts[k - 1];
    const DetPoint& b = pts[k];
    const double gap_a = a.far - a.frr;  // > 0
    const double gap_b = b.far - b.frr;  // < 0
    const double lambda = gap_a / (gap_a - gap_b);
    return {a.far + lambda * (b.far - a.far), a.threshold + lambda * (b.threshold - a.threshold)};
  }
  return {pts.back().far, pts.back().threshold};
}

struct Confusion {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  long total() const { return tp + fp + tn + fn; }
};

struct ClassificationMetrics {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  Confusion confusion;
  bool precision_undefined = false;  // no predicted positives
  bool recall_undefined = false;     // no actual positives
};

/// One classified query.
struct QueryRecord {
  std::string utt_id;
  std::string speaker;
  std::string attack_id = "-";
  Label truth = Label::kBonafide;
  Label predicted = Label::kBonafide;
  double score = 0;
};

inline ClassificationMetrics ComputeClassificationMetrics(std::span<const QueryRecord> records) {
  if (records.empty()) Fail(ErrorCode::kEmptyRecords, "no records to score");
  ClassificationMetrics m;
  Confusion& c = m.confusion;
  for (const QueryRecord& r : records) {
    const bool actual = r.truth == Label::kSpoof, predicted = r.predicted == Label::kSpoof;
    if (actual && predicted) ++c.tp;
    else if (!actual && predicted) ++c.fp;
    else if (!actual && !predicted) ++c.tn;
    else ++c.fn;
  }
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  m.precision_undefined = c.tp + c.fp == 0;
  m.recall_undefined = c.tp + c.fn == 0;
  m.precision = m.precision_undefined ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  m.recall = m.recall_undefined ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

inline ScoreSet ToScoreSet(std::span<const QueryRecord> records) {
  ScoreSet s;
  for (const QueryRecord& r : records) s.Add(r.score, r.truth == Label::kSpoof ? 1 : 0);
  return s;
}

struct GroupReport {
  std::optional<double> eer;
  std::optional<double> eer_threshold;
  ClassificationMetrics metrics;
  long count = 0;
};

struct EvalReport {
  GroupReport global;
  std::map<std::string, GroupReport> per_group;
  std::vector<DetPoint> det_points;
};

inline GroupReport ScoreGroup(std::span<const QueryRecord> records) {
  GroupReport g;
  g.metrics = ComputeClassificationMetrics(records);
  g.count = static_cast<long>(records.size());
  const ScoreSet s = ToScoreSet(records);
  const long pos = std::count(s.labels.begin(), s.labels.end(), 1);
  if (pos > 0 && pos < static_cast<long>(s.labels.size())) {
    const EerResult e = ComputeEer(s);
    g.eer = e.eer;
    g.eer_threshold = e.threshold;
  }
  return g;
}

/// One report per attack id, each over that attack's spoofed queries plus
/// every bona fide query.
inline std::map<std::string, GroupReport> PerGroupBreakdown(std::span<const QueryRecord> records) {
  std::vector<QueryRecord> bonafide;
  std::map<std::string, std::vector<QueryRecord>> spoofs;
  for (const QueryRecord& r : records) {
    if (r.truth == Label::kBonafide) bonafide.push_back(r);
    else spoofs[r.attack_id].push_back(r);
  }
  std::map<std::string, GroupReport> out;
  for (auto& [attack, group] : spoofs) {
    group.insert(group.end(), bonafide.begin(), bonafide.end());
    out.emplace(attack, ScoreGroup(group));
  }
  return out;
}

inline EvalReport BuildReport(std::span<const QueryRecord> records) {
  EvalReport report;
  report.global = ScoreGroup(records);
  report.per_group = PerGroupBreakdown(records);
  const ScoreSet s = ToScoreSet(records);
  const long pos = std::count(s.labels.begin(), s.labels.end(), 1);
  if (pos > 0 && pos < static_cast<long>(s.labels.size())) report.det_points = DetCurve(s);
  return report;
}

// ---- Serialization --------------------------------------------------------

inline nlohmann::json ToJson(const GroupReport& g) {
  const Confusion& c = g.metrics.confusion;
  nlohmann::json j;
  j["eer"] = g.eer ? nlohmann::json(*g.eer) : nlohmann::json(nullptr);
  j["eer_threshold"] = g.eer_threshold ? nlohmann::json(*g.eer_threshold) : nlohmann::json(nullptr);
  j["accuracy"] = g.metrics.accuracy;
  j["precision"] = g.metrics.precision;
  j["recall"] = g.metrics.recall;
  j["f1"] = g.metrics.f1;
  j["precision_undefined"] = g.metrics.precision_undefined;
  j["recall_undefined"] = g.metrics.recall_undefined;
  j["confusion"] = {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
  j["count"] = g.count;
  return j;
}

inline nlohmann::json ToJson(const EvalReport& r) {
  nlohmann::json j = ToJson(r.global);
  j["per_group"] = nlohmann::json::object();
  for (const auto& [k, g] : r.per_group) j["per_group"][k] = ToJson(g);
  j["det_points"] = nlohmann::json::array();
  for (const DetPoint& p : r.det_points) {
    j["det_points"].push_back({{"far", p.far}, {"frr", p.frr}, {"threshold", p.threshold}});
  }
  return j;
}

namespace internal {
inline std::string Percent(std::optional<double> v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
  return buf;
}
inline std::string Num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}
}  // namespace internal

/// algorithm, EER%, Acc%, Precision%, Recall%, F1% (one row per attack id).
inline void WritePerGroupCsv(std::ostream& os, const EvalReport& r) {
  using internal::Percent;
  os << "algorithm,EER%,Acc%,Precision%,Recall%,F1%\n";
  for (const auto& [attack, g] : r.per_group) {
    os << attack << ',' << Percent(g.eer) << ',' << Percent(g.metrics.accuracy) << ','
       << Percent(g.metrics.precision) << ',' << Percent(g.metrics.recall) << ','
       << Percent(g.metrics.f1) << '\n';
  }
}

inline void WriteQueriesCsv(std::ostream& os, std::span<const QueryRecord> records) {
  os << "utt_id,speaker,attack_id,true_label,pred_label,score\n";
  for (const QueryRecord& r : records) {
    os << r.utt_id << ',' << r.speaker << ',' << r.attack_id << ',' << static_cast<int>(r.truth)
       << ',' << static_cast<int>(r.predicted) << ',' << internal::Num(r.score) << '\n';
  }
}

inline void WriteDetCsv(std::ostream& os, const std::vector<DetPoint>& points) {
  os << "far,frr,threshold\n";
  for (const DetPoint& p : points) {
    os << internal::Num(p.far) << ',' << internal::Num(p.frr) << ',' << internal::Num(p.threshold) << '\n';
  }
}

}  // namespace qsn
