// Copyright 2026 The QStream Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <vector>

#include "qstream/error.hpp"
#include "qstream/geometry.hpp"

namespace qstream::evaluation {

struct Prediction {
  BBox3D box;  // vehicle frame
  double score = 0.0;

  bool operator==(const Prediction&) const = default;
};

struct MatchFlags {
  std::vector<std::size_t> order;  // prediction indices, score-descending
  std::vector<bool> tp;            // aligned with `order`
  std::vector<double> scores;      // aligned with `order`
  std::vector<bool> gt_matched;
};

// Greedy: in score order, each prediction takes the unmatched same-class GT
// with the highest BEV IoU >= iou_thr.
inline MatchFlags match_predictions(const std::vector<Prediction>& preds, const std::vector<BBox3D>& gts,
                                    double iou_thr) {
  MatchFlags f;
  f.order.resize(preds.size());
  std::iota(f.order.begin(), f.order.end(), 0);
  std::stable_sort(f.order.begin(), f.order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  f.gt_matched.assign(gts.size(), false);
  for (std::size_t idx : f.order) {
    const auto& p = preds[idx];
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (f.gt_matched[g] || gts[g].class_id != p.box.class_id) continue;
      const double iou = bev_iou(p.box, gts[g]);
      if (iou >= iou_thr && iou > best) {
        best = iou;
        best_gt = g;
      }
    }
    const bool hit = best_gt < gts.size();
    if (hit) f.gt_matched[best_gt] = true;
    f.tp.push_back(hit);
    f.scores.push_back(p.score);
  }
  return f;
}

// 40-point interpolated AP over TP flags given in rank order.
inline double average_precision(const std::vector<bool>& tp_in_rank_order, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  double tp = 0.0, fp = 0.0;
  for (bool t : tp_in_rank_order) {
    (t ? tp : fp) += 1.0;
    precision.push_back(tp / (tp + fp));
    recall.push_back(tp / static_cast<double>(num_gt));
  }
  // Suffix maximum of precision.
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  std::size_t k = 0;
  for (int level = 1; level <= 40; ++level) {
    const double r = level / 40.0;
    while (k < recall.size() && recall[k] < r - 1e-12) ++k;
    if (k < recall.size()) sum += precision[k];
  }
  return sum / 40.0;
}

struct EvalResult {
  std::map<double, double> ap_bev;
  double recall_total = 0.0;
  double recall_occluded_from_vehicle = 0.0;
  std::size_t num_gt = 0;
  std::size_t num_pred = 0;
  std::size_t num_occluded_gt = 0;
};

// Per-scene evaluation input: GT in the vehicle frame plus agent visibility.
struct SceneTruth {
  std::vector<std::int64_t> ids;
  std::vector<BBox3D> boxes;
  std::set<std::int64_t> visible_to_vehicle;
  std::set<std::int64_t> visible_to_infrastructure;
};

struct EvalOptions {
  PerceptionRange range;
  // Recall counts predictions at or above this score, at the loosest IoU threshold.
  double recall_score_min = 0.5;
};

// Pooled evaluation: matching is per scene, ranking is global across scenes.
inline EvalResult evaluate(const std::vector<std::vector<Prediction>>& preds_per_scene,
                           const std::vector<SceneTruth>& truths, const std::vector<double>& iou_thrs,
                           const EvalOptions& opt = {}) {
  if (preds_per_scene.size() != truths.size()) fail(ErrorCode::kLengthMismatch, "predictions and scenes differ in count");
  EvalResult res;
  if (iou_thrs.empty()) return res;
  const double loosest = *std::min_element(iou_thrs.begin(), iou_thrs.end());

  // Range filtering happens once.
  std::vector<std::vector<Prediction>> preds(truths.size());
  std::vector<SceneTruth> gts(truths.size());
  for (std::size_t s = 0; s < truths.size(); ++s) {
    for (const auto& p : preds_per_scene[s])
      if (opt.range.contains_bev(p.box.center)) preds[s].push_back(p);
    for (std::size_t g = 0; g < truths[s].boxes.size(); ++g) {
      if (!opt.range.contains_bev(truths[s].boxes[g].center)) continue;
      gts[s].ids.push_back(truths[s].ids[g]);
      gts[s].boxes.push_back(truths[s].boxes[g]);
    }
    gts[s].visible_to_vehicle = truths[s].visible_to_vehicle;
    gts[s].visible_to_infrastructure = truths[s].visible_to_infrastructure;
    res.num_gt += gts[s].boxes.size();
    res.num_pred += preds[s].size();
  }

  for (double thr : iou_thrs) {
    std::vector<std::pair<double, bool>> ranked;
    std::size_t recalled = 0, occluded = 0, occluded_recalled = 0;
    for (std::size_t s = 0; s < truths.size(); ++s) {
      const MatchFlags f = match_predictions(preds[s], gts[s].boxes, thr);
      for (std::size_t k = 0; k < f.order.size(); ++k) ranked.emplace_back(f.scores[k], f.tp[k]);
      if (thr != loosest) continue;
      // Recall uses only confident predictions.
      std::vector<Prediction> confident;
      for (const auto& p : preds[s])
        if (p.score >= opt.recall_score_min) confident.push_back(p);
      const MatchFlags fc = match_predictions(confident, gts[s].boxes, thr);
      for (std::size_t g = 0; g < gts[s].boxes.size(); ++g) {
        const auto id = gts[s].ids[g];
        recalled += fc.gt_matched[g];
        if (!gts[s].visible_to_vehicle.count(id) && gts[s].visible_to_infrastructure.count(id)) {
          ++occluded;
          occluded_recalled += fc.gt_matched[g];
        }
      }
    }
    // Equal scores rank false positives first so the result ignores scene order.
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<bool> flags;
    flags.reserve(ranked.size());
    for (const auto& r : ranked) flags.push_back(r.second);
    res.ap_bev[thr] = average_precision(flags, res.num_gt);
    if (thr == loosest) {
      res.recall_total = res.num_gt ? static_cast<double>(recalled) / static_cast<double>(res.num_gt) : 0.0;
      res.recall_occluded_from_vehicle = occluded ? static_cast<double>(occluded_recalled) / static_cast<double>(occluded) : 0.0;
      res.num_occluded_gt = occluded;
    }
  }
  return res;
}

}  // namespace qstream::evaluation
