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
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "qstream/error.hpp"
#include "qstream/evaluation.hpp"
#include "qstream/geometry.hpp"
#include "qstream/nn.hpp"
#include "qstream/query.hpp"

// Detection head g(.) and its training loss.
namespace qstream::head {

using evaluation::Prediction;

// Raw log-dims are clamped to this band before exponentiation.
inline constexpr double kLogDimBound = 4.0;

inline Eigen::VectorXd head_input(const ObjectQuery& q, const PerceptionRange& range) {
  Eigen::VectorXd in(q.feature.size() + 3);
  in << q.feature, normalize_point(q.ref_point, range);
  return in;
}

// Output layout: center offset(3) | log dims(3) | sin yaw | cos yaw | score logit | class logits.
inline Prediction decode_output(const Eigen::VectorXd& o, const Vec3& ref_point) {
  Prediction p;
  p.box.center = ref_point + o.head<3>();
  for (int i = 0; i < 3; ++i) p.box.dims[i] = std::exp(std::clamp(o[3 + i], -kLogDimBound, kLogDimBound));
  p.box.yaw = wrap_angle(std::atan2(o[6], o[7]));
  p.score = nn::sigmoid(o[8]);
  if (o.size() > 9) {
    Eigen::Index best = 0;
    o.tail(o.size() - 9).maxCoeff(&best);
    p.box.class_id = static_cast<int>(best);
  }
  return p;
}

inline Prediction decode_head(const ObjectQuery& q, const nn::DenseNet& head, const PerceptionRange& range) {
  if (head.in_dim() != q.feature.size() + 3) fail(ErrorCode::kDimMismatch, "decoder head expects D_f + 3 inputs");
  return decode_output(nn::forward(head, head_input(q, range)), q.ref_point);
}

inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

struct LossTerms {
  double center = 0.0;
  double dims = 0.0;
  double yaw = 0.0;
  double score = 0.0;
  double cls = 0.0;
};

// Per-query loss against an optional ground-truth box (nullptr: background or
// missed object). Returns the unweighted terms; `grad_box` and `grad_score`
// receive d(box terms)/do and d(score term)/do.
inline LossTerms query_loss(const Eigen::VectorXd& o, const Vec3& ref_point, const BBox3D* gt,
                            Eigen::VectorXd& grad_box, Eigen::VectorXd& grad_score) {
  grad_box = Eigen::VectorXd::Zero(o.size());
  grad_score = Eigen::VectorXd::Zero(o.size());
  LossTerms t;
  const double target = gt ? 1.0 : 0.0;
  t.score = softplus(o[8]) - target * o[8];
  grad_score[8] = nn::sigmoid(o[8]) - target;
  if (!gt) return t;

  for (int i = 0; i < 3; ++i) {
    const double e = ref_point[i] + o[i] - gt->center[i];
    t.center += std::abs(e);
    grad_box[i] = (e > 0.0) - (e < 0.0);
  }
  for (int i = 0; i < 3; ++i) {
    const double raw = o[3 + i];
    const double d = std::exp(std::clamp(raw, -kLogDimBound, kLogDimBound));
    const double e = d - gt->dims[i];
    t.dims += std::abs(e);
    if (raw > -kLogDimBound && raw < kLogDimBound) grad_box[3 + i] = ((e > 0.0) - (e < 0.0)) * d;
  }
  const double s = o[6], c = o[7];
  const double r2 = s * s + c * c;
  const double yaw = std::atan2(s, c);
  t.yaw = 1.0 - std::cos(yaw - gt->yaw);
  if (r2 > 1e-12) {
    const double dl_dyaw = std::sin(yaw - gt->yaw);
    grad_box[6] = dl_dyaw * c / r2;
    grad_box[7] = -dl_dyaw * s / r2;
  }
  if (o.size() > 9) {
    const Eigen::VectorXd logits = o.tail(o.size() - 9);
    const double mx = logits.maxCoeff();
    const Eigen::VectorXd ex = (logits.array() - mx).exp().matrix();
    const double z = ex.sum();
    t.cls = -(logits[gt->class_id] - mx - std::log(z));
    Eigen::VectorXd g = ex / z;
    g[gt->class_id] -= 1.0;
    grad_box.tail(o.size() - 9) = g;
  }
  return t;
}

struct LossResult {
  double value = 0.0;
  LossTerms mean_terms;
  std::vector<Eigen::VectorXd> grads;  // d loss / d output, per query
};

// Mean box loss over queries with a ground truth, plus mean binary
// cross-entropy over all queries.
inline LossResult compute_loss(const std::vector<Eigen::VectorXd>& outputs, const std::vector<Vec3>& ref_points,
                               const std::vector<const BBox3D*>& matched_gt, double score_weight = 1.0) {
  if (outputs.empty()) fail(ErrorCode::kEmptyBatch, "loss needs at least one query");
  if (outputs.size() != ref_points.size() || outputs.size() != matched_gt.size()) {
    fail(ErrorCode::kLengthMismatch, "outputs, reference points and targets differ in count");
  }
  std::size_t real = 0;
  for (const auto* g : matched_gt) real += g != nullptr;
  const double inv_all = score_weight / static_cast<double>(outputs.size());
  const double inv_real = real ? 1.0 / static_cast<double>(real) : 0.0;

  LossResult r;
  r.grads.resize(outputs.size());
  Eigen::VectorXd gb, gs;
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const LossTerms t = query_loss(outputs[k], ref_points[k], matched_gt[k], gb, gs);
    r.mean_terms.center += t.center * inv_real;
    r.mean_terms.dims += t.dims * inv_real;
    r.mean_terms.yaw += t.yaw * inv_real;
    r.mean_terms.cls += t.cls * inv_real;
    r.mean_terms.score += t.score * inv_all;
    r.grads[k] = gb * inv_real + gs * inv_all;
  }
  const auto& m = r.mean_terms;
  r.value = m.center + m.dims + m.yaw + m.cls + m.score;
  return r;
}

}  // namespace qstream::head
