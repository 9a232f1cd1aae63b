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
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qstream/error.hpp"
#include "qstream/rng.hpp"

namespace qstream::nn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
// Flat parameters: layers in order, each weight matrix row-major, then its bias.
using ParamVector = Eigen::VectorXd;

enum class Activation { kRelu, kSigmoid, kIdentity };

inline std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "sigmoid") return Activation::kSigmoid;
  if (s == "identity") return Activation::kIdentity;
  fail(ErrorCode::kInvalidArgument, "unknown activation '" + std::string(s) + "'");
}

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::kIdentity;
};

class DenseNet {
 public:
  DenseNet() = default;
  explicit DenseNet(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& mutable_layers() { return layers_; }

  int in_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
  int out_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }

  std::vector<int> dims() const {
    std::vector<int> d;
    if (layers_.empty()) return d;
    d.push_back(in_dim());
    for (const auto& l : layers_) d.push_back(static_cast<int>(l.weight.rows()));
    return d;
  }
  std::vector<Activation> activations() const {
    std::vector<Activation> a;
    for (const auto& l : layers_) a.push_back(l.activation);
    return a;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  ParamVector params() const {
    ParamVector p(static_cast<Eigen::Index>(param_count()));
    Eigen::Index k = 0;
    for (const auto& l : layers_) {
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) p[k++] = l.weight(r, c);
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) p[k++] = l.bias[r];
    }
    return p;
  }

  void set_params(const ParamVector& p) {
    if (static_cast<std::size_t>(p.size()) != param_count()) {
      fail(ErrorCode::kLengthMismatch, "parameter vector length does not match network");
    }
    Eigen::Index k = 0;
    for (auto& l : layers_) {
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = p[k++];
      for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias[r] = p[k++];
    }
  }

  bool operator==(const DenseNet& o) const {
    if (layers_.size() != o.layers_.size()) return false;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto &a = layers_[i], &b = o.layers_[i];
      if (a.activation != b.activation || a.weight.rows() != b.weight.rows() ||
          a.weight.cols() != b.weight.cols() || a.weight != b.weight || a.bias != b.bias)
        return false;
    }
    return true;
  }

 private:
  void validate() const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.bias.size() != l.weight.rows()) fail(ErrorCode::kDimMismatch, "bias/weight rows differ");
      if (i + 1 < layers_.size() && layers_[i + 1].weight.cols() != l.weight.rows()) {
        fail(ErrorCode::kDimMismatch, "layer dimensions do not chain");
      }
    }
  }

  std::vector<Layer> layers_;
};

// Glorot-uniform weights, zero biases. Draw order: layer by layer, row-major.
inline DenseNet init_net(const std::vector<int>& dims, const std::vector<Activation>& acts,
                         std::uint64_t seed) {
  if (dims.size() < 2 || acts.size() + 1 != dims.size()) {
    fail(ErrorCode::kDimMismatch, "need |activations| == |dims| - 1 and at least one layer");
  }
  for (int d : dims)
    if (d <= 0) fail(ErrorCode::kDimMismatch, "layer widths must be positive");
  Rng rng(seed);
  std::vector<Layer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const int in = dims[i], out = dims[i + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    Layer l{Matrix(out, in), Vector::Zero(out), acts[i]};
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) l.weight(r, c) = rng.uniform(-bound, bound);
    layers.push_back(std::move(l));
  }
  return DenseNet(std::move(layers));
}

// Cached per-layer inputs and pre-activations from one forward pass.
struct Tape {
  std::vector<Vector> inputs;
  std::vector<Vector> pre;
  Vector output;
};

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace detail {

inline Vector activate(Activation a, const Vector& z) {
  switch (a) {
    case Activation::kRelu: return z.cwiseMax(0.0);
    case Activation::kSigmoid: return z.unaryExpr([](double v) { return sigmoid(v); });
    case Activation::kIdentity: return z;
  }
  return z;
}

// d(activation)/dz given pre-activation z and activation output y.
inline Vector activation_grad(Activation a, const Vector& z, const Vector& y) {
  switch (a) {
    case Activation::kRelu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::kSigmoid: return (y.array() * (1.0 - y.array())).matrix();
    case Activation::kIdentity: return Vector::Ones(z.size());
  }
  return Vector::Ones(z.size());
}

}  // namespace detail

inline Vector forward(const DenseNet& net, const Vector& x, Tape* tape = nullptr) {
  if (x.size() != net.in_dim()) fail(ErrorCode::kDimMismatch, "input size does not match network");
  if (tape) {
    tape->inputs.clear();
    tape->pre.clear();
  }
  Vector a = x;
  for (const auto& l : net.layers()) {
    Vector z = l.weight * a + l.bias;
    Vector y = detail::activate(l.activation, z);
    if (tape) {
      tape->inputs.push_back(std::move(a));
      tape->pre.push_back(std::move(z));
    }
    a = std::move(y);
  }
  if (tape) tape->output = a;
  return a;
}

struct Gradients {
  ParamVector params;
  Vector input;
};

// Reverse-mode pass over one tape. Accumulates parameter gradients into `acc`
// (sized param_count()) and returns dL/dx.
inline Vector backward_into(const DenseNet& net, const Tape& tape, const Vector& dl_dy,
                            ParamVector& acc) {
  const auto& layers = net.layers();
  if (tape.inputs.size() != layers.size() || dl_dy.size() != net.out_dim()) {
    fail(ErrorCode::kDimMismatch, "tape or upstream gradient does not match network");
  }
  if (static_cast<std::size_t>(acc.size()) != net.param_count()) {
    fail(ErrorCode::kLengthMismatch, "gradient accumulator has wrong length");
  }
  // Offsets of each layer's block in the flat layout.
  std::vector<Eigen::Index> offset(layers.size());
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    offset[i] = k;
    k += layers[i].weight.size() + layers[i].bias.size();
  }
  Vector g = dl_dy;
  for (std::size_t ii = layers.size(); ii-- > 0;) {
    const auto& l = layers[ii];
    const Vector y = ii + 1 < layers.size() ? tape.inputs[ii + 1] : tape.output;
    const Vector dz = g.cwiseProduct(detail::activation_grad(l.activation, tape.pre[ii], y));
    const Vector& in = tape.inputs[ii];
    // Row-major weight block: acc[offset + r*cols + c] += dz[r] * in[c].
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wblock(
        acc.data() + offset[ii], l.weight.rows(), l.weight.cols());
    wblock.noalias() += dz * in.transpose();
    acc.segment(offset[ii] + l.weight.size(), l.bias.size()) += dz;
    g = l.weight.transpose() * dz;
  }
  return g;
}

inline Gradients backward(const DenseNet& net, const Tape& tape, const Vector& dl_dy) {
  Gradients out{ParamVector::Zero(static_cast<Eigen::Index>(net.param_count())), {}};
  out.input = backward_into(net, tape, dl_dy, out.params);
  return out;
}

inline ParamVector sgd_step(const ParamVector& params, const ParamVector& grads, double lr) {
  if (params.size() != grads.size()) fail(ErrorCode::kLengthMismatch, "params/grads length differ");
  return params - lr * grads;
}

// Scalar loss of a network output together with its gradient.
struct LossEval {
  double value = 0.0;
  Vector grad;
};

inline double relative_error(double fd, double bp) {
  return std::abs(fd - bp) / std::max(1e-8, std::abs(fd) + std::abs(bp));
}

// Central differences over an arbitrary parameter vector. `value(p)` evaluates
// the loss; `analytic` holds the backprop gradient at p.
template <typename ValueFn>
double finite_diff_max_error(const ParamVector& p, const ParamVector& analytic, ValueFn&& value,
                             double h) {
  double worst = 0.0;
  ParamVector q = p;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    q[i] = p[i] + h;
    const double up = value(q);
    q[i] = p[i] - h;
    const double down = value(q);
    q[i] = p[i];
    worst = std::max(worst, relative_error((up - down) / (2.0 * h), analytic[i]));
  }
  return worst;
}

// Gradient check of `loss` composed with `net` at input x.
template <typename LossFn>
double finite_diff_check(const DenseNet& net, const Vector& x, LossFn&& loss, double h) {
  Tape tape;
  const Vector y = forward(net, x, &tape);
  const LossEval le = loss(y);
  const Gradients g = backward(net, tape, le.grad);
  DenseNet probe = net;
  return finite_diff_max_error(net.params(), g.params,
                               [&](const ParamVector& q) {
                                 probe.set_params(q);
                                 return loss(forward(probe, x)).value;
                               },
                               h);
}

// ---- .qcp checkpoint payload: u64 count, then count little-endian f64 ----

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64_le(std::string_view in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_params(const ParamVector& p) {
  std::string out;
  out.reserve(8 + 8 * static_cast<std::size_t>(p.size()));
  detail::put_u64_le(out, static_cast<std::uint64_t>(p.size()));
  for (Eigen::Index i = 0; i < p.size(); ++i) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(p[i]));
  return out;
}

inline ParamVector deserialize_params(std::string_view bytes) {
  if (bytes.size() < 8) fail(ErrorCode::kTruncatedPacket, "checkpoint shorter than its length prefix");
  const std::uint64_t n = detail::get_u64_le(bytes, 0);
  if (n > (bytes.size() - 8) / 8 || bytes.size() != 8 + 8 * n) {
    fail(ErrorCode::kTruncatedPacket, "checkpoint length prefix does not match payload");
  }
  ParamVector p(static_cast<Eigen::Index>(n));
  for (std::uint64_t i = 0; i < n; ++i) p[static_cast<Eigen::Index>(i)] = std::bit_cast<double>(detail::get_u64_le(bytes, 8 + 8 * i));
  return p;
}

}  // namespace qstream::nn
