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

#include <cmath>

#include <gtest/gtest.h>

#include "qstream/nn.hpp"
#include "qstream/rng.hpp"

namespace qstream::nn {
namespace {

using Acts = std::vector<Activation>;

DenseNet single_layer(const Eigen::MatrixXd& w, const Eigen::VectorXd& b, Activation a) {
  return DenseNet({Layer{w, b, a}});
}

LossEval half_sq(const Vector& y) { return {0.5 * y.squaredNorm(), y}; }

Vector random_vec(Rng& rng, int n) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.uniform(-1.0, 1.0);
  return v;
}

TEST(Rng, MatchesReferenceSplitmix64) {
  Rng r(1234567);
  const std::uint64_t want[] = {6457827717110365317ULL, 3203168211198807973ULL, 9817491932198370423ULL,
                                4593380528125082431ULL, 16408922859458223821ULL};
  for (std::uint64_t w : want) EXPECT_EQ(r.next_u64(), w);
}

TEST(Rng, UniformAndNormalMoments) {
  Rng r(42);
  double s = 0, s2 = 0, n1 = 0, n2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
    s2 += u * u;
    const double z = r.normal();
    n1 += z;
    n2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.5, 0.005);
  EXPECT_NEAR(s2 / n - 0.25, 1.0 / 12.0, 0.002);
  EXPECT_NEAR(n1 / n, 0.0, 0.01);
  EXPECT_NEAR(n2 / n, 1.0, 0.02);
}

TEST(InitNet, Examples) {
  const DenseNet a = init_net({1, 1}, {Activation::kIdentity}, 5);
  ASSERT_EQ(a.param_count(), 2u);
  EXPECT_EQ(a.layers()[0].bias[0], 0.0);
  EXPECT_EQ(a, init_net({1, 1}, {Activation::kIdentity}, 5));
  EXPECT_FALSE(a == init_net({1, 1}, {Activation::kIdentity}, 6));
  EXPECT_EQ(init_net({4, 8, 2}, {Activation::kRelu, Activation::kIdentity}, 1).param_count(), 58u);
}

TEST(InitNet, GlorotBounds) {
  const DenseNet n = init_net({30, 50, 10}, {Activation::kRelu, Activation::kIdentity}, 3);
  for (const auto& l : n.layers()) {
    const double bound = std::sqrt(6.0 / static_cast<double>(l.weight.cols() + l.weight.rows()));
    EXPECT_LE(l.weight.cwiseAbs().maxCoeff(), bound);
    EXPECT_GT(l.weight.cwiseAbs().maxCoeff(), 0.8 * bound);
    EXPECT_TRUE(l.bias.isZero());
  }
}

TEST(InitNet, RejectsMismatchedActivations) {
  try {
    init_net({3, 4, 2}, {Activation::kRelu}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimMismatch);
  }
}

TEST(Forward, Examples) {
  const Vector x = Vector::LinSpaced(4, -1.0, 2.0);
  EXPECT_EQ(forward(single_layer(Eigen::MatrixXd::Identity(4, 4), Vector::Zero(4), Activation::kIdentity), x), x);
  EXPECT_TRUE(forward(single_layer(Eigen::MatrixXd::Zero(3, 4), Vector::Zero(3), Activation::kRelu), x).isZero());
  const Vector s = forward(single_layer(Eigen::MatrixXd::Zero(2, 4), Vector::Zero(2), Activation::kSigmoid), x);
  EXPECT_EQ(s, Vector::Constant(2, 0.5));
}

TEST(Forward, RejectsWrongInputSize) {
  const DenseNet n = init_net({3, 2}, {Activation::kIdentity}, 1);
  try {
    forward(n, Vector::Zero(4));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDimMismatch);
  }
}

TEST(Backward, HandChainRule) {
  // L = y^2 with y = w x, w = 2, x = 3: dL/dw = 2 y x = 36.
  const DenseNet n = single_layer(Eigen::MatrixXd::Constant(1, 1, 2.0), Vector::Zero(1), Activation::kIdentity);
  Tape tape;
  const Vector y = forward(n, Vector::Constant(1, 3.0), &tape);
  const Gradients g = backward(n, tape, 2.0 * y);
  EXPECT_DOUBLE_EQ(g.params[0], 36.0);
  EXPECT_DOUBLE_EQ(g.params[1], 12.0);  // bias
  EXPECT_DOUBLE_EQ(g.input[0], 24.0);
}

TEST(Backward, ZeroUpstreamGivesZeroGrads) {
  const DenseNet n = init_net({5, 7, 3}, {Activation::kRelu, Activation::kSigmoid}, 2);
  Tape tape;
  forward(n, Vector::Ones(5), &tape);
  const Gradients g = backward(n, tape, Vector::Zero(3));
  EXPECT_TRUE(g.params.isZero());
  EXPECT_TRUE(g.input.isZero());
}

// Dims <= [16, 16, 16] with random activations: the property pinned for the nn core.
TEST(FiniteDiff, HundredRandomNets) {
  Rng rng(11);
  const Activation pool[] = {Activation::kRelu, Activation::kSigmoid, Activation::kIdentity};
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int depth = 1 + static_cast<int>(rng.below(3));
    std::vector<int> dims{1 + static_cast<int>(rng.below(16))};
    Acts acts;
    for (int d = 0; d < depth; ++d) {
      dims.push_back(1 + static_cast<int>(rng.below(16)));
      acts.push_back(pool[rng.below(3)]);
    }
    DenseNet net = init_net(dims, acts, rng.next_u64());
    for (auto& l : net.mutable_layers()) {
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = rng.uniform(-0.5, 0.5);
    }
    const Vector x = random_vec(rng, dims.front());
    const double err = finite_diff_check(net, x, half_sq, 1e-4);
    worst = std::max(worst, err);
    ASSERT_LT(err, 1e-4) << "trial " << trial;
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(FiniteDiff, LinearQuadraticIsExact) {
  const DenseNet n = init_net({6, 4}, {Activation::kIdentity}, 9);
  Rng rng(3);
  EXPECT_LT(finite_diff_check(n, random_vec(rng, 6), half_sq, 1e-3), 1e-7);
}

TEST(FiniteDiff, SecondOrderConvergence) {
  const DenseNet n = init_net({4, 6, 2}, {Activation::kSigmoid, Activation::kSigmoid}, 12);
  Rng rng(4);
  const Vector x = random_vec(rng, 4);
  auto loss = [](const Vector& y) { return LossEval{std::pow(y.sum(), 3), Vector::Constant(y.size(), 3 * y.sum() * y.sum())}; };
  const double e1 = finite_diff_check(n, x, loss, 1e-2);
  const double e2 = finite_diff_check(n, x, loss, 5e-3);
  EXPECT_LE(e2, 4.0 * e1 + 1e-12);
  EXPECT_LT(e2, e1);
}

TEST(Sgd, Examples) {
  const ParamVector p = ParamVector::Constant(2, 1.0);
  EXPECT_EQ(sgd_step(p, ParamVector::Constant(2, 5.0), 0.0), p);
  ParamVector g(2);
  g << 1.0, -1.0;
  const ParamVector q = sgd_step(p, g, 0.5);
  EXPECT_DOUBLE_EQ(q[0], 0.5);
  EXPECT_DOUBLE_EQ(q[1], 1.5);

  ParamVector w = ParamVector::Constant(1, 1.0);
  for (int i = 0; i < 2; ++i) w = sgd_step(w, 2.0 * w, 0.1);  // f(w) = w^2
  EXPECT_NEAR(w[0], 0.64, 1e-15);

  try {
    sgd_step(p, ParamVector::Zero(3), 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLengthMismatch);
  }
}

TEST(Sgd, TrainingIsBitDeterministic) {
  auto run = [] {
    DenseNet n = init_net({3, 8, 1}, {Activation::kRelu, Activation::kIdentity}, 21);
    Rng data(5);
    for (int step = 0; step < 200; ++step) {
      const Vector x = random_vec(data, 3);
      Tape tape;
      const Vector y = forward(n, x, &tape);
      const Vector target = Vector::Constant(1, x.sum());
      const Gradients g = backward(n, tape, y - target);
      n.set_params(sgd_step(n.params(), g.params, 0.05));
    }
    return n.params();
  };
  const ParamVector a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
}

TEST(Params, RowMajorLayout) {
  Eigen::MatrixXd w(2, 3);
  w << 1, 2, 3, 4, 5, 6;
  Vector b(2);
  b << 7, 8;
  const DenseNet n = single_layer(w, b, Activation::kIdentity);
  ParamVector want(8);
  want << 1, 2, 3, 4, 5, 6, 7, 8;
  EXPECT_EQ(n.params(), want);
  DenseNet m = init_net({3, 2}, {Activation::kIdentity}, 0);
  m.set_params(want);
  EXPECT_EQ(m, n);
}

TEST(Checkpoint, SerializeRoundTripAndLayout) {
  ParamVector p(3);
  p << 1.0, -2.5, 1e-300;
  const std::string bytes = serialize_params(p);
  ASSERT_EQ(bytes.size(), 8u + 3 * 8u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 3);
  for (int i = 1; i < 8; ++i) EXPECT_EQ(bytes[i], 0);
  // 1.0 is 0x3FF0000000000000, little-endian.
  EXPECT_EQ(static_cast<unsigned char>(bytes[15]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[14]), 0xF0);
  EXPECT_EQ(deserialize_params(bytes), p);

  try {
    deserialize_params(bytes.substr(0, bytes.size() - 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kTruncatedPacket);
  }
}

TEST(Activation, NamesRoundTrip) {
  for (Activation a : {Activation::kRelu, Activation::kSigmoid, Activation::kIdentity}) {
    EXPECT_EQ(parse_activation(activation_name(a)), a);
  }
}

}  // namespace
}  // namespace qstream::nn
