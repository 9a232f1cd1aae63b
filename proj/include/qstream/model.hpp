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

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qstream/error.hpp"
#include "qstream/nn.hpp"
#include "qstream/rng.hpp"
#include "qstream/scenario.hpp"

namespace qstream {

// Widths of the learnable blocks. Hidden layers are relu.
struct ModelDims {
  int feature_dim = 32;
  int embedding_dim = 64;
  int grid_size = 3;
  int num_classes = 1;
  int det_hidden = 64;
  int embed_hidden = 128;
  int align_hidden = 128;
  int weight_hidden = 16;
  int decoder_hidden = 128;

  int grid_inputs() const { return 3 * grid_size * grid_size * grid_size; }
  // center(3) + log-dims(3) + (sin, cos) + score logit, then class logits when C > 1.
  int decoder_outputs() const { return 9 + (num_classes > 1 ? num_classes : 0); }
};

struct ModelBundle {
  nn::DenseNet det_encoder;
  nn::DenseNet embed_encoder;
  nn::DenseNet align_net;
  nn::DenseNet weight_net;
  nn::DenseNet decoder_head;

  static constexpr std::array<const char*, 5> kNames{"det_encoder", "embed_encoder", "align_net", "weight_net",
                                                     "decoder_head"};

  std::array<const nn::DenseNet*, 5> nets() const {
    return {&det_encoder, &embed_encoder, &align_net, &weight_net, &decoder_head};
  }
  std::array<nn::DenseNet*, 5> nets() {
    return {&det_encoder, &embed_encoder, &align_net, &weight_net, &decoder_head};
  }

  int feature_dim() const { return det_encoder.out_dim(); }

  // Throws DimMismatch unless the blocks chain through embed/align/fuse/decode.
  void validate() const {
    const int df = det_encoder.out_dim();
    auto need = [](bool ok, const char* what) {
      if (!ok) fail(ErrorCode::kDimMismatch, what);
    };
    need(det_encoder.in_dim() == scenario::kDescriptorDim, "det_encoder must take the 10-d box descriptor");
    need(align_net.in_dim() == df + 9 && align_net.out_dim() == df, "align_net must map D_f+9 -> D_f");
    need(embed_encoder.in_dim() > df, "embed_encoder must take grid inputs plus the feature");
    const int grid_in = embed_encoder.in_dim() - df;
    need(grid_in % 3 == 0, "embed_encoder grid block must hold 3-vectors");
    need(weight_net.in_dim() == 1 && weight_net.out_dim() == 1, "weight_net must be scalar -> scalar");
    need(!weight_net.layers().empty() && weight_net.layers().back().activation == nn::Activation::kSigmoid,
         "weight_net must end in a sigmoid");
    need(decoder_head.in_dim() == df + 3 && decoder_head.out_dim() >= 9, "decoder_head must map D_f+3 -> 9+");
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto* net : nets()) n += net->param_count();
    return n;
  }

  // Concatenation in kNames order.
  nn::ParamVector params() const {
    nn::ParamVector p(static_cast<Eigen::Index>(param_count()));
    Eigen::Index k = 0;
    for (const auto* net : nets()) {
      const auto q = net->params();
      p.segment(k, q.size()) = q;
      k += q.size();
    }
    return p;
  }

  void set_params(const nn::ParamVector& p) {
    if (static_cast<std::size_t>(p.size()) != param_count()) {
      fail(ErrorCode::kLengthMismatch, "bundle parameter vector length mismatch");
    }
    Eigen::Index k = 0;
    for (auto* net : nets()) {
      const auto n = static_cast<Eigen::Index>(net->param_count());
      net->set_params(p.segment(k, n));
      k += n;
    }
  }

  bool operator==(const ModelBundle&) const = default;
};

inline ModelBundle make_bundle(const ModelDims& d, std::uint64_t seed) {
  using nn::Activation;
  const auto relu = Activation::kRelu, ident = Activation::kIdentity, sig = Activation::kSigmoid;
  ModelBundle m;
  m.det_encoder = nn::init_net({scenario::kDescriptorDim, d.det_hidden, d.feature_dim}, {relu, ident}, mix_seed(seed, 1));
  m.embed_encoder = nn::init_net({d.grid_inputs() + d.feature_dim, d.embed_hidden, d.embedding_dim}, {relu, ident},
                                 mix_seed(seed, 2));
  m.align_net = nn::init_net({d.feature_dim + 9, d.align_hidden, d.feature_dim}, {relu, ident}, mix_seed(seed, 3));
  m.weight_net = nn::init_net({1, d.weight_hidden, 1}, {relu, sig}, mix_seed(seed, 4));
  m.decoder_head = nn::init_net({d.feature_dim + 3, d.decoder_hidden, d.decoder_outputs()}, {relu, ident},
                                mix_seed(seed, 5));
  m.validate();
  return m;
}

// ---- checkpoint + manifest ----

inline nlohmann::json bundle_manifest(const ModelBundle& m) {
  nlohmann::json j;
  j["format"] = "qcp";
  j["param_count"] = m.param_count();
  auto& nets = j["nets"];
  nets = nlohmann::json::array();
  const auto ptrs = m.nets();
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    nlohmann::json n;
    n["name"] = ModelBundle::kNames[i];
    n["dims"] = ptrs[i]->dims();
    std::vector<std::string> acts;
    for (auto a : ptrs[i]->activations()) acts.emplace_back(nn::activation_name(a));
    n["activations"] = acts;
    n["param_count"] = ptrs[i]->param_count();
    nets.push_back(n);
  }
  return j;
}

// Rebuilds zeroed networks from a manifest; parameters come from the .qcp payload.
inline ModelBundle bundle_from_manifest(const nlohmann::json& j) {
  ModelBundle m;
  auto ptrs = m.nets();
  const auto& nets = j.at("nets");
  if (!nets.is_array() || nets.size() != ptrs.size()) fail(ErrorCode::kConfigError, "manifest must list 5 nets");
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    const auto& n = nets[i];
    if (n.at("name").get<std::string>() != ModelBundle::kNames[i]) {
      fail(ErrorCode::kConfigError, "manifest net order mismatch");
    }
    const auto dims = n.at("dims").get<std::vector<int>>();
    std::vector<nn::Activation> acts;
    for (const auto& a : n.at("activations")) acts.push_back(nn::parse_activation(a.get<std::string>()));
    *ptrs[i] = nn::init_net(dims, acts, 0);
  }
  m.validate();
  return m;
}

inline void save_bundle(const ModelBundle& m, const std::string& qcp_path, const std::string& manifest_path) {
  {
    std::ofstream out(qcp_path, std::ios::binary);
    if (!out) fail(ErrorCode::kIoError, "cannot write " + qcp_path);
    const std::string bytes = nn::serialize_params(m.params());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::ofstream man(manifest_path);
  if (!man) fail(ErrorCode::kIoError, "cannot write " + manifest_path);
  man << bundle_manifest(m).dump(2) << '\n';
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIoError, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ModelBundle load_bundle(const std::string& qcp_path, const std::string& manifest_path) {
  ModelBundle m = bundle_from_manifest(nlohmann::json::parse(read_file(manifest_path)));
  m.set_params(nn::deserialize_params(read_file(qcp_path)));
  return m;
}

}  // namespace qstream
