// Copyright (c) 2026 The sopmt Authors
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

#include "sopmt/encoder.h"

#include <tuple>

namespace sopmt {

const char* EncoderKindName(EncoderKind kind) {
  return kind == EncoderKind::kTransformer ? "transformer" : "blstm";
}

EncoderKind EncoderKindFromName(const std::string& name) {
  if (name == "transformer") return EncoderKind::kTransformer;
  if (name == "blstm") return EncoderKind::kBiLstm;
  throw ConfigError("unknown encoder kind '" + name +
                    "' (transformer|blstm)");
}

int HalveLength(int n) { return (n + 1) / 2; }

EncodingLengths ComputeLengths(int num_frames) {
  EncodingLengths l;
  l.t_e = num_frames;
  l.t2 = HalveLength(HalveLength(num_frames));
  l.t3 = HalveLength(l.t2);
  return l;
}

Encoder::Encoder(ParamStore* store, const EncoderConfig& config, Rng* rng)
    : config_(config),
      input_(store, "encoder.input", ParamGroup::kEncoder, config.feature_dim,
             config.model_dim, true, rng),
      ln_out_(store, "encoder.ln_out", ParamGroup::kEncoder, config.model_dim),
      conv1_(store, "downsample.conv1", ParamGroup::kDownsample,
             config.conv_kernel * config.model_dim, config.conv_dim, true, rng),
      conv2_(store, "downsample.conv2", ParamGroup::kDownsample,
             config.conv_kernel * config.conv_dim, config.conv_dim, true, rng),
      conv3_(store, "downsample.conv3", ParamGroup::kDownsample,
             config.conv_kernel * config.conv_dim, config.conv_dim, true, rng),
      projector_(store, "projector", ParamGroup::kProjector, config.conv_dim,
                 config.output_dim, true, rng) {
  if (config.conv_kernel < 1 || config.conv_kernel % 2 == 0) {
    throw ConfigError("conv_kernel must be odd");
  }
  for (int i = 0; i < config.num_layers; ++i) {
    const std::string name = "encoder.layer" + std::to_string(i);
    if (config.kind == EncoderKind::kTransformer) {
      AttentionOptions opts;
      opts.num_heads = config.num_heads;
      blocks_.emplace_back(store, name, ParamGroup::kEncoder, config.model_dim,
                           config.ffn_dim, opts, rng);
    } else {
      if (config.model_dim % 2 != 0) {
        throw ConfigError("blstm encoder needs an even model_dim");
      }
      lstms_.emplace_back(store, name, ParamGroup::kEncoder, config.model_dim,
                          config.model_dim / 2, rng);
    }
  }
}

Var Encoder::Encode(Graph* g, const Var& features) const {
  if (features.rows() < 1) throw DataError("encode: empty feature matrix");
  if (features.cols() != config_.feature_dim) {
    throw ShapeError("encode: expected " + std::to_string(config_.feature_dim) +
                     " feature columns, got " +
                     std::to_string(features.cols()));
  }
  Var x = input_.Forward(g, features);
  for (const auto& block : blocks_) x = block.Forward(g, x, {});
  for (const auto& lstm : lstms_) x = ag::Add(x, lstm.Forward(g, x));
  return ln_out_.Forward(g, x);
}

Var Encoder::Conv(Graph* g, const Linear& conv, const Var& x) const {
  const int pad = config_.conv_kernel / 2;
  return ag::Relu(
      conv.Forward(g, ag::Im2Col(x, config_.conv_kernel, 2, pad)));
}

std::pair<Var, Var> Encoder::Downsample(Graph* g, const Var& h_e) const {
  if (h_e.rows() < 1) throw DataError("downsample: empty input");
  Var h1 = Conv(g, conv1_, h_e);
  Var h2 = Conv(g, conv2_, h1);
  return {h2, Conv(g, conv3_, h2)};
}

Var Encoder::Project(Graph* g, const Var& h_d) const {
  return projector_.Forward(g, h_d);
}

EncodingVars Encoder::Forward(Graph* g, const Var& features) const {
  EncodingVars out;
  out.h_e = Encode(g, features);
  std::tie(out.h2, out.h_d) = Downsample(g, out.h_e);
  out.h_p = Project(g, out.h_d);
  return out;
}

EncodingBundle Encoder::Run(const Matrix& features) const {
  Graph g(false);
  EncodingVars v = Forward(&g, g.Constant(features));
  EncodingBundle b;
  b.h_e = v.h_e.value();
  b.h2 = v.h2.value();
  b.h_d = v.h_d.value();
  b.h_p = v.h_p.value();
  b.lengths = ComputeLengths(static_cast<int>(features.rows()));
  return b;
}

std::vector<EncodingBundle> Encoder::RunBatch(
    const std::vector<const Matrix*>& features) const {
  std::vector<EncodingBundle> out;
  out.reserve(features.size());
  for (const Matrix* f : features) out.push_back(Run(*f));
  return out;
}

}  // namespace sopmt
