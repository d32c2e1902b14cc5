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

// Mixture encoder stack: a length-preserving sequence encoder, three
// stride-2 convolutions (the second one's output feeds the separator) and a
// linear projector into the decoder embedding space.

#pragma once

#include <string>
#include <vector>

#include "sopmt/nn.h"

namespace sopmt {

enum class EncoderKind { kTransformer, kBiLstm };
const char* EncoderKindName(EncoderKind kind);
EncoderKind EncoderKindFromName(const std::string& name);

struct EncoderConfig {
  int feature_dim = 16;
  EncoderKind kind = EncoderKind::kTransformer;
  int model_dim = 64;   // D_e
  int num_layers = 2;
  int num_heads = 4;
  int ffn_dim = 128;
  int conv_dim = 64;    // D_c
  int conv_kernel = 3;
  int output_dim = 64;  // D_m, must equal the decoder width
};

// Output length of one stride-2 convolution: ceil(n / 2).
int HalveLength(int n);

struct EncodingLengths {
  int t_e = 0;
  int t2 = 0;
  int t3 = 0;
  bool operator==(const EncodingLengths&) const = default;
};
EncodingLengths ComputeLengths(int num_frames);

struct EncodingBundle {
  Matrix h_e;
  Matrix h2;
  Matrix h_d;
  Matrix h_p;
  EncodingLengths lengths;
};

struct EncodingVars {
  Var h_e;
  Var h2;
  Var h_d;
  Var h_p;
};

class Encoder {
 public:
  Encoder(ParamStore* store, const EncoderConfig& config, Rng* rng);

  Var Encode(Graph* g, const Var& features) const;
  // Returns (h2, h_d).
  std::pair<Var, Var> Downsample(Graph* g, const Var& h_e) const;
  Var Project(Graph* g, const Var& h_d) const;
  EncodingVars Forward(Graph* g, const Var& features) const;

  // Gradient-free evaluation.
  EncodingBundle Run(const Matrix& features) const;
  // Samples are encoded independently, so no padding ever enters a sample.
  std::vector<EncodingBundle> RunBatch(
      const std::vector<const Matrix*>& features) const;

  const EncoderConfig& config() const { return config_; }
  const Linear& projector() const { return projector_; }

 private:
  Var Conv(Graph* g, const Linear& conv, const Var& x) const;

  EncoderConfig config_;
  Linear input_;
  std::vector<TransformerBlock> blocks_;
  std::vector<BiLstm> lstms_;
  LayerNormLayer ln_out_;
  Linear conv1_, conv2_, conv3_;
  Linear projector_;
};

}  // namespace sopmt
