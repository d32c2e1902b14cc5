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

// Full system: encoder stack, optional separator with CTC heads, and the
// adapted decoder, all sharing one parameter store.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "sopmt/decoder.h"
#include "sopmt/encoder.h"
#include "sopmt/sepctc.h"

namespace sopmt {

struct ModelConfig {
  int num_content_tokens = 28;
  int num_talkers = 2;
  EncoderConfig encoder;
  int separator_lstm_hidden = 32;
  DecoderConfig decoder;
  bool sop_delimiter = true;
};

nlohmann::json ModelConfigToJson(const ModelConfig& c);
ModelConfig ModelConfigFromJson(const nlohmann::json& j);

enum class InputForm { kSot, kSop, kSopOnly };
const char* InputFormName(InputForm form);
InputForm InputFormFromName(const std::string& name);

enum class AdapterState { kAbsent, kActive, kMerged };
const char* AdapterStateName(AdapterState s);
AdapterState AdapterStateFromName(const std::string& name);

struct ModelStructure {
  AdapterState lora_a = AdapterState::kAbsent;
  AdapterState lora_b = AdapterState::kAbsent;
  bool has_separator = false;
  bool operator==(const ModelStructure&) const = default;
};

// Decoder-side prefix and prompt for one mixture.
struct DecodeInputs {
  Matrix h_p;
  Matrix e_sop;
  SopPrompt sop;
};

class Model {
 public:
  Model(const ModelConfig& config, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  Encoder& encoder() { return *encoder_; }
  const Encoder& encoder() const { return *encoder_; }
  Decoder& decoder() { return *decoder_; }
  const Decoder& decoder() const { return *decoder_; }
  bool has_separator() const { return separator_ != nullptr; }
  const Separator& separator() const;

  void AttachLora(ParamGroup group, uint64_t seed);
  void MergeLora(ParamGroup group);
  // Replaces any separator and CTC heads with freshly initialised ones.
  void ResetSeparator(uint64_t seed);

  ModelStructure structure() const;
  // Builds the adapters and separator named by `s` (values arbitrary).
  void ApplyStructure(const ModelStructure& s);
  // Attached, unmerged adapter groups.
  AdapterSet ActiveAdapters() const;

  // Frozen evaluation helpers.
  DecodeInputs PrepareInputs(const Matrix& features, InputForm form) const;
  std::vector<const Matrix*> Prefix(const DecodeInputs& in,
                                    InputForm form) const;
  GenerateResult Transcribe(const DecodeInputs& in, InputForm form,
                            int max_len) const;

 private:
  ModelConfig config_;
  Vocabulary vocab_;
  ParamStore store_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<Decoder> decoder_;
  std::unique_ptr<Separator> separator_;
};

}  // namespace sopmt
