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

#include "sopmt/model.h"

#include "sopmt/json_util.h"
#include "sopmt/mixsim.h"

namespace sopmt {

using nlohmann::json;

json ModelConfigToJson(const ModelConfig& c) {
  return json{
      {"num_content_tokens", c.num_content_tokens},
      {"num_talkers", c.num_talkers},
      {"encoder",
       {{"feature_dim", c.encoder.feature_dim},
        {"kind", EncoderKindName(c.encoder.kind)},
        {"model_dim", c.encoder.model_dim},
        {"num_layers", c.encoder.num_layers},
        {"num_heads", c.encoder.num_heads},
        {"ffn_dim", c.encoder.ffn_dim},
        {"conv_dim", c.encoder.conv_dim},
        {"conv_kernel", c.encoder.conv_kernel}}},
      {"separator_lstm_hidden", c.separator_lstm_hidden},
      {"decoder",
       {{"model_dim", c.decoder.model_dim},
        {"num_layers", c.decoder.num_layers},
        {"num_heads", c.decoder.num_heads},
        {"ffn_dim", c.decoder.ffn_dim},
        {"lora_rank", c.decoder.lora_rank},
        {"lora_alpha", c.decoder.lora_alpha}}},
      {"sop_delimiter", c.sop_delimiter},
  };
}

ModelConfig ModelConfigFromJson(const json& j) {
  ModelConfig c;
  JsonReader r(j, "model");
  r.Read("num_content_tokens", &c.num_content_tokens);
  r.Read("num_talkers", &c.num_talkers);
  if (r.Has("encoder")) {
    JsonReader e(r.Child("encoder"), "model.encoder");
    e.Read("feature_dim", &c.encoder.feature_dim);
    std::string kind = EncoderKindName(c.encoder.kind);
    e.Read("kind", &kind);
    c.encoder.kind = EncoderKindFromName(kind);
    e.Read("model_dim", &c.encoder.model_dim);
    e.Read("num_layers", &c.encoder.num_layers);
    e.Read("num_heads", &c.encoder.num_heads);
    e.Read("ffn_dim", &c.encoder.ffn_dim);
    e.Read("conv_dim", &c.encoder.conv_dim);
    e.Read("conv_kernel", &c.encoder.conv_kernel);
    e.Finish();
  }
  r.Read("separator_lstm_hidden", &c.separator_lstm_hidden);
  if (r.Has("decoder")) {
    JsonReader d(r.Child("decoder"), "model.decoder");
    d.Read("model_dim", &c.decoder.model_dim);
    d.Read("num_layers", &c.decoder.num_layers);
    d.Read("num_heads", &c.decoder.num_heads);
    d.Read("ffn_dim", &c.decoder.ffn_dim);
    d.Read("lora_rank", &c.decoder.lora_rank);
    d.Read("lora_alpha", &c.decoder.lora_alpha);
    d.Finish();
  }
  r.Read("sop_delimiter", &c.sop_delimiter);
  r.Finish();
  c.encoder.output_dim = c.decoder.model_dim;
  if (c.num_talkers < 1 || c.num_talkers > 3) {
    throw ConfigError("model.num_talkers must be 1, 2 or 3");
  }
  if (c.num_content_tokens < 1) {
    throw ConfigError("model.num_content_tokens must be >= 1");
  }
  auto check_attention = [](int dim, int heads, const char* where) {
    if (dim < 2 || heads < 1 || dim % heads != 0 || (dim / heads) % 2 != 0) {
      throw ConfigError(std::string(where) +
                        ": model_dim must split into an even width per head");
    }
  };
  check_attention(c.encoder.model_dim, c.encoder.num_heads, "model.encoder");
  check_attention(c.decoder.model_dim, c.decoder.num_heads, "model.decoder");
  if (c.encoder.feature_dim < 1 || c.encoder.num_layers < 1 ||
      c.encoder.ffn_dim < 1 || c.encoder.conv_dim < 1 ||
      c.encoder.conv_kernel < 1 || c.encoder.conv_kernel % 2 == 0 ||
      c.separator_lstm_hidden < 1 || c.decoder.num_layers < 1 ||
      c.decoder.ffn_dim < 1 || c.decoder.lora_rank < 1 ||
      c.decoder.lora_alpha <= 0) {
    throw ConfigError("model: sizes must be positive and conv_kernel odd");
  }
  return c;
}

const char* InputFormName(InputForm form) {
  switch (form) {
    case InputForm::kSot: return "sot";
    case InputForm::kSop: return "sop";
    case InputForm::kSopOnly: return "sop-only";
  }
  return "?";
}

InputForm InputFormFromName(const std::string& name) {
  if (name == "sot") return InputForm::kSot;
  if (name == "sop") return InputForm::kSop;
  if (name == "sop-only") return InputForm::kSopOnly;
  throw ConfigError("unknown input form '" + name + "' (sot|sop|sop-only)");
}

const char* AdapterStateName(AdapterState s) {
  switch (s) {
    case AdapterState::kAbsent: return "absent";
    case AdapterState::kActive: return "active";
    case AdapterState::kMerged: return "merged";
  }
  return "?";
}

AdapterState AdapterStateFromName(const std::string& name) {
  if (name == "absent") return AdapterState::kAbsent;
  if (name == "active") return AdapterState::kActive;
  if (name == "merged") return AdapterState::kMerged;
  throw DataError("unknown adapter state '" + name + "'");
}

Model::Model(const ModelConfig& config, uint64_t seed)
    : config_(config), vocab_(config.num_content_tokens) {
  config_.encoder.output_dim = config_.decoder.model_dim;
  Rng rng(DeriveSeed(seed, 0x6d6f64656cULL));
  encoder_ = std::make_unique<Encoder>(&store_, config_.encoder, &rng);
  decoder_ = std::make_unique<Decoder>(&store_, vocab_, config_.decoder, &rng);
}

const Separator& Model::separator() const {
  if (!separator_) throw ConfigError("model has no separator");
  return *separator_;
}

void Model::AttachLora(ParamGroup group, uint64_t seed) {
  Rng rng(seed);
  decoder_->AttachLora(&store_, group, &rng);
}

void Model::MergeLora(ParamGroup group) { decoder_->MergeLora(group); }

void Model::ResetSeparator(uint64_t seed) {
  separator_.reset();
  store_.RemoveGroup(ParamGroup::kSeparator);
  store_.RemoveGroup(ParamGroup::kCtcHeads);
  SeparatorConfig sc;
  sc.input_dim = config_.encoder.conv_dim;
  sc.lstm_hidden = config_.separator_lstm_hidden;
  sc.output_dim = config_.encoder.conv_dim;
  sc.num_talkers = config_.num_talkers;
  Rng rng(seed);
  separator_ = std::make_unique<Separator>(&store_, sc, vocab_, &rng);
}

ModelStructure Model::structure() const {
  auto state = [this](ParamGroup g) {
    if (!decoder_->HasLora(g)) return AdapterState::kAbsent;
    return decoder_->LoraMerged(g) ? AdapterState::kMerged
                                   : AdapterState::kActive;
  };
  ModelStructure s;
  s.lora_a = state(ParamGroup::kLoraA);
  s.lora_b = state(ParamGroup::kLoraB);
  s.has_separator = has_separator();
  return s;
}

void Model::ApplyStructure(const ModelStructure& s) {
  if (s.lora_a != AdapterState::kAbsent) AttachLora(ParamGroup::kLoraA, 0);
  if (s.has_separator) ResetSeparator(0);
  if (s.lora_b != AdapterState::kAbsent) AttachLora(ParamGroup::kLoraB, 0);
  // Merged adapters keep their factors; only the flag is restored because
  // the base weights already contain the update.
  decoder_->MarkMerged(ParamGroup::kLoraA, s.lora_a == AdapterState::kMerged);
  decoder_->MarkMerged(ParamGroup::kLoraB, s.lora_b == AdapterState::kMerged);
}

AdapterSet Model::ActiveAdapters() const {
  AdapterSet out;
  for (ParamGroup g : {ParamGroup::kLoraA, ParamGroup::kLoraB}) {
    if (decoder_->HasLora(g) && !decoder_->LoraMerged(g)) out.insert(g);
  }
  return out;
}

DecodeInputs Model::PrepareInputs(const Matrix& features,
                                  InputForm form) const {
  if (form != InputForm::kSot && !has_separator()) {
    throw ConfigError(std::string("input form '") + InputFormName(form) +
                      "' needs a checkpoint with a separator (stage 2 or "
                      "later)");
  }
  EncodingBundle enc = encoder_->Run(features);
  DecodeInputs in;
  in.h_p = std::move(enc.h_p);
  if (form != InputForm::kSot) {
    in.sop = DecodeSop(separator_->RunLogits(enc.h2), vocab_,
                       config_.sop_delimiter);
    in.e_sop = EmbedSop(in.sop, *decoder_->embedding());
  }
  return in;
}

std::vector<const Matrix*> Model::Prefix(const DecodeInputs& in,
                                         InputForm form) const {
  switch (form) {
    case InputForm::kSot: return {&in.h_p};
    case InputForm::kSop: return {&in.e_sop, &in.h_p};
    case InputForm::kSopOnly: return {&in.e_sop};
  }
  return {};
}

GenerateResult Model::Transcribe(const DecodeInputs& in, InputForm form,
                                 int max_len) const {
  return decoder_->Generate(Prefix(in, form), ActiveAdapters(), max_len);
}

}  // namespace sopmt
