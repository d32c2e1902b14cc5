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

#include "sopmt/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sopmt/evalkit.h"
#include "sopmt/json_util.h"
#include "sopmt/labels.h"

namespace sopmt {

using nlohmann::json;

const char* StageName(Stage s) {
  switch (s) {
    case Stage::kStage1: return "1";
    case Stage::kStage2: return "2";
    case Stage::kStage3: return "3";
    case Stage::kSingle: return "single";
  }
  return "?";
}

Stage StageFromName(const std::string& name) {
  if (name == "1") return Stage::kStage1;
  if (name == "2") return Stage::kStage2;
  if (name == "3") return Stage::kStage3;
  if (name == "single") return Stage::kSingle;
  throw ConfigError("unknown stage '" + name + "' (1|2|3|single)");
}

json TrainConfigToJson(const TrainConfig& c) {
  return json{
      {"alpha", c.alpha},
      {"batch_size", c.batch_size},
      {"steps_stage1", c.steps_stage1},
      {"steps_stage2", c.steps_stage2},
      {"steps_stage3", c.steps_stage3},
      {"steps_single", c.steps_single},
      {"lr_stage1", c.lr_stage1},
      {"lr_stage2", c.lr_stage2},
      {"lr_stage3", c.lr_stage3},
      {"lr_single", c.lr_single},
      {"warmup_fraction", c.warmup_fraction},
      {"grad_clip", c.grad_clip},
      {"log_every", c.log_every},
      {"monitor_samples", c.monitor_samples},
      {"stage3_input_form", c.stage3_input_form},
      {"pretrain_steps", c.pretrain_steps},
      {"pretrain_lr", c.pretrain_lr},
      {"pretrain_batch_size", c.pretrain_batch_size},
  };
}

TrainConfig TrainConfigFromJson(const json& j) {
  TrainConfig c;
  JsonReader r(j, "train");
  r.Read("alpha", &c.alpha);
  r.Read("batch_size", &c.batch_size);
  r.Read("steps_stage1", &c.steps_stage1);
  r.Read("steps_stage2", &c.steps_stage2);
  r.Read("steps_stage3", &c.steps_stage3);
  r.Read("steps_single", &c.steps_single);
  r.Read("lr_stage1", &c.lr_stage1);
  r.Read("lr_stage2", &c.lr_stage2);
  r.Read("lr_stage3", &c.lr_stage3);
  r.Read("lr_single", &c.lr_single);
  r.Read("warmup_fraction", &c.warmup_fraction);
  r.Read("grad_clip", &c.grad_clip);
  r.Read("log_every", &c.log_every);
  r.Read("monitor_samples", &c.monitor_samples);
  r.Read("stage3_input_form", &c.stage3_input_form);
  r.Read("pretrain_steps", &c.pretrain_steps);
  r.Read("pretrain_lr", &c.pretrain_lr);
  r.Read("pretrain_batch_size", &c.pretrain_batch_size);
  r.Finish();
  if (c.pretrain_steps < 0 || c.pretrain_batch_size < 1) {
    throw ConfigError("train.pretrain_steps must be >= 0 and "
                      "train.pretrain_batch_size >= 1");
  }
  if (c.alpha < 0 || c.alpha > 1) throw ConfigError("train.alpha must lie in [0, 1]");
  if (c.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (c.steps_stage1 < 0 || c.steps_stage2 < 0 || c.steps_stage3 < 0 ||
      c.steps_single < 0) {
    throw ConfigError("train step counts must be >= 0");
  }
  if (c.warmup_fraction < 0 || c.warmup_fraction > 1) {
    throw ConfigError("train.warmup_fraction must lie in [0, 1]");
  }
  InputForm form = InputFormFromName(c.stage3_input_form);
  if (form == InputForm::kSot) {
    throw ConfigError("train.stage3_input_form must be sop or sop-only");
  }
  return c;
}

// Checkpoints

namespace {

constexpr char kCkptMagic[4] = {'S', 'O', 'P', 'C'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void Put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T Get(std::istream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError(path + ": truncated checkpoint");
  return v;
}

void PutString(std::ostream& out, const std::string& s) {
  Put<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string GetString(std::istream& in, const std::string& path) {
  const uint32_t n = Get<uint32_t>(in, path);
  if (n > (1u << 30)) throw DataError(path + ": corrupt string length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw DataError(path + ": truncated checkpoint");
  return s;
}

void PutMatrix(std::ostream& out, const Matrix& m) {
  FloatMatrix f = m.cast<float>();
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
}

Matrix GetMatrix(std::istream& in, uint32_t rows, uint32_t cols,
                 const std::string& path) {
  FloatMatrix f(rows, cols);
  in.read(reinterpret_cast<char*>(f.data()),
          static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!in) throw DataError(path + ": truncated checkpoint payload");
  return f.cast<Real>();
}

}  // namespace

void SaveCheckpoint(const TrainedModel& tm, const std::string& path) {
  const Model& model = *tm.model;
  const ModelStructure st = model.structure();
  json meta = {
      {"format", "sopmt-checkpoint"},
      {"stage_id", StageName(tm.stage)},
      {"seed", tm.seed},
      {"config_hash", tm.config_hash},
      {"train_input_form", tm.train_input_form},
      {"model_config", ModelConfigToJson(model.config())},
      {"structure",
       {{"lora_A", AdapterStateName(st.lora_a)},
        {"lora_B", AdapterStateName(st.lora_b)},
        {"separator", st.has_separator}}},
      {"merge_flags",
       {{"lora_A", st.lora_a == AdapterState::kMerged},
        {"lora_B", st.lora_b == AdapterState::kMerged}}},
      {"optimizer", {{"step", tm.optimizer.step}}},
      {"rng_state", tm.rng_state},
      {"metrics_history", tm.metrics},
  };
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kCkptMagic, 4);
  Put<uint32_t>(out, kCkptVersion);
  const std::string meta_text = meta.dump();
  Put<uint64_t>(out, meta_text.size());
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

  std::vector<const Parameter*> params = model.store().All();
  std::sort(params.begin(), params.end(),
            [](const Parameter* a, const Parameter* b) {
              return a->name < b->name;
            });
  Put<uint32_t>(out, static_cast<uint32_t>(params.size()));
  for (const Parameter* p : params) {
    PutString(out, p->name);
    PutString(out, ParamGroupName(p->group));
    Put<uint8_t>(out, p->trainable ? 1 : 0);
    Put<uint32_t>(out, static_cast<uint32_t>(p->value.rows()));
    Put<uint32_t>(out, static_cast<uint32_t>(p->value.cols()));
    PutMatrix(out, p->value);
    auto it = tm.optimizer.moments.find(p->name);
    const bool has = it != tm.optimizer.moments.end() &&
                     it->second.m.size() == p->value.size();
    Put<uint8_t>(out, has ? 1 : 0);
    if (has) {
      PutMatrix(out, it->second.m);
      PutMatrix(out, it->second.v);
    }
  }
  if (!out) throw DataError("error writing checkpoint " + path);
}

TrainedModel LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCkptMagic, 4) != 0) {
    throw DataError(path + ": not a checkpoint file");
  }
  const uint32_t version = Get<uint32_t>(in, path);
  if (version != kCkptVersion) {
    throw DataError(path + ": unsupported checkpoint version " +
                    std::to_string(version));
  }
  const uint64_t meta_len = Get<uint64_t>(in, path);
  if (meta_len > (1ull << 32)) throw DataError(path + ": corrupt header");
  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw DataError(path + ": truncated metadata");

  TrainedModel tm;
  try {
    json meta = json::parse(meta_text);
    tm.stage = StageFromName(meta.at("stage_id").get<std::string>());
    tm.seed = meta.at("seed").get<uint64_t>();
    tm.config_hash = meta.at("config_hash").get<std::string>();
    tm.train_input_form = meta.at("train_input_form").get<std::string>();
    tm.rng_state = meta.at("rng_state").get<std::string>();
    tm.metrics = meta.at("metrics_history");
    tm.optimizer.step = meta.at("optimizer").at("step").get<int>();
    ModelStructure st;
    st.lora_a = AdapterStateFromName(meta.at("structure").at("lora_A"));
    st.lora_b = AdapterStateFromName(meta.at("structure").at("lora_B"));
    st.has_separator = meta.at("structure").at("separator").get<bool>();
    tm.model = std::make_unique<Model>(
        ModelConfigFromJson(meta.at("model_config")), tm.seed);
    tm.model->ApplyStructure(st);
  } catch (const json::exception& e) {
    throw DataError(path + ": bad checkpoint metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(path + ": bad checkpoint metadata: " + e.what());
  }

  ParamStore& store = tm.model->store();
  const uint32_t count = Get<uint32_t>(in, path);
  if (count != store.size()) {
    throw DataError(path + ": holds " + std::to_string(count) +
                    " parameters, model expects " +
                    std::to_string(store.size()));
  }
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = GetString(in, path);
    const std::string group = GetString(in, path);
    const bool trainable = Get<uint8_t>(in, path) != 0;
    const uint32_t rows = Get<uint32_t>(in, path);
    const uint32_t cols = Get<uint32_t>(in, path);
    Parameter* p = store.Find(name);
    if (p == nullptr) throw DataError(path + ": unexpected parameter " + name);
    if (group != ParamGroupName(p->group) || rows != p->value.rows() ||
        cols != p->value.cols()) {
      throw DataError(path + ": parameter " + name + " does not match the "
                      "model (group or shape)");
    }
    p->value = GetMatrix(in, rows, cols, path);
    p->trainable = trainable;
    p->ZeroGrad();
    if (Get<uint8_t>(in, path) != 0) {
      AdamMoments& mom = tm.optimizer.moments[name];
      mom.m = GetMatrix(in, rows, cols, path);
      mom.v = GetMatrix(in, rows, cols, path);
    }
  }
  in.peek();
  if (!in.eof()) throw DataError(path + ": trailing bytes after payload");
  return tm;
}

// Trainer

Trainer::Trainer(const ModelConfig& model_config, const TrainConfig& config,
                 uint64_t seed, std::string config_hash, LogFn log)
    : model_config_(model_config),
      config_(config),
      seed_(seed),
      config_hash_(std::move(config_hash)),
      log_(std::move(log)) {}

void Trainer::Emit(json record) const {
  if (log_) log_(record);
}

namespace {

void CheckData(const Model& model, const Dataset& data) {
  if (data.samples.empty()) throw DataError("training set is empty");
  if (!(data.meta.vocab == model.vocab())) {
    throw DataError("dataset vocabulary does not match the model");
  }
  if (data.meta.emission.feature_dim != model.config().encoder.feature_dim) {
    throw DataError("dataset feature width does not match the model");
  }
}

void CheckTalkers(const Model& model, const Dataset& data) {
  if (data.meta.num_talkers != model.config().num_talkers) {
    throw DataError("dataset has " + std::to_string(data.meta.num_talkers) +
                    " talkers, separator expects " +
                    std::to_string(model.config().num_talkers));
  }
}

std::vector<SotLabel> Labels(const Dataset& data) {
  std::vector<SotLabel> out;
  for (const auto& s : data.samples) {
    out.push_back(SerializeTranscripts(s.talker_transcripts, s.offsets,
                                       data.meta.vocab));
  }
  return out;
}

std::vector<std::vector<TokenSeq>> BranchTargets(const Dataset& data) {
  std::vector<std::vector<TokenSeq>> out;
  for (const auto& s : data.samples) {
    std::vector<TokenSeq> t;
    for (int k : SpeakingOrder(s.offsets)) t.push_back(s.talker_transcripts[k]);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::string> Ids(const Dataset& data) {
  std::vector<std::string> out;
  for (const auto& s : data.samples) out.push_back(s.sample_id);
  return out;
}

TokenSeq WithBos(const Vocabulary& vocab, const TokenSeq& label) {
  TokenSeq t = {vocab.bos()};
  t.insert(t.end(), label.begin(), label.end());
  return t;
}

Real WindowMean(const std::vector<Real>& v, bool head) {
  const size_t n = std::min<size_t>(50, v.size());
  if (n == 0) return 0.0;
  auto begin = head ? v.begin() : v.end() - static_cast<std::ptrdiff_t>(n);
  return std::accumulate(begin, begin + static_cast<std::ptrdiff_t>(n), 0.0) /
         static_cast<Real>(n);
}

}  // namespace

void Trainer::Loop(TrainedModel* tm, Stage stage, int steps, Real lr,
                   size_t num_samples, const LossFn& loss_fn,
                   const std::vector<std::string>& sample_ids) {
  Model& model = *tm->model;
  AdamConfig ac;
  ac.lr = lr;
  ac.warmup_fraction = config_.warmup_fraction;
  ac.grad_clip = config_.grad_clip;
  Adam adam(ac, steps);
  std::vector<Parameter*> trainable = model.store().Trainable();

  Rng rng(DeriveSeed(seed_, 0x5000 + static_cast<uint64_t>(stage)));
  std::vector<size_t> order(num_samples);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  size_t cursor = 0;

  summary_ = StageSummary();
  std::vector<Real> losses;
  const Real inv_batch = 1.0 / config_.batch_size;
  for (int step = 0; step < steps; ++step) {
    for (Parameter* p : trainable) p->grad.setZero();
    Real loss_sum = 0.0, ce_sum = 0.0, ctc_sum = 0.0;
    int infeasible = 0;
    for (int b = 0; b < config_.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const size_t idx = order[cursor++];
      Graph g(true);
      SampleLoss sl = loss_fn(&g, idx);
      const Real value = sl.total.scalar();
      if (!std::isfinite(value)) {
        json diag = {{"event", "numeric_failure"}, {"stage", StageName(stage)},
                     {"step", step}, {"sample_id", sample_ids[idx]},
                     {"ce", sl.ce}, {"ctc", sl.ctc}};
        Emit(diag);
        throw NumericError("non-finite loss at stage " +
                           std::string(StageName(stage)) + " step " +
                           std::to_string(step) + " on sample " +
                           sample_ids[idx]);
      }
      g.Backward(ag::Scale(sl.total, inv_batch));
      loss_sum += value;
      ce_sum += sl.ce;
      ctc_sum += sl.ctc;
      infeasible += sl.infeasible;
    }
    const Real rate = adam.LearningRate(adam.step());
    const Real norm = adam.Step(trainable);
    if (!std::isfinite(norm)) {
      Emit({{"event", "numeric_failure"}, {"stage", StageName(stage)},
            {"step", step}, {"grad_norm", "non-finite"}});
      throw NumericError("non-finite gradient at stage " +
                         std::string(StageName(stage)) + " step " +
                         std::to_string(step));
    }
    const Real loss = loss_sum * inv_batch;
    losses.push_back(loss);
    summary_.infeasible_branches += infeasible;
    if (config_.log_every > 0 &&
        (step % config_.log_every == 0 || step + 1 == steps)) {
      Emit({{"event", "step"}, {"stage", StageName(stage)}, {"step", step},
            {"loss", loss}, {"ce", ce_sum * inv_batch},
            {"ctc", ctc_sum * inv_batch}, {"infeasible_ctc", infeasible},
            {"lr", rate}, {"grad_norm", norm}});
    }
  }
  model.store().RoundToFloat();
  for (auto& [name, mom] : adam.moments()) {
    mom.m = mom.m.cast<float>().cast<Real>();
    mom.v = mom.v.cast<float>().cast<Real>();
  }
  tm->optimizer.step = adam.step();
  tm->optimizer.moments = adam.moments();
  std::ostringstream rs;
  rs << rng;
  tm->rng_state = rs.str();
  tm->stage = stage;
  tm->seed = seed_;
  tm->config_hash = config_hash_;

  summary_.steps = steps;
  summary_.first_window_loss = WindowMean(losses, true);
  summary_.last_window_loss = WindowMean(losses, false);
  summary_.final_loss = losses.empty() ? 0.0 : losses.back();
  tm->metrics.push_back({{"stage", StageName(stage)},
                         {"steps", steps},
                         {"first_window_loss", summary_.first_window_loss},
                         {"last_window_loss", summary_.last_window_loss},
                         {"final_loss", summary_.final_loss},
                         {"infeasible_ctc", summary_.infeasible_branches}});
}

PretrainPair PretrainText(const Vocabulary& vocab, Rng* rng) {
  std::uniform_int_distribution<int> num_segments(1, 3);
  std::uniform_int_distribution<int> seg_len(4, 12);
  std::uniform_int_distribution<TokenId> content(1, vocab.num_content());
  std::uniform_real_distribution<Real> coin(0.0, 1.0);
  PretrainPair out;
  const int segments = num_segments(*rng);
  for (int k = 0; k < segments; ++k) {
    if (k > 0) out.text.push_back(vocab.sc());
    const int n = seg_len(*rng);
    for (int i = 0; i < n; ++i) out.text.push_back(content(*rng));
  }
  const Real noise = 0.3 * coin(*rng);
  for (TokenId t : out.text) {
    const Real u = coin(*rng);
    if (u < noise / 3) {
      continue;  // deletion
    } else if (u < 2 * noise / 3) {
      out.passage.push_back(content(*rng));  // substitution
    } else if (u < noise) {
      out.passage.push_back(t);
      out.passage.push_back(content(*rng));  // insertion
    } else {
      out.passage.push_back(t);
    }
  }
  return out;
}

void Trainer::PretrainDecoder(Model* model) {
  if (config_.pretrain_steps == 0) return;
  const Vocabulary& vocab = model->vocab();
  model->store().SetTrainable({ParamGroup::kDecoderBase});
  std::vector<Parameter*> params = model->store().Trainable();
  AdamConfig ac;
  ac.lr = config_.pretrain_lr;
  ac.warmup_fraction = config_.warmup_fraction;
  ac.grad_clip = config_.grad_clip;
  Adam adam(ac, config_.pretrain_steps);
  Rng rng(DeriveSeed(seed_, 0x7e47));
  const Real inv_batch = 1.0 / config_.pretrain_batch_size;
  std::vector<Real> losses;
  Emit({{"event", "stage_start"}, {"stage", "pretrain"},
        {"steps", config_.pretrain_steps}});
  for (int step = 0; step < config_.pretrain_steps; ++step) {
    for (Parameter* p : params) p->grad.setZero();
    Real loss_sum = 0.0;
    for (int b = 0; b < config_.pretrain_batch_size; ++b) {
      const PretrainPair pair = PretrainText(vocab, &rng);
      Graph g(true);
      Var passage = model->decoder().EmbedText(&g, pair.passage);
      Var e_t = model->decoder().EmbedText(&g, WithBos(vocab, pair.text));
      Var logits = model->decoder().Forward(&g, {passage}, e_t, {});
      Var loss = model->decoder().CeLoss(logits, pair.text);
      loss_sum += loss.scalar();
      g.Backward(ag::Scale(loss, inv_batch));
    }
    const Real rate = adam.LearningRate(adam.step());
    const Real norm = adam.Step(params);
    if (!std::isfinite(loss_sum) || !std::isfinite(norm)) {
      Emit({{"event", "numeric_failure"}, {"stage", "pretrain"},
            {"step", step}});
      throw NumericError("non-finite loss in decoder pretraining at step " +
                         std::to_string(step));
    }
    losses.push_back(loss_sum * inv_batch);
    if (config_.log_every > 0 &&
        (step % config_.log_every == 0 || step + 1 == config_.pretrain_steps)) {
      Emit({{"event", "step"}, {"stage", "pretrain"}, {"step", step},
            {"loss", losses.back()}, {"lr", rate}, {"grad_norm", norm}});
    }
  }
  model->store().RoundToFloat();
  Emit({{"event", "stage_end"}, {"stage", "pretrain"},
        {"first_window_loss", WindowMean(losses, true)},
        {"last_window_loss", WindowMean(losses, false)}});
}

TrainedModel Trainer::Stage1(const Dataset& train, const Dataset* dev) {
  (void)dev;
  TrainedModel tm;
  tm.model = std::make_unique<Model>(model_config_, seed_);
  Model& model = *tm.model;
  CheckData(model, train);
  PretrainDecoder(&model);
  model.AttachLora(ParamGroup::kLoraA, DeriveSeed(seed_, 0xA1));
  model.store().SetTrainable({ParamGroup::kEncoder, ParamGroup::kDownsample,
                              ParamGroup::kProjector, ParamGroup::kLoraA});
  const std::vector<SotLabel> labels = Labels(train);
  const Vocabulary& vocab = model.vocab();
  const AdapterSet active = {ParamGroup::kLoraA};

  LossFn fn = [&](Graph* g, size_t i) {
    EncodingVars enc =
        model.encoder().Forward(g, g->Constant(train.samples[i].features));
    Var e_t = model.decoder().EmbedText(g, WithBos(vocab, labels[i].tokens));
    Var logits = model.decoder().Forward(g, {enc.h_p}, e_t, active);
    SampleLoss sl;
    sl.total = model.decoder().CeLoss(logits, labels[i].tokens);
    sl.ce = sl.total.scalar();
    return sl;
  };
  Emit({{"event", "stage_start"}, {"stage", "1"}, {"steps", config_.steps_stage1}});
  Loop(&tm, Stage::kStage1, config_.steps_stage1, config_.lr_stage1,
       train.samples.size(), fn, Ids(train));
  model.MergeLora(ParamGroup::kLoraA);
  model.store().RoundToFloat();
  tm.train_input_form = "sot";
  Emit({{"event", "stage_end"}, {"stage", "1"},
        {"final_loss", summary_.final_loss}, {"lora_A", "merged"}});
  return tm;
}

TrainedModel Trainer::Stage2(TrainedModel prev, const Dataset& train,
                             const Dataset* dev) {
  if (prev.stage != Stage::kStage1 ||
      prev.model->structure().lora_a != AdapterState::kMerged) {
    throw DataError(std::string("stage 2 needs a stage-1 checkpoint with "
                                "merged lora_A; got stage ") +
                    StageName(prev.stage));
  }
  TrainedModel tm = std::move(prev);
  Model& model = *tm.model;
  CheckData(model, train);
  CheckTalkers(model, train);
  model.ResetSeparator(DeriveSeed(seed_, 0x5E9));
  model.store().SetTrainable({ParamGroup::kEncoder, ParamGroup::kDownsample,
                              ParamGroup::kProjector, ParamGroup::kSeparator,
                              ParamGroup::kCtcHeads});
  const std::vector<SotLabel> labels = Labels(train);
  const auto targets = BranchTargets(train);
  const Vocabulary& vocab = model.vocab();
  const Real alpha = config_.alpha;
  const int talkers = model.config().num_talkers;

  LossFn fn = [&](Graph* g, size_t i) {
    EncodingVars enc =
        model.encoder().Forward(g, g->Constant(train.samples[i].features));
    SampleLoss sl;
    Var total;
    if (alpha > 0) {
      auto streams = model.separator().Separate(g, enc.h2, talkers);
      SerializedCtc ctc = SerializedCtcLoss(
          model.separator().Logits(g, streams), targets[i]);
      sl.infeasible = ctc.num_infeasible;
      if (ctc.loss.valid()) {
        sl.ctc = ctc.loss.scalar();
        total = ag::Scale(ctc.loss, alpha);
      }
    }
    if (alpha < 1) {
      Var e_t = model.decoder().EmbedText(g, WithBos(vocab, labels[i].tokens));
      Var logits = model.decoder().Forward(g, {enc.h_p}, e_t, {});
      Var ce = model.decoder().CeLoss(logits, labels[i].tokens);
      sl.ce = ce.scalar();
      Var weighted = ag::Scale(ce, 1.0 - alpha);
      total = total.valid() ? ag::Add(total, weighted) : weighted;
    }
    sl.total = total.valid() ? total : g->Constant(Matrix::Zero(1, 1));
    return sl;
  };
  Emit({{"event", "stage_start"}, {"stage", "2"}, {"steps", config_.steps_stage2}});
  Loop(&tm, Stage::kStage2, config_.steps_stage2, config_.lr_stage2,
       train.samples.size(), fn, Ids(train));
  tm.train_input_form = "sot";
  json end = {{"event", "stage_end"}, {"stage", "2"},
              {"final_loss", summary_.final_loss}};
  if (dev != nullptr && config_.monitor_samples > 0) {
    const Real wer = BranchGreedyWer(model, *dev, config_.monitor_samples);
    end["dev_branch_wer"] = wer;
    tm.metrics.back()["dev_branch_wer"] = wer;
  }
  Emit(end);
  return tm;
}

TrainedModel Trainer::Stage3(TrainedModel prev, const Dataset& train,
                             const Dataset* dev) {
  (void)dev;
  if (prev.stage != Stage::kStage2 || !prev.model->has_separator()) {
    throw DataError(std::string("stage 3 needs a stage-2 checkpoint; got "
                                "stage ") +
                    StageName(prev.stage));
  }
  TrainedModel tm = std::move(prev);
  Model& model = *tm.model;
  CheckData(model, train);
  CheckTalkers(model, train);
  const InputForm form = InputFormFromName(config_.stage3_input_form);
  model.AttachLora(ParamGroup::kLoraB, DeriveSeed(seed_, 0xB1));
  model.store().SetTrainable({ParamGroup::kLoraB});
  const std::vector<SotLabel> labels = Labels(train);
  const Vocabulary& vocab = model.vocab();
  const AdapterSet active = model.ActiveAdapters();

  // Everything below the adapters is frozen, so prompts and encodings are
  // computed once.
  std::vector<DecodeInputs> cache;
  cache.reserve(train.samples.size());
  for (const auto& s : train.samples) {
    cache.push_back(model.PrepareInputs(s.features, form));
  }
  LossFn fn = [&](Graph* g, size_t i) {
    std::vector<Var> prefix;
    for (const Matrix* m : model.Prefix(cache[i], form)) {
      prefix.push_back(g->Constant(*m));
    }
    Var e_t = model.decoder().EmbedText(g, WithBos(vocab, labels[i].tokens));
    Var logits = model.decoder().Forward(g, prefix, e_t, active);
    SampleLoss sl;
    sl.total = model.decoder().CeLoss(logits, labels[i].tokens);
    sl.ce = sl.total.scalar();
    return sl;
  };
  Emit({{"event", "stage_start"}, {"stage", "3"}, {"steps", config_.steps_stage3},
        {"input_form", InputFormName(form)}});
  Loop(&tm, Stage::kStage3, config_.steps_stage3, config_.lr_stage3,
       train.samples.size(), fn, Ids(train));
  tm.train_input_form = InputFormName(form);
  Emit({{"event", "stage_end"}, {"stage", "3"},
        {"final_loss", summary_.final_loss}});
  return tm;
}

TrainedModel Trainer::SingleStage(const Dataset& train, const Dataset* dev) {
  TrainedModel tm;
  tm.model = std::make_unique<Model>(model_config_, seed_);
  Model& model = *tm.model;
  CheckData(model, train);
  CheckTalkers(model, train);
  PretrainDecoder(&model);
  model.AttachLora(ParamGroup::kLoraA, DeriveSeed(seed_, 0xA1));
  model.ResetSeparator(DeriveSeed(seed_, 0x5E9));
  model.AttachLora(ParamGroup::kLoraB, DeriveSeed(seed_, 0xB1));
  model.store().SetTrainable(
      {ParamGroup::kEncoder, ParamGroup::kDownsample, ParamGroup::kProjector,
       ParamGroup::kSeparator, ParamGroup::kCtcHeads, ParamGroup::kLoraA,
       ParamGroup::kLoraB});
  const std::vector<SotLabel> labels = Labels(train);
  const auto targets = BranchTargets(train);
  const Vocabulary& vocab = model.vocab();
  const Real alpha = config_.alpha;
  const int talkers = model.config().num_talkers;
  const AdapterSet active = model.ActiveAdapters();

  LossFn fn = [&](Graph* g, size_t i) {
    EncodingVars enc =
        model.encoder().Forward(g, g->Constant(train.samples[i].features));
    auto streams = model.separator().Separate(g, enc.h2, talkers);
    std::vector<Var> logits = model.separator().Logits(g, streams);
    SampleLoss sl;
    Var total;
    SerializedCtc ctc = SerializedCtcLoss(logits, targets[i]);
    sl.infeasible = ctc.num_infeasible;
    if (ctc.loss.valid()) {
      sl.ctc = ctc.loss.scalar();
      total = ag::Scale(ctc.loss, alpha);
    }
    // The prompt comes from the current heads and carries no gradient.
    std::vector<Matrix> values;
    for (const Var& l : logits) values.push_back(l.value());
    SopPrompt sop = DecodeSop(values, vocab, model.config().sop_delimiter);
    Var e_sop = g->Constant(EmbedSop(sop, *model.decoder().embedding()));
    Var e_t = model.decoder().EmbedText(g, WithBos(vocab, labels[i].tokens));
    Var dec = model.decoder().Forward(g, {e_sop, enc.h_p}, e_t, active);
    Var ce = model.decoder().CeLoss(dec, labels[i].tokens);
    sl.ce = ce.scalar();
    Var weighted = ag::Scale(ce, 1.0 - alpha);
    sl.total = total.valid() ? ag::Add(total, weighted) : weighted;
    return sl;
  };
  Emit({{"event", "stage_start"}, {"stage", "single"},
        {"steps", config_.steps_single}});
  Loop(&tm, Stage::kSingle, config_.steps_single, config_.lr_single,
       train.samples.size(), fn, Ids(train));
  tm.train_input_form = "sop";
  json end = {{"event", "stage_end"}, {"stage", "single"},
              {"final_loss", summary_.final_loss}};
  if (dev != nullptr && config_.monitor_samples > 0) {
    const Real wer = BranchGreedyWer(model, *dev, config_.monitor_samples);
    end["dev_branch_wer"] = wer;
    tm.metrics.back()["dev_branch_wer"] = wer;
  }
  Emit(end);
  return tm;
}

Real BranchGreedyWer(const Model& model, const Dataset& data, int limit) {
  long long errors = 0;
  long long length = 0;
  const size_t n = limit > 0 ? std::min(data.samples.size(),
                                        static_cast<size_t>(limit))
                             : data.samples.size();
  for (size_t i = 0; i < n; ++i) {
    const MixtureSample& s = data.samples[i];
    EncodingBundle enc = model.encoder().Run(s.features);
    std::vector<Matrix> logits = model.separator().RunLogits(enc.h2);
    const std::vector<int> order = SpeakingOrder(s.offsets);
    for (size_t b = 0; b < logits.size() && b < order.size(); ++b) {
      const TokenSeq& ref = s.talker_transcripts[order[b]];
      errors += EditDistance(ref, GreedyDecode(logits[b])).errors();
      length += static_cast<long long>(ref.size());
    }
  }
  return length == 0 ? 0.0 : static_cast<Real>(errors) / length;
}

}  // namespace sopmt
