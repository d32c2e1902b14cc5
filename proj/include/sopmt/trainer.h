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

// Staged training. Stage 1 trains the encoder stack and the first adapter
// group on serialized labels and merges that adapter; stage 2 adds a fresh
// separator with CTC heads and trains the encoder side on the hybrid loss;
// stage 3 trains only a second adapter group with the CTC prompt prepended.
// The single-stage recipe trains everything at once.

#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "sopmt/mixsim.h"
#include "sopmt/model.h"
#include "sopmt/optim.h"

namespace sopmt {

enum class Stage { kStage1, kStage2, kStage3, kSingle };
const char* StageName(Stage s);
Stage StageFromName(const std::string& name);

struct TrainConfig {
  Real alpha = 0.3;
  int batch_size = 8;
  int steps_stage1 = 2000;
  int steps_stage2 = 1500;
  int steps_stage3 = 2000;
  int steps_single = 5500;
  Real lr_stage1 = 1e-3;
  Real lr_stage2 = 1e-3;
  Real lr_stage3 = 3e-4;
  Real lr_single = 1e-3;
  Real warmup_fraction = 0.05;
  Real grad_clip = 5.0;
  int log_every = 10;
  int monitor_samples = 50;  // dev samples for the branch WER monitor
  std::string stage3_input_form = "sop";  // or "sop-only" for the ablation
  // Text-only pretraining of the decoder base, run on the fresh model
  // before stage 1 and the single-stage recipe.
  int pretrain_steps = 2000;
  Real pretrain_lr = 1e-3;
  int pretrain_batch_size = 8;
};

nlohmann::json TrainConfigToJson(const TrainConfig& c);
TrainConfig TrainConfigFromJson(const nlohmann::json& j);

struct AdamState {
  int step = 0;
  std::map<std::string, AdamMoments> moments;
};

struct TrainedModel {
  std::unique_ptr<Model> model;
  Stage stage = Stage::kStage1;
  uint64_t seed = 0;
  std::string config_hash;
  std::string train_input_form = "sot";
  std::string rng_state;
  AdamState optimizer;
  nlohmann::json metrics = nlohmann::json::array();
};

// Binary container: magic "SOPC", u32 version, u64 metadata length, JSON
// metadata, u32 parameter count, then per parameter (sorted by name) its
// name, group, trainability, shape, float32 values and optional Adam
// moments. Loading then saving reproduces the file byte for byte.
void SaveCheckpoint(const TrainedModel& tm, const std::string& path);
TrainedModel LoadCheckpoint(const std::string& path);

using LogFn = std::function<void(const nlohmann::json&)>;

struct StageSummary {
  int steps = 0;
  Real first_window_loss = 0.0;  // mean of the first 50 step losses
  Real last_window_loss = 0.0;   // mean of the last 50 step losses
  Real final_loss = 0.0;         // loss of the last step
  int infeasible_branches = 0;
};

class Trainer {
 public:
  Trainer(const ModelConfig& model_config, const TrainConfig& config,
          uint64_t seed, std::string config_hash, LogFn log = nullptr);

  // Trains the decoder base to restate a token passage given as a prefix,
  // the in-context copying a pretrained language model brings along.
  void PretrainDecoder(Model* model);
  TrainedModel Stage1(const Dataset& train, const Dataset* dev = nullptr);
  TrainedModel Stage2(TrainedModel prev, const Dataset& train,
                      const Dataset* dev = nullptr);
  TrainedModel Stage3(TrainedModel prev, const Dataset& train,
                      const Dataset* dev = nullptr);
  TrainedModel SingleStage(const Dataset& train, const Dataset* dev = nullptr);

  const StageSummary& last_summary() const { return summary_; }

 private:
  // Per-sample loss terms; `ce`/`ctc` stay invalid when not part of the loss.
  struct SampleLoss {
    Var total;
    Real ce = 0.0;
    Real ctc = 0.0;
    int infeasible = 0;
  };
  using LossFn = std::function<SampleLoss(Graph*, size_t index)>;

  void Loop(TrainedModel* tm, Stage stage, int steps, Real lr,
            size_t num_samples, const LossFn& loss_fn,
            const std::vector<std::string>& sample_ids);
  void Emit(nlohmann::json record) const;
  Real BranchWer(const Model& model, const Dataset& dev) const;

  ModelConfig model_config_;
  TrainConfig config_;
  uint64_t seed_;
  std::string config_hash_;
  LogFn log_;
  StageSummary summary_;
};

// Pretraining pair: a random sc-delimited text and a copy of it corrupted
// by up to 30% random edits.
struct PretrainPair {
  TokenSeq passage;
  TokenSeq text;
};
PretrainPair PretrainText(const Vocabulary& vocab, Rng* rng);

// Per-branch greedy CTC decodes scored against the talkers in speaking
// order (summed edits over summed reference length).
Real BranchGreedyWer(const Model& model, const Dataset& data, int limit);

}  // namespace sopmt
