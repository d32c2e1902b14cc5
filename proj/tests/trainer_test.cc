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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "sopmt/evalkit.h"
#include "sopmt/trainer.h"

namespace sopmt {
namespace {

namespace fs = std::filesystem;

ModelConfig TinyModel() {
  ModelConfig c;
  c.num_content_tokens = 6;
  c.encoder.model_dim = 16;
  c.encoder.num_heads = 2;
  c.encoder.ffn_dim = 32;
  c.encoder.conv_dim = 16;
  c.encoder.output_dim = 16;
  c.separator_lstm_hidden = 8;
  c.decoder.model_dim = 16;
  c.decoder.num_layers = 2;
  c.decoder.num_heads = 2;
  c.decoder.ffn_dim = 32;
  c.decoder.lora_rank = 4;
  c.decoder.lora_alpha = 8;
  return c;
}

TrainConfig FastTrain(int steps) {
  TrainConfig c;
  c.batch_size = 2;
  c.steps_stage1 = c.steps_stage2 = c.steps_stage3 = c.steps_single = steps;
  c.pretrain_steps = 3;
  c.pretrain_batch_size = 2;
  c.log_every = 0;
  c.monitor_samples = 4;
  return c;
}

const Dataset& Train() {
  static const Dataset ds = [] {
    MixSimConfig mc;
    mc.num_content_tokens = 6;
    mc.transcript_min = 2;
    mc.transcript_max = 4;
    mc.train_size = 12;
    return GenerateDataset(mc, 9, 2, "train", Condition::kClean, "h");
  }();
  return ds;
}

std::map<std::string, Matrix> Snapshot(const Model& m) {
  std::map<std::string, Matrix> out;
  for (const Parameter* p : m.store().All()) out[p->name] = p->value;
  return out;
}

std::string ReadBytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

fs::path TempPath(const std::string& name) {
  return fs::temp_directory_path() / ("sopmt_trainer_" + name);
}

TEST(TrainConfigJson, RoundTripAndValidation) {
  TrainConfig c = FastTrain(7);
  c.alpha = 0.25;
  c.stage3_input_form = "sop-only";
  TrainConfig back = TrainConfigFromJson(TrainConfigToJson(c));
  EXPECT_EQ(TrainConfigToJson(back), TrainConfigToJson(c));

  auto j = TrainConfigToJson(c);
  j["alpah"] = 0.3;
  EXPECT_THROW(TrainConfigFromJson(j), ConfigError);
  j = TrainConfigToJson(c);
  j["alpha"] = 1.5;
  EXPECT_THROW(TrainConfigFromJson(j), ConfigError);
  j = TrainConfigToJson(c);
  j["stage3_input_form"] = "sot";
  EXPECT_THROW(TrainConfigFromJson(j), ConfigError);
  j = TrainConfigToJson(c);
  j["batch_size"] = 0;
  EXPECT_THROW(TrainConfigFromJson(j), ConfigError);
}

TEST(PretrainText, PassageIsANoisyCopy) {
  Vocabulary vocab(28);
  Rng rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    PretrainPair p = PretrainText(vocab, &rng);
    auto segments = SplitSerialized(p.text, vocab);
    ASSERT_GE(segments.size(), 1u);
    ASSERT_LE(segments.size(), 3u);
    for (const auto& s : segments) {
      EXPECT_GE(s.size(), 4u);
      EXPECT_LE(s.size(), 12u);
    }
    // Every text token is edited at most once, with at most 30% noise.
    EXPECT_LE(EditDistance(p.text, p.passage).errors(),
              static_cast<int>(p.text.size()));
    for (TokenId t : p.passage) EXPECT_TRUE(vocab.Contains(t));
  }
}

TEST(Trainer, ZeroStepStage1IsInitialisationPlusIdentityMerge) {
  TrainConfig tc = FastTrain(0);
  tc.pretrain_steps = 0;
  Trainer trainer(TinyModel(), tc, 5, "h");
  TrainedModel tm = trainer.Stage1(Train());
  EXPECT_EQ(tm.model->structure().lora_a, AdapterState::kMerged);
  Model fresh(TinyModel(), 5);
  fresh.store().RoundToFloat();
  for (const Parameter* p : fresh.store().All()) {
    const Parameter* q = tm.model->store().Find(p->name);
    ASSERT_NE(q, nullptr) << p->name;
    EXPECT_EQ(q->value, p->value) << p->name;
  }
}

TEST(Trainer, Stage1LossDecreases) {
  TrainConfig tc = FastTrain(120);
  Trainer trainer(TinyModel(), tc, 1, "h");
  trainer.Stage1(Train());
  const StageSummary& s = trainer.last_summary();
  EXPECT_EQ(s.steps, 120);
  EXPECT_LT(s.last_window_loss, s.first_window_loss);
}

TEST(Trainer, StagesFreezeTheRightGroups) {
  Trainer trainer(TinyModel(), FastTrain(4), 2, "h");
  TrainedModel s1 = trainer.Stage1(Train());
  auto after1 = Snapshot(*s1.model);

  TrainedModel s2 = trainer.Stage2(std::move(s1), Train(), &Train());
  EXPECT_EQ(s2.stage, Stage::kStage2);
  EXPECT_EQ(s2.model->structure().lora_a, AdapterState::kMerged);
  EXPECT_TRUE(s2.model->has_separator());
  ASSERT_TRUE(s2.metrics.back().contains("dev_branch_wer"));
  auto after2 = Snapshot(*s2.model);
  bool encoder_moved = false;
  for (const Parameter* p : s2.model->store().All()) {
    if (p->group == ParamGroup::kDecoderBase ||
        p->group == ParamGroup::kLoraA) {
      EXPECT_EQ(p->value, after1.at(p->name)) << p->name;
    }
    if (p->group == ParamGroup::kEncoder) {
      encoder_moved = encoder_moved || !(p->value == after1.at(p->name));
    }
  }
  EXPECT_TRUE(encoder_moved);

  TrainedModel s3 = trainer.Stage3(std::move(s2), Train());
  EXPECT_EQ(s3.model->structure().lora_b, AdapterState::kActive);
  EXPECT_EQ(s3.train_input_form, "sop");
  bool b_moved = false;
  for (const Parameter* p : s3.model->store().All()) {
    if (p->group == ParamGroup::kLoraB) {
      b_moved = b_moved || !p->value.isZero(0.0);
    } else {
      EXPECT_EQ(p->value, after2.at(p->name)) << p->name;
    }
  }
  EXPECT_TRUE(b_moved);
}

TEST(Trainer, EnforcesStageOrder) {
  Trainer trainer(TinyModel(), FastTrain(1), 3, "h");
  TrainedModel s1 = trainer.Stage1(Train());
  // Stage 3 straight after stage 1.
  TrainedModel copy;
  copy.model = std::make_unique<Model>(TinyModel(), 3);
  copy.model->ApplyStructure(s1.model->structure());
  copy.stage = s1.stage;
  EXPECT_THROW(trainer.Stage3(std::move(copy), Train()), DataError);

  TrainedModel s2 = trainer.Stage2(std::move(s1), Train());
  TrainedModel again;
  again.model = std::make_unique<Model>(TinyModel(), 3);
  again.model->ApplyStructure(s2.model->structure());
  again.stage = s2.stage;
  EXPECT_THROW(trainer.Stage2(std::move(again), Train()), DataError);

  TrainedModel unmerged;
  unmerged.model = std::make_unique<Model>(TinyModel(), 3);
  unmerged.model->AttachLora(ParamGroup::kLoraA, 1);
  unmerged.stage = Stage::kStage1;
  EXPECT_THROW(trainer.Stage2(std::move(unmerged), Train()), DataError);
}

TEST(Trainer, AlphaExtremesSilenceOneBranch) {
  for (Real alpha : {0.0, 1.0}) {
    TrainConfig tc = FastTrain(3);
    tc.alpha = alpha;
    Trainer trainer(TinyModel(), tc, 4, "h");
    TrainedModel s1 = trainer.Stage1(Train());
    auto before = Snapshot(*s1.model);
    TrainedModel s2 = trainer.Stage2(std::move(s1), Train());
    // The separator is freshly initialised, so compare with a reset copy.
    Model reset(TinyModel(), 4);
    reset.ResetSeparator(DeriveSeed(4, 0x5E9));
    reset.store().RoundToFloat();
    for (const Parameter* p : s2.model->store().All()) {
      if (alpha == 1.0 && p->group == ParamGroup::kProjector) {
        EXPECT_EQ(p->value, before.at(p->name)) << p->name;
      }
      if (alpha == 0.0 && (p->group == ParamGroup::kSeparator ||
                           p->group == ParamGroup::kCtcHeads)) {
        EXPECT_EQ(p->value, reset.store().Find(p->name)->value) << p->name;
      }
    }
  }
}

TEST(Trainer, ZeroStepStage3KeepsStage2Outputs) {
  Trainer trainer(TinyModel(), FastTrain(2), 6, "h");
  TrainedModel s2 = trainer.Stage2(trainer.Stage1(Train()), Train());
  std::vector<GenerateResult> before;
  for (const auto& s : Train().samples) {
    DecodeInputs in = s2.model->PrepareInputs(s.features, InputForm::kSop);
    before.push_back(s2.model->Transcribe(in, InputForm::kSop, 10));
  }
  TrainConfig tc = FastTrain(2);
  tc.steps_stage3 = 0;
  Trainer zero(TinyModel(), tc, 6, "h");
  TrainedModel s3 = zero.Stage3(std::move(s2), Train());
  for (size_t i = 0; i < Train().samples.size(); ++i) {
    const auto& s = Train().samples[i];
    DecodeInputs in = s3.model->PrepareInputs(s.features, InputForm::kSop);
    EXPECT_EQ(s3.model->Transcribe(in, InputForm::kSop, 10), before[i]);
  }
}

TEST(Trainer, RunsAreDeterministic) {
  std::string bytes[2];
  for (int run = 0; run < 2; ++run) {
    Trainer trainer(TinyModel(), FastTrain(3), 8, "h");
    TrainedModel tm = trainer.Stage2(trainer.Stage1(Train()), Train());
    const fs::path path = TempPath("det" + std::to_string(run) + ".ckpt");
    SaveCheckpoint(tm, path.string());
    bytes[run] = ReadBytes(path);
  }
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(Trainer, SingleStageTrainsEverythingAtOnce) {
  Trainer trainer(TinyModel(), FastTrain(5), 10, "h");
  TrainedModel tm = trainer.SingleStage(Train(), &Train());
  EXPECT_EQ(tm.stage, Stage::kSingle);
  ModelStructure st = tm.model->structure();
  EXPECT_EQ(st.lora_a, AdapterState::kActive);
  EXPECT_EQ(st.lora_b, AdapterState::kActive);
  EXPECT_TRUE(st.has_separator);
  EXPECT_TRUE(std::isfinite(trainer.last_summary().final_loss));
  EXPECT_TRUE(tm.metrics.back().contains("dev_branch_wer"));
}

TEST(Trainer, NonFiniteLossAborts) {
  Dataset bad = Train();
  bad.samples[0].features(0, 0) = std::numeric_limits<Real>::quiet_NaN();
  for (auto& s : bad.samples) s.features = bad.samples[0].features;
  std::vector<nlohmann::json> events;
  Trainer trainer(TinyModel(), FastTrain(2), 1, "h",
                  [&](const nlohmann::json& j) { events.push_back(j); });
  EXPECT_THROW(trainer.Stage1(bad), NumericError);
  ASSERT_FALSE(events.empty());
  EXPECT_EQ(events.back()["event"], "numeric_failure");
}

TEST(Trainer, RejectsMismatchedData) {
  MixSimConfig mc;
  mc.train_size = 2;
  Dataset wrong_vocab = GenerateDataset(mc, 1, 2, "train", Condition::kClean,
                                        "h");
  Trainer trainer(TinyModel(), FastTrain(1), 1, "h");
  EXPECT_THROW(trainer.Stage1(wrong_vocab), DataError);
  Dataset empty = Train();
  empty.samples.clear();
  EXPECT_THROW(trainer.Stage1(empty), DataError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Trainer trainer(TinyModel(), FastTrain(2), 11, "cfg");
  TrainedModel s3 =
      trainer.Stage3(trainer.Stage2(trainer.Stage1(Train()), Train()), Train());
  const fs::path a = TempPath("a.ckpt"), b = TempPath("b.ckpt");
  SaveCheckpoint(s3, a.string());
  TrainedModel loaded = LoadCheckpoint(a.string());
  EXPECT_EQ(loaded.stage, Stage::kStage3);
  EXPECT_EQ(loaded.config_hash, "cfg");
  EXPECT_EQ(loaded.model->structure(), s3.model->structure());
  EXPECT_EQ(loaded.optimizer.step, s3.optimizer.step);
  SaveCheckpoint(loaded, b.string());
  EXPECT_EQ(ReadBytes(a), ReadBytes(b));

  // Loaded weights give the same transcripts.
  const auto& x = Train().samples[0].features;
  for (InputForm f : {InputForm::kSot, InputForm::kSop}) {
    EXPECT_EQ(loaded.model->Transcribe(loaded.model->PrepareInputs(x, f), f, 12),
              s3.model->Transcribe(s3.model->PrepareInputs(x, f), f, 12));
  }
}

TEST(Checkpoint, Stage2RecordsMergedAdapter) {
  Trainer trainer(TinyModel(), FastTrain(1), 12, "h");
  TrainedModel s2 = trainer.Stage2(trainer.Stage1(Train()), Train());
  const fs::path p = TempPath("s2.ckpt");
  SaveCheckpoint(s2, p.string());
  TrainedModel loaded = LoadCheckpoint(p.string());
  EXPECT_EQ(loaded.model->structure().lora_a, AdapterState::kMerged);
  EXPECT_TRUE(loaded.model->decoder().LoraMerged(ParamGroup::kLoraA));
  // The reloaded checkpoint is accepted by the next stage.
  EXPECT_NO_THROW(trainer.Stage3(std::move(loaded), Train()));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  Trainer trainer(TinyModel(), FastTrain(1), 13, "h");
  TrainedModel s1 = trainer.Stage1(Train());
  const fs::path p = TempPath("corrupt.ckpt");
  SaveCheckpoint(s1, p.string());
  const std::string bytes = ReadBytes(p);

  std::ofstream(p, std::ios::binary | std::ios::trunc)
      << bytes.substr(0, bytes.size() - 9);
  EXPECT_THROW(LoadCheckpoint(p.string()), DataError);
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bytes << "x";
  EXPECT_THROW(LoadCheckpoint(p.string()), DataError);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::ofstream(p, std::ios::binary | std::ios::trunc) << bad_magic;
  EXPECT_THROW(LoadCheckpoint(p.string()), DataError);
  EXPECT_THROW(LoadCheckpoint(TempPath("missing.ckpt").string()), DataError);
}

}  // namespace
}  // namespace sopmt
