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

// Synthetic overlapping-talker data. Every talker is a sequence of content
// tokens; each token emits a few frames of a fixed per-token feature vector
// plus Gaussian jitter. Talker streams are shifted by their start offsets and
// summed, optionally with additive noise over the whole mixture.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sopmt/common.h"
#include "sopmt/vocab.h"

namespace sopmt {

using Rng = std::mt19937_64;

uint64_t SplitMix64(uint64_t x);
// Deterministic child seed for a named stream of a parent seed.
uint64_t DeriveSeed(uint64_t parent, uint64_t stream);

struct EmissionModel {
  int feature_dim = 16;
  int duration_min = 4;
  int duration_max = 8;
  Real noise_sigma = 0.05;
  uint64_t seed = 0;
  // Row t is the feature vector of token id t; only content rows are used.
  Matrix token_embeddings;

  static EmissionModel Create(const Vocabulary& vocab, int feature_dim,
                              int duration_min, int duration_max,
                              Real noise_sigma, uint64_t seed);
  bool operator==(const EmissionModel& other) const;
};

// Frame span [start, end) of one emitted token, in mixture frames.
struct TokenSpan {
  int talker = 0;
  TokenId token = 0;
  int start = 0;
  int end = 0;
  bool operator==(const TokenSpan&) const = default;
};

enum class Condition { kClean, kNoisy };
const char* ConditionName(Condition c);
Condition ConditionFromName(const std::string& name);

struct MixtureSample {
  std::string sample_id;
  Condition condition = Condition::kClean;
  Matrix features;  // T x F, float32-representable values
  std::vector<TokenSeq> talker_transcripts;
  std::vector<int> offsets;
  uint64_t seed = 0;
  std::vector<TokenSpan> spans;

  int num_talkers() const { return static_cast<int>(offsets.size()); }
  int num_frames() const { return static_cast<int>(features.rows()); }
  bool operator==(const MixtureSample& other) const;
};

TokenSeq GenTalkerTranscript(const Vocabulary& vocab, int min_len,
                             int max_len, Rng* rng);

struct SynthResult {
  Matrix frames;
  std::vector<std::pair<int, int>> token_frames;  // [start, end) per token
};
SynthResult SynthFeatures(const TokenSeq& tokens, const EmissionModel& em,
                          Rng* rng);

std::vector<int> SampleOffsets(int num_talkers,
                               const std::vector<int>& utterance_lengths,
                               int min_gap, Rng* rng);

Matrix Mix(const std::vector<Matrix>& talker_features,
           const std::vector<int>& offsets, Real noise_sigma, Rng* rng);

struct MixSimConfig {
  int feature_dim = 16;
  int num_content_tokens = 28;
  std::vector<int> talkers = {2, 3};
  int transcript_min = 4;
  int transcript_max = 12;
  int duration_min = 4;
  int duration_max = 8;
  int min_gap = 4;
  Real clean_sigma = 0.05;
  Real noisy_sigma = 0.5;
  int train_size = 2000;
  int dev_size = 200;
  int eval_size = 200;
};

struct DatasetMeta {
  std::string dataset_id;
  std::string split;
  int num_talkers = 2;
  Condition condition = Condition::kClean;
  Vocabulary vocab;
  EmissionModel emission;
  Real mix_noise_sigma = 0.0;
  uint64_t master_seed = 0;
  std::string config_hash;
  bool operator==(const DatasetMeta& other) const;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<MixtureSample> samples;
};

// The emission model shared by all splits and conditions of one master seed.
EmissionModel DatasetEmissionModel(const MixSimConfig& config,
                                   const Vocabulary& vocab,
                                   uint64_t master_seed);

MixtureSample GenerateSample(const MixSimConfig& config,
                             const Vocabulary& vocab, const EmissionModel& em,
                             int num_talkers, Condition condition,
                             const std::string& sample_id, uint64_t seed);

// Pure function of (config, master seed, talkers, split, condition). The
// clean and noisy variants share transcripts, offsets and talker streams.
Dataset GenerateDataset(const MixSimConfig& config, uint64_t master_seed,
                        int num_talkers, const std::string& split,
                        Condition condition, const std::string& config_hash);

struct DatasetStats {
  int num_samples = 0;
  int64_t total_frames = 0;
  int64_t overlap_frames = 0;  // frames with >= 2 active talkers
  double mean_frames = 0.0;
  double overlap_ratio = 0.0;
  double mean_tokens_per_talker = 0.0;
};
DatasetStats ComputeStats(const Dataset& dataset);

// Manifest persistence: one JSON record per line, preceded by a
// dataset_meta record; features go to <dir>/feats/<sample_id>.bin and token
// spans to <manifest>.align.jsonl.
void WriteManifest(const Dataset& dataset, const std::string& path);
Dataset ReadManifest(const std::string& path);

// Binary frame matrix: magic "SOPF", u32 version, u32 T, u32 F, then T*F
// little-endian float32 values.
void WriteFeatureFile(const Matrix& features, const std::string& path);
Matrix ReadFeatureFile(const std::string& path);

}  // namespace sopmt
