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

// Run configuration: one JSON document covering data generation, model
// shape, training and evaluation. Every field is optional.

#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "sopmt/mixsim.h"
#include "sopmt/model.h"
#include "sopmt/trainer.h"

namespace sopmt {

struct EvalConfig {
  int max_len = 0;  // 0: derived from the talker count
  int limit = 0;    // 0: whole split
  int bootstrap_resamples = 10000;
  uint64_t bootstrap_seed = 1;
  Real significance = 0.05;
};

struct RunConfig {
  uint64_t seed = 1;
  MixSimConfig mixsim;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
};

inline constexpr int kRunConfigVersion = 1;
inline constexpr char kSeedEnvVar[] = "SOP_MTASR_SEED";

nlohmann::json MixSimConfigToJson(const MixSimConfig& c);
MixSimConfig MixSimConfigFromJson(const nlohmann::json& j);

nlohmann::json RunConfigToJson(const RunConfig& c);
RunConfig RunConfigFromJson(const nlohmann::json& j);

// Parses a config file, or returns defaults for an empty path, then applies
// the seed environment override.
RunConfig LoadRunConfig(const std::string& path);

// FNV-1a over the canonical (key-sorted) dump, as 16 hex digits.
std::string ConfigHash(const RunConfig& c);

}  // namespace sopmt
