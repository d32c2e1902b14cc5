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

#include "sopmt/config.h"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "sopmt/json_util.h"

namespace sopmt {

using nlohmann::json;

json MixSimConfigToJson(const MixSimConfig& c) {
  return {
      {"feature_dim", c.feature_dim},
      {"num_content_tokens", c.num_content_tokens},
      {"talkers", c.talkers},
      {"transcript_min", c.transcript_min},
      {"transcript_max", c.transcript_max},
      {"duration_min", c.duration_min},
      {"duration_max", c.duration_max},
      {"min_gap", c.min_gap},
      {"clean_sigma", c.clean_sigma},
      {"noisy_sigma", c.noisy_sigma},
      {"train_size", c.train_size},
      {"dev_size", c.dev_size},
      {"eval_size", c.eval_size},
  };
}

MixSimConfig MixSimConfigFromJson(const json& j) {
  MixSimConfig c;
  JsonReader r(j, "mixsim");
  r.Read("feature_dim", &c.feature_dim);
  r.Read("num_content_tokens", &c.num_content_tokens);
  r.Read("talkers", &c.talkers);
  r.Read("transcript_min", &c.transcript_min);
  r.Read("transcript_max", &c.transcript_max);
  r.Read("duration_min", &c.duration_min);
  r.Read("duration_max", &c.duration_max);
  r.Read("min_gap", &c.min_gap);
  r.Read("clean_sigma", &c.clean_sigma);
  r.Read("noisy_sigma", &c.noisy_sigma);
  r.Read("train_size", &c.train_size);
  r.Read("dev_size", &c.dev_size);
  r.Read("eval_size", &c.eval_size);
  r.Finish();
  if (c.feature_dim < 1) throw ConfigError("mixsim.feature_dim must be >= 1");
  if (c.num_content_tokens < 1) {
    throw ConfigError("mixsim.num_content_tokens must be >= 1");
  }
  if (c.talkers.empty()) throw ConfigError("mixsim.talkers is empty");
  for (int s : c.talkers) {
    if (s < 1 || s > 3) throw ConfigError("mixsim.talkers entries must be 1-3");
  }
  if (c.transcript_min < 1 || c.transcript_max > 64 ||
      c.transcript_min > c.transcript_max) {
    throw ConfigError("mixsim transcript range must lie within [1, 64]");
  }
  if (c.duration_min < 1 || c.duration_min > c.duration_max) {
    throw ConfigError("mixsim duration range must satisfy 1 <= min <= max");
  }
  if (c.min_gap < 1) throw ConfigError("mixsim.min_gap must be >= 1");
  if (c.clean_sigma < 0 || c.noisy_sigma < 0) {
    throw ConfigError("mixsim noise levels must be >= 0");
  }
  if (c.train_size < 0 || c.dev_size < 0 || c.eval_size < 0) {
    throw ConfigError("mixsim split sizes must be >= 0");
  }
  return c;
}

json RunConfigToJson(const RunConfig& c) {
  return {
      {"version", kRunConfigVersion},
      {"seed", c.seed},
      {"mixsim", MixSimConfigToJson(c.mixsim)},
      {"model", ModelConfigToJson(c.model)},
      {"train", TrainConfigToJson(c.train)},
      {"eval",
       {{"max_len", c.eval.max_len},
        {"limit", c.eval.limit},
        {"bootstrap_resamples", c.eval.bootstrap_resamples},
        {"bootstrap_seed", c.eval.bootstrap_seed},
        {"significance", c.eval.significance}}},
  };
}

RunConfig RunConfigFromJson(const json& j) {
  RunConfig c;
  JsonReader r(j, "config");
  int version = kRunConfigVersion;
  r.Read("version", &version);
  if (version != kRunConfigVersion) {
    throw ConfigError("unsupported config version " + std::to_string(version));
  }
  r.Read("seed", &c.seed);
  if (r.Has("mixsim")) c.mixsim = MixSimConfigFromJson(r.Child("mixsim"));
  if (r.Has("model")) c.model = ModelConfigFromJson(r.Child("model"));
  if (r.Has("train")) c.train = TrainConfigFromJson(r.Child("train"));
  if (r.Has("eval")) {
    JsonReader e(r.Child("eval"), "config.eval");
    e.Read("max_len", &c.eval.max_len);
    e.Read("limit", &c.eval.limit);
    e.Read("bootstrap_resamples", &c.eval.bootstrap_resamples);
    e.Read("bootstrap_seed", &c.eval.bootstrap_seed);
    e.Read("significance", &c.eval.significance);
    e.Finish();
  }
  r.Finish();
  if (c.eval.max_len < 0 || c.eval.limit < 0) {
    throw ConfigError("eval.max_len and eval.limit must be >= 0");
  }
  if (c.eval.bootstrap_resamples < 1) {
    throw ConfigError("eval.bootstrap_resamples must be >= 1");
  }
  if (c.eval.significance <= 0 || c.eval.significance >= 1) {
    throw ConfigError("eval.significance must lie in (0, 1)");
  }
  if (c.model.num_content_tokens != c.mixsim.num_content_tokens) {
    throw ConfigError("model.num_content_tokens must equal "
                      "mixsim.num_content_tokens");
  }
  if (c.model.encoder.feature_dim != c.mixsim.feature_dim) {
    throw ConfigError("model.encoder.feature_dim must equal "
                      "mixsim.feature_dim");
  }
  return c;
}

RunConfig LoadRunConfig(const std::string& path) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ": " + e.what());
    }
  }
  RunConfig c = RunConfigFromJson(j);
  if (const char* env = std::getenv(kSeedEnvVar); env != nullptr && *env) {
    char* end = nullptr;
    const unsigned long long seed = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
      throw ConfigError(std::string(kSeedEnvVar) + " is not an integer: " +
                        env);
    }
    c.seed = seed;
  }
  return c;
}

std::string ConfigHash(const RunConfig& c) {
  const std::string canonical = RunConfigToJson(c).dump();
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace sopmt
