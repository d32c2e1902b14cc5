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

#include "sopmt/mixsim.h"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace sopmt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kFeatureMagic[4] = {'S', 'O', 'P', 'F'};
constexpr uint32_t kFeatureVersion = 1;
constexpr int kManifestVersion = 1;

uint64_t HashString(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Matrix RoundToFloat(const Matrix& m) { return m.cast<float>().cast<Real>(); }

}  // namespace

uint64_t SplitMix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

uint64_t DeriveSeed(uint64_t parent, uint64_t stream) {
  return SplitMix64(parent ^ SplitMix64(stream + 0x5851F42D4C957F2DULL));
}

EmissionModel EmissionModel::Create(const Vocabulary& vocab, int feature_dim,
                                    int duration_min, int duration_max,
                                    Real noise_sigma, uint64_t seed) {
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (duration_min < 1 || duration_max < duration_min) {
    throw ConfigError("duration range must satisfy 1 <= d_min <= d_max");
  }
  if (noise_sigma < 0) throw ConfigError("noise_sigma must be >= 0");
  EmissionModel em;
  em.feature_dim = feature_dim;
  em.duration_min = duration_min;
  em.duration_max = duration_max;
  em.noise_sigma = noise_sigma;
  em.seed = seed;
  em.token_embeddings = Matrix::Zero(vocab.size(), feature_dim);
  Rng rng(seed);
  std::normal_distribution<Real> normal(0.0, 1.0);
  for (TokenId t : vocab.ContentTokens()) {
    for (int f = 0; f < feature_dim; ++f) em.token_embeddings(t, f) = normal(rng);
  }
  em.token_embeddings = RoundToFloat(em.token_embeddings);
  return em;
}

bool EmissionModel::operator==(const EmissionModel& o) const {
  return feature_dim == o.feature_dim && duration_min == o.duration_min &&
         duration_max == o.duration_max && noise_sigma == o.noise_sigma &&
         seed == o.seed && token_embeddings == o.token_embeddings;
}

const char* ConditionName(Condition c) {
  return c == Condition::kClean ? "clean" : "noisy";
}

Condition ConditionFromName(const std::string& name) {
  if (name == "clean") return Condition::kClean;
  if (name == "noisy") return Condition::kNoisy;
  throw ConfigError("unknown condition '" + name + "' (clean|noisy)");
}

bool MixtureSample::operator==(const MixtureSample& o) const {
  return sample_id == o.sample_id && condition == o.condition &&
         features == o.features &&
         talker_transcripts == o.talker_transcripts && offsets == o.offsets &&
         seed == o.seed && spans == o.spans;
}

bool DatasetMeta::operator==(const DatasetMeta& o) const {
  return dataset_id == o.dataset_id && split == o.split &&
         num_talkers == o.num_talkers && condition == o.condition &&
         vocab == o.vocab && emission == o.emission &&
         mix_noise_sigma == o.mix_noise_sigma &&
         master_seed == o.master_seed && config_hash == o.config_hash;
}

TokenSeq GenTalkerTranscript(const Vocabulary& vocab, int min_len,
                             int max_len, Rng* rng) {
  if (vocab.num_content() < 1) {
    throw ConfigError("transcript generation needs a non-empty content alphabet");
  }
  if (min_len < 1 || max_len > 64 || min_len > max_len) {
    throw ConfigError("transcript length range must lie within [1, 64]");
  }
  std::uniform_int_distribution<int> len_dist(min_len, max_len);
  std::uniform_int_distribution<TokenId> tok_dist(1, vocab.num_content());
  const int n = len_dist(*rng);
  TokenSeq out(static_cast<size_t>(n));
  for (auto& t : out) t = tok_dist(*rng);
  return out;
}

SynthResult SynthFeatures(const TokenSeq& tokens, const EmissionModel& em,
                          Rng* rng) {
  std::uniform_int_distribution<int> dur_dist(em.duration_min, em.duration_max);
  std::normal_distribution<Real> noise(0.0, 1.0);
  SynthResult out;
  std::vector<int> durations;
  durations.reserve(tokens.size());
  int total = 0;
  for (TokenId t : tokens) {
    if (t < 1 || t >= em.token_embeddings.rows() ||
        em.token_embeddings.row(t).isZero(0.0)) {
      throw DataError("SynthFeatures: token " + std::to_string(t) +
                      " has no emission embedding");
    }
    durations.push_back(dur_dist(*rng));
    total += durations.back();
  }
  out.frames.resize(total, em.feature_dim);
  int frame = 0;
  for (size_t i = 0; i < tokens.size(); ++i) {
    out.token_frames.emplace_back(frame, frame + durations[i]);
    for (int k = 0; k < durations[i]; ++k, ++frame) {
      out.frames.row(frame) = em.token_embeddings.row(tokens[i]);
      if (em.noise_sigma > 0) {
        for (int f = 0; f < em.feature_dim; ++f) {
          out.frames(frame, f) += em.noise_sigma * noise(*rng);
        }
      }
    }
  }
  return out;
}

std::vector<int> SampleOffsets(int num_talkers,
                               const std::vector<int>& utterance_lengths,
                               int min_gap, Rng* rng) {
  if (num_talkers < 1 ||
      static_cast<int>(utterance_lengths.size()) != num_talkers) {
    throw ConfigError("SampleOffsets: need one length per talker");
  }
  if (min_gap < 1) throw ConfigError("SampleOffsets: min_gap must be >= 1");
  std::vector<int> offsets = {0};
  int mixture_len = utterance_lengths[0];
  for (int s = 1; s < num_talkers; ++s) {
    int lo = offsets.back() + min_gap;
    int hi = mixture_len - 1;
    if (lo > hi) {
      throw DataError("SampleOffsets: talker " + std::to_string(s) +
                      " cannot start >= " + std::to_string(min_gap) +
                      " frames after the previous one inside a " +
                      std::to_string(mixture_len) + "-frame mixture");
    }
    std::uniform_int_distribution<int> dist(lo, hi);
    offsets.push_back(dist(*rng));
    mixture_len = std::max(mixture_len, offsets.back() + utterance_lengths[s]);
  }
  return offsets;
}

Matrix Mix(const std::vector<Matrix>& talker_features,
           const std::vector<int>& offsets, Real noise_sigma, Rng* rng) {
  if (talker_features.size() != offsets.size() || offsets.empty()) {
    throw ConfigError("Mix: need one offset per talker stream");
  }
  Eigen::Index length = 0;
  const Eigen::Index dim = talker_features[0].cols();
  for (size_t s = 0; s < offsets.size(); ++s) {
    if (offsets[s] < 0) {
      throw DataError("Mix: negative offset " + std::to_string(offsets[s]));
    }
    if (talker_features[s].cols() != dim) {
      throw ShapeError("Mix: feature width mismatch");
    }
    length = std::max(length, offsets[s] + talker_features[s].rows());
  }
  Matrix out = Matrix::Zero(length, dim);
  for (size_t s = 0; s < offsets.size(); ++s) {
    out.middleRows(offsets[s], talker_features[s].rows()) += talker_features[s];
  }
  if (noise_sigma > 0) {
    std::normal_distribution<Real> noise(0.0, noise_sigma);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += noise(*rng);
  }
  return out;
}

EmissionModel DatasetEmissionModel(const MixSimConfig& config,
                                   const Vocabulary& vocab,
                                   uint64_t master_seed) {
  return EmissionModel::Create(vocab, config.feature_dim, config.duration_min,
                               config.duration_max, config.clean_sigma,
                               DeriveSeed(master_seed, 0xE1));
}

MixtureSample GenerateSample(const MixSimConfig& config,
                             const Vocabulary& vocab, const EmissionModel& em,
                             int num_talkers, Condition condition,
                             const std::string& sample_id, uint64_t seed) {
  MixtureSample sample;
  sample.sample_id = sample_id;
  sample.condition = condition;
  sample.seed = seed;

  Rng text_rng(DeriveSeed(seed, 1));
  for (int s = 0; s < num_talkers; ++s) {
    sample.talker_transcripts.push_back(GenTalkerTranscript(
        vocab, config.transcript_min, config.transcript_max, &text_rng));
  }
  std::vector<SynthResult> streams;
  std::vector<int> lengths;
  for (int s = 0; s < num_talkers; ++s) {
    Rng emit_rng(DeriveSeed(seed, 16 + s));
    streams.push_back(SynthFeatures(sample.talker_transcripts[s], em, &emit_rng));
    lengths.push_back(static_cast<int>(streams.back().frames.rows()));
  }
  Rng offset_rng(DeriveSeed(seed, 2));
  sample.offsets = SampleOffsets(num_talkers, lengths, config.min_gap,
                                 &offset_rng);

  std::vector<Matrix> frames;
  for (const auto& st : streams) frames.push_back(st.frames);
  Rng noise_rng(DeriveSeed(seed, 3));
  Real sigma = condition == Condition::kNoisy ? config.noisy_sigma : 0.0;
  sample.features = RoundToFloat(Mix(frames, sample.offsets, sigma, &noise_rng));

  for (int s = 0; s < num_talkers; ++s) {
    const auto& st = streams[s];
    for (size_t i = 0; i < st.token_frames.size(); ++i) {
      sample.spans.push_back({s, sample.talker_transcripts[s][i],
                              sample.offsets[s] + st.token_frames[i].first,
                              sample.offsets[s] + st.token_frames[i].second});
    }
  }
  return sample;
}

Dataset GenerateDataset(const MixSimConfig& config, uint64_t master_seed,
                        int num_talkers, const std::string& split,
                        Condition condition, const std::string& config_hash) {
  int size = 0;
  if (split == "train") {
    size = config.train_size;
  } else if (split == "dev") {
    size = config.dev_size;
  } else if (split == "eval") {
    size = config.eval_size;
  } else {
    throw ConfigError("unknown split '" + split + "' (train|dev|eval)");
  }
  Dataset ds;
  ds.meta.vocab = Vocabulary(config.num_content_tokens);
  ds.meta.emission = DatasetEmissionModel(config, ds.meta.vocab, master_seed);
  ds.meta.split = split;
  ds.meta.num_talkers = num_talkers;
  ds.meta.condition = condition;
  ds.meta.mix_noise_sigma =
      condition == Condition::kNoisy ? config.noisy_sigma : 0.0;
  ds.meta.master_seed = master_seed;
  ds.meta.config_hash = config_hash;
  ds.meta.dataset_id = "s" + std::to_string(num_talkers) + "-" +
                       ConditionName(condition) + "-" + split + "-" +
                       std::to_string(master_seed);

  const uint64_t split_seed = DeriveSeed(
      DeriveSeed(master_seed, static_cast<uint64_t>(num_talkers)),
      HashString(split));
  ds.samples.reserve(static_cast<size_t>(size));
  for (int i = 0; i < size; ++i) {
    char id[64];
    std::snprintf(id, sizeof(id), "%s-s%d-%06d", split.c_str(), num_talkers, i);
    ds.samples.push_back(GenerateSample(config, ds.meta.vocab, ds.meta.emission,
                                        num_talkers, condition, id,
                                        DeriveSeed(split_seed, i)));
  }
  return ds;
}

DatasetStats ComputeStats(const Dataset& dataset) {
  DatasetStats st;
  st.num_samples = static_cast<int>(dataset.samples.size());
  int64_t tokens = 0;
  int64_t talkers = 0;
  for (const auto& s : dataset.samples) {
    const int frames = s.num_frames();
    st.total_frames += frames;
    std::vector<int> active(static_cast<size_t>(frames), 0);
    for (int k = 0; k < s.num_talkers(); ++k) {
      int start = frames;
      int end = 0;
      for (const auto& span : s.spans) {
        if (span.talker != k) continue;
        start = std::min(start, span.start);
        end = std::max(end, span.end);
      }
      for (int f = start; f < end; ++f) ++active[static_cast<size_t>(f)];
      tokens += static_cast<int64_t>(s.talker_transcripts[k].size());
      ++talkers;
    }
    for (int a : active) st.overlap_frames += a >= 2 ? 1 : 0;
  }
  if (st.num_samples > 0) {
    st.mean_frames = static_cast<double>(st.total_frames) / st.num_samples;
    st.mean_tokens_per_talker = static_cast<double>(tokens) / talkers;
  }
  if (st.total_frames > 0) {
    st.overlap_ratio =
        static_cast<double>(st.overlap_frames) / st.total_frames;
  }
  return st;
}

void WriteFeatureFile(const Matrix& features, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write feature file " + path);
  uint32_t header[3] = {kFeatureVersion, static_cast<uint32_t>(features.rows()),
                        static_cast<uint32_t>(features.cols())};
  out.write(kFeatureMagic, 4);
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  FloatMatrix f = features.cast<float>();
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!out) throw DataError("short write to " + path);
}

Matrix ReadFeatureFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path);
  char magic[4];
  uint32_t header[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (!in || std::memcmp(magic, kFeatureMagic, 4) != 0) {
    throw DataError(path + ": not a feature file");
  }
  if (header[0] != kFeatureVersion) {
    throw DataError(path + ": unsupported feature file version " +
                    std::to_string(header[0]));
  }
  FloatMatrix f(header[1], header[2]);
  in.read(reinterpret_cast<char*>(f.data()),
          static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!in) throw DataError(path + ": truncated payload");
  return f.cast<Real>();
}

namespace {

json MetaToJson(const DatasetMeta& m) {
  json emb = json::array();
  for (TokenId t : m.vocab.ContentTokens()) {
    json row = json::array();
    for (int f = 0; f < m.emission.feature_dim; ++f) {
      row.push_back(m.emission.token_embeddings(t, f));
    }
    emb.push_back(row);
  }
  return json{
      {"record", "dataset_meta"},
      {"version", kManifestVersion},
      {"dataset_id", m.dataset_id},
      {"split", m.split},
      {"num_talkers", m.num_talkers},
      {"condition", ConditionName(m.condition)},
      {"num_content_tokens", m.vocab.num_content()},
      {"mix_noise_sigma", m.mix_noise_sigma},
      {"master_seed", m.master_seed},
      {"config_hash", m.config_hash},
      {"emission",
       {{"feature_dim", m.emission.feature_dim},
        {"duration", {m.emission.duration_min, m.emission.duration_max}},
        {"noise_sigma", m.emission.noise_sigma},
        {"seed", m.emission.seed},
        {"embeddings", emb}}},
  };
}

DatasetMeta MetaFromJson(const json& j) {
  if (j.at("record").get<std::string>() != "dataset_meta") {
    throw DataError("first record is not dataset_meta");
  }
  if (j.at("version").get<int>() != kManifestVersion) {
    throw DataError("unsupported manifest version");
  }
  DatasetMeta m;
  m.dataset_id = j.at("dataset_id").get<std::string>();
  m.split = j.at("split").get<std::string>();
  m.num_talkers = j.at("num_talkers").get<int>();
  m.condition = ConditionFromName(j.at("condition").get<std::string>());
  m.vocab = Vocabulary(j.at("num_content_tokens").get<int>());
  m.mix_noise_sigma = j.at("mix_noise_sigma").get<Real>();
  m.master_seed = j.at("master_seed").get<uint64_t>();
  m.config_hash = j.at("config_hash").get<std::string>();
  const json& e = j.at("emission");
  m.emission.feature_dim = e.at("feature_dim").get<int>();
  m.emission.duration_min = e.at("duration").at(0).get<int>();
  m.emission.duration_max = e.at("duration").at(1).get<int>();
  m.emission.noise_sigma = e.at("noise_sigma").get<Real>();
  m.emission.seed = e.at("seed").get<uint64_t>();
  m.emission.token_embeddings =
      Matrix::Zero(m.vocab.size(), m.emission.feature_dim);
  const json& emb = e.at("embeddings");
  if (static_cast<int>(emb.size()) != m.vocab.num_content()) {
    throw DataError("embedding table has " + std::to_string(emb.size()) +
                    " rows, expected " +
                    std::to_string(m.vocab.num_content()));
  }
  for (int i = 0; i < m.vocab.num_content(); ++i) {
    for (int f = 0; f < m.emission.feature_dim; ++f) {
      m.emission.token_embeddings(i + 1, f) = emb.at(i).at(f).get<Real>();
    }
  }
  return m;
}

std::string FeatureRelPath(const DatasetMeta& meta, const std::string& id) {
  return "feats/" + meta.split + "/" + id + ".bin";
}

}  // namespace

void WriteManifest(const Dataset& dataset, const std::string& path) {
  const fs::path manifest(path);
  const fs::path dir = manifest.has_parent_path() ? manifest.parent_path()
                                                  : fs::path(".");
  fs::create_directories(dir);
  std::ofstream out(path);
  std::ofstream align(path + ".align.jsonl");
  if (!out || !align) throw DataError("cannot write manifest " + path);
  out << MetaToJson(dataset.meta).dump() << "\n";
  for (const auto& s : dataset.samples) {
    const std::string rel = FeatureRelPath(dataset.meta, s.sample_id);
    fs::create_directories((dir / rel).parent_path());
    WriteFeatureFile(s.features, (dir / rel).string());
    json rec = {
        {"sample_id", s.sample_id},
        {"condition", ConditionName(s.condition)},
        {"offsets", s.offsets},
        {"talker_transcripts", s.talker_transcripts},
        {"feature_file", rel},
        {"seed", s.seed},
    };
    out << rec.dump() << "\n";
    json spans = json::array();
    for (const auto& sp : s.spans) {
      spans.push_back({sp.talker, sp.token, sp.start, sp.end});
    }
    align << json{{"sample_id", s.sample_id}, {"spans", spans}}.dump() << "\n";
  }
  if (!out || !align) throw DataError("error writing manifest " + path);
}

Dataset ReadManifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  const fs::path manifest(path);
  const fs::path dir = manifest.has_parent_path() ? manifest.parent_path()
                                                  : fs::path(".");
  Dataset ds;
  std::string line;
  int line_no = 0;
  bool have_meta = false;
  while (std::getline(in, line)) {
    ++line_no;
    try {
      if (line.empty()) throw DataError("empty record");
      json j = json::parse(line);
      if (!have_meta) {
        ds.meta = MetaFromJson(j);
        have_meta = true;
        continue;
      }
      if (j.size() != 6) throw DataError("expected exactly 6 fields");
      MixtureSample s;
      s.sample_id = j.at("sample_id").get<std::string>();
      s.condition = ConditionFromName(j.at("condition").get<std::string>());
      s.offsets = j.at("offsets").get<std::vector<int>>();
      s.talker_transcripts =
          j.at("talker_transcripts").get<std::vector<TokenSeq>>();
      s.seed = j.at("seed").get<uint64_t>();
      if (s.offsets.size() != s.talker_transcripts.size() ||
          s.offsets.empty()) {
        throw DataError("offsets/transcripts count mismatch");
      }
      for (const auto& t : s.talker_transcripts) {
        if (t.empty()) throw DataError("empty talker transcript");
        for (TokenId tok : t) {
          if (!ds.meta.vocab.IsContent(tok)) {
            throw DataError("non-content token " + std::to_string(tok));
          }
        }
      }
      s.features =
          ReadFeatureFile((dir / j.at("feature_file").get<std::string>()).string());
      ds.samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": malformed record: " + e.what());
    } catch (const std::runtime_error& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_meta) throw DataError(path + ":1: missing dataset_meta record");

  std::ifstream align(path + ".align.jsonl");
  if (align) {
    line_no = 0;
    size_t idx = 0;
    while (std::getline(align, line)) {
      ++line_no;
      try {
        json j = json::parse(line);
        if (idx >= ds.samples.size() ||
            j.at("sample_id").get<std::string>() != ds.samples[idx].sample_id) {
          throw DataError("span record does not match manifest order");
        }
        for (const auto& sp : j.at("spans")) {
          ds.samples[idx].spans.push_back({sp.at(0).get<int>(),
                                           sp.at(1).get<TokenId>(),
                                           sp.at(2).get<int>(),
                                           sp.at(3).get<int>()});
        }
        ++idx;
      } catch (const json::exception& e) {
        throw DataError(path + ".align.jsonl:" + std::to_string(line_no) +
                        ": malformed record: " + e.what());
      }
    }
  }
  return ds;
}

}  // namespace sopmt
