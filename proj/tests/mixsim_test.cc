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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "sopmt/mixsim.h"

namespace sopmt {
namespace {

namespace fs = std::filesystem;

fs::path TempDir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("sopmt_mixsim_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

MixSimConfig SmallConfig() {
  MixSimConfig c;
  c.train_size = 6;
  c.dev_size = 3;
  c.eval_size = 3;
  return c;
}

TEST(GenTalkerTranscript, LengthForcedByRange) {
  Vocabulary vocab(3);
  Rng rng(7);
  TokenSeq t = GenTalkerTranscript(vocab, 3, 3, &rng);
  ASSERT_EQ(t.size(), 3u);
  for (TokenId x : t) EXPECT_TRUE(vocab.IsContent(x));
}

TEST(GenTalkerTranscript, SingleSymbolAlphabet) {
  Vocabulary vocab(1);
  Rng rng(123);
  EXPECT_EQ(GenTalkerTranscript(vocab, 2, 2, &rng), (TokenSeq{1, 1}));
}

TEST(GenTalkerTranscript, DeterministicAndCoversRange) {
  Vocabulary vocab(28);
  Rng a(5), b(5);
  std::set<size_t> lengths;
  for (int i = 0; i < 200; ++i) {
    TokenSeq x = GenTalkerTranscript(vocab, 4, 12, &a);
    EXPECT_EQ(x, GenTalkerTranscript(vocab, 4, 12, &b));
    lengths.insert(x.size());
  }
  EXPECT_EQ(*lengths.begin(), 4u);
  EXPECT_EQ(*lengths.rbegin(), 12u);
  EXPECT_EQ(lengths.size(), 9u);
}

TEST(GenTalkerTranscript, RejectsBadConfig) {
  Rng rng(1);
  EXPECT_THROW(GenTalkerTranscript(Vocabulary(0), 1, 2, &rng), ConfigError);
  EXPECT_THROW(GenTalkerTranscript(Vocabulary(3), 0, 2, &rng), ConfigError);
  EXPECT_THROW(GenTalkerTranscript(Vocabulary(3), 5, 4, &rng), ConfigError);
  EXPECT_THROW(GenTalkerTranscript(Vocabulary(3), 1, 65, &rng), ConfigError);
}

TEST(SynthFeatures, ZeroNoiseRepeatsEmbedding) {
  Vocabulary vocab(3);
  EmissionModel em = EmissionModel::Create(vocab, 5, 2, 2, 0.0, 11);
  Rng rng(1);
  SynthResult r = SynthFeatures({1}, em, &rng);
  ASSERT_EQ(r.frames.rows(), 2);
  EXPECT_EQ(r.frames.row(0), em.token_embeddings.row(1));
  EXPECT_EQ(r.frames.row(1), em.token_embeddings.row(1));

  EmissionModel em1 = EmissionModel::Create(vocab, 5, 1, 1, 0.0, 11);
  SynthResult ab = SynthFeatures({1, 2}, em1, &rng);
  ASSERT_EQ(ab.frames.rows(), 2);
  EXPECT_EQ(ab.frames.row(0), em1.token_embeddings.row(1));
  EXPECT_EQ(ab.frames.row(1), em1.token_embeddings.row(2));
}

TEST(SynthFeatures, SpansTileTheOutput) {
  Vocabulary vocab(28);
  EmissionModel em = EmissionModel::Create(vocab, 16, 2, 4, 0.05, 3);
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    TokenSeq tokens = GenTalkerTranscript(vocab, 1, 12, &rng);
    SynthResult r = SynthFeatures(tokens, em, &rng);
    ASSERT_EQ(r.token_frames.size(), tokens.size());
    int expected_start = 0;
    for (const auto& [start, end] : r.token_frames) {
      EXPECT_EQ(start, expected_start);
      EXPECT_GE(end - start, 2);
      EXPECT_LE(end - start, 4);
      expected_start = end;
    }
    EXPECT_EQ(r.frames.rows(), expected_start);
  }
}

TEST(SynthFeatures, UnknownTokenNamed) {
  Vocabulary vocab(3);
  EmissionModel em = EmissionModel::Create(vocab, 4, 1, 1, 0.0, 1);
  Rng rng(1);
  try {
    SynthFeatures({1, vocab.sc()}, em, &rng);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(vocab.sc())),
              std::string::npos);
  }
}

TEST(SampleOffsets, Examples) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    auto off = SampleOffsets(2, {10, 10}, 2, &rng);
    ASSERT_EQ(off.size(), 2u);
    EXPECT_EQ(off[0], 0);
    EXPECT_GE(off[1], 2);
    EXPECT_LT(off[1], 10);
  }
  EXPECT_EQ(SampleOffsets(1, {10}, 3, &rng), std::vector<int>{0});
}

TEST(SampleOffsets, ConstraintsHoldForRandomDraws) {
  Rng rng(8);
  std::uniform_int_distribution<int> len(8, 48), talkers(2, 3);
  for (int trial = 0; trial < 1000; ++trial) {
    const int s = talkers(rng);
    std::vector<int> lengths;
    for (int k = 0; k < s; ++k) lengths.push_back(len(rng));
    auto off = SampleOffsets(s, lengths, 4, &rng);
    int mixture = lengths[0];
    EXPECT_EQ(off[0], 0);
    for (int k = 1; k < s; ++k) {
      EXPECT_GE(off[k] - off[k - 1], 4);
      EXPECT_LT(off[k], mixture);
      mixture = std::max(mixture, off[k] + lengths[k]);
    }
  }
}

TEST(SampleOffsets, RejectsInfeasible) {
  Rng rng(1);
  EXPECT_THROW(SampleOffsets(2, {3, 10}, 4, &rng), DataError);
  EXPECT_THROW(SampleOffsets(2, {10, 10}, 0, &rng), ConfigError);
  EXPECT_THROW(SampleOffsets(2, {10}, 1, &rng), ConfigError);
}

TEST(Mix, Examples) {
  Rng rng(1);
  Matrix a = Matrix::Random(8, 3);
  Matrix b = Matrix::Random(8, 3);
  EXPECT_EQ(Mix({a}, {0}, 0.0, &rng), a);
  EXPECT_EQ(Mix({a, b}, {0, 5}, 0.0, &rng).rows(), 13);

  Matrix disjoint = Mix({a, b}, {0, 10}, 0.0, &rng);
  ASSERT_EQ(disjoint.rows(), 18);
  EXPECT_EQ(disjoint.topRows(8), a);
  EXPECT_TRUE(disjoint.middleRows(8, 2).isZero(0.0));
  EXPECT_EQ(disjoint.bottomRows(8), b);
  EXPECT_THROW(Mix({a, b}, {0, -1}, 0.0, &rng), DataError);
}

TEST(Mix, IsLinearInEachStream) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix a = Matrix::Random(6 + trial % 5, 4);
    Matrix b = Matrix::Random(7, 4);
    const int off = 1 + trial % 6;
    Matrix both = Mix({a, b}, {0, off}, 0.0, &rng);
    Matrix only_a = Mix({a, Matrix::Zero(7, 4)}, {0, off}, 0.0, &rng);
    EXPECT_TRUE((both - only_a).middleRows(off, 7).isApprox(b, 1e-12));
  }
}

TEST(Mix, NoiseHasRequestedScale) {
  Rng rng(4);
  Matrix z = Matrix::Zero(400, 16);
  Matrix noisy = Mix({z}, {0}, 0.5, &rng);
  const double var = noisy.array().square().mean();
  EXPECT_NEAR(std::sqrt(var), 0.5, 0.02);
}

TEST(GenerateSample, SatisfiesInvariants) {
  MixSimConfig config;
  Vocabulary vocab(config.num_content_tokens);
  EmissionModel em = DatasetEmissionModel(config, vocab, 17);
  for (int s : {2, 3}) {
    for (int i = 0; i < 40; ++i) {
      MixtureSample m = GenerateSample(config, vocab, em, s, Condition::kClean,
                                       "x", DeriveSeed(99, i));
      ASSERT_EQ(m.num_talkers(), s);
      std::set<int> distinct(m.offsets.begin(), m.offsets.end());
      EXPECT_EQ(static_cast<int>(distinct.size()), s);
      int expected_len = 0;
      for (int k = 0; k < s; ++k) {
        ASSERT_FALSE(m.talker_transcripts[k].empty());
        int end = 0;
        for (const auto& sp : m.spans) {
          if (sp.talker == k) end = std::max(end, sp.end);
        }
        expected_len = std::max(expected_len, end);
        for (TokenId t : m.talker_transcripts[k]) {
          EXPECT_TRUE(vocab.IsContent(t));
        }
      }
      EXPECT_EQ(m.num_frames(), expected_len);
      EXPECT_EQ(m.features.cols(), config.feature_dim);
      EXPECT_TRUE(m.features.cast<float>().cast<Real>() == m.features);
    }
  }
}

TEST(GenerateDataset, DeterministicAndConditionsShareContent) {
  MixSimConfig config = SmallConfig();
  Dataset a = GenerateDataset(config, 5, 2, "train", Condition::kClean, "h");
  Dataset b = GenerateDataset(config, 5, 2, "train", Condition::kClean, "h");
  ASSERT_EQ(a.samples.size(), 6u);
  EXPECT_EQ(a.meta, b.meta);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i], b.samples[i]);
  }
  EXPECT_EQ(a.samples[3].sample_id, "train-s2-000003");

  Dataset noisy = GenerateDataset(config, 5, 2, "train", Condition::kNoisy, "h");
  for (size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(noisy.samples[i].talker_transcripts,
              a.samples[i].talker_transcripts);
    EXPECT_EQ(noisy.samples[i].offsets, a.samples[i].offsets);
    EXPECT_FALSE(noisy.samples[i].features == a.samples[i].features);
  }

  Dataset dev = GenerateDataset(config, 5, 2, "dev", Condition::kClean, "h");
  EXPECT_NE(dev.samples[0].talker_transcripts, a.samples[0].talker_transcripts);
  Dataset other = GenerateDataset(config, 6, 2, "train", Condition::kClean, "h");
  EXPECT_NE(other.samples[0].seed, a.samples[0].seed);
  EXPECT_THROW(GenerateDataset(config, 5, 2, "test", Condition::kClean, "h"),
               ConfigError);
}

TEST(ComputeStats, MatchesDirectCount) {
  MixSimConfig config = SmallConfig();
  Dataset ds = GenerateDataset(config, 3, 2, "train", Condition::kClean, "h");
  DatasetStats st = ComputeStats(ds);
  int64_t frames = 0, overlap = 0;
  for (const auto& s : ds.samples) {
    frames += s.num_frames();
    // Both talkers are active between the second onset and the first end.
    int end0 = 0;
    for (const auto& sp : s.spans) {
      if (sp.talker == 0) end0 = std::max(end0, sp.end);
    }
    int end1 = 0;
    for (const auto& sp : s.spans) {
      if (sp.talker == 1) end1 = std::max(end1, sp.end);
    }
    overlap += std::min(end0, end1) - s.offsets[1];
  }
  EXPECT_EQ(st.num_samples, 6);
  EXPECT_EQ(st.total_frames, frames);
  EXPECT_EQ(st.overlap_frames, overlap);
  EXPECT_GT(st.overlap_ratio, 0.0);
}

TEST(Manifest, RoundTrip) {
  fs::path dir = TempDir("roundtrip");
  MixSimConfig config = SmallConfig();
  config.dev_size = 3;
  Dataset ds = GenerateDataset(config, 21, 3, "dev", Condition::kNoisy, "abc");
  const std::string path = (dir / "dev.jsonl").string();
  WriteManifest(ds, path);
  Dataset back = ReadManifest(path);
  EXPECT_EQ(back.meta, ds.meta);
  ASSERT_EQ(back.samples.size(), 3u);
  for (size_t i = 0; i < 3; ++i) EXPECT_EQ(back.samples[i], ds.samples[i]);
  EXPECT_TRUE(fs::exists(dir / "feats" / "dev" / "dev-s3-000000.bin"));
  EXPECT_EQ(fs::file_size(dir / "feats" / "dev" / "dev-s3-000000.bin"),
            16 + 4 * static_cast<uintmax_t>(ds.samples[0].features.size()));
}

TEST(Manifest, EmptyDatasetHasHeaderOnly) {
  fs::path dir = TempDir("empty");
  MixSimConfig config = SmallConfig();
  config.eval_size = 0;
  Dataset ds = GenerateDataset(config, 2, 2, "eval", Condition::kClean, "h");
  const std::string path = (dir / "eval.jsonl").string();
  WriteManifest(ds, path);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 1);
  Dataset back = ReadManifest(path);
  EXPECT_TRUE(back.samples.empty());
  EXPECT_EQ(back.meta, ds.meta);
}

TEST(Manifest, TruncatedRecordReportsLine) {
  fs::path dir = TempDir("truncated");
  Dataset ds = GenerateDataset(SmallConfig(), 2, 2, "dev", Condition::kClean,
                               "h");
  const std::string path = (dir / "dev.jsonl").string();
  WriteManifest(ds, path);
  std::ifstream in(path);
  std::string content((std::istreambuf_iterator<char>(in)), {});
  // Cut the file in the middle of the third record (line 3).
  size_t pos = 0;
  for (int i = 0; i < 2; ++i) pos = content.find('\n', pos) + 1;
  std::ofstream(path, std::ios::trunc) << content.substr(0, pos + 20);
  try {
    ReadManifest(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}

TEST(Manifest, RejectsExtraFields) {
  fs::path dir = TempDir("fields");
  Dataset ds = GenerateDataset(SmallConfig(), 2, 2, "dev", Condition::kClean,
                               "h");
  const std::string path = (dir / "dev.jsonl").string();
  WriteManifest(ds, path);
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  first.insert(first.size() - 1, ",\"extra\":1");
  std::ofstream(path, std::ios::trunc) << header << "\n" << first << "\n";
  EXPECT_THROW(ReadManifest(path), DataError);
}

TEST(FeatureFile, RoundTripAndTruncation) {
  fs::path dir = TempDir("feat");
  Matrix m = Matrix::Random(5, 3).cast<float>().cast<Real>();
  const std::string path = (dir / "m.bin").string();
  WriteFeatureFile(m, path);
  EXPECT_EQ(ReadFeatureFile(path), m);
  fs::resize_file(path, 16 + 4 * 7);
  EXPECT_THROW(ReadFeatureFile(path), DataError);
  std::ofstream(path, std::ios::trunc) << "garbage-header-bytes";
  EXPECT_THROW(ReadFeatureFile(path), DataError);
  EXPECT_THROW(ReadFeatureFile((dir / "missing.bin").string()), DataError);
}

TEST(DeriveSeed, DistinctStreams) {
  std::set<uint64_t> seen;
  for (uint64_t s = 0; s < 1000; ++s) seen.insert(DeriveSeed(42, s));
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_EQ(DeriveSeed(1, 2), DeriveSeed(1, 2));
  EXPECT_NE(DeriveSeed(1, 2), DeriveSeed(2, 1));
}

}  // namespace
}  // namespace sopmt
