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

#include <sstream>

#include "sopmt/decoder.h"
#include "sopmt/labels.h"
#include "sopmt/sepctc.h"
#include "support/oracles.h"

namespace sopmt {
namespace {

using testing::CheckGradients;
using testing::CtcLossOracle;
using testing::RandomMatrix;

std::vector<std::string> Lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::vector<std::string> Words(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

class SeparatorTest : public ::testing::Test {
 protected:
  Vocabulary vocab_{6};
  SeparatorConfig SmallConfig(int talkers) const {
    SeparatorConfig c;
    c.input_dim = 5;
    c.lstm_hidden = 3;
    c.output_dim = 4;
    c.num_talkers = talkers;
    return c;
  }
};

TEST_F(SeparatorTest, ZeroInputAndBiasesGiveZeroStreams) {
  ParamStore store;
  Rng rng(1);
  Separator sep(&store, SmallConfig(2), vocab_, &rng);
  for (Parameter* p : store.All()) {
    if (p->name.ends_with(".bias")) p->value.setZero();
  }
  Graph g(false);
  auto streams = sep.Separate(&g, g.Input(Matrix::Zero(4, 5)), 2);
  ASSERT_EQ(streams.size(), 2u);
  for (const Var& s : streams) {
    EXPECT_EQ(s.rows(), 4);
    EXPECT_EQ(s.cols(), 4);
    EXPECT_TRUE(s.value().isZero(0.0));
  }
}

TEST_F(SeparatorTest, OneStreamPerTalkerAndCtcWidth) {
  ParamStore store;
  Rng rng(2);
  Separator sep(&store, SmallConfig(3), vocab_, &rng);
  Graph g(false);
  auto streams = sep.Separate(&g, g.Input(Matrix::Random(7, 5)), 3);
  EXPECT_EQ(streams.size(), 3u);
  auto logits = sep.Logits(&g, streams);
  ASSERT_EQ(logits.size(), 3u);
  for (const Var& l : logits) {
    EXPECT_EQ(l.rows(), 7);
    EXPECT_EQ(l.cols(), vocab_.ctc_size());
  }
  EXPECT_THROW(sep.Separate(&g, g.Input(Matrix::Random(7, 5)), 2),
               ConfigError);
  for (const Parameter* p : store.All()) {
    const bool ctc = p->name.starts_with("ctc.");
    EXPECT_EQ(p->group, ctc ? ParamGroup::kCtcHeads : ParamGroup::kSeparator)
        << p->name;
  }
}

TEST_F(SeparatorTest, RunLogitsMatchesGraph) {
  ParamStore store;
  Rng rng(3);
  Separator sep(&store, SmallConfig(2), vocab_, &rng);
  Matrix h2 = Matrix::Random(6, 5);
  Graph g(false);
  auto graph_logits = sep.Logits(&g, sep.Separate(&g, g.Input(h2), 2));
  auto run = sep.RunLogits(h2);
  for (size_t s = 0; s < 2; ++s) {
    EXPECT_TRUE(run[s].isApprox(graph_logits[s].value(), 1e-12));
  }
}

TEST_F(SeparatorTest, GradientsMatchFiniteDifferences) {
  ParamStore store;
  Rng rng(4);
  Separator sep(&store, SmallConfig(2), vocab_, &rng);
  store.SetTrainable({ParamGroup::kSeparator, ParamGroup::kCtcHeads});
  Parameter h2 = testing::MakeLeaf("h2", Matrix::Random(4, 5));
  const std::vector<TokenSeq> targets = {{1, 2}, {3}};
  std::vector<Parameter*> params = store.Trainable();
  params.push_back(&h2);
  auto report = CheckGradients(params, [&](Graph* g) {
    auto logits = sep.Logits(g, sep.Separate(g, g->Param(&h2), 2));
    return SerializedCtcLoss(logits, targets).loss;
  }, 8);
  EXPECT_LT(report.worst_rel, 1e-3) << report.worst;
}

TEST(SerializedCtc, ReducesToSingleBranchAndIsAdditive) {
  std::mt19937_64 rng(5);
  Matrix logits = RandomMatrix(5, 4, 1.0, &rng);
  Graph g(false);
  Var l = g.Input(logits);
  const Real single = CtcLoss(logits, {1, 2}, false).loss;
  EXPECT_NEAR(SerializedCtcLoss({l}, {{1, 2}}).loss.value()(0, 0), single,
              1e-12);
  EXPECT_NEAR(SerializedCtcLoss({l, l}, {{1, 2}, {1, 2}}).loss.value()(0, 0),
              2 * single, 1e-12);
  EXPECT_NEAR(SerializedCtcLossValue({logits, logits}, {{1, 2}, {1, 2}}),
              2 * single, 1e-12);
  EXPECT_THROW(SerializedCtcLoss({l}, {{1}, {2}}), ConfigError);
}

TEST(SerializedCtc, MatchesSumOfOracleCalls) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<TokenId> tok(1, 3);
  std::uniform_int_distribution<int> len(1, 3), frames(3, 6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Matrix> logits;
    std::vector<TokenSeq> targets;
    for (int s = 0; s < 2; ++s) {
      logits.push_back(RandomMatrix(frames(rng), 4, 1.0, &rng));
      TokenSeq t(static_cast<size_t>(len(rng)));
      for (auto& x : t) x = tok(rng);
      targets.push_back(t);
    }
    Real expected = 0.0;
    int infeasible = 0;
    for (int s = 0; s < 2; ++s) {
      Real v = CtcLossOracle(logits[s], targets[s]);
      if (std::isinf(v)) {
        ++infeasible;
      } else {
        expected += v;
      }
    }
    Graph g(false);
    SerializedCtc got =
        SerializedCtcLoss({g.Input(logits[0]), g.Input(logits[1])}, targets);
    EXPECT_EQ(got.num_infeasible, infeasible);
    if (infeasible < 2) {
      EXPECT_NEAR(got.loss.value()(0, 0), expected, 1e-6);
    } else {
      EXPECT_FALSE(got.loss.valid());
    }
  }
}

TEST(BuildSop, Examples) {
  Vocabulary vocab(28);
  const TokenId sc = vocab.sc();
  EXPECT_EQ(BuildSop({{1, 2}, {3}}, vocab).concatenated,
            (TokenSeq{1, 2, sc, 3}));
  EXPECT_EQ(BuildSop({{}, {}}, vocab).concatenated, TokenSeq{sc});
  EXPECT_EQ(BuildSop({{24}, {25}, {26}}, vocab).concatenated,
            (TokenSeq{24, sc, 25, sc, 26}));
  EXPECT_EQ(BuildSop({{1, 2}, {3}}, vocab, false).concatenated,
            (TokenSeq{1, 2, 3}));
  EXPECT_THROW(BuildSop({{1, kCtcBlank}}, vocab), DataError);
}

TEST(BuildSop, SplitRecoversBranches) {
  Vocabulary vocab(28);
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<TokenId> tok(1, 28);
  std::uniform_int_distribution<int> len(0, 10), talkers(1, 3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<TokenSeq> branches(static_cast<size_t>(talkers(rng)));
    for (auto& b : branches) {
      b.resize(static_cast<size_t>(len(rng)));
      for (auto& t : b) t = tok(rng);
    }
    SopPrompt p = BuildSop(branches, vocab);
    EXPECT_EQ(SplitSerialized(p.concatenated, vocab), branches);
    EXPECT_EQ(p.branch_sequences, branches);
  }
}

TEST(DecodeSop, GreedyDecodesEveryBranch) {
  Vocabulary vocab(3);
  Matrix a = Matrix::Zero(3, 4), b = Matrix::Zero(3, 4);
  a(0, 1) = a(1, 1) = a(2, 2) = 5;  // 1 1 2
  b(0, 3) = b(1, 0) = b(2, 3) = 5;  // 3 _ 3
  SopPrompt p = DecodeSop({a, b}, vocab);
  EXPECT_EQ(p.branch_sequences, (std::vector<TokenSeq>{{1, 2}, {3, 3}}));
  EXPECT_EQ(p.concatenated, (TokenSeq{1, 2, vocab.sc(), 3, 3}));
  EXPECT_EQ(p.frame_labels[1], (std::vector<TokenId>{3, 0, 3}));
}

TEST(EmbedSop, UsesDecoderEmbeddingTable) {
  Vocabulary vocab(28);
  ParamStore store;
  Rng rng(8);
  Decoder dec(&store, vocab, DecoderConfig{}, &rng);
  SopPrompt empty = BuildSop({}, vocab);
  EXPECT_EQ(EmbedSop(empty, *dec.embedding()).rows(), 0);
  EXPECT_EQ(EmbedSop(empty, *dec.embedding()).cols(), 64);
  SopPrompt p = BuildSop({{1, 5}, {7}}, vocab);
  Matrix e = EmbedSop(p, *dec.embedding());
  EXPECT_EQ(e.rows(), 4);
  EXPECT_EQ(e, dec.EmbedTextValue(p.concatenated));
  SopPrompt bad;
  bad.concatenated = {static_cast<TokenId>(vocab.size())};
  EXPECT_THROW(EmbedSop(bad, *dec.embedding()), DataError);
}

TEST(DumpAlignment, Examples) {
  Vocabulary vocab(28);
  EXPECT_EQ(DumpAlignment({{0, 0, 0}, {0, 0, 0}}, vocab), "");

  auto single = Lines(DumpAlignment({{0, 1, 0}}, vocab));
  ASSERT_EQ(single.size(), 2u);
  EXPECT_EQ(Words(single[0]), (std::vector<std::string>{"frame", "1"}));
  EXPECT_EQ(Words(single[1]), (std::vector<std::string>{"hyp1", "a"}));

  auto diag = Lines(DumpAlignment({{1, 0}, {0, 2}}, vocab));
  ASSERT_EQ(diag.size(), 3u);
  EXPECT_EQ(Words(diag[0]), (std::vector<std::string>{"frame", "0", "1"}));
  EXPECT_EQ(Words(diag[1]), (std::vector<std::string>{"hyp1", "a", "."}));
  EXPECT_EQ(Words(diag[2]), (std::vector<std::string>{"hyp2", ".", "b"}));

  EXPECT_THROW(DumpAlignment({{1, 0}, {0}}, vocab), ShapeError);
}

TEST(DumpAlignment, MarksMismatchesAgainstReference) {
  Vocabulary vocab(28);
  std::vector<std::vector<TokenId>> ref = {{1, 1, 0}};
  auto lines = Lines(DumpAlignment({{1, 2, 0}}, vocab, &ref));
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(Words(lines[1]), (std::vector<std::string>{"hyp1", "a", "b*"}));
  EXPECT_EQ(Words(lines[2]), (std::vector<std::string>{"ref1", "a", "a"}));
}

TEST(ReferenceFrameLabels, FollowsSpeakingOrder) {
  MixtureSample s;
  s.offsets = {8, 0};
  s.talker_transcripts = {{3}, {1, 2}};
  s.spans = {{0, 3, 8, 16}, {1, 1, 0, 4}, {1, 2, 4, 8}};
  auto labels = ReferenceFrameLabels(s, 4, 4);
  ASSERT_EQ(labels.size(), 2u);
  // Frame centres 2, 6, 10, 14; talker 1 speaks first.
  EXPECT_EQ(labels[0], (std::vector<TokenId>{1, 2, 0, 0}));
  EXPECT_EQ(labels[1], (std::vector<TokenId>{0, 0, 3, 3}));
}

}  // namespace
}  // namespace sopmt
