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

#include <algorithm>
#include <numeric>
#include <random>

#include "sopmt/labels.h"

namespace sopmt {
namespace {

class LabelsTest : public ::testing::Test {
 protected:
  Vocabulary vocab_{28};
  TokenId T(char c) const { return static_cast<TokenId>(c - 'a' + 1); }
  TokenId sc() const { return vocab_.sc(); }
};

TEST_F(LabelsTest, OrdersBySpeakingStart) {
  SotLabel label = SerializeTranscripts({{T('h'), T('w')}, {T('g'), T('b')}},
                                        {4, 12}, vocab_);
  EXPECT_EQ(label.tokens, (TokenSeq{T('h'), T('w'), sc(), T('g'), T('b')}));
  EXPECT_EQ(label.num_talkers, 2);
  EXPECT_EQ(label.source_order, (std::vector<int>{0, 1}));
}

TEST_F(LabelsTest, SingleTalkerUnchanged) {
  SotLabel label = SerializeTranscripts({{T('a'), T('b')}}, {3}, vocab_);
  EXPECT_EQ(label.tokens, (TokenSeq{T('a'), T('b')}));
}

TEST_F(LabelsTest, ThreeTalkersSortedByOffset) {
  SotLabel label =
      SerializeTranscripts({{T('x')}, {T('y')}, {T('z')}}, {9, 1, 5}, vocab_);
  EXPECT_EQ(label.tokens, (TokenSeq{T('y'), sc(), T('z'), sc(), T('x')}));
  EXPECT_EQ(label.source_order, (std::vector<int>{1, 2, 0}));
}

TEST_F(LabelsTest, RejectsInvalidInputs) {
  EXPECT_THROW(SerializeTranscripts({{T('a')}, {T('b')}}, {3, 3}, vocab_),
               DataError);
  EXPECT_THROW(SerializeTranscripts({{T('a')}, {}}, {0, 3}, vocab_), DataError);
  EXPECT_THROW(SerializeTranscripts({}, {}, vocab_), DataError);
  EXPECT_THROW(SerializeTranscripts({{T('a')}}, {0, 1}, vocab_), DataError);
}

TEST_F(LabelsTest, SplitExamples) {
  EXPECT_EQ(SplitSerialized({T('h'), T('w'), sc(), T('g'), T('b')}, vocab_),
            (std::vector<TokenSeq>{{T('h'), T('w')}, {T('g'), T('b')}}));
  EXPECT_EQ(SplitSerialized({sc()}, vocab_), (std::vector<TokenSeq>{{}, {}}));
  EXPECT_EQ(SplitSerialized({T('a'), T('b'), T('c')}, vocab_),
            (std::vector<TokenSeq>{{T('a'), T('b'), T('c')}}));
  EXPECT_EQ(SplitSerialized({}, vocab_), (std::vector<TokenSeq>{{}}));
}

TEST_F(LabelsTest, RandomisedProperties) {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<int> talkers(1, 3), len(1, 12),
      offset(0, 200);
  std::uniform_int_distribution<TokenId> tok(1, vocab_.num_content());
  for (int trial = 0; trial < 1500; ++trial) {
    const int s = talkers(rng);
    std::vector<TokenSeq> transcripts(static_cast<size_t>(s));
    std::vector<int> offsets;
    for (auto& t : transcripts) {
      t.resize(static_cast<size_t>(len(rng)));
      for (auto& x : t) x = tok(rng);
    }
    while (static_cast<int>(offsets.size()) < s) {
      int o = offset(rng);
      if (std::find(offsets.begin(), offsets.end(), o) == offsets.end()) {
        offsets.push_back(o);
      }
    }
    SotLabel label = SerializeTranscripts(transcripts, offsets, vocab_);

    // Structural invariants.
    EXPECT_EQ(std::count(label.tokens.begin(), label.tokens.end(), sc()),
              s - 1);
    EXPECT_NE(label.tokens.front(), sc());
    EXPECT_NE(label.tokens.back(), sc());
    for (size_t i = 1; i < label.tokens.size(); ++i) {
      EXPECT_FALSE(label.tokens[i] == sc() && label.tokens[i - 1] == sc());
    }

    // Round trip against an independent sort by offset.
    std::vector<int> idx(static_cast<size_t>(s));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](int a, int b) { return offsets[a] < offsets[b]; });
    std::vector<TokenSeq> expected;
    for (int i : idx) expected.push_back(transcripts[i]);
    EXPECT_EQ(SplitSerialized(label.tokens, vocab_), expected);
    EXPECT_EQ(label.source_order, idx);

    // Permuting the input pairs leaves the output unchanged.
    std::vector<int> perm(static_cast<size_t>(s));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<TokenSeq> pt;
    std::vector<int> po;
    for (int i : perm) {
      pt.push_back(transcripts[i]);
      po.push_back(offsets[i]);
    }
    EXPECT_EQ(SerializeTranscripts(pt, po, vocab_).tokens, label.tokens);
  }
}

}  // namespace
}  // namespace sopmt
