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

#include "sopmt/decoder.h"
#include "sopmt/optim.h"
#include "support/oracles.h"

namespace sopmt {
namespace {

using testing::CheckGradients;
using testing::RandomMatrix;

DecoderConfig TinyConfig() {
  DecoderConfig c;
  c.model_dim = 16;
  c.num_layers = 2;
  c.num_heads = 2;
  c.ffn_dim = 32;
  c.lora_rank = 4;
  c.lora_alpha = 8;
  return c;
}

class DecoderTest : public ::testing::Test {
 protected:
  Vocabulary vocab_{6};
  ParamStore store_;
  Rng rng_{11};
  Decoder dec_{&store_, vocab_, TinyConfig(), &rng_};

  Matrix Logits(const Matrix& prefix, const Matrix& e_t,
                const AdapterSet& active = {}) {
    Graph g(false);
    std::vector<Var> p;
    if (prefix.rows() > 0) p.push_back(g.Input(prefix));
    return dec_.Forward(&g, p, g.Input(e_t), active).value();
  }

  void RandomizeAdapter(ParamGroup group, Real scale) {
    std::mt19937_64 rng(3);
    for (Parameter* p : store_.Group(group)) {
      p->value = RandomMatrix(p->value.rows(), p->value.cols(), scale, &rng);
    }
  }
};

TEST_F(DecoderTest, EmbedText) {
  Matrix empty = dec_.EmbedTextValue({});
  EXPECT_EQ(empty.rows(), 0);
  EXPECT_EQ(empty.cols(), 16);
  Matrix e = dec_.EmbedTextValue({vocab_.bos(), 3, vocab_.sc()});
  EXPECT_EQ(e.row(0), dec_.embedding()->value.row(vocab_.bos()));
  EXPECT_EQ(e.row(1), dec_.embedding()->value.row(3));
  EXPECT_EQ(e.row(2), dec_.embedding()->value.row(vocab_.sc()));
  EXPECT_THROW(dec_.EmbedTextValue({static_cast<TokenId>(vocab_.size())}),
               DataError);
  EXPECT_THROW(dec_.EmbedTextValue({-1}), DataError);
}

TEST_F(DecoderTest, ZeroInitAdapterIsExactNoOp) {
  Matrix prefix = Matrix::Random(5, 16);
  Matrix e_t = dec_.EmbedTextValue({vocab_.bos(), 1, 2});
  Matrix base = Logits(prefix, e_t);
  dec_.AttachLora(&store_, ParamGroup::kLoraB, &rng_);
  EXPECT_EQ(Logits(prefix, e_t, {ParamGroup::kLoraB}), base);
  dec_.AttachLora(&store_, ParamGroup::kLoraA, &rng_);
  EXPECT_EQ(Logits(prefix, e_t, {ParamGroup::kLoraA, ParamGroup::kLoraB}),
            base);
  EXPECT_THROW(dec_.AttachLora(&store_, ParamGroup::kLoraA, &rng_),
               ConfigError);
  EXPECT_THROW(dec_.AttachLora(&store_, ParamGroup::kDecoderBase, &rng_),
               ConfigError);
}

TEST_F(DecoderTest, OutputShapeAndWidthChecks) {
  Matrix e_t = dec_.EmbedTextValue({vocab_.bos(), 1});
  Matrix logits = Logits(Matrix::Random(3, 16), e_t);
  EXPECT_EQ(logits.rows(), 2);
  EXPECT_EQ(logits.cols(), vocab_.size());
  EXPECT_THROW(Logits(Matrix::Random(3, 15), e_t), ShapeError);
  EXPECT_THROW(Logits(Matrix(0, 16), Matrix(0, 16)), ShapeError);
}

TEST_F(DecoderTest, CausalMask) {
  std::mt19937_64 rng(4);
  Matrix prefix = RandomMatrix(4, 16, 1.0, &rng);
  Matrix e_t = RandomMatrix(6, 16, 1.0, &rng);
  Matrix base = Logits(prefix, e_t);
  for (int j = 0; j < 6; ++j) {
    Matrix perturbed = e_t;
    perturbed.row(j) += RandomMatrix(1, 16, 1.0, &rng);
    Matrix out = Logits(prefix, perturbed);
    for (int t = 0; t < 6; ++t) {
      const Real diff = (out.row(t) - base.row(t)).cwiseAbs().maxCoeff();
      if (t < j) {
        EXPECT_LT(diff, 1e-12) << "row " << t << " moved by row " << j;
      } else {
        EXPECT_GT(diff, 1e-9) << "row " << t << " ignores row " << j;
      }
    }
  }
  // Every text position sees the prefix.
  Matrix moved = Logits(prefix + RandomMatrix(4, 16, 1.0, &rng), e_t);
  for (int t = 0; t < 6; ++t) {
    EXPECT_GT((moved.row(t) - base.row(t)).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST_F(DecoderTest, FirstPositionIgnoresLaterText) {
  std::mt19937_64 rng(5);
  Matrix prefix = RandomMatrix(3, 16, 1.0, &rng);
  Matrix e_short = dec_.EmbedTextValue({vocab_.bos()});
  Matrix e_long = dec_.EmbedTextValue({vocab_.bos(), 4, 2, 2});
  // Products over different row counts may round differently.
  EXPECT_LT((Logits(prefix, e_short).row(0) - Logits(prefix, e_long).row(0))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST_F(DecoderTest, CrossEntropyValues) {
  Graph g(false);
  const TokenSeq label = {1, 2};
  Var uniform = g.Input(Matrix::Zero(3, vocab_.size()));
  EXPECT_NEAR(dec_.CeLoss(uniform, label).value()(0, 0),
              std::log(static_cast<Real>(vocab_.size())), 1e-12);

  Matrix peaked = Matrix::Zero(3, vocab_.size());
  peaked(0, 1) = peaked(1, 2) = peaked(2, vocab_.eos()) = 50.0;
  EXPECT_LT(dec_.CeLoss(g.Input(peaked), label).value()(0, 0), 1e-12);
  EXPECT_THROW(dec_.CeLoss(uniform, {1}), ShapeError);
}

TEST_F(DecoderTest, GradientsMatchFiniteDifferences) {
  dec_.AttachLora(&store_, ParamGroup::kLoraA, &rng_);
  RandomizeAdapter(ParamGroup::kLoraA, 0.3);
  store_.SetTrainable({ParamGroup::kDecoderBase, ParamGroup::kLoraA});
  std::mt19937_64 rng(6);
  Parameter prefix = testing::MakeLeaf("h_p", RandomMatrix(3, 16, 1.0, &rng));
  const TokenSeq label = {3, vocab_.sc(), 1};
  TokenSeq input = {vocab_.bos()};
  input.insert(input.end(), label.begin(), label.end());
  std::vector<Parameter*> params = store_.Trainable();
  params.push_back(&prefix);
  auto report = CheckGradients(params, [&](Graph* g) {
    Var logits = dec_.Forward(g, {g->Param(&prefix)}, dec_.EmbedText(g, input),
                              {ParamGroup::kLoraA});
    return dec_.CeLoss(logits, label);
  }, 4);
  EXPECT_LT(report.worst_rel, 1e-3) << report.worst;
}

TEST_F(DecoderTest, MergeMatchesActiveAdapter) {
  dec_.AttachLora(&store_, ParamGroup::kLoraA, &rng_);
  RandomizeAdapter(ParamGroup::kLoraA, 0.2);
  std::mt19937_64 rng(7);
  std::vector<Matrix> prefixes, texts;
  std::vector<Matrix> before;
  for (int trial = 0; trial < 5; ++trial) {
    prefixes.push_back(RandomMatrix(4, 16, 1.0, &rng));
    texts.push_back(RandomMatrix(3, 16, 1.0, &rng));
    before.push_back(Logits(prefixes.back(), texts.back(),
                            {ParamGroup::kLoraA}));
  }
  EXPECT_FALSE(dec_.LoraMerged(ParamGroup::kLoraA));
  dec_.MergeLora(ParamGroup::kLoraA);
  EXPECT_TRUE(dec_.LoraMerged(ParamGroup::kLoraA));
  for (size_t i = 0; i < prefixes.size(); ++i) {
    Matrix after = Logits(prefixes[i], texts[i]);
    EXPECT_LE((after - before[i]).cwiseAbs().maxCoeff(), 1e-5);
  }
  EXPECT_THROW(dec_.MergeLora(ParamGroup::kLoraA), ConfigError);
  EXPECT_THROW(dec_.MergeLora(ParamGroup::kLoraB), ConfigError);
}

TEST(LinearMerge, IdentityAdapterAddsIdentity) {
  ParamStore store;
  Rng rng(1);
  Linear lin(&store, "lin", ParamGroup::kDecoderBase, 4, 4, false, &rng);
  Matrix w = lin.weight()->value;
  lin.AttachAdapter(&store, ParamGroup::kLoraA, 4, 4.0, &rng);
  LoraAdapter* a = lin.FindAdapter(ParamGroup::kLoraA);
  ASSERT_NE(a, nullptr);
  EXPECT_EQ(a->scale, 1.0);
  a->down->value.setIdentity();
  a->up->value.setIdentity();
  lin.MergeAdapter(ParamGroup::kLoraA);
  EXPECT_EQ(lin.weight()->value, w + Matrix::Identity(4, 4));

  ParamStore store2;
  Linear lin2(&store2, "lin", ParamGroup::kDecoderBase, 3, 5, true, &rng);
  Matrix w2 = lin2.weight()->value;
  lin2.AttachAdapter(&store2, ParamGroup::kLoraB, 2, 4.0, &rng);
  lin2.MergeAdapter(ParamGroup::kLoraB);
  EXPECT_EQ(lin2.weight()->value, w2);
}

TEST_F(DecoderTest, GenerateAgreesWithGraphForward) {
  dec_.AttachLora(&store_, ParamGroup::kLoraB, &rng_);
  RandomizeAdapter(ParamGroup::kLoraB, 0.3);
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    Matrix prefix = RandomMatrix(2 + trial, 16, 1.0, &rng);
    const AdapterSet active = trial % 2 ? AdapterSet{ParamGroup::kLoraB}
                                        : AdapterSet{};
    GenerateResult r = dec_.Generate({&prefix}, active, 8);
    EXPECT_EQ(r, dec_.Generate({&prefix}, active, 8));
    TokenSeq input = {vocab_.bos()};
    input.insert(input.end(), r.tokens.begin(), r.tokens.end());
    Matrix logits = Logits(prefix, dec_.EmbedTextValue(input), active);
    std::vector<TokenId> argmax;
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
      Eigen::Index best;
      logits.row(t).maxCoeff(&best);
      argmax.push_back(static_cast<TokenId>(best));
    }
    ASSERT_EQ(argmax.size(), r.tokens.size() + 1);
    EXPECT_EQ(TokenSeq(argmax.begin(), argmax.end() - 1), r.tokens);
    EXPECT_EQ(r.truncated, argmax.back() != vocab_.eos());
    if (r.truncated) EXPECT_EQ(r.tokens.size(), 8u);
  }
}

TEST_F(DecoderTest, MaxLenBoundsOutput) {
  Matrix prefix = Matrix::Random(3, 16);
  GenerateResult r = dec_.Generate({&prefix}, {}, 1);
  EXPECT_LE(r.tokens.size(), 1u);
  EXPECT_THROW(dec_.Generate({&prefix}, {}, 0), ConfigError);
  GenerateResult none = dec_.Generate({}, {}, 3);
  EXPECT_LE(none.tokens.size(), 3u);
}

TEST(DecoderTraining, OnlyLoraBMoves) {
  Vocabulary vocab(6);
  ParamStore store;
  Rng rng(9);
  Decoder dec(&store, vocab, TinyConfig(), &rng);
  dec.AttachLora(&store, ParamGroup::kLoraA, &rng);
  for (Parameter* p : store.Group(ParamGroup::kLoraA)) {
    p->value.setRandom();
  }
  dec.MergeLora(ParamGroup::kLoraA);
  dec.AttachLora(&store, ParamGroup::kLoraB, &rng);
  store.SetTrainable({ParamGroup::kLoraB});
  std::map<std::string, Matrix> before;
  for (const Parameter* p : store.All()) before[p->name] = p->value;

  Adam adam(AdamConfig{}, 3);
  Matrix prefix = Matrix::Random(3, 16);
  for (int step = 0; step < 3; ++step) {
    store.ZeroGrad();
    Graph g(true);
    Var logits = dec.Forward(&g, {g.Input(prefix)},
                             dec.EmbedText(&g, {vocab.bos(), 1, 2}),
                             {ParamGroup::kLoraB});
    g.Backward(dec.CeLoss(logits, {1, 2}));
    adam.Step(store.Trainable());
  }
  bool b_moved = false;
  for (const Parameter* p : store.All()) {
    const bool same = p->value == before[p->name];
    if (p->group == ParamGroup::kLoraB) {
      b_moved = b_moved || !same;
    } else {
      EXPECT_TRUE(same) << p->name;
    }
  }
  EXPECT_TRUE(b_moved);
}

TEST(DecoderTraining, LearnsToCopyItsPrompt) {
  Vocabulary vocab(4);
  ParamStore store;
  Rng rng(10);
  Decoder dec(&store, vocab, TinyConfig(), &rng);
  store.SetTrainable({ParamGroup::kDecoderBase});
  std::vector<TokenSeq> prompts;
  for (TokenId a = 1; a <= 4; ++a) {
    prompts.push_back({a});
    for (TokenId b = 1; b <= 4; ++b) prompts.push_back({a, b});
  }
  AdamConfig ac;
  ac.lr = 1e-2;
  const int steps = 400;
  Adam adam(ac, steps);
  Real mean_loss = 0.0;
  for (int step = 0; step < steps; ++step) {
    store.ZeroGrad();
    mean_loss = 0.0;
    for (const TokenSeq& p : prompts) {
      Graph g(true);
      TokenSeq input = {vocab.bos()};
      input.insert(input.end(), p.begin(), p.end());
      Var logits = dec.Forward(&g, {dec.EmbedText(&g, p)},
                               dec.EmbedText(&g, input), {});
      Var loss = dec.CeLoss(logits, p);
      mean_loss += loss.value()(0, 0) / prompts.size();
      g.Backward(ag::Scale(loss, 1.0 / prompts.size()));
    }
    adam.Step(store.Trainable());
    if (mean_loss < 0.02) break;
  }
  EXPECT_LT(mean_loss, 0.1);
  for (const TokenSeq& p : prompts) {
    Matrix e = dec.EmbedTextValue(p);
    GenerateResult r = dec.Generate({&e}, {}, 4);
    EXPECT_EQ(r.tokens, p);
    EXPECT_FALSE(r.truncated);
  }
}

}  // namespace
}  // namespace sopmt
