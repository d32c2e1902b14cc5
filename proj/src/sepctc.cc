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

#include "sopmt/sepctc.h"

#include <algorithm>
#include <iomanip>
#include <limits>
#include <sstream>

#include "sopmt/labels.h"

namespace sopmt {

Separator::Separator(ParamStore* store, const SeparatorConfig& config,
                     const Vocabulary& vocab, Rng* rng)
    : config_(config),
      lstm_(store, "separator.lstm", ParamGroup::kSeparator, config.input_dim,
            config.lstm_hidden, rng),
      norm_(store, "separator.norm", ParamGroup::kSeparator,
            2 * config.lstm_hidden) {
  if (config.num_talkers < 1) throw ConfigError("separator needs >= 1 talker");
  for (int s = 0; s < config.num_talkers; ++s) {
    const std::string idx = std::to_string(s);
    heads_.emplace_back(store, "separator.head" + idx, ParamGroup::kSeparator,
                        2 * config.lstm_hidden, config.output_dim, true, rng);
    ctc_.emplace_back(store, "ctc.head" + idx, ParamGroup::kCtcHeads,
                      config.output_dim, vocab.ctc_size(), true, rng);
  }
}

std::vector<Var> Separator::Separate(Graph* g, const Var& h2,
                                     int num_talkers) const {
  if (num_talkers != config_.num_talkers) {
    throw ConfigError("separator has " + std::to_string(config_.num_talkers) +
                      " heads, asked for " + std::to_string(num_talkers));
  }
  Var shared = norm_.Forward(g, lstm_.Forward(g, h2));
  std::vector<Var> out;
  for (const Linear& head : heads_) {
    out.push_back(ag::Relu(head.Forward(g, shared)));
  }
  return out;
}

std::vector<Var> Separator::Logits(Graph* g,
                                   const std::vector<Var>& streams) const {
  if (streams.size() != ctc_.size()) {
    throw ConfigError("stream count does not match the CTC heads");
  }
  std::vector<Var> out;
  for (size_t s = 0; s < streams.size(); ++s) {
    out.push_back(ctc_[s].Forward(g, streams[s]));
  }
  return out;
}

std::vector<Matrix> Separator::RunLogits(const Matrix& h2) const {
  Graph g(false);
  std::vector<Matrix> out;
  for (const Var& v :
       Logits(&g, Separate(&g, g.Constant(h2), config_.num_talkers))) {
    out.push_back(v.value());
  }
  return out;
}

SerializedCtc SerializedCtcLoss(const std::vector<Var>& branch_logits,
                                const std::vector<TokenSeq>& targets) {
  if (branch_logits.size() != targets.size()) {
    throw ConfigError("serialized CTC: " +
                      std::to_string(branch_logits.size()) + " branches for " +
                      std::to_string(targets.size()) + " targets");
  }
  SerializedCtc out;
  std::vector<Var> terms;
  for (size_t s = 0; s < targets.size(); ++s) {
    CtcLossVar l = CtcLossOp(branch_logits[s], targets[s]);
    if (l.feasible) {
      terms.push_back(l.loss);
    } else {
      ++out.num_infeasible;
    }
  }
  for (const Var& t : terms) {
    out.loss = out.loss.valid() ? ag::Add(out.loss, t) : t;
  }
  return out;
}

Real SerializedCtcLossValue(const std::vector<Matrix>& branch_logits,
                            const std::vector<TokenSeq>& targets) {
  if (branch_logits.size() != targets.size()) {
    throw ConfigError("serialized CTC: branch/target count mismatch");
  }
  Real total = 0.0;
  for (size_t s = 0; s < targets.size(); ++s) {
    total += CtcLoss(branch_logits[s], targets[s], false).loss;
  }
  return total;
}

SopPrompt BuildSop(const std::vector<TokenSeq>& branch_sequences,
                   const Vocabulary& vocab, bool delimit) {
  SopPrompt p;
  p.branch_sequences = branch_sequences;
  for (size_t s = 0; s < branch_sequences.size(); ++s) {
    if (s > 0 && delimit) p.concatenated.push_back(vocab.sc());
    for (TokenId t : branch_sequences[s]) {
      if (t == kCtcBlank) throw DataError("blank token inside a SOP branch");
      p.concatenated.push_back(t);
    }
  }
  return p;
}

SopPrompt DecodeSop(const std::vector<Matrix>& branch_logits,
                    const Vocabulary& vocab, bool delimit) {
  std::vector<TokenSeq> branches;
  std::vector<std::vector<TokenId>> frames;
  for (const Matrix& logits : branch_logits) {
    frames.push_back(FrameArgmax(logits));
    branches.push_back(CollapseFrames(frames.back()));
  }
  SopPrompt p = BuildSop(branches, vocab, delimit);
  p.frame_labels = std::move(frames);
  return p;
}

Matrix EmbedSop(const SopPrompt& prompt, const Parameter& embedding_table) {
  const Matrix& table = embedding_table.value;
  Matrix out(static_cast<Eigen::Index>(prompt.concatenated.size()),
             table.cols());
  for (size_t i = 0; i < prompt.concatenated.size(); ++i) {
    TokenId t = prompt.concatenated[i];
    if (t < 0 || t >= table.rows()) {
      throw DataError("SOP token " + std::to_string(t) +
                      " outside the embedding table");
    }
    out.row(static_cast<Eigen::Index>(i)) = table.row(t);
  }
  return out;
}

std::vector<std::vector<TokenId>> ReferenceFrameLabels(
    const MixtureSample& sample, int num_frames, int frame_rate) {
  const std::vector<int> order = SpeakingOrder(sample.offsets);
  std::vector<std::vector<TokenId>> out(
      order.size(), std::vector<TokenId>(static_cast<size_t>(num_frames),
                                         kCtcBlank));
  for (size_t s = 0; s < order.size(); ++s) {
    for (const TokenSpan& span : sample.spans) {
      if (span.talker != order[s]) continue;
      // A downsampled frame takes the token covering its centre.
      for (int f = 0; f < num_frames; ++f) {
        int centre = f * frame_rate + frame_rate / 2;
        if (centre >= span.start && centre < span.end) out[s][f] = span.token;
      }
    }
  }
  return out;
}

std::string DumpAlignment(
    const std::vector<std::vector<TokenId>>& frame_labels,
    const Vocabulary& vocab,
    const std::vector<std::vector<TokenId>>* reference) {
  if (frame_labels.empty()) return "";
  const size_t frames = frame_labels[0].size();
  for (const auto& row : frame_labels) {
    if (row.size() != frames) {
      throw ShapeError("alignment branches have different frame counts");
    }
  }
  if (reference != nullptr) {
    if (reference->size() != frame_labels.size()) {
      throw ShapeError("reference alignment has a different branch count");
    }
    for (const auto& row : *reference) {
      if (row.size() != frames) {
        throw ShapeError("reference alignment has a different frame count");
      }
    }
  }
  std::vector<size_t> columns;
  for (size_t t = 0; t < frames; ++t) {
    bool any = false;
    for (const auto& row : frame_labels) any = any || row[t] != kCtcBlank;
    if (any) columns.push_back(t);
  }
  if (columns.empty()) return "";

  auto cell = [&vocab](TokenId t) {
    return t == kCtcBlank ? std::string(".") : vocab.Symbol(t);
  };
  size_t width = 1;
  for (size_t t : columns) width = std::max(width, std::to_string(t).size());
  for (const auto& row : frame_labels) {
    for (size_t t : columns) width = std::max(width, cell(row[t]).size() + 1);
  }

  std::ostringstream os;
  auto label = [&os](const std::string& name) {
    os << std::left << std::setw(7) << name;
  };
  label("frame");
  for (size_t t : columns) os << ' ' << std::right << std::setw(width) << t;
  os << '\n';
  for (size_t s = 0; s < frame_labels.size(); ++s) {
    label("hyp" + std::to_string(s + 1));
    for (size_t t : columns) {
      std::string c = cell(frame_labels[s][t]);
      if (reference != nullptr && frame_labels[s][t] != kCtcBlank &&
          frame_labels[s][t] != (*reference)[s][t]) {
        c += '*';
      }
      os << ' ' << std::right << std::setw(width) << c;
    }
    os << '\n';
    if (reference != nullptr) {
      label("ref" + std::to_string(s + 1));
      for (size_t t : columns) {
        os << ' ' << std::right << std::setw(width)
           << cell((*reference)[s][t]);
      }
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace sopmt
