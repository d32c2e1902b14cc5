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

#include "sopmt/labels.h"

#include <algorithm>
#include <numeric>
#include <string>

namespace sopmt {

std::vector<int> SpeakingOrder(const std::vector<int>& offsets) {
  std::vector<int> order(offsets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&offsets](int a, int b) { return offsets[a] < offsets[b]; });
  for (size_t k = 1; k < order.size(); ++k) {
    if (offsets[order[k]] == offsets[order[k - 1]]) {
      throw DataError("talkers " + std::to_string(order[k - 1]) + " and " +
                      std::to_string(order[k]) + " share offset " +
                      std::to_string(offsets[order[k]]));
    }
  }
  return order;
}

SotLabel SerializeTranscripts(const std::vector<TokenSeq>& transcripts,
                              const std::vector<int>& offsets,
                              const Vocabulary& vocab) {
  if (transcripts.empty() || transcripts.size() != offsets.size()) {
    throw DataError("need one offset per transcript and at least one talker");
  }
  for (size_t s = 0; s < transcripts.size(); ++s) {
    if (transcripts[s].empty()) {
      throw DataError("transcript of talker " + std::to_string(s) +
                      " is empty");
    }
  }
  SotLabel label;
  label.num_talkers = static_cast<int>(transcripts.size());
  label.source_order = SpeakingOrder(offsets);
  for (size_t k = 0; k < label.source_order.size(); ++k) {
    if (k > 0) label.tokens.push_back(vocab.sc());
    const TokenSeq& seg = transcripts[label.source_order[k]];
    label.tokens.insert(label.tokens.end(), seg.begin(), seg.end());
  }
  return label;
}

std::vector<TokenSeq> SplitSerialized(const TokenSeq& tokens,
                                      const Vocabulary& vocab) {
  std::vector<TokenSeq> out(1);
  for (TokenId t : tokens) {
    if (t == vocab.sc()) {
      out.emplace_back();
    } else {
      out.back().push_back(t);
    }
  }
  return out;
}

}  // namespace sopmt
