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

// Serialized multi-talker labels: talker transcripts joined in order of
// speaking start time with the speaker-change token between them.

#pragma once

#include <vector>

#include "sopmt/common.h"
#include "sopmt/vocab.h"

namespace sopmt {

struct SotLabel {
  TokenSeq tokens;
  int num_talkers = 0;
  // source_order[k] is the input talker index of serialized segment k.
  std::vector<int> source_order;
  bool operator==(const SotLabel&) const = default;
};

// Talker indices sorted by ascending offset. Throws on duplicate offsets.
std::vector<int> SpeakingOrder(const std::vector<int>& offsets);

SotLabel SerializeTranscripts(const std::vector<TokenSeq>& transcripts,
                              const std::vector<int>& offsets,
                              const Vocabulary& vocab);

// Splits on every speaker-change token; empty segments are kept.
std::vector<TokenSeq> SplitSerialized(const TokenSeq& tokens,
                                      const Vocabulary& vocab);

}  // namespace sopmt
