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

#pragma once

#include <string>

#include "sopmt/common.h"

namespace sopmt {

// Token id layout: 0 is the CTC blank, 1..N are content symbols, followed by
// the speaker-change, bos, eos and pad specials. The CTC heads use ids
// [0, N] and the decoder uses the full range.
class Vocabulary {
 public:
  explicit Vocabulary(int num_content = 28);

  int num_content() const { return num_content_; }
  TokenId blank() const { return 0; }
  TokenId sc() const { return num_content_ + 1; }
  TokenId bos() const { return num_content_ + 2; }
  TokenId eos() const { return num_content_ + 3; }
  TokenId pad() const { return num_content_ + 4; }
  int size() const { return num_content_ + 5; }
  int ctc_size() const { return num_content_ + 1; }

  bool IsContent(TokenId t) const { return t >= 1 && t <= num_content_; }
  bool Contains(TokenId t) const { return t >= 0 && t < size(); }
  TokenSeq ContentTokens() const;

  std::string Symbol(TokenId t) const;
  std::string Render(const TokenSeq& tokens) const;

  bool operator==(const Vocabulary&) const = default;

 private:
  int num_content_;
};

}  // namespace sopmt
