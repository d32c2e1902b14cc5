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

#include "sopmt/vocab.h"

namespace sopmt {

Vocabulary::Vocabulary(int num_content) : num_content_(num_content) {
  if (num_content < 0) throw ConfigError("negative vocabulary size");
}

TokenSeq Vocabulary::ContentTokens() const {
  TokenSeq out;
  for (TokenId t = 1; t <= num_content_; ++t) out.push_back(t);
  return out;
}

std::string Vocabulary::Symbol(TokenId t) const {
  if (t == blank()) return "<b>";
  if (t == sc()) return "<sc>";
  if (t == bos()) return "<s>";
  if (t == eos()) return "</s>";
  if (t == pad()) return "<pad>";
  if (IsContent(t)) {
    int i = t - 1;
    if (i < 26) return std::string(1, static_cast<char>('a' + i));
    if (i < 52) return std::string(1, static_cast<char>('A' + i - 26));
    return "t" + std::to_string(t);
  }
  return "<unk:" + std::to_string(t) + ">";
}

std::string Vocabulary::Render(const TokenSeq& tokens) const {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += Symbol(tokens[i]);
  }
  return out;
}

}  // namespace sopmt
