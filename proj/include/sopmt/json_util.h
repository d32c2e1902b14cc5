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

#include <set>
#include <string>

#include "json.hpp"
#include "sopmt/common.h"

namespace sopmt {

// Reads optional fields of a JSON object and rejects keys nobody asked for.
class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path)
      : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool Has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::json& Child(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  void Read(const std::string& key, T* out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      *out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  void Finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) {
        throw ConfigError("unknown config key '" + path_ + "." + key + "'");
      }
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace sopmt
