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

// Scoring: edit distance, serialized and permutation-minimum WER, paired
// bootstrap significance, model evaluation and result tables.

#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "sopmt/labels.h"
#include "sopmt/mixsim.h"
#include "sopmt/model.h"

namespace sopmt {

struct EditCounts {
  int sub = 0;
  int del = 0;
  int ins = 0;
  int errors() const { return sub + del + ins; }
  bool operator==(const EditCounts&) const = default;
};

// Unit-cost Levenshtein alignment; among optimal traces, substitutions are
// preferred over deletions over insertions.
EditCounts EditDistance(const TokenSeq& ref, const TokenSeq& hyp);

Real SerializedWer(const SotLabel& ref, const TokenSeq& hyp);

struct PermutationScore {
  int errors = 0;
  int ref_length = 0;
  std::vector<int> assignment;  // assignment[talker] = hypothesis segment
  Real wer() const {
    return ref_length == 0 ? 0.0 : static_cast<Real>(errors) / ref_length;
  }
};

// Segments beyond the talker count are merged into the last one; missing
// segments count as empty.
std::vector<TokenSeq> NormalizeSegments(std::vector<TokenSeq> segments,
                                        size_t num_talkers);
PermutationScore PermutationMinWer(const std::vector<TokenSeq>& refs,
                                   const std::vector<TokenSeq>& hyp_segments);

struct SampleErrors {
  std::string sample_id;
  int errors = 0;
  int ref_length = 0;
};

// Two-sided paired bootstrap on the difference of aggregate WER (b - a).
// Samples are paired by id; the input order does not matter.
Real PairedBootstrapPValue(std::vector<SampleErrors> a,
                           std::vector<SampleErrors> b, int num_resamples,
                           uint64_t seed);

struct SampleResult {
  std::string sample_id;
  TokenSeq reference;
  TokenSeq hypothesis;
  TokenSeq prompt;
  EditCounts edits;
  int perm_errors = 0;
  int perm_ref_length = 0;
  bool truncated = false;
};

struct EvalResult {
  std::string model_id;
  std::string system;  // row label
  std::string stage;
  std::string input_form;
  std::string dataset_id;
  std::string split;
  std::string condition;
  std::string config_hash;
  std::vector<SampleResult> samples;

  int errors() const;
  int ref_length() const;
  Real wer() const;
  Real perm_wer() const;
  std::vector<SampleErrors> sample_errors() const;
};

struct EvalOptions {
  InputForm form = InputForm::kSot;
  int max_len = 0;  // 0: derived from the talker count
  int limit = 0;    // 0: all samples
};

EvalResult Evaluate(const Model& model, const Dataset& dataset,
                    const EvalOptions& options);
// Decoding with the speech encoding removed from the decoder input.
EvalResult RunAblationNoSpeech(const Model& model, const Dataset& dataset,
                               int limit = 0);
extern const char kAblationLabel[];

void WriteResults(const std::vector<EvalResult>& results,
                  const std::string& path);
std::vector<EvalResult> ReadResults(const std::string& path);

struct ReportOptions {
  int num_resamples = 10000;
  uint64_t seed = 1;
  Real alpha = 0.05;
};

struct ReportFiles {
  std::string text;  // aligned table
  std::string tsv;
};

// One row per system, one column per (condition, split). The first row is
// the baseline; a cell whose system is significantly better than the
// baseline on that dataset is marked with '*', and the baseline cell is
// marked when it is the significantly better one.
ReportFiles BuildReport(const std::vector<EvalResult>& results,
                        const ReportOptions& options);

}  // namespace sopmt
