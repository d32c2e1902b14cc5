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

#include "sopmt/evalkit.h"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace sopmt {

using nlohmann::json;

EditCounts EditDistance(const TokenSeq& ref, const TokenSeq& hyp) {
  const size_t n = ref.size();
  const size_t m = hyp.size();
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1));
  for (size_t i = 0; i <= n; ++i) d[i][0] = static_cast<int>(i);
  for (size_t j = 0; j <= m; ++j) d[0][j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      int diag = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      d[i][j] = std::min({diag, d[i - 1][j] + 1, d[i][j - 1] + 1});
    }
  }
  EditCounts c;
  size_t i = n;
  size_t j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = ref[i - 1] == hyp[j - 1];
      if (d[i][j] == d[i - 1][j - 1] + (same ? 0 : 1)) {
        if (!same) ++c.sub;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      ++c.del;
      --i;
    } else {
      ++c.ins;
      --j;
    }
  }
  return c;
}

Real SerializedWer(const SotLabel& ref, const TokenSeq& hyp) {
  if (ref.tokens.empty()) throw DataError("WER of an empty reference");
  return static_cast<Real>(EditDistance(ref.tokens, hyp).errors()) /
         static_cast<Real>(ref.tokens.size());
}

std::vector<TokenSeq> NormalizeSegments(std::vector<TokenSeq> segments,
                                        size_t num_talkers) {
  if (num_talkers == 0) return {};
  while (segments.size() > num_talkers) {
    TokenSeq extra = std::move(segments.back());
    segments.pop_back();
    segments.back().insert(segments.back().end(), extra.begin(), extra.end());
  }
  segments.resize(num_talkers);
  return segments;
}

PermutationScore PermutationMinWer(const std::vector<TokenSeq>& refs,
                                   const std::vector<TokenSeq>& hyp_segments) {
  PermutationScore best;
  for (const auto& r : refs) best.ref_length += static_cast<int>(r.size());
  const std::vector<TokenSeq> hyp = NormalizeSegments(hyp_segments,
                                                      refs.size());
  std::vector<int> perm(refs.size());
  std::iota(perm.begin(), perm.end(), 0);
  best.errors = -1;
  do {
    int cost = 0;
    for (size_t s = 0; s < refs.size(); ++s) {
      cost += EditDistance(refs[s], hyp[perm[s]]).errors();
    }
    if (best.errors < 0 || cost < best.errors) {
      best.errors = cost;
      best.assignment = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  if (best.errors < 0) best.errors = 0;
  return best;
}

namespace {

Real AggregateWer(const std::vector<int>& errs, const std::vector<int>& lens,
                  const std::vector<size_t>& idx) {
  long long e = 0;
  long long n = 0;
  for (size_t i : idx) {
    e += errs[i];
    n += lens[i];
  }
  return n == 0 ? 0.0 : static_cast<Real>(e) / static_cast<Real>(n);
}

}  // namespace

Real PairedBootstrapPValue(std::vector<SampleErrors> a,
                           std::vector<SampleErrors> b, int num_resamples,
                           uint64_t seed) {
  if (num_resamples < 1) throw ConfigError("need at least one resample");
  auto by_id = [](const SampleErrors& x, const SampleErrors& y) {
    return x.sample_id < y.sample_id;
  };
  std::sort(a.begin(), a.end(), by_id);
  std::sort(b.begin(), b.end(), by_id);
  if (a.size() != b.size() || a.empty()) {
    throw DataError("bootstrap: systems scored on different sample sets");
  }
  const size_t n = a.size();
  std::vector<int> ea(n), eb(n), len(n);
  for (size_t i = 0; i < n; ++i) {
    if (a[i].sample_id != b[i].sample_id ||
        a[i].ref_length != b[i].ref_length) {
      throw DataError("bootstrap: unpaired sample '" + a[i].sample_id + "'");
    }
    ea[i] = a[i].errors;
    eb[i] = b[i].errors;
    len[i] = a[i].ref_length;
  }
  std::vector<size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  const Real delta = AggregateWer(eb, len, all) - AggregateWer(ea, len, all);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, n - 1);
  std::vector<size_t> idx(n);
  int extreme = 0;
  for (int r = 0; r < num_resamples; ++r) {
    for (auto& i : idx) i = pick(rng);
    const Real d = AggregateWer(eb, len, idx) - AggregateWer(ea, len, idx);
    if (std::abs(d - delta) >= std::abs(delta) - 1e-12) ++extreme;
  }
  return static_cast<Real>(extreme + 1) / static_cast<Real>(num_resamples + 1);
}

int EvalResult::errors() const {
  int e = 0;
  for (const auto& s : samples) e += s.edits.errors();
  return e;
}

int EvalResult::ref_length() const {
  int n = 0;
  for (const auto& s : samples) n += static_cast<int>(s.reference.size());
  return n;
}

Real EvalResult::wer() const {
  const int n = ref_length();
  return n == 0 ? 0.0 : static_cast<Real>(errors()) / n;
}

Real EvalResult::perm_wer() const {
  long long e = 0;
  long long n = 0;
  for (const auto& s : samples) {
    e += s.perm_errors;
    n += s.perm_ref_length;
  }
  return n == 0 ? 0.0 : static_cast<Real>(e) / static_cast<Real>(n);
}

std::vector<SampleErrors> EvalResult::sample_errors() const {
  std::vector<SampleErrors> out;
  for (const auto& s : samples) {
    out.push_back({s.sample_id, s.edits.errors(),
                   static_cast<int>(s.reference.size())});
  }
  return out;
}

const char kAblationLabel[] = "- Mixed speech encoding";

EvalResult Evaluate(const Model& model, const Dataset& dataset,
                    const EvalOptions& options) {
  const Vocabulary& vocab = model.vocab();
  if (!(dataset.meta.vocab == vocab)) {
    throw DataError("dataset vocabulary does not match the model");
  }
  EvalResult result;
  result.input_form = InputFormName(options.form);
  result.dataset_id = dataset.meta.dataset_id;
  result.split = dataset.meta.split;
  result.condition = ConditionName(dataset.meta.condition);
  const int max_len = options.max_len > 0
                          ? options.max_len
                          : 2 * dataset.meta.num_talkers * 13 + 8;
  size_t count = dataset.samples.size();
  if (options.limit > 0) {
    count = std::min(count, static_cast<size_t>(options.limit));
  }
  for (size_t i = 0; i < count; ++i) {
    const MixtureSample& sample = dataset.samples[i];
    const SotLabel ref = SerializeTranscripts(sample.talker_transcripts,
                                              sample.offsets, vocab);
    DecodeInputs in = model.PrepareInputs(sample.features, options.form);
    GenerateResult gen = model.Transcribe(in, options.form, max_len);
    SampleResult r;
    r.sample_id = sample.sample_id;
    r.reference = ref.tokens;
    r.hypothesis = gen.tokens;
    r.prompt = in.sop.concatenated;
    r.truncated = gen.truncated;
    r.edits = EditDistance(ref.tokens, gen.tokens);
    std::vector<TokenSeq> refs;
    for (int k : ref.source_order) refs.push_back(sample.talker_transcripts[k]);
    PermutationScore ps =
        PermutationMinWer(refs, SplitSerialized(gen.tokens, vocab));
    r.perm_errors = ps.errors;
    r.perm_ref_length = ps.ref_length;
    result.samples.push_back(std::move(r));
  }
  return result;
}

EvalResult RunAblationNoSpeech(const Model& model, const Dataset& dataset,
                               int limit) {
  EvalOptions opts;
  opts.form = InputForm::kSopOnly;
  opts.limit = limit;
  EvalResult r = Evaluate(model, dataset, opts);
  r.system = kAblationLabel;
  return r;
}

void WriteResults(const std::vector<EvalResult>& results,
                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write results file " + path);
  for (const EvalResult& r : results) {
    for (const SampleResult& s : r.samples) {
      json rec = {
          {"model_id", r.model_id},
          {"system", r.system},
          {"stage", r.stage},
          {"input_form", r.input_form},
          {"dataset_id", r.dataset_id},
          {"split", r.split},
          {"condition", r.condition},
          {"config_hash", r.config_hash},
          {"sample_id", s.sample_id},
          {"ref", s.reference},
          {"hyp", s.hypothesis},
          {"prompt", s.prompt},
          {"sub", s.edits.sub},
          {"del", s.edits.del},
          {"ins", s.edits.ins},
          {"perm_errors", s.perm_errors},
          {"perm_ref_length", s.perm_ref_length},
          {"truncated", s.truncated},
      };
      out << rec.dump() << "\n";
    }
  }
  if (!out) throw DataError("error writing " + path);
}

std::vector<EvalResult> ReadResults(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open results file " + path);
  std::vector<EvalResult> out;
  std::map<std::string, size_t> index;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      EvalResult key;
      key.model_id = j.at("model_id").get<std::string>();
      key.system = j.at("system").get<std::string>();
      key.stage = j.at("stage").get<std::string>();
      key.input_form = j.at("input_form").get<std::string>();
      key.dataset_id = j.at("dataset_id").get<std::string>();
      key.split = j.at("split").get<std::string>();
      key.condition = j.at("condition").get<std::string>();
      key.config_hash = j.at("config_hash").get<std::string>();
      const std::string k = key.model_id + "\x1f" + key.system + "\x1f" +
                            key.input_form + "\x1f" + key.dataset_id;
      auto it = index.find(k);
      if (it == index.end()) {
        it = index.emplace(k, out.size()).first;
        out.push_back(std::move(key));
      }
      SampleResult s;
      s.sample_id = j.at("sample_id").get<std::string>();
      s.reference = j.at("ref").get<TokenSeq>();
      s.hypothesis = j.at("hyp").get<TokenSeq>();
      s.prompt = j.at("prompt").get<TokenSeq>();
      s.edits.sub = j.at("sub").get<int>();
      s.edits.del = j.at("del").get<int>();
      s.edits.ins = j.at("ins").get<int>();
      s.perm_errors = j.at("perm_errors").get<int>();
      s.perm_ref_length = j.at("perm_ref_length").get<int>();
      s.truncated = j.at("truncated").get<bool>();
      out[it->second].samples.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) +
                      ": malformed result record: " + e.what());
    }
  }
  return out;
}

namespace {

std::string RowLabel(const EvalResult& r) {
  return r.system.empty() ? r.model_id : r.system;
}

std::string FormatWer(Real wer) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * wer);
  return buf;
}

}  // namespace

ReportFiles BuildReport(const std::vector<EvalResult>& results,
                        const ReportOptions& options) {
  struct Row {
    std::string label, stage, form;
    std::map<std::string, const EvalResult*> cells;
  };
  std::vector<Row> rows;
  std::vector<std::string> columns;
  for (const EvalResult& r : results) {
    const std::string col = r.condition + " " + r.split;
    if (std::find(columns.begin(), columns.end(), col) == columns.end()) {
      columns.push_back(col);
    }
    const std::string label = RowLabel(r);
    auto it = std::find_if(rows.begin(), rows.end(), [&](const Row& row) {
      return row.label == label && row.stage == r.stage &&
             row.form == r.input_form;
    });
    if (it == rows.end()) {
      rows.push_back({label, r.stage, r.input_form, {}});
      it = rows.end() - 1;
    }
    it->cells[col] = &r;
  }

  // marks[row][col] is set when that cell is the significantly better one.
  std::vector<std::map<std::string, bool>> marks(rows.size());
  for (size_t i = 1; i < rows.size(); ++i) {
    for (const auto& col : columns) {
      auto a = rows[0].cells.find(col);
      auto b = rows[i].cells.find(col);
      if (a == rows[0].cells.end() || b == rows[i].cells.end()) continue;
      if (a->second->dataset_id != b->second->dataset_id) continue;
      Real p = PairedBootstrapPValue(a->second->sample_errors(),
                                     b->second->sample_errors(),
                                     options.num_resamples, options.seed);
      if (p >= options.alpha) continue;
      if (b->second->wer() < a->second->wer()) {
        marks[i][col] = true;
      } else if (a->second->wer() < b->second->wer()) {
        marks[0][col] = true;
      }
    }
  }

  std::vector<std::string> header = {"stage", "system", "input"};
  for (const auto& c : columns) header.push_back(c);
  std::vector<std::vector<std::string>> table = {header};
  for (size_t i = 0; i < rows.size(); ++i) {
    std::vector<std::string> line = {rows[i].stage, rows[i].label,
                                     rows[i].form};
    for (const auto& col : columns) {
      auto it = rows[i].cells.find(col);
      if (it == rows[i].cells.end()) {
        line.push_back("-");
      } else {
        line.push_back(FormatWer(it->second->wer()) +
                       (marks[i].count(col) ? "*" : ""));
      }
    }
    table.push_back(line);
  }

  std::vector<size_t> width(header.size(), 0);
  for (const auto& line : table) {
    for (size_t c = 0; c < line.size(); ++c) {
      width[c] = std::max(width[c], line[c].size());
    }
  }
  ReportFiles out;
  std::ostringstream text;
  std::ostringstream tsv;
  for (const auto& line : table) {
    for (size_t c = 0; c < line.size(); ++c) {
      if (c) {
        text << "  ";
        tsv << '\t';
      }
      text << line[c] << std::string(width[c] - line[c].size(), ' ');
      tsv << line[c];
    }
    text << '\n';
    tsv << '\n';
  }
  text << "WER in %; * marks a significant difference (paired bootstrap, p < "
       << options.alpha << ") in favour of the marked system.\n";
  out.text = text.str();
  out.tsv = tsv.str();
  return out;
}

}  // namespace sopmt
