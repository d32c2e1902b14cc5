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

#include "sopmt/cli.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "sopmt/config.h"
#include "sopmt/evalkit.h"
#include "sopmt/sepctc.h"
#include "sopmt/trainer.h"

namespace sopmt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Raised for command-line misuse that CLI11 cannot express.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::string config_path;
  std::optional<uint64_t> seed;
};

RunConfig ResolveConfig(const CommonOptions& o) {
  RunConfig c = LoadRunConfig(o.config_path);
  if (o.seed) c.seed = *o.seed;
  return c;
}

void AddCommon(CLI::App* cmd, CommonOptions* o) {
  cmd->add_option("--config", o->config_path, "JSON run configuration");
  cmd->add_option("--seed", o->seed,
                  "master seed (overrides the config and environment)");
}

std::string Percent(Real x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * x;
  return os.str();
}

// gen-data

struct GenDataOptions {
  CommonOptions common;
  std::string out_dir;
  bool force = false;
};

int GenData(const GenDataOptions& o, std::ostream& out) {
  const RunConfig cfg = ResolveConfig(o.common);
  const std::string hash = ConfigHash(cfg);
  const fs::path dir(o.out_dir);
  if (fs::exists(dir) && !fs::is_empty(dir) && !o.force) {
    throw UsageError("output directory " + o.out_dir +
                     " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << RunConfigToJson(cfg).dump(2) << "\n";
  std::ofstream stats(dir / "stats.tsv");
  stats << "talkers\tcondition\tsplit\tmixtures\tmean_frames\toverlap_ratio"
           "\tmean_tokens_per_talker\n";
  out << "config " << hash << ", seed " << cfg.seed << "\n";
  for (int s : cfg.mixsim.talkers) {
    const fs::path sdir = dir / ("s" + std::to_string(s));
    fs::remove_all(sdir);
    for (Condition cond : {Condition::kClean, Condition::kNoisy}) {
      for (const char* split : {"train", "dev", "eval"}) {
        Dataset ds = GenerateDataset(cfg.mixsim, cfg.seed, s, split, cond, hash);
        const fs::path path =
            sdir / ConditionName(cond) / (std::string(split) + ".jsonl");
        WriteManifest(ds, path.string());
        const DatasetStats st = ComputeStats(ds);
        stats << s << '\t' << ConditionName(cond) << '\t' << split << '\t'
              << st.num_samples << '\t' << st.mean_frames << '\t'
              << st.overlap_ratio << '\t' << st.mean_tokens_per_talker << "\n";
        out << path.string() << ": " << st.num_samples << " mixtures, "
            << std::fixed << std::setprecision(1) << st.mean_frames
            << " frames on average, overlap " << Percent(st.overlap_ratio)
            << "%\n";
      }
    }
  }
  return kExitOk;
}

// train

struct TrainOptions {
  CommonOptions common;
  std::string stage;
  std::string train_path;
  std::string dev_path;
  std::string from;
  std::string out_path;
  std::string log_path;
  std::string input_form;
  std::optional<int> steps;
};

int Train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  const Stage stage = StageFromName(o.stage);
  const bool chained = stage == Stage::kStage2 || stage == Stage::kStage3;
  if (chained && o.from.empty()) {
    throw UsageError("--stage " + o.stage +
                     " needs --from with the previous stage's checkpoint");
  }
  if (!chained && !o.from.empty()) {
    throw UsageError("--stage " + o.stage + " starts from scratch; drop --from");
  }
  if (!o.input_form.empty() && stage != Stage::kStage3) {
    throw UsageError("--input-form only applies to --stage 3");
  }
  RunConfig cfg = ResolveConfig(o.common);
  if (!o.input_form.empty()) cfg.train.stage3_input_form = o.input_form;
  if (o.steps) {
    switch (stage) {
      case Stage::kStage1: cfg.train.steps_stage1 = *o.steps; break;
      case Stage::kStage2: cfg.train.steps_stage2 = *o.steps; break;
      case Stage::kStage3: cfg.train.steps_stage3 = *o.steps; break;
      case Stage::kSingle: cfg.train.steps_single = *o.steps; break;
    }
  }
  cfg.train = TrainConfigFromJson(TrainConfigToJson(cfg.train));  // validate
  const std::string hash = ConfigHash(cfg);

  const Dataset train = ReadManifest(o.train_path);
  std::optional<Dataset> dev;
  if (!o.dev_path.empty()) dev = ReadManifest(o.dev_path);

  std::optional<TrainedModel> prev;
  ModelConfig model_config = cfg.model;
  model_config.num_talkers = train.meta.num_talkers;
  if (chained) {
    prev = LoadCheckpoint(o.from);
    model_config = prev->model->config();
    if (prev->config_hash != hash) {
      err << "warning: " << o.from << " was trained with config "
          << prev->config_hash << ", this run uses " << hash << "\n";
    }
  }

  const std::string log_path =
      o.log_path.empty() ? o.out_path + ".log.jsonl" : o.log_path;
  for (const fs::path& p : {fs::path(o.out_path), fs::path(log_path)}) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  }
  std::ofstream log(log_path);
  if (!log) throw DataError("cannot write training log " + log_path);
  Trainer trainer(model_config, cfg.train, cfg.seed, hash,
                  [&log](const json& j) { log << j.dump() << "\n"; });
  const Dataset* dev_ptr = dev ? &*dev : nullptr;
  TrainedModel tm;
  switch (stage) {
    case Stage::kStage1: tm = trainer.Stage1(train, dev_ptr); break;
    case Stage::kStage2:
      tm = trainer.Stage2(std::move(*prev), train, dev_ptr);
      break;
    case Stage::kStage3:
      tm = trainer.Stage3(std::move(*prev), train, dev_ptr);
      break;
    case Stage::kSingle: tm = trainer.SingleStage(train, dev_ptr); break;
  }
  SaveCheckpoint(tm, o.out_path);

  const StageSummary& s = trainer.last_summary();
  out << "stage " << StageName(stage) << ": " << s.steps << " steps, loss "
      << std::setprecision(4) << s.first_window_loss << " -> "
      << s.last_window_loss << " (first/last window means)";
  if (s.infeasible_branches > 0) {
    out << ", " << s.infeasible_branches << " infeasible CTC branches";
  }
  if (tm.metrics.back().contains("dev_branch_wer")) {
    out << ", dev branch WER "
        << Percent(tm.metrics.back()["dev_branch_wer"].get<Real>()) << "%";
  }
  out << "\ncheckpoint " << o.out_path << " (config " << hash << ")\n";
  return kExitOk;
}

// eval

struct EvalOptionsCli {
  CommonOptions common;
  std::string checkpoint;
  std::string data;
  std::string input_form;
  std::string out_path;
  std::string system;
  std::optional<int> limit;
  std::optional<int> max_len;
};

int Eval(const EvalOptionsCli& o, std::ostream& out) {
  const RunConfig cfg = ResolveConfig(o.common);
  TrainedModel tm = LoadCheckpoint(o.checkpoint);
  const Dataset data = ReadManifest(o.data);
  const InputForm form = InputFormFromName(
      o.input_form.empty() ? tm.train_input_form : o.input_form);
  if (form != InputForm::kSot && !tm.model->has_separator()) {
    throw DataError("input form " + std::string(InputFormName(form)) +
                    " needs a separator, but " + o.checkpoint +
                    " is a stage-" + StageName(tm.stage) +
                    " checkpoint without one; use --input-form sot");
  }
  if (data.meta.num_talkers != tm.model->config().num_talkers) {
    throw DataError(o.data + " has " + std::to_string(data.meta.num_talkers) +
                    "-talker mixtures, the model expects " +
                    std::to_string(tm.model->config().num_talkers));
  }
  EvalOptions opts;
  opts.form = form;
  opts.limit = o.limit.value_or(cfg.eval.limit);
  opts.max_len = o.max_len.value_or(cfg.eval.max_len);
  EvalResult r = Evaluate(*tm.model, data, opts);
  r.model_id = fs::path(o.checkpoint).stem().string();
  r.stage = StageName(tm.stage);
  r.config_hash = tm.config_hash;
  if (!o.system.empty()) {
    r.system = o.system;
  } else if (form == InputForm::kSopOnly) {
    r.system = kAblationLabel;
  } else {
    r.system = r.model_id;
  }
  fs::path out_path(o.out_path);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  WriteResults({r}, o.out_path);

  int truncated = 0;
  for (const auto& s : r.samples) truncated += s.truncated ? 1 : 0;
  out << r.system << " [" << r.input_form << "] on " << r.dataset_id << ": WER "
      << Percent(r.wer()) << "% (" << r.errors() << "/" << r.ref_length()
      << "), permutation-min WER " << Percent(r.perm_wer()) << "%, "
      << r.samples.size() << " mixtures";
  if (truncated > 0) out << ", " << truncated << " truncated";
  out << "\n";
  return kExitOk;
}

// dump-alignments

// Input frames per separator frame (two stride-2 convolutions).
constexpr int kAlignmentFrameRate = 4;

struct DumpOptions {
  std::string checkpoint;
  std::string data;
  int n = 5;
  std::string out_dir;
};

int DumpAlignments(const DumpOptions& o, std::ostream& out, std::ostream& err) {
  if (o.n < 1) throw UsageError("--n must be >= 1");
  TrainedModel tm = LoadCheckpoint(o.checkpoint);
  const Model& model = *tm.model;
  if (!model.has_separator()) {
    throw DataError(o.checkpoint + " has no separator; alignment dumps need "
                    "a stage-2, stage-3 or single-stage checkpoint");
  }
  const Dataset data = ReadManifest(o.data);
  if (data.meta.num_talkers != model.config().num_talkers) {
    throw DataError(o.data + " does not match the model's talker count");
  }
  size_t n = static_cast<size_t>(o.n);
  if (n > data.samples.size()) {
    err << "warning: --n " << o.n << " exceeds the " << data.samples.size()
        << " mixtures in " << o.data << "; dumping all of them\n";
    n = data.samples.size();
  }
  fs::create_directories(o.out_dir);
  const Vocabulary& vocab = model.vocab();
  for (size_t i = 0; i < n; ++i) {
    const MixtureSample& s = data.samples[i];
    const EncodingBundle enc = model.encoder().Run(s.features);
    const SopPrompt sop =
        DecodeSop(model.separator().RunLogits(enc.h2), vocab,
                  model.config().sop_delimiter);
    const int frames = static_cast<int>(enc.h2.rows());
    const auto ref = ReferenceFrameLabels(s, frames, kAlignmentFrameRate);
    const std::string grid = DumpAlignment(sop.frame_labels, vocab, &ref);
    const SotLabel label =
        SerializeTranscripts(s.talker_transcripts, s.offsets, vocab);
    const fs::path path = fs::path(o.out_dir) / (s.sample_id + ".txt");
    std::ofstream f(path);
    f << "# sample " << s.sample_id << "  checkpoint " << o.checkpoint
      << "  config " << tm.config_hash << "\n";
    f << "# ref: " << vocab.Render(label.tokens) << "\n";
    f << "# sop: " << vocab.Render(sop.concatenated) << "\n";
    if (grid.empty()) {
      f << "(all frames blank)\n";
    } else {
      f << grid;
    }
    if (!f) throw DataError("cannot write " + path.string());
  }
  out << "wrote " << n << " alignment grid" << (n == 1 ? "" : "s") << " to "
      << o.out_dir << "\n";
  return kExitOk;
}

// report

struct ReportOptionsCli {
  CommonOptions common;
  std::vector<std::string> results;
  std::string out_prefix;
  bool allow_mixed = false;
  std::optional<int> resamples;
};

int Report(const ReportOptionsCli& o, std::ostream& out) {
  const RunConfig cfg = ResolveConfig(o.common);
  std::vector<EvalResult> all;
  for (const auto& path : o.results) {
    for (EvalResult& r : ReadResults(path)) all.push_back(std::move(r));
  }
  std::map<std::string, std::string> dataset_of_column;
  std::set<std::string> hashes;
  for (const EvalResult& r : all) {
    hashes.insert(r.config_hash);
    const std::string col = r.condition + " " + r.split;
    auto [it, inserted] = dataset_of_column.emplace(col, r.dataset_id);
    if (!inserted && it->second != r.dataset_id && !o.allow_mixed) {
      throw DataError("results for '" + col + "' come from different datasets (" +
                      it->second + ", " + r.dataset_id +
                      "); pass --allow-mixed to tabulate them anyway");
    }
  }
  ReportOptions ro;
  ro.num_resamples = o.resamples.value_or(cfg.eval.bootstrap_resamples);
  ro.seed = cfg.eval.bootstrap_seed;
  ro.alpha = cfg.eval.significance;
  ReportFiles files = BuildReport(all, ro);
  std::string footer = "config:";
  for (const auto& h : hashes) footer += " " + h;
  files.text += footer + "\n";

  fs::path prefix(o.out_prefix);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  std::ofstream(o.out_prefix + ".txt") << files.text;
  std::ofstream(o.out_prefix + ".tsv") << files.tsv;
  out << files.text;
  return kExitOk;
}

}  // namespace

int RunCli(const std::vector<std::string>& args, std::ostream& out,
           std::ostream& err) {
  CLI::App app{"Serialized output prompting for multi-talker recognition"};
  app.name("sopmt");
  app.require_subcommand(1);

  GenDataOptions gen;
  CLI::App* gen_cmd = app.add_subcommand(
      "gen-data", "Generate train/dev/eval mixtures for every condition");
  AddCommon(gen_cmd, &gen.common);
  gen_cmd->add_option("--out", gen.out_dir, "output directory")->required();
  gen_cmd->add_flag("--force", gen.force, "overwrite a non-empty directory");

  TrainOptions train;
  CLI::App* train_cmd = app.add_subcommand("train", "Run one training stage");
  AddCommon(train_cmd, &train.common);
  train_cmd->add_option("--stage", train.stage, "1, 2, 3 or single")
      ->required()
      ->check(CLI::IsMember({"1", "2", "3", "single"}));
  train_cmd->add_option("--train", train.train_path, "training manifest")
      ->required();
  train_cmd->add_option("--dev", train.dev_path,
                        "dev manifest for the branch WER monitor");
  train_cmd->add_option("--from", train.from, "checkpoint of the previous stage");
  train_cmd->add_option("--out", train.out_path, "checkpoint to write")
      ->required();
  train_cmd->add_option("--log", train.log_path,
                        "JSON-lines training log (default <out>.log.jsonl)");
  train_cmd->add_option("--input-form", train.input_form,
                        "stage-3 decoder input: sop or sop-only")
      ->check(CLI::IsMember({"sop", "sop-only"}));
  train_cmd->add_option("--steps", train.steps, "override the stage's steps");

  EvalOptionsCli ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Decode and score a split");
  AddCommon(eval_cmd, &ev.common);
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--data", ev.data, "manifest to score")->required();
  eval_cmd->add_option("--input-form", ev.input_form,
                       "sot, sop or sop-only (default: as trained)")
      ->check(CLI::IsMember({"sot", "sop", "sop-only"}));
  eval_cmd->add_option("--out", ev.out_path, "results file (JSON lines)")
      ->required();
  eval_cmd->add_option("--system", ev.system, "row label in reports");
  eval_cmd->add_option("--limit", ev.limit, "score only the first N mixtures");
  eval_cmd->add_option("--max-len", ev.max_len, "generation length cap");

  DumpOptions dump;
  CLI::App* dump_cmd = app.add_subcommand(
      "dump-alignments", "Write per-branch CTC alignment grids");
  dump_cmd->add_option("--checkpoint", dump.checkpoint)->required();
  dump_cmd->add_option("--data", dump.data, "manifest")->required();
  dump_cmd->add_option("--n", dump.n, "number of mixtures");
  dump_cmd->add_option("--out", dump.out_dir, "output directory")->required();

  ReportOptionsCli rep;
  CLI::App* report_cmd =
      app.add_subcommand("report", "Tabulate results with significance marks");
  AddCommon(report_cmd, &rep.common);
  report_cmd->add_option("--results", rep.results, "results files")
      ->required()
      ->expected(1, -1);
  report_cmd->add_option("--out", rep.out_prefix,
                         "output prefix for .txt and .tsv")
      ->required();
  report_cmd->add_flag("--allow-mixed", rep.allow_mixed,
                       "allow different datasets in one column");
  report_cmd->add_option("--resamples", rep.resamples, "bootstrap resamples");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return GenData(gen, out);
    if (*train_cmd) return Train(train, out, err);
    if (*eval_cmd) return Eval(ev, out);
    if (*dump_cmd) return DumpAlignments(dump, out, err);
    if (*report_cmd) return Report(rep, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace sopmt
