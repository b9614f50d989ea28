// Copyright 2026 The TaCA Lab Authors.
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

#include "taca_cli/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "taca/binary_io.hpp"
#include "taca/compat.hpp"
#include "taca/data.hpp"
#include "taca/errors.hpp"
#include "taca/trainer.hpp"
#include "taca/verify.hpp"
#include "taca_cli/run_config.hpp"

namespace taca::cli {

namespace {

using nlohmann::json;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

RunConfig load_config(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

std::string file_digest(const std::string& path) { return hex64(fnv1a64(read_file(path))); }

void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json metadata_of(const Checkpoint& c) {
  try {
    return json::parse(c.metadata);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
}

std::string meta_string(const json& meta, const char* key, const std::string& file) {
  auto it = meta.find(key);
  if (it == meta.end() || !it->is_string()) {
    throw FormatError(file + ": checkpoint metadata has no string '" + key + "'");
  }
  return it->get<std::string>();
}

std::string weights_digest(const ClipModel& model) {
  return tensor_digest(clip_checkpoint(model).tensors);
}

struct LoadedClip {
  Checkpoint checkpoint;
  ClipModel model;
  json meta;
};

LoadedClip load_clip(const std::string& path, std::optional<Role> expected) {
  LoadedClip l;
  l.checkpoint = load_checkpoint(path);
  l.model = clip_from_checkpoint(l.checkpoint);
  l.meta = metadata_of(l.checkpoint);
  if (expected) {
    const std::string role = meta_string(l.meta, "role", path);
    if (role != role_name(*expected)) {
      throw ConfigError(path + " was pretrained as the " + role + " model, expected " +
                        std::string(role_name(*expected)));
    }
  }
  return l;
}

void require_dim(const char* what, std::size_t checkpoint_dim, std::size_t config_dim) {
  if (checkpoint_dim != config_dim) {
    throw DimensionError(std::string(what) + ": checkpoint has " + std::to_string(checkpoint_dim) +
                         ", config expects " + std::to_string(config_dim));
  }
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out_path, std::optional<std::size_t> n,
                 std::optional<std::uint64_t> seed, const std::string& config_path,
                 std::ostream& out) {
  const RunConfig cfg = load_config(config_path);
  const std::size_t count = n.value_or(cfg.data_n);
  if (count == 0) throw ConfigError("--n must be positive");
  const Dataset d = generate_dataset(count, seed.value_or(cfg.data_seed), cfg.image_spec);
  save_dataset(d, out_path);
  out << "wrote " << d.samples.size() << " samples to " << out_path << "\n";
  return kExitOk;
}

int cmd_pretrain(const std::string& role_text, const std::string& data_path,
                 const std::string& out_path, const std::string& config_path,
                 const std::string& log_path, std::ostream& out) {
  const Role role = parse_role(role_text);
  const RunConfig cfg = load_config(config_path);
  const Dataset d = load_dataset(data_path);
  const TrainConfig train = cfg.pretrain(role);
  std::vector<ClipStepLog> log;
  const ClipModel model = pretrain_clip(cfg.visual(role), cfg.text(role), d, train, &log);

  const json extra = {{"role", std::string(role_name(role))},
                      {"config_digest", config_digest(cfg)},
                      {"config", json::parse(to_json(cfg))},
                      {"data_digest", file_digest(data_path)},
                      {"steps", train.steps},
                      {"seed", train.seed}};
  save_checkpoint(clip_checkpoint(model, extra.dump()), out_path);
  if (!log_path.empty()) {
    std::string csv = "step,loss\n";
    for (const auto& row : log) csv += std::to_string(row.step) + "," + real(row.loss) + "\n";
    write_text(log_path, csv);
  }
  out << "pretrained " << role_name(role) << " model for " << train.steps << " steps";
  if (!log.empty()) out << ", final loss " << log.back().loss;
  out << "\n";
  return kExitOk;
}

int cmd_train_taca(const std::string& old_path, const std::string& new_path,
                   const std::string& data_path, const std::string& out_path,
                   const std::string& config_path, const std::string& log_path,
                   std::ostream& out) {
  const RunConfig cfg = load_config(config_path);
  const LoadedClip old_clip = load_clip(old_path, Role::kOld);
  const LoadedClip new_clip = load_clip(new_path, Role::kNew);
  const ClipModel& old_model = old_clip.model;
  const VisualEncoderWeights& new_visual = new_clip.model.visual;

  if (old_model.visual.config.embed_dim != old_model.text.config.embed_dim) {
    throw DimensionError("old checkpoint: visual dim " +
                         std::to_string(old_model.visual.config.embed_dim) + " != text dim " +
                         std::to_string(old_model.text.config.embed_dim));
  }
  require_dim("old embedding dim", old_model.visual.config.embed_dim, cfg.old_encoder.embed_dim);
  require_dim("new embedding dim", new_visual.config.embed_dim, cfg.new_encoder.embed_dim);
  require_dim("new encoder width", new_visual.config.width, cfg.new_encoder.width);
  require_dim("new encoder layers", new_visual.config.layers, cfg.new_encoder.layers);

  const Dataset d = load_dataset(data_path);
  const std::string old_before = weights_digest(old_model);
  const std::string new_before = tensor_digest(new_clip.checkpoint.tensors);
  std::vector<TacaStepLog> log;
  const TrainConfig train = cfg.taca_training();
  const TacaAttachment att = train_taca(old_model, new_visual, cfg.taca, d, train, &log);
  const std::string old_after = weights_digest(old_model);
  const std::string new_after = weights_digest(new_clip.model);
  if (old_before != old_after || new_before != new_after) {
    throw ContractError("freezing audit failed: a backbone tensor changed during training");
  }

  const std::size_t old_dim = old_model.visual.config.embed_dim;
  std::size_t trained_elements = 0;
  for (const auto& [name, t] : att.named_tensors()) trained_elements += t.numel();
  const ParamCount expected = count_trainable(cfg.taca, new_visual.config, old_dim);
  if (trained_elements != expected.exact) {
    throw ContractError("trainable set has " + std::to_string(trained_elements) +
                        " elements, the attachment accounts for " +
                        std::to_string(expected.exact));
  }

  const json extra = {
      {"config_digest", config_digest(cfg)},
      {"config", json::parse(to_json(cfg))},
      {"old_digest", tensor_digest(old_clip.checkpoint.tensors)},
      {"new_digest", new_before},
      {"old_config_digest", meta_string(old_clip.meta, "config_digest", old_path)},
      {"new_config_digest", meta_string(new_clip.meta, "config_digest", new_path)},
      {"data_digest", file_digest(data_path)},
      {"freeze_audit",
       {{"old_before", old_before}, {"old_after", old_after},
        {"new_before", new_before}, {"new_after", new_after}, {"frozen", true}}},
      {"trainable", {{"elements", trained_elements}, {"formula", expected.formula}}},
      {"steps", train.steps},
      {"seed", train.seed}};
  save_checkpoint(taca_checkpoint(att, old_dim, extra.dump()), out_path);
  if (!log_path.empty()) {
    std::string csv = "step,total,contra,distill\n";
    for (const auto& row : log) {
      csv += std::to_string(row.step) + "," + real(row.total) + "," + real(row.contrastive) +
             "," + real(row.distill) + "\n";
    }
    write_text(log_path, csv);
  }
  out << "trained " << trained_elements << " parameters for " << train.steps << " steps";
  if (!log.empty()) out << ", final total " << log.back().total;
  out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::vector<std::string> old_paths, new_paths, taca_paths, data_paths;
  std::string out_path, config_path, task;
  std::optional<std::size_t> k;
  bool new_cold = false;
  bool force = false;
};

// The attachment records the weight and config digests of the models it was
// trained against; evaluating it on other models needs --force.
void check_lineage(const LoadedClip& old_clip, const LoadedClip& new_clip,
                   const json& taca_meta, const EvalArgs& a, std::size_t i) {
  std::vector<std::string> problems;
  const auto expect = [&](const std::string& what, const std::string& got,
                          const std::string& want) {
    if (got != want) problems.push_back(what + " " + got + " != " + want);
  };
  const std::string& tp = a.taca_paths[i];
  expect("old weights", tensor_digest(old_clip.checkpoint.tensors),
         meta_string(taca_meta, "old_digest", tp));
  expect("new weights", tensor_digest(new_clip.checkpoint.tensors),
         meta_string(taca_meta, "new_digest", tp));
  expect("old config", meta_string(old_clip.meta, "config_digest", a.old_paths[i]),
         meta_string(taca_meta, "old_config_digest", tp));
  expect("new config", meta_string(new_clip.meta, "config_digest", a.new_paths[i]),
         meta_string(taca_meta, "new_config_digest", tp));
  if (problems.empty() || a.force) return;
  std::string msg = "run " + std::to_string(i) + " lineage mismatch:";
  for (const auto& p : problems) msg += " " + p + ";";
  throw ConfigError(msg + " pass --force to evaluate anyway");
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(); }

int cmd_eval_compat(const EvalArgs& a, std::ostream& out) {
  const std::size_t runs = a.taca_paths.size();
  if (runs == 0 || a.old_paths.size() != runs || a.new_paths.size() != runs) {
    throw ConfigError("--old, --new and --taca must be given the same number of times");
  }
  if (a.data_paths.size() != 1 && a.data_paths.size() != runs) {
    throw ConfigError("--data must be given once or once per run");
  }
  RunConfig cfg = load_config(a.config_path);
  if (!a.task.empty()) cfg.eval.task = parse_task(a.task);
  if (a.k) cfg.eval.k = *a.k;
  cfg.eval.validate();

  std::vector<double> oo, on, nn, raw;
  json run_entries = json::array();
  double chance = 0.0;
  std::string metric;
  for (std::size_t i = 0; i < runs; ++i) {
    const LoadedClip old_clip = load_clip(a.old_paths[i], Role::kOld);
    const LoadedClip new_clip = load_clip(a.new_paths[i], Role::kNew);
    const Checkpoint taca_ckpt = load_checkpoint(a.taca_paths[i]);
    const json taca_meta = metadata_of(taca_ckpt);
    check_lineage(old_clip, new_clip, taca_meta, a, i);
    const TacaAttachment att = taca_from_checkpoint(taca_ckpt, new_clip.model.visual);
    const std::string& data_path = a.data_paths.size() == 1 ? a.data_paths[0] : a.data_paths[i];
    const Dataset d = load_dataset(data_path);

    const CompatReport r = hot_plug_report(old_clip.model, new_clip.model.visual, att,
                                           a.new_cold ? &new_clip.model : nullptr, d, cfg.eval);
    json entry = {{"old_digest", tensor_digest(old_clip.checkpoint.tensors)},
                  {"new_digest", tensor_digest(new_clip.checkpoint.tensors)},
                  {"taca_digest", tensor_digest(taca_ckpt.tensors)},
                  {"data_digest", file_digest(data_path)},
                  {"m_old_old", r.m_old_old},
                  {"m_old_new", r.m_old_new},
                  {"m_new_new", optional_number(r.m_new_new)},
                  {"left_ok", r.left_ok},
                  {"right_ok", r.right_ok},
                  {"chance", r.chance}};
    if (cfg.eval.task == Task::kRetrieval) {
      const double swap = raw_swap_baseline(old_clip.model, new_clip.model.visual, att.config, d,
                                            cfg.eval.seeds.front(), cfg.eval.k);
      entry["raw_swap"] = swap;
      raw.push_back(swap);
    }
    run_entries.push_back(std::move(entry));
    oo.push_back(r.m_old_old);
    on.push_back(r.m_old_new);
    if (r.m_new_new) nn.push_back(*r.m_new_new);
    chance = std::max(chance, r.chance);
    metric = r.metric;
  }

  CompatReport summary;
  summary.m_old_old = median(oo);
  summary.m_old_new = median(on);
  if (nn.size() == runs) summary.m_new_new = median(nn);
  summary.recompute_flags();
  json report = {{"task", std::string(task_name(cfg.eval.task))},
                 {"metric", metric},
                 {"config_digest", config_digest(cfg)},
                 {"seeds", cfg.eval.seeds},
                 {"chance", chance},
                 {"forced", a.force},
                 {"runs", run_entries},
                 {"median",
                  {{"m_old_old", summary.m_old_old},
                   {"m_old_new", summary.m_old_new},
                   {"m_new_new", optional_number(summary.m_new_new)},
                   {"raw_swap", raw.empty() ? json() : json(median(raw))}}},
                 {"margin", summary.m_old_new - summary.m_old_old},
                 {"left_ok", summary.left_ok},
                 {"right_ok", summary.right_ok}};
  write_text(a.out_path, report.dump(2) + "\n");
  out << metric << " median old/old " << summary.m_old_old << ", old/new " << summary.m_old_new;
  if (summary.m_new_new) out << ", new/new " << *summary.m_new_new;
  out << (summary.left_ok ? ": ordering holds\n" : ": ordering FAILED\n");
  return summary.left_ok ? kExitOk : kExitOrdering;
}

int cmd_verify(const std::string& suite, std::size_t points, std::ostream& out) {
  std::vector<CheckResult> results;
  const auto run = [&](const char* name, auto fn) {
    if (suite == name || suite == "all") {
      auto r = fn();
      results.insert(results.end(), r.begin(), r.end());
    }
  };
  if (suite != "gradcheck" && suite != "params" && suite != "losses" && suite != "zero-init" &&
      suite != "all") {
    throw ConfigError("unknown suite '" + suite + "'");
  }
  run("gradcheck", [&] { return verify_gradcheck(points); });
  run("params", [] { return verify_params(); });
  run("losses", [] { return verify_losses(); });
  run("zero-init", [] { return verify_zero_init(); });
  std::size_t failed = 0;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) out << "  " << r.detail;
    out << "\n";
    if (!r.passed) ++failed;
  }
  out << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed == 0 ? kExitOk : kExitFailed;
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const LengthError*>(&e) ||
      dynamic_cast<const IoError*>(&e)) {
    return kExitFormat;
  }
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e) ||
      dynamic_cast<const DimensionError*>(&e) || dynamic_cast<const SpecError*>(&e) ||
      dynamic_cast<const VocabError*>(&e)) {
    return kExitUsage;
  }
  return kExitFailed;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Compatible adapters for hot-plugging a new visual encoder", "taca"};
  app.require_subcommand(1);

  std::string out_path, config_path, data_path, log_path, role, suite = "all";
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  std::string old_path, new_path;
  std::size_t points = 20;
  EvalArgs eval;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic paired dataset");
  gen->add_option("--out", out_path, "Output dataset file")->required();
  gen->add_option("--n", n, "Number of samples (default: data.n)");
  gen->add_option("--seed", seed, "Dataset seed (default: data.seed)");
  gen->add_option("--config", config_path, "JSON run config");

  auto* pre = app.add_subcommand("pretrain", "Contrastively pretrain an old or new model");
  pre->add_option("--role", role, "old or new")->required();
  pre->add_option("--data", data_path, "Training dataset")->required();
  pre->add_option("--out", out_path, "Output checkpoint")->required();
  pre->add_option("--config", config_path, "JSON run config");
  pre->add_option("--log", log_path, "Loss log CSV");

  auto* train = app.add_subcommand("train-taca", "Train the compatible attachment");
  train->add_option("--old", old_path, "Old model checkpoint")->required();
  train->add_option("--new", new_path, "New model checkpoint")->required();
  train->add_option("--data", data_path, "Training dataset")->required();
  train->add_option("--out", out_path, "Output attachment checkpoint")->required();
  train->add_option("--config", config_path, "JSON run config");
  train->add_option("--log", log_path, "Loss log CSV");

  auto* ev = app.add_subcommand("eval-compat", "Evaluate hot-plug compatibility");
  ev->add_option("--old", eval.old_paths, "Old model checkpoint, one per run")->required();
  ev->add_option("--new", eval.new_paths, "New model checkpoint, one per run")->required();
  ev->add_option("--taca", eval.taca_paths, "Attachment checkpoint, one per run")->required();
  ev->add_option("--data", eval.data_paths, "Evaluation dataset, once or per run")->required();
  ev->add_option("--out", eval.out_path, "Report JSON")->required();
  ev->add_option("--task", eval.task, "retrieval or classification (default: eval.task)");
  ev->add_option("--k", eval.k, "Recall cutoff (default: eval.k)");
  ev->add_flag("--new-cold", eval.new_cold, "Also score the new model on its own text tower");
  ev->add_flag("--force", eval.force, "Evaluate despite lineage mismatches");
  ev->add_option("--config", eval.config_path, "JSON run config");

  auto* ver = app.add_subcommand("verify", "Run the built-in oracle suites");
  ver->add_option("--suite", suite, "gradcheck, params, losses, zero-init or all");
  ver->add_option("--points", points, "Random points per gradient check");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(out_path, n, seed, config_path, out);
    if (pre->parsed()) return cmd_pretrain(role, data_path, out_path, config_path, log_path, out);
    if (train->parsed()) {
      return cmd_train_taca(old_path, new_path, data_path, out_path, config_path, log_path, out);
    }
    if (ev->parsed()) return cmd_eval_compat(eval, out);
    return cmd_verify(suite, points, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace taca::cli
