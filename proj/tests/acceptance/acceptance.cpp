// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "taca/compat.hpp"
#include "taca/trainer.hpp"
#include "taca/verify.hpp"
#include "taca_cli/cli.hpp"
#include "taca_cli/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace taca;

namespace {

const std::vector<std::uint64_t> kSeeds{0, 1, 2};
constexpr double kMargin = 0.02;

fs::path g_dir;

struct Outcome {
  bool passed = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
};

int run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  std::cerr << out.str() << err.str();
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string fmt_e(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::vector<bool> g_results;

void criterion(const std::string& id, const std::string& title, double budget_s,
               const std::function<Outcome()>& fn) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o.passed = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (budget_s > 0 && secs > budget_s) {
    o.require(false, "took " + fmt(secs) + " s, budget " + fmt(budget_s) + " s");
  }
  std::printf("%s %s %s (%.1f s)%s%s\n", id.c_str(), o.passed ? "PASS" : "FAIL", title.c_str(),
              secs, o.detail.empty() ? "" : ": ", o.detail.c_str());
  std::fflush(stdout);
  g_results.push_back(o.passed);
}

Outcome from_checks(const std::vector<CheckResult>& results, bool report_worst) {
  Outcome o;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& r : results) {
    if (r.value >= worst) {
      worst = r.value;
      worst_name = r.name;
    }
    o.require(r.passed, r.name + " (" + r.detail + ")");
  }
  if (report_worst) {
    o.detail = std::to_string(results.size()) + " checks, worst " + worst_name + " " +
               fmt_e(worst) + (o.detail.empty() ? "" : "; failing: " + o.detail);
  } else if (o.passed) {
    o.detail = std::to_string(results.size()) + " checks";
  }
  return o;
}

// One seeded run of the default pipeline, optionally with an ablated
// attachment config.
struct SeedRun {
  std::uint64_t seed = 0;
  fs::path config, train_data, eval_data, old_ckpt, new_ckpt, taca_ckpt;
};

cli::RunConfig seed_config(std::uint64_t seed) {
  cli::RunConfig c;
  c.seed = seed;
  c.data_seed = seed;
  return c;
}

SeedRun pretrain_seed(std::uint64_t seed) {
  SeedRun r;
  r.seed = seed;
  const fs::path d = g_dir / ("seed" + std::to_string(seed));
  fs::create_directories(d);
  r.config = d / "run.json";
  write(r.config, cli::to_json(seed_config(seed)));
  r.train_data = d / "train.tacd";
  r.eval_data = d / "eval.tacd";
  r.old_ckpt = d / "old.tack";
  r.new_ckpt = d / "new.tack";
  const std::string c = r.config.string();
  auto must = [](int code, const char* what) {
    if (code != 0) throw std::runtime_error(std::string(what) + " exited " + std::to_string(code));
  };
  must(run({"gen-data", "--out", r.train_data.string(), "--config", c}), "gen-data");
  must(run({"gen-data", "--out", r.eval_data.string(), "--config", c, "--seed",
            std::to_string(1000 + seed)}),
       "gen-data");
  must(run({"pretrain", "--role", "old", "--data", r.train_data.string(), "--out",
            r.old_ckpt.string(), "--config", c}),
       "pretrain old");
  must(run({"pretrain", "--role", "new", "--data", r.train_data.string(), "--out",
            r.new_ckpt.string(), "--config", c}),
       "pretrain new");
  return r;
}

fs::path train_attachment(const SeedRun& r, const cli::RunConfig& cfg, const std::string& tag) {
  const fs::path d = r.config.parent_path();
  const fs::path cfg_path = d / (tag + ".json");
  write(cfg_path, cli::to_json(cfg));
  const fs::path out = d / (tag + ".tack");
  const int code = run({"train-taca", "--old", r.old_ckpt.string(), "--new", r.new_ckpt.string(),
                        "--data", r.train_data.string(), "--out", out.string(), "--config",
                        cfg_path.string(), "--log", (d / (tag + ".csv")).string()});
  if (code != 0) throw std::runtime_error("train-taca " + tag + " exited " + std::to_string(code));
  return out;
}

struct Eval {
  int code = -1;
  json report;
};

Eval evaluate(const std::vector<SeedRun>& runs, const std::vector<fs::path>& attachments,
              const std::string& task, const std::string& tag) {
  std::vector<std::string> args{"eval-compat", "--task", task, "--new-cold"};
  for (std::size_t i = 0; i < runs.size(); ++i) {
    for (const auto& [flag, path] :
         {std::pair{"--old", runs[i].old_ckpt}, std::pair{"--new", runs[i].new_ckpt},
          std::pair{"--taca", attachments[i]}, std::pair{"--data", runs[i].eval_data}}) {
      args.push_back(flag);
      args.push_back(path.string());
    }
  }
  const fs::path out = g_dir / (tag + "_" + task + ".json");
  args.push_back("--out");
  args.push_back(out.string());
  Eval e;
  e.code = run(args);
  if (e.code != cli::kExitOk && e.code != cli::kExitOrdering) {
    throw std::runtime_error("eval-compat exited " + std::to_string(e.code));
  }
  e.report = json::parse(slurp(out));
  return e;
}

double med(const Eval& e, const char* key) { return e.report.at("median").at(key).get<double>(); }

}  // namespace

int main(int argc, char** argv) {
  g_dir = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "taca_acceptance";
  fs::remove_all(g_dir);
  fs::create_directories(g_dir);

  criterion("A1", "gradient oracle", 60, [] {
    return from_checks(verify_gradcheck(20), true);
  });
  criterion("A2", "closed-form losses", 5, [] { return from_checks(verify_losses(), false); });

  // Default pipeline over three seeds; A3 to A5 share these runs.
  std::vector<SeedRun> runs;
  std::vector<fs::path> attachments;
  Eval retrieval, classification;
  double pipeline_secs = 0.0;
  criterion("A3", "old-to-new ordering on both tasks, margin >= 0.02 over seeds {0,1,2}", 600,
            [&] {
              const auto start = std::chrono::steady_clock::now();
              for (auto s : kSeeds) {
                runs.push_back(pretrain_seed(s));
                attachments.push_back(train_attachment(runs.back(), seed_config(s), "taca"));
              }
              retrieval = evaluate(runs, attachments, "retrieval", "default");
              classification = evaluate(runs, attachments, "classification", "default");
              pipeline_secs =
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
              Outcome o;
              for (const Eval* e : {&retrieval, &classification}) {
                const double oo = med(*e, "m_old_old"), on = med(*e, "m_old_new");
                const std::string m = e->report.at("metric").get<std::string>();
                o.detail += (o.detail.empty() ? "" : ", ") + m + " old/old " + fmt(oo) +
                            " old/new " + fmt(on) + " new/new " + fmt(med(*e, "m_new_new"));
                if (on - oo < kMargin) {
                  o.passed = false;
                  o.detail += " (margin " + fmt(on - oo) + " < " + fmt(kMargin) + ")";
                }
                o.require(e->code == (e->report.at("left_ok").get<bool>() ? 0 : 3),
                          "exit code disagrees with report");
              }
              return o;
            });

  criterion("A4", "raw swap near chance and below trained", 0, [&] {
    Outcome o;
    if (runs.size() != kSeeds.size()) return Outcome{false, "pipeline did not complete"};
    const double chance = retrieval.report.at("chance").get<double>();
    const double raw = med(retrieval, "raw_swap");
    o.detail = "median raw R@1 " + fmt(raw) + ", 2x chance " + fmt(2 * chance) + ", per seed";
    for (const auto& run : retrieval.report.at("runs")) {
      o.detail += " " + fmt(run.at("raw_swap").get<double>());
    }
    o.require(raw < 2 * chance, "median raw swap not below 2x chance");
    for (const auto& run : retrieval.report.at("runs")) {
      o.require(run.at("raw_swap").get<double>() < 2 * chance, "a seed's raw swap >= 2x chance");
      o.require(run.at("raw_swap").get<double>() < run.at("m_old_new").get<double>(),
                "a seed's raw swap >= trained old/new");
    }
    return o;
  });

  criterion("A5", "backbones frozen and trainable set is exactly the attachment", 0, [&] {
    Outcome o;
    if (runs.size() != kSeeds.size()) return Outcome{false, "pipeline did not complete"};
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const Checkpoint t = load_checkpoint(attachments[i]);
      const json meta = json::parse(t.metadata);
      const json& audit = meta.at("freeze_audit");
      const std::string old_now = tensor_digest(load_checkpoint(runs[i].old_ckpt).tensors);
      const std::string new_now = tensor_digest(load_checkpoint(runs[i].new_ckpt).tensors);
      o.require(audit.at("old_before") == audit.at("old_after"), "old backbone changed");
      o.require(audit.at("new_before") == audit.at("new_after"), "new backbone changed");
      o.require(audit.at("old_before") == old_now && meta.at("old_digest") == old_now,
                "old checkpoint differs from the audited weights");
      o.require(audit.at("new_before") == new_now, "new checkpoint differs from audited weights");

      const cli::RunConfig cfg = seed_config(runs[i].seed);
      const ClipModel new_model = clip_from_checkpoint(load_checkpoint(runs[i].new_ckpt));
      const TacaAttachment att = taca_from_checkpoint(t, new_model.visual);
      std::size_t elements = 0;
      for (const auto& [name, tensor] : att.named_tensors()) {
        elements += tensor.numel();
        o.require(name.rfind("adapter.", 0) == 0 || name.rfind("dim_projector.", 0) == 0,
                  "unexpected trainable tensor " + name);
      }
      const std::size_t expected =
          count_trainable(cfg.taca, new_model.visual.config, cfg.old_encoder.embed_dim).exact;
      o.require(elements == expected, "trainable element count " + std::to_string(elements) +
                                          " != " + std::to_string(expected));
      o.require(meta.at("trainable").at("elements") == expected, "recorded count mismatch");
    }
    if (o.passed) o.detail = std::to_string(runs.size()) + " runs audited";
    return o;
  });

  criterion("A6", "zero-init identity", 5, [] { return from_checks(verify_zero_init(), false); });
  criterion("A7", "parameter accounting over 50 configs", 10,
            [] { return from_checks(verify_params(50), false); });

  criterion("A8", "ablation directions: lambda 2 >= 0 and bottleneck 16 >= 2", 1500, [&] {
    if (runs.size() != kSeeds.size()) return Outcome{false, "pipeline did not complete"};
    std::vector<fs::path> no_distill, narrow;
    for (const auto& r : runs) {
      cli::RunConfig a = seed_config(r.seed);
      a.lambda = 0.0;
      no_distill.push_back(train_attachment(r, a, "lambda0"));
      cli::RunConfig b = seed_config(r.seed);
      b.taca.bottleneck = 2;
      narrow.push_back(train_attachment(r, b, "bottleneck2"));
    }
    Outcome o;
    for (const char* task : {"retrieval", "classification"}) {
      const Eval& full = std::string(task) == "retrieval" ? retrieval : classification;
      const double base = med(full, "m_old_new");
      const double l0 = med(evaluate(runs, no_distill, task, "lambda0"), "m_old_new");
      const double b2 = med(evaluate(runs, narrow, task, "bottleneck2"), "m_old_new");
      o.detail += std::string(o.detail.empty() ? "" : ", ") + task + " full " + fmt(base) +
                  " lambda0 " + fmt(l0) + " d'2 " + fmt(b2);
      if (base < l0) {
        o.passed = false;
        o.detail += " (lambda ordering fails)";
      }
      if (base < b2) {
        o.passed = false;
        o.detail += " (bottleneck ordering fails)";
      }
    }
    return o;
  });

  criterion("A9", "determinism and format error codes", 120, [] {
    Outcome o;
    const fs::path d = g_dir / "determinism";
    fs::create_directories(d);
    const fs::path cfg = d / "small.json";
    write(cfg, R"({"old_encoder":{"pretrain_steps":20},"new_encoder":{"pretrain_steps":20},)"
               R"("train":{"steps":40},"data":{"n":512}})");
    const std::string c = cfg.string();
    std::vector<std::string> produced[2];
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path r = d / ("rep" + std::to_string(rep));
      fs::create_directories(r);
      const auto p = [&](const char* name) { return (r / name).string(); };
      o.require(run({"gen-data", "--out", p("d.tacd"), "--config", c}) == 0, "gen-data failed");
      o.require(run({"pretrain", "--role", "old", "--data", p("d.tacd"), "--out", p("old.tack"),
                     "--config", c, "--log", p("old.csv")}) == 0,
                "pretrain old failed");
      o.require(run({"pretrain", "--role", "new", "--data", p("d.tacd"), "--out", p("new.tack"),
                     "--config", c}) == 0,
                "pretrain new failed");
      o.require(run({"train-taca", "--old", p("old.tack"), "--new", p("new.tack"), "--data",
                     p("d.tacd"), "--out", p("t.tack"), "--config", c, "--log", p("t.csv")}) == 0,
                "train-taca failed");
      for (const char* task : {"retrieval", "classification"}) {
        const int code = run({"eval-compat", "--old", p("old.tack"), "--new", p("new.tack"),
                              "--taca", p("t.tack"), "--data", p("d.tacd"), "--task", task,
                              "--new-cold", "--out", p(task)});
        o.require(code == 0 || code == 3, "eval-compat failed");
      }
      for (const char* f : {"d.tacd", "old.tack", "old.csv", "new.tack", "t.tack", "t.csv",
                            "retrieval", "classification"}) {
        produced[rep].push_back(slurp(r / f));
      }
    }
    o.require(produced[0] == produced[1], "repeated runs differ");

    const fs::path r = d / "rep0";
    const std::string data = slurp(r / "d.tacd"), ckpt = slurp(r / "t.tack");
    const auto expect_code = [&](const std::string& what, const std::string& bytes,
                                 const char* ext, bool is_data, int want) {
      const fs::path f = d / ("corrupt" + std::string(ext));
      write(f, bytes);
      std::vector<std::string> args =
          is_data ? std::vector<std::string>{"pretrain", "--role", "old", "--data", f.string(),
                                             "--out", (d / "x").string(), "--config", c}
                  : std::vector<std::string>{"eval-compat", "--old", (r / "old.tack").string(),
                                             "--new", (r / "new.tack").string(), "--taca",
                                             f.string(), "--data", (r / "d.tacd").string(),
                                             "--out", (d / "x.json").string()};
      const int code = run(args);
      o.require(code == want, what + " exited " + std::to_string(code));
    };
    std::string bad_magic = data, bad_version = data, bad_body = data;
    bad_magic[0] ^= 0x20;
    bad_version[4] = 9;
    bad_body[40] ^= 0x01;
    expect_code("dataset magic", bad_magic, ".tacd", true, cli::kExitFormat);
    expect_code("dataset version", bad_version, ".tacd", true, cli::kExitFormat);
    expect_code("dataset header bytes", bad_body, ".tacd", true, cli::kExitFormat);
    expect_code("dataset truncation", data.substr(0, data.size() - 3), ".tacd", true,
                cli::kExitFormat);
    expect_code("empty dataset file", "", ".tacd", true, cli::kExitFormat);
    std::string ck_magic = ckpt, ck_version = ckpt;
    ck_magic[1] ^= 0x20;
    ck_version[4] = 7;
    expect_code("checkpoint magic", ck_magic, ".tack", false, cli::kExitFormat);
    expect_code("checkpoint version", ck_version, ".tack", false, cli::kExitFormat);
    expect_code("checkpoint truncation", ckpt.substr(0, ckpt.size() / 2), ".tack", false,
                cli::kExitFormat);
    const int missing = run({"pretrain", "--role", "old", "--data", (d / "absent").string(),
                             "--out", (d / "x").string()});
    o.require(missing == cli::kExitFormat, "missing file exited " + std::to_string(missing));
    if (o.passed) o.detail = "8 artifacts bitwise identical, 9 corruption cases";
    return o;
  });

  std::size_t passed = 0;
  for (bool b : g_results) passed += b;
  std::printf("%zu/%zu acceptance criteria passed (pipeline %.0f s)\n", passed, g_results.size(),
              pipeline_secs);
  return passed == g_results.size() ? 0 : 1;
}
