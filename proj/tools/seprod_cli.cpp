// seprod: command-line front end for benchmark runs, sweeps, replays and
// backend checks.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "seprod/harness.hpp"

namespace {

using namespace seprod;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> tau;
  std::optional<std::string> alpha;
  std::optional<std::string> methods;
  std::optional<std::string> difficulty;
  std::optional<std::size_t> episodes;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> repeats;
  std::optional<int> max_turns;
  std::optional<std::string> task_file;
  std::optional<std::string> out;
  std::optional<std::string> taus;
  std::optional<std::string> alphas;
  std::optional<std::string> deltas;
  std::optional<double> kappa;
  bool no_answer_drafting = false;
  bool no_grounding_verification = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "flat key = value config file");
  cmd->add_option("--seed", f.seed, "base seed; episode i uses seed + i");
  cmd->add_option("--tau", f.tau, "acceptance threshold (default 0.3)");
  cmd->add_option("--alpha", f.alpha, "dynamic | fixed:<v>");
  cmd->add_option("--methods", f.methods,
                  "comma list of seprod, search-only, naive, seprod-no-answer, seprod-no-ground");
  cmd->add_option("--difficulty", f.difficulty, "comma list of easy, medium, hard");
  cmd->add_option("--episodes", f.episodes, "tasks per difficulty");
  cmd->add_option("--workers", f.workers, "episode worker threads");
  cmd->add_option("--repeats", f.repeats, "runs per task");
  cmd->add_option("--max-turns", f.max_turns, "turn budget per episode");
  cmd->add_option("--task-file", f.task_file, "JSONL tasks instead of generated ones");
  cmd->add_option("--kappa", f.kappa, "prophet / search per-pass cost ratio");
  cmd->add_flag("--no-answer-drafting", f.no_answer_drafting, "disable prophetic answer drafting");
  cmd->add_flag("--no-grounding-verification", f.no_grounding_verification,
                "disable prophetic grounding verification");
  cmd->add_option("--out", f.out, "output directory");
}

RunSpec build_spec(const Flags& f) {
  RunSpec spec;
  ConfigMap cfg;
  if (!f.config.empty()) cfg = load_config_file(f.config);
  auto put = [&](const char* key, const auto& v) {
    if (!v) return;
    std::ostringstream o;
    o.precision(17);
    o << *v;
    cfg[key] = o.str();
  };
  put("seed", f.seed);
  put("tau", f.tau);
  put("alpha", f.alpha);
  put("methods", f.methods);
  put("difficulty", f.difficulty);
  put("episodes", f.episodes);
  put("workers", f.workers);
  put("repeats", f.repeats);
  put("max_turns", f.max_turns);
  put("task_file", f.task_file);
  put("out", f.out);
  put("taus", f.taus);
  put("alphas", f.alphas);
  put("deltas", f.deltas);
  put("kappa", f.kappa);
  if (f.no_answer_drafting) cfg["answer_drafting"] = "false";
  if (f.no_grounding_verification) cfg["grounding_verification"] = "false";
  // Single-value keys win over list keys given in the same layer.
  if (f.tau) cfg.erase("taus");
  if (f.alpha) cfg.erase("alphas");
  apply_config(spec, cfg);
  return spec;
}

void print_summary(const BenchmarkResult& res) { std::cout << summary_csv(res.rows); }

int cmd_gen_tasks(const Flags& f) {
  RunSpec spec = build_spec(f);
  const auto tasks = generate_tasks(spec);
  std::ostream* os = &std::cout;
  std::ofstream file;
  if (!spec.out_dir.empty()) {
    std::filesystem::create_directories(spec.out_dir);
    file.open(std::filesystem::path(spec.out_dir) / "tasks.jsonl", std::ios::binary);
    os = &file;
  }
  for (const auto& t : tasks) *os << task_to_json(t).dump() << '\n';
  if (file.is_open())
    std::cerr << "wrote " << tasks.size() << " tasks to "
              << (std::filesystem::path(spec.out_dir) / "tasks.jsonl").string() << '\n';
  return 0;
}

int cmd_run(const Flags& f) {
  RunSpec spec = build_spec(f);
  const auto res = run_benchmark(spec);
  print_summary(res);
  return 0;
}

int cmd_validate(const Flags& f) {
  RunSpec spec = build_spec(f);
  const PairReport rep = validate_pair(spec.search_backend, spec.prophet_backend);
  std::cout << rep.describe() << '\n';
  return rep.ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seprod: self-prophetic decoding benchmark harness"};
  app.require_subcommand(1);
  Flags f;

  auto* gen = app.add_subcommand("gen-tasks", "write seeded synthetic tasks as JSONL");
  add_common(gen, f);
  auto* run = app.add_subcommand("run", "run methods over a task suite at one config point");
  add_common(run, f);
  auto* sweep = app.add_subcommand("sweep", "run the method grid over tau / alpha / delta lists");
  add_common(sweep, f);
  sweep->add_option("--taus", f.taus, "comma list of thresholds");
  sweep->add_option("--alphas", f.alphas, "comma list of alpha policies");
  sweep->add_option("--deltas", f.deltas, "comma list of prophet divergences (synthetic)");

  std::string trace_file, episode_id;
  auto* rep = app.add_subcommand("replay", "print one episode of a trace file as text");
  rep->add_option("trace", trace_file, "traces.jsonl")->required();
  rep->add_option("episode", episode_id, "episode id")->required();

  auto* val = app.add_subcommand("validate-backends", "check a remote search/prophet pair");
  val->add_option("--config", f.config, "config with search.* and prophet.* backend keys")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_tasks(f);
    if (*run) return cmd_run(f);
    if (*sweep) return cmd_run(f);
    if (*rep) {
      std::cout << replay(trace_file, episode_id);
      return 0;
    }
    if (*val) return cmd_validate(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
