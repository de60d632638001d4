#pragma once

// Benchmark harness: runs method x config-point x difficulty x episode grids
// over synthetic or remote model pairs, writes one JSONL trace line per
// episode plus CSV/JSON summaries, and replays traces as text.
//
// Per-episode seed: base_seed + episode_index. The task for episode i is
// generated from base_seed + (i mod episodes), so every method and config
// point sees the same tasks and the same search-model random stream.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "seprod/controller.hpp"
#include "seprod/decoding.hpp"
#include "seprod/model.hpp"
#include "seprod/raster.hpp"
#include "seprod/remote.hpp"
#include "seprod/synthetic.hpp"

namespace seprod {

using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config file: flat "key = value" lines, '#' comments

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k = {
        "seed", "episodes", "repeats", "difficulty", "methods", "workers", "out", "max_turns",
        "source", "task_file", "tau", "alpha", "taus", "alphas", "deltas", "clamp_alpha",
        "alpha_lo", "alpha_hi", "epsilon_floor", "max_segment_tokens", "draft_budget",
        "sampling", "temperature", "kappa", "grounding_verification", "answer_drafting",
        "grounding_query_template", "zoom"};
    for (const char* role : {"search.", "prophet."}) {
      for (const char* f : {"grounding_accuracy", "answer_accuracy", "verdict_accuracy",
                            "divergence", "sharpness", "answer_when_readable",
                            "answer_when_unreadable", "prefix_adherence", "prefix_interference",
                            "endpoint", "model", "auth_env", "timeout", "max_in_flight",
                            "top_k", "retries", "backoff_ms", "dump_dir"})
        k.insert(std::string(role) + f);
    }
    return k;
  }();
  return keys;
}

using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config_text(const std::string& text) {
  ConfigMap out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!known_config_keys().count(key))
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

inline ConfigMap load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
}

inline long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long d = std::stoll(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("'" + key + "' expects a boolean, got '" + v + "'");
}

// "0.6" or "0:0.3,2:0.9" (detail level : accuracy).
inline std::map<int, double> to_accuracy_map(const std::string& key, const std::string& v) {
  std::map<int, double> out;
  for (const auto& item : split_list(v)) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      out[0] = to_double(key, item);
    } else {
      out[static_cast<int>(to_int(key, trim(item.substr(0, colon))))] =
          to_double(key, trim(item.substr(colon + 1)));
    }
  }
  if (out.empty()) throw ConfigError("'" + key + "' is empty");
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline std::string fixed6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Run specification

struct Arm {
  std::string label;
  Method method = Method::kSeprod;
  bool grounding_verification = true;
  bool answer_drafting = true;
};

// Method names accepted on the command line. The two component ablations run
// SeProD with one prophet role switched off.
inline Arm parse_arm(const std::string& name, bool gv = true, bool ad = true) {
  if (name == "seprod") return {name, Method::kSeprod, gv, ad};
  if (name == "seprod-no-answer") return {name, Method::kSeprod, gv, false};
  if (name == "seprod-no-ground") return {name, Method::kSeprod, false, ad};
  if (name == "search-only") return {name, Method::kSearchOnly, false, false};
  if (name == "naive") return {name, Method::kNaive, gv, ad};
  throw ConfigError("unknown method '" + name +
                    "' (expected seprod, search-only, naive, seprod-no-answer, seprod-no-ground)");
}

struct ConfigPoint {
  double tau = 0.3;
  AlphaPolicy alpha;
  double delta = 0.0;

  std::string label() const {
    return "tau=" + detail::fmt(tau) + ",alpha=" + alpha.label() + ",delta=" + detail::fmt(delta);
  }
};

enum class SourceKind { kSynthetic, kRemote };

struct RunSpec {
  std::vector<std::string> methods = {"seprod", "search-only"};
  SourceKind source = SourceKind::kSynthetic;
  CapabilityProfile search_profile = CapabilityProfile::canonical_search();
  CapabilityProfile prophet_profile = CapabilityProfile::canonical_prophet();
  BackendConfig search_backend;
  BackendConfig prophet_backend;
  double zoom = 2.0;

  std::vector<Difficulty> difficulties = {Difficulty::kEasy};
  std::size_t episodes = 100;
  std::size_t repeats = 1;
  std::uint64_t seed = 1;
  std::string task_file;

  ControllerConfig controller;
  int max_turns = 8;
  std::vector<double> taus = {0.3};
  std::vector<AlphaPolicy> alphas = {AlphaPolicy::dynamic()};
  std::vector<double> deltas = {0.0};
  double kappa = 0.4;

  std::size_t workers = 1;
  std::string out_dir;

  void validate() const {
    if (methods.empty()) throw ConfigError("run spec needs at least one method");
    for (const auto& m : methods) parse_arm(m);
    if (episodes < 1) throw ConfigError("episodes must be >= 1");
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
    if (task_file.empty() && difficulties.empty()) throw ConfigError("no difficulty selected");
    if (taus.empty() || alphas.empty() || deltas.empty()) throw ConfigError("empty sweep axis");
    for (double t : taus)
      if (!(t > 0.0 && t <= 1.0)) throw ConfigError("tau must be in (0, 1]");
    for (const auto& a : alphas)
      if (a.kind == AlphaPolicy::Kind::kFixed && !(a.value >= 0.0 && a.value <= 1.0))
        throw ConfigError("fixed alpha must be in [0, 1]");
    for (double d : deltas)
      if (!(d >= 0.0 && d <= 1.0)) throw ConfigError("delta must be in [0, 1]");
    if (source == SourceKind::kRemote && (deltas.size() != 1 || deltas[0] != 0.0))
      throw ConfigError("delta sweeps apply to synthetic sources only");
    if (max_turns < 1) throw ConfigError("max_turns must be >= 1");
    if (kappa < 0.0) throw ConfigError("kappa must be >= 0");
    search_profile.validate();
    prophet_profile.validate();
  }

  std::vector<ConfigPoint> points() const {
    std::vector<ConfigPoint> out;
    for (double t : taus)
      for (const auto& a : alphas)
        for (double d : deltas) out.push_back({t, a, d});
    return out;
  }
};

inline void apply_config(RunSpec& spec, const ConfigMap& cfg) {
  using namespace detail;
  auto profile_field = [&](CapabilityProfile& p, const std::string& f, const std::string& key,
                           const std::string& v) {
    if (f == "grounding_accuracy") p.grounding_accuracy = to_double(key, v);
    else if (f == "answer_accuracy") p.answer_accuracy_by_detail = to_accuracy_map(key, v);
    else if (f == "verdict_accuracy") p.verdict_accuracy = to_double(key, v);
    else if (f == "divergence") p.divergence = to_double(key, v);
    else if (f == "sharpness") p.sharpness = to_double(key, v);
    else if (f == "answer_when_readable") p.answer_when_readable = to_double(key, v);
    else if (f == "answer_when_unreadable") p.answer_when_unreadable = to_double(key, v);
    else if (f == "prefix_adherence") p.prefix_adherence = to_double(key, v);
    else if (f == "prefix_interference") p.prefix_interference = to_double(key, v);
    else return false;
    return true;
  };
  auto backend_field = [&](BackendConfig& b, const std::string& f, const std::string& key,
                           const std::string& v) {
    if (f == "endpoint") b.endpoint = v;
    else if (f == "model") b.model = v;
    else if (f == "auth_env") b.auth_env = v;
    else if (f == "timeout") b.timeout_s = to_double(key, v);
    else if (f == "max_in_flight") b.max_in_flight = static_cast<int>(to_int(key, v));
    else if (f == "top_k") b.top_k = static_cast<int>(to_int(key, v));
    else if (f == "retries") b.retries = static_cast<int>(to_int(key, v));
    else if (f == "backoff_ms") b.backoff_ms = static_cast<int>(to_int(key, v));
    else if (f == "dump_dir") b.dump_dir = v;
  };

  auto& dc = spec.controller.decode;
  for (const auto& [key, v] : cfg) {
    if (key == "seed") spec.seed = static_cast<std::uint64_t>(to_int(key, v));
    else if (key == "episodes") spec.episodes = static_cast<std::size_t>(to_int(key, v));
    else if (key == "repeats") spec.repeats = static_cast<std::size_t>(to_int(key, v));
    else if (key == "difficulty") {
      spec.difficulties.clear();
      for (const auto& d : split_list(v)) spec.difficulties.push_back(parse_difficulty(d));
    } else if (key == "methods") spec.methods = split_list(v);
    else if (key == "workers") spec.workers = static_cast<std::size_t>(to_int(key, v));
    else if (key == "out") spec.out_dir = v;
    else if (key == "max_turns") spec.max_turns = static_cast<int>(to_int(key, v));
    else if (key == "source") {
      if (v == "synthetic") spec.source = SourceKind::kSynthetic;
      else if (v == "remote") spec.source = SourceKind::kRemote;
      else throw ConfigError("source must be synthetic or remote");
    } else if (key == "task_file") spec.task_file = v;
    else if (key == "tau") spec.taus = {to_double(key, v)};
    else if (key == "taus") {
      spec.taus.clear();
      for (const auto& t : split_list(v)) spec.taus.push_back(to_double(key, t));
    } else if (key == "alpha") spec.alphas = {AlphaPolicy::parse(v)};
    else if (key == "alphas") {
      spec.alphas.clear();
      for (const auto& a : split_list(v)) spec.alphas.push_back(AlphaPolicy::parse(a));
    } else if (key == "deltas") {
      spec.deltas.clear();
      for (const auto& d : split_list(v)) spec.deltas.push_back(to_double(key, d));
    } else if (key == "clamp_alpha") dc.clamp_alpha = to_bool(key, v);
    else if (key == "alpha_lo") dc.alpha_lo = to_double(key, v);
    else if (key == "alpha_hi") dc.alpha_hi = to_double(key, v);
    else if (key == "epsilon_floor") dc.epsilon_floor = to_double(key, v);
    else if (key == "max_segment_tokens") dc.max_segment_tokens = static_cast<std::size_t>(to_int(key, v));
    else if (key == "draft_budget") spec.controller.draft_budget = static_cast<std::size_t>(to_int(key, v));
    else if (key == "sampling") {
      if (v == "greedy") dc.sampling = SamplingPolicy::greedy();
      else if (v == "multinomial") dc.sampling.kind = SamplingPolicy::Kind::kMultinomial;
      else throw ConfigError("sampling must be greedy or multinomial");
    } else if (key == "temperature") dc.sampling.temperature = to_double(key, v);
    else if (key == "kappa") spec.kappa = to_double(key, v);
    else if (key == "grounding_verification") spec.controller.grounding_verification = to_bool(key, v);
    else if (key == "answer_drafting") spec.controller.answer_drafting = to_bool(key, v);
    else if (key == "grounding_query_template") spec.controller.grounding_query_template = v;
    else if (key == "zoom") spec.zoom = to_double(key, v);
    else {
      const auto dot = key.find('.');
      const std::string role = key.substr(0, dot), f = key.substr(dot + 1);
      CapabilityProfile& p = role == "search" ? spec.search_profile : spec.prophet_profile;
      BackendConfig& b = role == "search" ? spec.search_backend : spec.prophet_backend;
      if (!profile_field(p, f, key, v)) backend_field(b, f, key, v);
    }
  }
}

// ---------------------------------------------------------------------------
// Task files

inline ojson task_to_json(const SyntheticTask& t) {
  ojson cells = ojson::array();
  for (int c : t.image.cells) cells.push_back(c);
  return {{"uid", t.uid},
          {"seed", t.seed},
          {"difficulty", to_string(t.difficulty)},
          {"width", t.image.width},
          {"height", t.image.height},
          {"required_detail", t.required_detail},
          {"target", {t.image.target_cell->x, t.image.target_cell->y}},
          {"target_shape", kShapes[static_cast<std::size_t>(t.target_shape)]},
          {"query", t.query_text()},
          {"answer", t.answer},
          {"cells", cells}};
}

inline SyntheticTask task_from_json(const nlohmann::json& j) {
  SyntheticTask t;
  t.uid = j.at("uid").get<std::uint64_t>();
  t.seed = j.at("seed").get<std::uint64_t>();
  t.difficulty = parse_difficulty(j.at("difficulty").get<std::string>());
  t.image.width = j.at("width").get<int>();
  t.image.height = j.at("height").get<int>();
  t.required_detail = j.at("required_detail").get<int>();
  t.image.target_cell = Cell{j.at("target").at(0).get<int>(), j.at("target").at(1).get<int>()};
  const std::string shape = j.at("target_shape").get<std::string>();
  const auto it = std::find(kShapes.begin(), kShapes.end(), shape);
  if (it == kShapes.end()) throw SchemaError("task: unknown target_shape '" + shape + "'");
  t.target_shape = static_cast<int>(it - kShapes.begin());
  t.answer = j.at("answer").get<std::string>();
  t.image.cells = j.at("cells").get<std::vector<int>>();
  if (t.image.width < 1 || t.image.height < 1 || t.image.width > 64 || t.image.height > 64 ||
      t.image.cells.size() != static_cast<std::size_t>(t.image.width * t.image.height))
    throw SchemaError("task: grid dimensions do not match cells");
  return t;
}

struct RemoteTask {
  std::string id;
  std::string image_path;
  std::string query;
  std::optional<std::string> answer;
  std::string difficulty;
};

// ---------------------------------------------------------------------------
// Trace serialization

struct TraceMeta {
  std::string arm;
  ConfigPoint point;
  bool grounding_verification = true;
  bool answer_drafting = true;
  int max_turns = 8;
  bool include_wall = false;
};


inline ojson trace_to_json(const EpisodeTrace& tr, const Vocabulary& vocab, const TraceMeta& meta) {
  ojson j;
  j["episode_id"] = tr.episode_id;
  j["method"] = to_string(tr.method);
  j["arm"] = meta.arm;
  j["seed"] = tr.seed;
  j["difficulty"] = tr.difficulty;
  j["config"] = {{"tau", meta.point.tau},
                 {"alpha", meta.point.alpha.label()},
                 {"delta", meta.point.delta},
                 {"grounding_verification", meta.grounding_verification},
                 {"answer_drafting", meta.answer_drafting},
                 {"max_turns", meta.max_turns}};
  ojson turns = ojson::array();
  for (const auto& t : tr.turns) {
    ojson tj;
    tj["i"] = t.index;
    if (const auto* g = std::get_if<GroundingPrediction>(&t.mode)) {
      tj["mode"] = "grounding";
      tj["bbox"] = {g->bbox.x0, g->bbox.y0, g->bbox.x1, g->bbox.y1};
      tj["ref_image"] = g->ref_image;
    } else {
      tj["mode"] = "answer";
    }
    tj["reasoning_len"] = t.reasoning.size();
    tj["accepted_prefix_len"] = t.accepted_prefix_len();
    tj["generated_len"] = t.generated_len();
    tj["forced"] = t.forced;
    tj["text"] = vocab.render(t.tokens);
    turns.push_back(std::move(tj));
  }
  j["turns"] = std::move(turns);
  ojson prophet = ojson::array();
  for (const auto& c : tr.prophet_calls) {
    ojson pj;
    pj["turn"] = c.turn;
    pj["kind"] = to_string(c.draft.source_mode);
    if (c.draft.verdict) pj["verdict"] = *c.draft.verdict;
    pj["draft_len"] = c.draft.size();
    pj["truncated"] = c.draft.truncated;
    pj["text"] = vocab.render(c.draft.tokens);
    prophet.push_back(std::move(pj));
  }
  j["prophet"] = std::move(prophet);
  ojson acc = ojson::array();
  for (const auto& a : tr.acceptance) {
    ojson aj;
    aj["turn"] = a.turn;
    aj["kind"] = to_string(a.kind);
    ojson s = ojson::array(), al = ojson::array(), raw = ojson::array(), ps = ojson::array(),
          pp = ojson::array();
    for (const auto& e : a.record.entries) {
      s.push_back(e.s);
      al.push_back(e.alpha);
      raw.push_back(e.alpha_raw);
      ps.push_back(e.p_s);
      pp.push_back(e.p_p);
    }
    aj["s"] = std::move(s);
    aj["alpha"] = std::move(al);
    aj["alpha_raw"] = std::move(raw);
    aj["p_s"] = std::move(ps);
    aj["p_p"] = std::move(pp);
    if (a.record.first_rejection) aj["first_rejection"] = *a.record.first_rejection;
    aj["accepted_count"] = a.record.accepted_count;
    aj["truncated"] = a.record.truncated;
    acc.push_back(std::move(aj));
  }
  j["acceptance"] = std::move(acc);
  j["final_answer"] = tr.final_answer ? ojson(tr.final_answer_text) : ojson(nullptr);
  j["correct"] = tr.correct ? ojson(*tr.correct) : ojson(nullptr);
  const auto& c = tr.counters;
  j["counters"] = {{"drafted", c.drafted},
                   {"accepted", c.accepted},
                   {"discarded", c.discarded},
                   {"generated", c.generated},
                   {"search_passes", c.search_passes},
                   {"prophet_passes", c.prophet_passes},
                   {"verify_passes", c.verify_passes},
                   {"verify_only_segments", c.verify_only_segments},
                   {"parse_failures", c.parse_failures}};
  j["terminated_by"] = to_string(tr.terminated_by);
  j["forced_answer"] = tr.forced_answer;
  if (!tr.failure.empty()) j["failure"] = tr.failure;
  if (meta.include_wall)
    j["wall"] = {{"search_seconds", tr.search_seconds}, {"prophet_seconds", tr.prophet_seconds}};
  return j;
}

// Checks one parsed trace line against the documented schema and names the
// first offending field.
inline void validate_trace_json(const nlohmann::json& j) {
  using nlohmann::json;
  auto fail = [](const std::string& field, const std::string& what) {
    throw SchemaError("trace field '" + field + "' " + what);
  };
  auto need = [&](const json& obj, const std::string& path, const char* key) -> const json& {
    if (!obj.is_object()) fail(path, "is not an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(path.empty() ? key : path + "." + key, "is missing");
    return *it;
  };
  auto uint_field = [&](const json& obj, const std::string& path, const char* key) {
    const json& v = need(obj, path, key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0))
      fail(path.empty() ? key : path + "." + key, "must be a non-negative integer");
  };
  auto string_field = [&](const json& obj, const std::string& path, const char* key) {
    if (!need(obj, path, key).is_string()) fail(path.empty() ? key : path + "." + key, "must be a string");
  };
  auto number_array = [&](const json& v, const std::string& path) {
    if (!v.is_array()) fail(path, "must be an array");
    for (const auto& x : v)
      if (!x.is_number()) fail(path, "must contain only numbers");
  };

  if (!j.is_object()) fail("<line>", "is not a JSON object");
  string_field(j, "", "episode_id");
  {
    const json& m = need(j, "", "method");
    if (!m.is_string() || (m != "seprod" && m != "search-only" && m != "naive"))
      fail("method", "must be one of seprod, search-only, naive");
  }
  uint_field(j, "", "seed");
  string_field(j, "", "difficulty");

  const json& turns = need(j, "", "turns");
  if (!turns.is_array()) fail("turns", "must be an array");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const std::string p = "turns[" + std::to_string(i) + "]";
    const json& t = turns[i];
    uint_field(t, p, "i");
    const json& mode = need(t, p, "mode");
    if (mode != "grounding" && mode != "answer") fail(p + ".mode", "must be grounding or answer");
    if (mode == "grounding") {
      const json& b = need(t, p, "bbox");
      number_array(b, p + ".bbox");
      if (b.size() != 4) fail(p + ".bbox", "must have 4 entries");
      uint_field(t, p, "ref_image");
    }
    uint_field(t, p, "reasoning_len");
    uint_field(t, p, "accepted_prefix_len");
    uint_field(t, p, "generated_len");
  }
  const json& prophet = need(j, "", "prophet");
  if (!prophet.is_array()) fail("prophet", "must be an array");
  for (std::size_t i = 0; i < prophet.size(); ++i) {
    const std::string p = "prophet[" + std::to_string(i) + "]";
    uint_field(prophet[i], p, "turn");
    uint_field(prophet[i], p, "draft_len");
    if (prophet[i].contains("verdict") && !prophet[i]["verdict"].is_boolean())
      fail(p + ".verdict", "must be a boolean");
  }
  const json& acc = need(j, "", "acceptance");
  if (!acc.is_array()) fail("acceptance", "must be an array");
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const std::string p = "acceptance[" + std::to_string(i) + "]";
    uint_field(acc[i], p, "turn");
    number_array(need(acc[i], p, "s"), p + ".s");
    number_array(need(acc[i], p, "alpha"), p + ".alpha");
    if (acc[i]["s"].size() != acc[i]["alpha"].size()) fail(p + ".alpha", "must align with s");
    if (acc[i].contains("first_rejection")) uint_field(acc[i], p, "first_rejection");
  }
  {
    const json& fa = need(j, "", "final_answer");
    if (!fa.is_string() && !fa.is_null()) fail("final_answer", "must be a string or null");
    const json& c = need(j, "", "correct");
    if (!c.is_boolean() && !c.is_null()) fail("correct", "must be a boolean or null");
  }
  const json& counters = need(j, "", "counters");
  for (const char* k : {"drafted", "accepted", "search_passes", "prophet_passes", "verify_passes"})
    uint_field(counters, "counters", k);
  const json& term = need(j, "", "terminated_by");
  if (term != "answer" && term != "budget" && term != "failed")
    fail("terminated_by", "must be answer, budget or failed");
}

// ---------------------------------------------------------------------------
// Replay

inline std::vector<nlohmann::json> read_trace_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LookupError("cannot open trace file " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw SchemaError("trace line " + std::to_string(lineno) + " is not valid JSON");
    out.push_back(std::move(j));
  }
  return out;
}

inline std::string render_transcript(const nlohmann::json& j) {
  validate_trace_json(j);
  std::ostringstream o;
  auto num = [](const nlohmann::json& v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v.get<double>());
    return std::string(buf);
  };
  o << "episode: " << j["episode_id"].get<std::string>() << "\n";
  o << "method: " << j["method"].get<std::string>();
  if (j.contains("arm")) o << " (" << j["arm"].get<std::string>() << ")";
  o << "  seed: " << j["seed"].get<std::uint64_t>()
    << "  difficulty: " << j["difficulty"].get<std::string>() << "\n";
  if (j.contains("config")) {
    const auto& c = j["config"];
    o << "config: tau=" << num(c["tau"]) << " alpha=" << c["alpha"].get<std::string>()
      << " delta=" << num(c["delta"]) << "\n";
  }
  for (const auto& t : j["turns"]) {
    const int i = t["i"].get<int>();
    o << "turn " << i << " [" << t["mode"].get<std::string>() << "]";
    if (t.value("forced", false)) o << " forced";
    if (t["mode"] == "grounding") {
      o << " img:" << t["ref_image"].get<int>() << " box:(" << num(t["bbox"][0]) << ","
        << num(t["bbox"][1]) << "," << num(t["bbox"][2]) << "," << num(t["bbox"][3]) << ")";
    }
    o << "\n";
    if (t.contains("text")) o << "  output: " << t["text"].get<std::string>() << "\n";
    o << "  reasoning " << t["reasoning_len"].get<int>() << " tokens, accepted "
      << t["accepted_prefix_len"].get<int>() << ", generated " << t["generated_len"].get<int>()
      << "\n";
    for (const auto& a : j["acceptance"]) {
      if (a["turn"].get<int>() != i) continue;
      o << "  acceptance";
      if (a.contains("kind")) o << " (" << a["kind"].get<std::string>() << ")";
      o << ": s=[";
      for (std::size_t k = 0; k < a["s"].size(); ++k) o << (k ? " " : "") << num(a["s"][k]);
      o << "] alpha=[";
      for (std::size_t k = 0; k < a["alpha"].size(); ++k) o << (k ? " " : "") << num(a["alpha"][k]);
      o << "] first_rejection=";
      if (a.contains("first_rejection")) o << a["first_rejection"].get<int>();
      else o << "none";
      o << "\n";
    }
    for (const auto& p : j["prophet"]) {
      if (p["turn"].get<int>() != i) continue;
      o << "  prophet";
      if (p.contains("kind")) o << " (" << p["kind"].get<std::string>() << ")";
      if (p.contains("verdict")) o << " verdict=" << (p["verdict"].get<bool>() ? "true" : "false");
      o << " draft_len=" << p["draft_len"].get<int>();
      if (p.contains("text")) o << ": " << p["text"].get<std::string>();
      o << "\n";
    }
  }
  o << "final_answer: " << (j["final_answer"].is_null() ? "none" : j["final_answer"].get<std::string>());
  if (!j["correct"].is_null()) o << (j["correct"].get<bool>() ? " (correct)" : " (wrong)");
  o << "\n";
  const auto& c = j["counters"];
  o << "counters: drafted=" << c["drafted"].get<int>() << " accepted=" << c["accepted"].get<int>()
    << " search_passes=" << c["search_passes"].get<int>()
    << " prophet_passes=" << c["prophet_passes"].get<int>()
    << " verify_passes=" << c["verify_passes"].get<int>() << "\n";
  if (j.contains("failure")) o << "failure: " << j["failure"].get<std::string>() << "\n";
  o << "terminated_by: " << j["terminated_by"].get<std::string>() << "\n";
  return o.str();
}

inline std::string replay(const std::filesystem::path& trace_file, const std::string& episode_id) {
  const auto lines = read_trace_file(trace_file);
  for (const auto& j : lines) {
    auto it = j.find("episode_id");
    if (it != j.end() && it->is_string() && *it == episode_id) return render_transcript(j);
  }
  throw LookupError("no episode '" + episode_id + "' in " + trace_file.string());
}

// ---------------------------------------------------------------------------
// Cost model and speedup

struct CostModel {
  double kappa = 0.4;  // prophet / search per-pass cost
};

inline double episode_cost(const EpisodeCounters& c, const CostModel& m) {
  return static_cast<double>(c.search_passes + c.verify_passes) +
         m.kappa * static_cast<double>(c.prophet_passes);
}

// Pass-count speedup predicted from the acceptance statistics. Rates are
// normalized by T, the search-model passes needed to emit the same tokens
// without a prophet.
inline double closed_form_speedup(double a, double c, double f, double p, double kappa) {
  const double denom = 1.0 - a * c + f + kappa * p;
  if (!(denom > 0.0)) throw MetricError("closed-form speedup denominator is not positive");
  return 1.0 / denom;
}

struct SpeedupReport {
  double speedup = 1.0;      // baseline cost / method cost
  double closed_form = 1.0;  // 1 / (1 - a*c + f + kappa*p)
  double baseline_cost = 0.0;
  double method_cost = 0.0;
  double emitted = 0.0;           // T = generated + accepted
  double acceptance_rate = 0.0;   // a = accepted / drafted
  double coverage = 0.0;          // c = drafted / T
  double full_accept = 0.0;       // f = fully accepted segments / T
  double prophet_fraction = 0.0;  // p = prophet passes / T
  std::size_t pairs = 0;
};

inline SpeedupReport closed_form_report(const std::vector<const EpisodeTrace*>& method,
                                        const CostModel& cm) {
  SpeedupReport r;
  double drafted = 0, accepted = 0, full = 0, prophet = 0, emitted = 0;
  for (auto* t : method) {
    if (t->terminated_by == Termination::kFailed) continue;
    ++r.pairs;
    r.method_cost += episode_cost(t->counters, cm);
    drafted += static_cast<double>(t->counters.drafted);
    accepted += static_cast<double>(t->counters.accepted);
    full += static_cast<double>(t->counters.verify_only_segments);
    prophet += static_cast<double>(t->counters.prophet_passes);
    emitted += static_cast<double>(t->counters.generated + t->counters.accepted);
  }
  if (!(emitted > 0.0)) return r;
  r.emitted = emitted;
  r.acceptance_rate = drafted > 0 ? accepted / drafted : 0.0;
  r.coverage = drafted / emitted;
  r.full_accept = full / emitted;
  r.prophet_fraction = prophet / emitted;
  r.closed_form = closed_form_speedup(r.acceptance_rate, r.coverage, r.full_accept,
                                      r.prophet_fraction, cm.kappa);
  return r;
}

// Pass-count speedup of `method` over `baseline`; both sets must cover the
// same episode seeds. Failed episodes drop their pair.
inline SpeedupReport compute_speedup(const std::vector<const EpisodeTrace*>& method,
                                     const std::vector<const EpisodeTrace*>& baseline,
                                     const CostModel& cm) {
  std::multiset<std::uint64_t> ms, bs;
  for (auto* t : method) ms.insert(t->seed);
  for (auto* t : baseline) bs.insert(t->seed);
  if (ms != bs) throw MetricError("speedup needs both trace sets over the same seeds");
  std::map<std::uint64_t, const EpisodeTrace*> base_by_seed;
  for (auto* t : baseline) base_by_seed[t->seed] = t;

  std::vector<const EpisodeTrace*> kept;
  double base_cost = 0.0;
  for (auto* t : method) {
    const EpisodeTrace* b = base_by_seed.at(t->seed);
    if (t->terminated_by == Termination::kFailed || b->terminated_by == Termination::kFailed)
      continue;
    kept.push_back(t);
    base_cost += episode_cost(b->counters, cm);
  }
  SpeedupReport r = closed_form_report(kept, cm);
  r.baseline_cost = base_cost;
  if (r.pairs > 0 && r.method_cost > 0.0 && base_cost > 0.0) r.speedup = base_cost / r.method_cost;
  return r;
}

// ---------------------------------------------------------------------------
// Summaries

struct SummaryRow {
  std::string config;
  ConfigPoint point;
  std::string difficulty;
  std::string method;  // arm label
  std::size_t episodes = 0;
  std::size_t failed = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  double mean_turns = 0.0;
  std::size_t drafted = 0;
  std::size_t accepted = 0;
  std::size_t generated = 0;
  std::optional<double> acceptance_rate;
  std::optional<double> draft_utilization;
  std::size_t search_passes = 0;
  std::size_t verify_passes = 0;
  std::size_t prophet_passes = 0;
  double cost = 0.0;
  std::optional<double> speedup;
  std::optional<double> wall_search_s;
  std::optional<double> wall_prophet_s;
  std::optional<double> wall_speedup;
};

struct EpisodeResult {
  std::size_t point = 0;
  std::string difficulty;
  Arm arm;
  EpisodeTrace trace;
};

struct BenchmarkResult {
  std::vector<ConfigPoint> points;
  std::vector<EpisodeResult> episodes;
  std::vector<SummaryRow> rows;
  std::vector<std::string> trace_lines;
};

inline std::vector<SummaryRow> summarize(const std::vector<ConfigPoint>& points,
                                         const std::vector<EpisodeResult>& eps,
                                         const CostModel& cm, bool wall) {
  // Group keys keep first-seen order, which is the deterministic job order.
  std::vector<std::tuple<std::size_t, std::string, std::string>> keys;
  std::map<std::tuple<std::size_t, std::string, std::string>, std::vector<const EpisodeTrace*>> groups;
  for (const auto& e : eps) {
    auto key = std::make_tuple(e.point, e.difficulty, e.arm.label);
    if (!groups.count(key)) keys.push_back(key);
    groups[key].push_back(&e.trace);
  }
  std::vector<SummaryRow> rows;
  for (const auto& key : keys) {
    const auto& [pi, diff, arm] = key;
    const auto& traces = groups[key];
    SummaryRow r;
    r.point = points[pi];
    r.config = points[pi].label();
    r.difficulty = diff;
    r.method = arm;
    double turns = 0.0, ws = 0.0, wp = 0.0;
    for (const auto* t : traces) {
      ++r.episodes;
      if (t->terminated_by == Termination::kFailed) {
        ++r.failed;
        continue;
      }
      r.correct += t->correct.value_or(false) ? 1 : 0;
      turns += static_cast<double>(t->turns.size());
      r.drafted += t->counters.drafted;
      r.accepted += t->counters.accepted;
      r.generated += t->counters.generated;
      r.search_passes += t->counters.search_passes;
      r.verify_passes += t->counters.verify_passes;
      r.prophet_passes += t->counters.prophet_passes;
      r.cost += episode_cost(t->counters, cm);
      ws += t->search_seconds;
      wp += t->prophet_seconds;
    }
    const std::size_t ok = r.episodes - r.failed;
    r.accuracy = ok ? static_cast<double>(r.correct) / ok : 0.0;
    r.mean_turns = ok ? turns / ok : 0.0;
    const Method m = parse_arm(arm).method;
    if (m == Method::kSeprod)
      r.acceptance_rate = r.drafted ? static_cast<double>(r.accepted) / r.drafted : 0.0;
    if (m != Method::kSearchOnly && r.accepted + r.generated > 0)
      r.draft_utilization = static_cast<double>(r.accepted) / static_cast<double>(r.accepted + r.generated);
    if (wall) {
      r.wall_search_s = ws;
      r.wall_prophet_s = wp;
    }
    auto base_key = std::make_tuple(pi, diff, std::string("search-only"));
    if (auto it = groups.find(base_key); it != groups.end()) {
      const SpeedupReport sr = compute_speedup(traces, it->second, cm);
      r.speedup = sr.speedup;
      if (wall) {
        double bw = 0.0;
        for (const auto* t : it->second) bw += t->search_seconds + t->prophet_seconds;
        if (ws + wp > 0.0) r.wall_speedup = bw / (ws + wp);
      }
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  using detail::fixed6;
  auto opt = [](const std::optional<double>& v) { return v ? fixed6(*v) : std::string(); };
  std::ostringstream o;
  o << "config,tau,alpha,delta,difficulty,method,episodes,failed,correct,accuracy,mean_turns,"
       "drafted,accepted,generated,acceptance_rate,draft_utilization,search_passes,"
       "verify_passes,prophet_passes,cost,speedup,wall_search_s,wall_prophet_s,wall_speedup\n";
  for (const auto& r : rows) {
    o << '"' << r.config << '"' << ',' << fixed6(r.point.tau) << ',' << r.point.alpha.label() << ','
      << fixed6(r.point.delta) << ',' << r.difficulty << ',' << r.method << ',' << r.episodes << ','
      << r.failed << ',' << r.correct << ',' << fixed6(r.accuracy) << ',' << fixed6(r.mean_turns)
      << ',' << r.drafted << ',' << r.accepted << ',' << r.generated << ','
      << opt(r.acceptance_rate) << ',' << opt(r.draft_utilization) << ',' << r.search_passes << ','
      << r.verify_passes << ',' << r.prophet_passes << ',' << fixed6(r.cost) << ','
      << opt(r.speedup) << ',' << opt(r.wall_search_s) << ',' << opt(r.wall_prophet_s) << ','
      << opt(r.wall_speedup) << '\n';
  }
  return o.str();
}

inline ojson summary_json(const std::vector<SummaryRow>& rows) {
  ojson arr = ojson::array();
  auto opt = [](const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); };
  for (const auto& r : rows) {
    arr.push_back({{"config", r.config},
                   {"tau", r.point.tau},
                   {"alpha", r.point.alpha.label()},
                   {"delta", r.point.delta},
                   {"difficulty", r.difficulty},
                   {"method", r.method},
                   {"episodes", r.episodes},
                   {"failed", r.failed},
                   {"correct", r.correct},
                   {"accuracy", r.accuracy},
                   {"mean_turns", r.mean_turns},
                   {"drafted", r.drafted},
                   {"accepted", r.accepted},
                   {"generated", r.generated},
                   {"acceptance_rate", opt(r.acceptance_rate)},
                   {"draft_utilization", opt(r.draft_utilization)},
                   {"search_passes", r.search_passes},
                   {"verify_passes", r.verify_passes},
                   {"prophet_passes", r.prophet_passes},
                   {"cost", r.cost},
                   {"speedup", opt(r.speedup)},
                   {"wall_search_s", opt(r.wall_search_s)},
                   {"wall_prophet_s", opt(r.wall_prophet_s)},
                   {"wall_speedup", opt(r.wall_speedup)}});
  }
  return {{"rows", arr}};
}

// ---------------------------------------------------------------------------
// Running

namespace detail {

struct Job {
  std::size_t point;
  std::size_t task;  // index into the prepared task list
  std::size_t arm;
  std::size_t index;  // episode index within (point, difficulty, arm)
};

struct PreparedTask {
  Episode episode;
  std::string difficulty;
};

// Runs fn(i) for i in [0, n) on `workers` threads; results are written by
// index so completion order never shows up in outputs.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

inline std::vector<RemoteTask> load_remote_tasks(const std::filesystem::path& path) {
  std::vector<RemoteTask> out;
  for (const auto& j : read_trace_file(path)) {
    RemoteTask t;
    t.id = j.at("id").get<std::string>();
    std::filesystem::path img = j.at("image").get<std::string>();
    if (img.is_relative()) img = path.parent_path() / img;
    t.image_path = img.string();
    t.query = j.at("query").get<std::string>();
    if (j.contains("answer") && !j["answer"].is_null()) t.answer = j["answer"].get<std::string>();
    t.difficulty = j.value("difficulty", "remote");
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<SyntheticTask> load_synthetic_tasks(const std::filesystem::path& path) {
  std::vector<SyntheticTask> out;
  for (const auto& j : read_trace_file(path)) out.push_back(task_from_json(j));
  return out;
}

inline std::vector<SyntheticTask> generate_tasks(const RunSpec& spec) {
  std::vector<SyntheticTask> out;
  for (Difficulty d : spec.difficulties)
    for (std::size_t i = 0; i < spec.episodes; ++i) out.push_back(generate_task(spec.seed + i, d));
  return out;
}

template <ProbabilisticModel S, ProbabilisticModel P>
std::vector<EpisodeResult> run_grid(const RunSpec& spec, const S& search,
                                    const std::vector<const P*>& prophets,
                                    const std::vector<detail::PreparedTask>& tasks) {
  const auto points = spec.points();
  std::vector<Arm> arms;
  for (const auto& m : spec.methods)
    arms.push_back(parse_arm(m, spec.controller.grounding_verification, spec.controller.answer_drafting));

  // Job order: config point, difficulty (task order), method, repeat.
  std::vector<std::string> diff_order;
  for (const auto& t : tasks)
    if (std::find(diff_order.begin(), diff_order.end(), t.difficulty) == diff_order.end())
      diff_order.push_back(t.difficulty);
  std::vector<detail::Job> jobs;
  for (std::size_t p = 0; p < points.size(); ++p)
    for (const auto& diff : diff_order)
      for (std::size_t a = 0; a < arms.size(); ++a) {
        std::size_t index = 0;
        for (std::size_t r = 0; r < spec.repeats; ++r)
          for (std::size_t t = 0; t < tasks.size(); ++t)
            if (tasks[t].difficulty == diff) jobs.push_back({p, t, a, index++});
      }

  std::vector<EpisodeResult> results(jobs.size());
  bool serial = search.exclusive();
  for (const P* pm : prophets) serial = serial || pm->exclusive();
  const std::size_t workers = serial ? 1 : spec.workers;

  detail::parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const detail::Job& job = jobs[i];
    const ConfigPoint& pt = points[job.point];
    const Arm& arm = arms[job.arm];
    ControllerConfig cc = spec.controller;
    cc.decode.tau = pt.tau;
    cc.decode.alpha = pt.alpha;
    Episode ep = tasks[job.task].episode;
    ep.seed = spec.seed + job.index;
    ep.max_turns = spec.max_turns;
    ep.id = ep.difficulty + "/" + arm.label + "/" + pt.label() + "/" + std::to_string(job.index);
    EpisodeRngs rngs = EpisodeRngs::from_seed(ep.seed);
    EpisodeResult& out = results[i];
    out.point = job.point;
    out.difficulty = tasks[job.task].difficulty;
    out.arm = arm;
    out.trace = run_episode_with(search, prophets[job.point], ep, cc,
                                 {arm.method, arm.grounding_verification, arm.answer_drafting}, rngs);
  });
  return results;
}

inline void write_outputs(const RunSpec& spec, const BenchmarkResult& res) {
  if (spec.out_dir.empty()) return;
  std::filesystem::create_directories(spec.out_dir);
  const std::filesystem::path dir(spec.out_dir);
  {
    std::ofstream out(dir / "traces.jsonl", std::ios::binary);
    for (const auto& l : res.trace_lines) out << l << '\n';
  }
  {
    std::ofstream out(dir / "summary.csv", std::ios::binary);
    out << summary_csv(res.rows);
  }
  {
    std::ofstream out(dir / "summary.json", std::ios::binary);
    out << summary_json(res.rows).dump(2) << '\n';
  }
}

inline BenchmarkResult run_benchmark(const RunSpec& spec) {
  spec.validate();
  BenchmarkResult res;
  res.points = spec.points();
  const CostModel cm{spec.kappa};
  std::vector<detail::PreparedTask> tasks;
  bool wall = false;
  const Vocabulary* vocab = nullptr;

  if (spec.source == SourceKind::kSynthetic) {
    auto env = std::make_shared<SyntheticEnv>();
    std::vector<SyntheticTask> st =
        spec.task_file.empty() ? generate_tasks(spec) : load_synthetic_tasks(spec.task_file);
    if (!spec.task_file.empty()) {
      std::vector<SyntheticTask> kept;
      for (auto& t : st)
        if (std::find(spec.difficulties.begin(), spec.difficulties.end(), t.difficulty) !=
            spec.difficulties.end())
          kept.push_back(std::move(t));
      st = std::move(kept);
    }
    for (const auto& t : st) {
      env->add(t);
      tasks.push_back({make_episode(t, t.seed, "", spec.max_turns), to_string(t.difficulty)});
    }
    const SyntheticModel search(env, spec.search_profile, ModelRole::kSearch);
    std::vector<std::unique_ptr<SyntheticModel>> owned;
    std::vector<const SyntheticModel*> prophets;
    for (const auto& pt : res.points) {
      CapabilityProfile pp = spec.prophet_profile;
      pp.divergence = pt.delta;
      owned.push_back(std::make_unique<SyntheticModel>(env, pp, ModelRole::kProphet));
      prophets.push_back(owned.back().get());
    }
    res.episodes = run_grid(spec, search, prophets, tasks);
    vocab = &synthetic_vocabulary();
    res.rows = summarize(res.points, res.episodes, cm, false);
    for (const auto& e : res.episodes)
      res.trace_lines.push_back(
          trace_to_json(e.trace, *vocab,
                        {e.arm.label, res.points[e.point], e.arm.grounding_verification,
                         e.arm.answer_drafting, spec.max_turns, false})
              .dump());
  } else {
    wall = true;
    require_valid_pair(spec.search_backend, spec.prophet_backend);
    auto store = std::make_shared<ImageStore>(spec.zoom);
    if (spec.task_file.empty()) throw ConfigError("remote runs need task_file");
    const auto rt = load_remote_tasks(spec.task_file);
    const RemoteModel search(spec.search_backend, store);
    const RemoteModel prophet(spec.prophet_backend, store);
    for (std::size_t i = 0; i < rt.size(); ++i) {
      const std::uint64_t id = i + 1;
      store->add(id, load_png(rt[i].image_path));
      Episode e;
      e.id = rt[i].id;
      e.original_image = ImageRef{id, nullptr};
      e.query = search.tokenize(rt[i].query);
      e.ground_truth = rt[i].answer;
      e.difficulty = rt[i].difficulty;
      e.max_turns = spec.max_turns;
      tasks.push_back({std::move(e), rt[i].difficulty});
    }
    std::vector<const RemoteModel*> prophets(res.points.size(), &prophet);
    res.episodes = run_grid(spec, search, prophets, tasks);
    res.rows = summarize(res.points, res.episodes, cm, wall);
    for (const auto& e : res.episodes)
      res.trace_lines.push_back(
          trace_to_json(e.trace, search.vocabulary(),
                        {e.arm.label, res.points[e.point], e.arm.grounding_verification,
                         e.arm.answer_drafting, spec.max_turns, true})
              .dump());
  }
  write_outputs(spec, res);
  return res;
}

}  // namespace seprod
