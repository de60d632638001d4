#pragma once

// Model-interface adapter for an HTTP server exposing per-token logprobs.
//
// Wire contract (JSON):
//   GET  /v1/capabilities -> {echo_scoring: bool, logprobs: bool, max_top_k: int}
//   GET  /v1/vocab        -> {tokens: [surface, ...]}           (id = index)
//   POST /v1/tokenize     {model, text} -> {tokens: [id, ...]}
//   POST /v1/score        {model, segments, continuation: [id...], top_k}
//        -> {continuation: [{id, logprob|null, top_logprobs: [{id, logprob}]}],
//            next_top_logprobs: [{id, logprob}]}
// A segment is {type: "image", id, lineage: [{id, bbox: [x0,y0,x1,y1]}], data?}
// (lineage root-first, data = base64 PNG when pixels are available) or
// {type: "tokens", role, tokens: [id...]}.
//
// One /v1/score call echo-scores a whole draft, which is what keeps prophetic
// verification a single round trip.

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include "seprod/decoding.hpp"
#include "seprod/model.hpp"
#include "seprod/raster.hpp"

namespace seprod {

using json = nlohmann::json;

struct BackendConfig {
  std::string endpoint;  // e.g. http://127.0.0.1:8080
  std::string model;
  std::string auth_env;  // name of the variable holding the bearer token
  double timeout_s = 30.0;
  int max_in_flight = 4;
  int top_k = 20;
  int retries = 2;
  int backoff_ms = 100;
  double epsilon_floor = 1e-9;
  std::string dump_dir;

  void validate() const {
    if (endpoint.empty()) throw ConfigError("backend endpoint is empty");
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    if (!(timeout_s > 0.0)) throw ConfigError("timeout must be > 0");
    if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
    if (retries < 0) throw ConfigError("retries must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Wire encoding of contexts

inline json wire_image(const ImageRef& img, const ImageStore* store) {
  std::vector<const ImageRef*> chain;
  for (const ImageRef* cur = &img; cur->crop; cur = &cur->crop->parent) chain.push_back(cur);
  json lineage = json::array();
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
    const BBox& b = (*it)->crop->bbox;
    lineage.push_back({{"id", (*it)->id}, {"bbox", {b.x0, b.y0, b.x1, b.y1}}});
  }
  json seg = {{"type", "image"}, {"id", img.root().id}, {"lineage", lineage}};
  if (store && store->has(img.root().id)) seg["data"] = store->attachment(img);
  return seg;
}

inline json wire_context(const ModelContext& ctx, const ImageStore* store = nullptr) {
  json segs = json::array();
  for (const auto& s : ctx.segments()) {
    if (const auto* img = std::get_if<ImageRef>(&s)) {
      segs.push_back(wire_image(*img, store));
    } else {
      const auto& span = std::get<TokenSpan>(s);
      json ids = json::array();
      for (Token t : span.tokens) ids.push_back(t.id);
      segs.push_back({{"type", "tokens"}, {"role", to_string(span.role)}, {"tokens", ids}});
    }
  }
  return segs;
}

inline SpanRole parse_role(const std::string& s) {
  for (SpanRole r : {SpanRole::kQuery, SpanRole::kReasoning, SpanRole::kGrounding,
                     SpanRole::kAnswer, SpanRole::kPropheticPrefix})
    if (s == to_string(r)) return r;
  throw SchemaError("unknown span role '" + s + "'");
}

inline ModelContext parse_wire_context(const json& segs) {
  ModelContext ctx;
  for (const auto& s : segs) {
    const std::string type = s.at("type");
    if (type == "image") {
      ImageRef img{s.at("id").get<std::uint64_t>(), nullptr};
      for (const auto& step : s.at("lineage")) {
        const auto& b = step.at("bbox");
        img = make_crop(img, step.at("id").get<std::uint64_t>(),
                        {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                         b.at(3).get<double>()});
      }
      ctx.append_image(std::move(img));
    } else if (type == "tokens") {
      TokenList toks;
      for (const auto& id : s.at("tokens")) toks.push_back(Token{id.get<std::int32_t>()});
      ctx.append_tokens(std::move(toks), parse_role(s.at("role")));
    } else {
      throw SchemaError("unknown segment type '" + type + "'");
    }
  }
  return ctx;
}

// Top-k logprobs to a full distribution: listed ids keep exp(logprob),
// unlisted ids get the floor, and the whole vector is renormalized.
inline ProbabilityVector distribution_from_top(const json& top, std::size_t vocab_size,
                                               double floor) {
  std::vector<double> w(vocab_size, floor);
  for (const auto& e : top) {
    const auto id = e.at("id").get<std::int64_t>();
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
      throw ContractViolation("backend returned token id " + std::to_string(id) +
                              " outside the vocabulary");
    w[static_cast<std::size_t>(id)] = std::exp(e.at("logprob").get<double>());
  }
  return ProbabilityVector::from_weights(std::move(w));
}

// ---------------------------------------------------------------------------
// HTTP transport with retries, bounded concurrency and optional audit dumps

class BackendClient {
 public:
  explicit BackendClient(BackendConfig cfg)
      : cfg_(validated(std::move(cfg))), slots_(cfg_.max_in_flight) {
    if (!cfg_.auth_env.empty()) {
      const char* tok = std::getenv(cfg_.auth_env.c_str());
      if (!tok) throw ConfigError("auth token variable " + cfg_.auth_env + " is not set");
      token_ = tok;
    }
    if (!cfg_.dump_dir.empty()) std::filesystem::create_directories(cfg_.dump_dir);
  }

  const BackendConfig& config() const { return cfg_; }

  json get(const std::string& path) const { return call("GET", path, nullptr); }
  json post(const std::string& path, const json& body) const { return call("POST", path, &body); }

 private:
  static BackendConfig validated(BackendConfig c) {
    c.validate();
    return c;
  }

  json call(const std::string& method, const std::string& path, const json* body) const {
    slots_.acquire();
    struct Release {
      std::counting_semaphore<>& s;
      ~Release() { s.release(); }
    } release{slots_};

    const std::string payload = body ? body->dump() : std::string();
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      if (attempt > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.backoff_ms << (attempt - 1)));
      httplib::Client cli(cfg_.endpoint);
      const auto secs = static_cast<time_t>(cfg_.timeout_s);
      const auto usecs = static_cast<time_t>((cfg_.timeout_s - secs) * 1e6);
      cli.set_connection_timeout(secs, usecs);
      cli.set_read_timeout(secs, usecs);
      cli.set_write_timeout(secs, usecs);
      httplib::Headers headers;
      if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
      auto res = method == "GET" ? cli.Get(path, headers)
                                 : cli.Post(path, headers, payload, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      dump(path, payload, res->status, res->body);
      if (res->status >= 500 || res->status == 429) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw BackendError(cfg_.endpoint + path + " returned HTTP " +
                           std::to_string(res->status) + ": " + res->body);
      try {
        return json::parse(res->body);
      } catch (const json::parse_error& e) {
        throw BackendError(cfg_.endpoint + path + " returned invalid JSON: " + e.what());
      }
    }
    throw BackendError(cfg_.endpoint + path + " failed after " +
                       std::to_string(cfg_.retries + 1) + " attempts: " + last_error);
  }

  void dump(const std::string& path, const std::string& request, int status,
            const std::string& response) const {
    if (cfg_.dump_dir.empty()) return;
    const auto n = dump_seq_.fetch_add(1);
    char name[64];
    std::snprintf(name, sizeof name, "%06llu", static_cast<unsigned long long>(n));
    std::string tag = path;
    for (char& c : tag)
      if (c == '/') c = '_';
    std::ofstream out(std::filesystem::path(cfg_.dump_dir) / (std::string(name) + "-" + cfg_.model + tag + ".json"));
    json rec = {{"endpoint", cfg_.endpoint + path}, {"model", cfg_.model}, {"status", status}};
    rec["request"] = request.empty() ? json(nullptr) : json::parse(request, nullptr, false);
    rec["response"] = json::parse(response, nullptr, false);
    out << rec.dump() << "\n";
  }

  BackendConfig cfg_;
  std::string token_;
  mutable std::counting_semaphore<> slots_;
  mutable std::atomic<std::uint64_t> dump_seq_{0};
};

struct BackendCapabilities {
  bool echo_scoring = false;
  bool logprobs = false;
  int max_top_k = 0;

  std::vector<std::string> missing(int wanted_top_k) const {
    std::vector<std::string> out;
    if (!echo_scoring) out.push_back("echo_scoring");
    if (!logprobs) out.push_back("logprobs");
    if (max_top_k < wanted_top_k) out.push_back("top_k>=" + std::to_string(wanted_top_k));
    return out;
  }
};

inline BackendCapabilities parse_capabilities(const json& j) {
  BackendCapabilities c;
  c.echo_scoring = j.value("echo_scoring", false);
  c.logprobs = j.value("logprobs", false);
  c.max_top_k = j.value("max_top_k", 0);
  return c;
}

// ---------------------------------------------------------------------------
// Remote model

class RemoteModel final : public Model {
 public:
  explicit RemoteModel(BackendConfig cfg, std::shared_ptr<const ImageStore> images = nullptr)
      : client_(std::move(cfg)), images_(std::move(images)) {
    caps_ = parse_capabilities(client_.get("/v1/capabilities"));
    const auto missing = caps_.missing(client_.config().top_k);
    if (!missing.empty()) {
      std::string list;
      for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
      throw CapabilityError(client_.config().endpoint + " lacks " + list +
                            "; enable echo scoring with per-token logprobs on the server");
    }
    std::vector<std::string> surfaces;
    const json listed = client_.get("/v1/vocab");
    for (const auto& s : listed.at("tokens")) surfaces.push_back(s.get<std::string>());
    vocab_ = Vocabulary(std::move(surfaces));
  }

  using Model::next_distribution;

  const Vocabulary& vocabulary() const override { return vocab_; }
  const BackendCapabilities& capabilities() const { return caps_; }
  const BackendConfig& config() const { return client_.config(); }

  ProbabilityVector next_distribution(const ModelContext& ctx,
                                      std::span<const Token> continuation) const override {
    const json res = score(ctx, continuation);
    return distribution_from_top(field(res, "next_top_logprobs"), vocab_.size(),
                                 client_.config().epsilon_floor);
  }

  // Raw per-token probabilities (no renormalization); tokens the server did
  // not score are floored and flagged.
  ContinuationScores score_continuation(const ModelContext& ctx,
                                        std::span<const Token> tokens) const override {
    if (tokens.empty())
      throw ContractViolation("score_continuation needs a non-empty continuation");
    const json res = score(ctx, tokens);
    const json& cont = field(res, "continuation");
    if (cont.size() != tokens.size())
      throw BackendError("backend scored " + std::to_string(cont.size()) + " of " +
                         std::to_string(tokens.size()) + " continuation tokens");
    const double eps = client_.config().epsilon_floor;
    ContinuationScores out;
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      const json& e = cont[j];
      const json& lp = field(e, "logprob");
      if (lp.is_null()) {
        out.probs.push_back(eps);
        out.floored.push_back(true);
      } else {
        out.probs.push_back(std::exp(lp.get<double>()));
        out.floored.push_back(false);
      }
      out.dists.push_back(distribution_from_top(field(e, "top_logprobs"), vocab_.size(), eps));
    }
    out.dists.push_back(distribution_from_top(field(res, "next_top_logprobs"), vocab_.size(), eps));
    return out;
  }

  TokenList tokenize(const std::string& text) const {
    TokenList out;
    const json res = client_.post("/v1/tokenize", {{"model", client_.config().model}, {"text", text}});
    for (const auto& id : res.at("tokens"))
      out.push_back(Token{id.get<std::int32_t>()});
    return out;
  }

 private:
  json score(const ModelContext& ctx, std::span<const Token> continuation) const {
    json ids = json::array();
    for (Token t : continuation) ids.push_back(t.id);
    return client_.post("/v1/score", {{"model", client_.config().model},
                                      {"segments", wire_context(ctx, images_.get())},
                                      {"continuation", ids},
                                      {"top_k", client_.config().top_k}});
  }

  static const json& field(const json& j, const char* name) {
    auto it = j.find(name);
    if (it == j.end())
      throw CapabilityError(std::string("backend response lacks '") + name +
                            "'; the server must return per-token logprobs");
    return *it;
  }

  BackendClient client_;
  std::shared_ptr<const ImageStore> images_;
  BackendCapabilities caps_;
  Vocabulary vocab_;
};

// ---------------------------------------------------------------------------
// Pair validation

inline const std::vector<std::string>& default_probe_strings() {
  static const std::vector<std::string> probes = {
      "the target is at center",
      "BEGIN_GROUND img:0 box:0.25,0.25,0.75,0.75 END_GROUND",
      "BEGIN_ANSWER red END_ANSWER",
      "VERDICT_TRUE VERDICT_FALSE EOS",
  };
  return probes;
}

struct PairReport {
  bool ok = true;
  BackendCapabilities search_caps;
  BackendCapabilities prophet_caps;
  bool vocab_equal = false;
  std::optional<std::string> first_diverging_probe;
  std::vector<std::string> problems;

  std::string describe() const {
    std::string out = ok ? "pair ok" : "pair rejected";
    for (const auto& p : problems) out += "\n  - " + p;
    return out;
  }
};

inline PairReport validate_pair(const BackendConfig& search_cfg, const BackendConfig& prophet_cfg,
                                const std::vector<std::string>& probes = default_probe_strings()) {
  PairReport rep;
  auto probe_caps = [&](const BackendConfig& cfg, const char* who, BackendCapabilities& caps) {
    BackendClient client(cfg);
    caps = parse_capabilities(client.get("/v1/capabilities"));
    for (const auto& m : caps.missing(cfg.top_k)) {
      rep.ok = false;
      rep.problems.push_back(std::string(who) + " backend lacks capability: " + m);
    }
    std::vector<std::string> vocab;
    const json listed = client.get("/v1/vocab");
    for (const auto& s : listed.at("tokens")) vocab.push_back(s.get<std::string>());
    return vocab;
  };
  const auto sv = probe_caps(search_cfg, "search", rep.search_caps);
  const auto pv = probe_caps(prophet_cfg, "prophet", rep.prophet_caps);
  rep.vocab_equal = sv == pv;
  if (!rep.vocab_equal) {
    rep.ok = false;
    rep.problems.push_back("vocabularies differ (" + std::to_string(sv.size()) + " vs " +
                           std::to_string(pv.size()) + " entries)");
  }
  BackendClient sc(search_cfg), pc(prophet_cfg);
  for (const auto& probe : probes) {
    const json a = sc.post("/v1/tokenize", {{"model", search_cfg.model}, {"text", probe}}).at("tokens");
    const json b = pc.post("/v1/tokenize", {{"model", prophet_cfg.model}, {"text", probe}}).at("tokens");
    if (a != b) {
      rep.ok = false;
      rep.first_diverging_probe = probe;
      rep.problems.push_back("tokenization differs on probe '" + probe + "'");
      break;
    }
  }
  return rep;
}

// Throws ConfigError (or CapabilityError) when the pair cannot run SeProD.
inline void require_valid_pair(const BackendConfig& s, const BackendConfig& p,
                               const std::vector<std::string>& probes = default_probe_strings()) {
  const PairReport rep = validate_pair(s, p, probes);
  if (rep.ok) return;
  const bool caps_only = rep.vocab_equal && !rep.first_diverging_probe;
  if (caps_only) throw CapabilityError(rep.describe());
  throw ConfigError(rep.describe());
}

}  // namespace seprod
