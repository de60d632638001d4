#pragma once

// Prophetic acceptance: a prophet draft is scored by the search model in one
// batch call, each token gets s = p_s^alpha * p_p^(1-alpha), the longest
// prefix with s >= tau is kept verbatim and decoding falls back to the search
// model from the first rejected position onward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seprod/model.hpp"

namespace seprod {

struct AlphaPolicy {
  enum class Kind { kDynamic, kFixed };
  Kind kind = Kind::kDynamic;
  double base = 0.5;   // dynamic: alpha = base - r
  double value = 0.5;  // fixed

  static AlphaPolicy dynamic(double base = 0.5) { return {Kind::kDynamic, base, 0.5}; }
  static AlphaPolicy fixed(double value) { return {Kind::kFixed, 0.5, value}; }

  // "dynamic" or "fixed:<v>".
  std::string label() const {
    if (kind == Kind::kDynamic) {
      if (base == 0.5) return "dynamic";
      return "dynamic:" + format_number(base);
    }
    return "fixed:" + format_number(value);
  }

  static AlphaPolicy parse(const std::string& text) {
    auto number = [&](const std::string& s) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != s.size())
        throw ConfigError("bad alpha policy '" + text + "'");
      return v;
    };
    if (text == "dynamic") return dynamic();
    if (text.rfind("dynamic:", 0) == 0) return dynamic(number(text.substr(8)));
    if (text.rfind("fixed:", 0) == 0) return fixed(number(text.substr(6)));
    throw ConfigError("alpha policy must be 'dynamic' or 'fixed:<v>', got '" +
                      text + "'");
  }

  static std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
  }

  friend bool operator==(const AlphaPolicy&, const AlphaPolicy&) = default;
};

struct DecodeConfig {
  double tau = 0.3;
  AlphaPolicy alpha = AlphaPolicy::dynamic();
  double alpha_lo = 0.0;
  double alpha_hi = 1.0;
  // Off only for the unclamped-alpha ablation.
  bool clamp_alpha = true;
  double epsilon_floor = 1e-9;
  std::size_t max_segment_tokens = 32;  // L_c
  SamplingPolicy sampling = SamplingPolicy::multinomial(1.0);
  std::uint64_t seed = 0;

  void validate() const {
    if (!(tau > 0.0 && tau <= 1.0))
      throw ConfigError("tau must lie in (0, 1], got " + std::to_string(tau));
    if (alpha.kind == AlphaPolicy::Kind::kFixed &&
        !(alpha.value >= 0.0 && alpha.value <= 1.0))
      throw ConfigError("fixed alpha must lie in [0, 1]");
    if (!(alpha_lo <= alpha_hi)) throw ConfigError("alpha clamp needs lo <= hi");
    if (!(epsilon_floor > 0.0 && epsilon_floor < 1.0))
      throw ConfigError("epsilon floor must lie in (0, 1)");
    if (max_segment_tokens == 0)
      throw ConfigError("max_segment_tokens must be positive");
    if (sampling.kind == SamplingPolicy::Kind::kMultinomial &&
        !(sampling.temperature > 0.0))
      throw ConfigError("sampling temperature must be > 0");
  }
};

// Pre-clamp alpha; for the dynamic policy this can fall outside [0, 1].
inline double raw_alpha(double r, const AlphaPolicy& policy) {
  if (!(r >= 0.0 && r <= 1.0))
    throw DomainError("normalized rank must lie in [0, 1], got " +
                      std::to_string(r));
  return policy.kind == AlphaPolicy::Kind::kDynamic ? policy.base - r
                                                     : policy.value;
}

inline double compute_alpha(double r, const AlphaPolicy& policy,
                            double lo = 0.0, double hi = 1.0) {
  const double a = raw_alpha(r, policy);
  if (policy.kind == AlphaPolicy::Kind::kFixed) return a;
  return std::clamp(a, lo, hi);
}

inline double compute_alpha(double r, const DecodeConfig& cfg) {
  if (!cfg.clamp_alpha) return raw_alpha(r, cfg.alpha);
  return compute_alpha(r, cfg.alpha, cfg.alpha_lo, cfg.alpha_hi);
}

// p_s^alpha * p_p^(1-alpha), evaluated in the log domain after flooring both
// probabilities at `floor`.
inline double blend_score(double p_s, double p_p, double alpha,
                          double floor = 1e-9) {
  const double fs = std::max(p_s, floor), fp = std::max(p_p, floor);
  if (fs == fp) return fs;  // exact, so equal models pass any tau <= p
  const double ls = std::log(fs);
  const double lp = std::log(fp);
  return std::exp(alpha * ls + (1.0 - alpha) * lp);
}

enum class DraftMode { kGroundingVerification, kAnswerDrafting };

inline const char* to_string(DraftMode m) {
  return m == DraftMode::kGroundingVerification ? "grounding-verification"
                                                : "answer-drafting";
}

struct PropheticDraft {
  TokenList tokens;
  std::vector<double> p_p;  // aligned with tokens, each in (0, 1]
  DraftMode source_mode = DraftMode::kAnswerDrafting;
  std::optional<bool> verdict;  // present iff grounding verification
  bool truncated = false;       // prophet hit its draft budget

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }

  void validate() const {
    if (tokens.size() != p_p.size())
      throw ContractViolation("draft tokens and probabilities misaligned");
    for (double p : p_p)
      if (!(p > 0.0 && p <= 1.0))
        throw ContractViolation("draft probability outside (0, 1]");
    if (verdict.has_value() !=
        (source_mode == DraftMode::kGroundingVerification))
      throw ContractViolation("verdict must be present iff grounding verification");
  }
};

struct AcceptanceEntry {
  Token token;
  double p_s = 0.0;
  double p_p = 0.0;
  double alpha = 0.0;
  double alpha_raw = 0.0;
  double s = 0.0;
  std::size_t rank = 0;
  bool accepted = false;
  bool floored = false;  // p_s was not reported by the backend

  friend bool operator==(const AcceptanceEntry&, const AcceptanceEntry&) = default;
};

struct AcceptanceRecord {
  std::vector<AcceptanceEntry> entries;
  std::optional<std::size_t> first_rejection;
  std::size_t accepted_count = 0;
  bool truncated = false;  // draft was cut to L_c before scoring

  std::size_t drafted() const { return entries.size(); }
  std::size_t discarded() const { return entries.size() - accepted_count; }

  friend bool operator==(const AcceptanceRecord&, const AcceptanceRecord&) = default;
};

struct DecodedSegment {
  TokenList tokens;
  std::optional<AcceptanceRecord> acceptance;
  std::size_t accepted_prefix_len = 0;
  std::size_t generated_len = 0;
  bool budget_exhausted = false;
  // Pass accounting for the cost model: sequential search-model calls and
  // batch verification calls.
  std::size_t search_passes = 0;
  std::size_t verify_passes = 0;

  // The accepted draft alone finished the segment.
  bool verify_only() const {
    return verify_passes > 0 && generated_len == 0 && !tokens.empty();
  }
};

// Default segment terminators.
inline std::vector<Token> default_stops(const Vocabulary& v) {
  if (!v.has_markers()) return {};
  const auto& m = v.markers();
  return {m.end_ground, m.end_answer, m.eos};
}

namespace detail {

inline bool contains(std::span<const Token> set, Token t) {
  return std::find(set.begin(), set.end(), t) != set.end();
}

// Fills a record from batch scores. Shared by verify_draft and decode_segment
// so the per-token rule lives in exactly one place on the batch path.
inline AcceptanceRecord build_record(const PropheticDraft& draft,
                                     std::size_t n,
                                     const ContinuationScores& scores,
                                     const DecodeConfig& cfg) {
  AcceptanceRecord rec;
  rec.truncated = n < draft.size();
  rec.entries.reserve(n);
  bool prefix_alive = true;
  for (std::size_t j = 0; j < n; ++j) {
    AcceptanceEntry e;
    e.token = draft.tokens[j];
    e.p_s = scores.probs[j];
    e.p_p = draft.p_p[j];
    const TokenRank rk = rank_of(scores.dists[j], e.token);
    e.rank = rk.rank;
    e.alpha_raw = raw_alpha(rk.r, cfg.alpha);
    e.alpha = compute_alpha(rk.r, cfg);
    e.s = blend_score(e.p_s, e.p_p, e.alpha, cfg.epsilon_floor);
    e.floored = j < scores.floored.size() && scores.floored[j];
    if (prefix_alive && e.s < cfg.tau) {
      prefix_alive = false;
      rec.first_rejection = j;
    }
    e.accepted = prefix_alive;
    rec.entries.push_back(e);
  }
  rec.accepted_count = rec.first_rejection.value_or(n);
  return rec;
}

struct Verification {
  AcceptanceRecord record;
  ContinuationScores scores;
};

template <ProbabilisticModel M>
Verification verify(const M& search_model, const ModelContext& history,
                    const PropheticDraft& draft, const DecodeConfig& cfg) {
  if (draft.empty()) throw ContractViolation("cannot verify an empty draft");
  draft.validate();
  const std::size_t n = std::min(draft.size(), cfg.max_segment_tokens);
  std::span<const Token> toks(draft.tokens.data(), n);
  Verification v;
  v.scores = search_model.score_continuation(history, toks);
  if (v.scores.probs.size() != n || v.scores.dists.size() != n + 1)
    throw ContractViolation("score_continuation returned misaligned scores");
  v.record = build_record(draft, n, v.scores, cfg);
  return v;
}

}  // namespace detail

// Scores every draft token with a single batch call. Drafts longer than L_c
// are truncated (record.truncated is set).
template <ProbabilisticModel M>
AcceptanceRecord verify_draft(const M& search_model, const ModelContext& history,
                              const PropheticDraft& draft,
                              const DecodeConfig& cfg) {
  return detail::verify(search_model, history, draft, cfg).record;
}

// Cuts a draft after its first stop token; anything past the stop could
// never be part of this segment.
inline PropheticDraft clip_draft_at_stop(const PropheticDraft& draft,
                                         std::span<const Token> stops) {
  PropheticDraft out = draft;
  for (std::size_t j = 0; j < draft.tokens.size(); ++j) {
    if (detail::contains(stops, draft.tokens[j])) {
      out.tokens.resize(j + 1);
      out.p_p.resize(j + 1);
      break;
    }
  }
  return out;
}

// Decodes one segment X of the search model. The accepted draft prefix is
// emitted verbatim, the token at the first rejected position is sampled from
// p_s (taken from the batch call), and the rest is plain token-by-token
// search-model decoding until a stop token or L_c tokens. No re-drafting.
template <ProbabilisticModel M>
DecodedSegment decode_segment(const M& search_model, const ModelContext& history,
                              const std::optional<PropheticDraft>& draft,
                              const DecodeConfig& cfg, Rng& rng,
                              std::span<const Token> stops) {
  DecodedSegment seg;
  auto stopped = [&] {
    return !seg.tokens.empty() && detail::contains(stops, seg.tokens.back());
  };

  if (draft && !draft->empty()) {
    const PropheticDraft clipped = clip_draft_at_stop(*draft, stops);
    detail::Verification v =
        detail::verify(search_model, history, clipped, cfg);
    seg.verify_passes = 1;
    const std::size_t k = v.record.accepted_count;
    seg.tokens.assign(clipped.tokens.begin(),
                      clipped.tokens.begin() + static_cast<std::ptrdiff_t>(k));
    seg.accepted_prefix_len = k;
    if (!stopped() && seg.tokens.size() < cfg.max_segment_tokens) {
      seg.tokens.push_back(sample(v.scores.dists[k], rng, cfg.sampling));
      ++seg.generated_len;
    }
    seg.acceptance = std::move(v.record);
  }

  while (!stopped() && seg.tokens.size() < cfg.max_segment_tokens) {
    const ProbabilityVector dist =
        search_model.next_distribution(history, seg.tokens);
    ++seg.search_passes;
    seg.tokens.push_back(sample(dist, rng, cfg.sampling));
    ++seg.generated_len;
  }
  seg.budget_exhausted = !stopped();
  return seg;
}

template <ProbabilisticModel M>
DecodedSegment decode_segment(const M& search_model, const ModelContext& history,
                              const std::optional<PropheticDraft>& draft,
                              const DecodeConfig& cfg, Rng& rng) {
  const std::vector<Token> stops = default_stops(search_model.vocabulary());
  return decode_segment(search_model, history, draft, cfg, rng, stops);
}

}  // namespace seprod
