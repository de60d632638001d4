#pragma once

// Multi-turn visual-search loop. The search model alternates grounding turns
// (reasoning + BEGIN_GROUND img:<k> box:<x0>,<y0>,<x1>,<y1> END_GROUND, which
// crops and zooms a previously seen image) with a final answering turn. A
// prophet model sees only the current image and a query: after each grounding
// turn it verifies the crop and its detail tokens become the draft for the
// next turn's reasoning; in answering mode it drafts the answer itself.

#include <chrono>
#include <cstdio>
#include <optional>
#include <regex>
#include <string>
#include <variant>
#include <vector>

#include "seprod/decoding.hpp"
#include "seprod/model.hpp"

namespace seprod {

inline constexpr const char* kDefaultGroundingQueryTemplate =
    "Does this image contain the region needed to answer: <Q>? Answer "
    "VERDICT_TRUE/VERDICT_FALSE, then describe the region or suggest where to "
    "look.";

enum class Method { kSeprod, kSearchOnly, kNaive };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::kSeprod: return "seprod";
    case Method::kSearchOnly: return "search-only";
    case Method::kNaive: return "naive";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "seprod") return Method::kSeprod;
  if (s == "search-only") return Method::kSearchOnly;
  if (s == "naive") return Method::kNaive;
  throw ConfigError("unknown method '" + s + "'");
}

struct Episode {
  std::string id;
  ImageRef original_image;
  TokenList query;
  std::optional<std::string> ground_truth;
  std::string difficulty;
  std::uint64_t seed = 0;
  int max_turns = 8;
};

struct ControllerConfig {
  DecodeConfig decode;
  std::size_t draft_budget = 16;  // L_d, prophet-side
  bool grounding_verification = true;
  bool answer_drafting = true;
  std::string grounding_query_template = kDefaultGroundingQueryTemplate;
};

// ---------------------------------------------------------------------------
// Turn parsing

struct GroundingPrediction {
  std::size_t ref_image = 0;  // index into history images, 0 = original
  BBox bbox;

  friend bool operator==(const GroundingPrediction&,
                         const GroundingPrediction&) = default;
};

struct AnswerOutput {
  TokenList answer;

  friend bool operator==(const AnswerOutput&, const AnswerOutput&) = default;
};

using TurnMode = std::variant<GroundingPrediction, AnswerOutput>;

struct ParsedTurn {
  TokenList reasoning;
  TurnMode mode;
};

inline BBox clamp_bbox(BBox b) {
  auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {c(b.x0), c(b.y0), c(b.x1), c(b.y1)};
}

// Splits reasoning from the structured tail. `image_count` is the number of
// images already in the history; grounding references must point at one.
inline ParsedTurn parse_turn_output(std::span<const Token> tokens,
                                    const Vocabulary& vocab,
                                    std::size_t image_count) {
  const auto& m = vocab.markers();
  std::size_t head = tokens.size();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == m.begin_ground || tokens[i] == m.begin_answer) {
      head = i;
      break;
    }
  }
  if (head == tokens.size()) throw ParseError("turn has no structured tail");

  ParsedTurn out;
  out.reasoning.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(head));
  const bool grounding = tokens[head] == m.begin_ground;
  const Token close = grounding ? m.end_ground : m.end_answer;
  std::size_t end = head + 1;
  while (end < tokens.size() && tokens[end] != close) ++end;
  if (end == tokens.size())
    throw ParseError(std::string("unterminated ") +
                     (grounding ? "grounding" : "answer") + " tail");
  if (end + 1 != tokens.size())
    throw ParseError("tokens after the structured tail");
  std::span<const Token> body = tokens.subspan(head + 1, end - head - 1);

  if (!grounding) {
    if (body.empty()) throw ParseError("empty answer");
    out.mode = AnswerOutput{TokenList(body.begin(), body.end())};
    return out;
  }

  static const std::regex kGround(
      R"(^\s*img:(\d+)\s*box:\s*([0-9]*\.?[0-9]+)\s*,\s*([0-9]*\.?[0-9]+)\s*,)"
      R"(\s*([0-9]*\.?[0-9]+)\s*,\s*([0-9]*\.?[0-9]+)\s*$)");
  const std::string text = vocab.render(body);
  std::smatch mt;
  if (!std::regex_match(text, mt, kGround))
    throw ParseError("malformed grounding tail '" + text + "'");
  GroundingPrediction g;
  g.ref_image = std::stoul(mt[1].str());
  if (g.ref_image >= image_count)
    throw ParseError("grounding references image " + mt[1].str() + " but only " +
                     std::to_string(image_count) + " are in the history");
  g.bbox = clamp_bbox({std::stod(mt[2].str()), std::stod(mt[3].str()),
                       std::stod(mt[4].str()), std::stod(mt[5].str())});
  if (g.bbox.x0 > g.bbox.x1 || g.bbox.y0 > g.bbox.y1)
    throw ParseError("inverted grounding box");
  out.mode = g;
  return out;
}

// Literal grounding tail, coordinates quantized to two decimals.
inline std::string format_grounding(std::size_t ref_image, const BBox& b) {
  char buf[128];
  std::snprintf(buf, sizeof buf,
                "BEGIN_GROUND img:%zu box:%.2f,%.2f,%.2f,%.2f END_GROUND",
                ref_image, b.x0, b.y0, b.x1, b.y1);
  return buf;
}

// New image whose provenance is crop-of(image, bbox). Pixel work (or grid
// snapping) happens wherever the image is resolved.
inline ImageRef crop_zoom(const ImageRef& image, const BBox& bbox,
                          std::uint64_t new_id) {
  return make_crop(image, new_id, clamp_bbox(bbox));
}

// Q^g for grounding turns, Q itself for answering turns.
inline TokenList prophet_query_select(bool grounding_mode, const TokenList& query,
                                      const Vocabulary& vocab,
                                      const std::string& grounding_template) {
  if (!grounding_mode) return query;
  std::string text = grounding_template;
  const std::string q = vocab.render(query);
  const auto at = text.find("<Q>");
  if (at != std::string::npos) text.replace(at, 3, q);
  return vocab.encode(text);
}

// The prophet sees the current image and its query only, never the search
// model's reasoning.
inline ModelContext prophet_context(const ImageRef& image, const TokenList& query) {
  ModelContext ctx;
  ctx.append_image(image);
  ctx.append_tokens(query, SpanRole::kQuery);
  return ctx;
}

struct ProphetResult {
  PropheticDraft draft;
  std::size_t passes = 0;
};

// Single-turn autoregressive prophet generation up to `draft_budget` tokens.
// EOS ends the draft and is not part of it; other terminators are kept.
template <ProbabilisticModel P>
ProphetResult invoke_prophet(const P& prophet, const ImageRef& image,
                             const TokenList& prophet_query, DraftMode mode,
                             const ControllerConfig& cfg, Rng& rng) {
  const Vocabulary& vocab = prophet.vocabulary();
  const auto& m = vocab.markers();
  const ModelContext ctx = prophet_context(image, prophet_query);
  ProphetResult res;
  res.draft.source_mode = mode;
  while (res.draft.tokens.size() < cfg.draft_budget) {
    const ProbabilityVector dist =
        prophet.next_distribution(ctx, res.draft.tokens);
    ++res.passes;
    const Token t = sample(dist, rng, cfg.decode.sampling);
    if (t == m.eos) break;
    res.draft.tokens.push_back(t);
    res.draft.p_p.push_back(dist.at(t));
    if (vocab.is_terminator(t)) break;
  }
  res.draft.truncated = res.draft.tokens.size() >= cfg.draft_budget &&
                        !vocab.is_terminator(res.draft.tokens.back());
  if (mode == DraftMode::kGroundingVerification) {
    const bool leading_true =
        !res.draft.tokens.empty() && res.draft.tokens.front() == m.verdict_true;
    res.draft.verdict = leading_true;
  }
  return res;
}

// Detail / relocation tokens that follow the verdict marker; these are what
// the next reasoning segment is offered.
inline PropheticDraft carried_draft(const PropheticDraft& verification,
                                    const Vocabulary& vocab) {
  PropheticDraft out = verification;
  const auto& m = vocab.markers();
  if (!out.tokens.empty() &&
      (out.tokens.front() == m.verdict_true || out.tokens.front() == m.verdict_false)) {
    out.tokens.erase(out.tokens.begin());
    out.p_p.erase(out.p_p.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Traces

struct TurnOutput {
  int index = 0;
  TokenList tokens;  // C_i as emitted (controller-forced markers included)
  TokenList reasoning;
  TurnMode mode;
  ImageRef input_image;    // I_{i-1}
  ImageRef derived_image;  // I_i
  std::vector<DecodedSegment> decoded;
  bool forced = false;

  bool is_grounding() const { return std::holds_alternative<GroundingPrediction>(mode); }
  std::size_t accepted_prefix_len() const {
    std::size_t n = 0;
    for (const auto& d : decoded) n += d.accepted_prefix_len;
    return n;
  }
  std::size_t generated_len() const {
    std::size_t n = 0;
    for (const auto& d : decoded) n += d.generated_len;
    return n;
  }
};

struct ProphetCall {
  int turn = 0;
  PropheticDraft draft;
  ModelContext context;
};

struct AcceptanceLog {
  int turn = 0;
  DraftMode kind = DraftMode::kAnswerDrafting;
  AcceptanceRecord record;
};

struct EpisodeCounters {
  std::size_t drafted = 0;
  std::size_t accepted = 0;
  std::size_t discarded = 0;
  std::size_t generated = 0;
  std::size_t search_passes = 0;
  std::size_t prophet_passes = 0;
  std::size_t verify_passes = 0;
  std::size_t parse_failures = 0;
  std::size_t verify_only_segments = 0;

  friend bool operator==(const EpisodeCounters&, const EpisodeCounters&) = default;
};

enum class Termination { kAnswer, kBudget, kFailed };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::kAnswer: return "answer";
    case Termination::kBudget: return "budget";
    case Termination::kFailed: return "failed";
  }
  return "?";
}

struct EpisodeTrace {
  std::string episode_id;
  Method method = Method::kSeprod;
  std::uint64_t seed = 0;
  std::string difficulty;
  std::vector<TurnOutput> turns;
  std::vector<ProphetCall> prophet_calls;
  std::vector<AcceptanceLog> acceptance;
  std::optional<TokenList> final_answer;
  std::string final_answer_text;
  std::optional<bool> correct;
  EpisodeCounters counters;
  Termination terminated_by = Termination::kBudget;
  bool forced_answer = false;
  std::string failure;
  ModelContext history;
  std::vector<std::size_t> history_sizes;  // history length after each turn
  double search_seconds = 0.0;
  double prophet_seconds = 0.0;
};

// Independent random streams for one episode: search sampling never shares
// state with prophet sampling, so prophet activity cannot shift the search
// model's draws.
struct EpisodeRngs {
  Rng search;
  Rng prophet;

  static EpisodeRngs from_seed(std::uint64_t seed) {
    return {Rng(seed, 0), Rng(seed, 1)};
  }
};

struct MethodOptions {
  Method method = Method::kSeprod;
  bool grounding_verification = true;
  bool answer_drafting = true;

  bool uses_prophet() const {
    return method != Method::kSearchOnly && (grounding_verification || answer_drafting);
  }
};

namespace detail {

class Stopwatch {
 public:
  explicit Stopwatch(double& sink) : sink_(sink), start_(std::chrono::steady_clock::now()) {}
  ~Stopwatch() {
    sink_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  Stopwatch(const Stopwatch&) = delete;
  Stopwatch& operator=(const Stopwatch&) = delete;

 private:
  double& sink_;
  std::chrono::steady_clock::time_point start_;
};

template <ProbabilisticModel S, ProbabilisticModel P>
class EpisodeRunner {
 public:
  EpisodeRunner(const S& search, const P* prophet, const Episode& episode,
                const ControllerConfig& cfg, MethodOptions opts, EpisodeRngs& rngs)
      : search_(search),
        prophet_(prophet),
        episode_(episode),
        cfg_(cfg),
        opts_(opts),
        rngs_(rngs),
        vocab_(search.vocabulary()),
        markers_(vocab_.markers()) {
    if (opts_.uses_prophet()) {
      if (!prophet_) throw ContractViolation("method needs a prophet model");
      require_shared_vocabulary(vocab_, prophet_->vocabulary());
    }
    if (episode_.max_turns < 1) throw ConfigError("episode budget must be >= 1");
  }

  EpisodeTrace run() {
    trace_.episode_id = episode_.id;
    trace_.method = opts_.method;
    trace_.seed = episode_.seed;
    trace_.difficulty = episode_.difficulty;
    trace_.history.append_image(episode_.original_image);
    trace_.history.append_tokens(episode_.query, SpanRole::kQuery);
    images_.push_back(episode_.original_image);

    for (int turn = 1;; ++turn) {
      if (turn > episode_.max_turns) {
        forced_answer_turn(turn);
        trace_.terminated_by = Termination::kBudget;
        break;
      }
      const TurnResult r = search_turn(turn);
      if (r == TurnResult::kAnswered) {
        trace_.terminated_by = Termination::kAnswer;
        break;
      }
      if (r == TurnResult::kFailed) {
        forced_answer_turn(turn);
        trace_.terminated_by = Termination::kBudget;
        break;
      }
    }
    if (trace_.final_answer) {
      trace_.final_answer_text = vocab_.render(*trace_.final_answer);
      if (episode_.ground_truth)
        trace_.correct = trace_.final_answer_text == *episode_.ground_truth;
    }
    return std::move(trace_);
  }

 private:
  enum class TurnResult { kGrounded, kAnswered, kFailed };

  const ImageRef& latest() const { return images_.back(); }

  std::vector<Token> reasoning_stops() const {
    return {markers_.end_ground, markers_.begin_answer, markers_.end_answer, markers_.eos};
  }
  std::vector<Token> answer_stops() const {
    return {markers_.end_answer, markers_.end_ground, markers_.eos};
  }

  DecodedSegment decode(const ModelContext& ctx, const std::optional<PropheticDraft>& draft,
                        std::span<const Token> stops, int turn, DraftMode kind) {
    DecodedSegment seg;
    {
      Stopwatch sw(trace_.search_seconds);
      seg = decode_segment(search_, ctx, draft, cfg_.decode, rngs_.search, stops);
    }
    auto& c = trace_.counters;
    c.generated += seg.generated_len;
    c.search_passes += seg.search_passes;
    c.verify_passes += seg.verify_passes;
    c.verify_only_segments += seg.verify_only() ? 1 : 0;
    if (seg.acceptance) {
      c.drafted += seg.acceptance->drafted();
      c.accepted += seg.acceptance->accepted_count;
      c.discarded += seg.acceptance->discarded();
      trace_.acceptance.push_back({turn, kind, *seg.acceptance});
    }
    return seg;
  }

  PropheticDraft call_prophet(const ImageRef& image, bool grounding_mode, int turn) {
    const TokenList qp = prophet_query_select(grounding_mode, episode_.query, vocab_,
                                              cfg_.grounding_query_template);
    ProphetResult res;
    {
      Stopwatch sw(trace_.prophet_seconds);
      res = invoke_prophet(*prophet_, image, qp,
                           grounding_mode ? DraftMode::kGroundingVerification
                                          : DraftMode::kAnswerDrafting,
                           cfg_, rngs_.prophet);
    }
    trace_.counters.prophet_passes += res.passes;
    trace_.prophet_calls.push_back({turn, res.draft, prophet_context(image, qp)});
    return res.draft;
  }

  TurnResult search_turn(int turn) {
    std::optional<PropheticDraft> draft = std::move(carry_);
    carry_.reset();
    const auto stops = reasoning_stops();
    for (int attempt = 0; attempt < 2; ++attempt) {
      DecodedSegment seg = decode(trace_.history, attempt == 0 ? draft : std::nullopt,
                                  stops, turn, DraftMode::kGroundingVerification);
      if (!seg.tokens.empty() && seg.tokens.back() == markers_.begin_answer) {
        if (answer_turn(turn, std::move(seg), /*forced=*/false)) return TurnResult::kAnswered;
        ++trace_.counters.parse_failures;
        continue;
      }
      try {
        ParsedTurn parsed = parse_turn_output(seg.tokens, vocab_, images_.size());
        commit_grounding(turn, std::move(seg), std::move(parsed));
        return TurnResult::kGrounded;
      } catch (const ParseError&) {
        ++trace_.counters.parse_failures;
      }
    }
    return TurnResult::kFailed;
  }

  void commit_grounding(int turn, DecodedSegment seg, ParsedTurn parsed) {
    const auto& g = std::get<GroundingPrediction>(parsed.mode);
    const ImageRef input = latest();
    const ImageRef derived = crop_zoom(images_[g.ref_image], g.bbox, images_.size());

    TurnOutput out;
    out.index = turn;
    out.tokens = seg.tokens;
    out.reasoning = parsed.reasoning;
    out.mode = g;
    out.input_image = input;
    out.derived_image = derived;
    out.decoded.push_back(std::move(seg));

    TokenList tail(out.tokens.begin() + static_cast<std::ptrdiff_t>(out.reasoning.size()),
                   out.tokens.end());
    trace_.history.append_tokens(out.reasoning, SpanRole::kReasoning);
    trace_.history.append_tokens(std::move(tail), SpanRole::kGrounding);
    trace_.history.append_image(derived);
    images_.push_back(derived);

    if (opts_.method != Method::kSearchOnly && opts_.grounding_verification) {
      PropheticDraft verification = call_prophet(derived, /*grounding_mode=*/true, turn);
      if (opts_.method == Method::kNaive) {
        if (!verification.tokens.empty())
          trace_.history.append_tokens(verification.tokens, SpanRole::kPropheticPrefix);
      } else {
        PropheticDraft next = carried_draft(verification, vocab_);
        if (!next.empty()) carry_ = std::move(next);
      }
    }
    trace_.turns.push_back(std::move(out));
    trace_.history_sizes.push_back(trace_.history.size());
  }

  // Decodes A_i after the turn prefix (reasoning + BEGIN_ANSWER). Returns
  // false on a malformed answer tail when a retry is still allowed.
  bool answer_turn(int turn, DecodedSegment prefix_seg, bool forced) {
    TokenList prefix = prefix_seg.tokens;
    ModelContext ctx = trace_.history;
    ctx.append_tokens(prefix, SpanRole::kReasoning);

    std::optional<PropheticDraft> draft;
    if (opts_.method != Method::kSearchOnly && opts_.answer_drafting) {
      PropheticDraft answer = call_prophet(latest(), /*grounding_mode=*/false, turn);
      if (opts_.method == Method::kNaive) {
        if (!answer.tokens.empty())
          ctx.append_tokens(answer.tokens, SpanRole::kPropheticPrefix);
      } else if (!answer.empty()) {
        draft = std::move(answer);
      }
    }
    DecodedSegment seg = decode(ctx, draft, answer_stops(), turn, DraftMode::kAnswerDrafting);

    TokenList full = prefix;
    full.insert(full.end(), seg.tokens.begin(), seg.tokens.end());

    TurnOutput out;
    out.index = turn;
    out.tokens = full;
    out.input_image = latest();
    out.derived_image = latest();
    out.forced = forced;
    try {
      ParsedTurn parsed = parse_turn_output(full, vocab_, images_.size());
      if (!std::holds_alternative<AnswerOutput>(parsed.mode))
        throw ParseError("answer turn produced a grounding tail");
      out.reasoning = std::move(parsed.reasoning);
      out.mode = std::move(parsed.mode);
    } catch (const ParseError&) {
      if (!forced) return false;
      // Forced answers are best effort: every non-marker token after
      // BEGIN_ANSWER counts as the answer.
      TokenList answer;
      for (Token t : seg.tokens)
        if (!vocab_.is_terminator(t) && t != markers_.begin_ground &&
            t != markers_.begin_answer)
          answer.push_back(t);
      out.mode = AnswerOutput{std::move(answer)};
    }

    // Keep the consumed prefix segment's accounting on the turn.
    if (!prefix_seg.tokens.empty() && !forced) out.decoded.push_back(std::move(prefix_seg));
    out.decoded.push_back(std::move(seg));

    // ctx is the history plus the turn prefix and any injected prophet answer.
    trace_.history = std::move(ctx);
    trace_.history.append_tokens(
        TokenList(full.begin() + static_cast<std::ptrdiff_t>(prefix.size()), full.end()),
        SpanRole::kAnswer);

    trace_.final_answer = std::get<AnswerOutput>(out.mode).answer;
    trace_.turns.push_back(std::move(out));
    trace_.history_sizes.push_back(trace_.history.size());
    return true;
  }

  void forced_answer_turn(int turn) {
    trace_.forced_answer = true;
    DecodedSegment prefix;
    prefix.tokens = {markers_.begin_answer};
    answer_turn(turn, std::move(prefix), /*forced=*/true);
  }

  const S& search_;
  const P* prophet_;
  const Episode& episode_;
  const ControllerConfig& cfg_;
  MethodOptions opts_;
  EpisodeRngs& rngs_;
  const Vocabulary& vocab_;
  const ReservedMarkers& markers_;
  EpisodeTrace trace_;
  std::vector<ImageRef> images_;
  std::optional<PropheticDraft> carry_;
};

}  // namespace detail

template <ProbabilisticModel S, ProbabilisticModel P>
EpisodeTrace run_episode_with(const S& search, const P* prophet, const Episode& episode,
                              const ControllerConfig& cfg, MethodOptions opts,
                              EpisodeRngs& rngs) {
  try {
    return detail::EpisodeRunner<S, P>(search, prophet, episode, cfg, opts, rngs).run();
  } catch (const BackendError& e) {
    EpisodeTrace failed;
    failed.episode_id = episode.id;
    failed.method = opts.method;
    failed.seed = episode.seed;
    failed.difficulty = episode.difficulty;
    failed.terminated_by = Termination::kFailed;
    failed.failure = e.what();
    return failed;
  }
}

// SeProD: prophetic acceptance for grounding verification and answer drafting
// (each switchable through cfg for the component ablations).
template <ProbabilisticModel S, ProbabilisticModel P>
EpisodeTrace run_episode(const S& search, const P& prophet, const Episode& episode,
                         const ControllerConfig& cfg, EpisodeRngs& rngs) {
  return run_episode_with(search, &prophet, episode, cfg,
                          {Method::kSeprod, cfg.grounding_verification, cfg.answer_drafting},
                          rngs);
}

template <ProbabilisticModel S>
EpisodeTrace run_episode_search_only(const S& search, const Episode& episode,
                                     const ControllerConfig& cfg, EpisodeRngs& rngs) {
  return run_episode_with<S, S>(search, nullptr, episode, cfg,
                                {Method::kSearchOnly, false, false}, rngs);
}

// Prophet output enters the search model's input context as a
// prophetic-prefix span instead of passing through acceptance.
template <ProbabilisticModel S, ProbabilisticModel P>
EpisodeTrace run_episode_naive(const S& search, const P& prophet, const Episode& episode,
                               const ControllerConfig& cfg, EpisodeRngs& rngs) {
  return run_episode_with(search, &prophet, episode, cfg,
                          {Method::kNaive, cfg.grounding_verification, cfg.answer_drafting},
                          rngs);
}

}  // namespace seprod
