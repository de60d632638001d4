#pragma once

// Probabilistic model contract shared by search and prophet models: tokens,
// vocabularies, multimodal contexts, next-token distributions and the batch
// scoring call that makes parallel draft verification possible.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <compare>
#include <concepts>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "seprod/errors.hpp"

namespace seprod {

struct Token {
  std::int32_t id = 0;

  friend auto operator<=>(const Token&, const Token&) = default;
};

using TokenList = std::vector<Token>;

// ---------------------------------------------------------------------------
// Vocabulary

struct ReservedMarkers {
  Token begin_ground;
  Token end_ground;
  Token begin_answer;
  Token end_answer;
  Token eos;
  Token verdict_true;
  Token verdict_false;
};

class Vocabulary {
 public:
  Vocabulary() = default;

  // Builds a vocabulary from id-ordered surfaces. The reserved markers are
  // located by their literal names and must all be present and distinct.
  explicit Vocabulary(std::vector<std::string> surfaces)
      : surfaces_(std::move(surfaces)) {
    if (surfaces_.empty()) throw ConfigError("vocabulary must be non-empty");
    for (std::size_t i = 0; i < surfaces_.size(); ++i) {
      if (surfaces_[i].empty())
        throw ConfigError("vocabulary surface " + std::to_string(i) +
                          " is empty");
      auto [it, inserted] =
          index_.emplace(surfaces_[i], static_cast<std::int32_t>(i));
      if (!inserted)
        throw ConfigError("duplicate vocabulary surface '" + surfaces_[i] +
                          "'");
      max_surface_len_ = std::max(max_surface_len_, surfaces_[i].size());
    }
    static constexpr const char* kMarkerNames[] = {
        "BEGIN_GROUND", "END_GROUND",   "BEGIN_ANSWER", "END_ANSWER",
        "EOS",          "VERDICT_TRUE", "VERDICT_FALSE"};
    std::size_t present = 0;
    for (const char* name : kMarkerNames) present += find(name).has_value();
    if (present == std::size(kMarkerNames)) {
      markers_ = ReservedMarkers{require("BEGIN_GROUND"), require("END_GROUND"),
                                 require("BEGIN_ANSWER"), require("END_ANSWER"),
                                 require("EOS"),          require("VERDICT_TRUE"),
                                 require("VERDICT_FALSE")};
    } else if (present != 0) {
      throw ConfigError("vocabulary defines only some reserved markers");
    }
    unk_ = find("<unk>");
  }

  // Plain token-level vocabularies (decoder tests) may omit every marker; the
  // search controller requires all of them.
  bool has_markers() const { return markers_.has_value(); }

  std::size_t size() const { return surfaces_.size(); }
  const ReservedMarkers& markers() const {
    if (!markers_) throw ConfigError("vocabulary has no reserved markers");
    return *markers_;
  }
  bool contains(Token t) const {
    return t.id >= 0 && static_cast<std::size_t>(t.id) < surfaces_.size();
  }

  const std::string& surface(Token t) const {
    if (!contains(t))
      throw ContractViolation("token id " + std::to_string(t.id) +
                              " outside vocabulary of size " +
                              std::to_string(size()));
    return surfaces_[static_cast<std::size_t>(t.id)];
  }

  std::optional<Token> find(std::string_view s) const {
    auto it = index_.find(std::string(s));
    if (it == index_.end()) return std::nullopt;
    return Token{it->second};
  }

  Token require(std::string_view s) const {
    auto t = find(s);
    if (!t) throw ConfigError("vocabulary lacks '" + std::string(s) + "'");
    return *t;
  }

  bool is_terminator(Token t) const {
    return markers_ && (t == markers_->end_ground ||
                        t == markers_->end_answer || t == markers_->eos);
  }

  // Greedy longest-prefix tokenization over surfaces, whitespace skipped.
  // Characters no surface covers become <unk> (or are rejected when the
  // vocabulary has no <unk> entry).
  TokenList encode(std::string_view text) const {
    TokenList out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      if (std::isspace(static_cast<unsigned char>(text[pos]))) {
        ++pos;
        continue;
      }
      std::size_t best_len = 0;
      std::int32_t best_id = -1;
      const std::size_t limit = std::min(max_surface_len_, text.size() - pos);
      for (std::size_t len = limit; len > 0; --len) {
        auto it = index_.find(std::string(text.substr(pos, len)));
        if (it != index_.end()) {
          best_len = len;
          best_id = it->second;
          break;
        }
      }
      if (best_len == 0) {
        if (!unk_)
          throw ContractViolation("cannot tokenize '" +
                                  std::string(text.substr(pos)) + "'");
        std::size_t end = pos;
        while (end < text.size() &&
               !std::isspace(static_cast<unsigned char>(text[end])))
          ++end;
        out.push_back(*unk_);
        pos = end;
        continue;
      }
      out.push_back(Token{best_id});
      pos += best_len;
    }
    return out;
  }

  // Space-joined surfaces with the grounding grammar's glue rules, so that
  // "box:" "0.25" "," "0.5" renders as "box:0.25,0.5".
  std::string render(std::span<const Token> tokens) const {
    std::string out;
    bool glue_next = true;
    for (Token t : tokens) {
      const std::string& s = surface(t);
      const bool glue_prev = s == "," || s == ":" || s == "?" || s == "." ||
                             s == "/";
      if (!glue_next && !glue_prev) out.push_back(' ');
      out += s;
      glue_next = s == "box:" || s == "," || s == "/";
    }
    return out;
  }

  const std::vector<std::string>& surfaces() const { return surfaces_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.surfaces_ == b.surfaces_;
  }

 private:
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, std::int32_t> index_;
  std::optional<ReservedMarkers> markers_;
  std::optional<Token> unk_;
  std::size_t max_surface_len_ = 0;
};

// ---------------------------------------------------------------------------
// Probability vectors

inline constexpr double kSimplexTolerance = 1e-6;

class ProbabilityVector {
 public:
  ProbabilityVector() = default;

  // Validates the simplex invariant.
  explicit ProbabilityVector(std::vector<double> probs)
      : probs_(std::move(probs)) {
    if (probs_.empty()) throw DomainError("empty probability vector");
    double sum = 0.0;
    for (double p : probs_) {
      if (!(p >= 0.0) || !std::isfinite(p))
        throw DomainError("probability entries must be finite and >= 0");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kSimplexTolerance)
      throw DomainError("probabilities sum to " + std::to_string(sum));
  }

  // Normalizes non-negative weights; all-zero weights are degenerate.
  static ProbabilityVector from_weights(std::vector<double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w))
        throw DomainError("weights must be finite and >= 0");
      total += w;
    }
    if (total <= 0.0) throw DegenerateDistribution("all-zero weights");
    for (double& w : weights) w /= total;
    return ProbabilityVector(std::move(weights));
  }

  static ProbabilityVector uniform(std::size_t n) {
    return ProbabilityVector(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }

  std::size_t size() const { return probs_.size(); }
  double operator[](Token t) const { return at(t); }
  double at(Token t) const {
    if (t.id < 0 || static_cast<std::size_t>(t.id) >= probs_.size())
      throw ContractViolation("token " + std::to_string(t.id) +
                              " outside distribution of size " +
                              std::to_string(probs_.size()));
    return probs_[static_cast<std::size_t>(t.id)];
  }
  std::span<const double> values() const { return probs_; }

  friend bool operator==(const ProbabilityVector&,
                         const ProbabilityVector&) = default;

 private:
  std::vector<double> probs_;
};

// ---------------------------------------------------------------------------
// Multimodal context

struct BBox {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct CropOrigin;

// Opaque image handle. Originals carry no crop origin; every crop points at
// the image it was cut from, so lineage always ends at an original.
struct ImageRef {
  std::uint64_t id = 0;
  std::shared_ptr<const CropOrigin> crop;

  bool is_original() const { return crop == nullptr; }
  const ImageRef& root() const;
  int depth() const;
  const ImageRef* parent() const;

  friend bool operator==(const ImageRef& a, const ImageRef& b);
};

struct CropOrigin {
  ImageRef parent;
  BBox bbox;
};

inline const ImageRef* ImageRef::parent() const {
  return crop ? &crop->parent : nullptr;
}

inline const ImageRef& ImageRef::root() const {
  const ImageRef* cur = this;
  while (cur->crop) cur = &cur->crop->parent;
  return *cur;
}

inline int ImageRef::depth() const {
  int d = 0;
  for (const ImageRef* cur = this; cur->crop; cur = &cur->crop->parent) ++d;
  return d;
}

inline bool operator==(const ImageRef& a, const ImageRef& b) {
  if (a.id != b.id) return false;
  if (!a.crop || !b.crop) return a.crop == b.crop;
  return a.crop->bbox == b.crop->bbox && a.crop->parent == b.crop->parent;
}

inline ImageRef make_crop(const ImageRef& parent, std::uint64_t id,
                          const BBox& bbox) {
  return ImageRef{id, std::make_shared<const CropOrigin>(CropOrigin{parent, bbox})};
}

enum class SpanRole { kQuery, kReasoning, kGrounding, kAnswer, kPropheticPrefix };

inline const char* to_string(SpanRole r) {
  switch (r) {
    case SpanRole::kQuery: return "query";
    case SpanRole::kReasoning: return "reasoning";
    case SpanRole::kGrounding: return "grounding";
    case SpanRole::kAnswer: return "answer";
    case SpanRole::kPropheticPrefix: return "prophetic-prefix";
  }
  return "?";
}

// Output spans are what the model itself produced; query and injected
// prophetic-prefix spans are inputs.
inline bool is_output_role(SpanRole r) {
  return r == SpanRole::kReasoning || r == SpanRole::kGrounding ||
         r == SpanRole::kAnswer;
}

struct TokenSpan {
  TokenList tokens;
  SpanRole role = SpanRole::kReasoning;

  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

using ContextSegment = std::variant<ImageRef, TokenSpan>;

// Append-only, generation-ordered history.
class ModelContext {
 public:
  ModelContext() = default;
  ModelContext(std::initializer_list<ContextSegment> segs) : segments_(segs) {}

  void append(ContextSegment seg) { segments_.push_back(std::move(seg)); }
  void append_image(ImageRef img) { segments_.emplace_back(std::move(img)); }
  void append_tokens(TokenList tokens, SpanRole role) {
    segments_.emplace_back(TokenSpan{std::move(tokens), role});
  }

  const std::vector<ContextSegment>& segments() const { return segments_; }
  std::size_t size() const { return segments_.size(); }
  bool empty() const { return segments_.empty(); }

  std::vector<ImageRef> images() const {
    std::vector<ImageRef> out;
    for (const auto& s : segments_)
      if (const auto* img = std::get_if<ImageRef>(&s)) out.push_back(*img);
    return out;
  }

  // True when `prefix` is a segment-wise prefix of this context.
  bool extends(const ModelContext& prefix) const {
    if (prefix.size() > size()) return false;
    return std::equal(prefix.segments_.begin(), prefix.segments_.end(),
                      segments_.begin());
  }

 private:
  std::vector<ContextSegment> segments_;

  friend bool operator==(const ModelContext&, const ModelContext&) = default;
};

// ---------------------------------------------------------------------------
// Model contract

// Batch scoring result: probs[j] = p(tokens[j] | ctx, tokens[<j]) and
// dists[j] = p(. | ctx, tokens[<j]) for j = 0..n, i.e. one more distribution
// than tokens (the position after the last scored token). floored[j] is set
// when a backend did not report tokens[j] and its probability was floored.
struct ContinuationScores {
  std::vector<double> probs;
  std::vector<ProbabilityVector> dists;
  std::vector<bool> floored;
};

template <typename M>
concept ProbabilisticModel = requires(const M& m, const ModelContext& ctx,
                                      std::span<const Token> toks) {
  { m.vocabulary() } -> std::convertible_to<const Vocabulary&>;
  { m.next_distribution(ctx, toks) } -> std::same_as<ProbabilityVector>;
  { m.score_continuation(ctx, toks) } -> std::same_as<ContinuationScores>;
};

// Runtime-polymorphic model. Implementations must be safe for concurrent
// const calls unless exclusive() returns true.
class Model {
 public:
  virtual ~Model() = default;

  virtual const Vocabulary& vocabulary() const = 0;

  // p(. | ctx, continuation). Deterministic for fixed model state and input.
  virtual ProbabilityVector next_distribution(
      const ModelContext& ctx, std::span<const Token> continuation) const = 0;

  ProbabilityVector next_distribution(const ModelContext& ctx) const {
    return next_distribution(ctx, std::span<const Token>{});
  }

  // One call scoring every position. The default walks positions with
  // next_distribution; implementations override it with a real batch path.
  virtual ContinuationScores score_continuation(
      const ModelContext& ctx, std::span<const Token> tokens) const {
    if (tokens.empty())
      throw ContractViolation("score_continuation needs a non-empty continuation");
    ContinuationScores out;
    out.probs.reserve(tokens.size());
    out.dists.reserve(tokens.size() + 1);
    for (std::size_t j = 0; j <= tokens.size(); ++j) {
      out.dists.push_back(next_distribution(ctx, tokens.first(j)));
      if (j < tokens.size()) out.probs.push_back(out.dists.back().at(tokens[j]));
    }
    out.floored.assign(tokens.size(), false);
    return out;
  }

  virtual bool exclusive() const { return false; }
};

static_assert(ProbabilisticModel<Model>);

// Shared-vocabulary precondition for a search/prophet pair.
inline void require_shared_vocabulary(const Vocabulary& a, const Vocabulary& b) {
  if (!(a == b))
    throw ContractViolation("search and prophet models do not share a vocabulary");
}

// ---------------------------------------------------------------------------
// Randomness

// Seeded generator with explicit streams so independent consumers (search
// sampling, prophet sampling) never perturb each other. Only engine output is
// used; distribution objects are avoided because their algorithms differ
// between standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream),
                      static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform in [0, n), rejection sampled.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw DomainError("uniform_index over empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

 private:
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Sampling and ranking

struct SamplingPolicy {
  enum class Kind { kGreedy, kMultinomial };
  Kind kind = Kind::kMultinomial;
  double temperature = 1.0;

  static SamplingPolicy greedy() { return {Kind::kGreedy, 1.0}; }
  static SamplingPolicy multinomial(double temperature = 1.0) {
    return {Kind::kMultinomial, temperature};
  }
};

// Greedy takes the argmax (lowest id on ties) and consumes no randomness;
// multinomial consumes exactly one uniform draw.
inline Token sample(std::span<const double> probs, Rng& rng,
                    const SamplingPolicy& policy) {
  if (probs.empty()) throw DegenerateDistribution("empty distribution");
  const bool any_mass = std::any_of(probs.begin(), probs.end(),
                                    [](double p) { return p > 0.0; });
  if (!any_mass) throw DegenerateDistribution("all-zero distribution");

  if (policy.kind == SamplingPolicy::Kind::kGreedy) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
      if (probs[i] > probs[best]) best = i;
    return Token{static_cast<std::int32_t>(best)};
  }

  if (!(policy.temperature > 0.0))
    throw DomainError("sampling temperature must be > 0");
  std::vector<double> weights(probs.begin(), probs.end());
  if (policy.temperature != 1.0) {
    const double inv_t = 1.0 / policy.temperature;
    for (double& w : weights) w = w > 0.0 ? std::pow(w, inv_t) : 0.0;
  }
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0))
    throw DegenerateDistribution("distribution vanished after temperature");

  const double u = rng.uniform01() * total;
  double cum = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    cum += weights[i];
    last_nonzero = i;
    if (u < cum) return Token{static_cast<std::int32_t>(i)};
  }
  return Token{static_cast<std::int32_t>(last_nonzero)};
}

inline Token sample(const ProbabilityVector& dist, Rng& rng,
                    const SamplingPolicy& policy) {
  return sample(dist.values(), rng, policy);
}

struct TokenRank {
  std::size_t rank = 0;
  double r = 0.0;  // rank / (V - 1), 0 for the top token
};

// rank = #tokens with strictly greater probability + #equal-probability
// tokens with a lower id.
inline TokenRank rank_of(std::span<const double> probs, Token token) {
  if (token.id < 0 || static_cast<std::size_t>(token.id) >= probs.size())
    throw ContractViolation("rank_of: token outside distribution");
  const double p = probs[static_cast<std::size_t>(token.id)];
  std::size_t rank = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > p ||
        (probs[i] == p && i < static_cast<std::size_t>(token.id)))
      ++rank;
  }
  const double denom = static_cast<double>(probs.size()) - 1.0;
  return {rank, probs.size() <= 1 ? 0.0 : static_cast<double>(rank) / denom};
}

inline TokenRank rank_of(const ProbabilityVector& dist, Token token) {
  return rank_of(dist.values(), token);
}

}  // namespace seprod
