#include <gtest/gtest.h>

#include "seprod/controller.hpp"
#include "seprod/synthetic.hpp"
#include "support/contracts.hpp"

using namespace seprod;

namespace {

const Vocabulary& V() { return synthetic_vocabulary(); }
TokenList enc(const std::string& s) { return V().encode(s); }

// Emits a fixed token script regardless of context, then EOS. Two scripts:
// one for verification queries (which contain VERDICT_TRUE), one otherwise.
class ScriptedModel final : public Model {
 public:
  ScriptedModel(TokenList verify_script, TokenList answer_script)
      : verify_(std::move(verify_script)), answer_(std::move(answer_script)) {}
  using Model::next_distribution;
  const Vocabulary& vocabulary() const override { return V(); }
  ProbabilityVector next_distribution(const ModelContext& ctx,
                                      std::span<const Token> cont) const override {
    bool verification = false;
    for (const auto& seg : ctx.segments())
      if (const auto* s = std::get_if<TokenSpan>(&seg))
        for (Token t : s->tokens) verification = verification || t == V().markers().verdict_true;
    const TokenList& script = verification ? verify_ : answer_;
    const Token next = cont.size() < script.size() ? script[cont.size()] : V().markers().eos;
    std::vector<double> p(V().size(), 0.0);
    p[static_cast<std::size_t>(next.id)] = 1.0;
    return ProbabilityVector(std::move(p));
  }

 private:
  TokenList verify_, answer_;
};

class ThrowingModel final : public Model {
 public:
  using Model::next_distribution;
  const Vocabulary& vocabulary() const override { return V(); }
  ProbabilityVector next_distribution(const ModelContext&, std::span<const Token>) const override {
    throw BackendError("backend went away");
  }
};

struct Fixture {
  std::shared_ptr<SyntheticEnv> env = std::make_shared<SyntheticEnv>();
  Episode add(const SyntheticTask& t, std::uint64_t seed, int max_turns = 8) {
    env->add(t);
    return make_episode(t, seed, "ep/" + std::to_string(t.uid), max_turns);
  }
};

ControllerConfig default_cfg() {
  ControllerConfig c;
  c.decode.tau = 0.3;
  return c;
}

}  // namespace

TEST(ParseTurn, GroundingTail) {
  const auto p = parse_turn_output(enc("the target is at top-left " + format_grounding(0, {0.25, 0, 0.75, 0.5})), V(), 1);
  const auto& g = std::get<GroundingPrediction>(p.mode);
  EXPECT_EQ(g.ref_image, 0u);
  EXPECT_EQ(g.bbox, (BBox{0.25, 0.0, 0.75, 0.5}));
  EXPECT_EQ(V().render(p.reasoning), "the target is at top-left");
}

TEST(ParseTurn, AnswerTail) {
  const auto p = parse_turn_output(enc("BEGIN_ANSWER red END_ANSWER"), V(), 1);
  EXPECT_EQ(V().render(std::get<AnswerOutput>(p.mode).answer), "red");
  EXPECT_TRUE(p.reasoning.empty());
}

TEST(ParseTurn, DanglingImageReference) {
  EXPECT_THROW(parse_turn_output(enc(format_grounding(3, {0, 0, 1, 1})), V(), 3), ParseError);
  EXPECT_NO_THROW(parse_turn_output(enc(format_grounding(2, {0, 0, 1, 1})), V(), 3));
}

TEST(ParseTurn, MalformedTails) {
  EXPECT_THROW(parse_turn_output(enc("the target is"), V(), 1), ParseError);
  EXPECT_THROW(parse_turn_output(enc("BEGIN_ANSWER red"), V(), 1), ParseError);
  EXPECT_THROW(parse_turn_output(enc("BEGIN_ANSWER END_ANSWER"), V(), 1), ParseError);
  EXPECT_THROW(parse_turn_output(enc("BEGIN_ANSWER red END_ANSWER red"), V(), 1), ParseError);
  EXPECT_THROW(parse_turn_output(enc("BEGIN_GROUND img:0 box:0.75,0.00,0.25,0.50 END_GROUND"), V(), 1),
               ParseError);
}

TEST(CropZoom, ProvenanceChain) {
  const ImageRef root{42, nullptr};
  const ImageRef c1 = crop_zoom(root, {0, 0, 0.5, 0.5}, 1);
  const ImageRef c2 = crop_zoom(c1, {0.5, 0.5, 1.0, 1.0}, 2);
  EXPECT_EQ(c2.crop->parent, c1);
  EXPECT_EQ(c2.root(), root);
  EXPECT_EQ(crop_zoom(root, {-1, -1, 2, 2}, 3).crop->bbox, (BBox{0, 0, 1, 1}));
}

TEST(ProphetQuery, SelectByMode) {
  const TokenList q = enc("what color is the circle ?");
  EXPECT_EQ(prophet_query_select(false, q, V(), kDefaultGroundingQueryTemplate), q);
  const TokenList qg = prophet_query_select(true, q, V(), kDefaultGroundingQueryTemplate);
  const std::string text = V().render(qg);
  EXPECT_NE(text.find(V().render(q)), std::string::npos);
  EXPECT_NE(text.find("VERDICT_TRUE"), std::string::npos);
}

TEST(InvokeProphet, VerdictFollowsTargetVisibility) {
  Fixture f;
  const SyntheticTask t = generate_task(11, Difficulty::kMedium);
  const Episode e = f.add(t, 11);
  const SyntheticModel prophet(f.env, CapabilityProfile::perfect(), ModelRole::kProphet);
  const ControllerConfig cfg = default_cfg();
  const TokenList qg = prophet_query_select(true, e.query, V(), cfg.grounding_query_template);
  const View full = f.env->resolve(e.original_image);
  const int good = *SyntheticEnv::correct_region(full);
  Rng rng(1);

  const auto hit = invoke_prophet(prophet, crop_zoom(e.original_image, region_bbox(good), 1), qg,
                                  DraftMode::kGroundingVerification, cfg, rng);
  ASSERT_TRUE(hit.draft.verdict.has_value());
  EXPECT_TRUE(*hit.draft.verdict);
  EXPECT_EQ(hit.passes, hit.draft.size() + 1);  // + the EOS pass

  int miss_region = -1;
  for (int r = 0; r < 9 && miss_region < 0; ++r) {
    const View v = f.env->resolve(crop_zoom(e.original_image, region_bbox(r), 1));
    if (!v.target_in_view()) miss_region = r;
  }
  ASSERT_GE(miss_region, 0);
  const auto miss = invoke_prophet(prophet, crop_zoom(e.original_image, region_bbox(miss_region), 1), qg,
                                   DraftMode::kGroundingVerification, cfg, rng);
  EXPECT_FALSE(*miss.draft.verdict);
  EXPECT_EQ(V().render(carried_draft(miss.draft, V()).tokens), "the target is not here");
}

TEST(InvokeProphet, AnswerModeHasNoVerdict) {
  Fixture f;
  const Episode e = f.add(trivial_task(), 1);
  const SyntheticModel prophet(f.env, CapabilityProfile::perfect(), ModelRole::kProphet);
  Rng rng(2);
  const auto r = invoke_prophet(prophet, e.original_image, e.query, DraftMode::kAnswerDrafting,
                                default_cfg(), rng);
  EXPECT_FALSE(r.draft.verdict.has_value());
  EXPECT_EQ(V().render(r.draft.tokens), *e.ground_truth);
  EXPECT_NO_THROW(r.draft.validate());
}

TEST(InvokeProphet, BudgetTruncates) {
  const ScriptedModel m(enc("VERDICT_FALSE the target is not here"), {});
  ControllerConfig cfg = default_cfg();
  cfg.draft_budget = 3;
  Rng rng(1);
  const auto r = invoke_prophet(m, ImageRef{1, nullptr}, enc("VERDICT_TRUE ?"),
                                DraftMode::kGroundingVerification, cfg, rng);
  EXPECT_EQ(r.draft.size(), 3u);
  EXPECT_TRUE(r.draft.truncated);
}

TEST(Episode, TrivialTaskAnswersInOneTurn) {
  Fixture f;
  const Episode e = f.add(trivial_task(), 5);
  const SyntheticModel search(f.env, CapabilityProfile::perfect(), ModelRole::kSearch);
  const SyntheticModel prophet(f.env, CapabilityProfile::perfect(), ModelRole::kProphet);
  EpisodeRngs rngs = EpisodeRngs::from_seed(5);
  const EpisodeTrace tr = run_episode(search, prophet, e, default_cfg(), rngs);
  ASSERT_EQ(tr.turns.size(), 1u);
  EXPECT_FALSE(tr.turns[0].is_grounding());
  EXPECT_EQ(tr.terminated_by, Termination::kAnswer);
  EXPECT_EQ(tr.correct, std::optional<bool>(true));
  EXPECT_TRUE(contracts::violations(tr, e, V()).empty());
}

TEST(Episode, BudgetForcesAnswerAfterNegativeVerdicts) {
  Fixture f;
  const Episode e = f.add(generate_task(3, Difficulty::kMedium), 3, /*max_turns=*/3);
  CapabilityProfile never_answers = CapabilityProfile::perfect();
  never_answers.answer_when_readable = 0.0;
  never_answers.answer_when_unreadable = 0.0;
  const SyntheticModel search(f.env, never_answers, ModelRole::kSearch);
  const ScriptedModel prophet(enc("VERDICT_FALSE the target is not here"), enc("red"));
  EpisodeRngs rngs = EpisodeRngs::from_seed(3);
  const EpisodeTrace tr = run_episode(search, prophet, e, default_cfg(), rngs);

  ASSERT_EQ(tr.turns.size(), 4u);
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(tr.turns[static_cast<std::size_t>(i)].is_grounding());
  EXPECT_FALSE(tr.turns[3].is_grounding());
  EXPECT_TRUE(tr.turns[3].forced);
  EXPECT_TRUE(tr.forced_answer);
  EXPECT_EQ(tr.terminated_by, Termination::kBudget);
  std::size_t verification_calls = 0;
  for (const auto& c : tr.prophet_calls)
    if (c.draft.source_mode == DraftMode::kGroundingVerification) {
      ++verification_calls;
      EXPECT_EQ(c.draft.verdict, std::optional<bool>(false));
    }
  EXPECT_EQ(verification_calls, 3u);
  EXPECT_TRUE(contracts::violations(tr, e, V()).empty());
}

TEST(Episode, UnparseableOutputFallsBackToForcedAnswer) {
  Fixture f;
  const Episode e = f.add(trivial_task(), 1);
  std::vector<double> eos(V().size(), 0.0);
  eos[static_cast<std::size_t>(V().markers().eos.id)] = 1.0;
  const TableModel search(V(), eos);
  EpisodeRngs rngs = EpisodeRngs::from_seed(1);
  const EpisodeTrace tr = run_episode_search_only(search, e, default_cfg(), rngs);
  EXPECT_EQ(tr.counters.parse_failures, 2u);
  ASSERT_EQ(tr.turns.size(), 1u);
  EXPECT_TRUE(tr.turns[0].forced);
  EXPECT_EQ(tr.terminated_by, Termination::kBudget);
  ASSERT_TRUE(tr.final_answer.has_value());
  EXPECT_TRUE(tr.final_answer->empty());
}

TEST(Episode, BackendFailureMarksEpisodeFailed) {
  Fixture f;
  const Episode e = f.add(trivial_task(), 1);
  const ThrowingModel search;
  EpisodeRngs rngs = EpisodeRngs::from_seed(1);
  const EpisodeTrace tr = run_episode_search_only(search, e, default_cfg(), rngs);
  EXPECT_EQ(tr.terminated_by, Termination::kFailed);
  EXPECT_NE(tr.failure.find("went away"), std::string::npos);
}

TEST(Episode, MissingProphetIsContractViolation) {
  Fixture f;
  const Episode e = f.add(trivial_task(), 1);
  const SyntheticModel search(f.env, CapabilityProfile::perfect(), ModelRole::kSearch);
  EpisodeRngs rngs = EpisodeRngs::from_seed(1);
  EXPECT_THROW((run_episode_with<SyntheticModel, SyntheticModel>(search, nullptr, e, default_cfg(),
                                                                 {Method::kSeprod, true, true}, rngs)),
               ContractViolation);
}

// Independent replay of one episode: grounding turns verify the new crop and
// carry the detail tokens into the next reasoning segment; answering turns
// draft the answer. Built from the public pieces only.
TEST(Episode, MatchesHandSimulatedTranscript) {
  Fixture f;
  const Episode e = f.add(generate_task(21, Difficulty::kMedium), 21);
  CapabilityProfile sp = CapabilityProfile::canonical_search();
  sp.grounding_accuracy = 0.5;
  const SyntheticModel search(f.env, sp, ModelRole::kSearch);
  const SyntheticModel prophet(f.env, CapabilityProfile::perfect(), ModelRole::kProphet);
  const ControllerConfig cfg = default_cfg();

  EpisodeRngs rngs = EpisodeRngs::from_seed(e.seed);
  const EpisodeTrace tr = run_episode(search, prophet, e, cfg, rngs);
  ASSERT_EQ(tr.counters.parse_failures, 0u) << "pick a seed without retries";
  ASSERT_EQ(tr.terminated_by, Termination::kAnswer);

  const auto& m = V().markers();
  Rng rs(e.seed, 0), rp(e.seed, 1);
  ModelContext hist;
  hist.append_image(e.original_image);
  hist.append_tokens(e.query, SpanRole::kQuery);
  std::vector<ImageRef> images = {e.original_image};
  std::optional<PropheticDraft> carry;
  std::vector<TokenList> turns;
  std::vector<PropheticDraft> drafts;
  EpisodeCounters c;
  auto tally = [&](const DecodedSegment& s) {
    c.generated += s.generated_len;
    c.search_passes += s.search_passes;
    c.verify_passes += s.verify_passes;
    c.verify_only_segments += s.verify_only();
    if (s.acceptance) {
      c.drafted += s.acceptance->drafted();
      c.accepted += s.acceptance->accepted_count;
      c.discarded += s.acceptance->discarded();
    }
  };
  const std::vector<Token> rstops = {m.end_ground, m.begin_answer, m.end_answer, m.eos};
  const std::vector<Token> astops = {m.end_answer, m.end_ground, m.eos};
  for (int turn = 1; turn <= e.max_turns; ++turn) {
    DecodedSegment seg = decode_segment(search, hist, carry, cfg.decode, rs, rstops);
    carry.reset();
    tally(seg);
    if (seg.tokens.back() == m.begin_answer) {
      ModelContext ctx = hist;
      ctx.append_tokens(seg.tokens, SpanRole::kReasoning);
      ProphetResult pr = invoke_prophet(prophet, images.back(), e.query, DraftMode::kAnswerDrafting, cfg, rp);
      c.prophet_passes += pr.passes;
      drafts.push_back(pr.draft);
      std::optional<PropheticDraft> d;
      if (!pr.draft.empty()) d = pr.draft;
      DecodedSegment a = decode_segment(search, ctx, d, cfg.decode, rs, astops);
      tally(a);
      TokenList full = seg.tokens;
      full.insert(full.end(), a.tokens.begin(), a.tokens.end());
      turns.push_back(full);
      break;
    }
    const ParsedTurn p = parse_turn_output(seg.tokens, V(), images.size());
    const auto& g = std::get<GroundingPrediction>(p.mode);
    const ImageRef crop = crop_zoom(images[g.ref_image], g.bbox, images.size());
    hist.append_tokens(p.reasoning, SpanRole::kReasoning);
    hist.append_tokens(TokenList(seg.tokens.begin() + static_cast<std::ptrdiff_t>(p.reasoning.size()),
                                 seg.tokens.end()),
                       SpanRole::kGrounding);
    hist.append_image(crop);
    images.push_back(crop);
    turns.push_back(seg.tokens);
    const TokenList qg = prophet_query_select(true, e.query, V(), cfg.grounding_query_template);
    ProphetResult pr = invoke_prophet(prophet, crop, qg, DraftMode::kGroundingVerification, cfg, rp);
    c.prophet_passes += pr.passes;
    drafts.push_back(pr.draft);
    PropheticDraft next = carried_draft(pr.draft, V());
    if (!next.empty()) carry = next;
  }

  ASSERT_EQ(tr.turns.size(), turns.size());
  for (std::size_t i = 0; i < turns.size(); ++i) EXPECT_EQ(tr.turns[i].tokens, turns[i]) << "turn " << i + 1;
  ASSERT_EQ(tr.prophet_calls.size(), drafts.size());
  for (std::size_t i = 0; i < drafts.size(); ++i) EXPECT_EQ(tr.prophet_calls[i].draft.tokens, drafts[i].tokens);
  EXPECT_EQ(tr.counters, c);
}

// With tau out of reach every draft is rejected at position 0, where the
// token comes from the same p_s with the same single draw, so the emitted
// turns are those of search-only decoding.
TEST(Episode, UnreachableTauReducesToSearchOnly) {
  Fixture f;
  const SyntheticModel search(f.env, CapabilityProfile::canonical_search(), ModelRole::kSearch);
  const SyntheticModel prophet(f.env, CapabilityProfile::canonical_prophet(), ModelRole::kProphet);
  ControllerConfig cfg = default_cfg();
  cfg.decode.tau = 1.01;
  for (std::uint64_t s = 100; s < 160; ++s) {
    const Episode e = f.add(generate_task(s, Difficulty::kMedium), s);
    EpisodeRngs a = EpisodeRngs::from_seed(s), b = EpisodeRngs::from_seed(s);
    const EpisodeTrace sep = run_episode(search, prophet, e, cfg, a);
    const EpisodeTrace base = run_episode_search_only(search, e, cfg, b);
    ASSERT_EQ(sep.turns.size(), base.turns.size()) << "seed " << s;
    for (std::size_t i = 0; i < sep.turns.size(); ++i) EXPECT_EQ(sep.turns[i].tokens, base.turns[i].tokens);
    EXPECT_EQ(sep.counters.accepted, 0u);
    EXPECT_EQ(sep.final_answer, base.final_answer);
  }
}

TEST(Episode, ProphetDisabledEqualsSearchOnly) {
  Fixture f;
  const Episode e = f.add(generate_task(8, Difficulty::kHard), 8);
  const SyntheticModel search(f.env, CapabilityProfile::canonical_search(), ModelRole::kSearch);
  const SyntheticModel prophet(f.env, CapabilityProfile::canonical_prophet(), ModelRole::kProphet);
  ControllerConfig cfg = default_cfg();
  cfg.grounding_verification = false;
  cfg.answer_drafting = false;
  EpisodeRngs a = EpisodeRngs::from_seed(8), b = EpisodeRngs::from_seed(8);
  const EpisodeTrace sep = run_episode(search, prophet, e, cfg, a);
  const EpisodeTrace base = run_episode_search_only(search, e, cfg, b);
  EXPECT_EQ(sep.counters, base.counters);
  EXPECT_TRUE(sep.prophet_calls.empty());
  EXPECT_EQ(sep.history, base.history);
}

TEST(Episode, NaiveInjectsPrefixWithoutAcceptance) {
  Fixture f;
  const SyntheticModel search(f.env, CapabilityProfile::canonical_search(), ModelRole::kSearch);
  const SyntheticModel prophet(f.env, CapabilityProfile::canonical_prophet(), ModelRole::kProphet);
  const ControllerConfig cfg = default_cfg();
  std::size_t injected = 0;
  for (std::uint64_t s = 200; s < 240; ++s) {
    const Episode e = f.add(generate_task(s, Difficulty::kMedium), s);
    EpisodeRngs a = EpisodeRngs::from_seed(s), b = EpisodeRngs::from_seed(s);
    const EpisodeTrace nv = run_episode_naive(search, prophet, e, cfg, a);
    const EpisodeTrace sp = run_episode(search, prophet, e, cfg, b);
    for (const auto& t : nv.turns) EXPECT_EQ(t.accepted_prefix_len(), 0u);
    EXPECT_TRUE(nv.acceptance.empty());
    for (const auto& seg : nv.history.segments())
      if (const auto* span = std::get_if<TokenSpan>(&seg); span && span->role == SpanRole::kPropheticPrefix)
        ++injected;
    // The first turn has no prophet input yet, so both methods agree on it.
    ASSERT_FALSE(nv.turns.empty());
    EXPECT_EQ(nv.turns[0].is_grounding(), sp.turns[0].is_grounding());
    if (nv.turns[0].is_grounding()) EXPECT_EQ(nv.turns[0].tokens, sp.turns[0].tokens);
    EXPECT_TRUE(contracts::violations(nv, e, V()).empty());
  }
  EXPECT_GT(injected, 0u);
}

TEST(Episode, NaiveWithEmptyProphetEqualsSearchOnly) {
  Fixture f;
  const Episode e = f.add(generate_task(9, Difficulty::kMedium), 9);
  const SyntheticModel search(f.env, CapabilityProfile::canonical_search(), ModelRole::kSearch);
  const ScriptedModel silent({}, {});
  EpisodeRngs a = EpisodeRngs::from_seed(9), b = EpisodeRngs::from_seed(9);
  const EpisodeTrace nv = run_episode_naive(search, silent, e, default_cfg(), a);
  const EpisodeTrace base = run_episode_search_only(search, e, default_cfg(), b);
  ASSERT_EQ(nv.turns.size(), base.turns.size());
  for (std::size_t i = 0; i < nv.turns.size(); ++i) EXPECT_EQ(nv.turns[i].tokens, base.turns[i].tokens);
  EXPECT_EQ(nv.history, base.history);
}

// Contracts hold over randomized episodes for every method and difficulty.
TEST(Episode, ContractsHoldAcrossMethods) {
  Fixture f;
  const SyntheticModel search(f.env, CapabilityProfile::canonical_search(), ModelRole::kSearch);
  CapabilityProfile pp = CapabilityProfile::canonical_prophet();
  pp.divergence = 0.2;
  const SyntheticModel prophet(f.env, pp, ModelRole::kProphet);
  Rng g(31337);
  for (int i = 0; i < 150; ++i) {
    const std::uint64_t s = 1000 + static_cast<std::uint64_t>(i);
    const auto d = static_cast<Difficulty>(g.uniform_index(3));
    const Episode e = f.add(generate_task(s, d), s, 1 + static_cast<int>(g.uniform_index(8)));
    ControllerConfig cfg = default_cfg();
    cfg.decode.tau = 0.05 + 0.5 * g.uniform01();
    const MethodOptions opts{static_cast<Method>(g.uniform_index(3)), g.bernoulli(0.8), g.bernoulli(0.8)};
    EpisodeRngs rngs = EpisodeRngs::from_seed(s);
    const EpisodeTrace tr = run_episode_with(search, &prophet, e, cfg, opts, rngs);
    for (const auto& v : contracts::violations(tr, e, V())) ADD_FAILURE() << v;
    EXPECT_LE(tr.turns.size(), static_cast<std::size_t>(e.max_turns) + 1);
    if (!tr.forced_answer) EXPECT_EQ(tr.terminated_by, Termination::kAnswer);
  }
}
