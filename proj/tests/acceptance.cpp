// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "seprod/harness.hpp"
#include "support/contracts.hpp"
#include "support/mock_backend.hpp"
#include "support/oracles.hpp"

using namespace seprod;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int n, const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("criterion %d %s: %s (%s)\n", n, name.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::size_t hw_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

ModelContext random_context(Rng& g, std::size_t V) {
  ModelContext c;
  c.append_image(ImageRef{1, nullptr});
  TokenList t;
  for (std::size_t i = 0, n = g.uniform_index(5); i < n; ++i)
    t.push_back(Token{static_cast<std::int32_t>(g.uniform_index(V))});
  c.append_tokens(t, SpanRole::kQuery);
  return c;
}

const std::vector<double> kTaus = {0.2, 0.25, 0.3, 0.35};

// ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  Rng g(20240601);
  std::size_t cases = 0, mismatches = 0, accepted_any = 0;
  for (; cases < 1500; ++cases) {
    const bool markers = g.bernoulli(0.5);
    const std::size_t V = markers ? 8 + g.uniform_index(16) : 2 + g.uniform_index(22);
    const Vocabulary vocab = toy_vocabulary(V, markers);
    const RandomToyModel search(vocab, g.uniform_index(1u << 30), 1 + g.uniform_index(3));
    const RandomToyModel other(vocab, g.uniform_index(1u << 30), 1 + g.uniform_index(3));
    const MixtureModel<RandomToyModel, RandomToyModel> prophet(search, other, g.uniform01());
    const ModelContext ctx = random_context(g, V);

    DecodeConfig cfg;
    cfg.tau = kTaus[g.uniform_index(kTaus.size())];
    cfg.alpha = g.bernoulli(0.6) ? AlphaPolicy::dynamic() : AlphaPolicy::fixed(g.uniform01());
    cfg.clamp_alpha = g.bernoulli(0.9);
    cfg.max_segment_tokens = 1 + g.uniform_index(12);
    Rng dr(g.uniform_index(1u << 30), 7);
    std::optional<PropheticDraft> draft;
    if (g.bernoulli(0.9)) draft = draw_draft(prophet, ctx, 1 + g.uniform_index(10), dr);
    const std::vector<Token> stops = default_stops(vocab);

    const std::uint64_t seed = g.uniform_index(1u << 30);
    Rng a(seed), b(seed);
    const DecodedSegment got = decode_segment(search, ctx, draft, cfg, a, stops);
    const DecodedSegment want = oracle_decode(search, ctx, draft, cfg, b, stops);
    const bool same = got.tokens == want.tokens && got.acceptance == want.acceptance &&
                      got.accepted_prefix_len == want.accepted_prefix_len &&
                      got.generated_len == want.generated_len;
    mismatches += same ? 0 : 1;
    accepted_any += got.accepted_prefix_len > 0;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 30.0 && accepted_any > 0,
          fmt("%zu cases, %zu mismatches, %zu with accepted prefixes, %.2fs", cases, mismatches,
              accepted_any, secs)};
}

Outcome parallel_fidelity() {
  Rng g(77);
  std::size_t toy_cases = 0, toy_bad = 0;
  for (; toy_cases < 500; ++toy_cases) {
    const std::size_t V = 2 + g.uniform_index(20);
    const Vocabulary vocab = toy_vocabulary(V);
    const RandomToyModel search(vocab, g.uniform_index(1u << 30), 1 + g.uniform_index(3));
    const RandomToyModel prophet(vocab, g.uniform_index(1u << 30), 1);
    const ModelContext ctx = random_context(g, V);
    Rng dr(toy_cases);
    const PropheticDraft d = draw_draft(prophet, ctx, 1 + g.uniform_index(8), dr);
    DecodeConfig cfg;
    cfg.tau = kTaus[g.uniform_index(kTaus.size())];
    const AcceptanceRecord rec = verify_draft(search, ctx, d, cfg);
    for (std::size_t j = 0; j < rec.entries.size(); ++j) {
      const auto dist = search.next_distribution(ctx, std::span<const Token>(d.tokens).first(j));
      const std::vector<double> p(dist.values().begin(), dist.values().end());
      const double ps = p[static_cast<std::size_t>(d.tokens[j].id)];
      const auto& e = rec.entries[j];
      toy_bad += !(e.p_s == ps && e.rank == oracle::rank(p, static_cast<std::size_t>(d.tokens[j].id)));
    }
  }

  // Same comparison through the HTTP adapter. The remote path floors ids the
  // server leaves out, so the served model is kept strictly positive.
  const Vocabulary vocab = toy_vocabulary(12, true);
  const RandomToyModel sparse(vocab, 4242, 2);
  const UniformModel flat(vocab);
  const MixtureModel local(sparse, flat, 0.9);
  const RandomToyModel prophet(vocab, 99, 1);
  seprod::testing::MockBackend mock(local);
  const RemoteModel remote(mock.config());
  double worst = 0.0;
  std::size_t mock_cases = 0, rank_bad = 0;
  for (; mock_cases < 150; ++mock_cases) {
    const ModelContext ctx = random_context(g, vocab.size());
    Rng dr(1000 + mock_cases);
    const PropheticDraft d = draw_draft(prophet, ctx, 1 + g.uniform_index(8), dr);
    const AcceptanceRecord rec = verify_draft(remote, ctx, d, DecodeConfig{});
    for (std::size_t j = 0; j < rec.entries.size(); ++j) {
      const auto dist = local.next_distribution(ctx, std::span<const Token>(d.tokens).first(j));
      const double ps = dist.at(d.tokens[j]);
      worst = std::max(worst, std::abs(rec.entries[j].p_s - ps) / ps);
      const double s = oracle::blend(ps, d.p_p[j], rec.entries[j].alpha);
      worst = std::max(worst, std::abs(rec.entries[j].s - s) / s);
      rank_bad += rec.entries[j].rank != rank_of(dist, d.tokens[j]).rank;
    }
  }
  return {toy_bad == 0 && worst <= 1e-9 && rank_bad == 0,
          fmt("toy %zu drafts exact mismatches %zu; mock %zu drafts max rel err %.2e, rank mismatches %zu",
              toy_cases, toy_bad, mock_cases, worst, rank_bad)};
}

Outcome distribution_preservation() {
  // Mixed with uniform so no row is a point mass: every s stays below 1.
  const Vocabulary vocab = toy_vocabulary(4);
  const UniformModel flat(vocab);
  const RandomToyModel sparse_s(vocab, 555, 1), sparse_p(vocab, 777, 1);
  const MixtureModel search(sparse_s, flat, 0.8);
  const MixtureModel prophet(sparse_p, flat, 0.8);
  ModelContext ctx;
  ctx.append_tokens({Token{2}}, SpanRole::kQuery);
  DecodeConfig cfg;
  cfg.tau = 1.0;  // both models stay below 1, so s < 1 everywhere
  cfg.max_segment_tokens = 2;
  const std::vector<Token> none;

  // Exact law of two pure search-model steps.
  std::vector<double> expected(16, 0.0);
  const auto d0 = search.next_distribution(ctx);
  for (int a = 0; a < 4; ++a) {
    const TokenList pre = {Token{a}};
    const auto d1 = search.next_distribution(ctx, pre);
    for (int b = 0; b < 4; ++b) expected[static_cast<std::size_t>(a * 4 + b)] = d0.at(Token{a}) * d1.at(Token{b});
  }
  double max_p = 0.0;
  auto widen = [&](const ProbabilityVector& d) {
    for (double p : d.values()) max_p = std::max(max_p, p);
  };
  for (const auto* m : {static_cast<const Model*>(&search), static_cast<const Model*>(&prophet)}) {
    widen(m->next_distribution(ctx));
    for (int a = 0; a < 4; ++a) widen(m->next_distribution(ctx, TokenList{Token{a}}));
  }

  const std::size_t runs = 20000;
  std::vector<double> observed(16, 0.0);
  std::size_t accepted = 0;
  for (std::size_t i = 0; i < runs; ++i) {
    Rng dr(i, 3), rng(i, 0);
    const PropheticDraft d = draw_draft(prophet, ctx, 2, dr);
    const DecodedSegment seg = decode_segment(search, ctx, d, cfg, rng, none);
    accepted += seg.accepted_prefix_len;
    observed[static_cast<std::size_t>(seg.tokens[0].id * 4 + seg.tokens[1].id)] += 1.0;
  }
  const double pval = oracle::chi_square_p(observed, expected);

  // Passthrough: identical models, tau at the smallest draft probability.
  std::size_t pass_cases = 0, pass_bad = 0;
  Rng g(9);
  for (; pass_cases < 1000; ++pass_cases) {
    const std::size_t V = 2 + g.uniform_index(30);
    const Vocabulary v = toy_vocabulary(V);
    const RandomToyModel m(v, g.uniform_index(1u << 30), 1 + g.uniform_index(3));
    const ModelContext c = random_context(g, V);
    Rng dr(pass_cases, 5);
    const PropheticDraft d = draw_draft(m, c, 1 + g.uniform_index(10), dr);
    DecodeConfig pc;
    pc.tau = *std::min_element(d.p_p.begin(), d.p_p.end());
    pc.alpha = g.bernoulli(0.5) ? AlphaPolicy::dynamic() : AlphaPolicy::fixed(g.uniform01());
    pc.max_segment_tokens = d.size();
    Rng rng(pass_cases);
    const DecodedSegment seg = decode_segment(m, c, d, pc, rng, none);
    pass_bad += seg.tokens != d.tokens || seg.accepted_prefix_len != d.size();
  }
  return {max_p < 1.0 && accepted == 0 && pval >= 0.01 && pass_bad == 0,
          fmt("chi-square p=%.4f over %zu runs, %zu accepted tokens; passthrough %zu cases, %zu mismatches",
              pval, runs, accepted, pass_cases, pass_bad)};
}

Outcome alpha_policy() {
  const AlphaPolicy dyn = AlphaPolicy::dynamic();
  bool ok = compute_alpha(0.0, dyn) == 0.5 && compute_alpha(0.5, dyn) == 0.0 &&
            compute_alpha(1.0, dyn) == 0.0 && raw_alpha(1.0, dyn) == -0.5;
  double prev = 2.0;
  std::size_t grid_bad = 0;
  for (int i = 0; i <= 10000; ++i) {
    const double r = i / 10000.0;
    const double a = compute_alpha(r, dyn);
    grid_bad += a > prev || a < 0.0 || a > 1.0 || std::abs(a - oracle::dynamic_alpha(r)) > 1e-15;
    prev = a;
  }
  const AlphaPolicy fx = AlphaPolicy::parse("fixed:0.7");
  for (double r : {0.0, 0.3, 1.0}) ok = ok && compute_alpha(r, fx) == 0.7;
  DecodeConfig unclamped;
  unclamped.clamp_alpha = false;
  ok = ok && compute_alpha(0.9, unclamped) == 0.5 - 0.9;
  return {ok && grid_bad == 0, fmt("alpha(0)=%.2f alpha(0.5)=%.2f, %zu grid violations, fixed:0.7 holds",
                                   compute_alpha(0.0, dyn), compute_alpha(0.5, dyn), grid_bad)};
}

// ---------------------------------------------------------------------------
// Episode-level criteria share one benchmark run.

struct Suite {
  RunSpec spec;
  BenchmarkResult res;
  std::vector<std::pair<EpisodeTrace, Episode>> sweep;  // divergence sweep traces
  std::vector<DivergencePoint> curve;
  double seconds = 0.0;
};

Suite& suite() {
  static Suite s = [] {
    Suite out;
    out.spec.methods = {"seprod", "search-only", "naive", "seprod-no-answer", "seprod-no-ground"};
    out.spec.difficulties = {Difficulty::kEasy, Difficulty::kMedium, Difficulty::kHard};
    out.spec.episodes = 500;
    out.spec.workers = hw_workers();
    const auto t0 = Clock::now();
    out.res = run_benchmark(out.spec);
    out.seconds = seconds_since(t0);
    return out;
  }();
  return s;
}

Outcome divergence_monotone() {
  Suite& s = suite();
  DivergenceSweepConfig cfg;
  s.curve = divergence_sweep({0.0, 0.25, 0.5, 0.75, 1.0}, cfg, 200, 4000, [&](const EpisodeTrace& tr) {
    const SyntheticTask task = generate_task(tr.seed, cfg.difficulty);
    s.sweep.emplace_back(tr, make_episode(task, tr.seed, tr.episode_id, cfg.max_turns));
  });
  bool ok = true;
  std::string detail;
  for (std::size_t i = 0; i < s.curve.size(); ++i) {
    if (i > 0 && s.curve[i].acceptance_rate > s.curve[i - 1].acceptance_rate) ok = false;
    detail += fmt("%sdelta=%.2f:%.4f", i ? " " : "", s.curve[i].delta, s.curve[i].acceptance_rate);
  }
  return {ok, detail + fmt(", %zu episodes per point", s.curve[0].episodes)};
}

// correct[arm][difficulty][episode index]
using Correctness = std::map<std::string, std::map<std::string, std::vector<bool>>>;

Correctness correctness() {
  Correctness out;
  for (const auto& e : suite().res.episodes) out[e.arm.label][e.difficulty].push_back(e.trace.correct.value_or(false));
  return out;
}

std::pair<std::size_t, std::size_t> discordant(const std::vector<bool>& hi, const std::vector<bool>& lo) {
  std::size_t w = 0, l = 0;
  for (std::size_t i = 0; i < hi.size(); ++i) {
    w += hi[i] && !lo[i];
    l += !hi[i] && lo[i];
  }
  return {w, l};
}

double mean(const std::vector<bool>& v) {
  return v.empty() ? 0.0 : static_cast<double>(std::count(v.begin(), v.end(), true)) / v.size();
}

Outcome capability_improvement() {
  const double secs = suite().seconds;
  const Correctness c = correctness();
  bool ok = secs < 300.0;
  std::string detail;
  for (const char* d : {"easy", "medium", "hard"}) {
    const auto& sp = c.at("seprod").at(d);
    const auto& so = c.at("search-only").at(d);
    const auto [w, l] = discordant(sp, so);
    const double p = oracle::sign_test_p(w, l);
    ok = ok && sp.size() >= 500 && mean(sp) > mean(so) && p < 0.01;
    detail += fmt("%s %.3f vs %.3f (n=%zu, p=%.2e); ", d, mean(sp), mean(so), sp.size(), p);
  }
  return {ok, detail + fmt("suite %.1fs", secs)};
}

Outcome ablation_ordering() {
  const Correctness c = correctness();
  const std::vector<std::pair<std::string, std::string>> order = {{"seprod", "seprod-no-answer"},
                                                                  {"seprod", "seprod-no-ground"},
                                                                  {"seprod-no-answer", "naive"},
                                                                  {"seprod-no-ground", "naive"}};
  bool ok = true;
  std::string detail, reversals;
  for (const char* d : {"easy", "medium", "hard"}) {
    detail += fmt("%s:", d);
    for (const char* arm : {"seprod", "seprod-no-answer", "seprod-no-ground", "naive"})
      detail += fmt(" %s=%.3f", arm, mean(c.at(arm).at(d)));
    detail += "; ";
    for (const auto& [hi, lo] : order) {
      const auto [w, l] = discordant(c.at(hi).at(d), c.at(lo).at(d));
      // Reject "hi >= lo" only when lo is significantly better.
      const double p = oracle::sign_test_p(l, w);
      if (p < 0.05) {
        ok = false;
        reversals += fmt(" %s<%s on %s (p=%.3g)", hi.c_str(), lo.c_str(), d, p);
      }
    }
  }
  return {ok, detail + (reversals.empty() ? "no significant reversals" : "reversals:" + reversals)};
}

Outcome controller_contracts() {
  const Suite& s = suite();
  std::size_t checked = 0;
  std::vector<std::string> bad;
  for (const auto& [tr, ep] : s.sweep) {
    ++checked;
    for (auto& v : contracts::violations(tr, ep, synthetic_vocabulary())) bad.push_back(v);
  }
  for (const auto& e : s.res.episodes) {
    const auto slash = e.trace.episode_id.rfind('/');
    const std::size_t index = std::stoul(e.trace.episode_id.substr(slash + 1));
    const SyntheticTask task =
        generate_task(s.spec.seed + index % s.spec.episodes, parse_difficulty(e.difficulty));
    const Episode ep = make_episode(task, e.trace.seed, e.trace.episode_id, s.spec.max_turns);
    ++checked;
    for (auto& v : contracts::violations(e.trace, ep, synthetic_vocabulary())) bad.push_back(v);
  }
  return {bad.empty() && checked > 0,
          fmt("%zu traces, %zu violations", checked, bad.size()) + (bad.empty() ? "" : "; first: " + bad[0])};
}

// Decode-level synthetic runs with fixed-length segments, so the baseline
// cost is measured by decoding the same segments without drafts.
Outcome speedup_accounting() {
  const double kappa = 0.4;
  const Vocabulary vocab = toy_vocabulary(16);
  const RandomToyModel search(vocab, 31, 1);
  const RandomToyModel other(vocab, 32, 1);
  std::string detail;
  bool ok = true;
  for (double lambda : {1.0, 0.8, 0.5, 0.2}) {
    const MixtureModel<RandomToyModel, RandomToyModel> prophet(search, other, lambda);
    DecodeConfig cfg;
    cfg.tau = 0.05;
    cfg.max_segment_tokens = 12;
    const std::vector<Token> none;
    Rng g(static_cast<std::uint64_t>(lambda * 1000));
    double base = 0, method = 0, drafted = 0, accepted = 0, full = 0, prophet_passes = 0;
    for (int i = 0; i < 3000; ++i) {
      const ModelContext ctx = random_context(g, vocab.size());
      Rng dr(static_cast<std::uint64_t>(i), 11), r1(static_cast<std::uint64_t>(i)), r2(static_cast<std::uint64_t>(i));
      const std::size_t len = 1 + g.uniform_index(12);
      const PropheticDraft d = draw_draft(prophet, ctx, len, dr);
      prophet_passes += static_cast<double>(len);
      const DecodedSegment plain = decode_segment(search, ctx, std::nullopt, cfg, r1, none);
      const DecodedSegment seg = decode_segment(search, ctx, d, cfg, r2, none);
      base += static_cast<double>(plain.search_passes);
      method += static_cast<double>(seg.search_passes + seg.verify_passes) + kappa * static_cast<double>(len);
      drafted += static_cast<double>(seg.acceptance->drafted());
      accepted += static_cast<double>(seg.acceptance->accepted_count);
      full += seg.verify_only() ? 1.0 : 0.0;
    }
    const double a = accepted / drafted, c = drafted / base;
    const double closed = oracle::closed_form_speedup(a, c, full / base, prophet_passes / base, kappa);
    const double measured = base / method;
    const double err = std::abs(measured / closed - 1.0);
    ok = ok && err <= 0.02;
    detail += fmt("a=%.3f c=%.3f measured %.4f closed %.4f; ", a, c, measured, closed);
  }

  // Episode traces: the same identity over the suite's SeProD episodes.
  std::vector<const EpisodeTrace*> sep;
  for (const auto& e : suite().res.episodes)
    if (e.arm.label == "seprod") sep.push_back(&e.trace);
  const SpeedupReport rep = closed_form_report(sep, CostModel{kappa});
  const double ep_measured = rep.emitted / rep.method_cost;
  const double ep_err = std::abs(ep_measured / rep.closed_form - 1.0);
  ok = ok && ep_err <= 0.02;
  detail += fmt("episodes a=%.3f c=%.3f measured %.4f closed %.4f; ", rep.acceptance_rate, rep.coverage,
                ep_measured, rep.closed_form);

  // Wall clock through the mock backend, prophet latency = kappa * search.
  const int latency = 20;
  auto env = std::make_shared<SyntheticEnv>();
  const SyntheticModel s_local(env, CapabilityProfile::canonical_search(), ModelRole::kSearch);
  const SyntheticModel p_local(env, CapabilityProfile::canonical_prophet(), ModelRole::kProphet);
  seprod::testing::MockOptions so, po;
  so.latency_ms = latency;
  po.latency_ms = static_cast<int>(kappa * latency);
  seprod::testing::MockBackend ms(s_local, so), mp(p_local, po);
  const RemoteModel rs(ms.config("search")), rp(mp.config("prophet"));
  RunSpec spec;
  spec.methods = {"seprod", "search-only"};
  spec.episodes = 16;
  spec.workers = 4;
  spec.kappa = kappa;
  std::vector<detail::PreparedTask> tasks;
  for (std::size_t i = 0; i < spec.episodes; ++i) {
    const SyntheticTask t = generate_task(9000 + i, Difficulty::kMedium);
    env->add(t);
    tasks.push_back({make_episode(t, t.seed, "", spec.max_turns), "medium"});
  }
  const std::vector<const RemoteModel*> prophets = {&rp};
  const auto eps = run_grid(spec, rs, prophets, tasks);
  const auto rows = summarize(spec.points(), eps, CostModel{kappa}, true);
  std::size_t failed = 0;
  for (const auto& e : eps) failed += e.trace.terminated_by == Termination::kFailed;
  for (const auto& r : rows) {
    if (r.method != "seprod") continue;
    const double err = std::abs(*r.wall_speedup / *r.speedup - 1.0);
    ok = ok && err <= 0.10 && failed == 0;
    detail += fmt("wall %.4f vs pass-count %.4f (%.1f%%, %zu failed)", *r.wall_speedup, *r.speedup, 100 * err, failed);
  }
  return {ok, detail};
}

Outcome reproducibility() {
  const fs::path root = fs::temp_directory_path() / ("seprod_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  RunSpec spec;
  spec.methods = {"seprod", "search-only", "naive", "seprod-no-ground"};
  spec.difficulties = {Difficulty::kEasy, Difficulty::kHard};
  spec.episodes = 25;
  spec.repeats = 2;
  spec.taus = {0.25, 0.35};
  spec.alphas = {AlphaPolicy::dynamic(), AlphaPolicy::fixed(0.5)};
  spec.deltas = {0.0, 0.3};
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  std::vector<std::string> traces, summaries;
  for (std::size_t workers : {std::size_t{1}, hw_workers(), std::size_t{3}}) {
    spec.workers = workers;
    spec.out_dir = (root / std::to_string(traces.size())).string();
    run_benchmark(spec);
    traces.push_back(slurp(fs::path(spec.out_dir) / "traces.jsonl"));
    summaries.push_back(slurp(fs::path(spec.out_dir) / "summary.csv"));
  }
  fs::remove_all(root);
  bool ok = !traces[0].empty() && !summaries[0].empty();
  for (std::size_t i = 1; i < traces.size(); ++i) ok = ok && traces[i] == traces[0] && summaries[i] == summaries[0];
  return {ok, fmt("3 runs, %zu trace bytes, %zu summary bytes, identical=%s", traces[0].size(),
                  summaries[0].size(), ok ? "yes" : "no")};
}

}  // namespace

int main() {
  report(1, "oracle-equivalence", oracle_equivalence);
  report(2, "parallel-verification-fidelity", parallel_fidelity);
  report(3, "distribution-preservation", distribution_preservation);
  report(4, "alpha-policy", alpha_policy);
  report(5, "acceptance-divergence-monotonicity", divergence_monotone);
  report(6, "capability-asymmetry-improvement", capability_improvement);
  report(7, "ablation-ordering", ablation_ordering);
  report(8, "controller-contracts", controller_contracts);
  report(9, "speedup-accounting", speedup_accounting);
  report(10, "reproducibility", reproducibility);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
