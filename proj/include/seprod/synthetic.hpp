#pragma once

// Desk-scale visual-search world. An image is a grid of glyph cells; the
// query asks for the color of the one cell with a given shape. Crops snap to
// cell boundaries and raise the detail level, and a target is only legible
// once the detail level reaches the task's requirement.
//
// The toy models speak a tiny fixed grammar:
//
//   search:  the target is (at <region> | not here)
//              (BEGIN_GROUND img:<k> box:<x0>,<y0>,<x1>,<y1> END_GROUND
//              | BEGIN_ANSWER <color> END_ANSWER)
//   prophet: VERDICT_TRUE the target is at <region> EOS
//            VERDICT_FALSE the target is not here EOS      (verification)
//            <color> EOS                                   (answering)
//
// Regions are the nine half-size windows at stride 0.25. Anything off-grammar
// drops the model into a state that only emits EOS.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "seprod/controller.hpp"
#include "seprod/decoding.hpp"
#include "seprod/model.hpp"

namespace seprod {

// ---------------------------------------------------------------------------
// Alphabet and vocabulary

inline constexpr std::array<const char*, 6> kShapes = {
    "circle", "square", "triangle", "star", "diamond", "cross"};
inline constexpr std::array<const char*, 8> kColors = {
    "red", "blue", "green", "yellow", "purple", "orange", "black", "white"};
inline constexpr std::array<const char*, 9> kRegionWords = {
    "top-left", "top",    "top-right",   "left",        "center",
    "right",    "bottom-left", "bottom", "bottom-right"};
inline constexpr int kMaxImageTokens = 16;

inline std::string format_coord(double v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline const Vocabulary& synthetic_vocabulary() {
  static const Vocabulary vocab = [] {
    std::vector<std::string> s = {"<unk>",        "BEGIN_GROUND", "END_GROUND",
                                  "BEGIN_ANSWER", "END_ANSWER",   "EOS",
                                  "VERDICT_TRUE", "VERDICT_FALSE"};
    for (const char* w : {"the", "target", "is", "at", "not", "here"}) s.emplace_back(w);
    for (const char* w : kRegionWords) s.emplace_back(w);
    for (int k = 0; k < kMaxImageTokens; ++k) s.push_back("img:" + std::to_string(k));
    s.emplace_back("box:");
    s.emplace_back(",");
    for (int i = 0; i <= 100; ++i) s.push_back(format_coord(i / 100.0));
    for (const char* w : kColors) s.emplace_back(w);
    for (const char* w : kShapes) s.emplace_back(w);
    for (const char* w : {"what", "color", "?", "Does", "this", "image", "contain",
                          "region", "needed", "to", "answer", ":", "Answer", "/",
                          "then", "describe", "or", "suggest", "where", "look", "."})
      s.emplace_back(w);
    return Vocabulary(std::move(s));
  }();
  return vocab;
}

// ---------------------------------------------------------------------------
// Grids and tasks

// Cell glyph: 0 is empty, otherwise 1 + shape * |colors| + color.
inline int make_glyph(int shape, int color) {
  return 1 + shape * static_cast<int>(kColors.size()) + color;
}
inline int glyph_shape(int glyph) { return (glyph - 1) / static_cast<int>(kColors.size()); }
inline int glyph_color(int glyph) { return (glyph - 1) % static_cast<int>(kColors.size()); }

struct Cell {
  int x = 0, y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

// Half-open cell rectangle [x0, x1) x [y0, y1).
struct CellRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool contains(Cell c) const { return c.x >= x0 && c.x < x1 && c.y >= y0 && c.y < y1; }

  friend bool operator==(const CellRect&, const CellRect&) = default;
};

struct GridImage {
  int width = 0, height = 0;
  std::vector<int> cells;  // row-major
  std::optional<Cell> target_cell;
  int detail_level = 0;

  int at(int x, int y) const { return cells[static_cast<std::size_t>(y * width + x)]; }
  friend bool operator==(const GridImage&, const GridImage&) = default;
};

namespace detail {

// Round to the nearest cell boundary, ties to the lower one.
inline int snap_edge(double v, int n) {
  const int e = static_cast<int>(std::ceil(v * n - 0.5 - 1e-9));
  return std::clamp(e, 0, n);
}

inline std::pair<int, int> snap_axis(double a, double b, int n) {
  int lo = snap_edge(a, n), hi = snap_edge(b, n);
  if (hi <= lo) {
    // Too thin to cover a cell: take the cell whose center is nearest the
    // box center, lower cell on ties.
    const double c = (a + b) / 2.0 * n;
    const int cell = std::clamp(static_cast<int>(std::ceil(c - 1.0 - 1e-9)), 0, n - 1);
    return {cell, cell + 1};
  }
  return {lo, hi};
}

}  // namespace detail

// Cells of a w x h grid enclosed by a normalized box (clamped first).
inline CellRect snap_crop(const BBox& box, int width, int height) {
  const BBox b = clamp_bbox(box);
  const auto [x0, x1] = detail::snap_axis(b.x0, b.x1, width);
  const auto [y0, y1] = detail::snap_axis(b.y0, b.y1, height);
  return {x0, y0, x1, y1};
}

inline GridImage crop_grid(const GridImage& g, const BBox& box) {
  const CellRect r = snap_crop(box, g.width, g.height);
  GridImage out;
  out.width = r.width();
  out.height = r.height();
  out.detail_level = g.detail_level + 1;
  out.cells.reserve(static_cast<std::size_t>(out.width * out.height));
  for (int y = r.y0; y < r.y1; ++y)
    for (int x = r.x0; x < r.x1; ++x) out.cells.push_back(g.at(x, y));
  if (g.target_cell && r.contains(*g.target_cell))
    out.target_cell = Cell{g.target_cell->x - r.x0, g.target_cell->y - r.y0};
  return out;
}

enum class Difficulty { kEasy, kMedium, kHard };

inline const char* to_string(Difficulty d) {
  switch (d) {
    case Difficulty::kEasy: return "easy";
    case Difficulty::kMedium: return "medium";
    case Difficulty::kHard: return "hard";
  }
  return "?";
}

inline Difficulty parse_difficulty(const std::string& s) {
  if (s == "easy") return Difficulty::kEasy;
  if (s == "medium") return Difficulty::kMedium;
  if (s == "hard") return Difficulty::kHard;
  throw ConfigError("unknown difficulty '" + s + "'");
}

struct DifficultySpec {
  int grid = 8;
  int required_detail = 1;
  int distractors = 1;
};

inline DifficultySpec difficulty_spec(Difficulty d) {
  switch (d) {
    case Difficulty::kEasy: return {8, 1, 1};
    case Difficulty::kMedium: return {16, 2, 3};
    case Difficulty::kHard: return {32, 2, 6};
  }
  return {};
}

struct SyntheticTask {
  std::uint64_t uid = 0;  // image id of the original
  std::uint64_t seed = 0;
  Difficulty difficulty = Difficulty::kEasy;
  GridImage image;
  int target_shape = 0;
  std::string answer;  // color word
  int required_detail = 1;

  TokenList query_tokens(const Vocabulary& v = synthetic_vocabulary()) const {
    return v.encode(query_text());
  }
  std::string query_text() const {
    return std::string("what color is the ") + kShapes[static_cast<std::size_t>(target_shape)] + "?";
  }
  friend bool operator==(const SyntheticTask&, const SyntheticTask&) = default;
};

inline std::uint64_t task_uid(std::uint64_t seed, Difficulty d) {
  return seed * 4 + static_cast<std::uint64_t>(d) + 1;
}

inline SyntheticTask generate_task(std::uint64_t seed, Difficulty difficulty) {
  const DifficultySpec spec = difficulty_spec(difficulty);
  Rng rng(seed, 0x7461736bULL + static_cast<std::uint64_t>(difficulty));
  SyntheticTask t;
  t.uid = task_uid(seed, difficulty);
  t.seed = seed;
  t.difficulty = difficulty;
  t.required_detail = spec.required_detail;
  t.image.width = t.image.height = spec.grid;
  t.image.cells.assign(static_cast<std::size_t>(spec.grid * spec.grid), 0);

  const int n = spec.grid * spec.grid;
  auto pick = [&](int bound) { return static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(bound))); };
  const int target = pick(n);
  t.target_shape = pick(static_cast<int>(kShapes.size()));
  const int color = pick(static_cast<int>(kColors.size()));
  t.answer = kColors[static_cast<std::size_t>(color)];
  t.image.cells[static_cast<std::size_t>(target)] = make_glyph(t.target_shape, color);
  t.image.target_cell = Cell{target % spec.grid, target / spec.grid};

  for (int placed = 0; placed < spec.distractors;) {
    const int c = pick(n);
    if (t.image.cells[static_cast<std::size_t>(c)] != 0) continue;
    int shape = pick(static_cast<int>(kShapes.size()) - 1);
    if (shape >= t.target_shape) ++shape;  // never the queried shape
    t.image.cells[static_cast<std::size_t>(c)] =
        make_glyph(shape, pick(static_cast<int>(kColors.size())));
    ++placed;
  }
  return t;
}

// One-cell task whose target fills the image and is legible immediately.
inline SyntheticTask trivial_task(std::uint64_t uid = 1, int shape = 3, int color = 1) {
  SyntheticTask t;
  t.uid = uid;
  t.image.width = t.image.height = 1;
  t.image.cells = {make_glyph(shape, color)};
  t.image.target_cell = Cell{0, 0};
  t.target_shape = shape;
  t.answer = kColors[static_cast<std::size_t>(color)];
  t.required_detail = 0;
  return t;
}

inline std::vector<Cell> distractor_cells(const GridImage& g, int target_shape) {
  std::vector<Cell> out;
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x) {
      const int glyph = g.at(x, y);
      if (glyph != 0 && glyph_shape(glyph) != target_shape) out.push_back({x, y});
    }
  return out;
}

// ---------------------------------------------------------------------------
// Environment: resolves image references to views of a task grid

struct View {
  const SyntheticTask* task = nullptr;
  CellRect rect;  // in original-grid cells
  int detail_level = 0;

  bool target_in_view() const { return rect.contains(*task->image.target_cell); }
  bool readable() const {
    return target_in_view() && detail_level >= task->required_detail;
  }
};

inline BBox region_bbox(int region) {
  const double x0 = 0.25 * (region % 3), y0 = 0.25 * (region / 3);
  return {x0, y0, x0 + 0.5, y0 + 0.5};
}

inline std::optional<int> region_of_bbox(const BBox& b) {
  for (int r = 0; r < 9; ++r) {
    const BBox rb = region_bbox(r);
    if (std::abs(rb.x0 - b.x0) < 1e-9 && std::abs(rb.y0 - b.y0) < 1e-9 &&
        std::abs(rb.x1 - b.x1) < 1e-9 && std::abs(rb.y1 - b.y1) < 1e-9)
      return r;
  }
  return std::nullopt;
}

class SyntheticEnv {
 public:
  ImageRef add(SyntheticTask task) {
    const std::uint64_t uid = task.uid;
    auto [it, inserted] = tasks_.emplace(uid, std::make_shared<const SyntheticTask>(std::move(task)));
    if (!inserted) throw ConfigError("duplicate task uid " + std::to_string(uid));
    return ImageRef{uid, nullptr};
  }

  const SyntheticTask& task(std::uint64_t uid) const {
    auto it = tasks_.find(uid);
    if (it == tasks_.end()) throw ContextError("unknown image " + std::to_string(uid));
    return *it->second;
  }

  View resolve(const ImageRef& img) const {
    if (img.is_original()) {
      const SyntheticTask& t = task(img.id);
      return {&t, {0, 0, t.image.width, t.image.height}, 0};
    }
    View parent = resolve(img.crop->parent);
    const CellRect sub = snap_crop(img.crop->bbox, parent.rect.width(), parent.rect.height());
    parent.rect = {parent.rect.x0 + sub.x0, parent.rect.y0 + sub.y0,
                   parent.rect.x0 + sub.x1, parent.rect.y0 + sub.y1};
    ++parent.detail_level;
    return parent;
  }

  GridImage materialize(const ImageRef& img) const {
    if (img.is_original()) return task(img.id).image;
    return crop_grid(materialize(img.crop->parent), img.crop->bbox);
  }

  // Cells of `view` covered by region r of that view.
  static CellRect region_rect(const View& view, int region) {
    const CellRect sub = snap_crop(region_bbox(region), view.rect.width(), view.rect.height());
    return {view.rect.x0 + sub.x0, view.rect.y0 + sub.y0, view.rect.x0 + sub.x1,
            view.rect.y0 + sub.y1};
  }

  // The region a well-grounded model names: contains the target, and among
  // those the one nearest the view center (lowest index on ties).
  static std::optional<int> correct_region(const View& view) {
    if (!view.target_in_view()) return std::nullopt;
    std::optional<int> best;
    double best_d = 0.0;
    for (int r = 0; r < 9; ++r) {
      if (!region_rect(view, r).contains(*view.task->image.target_cell)) continue;
      const BBox b = region_bbox(r);
      const double d = std::hypot((b.x0 + b.x1) / 2 - 0.5, (b.y0 + b.y1) / 2 - 0.5);
      if (!best || d < best_d - 1e-12) {
        best = r;
        best_d = d;
      }
    }
    return best;
  }

  std::size_t size() const { return tasks_.size(); }

 private:
  std::unordered_map<std::uint64_t, std::shared_ptr<const SyntheticTask>> tasks_;
};

// ---------------------------------------------------------------------------
// Capability profiles

struct CapabilityProfile {
  double grounding_accuracy = 1.0;
  std::map<int, double> answer_accuracy_by_detail{{0, 1.0}};
  double verdict_accuracy = 1.0;
  double divergence = 0.0;  // delta
  double sharpness = 1.0;
  // Search policy: probability of answering now, on a legible / illegible view.
  double answer_when_readable = 1.0;
  double answer_when_unreadable = 0.0;
  // Response to prophet text injected as input context: pull toward the
  // injected choice, and per-segment loss of the model's own accuracies.
  double prefix_adherence = 0.3;
  double prefix_interference = 0.1;

  void validate() const {
    auto unit = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0))
        throw ConfigError(std::string(name) + " must be in [0, 1]");
    };
    unit(grounding_accuracy, "grounding_accuracy");
    unit(verdict_accuracy, "verdict_accuracy");
    unit(divergence, "divergence");
    unit(answer_when_readable, "answer_when_readable");
    unit(answer_when_unreadable, "answer_when_unreadable");
    unit(prefix_adherence, "prefix_adherence");
    unit(prefix_interference, "prefix_interference");
    if (answer_accuracy_by_detail.empty())
      throw ConfigError("answer_accuracy_by_detail needs at least one entry");
    for (const auto& [level, acc] : answer_accuracy_by_detail) {
      if (level < 0) throw ConfigError("detail levels are >= 0");
      unit(acc, "answer_accuracy_by_detail");
    }
    if (!(sharpness > 0.0)) throw ConfigError("sharpness must be > 0");
  }

  // Accuracy at a legible view of the given detail level.
  double answer_accuracy(int detail_level) const {
    auto it = answer_accuracy_by_detail.upper_bound(detail_level);
    if (it == answer_accuracy_by_detail.begin()) return 1.0 / kColors.size();
    return std::prev(it)->second;
  }

  static CapabilityProfile perfect() { return {}; }

  // Artifact constants for the canonical pair: the prophet is strong at
  // single-step perception, the search model owns the multi-turn policy.
  static CapabilityProfile canonical_search() {
    CapabilityProfile p;
    p.grounding_accuracy = 0.6;
    p.answer_accuracy_by_detail = {{0, 0.6}};
    p.verdict_accuracy = 0.6;
    p.answer_when_readable = 0.9;
    p.answer_when_unreadable = 0.1;
    return p;
  }
  static CapabilityProfile canonical_prophet() {
    CapabilityProfile p;
    p.grounding_accuracy = 0.95;
    p.answer_accuracy_by_detail = {{0, 0.95}};
    p.verdict_accuracy = 0.95;
    p.answer_when_readable = 0.0;
    p.answer_when_unreadable = 0.0;
    return p;
  }
};

// (1 - delta) * table + delta * uniform, after sharpening the table.
inline std::vector<double> mix_with_uniform(std::vector<double> table, double delta,
                                            double sharpness = 1.0) {
  double total = 0.0;
  for (double& w : table) {
    if (sharpness != 1.0 && w > 0.0) w = std::pow(w, sharpness);
    total += w;
  }
  if (!(total > 0.0)) throw DegenerateDistribution("empty table entry");
  const double u = delta / static_cast<double>(table.size());
  for (double& w : table) w = (1.0 - delta) * (w / total) + u;
  return table;
}

// ---------------------------------------------------------------------------
// Synthetic search / prophet models

enum class ModelRole { kSearch, kProphet };

inline const char* to_string(ModelRole r) { return r == ModelRole::kSearch ? "search" : "prophet"; }

class SyntheticModel final : public Model {
 public:
  SyntheticModel(std::shared_ptr<const SyntheticEnv> env, CapabilityProfile profile,
                 ModelRole role)
      : env_(std::move(env)), profile_(std::move(profile)), role_(role),
        vocab_(synthetic_vocabulary()), w_(vocab_) {
    profile_.validate();
  }

  using Model::next_distribution;

  const Vocabulary& vocabulary() const override { return vocab_; }
  const CapabilityProfile& profile() const { return profile_; }
  ModelRole role() const { return role_; }

  ProbabilityVector next_distribution(const ModelContext& ctx,
                                      std::span<const Token> continuation) const override {
    for (Token t : continuation)
      if (!vocab_.contains(t)) throw ContractViolation("continuation token outside vocabulary");
    std::vector<double> table = role_ == ModelRole::kSearch ? search_table(ctx, continuation)
                                                            : prophet_table(ctx, continuation);
    return ProbabilityVector(mix_with_uniform(std::move(table), profile_.divergence,
                                              profile_.sharpness));
  }

 private:
  struct Words {
    explicit Words(const Vocabulary& v)
        : the(v.require("the")), target(v.require("target")), is(v.require("is")),
          at(v.require("at")), not_(v.require("not")), here(v.require("here")),
          box(v.require("box:")), comma(v.require(",")), m(v.markers()) {
      for (const char* r : kRegionWords) regions.push_back(v.require(r));
      for (const char* c : kColors) colors.push_back(v.require(c));
      for (int k = 0; k < kMaxImageTokens; ++k) imgs.push_back(v.require("img:" + std::to_string(k)));
      for (int i = 0; i <= 100; ++i) coords.push_back(v.require(format_coord(i / 100.0)));
    }
    Token the, target, is, at, not_, here, box, comma;
    ReservedMarkers m;
    std::vector<Token> regions, colors, imgs, coords;

    std::optional<int> index_in(const std::vector<Token>& set, Token t) const {
      auto it = std::find(set.begin(), set.end(), t);
      if (it == set.end()) return std::nullopt;
      return static_cast<int>(it - set.begin());
    }
    Token coord(double v) const { return coords[static_cast<std::size_t>(std::lround(v * 100))]; }
  };

  // Choices suggested by prophet text injected into the input context.
  struct Hints {
    std::optional<bool> not_here;
    std::optional<int> region;
    std::optional<int> color;
    int injected_segments = 0;
  };

  std::vector<double> zeros() const { return std::vector<double>(vocab_.size(), 0.0); }
  std::vector<double> point(Token t) const {
    auto w = zeros();
    w[static_cast<std::size_t>(t.id)] = 1.0;
    return w;
  }
  std::vector<double> free_state() const { return point(w_.m.eos); }
  std::vector<double> choice(Token a, Token b, double pa) const {
    auto w = zeros();
    w[static_cast<std::size_t>(a.id)] += pa;
    w[static_cast<std::size_t>(b.id)] += 1.0 - pa;
    return w;
  }

  static const ImageRef& last_image(const ModelContext& ctx, std::size_t* pos = nullptr) {
    const auto& segs = ctx.segments();
    for (std::size_t i = segs.size(); i-- > 0;)
      if (const auto* img = std::get_if<ImageRef>(&segs[i])) {
        if (pos) *pos = i;
        return *img;
      }
    throw ContextError("context holds no image");
  }

  // Mass over the nine regions of `view`. The correct region gets `accuracy`;
  // the rest is spread with extra pull toward distractor-holding regions.
  std::array<double, 9> region_mass(const View& view, double accuracy,
                                    std::optional<int> excluded) const {
    static constexpr double kDistractorPull = 3.0;
    const std::optional<int> correct = SyntheticEnv::correct_region(view);
    const auto distractors = distractor_cells(view.task->image, view.task->target_shape);
    std::array<double, 9> pull{};
    double pull_total = 0.0;
    for (int r = 0; r < 9; ++r) {
      if (r == excluded || r == correct) continue;
      const CellRect rect = SyntheticEnv::region_rect(view, r);
      bool has = false;
      for (Cell c : distractors) has = has || rect.contains(c);
      pull[static_cast<std::size_t>(r)] = has ? kDistractorPull : 1.0;
      pull_total += pull[static_cast<std::size_t>(r)];
    }
    std::array<double, 9> mass{};
    const bool hit = correct && correct != excluded;
    const double rest = hit ? 1.0 - accuracy : 1.0;
    if (hit) mass[static_cast<std::size_t>(*correct)] = pull_total > 0.0 ? accuracy : 1.0;
    if (pull_total > 0.0)
      for (int r = 0; r < 9; ++r) mass[static_cast<std::size_t>(r)] += rest * pull[static_cast<std::size_t>(r)] / pull_total;
    return mass;
  }

  std::vector<double> region_dist(const std::array<double, 9>& mass) const {
    auto w = zeros();
    for (int r = 0; r < 9; ++r) w[static_cast<std::size_t>(w_.regions[static_cast<std::size_t>(r)].id)] = mass[static_cast<std::size_t>(r)];
    return w;
  }

  std::vector<double> color_dist(const View& view, double accuracy_scale) const {
    auto w = zeros();
    const double chance = 1.0 / kColors.size();
    if (!view.readable()) {
      for (Token c : w_.colors) w[static_cast<std::size_t>(c.id)] = chance;
      return w;
    }
    const double acc = profile_.answer_accuracy(view.detail_level) * accuracy_scale;
    const auto right = *w_.index_in(w_.colors, vocab_.require(view.task->answer));
    for (std::size_t c = 0; c < kColors.size(); ++c)
      w[static_cast<std::size_t>(w_.colors[c].id)] =
          static_cast<int>(c) == right ? acc : (1.0 - acc) / (kColors.size() - 1);
    return w;
  }

  static void pull_toward(std::vector<double>& w, Token t, double adherence) {
    for (double& v : w) v *= 1.0 - adherence;
    w[static_cast<std::size_t>(t.id)] += adherence;
  }

  Hints collect_hints(const ModelContext& ctx, std::size_t image_pos) const {
    Hints h;
    const auto& segs = ctx.segments();
    for (std::size_t i = 0; i < segs.size(); ++i) {
      const auto* span = std::get_if<TokenSpan>(&segs[i]);
      if (!span || span->role != SpanRole::kPropheticPrefix) continue;
      ++h.injected_segments;
      if (i < image_pos) continue;
      for (Token t : span->tokens) {
        if (t == w_.not_) h.not_here = true;
        if (t == w_.at) h.not_here = false;
        if (auto r = w_.index_in(w_.regions, t)) h.region = *r;
        if (auto c = w_.index_in(w_.colors, t)) h.color = *c;
      }
    }
    return h;
  }

  std::optional<int> image_index(const std::vector<ImageRef>& images, const ImageRef& img) const {
    for (std::size_t i = images.size(); i-- > 0;)
      if (images[i] == img) return static_cast<int>(i);
    return std::nullopt;
  }

  std::vector<double> search_table(const ModelContext& ctx,
                                   std::span<const Token> continuation) const {
    std::size_t image_pos = 0;
    const ImageRef& current = last_image(ctx, &image_pos);
    const View view = env_->resolve(current);

    // This turn's own output so far.
    TokenList turn;
    const auto& segs = ctx.segments();
    for (std::size_t i = image_pos + 1; i < segs.size(); ++i)
      if (const auto* span = std::get_if<TokenSpan>(&segs[i]); span && is_output_role(span->role))
        turn.insert(turn.end(), span->tokens.begin(), span->tokens.end());
    turn.insert(turn.end(), continuation.begin(), continuation.end());

    const Hints hints = collect_hints(ctx, image_pos);
    const double scale = std::pow(1.0 - profile_.prefix_interference, hints.injected_segments);
    const double adherence = profile_.prefix_adherence;
    const double g = profile_.grounding_accuracy * scale;
    const double v = profile_.verdict_accuracy * scale;

    const std::size_t n = turn.size();
    std::size_t p = 0;
    for (Token t : {w_.the, w_.target, w_.is}) {
      if (p == n) return point(t);
      if (turn[p++] != t) return free_state();
    }
    if (p == n) {
      const double p_not = view.target_in_view() ? 1.0 - v : v;
      auto w = choice(w_.not_, w_.at, p_not);
      if (hints.not_here) pull_toward(w, *hints.not_here ? w_.not_ : w_.at, adherence);
      return w;
    }
    const bool relocate = turn[p] == w_.not_;
    if (!relocate && turn[p] != w_.at) return free_state();
    ++p;
    std::optional<int> region;
    if (relocate) {
      if (p == n) return point(w_.here);
      if (turn[p++] != w_.here) return free_state();
    } else {
      if (p == n) {
        auto w = region_dist(region_mass(view, g, std::nullopt));
        if (hints.region) pull_toward(w, w_.regions[static_cast<std::size_t>(*hints.region)], adherence);
        return w;
      }
      region = w_.index_in(w_.regions, turn[p++]);
      if (!region) return free_state();
    }

    if (p == n) {
      const double pa = view.readable() ? profile_.answer_when_readable
                                        : profile_.answer_when_unreadable;
      return choice(w_.m.begin_answer, w_.m.begin_ground, pa);
    }
    if (turn[p] == w_.m.begin_answer) {
      ++p;
      if (p == n) {
        auto w = color_dist(view, scale);
        if (hints.color) pull_toward(w, w_.colors[static_cast<std::size_t>(*hints.color)], adherence);
        return w;
      }
      if (!w_.index_in(w_.colors, turn[p++])) return free_state();
      if (p == n) return point(w_.m.end_answer);
      return free_state();
    }
    if (turn[p++] != w_.m.begin_ground) return free_state();

    // Grounding tail: either the named region of the current view, or a
    // relocation on the parent view away from the region just inspected.
    const std::vector<ImageRef> images = ctx.images();
    std::optional<int> k;
    std::array<double, 9> mass{};
    if (!relocate) {
      k = image_index(images, current);
      mass[static_cast<std::size_t>(*region)] = 1.0;
    } else if (current.is_original()) {
      k = image_index(images, current);
      mass = region_mass(view, g, std::nullopt);
    } else {
      k = image_index(images, current.crop->parent);
      const View parent = env_->resolve(current.crop->parent);
      mass = region_mass(parent, g, region_of_bbox(current.crop->bbox));
    }
    if (!k || *k >= kMaxImageTokens) return free_state();

    if (p == n) return point(w_.imgs[static_cast<std::size_t>(*k)]);
    if (turn[p++] != w_.imgs[static_cast<std::size_t>(*k)]) return free_state();
    if (p == n) return point(w_.box);
    if (turn[p++] != w_.box) return free_state();
    // x0 from the column marginal, y0 given x0.
    if (p == n) {
      auto w = zeros();
      for (int r = 0; r < 9; ++r) w[static_cast<std::size_t>(w_.coord(region_bbox(r).x0).id)] += mass[static_cast<std::size_t>(r)];
      return w;
    }
    const Token tx0 = turn[p++];
    std::array<double, 9> cond{};
    double cond_total = 0.0;
    for (int r = 0; r < 9; ++r)
      if (w_.coord(region_bbox(r).x0) == tx0) {
        cond[static_cast<std::size_t>(r)] = mass[static_cast<std::size_t>(r)];
        cond_total += mass[static_cast<std::size_t>(r)];
      }
    if (!(cond_total > 0.0)) return free_state();
    if (p == n) return point(w_.comma);
    if (turn[p++] != w_.comma) return free_state();
    if (p == n) {
      auto w = zeros();
      for (int r = 0; r < 9; ++r) w[static_cast<std::size_t>(w_.coord(region_bbox(r).y0).id)] += cond[static_cast<std::size_t>(r)] / cond_total;
      return w;
    }
    const Token ty0 = turn[p++];
    std::optional<int> chosen;
    for (int r = 0; r < 9; ++r)
      if (cond[static_cast<std::size_t>(r)] > 0.0 && w_.coord(region_bbox(r).y0) == ty0) chosen = r;
    if (!chosen) return free_state();
    const BBox b = region_bbox(*chosen);
    for (Token t : {w_.comma, w_.coord(b.x1), w_.comma, w_.coord(b.y1), w_.m.end_ground}) {
      if (p == n) return point(t);
      if (turn[p++] != t) return free_state();
    }
    return free_state();
  }

  std::vector<double> prophet_table(const ModelContext& ctx,
                                    std::span<const Token> continuation) const {
    std::size_t image_pos = 0;
    const ImageRef& current = last_image(ctx, &image_pos);
    const View view = env_->resolve(current);
    const TokenSpan* query = nullptr;
    const auto& segs = ctx.segments();
    for (std::size_t i = image_pos + 1; i < segs.size() && !query; ++i)
      if (const auto* span = std::get_if<TokenSpan>(&segs[i]); span && span->role == SpanRole::kQuery)
        query = span;
    if (!query) return free_state();
    const bool verification = std::find(query->tokens.begin(), query->tokens.end(),
                                        w_.m.verdict_true) != query->tokens.end();

    const std::size_t n = continuation.size();
    std::size_t p = 0;
    if (!verification) {
      if (p == n) return color_dist(view, 1.0);
      if (!w_.index_in(w_.colors, continuation[p++])) return free_state();
      return free_state();  // EOS
    }

    if (p == n) {
      const double va = profile_.verdict_accuracy;
      return choice(w_.m.verdict_true, w_.m.verdict_false, view.target_in_view() ? va : 1.0 - va);
    }
    const Token verdict = continuation[p++];
    if (verdict != w_.m.verdict_true && verdict != w_.m.verdict_false) return free_state();
    for (Token t : {w_.the, w_.target, w_.is}) {
      if (p == n) return point(t);
      if (continuation[p++] != t) return free_state();
    }
    if (verdict == w_.m.verdict_false) {
      for (Token t : {w_.not_, w_.here}) {
        if (p == n) return point(t);
        if (continuation[p++] != t) return free_state();
      }
      return free_state();
    }
    if (p == n) return point(w_.at);
    if (continuation[p++] != w_.at) return free_state();
    if (p == n) return region_dist(region_mass(view, profile_.grounding_accuracy, std::nullopt));
    return free_state();
  }

  std::shared_ptr<const SyntheticEnv> env_;
  CapabilityProfile profile_;
  ModelRole role_;
  const Vocabulary& vocab_;
  Words w_;
};

inline std::shared_ptr<SyntheticModel> make_model(const CapabilityProfile& profile, ModelRole role,
                                                  std::shared_ptr<const SyntheticEnv> env) {
  return std::make_shared<SyntheticModel>(std::move(env), profile, role);
}

inline Episode make_episode(const SyntheticTask& task, std::uint64_t episode_seed,
                            std::string id, int max_turns = 8) {
  Episode e;
  e.id = std::move(id);
  e.original_image = ImageRef{task.uid, nullptr};
  e.query = task.query_tokens();
  e.ground_truth = task.answer;
  e.difficulty = to_string(task.difficulty);
  e.seed = episode_seed;
  e.max_turns = max_turns;
  return e;
}

// ---------------------------------------------------------------------------
// Generic toy models for decoder-level tests

// Vocabulary of single-letter-ish tokens t0..t{V-1}, optionally with markers.
inline Vocabulary toy_vocabulary(std::size_t size, bool with_markers = false) {
  std::vector<std::string> s;
  if (with_markers)
    for (const char* m : {"BEGIN_GROUND", "END_GROUND", "BEGIN_ANSWER", "END_ANSWER", "EOS",
                          "VERDICT_TRUE", "VERDICT_FALSE"})
      s.emplace_back(m);
  while (s.size() < size) s.push_back("t" + std::to_string(s.size()));
  return Vocabulary(std::move(s));
}

inline TokenList flatten_tokens(const ModelContext& ctx, std::span<const Token> continuation) {
  TokenList out;
  for (const auto& seg : ctx.segments())
    if (const auto* span = std::get_if<TokenSpan>(&seg))
      out.insert(out.end(), span->tokens.begin(), span->tokens.end());
  out.insert(out.end(), continuation.begin(), continuation.end());
  return out;
}

class UniformModel final : public Model {
 public:
  explicit UniformModel(Vocabulary v) : vocab_(std::move(v)) {}
  using Model::next_distribution;
  const Vocabulary& vocabulary() const override { return vocab_; }
  ProbabilityVector next_distribution(const ModelContext&, std::span<const Token>) const override {
    return ProbabilityVector::uniform(vocab_.size());
  }

 private:
  Vocabulary vocab_;
};

// Explicit lookup on the flattened token sequence, with a default entry.
class TableModel final : public Model {
 public:
  TableModel(Vocabulary v, std::vector<double> fallback, double divergence = 0.0)
      : vocab_(std::move(v)), fallback_(std::move(fallback)), divergence_(divergence) {
    if (fallback_.size() != vocab_.size()) throw ConfigError("table width != vocabulary size");
  }
  using Model::next_distribution;

  void set(TokenList key, std::vector<double> probs) {
    if (probs.size() != vocab_.size()) throw ConfigError("table width != vocabulary size");
    entries_[ids(key)] = std::move(probs);
  }

  const Vocabulary& vocabulary() const override { return vocab_; }
  ProbabilityVector next_distribution(const ModelContext& ctx,
                                      std::span<const Token> cont) const override {
    auto it = entries_.find(ids(flatten_tokens(ctx, cont)));
    const auto& row = it == entries_.end() ? fallback_ : it->second;
    return ProbabilityVector(mix_with_uniform(row, divergence_));
  }

 private:
  static std::vector<std::int32_t> ids(const TokenList& t) {
    std::vector<std::int32_t> out;
    for (Token x : t) out.push_back(x.id);
    return out;
  }
  Vocabulary vocab_;
  std::vector<double> fallback_;
  double divergence_;
  std::map<std::vector<std::int32_t>, std::vector<double>> entries_;
};

// Seeded pseudo-random conditional distributions over the last `order`
// tokens. Rows are sparse (about 40% zeros), carry deliberate ties, and may
// be blended toward another model to control agreement.
class RandomToyModel final : public Model {
 public:
  RandomToyModel(Vocabulary v, std::uint64_t seed, std::size_t order = 1)
      : vocab_(std::move(v)), seed_(seed), order_(order) {}
  using Model::next_distribution;

  const Vocabulary& vocabulary() const override { return vocab_; }

  ProbabilityVector next_distribution(const ModelContext& ctx,
                                      std::span<const Token> cont) const override {
    const TokenList seq = flatten_tokens(ctx, cont);
    std::uint64_t h = seed_ ^ 0x9e3779b97f4a7c15ULL;
    const std::size_t from = seq.size() > order_ ? seq.size() - order_ : 0;
    for (std::size_t i = from; i < seq.size(); ++i) h = mix(h ^ static_cast<std::uint64_t>(seq[i].id + 1));
    h = mix(h ^ (seq.size() - from));
    std::vector<double> w(vocab_.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      h = mix(h + i);
      const std::uint64_t bucket = h % 10;
      w[i] = bucket < 4 ? 0.0 : static_cast<double>(bucket - 3);  // small integers: ties
    }
    if (std::all_of(w.begin(), w.end(), [](double x) { return x == 0.0; })) w[h % w.size()] = 1.0;
    return ProbabilityVector::from_weights(std::move(w));
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  Vocabulary vocab_;
  std::uint64_t seed_;
  std::size_t order_;
};

// Pointwise mixture lambda * a + (1 - lambda) * b of two models.
template <ProbabilisticModel A, ProbabilisticModel B>
class MixtureModel final : public Model {
 public:
  MixtureModel(const A& a, const B& b, double lambda) : a_(a), b_(b), lambda_(lambda) {
    require_shared_vocabulary(a.vocabulary(), b.vocabulary());
  }
  using Model::next_distribution;
  const Vocabulary& vocabulary() const override { return a_.vocabulary(); }
  ProbabilityVector next_distribution(const ModelContext& ctx,
                                      std::span<const Token> cont) const override {
    const auto pa = a_.next_distribution(ctx, cont);
    const auto pb = b_.next_distribution(ctx, cont);
    std::vector<double> w(pa.size());
    for (std::size_t i = 0; i < w.size(); ++i)
      w[i] = lambda_ * pa.values()[i] + (1.0 - lambda_) * pb.values()[i];
    return ProbabilityVector::from_weights(std::move(w));
  }

 private:
  const A& a_;
  const B& b_;
  double lambda_;
};

// Draws a prophet draft of up to `length` tokens from `prophet`.
template <ProbabilisticModel P>
PropheticDraft draw_draft(const P& prophet, const ModelContext& ctx, std::size_t length,
                          Rng& rng, DraftMode mode = DraftMode::kAnswerDrafting) {
  PropheticDraft d;
  d.source_mode = mode;
  if (mode == DraftMode::kGroundingVerification) d.verdict = true;
  for (std::size_t j = 0; j < length; ++j) {
    const auto dist = prophet.next_distribution(ctx, d.tokens);
    const Token t = sample(dist, rng, SamplingPolicy::multinomial());
    d.tokens.push_back(t);
    d.p_p.push_back(dist.at(t));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Sequential reference for prophetic acceptance

// Scores the draft strictly one position at a time through
// next_distribution and applies the acceptance rule from first principles.
// Exists only as an equivalence oracle for decode_segment.
template <ProbabilisticModel M>
DecodedSegment oracle_decode(const M& search_model, const ModelContext& history,
                             const std::optional<PropheticDraft>& draft,
                             const DecodeConfig& cfg, Rng& rng,
                             std::span<const Token> stops) {
  auto is_stop = [&](Token t) { return std::find(stops.begin(), stops.end(), t) != stops.end(); };
  DecodedSegment seg;

  if (draft && !draft->tokens.empty()) {
    std::size_t len = draft->tokens.size();
    for (std::size_t j = 0; j < draft->tokens.size(); ++j)
      if (is_stop(draft->tokens[j])) {
        len = j + 1;
        break;
      }
    const std::size_t n = std::min(len, cfg.max_segment_tokens);
    AcceptanceRecord rec;
    rec.truncated = n < len;
    TokenList prefix;
    std::vector<ProbabilityVector> dists;
    bool alive = true;
    for (std::size_t j = 0; j < n; ++j) {
      const Token tok = draft->tokens[j];
      dists.push_back(search_model.next_distribution(history, prefix));
      const auto probs = dists.back().values();
      const double ps = probs[static_cast<std::size_t>(tok.id)];
      std::size_t rank = 0;
      for (std::size_t i = 0; i < probs.size(); ++i)
        if (probs[i] > ps || (probs[i] == ps && static_cast<std::int32_t>(i) < tok.id)) ++rank;
      const double r = probs.size() > 1 ? static_cast<double>(rank) / static_cast<double>(probs.size() - 1) : 0.0;
      double raw = cfg.alpha.kind == AlphaPolicy::Kind::kFixed ? cfg.alpha.value : cfg.alpha.base - r;
      double alpha = raw;
      if (cfg.alpha.kind == AlphaPolicy::Kind::kDynamic && cfg.clamp_alpha)
        alpha = std::min(std::max(raw, cfg.alpha_lo), cfg.alpha_hi);
      const double fs = std::max(ps, cfg.epsilon_floor);
      const double fp = std::max(draft->p_p[j], cfg.epsilon_floor);
      // Same floating-point route as the engine (log domain, exact on equal
      // inputs) so equivalence can be asserted bit for bit.
      const double s = fs == fp ? fs : std::exp(alpha * std::log(fs) + (1.0 - alpha) * std::log(fp));
      if (alive && s < cfg.tau) {
        alive = false;
        rec.first_rejection = j;
      }
      AcceptanceEntry e;
      e.token = tok;
      e.p_s = ps;
      e.p_p = draft->p_p[j];
      e.alpha = alpha;
      e.alpha_raw = raw;
      e.s = s;
      e.rank = rank;
      e.accepted = alive;
      rec.entries.push_back(e);
      prefix.push_back(tok);
    }
    rec.accepted_count = rec.first_rejection.value_or(n);
    seg.verify_passes = 1;
    seg.tokens.assign(draft->tokens.begin(), draft->tokens.begin() + static_cast<std::ptrdiff_t>(rec.accepted_count));
    seg.accepted_prefix_len = rec.accepted_count;
    const bool stopped = !seg.tokens.empty() && is_stop(seg.tokens.back());
    if (!stopped && seg.tokens.size() < cfg.max_segment_tokens) {
      const ProbabilityVector at_k = rec.accepted_count < dists.size()
                                         ? dists[rec.accepted_count]
                                         : search_model.next_distribution(history, seg.tokens);
      seg.tokens.push_back(sample(at_k, rng, cfg.sampling));
      ++seg.generated_len;
    }
    seg.acceptance = std::move(rec);
  }

  while (seg.tokens.size() < cfg.max_segment_tokens &&
         (seg.tokens.empty() || !is_stop(seg.tokens.back()))) {
    const auto dist = search_model.next_distribution(history, seg.tokens);
    ++seg.search_passes;
    seg.tokens.push_back(sample(dist, rng, cfg.sampling));
    ++seg.generated_len;
  }
  seg.budget_exhausted = seg.tokens.empty() || !is_stop(seg.tokens.back());
  return seg;
}

// ---------------------------------------------------------------------------
// Acceptance under prophet divergence

struct DivergencePoint {
  double delta = 0.0;
  double acceptance_rate = 0.0;  // pooled accepted / drafted
  std::size_t drafted = 0;
  std::size_t accepted = 0;
  std::size_t episodes = 0;
};

struct DivergenceSweepConfig {
  CapabilityProfile search = CapabilityProfile::canonical_search();
  CapabilityProfile prophet = CapabilityProfile::canonical_prophet();
  Difficulty difficulty = Difficulty::kMedium;
  ControllerConfig controller;
  int max_turns = 8;
};

// For each delta (applied to the prophet) runs n seeded SeProD episodes on
// the same tasks. `sink`, when given, receives every trace.
template <typename Sink = std::nullptr_t>
std::vector<DivergencePoint> divergence_sweep(const std::vector<double>& deltas,
                                              const DivergenceSweepConfig& cfg,
                                              std::size_t n_episodes, std::uint64_t seed,
                                              Sink sink = nullptr) {
  if (n_episodes < 1) throw ConfigError("divergence_sweep needs n_episodes >= 1");
  auto env = std::make_shared<SyntheticEnv>();
  std::vector<Episode> episodes;
  for (std::size_t i = 0; i < n_episodes; ++i) {
    const std::uint64_t s = seed + i;
    const SyntheticTask task = generate_task(s, cfg.difficulty);
    env->add(task);
    episodes.push_back(make_episode(task, s, "delta-sweep/" + std::to_string(i), cfg.max_turns));
  }
  const SyntheticModel search(env, cfg.search, ModelRole::kSearch);
  std::vector<DivergencePoint> out;
  for (double delta : deltas) {
    CapabilityProfile pp = cfg.prophet;
    pp.divergence = delta;
    const SyntheticModel prophet(env, pp, ModelRole::kProphet);
    DivergencePoint pt;
    pt.delta = delta;
    for (const Episode& e : episodes) {
      EpisodeRngs rngs = EpisodeRngs::from_seed(e.seed);
      EpisodeTrace tr = run_episode(search, prophet, e, cfg.controller, rngs);
      pt.drafted += tr.counters.drafted;
      pt.accepted += tr.counters.accepted;
      ++pt.episodes;
      if constexpr (!std::is_same_v<Sink, std::nullptr_t>) sink(tr);
    }
    pt.acceptance_rate = pt.drafted ? static_cast<double>(pt.accepted) / pt.drafted : 0.0;
    out.push_back(pt);
  }
  return out;
}

}  // namespace seprod
