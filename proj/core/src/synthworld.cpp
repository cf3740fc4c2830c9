#include "caplab/synthworld.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "caplab/errors.hpp"
#include "caplab/rng.hpp"

namespace caplab {

namespace {

const char* kCategories[] = {"cat",  "dog",  "bird", "fish", "ball", "box",
                             "cup",  "book", "tree", "car",  "chair", "lamp"};
const char* kColors[] = {"red", "blue", "green", "yellow", "purple", "orange"};
const char* kSizes[] = {"small", "medium", "large"};
// Row-major 3x3 grid cells.
const char* kCells[] = {"northwest", "north", "northeast", "west", "center",
                        "east",      "southwest", "south", "southeast"};
const char* kRelations[] = {"left-of", "above", "next-to"};

template <typename T, std::size_t N>
constexpr int count_of(T (&)[N]) {
  return static_cast<int>(N);
}

// Draw k distinct values from [0, n) by partial Fisher-Yates.
std::vector<int> sample_distinct(SplitMix64& rng, int n, int k) {
  std::vector<int> pool(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(k));
  return pool;
}

int cell_row(int cell) { return cell / 3; }
int cell_col(int cell) { return cell % 3; }

}  // namespace

Vocabulary Vocabulary::standard() {
  Vocabulary v;
  v.tokens = {"<bos>", "<eos>", "<pad>"};
  auto add = [&v](const char* tok) {
    v.tokens.emplace_back(tok);
    return static_cast<int>(v.tokens.size()) - 1;
  };
  v.word_a = add("a");
  v.word_the = add("the");
  v.word_has = add("has");
  v.word_dot = add(".");
  v.category_begin = v.size();
  for (const char* t : kCategories) add(t);
  v.category_count = count_of(kCategories);
  v.color_begin = v.size();
  for (const char* t : kColors) add(t);
  v.color_count = count_of(kColors);
  v.size_begin = v.size();
  for (const char* t : kSizes) add(t);
  v.size_count = count_of(kSizes);
  v.cell_begin = v.size();
  for (const char* t : kCells) add(t);
  v.cell_count = count_of(kCells);
  v.relation_begin = v.size();
  for (const char* t : kRelations) add(t);
  v.relation_count = count_of(kRelations);
  return v;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw IndexError("token id out of range");
  return tokens[static_cast<std::size_t>(id)];
}

int Vocabulary::index_of(const std::string& tok) const {
  for (int i = 0; i < size(); ++i) {
    if (tokens[static_cast<std::size_t>(i)] == tok) return i;
  }
  throw DataError("unknown token: " + tok);
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  const Vocabulary v = Vocabulary::standard();
  const int pair_count = v.color_count * v.size_count;
  const int capacity = std::min({kGridCells, v.category_count, pair_count});
  if (config.max_objects < 1 || config.max_objects > capacity) {
    throw ConfigError("max-objects must be in [1, " + std::to_string(capacity) + "]");
  }
  if (config.noise_sigma < 0.0) throw ConfigError("noise-sigma must be >= 0");

  SplitMix64 rng(substream(seed, "scene"));
  const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(config.max_objects)));

  // Cells, categories and (color,size) pairs are all drawn without
  // replacement: uniqueness is what keeps the grammar trigram-free and the
  // category-keyed parse unambiguous.
  const std::vector<int> cells = sample_distinct(rng, kGridCells, k);
  const std::vector<int> cats = sample_distinct(rng, v.category_count, k);
  const std::vector<int> pairs = sample_distinct(rng, pair_count, k);

  Scene scene;
  scene.seed = seed;
  scene.objects.resize(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    ObjectInstance& o = scene.objects[static_cast<std::size_t>(i)];
    o.cell = cells[static_cast<std::size_t>(i)];
    o.category = cats[static_cast<std::size_t>(i)];
    o.color = pairs[static_cast<std::size_t>(i)] / v.size_count;
    o.size = pairs[static_cast<std::size_t>(i)] % v.size_count;
  }
  std::sort(scene.objects.begin(), scene.objects.end(),
            [](const ObjectInstance& a, const ObjectInstance& b) { return a.cell < b.cell; });

  // Relations: greedy matching in canonical pair order, so each object sits
  // in at most one relation. Kind precedence: left-of, above, next-to.
  std::vector<bool> used(static_cast<std::size_t>(k), false);
  for (int i = 0; i < k; ++i) {
    if (used[static_cast<std::size_t>(i)]) continue;
    for (int j = i + 1; j < k; ++j) {
      if (used[static_cast<std::size_t>(i)] || used[static_cast<std::size_t>(j)]) continue;
      const ObjectInstance& oi = scene.objects[static_cast<std::size_t>(i)];
      const ObjectInstance& oj = scene.objects[static_cast<std::size_t>(j)];
      std::optional<RelationKind> kind;
      if (cell_row(oi.cell) == cell_row(oj.cell)) {
        kind = RelationKind::left_of;  // canonical order makes i the left one
      } else if (cell_col(oi.cell) == cell_col(oj.cell)) {
        kind = RelationKind::above;
      } else if (std::abs(cell_row(oi.cell) - cell_row(oj.cell)) <= 1 &&
                 std::abs(cell_col(oi.cell) - cell_col(oj.cell)) <= 1) {
        kind = RelationKind::next_to;
      }
      if (kind) {
        scene.relations.push_back({i, *kind, j});
        used[static_cast<std::size_t>(i)] = true;
        used[static_cast<std::size_t>(j)] = true;
      }
    }
  }
  return scene;
}

int feature_dim(const Vocabulary& vocab) {
  return kGridCells * (vocab.category_count + vocab.color_count + vocab.size_count);
}

Array render_features(const Scene& scene, const Vocabulary& vocab, double noise_sigma) {
  const int block = vocab.category_count + vocab.color_count + vocab.size_count;
  Array f({static_cast<std::size_t>(kGridCells * block)});
  for (const ObjectInstance& o : scene.objects) {
    const int base = o.cell * block;
    f.data[static_cast<std::size_t>(base + o.category)] = 1.0;
    f.data[static_cast<std::size_t>(base + vocab.category_count + o.color)] = 1.0;
    f.data[static_cast<std::size_t>(base + vocab.category_count + vocab.color_count + o.size)] = 1.0;
  }
  if (noise_sigma > 0.0) {
    SplitMix64 rng(substream(scene.seed, "feature-noise"));
    for (double& x : f.data) x += noise_sigma * rng.gaussian();
  }
  return f;
}

Caption describe(const Scene& scene, CaptionLevel level, const Vocabulary& vocab) {
  if (scene.objects.empty()) throw DataError("scene has no objects");
  Caption c;
  c.terminated = true;
  if (level == CaptionLevel::short_ref) {
    const ObjectInstance& o = scene.objects.front();
    c.tokens = {vocab.word_a, vocab.category_begin + o.category, vocab.word_dot, vocab.eos};
    return c;
  }
  for (const ObjectInstance& o : scene.objects) {
    c.tokens.push_back(vocab.word_the);
    c.tokens.push_back(vocab.cell_begin + o.cell);
    c.tokens.push_back(vocab.word_has);
    c.tokens.push_back(vocab.color_begin + o.color);
    c.tokens.push_back(vocab.size_begin + o.size);
    c.tokens.push_back(vocab.category_begin + o.category);
    c.tokens.push_back(vocab.word_dot);
  }
  for (const RelationTriple& r : scene.relations) {
    const ObjectInstance& s = scene.objects[static_cast<std::size_t>(r.subject)];
    const ObjectInstance& o = scene.objects[static_cast<std::size_t>(r.object)];
    c.tokens.push_back(vocab.category_begin + s.category);
    c.tokens.push_back(vocab.relation_begin + static_cast<int>(r.kind));
    c.tokens.push_back(vocab.word_the);
    c.tokens.push_back(vocab.category_begin + o.category);
    c.tokens.push_back(vocab.word_dot);
  }
  c.tokens.push_back(vocab.eos);
  return c;
}

namespace {

// Clause productions, on tokens with specials already removed:
//   short object:  a CATEGORY
//   full object:   the CELL has COLOR SIZE CATEGORY
//   relation:      CATEGORY RELATION the CATEGORY
// each terminated by the "." delimiter handled by the caller.
bool parse_clause(const std::vector<int>& w, const Vocabulary& v,
                  std::vector<Element>& out) {
  if (w.size() == 2 && w[0] == v.word_a && v.is_category(w[1])) {
    Element e;
    e.kind = Element::Kind::object;
    e.category = w[1] - v.category_begin;
    out.push_back(e);
    return true;
  }
  if (w.size() == 6 && w[0] == v.word_the && v.is_cell(w[1]) && w[2] == v.word_has &&
      v.is_color(w[3]) && v.is_size(w[4]) && v.is_category(w[5])) {
    const int cat = w[5] - v.category_begin;
    Element obj;
    obj.kind = Element::Kind::object;
    obj.category = cat;
    out.push_back(obj);
    Element col;
    col.kind = Element::Kind::attribute;
    col.category = cat;
    col.attr = Element::Attr::color;
    col.value = w[3] - v.color_begin;
    out.push_back(col);
    Element siz = col;
    siz.attr = Element::Attr::size;
    siz.value = w[4] - v.size_begin;
    out.push_back(siz);
    Element pos = col;
    pos.attr = Element::Attr::position;
    pos.value = w[1] - v.cell_begin;
    out.push_back(pos);
    return true;
  }
  if (w.size() == 4 && v.is_category(w[0]) && v.is_relation(w[1]) && w[2] == v.word_the &&
      v.is_category(w[3])) {
    Element e;
    e.kind = Element::Kind::relation;
    e.category = w[0] - v.category_begin;
    e.rel_kind = w[1] - v.relation_begin;
    e.rel_object = w[3] - v.category_begin;
    out.push_back(e);
    return true;
  }
  return false;
}

}  // namespace

ParseResult parse_caption(const Caption& caption, const Vocabulary& vocab) {
  // PAD is padding wherever it occurs; EOS hard-stops the scan.
  std::vector<int> words;
  for (int t : caption.tokens) {
    if (t == vocab.eos) break;
    if (t == vocab.pad || t == vocab.bos) continue;
    words.push_back(t);
  }

  ParseResult r;
  std::vector<Element> raw;
  std::vector<int> clause;
  auto flush = [&](bool ended_by_delimiter) {
    if (clause.empty()) {
      if (ended_by_delimiter) {
        // bare "." with no content is a failed clause slot
        ++r.clause_count;
        ++r.clause_failures;
      }
      return;
    }
    ++r.clause_count;
    // A clause is only well-formed when "." closed it.
    if (!ended_by_delimiter || !parse_clause(clause, vocab, raw)) ++r.clause_failures;
    clause.clear();
  };
  for (int t : words) {
    if (t == vocab.word_dot) {
      flush(true);
    } else {
      clause.push_back(t);
    }
  }
  flush(false);

  std::sort(raw.begin(), raw.end());
  raw.erase(std::unique(raw.begin(), raw.end()), raw.end());
  r.elements = std::move(raw);
  r.parse_success = r.clause_failures == 0 && !r.elements.empty();
  return r;
}

std::vector<Element> scene_elements(const Scene& scene) {
  std::vector<Element> out;
  for (const ObjectInstance& o : scene.objects) {
    Element obj;
    obj.kind = Element::Kind::object;
    obj.category = o.category;
    out.push_back(obj);
    Element col = obj;
    col.kind = Element::Kind::attribute;
    col.attr = Element::Attr::color;
    col.value = o.color;
    out.push_back(col);
    Element siz = col;
    siz.attr = Element::Attr::size;
    siz.value = o.size;
    out.push_back(siz);
    Element pos = col;
    pos.attr = Element::Attr::position;
    pos.value = o.cell;
    out.push_back(pos);
  }
  for (const RelationTriple& rel : scene.relations) {
    Element e;
    e.kind = Element::Kind::relation;
    e.category = scene.objects[static_cast<std::size_t>(rel.subject)].category;
    e.rel_kind = static_cast<int>(rel.kind);
    e.rel_object = scene.objects[static_cast<std::size_t>(rel.object)].category;
    out.push_back(e);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<SceneRecord> make_dataset(std::uint64_t seed, const SceneConfig& config,
                                      int count, const Vocabulary& vocab,
                                      std::uint64_t split_tag) {
  if (count < 0) throw ConfigError("dataset size must be >= 0");
  std::vector<SceneRecord> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    SceneRecord rec;
    rec.scene = generate_scene(substream(seed, "data", split_tag, static_cast<std::uint64_t>(i)),
                               config);
    rec.short_ref = describe(rec.scene, CaptionLevel::short_ref, vocab);
    rec.full_ref = describe(rec.scene, CaptionLevel::full_ref, vocab);
    out.push_back(std::move(rec));
  }
  return out;
}

namespace {

constexpr const char* kDatasetHeader = "# caplab scenes v1";

std::string caption_words(const Caption& c, const Vocabulary& v) {
  std::string s;
  for (int t : c.tokens) {
    if (v.is_special(t)) continue;
    if (!s.empty()) s += ' ';
    s += v.token(t);
  }
  return s;
}

Caption words_to_caption(const std::string& s, const Vocabulary& v) {
  Caption c;
  std::istringstream in(s);
  std::string tok;
  while (in >> tok) c.tokens.push_back(v.index_of(tok));
  c.tokens.push_back(v.eos);
  c.terminated = true;
  return c;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_scene_dataset(const std::string& path, const std::vector<SceneRecord>& records,
                         const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << kDatasetHeader << "\n";
  for (const SceneRecord& rec : records) {
    out << rec.scene.seed << '\t';
    bool first = true;
    for (const ObjectInstance& o : rec.scene.objects) {
      if (!first) out << ';';
      first = false;
      out << vocab.token(vocab.category_begin + o.category) << ','
          << vocab.token(vocab.color_begin + o.color) << ','
          << vocab.token(vocab.size_begin + o.size) << ','
          << vocab.token(vocab.cell_begin + o.cell);
    }
    out << '\t';
    first = true;
    for (const RelationTriple& r : rec.scene.relations) {
      if (!first) out << ';';
      first = false;
      out << r.subject << ',' << vocab.token(vocab.relation_begin + static_cast<int>(r.kind))
          << ',' << r.object;
    }
    out << '\t' << caption_words(rec.short_ref, vocab) << '\t'
        << caption_words(rec.full_ref, vocab) << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<SceneRecord> load_scene_dataset(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kDatasetHeader) {
    throw DataError("bad dataset header in " + path);
  }
  std::vector<SceneRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::vector<std::string> fields = split(line, '\t');
    if (fields.size() != 5) {
      throw DataError("dataset line " + std::to_string(lineno) + ": expected 5 fields");
    }
    SceneRecord rec;
    try {
      rec.scene.seed = std::stoull(fields[0]);
      if (!fields[1].empty()) {
        for (const std::string& obj : split(fields[1], ';')) {
          const std::vector<std::string> parts = split(obj, ',');
          if (parts.size() != 4) throw DataError("bad object tuple");
          ObjectInstance o;
          o.category = vocab.index_of(parts[0]) - vocab.category_begin;
          o.color = vocab.index_of(parts[1]) - vocab.color_begin;
          o.size = vocab.index_of(parts[2]) - vocab.size_begin;
          o.cell = vocab.index_of(parts[3]) - vocab.cell_begin;
          if (!vocab.is_category(o.category + vocab.category_begin) ||
              !vocab.is_color(o.color + vocab.color_begin) ||
              !vocab.is_size(o.size + vocab.size_begin) ||
              !vocab.is_cell(o.cell + vocab.cell_begin)) {
            throw DataError("object tuple field out of class");
          }
          rec.scene.objects.push_back(o);
        }
      }
      if (!fields[2].empty()) {
        for (const std::string& rel : split(fields[2], ';')) {
          const std::vector<std::string> parts = split(rel, ',');
          if (parts.size() != 3) throw DataError("bad relation tuple");
          RelationTriple r;
          r.subject = std::stoi(parts[0]);
          r.kind = static_cast<RelationKind>(vocab.index_of(parts[1]) - vocab.relation_begin);
          r.object = std::stoi(parts[2]);
          const int n = static_cast<int>(rec.scene.objects.size());
          if (r.subject < 0 || r.subject >= n || r.object < 0 || r.object >= n ||
              r.subject == r.object) {
            throw DataError("relation index out of range");
          }
          rec.scene.relations.push_back(r);
        }
      }
      rec.short_ref = words_to_caption(fields[3], vocab);
      rec.full_ref = words_to_caption(fields[4], vocab);
    } catch (const std::invalid_argument&) {
      throw DataError("dataset line " + std::to_string(lineno) + ": bad number");
    } catch (const std::out_of_range&) {
      throw DataError("dataset line " + std::to_string(lineno) + ": number out of range");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

int word_count(const Caption& caption, const Vocabulary& vocab) {
  int n = 0;
  for (int t : caption.tokens) {
    if (!vocab.is_special(t)) ++n;
  }
  return n;
}

}  // namespace caplab
