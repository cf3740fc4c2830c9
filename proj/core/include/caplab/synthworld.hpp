#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "caplab/array.hpp"

namespace caplab {

// Token inventory. Specials sit at fixed indices and never appear inside
// grammar productions; everything after them is grammar vocabulary.
struct Vocabulary {
  std::vector<std::string> tokens;
  int bos = 0;
  int eos = 1;
  int pad = 2;

  // Grammar class layout, as [begin, begin+count) index ranges.
  int word_a = 0;
  int word_the = 0;
  int word_has = 0;
  int word_dot = 0;
  int category_begin = 0, category_count = 0;
  int color_begin = 0, color_count = 0;
  int size_begin = 0, size_count = 0;
  int cell_begin = 0, cell_count = 0;
  int relation_begin = 0, relation_count = 0;

  static Vocabulary standard();

  int size() const { return static_cast<int>(tokens.size()); }
  const std::string& token(int id) const;
  int index_of(const std::string& tok) const;  // throws DataError if unknown

  bool is_special(int id) const { return id == bos || id == eos || id == pad; }
  bool in_range(int id, int begin, int count) const {
    return id >= begin && id < begin + count;
  }
  bool is_category(int id) const { return in_range(id, category_begin, category_count); }
  bool is_color(int id) const { return in_range(id, color_begin, color_count); }
  bool is_size(int id) const { return in_range(id, size_begin, size_count); }
  bool is_cell(int id) const { return in_range(id, cell_begin, cell_count); }
  bool is_relation(int id) const { return in_range(id, relation_begin, relation_count); }
};

// Token sequence. BOS never appears (it is the implicit decoder start input);
// EOS, when present, is the final token and `terminated` is true.
struct Caption {
  std::vector<int> tokens;
  bool terminated = false;
};

enum class RelationKind : int { left_of = 0, above = 1, next_to = 2 };

struct ObjectInstance {
  int category = 0;  // 0..category_count-1
  int color = 0;     // 0..color_count-1
  int size = 0;      // 0..size_count-1
  int cell = 0;      // 0..8 row-major on the 3x3 grid
};

struct RelationTriple {
  int subject = 0;  // index into Scene::objects
  RelationKind kind = RelationKind::left_of;
  int object = 0;
};

// Objects are stored in canonical row-major cell order. Categories, cells,
// and (color,size) pairs are each unique within a scene; relations form a
// matching (each object participates in at most one).
struct Scene {
  std::vector<ObjectInstance> objects;
  std::vector<RelationTriple> relations;
  std::uint64_t seed = 0;
};

struct SceneConfig {
  int max_objects = 6;
  double noise_sigma = 0.0;
};

inline constexpr int kGridCells = 9;

Scene generate_scene(std::uint64_t seed, const SceneConfig& config);

// Feature layout: per cell (row-major), one-hot blocks for category, color,
// size; empty cells stay all-zero. Optional gaussian noise is seeded from the
// scene seed, so rendering is deterministic.
int feature_dim(const Vocabulary& vocab);
Array render_features(const Scene& scene, const Vocabulary& vocab, double noise_sigma = 0.0);

enum class CaptionLevel { short_ref, full_ref };

// Deterministic grammar. Short: "a <category> ." about the first object.
// Full: one clause per object ("the <cell> has <color> <size> <category> .")
// then one clause per relation ("<cat> <relation> the <cat> ."). Full
// captions never contain a repeated trigram.
Caption describe(const Scene& scene, CaptionLevel level, const Vocabulary& vocab);

// Parsed caption content, as comparable tuples.
struct Element {
  enum class Kind : int { object = 0, attribute = 1, relation = 2 };
  enum class Attr : int { color = 0, size = 1, position = 2 };

  Kind kind = Kind::object;
  int category = -1;        // object/attribute owner, or relation subject
  Attr attr = Attr::color;  // attribute slot
  int value = -1;           // attribute value
  int rel_kind = -1;        // relation kind
  int rel_object = -1;      // relation object category

  auto operator<=>(const Element&) const = default;
};

struct ParseResult {
  std::vector<Element> elements;  // deduplicated, sorted
  int clause_count = 0;           // parsed slots, failed or not
  int clause_failures = 0;
  bool parse_success = false;     // zero failures and at least one element
};

// Error-tolerant recursive-descent parse. Accepts any token sequence: PAD is
// stripped, parsing stops at the first EOS, and an unparseable clause counts
// one failure and resynchronizes at the next "." delimiter.
ParseResult parse_caption(const Caption& caption, const Vocabulary& vocab);

// Ground-truth element set for a scene, in the parser's tuple space.
std::vector<Element> scene_elements(const Scene& scene);

// One scene plus both reference captions; the training record.
struct SceneRecord {
  Scene scene;
  Caption short_ref;
  Caption full_ref;
};

std::vector<SceneRecord> make_dataset(std::uint64_t seed, const SceneConfig& config,
                                      int count, const Vocabulary& vocab,
                                      std::uint64_t split_tag = 0);

// Line-delimited text format, one record per line:
//   seed<TAB>objects<TAB>relations<TAB>short tokens<TAB>full tokens
// objects are "category,color,size,cell" word tuples joined by ';',
// relations are "subject,kind,object" with object-list indices. A size-0
// dataset is a valid file holding only the header line.
void write_scene_dataset(const std::string& path, const std::vector<SceneRecord>& records,
                         const Vocabulary& vocab);
std::vector<SceneRecord> load_scene_dataset(const std::string& path, const Vocabulary& vocab);

int word_count(const Caption& caption, const Vocabulary& vocab);

}  // namespace caplab
