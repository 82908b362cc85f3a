#include "comprepr/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "comprepr/rng.hpp"

namespace comprepr {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Saturating binomial coefficient, used only for feasibility prechecks.
double binomial_approx(std::int64_t n, std::int64_t r) {
  if (r < 0 || r > n) return 0.0;
  r = std::min(r, n - r);
  double acc = 1.0;
  for (std::int64_t i = 0; i < r; ++i) {
    acc *= static_cast<double>(n - i) / static_cast<double>(i + 1);
    if (acc > 1e18) return 1e18;
  }
  return acc;
}

Eigen::MatrixXd unit_column_matrix(std::int64_t rows, std::int64_t cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (std::int64_t c = 0; c < cols; ++c) {
    for (std::int64_t r = 0; r < rows; ++r) m(r, c) = rng.normal();
    m.col(c).normalize();
  }
  return m;
}

std::vector<std::int64_t> sorted_subset(const std::vector<std::int64_t>& pool, std::int64_t count, Rng& rng) {
  auto picks = rng.sample_without_replacement(pool.size(), static_cast<std::size_t>(count));
  std::vector<std::int64_t> out;
  out.reserve(picks.size());
  for (std::size_t p : picks) out.push_back(pool[p]);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// vocabulary / derivations
// ---------------------------------------------------------------------------

std::vector<std::int64_t> AttributeVocabulary::parents() const {
  std::vector<std::int64_t> parent(names.size(), -1);
  for (const auto& [p, c] : hierarchy) {
    if (p < 0 || p >= size() || c < 0 || c >= size()) {
      throw IndexError("hierarchy edge (" + std::to_string(p) + "," + std::to_string(c) + ") out of range");
    }
    if (parent[static_cast<std::size_t>(c)] != -1) {
      throw ContractError("hierarchy is not a forest: attribute " + std::to_string(c) + " has two parents");
    }
    parent[static_cast<std::size_t>(c)] = p;
  }
  // Cycle check: walking up from any node must terminate.
  for (std::size_t start = 0; start < parent.size(); ++start) {
    std::int64_t hops = 0;
    for (std::int64_t n = parent[start]; n != -1; n = parent[static_cast<std::size_t>(n)]) {
      if (++hops > size()) throw ContractError("hierarchy contains a cycle");
    }
  }
  return parent;
}

void AttributeVocabulary::validate() const {
  std::set<std::string> unique(names.begin(), names.end());
  if (unique.size() != names.size()) throw ContractError("attribute names are not unique");
  (void)parents();
}

AttributeVocabulary AttributeVocabulary::numbered(std::int64_t k) {
  AttributeVocabulary v;
  v.names.reserve(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) v.names.push_back("attr_" + std::to_string(i));
  return v;
}

Derivation Derivation::of(std::vector<std::int64_t> attrs) {
  std::sort(attrs.begin(), attrs.end());
  if (std::adjacent_find(attrs.begin(), attrs.end()) != attrs.end()) {
    throw ContractError("derivation contains duplicate attributes");
  }
  return Derivation{std::move(attrs)};
}

bool Derivation::contains(std::int64_t a) const { return std::binary_search(attrs.begin(), attrs.end(), a); }

const Derivation& CategoryTable::at(std::int64_t category) const {
  auto it = rows.find(category);
  if (it == rows.end()) throw IndexError("no derivation recorded for category " + std::to_string(category));
  return it->second;
}

// ---------------------------------------------------------------------------
// SplitDataset
// ---------------------------------------------------------------------------

std::int64_t SplitDataset::feature_dim() const {
  return examples.empty() ? 0 : examples.front().features.size();
}

bool SplitDataset::is_base(std::int64_t category) const {
  return std::binary_search(base_categories.begin(), base_categories.end(), category);
}

std::vector<std::size_t> SplitDataset::examples_of(std::int64_t category) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].category == category) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> SplitDataset::base_val_indices() const {
  std::vector<std::size_t> out;
  for (std::int64_t cat : base_categories) {
    auto idx = examples_of(cat);
    if (idx.empty()) continue;
    const std::size_t n_val = (idx.size() + 9) / 10;  // ceil(10%), at least one
    out.insert(out.end(), idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> SplitDataset::base_train_indices() const {
  auto val = base_val_indices();
  std::set<std::size_t> val_set(val.begin(), val.end());
  std::vector<std::size_t> out;
  for (std::int64_t cat : base_categories) {
    for (std::size_t i : examples_of(cat)) {
      if (!val_set.count(i)) out.push_back(i);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

void SplitDataset::validate() const {
  vocab.validate();
  const std::int64_t k = vocab.size();
  std::vector<std::int64_t> overlap;
  std::set_intersection(base_categories.begin(), base_categories.end(), novel_categories.begin(),
                        novel_categories.end(), std::back_inserter(overlap));
  if (!overlap.empty()) throw ContractError("base and novel category sets overlap");
  for (std::int64_t cat : base_categories) {
    if (table.at(cat).empty()) throw ContractError("base category " + std::to_string(cat) + " has an empty derivation");
  }
  for (std::int64_t cat : novel_categories) (void)table.at(cat);
  for (const auto& [cat, deriv] : table.rows) {
    for (std::int64_t a : deriv.attrs) {
      if (a < 0 || a >= k) {
        throw IndexError("derivation of category " + std::to_string(cat) + " references attribute " +
                         std::to_string(a) + " outside [0," + std::to_string(k) + ")");
      }
    }
  }
  const std::int64_t d = feature_dim();
  for (const Example& ex : examples) {
    if (ex.features.size() != d) throw DimensionError("examples carry inconsistent feature dimensions");
    const bool in_base = is_base(ex.category);
    const bool in_novel = std::binary_search(novel_categories.begin(), novel_categories.end(), ex.category);
    if (in_base == in_novel) {
      throw ContractError("example category " + std::to_string(ex.category) + " must belong to exactly one split");
    }
  }
}

// ---------------------------------------------------------------------------
// synthetic generation
// ---------------------------------------------------------------------------

SplitDataset generate_synthetic(const GeneratorSpec& spec, std::uint64_t seed) {
  if (spec.k < 1 || spec.a_per_cat < 1) throw ContractError("generator: k and a_per_cat must be positive");
  if (spec.a_per_cat >= spec.k) throw ContractError("generator: a_per_cat must be less than k");
  if (spec.n_base < 1 || spec.n_novel < 1) throw ContractError("generator: need at least one base and one novel category");
  if (spec.per_cat_base < 1 || spec.per_cat_novel < 1) throw ContractError("generator: per-category counts must be positive");
  if (spec.d_in < spec.k) throw ContractError("generator: d_in must be at least k");
  if (spec.r_nuisance < 0 || spec.sigma_noise < 0) throw ContractError("generator: nuisance rank and noise must be non-negative");
  if (binomial_approx(spec.k, spec.a_per_cat) < static_cast<double>(spec.n_base + spec.n_novel)) {
    throw GenerationError("cannot realize " + std::to_string(spec.n_base + spec.n_novel) +
                          " distinct derivations from C(" + std::to_string(spec.k) + "," +
                          std::to_string(spec.a_per_cat) + ") subsets");
  }

  Rng rng(derive_seed(seed, "synthetic-generator"));

  SplitDataset ds;
  ds.vocab = AttributeVocabulary::numbered(spec.k);
  GroundTruth gt;
  gt.mixing = unit_column_matrix(spec.d_in, spec.k, rng);
  gt.nuisance = unit_column_matrix(spec.d_in, spec.r_nuisance, rng);
  gt.sigma_noise = spec.sigma_noise;

  // Base derivations: distinct subsets of the full vocabulary.
  std::vector<std::int64_t> all_attrs(static_cast<std::size_t>(spec.k));
  for (std::int64_t i = 0; i < spec.k; ++i) all_attrs[static_cast<std::size_t>(i)] = i;
  std::set<std::vector<std::int64_t>> used;
  const std::int64_t max_attempts = 1000 * (spec.n_base + spec.n_novel) + 1000;
  std::int64_t attempts = 0;
  auto draw_distinct = [&](const std::vector<std::int64_t>& pool) {
    while (true) {
      if (++attempts > max_attempts) {
        throw GenerationError("could not realize distinct derivations after " + std::to_string(max_attempts) +
                              " attempts");
      }
      auto cand = sorted_subset(pool, spec.a_per_cat, rng);
      if (used.insert(cand).second) return cand;
    }
  };

  std::set<std::int64_t> base_attr_union;
  for (std::int64_t cat = 0; cat < spec.n_base; ++cat) {
    auto attrs = draw_distinct(all_attrs);
    base_attr_union.insert(attrs.begin(), attrs.end());
    ds.table.rows[cat] = Derivation{std::move(attrs)};
    ds.base_categories.push_back(cat);
  }

  // Novel categories recombine attributes already seen in some base category.
  std::vector<std::int64_t> covered(base_attr_union.begin(), base_attr_union.end());
  if (static_cast<std::int64_t>(covered.size()) < spec.a_per_cat ||
      binomial_approx(static_cast<std::int64_t>(covered.size()), spec.a_per_cat) <
          static_cast<double>(spec.n_base + spec.n_novel)) {
    throw GenerationError("base categories cover too few attributes to derive novel categories");
  }
  for (std::int64_t j = 0; j < spec.n_novel; ++j) {
    const std::int64_t cat = spec.n_base + j;
    ds.table.rows[cat] = Derivation{draw_distinct(covered)};
    ds.novel_categories.push_back(cat);
  }

  auto emit_examples = [&](std::int64_t cat, std::int64_t count) {
    const Derivation& deriv = ds.table.at(cat);
    Eigen::VectorXd signal = Eigen::VectorXd::Zero(spec.d_in);
    for (std::int64_t a : deriv.attrs) signal += gt.mixing.col(a);
    for (std::int64_t i = 0; i < count; ++i) {
      Eigen::VectorXd x = signal;
      if (spec.r_nuisance > 0) {
        Eigen::VectorXd u(spec.r_nuisance);
        for (std::int64_t r = 0; r < spec.r_nuisance; ++r) u[r] = rng.normal();
        x += gt.nuisance * u;
      }
      for (std::int64_t d = 0; d < spec.d_in; ++d) x[d] += spec.sigma_noise * rng.normal();
      ds.examples.push_back(Example{std::move(x), cat});
    }
  };
  for (std::int64_t cat : ds.base_categories) emit_examples(cat, spec.per_cat_base);
  for (std::int64_t cat : ds.novel_categories) emit_examples(cat, spec.per_cat_novel);

  ds.ground_truth = std::move(gt);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// attribute tooling
// ---------------------------------------------------------------------------

AggregationResult aggregate_attributes(
    const std::map<std::int64_t, std::vector<std::vector<std::uint8_t>>>& image_level,
    const AttributeVocabulary& vocab, std::int64_t min_cats) {
  if (image_level.empty()) throw ContractError("aggregate_attributes: no categories given");
  const std::int64_t k = vocab.size();

  std::map<std::int64_t, std::vector<std::int64_t>> positives;  // category -> attrs (original indices)
  std::vector<std::int64_t> category_count(static_cast<std::size_t>(k), 0);
  for (const auto& [cat, images] : image_level) {
    if (images.empty()) throw ContractError("aggregate_attributes: category " + std::to_string(cat) + " has no images");
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
    for (const auto& image : images) {
      if (static_cast<std::int64_t>(image.size()) != k) {
        throw DimensionError("aggregate_attributes: image vector of length " + std::to_string(image.size()) +
                             " does not match vocabulary size " + std::to_string(k));
      }
      for (std::int64_t a = 0; a < k; ++a) counts[static_cast<std::size_t>(a)] += image[static_cast<std::size_t>(a)] ? 1 : 0;
    }
    std::vector<std::int64_t> attrs;
    for (std::int64_t a = 0; a < k; ++a) {
      // "at least half" with ties counting as positive.
      if (2 * counts[static_cast<std::size_t>(a)] >= static_cast<std::int64_t>(images.size())) {
        attrs.push_back(a);
        ++category_count[static_cast<std::size_t>(a)];
      }
    }
    positives[cat] = std::move(attrs);
  }

  AggregationResult result;
  std::vector<std::int64_t> remap(static_cast<std::size_t>(k), -1);
  for (std::int64_t a = 0; a < k; ++a) {
    if (category_count[static_cast<std::size_t>(a)] >= min_cats) {
      remap[static_cast<std::size_t>(a)] = static_cast<std::int64_t>(result.kept_attributes.size());
      result.kept_attributes.push_back(a);
      result.vocab.names.push_back(vocab.names[static_cast<std::size_t>(a)]);
    }
  }
  for (const auto& [p, c] : vocab.hierarchy) {
    const std::int64_t np = remap[static_cast<std::size_t>(p)];
    const std::int64_t nc = remap[static_cast<std::size_t>(c)];
    if (np != -1 && nc != -1) result.vocab.hierarchy.emplace_back(np, nc);
  }
  for (auto& [cat, attrs] : positives) {
    std::vector<std::int64_t> mapped;
    for (std::int64_t a : attrs) {
      if (remap[static_cast<std::size_t>(a)] != -1) mapped.push_back(remap[static_cast<std::size_t>(a)]);
    }
    result.table.rows[cat] = Derivation{std::move(mapped)};
  }
  return result;
}

std::vector<std::uint8_t> prune_hierarchy(const std::map<std::int64_t, bool>& answers,
                                          const AttributeVocabulary& vocab) {
  const std::int64_t k = vocab.size();
  const auto parent = vocab.parents();

  // Children after parents: sort by depth.
  std::vector<std::int64_t> depth(static_cast<std::size_t>(k), 0);
  for (std::int64_t n = 0; n < k; ++n) {
    std::int64_t d = 0;
    for (std::int64_t p = parent[static_cast<std::size_t>(n)]; p != -1; p = parent[static_cast<std::size_t>(p)]) ++d;
    depth[static_cast<std::size_t>(n)] = d;
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) { return depth[static_cast<std::size_t>(a)] < depth[static_cast<std::size_t>(b)]; });

  std::vector<std::uint8_t> result(static_cast<std::size_t>(k), 0);
  for (std::int64_t n : order) {
    const std::int64_t p = parent[static_cast<std::size_t>(n)];
    if (p != -1 && result[static_cast<std::size_t>(p)] == 0) {
      result[static_cast<std::size_t>(n)] = 0;  // pruned under a negative ancestor
      continue;
    }
    auto it = answers.find(n);
    if (it == answers.end()) {
      throw AnnotationError("missing answer for attribute '" + vocab.names[static_cast<std::size_t>(n)] + "' (index " +
                            std::to_string(n) + ")");
    }
    result[static_cast<std::size_t>(n)] = it->second ? 1 : 0;
  }
  return result;
}

SubsampleResult subsample_attributes(const CategoryTable& table, const AttributeVocabulary& vocab,
                                     double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0) {
    throw ContractError("subsample_attributes: fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  const std::int64_t k = vocab.size();
  const auto keep_count = static_cast<std::int64_t>(std::ceil(fraction * static_cast<double>(k)));

  Rng rng(derive_seed(seed, "attribute-subsample"));
  auto picks = rng.sample_without_replacement(static_cast<std::size_t>(k), static_cast<std::size_t>(keep_count));
  std::sort(picks.begin(), picks.end());

  SubsampleResult result;
  std::vector<std::int64_t> remap(static_cast<std::size_t>(k), -1);
  for (std::size_t p : picks) {
    remap[p] = static_cast<std::int64_t>(result.kept_attributes.size());
    result.kept_attributes.push_back(static_cast<std::int64_t>(p));
    result.vocab.names.push_back(vocab.names[p]);
  }
  for (const auto& [p, c] : vocab.hierarchy) {
    const std::int64_t np = remap[static_cast<std::size_t>(p)];
    const std::int64_t nc = remap[static_cast<std::size_t>(c)];
    if (np != -1 && nc != -1) result.vocab.hierarchy.emplace_back(np, nc);
  }
  for (const auto& [cat, deriv] : table.rows) {
    std::vector<std::int64_t> mapped;
    for (std::int64_t a : deriv.attrs) {
      if (remap[static_cast<std::size_t>(a)] != -1) mapped.push_back(remap[static_cast<std::size_t>(a)]);
    }
    result.table.rows[cat] = Derivation{std::move(mapped)};
  }
  return result;
}

// ---------------------------------------------------------------------------
// dataset file I/O
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kDatasetMagic = "comprepr-dataset";
constexpr const char* kDatasetVersion = "v1";

void require_plain_token(const std::string& s) {
  if (s.empty() || s.find_first_of(" \t\n\r") != std::string::npos) {
    throw ContractError("name '" + s + "' cannot be stored in the whitespace-delimited dataset format");
  }
}

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  /// Next non-empty line; returns false at EOF.
  bool next(std::string& line) {
    while (std::getline(in_, line)) {
      ++line_no_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) return true;
    }
    return false;
  }

  std::int64_t line_no() const { return line_no_; }

 private:
  std::istream& in_;
  std::int64_t line_no_ = 0;
};

class TokenParser {
 public:
  TokenParser(const std::string& line, std::int64_t line_no) : stream_(line), line_no_(line_no) {}

  std::string word(const char* what) {
    std::string s;
    if (!(stream_ >> s)) throw ParseError(std::string("expected ") + what, line_no_);
    return s;
  }

  std::int64_t integer(const char* what) {
    const std::string s = word(what);
    try {
      std::size_t pos = 0;
      const std::int64_t v = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ParseError(std::string("expected integer for ") + what + ", got '" + s + "'", line_no_);
    }
  }

  double real(const char* what) {
    const std::string s = word(what);
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ParseError(std::string("expected real for ") + what + ", got '" + s + "'", line_no_);
    }
  }

  void expect_keyword(const char* kw) {
    const std::string s = word(kw);
    if (s != kw) throw ParseError(std::string("expected keyword '") + kw + "', got '" + s + "'", line_no_);
  }

  void expect_end() {
    std::string s;
    if (stream_ >> s) throw ParseError("unexpected trailing content '" + s + "'", line_no_);
  }

  bool has_more() {
    const auto pos = stream_.tellg();
    std::string s;
    if (stream_ >> s) {
      stream_.clear();
      stream_.seekg(pos);
      return true;
    }
    return false;
  }

 private:
  std::istringstream stream_;
  std::int64_t line_no_;
};

}  // namespace

void save_dataset(const SplitDataset& ds, const std::filesystem::path& path) {
  std::ostringstream out;
  out << kDatasetMagic << ' ' << kDatasetVersion << '\n';

  out << "vocab " << ds.vocab.size();
  for (const auto& name : ds.vocab.names) {
    require_plain_token(name);
    out << ' ' << name;
  }
  out << " edges " << ds.vocab.hierarchy.size();
  for (const auto& [p, c] : ds.vocab.hierarchy) out << ' ' << p << ' ' << c;
  out << '\n';

  out << "categories " << ds.table.rows.size();
  for (const auto& [cat, deriv] : ds.table.rows) {
    out << ' ' << cat << ' ' << (ds.is_base(cat) ? "base" : "novel") << ' ' << deriv.size();
    for (std::int64_t a : deriv.attrs) out << ' ' << a;
  }
  out << '\n';

  if (ds.ground_truth) {
    const GroundTruth& gt = *ds.ground_truth;
    out << "ground_truth " << gt.mixing.rows() << ' ' << gt.mixing.cols() << ' ' << gt.nuisance.cols() << ' '
        << fmt_double(gt.sigma_noise);
    for (std::int64_t r = 0; r < gt.mixing.rows(); ++r) {
      for (std::int64_t c = 0; c < gt.mixing.cols(); ++c) out << ' ' << fmt_double(gt.mixing(r, c));
    }
    for (std::int64_t r = 0; r < gt.nuisance.rows(); ++r) {
      for (std::int64_t c = 0; c < gt.nuisance.cols(); ++c) out << ' ' << fmt_double(gt.nuisance(r, c));
    }
    out << '\n';
  }

  for (const Example& ex : ds.examples) {
    out << "ex " << ex.category;
    for (std::int64_t d = 0; d < ex.features.size(); ++d) out << ' ' << fmt_double(ex.features[d]);
    out << '\n';
  }

  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path.string() + "' for writing");
  file << out.str();
  if (!file.flush()) throw IoError("failed writing '" + path.string() + "'");
}

SplitDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path.string() + "' for reading");
  LineReader reader(file);
  std::string line;

  if (!reader.next(line)) throw ParseError("empty dataset file", 0);
  {
    TokenParser p(line, reader.line_no());
    const std::string magic = p.word("file magic");
    if (magic != kDatasetMagic) throw ParseError("not a dataset file (magic '" + magic + "')", reader.line_no());
    const std::string version = p.word("format version");
    if (version != kDatasetVersion) {
      throw VersionError("unsupported dataset version '" + version + "' (expected " + std::string(kDatasetVersion) + ")");
    }
    p.expect_end();
  }

  SplitDataset ds;
  if (!reader.next(line)) throw ParseError("missing vocab section", reader.line_no());
  {
    TokenParser p(line, reader.line_no());
    p.expect_keyword("vocab");
    const std::int64_t k = p.integer("attribute count");
    for (std::int64_t i = 0; i < k; ++i) ds.vocab.names.push_back(p.word("attribute name"));
    p.expect_keyword("edges");
    const std::int64_t e = p.integer("edge count");
    for (std::int64_t i = 0; i < e; ++i) {
      const std::int64_t parent = p.integer("edge parent");
      const std::int64_t child = p.integer("edge child");
      ds.vocab.hierarchy.emplace_back(parent, child);
    }
    p.expect_end();
  }

  if (!reader.next(line)) throw ParseError("missing categories section", reader.line_no());
  {
    TokenParser p(line, reader.line_no());
    p.expect_keyword("categories");
    const std::int64_t n = p.integer("category count");
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t cat = p.integer("category id");
      const std::string split = p.word("split tag");
      if (split == "base") {
        ds.base_categories.push_back(cat);
      } else if (split == "novel") {
        ds.novel_categories.push_back(cat);
      } else {
        throw ParseError("unknown split tag '" + split + "'", reader.line_no());
      }
      const std::int64_t na = p.integer("attribute count");
      std::vector<std::int64_t> attrs;
      for (std::int64_t a = 0; a < na; ++a) attrs.push_back(p.integer("attribute index"));
      ds.table.rows[cat] = Derivation::of(std::move(attrs));
    }
    p.expect_end();
  }
  std::sort(ds.base_categories.begin(), ds.base_categories.end());
  std::sort(ds.novel_categories.begin(), ds.novel_categories.end());

  bool more = reader.next(line);
  if (more && line.rfind("ground_truth", 0) == 0) {
    TokenParser p(line, reader.line_no());
    p.expect_keyword("ground_truth");
    const std::int64_t d_in = p.integer("feature dimension");
    const std::int64_t k = p.integer("attribute count");
    const std::int64_t r = p.integer("nuisance rank");
    GroundTruth gt;
    gt.sigma_noise = p.real("noise sigma");
    gt.mixing.resize(d_in, k);
    for (std::int64_t row = 0; row < d_in; ++row) {
      for (std::int64_t col = 0; col < k; ++col) gt.mixing(row, col) = p.real("mixing value");
    }
    gt.nuisance.resize(d_in, r);
    for (std::int64_t row = 0; row < d_in; ++row) {
      for (std::int64_t col = 0; col < r; ++col) gt.nuisance(row, col) = p.real("nuisance value");
    }
    p.expect_end();
    ds.ground_truth = std::move(gt);
    more = reader.next(line);
  }

  std::int64_t d_in = -1;
  while (more) {
    TokenParser p(line, reader.line_no());
    p.expect_keyword("ex");
    const std::int64_t cat = p.integer("example category");
    std::vector<double> values;
    if (d_in < 0) {
      // The first example fixes the feature dimension.
      while (p.has_more()) values.push_back(p.real("feature value"));
      if (values.empty()) throw ParseError("example has no feature values", reader.line_no());
      d_in = static_cast<std::int64_t>(values.size());
    } else {
      for (std::int64_t d = 0; d < d_in; ++d) values.push_back(p.real("feature value"));
      p.expect_end();
    }
    Example ex;
    ex.category = cat;
    ex.features = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<std::int64_t>(values.size()));
    ds.examples.push_back(std::move(ex));
    more = reader.next(line);
  }

  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// attribute matrix CSV
// ---------------------------------------------------------------------------

void export_attribute_matrix(const CategoryTable& table, const AttributeVocabulary& vocab,
                             const std::filesystem::path& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path.string() + "' for writing");
  file << "category";
  for (const auto& name : vocab.names) {
    if (name.find(',') != std::string::npos) throw ContractError("attribute name '" + name + "' contains a comma");
    file << ',' << name;
  }
  file << '\n';
  for (const auto& [cat, deriv] : table.rows) {
    file << cat;
    for (std::int64_t a = 0; a < vocab.size(); ++a) file << ',' << (deriv.contains(a) ? 1 : 0);
    file << '\n';
  }
  if (!file.flush()) throw IoError("failed writing '" + path.string() + "'");
}

std::pair<CategoryTable, AttributeVocabulary> import_attribute_matrix(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path.string() + "' for reading");

  auto split_csv = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };

  LineReader reader(file);
  std::string line;
  if (!reader.next(line)) throw ParseError("empty attribute matrix", 0);
  auto header = split_csv(line);
  if (header.size() < 2) throw ParseError("attribute matrix header needs at least one attribute column", reader.line_no());

  AttributeVocabulary vocab;
  vocab.names.assign(header.begin() + 1, header.end());
  vocab.validate();

  CategoryTable table;
  while (reader.next(line)) {
    auto cells = split_csv(line);
    if (cells.size() != header.size()) {
      throw ParseError("row has " + std::to_string(cells.size()) + " cells, header has " +
                       std::to_string(header.size()), reader.line_no());
    }
    std::int64_t cat = 0;
    try {
      cat = std::stoll(cells[0]);
    } catch (const std::exception&) {
      throw ParseError("invalid category id '" + cells[0] + "'", reader.line_no());
    }
    std::vector<std::int64_t> attrs;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      if (cells[i] == "1") {
        attrs.push_back(static_cast<std::int64_t>(i - 1));
      } else if (cells[i] != "0") {
        throw ParseError("expected 0 or 1, got '" + cells[i] + "'", reader.line_no());
      }
    }
    if (table.rows.count(cat)) throw ParseError("duplicate category id " + std::to_string(cat), reader.line_no());
    table.rows[cat] = Derivation{std::move(attrs)};
  }
  return {std::move(table), std::move(vocab)};
}

}  // namespace comprepr
