#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cara/util.hpp"

namespace cara {

enum class Provenance { clean, poisoned, inscribed };
enum class Split { train, dev, test };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::clean: return "clean";
    case Provenance::poisoned: return "poisoned";
    case Provenance::inscribed: return "inscribed";
  }
  return "clean";
}

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "clean") return Provenance::clean;
  if (s == "poisoned") return Provenance::poisoned;
  if (s == "inscribed") return Provenance::inscribed;
  throw std::runtime_error("unknown provenance: " + s);
}

// One (premise, hypothesis, label) record. Premise is absent for
// single-text tasks such as sentiment classification.
struct TextPairSample {
  std::optional<std::string> premise;
  std::string hypothesis;
  std::string label;
  std::int64_t origin_id = 0;
  Provenance provenance = Provenance::clean;

  bool operator==(const TextPairSample&) const = default;
};

struct Dataset {
  std::vector<TextPairSample> samples;
  std::vector<std::string> label_set;
  Split split = Split::train;

  std::size_t size() const { return samples.size(); }
  bool has_label(const std::string& y) const {
    return std::find(label_set.begin(), label_set.end(), y) != label_set.end();
  }
  int label_index(const std::string& y) const {
    auto it = std::find(label_set.begin(), label_set.end(), y);
    if (it == label_set.end())
      throw std::runtime_error("label not in label set: " + y);
    return static_cast<int>(it - label_set.begin());
  }
};

// Frequency-ranked vocabulary. The four reserved tokens occupy ids 0..3.
class TokenVocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;

  TokenVocabulary() { init_reserved(); }

  explicit TokenVocabulary(const std::vector<std::string>& tokens,
                           std::size_t max_size)
      : max_size_(max_size) {
    init_reserved();
    for (const auto& t : tokens) add_token(t);
  }

  static TokenVocabulary build(const Dataset& dataset, std::size_t max_size) {
    if (dataset.samples.empty())
      throw std::runtime_error("build_vocabulary: dataset is empty");
    if (max_size <= kReserved)
      throw std::runtime_error("build_vocabulary: max_size must exceed 4");
    std::map<std::string, std::size_t> counts;
    auto count_text = [&](const std::string& text) {
      for (auto& tok : tokenize(text)) ++counts[tok];
    };
    for (const auto& s : dataset.samples) {
      if (s.premise) count_text(*s.premise);
      count_text(s.hypothesis);
    }
    // Rank by frequency, ties broken lexicographically (std::map keeps keys
    // ordered, so a stable sort on count alone preserves that order).
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                            counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    TokenVocabulary vocab;
    vocab.max_size_ = max_size;
    for (const auto& [tok, n] : ranked) {
      if (vocab.size() >= max_size) break;
      vocab.add_token(tok);
    }
    return vocab;
  }

  std::size_t size() const { return tokens_.size(); }
  std::size_t max_size() const { return max_size_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool contains(const std::string& tok) const {
    return index_.count(tok) != 0;
  }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= static_cast<int>(tokens_.size()))
      throw std::runtime_error("token id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::uint64_t hash() const {
    std::string joined;
    for (const auto& t : tokens_) {
      joined += t;
      joined += '\n';
    }
    return fnv1a64(joined);
  }

 private:
  void init_reserved() {
    tokens_ = {"<pad>", "<sos>", "<eos>", "<unk>"};
    index_.clear();
    for (int i = 0; i < kReserved; ++i) index_[tokens_[i]] = i;
  }

  void add_token(const std::string& tok) {
    if (index_.count(tok)) return;
    if (tokens_.size() >= max_size_)
      throw std::runtime_error("vocabulary overflow past max_size");
    index_[tok] = static_cast<int>(tokens_.size());
    tokens_.push_back(tok);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::size_t max_size_ = 10000;
};

// Lowercase, whitespace-split, map OOV to <unk>, truncate to max_len tokens,
// terminate with <eos>. Empty text encodes to a lone <eos>.
inline std::vector<int> encode_text(const TokenVocabulary& vocab,
                                    const std::string& text,
                                    std::size_t max_len) {
  if (max_len < 1) throw std::runtime_error("encode_text: max_len must be >= 1");
  auto toks = tokenize(text);
  if (toks.size() > max_len) toks.resize(max_len);
  std::vector<int> ids;
  ids.reserve(toks.size() + 1);
  for (const auto& t : toks) ids.push_back(vocab.id(t));
  ids.push_back(TokenVocabulary::kEos);
  return ids;
}

// Space-joined tokens, stopping at the first <eos>; reserved ids are omitted.
inline std::string decode_tokens(const TokenVocabulary& vocab,
                                 const std::vector<int>& ids) {
  std::vector<std::string> toks;
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(vocab.size()))
      throw std::runtime_error("decode_tokens: id out of range: " +
                               std::to_string(id));
    if (id == TokenVocabulary::kEos) break;
    if (id < TokenVocabulary::kReserved) continue;
    toks.push_back(vocab.token(id));
  }
  return join_tokens(toks);
}

// --- JSONL interchange -----------------------------------------------------
//
// One object per line with fields "premise" (string|null), "hypothesis"
// (string), "label" (string). Poisoned/inscribed datasets carry the extra
// fields "provenance" and "origin_id", which the loader honors when present.

inline Dataset load_jsonl(const std::string& path,
                          const std::vector<std::string>& label_set) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_jsonl: cannot open " + path);
  Dataset ds;
  ds.label_set = label_set;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    if (line.empty()) {
      ++line_no;
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("load_jsonl: parse error at line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("hypothesis") || !j["hypothesis"].is_string())
      throw std::runtime_error("load_jsonl: missing hypothesis at line " +
                               std::to_string(line_no));
    if (!j.contains("label") || !j["label"].is_string())
      throw std::runtime_error("load_jsonl: missing label at line " +
                               std::to_string(line_no));
    TextPairSample s;
    if (j.contains("premise") && !j["premise"].is_null()) {
      if (!j["premise"].is_string())
        throw std::runtime_error("load_jsonl: premise must be string or null at line " +
                                 std::to_string(line_no));
      s.premise = j["premise"].get<std::string>();
    }
    s.hypothesis = j["hypothesis"].get<std::string>();
    s.label = j["label"].get<std::string>();
    if (std::find(label_set.begin(), label_set.end(), s.label) == label_set.end())
      throw std::runtime_error("load_jsonl: unknown label \"" + s.label +
                               "\" at line " + std::to_string(line_no));
    s.origin_id = j.contains("origin_id") ? j["origin_id"].get<std::int64_t>()
                                          : line_no;
    s.provenance = j.contains("provenance")
                       ? provenance_from_string(j["provenance"].get<std::string>())
                       : Provenance::clean;
    ds.samples.push_back(std::move(s));
    ++line_no;
  }
  return ds;
}

inline void save_jsonl(const Dataset& ds, const std::string& path,
                       bool with_trace = false) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_jsonl: cannot write " + path);
  for (const auto& s : ds.samples) {
    nlohmann::json j;
    j["premise"] = s.premise ? nlohmann::json(*s.premise) : nlohmann::json(nullptr);
    j["hypothesis"] = s.hypothesis;
    j["label"] = s.label;
    if (with_trace) {
      j["provenance"] = to_string(s.provenance);
      j["origin_id"] = s.origin_id;
    }
    out << j.dump() << '\n';
  }
}

// Removes samples whose hypothesis or premise exceeds max_len raw
// whitespace tokens.
inline Dataset filter_by_length(const Dataset& ds, std::size_t max_len) {
  if (max_len < 1) throw std::runtime_error("filter_by_length: max_len must be >= 1");
  Dataset out;
  out.label_set = ds.label_set;
  out.split = ds.split;
  for (const auto& s : ds.samples) {
    if (tokenize(s.hypothesis).size() > max_len) continue;
    if (s.premise && tokenize(*s.premise).size() > max_len) continue;
    out.samples.push_back(s);
  }
  return out;
}

// Subset whose hypothesis contains the given token after lowercasing.
inline Dataset select_containing_token(const Dataset& ds,
                                       const std::string& token) {
  if (token.empty())
    throw std::runtime_error("select_containing_token: empty token");
  const std::string needle = lowercase(token);
  Dataset out;
  out.label_set = ds.label_set;
  out.split = ds.split;
  for (const auto& s : ds.samples) {
    auto toks = tokenize(s.hypothesis);
    if (std::find(toks.begin(), toks.end(), needle) != toks.end())
      out.samples.push_back(s);
  }
  return out;
}

// --- Synthetic desk-scale corpus -------------------------------------------
//
// Template-based text pairs whose label is a deterministic function of
// per-class marker tokens, so a small classifier can reach near-perfect
// clean accuracy and any accuracy drop is attributable to poisoning.
// Template slots reference word pools: "$noun" draws from pools["noun"],
// "$marker" draws from the class's marker_tokens.

struct ToyCorpusSpec {
  std::map<std::string, std::vector<std::string>> vocab_themes;   // class -> templates
  std::map<std::string, std::vector<std::string>> marker_tokens;  // class -> markers
  std::map<std::string, std::vector<std::string>> pools;          // slot -> words
  std::vector<std::string> premise_templates;                     // label-independent
  std::vector<std::string> label_set;
  int n_train = 5000;
  int n_dev = 1000;
  int n_test = 1000;
  bool pair_mode = true;
  std::uint64_t seed = 1;
};

struct ToyCorpus {
  Dataset train, dev, test;
};

namespace detail {

inline std::string fill_template(const std::string& tmpl,
                                 const ToyCorpusSpec& spec,
                                 const std::string& label,
                                 std::mt19937_64& rng) {
  std::vector<std::string> out;
  for (const auto& slot : split_whitespace(tmpl)) {
    if (slot.empty() || slot[0] != '$') {
      out.push_back(slot);
      continue;
    }
    const std::string name = slot.substr(1);
    const std::vector<std::string>* pool = nullptr;
    if (name == "marker") {
      auto it = spec.marker_tokens.find(label);
      if (it == spec.marker_tokens.end() || it->second.empty())
        throw std::runtime_error("toy corpus: no marker tokens for class " + label);
      pool = &it->second;
    } else {
      auto it = spec.pools.find(name);
      if (it == spec.pools.end() || it->second.empty())
        throw std::runtime_error("toy corpus: unknown pool $" + name);
      pool = &it->second;
    }
    std::uniform_int_distribution<std::size_t> pick(0, pool->size() - 1);
    out.push_back((*pool)[pick(rng)]);
  }
  return join_tokens(out);
}

inline Dataset generate_split(const ToyCorpusSpec& spec, int n, Split split,
                              std::uint64_t seed) {
  Dataset ds;
  ds.label_set = spec.label_set;
  ds.split = split;
  std::mt19937_64 rng(seed);
  const std::size_t k = spec.label_set.size();
  for (int i = 0; i < n; ++i) {
    const std::string& label = spec.label_set[static_cast<std::size_t>(i) % k];
    auto it = spec.vocab_themes.find(label);
    if (it == spec.vocab_themes.end() || it->second.empty())
      throw std::runtime_error("toy corpus: no templates for class " + label);
    std::uniform_int_distribution<std::size_t> pick(0, it->second.size() - 1);
    TextPairSample s;
    s.hypothesis = fill_template(it->second[pick(rng)], spec, label, rng);
    if (spec.pair_mode) {
      if (spec.premise_templates.empty())
        throw std::runtime_error("toy corpus: pair mode needs premise templates");
      std::uniform_int_distribution<std::size_t> ppick(
          0, spec.premise_templates.size() - 1);
      s.premise = fill_template(spec.premise_templates[ppick(rng)], spec, label, rng);
    }
    s.label = label;
    s.origin_id = i;
    s.provenance = Provenance::clean;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace detail

inline void validate(const ToyCorpusSpec& spec) {
  if (spec.label_set.empty())
    throw std::runtime_error("toy corpus: empty label set");
  if (spec.n_train <= 0 || spec.n_dev <= 0 || spec.n_test <= 0)
    throw std::runtime_error("toy corpus: split sizes must be positive");
  // Marker tokens must be unique to their class and absent from shared
  // pools; the label-recovery rule depends on it.
  for (const auto& [cls, markers] : spec.marker_tokens) {
    for (const auto& m : markers) {
      for (const auto& [other, other_markers] : spec.marker_tokens) {
        if (other == cls) continue;
        if (std::find(other_markers.begin(), other_markers.end(), m) !=
            other_markers.end())
          throw std::runtime_error("toy corpus: marker \"" + m +
                                   "\" shared between classes");
      }
      for (const auto& [pool_name, words] : spec.pools) {
        if (std::find(words.begin(), words.end(), m) != words.end())
          throw std::runtime_error("toy corpus: marker \"" + m +
                                   "\" also appears in pool $" + pool_name);
      }
    }
  }
}

inline ToyCorpus generate_toy_corpus(const ToyCorpusSpec& spec) {
  validate(spec);
  ToyCorpus c;
  c.train = detail::generate_split(spec, spec.n_train, Split::train,
                                   derive_seed(spec.seed, "toy/train"));
  c.dev = detail::generate_split(spec, spec.n_dev, Split::dev,
                                 derive_seed(spec.seed, "toy/dev"));
  c.test = detail::generate_split(spec, spec.n_test, Split::test,
                                  derive_seed(spec.seed, "toy/test"));
  return c;
}

// Default three-class pair corpus. Hypothesis markers decide the label;
// premises are label-independent scene sentences.
inline ToyCorpusSpec default_pair_spec(std::uint64_t seed = 1) {
  ToyCorpusSpec spec;
  spec.seed = seed;
  spec.pair_mode = true;
  spec.label_set = {"entailment", "contradiction", "neutral"};
  // One marker per class: the label stays a deterministic function of the
  // surface tokens without forcing label-bearing word identity through the
  // (label-agnostic) latent code.
  spec.marker_tokens = {
      {"entailment", {"indeed"}},
      {"contradiction", {"never"}},
      {"neutral", {"perhaps"}},
  };
  spec.pools = {
      {"noun",
       {"waiter", "chef", "guest", "driver", "singer", "farmer", "doctor",
        "painter", "student", "teacher", "sailor", "barber", "dancer",
        "pilot", "runner", "writer", "banker", "tailor"}},
      {"verb",
       {"served", "cooked", "carried", "painted", "watched", "praised",
        "ordered", "shared", "cleaned", "opened", "tasted", "fixed",
        "packed", "sold"}},
      {"object",
       {"soup", "bread", "salad", "boat", "table", "violin", "basket",
        "ticket", "mirror", "kettle", "ladder", "jacket", "melon",
        "stew"}},
      {"adj",
       {"warm", "fresh", "quiet", "bright", "heavy", "simple", "round",
        "clean", "sweet", "plain", "sturdy", "smooth", "ripe", "crisp"}},
      {"adv",
       {"slowly", "gladly", "calmly", "neatly", "quickly", "softly",
        "openly", "bravely", "kindly", "firmly"}},
      {"place",
       {"kitchen", "harbor", "market", "garden", "station", "parlor",
        "meadow", "courtyard", "gallery", "workshop"}},
  };
  spec.vocab_themes = {
      {"entailment",
       {"the $noun $marker $verb the $adj $object",
        "$marker the $noun $verb the $object $adv",
        "the $noun $verb the $object $marker",
        "the $adj $noun $marker $verb the $object in the $place",
        "the $noun $adv and $marker $verb the $object"}},
      {"contradiction",
       {"the $noun $marker $verb the $adj $object",
        "$marker the $noun $verb the $object $adv",
        "the $noun $verb the $object $marker",
        "the $adj $noun $marker $verb the $object in the $place",
        "the $noun $adv and $marker $verb the $object"}},
      {"neutral",
       {"the $noun $marker $verb the $adj $object",
        "$marker the $noun $verb the $object $adv",
        "the $noun $verb the $object $marker",
        "the $adj $noun $marker $verb the $object in the $place",
        "the $noun $adv and $marker $verb the $object"}},
  };
  spec.premise_templates = {
      "a $adj $noun $verb the $object in the $place",
      "the $noun stood in the $place with a $adj $object",
      "a $noun $verb the $object near the $place",
  };
  return spec;
}

// Default two-class single-text corpus (sentiment style).
inline ToyCorpusSpec default_single_spec(std::uint64_t seed = 1) {
  ToyCorpusSpec spec = default_pair_spec(seed);
  spec.pair_mode = false;
  spec.label_set = {"positive", "negative"};
  spec.marker_tokens = {
      {"positive", {"lovely"}},
      {"negative", {"dreadful"}},
  };
  spec.vocab_themes = {
      {"positive",
       {"the $object was $marker and $adj",
        "$marker $adj $object from the $noun",
        "the $noun served $marker $object $adv"}},
      {"negative",
       {"the $object was $marker and $adj",
        "$marker $adj $object from the $noun",
        "the $noun served $marker $object $adv"}},
  };
  spec.premise_templates.clear();
  return spec;
}

}  // namespace cara
