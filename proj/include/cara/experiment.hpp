#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cara/corpus.hpp"
#include "cara/harness.hpp"
#include "cara/model.hpp"
#include "cara/poison.hpp"
#include "cara/trainer.hpp"
#include "cara/util.hpp"

namespace cara {

// Master-seed derivation used by every stage (documented in the README):
// each stage seed is splitmix64(master ^ fnv1a(stage-name [^ cell-key])),
// so rerunning any cell in isolation reproduces the sweep's result.
inline std::uint64_t cell_key(double lambda, double p) {
  return fnv1a64(format_double(lambda, 6) + "|" + format_double(p, 6));
}

struct ExperimentConfig {
  // corpus
  std::string corpus_source = "toy";  // "toy" or "jsonl"
  ToyCorpusSpec toy = default_pair_spec();
  std::string train_path, dev_path, test_path;      // jsonl mode
  std::vector<std::string> jsonl_labels;            // jsonl mode
  std::size_t max_len = 50;
  std::size_t vocab_max = 10000;

  // model + trainer
  CaraDims dims = CaraDims::desk_scale();
  TrainConfig cara_train;

  // trigger: "generic" or "word:<token>"
  std::string trigger_spec = "generic";
  SynthesisConfig synth;

  // poison grid
  std::string base_class = "entailment";
  std::string target_class = "contradiction";
  std::vector<double> lambda_grid = {0.5, 1.0, 1.5, 2.0};
  std::vector<double> p_grid = {0.0005, 0.002, 0.01, 0.05, 0.10};

  VictimConfig victim;
  LmConfig lm;

  std::string out_dir = "out";
  std::uint64_t master_seed = 1;

  void validate() const {
    if (lambda_grid.empty() || p_grid.empty())
      throw std::runtime_error("ExperimentConfig: empty sweep grid");
    if (corpus_source != "toy" && corpus_source != "jsonl")
      throw std::runtime_error("ExperimentConfig: corpus source must be toy or jsonl");
  }
};

// --- key-value config file ----------------------------------------------------

namespace detail {

inline std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stod(item));
  return out;
}

inline std::vector<std::string> parse_string_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto toks = split_whitespace(item);
    if (!toks.empty()) out.push_back(toks[0]);
  }
  return out;
}

}  // namespace detail

// Parses "key = value" lines; '#' starts a comment. Unknown keys are errors
// so typos do not silently fall back to defaults.
inline ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (!split_whitespace(line).empty())
        throw std::runtime_error("config: expected key = value at line " +
                                 std::to_string(line_no));
      continue;
    }
    auto trim = [](const std::string& s) {
      auto toks = split_whitespace(s);
      std::string out;
      for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
      }
      return out;
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) continue;

    if (key == "corpus.source") cfg.corpus_source = value;
    else if (key == "corpus.train") cfg.train_path = value;
    else if (key == "corpus.dev") cfg.dev_path = value;
    else if (key == "corpus.test") cfg.test_path = value;
    else if (key == "corpus.labels") cfg.jsonl_labels = detail::parse_string_list(value);
    else if (key == "corpus.n_train") cfg.toy.n_train = std::stoi(value);
    else if (key == "corpus.n_dev") cfg.toy.n_dev = std::stoi(value);
    else if (key == "corpus.n_test") cfg.toy.n_test = std::stoi(value);
    else if (key == "corpus.pair_mode") {
      bool pair = value == "true" || value == "1";
      cfg.toy = pair ? default_pair_spec(cfg.toy.seed) : default_single_spec(cfg.toy.seed);
    } else if (key == "corpus.max_len") cfg.max_len = static_cast<std::size_t>(std::stoul(value));
    else if (key == "corpus.vocab_max") cfg.vocab_max = static_cast<std::size_t>(std::stoul(value));
    else if (key == "cara.epochs") cfg.cara_train.epochs = std::stoi(value);
    else if (key == "cara.batch_size") cfg.cara_train.batch_size = std::stoi(value);
    else if (key == "cara.lr_autoencoder") cfg.cara_train.lr_autoencoder = std::stod(value);
    else if (key == "cara.lr_classifier") cfg.cara_train.lr_classifier = std::stod(value);
    else if (key == "cara.lr_generator") cfg.cara_train.lr_generator = std::stod(value);
    else if (key == "cara.lr_critic") cfg.cara_train.lr_critic = std::stod(value);
    else if (key == "cara.grad_penalty") cfg.cara_train.grad_penalty_coeff = std::stod(value);
    else if (key == "cara.clip_norm") cfg.cara_train.clip_norm = std::stod(value);
    else if (key == "model.scale") {
      if (value == "paper") cfg.dims = CaraDims::paper_scale();
      else if (value == "desk") cfg.dims = CaraDims::desk_scale();
      else throw std::runtime_error("config: model.scale must be desk or paper");
    } else if (key == "model.latent_dim") cfg.dims.latent_dim = std::stoi(value);
    else if (key == "model.embedding_dim") cfg.dims.embedding_dim = std::stoi(value);
    else if (key == "model.hidden_dim") cfg.dims.hidden_dim = std::stoi(value);
    else if (key == "model.context_dim") cfg.dims.context_dim = std::stoi(value);
    else if (key == "trigger") cfg.trigger_spec = value;
    else if (key == "trigger.mu") cfg.synth.step_size = std::stod(value);
    else if (key == "trigger.iterations") cfg.synth.iterations = std::stoi(value);
    else if (key == "poison.base") cfg.base_class = value;
    else if (key == "poison.target") cfg.target_class = value;
    else if (key == "grid.lambda") cfg.lambda_grid = detail::parse_double_list(value);
    else if (key == "grid.p") cfg.p_grid = detail::parse_double_list(value);
    else if (key == "victim.epochs") cfg.victim.epochs = std::stoi(value);
    else if (key == "victim.batch_size") cfg.victim.batch_size = std::stoi(value);
    else if (key == "victim.lr") cfg.victim.lr = std::stod(value);
    else if (key == "lm.epochs") cfg.lm.epochs = std::stoi(value);
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "seed") cfg.master_seed = std::stoull(value);
    else throw std::runtime_error("config: unknown key \"" + key + "\" at line " +
                                  std::to_string(line_no));
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  return parse_experiment_config(read_file(path));
}

// --- results -------------------------------------------------------------------

struct ResultRow {
  double lambda = 0;
  double p = 0;
  std::string base_class;
  std::string target_class;
  double clean_accuracy = 0;
  double trigger_rate = 0;
  double label_preservation_accuracy = 0;
  double perplexity_inscribed = 0;
  double perplexity_original = 0;
  double perplexity_shuffled = 0;
  std::uint64_t seed = 0;
  double wall_time = 0;

  static std::string csv_header() {
    return "lambda,p,base,target,clean_accuracy,trigger_rate,"
           "label_preservation_accuracy,perplexity_inscribed,perplexity_original,"
           "perplexity_shuffled,seed,wall_time";
  }

  std::string csv_row() const {
    std::string out;
    out += format_double(lambda) + ",";
    out += format_double(p) + ",";
    out += base_class + ",";
    out += target_class + ",";
    out += format_double(clean_accuracy) + ",";
    out += format_double(trigger_rate) + ",";
    out += format_double(label_preservation_accuracy) + ",";
    out += format_double(perplexity_inscribed) + ",";
    out += format_double(perplexity_original) + ",";
    out += format_double(perplexity_shuffled) + ",";
    out += std::to_string(seed) + ",";
    out += format_double(wall_time);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["lambda"] = lambda;
    j["p"] = p;
    j["base"] = base_class;
    j["target"] = target_class;
    j["clean_accuracy"] = clean_accuracy;
    j["trigger_rate"] = trigger_rate;
    j["label_preservation_accuracy"] = label_preservation_accuracy;
    j["perplexity_inscribed"] = perplexity_inscribed;
    j["perplexity_original"] = perplexity_original;
    j["perplexity_shuffled"] = perplexity_shuffled;
    j["seed"] = seed;
    j["wall_time"] = wall_time;
    return j;
  }

  static ResultRow from_json(const nlohmann::json& j) {
    ResultRow r;
    r.lambda = j.at("lambda").get<double>();
    r.p = j.at("p").get<double>();
    r.base_class = j.at("base").get<std::string>();
    r.target_class = j.at("target").get<std::string>();
    r.clean_accuracy = j.at("clean_accuracy").get<double>();
    r.trigger_rate = j.at("trigger_rate").get<double>();
    r.label_preservation_accuracy = j.at("label_preservation_accuracy").get<double>();
    r.perplexity_inscribed = j.at("perplexity_inscribed").get<double>();
    r.perplexity_original = j.at("perplexity_original").get<double>();
    r.perplexity_shuffled = j.at("perplexity_shuffled").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.wall_time = j.at("wall_time").get<double>();
    return r;
  }
};

// Shared artifacts: corpus, vocabulary, trained CARA, trigger, the clean
// (p = 0) victim, and the clean-data language model.
struct ExperimentContext {
  ExperimentConfig cfg;
  Dataset train, dev, test;
  TokenVocabulary vocab;
  CaraModel cara;
  TriggerSignature trigger;
  VictimModel clean_victim;
  LanguageModel lm;
  double clean_victim_dev_accuracy = 0;
  double ppl_original = 0;
  double ppl_shuffled = 0;
  std::string config_hash;
};

namespace detail {

inline VictimConfig victim_config_for(const ExperimentConfig& cfg, std::uint64_t seed) {
  VictimConfig v = cfg.victim;
  v.max_len = cfg.max_len;
  v.seed = seed;
  return v;
}

}  // namespace detail

// Builds every shared artifact. When out_dir already holds a CARA checkpoint
// for the same vocabulary it is reloaded instead of retrained.
inline ExperimentContext prepare_experiment(const ExperimentConfig& cfg_in,
                                            bool verbose = false) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  ExperimentContext ctx{cfg};
  ctx.config_hash = "cfg" + std::to_string(fnv1a64(
      cfg.corpus_source + "|" + std::to_string(cfg.master_seed) + "|" +
      cfg.trigger_spec + "|" + cfg.base_class + "|" + cfg.target_class));

  if (cfg.corpus_source == "toy") {
    ToyCorpusSpec spec = cfg.toy;
    spec.seed = derive_seed(cfg.master_seed, "corpus");
    ToyCorpus corpus = generate_toy_corpus(spec);
    ctx.train = std::move(corpus.train);
    ctx.dev = std::move(corpus.dev);
    ctx.test = std::move(corpus.test);
  } else {
    ctx.train = load_jsonl(cfg.train_path, cfg.jsonl_labels);
    ctx.dev = load_jsonl(cfg.dev_path, cfg.jsonl_labels);
    ctx.test = load_jsonl(cfg.test_path, cfg.jsonl_labels);
  }
  ctx.train = filter_by_length(ctx.train, cfg.max_len);
  ctx.dev = filter_by_length(ctx.dev, cfg.max_len);
  ctx.test = filter_by_length(ctx.test, cfg.max_len);
  ctx.vocab = TokenVocabulary::build(ctx.train, cfg.vocab_max);

  bool pair = false;
  for (const auto& s : ctx.train.samples)
    if (s.premise) pair = true;

  const std::string cara_path = cfg.out_dir + "/cara.ckpt";
  bool reloaded = false;
  if (!cfg.out_dir.empty() && file_exists(cara_path)) {
    CaraModel cached = load_checkpoint(cara_path);
    if (cached.vocab_hash == ctx.vocab.hash()) {
      ctx.cara = std::move(cached);
      reloaded = true;
      if (verbose) std::fprintf(stderr, "reusing cached model %s\n", cara_path.c_str());
    }
  }
  if (!reloaded) {
    ctx.cara = CaraModel(cfg.dims, ctx.train.label_set, pair,
                         static_cast<int>(ctx.vocab.size()), ctx.vocab.hash(),
                         derive_seed(cfg.master_seed, "cara/init"));
    TrainConfig tc = cfg.cara_train;
    tc.max_len = cfg.max_len;
    tc.seed = derive_seed(cfg.master_seed, "cara/train");
    if (verbose) std::fprintf(stderr, "training autoencoder (%d epochs)...\n", tc.epochs);
    TrainHistory hist = train_cara(ctx.cara, ctx.train, ctx.vocab, tc);
    if (!cfg.out_dir.empty()) {
      std::filesystem::create_directories(cfg.out_dir);
      save_checkpoint(ctx.cara, cara_path);
      write_metrics_csv(hist, cfg.out_dir + "/cara_metrics.csv");
    }
  }

  if (cfg.trigger_spec.rfind("word:", 0) == 0) {
    ctx.trigger = synthesize_word_trigger(ctx.cara, ctx.vocab, ctx.train,
                                          cfg.trigger_spec.substr(5), cfg.max_len);
  } else if (cfg.trigger_spec == "generic") {
    Dataset target_only;
    target_only.label_set = ctx.train.label_set;
    for (const auto& s : ctx.train.samples)
      if (s.label == cfg.target_class) target_only.samples.push_back(s);
    ctx.trigger = synthesize_generic_trigger(ctx.cara, ctx.vocab, target_only,
                                             cfg.synth, cfg.max_len);
  } else {
    throw std::runtime_error("trigger spec must be generic or word:<token>");
  }

  if (verbose) std::fprintf(stderr, "training clean victim and language model...\n");
  ctx.clean_victim = train_victim(
      ctx.train, ctx.vocab,
      detail::victim_config_for(cfg, derive_seed(cfg.master_seed, "victim/clean")));
  ctx.clean_victim_dev_accuracy = evaluate_accuracy(ctx.clean_victim, ctx.dev);

  LmConfig lm_cfg = cfg.lm;
  lm_cfg.max_len = cfg.max_len;
  lm_cfg.seed = derive_seed(cfg.master_seed, "lm");
  ctx.lm = train_language_model(ctx.train, ctx.vocab, lm_cfg);
  ctx.ppl_original = perplexity(ctx.lm, ctx.dev);
  ctx.ppl_shuffled = perplexity(
      ctx.lm, shuffle_tokens_baseline(ctx.dev, derive_seed(cfg.master_seed, "shuffle")));
  return ctx;
}

// One grid cell: poison at (lambda, p), train a victim on the poisoned set,
// evaluate on the clean dev split and the inscribed dev split.
inline ResultRow run_experiment(ExperimentContext& ctx, double lambda, double p) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t key = cell_key(lambda, p);
  ResultRow row;
  row.lambda = lambda;
  row.p = p;
  row.base_class = ctx.cfg.base_class;
  row.target_class = ctx.cfg.target_class;
  row.seed = derive_seed(ctx.cfg.master_seed, "cell", key);

  PoisonConfig pc;
  pc.base_class = ctx.cfg.base_class;
  pc.target_class = ctx.cfg.target_class;
  pc.fraction = p;
  pc.signature_norm = lambda;
  pc.trigger = ctx.trigger;
  pc.max_len = ctx.cfg.max_len;
  pc.seed = derive_seed(row.seed, "poison");

  Dataset poisoned = poison_training_set(ctx.cara, ctx.vocab, ctx.train, pc);

  bool any_poisoned = false;
  for (const auto& s : poisoned.samples)
    if (s.provenance == Provenance::poisoned) any_poisoned = true;
  VictimModel victim =
      any_poisoned ? train_victim(poisoned, ctx.vocab,
                                  detail::victim_config_for(
                                      ctx.cfg, derive_seed(row.seed, "victim")))
                   : ctx.clean_victim;  // p = 0: identical training data

  Dataset inscribed = inscribe_test_set(ctx.cara, ctx.vocab, ctx.dev, pc);

  row.clean_accuracy = evaluate_accuracy(victim, ctx.dev);
  row.trigger_rate = evaluate_trigger_rate(victim, inscribed, ctx.cfg.target_class);
  row.label_preservation_accuracy = evaluate_accuracy(ctx.clean_victim, inscribed);
  row.perplexity_inscribed = perplexity(ctx.lm, inscribed);
  row.perplexity_original = ctx.ppl_original;
  row.perplexity_shuffled = ctx.ppl_shuffled;
  row.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

inline EvalReport report_from_row(const ExperimentContext& ctx, const ResultRow& row,
                                  long n_clean, long n_inscribed) {
  EvalReport r;
  r.clean_accuracy = row.clean_accuracy;
  r.trigger_rate = row.trigger_rate;
  r.n_clean = n_clean;
  r.n_inscribed = n_inscribed;
  r.lambda = row.lambda;
  r.p = row.p;
  r.base_class = row.base_class;
  r.target_class = row.target_class;
  r.seed = row.seed;
  r.git_config_hash = ctx.config_hash;
  return r;
}

// --- sweep ---------------------------------------------------------------------

inline std::string cell_file_name(double lambda, double p) {
  return "cell_l" + format_double(lambda, 4) + "_p" + format_double(p, 6) + ".json";
}

// Simple static SVG: trigger rate vs p, one polyline per lambda.
inline std::string render_trigger_rate_svg(const std::vector<ResultRow>& rows) {
  const int W = 640, H = 440, ML = 70, MR = 30, MT = 30, MB = 60;
  double pmin = 1e300, pmax = -1e300;
  for (const auto& r : rows) {
    pmin = std::min(pmin, r.p);
    pmax = std::max(pmax, r.p);
  }
  if (rows.empty() || pmin >= pmax) {
    pmin = 0.0;
    pmax = 1.0;
  }
  const double x_floor = 1e-4;  // p = 0 plotted at the left edge
  auto xpos = [&](double p) {
    double lo = std::log10(std::max(x_floor, pmin));
    double hi = std::log10(std::max(x_floor * 10, pmax));
    double v = std::log10(std::max(x_floor, p));
    return ML + (v - lo) / (hi - lo) * (W - ML - MR);
  };
  auto ypos = [&](double rate) { return MT + (1.0 - rate) * (H - MT - MB); };

  std::vector<double> lambdas;
  for (const auto& r : rows)
    if (std::find(lambdas.begin(), lambdas.end(), r.lambda) == lambdas.end())
      lambdas.push_back(r.lambda);
  std::sort(lambdas.begin(), lambdas.end());
  const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                          "#9467bd", "#8c564b"};

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) +
         "\" height=\"" + std::to_string(H) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<line x1=\"" + std::to_string(ML) + "\" y1=\"" + std::to_string(H - MB) +
         "\" x2=\"" + std::to_string(W - MR) + "\" y2=\"" + std::to_string(H - MB) +
         "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + std::to_string(ML) + "\" y1=\"" + std::to_string(MT) +
         "\" x2=\"" + std::to_string(ML) + "\" y2=\"" + std::to_string(H - MB) +
         "\" stroke=\"black\"/>\n";
  svg += "<text x=\"" + std::to_string(W / 2) + "\" y=\"" + std::to_string(H - 15) +
         "\" text-anchor=\"middle\" font-size=\"14\">poisoned fraction p (log scale)</text>\n";
  svg += "<text x=\"18\" y=\"" + std::to_string(H / 2) +
         "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 18 " +
         std::to_string(H / 2) + ")\">trigger rate</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    double rate = tick / 4.0;
    int y = static_cast<int>(ypos(rate));
    svg += "<text x=\"" + std::to_string(ML - 8) + "\" y=\"" + std::to_string(y + 4) +
           "\" text-anchor=\"end\" font-size=\"12\">" + format_double(rate, 2) +
           "</text>\n";
  }
  int color_idx = 0;
  for (double lam : lambdas) {
    std::vector<ResultRow> line;
    for (const auto& r : rows)
      if (r.lambda == lam) line.push_back(r);
    std::sort(line.begin(), line.end(),
              [](const ResultRow& a, const ResultRow& b) { return a.p < b.p; });
    std::string points;
    for (const auto& r : line)
      points += format_double(xpos(r.p), 1) + "," + format_double(ypos(r.trigger_rate), 1) + " ";
    const char* color = colors[color_idx % 6];
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
    svg += "<text x=\"" + std::to_string(W - MR - 100) + "\" y=\"" +
           std::to_string(MT + 18 * (color_idx + 1)) + "\" font-size=\"12\" fill=\"" +
           color + "\">lambda = " + format_double(lam, 2) + "</text>\n";
    ++color_idx;
  }
  svg += "</svg>\n";
  return svg;
}

struct SweepResult {
  std::vector<ResultRow> rows;
  std::string csv_path;
  std::string plot_path;
};

// Full (lambda x p) grid. Each finished cell persists as a JSON file, so a
// rerun skips completed cells and reassembles a byte-identical CSV; cell
// failures are recorded and the sweep continues.
inline SweepResult run_sweep(const ExperimentConfig& cfg, bool verbose = false) {
  std::filesystem::create_directories(cfg.out_dir + "/cells");
  ExperimentContext ctx = prepare_experiment(cfg, verbose);
  SweepResult result;
  for (double lam : cfg.lambda_grid) {
    for (double p : cfg.p_grid) {
      const std::string cell_path = cfg.out_dir + "/cells/" + cell_file_name(lam, p);
      try {
        ResultRow row;
        if (file_exists(cell_path)) {
          row = ResultRow::from_json(nlohmann::json::parse(read_file(cell_path)));
          if (verbose)
            std::fprintf(stderr, "cell lambda=%.3f p=%.4f: cached\n", lam, p);
        } else {
          row = run_experiment(ctx, lam, p);
          write_file(cell_path, row.to_json().dump(2) + "\n");
          if (verbose)
            std::fprintf(stderr, "cell lambda=%.3f p=%.4f: trigger=%.3f clean=%.3f\n",
                         lam, p, row.trigger_rate, row.clean_accuracy);
        }
        result.rows.push_back(row);
      } catch (const std::exception& e) {
        write_file(cell_path + ".error.txt", e.what() + std::string("\n"));
        std::fprintf(stderr, "cell lambda=%.3f p=%.4f failed: %s\n", lam, p, e.what());
      }
    }
  }
  std::string csv = ResultRow::csv_header() + "\n";
  for (const auto& row : result.rows) csv += row.csv_row() + "\n";
  result.csv_path = cfg.out_dir + "/sweep_results.csv";
  write_file(result.csv_path, csv);
  result.plot_path = cfg.out_dir + "/trigger_rate_vs_p.svg";
  write_file(result.plot_path, render_trigger_rate_svg(result.rows));
  return result;
}

}  // namespace cara
