// Command-line pipeline for latent-space backdoor poisoning experiments.
// Each stage is independently invocable and exchanges plain artifact files
// (JSONL datasets, binary checkpoints, JSON triggers and reports).

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "cara/checkpoint.hpp"
#include "cara/corpus.hpp"
#include "cara/experiment.hpp"
#include "cara/harness.hpp"
#include "cara/model.hpp"
#include "cara/poison.hpp"
#include "cara/trainer.hpp"

namespace {

using namespace cara;

nlohmann::json vocab_to_json(const TokenVocabulary& vocab) {
  nlohmann::json j;
  j["tokens"] = vocab.tokens();
  j["max_size"] = vocab.max_size();
  return j;
}

TokenVocabulary vocab_from_json(const nlohmann::json& j) {
  std::vector<std::string> tokens = j.at("tokens").get<std::vector<std::string>>();
  std::vector<std::string> rest(tokens.begin() + TokenVocabulary::kReserved,
                                tokens.end());
  return TokenVocabulary(rest, j.at("max_size").get<std::size_t>());
}

TokenVocabulary load_vocab(const std::string& path) {
  return vocab_from_json(nlohmann::json::parse(read_file(path)));
}

nlohmann::json trigger_to_json(const TriggerSignature& trig) {
  nlohmann::json j;
  j["delta"] = std::vector<double>(trig.delta.data(),
                                   trig.delta.data() + trig.delta.size());
  j["kind"] = trig.kind == TriggerKind::word_targeted ? "word_targeted" : "synthesized";
  j["source"] = trig.source;
  return j;
}

TriggerSignature trigger_from_json(const nlohmann::json& j) {
  TriggerSignature trig;
  auto vals = j.at("delta").get<std::vector<double>>();
  trig.delta = Eigen::Map<Eigen::VectorXd>(vals.data(),
                                           static_cast<Eigen::Index>(vals.size()));
  trig.kind = j.at("kind").get<std::string>() == "word_targeted"
                  ? TriggerKind::word_targeted
                  : TriggerKind::synthesized;
  trig.source = j.value("source", "");
  return trig;
}

std::vector<std::string> parse_labels(const std::string& csv) {
  auto labels = cara::detail::parse_string_list(csv);
  if (labels.empty()) throw std::runtime_error("--labels must name at least one class");
  return labels;
}

CaraModel load_model_checked(const std::string& model_path,
                             const TokenVocabulary& vocab) {
  CaraModel model = load_checkpoint(model_path);
  if (model.vocab_hash != vocab.hash())
    throw std::runtime_error("vocabulary hash mismatch between " + model_path +
                             " and the supplied vocab file");
  return model;
}

int cmd_gen_corpus(const std::string& out_dir, std::uint64_t seed, int n_train,
                   int n_dev, int n_test, bool single_text) {
  ToyCorpusSpec spec = single_text ? default_single_spec(seed) : default_pair_spec(seed);
  spec.n_train = n_train;
  spec.n_dev = n_dev;
  spec.n_test = n_test;
  ToyCorpus corpus = generate_toy_corpus(spec);
  std::filesystem::create_directories(out_dir);
  save_jsonl(corpus.train, out_dir + "/train.jsonl");
  save_jsonl(corpus.dev, out_dir + "/dev.jsonl");
  save_jsonl(corpus.test, out_dir + "/test.jsonl");
  nlohmann::json labels = spec.label_set;
  write_file(out_dir + "/labels.json", labels.dump() + "\n");
  std::printf("wrote %zu/%zu/%zu samples to %s\n", corpus.train.samples.size(),
              corpus.dev.samples.size(), corpus.test.samples.size(), out_dir.c_str());
  return 0;
}

int cmd_train_cara(const std::string& train_path, const std::string& labels_csv,
                   const std::string& out_dir, std::uint64_t seed, int epochs,
                   int batch_size, std::size_t max_len, std::size_t vocab_max,
                   const std::string& scale) {
  Dataset train = load_jsonl(train_path, parse_labels(labels_csv));
  train = filter_by_length(train, max_len);
  TokenVocabulary vocab = TokenVocabulary::build(train, vocab_max);
  bool pair = false;
  for (const auto& s : train.samples)
    if (s.premise) pair = true;

  CaraDims dims = scale == "paper" ? CaraDims::paper_scale() : CaraDims::desk_scale();
  CaraModel model(dims, train.label_set, pair, static_cast<int>(vocab.size()),
                  vocab.hash(), derive_seed(seed, "cara/init"));
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch_size;
  cfg.max_len = max_len;
  cfg.seed = derive_seed(seed, "cara/train");
  std::printf("training on %zu samples, vocab %zu, %d epochs\n",
              train.samples.size(), vocab.size(), epochs);
  TrainHistory hist = train_cara(model, train, vocab, cfg);
  std::filesystem::create_directories(out_dir);
  save_checkpoint(model, out_dir + "/cara.ckpt");
  write_file(out_dir + "/vocab.json", vocab_to_json(vocab).dump() + "\n");
  write_metrics_csv(hist, out_dir + "/cara_metrics.csv");
  ReconAccuracy acc = evaluate_reconstruction(model, vocab, train, max_len);
  std::printf("final rec_loss %.4f, reconstruction accuracy: teacher-forced %.3f greedy %.3f\n",
              hist.empty() ? 0.0 : hist.back().rec_loss, acc.teacher_forced, acc.greedy);
  return 0;
}

int cmd_synth_trigger(const std::string& model_path, const std::string& vocab_path,
                      const std::string& train_path, const std::string& labels_csv,
                      const std::string& trigger_spec, const std::string& target_class,
                      double mu, int iterations, const std::string& out_path) {
  TokenVocabulary vocab = load_vocab(vocab_path);
  CaraModel model = load_model_checked(model_path, vocab);
  Dataset train = load_jsonl(train_path, parse_labels(labels_csv));
  TriggerSignature trig;
  if (trigger_spec.rfind("word:", 0) == 0) {
    trig = synthesize_word_trigger(model, vocab, train, trigger_spec.substr(5));
  } else if (trigger_spec == "generic") {
    if (target_class.empty())
      throw std::runtime_error("generic trigger needs --target-class");
    Dataset target_only;
    target_only.label_set = train.label_set;
    for (const auto& s : train.samples)
      if (s.label == target_class) target_only.samples.push_back(s);
    SynthesisConfig cfg;
    cfg.step_size = mu;
    cfg.iterations = iterations;
    trig = synthesize_generic_trigger(model, vocab, target_only, cfg);
  } else {
    throw std::runtime_error("--trigger must be generic or word:<token>");
  }
  write_file(out_path, trigger_to_json(trig).dump() + "\n");
  std::printf("trigger (%s) written to %s\n", trig.source.c_str(), out_path.c_str());
  return 0;
}

int cmd_poison(const std::string& model_path, const std::string& vocab_path,
               const std::string& data_path, const std::string& labels_csv,
               const std::string& trigger_path, double lambda, double fraction,
               const std::string& base_class, const std::string& target_class,
               std::uint64_t seed, bool inscribe, const std::string& out_path) {
  TokenVocabulary vocab = load_vocab(vocab_path);
  CaraModel model = load_model_checked(model_path, vocab);
  Dataset data = load_jsonl(data_path, parse_labels(labels_csv));
  PoisonConfig cfg;
  cfg.base_class = base_class;
  cfg.target_class = target_class;
  cfg.fraction = fraction;
  cfg.signature_norm = lambda;
  cfg.trigger = trigger_from_json(nlohmann::json::parse(read_file(trigger_path)));
  cfg.seed = seed;
  Dataset out = inscribe ? inscribe_test_set(model, vocab, data, cfg)
                         : poison_training_set(model, vocab, data, cfg);
  save_jsonl(out, out_path, /*with_trace=*/true);
  std::size_t marked = 0;
  for (const auto& s : out.samples)
    if (s.provenance != Provenance::clean) ++marked;
  std::printf("%s %zu of %zu samples -> %s\n", inscribe ? "inscribed" : "poisoned",
              marked, out.samples.size(), out_path.c_str());
  return 0;
}

int cmd_train_victim(const std::string& train_path, const std::string& labels_csv,
                     std::uint64_t seed, int epochs, const std::string& out_path) {
  Dataset train = load_jsonl(train_path, parse_labels(labels_csv));
  VictimConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  VictimModel victim = train_victim(train, TokenVocabulary::build(train, 10000), cfg);
  save_victim(victim, out_path);
  std::printf("victim trained on %zu samples -> %s\n", train.samples.size(),
              out_path.c_str());
  return 0;
}

int cmd_eval(const std::string& victim_path, const std::string& clean_path,
             const std::string& inscribed_path, const std::string& labels_csv,
             const std::string& target_class, const std::string& out_path) {
  VictimModel victim = load_victim(victim_path);
  auto labels = parse_labels(labels_csv);
  Dataset clean = load_jsonl(clean_path, labels);
  Dataset inscribed = load_jsonl(inscribed_path, labels);
  EvalReport report;
  report.clean_accuracy = evaluate_accuracy(victim, clean);
  report.trigger_rate = evaluate_trigger_rate(victim, inscribed, target_class);
  report.n_clean = static_cast<long>(clean.samples.size());
  report.n_inscribed = static_cast<long>(inscribed.samples.size());
  report.target_class = target_class;
  if (!inscribed.samples.empty()) report.base_class = inscribed.samples[0].label;
  report.git_config_hash =
      "eval" + std::to_string(fnv1a64(victim_path + "|" + inscribed_path));
  write_file(out_path, report.to_json().dump(2) + "\n");
  std::printf("clean accuracy %.4f, trigger rate %.4f -> %s\n", report.clean_accuracy,
              report.trigger_rate, out_path.c_str());
  return 0;
}

int cmd_quality(const std::string& victim_path, const std::string& train_path,
                const std::string& original_path, const std::string& inscribed_path,
                const std::string& labels_csv, std::uint64_t seed, int lm_epochs,
                const std::string& out_path) {
  VictimModel victim = load_victim(victim_path);
  auto labels = parse_labels(labels_csv);
  Dataset train = load_jsonl(train_path, labels);
  Dataset original = load_jsonl(original_path, labels);
  Dataset inscribed = load_jsonl(inscribed_path, labels);

  LmConfig lm_cfg;
  lm_cfg.epochs = lm_epochs;
  lm_cfg.seed = derive_seed(seed, "lm");
  LanguageModel lm =
      train_language_model(train, TokenVocabulary::build(train, 10000), lm_cfg);

  nlohmann::json j;
  j["label_preservation_accuracy"] = evaluate_accuracy(victim, inscribed);
  j["perplexity_original"] = perplexity(lm, original);
  j["perplexity_inscribed"] = perplexity(lm, inscribed);
  j["perplexity_shuffled"] =
      perplexity(lm, shuffle_tokens_baseline(original, derive_seed(seed, "shuffle")));
  write_file(out_path, j.dump(2) + "\n");
  std::printf("quality metrics -> %s\n", out_path.c_str());
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir_override,
              std::uint64_t seed, bool seed_set) {
  ExperimentConfig cfg =
      config_path.empty() ? ExperimentConfig{} : load_experiment_config(config_path);
  if (!out_dir_override.empty()) cfg.out_dir = out_dir_override;
  if (seed_set) cfg.master_seed = seed;
  SweepResult result = run_sweep(cfg, /*verbose=*/true);
  std::printf("%zu cells -> %s (plot %s)\n", result.rows.size(),
              result.csv_path.c_str(), result.plot_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latent-space backdoor poisoning pipeline"};
  app.require_subcommand(1);

  // gen-corpus
  std::string out_dir = "out";
  std::uint64_t seed = 1;
  int n_train = 5000, n_dev = 900, n_test = 900;
  bool single_text = false;
  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic text-pair corpus");
  gen->add_option("--out-dir", out_dir, "output directory");
  gen->add_option("--seed", seed, "corpus seed");
  gen->add_option("--n-train", n_train);
  gen->add_option("--n-dev", n_dev);
  gen->add_option("--n-test", n_test);
  gen->add_flag("--single-text", single_text, "sentiment-style corpus without premises");

  // train-cara
  std::string train_path, labels_csv = "entailment,contradiction,neutral";
  int epochs = 30, batch_size = 64;
  std::size_t max_len = 50, vocab_max = 10000;
  std::string scale = "desk";
  auto* tc = app.add_subcommand("train-cara", "train the autoencoder");
  tc->add_option("--train", train_path, "training JSONL")->required();
  tc->add_option("--labels", labels_csv, "comma-separated label set");
  tc->add_option("--out-dir", out_dir);
  tc->add_option("--seed", seed);
  tc->add_option("--epochs", epochs);
  tc->add_option("--batch-size", batch_size);
  tc->add_option("--max-len", max_len);
  tc->add_option("--vocab-max", vocab_max);
  tc->add_option("--model-scale", scale, "desk or paper");

  // synth-trigger
  std::string model_path, vocab_path, trigger_spec = "generic", target_class,
              trigger_out = "trigger.json";
  double mu = 0.5;
  int iterations = 10;
  auto* st = app.add_subcommand("synth-trigger", "synthesize a trigger signature");
  st->add_option("--model", model_path)->required();
  st->add_option("--vocab", vocab_path)->required();
  st->add_option("--train", train_path)->required();
  st->add_option("--labels", labels_csv);
  st->add_option("--trigger", trigger_spec, "generic or word:<token>");
  st->add_option("--target-class", target_class);
  st->add_option("--mu", mu, "gradient-ascent step size");
  st->add_option("--iterations", iterations);
  st->add_option("--out", trigger_out);

  // poison
  std::string data_path, trigger_path, base_class, poison_out = "poisoned.jsonl";
  double lambda = 2.0, fraction = 0.10;
  bool inscribe = false;
  auto* po = app.add_subcommand("poison", "poison a training set or inscribe a test set");
  po->add_option("--model", model_path)->required();
  po->add_option("--vocab", vocab_path)->required();
  po->add_option("--data", data_path, "input JSONL")->required();
  po->add_option("--labels", labels_csv);
  po->add_option("--trigger-file", trigger_path)->required();
  po->add_option("--lambda", lambda, "signature norm");
  po->add_option("--poison-frac", fraction, "fraction p of base-class samples");
  po->add_option("--base-class", base_class)->required();
  po->add_option("--target-class", target_class)->required();
  po->add_option("--seed", seed);
  po->add_flag("--inscribe", inscribe,
               "inscribe every base-class sample, keep labels (test-set mode)");
  po->add_option("--out", poison_out);

  // train-victim
  std::string victim_out = "victim.ckpt";
  int victim_epochs = 10;
  auto* tv = app.add_subcommand("train-victim", "train a victim classifier");
  tv->add_option("--train", train_path)->required();
  tv->add_option("--labels", labels_csv);
  tv->add_option("--seed", seed);
  tv->add_option("--epochs", victim_epochs);
  tv->add_option("--out", victim_out);

  // eval
  std::string victim_path, clean_path, inscribed_path, report_out = "report.json";
  auto* ev = app.add_subcommand("eval", "evaluate clean accuracy and trigger rate");
  ev->add_option("--victim", victim_path)->required();
  ev->add_option("--clean", clean_path)->required();
  ev->add_option("--inscribed", inscribed_path)->required();
  ev->add_option("--labels", labels_csv);
  ev->add_option("--target-class", target_class)->required();
  ev->add_option("--out", report_out);

  // quality
  std::string original_path, quality_out = "quality.json";
  int lm_epochs = 8;
  auto* qu = app.add_subcommand("quality",
                                "label preservation and perplexity metrics");
  qu->add_option("--victim", victim_path, "clean-trained victim")->required();
  qu->add_option("--train", train_path, "clean training JSONL (LM corpus)")->required();
  qu->add_option("--original", original_path)->required();
  qu->add_option("--inscribed", inscribed_path)->required();
  qu->add_option("--labels", labels_csv);
  qu->add_option("--seed", seed);
  qu->add_option("--lm-epochs", lm_epochs);
  qu->add_option("--out", quality_out);

  // sweep
  std::string config_path;
  auto* sw = app.add_subcommand("sweep", "run the full (lambda x p) grid");
  sw->add_option("--config", config_path, "key-value config file");
  sw->add_option("--out-dir", out_dir);
  auto* seed_opt = sw->add_option("--seed", seed, "master seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_corpus(out_dir, seed, n_train, n_dev, n_test, single_text);
    if (tc->parsed())
      return cmd_train_cara(train_path, labels_csv, out_dir, seed, epochs, batch_size,
                            max_len, vocab_max, scale);
    if (st->parsed())
      return cmd_synth_trigger(model_path, vocab_path, train_path, labels_csv,
                               trigger_spec, target_class, mu, iterations, trigger_out);
    if (po->parsed())
      return cmd_poison(model_path, vocab_path, data_path, labels_csv, trigger_path,
                        lambda, fraction, base_class, target_class, seed, inscribe,
                        poison_out);
    if (tv->parsed())
      return cmd_train_victim(train_path, labels_csv, seed, victim_epochs, victim_out);
    if (ev->parsed())
      return cmd_eval(victim_path, clean_path, inscribed_path, labels_csv, target_class,
                      report_out);
    if (qu->parsed())
      return cmd_quality(victim_path, train_path, original_path, inscribed_path,
                         labels_csv, seed, lm_epochs, quality_out);
    if (sw->parsed())
      return cmd_sweep(config_path, sw->count("--out-dir") ? out_dir : "", seed,
                       seed_opt->count() > 0);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
