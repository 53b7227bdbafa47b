#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cara/checkpoint.hpp"
#include "cara/corpus.hpp"
#include "cara/model.hpp"
#include "cara/nn/layers.hpp"
#include "cara/nn/optim.hpp"
#include "cara/util.hpp"

namespace cara {

struct VictimConfig {
  int embedding_dim = 32;
  int hidden_dim = 48;
  int head_hidden = 64;
  int epochs = 10;
  int batch_size = 64;
  double lr = 1e-3;
  double clip_norm = 1.0;
  std::size_t max_len = 50;
  std::uint64_t seed = 1;
};

// Desk-scale text-pair classifier: shared embeddings, one recurrent encoder
// per text field, concatenated final states, two-layer class head.
class VictimModel {
 public:
  VictimConfig cfg;
  TokenVocabulary vocab;
  std::vector<std::string> label_set;
  bool pair_mode = true;
  bool trained = false;

  nn::Embedding emb;
  nn::LstmCell enc_hyp;
  nn::LstmCell enc_prem;
  nn::Mlp head;

  VictimModel() = default;

  VictimModel(VictimConfig c, TokenVocabulary v, std::vector<std::string> labels,
              bool pair)
      : cfg(c), vocab(std::move(v)), label_set(std::move(labels)), pair_mode(pair) {
    std::mt19937_64 rng(derive_seed(cfg.seed, "victim/init"));
    const int V = static_cast<int>(vocab.size());
    emb = nn::Embedding(cfg.embedding_dim, V, "victim.emb", rng);
    enc_hyp = nn::LstmCell(cfg.embedding_dim, cfg.hidden_dim, "victim.enc_hyp", rng);
    enc_prem = nn::LstmCell(cfg.embedding_dim, cfg.hidden_dim, "victim.enc_prem", rng);
    head = nn::Mlp(2 * cfg.hidden_dim, {cfg.head_hidden},
                   static_cast<int>(label_set.size()), nn::Activation::tanh_act,
                   "victim.head", rng);
  }

  std::vector<nn::Param*> params() {
    std::vector<nn::Param*> v;
    emb.collect(v);
    enc_hyp.collect(v);
    enc_prem.collect(v);
    head.collect(v);
    return v;
  }

  int label_index(const std::string& y) const {
    for (std::size_t i = 0; i < label_set.size(); ++i)
      if (label_set[i] == y) return static_cast<int>(i);
    throw std::runtime_error("VictimModel: label outside label set: " + y);
  }

  nn::Var logits_t(nn::Tape& t, const std::vector<std::vector<int>>& hyp,
                   const std::vector<std::vector<int>>& prem) {
    const auto B = static_cast<Eigen::Index>(hyp.size());
    nn::Var h_hyp = encode_field(t, enc_hyp, hyp);
    nn::Var h_prem = pair_mode ? encode_field(t, enc_prem, prem)
                               : t.constant(nn::Mat::Zero(cfg.hidden_dim, B));
    return head(t, nn::concat_rows(h_hyp, h_prem));
  }

  // Probability distribution over label_set, one column per sample.
  nn::Mat predict_proba(const std::vector<TextPairSample>& samples) {
    auto [hyp, prem] = encode_fields(samples);
    nn::Tape t(false);
    return nn::softmax_cols(logits_t(t, hyp, prem).val());
  }

  std::vector<int> predict(const std::vector<TextPairSample>& samples,
                           int batch_size = 256) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (std::size_t start = 0; start < samples.size();
         start += static_cast<std::size_t>(batch_size)) {
      std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
      std::vector<TextPairSample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                        samples.begin() + static_cast<std::ptrdiff_t>(end));
      auto [hyp, prem] = encode_fields(chunk);
      nn::Tape t(false);
      auto picks = nn::argmax_cols(logits_t(t, hyp, prem).val());
      out.insert(out.end(), picks.begin(), picks.end());
    }
    return out;
  }

  std::pair<std::vector<std::vector<int>>, std::vector<std::vector<int>>> encode_fields(
      const std::vector<TextPairSample>& samples) const {
    std::vector<std::vector<int>> hyp, prem;
    hyp.reserve(samples.size());
    prem.reserve(samples.size());
    for (const auto& s : samples) {
      hyp.push_back(encode_text(vocab, s.hypothesis, cfg.max_len));
      prem.push_back(s.premise ? encode_text(vocab, *s.premise, cfg.max_len)
                               : std::vector<int>{TokenVocabulary::kEos});
    }
    return {std::move(hyp), std::move(prem)};
  }

 private:
  nn::Var encode_field(nn::Tape& t, nn::LstmCell& cell,
                       const std::vector<std::vector<int>>& seqs) {
    std::vector<int> lengths;
    auto ids_t = detail::token_major(seqs, 1, &lengths);
    std::vector<nn::Var> inputs;
    inputs.reserve(ids_t.size());
    for (auto& ids : ids_t) inputs.push_back(emb.lookup(t, ids));
    auto hs = nn::run_lstm(cell, t, inputs);
    std::vector<int> last(lengths.size());
    for (std::size_t j = 0; j < lengths.size(); ++j)
      last[j] = std::max(0, lengths[j] - 1);
    return nn::gather_time(hs, last);
  }
};

inline VictimModel train_victim(const Dataset& train, const TokenVocabulary& vocab,
                                const VictimConfig& cfg) {
  if (train.samples.empty()) throw std::runtime_error("train_victim: empty dataset");
  bool pair = false;
  for (const auto& s : train.samples)
    if (s.premise) pair = true;
  VictimModel victim(cfg, vocab, train.label_set, pair);

  auto params = victim.params();
  nn::Adam adam;
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "victim/shuffle"));
  std::vector<std::size_t> order(train.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TextPairSample> chunk;
      std::vector<int> targets;
      for (std::size_t k = start; k < end; ++k) {
        chunk.push_back(train.samples[order[k]]);
        targets.push_back(train.label_index(chunk.back().label));
      }
      auto [hyp, prem] = victim.encode_fields(chunk);
      nn::Tape t;
      nn::Var logits = victim.logits_t(t, hyp, prem);
      std::vector<unsigned char> mask(chunk.size(), 1);
      nn::Var loss = nn::scale(nn::softmax_xent_sum(logits, targets, mask),
                               1.0 / static_cast<double>(chunk.size()));
      if (!std::isfinite(loss.val()(0, 0)))
        throw std::runtime_error("train_victim: non-finite loss");
      nn::zero_grads(params);
      t.backward(loss);
      nn::clip_global_norm(params, cfg.clip_norm);
      adam.step(params, cfg.lr);
    }
  }
  victim.trained = true;
  return victim;
}

// Fraction of samples whose argmax prediction equals the gold label.
inline double evaluate_accuracy(VictimModel& victim, const Dataset& ds) {
  if (!victim.trained) throw std::runtime_error("evaluate_accuracy: victim not trained");
  if (ds.samples.empty())
    throw std::runtime_error("evaluate_accuracy: empty dataset, rate undefined");
  auto preds = victim.predict(ds.samples);
  long correct = 0;
  for (std::size_t j = 0; j < ds.samples.size(); ++j)
    if (preds[j] == victim.label_index(ds.samples[j].label)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(ds.samples.size());
}

// Fraction of inscribed base-class samples classified as the target class.
// Gold labels stay the base class; this is not an accuracy.
inline double evaluate_trigger_rate(VictimModel& victim, const Dataset& inscribed,
                                    const std::string& y_target) {
  if (!victim.trained)
    throw std::runtime_error("evaluate_trigger_rate: victim not trained");
  if (inscribed.samples.empty())
    throw std::runtime_error("evaluate_trigger_rate: empty dataset, rate undefined");
  for (const auto& s : inscribed.samples)
    if (s.provenance != Provenance::inscribed)
      throw std::runtime_error(
          "evaluate_trigger_rate: dataset contains non-inscribed samples");
  const int target = victim.label_index(y_target);
  auto preds = victim.predict(inscribed.samples);
  long hits = 0;
  for (int p : preds)
    if (p == target) ++hits;
  return static_cast<double>(hits) / static_cast<double>(inscribed.samples.size());
}

// --- language-model quality metrics -----------------------------------------

struct LmConfig {
  int embedding_dim = 48;
  int hidden_dim = 64;
  int epochs = 8;
  int batch_size = 64;
  double lr = 1e-3;
  double clip_norm = 1.0;
  std::size_t max_len = 50;
  std::uint64_t seed = 1;
};

// Next-token LSTM over hypothesis texts; the naturalness yardstick.
class LanguageModel {
 public:
  LmConfig cfg;
  TokenVocabulary vocab;
  bool trained = false;

  nn::Embedding emb;
  nn::LstmCell cell;
  nn::Linear out;

  LanguageModel() = default;

  LanguageModel(LmConfig c, TokenVocabulary v) : cfg(c), vocab(std::move(v)) {
    std::mt19937_64 rng(derive_seed(cfg.seed, "lm/init"));
    const int V = static_cast<int>(vocab.size());
    emb = nn::Embedding(cfg.embedding_dim, V, "lm.emb", rng);
    cell = nn::LstmCell(cfg.embedding_dim, cfg.hidden_dim, "lm.lstm", rng);
    out = nn::Linear(cfg.hidden_dim, V, "lm.out", rng);
  }

  std::vector<nn::Param*> params() {
    std::vector<nn::Param*> v;
    emb.collect(v);
    cell.collect(v);
    out.collect(v);
    return v;
  }

  // Summed NLL and token count over a batch of hypothesis id sequences
  // (each sequence already ends in <eos>).
  std::pair<nn::Var, long> nll_sum_t(nn::Tape& t,
                                     const std::vector<std::vector<int>>& seqs) {
    const auto B = static_cast<Eigen::Index>(seqs.size());
    std::size_t T = 0;
    for (const auto& s : seqs) T = std::max(T, s.size());
    auto state = cell.initial(t, B);
    std::vector<int> prev(seqs.size(), TokenVocabulary::kSos);
    nn::Var total = t.constant(nn::Mat::Zero(1, 1));
    long tokens = 0;
    for (std::size_t step = 0; step < T; ++step) {
      nn::Var x = emb.lookup(t, prev);
      state = cell.step(t, x, state);
      nn::Var logits = out(t, state.h);
      std::vector<int> targets(seqs.size(), 0);
      std::vector<unsigned char> mask(seqs.size(), 0);
      for (std::size_t j = 0; j < seqs.size(); ++j) {
        if (step < seqs[j].size()) {
          targets[j] = seqs[j][step];
          mask[j] = 1;
          ++tokens;
        }
      }
      total = nn::add(total, nn::softmax_xent_sum(logits, targets, mask));
      for (std::size_t j = 0; j < seqs.size(); ++j)
        prev[j] = step < seqs[j].size() ? seqs[j][step] : TokenVocabulary::kPad;
    }
    return {total, tokens};
  }
};

inline LanguageModel train_language_model(const Dataset& clean_train,
                                          const TokenVocabulary& vocab,
                                          const LmConfig& cfg) {
  if (clean_train.samples.empty())
    throw std::runtime_error("train_language_model: empty dataset");
  LanguageModel lm(cfg, vocab);
  auto params = lm.params();
  nn::Adam adam;
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "lm/shuffle"));
  std::vector<std::size_t> order(clean_train.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<std::vector<int>> seqs;
      for (std::size_t k = start; k < end; ++k)
        seqs.push_back(encode_text(vocab, clean_train.samples[order[k]].hypothesis,
                                   cfg.max_len));
      nn::Tape t;
      auto [total, tokens] = lm.nll_sum_t(t, seqs);
      nn::Var loss = nn::scale(total, 1.0 / static_cast<double>(std::max<long>(1, tokens)));
      if (!std::isfinite(loss.val()(0, 0)))
        throw std::runtime_error("train_language_model: non-finite loss");
      nn::zero_grads(params);
      t.backward(loss);
      nn::clip_global_norm(params, cfg.clip_norm);
      adam.step(params, cfg.lr);
    }
  }
  lm.trained = true;
  return lm;
}

// exp(mean per-token NLL) over all hypothesis tokens including <eos>.
inline double perplexity(LanguageModel& lm, const Dataset& ds, int batch_size = 256) {
  if (!lm.trained) throw std::runtime_error("perplexity: language model not trained");
  if (ds.samples.empty()) throw std::runtime_error("perplexity: empty dataset");
  double total = 0.0;
  long tokens = 0;
  for (std::size_t start = 0; start < ds.samples.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(ds.samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::vector<int>> seqs;
    for (std::size_t k = start; k < end; ++k)
      seqs.push_back(encode_text(lm.vocab, ds.samples[k].hypothesis, lm.cfg.max_len));
    nn::Tape t(false);
    auto [sum, n] = lm.nll_sum_t(t, seqs);
    total += sum.val()(0, 0);
    tokens += n;
  }
  return std::exp(total / static_cast<double>(tokens));
}

// Uniformly permutes the tokens of each hypothesis; labels unchanged.
inline Dataset shuffle_tokens_baseline(const Dataset& ds, std::uint64_t seed) {
  Dataset out = ds;
  std::mt19937_64 rng(derive_seed(seed, "shuffle_baseline"));
  for (auto& s : out.samples) {
    auto toks = tokenize(s.hypothesis);
    std::shuffle(toks.begin(), toks.end(), rng);
    s.hypothesis = join_tokens(toks);
  }
  return out;
}

// --- evaluation report -------------------------------------------------------

struct EvalReport {
  double clean_accuracy = 0;
  double trigger_rate = 0;
  long n_clean = 0;
  long n_inscribed = 0;
  double lambda = 0;
  double p = 0;
  std::string base_class;
  std::string target_class;
  std::uint64_t seed = 0;
  std::string git_config_hash;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["clean_accuracy"] = clean_accuracy;
    j["trigger_rate"] = trigger_rate;
    j["n_clean"] = n_clean;
    j["n_inscribed"] = n_inscribed;
    j["lambda"] = lambda;
    j["p"] = p;
    j["base"] = base_class;
    j["target"] = target_class;
    j["seed"] = seed;
    j["git_config_hash"] = git_config_hash;
    return j;
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    r.clean_accuracy = j.at("clean_accuracy").get<double>();
    r.trigger_rate = j.at("trigger_rate").get<double>();
    r.n_clean = j.at("n_clean").get<long>();
    r.n_inscribed = j.at("n_inscribed").get<long>();
    r.lambda = j.at("lambda").get<double>();
    r.p = j.at("p").get<double>();
    r.base_class = j.at("base").get<std::string>();
    r.target_class = j.at("target").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.git_config_hash = j.at("git_config_hash").get<std::string>();
    return r;
  }
};

// --- victim / LM checkpoints (self-contained, vocabulary embedded) ----------

inline constexpr std::uint64_t kVictimMagic = 0x314d495443ull;  // "CTIV1"
inline constexpr std::uint64_t kLmMagic = 0x31444f4d4cull;      // "LMOD1"

inline void save_victim(VictimModel& victim, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_victim: cannot write " + path);
  ckpt::write_u64(f, kVictimMagic);
  ckpt::write_u64(f, static_cast<std::uint64_t>(victim.cfg.embedding_dim));
  ckpt::write_u64(f, static_cast<std::uint64_t>(victim.cfg.hidden_dim));
  ckpt::write_u64(f, static_cast<std::uint64_t>(victim.cfg.head_hidden));
  ckpt::write_u64(f, victim.cfg.max_len);
  ckpt::write_u64(f, victim.cfg.seed);
  ckpt::write_u64(f, victim.pair_mode ? 1 : 0);
  ckpt::write_u64(f, victim.trained ? 1 : 0);
  ckpt::write_u64(f, victim.label_set.size());
  for (const auto& y : victim.label_set) ckpt::write_string(f, y);
  ckpt::write_u64(f, victim.vocab.size());
  for (const auto& tok : victim.vocab.tokens()) ckpt::write_string(f, tok);
  ckpt::write_u64(f, victim.vocab.max_size());
  ckpt::write_params(f, victim.params());
}

inline VictimModel load_victim(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_victim: cannot open " + path);
  if (ckpt::read_u64(f) != kVictimMagic)
    throw std::runtime_error("load_victim: not a victim checkpoint: " + path);
  VictimConfig cfg;
  cfg.embedding_dim = static_cast<int>(ckpt::read_u64(f));
  cfg.hidden_dim = static_cast<int>(ckpt::read_u64(f));
  cfg.head_hidden = static_cast<int>(ckpt::read_u64(f));
  cfg.max_len = ckpt::read_u64(f);
  cfg.seed = ckpt::read_u64(f);
  bool pair = ckpt::read_u64(f) != 0;
  bool trained = ckpt::read_u64(f) != 0;
  std::vector<std::string> labels(ckpt::read_u64(f));
  for (auto& y : labels) y = ckpt::read_string(f);
  std::vector<std::string> toks(ckpt::read_u64(f));
  for (auto& tok : toks) tok = ckpt::read_string(f);
  std::uint64_t vocab_max = ckpt::read_u64(f);
  // Skip the four reserved tokens; the vocabulary re-adds them first.
  std::vector<std::string> rest(toks.begin() + TokenVocabulary::kReserved, toks.end());
  TokenVocabulary vocab(rest, vocab_max);
  VictimModel victim(cfg, vocab, labels, pair);
  victim.trained = trained;
  ckpt::read_params(f, victim.params());
  return victim;
}

}  // namespace cara
