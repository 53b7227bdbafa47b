#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cara/corpus.hpp"
#include "cara/nn/layers.hpp"
#include "cara/nn/optim.hpp"
#include "cara/nn/tensor.hpp"

namespace cara {

// Network sizes. Desk-scale defaults keep end-to-end runs in CPU minutes;
// paper_scale() restores the full-size settings.
struct CaraDims {
  int embedding_dim = 48;
  int hidden_dim = 64;   // decoder LSTM units
  int latent_dim = 32;
  int context_dim = 32;  // premise encoder LSTM units
  std::vector<int> conv_channels = {64, 96};
  std::vector<int> conv_kernels = {3, 3};
  std::vector<int> conv_strides = {1, 2};
  std::vector<int> mlp_hidden = {64, 64};  // gen / critic / latent classifier

  static CaraDims desk_scale() { return CaraDims{}; }

  static CaraDims paper_scale() {
    CaraDims d;
    d.embedding_dim = 300;
    d.hidden_dim = 128;
    d.latent_dim = 128;
    d.context_dim = 128;
    d.conv_channels = {500, 700, 1000, 1000};
    d.conv_kernels = {3, 3, 3, 3};
    d.conv_strides = {1, 2, 2, 1};
    d.mlp_hidden = {128, 128};
    return d;
  }
};

// A batch of token-id sequences ready for the model. An empty premise
// vector marks an absent premise.
struct EncodedBatch {
  std::vector<std::vector<int>> prem_ids;
  std::vector<std::vector<int>> hyp_ids;
  std::vector<int> labels;

  std::size_t size() const { return hyp_ids.size(); }
};

inline EncodedBatch encode_batch(const TokenVocabulary& vocab,
                                 const std::vector<TextPairSample>& samples,
                                 const Dataset& label_source,
                                 std::size_t max_len) {
  EncodedBatch b;
  b.prem_ids.reserve(samples.size());
  b.hyp_ids.reserve(samples.size());
  b.labels.reserve(samples.size());
  for (const auto& s : samples) {
    b.prem_ids.push_back(s.premise ? encode_text(vocab, *s.premise, max_len)
                                   : std::vector<int>{});
    b.hyp_ids.push_back(encode_text(vocab, s.hypothesis, max_len));
    b.labels.push_back(label_source.label_index(s.label));
  }
  return b;
}

struct PriorBatch {
  nn::Mat s;        // noise, one column per draw
  nn::Mat z_tilde;  // gen(s), renormalized to the unit sphere
};

namespace detail {

// Token-major view: ids_t[t][j] = token of sample j at position t, padded.
inline std::vector<std::vector<int>> token_major(
    const std::vector<std::vector<int>>& seqs, std::size_t min_len,
    std::vector<int>* lengths = nullptr) {
  std::size_t L = min_len;
  for (const auto& s : seqs) L = std::max(L, s.size());
  std::vector<std::vector<int>> out(L, std::vector<int>(seqs.size(), TokenVocabulary::kPad));
  if (lengths) lengths->assign(seqs.size(), 0);
  for (std::size_t j = 0; j < seqs.size(); ++j) {
    for (std::size_t t = 0; t < seqs[j].size(); ++t) out[t][j] = seqs[j][t];
    if (lengths) (*lengths)[j] = static_cast<int>(seqs[j].size());
  }
  return out;
}

}  // namespace detail

// Conditional adversarially regularized autoencoder: a premise feature
// extractor, a unit-sphere hypothesis encoder, one decoder per class, a
// latent prior generator, a critic, and an adversarial latent classifier.
class CaraModel {
 public:
  struct Decoder {
    nn::Embedding emb;
    nn::LstmCell cell;
    nn::Linear out;
  };

  CaraDims dims;
  std::vector<std::string> label_set;
  bool pair_mode = true;
  int vocab_size = 0;
  std::uint64_t vocab_hash = 0;

  nn::Embedding emb_b;               // hypothesis token embeddings
  std::vector<nn::Conv1d> convs;     // hypothesis encoder stack
  nn::Linear latent_proj;
  nn::Embedding emb_a;               // premise token embeddings
  nn::LstmCell lstm_a;               // premise encoder
  std::vector<Decoder> decoders;     // one per class, routed by label
  nn::Mlp gen;
  nn::Mlp critic;
  nn::Mlp latent_classifier;

  CaraModel() = default;

  CaraModel(CaraDims d, std::vector<std::string> labels, bool pair,
            int vocab_sz, std::uint64_t vhash, std::uint64_t seed)
      : dims(std::move(d)), label_set(std::move(labels)), pair_mode(pair),
        vocab_size(vocab_sz), vocab_hash(vhash) {
    if (label_set.empty()) throw std::runtime_error("CaraModel: empty label set");
    std::mt19937_64 rng(seed);
    emb_b = nn::Embedding(dims.embedding_dim, vocab_size, "enc_b.emb", rng);
    int ch = dims.embedding_dim;
    for (std::size_t i = 0; i < dims.conv_channels.size(); ++i) {
      convs.emplace_back(ch, dims.conv_channels[i], dims.conv_kernels[i],
                         dims.conv_strides[i], "enc_b.conv" + std::to_string(i), rng);
      ch = dims.conv_channels[i];
    }
    latent_proj = nn::Linear(ch, dims.latent_dim, "enc_b.latent", rng);
    emb_a = nn::Embedding(dims.embedding_dim, vocab_size, "enc_a.emb", rng);
    lstm_a = nn::LstmCell(dims.embedding_dim, dims.context_dim, "enc_a.lstm", rng);
    const int dec_in = dims.embedding_dim + dims.latent_dim + dims.context_dim;
    for (const auto& y : label_set) {
      Decoder dec;
      dec.emb = nn::Embedding(dims.embedding_dim, vocab_size, "dec_b." + y + ".emb", rng);
      dec.cell = nn::LstmCell(dec_in, dims.hidden_dim, "dec_b." + y + ".lstm", rng);
      dec.out = nn::Linear(dims.hidden_dim, vocab_size, "dec_b." + y + ".out", rng);
      decoders.push_back(std::move(dec));
    }
    gen = nn::Mlp(dims.latent_dim, dims.mlp_hidden, dims.latent_dim,
                  nn::Activation::tanh_act, "gen", rng);
    critic = nn::Mlp(dims.latent_dim, dims.mlp_hidden, 1,
                     nn::Activation::tanh_act, "critic", rng);
    latent_classifier = nn::Mlp(dims.latent_dim + dims.context_dim, dims.mlp_hidden,
                                static_cast<int>(label_set.size()),
                                nn::Activation::tanh_act, "f_class", rng);
  }

  int label_index(const std::string& y) const {
    for (std::size_t i = 0; i < label_set.size(); ++i)
      if (label_set[i] == y) return static_cast<int>(i);
    throw std::runtime_error("CaraModel: unknown class " + y);
  }

  // Shortest hypothesis (in padded tokens) the conv stack accepts.
  int min_encoder_len() const {
    int need = 1;
    for (std::size_t i = convs.size(); i-- > 0;)
      need = (need - 1) * convs[i].stride + convs[i].kernel;
    return need;
  }

  // --- parameter groups (Alg. 1 update scoping) ---

  std::vector<nn::Param*> group_enc_a() {
    std::vector<nn::Param*> v;
    emb_a.collect(v);
    lstm_a.collect(v);
    return v;
  }
  std::vector<nn::Param*> group_enc_b() {
    std::vector<nn::Param*> v;
    emb_b.collect(v);
    for (auto& c : convs) c.collect(v);
    latent_proj.collect(v);
    return v;
  }
  std::vector<nn::Param*> group_dec_b() {
    std::vector<nn::Param*> v;
    for (auto& d : decoders) {
      d.emb.collect(v);
      d.cell.collect(v);
      d.out.collect(v);
    }
    return v;
  }
  std::vector<nn::Param*> group_dec_b(int label) {
    std::vector<nn::Param*> v;
    auto& d = decoders[static_cast<std::size_t>(label)];
    d.emb.collect(v);
    d.cell.collect(v);
    d.out.collect(v);
    return v;
  }
  std::vector<nn::Param*> group_fclass() {
    std::vector<nn::Param*> v;
    latent_classifier.collect(v);
    return v;
  }
  std::vector<nn::Param*> group_critic() {
    std::vector<nn::Param*> v;
    critic.collect(v);
    return v;
  }
  std::vector<nn::Param*> group_gen() {
    std::vector<nn::Param*> v;
    gen.collect(v);
    return v;
  }
  std::vector<nn::Param*> all_params() {
    std::vector<nn::Param*> v;
    for (auto* p : group_enc_a()) v.push_back(p);
    for (auto* p : group_enc_b()) v.push_back(p);
    for (auto* p : group_dec_b()) v.push_back(p);
    for (auto* p : group_fclass()) v.push_back(p);
    for (auto* p : group_critic()) v.push_back(p);
    for (auto* p : group_gen()) v.push_back(p);
    return v;
  }

  // --- tape-mode forward passes ---

  // z = unit-normalized conv encoding of the hypotheses; [latent x B].
  nn::Var encode_hypotheses_t(nn::Tape& t, const std::vector<std::vector<int>>& hyp_ids) {
    if (hyp_ids.empty()) throw std::runtime_error("encode_hypothesis: empty batch");
    for (const auto& h : hyp_ids)
      if (h.empty()) throw std::runtime_error("encode_hypothesis: empty id sequence");
    auto ids_t = detail::token_major(hyp_ids, static_cast<std::size_t>(min_encoder_len()));
    std::vector<nn::Var> seq;
    seq.reserve(ids_t.size());
    for (auto& ids : ids_t) seq.push_back(emb_b.lookup(t, ids));
    for (auto& conv : convs) {
      seq = conv(t, seq);
      for (auto& v : seq) v = nn::vrelu(v);
    }
    nn::Var pooled = nn::max_over_time(seq);
    return nn::unit_normalize_cols(latent_proj(t, pooled));
  }

  // h_a from the premise LSTM's last real step; zero vector when the model
  // is single-text. [context x B].
  nn::Var encode_premises_t(nn::Tape& t, const std::vector<std::vector<int>>& prem_ids,
                            Eigen::Index batch) {
    if (!pair_mode)
      return t.constant(nn::Mat::Zero(dims.context_dim, batch));
    if (static_cast<Eigen::Index>(prem_ids.size()) != batch)
      throw std::runtime_error("encode_premise: batch size mismatch");
    std::vector<int> lengths;
    for (const auto& p : prem_ids)
      if (p.empty())
        throw std::runtime_error("encode_premise: empty id sequence in pair mode");
    auto ids_t = detail::token_major(prem_ids, 1, &lengths);
    std::vector<nn::Var> seq;
    seq.reserve(ids_t.size());
    for (auto& ids : ids_t) seq.push_back(emb_a.lookup(t, ids));
    auto hs = nn::run_lstm(lstm_a, t, seq);
    std::vector<int> last(lengths.size());
    for (std::size_t j = 0; j < lengths.size(); ++j) last[j] = lengths[j] - 1;
    return nn::gather_time(hs, last);
  }

  nn::Var gen_latent_t(nn::Tape& t, const nn::Mat& noise) {
    nn::Var raw = gen(t, t.constant(noise));
    return nn::unit_normalize_cols(raw);
  }

  nn::Var critic_score_t(nn::Tape& t, nn::Var v) { return critic(t, v); }

  nn::Var fclass_logits_t(nn::Tape& t, nn::Var z, nn::Var h_a) {
    return latent_classifier(t, nn::concat_rows(z, h_a));
  }

  struct ReconStats {
    nn::Var loss;        // mean per-token negative log-likelihood
    long tokens = 0;
    long correct = 0;    // teacher-forced argmax hits
  };

  // Teacher-forced reconstruction, each sample routed through its label's
  // decoder; loss is the mean NLL over all (non-pad) target tokens.
  ReconStats build_reconstruction(nn::Tape& t, const EncodedBatch& batch) {
    if (batch.size() == 0) throw std::runtime_error("reconstruction_loss: empty batch");
    nn::Var z = encode_hypotheses_t(t, batch.hyp_ids);
    nn::Var h_a = encode_premises_t(t, batch.prem_ids,
                                    static_cast<Eigen::Index>(batch.size()));
    nn::Var zh = nn::concat_rows(z, h_a);

    ReconStats stats{t.constant(nn::Mat::Zero(1, 1)), 0, 0};
    nn::Var total = t.constant(nn::Mat::Zero(1, 1));
    for (std::size_t y = 0; y < label_set.size(); ++y) {
      std::vector<int> idx;
      for (std::size_t j = 0; j < batch.size(); ++j)
        if (batch.labels[j] == static_cast<int>(y)) idx.push_back(static_cast<int>(j));
      if (idx.empty()) continue;
      std::vector<std::vector<int>> hyp;
      hyp.reserve(idx.size());
      for (int j : idx) hyp.push_back(batch.hyp_ids[static_cast<std::size_t>(j)]);
      nn::Var zh_y = nn::gather_cols(zh, idx);
      total = nn::add(total, decoder_xent_sum(t, static_cast<int>(y), zh_y, hyp, &stats));
    }
    if (stats.tokens == 0) throw std::runtime_error("reconstruction_loss: no target tokens");
    stats.loss = nn::scale(total, 1.0 / static_cast<double>(stats.tokens));
    return stats;
  }

  // --- evaluation-mode wrappers (plain matrices, no gradients) ---

  nn::Mat encode_hypotheses(const std::vector<std::vector<int>>& hyp_ids) {
    nn::Tape t(false);
    return encode_hypotheses_t(t, hyp_ids).val();
  }

  nn::Mat encode_premises(const std::vector<std::vector<int>>& prem_ids,
                          Eigen::Index batch) {
    nn::Tape t(false);
    return encode_premises_t(t, prem_ids, batch).val();
  }

  // Greedy argmax decoding with the class-y decoder, conditioned on [z; h_a]
  // at every step. Decoding stops at <eos> (included in the output) or after
  // max_len emitted tokens.
  std::vector<std::vector<int>> decode_hypotheses(const nn::Mat& z, const nn::Mat& h_a,
                                                  const std::string& y, int max_len) {
    const int label = label_index(y);
    const Eigen::Index B = z.cols();
    for (Eigen::Index j = 0; j < B; ++j) {
      double n = z.col(j).norm();
      if (std::abs(n - 1.0) > 1e-5)
        throw std::runtime_error("decode_hypothesis: latent is not unit-norm");
    }
    nn::Tape t(false);
    Decoder& dec = decoders[static_cast<std::size_t>(label)];
    nn::Var zh = nn::concat_rows(t.constant(z), t.constant(h_a));
    auto state = dec.cell.initial(t, B);
    std::vector<int> prev(static_cast<std::size_t>(B), TokenVocabulary::kSos);
    std::vector<bool> done(static_cast<std::size_t>(B), false);
    std::vector<std::vector<int>> out(static_cast<std::size_t>(B));
    for (int step = 0; step < max_len; ++step) {
      nn::Var x = dec.emb.lookup(t, prev);
      state = dec.cell.step(t, nn::concat_rows(x, zh), state);
      nn::Mat logits = dec.out(t, state.h).val();
      auto picks = nn::argmax_cols(logits);
      bool all_done = true;
      for (Eigen::Index j = 0; j < B; ++j) {
        auto ju = static_cast<std::size_t>(j);
        if (!done[ju]) {
          out[ju].push_back(picks[ju]);
          if (picks[ju] == TokenVocabulary::kEos) done[ju] = true;
          prev[ju] = picks[ju];
        } else {
          prev[ju] = TokenVocabulary::kEos;
        }
        all_done = all_done && done[ju];
      }
      if (all_done) break;
    }
    return out;
  }

  // s ~ N(0, I) from a seeded stream; z_tilde = gen(s) on the unit sphere.
  PriorBatch sample_prior(int n, std::uint64_t seed) {
    if (n < 1) throw std::runtime_error("sample_prior: n must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    nn::Mat s(dims.latent_dim, n);
    for (Eigen::Index j = 0; j < s.cols(); ++j)
      for (Eigen::Index i = 0; i < s.rows(); ++i) s(i, j) = normal(rng);
    nn::Tape t(false);
    nn::Mat zt = gen_latent_t(t, s).val();
    return PriorBatch{std::move(s), std::move(zt)};
  }

  PriorBatch prior_from_noise(const nn::Mat& s) {
    nn::Tape t(false);
    return PriorBatch{s, gen_latent_t(t, s).val()};
  }

  // Closed-form gradient of the critic w.r.t. its input, expressed as tape
  // ops so backprop yields exact parameter gradients of the penalty.
  nn::Var critic_gradient_penalty_t(nn::Tape& t, const nn::Mat& interpolates) {
    const Eigen::Index B = interpolates.cols();
    std::vector<nn::Var> acts;  // hidden activations a_1..a_{n-1}
    nn::Var x = t.constant(interpolates);
    for (std::size_t i = 0; i + 1 < critic.layers.size(); ++i) {
      x = nn::vtanh(critic.layers[i](t, x));
      acts.push_back(x);
    }
    // u <- W_nᵀ, then u <- W_iᵀ (d_i ⊙ u) walking the hidden layers back.
    nn::Var ones_row = t.constant(nn::Mat::Ones(1, B));
    nn::Var u = nn::matmul_t1(t.leaf(critic.layers.back().W), ones_row);
    for (std::size_t i = critic.layers.size() - 1; i-- > 0;) {
      nn::Var a = acts[i];
      nn::Var d = nn::sub(t.constant(nn::Mat::Ones(a.rows(), a.cols())), nn::cmul(a, a));
      u = nn::matmul_t1(t.leaf(critic.layers[i].W), nn::cmul(d, u));
    }
    nn::Var norms = nn::vsqrt(nn::sum_rows(nn::cmul(u, u)));
    nn::Var shifted = nn::add_scalar(norms, -1.0);
    return nn::mean_all(nn::cmul(shifted, shifted));
  }

 private:
  // Summed teacher-forced cross-entropy for one class decoder.
  nn::Var decoder_xent_sum(nn::Tape& t, int label, nn::Var zh,
                           const std::vector<std::vector<int>>& hyp_ids,
                           ReconStats* stats) {
    Decoder& dec = decoders[static_cast<std::size_t>(label)];
    const Eigen::Index B = static_cast<Eigen::Index>(hyp_ids.size());
    std::size_t T = 0;
    for (const auto& h : hyp_ids) T = std::max(T, h.size());
    auto state = dec.cell.initial(t, B);
    nn::Var total = t.constant(nn::Mat::Zero(1, 1));
    std::vector<int> prev(static_cast<std::size_t>(B), TokenVocabulary::kSos);
    for (std::size_t step = 0; step < T; ++step) {
      nn::Var x = dec.emb.lookup(t, prev);
      state = dec.cell.step(t, nn::concat_rows(x, zh), state);
      nn::Var logits = dec.out(t, state.h);
      std::vector<int> targets(static_cast<std::size_t>(B), 0);
      std::vector<unsigned char> mask(static_cast<std::size_t>(B), 0);
      for (std::size_t j = 0; j < hyp_ids.size(); ++j) {
        if (step < hyp_ids[j].size()) {
          targets[j] = hyp_ids[j][step];
          mask[j] = 1;
        }
      }
      if (stats) {
        auto picks = nn::argmax_cols(logits.val());
        for (std::size_t j = 0; j < hyp_ids.size(); ++j) {
          if (!mask[j]) continue;
          ++stats->tokens;
          if (picks[j] == targets[j]) ++stats->correct;
        }
      }
      total = nn::add(total, nn::softmax_xent_sum(logits, targets, mask));
      for (std::size_t j = 0; j < hyp_ids.size(); ++j)
        prev[j] = step < hyp_ids[j].size() ? hyp_ids[j][step] : TokenVocabulary::kPad;
    }
    return total;
  }
};

// --- spec-level loss operations ---------------------------------------------

inline double reconstruction_loss(CaraModel& model, const EncodedBatch& batch) {
  nn::Tape t(false);
  return model.build_reconstruction(t, batch).loss.val()(0, 0);
}

struct AdversarialLosses {
  double critic_loss;
  double encgen_loss;
};

// Wasserstein pair from Alg. 1 steps (4) and (5):
//   critic_loss = -E[f(z)] + E[f(z_tilde)],  encgen_loss = -critic_loss.
inline AdversarialLosses adversarial_losses(CaraModel& model,
                                            const EncodedBatch& real_batch,
                                            const PriorBatch& prior_batch) {
  if (static_cast<Eigen::Index>(real_batch.size()) != prior_batch.z_tilde.cols())
    throw std::runtime_error("adversarial_losses: batch size mismatch");
  nn::Tape t(false);
  nn::Var z = model.encode_hypotheses_t(t, real_batch.hyp_ids);
  double mean_real = model.critic_score_t(t, z).val().mean();
  double mean_fake =
      model.critic_score_t(t, t.constant(prior_batch.z_tilde)).val().mean();
  return AdversarialLosses{-mean_real + mean_fake, mean_real - mean_fake};
}

inline double latent_class_loss(CaraModel& model, const EncodedBatch& batch) {
  if (batch.size() == 0) throw std::runtime_error("latent_class_loss: empty batch");
  nn::Tape t(false);
  nn::Var z = model.encode_hypotheses_t(t, batch.hyp_ids);
  nn::Var h_a = model.encode_premises_t(t, batch.prem_ids,
                                        static_cast<Eigen::Index>(batch.size()));
  nn::Var logits = model.fclass_logits_t(t, z, h_a);
  std::vector<unsigned char> mask(batch.size(), 1);
  nn::Var sum = nn::softmax_xent_sum(logits, batch.labels, mask);
  return sum.val()(0, 0) / static_cast<double>(batch.size());
}

}  // namespace cara
