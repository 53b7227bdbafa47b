#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cara/checkpoint.hpp"
#include "cara/corpus.hpp"
#include "cara/model.hpp"
#include "cara/nn/optim.hpp"
#include "cara/util.hpp"

namespace cara {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr_autoencoder = 1e-3;  // enc_a, enc_b, dec_b (Adam)
  double lr_classifier = 1e-3;   // f_class (Adam)
  double lr_generator = 1e-3;    // gen (Adam)
  double lr_critic = 1e-4;       // critic (plain SGD)
  // enc_b's adversarial updates in steps (3) and (5); kept well below the
  // reconstruction rate so regularization does not drown the autoencoder.
  double lr_adv_encoder = 1e-4;
  double grad_penalty_coeff = 10.0;
  double clip_norm = 1.0;        // autoencoder path only
  std::size_t max_len = 50;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;      // epochs; 0 disables
  std::string checkpoint_dir;

  void validate() const {
    if (epochs < 1) throw std::runtime_error("TrainConfig: epochs must be >= 1");
    if (batch_size < 2) throw std::runtime_error("TrainConfig: batch_size must be >= 2");
    if (lr_autoencoder <= 0 || lr_classifier <= 0 || lr_generator <= 0 ||
        lr_critic <= 0 || lr_adv_encoder <= 0)
      throw std::runtime_error("TrainConfig: learning rates must be positive");
  }
};

struct StepMetrics {
  long iteration = 0;
  double rec_loss = 0;
  double class_loss = 0;
  double enc_class_loss = 0;
  double critic_loss = 0;
  double encgen_loss = 0;
};

using TrainHistory = std::vector<StepMetrics>;

inline void write_metrics_csv(const TrainHistory& history, const std::string& path) {
  std::string out = "iteration,rec_loss,class_loss,enc_class_loss,critic_loss,encgen_loss\n";
  for (const auto& m : history) {
    out += std::to_string(m.iteration);
    out += ',';
    out += format_double(m.rec_loss);
    out += ',';
    out += format_double(m.class_loss);
    out += ',';
    out += format_double(m.enc_class_loss);
    out += ',';
    out += format_double(m.critic_loss);
    out += ',';
    out += format_double(m.encgen_loss);
    out += '\n';
  }
  write_file(path, out);
}

// Shuffled epoch stream over sample indices. Steps (1)-(3), (4) and (5) of
// Alg. 1 each read from their own stream, giving the three independent draws
// per iteration.
class BatchSampler {
 public:
  virtual ~BatchSampler() = default;
  // stream: 0 = main, 1 = critic resample, 2 = enc/gen resample
  virtual std::vector<int> next(int stream, int batch_size) = 0;
};

class ShuffledBatchSampler : public BatchSampler {
 public:
  ShuffledBatchSampler(int n, std::uint64_t seed) : n_(n) {
    for (int s = 0; s < 3; ++s) {
      rng_[s].seed(derive_seed(seed, "batch", static_cast<std::uint64_t>(s)));
      cursor_[s] = 0;
      order_[s].resize(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) order_[s][static_cast<std::size_t>(i)] = i;
      std::shuffle(order_[s].begin(), order_[s].end(), rng_[s]);
    }
  }

  std::vector<int> next(int stream, int batch_size) override {
    auto& order = order_[stream];
    auto& cur = cursor_[stream];
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
      if (cur >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng_[stream]);
        cur = 0;
      }
      out.push_back(order[cur++]);
    }
    return out;
  }

 private:
  int n_;
  std::array<std::mt19937_64, 3> rng_;
  std::array<std::vector<int>, 3> order_;
  std::array<std::size_t, 3> cursor_;
};

// One optimizer per Alg. 1 update so the moment statistics of one loss
// pathway cannot distort the step sizes of another.
struct OptState {
  nn::Adam adam_recon;      // step (1)
  nn::Adam adam_class;      // step (2)
  nn::Adam adam_enc_class;  // step (3)
  nn::Sgd sgd_critic;       // step (4)
  nn::Adam adam_encgen;     // step (5)
  std::mt19937_64 noise_rng;
  long iteration = 0;
};

// Called after each of the five Alg. 1 updates; used by the update-scoping
// checks to snapshot parameters between sub-steps.
using StepHook = std::function<void(int step)>;

namespace detail {

inline nn::Mat gaussian_noise(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  nn::Mat m(rows, cols);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = normal(rng);
  return m;
}

inline void check_finite(double v, const char* step) {
  if (!std::isfinite(v))
    throw std::runtime_error(std::string("train_step: non-finite loss at step ") + step);
}

inline std::vector<nn::Param*> join_groups(std::vector<nn::Param*> a,
                                           const std::vector<nn::Param*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace detail

// One Alg. 1 iteration: five gradient updates in order, each touching exactly
// its named parameter groups.
//   (1) reconstruction        -> enc_a, enc_b, dec_b
//   (2) latent classification -> f_class
//   (3) negated class loss    -> enc_b
//   (4) critic Wasserstein (+ gradient penalty) -> f_disc
//   (5) encoder/generator Wasserstein           -> enc_b, gen
inline StepMetrics train_step(CaraModel& model, const EncodedBatch& batch_main,
                              const EncodedBatch& batch_disc,
                              const EncodedBatch& batch_advgen, OptState& opt,
                              const TrainConfig& cfg, const StepHook& hook = {}) {
  StepMetrics m;
  m.iteration = opt.iteration;
  const auto B_main = static_cast<Eigen::Index>(batch_main.size());
  auto all = model.all_params();

  // (1) reconstruction
  {
    nn::Tape t;
    auto stats = model.build_reconstruction(t, batch_main);
    m.rec_loss = stats.loss.val()(0, 0);
    detail::check_finite(m.rec_loss, "(1) reconstruction");
    nn::zero_grads(all);
    t.backward(stats.loss);
    auto ae = detail::join_groups(
        detail::join_groups(model.group_enc_a(), model.group_enc_b()),
        model.group_dec_b());
    nn::clip_global_norm(ae, cfg.clip_norm);
    opt.adam_recon.step(ae, cfg.lr_autoencoder);
  }
  if (hook) hook(1);

  // (2) latent classifier on frozen encodings
  nn::Mat z_main = model.encode_hypotheses(batch_main.hyp_ids);
  nn::Mat ha_main = model.encode_premises(batch_main.prem_ids, B_main);
  {
    nn::Tape t;
    nn::Var logits =
        model.fclass_logits_t(t, t.constant(z_main), t.constant(ha_main));
    std::vector<unsigned char> mask(batch_main.size(), 1);
    nn::Var loss = nn::scale(nn::softmax_xent_sum(logits, batch_main.labels, mask),
                             1.0 / static_cast<double>(batch_main.size()));
    m.class_loss = loss.val()(0, 0);
    detail::check_finite(m.class_loss, "(2) latent classification");
    nn::zero_grads(all);
    t.backward(loss);
    opt.adam_class.step(model.group_fclass(), cfg.lr_classifier);
  }
  if (hook) hook(2);

  // (3) enc_b maximizes the class loss (negated objective)
  {
    nn::Tape t;
    nn::Var z = model.encode_hypotheses_t(t, batch_main.hyp_ids);
    nn::Var logits = model.fclass_logits_t(t, z, t.constant(ha_main));
    std::vector<unsigned char> mask(batch_main.size(), 1);
    nn::Var loss = nn::scale(nn::softmax_xent_sum(logits, batch_main.labels, mask),
                             1.0 / static_cast<double>(batch_main.size()));
    m.enc_class_loss = loss.val()(0, 0);
    detail::check_finite(m.enc_class_loss, "(3) adversarial classification");
    nn::Var obj = nn::neg(loss);
    nn::zero_grads(all);
    t.backward(obj);
    opt.adam_enc_class.step(model.group_enc_b(), cfg.lr_adv_encoder);
  }
  if (hook) hook(3);

  // (4) critic on resampled batch and fresh noise
  {
    nn::Mat z = model.encode_hypotheses(batch_disc.hyp_ids);
    nn::Mat noise = detail::gaussian_noise(model.dims.latent_dim,
                                           static_cast<int>(batch_disc.size()),
                                           opt.noise_rng);
    PriorBatch prior = model.prior_from_noise(noise);
    nn::Tape t;
    nn::Var f_real = model.critic_score_t(t, t.constant(z));
    nn::Var f_fake = model.critic_score_t(t, t.constant(prior.z_tilde));
    nn::Var wass = nn::sub(nn::mean_all(f_fake), nn::mean_all(f_real));
    m.critic_loss = wass.val()(0, 0);
    detail::check_finite(m.critic_loss, "(4) critic");
    nn::Var obj = wass;
    if (cfg.grad_penalty_coeff > 0) {
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      nn::Mat interp(z.rows(), z.cols());
      for (Eigen::Index j = 0; j < z.cols(); ++j) {
        double e = unif(opt.noise_rng);
        interp.col(j) = e * z.col(j) + (1.0 - e) * prior.z_tilde.col(j);
      }
      obj = nn::add(obj, nn::scale(model.critic_gradient_penalty_t(t, interp),
                                   cfg.grad_penalty_coeff));
    }
    nn::zero_grads(all);
    t.backward(obj);
    opt.sgd_critic.step(model.group_critic(), cfg.lr_critic);
  }
  if (hook) hook(4);

  // (5) enc_b and gen on another resampled batch and fresh noise
  {
    nn::Mat noise = detail::gaussian_noise(model.dims.latent_dim,
                                           static_cast<int>(batch_advgen.size()),
                                           opt.noise_rng);
    nn::Tape t;
    nn::Var z = model.encode_hypotheses_t(t, batch_advgen.hyp_ids);
    nn::Var z_tilde = model.gen_latent_t(t, noise);
    nn::Var obj = nn::sub(nn::mean_all(model.critic_score_t(t, z)),
                          nn::mean_all(model.critic_score_t(t, z_tilde)));
    m.encgen_loss = obj.val()(0, 0);
    detail::check_finite(m.encgen_loss, "(5) encoder/generator");
    nn::zero_grads(all);
    t.backward(obj);
    opt.adam_encgen.step(model.group_enc_b(), cfg.lr_adv_encoder);
    opt.adam_encgen.step(model.group_gen(), cfg.lr_generator);
  }
  if (hook) hook(5);

  opt.iteration += 1;
  return m;
}

// Full Alg. 1 training loop: seed-deterministic shuffling, per-iteration
// metrics, optional epoch checkpoints.
inline TrainHistory train_cara(CaraModel& model, const Dataset& train,
                               const TokenVocabulary& vocab, const TrainConfig& cfg,
                               BatchSampler* injected_sampler = nullptr) {
  cfg.validate();
  if (train.samples.empty()) throw std::runtime_error("train_cara: empty dataset");
  EncodedBatch full = encode_batch(vocab, train.samples, train, cfg.max_len);

  ShuffledBatchSampler default_sampler(static_cast<int>(train.samples.size()),
                                       derive_seed(cfg.seed, "sampler"));
  BatchSampler& sampler = injected_sampler ? *injected_sampler : default_sampler;

  OptState opt;
  opt.noise_rng.seed(derive_seed(cfg.seed, "noise"));

  auto take = [&](const std::vector<int>& idx) {
    EncodedBatch b;
    for (int i : idx) {
      b.prem_ids.push_back(full.prem_ids[static_cast<std::size_t>(i)]);
      b.hyp_ids.push_back(full.hyp_ids[static_cast<std::size_t>(i)]);
      b.labels.push_back(full.labels[static_cast<std::size_t>(i)]);
    }
    return b;
  };

  const int iters_per_epoch =
      std::max(1, static_cast<int>(train.samples.size()) / cfg.batch_size);
  TrainHistory history;
  history.reserve(static_cast<std::size_t>(iters_per_epoch) * cfg.epochs);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int it = 0; it < iters_per_epoch; ++it) {
      EncodedBatch main = take(sampler.next(0, cfg.batch_size));
      EncodedBatch disc = take(sampler.next(1, cfg.batch_size));
      EncodedBatch advgen = take(sampler.next(2, cfg.batch_size));
      history.push_back(train_step(model, main, disc, advgen, opt, cfg));
    }
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      save_checkpoint(model, cfg.checkpoint_dir + "/cara_epoch_" +
                                 std::to_string(epoch + 1) + ".ckpt");
    }
  }
  return history;
}

struct ReconAccuracy {
  double teacher_forced = 0;
  double greedy = 0;
};

// Token accuracy of reconstructions against the gold hypotheses: greedy
// compares decode(encode(x)) position-wise including the terminal <eos>.
inline ReconAccuracy evaluate_reconstruction(CaraModel& model,
                                             const TokenVocabulary& vocab,
                                             const Dataset& ds, std::size_t max_len,
                                             int batch_size = 256) {
  EncodedBatch full = encode_batch(vocab, ds.samples, ds, max_len);
  long tf_tokens = 0, tf_correct = 0, gr_tokens = 0, gr_correct = 0;
  for (std::size_t label = 0; label < model.label_set.size(); ++label) {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < full.size(); ++j)
      if (full.labels[j] == static_cast<int>(label)) idx.push_back(j);
    for (std::size_t start = 0; start < idx.size();
         start += static_cast<std::size_t>(batch_size)) {
      std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
      EncodedBatch b;
      for (std::size_t k = start; k < end; ++k) {
        b.prem_ids.push_back(full.prem_ids[idx[k]]);
        b.hyp_ids.push_back(full.hyp_ids[idx[k]]);
        b.labels.push_back(full.labels[idx[k]]);
      }
      nn::Tape t(false);
      auto stats = model.build_reconstruction(t, b);
      tf_tokens += stats.tokens;
      tf_correct += stats.correct;
      nn::Mat z = model.encode_hypotheses(b.hyp_ids);
      nn::Mat ha = model.encode_premises(b.prem_ids,
                                         static_cast<Eigen::Index>(b.size()));
      auto decoded = model.decode_hypotheses(z, ha, model.label_set[label],
                                             static_cast<int>(max_len) + 1);
      for (std::size_t j = 0; j < b.size(); ++j) {
        const auto& gold = b.hyp_ids[j];
        for (std::size_t p = 0; p < gold.size(); ++p) {
          ++gr_tokens;
          if (p < decoded[j].size() && decoded[j][p] == gold[p]) ++gr_correct;
        }
      }
    }
  }
  ReconAccuracy acc;
  acc.teacher_forced = tf_tokens ? static_cast<double>(tf_correct) / tf_tokens : 0.0;
  acc.greedy = gr_tokens ? static_cast<double>(gr_correct) / gr_tokens : 0.0;
  return acc;
}

}  // namespace cara
