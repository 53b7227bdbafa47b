#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "cara/corpus.hpp"
#include "cara/model.hpp"
#include "cara/util.hpp"

namespace cara {

enum class TriggerKind { word_targeted, synthesized };

// Fixed unit-norm latent direction shared by every poisoned sample.
struct TriggerSignature {
  Eigen::VectorXd delta;
  TriggerKind kind = TriggerKind::synthesized;
  std::string source;  // word token, or a synthesis-parameter note

  void check_unit() const {
    if (std::abs(delta.norm() - 1.0) > 1e-6)
      throw std::runtime_error("TriggerSignature: delta is not unit-norm");
  }
};

struct PoisonConfig {
  std::string base_class;
  std::string target_class;
  double fraction = 0.1;        // p: share of base-class training samples
  double signature_norm = 2.0;  // lambda
  TriggerSignature trigger;
  std::size_t max_len = 50;
  std::uint64_t seed = 1;

  void validate() const {
    if (base_class == target_class)
      throw std::runtime_error("PoisonConfig: base and target class must differ");
    if (fraction < 0.0 || fraction > 1.0)
      throw std::runtime_error("PoisonConfig: fraction must lie in [0,1]");
    if (!std::isfinite(signature_norm) || signature_norm < 0.0)
      throw std::runtime_error("PoisonConfig: signature norm must be finite and >= 0");
  }
};

struct SynthesisConfig {
  double step_size = 0.5;  // mu
  int iterations = 10;

  void validate() const {
    if (step_size <= 0.0) throw std::runtime_error("SynthesisConfig: step size must be > 0");
    if (iterations < 1) throw std::runtime_error("SynthesisConfig: iterations must be >= 1");
  }
};

// T(z) = (z + lambda*delta) / ||z + lambda*delta||. lambda = 0 is the exact
// identity; the only degenerate point is z + lambda*delta = 0.
inline Eigen::VectorXd inject(const Eigen::VectorXd& z, const TriggerSignature& trigger,
                              double lambda) {
  if (z.size() != trigger.delta.size())
    throw std::runtime_error("inject: dimension mismatch");
  if (lambda == 0.0) return z;
  Eigen::VectorXd shifted = z + lambda * trigger.delta;
  double n = shifted.norm();
  if (n < 1e-12)
    throw std::runtime_error("inject: degenerate injection, z + lambda*delta = 0");
  return shifted / n;
}

// delta = normalized mean latent of the training samples containing `token`.
inline TriggerSignature synthesize_word_trigger(CaraModel& model,
                                                const TokenVocabulary& vocab,
                                                const Dataset& dataset,
                                                const std::string& token,
                                                std::size_t max_len = 50) {
  Dataset matching = select_containing_token(dataset, token);
  if (matching.samples.empty())
    throw std::runtime_error("synthesize_word_trigger: no sample contains token \"" +
                             token + "\"");
  std::vector<std::vector<int>> hyp;
  hyp.reserve(matching.samples.size());
  for (const auto& s : matching.samples)
    hyp.push_back(encode_text(vocab, s.hypothesis, max_len));
  nn::Mat z = model.encode_hypotheses(hyp);
  Eigen::VectorXd mean = z.rowwise().mean();
  double n = mean.norm();
  if (n < 1e-12)
    throw std::runtime_error("synthesize_word_trigger: degenerate zero-mean latent");
  TriggerSignature trig;
  trig.delta = mean / n;
  trig.kind = TriggerKind::word_targeted;
  trig.source = token;
  return trig;
}

// Closed-form maximizer of sum_i ||z_i - delta||^2 on the unit sphere:
// for unit z_i the objective is 2N - 2*delta.dot(sum z_i), so the optimum is
// the antipode of the normalized mean.
inline TriggerSignature analytic_generic_trigger(const std::vector<Eigen::VectorXd>& latents) {
  if (latents.empty())
    throw std::runtime_error("analytic_generic_trigger: empty latent set");
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(latents[0].size());
  for (const auto& z : latents) mean += z;
  mean /= static_cast<double>(latents.size());
  double n = mean.norm();
  if (n < 1e-12)
    throw std::runtime_error("analytic_generic_trigger: degenerate zero mean");
  TriggerSignature trig;
  trig.delta = -mean / n;
  trig.kind = TriggerKind::synthesized;
  trig.source = "analytic";
  return trig;
}

// Projected gradient ascent on sum_i ||z_i - delta||^2:
//   delta <- delta + mu * mean(delta - z_i);  delta <- delta / ||delta||.
inline TriggerSignature synthesize_generic_trigger_from_latents(
    const std::vector<Eigen::VectorXd>& latents, const SynthesisConfig& cfg) {
  cfg.validate();
  if (latents.empty())
    throw std::runtime_error("synthesize_generic_trigger: empty latent set");
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(latents[0].size());
  for (const auto& z : latents) mean += z;
  mean /= static_cast<double>(latents.size());
  if (mean.norm() < 1e-12)
    throw std::runtime_error("synthesize_generic_trigger: degenerate zero mean latent");
  Eigen::VectorXd delta = Eigen::VectorXd::Zero(latents[0].size());
  for (int it = 0; it < cfg.iterations; ++it) {
    delta += cfg.step_size * (delta - mean);
    double n = delta.norm();
    if (n < 1e-12)
      throw std::runtime_error("synthesize_generic_trigger: iterate collapsed to zero");
    delta /= n;
  }
  TriggerSignature trig;
  trig.delta = std::move(delta);
  trig.kind = TriggerKind::synthesized;
  trig.source = "pga(mu=" + format_double(cfg.step_size, 3) +
                ",iters=" + std::to_string(cfg.iterations) + ")";
  return trig;
}

inline TriggerSignature synthesize_generic_trigger(CaraModel& model,
                                                   const TokenVocabulary& vocab,
                                                   const Dataset& target_class_dataset,
                                                   const SynthesisConfig& cfg,
                                                   std::size_t max_len = 50) {
  if (target_class_dataset.samples.empty())
    throw std::runtime_error("synthesize_generic_trigger: empty target-class dataset");
  std::vector<std::vector<int>> hyp;
  hyp.reserve(target_class_dataset.samples.size());
  for (const auto& s : target_class_dataset.samples)
    hyp.push_back(encode_text(vocab, s.hypothesis, max_len));
  nn::Mat z = model.encode_hypotheses(hyp);
  std::vector<Eigen::VectorXd> latents;
  latents.reserve(static_cast<std::size_t>(z.cols()));
  for (Eigen::Index j = 0; j < z.cols(); ++j) latents.push_back(z.col(j));
  return synthesize_generic_trigger_from_latents(latents, cfg);
}

namespace detail {

// encode -> inject -> decode with the base-class decoder, batched.
inline std::vector<std::string> inscribe_hypotheses(
    CaraModel& model, const TokenVocabulary& vocab,
    const std::vector<const TextPairSample*>& samples, const PoisonConfig& cfg,
    int batch_size = 256) {
  cfg.trigger.check_unit();
  std::vector<std::string> out(samples.size());
  for (std::size_t start = 0; start < samples.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::vector<int>> hyp, prem;
    for (std::size_t k = start; k < end; ++k) {
      hyp.push_back(encode_text(vocab, samples[k]->hypothesis, cfg.max_len));
      prem.push_back(samples[k]->premise
                         ? encode_text(vocab, *samples[k]->premise, cfg.max_len)
                         : std::vector<int>{});
    }
    nn::Mat z = model.encode_hypotheses(hyp);
    nn::Mat ha = model.encode_premises(prem, static_cast<Eigen::Index>(hyp.size()));
    nn::Mat z_inj(z.rows(), z.cols());
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      z_inj.col(j) = inject(z.col(j), cfg.trigger, cfg.signature_norm);
    auto decoded = model.decode_hypotheses(z_inj, ha, cfg.base_class,
                                           static_cast<int>(cfg.max_len) + 1);
    for (std::size_t k = start; k < end; ++k)
      out[k] = decode_tokens(vocab, decoded[k - start]);
  }
  return out;
}

}  // namespace detail

// Alg. 2: select floor(p * N_base) base-class samples (uniform, seeded),
// re-generate their hypotheses through encode -> T -> decode with the
// base-class decoder, relabel to the target class, and merge with the
// untouched remainder. Cardinality is preserved and non-selected samples
// pass through byte-identical.
inline Dataset poison_training_set(CaraModel& model, const TokenVocabulary& vocab,
                                   const Dataset& train, const PoisonConfig& cfg) {
  cfg.validate();
  if (!train.has_label(cfg.base_class) || !train.has_label(cfg.target_class))
    throw std::runtime_error("poison_training_set: class not in dataset label set");
  model.label_index(cfg.base_class);  // ensure a decoder exists for the base class

  std::vector<std::size_t> base_idx;
  for (std::size_t i = 0; i < train.samples.size(); ++i)
    if (train.samples[i].label == cfg.base_class) base_idx.push_back(i);

  const auto n_selected =
      static_cast<std::size_t>(cfg.fraction * static_cast<double>(base_idx.size()));
  if (n_selected == 0) {
    std::fprintf(stderr,
                 "poison_training_set: floor(p * N_base) = 0, dataset unchanged\n");
    return train;
  }

  std::mt19937_64 rng(derive_seed(cfg.seed, "poison/select"));
  std::vector<std::size_t> pool = base_idx;
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(n_selected);
  std::sort(pool.begin(), pool.end());

  std::vector<const TextPairSample*> selected;
  selected.reserve(n_selected);
  for (std::size_t i : pool) selected.push_back(&train.samples[i]);
  auto inscribed = detail::inscribe_hypotheses(model, vocab, selected, cfg);

  Dataset out;
  out.label_set = train.label_set;
  out.split = train.split;
  out.samples = train.samples;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    TextPairSample& s = out.samples[pool[k]];
    s.hypothesis = inscribed[k];
    s.label = cfg.target_class;
    s.provenance = Provenance::poisoned;
  }
  return out;
}

// Runs every base-class test sample through the same encode -> T -> decode
// pipeline but keeps the base-class label; the result is the population the
// trigger rate is measured on.
inline Dataset inscribe_test_set(CaraModel& model, const TokenVocabulary& vocab,
                                 const Dataset& test, const PoisonConfig& cfg) {
  cfg.validate();
  if (!test.has_label(cfg.base_class))
    throw std::runtime_error("inscribe_test_set: base class not in dataset label set");
  std::vector<const TextPairSample*> base;
  for (const auto& s : test.samples)
    if (s.label == cfg.base_class) base.push_back(&s);
  auto inscribed = detail::inscribe_hypotheses(model, vocab, base, cfg);
  Dataset out;
  out.label_set = test.label_set;
  out.split = test.split;
  out.samples.reserve(base.size());
  for (std::size_t k = 0; k < base.size(); ++k) {
    TextPairSample s = *base[k];
    s.hypothesis = inscribed[k];
    s.provenance = Provenance::inscribed;
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace cara
