#include <gtest/gtest.h>

#include <cstdio>
#include <functional>
#include <random>

#include "cara/checkpoint.hpp"
#include "cara/corpus.hpp"
#include "cara/model.hpp"

namespace {

using namespace cara;

CaraDims micro_dims() {
  CaraDims d;
  d.embedding_dim = 5;
  d.hidden_dim = 6;
  d.latent_dim = 4;
  d.context_dim = 3;
  d.conv_channels = {4};
  d.conv_kernels = {3};
  d.conv_strides = {1};
  d.mlp_hidden = {5};
  return d;
}

CaraModel micro_model(bool pair = true, std::uint64_t seed = 42) {
  return CaraModel(micro_dims(), {"entailment", "contradiction"}, pair,
                   /*vocab_size=*/10, /*vocab_hash=*/123, seed);
}

EncodedBatch micro_batch() {
  EncodedBatch b;
  b.hyp_ids = {{4, 5, 6, 7, 2}, {5, 8, 9, 2}};
  b.prem_ids = {{6, 7, 2}, {9, 2}};
  b.labels = {0, 1};
  return b;
}

TEST(EncodeHypothesis, UnitNormAndDeterminism) {
  CaraModel m = micro_model();
  EncodedBatch b = micro_batch();
  nn::Mat z1 = m.encode_hypotheses(b.hyp_ids);
  nn::Mat z2 = m.encode_hypotheses(b.hyp_ids);
  ASSERT_EQ(z1.rows(), 4);
  ASSERT_EQ(z1.cols(), 2);
  for (Eigen::Index j = 0; j < z1.cols(); ++j)
    EXPECT_NEAR(z1.col(j).norm(), 1.0, 1e-5);
  EXPECT_TRUE((z1.array() == z2.array()).all());
  EXPECT_THROW(m.encode_hypotheses({{}}), std::runtime_error);
}

TEST(EncodeHypothesis, NormalizationMatchesThreeFourFive) {
  nn::Tape t;
  nn::Mat raw(2, 1);
  raw << 3.0, 4.0;
  nn::Mat z = nn::unit_normalize_cols(t.constant(raw)).val();
  EXPECT_DOUBLE_EQ(z(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(z(1, 0), 0.8);
}

TEST(EncodePremise, SingleTextModeGivesZeroContext) {
  CaraModel m = micro_model(/*pair=*/false);
  nn::Mat h = m.encode_premises({{}, {}}, 2);
  EXPECT_EQ(h.rows(), 3);
  EXPECT_EQ(h.cols(), 2);
  EXPECT_TRUE((h.array() == 0.0).all());
}

TEST(EncodePremise, PairModeRejectsEmptySequence) {
  CaraModel m = micro_model();
  EXPECT_THROW(m.encode_premises({{}, {5, 2}}, 2), std::runtime_error);
}

TEST(EncodePremise, DeterministicAndInputSensitive) {
  CaraModel m = micro_model();
  nn::Mat h1 = m.encode_premises({{4, 5, 2}}, 1);
  nn::Mat h2 = m.encode_premises({{4, 5, 2}}, 1);
  EXPECT_TRUE((h1.array() == h2.array()).all());
  nn::Mat h3 = m.encode_premises({{8, 9, 2}}, 1);
  EXPECT_FALSE((h1.array() == h3.array()).all());
}

TEST(DecodeHypothesis, GreedyDeterminismAndRouting) {
  CaraModel m = micro_model();
  EncodedBatch b = micro_batch();
  nn::Mat z = m.encode_hypotheses(b.hyp_ids);
  nn::Mat ha = m.encode_premises(b.prem_ids, 2);
  auto out1 = m.decode_hypotheses(z, ha, "entailment", 8);
  auto out2 = m.decode_hypotheses(z, ha, "entailment", 8);
  EXPECT_EQ(out1, out2);
  EXPECT_THROW(m.decode_hypotheses(z, ha, "nonexistent", 8), std::runtime_error);
  for (const auto& seq : out1) EXPECT_LE(seq.size(), 8u);
}

TEST(DecodeHypothesis, RejectsNonUnitLatent) {
  CaraModel m = micro_model();
  nn::Mat z = nn::Mat::Constant(4, 1, 0.9);
  nn::Mat ha = nn::Mat::Zero(3, 1);
  EXPECT_THROW(m.decode_hypotheses(z, ha, "entailment", 8), std::runtime_error);
}

TEST(SamplePrior, SeededShapeAndUnitNorm) {
  CaraModel m = micro_model();
  PriorBatch a = m.sample_prior(64, 7);
  PriorBatch b = m.sample_prior(64, 7);
  EXPECT_EQ(a.s.cols(), 64);
  EXPECT_EQ(a.s.rows(), 4);
  EXPECT_EQ(a.z_tilde.rows(), 4);
  EXPECT_EQ(a.z_tilde.cols(), 64);
  EXPECT_TRUE((a.s.array() == b.s.array()).all());
  EXPECT_TRUE((a.z_tilde.array() == b.z_tilde.array()).all());
  for (Eigen::Index j = 0; j < a.z_tilde.cols(); ++j)
    EXPECT_NEAR(a.z_tilde.col(j).norm(), 1.0, 1e-5);
  PriorBatch c = m.sample_prior(64, 8);
  EXPECT_FALSE((a.s.array() == c.s.array()).all());
}

TEST(SamplePrior, NoiseMeanNearZero) {
  CaraModel m = micro_model();
  PriorBatch big = m.sample_prior(10000, 21);
  Eigen::VectorXd mean = big.s.rowwise().mean();
  for (Eigen::Index i = 0; i < mean.size(); ++i)
    EXPECT_LT(std::abs(mean(i)), 0.05) << "coordinate " << i;
}

TEST(ReconstructionLoss, UniformBaselineAndDuplication) {
  CaraModel m = micro_model();
  EncodedBatch b = micro_batch();
  double loss = reconstruction_loss(m, b);
  const double lnV = std::log(10.0);
  EXPECT_GT(loss, 0.0);
  EXPECT_NEAR(loss, lnV, 0.15 * lnV);

  EncodedBatch one;
  one.hyp_ids = {b.hyp_ids[0]};
  one.prem_ids = {b.prem_ids[0]};
  one.labels = {b.labels[0]};
  EncodedBatch eight;
  for (int i = 0; i < 8; ++i) {
    eight.hyp_ids.push_back(one.hyp_ids[0]);
    eight.prem_ids.push_back(one.prem_ids[0]);
    eight.labels.push_back(one.labels[0]);
  }
  EXPECT_DOUBLE_EQ(reconstruction_loss(m, one), reconstruction_loss(m, eight));
}

TEST(LatentClassLoss, UniformBaselineAndDuplication) {
  CaraModel m = micro_model();
  EncodedBatch b = micro_batch();
  double loss = latent_class_loss(m, b);
  const double lnK = std::log(2.0);
  EXPECT_NEAR(loss, lnK, 0.15 * lnK);

  EncodedBatch one;
  one.hyp_ids = {b.hyp_ids[1]};
  one.prem_ids = {b.prem_ids[1]};
  one.labels = {b.labels[1]};
  EncodedBatch four;
  for (int i = 0; i < 4; ++i) {
    four.hyp_ids.push_back(one.hyp_ids[0]);
    four.prem_ids.push_back(one.prem_ids[0]);
    four.labels.push_back(one.labels[0]);
  }
  EXPECT_DOUBLE_EQ(latent_class_loss(m, one), latent_class_loss(m, four));
}

TEST(AdversarialLosses, SignSymmetryExactAndMismatchError) {
  CaraModel m = micro_model();
  EncodedBatch b = micro_batch();
  PriorBatch prior = m.sample_prior(2, 3);
  AdversarialLosses l = adversarial_losses(m, b, prior);
  EXPECT_DOUBLE_EQ(l.critic_loss, -l.encgen_loss);

  PriorBatch wrong = m.sample_prior(5, 3);
  EXPECT_THROW(adversarial_losses(m, b, wrong), std::runtime_error);
}

TEST(AdversarialLosses, IdenticalBatchesGiveZero) {
  CaraModel m = micro_model();
  EncodedBatch b = micro_batch();
  PriorBatch prior;
  prior.z_tilde = m.encode_hypotheses(b.hyp_ids);
  prior.s = nn::Mat::Zero(4, 2);
  AdversarialLosses l = adversarial_losses(m, b, prior);
  EXPECT_EQ(l.critic_loss, 0.0);
  EXPECT_EQ(l.encgen_loss, 0.0);
}

// Perturbing the decoder of a class absent from the batch must leave the
// reconstruction loss bit-identical.
TEST(DecoderRouting, OtherClassParamsDoNotAffectLoss) {
  CaraModel m = micro_model();
  EncodedBatch ent_only;
  ent_only.hyp_ids = {{4, 5, 6, 2}};
  ent_only.prem_ids = {{6, 2}};
  ent_only.labels = {0};
  double before = reconstruction_loss(m, ent_only);
  for (nn::Param* p : m.group_dec_b(1)) p->value.array() += 0.37;
  double after = reconstruction_loss(m, ent_only);
  EXPECT_EQ(before, after);
  for (nn::Param* p : m.group_dec_b(0)) p->value.array() += 0.37;
  double moved = reconstruction_loss(m, ent_only);
  EXPECT_NE(before, moved);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  CaraModel m = micro_model();
  const std::string path = std::string(::testing::TempDir()) + "/model.ckpt";
  save_checkpoint(m, path);
  CaraModel loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.label_set, m.label_set);
  EXPECT_EQ(loaded.vocab_size, m.vocab_size);
  EXPECT_EQ(loaded.vocab_hash, m.vocab_hash);
  EXPECT_EQ(loaded.pair_mode, m.pair_mode);
  auto a = m.all_params();
  auto b = loaded.all_params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_TRUE((a[i]->value.array() == b[i]->value.array()).all()) << a[i]->name;
  }
}

// --- finite-difference checks of the three training losses -------------------

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

void check_params_fd(const std::vector<nn::Param*>& params,
                     const std::function<double()>& value, double tol = 1e-3,
                     int max_coords_per_param = 6) {
  std::mt19937_64 rng(17);
  for (nn::Param* p : params) {
    const auto total = static_cast<int>(p->value.size());
    std::vector<int> coords(static_cast<std::size_t>(total));
    for (int c = 0; c < total; ++c) coords[static_cast<std::size_t>(c)] = c;
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(std::min(total, max_coords_per_param)));
    for (int c : coords) {
      double* x = p->value.data() + c;
      const double x0 = *x;
      const double h = 1e-5 * std::max(1.0, std::abs(x0));
      *x = x0 + h;
      double fp = value();
      *x = x0 - h;
      double fm = value();
      *x = x0;
      double fd = (fp - fm) / (2 * h);
      double analytic = p->grad.data()[c];
      EXPECT_LT(rel_err(analytic, fd), tol)
          << p->name << "[" << c << "] analytic=" << analytic << " fd=" << fd;
    }
  }
}

TEST(GradientCorrectness, ReconstructionLoss) {
  CaraModel m = micro_model();
  EncodedBatch b = micro_batch();
  auto params = m.all_params();
  {
    nn::Tape t;
    auto stats = m.build_reconstruction(t, b);
    nn::zero_grads(params);
    t.backward(stats.loss);
  }
  check_params_fd(params, [&]() { return reconstruction_loss(m, b); });
}

TEST(GradientCorrectness, LatentClassLoss) {
  CaraModel m = micro_model();
  EncodedBatch b = micro_batch();
  auto params = m.all_params();
  {
    nn::Tape t;
    nn::Var z = m.encode_hypotheses_t(t, b.hyp_ids);
    nn::Var ha = m.encode_premises_t(t, b.prem_ids, 2);
    nn::Var logits = m.fclass_logits_t(t, z, ha);
    std::vector<unsigned char> mask(b.size(), 1);
    nn::Var loss = nn::scale(nn::softmax_xent_sum(logits, b.labels, mask), 0.5);
    nn::zero_grads(params);
    t.backward(loss);
  }
  check_params_fd(params, [&]() { return latent_class_loss(m, b); });
}

TEST(GradientCorrectness, AdversarialBothDirections) {
  CaraModel m = micro_model();
  EncodedBatch b = micro_batch();
  nn::Mat noise = nn::Mat::Random(4, 2);

  // Critic direction: inputs fixed, gradients w.r.t. critic parameters.
  nn::Mat z_fixed = m.encode_hypotheses(b.hyp_ids);
  {
    nn::Tape t;
    PriorBatch prior = m.prior_from_noise(noise);
    nn::Var wass = nn::sub(
        nn::mean_all(m.critic_score_t(t, t.constant(prior.z_tilde))),
        nn::mean_all(m.critic_score_t(t, t.constant(z_fixed))));
    nn::zero_grads(m.all_params());
    t.backward(wass);
  }
  auto critic_value = [&]() {
    nn::Tape t(false);
    PriorBatch prior = m.prior_from_noise(noise);
    double fake = m.critic_score_t(t, t.constant(prior.z_tilde)).val().mean();
    double real = m.critic_score_t(t, t.constant(z_fixed)).val().mean();
    return fake - real;
  };
  check_params_fd(m.group_critic(), critic_value);

  // Encoder/generator direction: critic fixed, gradients through enc_b & gen.
  {
    nn::Tape t;
    nn::Var z = m.encode_hypotheses_t(t, b.hyp_ids);
    nn::Var zt = m.gen_latent_t(t, noise);
    nn::Var obj = nn::sub(nn::mean_all(m.critic_score_t(t, z)),
                          nn::mean_all(m.critic_score_t(t, zt)));
    nn::zero_grads(m.all_params());
    t.backward(obj);
  }
  auto encgen_value = [&]() {
    nn::Tape t(false);
    nn::Var z = m.encode_hypotheses_t(t, b.hyp_ids);
    nn::Var zt = m.gen_latent_t(t, noise);
    return m.critic_score_t(t, z).val().mean() - m.critic_score_t(t, zt).val().mean();
  };
  auto encgen_params = m.group_enc_b();
  for (auto* p : m.group_gen()) encgen_params.push_back(p);
  check_params_fd(encgen_params, encgen_value);
}

}  // namespace
