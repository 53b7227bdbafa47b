#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "cara/nn/layers.hpp"
#include "cara/nn/optim.hpp"
#include "cara/nn/tensor.hpp"

namespace {

using namespace cara::nn;

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central-difference check of d(loss)/d(param) for every coordinate of every
// param, against the gradients the tape produces.
void grad_check(std::vector<Param*> params, const std::function<double()>& loss_value,
                const std::function<Var(Tape&)>& build, double tol = 1e-6) {
  {
    Tape t;
    Var loss = build(t);
    for (Param* p : params) p->zero_grad();
    t.backward(loss);
  }
  for (Param* p : params) {
    for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
      for (Eigen::Index i = 0; i < p->value.rows(); ++i) {
        const double x0 = p->value(i, j);
        const double h = 1e-5 * std::max(1.0, std::abs(x0));
        p->value(i, j) = x0 + h;
        const double fp = loss_value();
        p->value(i, j) = x0 - h;
        const double fm = loss_value();
        p->value(i, j) = x0;
        const double fd = (fp - fm) / (2 * h);
        EXPECT_LT(rel_err(p->grad(i, j), fd), tol)
            << p->name << "(" << i << "," << j << ") analytic=" << p->grad(i, j)
            << " fd=" << fd;
      }
    }
  }
}

Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = d(rng);
  return m;
}

TEST(Tape, ElementwiseAndLinearOps) {
  std::mt19937_64 rng(1);
  Param A(3, 4, "A"), B(4, 5, "B"), bias(3, 1, "bias");
  A.value = random_mat(3, 4, rng);
  B.value = random_mat(4, 5, rng);
  bias.value = random_mat(3, 1, rng);
  Mat C = random_mat(3, 5, rng);

  auto build = [&](Tape& t) {
    Var ab = matmul(t.leaf(A), t.leaf(B));
    Var withb = add_bias(ab, t.leaf(bias));
    Var mixed = cmul(vtanh(withb), vsigmoid(sub(withb, t.constant(C))));
    Var more = add(scale(mixed, 0.7), add_scalar(vrelu(withb), 0.3));
    return mean_all(more);
  };
  auto value = [&]() {
    Tape t(false);
    return build(t).val()(0, 0);
  };
  grad_check({&A, &B, &bias}, value, build);
}

TEST(Tape, ReductionsStructuralAndNorms) {
  std::mt19937_64 rng(2);
  Param A(4, 6, "A"), B(3, 6, "B");
  A.value = random_mat(4, 6, rng);
  B.value = random_mat(3, 6, rng);

  auto build = [&](Tape& t) {
    Var cat = concat_rows(t.leaf(A), t.leaf(B));
    Var sl = slice_rows(cat, 2, 4);
    Var g = gather_cols(sl, {5, 0, 2, 2});
    Var normed = unit_normalize_cols(g);
    Var sq = cmul(normed, normed);
    Var rows = sum_rows(add_scalar(sq, 0.1));
    return sum_all(vsqrt(rows));
  };
  auto value = [&]() {
    Tape t(false);
    return build(t).val()(0, 0);
  };
  grad_check({&A, &B}, value, build);
}

TEST(Tape, MatmulT1AndVmax) {
  std::mt19937_64 rng(3);
  Param A(4, 3, "A"), B(4, 5, "B"), C(3, 5, "C");
  A.value = random_mat(4, 3, rng);
  B.value = random_mat(4, 5, rng);
  C.value = random_mat(3, 5, rng);
  auto build = [&](Tape& t) {
    Var u = matmul_t1(t.leaf(A), t.leaf(B));  // [3 x 5]
    return mean_all(vmax(u, t.leaf(C)));
  };
  auto value = [&]() {
    Tape t(false);
    return build(t).val()(0, 0);
  };
  grad_check({&A, &B, &C}, value, build);
}

TEST(Tape, SoftmaxCrossEntropyMasked) {
  std::mt19937_64 rng(4);
  Param W(7, 5, "W");
  W.value = random_mat(7, 5, rng);
  Mat X = random_mat(5, 6, rng);
  std::vector<int> targets = {0, 3, 6, 2, 1, 4};
  std::vector<unsigned char> mask = {1, 1, 0, 1, 1, 1};

  auto build = [&](Tape& t) {
    Var logits = matmul(t.leaf(W), t.constant(X));
    return scale(softmax_xent_sum(logits, targets, mask), 0.2);
  };
  auto value = [&]() {
    Tape t(false);
    return build(t).val()(0, 0);
  };
  grad_check({&W}, value, build);
}

TEST(Tape, EmbeddingGatherTimeAndLstm) {
  std::mt19937_64 rng(5);
  Embedding emb(4, 9, "emb", rng);
  LstmCell cell(4, 3, "cell", rng);
  Linear out(3, 5, "out", rng);
  std::vector<std::vector<int>> steps = {{1, 4, 7}, {2, 5, 8}, {3, 6, 0}};
  std::vector<int> last = {2, 0, 1};
  std::vector<int> targets = {1, 3, 0};
  std::vector<unsigned char> mask = {1, 1, 1};

  auto build = [&](Tape& t) {
    std::vector<Var> inputs;
    for (auto& ids : steps) inputs.push_back(emb.lookup(t, ids));
    auto hs = run_lstm(cell, t, inputs);
    Var h = gather_time(hs, last);
    return scale(softmax_xent_sum(out(t, h), targets, mask), 1.0 / 3.0);
  };
  auto value = [&]() {
    Tape t(false);
    return build(t).val()(0, 0);
  };
  std::vector<Param*> params;
  emb.collect(params);
  cell.collect(params);
  out.collect(params);
  grad_check(params, value, build);
}

TEST(Tape, Conv1dMaxOverTime) {
  std::mt19937_64 rng(6);
  Embedding emb(3, 8, "emb", rng);
  Conv1d conv1(3, 4, 3, 1, "c1", rng);
  Conv1d conv2(4, 5, 3, 2, "c2", rng);
  Linear proj(5, 2, "proj", rng);
  std::vector<std::vector<int>> steps = {{1, 2}, {3, 4}, {5, 6}, {7, 1}, {2, 3},
                                         {4, 5}, {6, 7}};

  auto build = [&](Tape& t) {
    std::vector<Var> seq;
    for (auto& ids : steps) seq.push_back(emb.lookup(t, ids));
    auto a = conv1(t, seq);
    for (auto& v : a) v = vrelu(v);
    auto b = conv2(t, a);
    for (auto& v : b) v = vrelu(v);
    Var pooled = max_over_time(b);
    return mean_all(unit_normalize_cols(proj(t, pooled)));
  };
  auto value = [&]() {
    Tape t(false);
    return build(t).val()(0, 0);
  };
  std::vector<Param*> params;
  emb.collect(params);
  conv1.collect(params);
  conv2.collect(params);
  proj.collect(params);
  grad_check(params, value, build);
}

// The closed-form critic input-gradient must match finite differences of the
// critic output, and backprop through the penalty graph must match finite
// differences of the penalty w.r.t. the critic parameters.
TEST(Tape, GradientPenaltyClosedForm) {
  std::mt19937_64 rng(7);
  Mlp critic(4, {6, 5}, 1, Activation::tanh_act, "critic", rng);
  Mat v = random_mat(4, 3, rng);

  auto critic_value = [&](const Mat& x) {
    Tape t(false);
    return critic(t, t.constant(x)).val();  // [1 x B]
  };

  // Closed-form u from the same construction the penalty uses.
  Tape t0(false);
  std::vector<Var> acts;
  Var x = t0.constant(v);
  for (std::size_t i = 0; i + 1 < critic.layers.size(); ++i) {
    x = vtanh(critic.layers[i](t0, x));
    acts.push_back(x);
  }
  Var ones_row = t0.constant(Mat::Ones(1, v.cols()));
  Var u = matmul_t1(t0.leaf(critic.layers.back().W), ones_row);
  for (std::size_t i = critic.layers.size() - 1; i-- > 0;) {
    Var a = acts[i];
    Var d = sub(t0.constant(Mat::Ones(a.rows(), a.cols())), cmul(a, a));
    u = matmul_t1(t0.leaf(critic.layers[i].W), cmul(d, u));
  }
  Mat analytic = u.val();
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      Mat vp = v, vm = v;
      const double h = 1e-6;
      vp(i, j) += h;
      vm(i, j) -= h;
      double fd = (critic_value(vp)(0, j) - critic_value(vm)(0, j)) / (2 * h);
      EXPECT_LT(rel_err(analytic(i, j), fd), 1e-6);
    }
  }

  // Parameter gradients of the penalty itself.
  auto build = [&](Tape& t) {
    std::vector<Var> acts2;
    Var xx = t.constant(v);
    for (std::size_t i = 0; i + 1 < critic.layers.size(); ++i) {
      xx = vtanh(critic.layers[i](t, xx));
      acts2.push_back(xx);
    }
    Var ones = t.constant(Mat::Ones(1, v.cols()));
    Var uu = matmul_t1(t.leaf(critic.layers.back().W), ones);
    for (std::size_t i = critic.layers.size() - 1; i-- > 0;) {
      Var a = acts2[i];
      Var d = sub(t.constant(Mat::Ones(a.rows(), a.cols())), cmul(a, a));
      uu = matmul_t1(t.leaf(critic.layers[i].W), cmul(d, uu));
    }
    Var norms = vsqrt(sum_rows(cmul(uu, uu)));
    Var shifted = add_scalar(norms, -1.0);
    return mean_all(cmul(shifted, shifted));
  };
  auto value = [&]() {
    Tape t(false);
    return build(t).val()(0, 0);
  };
  std::vector<Param*> params;
  critic.collect(params);
  grad_check(params, value, build, 1e-5);
}

TEST(Tape, LeafDedupAccumulatesSharedUse) {
  Param W(2, 2, "W");
  W.value << 1.0, 2.0, 3.0, 4.0;
  Tape t;
  Var a = t.leaf(W);
  Var b = t.leaf(W);
  EXPECT_EQ(a.idx, b.idx);
  Var loss = sum_all(add(a, b));  // d/dW = 2
  W.zero_grad();
  t.backward(loss);
  EXPECT_TRUE(W.grad.isApproxToConstant(2.0));
}

TEST(Optim, AdamZeroGradLeavesParamsBitIdentical) {
  Param W(3, 3, "W");
  std::mt19937_64 rng(8);
  W.value = random_mat(3, 3, rng);
  Mat before = W.value;
  W.zero_grad();
  Adam adam;
  adam.step({&W}, 1e-3);
  EXPECT_TRUE((W.value.array() == before.array()).all());
}

TEST(Optim, ClipGlobalNormScalesDown) {
  Param a(2, 1, "a"), b(2, 1, "b");
  a.grad << 3.0, 0.0;
  b.grad << 0.0, 4.0;
  clip_global_norm({&a, &b}, 1.0);
  double n = std::sqrt(a.grad.squaredNorm() + b.grad.squaredNorm());
  EXPECT_NEAR(n, 1.0, 1e-12);
  clip_global_norm({&a, &b}, 10.0);  // under the cap: untouched
  EXPECT_NEAR(std::sqrt(a.grad.squaredNorm() + b.grad.squaredNorm()), 1.0, 1e-12);
}

TEST(Tape, NoGradTapeEvaluates) {
  std::mt19937_64 rng(9);
  Param W(3, 3, "W");
  W.value = random_mat(3, 3, rng);
  Tape t(false);
  Var y = vtanh(matmul(t.leaf(W), t.constant(random_mat(3, 2, rng))));
  EXPECT_EQ(y.rows(), 3);
  EXPECT_EQ(y.cols(), 2);
  EXPECT_THROW(t.backward(mean_all(y)), std::runtime_error);
}

}  // namespace
