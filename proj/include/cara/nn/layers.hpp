#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cara/nn/tensor.hpp"

namespace cara::nn {

inline void init_uniform(Param& p, double limit, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(-limit, limit);
  for (Eigen::Index j = 0; j < p.value.cols(); ++j)
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = d(rng);
}

// Glorot-style fan-based init.
inline void init_xavier(Param& p, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
  init_uniform(p, limit, rng);
}

struct Embedding {
  Param table;  // [dim x vocab]

  Embedding() = default;
  Embedding(int dim, int vocab, const std::string& name, std::mt19937_64& rng)
      : table(dim, vocab, name + ".table") {
    init_uniform(table, 0.1, rng);
  }

  Var lookup(Tape& t, const std::vector<int>& ids) { return embed(t, table, ids); }

  void collect(std::vector<Param*>& out) { out.push_back(&table); }
};

struct Linear {
  Param W;  // [out x in]
  Param b;  // [out x 1]

  Linear() = default;
  Linear(int in, int out, const std::string& name, std::mt19937_64& rng)
      : W(out, in, name + ".W"), b(out, 1, name + ".b") {
    init_xavier(W, rng);
  }

  Var operator()(Tape& t, Var x) { return add_bias(matmul(t.leaf(W), x), t.leaf(b)); }

  void collect(std::vector<Param*>& out) {
    out.push_back(&W);
    out.push_back(&b);
  }
};

enum class Activation { tanh_act, relu_act };

inline Var activate(Var x, Activation a) {
  return a == Activation::tanh_act ? vtanh(x) : vrelu(x);
}

// Fully connected stack; hidden layers activated, final layer linear.
struct Mlp {
  std::vector<Linear> layers;
  Activation act = Activation::tanh_act;

  Mlp() = default;
  Mlp(int in, const std::vector<int>& hidden, int out, Activation a,
      const std::string& name, std::mt19937_64& rng)
      : act(a) {
    int prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layers.emplace_back(prev, hidden[i], name + ".h" + std::to_string(i), rng);
      prev = hidden[i];
    }
    layers.emplace_back(prev, out, name + ".out", rng);
  }

  Var operator()(Tape& t, Var x) {
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) x = activate(layers[i](t, x), act);
    return layers.back()(t, x);
  }

  void collect(std::vector<Param*>& out) {
    for (auto& l : layers) l.collect(out);
  }
};

// Single LSTM cell; gate order in the stacked weight rows is i, f, g, o.
struct LstmCell {
  Param Wx;  // [4H x in]
  Param Wh;  // [4H x H]
  Param b;   // [4H x 1]
  int hidden = 0;

  LstmCell() = default;
  LstmCell(int in, int h, const std::string& name, std::mt19937_64& rng)
      : Wx(4 * h, in, name + ".Wx"), Wh(4 * h, h, name + ".Wh"), b(4 * h, 1, name + ".b"),
        hidden(h) {
    init_xavier(Wx, rng);
    init_xavier(Wh, rng);
    // Forget-gate bias starts at 1 so memory persists early in training.
    b.value.middleRows(h, h).setOnes();
  }

  struct State {
    Var h, c;
  };

  State initial(Tape& t, Eigen::Index batch) const {
    Var h = t.constant(Mat::Zero(hidden, batch));
    Var c = t.constant(Mat::Zero(hidden, batch));
    return {h, c};
  }

  State step(Tape& t, Var x, const State& s) {
    Var z = add_bias(add(matmul(t.leaf(Wx), x), matmul(t.leaf(Wh), s.h)), t.leaf(b));
    Var i = vsigmoid(slice_rows(z, 0, hidden));
    Var f = vsigmoid(slice_rows(z, hidden, hidden));
    Var g = vtanh(slice_rows(z, 2 * hidden, hidden));
    Var o = vsigmoid(slice_rows(z, 3 * hidden, hidden));
    Var c = add(cmul(f, s.c), cmul(i, g));
    Var h = cmul(o, vtanh(c));
    return {h, c};
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&Wx);
    out.push_back(&Wh);
    out.push_back(&b);
  }
};

// Runs an LSTM over a sequence of [in x B] inputs; returns hidden states.
inline std::vector<Var> run_lstm(LstmCell& cell, Tape& t, const std::vector<Var>& inputs) {
  if (inputs.empty()) throw std::runtime_error("run_lstm: empty input sequence");
  auto s = cell.initial(t, inputs[0].cols());
  std::vector<Var> hs;
  hs.reserve(inputs.size());
  for (const Var& x : inputs) {
    s = cell.step(t, x, s);
    hs.push_back(s.h);
  }
  return hs;
}

// One 1-D convolution layer over a token-major sequence of [C_in x B] slices.
struct Conv1d {
  Param W;  // [C_out x k*C_in]
  Param b;  // [C_out x 1]
  int kernel = 3;
  int stride = 1;

  Conv1d() = default;
  Conv1d(int in_ch, int out_ch, int k, int s, const std::string& name, std::mt19937_64& rng)
      : W(out_ch, k * in_ch, name + ".W"), b(out_ch, 1, name + ".b"), kernel(k), stride(s) {
    init_xavier(W, rng);
  }

  // Number of output positions for a given input length.
  int out_len(int in_len) const {
    if (in_len < kernel) return 0;
    return (in_len - kernel) / stride + 1;
  }

  std::vector<Var> operator()(Tape& t, const std::vector<Var>& seq) {
    const int n = out_len(static_cast<int>(seq.size()));
    if (n <= 0) throw std::runtime_error("Conv1d: sequence shorter than kernel");
    std::vector<Var> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int p = 0; p < n; ++p) {
      std::vector<Var> window;
      window.reserve(static_cast<std::size_t>(kernel));
      for (int k = 0; k < kernel; ++k)
        window.push_back(seq[static_cast<std::size_t>(p * stride + k)]);
      out.push_back(add_bias(matmul(t.leaf(W), concat_rows(window)), t.leaf(b)));
    }
    return out;
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&W);
    out.push_back(&b);
  }
};

// Elementwise max over the time axis.
inline Var max_over_time(const std::vector<Var>& seq) {
  if (seq.empty()) throw std::runtime_error("max_over_time: empty sequence");
  Var acc = seq[0];
  for (std::size_t i = 1; i < seq.size(); ++i) acc = vmax(acc, seq[i]);
  return acc;
}

}  // namespace cara::nn
