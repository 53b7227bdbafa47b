#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cara/model.hpp"

namespace cara {

// Binary tensor archive. Parameters are written as raw little-endian doubles
// so a save/load round-trip is bit-exact.
namespace ckpt {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  std::uint64_t n = read_u64(in);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

inline void write_param(std::ostream& out, const nn::Param& p) {
  write_string(out, p.name);
  write_u64(out, static_cast<std::uint64_t>(p.value.rows()));
  write_u64(out, static_cast<std::uint64_t>(p.value.cols()));
  out.write(reinterpret_cast<const char*>(p.value.data()),
            static_cast<std::streamsize>(sizeof(double) * p.value.size()));
}

inline void read_param(std::istream& in, nn::Param& p) {
  std::string name = read_string(in);
  if (name != p.name)
    throw std::runtime_error("checkpoint: parameter order mismatch, expected " +
                             p.name + " got " + name);
  auto rows = static_cast<Eigen::Index>(read_u64(in));
  auto cols = static_cast<Eigen::Index>(read_u64(in));
  if (rows != p.value.rows() || cols != p.value.cols())
    throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
  in.read(reinterpret_cast<char*>(p.value.data()),
          static_cast<std::streamsize>(sizeof(double) * p.value.size()));
  if (!in) throw std::runtime_error("checkpoint: truncated tensor " + p.name);
}

inline void write_params(std::ostream& out, const std::vector<nn::Param*>& params) {
  write_u64(out, params.size());
  for (const nn::Param* p : params) write_param(out, *p);
}

inline void read_params(std::istream& in, const std::vector<nn::Param*>& params) {
  std::uint64_t n = read_u64(in);
  if (n != params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  for (nn::Param* p : params) read_param(in, *p);
}

inline void write_dims(std::ostream& out, const CaraDims& d) {
  write_u64(out, static_cast<std::uint64_t>(d.embedding_dim));
  write_u64(out, static_cast<std::uint64_t>(d.hidden_dim));
  write_u64(out, static_cast<std::uint64_t>(d.latent_dim));
  write_u64(out, static_cast<std::uint64_t>(d.context_dim));
  auto write_vec = [&](const std::vector<int>& v) {
    write_u64(out, v.size());
    for (int x : v) write_u64(out, static_cast<std::uint64_t>(x));
  };
  write_vec(d.conv_channels);
  write_vec(d.conv_kernels);
  write_vec(d.conv_strides);
  write_vec(d.mlp_hidden);
}

inline CaraDims read_dims(std::istream& in) {
  CaraDims d;
  d.embedding_dim = static_cast<int>(read_u64(in));
  d.hidden_dim = static_cast<int>(read_u64(in));
  d.latent_dim = static_cast<int>(read_u64(in));
  d.context_dim = static_cast<int>(read_u64(in));
  auto read_vec = [&]() {
    std::vector<int> v(read_u64(in));
    for (auto& x : v) x = static_cast<int>(read_u64(in));
    return v;
  };
  d.conv_channels = read_vec();
  d.conv_kernels = read_vec();
  d.conv_strides = read_vec();
  d.mlp_hidden = read_vec();
  return d;
}

}  // namespace ckpt

inline constexpr std::uint64_t kCaraMagic = 0x3143415241ull;  // "ARAC1"

inline void save_checkpoint(CaraModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
  ckpt::write_u64(out, kCaraMagic);
  ckpt::write_dims(out, model.dims);
  ckpt::write_u64(out, model.label_set.size());
  for (const auto& y : model.label_set) ckpt::write_string(out, y);
  ckpt::write_u64(out, model.pair_mode ? 1 : 0);
  ckpt::write_u64(out, static_cast<std::uint64_t>(model.vocab_size));
  ckpt::write_u64(out, model.vocab_hash);
  ckpt::write_params(out, model.all_params());
}

inline CaraModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  if (ckpt::read_u64(in) != kCaraMagic)
    throw std::runtime_error("load_checkpoint: not a model checkpoint: " + path);
  CaraDims dims = ckpt::read_dims(in);
  std::vector<std::string> labels(ckpt::read_u64(in));
  for (auto& y : labels) y = ckpt::read_string(in);
  bool pair_mode = ckpt::read_u64(in) != 0;
  int vocab_size = static_cast<int>(ckpt::read_u64(in));
  std::uint64_t vocab_hash = ckpt::read_u64(in);
  CaraModel model(dims, labels, pair_mode, vocab_size, vocab_hash, /*seed=*/0);
  ckpt::read_params(in, model.all_params());
  return model;
}

}  // namespace cara
