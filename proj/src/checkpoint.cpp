#include "routeq/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace routeq {

namespace {

constexpr char kMagic[8] = {'R', 'Q', 'C', 'K', 'P', 'T', '0', '1'};

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_matrix_entry(std::ostream& out, const std::string& name,
                        const ad::Matrix& m) {
  write_string(out, name);
  write_u64(out, static_cast<std::uint64_t>(m.rows()));
  write_u64(out, static_cast<std::uint64_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string read_string(std::istream& in) {
  const std::uint32_t len = read_u32(in);
  if (len > (1u << 20)) throw std::runtime_error("checkpoint: implausible name length");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

ad::Matrix read_matrix(std::istream& in) {
  const std::uint64_t rows = read_u64(in);
  const std::uint64_t cols = read_u64(in);
  if (rows > (1u << 24) || cols > (1u << 24))
    throw std::runtime_error("checkpoint: implausible matrix shape");
  ad::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const ad::ParamStore& params,
                     const ad::StatStore& stats, const ad::AdamState* adam) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));

  const std::uint32_t sections = adam ? 4 : 2;
  write_u32(out, sections);

  write_string(out, "params");
  write_u64(out, params.size());
  for (const auto& [name, tensor] : params) write_matrix_entry(out, name, tensor.value);

  if (adam) {
    write_string(out, "adam_m");
    write_u64(out, adam->moments.size());
    for (const auto& [name, mv] : adam->moments) write_matrix_entry(out, name, mv.first);
    write_string(out, "adam_v");
    write_u64(out, adam->moments.size());
    for (const auto& [name, mv] : adam->moments) write_matrix_entry(out, name, mv.second);
  }

  write_string(out, "stats");
  write_u64(out, stats.size() * 2);
  for (const auto& [name, bn] : stats) {
    write_matrix_entry(out, name + ".mean", bn.mean);
    write_matrix_entry(out, name + ".var", bn.var);
  }

  write_u64(out, adam ? static_cast<std::uint64_t>(adam->t) : 0);
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");

  Checkpoint ckpt;
  const std::uint32_t sections = read_u32(in);
  for (std::uint32_t s = 0; s < sections; ++s) {
    const std::string section = read_string(in);
    const std::uint64_t entries = read_u64(in);
    for (std::uint64_t e = 0; e < entries; ++e) {
      std::string name = read_string(in);
      ad::Matrix m = read_matrix(in);
      if (section == "params") {
        ckpt.params.add(name, std::move(m));
      } else if (section == "adam_m") {
        ckpt.adam.moments[name].first = std::move(m);
        ckpt.has_adam = true;
      } else if (section == "adam_v") {
        ckpt.adam.moments[name].second = std::move(m);
        ckpt.has_adam = true;
      } else if (section == "stats") {
        if (name.size() > 5 && name.ends_with(".mean"))
          ckpt.stats[name.substr(0, name.size() - 5)].mean = std::move(m);
        else if (name.size() > 4 && name.ends_with(".var"))
          ckpt.stats[name.substr(0, name.size() - 4)].var = std::move(m);
        else
          throw std::runtime_error("load_checkpoint: malformed stats entry " + name);
      } else {
        throw std::runtime_error("load_checkpoint: unknown section " + section);
      }
    }
  }
  ckpt.adam.t = static_cast<long>(read_u64(in));
  return ckpt;
}

}  // namespace routeq
