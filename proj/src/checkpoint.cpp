// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "physformer/harness.hpp"

namespace physformer {

static_assert(std::endian::native == std::endian::little, "checkpoints are written in host byte order");

namespace {

constexpr char kMagic[4] = {'P', 'H', 'Y', 'F'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("truncated checkpoint " + path.string());
  return v;
}

}  // namespace

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  // Write to a sibling file and rename so an interrupted save never leaves a
  // truncated checkpoint behind.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw std::invalid_argument("tensor name too long");
      put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
      for (std::size_t d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
      os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

NamedTensors load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint (bad magic): " + path.string());
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const auto count = get<std::uint32_t>(is, path);
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint16_t>(is, path), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size())))
      throw std::runtime_error("truncated checkpoint " + path.string());
    Shape shape(get<std::uint8_t>(is, path));
    for (auto& d : shape) d = get<std::uint32_t>(is, path);
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double))))
      throw std::runtime_error("truncated checkpoint " + path.string());
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

namespace {

// Architecture as a flat real vector so checkpoints are self-describing.
Tensor encode_arch(const ArchConfig& a) {
  return Tensor({17}, {static_cast<double>(a.blocks), static_cast<double>(a.heads), static_cast<double>(a.dim),
                       static_cast<double>(a.ff_dim), a.theta, a.tau, static_cast<double>(a.tube[0]),
                       static_cast<double>(a.tube[1]), static_cast<double>(a.tube[2]), static_cast<double>(a.input[0]),
                       static_cast<double>(a.input[1]), static_cast<double>(a.input[2]), a.stem ? 1.0 : 0.0,
                       static_cast<double>(a.attention), static_cast<double>(a.feed_forward), 0.0, 0.0});
}

ArchConfig decode_arch(const Tensor& t) {
  if (t.numel() != 17) throw std::runtime_error("checkpoint meta.arch has " + std::to_string(t.numel()) + " entries");
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
  ArchConfig a;
  a.blocks = u(0);
  a.heads = u(1);
  a.dim = u(2);
  a.ff_dim = u(3);
  a.theta = t[4];
  a.tau = t[5];
  a.tube = {u(6), u(7), u(8)};
  a.input = {u(9), u(10), u(11)};
  a.stem = t[12] != 0.0;
  a.attention = static_cast<AttentionKind>(u(13));
  a.feed_forward = static_cast<FeedForwardKind>(u(14));
  return a;
}

Tensor encode_u64(std::uint64_t v) {
  return Tensor({2}, {static_cast<double>(v & 0xffffffffu), static_cast<double>(v >> 32)});
}

std::uint64_t decode_u64(const Tensor& t) {
  return static_cast<std::uint64_t>(t[0]) | (static_cast<std::uint64_t>(t[1]) << 32);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  NamedTensors out;
  out.emplace_back("meta.arch", encode_arch(c.arch));
  out.emplace_back("meta.epoch", Tensor::scalar(c.epoch));
  out.emplace_back("meta.rng", encode_u64(c.rng_seed));
  out.emplace_back("meta.adam_steps", encode_u64(static_cast<std::uint64_t>(c.adam_steps)));
  for (const auto& name : c.params.names()) out.emplace_back(name, c.params.value(name));
  for (const auto& [name, t] : c.adam_m) out.emplace_back("adam.m/" + name, t);
  for (const auto& [name, t] : c.adam_v) out.emplace_back("adam.v/" + name, t);
  save_tensors(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  NamedTensors all = load_tensors(path);
  std::map<std::string, Tensor> meta;
  std::map<std::string, Tensor> params;
  Checkpoint c;
  for (auto& [name, t] : all) {
    if (name.rfind("meta.", 0) == 0) meta.emplace(name, std::move(t));
    else if (name.rfind("adam.m/", 0) == 0) c.adam_m.emplace(name.substr(7), std::move(t));
    else if (name.rfind("adam.v/", 0) == 0) c.adam_v.emplace(name.substr(7), std::move(t));
    else params.emplace(name, std::move(t));
  }
  for (const char* key : {"meta.arch", "meta.epoch", "meta.rng", "meta.adam_steps"})
    if (!meta.count(key)) throw std::runtime_error(path.string() + ": checkpoint lacks " + key);
  c.arch = decode_arch(meta.at("meta.arch"));
  c.epoch = static_cast<int>(meta.at("meta.epoch").item());
  c.rng_seed = decode_u64(meta.at("meta.rng"));
  c.adam_steps = static_cast<std::int64_t>(decode_u64(meta.at("meta.adam_steps")));

  // Order and trainable flags follow a freshly built model.
  const PhysFormer reference(c.arch, 0);
  for (const auto& name : reference.params().names()) {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error(path.string() + ": checkpoint lacks parameter " + name);
    c.params.add(name, std::move(it->second), reference.params().trainable(name));
    params.erase(it);
  }
  if (!params.empty()) throw std::runtime_error(path.string() + ": unexpected tensor " + params.begin()->first);
  return c;
}

PhysFormer model_from_checkpoint(const Checkpoint& ckpt) { return PhysFormer(ckpt.arch, ckpt.params); }

}  // namespace physformer
