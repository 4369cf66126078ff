#include "checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "common.hpp"

namespace mm {

namespace {
constexpr char kMagic[4] = {'M', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const NamedTensors& tensors, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  auto put = [&](const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out) throw DataError(path + ": write failed");
  };
  auto put_u32 = [&](std::uint32_t v) { put(&v, 4); };
  put(kMagic, 4);
  put_u32(kVersion);
  put_u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(static_cast<std::uint32_t>(name.size()));
    put(name.data(), name.size());
    put_u32(static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) put_u32(static_cast<std::uint32_t>(t.dim(d)));
    put(t.data(), t.numel() * 4);
  }
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  std::size_t offset = 0;
  auto get = [&](void* p, std::size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw DataError(path + ": truncated at offset " + std::to_string(offset));
    offset += n;
  };
  auto get_u32 = [&]() {
    std::uint32_t v;
    get(&v, 4);
    return v;
  };
  char magic[4];
  get(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw DataError(path + ": bad magic at offset 0 (not a checkpoint file)");
  std::uint32_t version = get_u32();
  if (version != kVersion)
    throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  std::uint32_t count = get_u32();
  NamedTensors tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = get_u32();
    if (name_len > 4096)
      throw DataError(path + ": implausible name length at offset " + std::to_string(offset));
    std::string name(name_len, '\0');
    get(name.data(), name_len);
    std::uint32_t rank = get_u32();
    if (rank > 8) throw DataError(path + ": implausible rank at offset " + std::to_string(offset));
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint32_t v = get_u32();
      if (v > (1u << 28))
        throw DataError(path + ": implausible dimension at offset " + std::to_string(offset));
      shape[d] = static_cast<int>(v);
      numel *= v;
    }
    Tensor t = Tensor::zeros(shape);
    get(t.data(), numel * 4);
    tensors.emplace_back(std::move(name), std::move(t));
  }
  return tensors;
}

const Tensor* find_tensor(const NamedTensors& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

}  // namespace mm
