#include "ebmcal/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace ebmcal {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put(std::ostream& os, T v) {
  std::array<unsigned char, sizeof(T)> b{};
  std::memcpy(b.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  os.write(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

template <class T>
bool get(std::istream& is, T& v) {
  std::array<unsigned char, sizeof(T)> b{};
  if (!is.read(reinterpret_cast<char*>(b.data()), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  std::memcpy(&v, b.data(), sizeof(T));
  return true;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  os.write("EBMC", 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(os, d);
    for (double v : t.data()) put<double>(os, v);
  }
  if (!os) throw CheckpointError("write failed for " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "EBMC", 4) != 0) {
    throw CheckpointError(path.string() + ": not an EBMC checkpoint");
  }
  std::uint32_t version = 0;
  if (!get(is, version)) throw CheckpointError(path.string() + ": truncated header");
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported version " + std::to_string(version));
  }
  std::vector<NamedTensor> out;
  std::uint32_t name_len = 0;
  while (get(is, name_len)) {
    std::string name(name_len, '\0');
    std::uint32_t rank = 0;
    if (!is.read(name.data(), name_len) || !get(is, rank)) {
      throw CheckpointError(path.string() + ": truncated record after " + std::to_string(out.size()) + " tensors");
    }
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t v = 0;
      if (!get(is, v)) throw CheckpointError(path.string() + ": truncated dims for " + name);
      d = static_cast<std::size_t>(v);
    }
    std::vector<double> data(numel(shape));
    for (auto& v : data) {
      if (!get(is, v)) throw CheckpointError(path.string() + ": truncated data for " + name);
    }
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return out;
}

void restore_into(const std::vector<NamedTensor>& saved, std::vector<NamedTensor>& dest) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : saved) by_name[nt.name] = &nt.tensor;
  for (auto& [name, t] : dest) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint is missing tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw CheckpointError("tensor " + name + " has shape " + shape_str(it->second->shape()) + ", expected " +
                            shape_str(t.shape()));
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), t.mutable_data().begin());
  }
}

}  // namespace ebmcal
