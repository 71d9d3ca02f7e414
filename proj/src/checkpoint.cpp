#include "magma/checkpoint.hpp"

#include "magma/binary_io.hpp"
#include "magma/error.hpp"

namespace magma {

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out = "MGWT";
  binio::put_u32(out, kCheckpointVersion);
  for (const auto& [name, value] : tensors) {
    binio::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    binio::put_u32(out, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t e : value.shape()) binio::put_u32(out, static_cast<std::uint32_t>(e));
    for (double v : value.data()) binio::put_f64(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::string& bytes) {
  binio::Reader r(bytes);
  if (!r.has(8) || r.take(4) != "MGWT") throw CheckpointError("not an MGWT checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  std::vector<NamedTensor> tensors;
  while (!r.at_end()) {
    if (!r.has(4)) throw CheckpointError("truncated checkpoint record header");
    const std::uint32_t name_len = r.u32();
    if (!r.has(name_len + 4)) throw CheckpointError("truncated checkpoint record name");
    std::string name(r.take(name_len));
    const std::uint32_t rank = r.u32();
    if (!r.has(4ull * rank)) throw CheckpointError("truncated extents for '" + name + "'");
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    const std::size_t n = numel(shape);
    if (rank == 0 || n == 0 || r.remaining() / 8 < n) throw CheckpointError("bad payload for '" + name + "'");
    std::vector<double> data(n);
    for (double& v : data) v = r.f64();
    tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  return tensors;
}

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  binio::write_file(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  return decode_checkpoint(binio::read_file(path));
}

}  // namespace magma
