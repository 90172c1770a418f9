#include "canet/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "canet/error.hpp"

namespace canet::io {

namespace {
constexpr std::array<char, 4> kTensorMagic{'T', '3', '2', '\0'};
constexpr std::array<char, 4> kWeightMagic{'C', 'A', 'N', 'W'};
}  // namespace

void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b, 2);
}

void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void get_bytes(std::istream& in, std::span<char> dst, const char* what) {
  in.read(dst.data(), static_cast<std::streamsize>(dst.size()));
  if (static_cast<std::size_t>(in.gcount()) != dst.size()) {
    throw FormatError(std::string("truncated input while reading ") + what + ": expected " +
                      std::to_string(dst.size()) + " bytes, got " + std::to_string(in.gcount()));
  }
}

std::uint8_t get_u8(std::istream& in) {
  char b;
  get_bytes(in, {&b, 1}, "u8");
  return static_cast<std::uint8_t>(b);
}

std::uint16_t get_u16(std::istream& in) {
  unsigned char b[2];
  get_bytes(in, {reinterpret_cast<char*>(b), 2}, "u16");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  get_bytes(in, {reinterpret_cast<char*>(b), 4}, "u32");
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

float get_f32(std::istream& in) { return std::bit_cast<float>(get_u32(in)); }

void write_tensor(std::ostream& out, const Tensor<float>& tensor) {
  if (tensor.rank() > 255) throw ShapeError("tensor rank exceeds 255");
  out.write(kTensorMagic.data(), 4);
  put_u8(out, static_cast<std::uint8_t>(tensor.rank()));
  for (auto d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  for (float v : tensor.data()) put_f32(out, v);
}

Tensor<float> read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  get_bytes(in, magic, "tensor magic");
  if (magic != kTensorMagic) throw FormatError("bad tensor magic");
  const auto rank = get_u8(in);
  if (rank == 0) throw FormatError("tensor rank 0");
  Shape shape(rank);
  for (auto& d : shape) {
    d = get_u32(in);
    if (d == 0) throw FormatError("tensor dimension 0");
  }
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = get_f32(in);
  return Tensor<float>(std::move(shape), std::move(data));
}

void write_weights(std::ostream& out, std::span<const NamedTensor<float>> tensors) {
  out.write(kWeightMagic.data(), 4);
  put_u32(out, kWeightFileVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw FormatError("tensor name too long: " + t.name.substr(0, 64));
    put_u16(out, static_cast<std::uint16_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    write_tensor(out, t.tensor);
  }
}

std::vector<NamedTensor<float>> read_weights(std::istream& in) {
  std::array<char, 4> magic{};
  get_bytes(in, magic, "weight file magic");
  if (magic != kWeightMagic) throw FormatError("bad weight file magic");
  const auto version = get_u32(in);
  if (version != kWeightFileVersion) throw FormatError("unsupported weight file version " + std::to_string(version));
  const auto count = get_u32(in);
  std::vector<NamedTensor<float>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get_u16(in), '\0');
    get_bytes(in, name, "tensor name");
    tensors.push_back({std::move(name), read_tensor(in)});
  }
  return tensors;
}

void save_weights(const std::filesystem::path& path, std::span<const NamedTensor<float>> tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_weights(out, tensors);
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<NamedTensor<float>> load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_weights(in);
}

}  // namespace canet::io
