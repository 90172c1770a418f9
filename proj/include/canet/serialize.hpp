#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "canet/gradcheck.hpp"
#include "canet/tensor.hpp"

// Binary formats, all integers little-endian.
//
//   tensor:      "T32\0" | u8 rank | rank x u32 dims | float32 payload
//   weight file: "CANW" | u32 version | u32 count | count x (u16 name length | UTF-8 name | tensor)
namespace canet::io {

inline constexpr std::uint32_t kWeightFileVersion = 1;

void write_tensor(std::ostream& out, const Tensor<float>& tensor);
Tensor<float> read_tensor(std::istream& in);

void write_weights(std::ostream& out, std::span<const NamedTensor<float>> tensors);
std::vector<NamedTensor<float>> read_weights(std::istream& in);

void save_weights(const std::filesystem::path& path, std::span<const NamedTensor<float>> tensors);
std::vector<NamedTensor<float>> load_weights(const std::filesystem::path& path);

// Little-endian primitives shared with the dataset format.
void put_u8(std::ostream& out, std::uint8_t v);
void put_u16(std::ostream& out, std::uint16_t v);
void put_u32(std::ostream& out, std::uint32_t v);
void put_f32(std::ostream& out, float v);
std::uint8_t get_u8(std::istream& in);
std::uint16_t get_u16(std::istream& in);
std::uint32_t get_u32(std::istream& in);
float get_f32(std::istream& in);
void get_bytes(std::istream& in, std::span<char> dst, const char* what);

}  // namespace canet::io
