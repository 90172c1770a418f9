#include "canet/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "canet/error.hpp"
#include "canet/serialize.hpp"

namespace canet::data {

namespace {
constexpr std::array<char, 4> kMagic{'G', 'Z', 'D', 'S'};

void check_record(const Geometry& g, const SampleRecord& r) {
  if (r.face.size() != g.face_bytes() || r.left_eye.size() != g.eye_bytes() || r.right_eye.size() != g.eye_bytes()) {
    throw ShapeError("record " + std::to_string(r.sample_id) + " image sizes (" + std::to_string(r.face.size()) + ", " +
                     std::to_string(r.left_eye.size()) + ", " + std::to_string(r.right_eye.size()) +
                     " bytes) do not match dataset geometry " + g.describe());
  }
  const double n = std::sqrt(double(r.gaze[0]) * r.gaze[0] + double(r.gaze[1]) * r.gaze[1] +
                             double(r.gaze[2]) * r.gaze[2]);
  if (!(std::abs(n - 1.0) <= 1e-4)) {
    throw NumericError("record " + std::to_string(r.sample_id) + " gaze norm " + std::to_string(n) + " is not 1");
  }
}
}  // namespace

std::string Geometry::describe() const {
  std::ostringstream s;
  s << "face " << face_height << "x" << face_width << "x" << face_channels << ", eyes " << eye_height << "x" << eye_width;
  return s.str();
}

Dataset::Dataset(Geometry geometry) : geometry_(geometry) {
  if (geometry_.face_height == 0 || geometry_.face_width == 0 || geometry_.face_channels == 0 ||
      geometry_.eye_height == 0 || geometry_.eye_width == 0) {
    throw ShapeError("dataset geometry must be positive, got " + geometry_.describe());
  }
}

void Dataset::append(SampleRecord record) {
  check_record(geometry_, record);
  records_.push_back(std::move(record));
}

std::vector<std::uint16_t> Dataset::subjects() const {
  std::set<std::uint16_t> ids;
  for (const auto& r : records_) ids.insert(r.subject_id);
  return {ids.begin(), ids.end()};
}

std::string encode_dataset(const Dataset& dataset) {
  std::ostringstream out(std::ios::binary);
  const auto& g = dataset.geometry();
  out.write(kMagic.data(), 4);
  io::put_u32(out, kDatasetVersion);
  io::put_u32(out, static_cast<std::uint32_t>(dataset.size()));
  io::put_u32(out, g.face_height);
  io::put_u32(out, g.face_width);
  io::put_u32(out, g.face_channels);
  io::put_u32(out, g.eye_height);
  io::put_u32(out, g.eye_width);
  io::put_u16(out, static_cast<std::uint16_t>(dataset.subjects().size()));
  for (const auto& r : dataset.records()) {
    out.write(reinterpret_cast<const char*>(r.face.data()), static_cast<std::streamsize>(r.face.size()));
    out.write(reinterpret_cast<const char*>(r.left_eye.data()), static_cast<std::streamsize>(r.left_eye.size()));
    out.write(reinterpret_cast<const char*>(r.right_eye.data()), static_cast<std::streamsize>(r.right_eye.size()));
    for (float v : r.gaze) io::put_f32(out, v);
    io::put_u16(out, r.subject_id);
    io::put_u32(out, r.sample_id);
  }
  return out.str();
}

Dataset decode_dataset(std::string_view bytes) {
  if (bytes.size() < kHeaderBytes) {
    throw FormatError("truncated dataset header: expected " + std::to_string(kHeaderBytes) + " bytes, got " +
                      std::to_string(bytes.size()));
  }
  std::istringstream in(std::string(bytes), std::ios::binary);
  std::array<char, 4> magic{};
  io::get_bytes(in, magic, "dataset magic");
  if (magic != kMagic) throw FormatError("bad dataset magic (expected GZDS)");
  const auto version = io::get_u32(in);
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  const auto count = io::get_u32(in);
  Geometry g;
  g.face_height = io::get_u32(in);
  g.face_width = io::get_u32(in);
  g.face_channels = io::get_u32(in);
  g.eye_height = io::get_u32(in);
  g.eye_width = io::get_u32(in);
  const auto subject_count = io::get_u16(in);

  Dataset dataset(g);
  const std::size_t expected = kHeaderBytes + std::size_t{count} * g.record_bytes();
  if (bytes.size() < expected) {
    throw FormatError("truncated dataset: expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw FormatError("dataset has " + std::to_string(bytes.size() - expected) + " trailing bytes after " +
                      std::to_string(count) + " records");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    SampleRecord r;
    r.face.resize(g.face_bytes());
    r.left_eye.resize(g.eye_bytes());
    r.right_eye.resize(g.eye_bytes());
    io::get_bytes(in, {reinterpret_cast<char*>(r.face.data()), r.face.size()}, "face image");
    io::get_bytes(in, {reinterpret_cast<char*>(r.left_eye.data()), r.left_eye.size()}, "left eye image");
    io::get_bytes(in, {reinterpret_cast<char*>(r.right_eye.data()), r.right_eye.size()}, "right eye image");
    for (auto& v : r.gaze) v = io::get_f32(in);
    r.subject_id = io::get_u16(in);
    r.sample_id = io::get_u32(in);
    try {
      dataset.append(std::move(r));
    } catch (const Error& e) {
      throw FormatError(std::string("invalid record ") + std::to_string(i) + ": " + e.what());
    }
  }
  if (dataset.subjects().size() != subject_count) {
    throw FormatError("header declares " + std::to_string(subject_count) + " subjects but records contain " +
                      std::to_string(dataset.subjects().size()));
  }
  return dataset;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  const auto bytes = encode_dataset(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_dataset(bytes);
}

DatasetView::DatasetView(const Dataset& dataset, std::vector<std::size_t> indices)
    : dataset_(&dataset), indices_(std::move(indices)) {
  for (auto i : indices_) {
    if (i >= dataset.size()) throw ShapeError("dataset view index " + std::to_string(i) + " out of range");
  }
}

DatasetView DatasetView::all(const Dataset& dataset) {
  std::vector<std::size_t> idx(dataset.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return DatasetView(dataset, std::move(idx));
}

std::pair<DatasetView, DatasetView> split_leave_one_subject_out(const Dataset& dataset, std::uint16_t held_out) {
  if (dataset.empty()) throw ConfigError("cannot split an empty dataset");
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    (dataset[i].subject_id == held_out ? test : train).push_back(i);
  }
  if (test.empty()) throw ConfigError("subject " + std::to_string(held_out) + " is not in the dataset");
  return {DatasetView(dataset, std::move(train)), DatasetView(dataset, std::move(test))};
}

}  // namespace canet::data
