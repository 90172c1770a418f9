#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

// GZDS sample container. All integers little-endian, images row-major.
//
//   header: "GZDS" | u32 version | u32 sample count | u32 face H | u32 face W |
//           u32 face C | u32 eye H | u32 eye W | u16 subject count
//   record: face (H*W*C u8) | left eye (h*w u8) | right eye (h*w u8) |
//           3 x f32 gaze | u16 subject id | u32 sample id
namespace canet::data {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kHeaderBytes = 34;

struct Geometry {
  std::uint32_t face_height = 56;
  std::uint32_t face_width = 56;
  std::uint32_t face_channels = 3;
  std::uint32_t eye_height = 18;
  std::uint32_t eye_width = 30;

  std::size_t face_bytes() const { return std::size_t{face_height} * face_width * face_channels; }
  std::size_t eye_bytes() const { return std::size_t{eye_height} * eye_width; }
  std::size_t record_bytes() const { return face_bytes() + 2 * eye_bytes() + 3 * 4 + 2 + 4; }
  std::string describe() const;

  bool operator==(const Geometry&) const = default;
};

struct SampleRecord {
  std::vector<std::uint8_t> face;
  std::vector<std::uint8_t> left_eye;
  std::vector<std::uint8_t> right_eye;
  std::array<float, 3> gaze{0.0f, 0.0f, -1.0f};
  std::uint16_t subject_id = 0;
  std::uint32_t sample_id = 0;

  bool operator==(const SampleRecord&) const = default;
};

class Dataset {
 public:
  explicit Dataset(Geometry geometry);

  /// Throws ShapeError when image sizes disagree with the geometry and
  /// NumericError when the gaze is not unit length (+-1e-4).
  void append(SampleRecord record);

  const Geometry& geometry() const { return geometry_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const SampleRecord& operator[](std::size_t i) const { return records_[i]; }
  const std::vector<SampleRecord>& records() const { return records_; }
  /// Distinct subject ids, ascending.
  std::vector<std::uint16_t> subjects() const;

 private:
  Geometry geometry_;
  std::vector<SampleRecord> records_;
};

std::string encode_dataset(const Dataset& dataset);
/// Throws FormatError on bad magic, version, truncation (naming expected and
/// actual byte counts), trailing bytes, or records that violate invariants.
Dataset decode_dataset(std::string_view bytes);

void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// Ordered subset of a dataset; holds a pointer, so the dataset must outlive it.
class DatasetView {
 public:
  DatasetView() = default;
  DatasetView(const Dataset& dataset, std::vector<std::size_t> indices);
  static DatasetView all(const Dataset& dataset);

  std::size_t size() const { return indices_.size(); }
  bool empty() const { return indices_.empty(); }
  const SampleRecord& operator[](std::size_t i) const { return (*dataset_)[indices_[i]]; }
  const std::vector<std::size_t>& indices() const { return indices_; }
  const Geometry& geometry() const { return dataset_->geometry(); }
  const Dataset& dataset() const { return *dataset_; }

 private:
  const Dataset* dataset_ = nullptr;
  std::vector<std::size_t> indices_;
};

/// (train, test): test holds exactly the held-out subject's samples, in file
/// order. Throws ConfigError for an empty dataset or unknown subject.
std::pair<DatasetView, DatasetView> split_leave_one_subject_out(const Dataset& dataset, std::uint16_t held_out);

// ---------------------------------------------------------------------------
// Procedural generator
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::uint16_t subjects = 6;
  std::uint32_t samples_per_subject = 300;
  double pitch_range_deg = 20.0;  // labels uniform in [-range, range]
  double yaw_range_deg = 20.0;
  double noise = 0.0;  // Gaussian pixel noise, std as a fraction of 255
  std::uint64_t seed = 0;
  Geometry geometry{};
  // Per-subject appearance is drawn uniformly from these ranges.
  double iris_radius_min = 0.30;  // fraction of eye half-width
  double iris_radius_max = 0.36;
  double sclera_min = 0.80;       // brightness in [0, 1]
  double sclera_max = 0.95;
  double aperture_min = 0.75;     // eyelid opening relative to a full ellipse
  double aperture_max = 1.00;

  void validate() const;
};

struct SubjectAppearance {
  double iris_radius;
  double iris_brightness;
  double sclera;
  double aperture_left;
  double aperture_right;
  double eye_skin;
  std::array<double, 3> skin_rgb;
  std::array<double, 3> background_rgb;
  double texture_amplitude;
  double texture_frequency;
  double texture_phase;
};

SubjectAppearance subject_appearance(const SynthConfig& config, std::uint16_t subject);

/// Renders one record for a given label. Generation calls this with the
/// float32 gaze it stores, so re-rendering a stored record reproduces it
/// exactly (noise included, since noise is seeded by subject and sample id).
SampleRecord render_sample(const SynthConfig& config, std::uint16_t subject, std::uint32_t sample_id,
                           const std::array<float, 3>& gaze);

Dataset synth_generate(const SynthConfig& config);

}  // namespace canet::data
