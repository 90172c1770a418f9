#include <algorithm>
#include <cmath>
#include <random>

#include "canet/dataset.hpp"
#include "canet/error.hpp"
#include "canet/geometry.hpp"
#include "canet/random.hpp"

namespace canet::data {

namespace {

constexpr int kSupersample = 4;
constexpr double kEyeAspect = 0.6;  // eye box height / width
constexpr double kOpening = 0.85;   // eyelid ellipse half-width in eye units
constexpr double kIrisTravelX = 1.3;
constexpr double kIrisTravelY = 1.6;

enum Stream : std::uint64_t { kAppearance = 0, kLabel = 1, kNoise = 2 };

// Eye-local coordinates: u, v in [-1, 1] span the eye box. Returns the gray
// level inside the eyelid opening, or a negative value for skin.
double eye_level(const SubjectAppearance& a, double aperture, double u, double v, double gx, double gy) {
  const double ou = u / kOpening, ov = v / (kOpening * aperture);
  if (ou * ou + ov * ov > 1.0) return -1.0;
  const double r_u = a.iris_radius, r_v = a.iris_radius / kEyeAspect;
  const double du = (u - kIrisTravelX * gx) / r_u, dv = (v - kIrisTravelY * gy) / r_v;
  const double d2 = du * du + dv * dv;
  if (d2 <= 0.45 * 0.45) return 0.06;
  if (d2 <= 1.0) return a.iris_brightness;
  return a.sclera;
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)); }

std::vector<std::uint8_t> render_eye(const SubjectAppearance& a, double aperture, std::size_t h, std::size_t w,
                                     double gx, double gy) {
  std::vector<std::uint8_t> out(h * w);
  constexpr double inv = 1.0 / (kSupersample * kSupersample);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int sy = 0; sy < kSupersample; ++sy) {
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double u = (x + (sx + 0.5) / kSupersample) / static_cast<double>(w) * 2.0 - 1.0;
          const double v = (y + (sy + 0.5) / kSupersample) / static_cast<double>(h) * 2.0 - 1.0;
          const double level = eye_level(a, aperture, u, v, gx, gy);
          acc += level < 0.0 ? a.eye_skin : level;
        }
      }
      out[y * w + x] = to_u8(acc * inv);
    }
  }
  return out;
}

std::array<double, 3> face_color(const SubjectAppearance& a, double px, double py, std::size_t h, std::size_t w,
                                 double gx, double gy) {
  const double fw = static_cast<double>(w), fh = static_cast<double>(h);
  // Eyes: boxes centered at (0.32 W, 0.42 H) and (0.68 W, 0.42 H).
  const double box_w = 0.28 * fw, box_h = kEyeAspect * box_w;
  for (int side = 0; side < 2; ++side) {
    const double cx = (side == 0 ? 0.32 : 0.68) * fw, cy = 0.42 * fh;
    const double u = (px - cx) / (box_w / 2), v = (py - cy) / (box_h / 2);
    if (std::abs(u) <= 1.0 && std::abs(v) <= 1.0) {
      const double level = eye_level(a, side == 0 ? a.aperture_left : a.aperture_right, u, v, gx, gy);
      if (level >= 0.0) return {level, level, level};
    }
  }
  const double ex = (px - 0.5 * fw) / (0.40 * fw), ey = (py - 0.52 * fh) / (0.47 * fh);
  if (ex * ex + ey * ey > 1.0) return a.background_rgb;
  const double mx = (px - 0.5 * fw) / (0.12 * fw), my = (py - 0.75 * fh) / (0.03 * fh + 0.5);
  if (mx * mx + my * my <= 1.0) return {0.45 * a.skin_rgb[0], 0.3 * a.skin_rgb[1], 0.3 * a.skin_rgb[2]};
  const double t = 1.0 + a.texture_amplitude * std::sin(a.texture_frequency * px / fw + a.texture_phase) *
                             std::sin(0.7 * a.texture_frequency * py / fh);
  return {a.skin_rgb[0] * t, a.skin_rgb[1] * t, a.skin_rgb[2] * t};
}

std::vector<std::uint8_t> render_face(const SubjectAppearance& a, std::size_t h, std::size_t w, std::size_t c,
                                      double gx, double gy) {
  std::vector<std::uint8_t> out(h * w * c);
  constexpr double inv = 1.0 / (kSupersample * kSupersample);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::array<double, 3> acc{};
      for (int sy = 0; sy < kSupersample; ++sy) {
        for (int sx = 0; sx < kSupersample; ++sx) {
          const auto rgb = face_color(a, x + (sx + 0.5) / kSupersample, y + (sy + 0.5) / kSupersample, h, w, gx, gy);
          for (int k = 0; k < 3; ++k) acc[k] += rgb[k];
        }
      }
      if (c == 1) {
        out[y * w + x] = to_u8((0.299 * acc[0] + 0.587 * acc[1] + 0.114 * acc[2]) * inv);
      } else {
        for (std::size_t k = 0; k < c; ++k) out[(y * w + x) * c + k] = to_u8(acc[std::min<std::size_t>(k, 2)] * inv);
      }
    }
  }
  return out;
}

void add_noise(std::vector<std::uint8_t>& img, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, sigma * 255.0);
  for (auto& p : img) p = static_cast<std::uint8_t>(std::clamp(std::lround(p + dist(rng)), 0L, 255L));
}

}  // namespace

void SynthConfig::validate() const {
  if (subjects == 0) throw ConfigError("synth: subjects must be positive");
  if (samples_per_subject == 0) throw ConfigError("synth: samples_per_subject must be positive");
  if (!(pitch_range_deg >= 0.0 && pitch_range_deg <= 45.0) || !(yaw_range_deg >= 0.0 && yaw_range_deg <= 45.0)) {
    throw ConfigError("synth: gaze ranges must lie within [0, 45] degrees");
  }
  if (!(noise >= 0.0)) throw ConfigError("synth: noise must be non-negative");
  if (geometry.face_channels != 1 && geometry.face_channels != 3) throw ConfigError("synth: face must have 1 or 3 channels");
  if (geometry.face_height < 8 || geometry.face_width < 8 || geometry.eye_height < 4 || geometry.eye_width < 4) {
    throw ConfigError("synth: geometry too small (" + geometry.describe() + ")");
  }
  auto range = [](double lo, double hi, double min, double max, const char* what) {
    if (!(lo <= hi && lo >= min && hi <= max)) throw ConfigError(std::string("synth: invalid ") + what + " range");
  };
  range(iris_radius_min, iris_radius_max, 0.05, 0.6, "iris radius");
  range(sclera_min, sclera_max, 0.0, 1.0, "sclera brightness");
  range(aperture_min, aperture_max, 0.2, 1.0, "aperture");
}

SubjectAppearance subject_appearance(const SynthConfig& cfg, std::uint16_t subject) {
  std::mt19937_64 rng(derive_seed(cfg.seed, {kAppearance, subject}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  SubjectAppearance a{};
  a.iris_radius = between(cfg.iris_radius_min, cfg.iris_radius_max);
  a.iris_brightness = between(0.18, 0.32);
  a.sclera = between(cfg.sclera_min, cfg.sclera_max);
  a.aperture_left = between(cfg.aperture_min, cfg.aperture_max);
  a.aperture_right = std::clamp(a.aperture_left * between(0.92, 1.08), cfg.aperture_min, cfg.aperture_max);
  a.eye_skin = between(0.50, 0.68);
  const double tone = between(0.45, 0.85);
  a.skin_rgb = {tone, tone * between(0.72, 0.85), tone * between(0.55, 0.72)};
  const double bg = between(0.1, 0.4);
  a.background_rgb = {bg, bg * between(0.8, 1.2), bg * between(0.8, 1.2)};
  a.texture_amplitude = between(0.02, 0.10);
  a.texture_frequency = between(6.0, 18.0);
  a.texture_phase = between(0.0, 2.0 * geometry::kPi);
  return a;
}

SampleRecord render_sample(const SynthConfig& cfg, std::uint16_t subject, std::uint32_t sample_id,
                           const std::array<float, 3>& gaze) {
  const auto a = subject_appearance(cfg, subject);
  const auto& g = cfg.geometry;
  const double gx = gaze[0], gy = gaze[1];
  SampleRecord r;
  r.face = render_face(a, g.face_height, g.face_width, g.face_channels, gx, gy);
  r.left_eye = render_eye(a, a.aperture_left, g.eye_height, g.eye_width, gx, gy);
  r.right_eye = render_eye(a, a.aperture_right, g.eye_height, g.eye_width, gx, gy);
  if (cfg.noise > 0.0) {
    std::mt19937_64 rng(derive_seed(cfg.seed, {kNoise, subject, sample_id}));
    add_noise(r.face, cfg.noise, rng);
    add_noise(r.left_eye, cfg.noise, rng);
    add_noise(r.right_eye, cfg.noise, rng);
  }
  r.gaze = gaze;
  r.subject_id = subject;
  r.sample_id = sample_id;
  return r;
}

Dataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Dataset dataset(cfg.geometry);
  const double pr = geometry::radians(cfg.pitch_range_deg), yr = geometry::radians(cfg.yaw_range_deg);
  for (std::uint16_t s = 0; s < cfg.subjects; ++s) {
    for (std::uint32_t i = 0; i < cfg.samples_per_subject; ++i) {
      const std::uint32_t sample_id = static_cast<std::uint32_t>(s) * cfg.samples_per_subject + i;
      std::mt19937_64 rng(derive_seed(cfg.seed, {kLabel, s, sample_id}));
      std::uniform_real_distribution<double> unit(-1.0, 1.0);
      const double pitch = pr * unit(rng);
      const double yaw = yr * unit(rng);
      const auto v = geometry::pitchyaw_to_vector(pitch, yaw);
      const std::array<float, 3> gaze{static_cast<float>(v.x), static_cast<float>(v.y), static_cast<float>(v.z)};
      dataset.append(render_sample(cfg, s, sample_id, gaze));
    }
  }
  return dataset;
}

}  // namespace canet::data
