#include "canet/geometry.hpp"

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <algorithm>
#include <array>
#include <cmath>

#include "canet/error.hpp"

namespace canet::geometry {

double angular_distance(const GazeVector& a, const GazeVector& b, double clamp_eps) {
  const double na = a.norm(), nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("angular_distance: zero-norm vector");
  const double c = std::clamp(a.vec().dot(b.vec()) / (na * nb), -1.0 + clamp_eps, 1.0 - clamp_eps);
  return std::acos(c);
}

GazeVector pitchyaw_to_vector(double pitch, double yaw) {
  if (!(std::abs(pitch) < kPi / 2)) throw NumericError("pitchyaw_to_vector: pitch at or beyond +-pi/2");
  return {-std::cos(pitch) * std::sin(yaw), -std::sin(pitch), -std::cos(pitch) * std::cos(yaw)};
}

PitchYaw vector_to_pitchyaw(const GazeVector& g) {
  const double n = g.norm();
  if (!(n > 0.0)) throw NumericError("vector_to_pitchyaw: zero-norm vector");
  const double pitch = std::asin(std::clamp(-g.y / n, -1.0, 1.0));
  const double yaw = std::atan2(-g.x, -g.z);
  return {pitch, yaw};
}

Image to_grayscale(const Image& image) {
  if (image.channels == 1) return image;
  if (image.channels != 3) throw ShapeError("to_grayscale: expected 1 or 3 channels");
  Image out(image.height, image.width, 1);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double v = 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) + 0.114 * image.at(y, x, 2);
      out.at(y, x) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
  }
  return out;
}

Image equalize_grayscale(const Image& image) {
  if (image.empty()) throw ShapeError("equalize_grayscale: empty image");
  Image gray = to_grayscale(image);
  std::array<std::uint64_t, 256> hist{};
  for (auto v : gray.pixels) ++hist[v];
  std::array<std::uint8_t, 256> lut{};
  const std::uint64_t total = gray.pixels.size();
  std::uint64_t cdf = 0;
  for (std::size_t v = 0; v < 256; ++v) {
    cdf += hist[v];
    lut[v] = static_cast<std::uint8_t>((255 * cdf) / total);
  }
  for (auto& v : gray.pixels) v = lut[v];
  return gray;
}

double sample_bilinear(const Image& image, double x, double y, std::size_t channel) {
  const double fx = std::floor(x), fy = std::floor(y);
  const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
  const double ax = x - fx, ay = y - fy;
  auto px = [&](long yy, long xx) -> double {
    if (xx < 0 || yy < 0 || xx >= static_cast<long>(image.width) || yy >= static_cast<long>(image.height)) return 0.0;
    return image.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), channel);
  };
  return (1 - ay) * ((1 - ax) * px(y0, x0) + ax * px(y0, x0 + 1)) + ay * ((1 - ax) * px(y0 + 1, x0) + ax * px(y0 + 1, x0 + 1));
}

Eigen::Matrix3d CameraIntrinsics::matrix() const {
  Eigen::Matrix3d k;
  k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return k;
}

Eigen::Vector2d CameraIntrinsics::project(const Eigen::Vector3d& p) const {
  return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy};
}

void HeadPose::validate() const {
  const double orth = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (orth > 1e-6 || std::abs(rotation.determinant() - 1.0) > 1e-6) {
    throw NumericError("head pose rotation is not a proper rotation");
  }
  if (!(translation.norm() > 0.0)) throw NumericError("head pose translation is zero");
}

double EyeCorners::line_angle() const {
  const Eigen::Vector2d d = right_center() - left_center();
  return std::atan2(d.y(), d.x());
}

double head_roll(const Eigen::Matrix3d& rotation) {
  const Eigen::Vector3d x = rotation.col(0);
  return std::atan2(x.y(), x.x());
}

namespace {

Eigen::Vector2d apply_homography(const Eigen::Matrix3d& h, const Eigen::Vector2d& p) {
  const Eigen::Vector3d q = h * Eigen::Vector3d(p.x(), p.y(), 1.0);
  return q.head<2>() / q.z();
}

EyeCorners warp_corners(const Eigen::Matrix3d& h, const EyeCorners& c) {
  return {apply_homography(h, c.left_outer), apply_homography(h, c.left_inner), apply_homography(h, c.right_inner),
          apply_homography(h, c.right_outer)};
}

Image warp_image(const Image& src, const Eigen::Matrix3d& warp, std::size_t out_w, std::size_t out_h) {
  const Eigen::Matrix3d inv = warp.inverse();
  Image out(out_h, out_w, src.channels);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const Eigen::Vector2d s = apply_homography(inv, {static_cast<double>(x), static_cast<double>(y)});
      for (std::size_t c = 0; c < src.channels; ++c) {
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(sample_bilinear(src, s.x(), s.y(), c)), 0L, 255L));
      }
    }
  }
  return out;
}

// Axis-aligned crop of size (w, h) centered at `center`, resampled to out_w x out_h.
Image crop_resample(const Image& src, const Eigen::Vector2d& center, double w, double h, std::size_t out_w,
                    std::size_t out_h) {
  Image out(out_h, out_w, src.channels);
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = center.x() - w / 2 + (static_cast<double>(x) + 0.5) * w / static_cast<double>(out_w) - 0.5;
      const double sy = center.y() - h / 2 + (static_cast<double>(y) + 0.5) * h / static_cast<double>(out_h) - 0.5;
      for (std::size_t c = 0; c < src.channels; ++c) {
        out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(sample_bilinear(src, sx, sy, c)), 0L, 255L));
      }
    }
  }
  return out;
}

Image crop_eye(const Image& face, const Eigen::Vector2d& a, const Eigen::Vector2d& b, const NormalizationConfig& cfg) {
  const double width = 1.5 * (b - a).norm();
  const double height = 0.6 * width;
  return equalize_grayscale(crop_resample(face, 0.5 * (a + b), width, height, cfg.eye_width, cfg.eye_height));
}

}  // namespace

NormalizationResult normalize_sample(const Image& image, const EyeCorners& landmarks, const HeadPose& head,
                                     const CameraIntrinsics& camera, const GazeVector& gaze,
                                     const NormalizationConfig& config) {
  head.validate();
  if ((landmarks.left_outer - landmarks.left_inner).norm() < 1e-9 ||
      (landmarks.right_outer - landmarks.right_inner).norm() < 1e-9 ||
      (landmarks.right_center() - landmarks.left_center()).norm() < 1e-9) {
    throw NumericError("normalize_sample: degenerate eye corner landmarks");
  }

  const Eigen::Vector3d center = head.translation;
  const double distance = center.norm();
  const Eigen::Vector3d forward = center / distance;
  Eigen::Vector3d down = forward.cross(head.rotation.col(0));
  if (down.norm() < 1e-9) throw NumericError("normalize_sample: head x axis parallel to the viewing ray");
  down.normalize();
  const Eigen::Vector3d right = down.cross(forward);
  Eigen::Matrix3d pose_rotation;
  pose_rotation.row(0) = right.transpose();
  pose_rotation.row(1) = down.transpose();
  pose_rotation.row(2) = forward.transpose();

  CameraIntrinsics norm_cam{config.focal_px, config.focal_px, static_cast<double>(config.face_width) / 2.0,
                            static_cast<double>(config.face_height) / 2.0};
  const Eigen::Matrix3d scale = Eigen::Vector3d(1.0, 1.0, config.distance_mm / distance).asDiagonal();
  const Eigen::Matrix3d cam_inv = camera.matrix().inverse();

  // Residual roll measured on the warped landmarks, removed by a rotation about
  // the optical axis (which commutes with the depth scaling).
  const Eigen::Matrix3d pose_warp = norm_cam.matrix() * scale * pose_rotation * cam_inv;
  const double roll = warp_corners(pose_warp, landmarks).line_angle();
  const Eigen::Matrix3d derotate = Eigen::AngleAxisd(-roll, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  const Eigen::Matrix3d rotation = derotate * pose_rotation;
  const Eigen::Matrix3d warp = norm_cam.matrix() * scale * rotation * cam_inv;

  NormalizationResult r;
  r.rotation = rotation;
  r.warp = warp;
  r.camera = norm_cam;
  r.gaze = GazeVector::from(rotation * gaze.vec());
  r.head.rotation = rotation * head.rotation;
  r.head.translation = scale * rotation * head.translation;
  r.landmarks = warp_corners(warp, landmarks);
  r.face = warp_image(image, warp, config.face_width, config.face_height);
  r.left_eye = crop_eye(r.face, r.landmarks.left_outer, r.landmarks.left_inner, config);
  r.right_eye = crop_eye(r.face, r.landmarks.right_inner, r.landmarks.right_outer, config);
  return r;
}

}  // namespace canet::geometry
