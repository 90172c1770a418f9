#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace canet::geometry {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kAngularClampEps = 1e-7;

inline double degrees(double rad) { return rad * 180.0 / kPi; }
inline double radians(double deg) { return deg * kPi / 180.0; }

/// 3D gaze direction in the normalized camera frame (x right, y down, z
/// forward). Ground truth is unit length; predictions need not be.
struct GazeVector {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  Eigen::Vector3d vec() const { return {x, y, z}; }
  static GazeVector from(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }
  double norm() const { return vec().norm(); }
};

struct PitchYaw {
  double pitch = 0.0;
  double yaw = 0.0;
};

/// arccos(a.b / |a||b|) in [0, pi]. The cosine is clamped to
/// [-1 + clamp_eps, 1 - clamp_eps]. Throws NumericError on a zero vector.
double angular_distance(const GazeVector& a, const GazeVector& b, double clamp_eps = kAngularClampEps);

/// g = (-cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw)).
/// Throws NumericError when |pitch| >= pi/2.
GazeVector pitchyaw_to_vector(double pitch, double yaw);
PitchYaw vector_to_pitchyaw(const GazeVector& g);

/// 8-bit image, row-major (y, x, channel).
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
  bool empty() const { return pixels.empty(); }
};

/// Luma (0.299 R + 0.587 G + 0.114 B, rounded); single-channel input is copied.
Image to_grayscale(const Image& image);

/// Grayscale conversion followed by cumulative-histogram equalization,
/// level v -> floor(255 * cdf(v) / pixel_count).
Image equalize_grayscale(const Image& image);

/// Bilinear sample with zero outside the image.
double sample_bilinear(const Image& image, double x, double y, std::size_t channel);

struct CameraIntrinsics {
  double fx = 650.0;
  double fy = 650.0;
  double cx = 112.0;
  double cy = 112.0;

  Eigen::Matrix3d matrix() const;
  Eigen::Vector2d project(const Eigen::Vector3d& point) const;
};

/// Head rotation (columns are the head axes in camera coordinates) and the
/// camera-frame position of the face center, in millimeters.
struct HeadPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d(0, 0, 600);

  void validate() const;
};

/// Image-space eye corners. "left" is the eye on the left side of the image.
struct EyeCorners {
  Eigen::Vector2d left_outer;
  Eigen::Vector2d left_inner;
  Eigen::Vector2d right_inner;
  Eigen::Vector2d right_outer;

  Eigen::Vector2d left_center() const { return 0.5 * (left_outer + left_inner); }
  Eigen::Vector2d right_center() const { return 0.5 * (right_inner + right_outer); }
  /// Angle of the line from the left eye center to the right eye center.
  double line_angle() const;
};

struct NormalizationConfig {
  double distance_mm = 600.0;
  double focal_px = 650.0;
  std::size_t face_width = 224;
  std::size_t face_height = 224;
  std::size_t eye_width = 60;
  std::size_t eye_height = 36;
};

struct NormalizationResult {
  Image face;       // warped, same channel count as the input
  Image left_eye;   // equalized gray, eye_height x eye_width
  Image right_eye;
  Eigen::Matrix3d rotation;  // R_n, applied to the camera frame
  Eigen::Matrix3d warp;      // homography from input pixels to normalized pixels
  GazeVector gaze;           // R_n * g
  HeadPose head;             // head pose seen by the normalized camera
  EyeCorners landmarks;      // warped eye corners
  CameraIntrinsics camera;   // normalized camera
};

/// Rotates a virtual camera to look at the face center from distance_mm and
/// warps the image accordingly; the residual in-plane roll is then removed so
/// the warped eye-corner line is horizontal. Eye patches are cropped from the
/// warped face (centered on each eye's corner midpoint, width 1.5x the corner
/// distance, height 0.6x the width) and equalized to gray.
///
/// Throws NumericError for coincident eye corners or a degenerate pose.
NormalizationResult normalize_sample(const Image& image, const EyeCorners& landmarks, const HeadPose& head,
                                     const CameraIntrinsics& camera, const GazeVector& gaze,
                                     const NormalizationConfig& config = {});

/// Roll of a head rotation as seen in the image: angle of the projected head
/// x axis.
double head_roll(const Eigen::Matrix3d& rotation);

}  // namespace canet::geometry
