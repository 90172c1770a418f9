#include <gtest/gtest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <random>

#include "canet/error.hpp"
#include "canet/geometry.hpp"

using namespace canet;
using namespace canet::geometry;

namespace {

GazeVector random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  Eigen::Vector3d v(d(rng), d(rng), d(rng));
  return GazeVector::from(v.normalized());
}

// A camera frame with a face whose eye corners sit on the head x axis.
struct Fixture {
  Image image;
  CameraIntrinsics camera{500.0, 500.0, 160.0, 120.0};
  HeadPose head;
  EyeCorners corners;
};

Fixture make_fixture(double roll_deg, double yaw_deg, double pitch_deg, const Eigen::Vector3d& translation) {
  Fixture f;
  f.image = Image(240, 320, 3);
  for (std::size_t y = 0; y < 240; ++y)
    for (std::size_t x = 0; x < 320; ++x)
      for (std::size_t c = 0; c < 3; ++c) f.image.at(y, x, c) = static_cast<std::uint8_t>((x * (c + 1) + 3 * y) % 256);
  f.head.rotation = (Eigen::AngleAxisd(radians(roll_deg), Eigen::Vector3d::UnitZ()) *
                     Eigen::AngleAxisd(radians(yaw_deg), Eigen::Vector3d::UnitY()) *
                     Eigen::AngleAxisd(radians(pitch_deg), Eigen::Vector3d::UnitX()))
                        .toRotationMatrix();
  f.head.translation = translation;
  auto project = [&](double hx) { return f.camera.project(f.head.rotation * Eigen::Vector3d(hx, 0, 0) + translation); };
  f.corners = {project(-45.0), project(-15.0), project(15.0), project(45.0)};
  return f;
}

}  // namespace

TEST(AngularDistance, BasicCases) {
  const GazeVector a{0.3, -0.2, -0.9};
  EXPECT_NEAR(angular_distance(a, a, 0.0), 0.0, 1e-7);
  // With the default clamp the floor is arccos(1 - 1e-7).
  EXPECT_LE(angular_distance(a, a), std::acos(1.0 - kAngularClampEps) + 1e-12);
  EXPECT_NEAR(angular_distance({1, 0, 0}, {0, 1, 0}), kPi / 2, 1e-12);
  const double five = radians(5.0);
  EXPECT_NEAR(degrees(angular_distance({0, 0, -1}, {0, std::sin(five), -std::cos(five)})), 5.0, 1e-4);
  EXPECT_THROW(angular_distance({0, 0, 0}, a), NumericError);
}

TEST(AngularDistance, ClampKeepsOppositeVectorsBelowPi) {
  EXPECT_LT(angular_distance({0, 0, 1}, {0, 0, -1}), kPi);
  EXPECT_NEAR(angular_distance({0, 0, 1}, {0, 0, -1}), kPi, 1e-3);
  EXPECT_DOUBLE_EQ(angular_distance({0, 0, 1}, {0, 0, -1}, 0.0), kPi);
}

TEST(AngularDistance, SymmetricScaleInvariantAndTriangle) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_unit(rng), b = random_unit(rng), c = random_unit(rng);
    const double ab = angular_distance(a, b);
    EXPECT_DOUBLE_EQ(ab, angular_distance(b, a));
    EXPECT_NEAR(angular_distance({2 * a.x, 2 * a.y, 2 * a.z}, b), ab, 1e-6);
    EXPECT_LE(angular_distance(a, c, 0.0), angular_distance(a, b, 0.0) + angular_distance(b, c, 0.0) + 1e-6);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, kPi);
  }
}

TEST(PitchYaw, StraightAheadAndGimbal) {
  const auto g = pitchyaw_to_vector(0, 0);
  EXPECT_DOUBLE_EQ(g.x, -0.0);
  EXPECT_DOUBLE_EQ(g.y, -0.0);
  EXPECT_DOUBLE_EQ(g.z, -1.0);
  EXPECT_THROW(pitchyaw_to_vector(kPi / 2, 0.1), NumericError);
  EXPECT_THROW(pitchyaw_to_vector(-kPi / 2, 0.1), NumericError);
}

TEST(PitchYaw, RoundTripOfRandomAngles) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pitch(-1.5, 1.5), yaw(-3.1, 3.1);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double p = pitch(rng), y = yaw(rng);
    const auto g = pitchyaw_to_vector(p, y);
    EXPECT_NEAR(g.norm(), 1.0, 1e-12);
    const auto back = vector_to_pitchyaw(g);
    worst = std::max({worst, std::abs(back.pitch - p), std::abs(back.yaw - y)});
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Equalize, ConstantImageStaysConstant) {
  const auto out = equalize_grayscale(Image(5, 7, 1, 90));
  EXPECT_EQ(out.channels, 1u);
  for (auto v : out.pixels) EXPECT_EQ(v, out.pixels.front());
}

TEST(Equalize, TwoLevelImageMatchesHandComputedCdf) {
  Image img(4, 4, 1, 0);
  for (std::size_t i = 8; i < 16; ++i) img.pixels[i] = 255;
  const auto out = equalize_grayscale(img);
  // floor(255 * 8 / 16) = 127 and floor(255 * 16 / 16) = 255.
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(out.pixels[i], 127);
  for (std::size_t i = 8; i < 16; ++i) EXPECT_EQ(out.pixels[i], 255);
}

TEST(Equalize, ColorInputBecomesGray) {
  Image img(2, 2, 3, 0);
  img.at(0, 0, 0) = 255;
  const auto out = equalize_grayscale(img);
  EXPECT_EQ(out.channels, 1u);
  EXPECT_EQ(out.pixels.size(), 4u);
  EXPECT_EQ(to_grayscale(img).at(0, 0), 76);  // round(0.299 * 255)
}

TEST(Equalize, GradientCdfIsNearlyLinear) {
  Image img(64, 300, 1);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 300; ++x) img.at(y, x) = static_cast<std::uint8_t>(std::lround(255.0 * std::pow(x / 299.0, 2)));
  const auto out = equalize_grayscale(img);
  std::array<std::size_t, 256> hist{};
  for (auto v : out.pixels) ++hist[v];
  const double total = static_cast<double>(out.pixels.size());
  double cdf = 0.0;
  for (std::size_t level = 0; level < 256; ++level) {
    cdf += static_cast<double>(hist[level]) / total;
    if (hist[level] == 0) continue;
    EXPECT_NEAR(cdf, (level + 1) / 256.0, 2.0 / 256.0) << level;
  }
}

TEST(Normalize, FrontalFaceIsNearIdentity) {
  const auto f = make_fixture(0, 0, 0, {0, 0, 600});
  const auto r = normalize_sample(f.image, f.corners, f.head, f.camera, {0, 0, -1});
  EXPECT_LT((r.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(r.face.height, 224u);
  EXPECT_EQ(r.face.width, 224u);
  EXPECT_EQ(r.face.channels, 3u);
  EXPECT_EQ(r.left_eye.height, 36u);
  EXPECT_EQ(r.left_eye.width, 60u);
  EXPECT_EQ(r.left_eye.channels, 1u);
  EXPECT_EQ(r.right_eye.pixels.size(), 36u * 60u);
}

TEST(Normalize, TenDegreeRollIsCanceled) {
  const auto f = make_fixture(10, 12, -8, {40, -25, 520});
  EXPECT_NEAR(std::abs(f.corners.line_angle()), radians(10), radians(4));  // the input really is rolled
  const auto r = normalize_sample(f.image, f.corners, f.head, f.camera, {0.1, 0.2, -0.97});
  EXPECT_LT(std::abs(r.landmarks.line_angle()), radians(0.06));
  EXPECT_LT(std::abs(r.landmarks.line_angle()), 1e-3);
  EXPECT_NEAR(r.head.translation.norm(), 600.0, 1e-6);
  EXPECT_NEAR(r.head.translation.x(), 0.0, 1e-6);
  EXPECT_NEAR(r.head.translation.y(), 0.0, 1e-6);
  EXPECT_LT((r.rotation.transpose() * r.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Normalize, GazeRotatesWithTheCamera) {
  const auto f = make_fixture(-7, 20, 5, {-60, 30, 700});
  const GazeVector a{0.2, -0.1, -0.97}, b{-0.3, 0.25, -0.92};
  const auto ra = normalize_sample(f.image, f.corners, f.head, f.camera, a);
  const auto rb = normalize_sample(f.image, f.corners, f.head, f.camera, b);
  EXPECT_NEAR(angular_distance(ra.gaze, rb.gaze, 0.0), angular_distance(a, b, 0.0), 1e-12);
  EXPECT_LT((ra.gaze.vec() - ra.rotation * a.vec()).norm(), 1e-12);
}

TEST(Normalize, SecondApplicationIsIdentity) {
  const auto f = make_fixture(10, -15, 6, {30, 20, 650});
  const auto r1 = normalize_sample(f.image, f.corners, f.head, f.camera, {0, 0, -1});
  const auto r2 = normalize_sample(r1.face, r1.landmarks, r1.head, r1.camera, r1.gaze);
  EXPECT_LT((r2.rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Normalize, DegenerateLandmarksAreRejected) {
  auto f = make_fixture(0, 0, 0, {0, 0, 600});
  f.corners.left_inner = f.corners.left_outer;
  EXPECT_THROW(normalize_sample(f.image, f.corners, f.head, f.camera, {0, 0, -1}), NumericError);
  auto g = make_fixture(0, 0, 0, {0, 0, 600});
  g.head.rotation(0, 0) = 2.0;
  EXPECT_THROW(normalize_sample(g.image, g.corners, g.head, g.camera, {0, 0, -1}), NumericError);
}
