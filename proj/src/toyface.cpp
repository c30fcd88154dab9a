// SPDX-License-Identifier: Apache-2.0
#include "fersnet/toyface.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fersnet {

std::vector<ExpressionArchetype> default_archetypes() {
  return {
      {-0.60, 0.10, -0.70},  // pressed frown, knitted brows
      {-0.35, 0.45, -0.30},  // open grimace
      {-0.10, 0.65, +0.55},  // dropped jaw, raised brows
      {+0.75, 0.30, +0.10},  // wide smile
      {-0.80, 0.04, +0.60},  // deep frown, sloped brows
      {+0.10, 0.90, +0.85},  // round open mouth, high brows
  };
}

namespace {

struct FaceGeometry {
  // all in normalized canvas coordinates, u right / v down, [-1,1]
  double face_cx = 0.0, face_cy = 0.03;
  double face_rx, face_ry = 0.80;
  double eye_r = 0.085;
  double eye_dx, eye_y;
  double brow_dy = -0.16;          // offset above eye center
  double brow_half_w = 0.13, brow_half_h = 0.028;
  double brow_slope;
  double mouth_cy = 0.45, mouth_half_w = 0.26;
  double mouth_curve_amp, mouth_min_h = 0.030, mouth_open_amp = 0.085;
  double mouth_curve, mouth_open;

  explicit FaceGeometry(const RenderFactors& f) {
    face_rx = 0.62 * f.subject.ellipse_ecc;
    eye_dx = f.subject.eye_spacing;
    eye_y = f.subject.eye_height;
    brow_slope = f.expr.brow_angle * 0.12;
    mouth_curve_amp = 0.12;
    mouth_curve = f.expr.mouth_curve;
    mouth_open = f.expr.mouth_open;
  }

  bool in_face(double u, double v) const {
    double du = (u - face_cx) / face_rx, dv = (v - face_cy) / face_ry;
    return du * du + dv * dv <= 1.0;
  }
  bool in_eye(double u, double v) const {
    for (int s : {-1, 1}) {
      double du = u - s * eye_dx, dv = v - eye_y;
      if (du * du + dv * dv <= eye_r * eye_r) return true;
    }
    return false;
  }
  bool in_brow(double u, double v) const {
    for (int s : {-1, 1}) {
      double du = u - s * eye_dx;
      if (std::abs(du) > brow_half_w) continue;
      // outer end moves down as the angle grows
      double center = eye_y + brow_dy + brow_slope * (du * s) / brow_half_w;
      if (std::abs(v - center) <= brow_half_h) return true;
    }
    return false;
  }
  bool in_mouth(double u, double v) const {
    double t = u / mouth_half_w;
    if (std::abs(t) > 1.0) return false;
    double center = mouth_cy - mouth_curve * mouth_curve_amp * (2.0 * t * t - 1.0);
    double half_h = (mouth_min_h + mouth_open * mouth_open_amp) * std::sqrt(1.0 - t * t);
    return std::abs(v - center) <= half_h;
  }

  double luminance(double u, double v) const {
    if (in_mouth(u, v)) return 0.18;
    if (in_brow(u, v)) return 0.15;
    if (in_eye(u, v)) return 0.12;
    if (in_face(u, v)) return 0.72;
    return 0.08;
  }
};

constexpr int kSupersample = 3;

}  // namespace

Tensor<float> render_toy_face(const RenderFactors& f, int size, double noise_sigma,
                              RngStream& rng) {
  FaceGeometry geo(f);
  Tensor<float> img({1, size, size});
  double inv = 1.0 / static_cast<double>(size);
  double sub = 1.0 / static_cast<double>(kSupersample);
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      double acc = 0;
      for (int si = 0; si < kSupersample; ++si)
        for (int sj = 0; sj < kSupersample; ++sj) {
          double v = ((i + (si + 0.5) * sub) * inv) * 2.0 - 1.0;
          double u = ((j + (sj + 0.5) * sub) * inv) * 2.0 - 1.0;
          acc += geo.luminance(u, v);
        }
      double lum = acc / (kSupersample * kSupersample) + f.brightness;
      if (noise_sigma > 0) lum += noise_sigma * rng.normal();
      lum = std::clamp(lum, 0.0, 1.0);
      img[static_cast<long long>(i) * size + j] = static_cast<float>(lum * 2.0 - 1.0);
    }
  }
  return img;
}

FaceMasks render_face_masks(const RenderFactors& f, int size) {
  FaceGeometry geo(f);
  FaceMasks m;
  m.size = size;
  m.mouth.assign(static_cast<size_t>(size) * size, 0);
  m.features.assign(static_cast<size_t>(size) * size, 0);
  double inv = 1.0 / static_cast<double>(size);
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) {
      double v = ((i + 0.5) * inv) * 2.0 - 1.0;
      double u = ((j + 0.5) * inv) * 2.0 - 1.0;
      bool mouth = geo.in_mouth(u, v);
      bool feat = mouth || geo.in_eye(u, v) || geo.in_brow(u, v);
      m.mouth[static_cast<size_t>(i) * size + j] = mouth ? 1 : 0;
      m.features[static_cast<size_t>(i) * size + j] = feat ? 1 : 0;
    }
  }
  return m;
}

int oracle_expression_class(const ExpressionArchetype& e,
                            const std::vector<ExpressionArchetype>& archetypes) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t k = 0; k < archetypes.size(); ++k) {
    double dc = e.mouth_curve - archetypes[k].mouth_curve;
    double doo = e.mouth_open - archetypes[k].mouth_open;
    double db = e.brow_angle - archetypes[k].brow_angle;
    double d = dc * dc + doo * doo + db * db;
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

}  // namespace fersnet
