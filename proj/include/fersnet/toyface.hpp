// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "fersnet/rng.hpp"
#include "fersnet/tensor.hpp"

namespace fersnet {

/// Discrete expression archetype: what a class looks like around the mouth
/// and brows. Jittered per image at render time.
struct ExpressionArchetype {
  double mouth_curve = 0.0;  // [-1,1], positive = corners up
  double mouth_open = 0.0;   // [0,1]
  double brow_angle = 0.0;   // [-1,1]
};

/// Six well-separated archetypes (min pairwise factor distance well above
/// the default jitter), so a nearest-archetype read-out of the render
/// factors classifies clean renders perfectly.
std::vector<ExpressionArchetype> default_archetypes();

/// Continuous per-subject identity factors, constant across all images of
/// one subject.
struct SubjectFactors {
  double ellipse_ecc = 1.0;  // face width / height ratio factor
  double eye_spacing = 0.28;
  double eye_height = -0.22;  // negative = above center
};

/// Everything one render depends on.
struct RenderFactors {
  SubjectFactors subject;
  ExpressionArchetype expr;  // post-jitter values
  double brightness = 0.0;
};

struct ToyFaceSpec {
  int render_size = 110;
  double noise = 0.02;             // Gaussian pixel noise, [0,1] luminance units
  double factor_jitter = 0.04;     // uniform jitter on expression factors
  double brightness_jitter = 0.06; // uniform luminance offset per image
  int max_per_subject_class = 32;
  std::vector<ExpressionArchetype> archetypes = default_archetypes();
};

/// Anti-aliased grayscale face in [-1,1], shape [1,S,S]. Deterministic given
/// the factors and the rng state.
Tensor<float> render_toy_face(const RenderFactors& f, int size, double noise_sigma,
                              RngStream& rng);

/// Boolean pixel masks of the discriminative regions, at render resolution.
struct FaceMasks {
  int size = 0;
  std::vector<std::uint8_t> mouth;     // 1 inside the mouth
  std::vector<std::uint8_t> features;  // mouth, eyes and brows
};

FaceMasks render_face_masks(const RenderFactors& f, int size);

/// Rule-based classifier reading the (possibly jittered) expression factors:
/// nearest archetype in factor space.
int oracle_expression_class(const ExpressionArchetype& e,
                            const std::vector<ExpressionArchetype>& archetypes);

}  // namespace fersnet
