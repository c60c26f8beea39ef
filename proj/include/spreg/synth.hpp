#pragma once

#include "spreg/config.hpp"
#include "spreg/pipeline.hpp"
#include "spreg/types.hpp"

namespace spreg {

/// Procedural outdoor-style scene: ground plane, boxes, poles and blobby
/// canopies over roughly a 30 m extent. At least 5000 points.
PointCloud make_procedural_scene(std::uint64_t seed, int target_points = 9000);

/// Cross-source pair synthesis: the two sides see the same underlying scene
/// at different voxel sizes, noise levels and crops; the target is further
/// moved by a random transform (yaw uniform, slight roll/pitch, translation
/// in a cfg.synth_translation ball) and optionally scale-jittered about its
/// centroid (recorded in TrainSample::scale, never folded into the GT).
/// Crops are re-drawn up to 20 times when the overlap falls below 0.1.
TrainSample synth_cross_source(const PointCloud& base, std::uint64_t seed,
                               const ModelConfig& cfg);

}  // namespace spreg
