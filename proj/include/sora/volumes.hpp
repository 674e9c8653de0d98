#pragma once

#include "sora/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sora {

// Masked organ region cut from a synthetic scan. Voxels are intensities in
// [0, 1]; the mask is 0/1 and every voxel outside it is exactly zero.
struct OrganVolume {
    int organ_id = 0;
    Tensor voxels;  // [D, H, W]
    Tensor mask;    // [D, H, W]
};

struct VolumeConfig {
    int n_organs = 7;
    std::size_t depth = 8;
    std::size_t height = 32;
    std::size_t width = 32;
    double noise_sigma = 0.02;
    std::uint64_t seed = 0;

    void validate() const;
};

// Fixed per-organ shape parameters in normalized [0,1] coordinates. Derived
// from the organ id alone, so every case of an organ shares its identity:
// where it sits, how large it is, how bright it is, and how its internal
// texture ripples. Cases differ only by jitter and noise.
struct OrganGeometry {
    double cz, cy, cx;  // ellipsoid center
    double rz, ry, rx;  // ellipsoid radii
    double base;        // base intensity inside the mask
    double freq;        // texture ripple frequency, cycles across the volume
    double phase_dir[3];  // ripple direction weights over (z, y, x)
};

OrganGeometry organ_geometry(int organ_id);

// One organ's volume for one synthetic case. Deterministic in (seed,
// organ_id, case_id). The blob is an ellipsoid with jittered center and
// radii, filled with a sinusoidal texture plus Gaussian noise, clamped to
// [0.05, 1] inside the mask and exactly 0 outside.
OrganVolume generate_organ_volume(const VolumeConfig& cfg, int organ_id,
                                  std::uint64_t case_id);

// All organs of one case, ordered by organ id.
std::vector<OrganVolume> generate_case(const VolumeConfig& cfg, std::uint64_t case_id);

// Throws InputError unless the volume honors its invariants: matching
// voxel/mask shapes, binary mask, intensities in [0,1], and exact zeros
// outside the mask.
void validate_volume(const OrganVolume& vol);

// Files `<case>_<organ_id>_vox.ten` and `<case>_<organ_id>_mask.ten` in dir.
void write_volume(const std::string& dir, const std::string& case_name,
                  const OrganVolume& vol);
OrganVolume read_volume(const std::string& dir, const std::string& case_name,
                        int organ_id);

}  // namespace sora
