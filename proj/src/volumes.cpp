#include "sora/volumes.hpp"

#include "sora/errors.hpp"
#include "sora/rng.hpp"
#include "sora/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace sora {

void VolumeConfig::validate() const {
    if (n_organs < 1) throw ConfigError("volumes: n_organs must be >= 1");
    if (depth < 2 || height < 4 || width < 4) {
        throw ConfigError("volumes: extents too small, need depth >= 2 and height/width >= 4");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("volumes: noise_sigma must be >= 0");
}

namespace {

double frac(double x) { return x - std::floor(x); }

}  // namespace

OrganGeometry organ_geometry(int organ_id) {
    if (organ_id < 0) throw ConfigError("volumes: organ_id must be >= 0");
    // Low-discrepancy spread over the parameter ranges keeps any number of
    // organs mutually distinct without a hand-written table.
    const double k = static_cast<double>(organ_id) + 1.0;
    const double u0 = frac(k * 0.6180339887498949);
    const double u1 = frac(k * 0.7548776662466927);
    const double u2 = frac(k * 0.5698402909980532);
    const double u3 = frac(k * 0.8191725133961645);
    const double u4 = frac(k * 0.6823278038280193);
    const double u5 = frac(k * 0.4656702752043094);
    const double u6 = frac(k * 0.7219544457292887);
    OrganGeometry g;
    g.cz = 0.40 + 0.20 * u0;
    g.cy = 0.32 + 0.36 * u1;
    g.cx = 0.32 + 0.36 * u2;
    g.rz = 0.22 + 0.16 * u3;
    g.ry = 0.16 + 0.14 * u4;
    g.rx = 0.16 + 0.14 * frac(u4 + 0.37);
    g.base = 0.35 + 0.45 * u5;
    g.freq = 2.0 + 5.0 * u6;
    g.phase_dir[0] = 0.3 + 0.7 * u0;
    g.phase_dir[1] = 0.3 + 0.7 * u3;
    g.phase_dir[2] = 0.3 + 0.7 * u6;
    return g;
}

OrganVolume generate_organ_volume(const VolumeConfig& cfg, int organ_id,
                                  std::uint64_t case_id) {
    cfg.validate();
    if (organ_id < 0 || organ_id >= cfg.n_organs) {
        throw ConfigError("volumes: organ_id out of range");
    }
    const OrganGeometry g = organ_geometry(organ_id);
    // One substream per (case, organ); organ ids stay below 2^16 in practice.
    Rng rng(cfg.seed, (case_id << 16) + static_cast<std::uint64_t>(organ_id) + 1);

    const double cz = g.cz + 0.03 * (2.0 * rng.uniform() - 1.0);
    const double cy = g.cy + 0.03 * (2.0 * rng.uniform() - 1.0);
    const double cx = g.cx + 0.03 * (2.0 * rng.uniform() - 1.0);
    const double rz = g.rz * (0.9 + 0.2 * rng.uniform());
    const double ry = g.ry * (0.9 + 0.2 * rng.uniform());
    const double rx = g.rx * (0.9 + 0.2 * rng.uniform());
    const double phase = 6.283185307179586 * rng.uniform();

    const std::size_t D = cfg.depth, H = cfg.height, W = cfg.width;
    OrganVolume vol;
    vol.organ_id = organ_id;
    vol.voxels = Tensor({D, H, W});
    vol.mask = Tensor({D, H, W});
    for (std::size_t z = 0; z < D; ++z) {
        // Voxel centers in normalized coordinates.
        const double nz = (static_cast<double>(z) + 0.5) / static_cast<double>(D);
        for (std::size_t y = 0; y < H; ++y) {
            const double ny = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
            for (std::size_t x = 0; x < W; ++x) {
                const double nx = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
                const double dz = (nz - cz) / rz;
                const double dy = (ny - cy) / ry;
                const double dx = (nx - cx) / rx;
                if (dz * dz + dy * dy + dx * dx > 1.0) continue;
                const double ripple =
                    std::sin(6.283185307179586 * g.freq *
                                 (g.phase_dir[0] * nz + g.phase_dir[1] * ny +
                                  g.phase_dir[2] * nx) +
                             phase);
                double v = g.base + 0.12 * ripple + cfg.noise_sigma * rng.normal();
                v = std::clamp(v, 0.05, 1.0);
                vol.mask(z, y, x) = 1.0;
                vol.voxels(z, y, x) = v;
            }
        }
    }
    return vol;
}

std::vector<OrganVolume> generate_case(const VolumeConfig& cfg, std::uint64_t case_id) {
    std::vector<OrganVolume> out;
    out.reserve(static_cast<std::size_t>(cfg.n_organs));
    for (int i = 0; i < cfg.n_organs; ++i) {
        out.push_back(generate_organ_volume(cfg, i, case_id));
    }
    return out;
}

void validate_volume(const OrganVolume& vol) {
    if (vol.voxels.rank() != 3 || vol.mask.rank() != 3) {
        throw InputError("volume: voxels and mask must be rank 3");
    }
    if (!vol.voxels.same_shape(vol.mask)) {
        throw InputError("volume: voxels shape " + vol.voxels.shape_str() +
                         " does not match mask shape " + vol.mask.shape_str());
    }
    for (std::size_t i = 0; i < vol.voxels.size(); ++i) {
        const double m = vol.mask[i];
        const double v = vol.voxels[i];
        if (m != 0.0 && m != 1.0) {
            throw InputError("volume: mask must be binary");
        }
        if (!(v >= 0.0 && v <= 1.0)) {
            throw InputError("volume: voxel intensities must lie in [0, 1]");
        }
        if (m == 0.0 && v != 0.0) {
            throw InputError("volume: voxels outside the mask must be exactly 0");
        }
    }
}

namespace {

std::string volume_stem(const std::string& dir, const std::string& case_name,
                        int organ_id) {
    return (std::filesystem::path(dir) /
            (case_name + "_" + std::to_string(organ_id) + "_"))
        .string();
}

}  // namespace

void write_volume(const std::string& dir, const std::string& case_name,
                  const OrganVolume& vol) {
    validate_volume(vol);
    const std::string stem = volume_stem(dir, case_name, vol.organ_id);
    write_tensor(stem + "vox.ten", vol.voxels);
    write_tensor(stem + "mask.ten", vol.mask);
}

OrganVolume read_volume(const std::string& dir, const std::string& case_name,
                        int organ_id) {
    const std::string stem = volume_stem(dir, case_name, organ_id);
    OrganVolume vol;
    vol.organ_id = organ_id;
    vol.voxels = read_tensor(stem + "vox.ten");
    vol.mask = read_tensor(stem + "mask.ten");
    validate_volume(vol);
    return vol;
}

}  // namespace sora
