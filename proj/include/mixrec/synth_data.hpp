#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mixrec/camera.hpp"
#include "mixrec/common.hpp"
#include "mixrec/geometry.hpp"
#include "mixrec/mot.hpp"
#include "mixrec/nn.hpp"
#include "mixrec/rng.hpp"

namespace mixrec::synth {

struct SceneOptions {
    int resolution = 16;
    int latent_side = 8;
    int latent_channels = 4;
    int image_side = 32;
    int camera_count = 32;
    bool misaligned = false; // randomize the ground-truth similarity
};

// One synthetic training scene. Point maps are stored in camera space; the
// stored poses map camera space into the feed-forward frame, and the
// ground-truth similarity maps that frame into the shape cube, so the full
// alignment chain reproduces cube-space world points exactly.
struct Scene {
    std::uint64_t seed = 0;
    SceneOptions opts;
    SparseVoxelGrid shape{16};
    nn::Mat<float> z0; // latent cells x channels, +/-1 logits in channel 0
    std::vector<CameraPose> cameras;
    std::vector<Intrinsics> intrinsics;
    std::vector<PointMap> point_maps;
    SimilarityTransform gt_similarity;
};

namespace detail {

struct Primitive {
    enum Kind { Box, Sphere, Cylinder } kind = Box;
    Vec3 center = Vec3::Zero();
    Vec3 half = Vec3::Zero(); // box half sizes
    double radius = 0.0;      // sphere/cylinder
    double half_height = 0.0; // cylinder
    int axis = 2;             // cylinder axis

    bool contains(const Vec3& p) const {
        Vec3 d = p - center;
        switch (kind) {
            case Box:
                return std::abs(d.x()) <= half.x() && std::abs(d.y()) <= half.y() &&
                       std::abs(d.z()) <= half.z();
            case Sphere:
                return d.norm() <= radius;
            case Cylinder: {
                int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
                return std::abs(d[axis]) <= half_height &&
                       std::hypot(d[a1], d[a2]) <= radius;
            }
        }
        return false;
    }

    void bounds(Vec3& lo, Vec3& hi) const {
        switch (kind) {
            case Box:
                lo = center - half;
                hi = center + half;
                return;
            case Sphere:
                lo = center - Vec3::Constant(radius);
                hi = center + Vec3::Constant(radius);
                return;
            case Cylinder: {
                Vec3 ext = Vec3::Constant(radius);
                ext[axis] = half_height;
                lo = center - ext;
                hi = center + ext;
                return;
            }
        }
    }

    void rescale(double s, const Vec3& shift) {
        center = s * center + shift;
        half *= s;
        radius *= s;
        half_height *= s;
    }
};

} // namespace detail

struct ShapeResult {
    SparseVoxelGrid grid{16};
    nn::Mat<float> z0;
};

// Union of 2..5 random primitives rasterized into the shape lattice, fit to
// [0.1, 0.9]^3. The first primitive is always a dominant off-center box
// with unequal footprint so the shape is never symmetric under 90-degree
// yaws. After the fit, box faces snap to the pooling lattice: boxes then
// survive the occupancy pooling losslessly, which keeps the pooled latent
// a faithful stand-in for the shape; the curved primitives stay small.
// z0 pools the occupancy to the latent lattice and maps it to +/-1 logits
// in channel 0 (fraction > 0.5 is solid); other channels stay zero.
inline ShapeResult generate_shape(std::uint64_t seed, const SceneOptions& opts = {}) {
    Rng rng = Rng(seed).substream("shape");
    std::vector<detail::Primitive> prims;

    {
        detail::Primitive box;
        box.kind = detail::Primitive::Box;
        box.center = Vec3(rng.uniform(0.55, 0.7), rng.uniform(0.3, 0.45),
                          rng.uniform(0.42, 0.58));
        box.half = Vec3(rng.uniform(0.22, 0.3), rng.uniform(0.12, 0.18),
                        rng.uniform(0.14, 0.22));
        prims.push_back(box);
    }
    int extra = rng.uniform_int(1, 4);
    for (int i = 0; i < extra; ++i) {
        detail::Primitive p;
        int kind = rng.uniform_int(0, 2);
        p.center = Vec3(rng.uniform(0.35, 0.65), rng.uniform(0.35, 0.65),
                        rng.uniform(0.35, 0.65));
        if (kind == 0) {
            p.kind = detail::Primitive::Box;
            p.half = Vec3(rng.uniform(0.1, 0.2), rng.uniform(0.1, 0.2),
                          rng.uniform(0.1, 0.2));
        } else if (kind == 1) {
            p.kind = detail::Primitive::Sphere;
            p.radius = rng.uniform(0.07, 0.11);
        } else {
            p.kind = detail::Primitive::Cylinder;
            p.axis = rng.uniform_int(0, 2);
            p.radius = rng.uniform(0.06, 0.1);
            p.half_height = rng.uniform(0.1, 0.18);
        }
        prims.push_back(p);
    }

    // Fit the union bounding box into [0.1, 0.9]^3 with a uniform scale.
    Vec3 lo = Vec3::Constant(1e9), hi = Vec3::Constant(-1e9);
    for (const auto& p : prims) {
        Vec3 plo, phi;
        p.bounds(plo, phi);
        lo = lo.cwiseMin(plo);
        hi = hi.cwiseMax(phi);
    }
    double extent = (hi - lo).maxCoeff();
    double s = 0.8 / extent;
    Vec3 mid = 0.5 * (lo + hi);
    Vec3 shift = Vec3::Constant(0.5) - s * mid;
    for (auto& p : prims) p.rescale(s, shift);

    // Snap box faces to the pooling lattice.
    {
        const double q = 2.0 / opts.resolution;
        auto snap = [q](double v) { return std::round(v / q) * q; };
        for (auto& p : prims) {
            if (p.kind != detail::Primitive::Box) continue;
            for (int k = 0; k < 3; ++k) {
                double a = snap(p.center[k] - p.half[k]);
                double b = snap(p.center[k] + p.half[k]);
                if (b - a < q) b = a + q;
                p.center[k] = 0.5 * (a + b);
                p.half[k] = 0.5 * (b - a);
            }
        }
    }

    ShapeResult res;
    res.grid = SparseVoxelGrid(opts.resolution);
    const int n = opts.resolution;
    for (int z = 0; z < n; ++z)
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                Vec3 c((x + 0.5) / n, (y + 0.5) / n, (z + 0.5) / n);
                for (const auto& p : prims)
                    if (p.contains(c)) {
                        res.grid.insert(Vec3i{x, y, z});
                        break;
                    }
            }

    const int ls = opts.latent_side;
    require(n % ls == 0, "generate_shape: latent side must divide resolution");
    const int f = n / ls;
    res.z0 = nn::Mat<float>::Zero(ls * ls * ls, opts.latent_channels);
    for (int z = 0; z < ls; ++z)
        for (int y = 0; y < ls; ++y)
            for (int x = 0; x < ls; ++x) {
                int solid = 0;
                for (int dz = 0; dz < f; ++dz)
                    for (int dy = 0; dy < f; ++dy)
                        for (int dx = 0; dx < f; ++dx)
                            solid += res.grid.contains(
                                Vec3i{x * f + dx, y * f + dy, z * f + dz});
                double frac = static_cast<double>(solid) / (f * f * f);
                res.z0(mot::latent_cell_index(x, y, z, ls), 0) =
                    frac > 0.5 ? 1.0f : -1.0f;
            }
    return res;
}

// Cameras on the upper hemisphere around the cube center, looking at the
// center with zero roll, at distances in [1.5, 2.5] and focal lengths drawn
// so the shape cube subtends 60..90 percent of the image.
inline std::vector<std::pair<CameraPose, Intrinsics>> sample_cameras(
    std::uint64_t seed, int count = 32, int image_side = 32) {
    Rng rng = Rng(seed).substream("cams");
    const Vec3 center(0.5, 0.5, 0.5);
    const double bound_radius = 0.4 * std::sqrt(3.0); // sphere around [0.1,0.9]^3

    std::vector<std::pair<CameraPose, Intrinsics>> out;
    for (int i = 0; i < count; ++i) {
        double r = rng.uniform(1.5, 2.5);
        double cos_theta = rng.uniform(0.0, 1.0);
        double sin_theta = std::sqrt(std::max(0.0, 1.0 - cos_theta * cos_theta));
        double phi = rng.uniform(0.0, 2.0 * M_PI);
        Vec3 pos = center + r * Vec3(sin_theta * std::cos(phi),
                                     sin_theta * std::sin(phi), cos_theta);

        Vec3 fwd = (center - pos).normalized();
        Vec3 right = fwd.cross(Vec3::UnitZ());
        if (right.norm() < 1e-9) right = Vec3(1, 0, 0); // looking straight down
        right.normalize();
        Vec3 down = fwd.cross(right);
        Mat3 rot;
        rot.col(0) = right;
        rot.col(1) = down;
        rot.col(2) = fwd;

        double subtense = rng.uniform(0.6, 0.9);
        double half_angle = std::asin(std::min(bound_radius / r, 0.999));
        double focal = subtense * (image_side / 2.0) / std::tan(half_angle);
        out.emplace_back(CameraPose(rot, pos),
                         Intrinsics(focal, focal, image_side / 2.0, image_side / 2.0));
    }
    return out;
}

// Integer DDA traversal of the shape lattice. For each pixel the ray is
// walked voxel to voxel; the first occupied voxel yields the camera-space
// point at the boundary where the ray entered it. Misses stay invalid.
inline PointMap raycast_pointmap(const SparseVoxelGrid& shape, const CameraPose& pose,
                                 const Intrinsics& intr, int height, int width) {
    require(height > 0 && width > 0, "raycast_pointmap: resolution must be positive");
    PointMap pm(height, width);
    const int n = shape.resolution();
    const Mat3 rot = pose.matrix();
    const Vec3 origin = pose.translation;
    const double inf = std::numeric_limits<double>::infinity();

    for (int row = 0; row < height; ++row) {
        for (int col = 0; col < width; ++col) {
            Vec3 dir_cam((col + 0.5 - intr.cx) / intr.fx,
                         (row + 0.5 - intr.cy) / intr.fy, 1.0);
            dir_cam.normalize();
            Vec3 d = rot * dir_cam;

            // Slab intersection with the unit cube.
            double t0 = 0.0, t1 = inf;
            bool miss = false;
            for (int k = 0; k < 3; ++k) {
                if (std::abs(d[k]) < 1e-15) {
                    if (origin[k] < 0.0 || origin[k] > 1.0) miss = true;
                    continue;
                }
                double a = (0.0 - origin[k]) / d[k];
                double b = (1.0 - origin[k]) / d[k];
                if (a > b) std::swap(a, b);
                t0 = std::max(t0, a);
                t1 = std::min(t1, b);
            }
            if (miss || t0 > t1) continue;

            Vec3 entry = origin + t0 * d;
            int cell[3];
            for (int k = 0; k < 3; ++k)
                cell[k] = std::clamp(static_cast<int>(std::floor(entry[k] * n)), 0,
                                     n - 1);
            int step[3];
            double t_max[3], t_delta[3];
            for (int k = 0; k < 3; ++k) {
                if (std::abs(d[k]) < 1e-15) {
                    step[k] = 0;
                    t_max[k] = inf;
                    t_delta[k] = inf;
                    continue;
                }
                step[k] = d[k] > 0 ? 1 : -1;
                double boundary = (cell[k] + (d[k] > 0 ? 1 : 0)) / static_cast<double>(n);
                t_max[k] = (boundary - origin[k]) / d[k];
                t_delta[k] = 1.0 / (n * std::abs(d[k]));
            }

            double t_current = t0;
            while (true) {
                if (shape.contains(Vec3i{cell[0], cell[1], cell[2]})) {
                    pm.set(row, col, t_current * dir_cam);
                    break;
                }
                int axis = 0;
                if (t_max[1] < t_max[axis]) axis = 1;
                if (t_max[2] < t_max[axis]) axis = 2;
                t_current = t_max[axis];
                cell[axis] += step[axis];
                if (cell[axis] < 0 || cell[axis] >= n) break;
                t_max[axis] += t_delta[axis];
            }
        }
    }
    return pm;
}

enum class ViewSampleMode { Random, Nearest, Farthest };

namespace detail {
inline double inf() { return std::numeric_limits<double>::infinity(); }
} // namespace detail

// Draws the view-sampling mode with the training mixture probabilities
// 0.2 / 0.4 / 0.4.
inline ViewSampleMode draw_view_mode(Rng& rng) {
    double u = rng.uniform();
    if (u < 0.2) return ViewSampleMode::Random;
    if (u < 0.6) return ViewSampleMode::Nearest;
    return ViewSampleMode::Farthest;
}

// Selects n distinct view indices. Random picks uniformly without
// replacement; Nearest picks one view and its n-1 closest camera
// positions; Farthest greedily maximizes the minimum distance to the
// already selected cameras from a uniform start.
inline std::vector<int> sample_views(const std::vector<Vec3>& positions, int n,
                                     ViewSampleMode mode, Rng& rng) {
    const int total = static_cast<int>(positions.size());
    if (n < 1 || n > total)
        throw InvalidCount("sample_views: need 1 <= n <= camera count");

    std::vector<int> out;
    switch (mode) {
        case ViewSampleMode::Random: {
            std::vector<int> idx(total);
            for (int i = 0; i < total; ++i) idx[i] = i;
            for (int i = 0; i < n; ++i) {
                int j = i + static_cast<int>(rng.uniform_index(total - i));
                std::swap(idx[i], idx[j]);
                out.push_back(idx[i]);
            }
            break;
        }
        case ViewSampleMode::Nearest: {
            int anchor = static_cast<int>(rng.uniform_index(total));
            std::vector<std::pair<double, int>> by_dist;
            for (int i = 0; i < total; ++i)
                by_dist.emplace_back((positions[i] - positions[anchor]).squaredNorm(),
                                     i);
            std::sort(by_dist.begin(), by_dist.end());
            for (int i = 0; i < n; ++i) out.push_back(by_dist[i].second);
            break;
        }
        case ViewSampleMode::Farthest: {
            int start = static_cast<int>(rng.uniform_index(total));
            out.push_back(start);
            std::vector<double> min_d(total, detail::inf());
            while (static_cast<int>(out.size()) < n) {
                int last = out.back();
                int best = -1;
                double best_d = -1.0;
                for (int i = 0; i < total; ++i) {
                    min_d[i] = std::min(min_d[i],
                                        (positions[i] - positions[last]).squaredNorm());
                    if (std::find(out.begin(), out.end(), i) != out.end()) continue;
                    if (min_d[i] > best_d) {
                        best_d = min_d[i];
                        best = i;
                    }
                }
                out.push_back(best);
            }
            break;
        }
    }
    return out;
}

inline std::vector<Vec3> camera_positions(const Scene& scene) {
    std::vector<Vec3> out;
    for (const auto& c : scene.cameras) out.push_back(c.translation);
    return out;
}

// Assembles a full scene. In the misaligned variant the stored poses and
// camera-space points live in a frame offset from the cube by a random
// yaw + scale, and gt_similarity carries the correction, so
// s(R(R_i X_i + T_i) + T) always lands in cube space.
inline Scene make_scene(std::uint64_t seed, const SceneOptions& opts = {}) {
    Scene scene;
    scene.seed = seed;
    scene.opts = opts;

    ShapeResult shape = generate_shape(seed, opts);
    scene.shape = std::move(shape.grid);
    scene.z0 = std::move(shape.z0);

    auto cams = sample_cameras(seed, opts.camera_count, opts.image_side);

    SimilarityTransform sim; // identity by default
    if (opts.misaligned) {
        Rng rng = Rng(seed).substream("sim");
        double s = rng.uniform(0.8, 1.25);
        Quat yaw(Eigen::AngleAxisd(rng.uniform(0.0, 2.0 * M_PI), Vec3::UnitZ()));
        sim = SimilarityTransform(s, yaw, Vec3::Zero());
    }
    scene.gt_similarity = sim;

    for (const auto& [pose, intr] : cams) {
        PointMap pm = raycast_pointmap(scene.shape, pose, intr, opts.image_side,
                                       opts.image_side);
        // Move into the feed-forward frame: X' = X / s keeps pixel rays
        // intact; R' = R_sim^T R, T' = R_sim^T T / s - T_sim undoes the
        // similarity so the full chain returns to cube space.
        Quat rs = sim.rotation.conjugate();
        CameraPose stored(rs * pose.rotation,
                          (rs * pose.translation) / sim.scale - sim.translation);
        if (sim.scale != 1.0)
            for (std::size_t i = 0; i < pm.points.size(); ++i)
                if (pm.valid[i]) pm.points[i] /= sim.scale;
        scene.point_maps.push_back(std::move(pm));
        scene.cameras.push_back(stored);
        scene.intrinsics.push_back(intr);
    }
    return scene;
}

// Rendered model input for one view: per-patch rows of (depth, mask, 1)
// pixel channels built from the stored camera-space point map.
template <class T>
nn::Mat<T> render_view(const Scene& scene, int view, int patch) {
    const PointMap& pm = scene.point_maps[view];
    const int side = pm.height;
    require(side % patch == 0, "render_view: patch must divide image side");
    const int per_row = side / patch;
    nn::Mat<T> out(per_row * per_row, patch * patch * 3);
    for (int pr = 0; pr < per_row; ++pr)
        for (int pc = 0; pc < per_row; ++pc)
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx) {
                    int r = pr * patch + dy, c = pc * patch + dx;
                    bool valid = pm.is_valid(r, c);
                    Eigen::Index row = static_cast<Eigen::Index>(pr) * per_row + pc;
                    Eigen::Index col0 = (static_cast<Eigen::Index>(dy) * patch + dx) * 3;
                    out(row, col0 + 0) =
                        valid ? static_cast<T>(pm.at(r, c).z()) : T(0);
                    out(row, col0 + 1) = valid ? T(1) : T(0);
                    out(row, col0 + 2) = T(1);
                }
    return out;
}

template <class T>
std::vector<nn::Mat<T>> render_views(const Scene& scene, const std::vector<int>& views,
                                     int patch) {
    std::vector<nn::Mat<T>> out;
    for (int v : views) out.push_back(render_view<T>(scene, v, patch));
    return out;
}

} // namespace mixrec::synth
