#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mixrec/common.hpp"

namespace mixrec {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

struct Vec3i {
    int x = 0, y = 0, z = 0;
    bool operator==(const Vec3i&) const = default;
    bool operator<(const Vec3i& o) const {
        if (x != o.x) return x < o.x;
        if (y != o.y) return y < o.y;
        return z < o.z;
    }
};

struct Vec3iHash {
    std::size_t operator()(const Vec3i& v) const {
        std::uint64_t h = 1469598103934665603ULL;
        for (std::uint64_t c : {std::uint64_t(std::uint32_t(v.x)),
                                std::uint64_t(std::uint32_t(v.y)),
                                std::uint64_t(std::uint32_t(v.z))}) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        return static_cast<std::size_t>(h);
    }
};

// Occupancy over a cubic lattice covering the normalized shape cube
// [0,1)^3. Occupied voxels are kept in a stable lexicographic order so
// that token indices derived from the grid are reproducible.
class SparseVoxelGrid {
public:
    explicit SparseVoxelGrid(int resolution) : resolution_(resolution) {
        require(resolution >= 1, "SparseVoxelGrid: resolution must be >= 1");
    }

    int resolution() const { return resolution_; }

    bool contains(const Vec3i& v) const { return lookup_.count(v) > 0; }

    void insert(const Vec3i& v) {
        require(in_bounds(v), "SparseVoxelGrid: voxel out of bounds");
        if (lookup_.insert(v).second) {
            auto it = std::lower_bound(occupied_.begin(), occupied_.end(), v);
            occupied_.insert(it, v);
        }
    }

    // Occupied voxels in lexicographic (x, y, z) order. The position of a
    // voxel in this list is its token index.
    const std::vector<Vec3i>& occupied() const { return occupied_; }

    std::size_t size() const { return occupied_.size(); }

    int token_index(const Vec3i& v) const {
        auto it = std::lower_bound(occupied_.begin(), occupied_.end(), v);
        if (it == occupied_.end() || !(*it == v)) return -1;
        return static_cast<int>(it - occupied_.begin());
    }

    bool in_bounds(const Vec3i& v) const {
        return v.x >= 0 && v.y >= 0 && v.z >= 0 && v.x < resolution_ &&
               v.y < resolution_ && v.z < resolution_;
    }

    // Optional per-voxel feature vectors; keys must already be occupied.
    void set_feature(const Vec3i& v, const Eigen::VectorXd& f) {
        require(contains(v), "SparseVoxelGrid: feature key must be an occupied voxel");
        if (!features_.empty())
            require(f.size() == feature_dim_, "SparseVoxelGrid: inconsistent feature dim");
        else
            feature_dim_ = f.size();
        features_[v] = f;
    }

    const Eigen::VectorXd* feature(const Vec3i& v) const {
        auto it = features_.find(v);
        return it == features_.end() ? nullptr : &it->second;
    }

    std::size_t feature_count() const { return features_.size(); }

private:
    int resolution_;
    std::vector<Vec3i> occupied_;
    std::unordered_set<Vec3i, Vec3iHash> lookup_;
    std::unordered_map<Vec3i, Eigen::VectorXd, Vec3iHash> features_;
    Eigen::Index feature_dim_ = 0;
};

// Per-pixel 3D points with a validity mask. Points at invalid pixels are
// ignored by every consumer.
struct PointMap {
    int height = 0;
    int width = 0;
    std::vector<Vec3> points; // row-major, height*width entries
    std::vector<std::uint8_t> valid;

    PointMap() = default;
    PointMap(int h, int w)
        : height(h), width(w), points(static_cast<std::size_t>(h) * w, Vec3::Zero()),
          valid(static_cast<std::size_t>(h) * w, 0) {
        require(h > 0 && w > 0, "PointMap: dimensions must be positive");
    }

    std::size_t index(int row, int col) const {
        return static_cast<std::size_t>(row) * width + col;
    }
    Vec3& at(int row, int col) { return points[index(row, col)]; }
    const Vec3& at(int row, int col) const { return points[index(row, col)]; }
    bool is_valid(int row, int col) const { return valid[index(row, col)] != 0; }
    void set(int row, int col, const Vec3& p, bool v = true) {
        points[index(row, col)] = p;
        valid[index(row, col)] = v ? 1 : 0;
    }
    std::size_t valid_count() const {
        std::size_t n = 0;
        for (auto v : valid) n += v != 0;
        return n;
    }
};

// Rigid camera-to-world transform. The quaternion is renormalized on
// construction so downstream orthonormality holds to 1e-9.
struct CameraPose {
    Quat rotation = Quat::Identity();
    Vec3 translation = Vec3::Zero();

    CameraPose() = default;
    CameraPose(const Quat& q, const Vec3& t) : rotation(q.normalized()), translation(t) {
        require(q.norm() > 1e-12, "CameraPose: quaternion norm too small");
    }
    CameraPose(const Mat3& r, const Vec3& t) : rotation(Quat(r).normalized()), translation(t) {}

    Mat3 matrix() const { return rotation.toRotationMatrix(); }

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    CameraPose inverse() const {
        Quat qi = rotation.conjugate();
        return CameraPose(qi, -(qi * translation));
    }
};

// Scale + rotation + translation acting as p -> s * (R * p + T). The outer
// placement of the scale is the library-wide composition convention.
struct SimilarityTransform {
    double scale = 1.0;
    Quat rotation = Quat::Identity();
    Vec3 translation = Vec3::Zero();

    SimilarityTransform() = default;
    SimilarityTransform(double s, const Quat& q, const Vec3& t)
        : scale(s), rotation(q.normalized()), translation(t) {
        require(s > 0.0, "SimilarityTransform: scale must be positive");
    }

    Vec3 apply(const Vec3& p) const { return scale * (rotation * p + translation); }

    SimilarityTransform inverse() const {
        // q = s(Rp + T)  =>  p = (1/s) R^T q - R^T T
        Quat qi = rotation.conjugate();
        return SimilarityTransform(1.0 / scale, qi, -scale * (qi * translation));
    }

    // this ∘ other: applies `other` first.
    SimilarityTransform compose(const SimilarityTransform& other) const {
        // s2(R2(s1(R1 p + T1)) + T2) = (s2 s1)((R2 R1) p + R2 T1 + T2/s1)
        double s = scale * other.scale;
        Quat q = (rotation * other.rotation).normalized();
        Vec3 t = rotation * other.translation + translation / other.scale;
        return SimilarityTransform(s, q, t);
    }
};

// Pinhole intrinsics in pixels.
struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

    Intrinsics() = default;
    Intrinsics(double fx_, double fy_, double cx_, double cy_)
        : fx(fx_), fy(fy_), cx(cx_), cy(cy_) {
        require(fx > 0.0 && fy > 0.0, "Intrinsics: focal lengths must be positive");
    }
};

inline PointMap apply_pose(const CameraPose& pose, const PointMap& pm) {
    PointMap out = pm;
    for (std::size_t i = 0; i < out.points.size(); ++i)
        if (out.valid[i]) out.points[i] = pose.apply(out.points[i]);
    return out;
}

inline PointMap apply_similarity(const SimilarityTransform& sim, const PointMap& pm) {
    PointMap out = pm;
    for (std::size_t i = 0; i < out.points.size(); ++i)
        if (out.valid[i]) out.points[i] = sim.apply(out.points[i]);
    return out;
}

// Pose followed by similarity; implemented as the literal composition so
// it is bit-identical to the two-step form.
inline PointMap aligned_pointmap(const PointMap& pm, const CameraPose& pose,
                                 const SimilarityTransform& sim) {
    return apply_similarity(sim, apply_pose(pose, pm));
}

// Normals from point-map finite differences.
//
// Convention: d_u is the difference along columns (u, to the right), d_v
// along rows (v, downward), and the normal is normalize(d_u x d_v).
// Central differences are used where both neighbors are valid, one-sided
// differences at borders or next to invalid pixels. A normal is invalid
// when a required neighbor is invalid or the cross product is degenerate.
inline PointMap pointmap_normals(const PointMap& pm) {
    if (pm.height < 2 || pm.width < 2)
        throw InvalidArgument("pointmap_normals: needs at least a 2x2 grid");
    PointMap out(pm.height, pm.width);

    auto diff_along = [&](int r, int c, bool along_u, Vec3& d) -> bool {
        int pr = r, pc = c, nr = r, nc = c;
        if (along_u) { pc = c - 1; nc = c + 1; } else { pr = r - 1; nr = r + 1; }
        auto ok = [&](int rr, int cc) {
            return rr >= 0 && cc >= 0 && rr < pm.height && cc < pm.width &&
                   pm.is_valid(rr, cc);
        };
        bool has_prev = ok(pr, pc), has_next = ok(nr, nc);
        if (has_prev && has_next) {
            d = pm.at(nr, nc) - pm.at(pr, pc);
            return true;
        }
        if (has_next) { d = pm.at(nr, nc) - pm.at(r, c); return true; }
        if (has_prev) { d = pm.at(r, c) - pm.at(pr, pc); return true; }
        return false;
    };

    for (int r = 0; r < pm.height; ++r) {
        for (int c = 0; c < pm.width; ++c) {
            if (!pm.is_valid(r, c)) continue;
            Vec3 du, dv;
            if (!diff_along(r, c, true, du) || !diff_along(r, c, false, dv)) continue;
            Vec3 n = du.cross(dv);
            double len = n.norm();
            if (len < 1e-12) continue;
            out.set(r, c, n / len);
        }
    }
    return out;
}

struct VoxelizeResult {
    std::unordered_map<Vec3i, int, Vec3iHash> counts;
    std::size_t dropped = 0; // points outside [0,1)^3
};

// Maps points in the unit cube to voxel indices floor(p * N); points
// outside [0,1)^3 are dropped and reported.
inline VoxelizeResult voxelize_points(const std::vector<Vec3>& points, int resolution) {
    require(resolution >= 1, "voxelize_points: resolution must be >= 1");
    VoxelizeResult res;
    for (const Vec3& p : points) {
        if (p.x() < 0.0 || p.y() < 0.0 || p.z() < 0.0 || p.x() >= 1.0 ||
            p.y() >= 1.0 || p.z() >= 1.0) {
            ++res.dropped;
            continue;
        }
        Vec3i v{static_cast<int>(std::floor(p.x() * resolution)),
                static_cast<int>(std::floor(p.y() * resolution)),
                static_cast<int>(std::floor(p.z() * resolution))};
        // floor(p*N) can hit N when p*N rounds up to exactly N; clamp.
        v.x = std::min(v.x, resolution - 1);
        v.y = std::min(v.y, resolution - 1);
        v.z = std::min(v.z, resolution - 1);
        ++res.counts[v];
    }
    return res;
}

inline std::optional<Vec3i> voxel_of(const Vec3& p, int resolution) {
    if (p.x() < 0.0 || p.y() < 0.0 || p.z() < 0.0 || p.x() >= 1.0 || p.y() >= 1.0 ||
        p.z() >= 1.0)
        return std::nullopt;
    Vec3i v{static_cast<int>(std::floor(p.x() * resolution)),
            static_cast<int>(std::floor(p.y() * resolution)),
            static_cast<int>(std::floor(p.z() * resolution))};
    v.x = std::min(v.x, resolution - 1);
    v.y = std::min(v.y, resolution - 1);
    v.z = std::min(v.z, resolution - 1);
    return v;
}

// Geodesic angle between two rotations, in degrees. The atan2 form stays
// accurate near 0 and 180 degrees where acos loses precision.
inline double rotation_angle_deg(const Quat& a, const Quat& b) {
    Quat d = (a.normalized().conjugate() * b.normalized()).normalized();
    double vec = d.vec().norm();
    double w = std::abs(d.w());
    return 2.0 * std::atan2(vec, w) * 180.0 / M_PI;
}

// Rotation of `v` by the unit quaternion (w, u): v + 2w(u x v) + 2 u x (u x v).
inline Vec3 quat_rotate(const Quat& q, const Vec3& v) { return q * v; }

// Vector-Jacobian product of v' = R(q_normalized(p)) v with respect to the
// point and the *unnormalized* quaternion p. Shared by the camera refiner
// and the model's pose heads.
struct QuatRotateGrad {
    Vec3 d_point;
    Eigen::Vector4d d_quat; // (w, x, y, z) of the unnormalized quaternion
};

inline QuatRotateGrad quat_rotate_vjp(const Eigen::Vector4d& p_unnorm, const Vec3& v,
                                      const Vec3& grad_out) {
    double n = p_unnorm.norm();
    Eigen::Vector4d qh = p_unnorm / n;
    Quat q(qh[0], qh[1], qh[2], qh[3]);
    Vec3 u(qh[1], qh[2], qh[3]);
    double w = qh[0];

    QuatRotateGrad g;
    g.d_point = q.conjugate() * grad_out;

    Vec3 c1 = u.cross(v);
    double gw = 2.0 * grad_out.dot(c1);
    Vec3 gu = 2.0 * w * v.cross(grad_out) + 2.0 * c1.cross(grad_out) +
              2.0 * v.cross(grad_out.cross(u));
    Eigen::Vector4d g_unit(gw, gu.x(), gu.y(), gu.z());
    // Through normalization: (I - qh qh^T) / n.
    g.d_quat = (g_unit - qh * qh.dot(g_unit)) / n;
    return g;
}

} // namespace mixrec
