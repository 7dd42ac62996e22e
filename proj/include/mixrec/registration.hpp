#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>
#include <vector>

#include "mixrec/common.hpp"
#include "mixrec/geometry.hpp"

namespace mixrec {

struct IcpConfig {
    int max_iterations = 50;
    double convergence_tol = 1e-6; // relative change in residual
    int sample_count = 10000;      // points sampled per cloud
    bool with_scale = true;

    void validate() const {
        require(max_iterations >= 1, "IcpConfig: max_iterations must be >= 1");
        require(convergence_tol > 0, "IcpConfig: convergence_tol must be positive");
        require(sample_count >= 3, "IcpConfig: sample_count must be >= 3");
    }
};

// Least-squares similarity from index-aligned correspondences: minimizes
// sum ||s*(R*src + T) - dst||^2 (Umeyama, with reflection guard).
inline SimilarityTransform fit_similarity(const std::vector<Vec3>& src,
                                          const std::vector<Vec3>& dst,
                                          bool with_scale = true) {
    if (src.size() != dst.size() || src.size() < 3)
        throw DegenerateInput("fit_similarity: needs >= 3 index-aligned pairs");
    const double n = static_cast<double>(src.size());

    Vec3 mu_s = Vec3::Zero(), mu_d = Vec3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
        mu_s += src[i];
        mu_d += dst[i];
    }
    mu_s /= n;
    mu_d /= n;

    double var_s = 0.0;
    Mat3 cov = Mat3::Zero();
    for (std::size_t i = 0; i < src.size(); ++i) {
        Vec3 ds = src[i] - mu_s;
        Vec3 dd = dst[i] - mu_d;
        var_s += ds.squaredNorm();
        cov += dd * ds.transpose();
    }
    var_s /= n;
    cov /= n;

    if (var_s < 1e-15) throw DegenerateInput("fit_similarity: source has no variance");

    Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vec3 sv = svd.singularValues();
    if (sv[1] <= 1e-12 * std::max(sv[0], 1e-300))
        throw DegenerateInput("fit_similarity: cross-covariance rank < 2");

    Mat3 S = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) S(2, 2) = -1;
    Mat3 R = svd.matrixU() * S * svd.matrixV().transpose();

    double scale = 1.0;
    if (with_scale) scale = (sv.asDiagonal().toDenseMatrix() * S).trace() / var_s;
    if (scale <= 0) throw DegenerateInput("fit_similarity: non-positive scale");

    // Standard form x -> scale*R*x + t0 with t0 = mu_d - scale*R*mu_s; ours
    // is x -> scale*(R*x + T), so T = t0 / scale.
    Vec3 t0 = mu_d - scale * (R * mu_s);
    return SimilarityTransform(scale, Quat(R), t0 / scale);
}

namespace detail {

// Uniform spatial hash over the target cloud; cell size defaults to
// diameter / 32. Exact nearest neighbor via expanding shell search.
class SpatialHashIndex {
public:
    explicit SpatialHashIndex(const std::vector<Vec3>& points) : points_(points) {
        require(!points.empty(), "SpatialHashIndex: empty cloud");
        lo_ = hi_ = points[0];
        for (const Vec3& p : points) {
            lo_ = lo_.cwiseMin(p);
            hi_ = hi_.cwiseMax(p);
        }
        double diameter = (hi_ - lo_).norm();
        cell_ = diameter > 0 ? diameter / 32.0 : 1.0;
        key_hi_ = key_of(hi_);
        for (std::size_t i = 0; i < points.size(); ++i)
            cells_[key_of(points[i])].push_back(static_cast<int>(i));
    }

    // Returns (index, distance). Exact: expanding Chebyshev shells around
    // the query cell; any point in shell k is at least (k-1)*cell away,
    // which bounds when the search can stop.
    std::pair<int, double> nearest(const Vec3& q) const {
        Vec3i qk = key_of(q);
        // Shell radius that covers every occupied cell from qk.
        int cover = 0;
        cover = std::max(cover, std::max(qk.x - 0, key_hi_.x - qk.x));
        cover = std::max(cover, std::max(qk.y - 0, key_hi_.y - qk.y));
        cover = std::max(cover, std::max(qk.z - 0, key_hi_.z - qk.z));
        cover = std::max(cover, 0);

        int best = -1;
        double best_d2 = std::numeric_limits<double>::infinity();
        for (int k = 0; k <= cover; ++k) {
            if (best >= 0) {
                double bound = (k - 1) * cell_;
                if (bound > 0 && bound * bound >= best_d2) break;
            }
            scan_shell(qk, k, q, best, best_d2);
        }
        return {best, std::sqrt(best_d2)};
    }

    const std::vector<Vec3>& points() const { return points_; }

private:
    Vec3i key_of(const Vec3& p) const {
        return Vec3i{static_cast<int>(std::floor((p.x() - lo_.x()) / cell_)),
                     static_cast<int>(std::floor((p.y() - lo_.y()) / cell_)),
                     static_cast<int>(std::floor((p.z() - lo_.z()) / cell_))};
    }

    void scan_shell(const Vec3i& qk, int k, const Vec3& q, int& best,
                    double& best_d2) const {
        auto visit = [&](int x, int y, int z) {
            auto it = cells_.find(Vec3i{x, y, z});
            if (it == cells_.end()) return;
            for (int idx : it->second) {
                double d2 = (points_[idx] - q).squaredNorm();
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = idx;
                }
            }
        };
        if (k == 0) {
            visit(qk.x, qk.y, qk.z);
            return;
        }
        // Walk only the six faces of the shell.
        for (int dy = -k; dy <= k; ++dy)
            for (int dz = -k; dz <= k; ++dz) {
                visit(qk.x - k, qk.y + dy, qk.z + dz);
                visit(qk.x + k, qk.y + dy, qk.z + dz);
            }
        for (int dx = -k + 1; dx <= k - 1; ++dx)
            for (int dz = -k; dz <= k; ++dz) {
                visit(qk.x + dx, qk.y - k, qk.z + dz);
                visit(qk.x + dx, qk.y + k, qk.z + dz);
            }
        for (int dx = -k + 1; dx <= k - 1; ++dx)
            for (int dy = -k + 1; dy <= k - 1; ++dy) {
                visit(qk.x + dx, qk.y + dy, qk.z - k);
                visit(qk.x + dx, qk.y + dy, qk.z + k);
            }
    }

    const std::vector<Vec3>& points_;
    Vec3 lo_, hi_;
    Vec3i key_hi_{};
    double cell_ = 1.0;
    std::unordered_map<Vec3i, std::vector<int>, Vec3iHash> cells_;
};

inline std::vector<Vec3> subsample(const std::vector<Vec3>& pts, int target) {
    if (static_cast<int>(pts.size()) <= target) return pts;
    std::vector<Vec3> out;
    out.reserve(target);
    double stride = static_cast<double>(pts.size()) / target;
    for (int i = 0; i < target; ++i)
        out.push_back(pts[static_cast<std::size_t>(i * stride)]);
    return out;
}

inline double cloud_diameter(const std::vector<Vec3>& pts) {
    Vec3 lo = pts[0], hi = pts[0];
    for (const Vec3& p : pts) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    return (hi - lo).norm();
}

} // namespace detail

struct IcpResult {
    SimilarityTransform transform; // init composed in
    double residual = 0.0;         // final RMS point-to-nearest distance
    int iterations = 0;
    std::vector<double> residual_trace;
};

// Iterative closest point with a closed-form similarity update. Residual
// is the RMS nearest-neighbor distance; an iteration is only accepted if
// it does not increase the residual, which keeps the trace nonincreasing.
inline IcpResult icp_align(const std::vector<Vec3>& src, const std::vector<Vec3>& dst,
                           const SimilarityTransform& init, const IcpConfig& cfg = {}) {
    cfg.validate();
    if (src.size() < 3 || dst.size() < 3)
        throw DegenerateInput("icp_align: both clouds need >= 3 points");

    std::vector<Vec3> s = detail::subsample(src, cfg.sample_count);
    std::vector<Vec3> d = detail::subsample(dst, cfg.sample_count);
    detail::SpatialHashIndex index(d);

    IcpResult res;
    res.transform = init;

    auto rms_and_matches = [&](const SimilarityTransform& T,
                               std::vector<Vec3>& moved,
                               std::vector<Vec3>& matched) -> double {
        moved.resize(s.size());
        matched.resize(s.size());
        double acc = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            moved[i] = T.apply(s[i]);
            auto [j, dist] = index.nearest(moved[i]);
            matched[i] = d[static_cast<std::size_t>(j)];
            acc += dist * dist;
        }
        return std::sqrt(acc / static_cast<double>(s.size()));
    };

    std::vector<Vec3> moved, matched;
    double residual = rms_and_matches(res.transform, moved, matched);
    res.residual_trace.push_back(residual);

    for (int it = 0; it < cfg.max_iterations; ++it) {
        SimilarityTransform corr = fit_similarity(moved, matched, cfg.with_scale);
        SimilarityTransform candidate = corr.compose(res.transform);
        std::vector<Vec3> moved2, matched2;
        double r2 = rms_and_matches(candidate, moved2, matched2);
        if (r2 > residual) break; // never accept a worse step
        res.transform = candidate;
        moved.swap(moved2);
        matched.swap(matched2);
        res.iterations = it + 1;
        double rel = residual > 0 ? (residual - r2) / residual : 0.0;
        residual = r2;
        res.residual_trace.push_back(residual);
        if (residual == 0.0 || rel < cfg.convergence_tol) break;
    }
    res.residual = residual;
    return res;
}

// Symmetric Chamfer distance with absolute (not squared) distances:
// 0.5 * (mean_a min_b ||a-b|| + mean_b min_a ||a-b||).
inline double chamfer_distance(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    if (a.empty() || b.empty()) throw EmptyCloud("chamfer_distance: empty input cloud");
    detail::SpatialHashIndex ia(a), ib(b);
    double da = 0.0, db = 0.0;
    for (const Vec3& p : a) da += ib.nearest(p).second;
    for (const Vec3& p : b) db += ia.nearest(p).second;
    return 0.5 * (da / static_cast<double>(a.size()) + db / static_cast<double>(b.size()));
}

// Evaluation-time alignment for methods without pose estimates: try the
// four yaw rotations about z after normalizing both clouds to zero
// centroid and unit RMS radius, keep the one with minimal Chamfer
// distance (ties broken by smallest angle), then refine with ICP.
inline IcpResult align_with_orientation_trials(const std::vector<Vec3>& src,
                                               const std::vector<Vec3>& dst,
                                               const IcpConfig& cfg = {}) {
    if (src.size() < 3 || dst.size() < 3)
        throw DegenerateInput("align_with_orientation_trials: clouds too small");

    auto normalizer = [](const std::vector<Vec3>& pts) {
        Vec3 mu = Vec3::Zero();
        for (const Vec3& p : pts) mu += p;
        mu /= static_cast<double>(pts.size());
        double rms = 0.0;
        for (const Vec3& p : pts) rms += (p - mu).squaredNorm();
        rms = std::sqrt(rms / static_cast<double>(pts.size()));
        if (rms < 1e-15) rms = 1.0;
        // p -> (p - mu) / rms as s*(R*p + T)
        return SimilarityTransform(1.0 / rms, Quat::Identity(), -mu);
    };

    SimilarityTransform norm_src = normalizer(src);
    SimilarityTransform norm_dst = normalizer(dst);
    SimilarityTransform denorm_dst = norm_dst.inverse();

    std::vector<Vec3> src_n, dst_n;
    src_n.reserve(src.size());
    dst_n.reserve(dst.size());
    for (const Vec3& p : detail::subsample(src, cfg.sample_count))
        src_n.push_back(norm_src.apply(p));
    for (const Vec3& p : detail::subsample(dst, cfg.sample_count))
        dst_n.push_back(norm_dst.apply(p));

    double best_cd = std::numeric_limits<double>::infinity();
    SimilarityTransform best_yaw;
    for (int k = 0; k < 4; ++k) {
        Quat yaw(Eigen::AngleAxisd(k * M_PI / 2.0, Vec3::UnitZ()));
        SimilarityTransform trial(1.0, yaw, Vec3::Zero());
        std::vector<Vec3> rotated;
        rotated.reserve(src_n.size());
        for (const Vec3& p : src_n) rotated.push_back(trial.apply(p));
        double cd = chamfer_distance(rotated, dst_n);
        if (cd < best_cd) {
            best_cd = cd;
            best_yaw = trial;
        }
    }

    SimilarityTransform init = denorm_dst.compose(best_yaw.compose(norm_src));
    // Rigid pass first: with the clouds scale-normalized, letting the scale
    // float from a coarse initialization can collapse it into a shrunken
    // local minimum. Lock the rotation rigidly, then refine with scale.
    if (cfg.with_scale) {
        IcpConfig rigid = cfg;
        rigid.with_scale = false;
        init = icp_align(src, dst, init, rigid).transform;
    }
    return icp_align(src, dst, init, cfg);
}

// Single rotation minimizing sum ||R * R_pred_i - R_gt_i||_F^2 over all
// pose pairs (orthogonal Procrustes over stacked rotations).
inline Quat align_from_poses(const std::vector<CameraPose>& pred,
                             const std::vector<CameraPose>& gt) {
    if (pred.size() != gt.size() || pred.size() < 2)
        throw DegenerateInput("align_from_poses: needs >= 2 pose pairs");
    Mat3 m = Mat3::Zero();
    for (std::size_t i = 0; i < pred.size(); ++i)
        m += gt[i].matrix() * pred[i].matrix().transpose();
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 S = Mat3::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) S(2, 2) = -1;
    return Quat(Mat3(svd.matrixU() * S * svd.matrixV().transpose()));
}

// Mean distance between corresponding valid pixels, computed after a
// similarity alignment of the predicted points onto the ground truth.
inline double pixel_error(const PointMap& pred, const PointMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw ShapeMismatch("pixel_error: dimensions differ");
    std::vector<Vec3> p, g;
    for (std::size_t i = 0; i < pred.points.size(); ++i)
        if (pred.valid[i] && gt.valid[i]) {
            p.push_back(pred.points[i]);
            g.push_back(gt.points[i]);
        }
    if (p.empty()) throw EmptyOverlap("pixel_error: no jointly valid pixels");
    SimilarityTransform align = fit_similarity(p, g, true);
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += (align.apply(p[i]) - g[i]).norm();
    return acc / static_cast<double>(p.size());
}

} // namespace mixrec
