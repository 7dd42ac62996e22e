#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "mixrec/common.hpp"
#include "mixrec/geometry.hpp"

namespace mixrec {

// Assigns every image patch a globally unique index in view-major order:
// patch k of view v has global index v * patches_per_view + k.
struct PatchLayout {
    int patch_size = 4;
    int height = 0, width = 0;
    int view_count = 0;

    PatchLayout() = default;
    PatchLayout(int patch, int h, int w, int views)
        : patch_size(patch), height(h), width(w), view_count(views) {
        require(patch >= 1 && h >= 1 && w >= 1 && views >= 1,
                "PatchLayout: all dimensions must be positive");
        require(h % patch == 0 && w % patch == 0,
                "PatchLayout: patch size must divide height and width");
    }

    int patches_per_row() const { return width / patch_size; }
    int patches_per_col() const { return height / patch_size; }
    int patches_per_view() const { return patches_per_row() * patches_per_col(); }
    int total_patches() const { return view_count * patches_per_view(); }

    int patch_of(int view, int row, int col) const {
        return view * patches_per_view() + (row / patch_size) * patches_per_row() +
               (col / patch_size);
    }

    struct PatchRect {
        int view, row0, col0, size;
    };
    PatchRect rect_of(int patch_index) const {
        int view = patch_index / patches_per_view();
        int local = patch_index % patches_per_view();
        int pr = local / patches_per_row();
        int pc = local % patches_per_row();
        return {view, pr * patch_size, pc * patch_size, patch_size};
    }
};

// Sparse per-voxel-token overlap counts against image patches. Row order
// matches the voxel grid's occupied list; absent entries mean zero.
struct OverlapTable {
    int n_voxels = 0;
    int n_patches = 0;
    // rows[j] holds (patch index, count) sorted by patch index.
    std::vector<std::vector<std::pair<int, int>>> rows;
    // Diagnostics: aligned points that fell outside the cube, or into
    // voxels absent from the occupied set. Either indicates a stage-1
    // misalignment upstream.
    std::size_t points_outside_cube = 0;
    std::size_t points_in_unoccupied = 0;

    int count(int voxel_token, int patch) const {
        const auto& row = rows[voxel_token];
        auto it = std::lower_bound(row.begin(), row.end(), patch,
                                   [](const auto& e, int p) { return e.first < p; });
        return (it != row.end() && it->first == patch) ? it->second : 0;
    }
};

// Counts, for every occupied voxel, how many aligned point-map points of
// each image patch land inside it.
inline OverlapTable compute_overlaps(const SparseVoxelGrid& grid,
                                     const std::vector<PointMap>& aligned_pms,
                                     const PatchLayout& layout) {
    if (static_cast<int>(aligned_pms.size()) != layout.view_count)
        throw LayoutMismatch("compute_overlaps: view count differs from layout");
    for (const PointMap& pm : aligned_pms)
        if (pm.height != layout.height || pm.width != layout.width)
            throw LayoutMismatch("compute_overlaps: point map dims differ from layout");

    OverlapTable table;
    table.n_voxels = static_cast<int>(grid.size());
    table.n_patches = layout.total_patches();
    std::vector<std::vector<std::pair<int, int>>> unsorted(grid.size());

    for (int v = 0; v < layout.view_count; ++v) {
        const PointMap& pm = aligned_pms[v];
        for (int r = 0; r < pm.height; ++r)
            for (int c = 0; c < pm.width; ++c) {
                if (!pm.is_valid(r, c)) continue;
                auto vox = voxel_of(pm.at(r, c), grid.resolution());
                if (!vox) {
                    ++table.points_outside_cube;
                    continue;
                }
                int token = grid.token_index(*vox);
                if (token < 0) {
                    ++table.points_in_unoccupied;
                    continue;
                }
                unsorted[token].emplace_back(layout.patch_of(v, r, c), 1);
            }
    }

    table.rows.resize(grid.size());
    for (std::size_t j = 0; j < unsorted.size(); ++j) {
        auto& src = unsorted[j];
        std::sort(src.begin(), src.end());
        auto& dst = table.rows[j];
        for (const auto& [patch, one] : src) {
            if (!dst.empty() && dst.back().first == patch)
                dst.back().second += one;
            else
                dst.emplace_back(patch, one);
        }
    }
    return table;
}

// Average point count of a voxel: total overlap divided by the number of
// patches with positive overlap; zero when nothing overlaps.
inline double average_point_count(const OverlapTable& table, int voxel_token) {
    const auto& row = table.rows[voxel_token];
    if (row.empty()) return 0.0;
    long total = 0;
    for (const auto& [patch, c] : row) total += c;
    return static_cast<double>(total) / static_cast<double>(row.size());
}

// Nonnegative additive attention scores between voxel tokens and patch
// tokens. Sparse: only positive biases are stored.
struct BiasMatrix {
    double alpha = 5.0;
    int n_voxels = 0;
    int n_patches = 0;
    std::vector<std::vector<std::pair<int, double>>> rows; // (patch, bias)

    double value(int voxel_token, int patch) const {
        const auto& row = rows[voxel_token];
        auto it = std::lower_bound(row.begin(), row.end(), patch,
                                   [](const auto& e, int p) { return e.first < p; });
        return (it != row.end() && it->first == patch) ? it->second : 0.0;
    }

    Eigen::MatrixXd dense() const {
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n_voxels, n_patches);
        for (int j = 0; j < n_voxels; ++j)
            for (const auto& [k, b] : rows[j]) m(j, k) = b;
        return m;
    }
};

// Bias between voxel j and patch k: alpha * max((c_jk - APC_j) / (max_k
// c_jk - APC_j), 0). Rows with no overlap, or where every positive count
// equals the average (degenerate denominator), stay all-zero. Patches at
// or below the average are clipped to zero.
inline BiasMatrix compute_bias(const OverlapTable& table, double alpha = 5.0) {
    require(alpha > 0, "compute_bias: alpha must be positive");
    BiasMatrix bias;
    bias.alpha = alpha;
    bias.n_voxels = table.n_voxels;
    bias.n_patches = table.n_patches;
    bias.rows.resize(table.rows.size());

    for (std::size_t j = 0; j < table.rows.size(); ++j) {
        const auto& row = table.rows[j];
        if (row.empty()) continue;
        long total = 0;
        int max_count = 0;
        for (const auto& [patch, c] : row) {
            total += c;
            max_count = std::max(max_count, c);
        }
        double apc = static_cast<double>(total) / static_cast<double>(row.size());
        double denom = static_cast<double>(max_count) - apc;
        if (denom <= 0.0) continue; // all positive overlaps equal
        for (const auto& [patch, c] : row) {
            double b = alpha * (static_cast<double>(c) - apc) / denom;
            if (b > 0.0) bias.rows[j].emplace_back(patch, std::min(b, alpha));
        }
    }
    return bias;
}

struct AttentionResult {
    Eigen::MatrixXd output;  // L x d
    Eigen::MatrixXd weights; // L x M, post-softmax attention (all heads avg'd
                             // when heads > 1; exact weights when heads == 1)
};

// Cross-attention with an additive score bias: softmax(Q K^T / sqrt(d) + B) V,
// applied independently per head with the same bias for every head. `d` in
// the scale is the full feature dimension. A null bias behaves exactly like
// a zero bias.
inline AttentionResult biased_cross_attention(const Eigen::MatrixXd& queries,
                                              const Eigen::MatrixXd& keys,
                                              const Eigen::MatrixXd& values,
                                              const BiasMatrix* bias, int heads = 1) {
    const Eigen::Index L = queries.rows(), M = keys.rows(), d = queries.cols();
    if (keys.cols() != d || values.rows() != M || values.cols() != d)
        throw ShapeMismatch("biased_cross_attention: inconsistent token dims");
    require(heads >= 1 && d % heads == 0,
            "biased_cross_attention: heads must divide the feature dim");
    if (bias && (bias->n_voxels != L || bias->n_patches != M))
        throw ShapeMismatch("biased_cross_attention: bias indices out of range");

    Eigen::MatrixXd bias_dense;
    if (bias) bias_dense = bias->dense();

    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    AttentionResult res;
    res.output.resize(L, d);
    res.weights = Eigen::MatrixXd::Zero(L, M);

    for (Eigen::Index h = 0; h < heads; ++h) {
        Eigen::MatrixXd scores =
            queries.middleCols(h * dh, dh) * keys.middleCols(h * dh, dh).transpose() *
            scale;
        if (bias) scores += bias_dense;
        for (Eigen::Index i = 0; i < L; ++i) {
            double m = scores.row(i).maxCoeff();
            Eigen::ArrayXd e = (scores.row(i).array() - m).exp();
            double denom = e.sum();
            scores.row(i) = (e / denom).matrix();
        }
        res.output.middleCols(h * dh, dh) = scores * values.middleCols(h * dh, dh);
        res.weights += scores / static_cast<double>(heads);
    }
    return res;
}

struct AttentionGrads {
    Eigen::MatrixXd d_queries;
    Eigen::MatrixXd d_keys;
    Eigen::MatrixXd d_values;
};

// Vector-Jacobian product of biased_cross_attention with respect to
// queries, keys, and values; the bias is treated as a constant.
inline AttentionGrads biased_cross_attention_vjp(const Eigen::MatrixXd& queries,
                                                 const Eigen::MatrixXd& keys,
                                                 const Eigen::MatrixXd& values,
                                                 const BiasMatrix* bias,
                                                 const Eigen::MatrixXd& grad_output,
                                                 int heads = 1) {
    const Eigen::Index L = queries.rows(), M = keys.rows(), d = queries.cols();
    const Eigen::Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    Eigen::MatrixXd bias_dense;
    if (bias) bias_dense = bias->dense();

    AttentionGrads g;
    g.d_queries = Eigen::MatrixXd::Zero(L, d);
    g.d_keys = Eigen::MatrixXd::Zero(M, d);
    g.d_values = Eigen::MatrixXd::Zero(M, d);

    for (Eigen::Index h = 0; h < heads; ++h) {
        auto Qh = queries.middleCols(h * dh, dh);
        auto Kh = keys.middleCols(h * dh, dh);
        auto Vh = values.middleCols(h * dh, dh);
        auto Gh = grad_output.middleCols(h * dh, dh);

        Eigen::MatrixXd scores = Qh * Kh.transpose() * scale;
        if (bias) scores += bias_dense;
        Eigen::MatrixXd attn(L, M);
        for (Eigen::Index i = 0; i < L; ++i) {
            double m = scores.row(i).maxCoeff();
            Eigen::ArrayXd e = (scores.row(i).array() - m).exp();
            attn.row(i) = (e / e.sum()).matrix();
        }

        g.d_values.middleCols(h * dh, dh) += attn.transpose() * Gh;
        Eigen::MatrixXd d_attn = Gh * Vh.transpose();
        // Softmax backward per row: a ∘ (g - <g, a>).
        Eigen::MatrixXd d_scores(L, M);
        for (Eigen::Index i = 0; i < L; ++i) {
            double dot = d_attn.row(i).dot(attn.row(i));
            d_scores.row(i) =
                (attn.row(i).array() * (d_attn.row(i).array() - dot)).matrix();
        }
        g.d_queries.middleCols(h * dh, dh) += d_scores * Kh * scale;
        g.d_keys.middleCols(h * dh, dh) += d_scores.transpose() * Qh * scale;
    }
    return g;
}

} // namespace mixrec
