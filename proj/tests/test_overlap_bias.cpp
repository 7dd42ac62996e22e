#include <catch2/catch_amalgamated.hpp>

#include "mixrec/overlap_bias.hpp"
#include "mixrec/rng.hpp"

using namespace mixrec;

namespace {

// Builds an OverlapTable directly from explicit per-voxel counts, so the
// bias formula can be tested against hand-evaluated cases.
OverlapTable table_from_counts(const std::vector<std::vector<int>>& counts) {
    OverlapTable t;
    t.n_voxels = static_cast<int>(counts.size());
    t.n_patches = counts.empty() ? 0 : static_cast<int>(counts[0].size());
    t.rows.resize(counts.size());
    for (std::size_t j = 0; j < counts.size(); ++j)
        for (std::size_t k = 0; k < counts[j].size(); ++k)
            if (counts[j][k] > 0) t.rows[j].emplace_back(static_cast<int>(k), counts[j][k]);
    return t;
}

struct RandomScene {
    SparseVoxelGrid grid{8};
    std::vector<PointMap> pms;
    PatchLayout layout;
};

RandomScene random_scene(Rng& rng) {
    RandomScene s;
    s.layout = PatchLayout(4, 16, 16, 2);
    int n_occ = rng.uniform_int(3, 40);
    for (int i = 0; i < n_occ; ++i)
        s.grid.insert(Vec3i{rng.uniform_int(0, 7), rng.uniform_int(0, 7),
                            rng.uniform_int(0, 7)});
    for (int v = 0; v < 2; ++v) {
        PointMap pm(16, 16);
        for (int r = 0; r < 16; ++r)
            for (int c = 0; c < 16; ++c) {
                // Mostly inside the cube, some outside, some invalid.
                Vec3 p(rng.uniform(-0.1, 1.1), rng.uniform(-0.1, 1.1),
                       rng.uniform(-0.1, 1.1));
                pm.set(r, c, p, rng.uniform() > 0.3);
            }
        s.pms.push_back(std::move(pm));
    }
    return s;
}

// Brute-force oracle: triple loop over pixels, occupied voxels, and a
// direct containment test for each voxel cell.
OverlapTable brute_force_overlaps(const RandomScene& s) {
    OverlapTable t;
    t.n_voxels = static_cast<int>(s.grid.size());
    t.n_patches = s.layout.total_patches();
    t.rows.resize(s.grid.size());
    std::vector<std::vector<int>> dense(s.grid.size(),
                                        std::vector<int>(t.n_patches, 0));
    double res = s.grid.resolution();
    for (int v = 0; v < s.layout.view_count; ++v)
        for (int r = 0; r < s.layout.height; ++r)
            for (int c = 0; c < s.layout.width; ++c) {
                if (!s.pms[v].is_valid(r, c)) continue;
                const Vec3& p = s.pms[v].at(r, c);
                for (std::size_t j = 0; j < s.grid.occupied().size(); ++j) {
                    const Vec3i& vox = s.grid.occupied()[j];
                    if (p.x() >= vox.x / res && p.x() < (vox.x + 1) / res &&
                        p.y() >= vox.y / res && p.y() < (vox.y + 1) / res &&
                        p.z() >= vox.z / res && p.z() < (vox.z + 1) / res)
                        dense[j][s.layout.patch_of(v, r, c)] += 1;
                }
            }
    for (std::size_t j = 0; j < dense.size(); ++j)
        for (int k = 0; k < t.n_patches; ++k)
            if (dense[j][k] > 0) t.rows[j].emplace_back(k, dense[j][k]);
    return t;
}

} // namespace

TEST_CASE("patch layout indexing") {
    PatchLayout layout(4, 16, 32, 3);
    REQUIRE(layout.patches_per_view() == 32);
    REQUIRE(layout.total_patches() == 96);
    REQUIRE(layout.patch_of(0, 0, 0) == 0);
    REQUIRE(layout.patch_of(0, 0, 31) == 7);
    REQUIRE(layout.patch_of(2, 15, 31) == 95);
    auto rect = layout.rect_of(95);
    REQUIRE(rect.view == 2);
    REQUIRE(rect.row0 == 12);
    REQUIRE(rect.col0 == 28);
    REQUIRE_THROWS_AS(PatchLayout(5, 16, 16, 1), InvalidArgument);
}

TEST_CASE("compute_overlaps") {
    SECTION("empty masks give an empty table") {
        SparseVoxelGrid grid(8);
        grid.insert(Vec3i{0, 0, 0});
        std::vector<PointMap> pms{PointMap(16, 16)};
        OverlapTable t = compute_overlaps(grid, pms, PatchLayout(4, 16, 16, 1));
        for (const auto& row : t.rows) REQUIRE(row.empty());
    }
    SECTION("one valid pixel maps to its voxel and patch") {
        SparseVoxelGrid grid(8);
        grid.insert(Vec3i{4, 4, 4});
        PointMap pm(16, 16);
        pm.set(9, 10, Vec3(0.5625, 0.5625, 0.5625)); // voxel (4,4,4)
        std::vector<PointMap> pms{pm};
        PatchLayout layout(4, 16, 16, 1);
        OverlapTable t = compute_overlaps(grid, pms, layout);
        int token = grid.token_index(Vec3i{4, 4, 4});
        REQUIRE(t.count(token, layout.patch_of(0, 9, 10)) == 1);
    }
    SECTION("a 4x4 patch fully inside one voxel counts 16") {
        SparseVoxelGrid grid(8);
        grid.insert(Vec3i{2, 3, 1});
        PointMap pm(16, 16);
        // Fill patch (rows 4..7, cols 8..11) with points inside voxel (2,3,1).
        for (int r = 4; r < 8; ++r)
            for (int c = 8; c < 12; ++c)
                pm.set(r, c,
                       Vec3(0.25 + 0.01 * (c - 8), 0.375 + 0.01 * (r - 4), 0.15));
        std::vector<PointMap> pms{pm};
        PatchLayout layout(4, 16, 16, 1);
        OverlapTable t = compute_overlaps(grid, pms, layout);
        int token = grid.token_index(Vec3i{2, 3, 1});
        REQUIRE(t.count(token, layout.patch_of(0, 4, 8)) == 16);
    }
    SECTION("points outside the cube and in unoccupied voxels are diagnostics") {
        SparseVoxelGrid grid(8);
        grid.insert(Vec3i{0, 0, 0});
        PointMap pm(16, 16);
        pm.set(0, 0, Vec3(1.5, 0.5, 0.5));  // outside
        pm.set(0, 1, Vec3(0.9, 0.9, 0.9));  // unoccupied voxel
        pm.set(0, 2, Vec3(0.05, 0.05, 0.05)); // occupied
        std::vector<PointMap> pms{pm};
        OverlapTable t = compute_overlaps(grid, pms, PatchLayout(4, 16, 16, 1));
        REQUIRE(t.points_outside_cube == 1);
        REQUIRE(t.points_in_unoccupied == 1);
        REQUIRE(t.count(0, 0) == 1);
    }
    SECTION("layout mismatch is rejected") {
        SparseVoxelGrid grid(8);
        std::vector<PointMap> pms{PointMap(16, 16)};
        REQUIRE_THROWS_AS(compute_overlaps(grid, pms, PatchLayout(4, 16, 16, 2)),
                          LayoutMismatch);
        REQUIRE_THROWS_AS(compute_overlaps(grid, pms, PatchLayout(4, 32, 32, 1)),
                          LayoutMismatch);
    }
    SECTION("matches the brute-force triple loop on random scenes") {
        Rng rng(77);
        for (int trial = 0; trial < 25; ++trial) {
            RandomScene s = random_scene(rng);
            OverlapTable fast = compute_overlaps(s.grid, s.pms, s.layout);
            OverlapTable slow = brute_force_overlaps(s);
            REQUIRE(fast.rows == slow.rows);
        }
    }
}

TEST_CASE("average_point_count") {
    OverlapTable t = table_from_counts({{4, 2, 0}, {0, 0, 0}, {0, 7, 0}});
    REQUIRE(average_point_count(t, 0) == Catch::Approx(3.0)); // (4+2)/2
    REQUIRE(average_point_count(t, 1) == 0.0);
    REQUIRE(average_point_count(t, 2) == Catch::Approx(7.0));
}

TEST_CASE("compute_bias") {
    SECTION("hand case: counts (4,2,0) with alpha 5 give biases (5,0,0)") {
        OverlapTable t = table_from_counts({{4, 2, 0}});
        BiasMatrix b = compute_bias(t, 5.0);
        REQUIRE(b.value(0, 0) == Catch::Approx(5.0));
        REQUIRE(b.value(0, 1) == 0.0);
        REQUIRE(b.value(0, 2) == 0.0);
    }
    SECTION("equal positive counts give a zero row") {
        OverlapTable t = table_from_counts({{3, 3}});
        BiasMatrix b = compute_bias(t, 5.0);
        REQUIRE(b.value(0, 0) == 0.0);
        REQUIRE(b.value(0, 1) == 0.0);
    }
    SECTION("unique maximal overlap gets exactly alpha") {
        OverlapTable t = table_from_counts({{1, 5, 2, 0}});
        BiasMatrix b = compute_bias(t, 5.0);
        REQUIRE(b.value(0, 1) == Catch::Approx(5.0));
    }
    SECTION("no-overlap rows stay zero") {
        OverlapTable t = table_from_counts({{0, 0, 0}});
        BiasMatrix b = compute_bias(t, 5.0);
        REQUIRE(b.rows[0].empty());
    }
    SECTION("bias values live in [0, alpha]; max patch gets alpha; below-average gets 0") {
        Rng rng(87);
        for (int trial = 0; trial < 50; ++trial) {
            int patches = rng.uniform_int(2, 10);
            std::vector<int> counts(patches, 0);
            for (int& c : counts) c = rng.uniform_int(0, 6);
            OverlapTable t = table_from_counts({counts});
            double alpha = rng.uniform(0.5, 8.0);
            BiasMatrix b = compute_bias(t, alpha);

            int max_count = *std::max_element(counts.begin(), counts.end());
            double apc = average_point_count(t, 0);
            std::vector<int> positive;
            for (int c : counts)
                if (c > 0) positive.push_back(c);
            bool distinct = std::set(positive.begin(), positive.end()).size() >= 2;

            for (int k = 0; k < patches; ++k) {
                double v = b.value(0, k);
                REQUIRE(v >= 0.0);
                REQUIRE(v <= alpha + 1e-12);
                if (distinct && counts[k] == max_count)
                    REQUIRE(v == Catch::Approx(alpha));
                if (counts[k] <= apc) REQUIRE(v == 0.0);
            }
        }
    }
    SECTION("overlap pipeline agrees with a dense-matrix reimplementation") {
        Rng rng(97);
        for (int trial = 0; trial < 25; ++trial) {
            RandomScene s = random_scene(rng);
            OverlapTable t = compute_overlaps(s.grid, s.pms, s.layout);
            BiasMatrix b = compute_bias(t, 5.0);
            // Dense oracle straight from the formula.
            for (int j = 0; j < t.n_voxels; ++j) {
                double apc = average_point_count(t, j);
                int maxc = 0;
                for (int k = 0; k < t.n_patches; ++k)
                    maxc = std::max(maxc, t.count(j, k));
                for (int k = 0; k < t.n_patches; ++k) {
                    double expected = 0.0;
                    if (maxc > 0 && maxc - apc > 0)
                        expected = std::max(
                            5.0 * (t.count(j, k) - apc) / (maxc - apc), 0.0);
                    REQUIRE(b.value(j, k) == Catch::Approx(expected).margin(1e-12));
                }
            }
        }
    }
}

namespace {

// Straightforward reference attention used as the value oracle.
Eigen::MatrixXd naive_attention(const Eigen::MatrixXd& Q, const Eigen::MatrixXd& K,
                                const Eigen::MatrixXd& V, const Eigen::MatrixXd& B,
                                int heads) {
    Eigen::Index L = Q.rows(), M = K.rows(), d = Q.cols(), dh = d / heads;
    Eigen::MatrixXd out(L, d);
    for (int h = 0; h < heads; ++h) {
        for (Eigen::Index i = 0; i < L; ++i) {
            Eigen::VectorXd scores(M);
            for (Eigen::Index k = 0; k < M; ++k)
                scores[k] = Q.row(i).segment(h * dh, dh)
                                .dot(K.row(k).segment(h * dh, dh)) /
                                std::sqrt(static_cast<double>(d)) +
                            B(i, k);
            double m = scores.maxCoeff();
            Eigen::VectorXd e = (scores.array() - m).exp();
            e /= e.sum();
            Eigen::VectorXd acc = Eigen::VectorXd::Zero(dh);
            for (Eigen::Index k = 0; k < M; ++k)
                acc += e[k] * V.row(k).segment(h * dh, dh).transpose();
            out.row(i).segment(h * dh, dh) = acc.transpose();
        }
    }
    return out;
}

BiasMatrix dense_to_bias(const Eigen::MatrixXd& B, double alpha) {
    BiasMatrix bias;
    bias.alpha = alpha;
    bias.n_voxels = static_cast<int>(B.rows());
    bias.n_patches = static_cast<int>(B.cols());
    bias.rows.resize(B.rows());
    for (Eigen::Index j = 0; j < B.rows(); ++j)
        for (Eigen::Index k = 0; k < B.cols(); ++k)
            if (B(j, k) != 0.0) bias.rows[j].emplace_back(static_cast<int>(k), B(j, k));
    return bias;
}

} // namespace

TEST_CASE("biased_cross_attention") {
    Rng rng(107);
    auto randmat = [&](int r, int c) {
        Eigen::MatrixXd m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
        return m;
    };

    SECTION("zero bias reproduces plain attention bitwise") {
        for (int heads : {1, 2, 4}) {
            Eigen::MatrixXd Q = randmat(6, 8), K = randmat(10, 8), V = randmat(10, 8);
            BiasMatrix zero = dense_to_bias(Eigen::MatrixXd::Zero(6, 10), 5.0);
            AttentionResult with = biased_cross_attention(Q, K, V, &zero, heads);
            AttentionResult without = biased_cross_attention(Q, K, V, nullptr, heads);
            for (Eigen::Index i = 0; i < with.output.rows(); ++i)
                for (Eigen::Index j = 0; j < with.output.cols(); ++j)
                    REQUIRE(with.output(i, j) == without.output(i, j));
        }
    }
    SECTION("matches the naive oracle") {
        for (int heads : {1, 2}) {
            Eigen::MatrixXd Q = randmat(5, 8), K = randmat(7, 8), V = randmat(7, 8);
            Eigen::MatrixXd B = randmat(5, 7).cwiseAbs();
            BiasMatrix bias = dense_to_bias(B, 10.0);
            AttentionResult res = biased_cross_attention(Q, K, V, &bias, heads);
            Eigen::MatrixXd ref = naive_attention(Q, K, V, B, heads);
            REQUIRE((res.output - ref).cwiseAbs().maxCoeff() < 1e-12);
        }
    }
    SECTION("two identical keys with bias (5, 0) give the closed-form weights") {
        Eigen::MatrixXd Q = randmat(1, 4);
        Eigen::MatrixXd K(2, 4), V(2, 4);
        K.row(0) = randmat(1, 4);
        K.row(1) = K.row(0);
        V << 1, 0, 0, 0, 0, 1, 0, 0;
        Eigen::MatrixXd B(1, 2);
        B << 5, 0;
        BiasMatrix bias = dense_to_bias(B, 5.0);
        AttentionResult res = biased_cross_attention(Q, K, V, &bias, 1);
        double w0 = std::exp(5.0) / (std::exp(5.0) + 1.0);
        REQUIRE(res.output(0, 0) == Catch::Approx(w0).margin(1e-12));
        REQUIRE(res.output(0, 1) == Catch::Approx(1.0 - w0).margin(1e-12));
        REQUIRE(res.weights(0, 0) == Catch::Approx(w0).margin(1e-12));
    }
    SECTION("a constant bias row equals no bias (softmax shift invariance)") {
        Eigen::MatrixXd Q = randmat(3, 8), K = randmat(6, 8), V = randmat(6, 8);
        Eigen::MatrixXd B = Eigen::MatrixXd::Constant(3, 6, 2.5);
        BiasMatrix bias = dense_to_bias(B, 5.0);
        AttentionResult with = biased_cross_attention(Q, K, V, &bias, 2);
        AttentionResult without = biased_cross_attention(Q, K, V, nullptr, 2);
        REQUIRE((with.output - without.output).cwiseAbs().maxCoeff() < 1e-12);
    }
    SECTION("attention weight on the max-bias key is nondecreasing in alpha") {
        Eigen::MatrixXd Q = randmat(1, 8), K = randmat(4, 8), V = randmat(4, 8);
        double prev = -1.0;
        for (double alpha : {0.0, 1.0, 2.5, 5.0, 10.0}) {
            Eigen::MatrixXd B = Eigen::MatrixXd::Zero(1, 4);
            B(0, 2) = alpha;
            BiasMatrix bias = dense_to_bias(B, std::max(alpha, 1.0));
            AttentionResult res = biased_cross_attention(Q, K, V, &bias, 1);
            REQUIRE(res.weights(0, 2) >= prev);
            prev = res.weights(0, 2);
        }
    }
    SECTION("gradients match central finite differences") {
        for (int heads : {1, 2}) {
            Eigen::MatrixXd Q = randmat(4, 8), K = randmat(5, 8), V = randmat(5, 8);
            Eigen::MatrixXd B = randmat(4, 5).cwiseAbs();
            BiasMatrix bias = dense_to_bias(B, 10.0);
            Eigen::MatrixXd G = randmat(4, 8); // upstream gradient

            AttentionGrads grads = biased_cross_attention_vjp(Q, K, V, &bias, G, heads);

            auto loss = [&](const Eigen::MatrixXd& q, const Eigen::MatrixXd& k,
                            const Eigen::MatrixXd& v) {
                return (biased_cross_attention(q, k, v, &bias, heads).output.array() *
                        G.array())
                    .sum();
            };
            double h = 1e-6;
            auto check = [&](Eigen::MatrixXd& target, const Eigen::MatrixXd& got,
                             auto&& eval) {
                for (Eigen::Index i = 0; i < target.rows(); ++i)
                    for (Eigen::Index j = 0; j < target.cols(); ++j) {
                        double orig = target(i, j);
                        target(i, j) = orig + h;
                        double up = eval();
                        target(i, j) = orig - h;
                        double dn = eval();
                        target(i, j) = orig;
                        double fd = (up - dn) / (2 * h);
                        double scale = std::max({std::abs(fd), std::abs(got(i, j)), 1e-6});
                        REQUIRE(std::abs(got(i, j) - fd) / scale < 1e-4);
                    }
            };
            check(Q, grads.d_queries, [&] { return loss(Q, K, V); });
            check(K, grads.d_keys, [&] { return loss(Q, K, V); });
            check(V, grads.d_values, [&] { return loss(Q, K, V); });
        }
    }
    SECTION("shape mismatches are rejected") {
        Eigen::MatrixXd Q = randmat(3, 8), K = randmat(5, 8), V = randmat(4, 8);
        REQUIRE_THROWS_AS(biased_cross_attention(Q, K, V, nullptr, 1), ShapeMismatch);
        BiasMatrix small = dense_to_bias(Eigen::MatrixXd::Zero(2, 5), 5.0);
        Eigen::MatrixXd V5 = randmat(5, 8);
        REQUIRE_THROWS_AS(biased_cross_attention(Q, K, V5, &small, 1), ShapeMismatch);
    }
}
