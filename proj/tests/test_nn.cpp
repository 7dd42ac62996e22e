#include <catch2/catch_amalgamated.hpp>

#include "mixrec/nn.hpp"

using namespace mixrec;
using nn::Mat;
using MatD = Mat<double>;

namespace {

MatD randmat(Rng& rng, int r, int c, double s = 1.0) {
    MatD m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.normal() * s;
    return m;
}

// Checks d(sum(G .* f(X)))/dX against central differences for a graph
// builder f that takes a leaf id and returns an output id.
template <class Builder>
void check_gradient(Rng& rng, MatD x, Builder&& build, double tol = 1e-6) {
    MatD g;
    MatD grad_analytic;
    {
        nn::Tape<double> tape;
        int in = tape.leaf(x);
        int out = build(tape, in);
        g = randmat(rng, static_cast<int>(tape.value(out).rows()),
                    static_cast<int>(tape.value(out).cols()));
        // loss = sum(G .* out) via cmul with a constant leaf then mse trick:
        // use l1-free approach: mean is awkward, so build sum directly.
        int gl = tape.leaf(g);
        int prod = tape.cmul(out, gl);
        // Sum all entries: mse_to against zero of sqrt is messy; instead use
        // mse_to(prod, 0) is quadratic. Use mean_rows + matmul with ones.
        MatD ones_row = MatD::Ones(1, tape.value(prod).rows());
        MatD ones_col = MatD::Ones(tape.value(prod).cols(), 1);
        int left = tape.matmul(tape.leaf(ones_row), prod);
        int scalar = tape.matmul(left, tape.leaf(ones_col));
        tape.backward(scalar);
        grad_analytic = tape.grad(in);
    }
    auto loss_at = [&](const MatD& xx) {
        nn::Tape<double> tape(false);
        int in = tape.leaf(xx);
        int out = build(tape, in);
        return (tape.value(out).array() * g.array()).sum();
    };
    double h = 1e-6;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            MatD xp = x, xm = x;
            xp(i, j) += h;
            xm(i, j) -= h;
            double fd = (loss_at(xp) - loss_at(xm)) / (2 * h);
            double scale =
                std::max({std::abs(fd), std::abs(grad_analytic(i, j)), 1e-4});
            INFO("entry " << i << "," << j);
            REQUIRE(std::abs(grad_analytic(i, j) - fd) / scale < tol);
        }
}

} // namespace

TEST_CASE("tape basic op gradients") {
    Rng rng(3);
    SECTION("matmul") {
        MatD b = randmat(rng, 4, 5);
        check_gradient(rng, randmat(rng, 3, 4), [&](auto& t, int in) {
            return t.matmul(in, t.leaf(b));
        });
    }
    SECTION("matmul_nt") {
        MatD b = randmat(rng, 6, 4);
        check_gradient(rng, randmat(rng, 3, 4), [&](auto& t, int in) {
            return t.matmul_nt(in, t.leaf(b));
        });
    }
    SECTION("add_rowvec and mul_rowvec") {
        MatD r = randmat(rng, 1, 5);
        check_gradient(rng, randmat(rng, 4, 5), [&](auto& t, int in) {
            return t.mul_rowvec(t.add_rowvec(in, t.leaf(r)), t.leaf(r));
        });
    }
    SECTION("rowvec gradient flows into the row argument") {
        MatD x = randmat(rng, 4, 5);
        check_gradient(rng, randmat(rng, 1, 5), [&](auto& t, int in) {
            return t.mul_rowvec(t.leaf(x), in);
        });
    }
    SECTION("scalar_mul both sides") {
        MatD s(1, 1);
        s << 0.7;
        check_gradient(rng, randmat(rng, 3, 4), [&](auto& t, int in) {
            return t.scalar_mul(in, t.leaf(s));
        });
        MatD x = randmat(rng, 3, 4);
        check_gradient(rng, s, [&](auto& t, int in) {
            return t.scalar_mul(t.leaf(x), in);
        });
    }
    SECTION("activations") {
        check_gradient(rng, randmat(rng, 3, 6),
                       [&](auto& t, int in) { return t.silu(in); });
        check_gradient(rng, randmat(rng, 3, 6),
                       [&](auto& t, int in) { return t.gelu(in); });
        check_gradient(rng, randmat(rng, 3, 6).array().abs().matrix() * 0.3,
                       [&](auto& t, int in) { return t.exp_op(in); });
    }
    SECTION("normalizations") {
        check_gradient(rng, randmat(rng, 4, 6),
                       [&](auto& t, int in) { return t.layer_norm(in); });
        check_gradient(rng, randmat(rng, 4, 6),
                       [&](auto& t, int in) { return t.rms_norm(in); });
        check_gradient(rng, randmat(rng, 3, 4) + MatD::Ones(3, 4),
                       [&](auto& t, int in) { return t.normalize_rows(in); });
    }
    SECTION("slicing and concatenation") {
        check_gradient(rng, randmat(rng, 3, 8), [&](auto& t, int in) {
            int a = t.slice_cols(in, 0, 4);
            int b = t.slice_cols(in, 4, 4);
            return t.concat_cols({b, a});
        });
    }
    SECTION("mean_rows") {
        check_gradient(rng, randmat(rng, 5, 4),
                       [&](auto& t, int in) { return t.mean_rows(in); });
    }
    SECTION("unpatchify is a permutation") {
        check_gradient(rng, randmat(rng, 4, 12), [&](auto& t, int in) {
            return t.unpatchify(in, 2, 2, 2, 3);
        });
    }
}

TEST_CASE("tape loss gradients") {
    Rng rng(5);
    SECTION("mse_to") {
        MatD target = randmat(rng, 3, 4);
        MatD x = randmat(rng, 3, 4);
        nn::Tape<double> tape;
        int in = tape.leaf(x);
        int loss = tape.mse_to(in, target);
        tape.backward(loss);
        MatD grad = tape.grad(in);
        double h = 1e-6;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            MatD xp = x, xm = x;
            xp(i / 4, i % 4) += h;
            xm(i / 4, i % 4) -= h;
            double fd = ((xp - target).array().square().mean() -
                         (xm - target).array().square().mean()) /
                        (2 * h);
            REQUIRE(grad(i / 4, i % 4) == Catch::Approx(fd).margin(1e-7));
        }
    }
    SECTION("l1_masked") {
        MatD target = randmat(rng, 3, 4);
        MatD x = randmat(rng, 3, 4);
        MatD mask(3, 4);
        for (Eigen::Index i = 0; i < mask.size(); ++i)
            mask(i / 4, i % 4) = rng.uniform() > 0.4 ? 1.0 : 0.0;
        nn::Tape<double> tape;
        int in = tape.leaf(x);
        int loss = tape.l1_masked(in, target, mask, 7.0);
        tape.backward(loss);
        MatD grad = tape.grad(in);
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index j = 0; j < x.cols(); ++j) {
                double expected =
                    mask(i, j) * ((x(i, j) > target(i, j)) ? 1.0 : -1.0) / 7.0;
                if (mask(i, j) == 0.0) expected = 0.0;
                REQUIRE(grad(i, j) == Catch::Approx(expected));
            }
    }
}

TEST_CASE("quat_rotate gradients") {
    Rng rng(7);
    MatD q = randmat(rng, 1, 4);
    q.row(0).normalize();
    MatD pts = randmat(rng, 5, 3);

    SECTION("points side") {
        check_gradient(rng, pts, [&](auto& t, int in) {
            return t.quat_rotate(in, t.leaf(q));
        });
    }
    SECTION("quaternion side, with normalization in the graph") {
        MatD raw = randmat(rng, 1, 4) + MatD::Ones(1, 4);
        check_gradient(rng, raw, [&](auto& t, int in) {
            return t.quat_rotate(t.leaf(pts), t.normalize_rows(in));
        });
    }
}

TEST_CASE("grouped_attention") {
    Rng rng(9);
    SECTION("single group matches a plain softmax-weighted sum") {
        MatD scores = randmat(rng, 4, 6);
        MatD values = randmat(rng, 6, 5);
        nn::Tape<double> tape;
        int s = tape.leaf(scores);
        int v = tape.leaf(values);
        int out = tape.grouped_attention({s}, {v}, 0);
        for (int i = 0; i < 4; ++i) {
            Eigen::ArrayXd e = (scores.row(i).array() - scores.row(i).maxCoeff()).exp();
            Eigen::VectorXd w = (e / e.sum()).matrix();
            Eigen::VectorXd expect = values.transpose() * w;
            REQUIRE((tape.value(out).row(i).transpose() - expect).norm() < 1e-12);
        }
    }
    SECTION("group split is equivalent to one concatenated group") {
        MatD s_all = randmat(rng, 3, 8);
        MatD v_all = randmat(rng, 8, 4);
        nn::Tape<double> tape;
        int sa = tape.leaf(s_all.leftCols(5));
        int sb = tape.leaf(s_all.rightCols(3));
        int va = tape.leaf(v_all.topRows(5));
        int vb = tape.leaf(v_all.bottomRows(3));
        int split = tape.grouped_attention({sa, sb}, {va, vb}, 2);
        int whole = tape.grouped_attention({tape.leaf(s_all)}, {tape.leaf(v_all)}, 0);
        REQUIRE((tape.value(split) - tape.value(whole)).cwiseAbs().maxCoeff() < 1e-12);
    }
    SECTION("sortable groups reduce identically under permutation") {
        MatD sa = randmat(rng, 3, 4), sb = randmat(rng, 3, 5), sc = randmat(rng, 3, 2);
        MatD va = randmat(rng, 4, 6), vb = randmat(rng, 5, 6), vc = randmat(rng, 2, 6);
        auto run = [&](const std::vector<const MatD*>& ss,
                       const std::vector<const MatD*>& vs) {
            nn::Tape<double> tape;
            std::vector<int> sids, vids;
            for (std::size_t i = 0; i < ss.size(); ++i) {
                sids.push_back(tape.leaf(*ss[i]));
                vids.push_back(tape.leaf(*vs[i]));
            }
            int out = tape.grouped_attention(sids, vids, 0);
            return MatD(tape.value(out));
        };
        MatD base = run({&sa, &sb, &sc}, {&va, &vb, &vc});
        MatD perm1 = run({&sc, &sa, &sb}, {&vc, &va, &vb});
        MatD perm2 = run({&sb, &sc, &sa}, {&vb, &vc, &va});
        for (Eigen::Index i = 0; i < base.size(); ++i) {
            REQUIRE(base(i / 6, i % 6) == perm1(i / 6, i % 6));
            REQUIRE(base(i / 6, i % 6) == perm2(i / 6, i % 6));
        }
    }
    SECTION("score offsets of -1e30 mask groups out exactly") {
        MatD sa = randmat(rng, 3, 4), sb = randmat(rng, 3, 5);
        MatD va = randmat(rng, 4, 6), vb = randmat(rng, 5, 6);
        nn::Tape<double> tape;
        std::vector<nn::Mat<double>> offsets = {MatD::Zero(3, 4),
                                                MatD::Constant(3, 5, -1e30)};
        int masked = tape.grouped_attention({tape.leaf(sa), tape.leaf(sb)},
                                            {tape.leaf(va), tape.leaf(vb)}, 2,
                                            &offsets);
        int alone = tape.grouped_attention({tape.leaf(sa)}, {tape.leaf(va)}, 1);
        for (Eigen::Index i = 0; i < tape.value(masked).size(); ++i)
            REQUIRE(tape.value(masked)(i / 6, i % 6) == tape.value(alone)(i / 6, i % 6));
    }
    SECTION("gradients through scores and values") {
        MatD values = randmat(rng, 6, 4);
        MatD scores2 = randmat(rng, 3, 5);
        MatD values2 = randmat(rng, 5, 4);
        check_gradient(rng, randmat(rng, 3, 6), [&](auto& t, int in) {
            return t.grouped_attention({in, t.leaf(scores2)},
                                       {t.leaf(values), t.leaf(values2)}, 2);
        });
        MatD scores = randmat(rng, 3, 6);
        check_gradient(rng, values, [&](auto& t, int in) {
            return t.grouped_attention({t.leaf(scores), t.leaf(scores2)},
                                       {in, t.leaf(values2)}, 2);
        });
    }
}

TEST_CASE("normals_from_grid") {
    Rng rng(11);
    SECTION("matches direct evaluation on a wavy grid") {
        int H = 4, W = 5;
        MatD pts(H * W, 3);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                pts(r * W + c, 0) = c * 0.3;
                pts(r * W + c, 1) = r * 0.3;
                pts(r * W + c, 2) = std::sin(c * 0.5) * std::cos(r * 0.4);
            }
        nn::Tape<double> tape;
        int in = tape.leaf(pts);
        auto res = tape.normals_from_grid(in, H, W);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                REQUIRE(res.valid[r * W + c] == 1);
                REQUIRE(tape.value(res.node).row(r * W + c).norm() ==
                        Catch::Approx(1.0).margin(1e-12));
            }
    }
    SECTION("gradient against finite differences") {
        int H = 3, W = 4;
        MatD pts = randmat(rng, H * W, 3);
        check_gradient(rng, pts, [&](auto& t, int in) {
            return t.normals_from_grid(in, H, W).node;
        }, 2e-5);
    }
}

TEST_CASE("adam honors the trainable flag") {
    nn::ParamStore<double> store;
    auto& a = store.create("a", 2, 2);
    auto& b = store.create("b", 2, 2);
    a.value.setOnes();
    b.value.setOnes();
    b.trainable = false;
    store.zero_grads();
    a.grad.setConstant(0.5);
    b.grad.setConstant(0.5);
    MatD b_before = b.value;
    nn::adam_step<double>(store, 1, 0.1);
    REQUIRE((a.value.array() != 1.0).all());
    REQUIRE(b.value == b_before);
}
