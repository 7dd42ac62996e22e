#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixrec/common.hpp"
#include "mixrec/rng.hpp"

namespace mixrec::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A named model parameter with its gradient and optimizer state.
template <class T>
struct Param {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    Mat<T> adam_m, adam_v;
    bool trainable = true;
    bool pretrained = false;   // value came from a checkpoint
    bool attention_flag = false; // belongs to a cross-attention or joint-attention module

    void ensure_grad() {
        if (grad.rows() != value.rows() || grad.cols() != value.cols())
            grad = Mat<T>::Zero(value.rows(), value.cols());
    }
};

template <class T>
class ParamStore {
public:
    Param<T>& create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        require(index_.find(name) == index_.end(), "duplicate parameter: " + name);
        auto p = std::make_unique<Param<T>>();
        p->name = name;
        p->value = Mat<T>::Zero(rows, cols);
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Param<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    const Param<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    std::vector<std::unique_ptr<Param<T>>>& all() { return params_; }
    const std::vector<std::unique_ptr<Param<T>>>& all() const { return params_; }

    void zero_grads() {
        for (auto& p : params_) {
            p->ensure_grad();
            p->grad.setZero();
        }
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
        return n;
    }

private:
    std::vector<std::unique_ptr<Param<T>>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Reverse-mode autodiff over dense row-major matrices. A forward pass
// appends nodes and their pullback closures; backward() replays them in
// reverse. With recording disabled the tape works as a plain evaluator.
template <class T>
class Tape {
public:
    explicit Tape(bool record = true) : record_(record) {}

    const Mat<T>& value(int id) const { return nodes_[id].value; }
    Mat<T>& grad(int id) { return nodes_[id].grad; }

    int leaf(Mat<T> v) {
        int id = push(std::move(v));
        return id;
    }

    int param(Param<T>& p) {
        int id = push(p.value);
        if (record_) {
            Param<T>* pp = &p;
            backs_.push_back([this, id, pp] {
                pp->ensure_grad();
                pp->grad += nodes_[id].grad;
            });
            back_of_.push_back(id);
        }
        return id;
    }

    int matmul(int a, int b) {
        int id = push(nodes_[a].value * nodes_[b].value);
        record([this, id, a, b] {
            nodes_[a].grad.noalias() += nodes_[id].grad * nodes_[b].value.transpose();
            nodes_[b].grad.noalias() += nodes_[a].value.transpose() * nodes_[id].grad;
        }, id);
        return id;
    }

    // Fused affine map y = x W + b against parameters; one node instead of
    // a parameter copy, a matmul, and a broadcast add.
    int linear(int x, Param<T>& w, Param<T>* b) {
        Mat<T> out = nodes_[x].value * w.value;
        if (b) out.rowwise() += b->value.row(0);
        int id = push(std::move(out));
        if (record_) {
            Param<T>* wp = &w;
            Param<T>* bp = b;
            record([this, id, x, wp, bp] {
                const Mat<T>& g = nodes_[id].grad;
                nodes_[x].grad.noalias() += g * wp->value.transpose();
                wp->ensure_grad();
                wp->grad.noalias() += nodes_[x].value.transpose() * g;
                if (bp) {
                    bp->ensure_grad();
                    bp->grad.row(0) += g.colwise().sum();
                }
            }, id);
        }
        return id;
    }

    // C = A * B^T
    int matmul_nt(int a, int b) {
        int id = push(nodes_[a].value * nodes_[b].value.transpose());
        record([this, id, a, b] {
            nodes_[a].grad.noalias() += nodes_[id].grad * nodes_[b].value;
            nodes_[b].grad.noalias() += nodes_[id].grad.transpose() * nodes_[a].value;
        }, id);
        return id;
    }

    int add(int a, int b) {
        int id = push(nodes_[a].value + nodes_[b].value);
        record([this, id, a, b] {
            nodes_[a].grad += nodes_[id].grad;
            nodes_[b].grad += nodes_[id].grad;
        }, id);
        return id;
    }

    int sub(int a, int b) {
        int id = push(nodes_[a].value - nodes_[b].value);
        record([this, id, a, b] {
            nodes_[a].grad += nodes_[id].grad;
            nodes_[b].grad -= nodes_[id].grad;
        }, id);
        return id;
    }

    int cmul(int a, int b) {
        int id = push(nodes_[a].value.cwiseProduct(nodes_[b].value));
        record([this, id, a, b] {
            nodes_[a].grad += nodes_[id].grad.cwiseProduct(nodes_[b].value);
            nodes_[b].grad += nodes_[id].grad.cwiseProduct(nodes_[a].value);
        }, id);
        return id;
    }

    int scale(int a, T c) {
        int id = push(nodes_[a].value * c);
        record([this, id, a, c] { nodes_[a].grad += nodes_[id].grad * c; }, id);
        return id;
    }

    int add_scalar(int a, T c) {
        int id = push((nodes_[a].value.array() + c).matrix());
        record([this, id, a] { nodes_[a].grad += nodes_[id].grad; }, id);
        return id;
    }

    // A (n x d) + broadcast row r (1 x d)
    int add_rowvec(int a, int r) {
        Mat<T> out = nodes_[a].value;
        out.rowwise() += nodes_[r].value.row(0);
        int id = push(std::move(out));
        record([this, id, a, r] {
            nodes_[a].grad += nodes_[id].grad;
            nodes_[r].grad.row(0) += nodes_[id].grad.colwise().sum();
        }, id);
        return id;
    }

    // A (n x d) * broadcast row r (1 x d), elementwise columns
    int mul_rowvec(int a, int r) {
        Mat<T> out = nodes_[a].value;
        out.array().rowwise() *= nodes_[r].value.row(0).array();
        int id = push(std::move(out));
        record([this, id, a, r] {
            nodes_[a].grad.array() +=
                nodes_[id].grad.array().rowwise() * nodes_[r].value.row(0).array();
            nodes_[r].grad.row(0).array() +=
                (nodes_[id].grad.array() * nodes_[a].value.array()).colwise().sum();
        }, id);
        return id;
    }

    // s (1 x 1) * A
    int scalar_mul(int a, int s) {
        int id = push(nodes_[a].value * nodes_[s].value(0, 0));
        record([this, id, a, s] {
            nodes_[a].grad += nodes_[id].grad * nodes_[s].value(0, 0);
            nodes_[s].grad(0, 0) +=
                (nodes_[id].grad.array() * nodes_[a].value.array()).sum();
        }, id);
        return id;
    }

    int exp_op(int a) {
        int id = push(nodes_[a].value.array().exp().matrix());
        record([this, id, a] {
            nodes_[a].grad.array() += nodes_[id].grad.array() * nodes_[id].value.array();
        }, id);
        return id;
    }

    int silu(int a) {
        auto x = nodes_[a].value.array();
        auto sig = (T(1) / (T(1) + (-x).exp())).eval();
        int id = push((x * sig).matrix());
        record([this, id, a, sig] {
            auto x2 = nodes_[a].value.array();
            nodes_[a].grad.array() +=
                nodes_[id].grad.array() * (sig + x2 * sig * (T(1) - sig));
        }, id);
        return id;
    }

    int gelu(int a) {
        const T inv_sqrt2 = T(0.7071067811865475244);
        Mat<T> phi = nodes_[a].value.unaryExpr([inv_sqrt2](T t) {
            return T(0.5) * (T(1) + std::erf(t * inv_sqrt2));
        });
        int id = push(nodes_[a].value.cwiseProduct(phi));
        record([this, id, a, phi] {
            auto x2 = nodes_[a].value.array();
            const T inv_sqrt2pi = T(0.3989422804014326779);
            nodes_[a].grad.array() +=
                nodes_[id].grad.array() *
                (phi.array() + x2 * inv_sqrt2pi * (-x2 * x2 * T(0.5)).exp());
        }, id);
        return id;
    }

    // Per-row layer normalization without affine parameters.
    int layer_norm(int a, T eps = T(1e-6)) {
        const Mat<T>& x = nodes_[a].value;
        Mat<T> out(x.rows(), x.cols());
        Mat<T> inv_sigma(x.rows(), 1);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            T mu = x.row(i).mean();
            T var = (x.row(i).array() - mu).square().mean();
            T is = T(1) / std::sqrt(var + eps);
            out.row(i) = ((x.row(i).array() - mu) * is).matrix();
            inv_sigma(i, 0) = is;
        }
        int id = push(std::move(out));
        record([this, id, a, inv_sigma] {
            const Mat<T>& y = nodes_[id].value;
            const Mat<T>& g = nodes_[id].grad;
            T d = static_cast<T>(y.cols());
            for (Eigen::Index i = 0; i < y.rows(); ++i) {
                T gm = g.row(i).mean();
                T gy = (g.row(i).array() * y.row(i).array()).sum() / d;
                nodes_[a].grad.row(i).array() +=
                    inv_sigma(i, 0) * (g.row(i).array() - gm - y.row(i).array() * gy);
            }
        }, id);
        return id;
    }

    // Per-row RMS normalization.
    int rms_norm(int a, T eps = T(1e-6)) {
        const Mat<T>& x = nodes_[a].value;
        Mat<T> out(x.rows(), x.cols());
        Mat<T> inv_r(x.rows(), 1);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            T r = std::sqrt(x.row(i).array().square().mean() + eps);
            out.row(i) = x.row(i) / r;
            inv_r(i, 0) = T(1) / r;
        }
        int id = push(std::move(out));
        record([this, id, a, inv_r] {
            const Mat<T>& y = nodes_[id].value;
            const Mat<T>& g = nodes_[id].grad;
            T d = static_cast<T>(y.cols());
            for (Eigen::Index i = 0; i < y.rows(); ++i) {
                T gy = (g.row(i).array() * y.row(i).array()).sum() / d;
                nodes_[a].grad.row(i).array() +=
                    inv_r(i, 0) * (g.row(i).array() - y.row(i).array() * gy);
            }
        }, id);
        return id;
    }

    // Per-row L2 normalization (exact unit rows; used for quaternions).
    int normalize_rows(int a) {
        const Mat<T>& x = nodes_[a].value;
        Mat<T> out(x.rows(), x.cols());
        Mat<T> inv_n(x.rows(), 1);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            T n = x.row(i).norm();
            out.row(i) = x.row(i) / n;
            inv_n(i, 0) = T(1) / n;
        }
        int id = push(std::move(out));
        record([this, id, a, inv_n] {
            const Mat<T>& y = nodes_[id].value;
            const Mat<T>& g = nodes_[id].grad;
            for (Eigen::Index i = 0; i < y.rows(); ++i) {
                T gy = g.row(i).dot(y.row(i));
                nodes_[a].grad.row(i) += inv_n(i, 0) * (g.row(i) - y.row(i) * gy);
            }
        }, id);
        return id;
    }

    // Fused y = layer_norm(x) * gamma + beta with parameter rows.
    int layer_norm_affine(int a, Param<T>& gamma, Param<T>& beta, T eps = T(1e-6)) {
        int normed = layer_norm(a, eps);
        Mat<T> out = nodes_[normed].value;
        out.array().rowwise() *= gamma.value.row(0).array();
        out.rowwise() += beta.value.row(0);
        int id = push(std::move(out));
        if (record_) {
            Param<T>*gp = &gamma, *bp = &beta;
            record([this, id, normed, gp, bp] {
                const Mat<T>& g = nodes_[id].grad;
                nodes_[normed].grad.array() +=
                    g.array().rowwise() * gp->value.row(0).array();
                gp->ensure_grad();
                gp->grad.row(0).array() +=
                    (g.array() * nodes_[normed].value.array()).colwise().sum();
                bp->ensure_grad();
                bp->grad.row(0) += g.colwise().sum();
            }, id);
        }
        return id;
    }

    // Fused y = layer_norm(x) * scale + shift with node rows (scale and
    // shift are 1 x d nodes).
    int modulated_norm(int a, int scale_row, int shift_row, T eps = T(1e-6)) {
        int normed = layer_norm(a, eps);
        Mat<T> out = nodes_[normed].value;
        out.array().rowwise() *= nodes_[scale_row].value.row(0).array();
        out.rowwise() += nodes_[shift_row].value.row(0);
        int id = push(std::move(out));
        record([this, id, normed, scale_row, shift_row] {
            const Mat<T>& g = nodes_[id].grad;
            nodes_[normed].grad.array() +=
                g.array().rowwise() * nodes_[scale_row].value.row(0).array();
            nodes_[scale_row].grad.row(0).array() +=
                (g.array() * nodes_[normed].value.array()).colwise().sum();
            nodes_[shift_row].grad.row(0) += g.colwise().sum();
        }, id);
        return id;
    }

    // Fused gated residual y = x + branch * gate_row.
    int add_gated(int x, int branch, int gate_row) {
        Mat<T> out = nodes_[branch].value;
        out.array().rowwise() *= nodes_[gate_row].value.row(0).array();
        out += nodes_[x].value;
        int id = push(std::move(out));
        record([this, id, x, branch, gate_row] {
            const Mat<T>& g = nodes_[id].grad;
            nodes_[x].grad += g;
            nodes_[branch].grad.array() +=
                g.array().rowwise() * nodes_[gate_row].value.row(0).array();
            nodes_[gate_row].grad.row(0).array() +=
                (g.array() * nodes_[branch].value.array()).colwise().sum();
        }, id);
        return id;
    }

    int slice_cols(int a, Eigen::Index c0, Eigen::Index w) {
        int id = push(nodes_[a].value.middleCols(c0, w));
        record([this, id, a, c0, w] {
            nodes_[a].grad.middleCols(c0, w) += nodes_[id].grad;
        }, id);
        return id;
    }

    // Fused head extraction: slice columns, RMS-normalize each row, and
    // multiply by a constant. The workhorse of per-head attention.
    int rms_slice(int a, Eigen::Index c0, Eigen::Index w, T mult = T(1),
                  T eps = T(1e-6)) {
        auto block = nodes_[a].value.middleCols(c0, w);
        Mat<T> out(block.rows(), w);
        Mat<T> inv_r(block.rows(), 1);
        for (Eigen::Index i = 0; i < block.rows(); ++i) {
            T r = std::sqrt(block.row(i).array().square().mean() + eps);
            T f = mult / r;
            out.row(i) = block.row(i) * f;
            inv_r(i, 0) = T(1) / r;
        }
        int id = push(std::move(out));
        record([this, id, a, c0, w, mult, inv_r] {
            const Mat<T>& y = nodes_[id].value; // = mult * x / r
            const Mat<T>& g = nodes_[id].grad;
            T d = static_cast<T>(w);
            auto target = nodes_[a].grad.middleCols(c0, w);
            for (Eigen::Index i = 0; i < y.rows(); ++i) {
                // Through y = mult * n(x): dn = mult * g; then RMS backward.
                T gy = (g.row(i).array() * y.row(i).array()).sum() / (d * mult);
                target.row(i).array() +=
                    inv_r(i, 0) * (mult * g.row(i).array() - y.row(i).array() * gy);
            }
        }, id);
        return id;
    }

    int concat_cols(const std::vector<int>& parts) {
        Eigen::Index rows = nodes_[parts[0]].value.rows(), cols = 0;
        for (int p : parts) cols += nodes_[p].value.cols();
        Mat<T> out(rows, cols);
        Eigen::Index at = 0;
        for (int p : parts) {
            out.middleCols(at, nodes_[p].value.cols()) = nodes_[p].value;
            at += nodes_[p].value.cols();
        }
        int id = push(std::move(out));
        std::vector<int> parts_copy = parts;
        record([this, id, parts_copy] {
            Eigen::Index at2 = 0;
            for (int p : parts_copy) {
                nodes_[p].grad += nodes_[id].grad.middleCols(at2, nodes_[p].value.cols());
                at2 += nodes_[p].value.cols();
            }
        }, id);
        return id;
    }

    // Column mean over rows -> 1 x d.
    int mean_rows(int a) {
        int id = push(Mat<T>(nodes_[a].value.colwise().mean()));
        record([this, id, a] {
            T inv = T(1) / static_cast<T>(nodes_[a].value.rows());
            nodes_[a].grad.rowwise() += (nodes_[id].grad.row(0) * inv).eval();
        }, id);
        return id;
    }

    // Mean squared error against a constant target -> 1 x 1.
    int mse_to(int a, const Mat<T>& target) {
        const Mat<T>& x = nodes_[a].value;
        T v = (x - target).array().square().mean();
        Mat<T> out(1, 1);
        out(0, 0) = v;
        int id = push(std::move(out));
        Mat<T> tgt = target;
        record([this, id, a, tgt] {
            T g = nodes_[id].grad(0, 0);
            T inv = T(2) / static_cast<T>(nodes_[a].value.size());
            nodes_[a].grad += g * inv * (nodes_[a].value - tgt);
        }, id);
        return id;
    }

    // Sum of mask * |a - target| / divisor -> 1 x 1. Mask entries are 0/1.
    int l1_masked(int a, const Mat<T>& target, const Mat<T>& mask, T divisor) {
        const Mat<T>& x = nodes_[a].value;
        T v = ((x - target).array().abs() * mask.array()).sum() / divisor;
        Mat<T> out(1, 1);
        out(0, 0) = v;
        int id = push(std::move(out));
        Mat<T> tgt = target, msk = mask;
        record([this, id, a, tgt, msk, divisor] {
            T g = nodes_[id].grad(0, 0) / divisor;
            auto diff = (nodes_[a].value - tgt).array();
            nodes_[a].grad.array() +=
                g * msk.array() * diff.unaryExpr([](T d) {
                    return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
                });
        }, id);
        return id;
    }

    // Rotates each point row by the unit quaternion q (1 x 4, (w,x,y,z)).
    int quat_rotate(int points, int q) {
        const Mat<T>& P = nodes_[points].value;
        const Mat<T>& Q = nodes_[q].value;
        T w = Q(0, 0), qx = Q(0, 1), qy = Q(0, 2), qz = Q(0, 3);
        Mat<T> out(P.rows(), 3);
        for (Eigen::Index i = 0; i < P.rows(); ++i) {
            T px = P(i, 0), py = P(i, 1), pz = P(i, 2);
            // c1 = u x p, out = p + 2w c1 + 2 u x c1
            T c1x = qy * pz - qz * py, c1y = qz * px - qx * pz, c1z = qx * py - qy * px;
            out(i, 0) = px + 2 * (w * c1x + qy * c1z - qz * c1y);
            out(i, 1) = py + 2 * (w * c1y + qz * c1x - qx * c1z);
            out(i, 2) = pz + 2 * (w * c1z + qx * c1y - qy * c1x);
        }
        int id = push(std::move(out));
        record([this, id, points, q] {
            const Mat<T>& P2 = nodes_[points].value;
            const Mat<T>& Q2 = nodes_[q].value;
            const Mat<T>& G = nodes_[id].grad;
            T w = Q2(0, 0);
            Eigen::Matrix<T, 3, 1> u(Q2(0, 1), Q2(0, 2), Q2(0, 3));
            // Rotation matrix transpose applied to gradient rows.
            Eigen::Matrix<T, 3, 3> R;
            {
                T x = u[0], y = u[1], z = u[2];
                R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
                    2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
                    2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
            }
            Eigen::Matrix<T, 4, 1> gq = Eigen::Matrix<T, 4, 1>::Zero();
            for (Eigen::Index i = 0; i < P2.rows(); ++i) {
                Eigen::Matrix<T, 3, 1> p = P2.row(i).transpose();
                Eigen::Matrix<T, 3, 1> g = G.row(i).transpose();
                nodes_[points].grad.row(i) += (R.transpose() * g).transpose();
                Eigen::Matrix<T, 3, 1> c1 = u.cross(p);
                gq[0] += 2 * g.dot(c1);
                Eigen::Matrix<T, 3, 1> gu = 2 * w * p.cross(g) + 2 * c1.cross(g) +
                                             2 * p.cross(g.cross(u));
                gq.template tail<3>() += gu;
            }
            // Project onto the tangent of the unit sphere; the input is unit
            // norm so upstream normalization only needs the tangent part.
            Eigen::Matrix<T, 4, 1> qv(Q2(0, 0), Q2(0, 1), Q2(0, 2), Q2(0, 3));
            gq -= qv * qv.dot(gq);
            nodes_[q].grad.row(0) += gq.transpose();
        }, id);
        return id;
    }

    // Softmax-weighted sum over several key groups with bitwise
    // permutation-invariant reductions: groups at index >= sortable_from
    // are combined in an order determined only by their per-row values,
    // never by their position in the list. Optional per-group constant
    // score offsets support masking experiments.
    int grouped_attention(const std::vector<int>& score_ids,
                          const std::vector<int>& value_ids, int sortable_from,
                          const std::vector<Mat<T>>* score_offsets = nullptr) {
        const int groups = static_cast<int>(score_ids.size());
        require(groups >= 1 && value_ids.size() == score_ids.size(),
                "grouped_attention: group lists mismatch");
        const Eigen::Index n = nodes_[score_ids[0]].value.rows();
        const Eigen::Index dh = nodes_[value_ids[0]].value.cols();

        std::vector<Mat<T>> E(groups);
        Mat<T> row_max = Mat<T>::Constant(n, 1, -std::numeric_limits<T>::infinity());
        for (int g = 0; g < groups; ++g) {
            Mat<T> s = nodes_[score_ids[g]].value;
            if (score_offsets) s += (*score_offsets)[g];
            E[g] = std::move(s);
            row_max = row_max.cwiseMax(E[g].rowwise().maxCoeff());
        }
        std::vector<Mat<T>> D(groups), P(groups);
        for (int g = 0; g < groups; ++g) {
            // Separate subtract and exp so the exp runs on a plain dense
            // array (the fused expression falls back to scalar exp).
            E[g].colwise() -= row_max.col(0);
            Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> flat(E[g].data(),
                                                                E[g].size());
            flat = flat.exp();
            D[g] = E[g].rowwise().sum();
            P[g].noalias() = E[g] * nodes_[value_ids[g]].value;
        }

        Mat<T> denom = Mat<T>::Zero(n, 1);
        Mat<T> numer = Mat<T>::Zero(n, dh);
        if (groups - sortable_from <= 1) {
            // Reduction order is fixed; no per-row sorting needed.
            for (int g = 0; g < groups; ++g) {
                denom.col(0) += D[g].col(0);
                numer += P[g];
            }
        } else {
            std::vector<int> order(groups - sortable_from);
            for (Eigen::Index i = 0; i < n; ++i) {
                for (int g = 0; g < sortable_from; ++g) {
                    denom(i, 0) += D[g](i, 0);
                    numer.row(i) += P[g].row(i);
                }
                std::iota(order.begin(), order.end(), sortable_from);
                std::sort(order.begin(), order.end(), [&](int a, int b) {
                    if (D[a](i, 0) != D[b](i, 0)) return D[a](i, 0) < D[b](i, 0);
                    for (Eigen::Index c = 0; c < dh; ++c)
                        if (P[a](i, c) != P[b](i, c)) return P[a](i, c) < P[b](i, c);
                    return false;
                });
                for (int g : order) {
                    denom(i, 0) += D[g](i, 0);
                    numer.row(i) += P[g].row(i);
                }
            }
        }
        Mat<T> out = numer.array().colwise() / denom.col(0).array();
        int id = push(std::move(out));

        if (record_) {
            // Normalized attention weights per group.
            std::vector<Mat<T>> A(groups);
            for (int g = 0; g < groups; ++g)
                A[g] = (E[g].array().colwise() / denom.col(0).array()).matrix();
            std::vector<int> sids = score_ids, vids = value_ids;
            record([this, id, sids, vids, A] {
                const Mat<T>& G = nodes_[id].grad;
                const int gs = static_cast<int>(sids.size());
                const Eigen::Index n2 = G.rows();
                std::vector<Mat<T>> dA(gs);
                Mat<T> rho = Mat<T>::Zero(n2, 1);
                for (int g = 0; g < gs; ++g) {
                    nodes_[vids[g]].grad.noalias() += A[g].transpose() * G;
                    dA[g].noalias() = G * nodes_[vids[g]].value.transpose();
                    rho.col(0) += (dA[g].array() * A[g].array()).rowwise().sum().matrix();
                }
                for (int g = 0; g < gs; ++g)
                    nodes_[sids[g]].grad.array() +=
                        A[g].array() * (dA[g].array().colwise() - rho.col(0).array());
            }, id);
        }
        return id;
    }

    struct NormalsResult {
        int node = -1;
        std::vector<std::uint8_t> valid; // per pixel
    };

    // Unit normals from an H x W grid of points stored as (H*W) x 3 rows:
    // cross product of the column-direction and row-direction differences
    // (central where possible, one-sided at borders), normalized. Pixels
    // with a degenerate cross product come back invalid with zero rows.
    NormalsResult normals_from_grid(int points, int H, int W) {
        const Mat<T>& P = nodes_[points].value;
        require(P.rows() == static_cast<Eigen::Index>(H) * W && P.cols() == 3,
                "normals_from_grid: points must be (H*W) x 3");
        require(H >= 2 && W >= 2, "normals_from_grid: needs at least 2x2");

        struct PixelAux {
            int idx;                  // pixel index
            int un, up, vn, vp;       // next/prev indices for u and v diffs
            Eigen::Matrix<T, 3, 1> du, dv, nrm;
            T inv_len;
        };
        auto aux = std::make_shared<std::vector<PixelAux>>();
        Mat<T> out = Mat<T>::Zero(P.rows(), 3);
        NormalsResult res;
        res.valid.assign(static_cast<std::size_t>(H) * W, 0);

        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                int idx = r * W + c;
                int cu_n = c + 1 < W ? c + 1 : c;
                int cu_p = c - 1 >= 0 ? c - 1 : c;
                int rv_n = r + 1 < H ? r + 1 : r;
                int rv_p = r - 1 >= 0 ? r - 1 : r;
                int un = r * W + cu_n, up = r * W + cu_p;
                int vn = rv_n * W + c, vp = rv_p * W + c;
                Eigen::Matrix<T, 3, 1> du = P.row(un) - P.row(up);
                Eigen::Matrix<T, 3, 1> dv = P.row(vn) - P.row(vp);
                Eigen::Matrix<T, 3, 1> cr = du.cross(dv);
                T len = cr.norm();
                if (len < T(1e-12)) continue;
                Eigen::Matrix<T, 3, 1> nrm = cr / len;
                out.row(idx) = nrm.transpose();
                res.valid[idx] = 1;
                aux->push_back({idx, un, up, vn, vp, du, dv, nrm, T(1) / len});
            }

        int id = push(std::move(out));
        record([this, id, points, aux] {
            const Mat<T>& G = nodes_[id].grad;
            for (const auto& a : *aux) {
                Eigen::Matrix<T, 3, 1> gn = G.row(a.idx).transpose();
                Eigen::Matrix<T, 3, 1> gc = (gn - a.nrm * a.nrm.dot(gn)) * a.inv_len;
                Eigen::Matrix<T, 3, 1> gdu = a.dv.cross(gc);
                Eigen::Matrix<T, 3, 1> gdv = gc.cross(a.du);
                nodes_[points].grad.row(a.un) += gdu.transpose();
                nodes_[points].grad.row(a.up) -= gdu.transpose();
                nodes_[points].grad.row(a.vn) += gdv.transpose();
                nodes_[points].grad.row(a.vp) -= gdv.transpose();
            }
        }, id);
        res.node = id;
        return res;
    }

    // Rearranges per-patch pixel blocks into a row-major (H*W) x ch image
    // grid. Input rows are patches (row-major over the patch grid), with
    // each row holding patch pixels row-major, channels interleaved.
    int unpatchify(int a, int patches_per_col, int patches_per_row, int patch,
                   int channels) {
        const Mat<T>& X = nodes_[a].value;
        const int W = patches_per_row * patch;
        Mat<T> out(static_cast<Eigen::Index>(patches_per_col) * patch * W, channels);
        for (int pr = 0; pr < patches_per_col; ++pr)
            for (int pc = 0; pc < patches_per_row; ++pc) {
                Eigen::Index prow = static_cast<Eigen::Index>(pr) * patches_per_row + pc;
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx) {
                        Eigen::Index pix =
                            static_cast<Eigen::Index>(pr * patch + dy) * W +
                            (pc * patch + dx);
                        for (int ch = 0; ch < channels; ++ch)
                            out(pix, ch) = X(prow, (dy * patch + dx) * channels + ch);
                    }
            }
        int id = push(std::move(out));
        record([this, id, a, patches_per_col, patches_per_row, patch, channels] {
            const Mat<T>& G = nodes_[id].grad;
            const int W = patches_per_row * patch;
            for (int pr = 0; pr < patches_per_col; ++pr)
                for (int pc = 0; pc < patches_per_row; ++pc) {
                    Eigen::Index prow =
                        static_cast<Eigen::Index>(pr) * patches_per_row + pc;
                    for (int dy = 0; dy < patch; ++dy)
                        for (int dx = 0; dx < patch; ++dx) {
                            Eigen::Index pix =
                                static_cast<Eigen::Index>(pr * patch + dy) * W +
                                (pc * patch + dx);
                            for (int ch = 0; ch < channels; ++ch)
                                nodes_[a].grad(prow, (dy * patch + dx) * channels + ch) +=
                                    G(pix, ch);
                        }
                }
        }, id);
        return id;
    }

    void backward(int loss_id) {
        require(record_, "backward: tape was not recording");
        auto t0 = std::chrono::steady_clock::now();
        for (auto& n : nodes_) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
        auto t1 = std::chrono::steady_clock::now();
        nodes_[loss_id].grad(0, 0) = T(1);
        for (std::size_t i = backs_.size(); i-- > 0;) {
            if (back_of_[i] <= loss_id) backs_[i]();
        }
        auto t2 = std::chrono::steady_clock::now();
        if (getenv("MIXREC_TIME_BWD"))
            fprintf(stderr, "zero=%.1fms closures=%.1fms\n",
                std::chrono::duration<double,std::milli>(t1-t0).count(),
                std::chrono::duration<double,std::milli>(t2-t1).count());
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
    };

    int push(Mat<T> v) {
        nodes_.push_back(Node{std::move(v), Mat<T>()});
        return static_cast<int>(nodes_.size()) - 1;
    }

    template <class F>
    void record(F&& f, int node_id) {
        if (!record_) return;
        backs_.push_back(std::forward<F>(f));
        back_of_.push_back(node_id);
    }

    bool record_ = true;
    std::vector<Node> nodes_;
    std::vector<std::function<void()>> backs_;
    std::vector<int> back_of_;
};

// One Adam update over every trainable parameter.
template <class T>
void adam_step(ParamStore<T>& params, int step, T lr, T beta1 = T(0.9),
               T beta2 = T(0.999), T eps = T(1e-8)) {
    T bc1 = T(1) - std::pow(beta1, T(step));
    T bc2 = T(1) - std::pow(beta2, T(step));
    for (auto& p : params.all()) {
        if (!p->trainable) continue;
        p->ensure_grad();
        if (p->adam_m.size() == 0) {
            p->adam_m = Mat<T>::Zero(p->value.rows(), p->value.cols());
            p->adam_v = Mat<T>::Zero(p->value.rows(), p->value.cols());
        }
        p->adam_m = beta1 * p->adam_m + (T(1) - beta1) * p->grad;
        p->adam_v = beta2 * p->adam_v +
                    (T(1) - beta2) * p->grad.cwiseProduct(p->grad).eval();
        auto mh = (p->adam_m / bc1).eval();
        auto vh = (p->adam_v / bc2).eval();
        p->value.array() -= lr * mh.array() / (vh.array().sqrt() + eps);
    }
}

// Cosine learning-rate schedule from lr down to zero over total steps.
template <class T>
T cosine_lr(T lr, int step, int total_steps) {
    if (total_steps <= 0) return lr;
    T x = static_cast<T>(step) / static_cast<T>(total_steps);
    return lr * T(0.5) * (T(1) + std::cos(T(M_PI) * std::min(x, T(1))));
}

template <class T>
void fill_normal(Mat<T>& m, Rng& rng, double stddev) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(i, j) = static_cast<T>(rng.normal() * stddev);
}

} // namespace mixrec::nn
