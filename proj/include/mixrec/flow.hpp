#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "mixrec/common.hpp"
#include "mixrec/geometry.hpp"
#include "mixrec/io.hpp"
#include "mixrec/mot.hpp"
#include "mixrec/nn.hpp"
#include "mixrec/rng.hpp"
#include "mixrec/synth_data.hpp"

namespace mixrec::flow {

using nn::Mat;

// One training interpolant: z_t = (1 - t) z_0 + t * eps.
template <class T>
struct FlowSample {
    Mat<T> z0, eps, zt;
    double t = 0.0;
};

template <class T>
FlowSample<T> make_flow_sample(const Mat<T>& z0, double t, Rng& rng) {
    require(t >= 0.0 && t <= 1.0, "make_flow_sample: t must be in [0, 1]");
    FlowSample<T> s;
    s.z0 = z0;
    s.t = t;
    s.eps = Mat<T>(z0.rows(), z0.cols());
    for (Eigen::Index i = 0; i < s.eps.rows(); ++i)
        for (Eigen::Index j = 0; j < s.eps.cols(); ++j)
            s.eps(i, j) = static_cast<T>(rng.normal());
    // Endpoints reproduce their operand bitwise.
    if (t == 0.0)
        s.zt = s.z0;
    else if (t == 1.0)
        s.zt = s.eps;
    else
        s.zt = (T(1) - static_cast<T>(t)) * s.z0 + static_cast<T>(t) * s.eps;
    return s;
}

// Mean squared error between the predicted velocity and (eps - z0).
template <class T>
double flow_loss(const Mat<T>& v_pred, const FlowSample<T>& sample) {
    if (v_pred.rows() != sample.z0.rows() || v_pred.cols() != sample.z0.cols())
        throw ShapeMismatch("flow_loss: velocity shape differs from the latent");
    return (v_pred - (sample.eps - sample.z0)).template cast<double>().array().square()
        .mean();
}

struct LossWeights {
    double lambda_pts = 0.0;
    double lambda_nml = 0.0;
};

// Time-dependent point-map supervision weights: the point losses only see
// small t, where the noisy latent still carries geometry.
inline LossWeights loss_weights(double t) {
    require(t >= 0.0 && t <= 1.0, "loss_weights: t must be in [0, 1]");
    LossWeights w;
    w.lambda_pts = 1.0 / (1.0 + std::exp(-(-24.0 * t + 9.0)));
    w.lambda_nml = 0.1 * w.lambda_pts;
    return w;
}

struct TotalLossBreakdown {
    double total = 0.0;
    double l_fm = 0.0;
    double l_pts = 0.0;
    double l_nml = 0.0;
    double lambda_pts = 0.0;
    double lambda_nml = 0.0;
    bool nml_missing = false; // no pixel had both normals valid
};

// Combined objective: flow loss + weighted L1 losses on aligned point-map
// coordinates and their normals, pooled over every jointly valid pixel of
// every view. Mean reduction throughout.
template <class T>
TotalLossBreakdown total_loss(const Mat<T>& v_pred, const FlowSample<T>& sample,
                              const std::vector<PointMap>& pred_aligned,
                              const std::vector<PointMap>& gt, double t) {
    if (pred_aligned.size() != gt.size())
        throw ShapeMismatch("total_loss: view counts differ");
    TotalLossBreakdown out;
    LossWeights w = loss_weights(t);
    out.lambda_pts = w.lambda_pts;
    out.lambda_nml = w.lambda_nml;
    out.l_fm = flow_loss(v_pred, sample);

    double pts_acc = 0.0;
    std::size_t pts_n = 0;
    double nml_acc = 0.0;
    std::size_t nml_n = 0;
    for (std::size_t v = 0; v < gt.size(); ++v) {
        const PointMap& p = pred_aligned[v];
        const PointMap& g = gt[v];
        if (p.height != g.height || p.width != g.width)
            throw ShapeMismatch("total_loss: point map dims differ");
        for (std::size_t i = 0; i < g.points.size(); ++i) {
            if (!p.valid[i] || !g.valid[i]) continue;
            pts_acc += (p.points[i] - g.points[i]).cwiseAbs().sum();
            ++pts_n;
        }
        PointMap pn = pointmap_normals(p);
        PointMap gn = pointmap_normals(g);
        for (std::size_t i = 0; i < g.points.size(); ++i) {
            if (!pn.valid[i] || !gn.valid[i]) continue;
            nml_acc += (pn.points[i] - gn.points[i]).cwiseAbs().sum();
            ++nml_n;
        }
    }
    if (pts_n == 0) throw EmptyOverlap("total_loss: no jointly valid pixels");
    out.l_pts = pts_acc / (3.0 * static_cast<double>(pts_n));
    if (nml_n == 0)
        out.nml_missing = true;
    else
        out.l_nml = nml_acc / (3.0 * static_cast<double>(nml_n));
    out.total = out.l_fm + w.lambda_pts * out.l_pts + w.lambda_nml * out.l_nml;
    return out;
}

// Euler sampling from t = 1 down to 0: z starts as standard normal and
// follows z <- z - (1/steps) * v(z, t_k) on the uniform grid t_k = 1 - k/steps.
template <class T, class VelocityFn>
Mat<T> euler_sample(VelocityFn&& velocity, int steps, Rng& rng, Eigen::Index rows,
                    Eigen::Index cols) {
    require(steps >= 1, "euler_sample: steps must be >= 1");
    Mat<T> z(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) z(i, j) = static_cast<T>(rng.normal());
    T h = T(1) / static_cast<T>(steps);
    for (int k = 0; k < steps; ++k) {
        double t = 1.0 - static_cast<double>(k) / steps;
        z -= h * velocity(z, t);
    }
    return z;
}

// Toy occupancy decoder: trilinear upsampling of latent channel 0 to the
// occupancy lattice, thresholded.
template <class T>
SparseVoxelGrid decode_occupancy(const Mat<T>& latent, int latent_side,
                                 double threshold = 0.0, int occupancy_side = 0) {
    require(latent.rows() == static_cast<Eigen::Index>(latent_side) * latent_side *
                                 latent_side,
            "decode_occupancy: latent rows do not match the side");
    if (occupancy_side == 0) occupancy_side = 2 * latent_side;
    SparseVoxelGrid grid(occupancy_side);

    auto at = [&](int x, int y, int z) {
        x = std::clamp(x, 0, latent_side - 1);
        y = std::clamp(y, 0, latent_side - 1);
        z = std::clamp(z, 0, latent_side - 1);
        return static_cast<double>(latent(mot::latent_cell_index(x, y, z, latent_side),
                                          0));
    };

    for (int z = 0; z < occupancy_side; ++z)
        for (int y = 0; y < occupancy_side; ++y)
            for (int x = 0; x < occupancy_side; ++x) {
                // Output cell center in latent cell coordinates.
                double fx = (x + 0.5) / occupancy_side * latent_side - 0.5;
                double fy = (y + 0.5) / occupancy_side * latent_side - 0.5;
                double fz = (z + 0.5) / occupancy_side * latent_side - 0.5;
                int x0 = static_cast<int>(std::floor(fx));
                int y0 = static_cast<int>(std::floor(fy));
                int z0 = static_cast<int>(std::floor(fz));
                double wx = fx - x0, wy = fy - y0, wz = fz - z0;
                double v = 0.0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            double wgt = (dx ? wx : 1 - wx) * (dy ? wy : 1 - wy) *
                                         (dz ? wz : 1 - wz);
                            v += wgt * at(x0 + dx, y0 + dy, z0 + dz);
                        }
                if (v > threshold) grid.insert(Vec3i{x, y, z});
            }
    return grid;
}

inline double occupancy_iou(const SparseVoxelGrid& a, const SparseVoxelGrid& b) {
    require(a.resolution() == b.resolution(), "occupancy_iou: resolutions differ");
    std::size_t inter = 0;
    for (const Vec3i& v : a.occupied()) inter += b.contains(v);
    std::size_t uni = a.size() + b.size() - inter;
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Freezing policy and training
// ---------------------------------------------------------------------------

// Per-parameter trainability: parameters without a pretrained value train,
// parameters of cross-attention or joint-attention modules train, and
// everything else stays frozen.
struct FreezePolicy {
    std::vector<std::pair<std::string, bool>> entries; // (name, trainable)

    bool trainable(const std::string& name) const {
        for (const auto& [n, t] : entries)
            if (n == name) return t;
        throw InvalidArgument("FreezePolicy: unknown parameter " + name);
    }
};

template <class T>
FreezePolicy make_freeze_policy(const mot::MixModel<T>& model) {
    FreezePolicy policy;
    for (const auto& p : model.params.all())
        policy.entries.emplace_back(p->name, !p->pretrained || p->attention_flag);
    return policy;
}

template <class T>
void apply_freeze_policy(mot::MixModel<T>& model, const FreezePolicy& policy) {
    require(policy.entries.size() == model.params.all().size(),
            "apply_freeze_policy: policy does not cover the parameter set");
    for (auto& p : model.params.all()) p->trainable = policy.trainable(p->name);
}

enum class TrainPhase { pretrain_branches, mixed };

struct TrainConfig {
    mot::ModelConfig model;
    int steps = 500;      // per phase component
    double lr = 1e-3;
    int batch = 4;
    std::uint64_t seed = 0;
};

struct TraceRow {
    int step = 0;
    double l_fm = 0.0;
    double l_pts = 0.0;
    double l_nml = 0.0;
    double lambda_pts = 0.0;
};

struct TrainResult {
    io::Checkpoint checkpoint;
    std::vector<TraceRow> trace;
};

namespace detail {

using MatF = Mat<float>;

inline std::vector<int> pick_views(const synth::Scene& scene, int n, Rng& rng) {
    auto mode = synth::draw_view_mode(rng);
    auto positions = synth::camera_positions(scene);
    return synth::sample_views(positions, n, mode, rng);
}

// Ground-truth aligned (cube-space) point map of one view.
inline PointMap gt_aligned(const synth::Scene& scene, int view) {
    return aligned_pointmap(scene.point_maps[view], scene.cameras[view],
                            scene.gt_similarity);
}

inline nn::Mat<float> mask_of(const PointMap& pm) {
    nn::Mat<float> m(static_cast<Eigen::Index>(pm.height) * pm.width, 3);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        m.row(i).setConstant(pm.valid[static_cast<std::size_t>(i)] ? 1.0f : 0.0f);
    return m;
}

inline nn::Mat<float> points_of(const PointMap& pm) {
    nn::Mat<float> m(static_cast<Eigen::Index>(pm.height) * pm.width, 3);
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const Vec3& p = pm.points[static_cast<std::size_t>(i)];
        m(i, 0) = static_cast<float>(p.x());
        m(i, 1) = static_cast<float>(p.y());
        m(i, 2) = static_cast<float>(p.z());
    }
    return m;
}

// Tape chain from the model's raw outputs to the aligned point map of one
// view: s (R_sim (R_i X_i + T_i) + T_sim).
inline int aligned_chain(nn::Tape<float>& tape, const mot::MixForwardIds<float>& fwd,
                         int view) {
    int world = tape.add_rowvec(
        tape.quat_rotate(fwd.pointmaps[view], fwd.pose_quat[view]),
        fwd.pose_trans[view]);
    int rotated = tape.add_rowvec(tape.quat_rotate(world, fwd.sim_quat), fwd.sim_trans);
    return tape.scalar_mul(rotated, fwd.sim_scale);
}

struct MixedStepLosses {
    int total_node = -1;
    double l_fm = 0.0, l_pts = 0.0, l_nml = 0.0;
};

// Builds the combined training objective on the tape for one sample.
inline MixedStepLosses mixed_losses(nn::Tape<float>& tape,
                                    const mot::MixForwardIds<float>& fwd,
                                    const FlowSample<float>& sample,
                                    const synth::Scene& scene,
                                    const std::vector<int>& views, double t) {
    MixedStepLosses out;
    LossWeights w = loss_weights(t);

    MatF target = sample.eps - sample.z0;
    int l_fm = tape.mse_to(fwd.velocity, target);

    // Aligned point maps and their masks.
    std::vector<int> aligned;
    std::vector<PointMap> gts;
    std::size_t valid_total = 0;
    for (std::size_t i = 0; i < views.size(); ++i) {
        aligned.push_back(aligned_chain(tape, fwd, static_cast<int>(i)));
        gts.push_back(gt_aligned(scene, views[i]));
        valid_total += gts.back().valid_count();
    }
    if (valid_total == 0) throw EmptyOverlap("train: no valid pixels in the batch");

    int l_pts = -1;
    for (std::size_t i = 0; i < views.size(); ++i) {
        int term = tape.l1_masked(aligned[i], points_of(gts[i]), mask_of(gts[i]),
                                  static_cast<float>(3.0 * valid_total));
        l_pts = l_pts < 0 ? term : tape.add(l_pts, term);
    }

    // Normal loss: predicted normals from the aligned maps, compared where
    // both the predicted and the ground-truth normals exist.
    const int side = scene.opts.image_side;
    std::vector<typename nn::Tape<float>::NormalsResult> pred_normals;
    std::vector<PointMap> gt_normals;
    std::size_t nml_total = 0;
    for (std::size_t i = 0; i < views.size(); ++i) {
        pred_normals.push_back(tape.normals_from_grid(aligned[i], side, side));
        gt_normals.push_back(pointmap_normals(gts[i]));
        for (std::size_t px = 0; px < gt_normals.back().valid.size(); ++px)
            if (gt_normals.back().valid[px] && pred_normals.back().valid[px])
                ++nml_total;
    }
    int l_nml = -1;
    if (nml_total > 0) {
        for (std::size_t i = 0; i < views.size(); ++i) {
            MatF mask(static_cast<Eigen::Index>(side) * side, 3);
            for (Eigen::Index px = 0; px < mask.rows(); ++px) {
                bool on = gt_normals[i].valid[static_cast<std::size_t>(px)] &&
                          pred_normals[i].valid[static_cast<std::size_t>(px)];
                mask.row(px).setConstant(on ? 1.0f : 0.0f);
            }
            int term = tape.l1_masked(pred_normals[i].node, points_of(gt_normals[i]),
                                      mask, static_cast<float>(3.0 * nml_total));
            l_nml = l_nml < 0 ? term : tape.add(l_nml, term);
        }
    }

    out.l_fm = tape.value(l_fm)(0, 0);
    out.l_pts = tape.value(l_pts)(0, 0);
    out.l_nml = l_nml >= 0 ? tape.value(l_nml)(0, 0) : 0.0;

    int total = tape.add(l_fm, tape.scale(l_pts, static_cast<float>(w.lambda_pts)));
    if (l_nml >= 0)
        total = tape.add(total, tape.scale(l_nml, static_cast<float>(w.lambda_nml)));
    out.total_node = total;
    return out;
}

} // namespace detail

// Two-phase toy training.
//
// pretrain_branches: trains the generative branch alone on the flow loss
// (no image conditioning: the branch never sees image tokens, the zero-
// information stand-in for blanked images) and the feed-forward branch
// alone on point-map + pose losses, as two separate models serialized into
// one checkpoint.
//
// mixed: fuses both pretrained branches through the block matching, applies
// the freezing policy, and minimizes the combined objective.
inline TrainResult train_toy(const std::vector<synth::Scene>& dataset,
                             const TrainConfig& cfg, TrainPhase phase,
                             const io::Checkpoint* pretrain = nullptr,
                             const FreezePolicy* freeze_override = nullptr) {
    if (dataset.empty()) throw EmptyDataset("train_toy: empty dataset");
    cfg.model.validate();
    for (const auto& scene : dataset) {
        if (scene.opts.image_side != cfg.model.image_side ||
            scene.opts.latent_side != cfg.model.latent_side ||
            scene.opts.latent_channels != cfg.model.latent_channels)
            throw ConfigMismatch("train_toy: dataset does not match the model config");
    }

    Rng rng = Rng(cfg.seed).substream("train");
    TrainResult result;
    result.checkpoint.config = io::model_config_to_json(cfg.model);

    if (phase == TrainPhase::pretrain_branches) {
        mot::GenModel<float> gen =
            mot::GenModel<float>::build(cfg.model, Rng(cfg.seed).substream("init_gen")
                                                       .next_u64());
        for (int step = 1; step <= cfg.steps; ++step) {
            gen.params.zero_grads();
            double fm_acc = 0.0, lam_acc = 0.0;
            for (int b = 0; b < cfg.batch; ++b) {
                const synth::Scene& scene =
                    dataset[rng.uniform_index(dataset.size())];
                double t = rng.uniform();
                FlowSample<float> sample = make_flow_sample(scene.z0, t, rng);
                nn::Tape<float> tape;
                int v = mot::forward_gen(tape, gen, sample.zt, t);
                int loss = tape.scale(tape.mse_to(v, sample.eps - sample.z0),
                                      1.0f / cfg.batch);
                tape.backward(loss);
                fm_acc += tape.value(loss)(0, 0) * cfg.batch;
                lam_acc += loss_weights(t).lambda_pts;
            }
            nn::adam_step<float>(gen.params, step,
                                 nn::cosine_lr<float>(static_cast<float>(cfg.lr), step,
                                                      cfg.steps));
            result.trace.push_back({step, fm_acc / cfg.batch, 0.0, 0.0,
                                    lam_acc / cfg.batch});
        }

        mot::PiModel<float> pi =
            mot::PiModel<float>::build(cfg.model, Rng(cfg.seed).substream("init_pi")
                                                      .next_u64());
        for (int step = 1; step <= cfg.steps; ++step) {
            pi.params.zero_grads();
            double pts_acc = 0.0;
            for (int b = 0; b < cfg.batch; ++b) {
                const synth::Scene& scene =
                    dataset[rng.uniform_index(dataset.size())];
                auto views = detail::pick_views(scene, cfg.model.views, rng);
                auto images = synth::render_views<float>(scene, views, cfg.model.patch);
                nn::Tape<float> tape;
                auto fwd = mot::forward_pi(tape, pi, images);

                std::size_t valid_total = 0;
                std::vector<PointMap> gts;
                for (int vi : views) {
                    gts.push_back(scene.point_maps[vi]);
                    valid_total += gts.back().valid_count();
                }
                int loss = -1;
                for (std::size_t i = 0; i < views.size(); ++i) {
                    int pm_term = tape.l1_masked(
                        fwd.pointmaps[i], detail::points_of(gts[i]),
                        detail::mask_of(gts[i]),
                        static_cast<float>(3.0 * std::max<std::size_t>(valid_total, 1)));
                    loss = loss < 0 ? pm_term : tape.add(loss, pm_term);
                    pts_acc += tape.value(pm_term)(0, 0);

                    // Pose supervision: sign-free quaternion alignment plus
                    // squared translation error.
                    const CameraPose& gt_pose = scene.cameras[views[i]];
                    nn::Mat<float> qgt(1, 4);
                    qgt << static_cast<float>(gt_pose.rotation.w()),
                        static_cast<float>(gt_pose.rotation.x()),
                        static_cast<float>(gt_pose.rotation.y()),
                        static_cast<float>(gt_pose.rotation.z());
                    int qdot = tape.matmul_nt(fwd.pose_quat[i], tape.leaf(qgt));
                    int qloss = tape.add_scalar(
                        tape.scale(tape.cmul(qdot, qdot), -1.0f), 1.0f);
                    nn::Mat<float> tgt(1, 3);
                    tgt << static_cast<float>(gt_pose.translation.x()),
                        static_cast<float>(gt_pose.translation.y()),
                        static_cast<float>(gt_pose.translation.z());
                    int tloss = tape.mse_to(fwd.pose_trans[i], tgt);
                    loss = tape.add(loss, tape.scale(tape.add(qloss, tloss),
                                                     1.0f / cfg.model.views));
                }
                loss = tape.scale(loss, 1.0f / cfg.batch);
                tape.backward(loss);
            }
            nn::adam_step<float>(pi.params, step,
                                 nn::cosine_lr<float>(static_cast<float>(cfg.lr), step,
                                                      cfg.steps));
            result.trace.push_back({cfg.steps + step, 0.0, pts_acc / cfg.batch, 0.0,
                                    1.0});
        }

        result.checkpoint.kind = "pretrain";
        io::checkpoint_append_params(result.checkpoint, gen.params);
        io::checkpoint_append_params(result.checkpoint, pi.params);
        return result;
    }

    // Mixed phase.
    if (!pretrain || pretrain->kind != "pretrain")
        throw ConfigMismatch("train_toy: mixed phase needs a pretrain checkpoint");
    mot::MixModel<float> model =
        mot::MixModel<float>::build(cfg.model, Rng(cfg.seed).substream("init_mix")
                                                   .next_u64());
    io::load_into_params(*pretrain, model.params, true);
    FreezePolicy policy =
        freeze_override ? *freeze_override : make_freeze_policy(model);
    apply_freeze_policy(model, policy);

    for (int step = 1; step <= cfg.steps; ++step) {
        model.params.zero_grads();
        double fm = 0, pts = 0, nml = 0, lam = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            const synth::Scene& scene = dataset[rng.uniform_index(dataset.size())];
            double t = rng.uniform();
            FlowSample<float> sample = make_flow_sample(scene.z0, t, rng);
            auto views = detail::pick_views(scene, cfg.model.views, rng);
            auto images = synth::render_views<float>(scene, views, cfg.model.patch);

            nn::Tape<float> tape;
            auto fwd = mot::forward_mix(tape, model, sample.zt, t, images);
            auto losses = detail::mixed_losses(tape, fwd, sample, scene, views, t);
            int scaled = tape.scale(losses.total_node, 1.0f / cfg.batch);
            tape.backward(scaled);

            fm += losses.l_fm;
            pts += losses.l_pts;
            nml += losses.l_nml;
            lam += loss_weights(t).lambda_pts;
        }
        nn::adam_step<float>(model.params, step,
                             nn::cosine_lr<float>(static_cast<float>(cfg.lr), step,
                                                  cfg.steps));
        result.trace.push_back({step, fm / cfg.batch, pts / cfg.batch, nml / cfg.batch,
                                lam / cfg.batch});
    }

    result.checkpoint.kind = "mixed";
    io::checkpoint_append_params(result.checkpoint, model.params);
    return result;
}

// Restores a mixed model from its checkpoint.
inline mot::MixModel<float> mixed_model_from_checkpoint(const io::Checkpoint& ckpt) {
    if (ckpt.kind != "mixed")
        throw ConfigMismatch("mixed_model_from_checkpoint: wrong checkpoint kind");
    mot::ModelConfig cfg = io::model_config_from_json(ckpt.config);
    mot::MixModel<float> model = mot::MixModel<float>::build(cfg, 0);
    io::load_into_params(ckpt, model.params, false);
    return model;
}

inline std::string trace_to_csv(const std::vector<TraceRow>& trace) {
    std::string out = "step,L_fm,L_pts,L_nml,lambda_pts\n";
    char line[160];
    for (const auto& row : trace) {
        std::snprintf(line, sizeof(line), "%d,%.8g,%.8g,%.8g,%.8g\n", row.step,
                      row.l_fm, row.l_pts, row.l_nml, row.lambda_pts);
        out += line;
    }
    return out;
}

} // namespace mixrec::flow
