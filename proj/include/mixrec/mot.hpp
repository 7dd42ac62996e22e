#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mixrec/block_matching.hpp"
#include "mixrec/common.hpp"
#include "mixrec/geometry.hpp"
#include "mixrec/nn.hpp"
#include "mixrec/rng.hpp"

namespace mixrec::mot {

using nn::Mat;

struct ModelConfig {
    int dim = 32;
    int heads = 4;
    int n_trellis = 6;
    int n_pi3 = 8;
    int latent_side = 8;
    int latent_channels = 4;
    int image_side = 32;
    int patch = 4;
    int views = 4;
    int ffn_mult = 4;

    void validate() const {
        require(dim >= 1 && heads >= 1 && dim % heads == 0,
                "ModelConfig: heads must divide dim");
        require(image_side % patch == 0, "ModelConfig: patch must divide image side");
        require(n_pi3 >= 2 && n_pi3 % 2 == 0, "ModelConfig: n_pi3 must be even");
        require(latent_side >= 1 && latent_channels >= 1 && views >= 1,
                "ModelConfig: sizes must be positive");
    }

    int latent_tokens() const { return latent_side * latent_side * latent_side; }
    int patches_per_row() const { return image_side / patch; }
    int patches_per_view() const { return patches_per_row() * patches_per_row(); }
    int image_channels() const { return 3; } // depth, mask, constant
    int patch_features() const { return patch * patch * image_channels(); }
    int pixels_per_view() const { return image_side * image_side; }
};

// Latent cell (x, y, z) lives at token row ((z * side) + y) * side + x.
inline int latent_cell_index(int x, int y, int z, int side) {
    return (z * side + y) * side + x;
}

template <class T>
struct AttnP {
    nn::Param<T>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
};

template <class T>
struct FfnP {
    nn::Param<T>*w1, *b1, *w2, *b2;
};

template <class T>
struct LnP {
    nn::Param<T>*g, *b;
};

namespace detail {

template <class T>
AttnP<T> make_attn(nn::ParamStore<T>& ps, const std::string& prefix, int d) {
    AttnP<T> a;
    a.wq = &ps.create(prefix + ".wq", d, d);
    a.bq = &ps.create(prefix + ".bq", 1, d);
    a.wk = &ps.create(prefix + ".wk", d, d);
    a.bk = &ps.create(prefix + ".bk", 1, d);
    a.wv = &ps.create(prefix + ".wv", d, d);
    a.bv = &ps.create(prefix + ".bv", 1, d);
    a.wo = &ps.create(prefix + ".wo", d, d);
    a.bo = &ps.create(prefix + ".bo", 1, d);
    return a;
}

template <class T>
FfnP<T> make_ffn(nn::ParamStore<T>& ps, const std::string& prefix, int d, int hidden) {
    FfnP<T> f;
    f.w1 = &ps.create(prefix + ".w1", d, hidden);
    f.b1 = &ps.create(prefix + ".b1", 1, hidden);
    f.w2 = &ps.create(prefix + ".w2", hidden, d);
    f.b2 = &ps.create(prefix + ".b2", 1, d);
    return f;
}

template <class T>
LnP<T> make_ln(nn::ParamStore<T>& ps, const std::string& prefix, int d) {
    LnP<T> l;
    l.g = &ps.create(prefix + ".g", 1, d);
    l.b = &ps.create(prefix + ".b", 1, d);
    return l;
}

// Initialization: weights are small normal draws, biases zero, layer-norm
// gains one, modulation tables zero (identity modulation at start), and
// cross-attention output projections zero so a fresh cross module is inert.
template <class T>
void init_params(nn::ParamStore<T>& ps, std::uint64_t seed) {
    Rng rng(seed);
    auto ends_with = [](const std::string& s, const std::string& suf) {
        return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
    };
    for (auto& p : ps.all()) {
        const std::string& n = p->name;
        if (ends_with(n, ".mod.w")) continue; // stays zero
        if (ends_with(n, ".ln1.g") || ends_with(n, ".ln2.g")) {
            p->value.setOnes();
            continue;
        }
        if (ends_with(n, ".ln1.b") || ends_with(n, ".ln2.b")) continue;
        bool is_bias = false;
        for (const char* suf : {".bq", ".bk", ".bv", ".bo", ".b1", ".b2", ".b"})
            if (ends_with(n, suf)) is_bias = true;
        if (is_bias) continue;
        if (n.find(".cross.") != std::string::npos && ends_with(n, ".wo")) continue;
        nn::fill_normal(p->value, rng, 0.02);
    }
}

} // namespace detail

// Parameter handles of the generative branch; shared between the
// standalone pretraining model and the mixed model (same names).
template <class T>
struct GenHandles {
    nn::Param<T>* latent_embed_w = nullptr; // channels x d, no bias
    nn::Param<T>* pos3d = nullptr;          // latent_tokens x d
    FfnP<T> time_mlp;                       // d -> d -> d
    struct Block {
        AttnP<T> attn;
        FfnP<T> ffn;
        nn::Param<T>* mod_w; // d x 6d: (shift, scale, gate) x (attn, ffn)
    };
    std::vector<Block> blocks;
    nn::Param<T>*head_v_w, *head_v_b; // d -> channels
};

template <class T>
GenHandles<T> build_gen_params(nn::ParamStore<T>& ps, const ModelConfig& cfg) {
    GenHandles<T> h;
    h.latent_embed_w = &ps.create("gen.latent_embed.w", cfg.latent_channels, cfg.dim);
    h.pos3d = &ps.create("gen.pos3d", cfg.latent_tokens(), cfg.dim);
    h.time_mlp = detail::make_ffn(ps, "gen.time_mlp", cfg.dim, cfg.dim);
    for (int i = 0; i < cfg.n_trellis; ++i) {
        std::string prefix = "gen.block" + std::to_string(i);
        typename GenHandles<T>::Block b;
        b.attn = detail::make_attn(ps, prefix + ".attn", cfg.dim);
        b.ffn = detail::make_ffn(ps, prefix + ".ffn", cfg.dim, cfg.dim * cfg.ffn_mult);
        b.mod_w = &ps.create(prefix + ".mod.w", cfg.dim, 6 * cfg.dim);
        h.blocks.push_back(b);
    }
    h.head_v_w = &ps.create("gen.head_v.w", cfg.dim, cfg.latent_channels);
    h.head_v_b = &ps.create("gen.head_v.b", 1, cfg.latent_channels);
    return h;
}

// Parameter handles of the feed-forward branch.
template <class T>
struct PiHandles {
    nn::Param<T>*patch_embed_w, *patch_embed_b;
    nn::Param<T>* pos2d; // patches_per_view x d, shared across views
    struct Block {
        LnP<T> ln1, ln2;
        AttnP<T> attn;
        FfnP<T> ffn;
    };
    std::vector<Block> blocks;
    nn::Param<T>*head_pm_w, *head_pm_b;     // d -> patch^2 * 3
    nn::Param<T>*head_pose_w, *head_pose_b; // d -> 7 (quat delta, translation)
};

template <class T>
PiHandles<T> build_pi_params(nn::ParamStore<T>& ps, const ModelConfig& cfg) {
    PiHandles<T> h;
    h.patch_embed_w = &ps.create("pi.patch_embed.w", cfg.patch_features(), cfg.dim);
    h.patch_embed_b = &ps.create("pi.patch_embed.b", 1, cfg.dim);
    h.pos2d = &ps.create("pi.pos2d", cfg.patches_per_view(), cfg.dim);
    for (int i = 0; i < cfg.n_pi3; ++i) {
        std::string prefix = "pi.block" + std::to_string(i);
        typename PiHandles<T>::Block b;
        b.ln1 = detail::make_ln(ps, prefix + ".ln1", cfg.dim);
        b.attn = detail::make_attn(ps, prefix + ".attn", cfg.dim);
        b.ln2 = detail::make_ln(ps, prefix + ".ln2", cfg.dim);
        b.ffn = detail::make_ffn(ps, prefix + ".ffn", cfg.dim, cfg.dim * cfg.ffn_mult);
        h.blocks.push_back(b);
    }
    h.head_pm_w = &ps.create("pi.head_pm.w", cfg.dim, cfg.patch * cfg.patch * 3);
    h.head_pm_b = &ps.create("pi.head_pm.b", 1, cfg.patch * cfg.patch * 3);
    h.head_pose_w = &ps.create("pi.head_pose.w", cfg.dim, 7);
    h.head_pose_b = &ps.create("pi.head_pose.b", 1, 7);
    return h;
}

// Extra modules that exist only in the mixed model: the transform branch,
// the cross-attention injections of type-B blocks, and the similarity head.
template <class T>
struct MixExtras {
    nn::Param<T>* transform_token = nullptr;
    struct Cross {
        AttnP<T> attn;
        nn::Param<T>* mod_w; // d x 3d, one (shift, scale, gate) triple
    };
    struct Entry {
        AttnP<T> tr_attn;
        FfnP<T> tr_ffn;
        nn::Param<T>* tr_mod_w; // d x 6d
        Cross cross_lat, cross_tr; // only populated for kind B
        bool has_cross = false;
    };
    std::map<int, Entry> entries; // keyed by p index of B/C entries
    nn::Param<T>*head_sim_w, *head_sim_b; // d -> 8 (log s, quat delta, translation)
};

template <class T>
MixExtras<T> build_mix_params(nn::ParamStore<T>& ps, const ModelConfig& cfg,
                              const BlockMatchConfig& match) {
    MixExtras<T> h;
    h.transform_token = &ps.create("mix.transform_token", 1, cfg.dim);
    for (const auto& e : match.entries) {
        if (e.kind == BlockKind::A) continue;
        std::string prefix = "mix.e" + std::to_string(e.p_index);
        typename MixExtras<T>::Entry x;
        x.tr_attn = detail::make_attn(ps, prefix + ".tr.attn", cfg.dim);
        x.tr_ffn = detail::make_ffn(ps, prefix + ".tr.ffn", cfg.dim,
                                    cfg.dim * cfg.ffn_mult);
        x.tr_mod_w = &ps.create(prefix + ".tr.mod.w", cfg.dim, 6 * cfg.dim);
        if (e.kind == BlockKind::B) {
            x.has_cross = true;
            x.cross_lat.attn = detail::make_attn(ps, prefix + ".cross.lat", cfg.dim);
            x.cross_lat.mod_w = &ps.create(prefix + ".cross.lat.mod.w", cfg.dim,
                                           3 * cfg.dim);
            x.cross_tr.attn = detail::make_attn(ps, prefix + ".cross.tr", cfg.dim);
            x.cross_tr.mod_w = &ps.create(prefix + ".cross.tr.mod.w", cfg.dim,
                                          3 * cfg.dim);
        }
        h.entries[e.p_index] = x;
    }
    h.head_sim_w = &ps.create("mix.head_sim.w", cfg.dim, 8);
    h.head_sim_b = &ps.create("mix.head_sim.b", 1, 8);
    return h;
}

template <class T>
struct GenModel {
    ModelConfig cfg;
    nn::ParamStore<T> params;
    GenHandles<T> gen;

    static GenModel build(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        GenModel m;
        m.cfg = cfg;
        m.gen = build_gen_params(m.params, cfg);
        detail::init_params(m.params, seed);
        return m;
    }
};

template <class T>
struct PiModel {
    ModelConfig cfg;
    nn::ParamStore<T> params;
    PiHandles<T> pi;

    static PiModel build(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        PiModel m;
        m.cfg = cfg;
        m.pi = build_pi_params(m.params, cfg);
        detail::init_params(m.params, seed);
        return m;
    }
};

template <class T>
struct MixModel {
    ModelConfig cfg;
    BlockMatchConfig match;
    nn::ParamStore<T> params;
    GenHandles<T> gen;
    PiHandles<T> pi;
    MixExtras<T> mix;

    static MixModel build(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        MixModel m;
        m.cfg = cfg;
        m.match = match_blocks(cfg.n_trellis, cfg.n_pi3);
        m.gen = build_gen_params(m.params, cfg);
        m.pi = build_pi_params(m.params, cfg);
        m.mix = build_mix_params(m.params, cfg, m.match);
        detail::init_params(m.params, seed);
        m.tag_attention_modules();
        return m;
    }

    // Marks the parameters belonging to joint-attention or cross-attention
    // modules: the per-modality projections of B/C entries and every cross
    // module. Local attention of A/B image sub-blocks stays untagged.
    void tag_attention_modules() {
        auto tag_attn = [](AttnP<T>& a) {
            for (nn::Param<T>* p : {a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo})
                p->attention_flag = true;
        };
        for (const auto& e : match.entries) {
            if (e.kind == BlockKind::A) continue;
            tag_attn(gen.blocks[*e.t_index].attn);
            auto& x = mix.entries.at(e.p_index);
            tag_attn(x.tr_attn);
            if (e.kind == BlockKind::C) tag_attn(pi.blocks[e.p_index].attn);
            if (x.has_cross) {
                tag_attn(x.cross_lat.attn);
                x.cross_lat.mod_w->attention_flag = true;
                tag_attn(x.cross_tr.attn);
                x.cross_tr.mod_w->attention_flag = true;
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

template <class T>
struct BundleIds {
    int latent = -1;
    std::vector<int> views;
    int transform = -1;
    int te = -1; // time embedding, 1 x d
};

// Plain-matrix token bundle for tests and inspection.
template <class T>
struct TokenBundle {
    Mat<T> latent;
    std::vector<Mat<T>> image;
    Mat<T> transform;
};

struct ExecRecord {
    BlockKind kind;
    int t_index; // -1 for kind A
    int p_index;
    bool operator==(const ExecRecord&) const = default;
};

namespace detail {

template <class T>
int linear(nn::Tape<T>& tape, int x, nn::Param<T>* w, nn::Param<T>* b) {
    return tape.linear(x, *w, b);
}

template <class T>
int ffn_forward(nn::Tape<T>& tape, int x, const FfnP<T>& f) {
    int h = tape.gelu(detail::linear(tape, x, f.w1, f.b1));
    return detail::linear(tape, h, f.w2, f.b2);
}

template <class T>
int affine_ln(nn::Tape<T>& tape, int x, const LnP<T>& ln) {
    return tape.layer_norm_affine(x, *ln.g, *ln.b);
}

// Modulation triples derived from the time embedding: raw = SiLU(te) W,
// interpreted as consecutive (shift, scale, gate) triples. Scale and gate
// are deltas around identity, so a zero table (or zero te) modulates
// nothing.
template <class T>
struct ModTriple {
    int shift, scale_plus_1, gate_plus_1;
};

template <class T>
std::vector<ModTriple<T>> modulation(nn::Tape<T>& tape, int te, nn::Param<T>* mod_w,
                                     int triples, int d) {
    int raw = tape.linear(tape.silu(te), *mod_w, nullptr);
    std::vector<ModTriple<T>> out;
    for (int k = 0; k < triples; ++k) {
        ModTriple<T> m;
        m.shift = tape.slice_cols(raw, (3 * k + 0) * d, d);
        m.scale_plus_1 = tape.add_scalar(tape.slice_cols(raw, (3 * k + 1) * d, d), T(1));
        m.gate_plus_1 = tape.add_scalar(tape.slice_cols(raw, (3 * k + 2) * d, d), T(1));
        out.push_back(m);
    }
    return out;
}

template <class T>
int modulated_ln(nn::Tape<T>& tape, int x, const ModTriple<T>& m) {
    return tape.modulated_norm(x, m.scale_plus_1, m.shift);
}

template <class T>
int gated_residual(nn::Tape<T>& tape, int x, int branch, const ModTriple<T>& m) {
    return tape.add_gated(x, branch, m.gate_plus_1);
}

// One stream of a joint attention: the tokens of one modality (image
// streams carry one group per view) and that modality's projections.
template <class T>
struct StreamSpec {
    std::vector<int> groups;
    const AttnP<T>* attn;
    bool sortable = false; // participate in order-free reduction
};

// Joint attention over several modality streams with per-modality
// projections and per-head RMS normalization of queries and keys. Groups
// of sortable streams are reduced in a value-determined order so view
// permutations reproduce outputs bitwise. Returns the attended tokens per
// stream/group (without the residual), after each stream's output
// projection. `stream_offsets`, when given, adds a constant to every
// score between query stream qs and key stream ks.
template <class T>
std::vector<std::vector<int>> joint_attention(
    nn::Tape<T>& tape, const std::vector<StreamSpec<T>>& streams, int heads,
    const std::vector<std::vector<T>>* stream_offsets = nullptr) {
    const int S = static_cast<int>(streams.size());
    const int d = static_cast<int>(streams[0].attn->wq->value.cols());
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    // Projections per stream and group.
    std::vector<std::vector<int>> q(S), k(S), v(S);
    for (int s = 0; s < S; ++s)
        for (int g : streams[s].groups) {
            q[s].push_back(detail::linear(tape, g, streams[s].attn->wq,
                                          streams[s].attn->bq));
            k[s].push_back(detail::linear(tape, g, streams[s].attn->wk,
                                          streams[s].attn->bk));
            v[s].push_back(detail::linear(tape, g, streams[s].attn->wv,
                                          streams[s].attn->bv));
        }

    // Key-group enumeration: fixed streams first, then sortable ones.
    struct KeyRef {
        int stream, group;
    };
    std::vector<KeyRef> key_order;
    int sortable_from = 0;
    for (int s = 0; s < S; ++s)
        if (!streams[s].sortable)
            for (std::size_t g = 0; g < streams[s].groups.size(); ++g) {
                key_order.push_back({s, static_cast<int>(g)});
                ++sortable_from;
            }
    for (int s = 0; s < S; ++s)
        if (streams[s].sortable)
            for (std::size_t g = 0; g < streams[s].groups.size(); ++g)
                key_order.push_back({s, static_cast<int>(g)});

    std::vector<std::vector<int>> out(S);
    for (int s = 0; s < S; ++s) {
        for (std::size_t gi = 0; gi < streams[s].groups.size(); ++gi) {
            std::vector<int> head_outs;
            for (int h = 0; h < heads; ++h) {
                int qh = tape.rms_slice(q[s][gi], h * dh, dh, scale);
                std::vector<int> score_ids, value_ids;
                std::vector<Mat<T>> offsets;
                bool any_offset = false;
                for (const KeyRef& kr : key_order) {
                    int kh = tape.rms_slice(k[kr.stream][kr.group], h * dh, dh);
                    int vh = tape.slice_cols(v[kr.stream][kr.group], h * dh, dh);
                    score_ids.push_back(tape.matmul_nt(qh, kh));
                    value_ids.push_back(vh);
                    if (stream_offsets) {
                        T off = (*stream_offsets)[s][kr.stream];
                        offsets.push_back(Mat<T>::Constant(
                            tape.value(score_ids.back()).rows(),
                            tape.value(score_ids.back()).cols(), off));
                        if (off != T(0)) any_offset = true;
                    }
                }
                head_outs.push_back(tape.grouped_attention(
                    score_ids, value_ids, sortable_from,
                    any_offset ? &offsets : nullptr));
            }
            int merged = heads == 1 ? head_outs[0] : tape.concat_cols(head_outs);
            out[s].push_back(detail::linear(tape, merged, streams[s].attn->wo,
                                            streams[s].attn->bo));
        }
    }
    return out;
}

} // namespace detail

// Time embedding: log-spaced sinusoidal features of t pushed through a
// two-layer MLP. Injective in t over [0, 1] at any reasonable dim.
template <class T>
int time_embedding(nn::Tape<T>& tape, const GenHandles<T>& gen, int d, double t) {
    Mat<T> feats(1, d);
    int half = d / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::pow(1000.0, static_cast<double>(i) / std::max(half - 1, 1));
        feats(0, i) = static_cast<T>(std::sin(freq * t));
        feats(0, half + i) = static_cast<T>(std::cos(freq * t));
    }
    for (int i = 2 * half; i < d; ++i) feats(0, i) = T(0);
    int x = tape.leaf(std::move(feats));
    int h = tape.silu(detail::linear(tape, x, gen.time_mlp.w1, gen.time_mlp.b1));
    return detail::linear(tape, h, gen.time_mlp.w2, gen.time_mlp.b2);
}

// Token embeddings: latent tokens are a bias-free linear map of the latent
// cells plus the learned 3D position table plus the time embedding; image
// tokens are patch embeddings plus the 2D position table shared across
// views (no view-index embedding); the transform token is a learned vector.
template <class T>
BundleIds<T> embed_inputs(nn::Tape<T>& tape, const ModelConfig& cfg,
                          const GenHandles<T>& gen, const PiHandles<T>* pi,
                          const MixExtras<T>* mix, const Mat<T>& z_t, double t,
                          const std::vector<Mat<T>>& images) {
    if (z_t.size() > 0 &&
        (z_t.rows() != cfg.latent_tokens() || z_t.cols() != cfg.latent_channels))
        throw ShapeMismatch("embed_inputs: latent grid has wrong shape");
    if (pi && static_cast<int>(images.size()) != cfg.views)
        throw ShapeMismatch("embed_inputs: wrong view count");

    BundleIds<T> b;
    b.te = time_embedding(tape, gen, cfg.dim, t);

    if (z_t.size() > 0) {
        int cells = tape.leaf(z_t);
        int tokens = tape.matmul(cells, tape.param(*gen.latent_embed_w));
        tokens = tape.add(tokens, tape.param(*gen.pos3d));
        b.latent = tape.add_rowvec(tokens, b.te);
    }

    if (pi) {
        for (const Mat<T>& img : images) {
            if (img.rows() != cfg.patches_per_view() ||
                img.cols() != cfg.patch_features())
                throw ShapeMismatch("embed_inputs: image patches have wrong shape");
            int tokens = detail::linear(tape, tape.leaf(img), pi->patch_embed_w,
                                        pi->patch_embed_b);
            b.views.push_back(tape.add(tokens, tape.param(*pi->pos2d)));
        }
    }

    if (mix) b.transform = tape.param(*mix->transform_token);
    return b;
}

// Type-A block: per-view local self-attention and feed-forward; latent and
// transform tokens pass through untouched.
template <class T>
void block_forward_A(nn::Tape<T>& tape, const typename PiHandles<T>::Block& blk,
                     int heads, BundleIds<T>& b) {
    for (int& view : b.views) {
        int h = detail::affine_ln(tape, view, blk.ln1);
        detail::StreamSpec<T> stream{{h}, &blk.attn, false};
        auto out = detail::joint_attention(tape, {stream}, heads);
        view = tape.add(view, out[0][0]);
        int f = detail::ffn_forward(tape, detail::affine_ln(tape, view, blk.ln2),
                                    blk.ffn);
        view = tape.add(view, f);
    }
}

// Global feed-forward-branch block (pretraining only): one attention over
// all views jointly, per-view feed-forwards.
template <class T>
void pi_global_block(nn::Tape<T>& tape, const typename PiHandles<T>::Block& blk,
                     int heads, BundleIds<T>& b) {
    std::vector<int> normed;
    for (int view : b.views) normed.push_back(detail::affine_ln(tape, view, blk.ln1));
    detail::StreamSpec<T> stream{normed, &blk.attn, true};
    auto out = detail::joint_attention(tape, {stream}, heads);
    for (std::size_t v = 0; v < b.views.size(); ++v) {
        b.views[v] = tape.add(b.views[v], out[0][v]);
        int f = detail::ffn_forward(
            tape, detail::affine_ln(tape, b.views[v], blk.ln2), blk.ffn);
        b.views[v] = tape.add(b.views[v], f);
    }
}

// Generative-branch block (pretraining): modulated self-attention over the
// latent tokens plus a modulated feed-forward.
template <class T>
void gen_block_forward(nn::Tape<T>& tape, const typename GenHandles<T>::Block& blk,
                       int heads, int te, BundleIds<T>& b) {
    const int d = static_cast<int>(blk.mod_w->value.rows());
    auto mods = detail::modulation(tape, te, blk.mod_w, 2, d);
    int h = detail::modulated_ln(tape, b.latent, mods[0]);
    detail::StreamSpec<T> stream{{h}, &blk.attn, false};
    auto out = detail::joint_attention(tape, {stream}, heads);
    b.latent = detail::gated_residual(tape, b.latent, out[0][0], mods[0]);
    int f = detail::ffn_forward(tape, detail::modulated_ln(tape, b.latent, mods[1]),
                                blk.ffn);
    b.latent = detail::gated_residual(tape, b.latent, f, mods[1]);
}

// Type-B block: the image tokens run their local sub-block, the latent and
// transform tokens share a joint self-attention with per-modality
// projections, then both cross-attend into the post-attention image tokens,
// and every modality finishes with its feed-forward.
template <class T>
void block_forward_B(nn::Tape<T>& tape, const MixModel<T>& model, int p_index,
                     BundleIds<T>& b) {
    const auto& entry_list = model.match.entries;
    const auto& e = entry_list[p_index];
    const auto& pi_blk = model.pi.blocks[p_index];
    const auto& gen_blk = model.gen.blocks[*e.t_index];
    const auto& extra = model.mix.entries.at(p_index);
    const int d = model.cfg.dim;
    const int heads = model.cfg.heads;

    // (i) local image self-attention
    for (int& view : b.views) {
        int h = detail::affine_ln(tape, view, pi_blk.ln1);
        detail::StreamSpec<T> stream{{h}, &pi_blk.attn, false};
        auto out = detail::joint_attention(tape, {stream}, heads);
        view = tape.add(view, out[0][0]);
    }

    // (ii) joint self-attention over latent and transform tokens
    auto gen_mods = detail::modulation(tape, b.te, gen_blk.mod_w, 2, d);
    auto tr_mods = detail::modulation(tape, b.te, extra.tr_mod_w, 2, d);
    {
        int lat_n = detail::modulated_ln(tape, b.latent, gen_mods[0]);
        int tr_n = detail::modulated_ln(tape, b.transform, tr_mods[0]);
        detail::StreamSpec<T> lat_stream{{lat_n}, &gen_blk.attn, false};
        detail::StreamSpec<T> tr_stream{{tr_n}, &extra.tr_attn, false};
        auto out = detail::joint_attention(tape, {lat_stream, tr_stream}, heads);
        b.latent = detail::gated_residual(tape, b.latent, out[0][0], gen_mods[0]);
        b.transform = detail::gated_residual(tape, b.transform, out[1][0], tr_mods[0]);
    }

    // (iii) cross-attention into the image tokens
    auto cross_into = [&](int tokens, const typename MixExtras<T>::Cross& cross) {
        auto mods = detail::modulation(tape, b.te, cross.mod_w, 1, d);
        int qn = detail::modulated_ln(tape, tokens, mods[0]);
        const int dh = d / heads;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        int q = detail::linear(tape, qn, cross.attn.wq, cross.attn.bq);
        std::vector<int> ks, vs;
        for (int view : b.views) {
            ks.push_back(detail::linear(tape, view, cross.attn.wk, cross.attn.bk));
            vs.push_back(detail::linear(tape, view, cross.attn.wv, cross.attn.bv));
        }
        std::vector<int> head_outs;
        for (int h = 0; h < heads; ++h) {
            int qh = tape.rms_slice(q, h * dh, dh, scale);
            std::vector<int> score_ids, value_ids;
            for (std::size_t v = 0; v < ks.size(); ++v) {
                int kh = tape.rms_slice(ks[v], h * dh, dh);
                score_ids.push_back(tape.matmul_nt(qh, kh));
                value_ids.push_back(tape.slice_cols(vs[v], h * dh, dh));
            }
            head_outs.push_back(tape.grouped_attention(score_ids, value_ids, 0));
        }
        int merged = heads == 1 ? head_outs[0] : tape.concat_cols(head_outs);
        int out = detail::linear(tape, merged, cross.attn.wo, cross.attn.bo);
        return detail::gated_residual(tape, tokens, out, mods[0]);
    };
    b.latent = cross_into(b.latent, extra.cross_lat);
    b.transform = cross_into(b.transform, extra.cross_tr);

    // (iv) feed-forwards per modality
    for (int& view : b.views) {
        int f = detail::ffn_forward(tape, detail::affine_ln(tape, view, pi_blk.ln2),
                                    pi_blk.ffn);
        view = tape.add(view, f);
    }
    {
        int f = detail::ffn_forward(
            tape, detail::modulated_ln(tape, b.latent, gen_mods[1]), gen_blk.ffn);
        b.latent = detail::gated_residual(tape, b.latent, f, gen_mods[1]);
    }
    {
        int f = detail::ffn_forward(
            tape, detail::modulated_ln(tape, b.transform, tr_mods[1]), extra.tr_ffn);
        b.transform = detail::gated_residual(tape, b.transform, f, tr_mods[1]);
    }
}

// Type-C block: one joint self-attention over latent, transform, and all
// image tokens at once, with per-modality projections and feed-forwards.
// `stream_offsets`, when given, adds constants to cross-stream scores in
// the order (latent, transform, image).
template <class T>
void block_forward_C(nn::Tape<T>& tape, const MixModel<T>& model, int p_index,
                     BundleIds<T>& b,
                     const std::vector<std::vector<T>>* stream_offsets = nullptr) {
    const auto& e = model.match.entries[p_index];
    const auto& pi_blk = model.pi.blocks[p_index];
    const auto& gen_blk = model.gen.blocks[*e.t_index];
    const auto& extra = model.mix.entries.at(p_index);
    const int d = model.cfg.dim;
    const int heads = model.cfg.heads;

    auto gen_mods = detail::modulation(tape, b.te, gen_blk.mod_w, 2, d);
    auto tr_mods = detail::modulation(tape, b.te, extra.tr_mod_w, 2, d);

    int lat_n = detail::modulated_ln(tape, b.latent, gen_mods[0]);
    int tr_n = detail::modulated_ln(tape, b.transform, tr_mods[0]);
    std::vector<int> views_n;
    for (int view : b.views)
        views_n.push_back(detail::affine_ln(tape, view, pi_blk.ln1));

    detail::StreamSpec<T> lat_stream{{lat_n}, &gen_blk.attn, false};
    detail::StreamSpec<T> tr_stream{{tr_n}, &extra.tr_attn, false};
    detail::StreamSpec<T> img_stream{views_n, &pi_blk.attn, true};
    auto out = detail::joint_attention(tape, {lat_stream, tr_stream, img_stream},
                                       heads, stream_offsets);

    b.latent = detail::gated_residual(tape, b.latent, out[0][0], gen_mods[0]);
    b.transform = detail::gated_residual(tape, b.transform, out[1][0], tr_mods[0]);
    for (std::size_t v = 0; v < b.views.size(); ++v)
        b.views[v] = tape.add(b.views[v], out[2][v]);

    for (int& view : b.views) {
        int f = detail::ffn_forward(tape, detail::affine_ln(tape, view, pi_blk.ln2),
                                    pi_blk.ffn);
        view = tape.add(view, f);
    }
    {
        int f = detail::ffn_forward(
            tape, detail::modulated_ln(tape, b.latent, gen_mods[1]), gen_blk.ffn);
        b.latent = detail::gated_residual(tape, b.latent, f, gen_mods[1]);
    }
    {
        int f = detail::ffn_forward(
            tape, detail::modulated_ln(tape, b.transform, tr_mods[1]), extra.tr_ffn);
        b.transform = detail::gated_residual(tape, b.transform, f, tr_mods[1]);
    }
}

// ---------------------------------------------------------------------------
// Full forwards and decoder heads
// ---------------------------------------------------------------------------

template <class T>
struct MixForwardIds {
    BundleIds<T> bundle;
    int velocity = -1;                 // latent_tokens x channels
    std::vector<int> pointmaps;        // per view, (H*W) x 3
    std::vector<int> pose_quat;        // per view, 1 x 4 unit quaternion
    std::vector<int> pose_trans;       // per view, 1 x 3
    int sim_scale = -1;                // 1 x 1, exp-parameterized
    int sim_quat = -1;                 // 1 x 4 unit quaternion
    int sim_trans = -1;                // 1 x 3
    std::vector<ExecRecord> trace;
};

namespace detail {

// quat head: raw 4-vector is a delta around the identity quaternion, then
// normalized; keeps the normalization well-conditioned at init.
template <class T>
int quat_from_raw(nn::Tape<T>& tape, int raw4) {
    Mat<T> offset(1, 4);
    offset << T(1), T(0), T(0), T(0);
    return tape.normalize_rows(tape.add(raw4, tape.leaf(offset)));
}

template <class T>
void pose_heads(nn::Tape<T>& tape, const ModelConfig& cfg, const PiHandles<T>& pi,
                const BundleIds<T>& b, MixForwardIds<T>& out) {
    for (int view : b.views) {
        int pm = detail::linear(tape, view, pi.head_pm_w, pi.head_pm_b);
        out.pointmaps.push_back(tape.unpatchify(pm, cfg.patches_per_row(),
                                                cfg.patches_per_row(), cfg.patch, 3));
        int pooled = tape.mean_rows(view);
        int pose = detail::linear(tape, pooled, pi.head_pose_w, pi.head_pose_b);
        out.pose_quat.push_back(detail::quat_from_raw(tape, tape.slice_cols(pose, 0, 4)));
        out.pose_trans.push_back(tape.slice_cols(pose, 4, 3));
    }
}

} // namespace detail

// Full mixed forward: blocks execute in increasing p order, with the
// matched generative sub-blocks inside their entries.
template <class T>
MixForwardIds<T> forward_mix(nn::Tape<T>& tape, const MixModel<T>& model,
                             const Mat<T>& z_t, double t,
                             const std::vector<Mat<T>>& images,
                             const std::vector<std::vector<T>>* c_offsets = nullptr) {
    const ModelConfig& cfg = model.cfg;
    MixForwardIds<T> out;
    out.bundle = embed_inputs(tape, cfg, model.gen, &model.pi, &model.mix, z_t, t,
                              images);
    BundleIds<T>& b = out.bundle;

    for (const auto& e : model.match.entries) {
        switch (e.kind) {
            case BlockKind::A:
                block_forward_A(tape, model.pi.blocks[e.p_index], cfg.heads, b);
                out.trace.push_back({BlockKind::A, -1, e.p_index});
                break;
            case BlockKind::B:
                block_forward_B(tape, model, e.p_index, b);
                out.trace.push_back({BlockKind::B, *e.t_index, e.p_index});
                break;
            case BlockKind::C:
                block_forward_C(tape, model, e.p_index, b, c_offsets);
                out.trace.push_back({BlockKind::C, *e.t_index, e.p_index});
                break;
        }
    }

    out.velocity = detail::linear(tape, b.latent, model.gen.head_v_w,
                                  model.gen.head_v_b);
    detail::pose_heads(tape, cfg, model.pi, b, out);

    int sim = detail::linear(tape, b.transform, model.mix.head_sim_w,
                             model.mix.head_sim_b);
    out.sim_scale = tape.exp_op(tape.slice_cols(sim, 0, 1));
    out.sim_quat = detail::quat_from_raw(tape, tape.slice_cols(sim, 1, 4));
    out.sim_trans = tape.slice_cols(sim, 5, 3);
    return out;
}

// Generative-branch pretraining forward: latent tokens only.
template <class T>
int forward_gen(nn::Tape<T>& tape, const GenModel<T>& model, const Mat<T>& z_t,
                double t) {
    BundleIds<T> b = embed_inputs<T>(tape, model.cfg, model.gen, nullptr, nullptr, z_t,
                                     t, {});
    for (const auto& blk : model.gen.blocks)
        gen_block_forward(tape, blk, model.cfg.heads, b.te, b);
    return detail::linear(tape, b.latent, model.gen.head_v_w, model.gen.head_v_b);
}

template <class T>
struct PiForwardIds {
    BundleIds<T> bundle;
    std::vector<int> pointmaps;
    std::vector<int> pose_quat;
    std::vector<int> pose_trans;
};

// Feed-forward-branch pretraining forward: image tokens only, blocks
// alternating local (even) and global (odd).
template <class T>
PiForwardIds<T> forward_pi(nn::Tape<T>& tape, const PiModel<T>& model,
                           const std::vector<Mat<T>>& images) {
    PiForwardIds<T> out;
    // Image tokens only: no latent, no time embedding, no transform token.
    const ModelConfig& cfg = model.cfg;
    if (static_cast<int>(images.size()) != cfg.views)
        throw ShapeMismatch("forward_pi: wrong view count");
    BundleIds<T>& b = out.bundle;
    for (const Mat<T>& img : images) {
        if (img.rows() != cfg.patches_per_view() || img.cols() != cfg.patch_features())
            throw ShapeMismatch("forward_pi: image patches have wrong shape");
        int tokens = detail::linear(tape, tape.leaf(img), model.pi.patch_embed_w,
                                    model.pi.patch_embed_b);
        b.views.push_back(tape.add(tokens, tape.param(*model.pi.pos2d)));
    }
    for (int i = 0; i < cfg.n_pi3; ++i) {
        if (i % 2 == 0)
            block_forward_A(tape, model.pi.blocks[i], cfg.heads, b);
        else
            pi_global_block(tape, model.pi.blocks[i], cfg.heads, b);
    }
    MixForwardIds<T> heads_out;
    detail::pose_heads(tape, cfg, model.pi, b, heads_out);
    out.pointmaps = std::move(heads_out.pointmaps);
    out.pose_quat = std::move(heads_out.pose_quat);
    out.pose_trans = std::move(heads_out.pose_trans);
    return out;
}

// Materialized forward outputs in library types.
template <class T>
struct ForwardOutput {
    Mat<T> velocity;
    std::vector<PointMap> pointmaps; // camera-space, all pixels valid
    std::vector<CameraPose> poses;
    SimilarityTransform similarity;
};

template <class T>
ForwardOutput<T> materialize(const nn::Tape<T>& tape, const ModelConfig& cfg,
                             const MixForwardIds<T>& ids) {
    ForwardOutput<T> out;
    out.velocity = tape.value(ids.velocity);
    for (std::size_t v = 0; v < ids.pointmaps.size(); ++v) {
        const Mat<T>& pm = tape.value(ids.pointmaps[v]);
        PointMap map(cfg.image_side, cfg.image_side);
        for (int r = 0; r < cfg.image_side; ++r)
            for (int c = 0; c < cfg.image_side; ++c) {
                Eigen::Index i = static_cast<Eigen::Index>(r) * cfg.image_side + c;
                map.set(r, c,
                        Vec3(static_cast<double>(pm(i, 0)), static_cast<double>(pm(i, 1)),
                             static_cast<double>(pm(i, 2))));
            }
        out.pointmaps.push_back(std::move(map));

        const Mat<T>& q = tape.value(ids.pose_quat[v]);
        const Mat<T>& tr = tape.value(ids.pose_trans[v]);
        out.poses.emplace_back(
            Quat(static_cast<double>(q(0, 0)), static_cast<double>(q(0, 1)),
                 static_cast<double>(q(0, 2)), static_cast<double>(q(0, 3))),
            Vec3(static_cast<double>(tr(0, 0)), static_cast<double>(tr(0, 1)),
                 static_cast<double>(tr(0, 2))));
    }
    const Mat<T>& sq = tape.value(ids.sim_quat);
    const Mat<T>& st = tape.value(ids.sim_trans);
    out.similarity = SimilarityTransform(
        static_cast<double>(tape.value(ids.sim_scale)(0, 0)),
        Quat(static_cast<double>(sq(0, 0)), static_cast<double>(sq(0, 1)),
             static_cast<double>(sq(0, 2)), static_cast<double>(sq(0, 3))),
        Vec3(static_cast<double>(st(0, 0)), static_cast<double>(st(0, 1)),
             static_cast<double>(st(0, 2))));
    return out;
}

} // namespace mixrec::mot
