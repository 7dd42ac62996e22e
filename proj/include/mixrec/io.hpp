#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixrec/common.hpp"
#include "mixrec/geometry.hpp"
#include "mixrec/mot.hpp"
#include "mixrec/nn.hpp"
#include "mixrec/synth_data.hpp"

namespace mixrec::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline void write_bytes(const fs::path& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<char> read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open: " + path.string());
    std::streamsize size = in.tellg();
    in.seekg(0);
    std::vector<char> buf(static_cast<std::size_t>(size));
    in.read(buf.data(), size);
    if (!in) throw IoError("read failed: " + path.string());
    return buf;
}

inline void write_text(const fs::path& path, const std::string& text) {
    write_bytes(path, text.data(), text.size());
}

inline json read_json(const fs::path& path) {
    auto bytes = read_bytes(path);
    return json::parse(bytes.begin(), bytes.end());
}

// ---------------------------------------------------------------------------
// Point maps: JSON sidecar + raw little-endian float32 points + byte mask.
// ---------------------------------------------------------------------------

inline void write_pointmap(const fs::path& dir, const std::string& stem,
                           const PointMap& pm) {
    json sidecar = {{"height", pm.height},
                    {"width", pm.width},
                    {"dtype", "f32"},
                    {"order", "row-major, xyz interleaved"},
                    {"points", stem + ".raw"},
                    {"mask", stem + ".mask"}};
    write_text(dir / (stem + ".json"), sidecar.dump(2) + "\n");

    std::vector<float> raw(pm.points.size() * 3);
    for (std::size_t i = 0; i < pm.points.size(); ++i) {
        raw[3 * i + 0] = static_cast<float>(pm.points[i].x());
        raw[3 * i + 1] = static_cast<float>(pm.points[i].y());
        raw[3 * i + 2] = static_cast<float>(pm.points[i].z());
    }
    write_bytes(dir / (stem + ".raw"), raw.data(), raw.size() * sizeof(float));
    write_bytes(dir / (stem + ".mask"), pm.valid.data(), pm.valid.size());
}

inline PointMap read_pointmap(const fs::path& sidecar_path) {
    json sidecar = read_json(sidecar_path);
    int h = sidecar.at("height").get<int>();
    int w = sidecar.at("width").get<int>();
    if (sidecar.at("dtype").get<std::string>() != "f32")
        throw IoError("point map sidecar: unsupported dtype");
    fs::path dir = sidecar_path.parent_path();
    auto raw = read_bytes(dir / sidecar.at("points").get<std::string>());
    auto mask = read_bytes(dir / sidecar.at("mask").get<std::string>());
    std::size_t pixels = static_cast<std::size_t>(h) * w;
    if (raw.size() != pixels * 3 * sizeof(float) || mask.size() != pixels)
        throw IoError("point map buffers have unexpected sizes");

    PointMap pm(h, w);
    const float* f = reinterpret_cast<const float*>(raw.data());
    for (std::size_t i = 0; i < pixels; ++i) {
        pm.points[i] = Vec3(f[3 * i], f[3 * i + 1], f[3 * i + 2]);
        pm.valid[i] = static_cast<std::uint8_t>(mask[i]) ? 1 : 0;
    }
    return pm;
}

// ---------------------------------------------------------------------------
// Poses, intrinsics, similarity transforms
// ---------------------------------------------------------------------------

inline json pose_to_json(const CameraPose& pose) {
    return {{"q",
             {pose.rotation.w(), pose.rotation.x(), pose.rotation.y(),
              pose.rotation.z()}},
            {"t", {pose.translation.x(), pose.translation.y(), pose.translation.z()}}};
}

inline CameraPose pose_from_json(const json& j) {
    auto q = j.at("q");
    auto t = j.at("t");
    return CameraPose(Quat(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(),
                           q[3].get<double>()),
                      Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>()));
}

inline json intrinsics_to_json(const Intrinsics& intr) {
    return {{"fx", intr.fx}, {"fy", intr.fy}, {"cx", intr.cx}, {"cy", intr.cy}};
}

inline Intrinsics intrinsics_from_json(const json& j) {
    return Intrinsics(j.at("fx").get<double>(), j.at("fy").get<double>(),
                      j.at("cx").get<double>(), j.at("cy").get<double>());
}

inline json similarity_to_json(const SimilarityTransform& sim) {
    return {{"s", sim.scale},
            {"q",
             {sim.rotation.w(), sim.rotation.x(), sim.rotation.y(), sim.rotation.z()}},
            {"t", {sim.translation.x(), sim.translation.y(), sim.translation.z()}}};
}

inline SimilarityTransform similarity_from_json(const json& j) {
    auto q = j.at("q");
    auto t = j.at("t");
    return SimilarityTransform(
        j.at("s").get<double>(),
        Quat(q[0].get<double>(), q[1].get<double>(), q[2].get<double>(),
             q[3].get<double>()),
        Vec3(t[0].get<double>(), t[1].get<double>(), t[2].get<double>()));
}

inline std::vector<CameraPose> read_pose_list(const fs::path& path) {
    json j = read_json(path);
    std::vector<CameraPose> poses;
    for (const auto& item : j.at("poses")) poses.push_back(pose_from_json(item));
    return poses;
}

inline void write_pose_list(const fs::path& path, const std::vector<CameraPose>& poses) {
    json j;
    j["poses"] = json::array();
    for (const auto& p : poses) j["poses"].push_back(pose_to_json(p));
    write_text(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Scene directories: shape.json + shape.raw + z0.raw + cams.json + pm_<k>.*
// ---------------------------------------------------------------------------

inline void write_scene(const fs::path& dir, const synth::Scene& scene) {
    fs::create_directories(dir);

    json shape = {{"resolution", scene.shape.resolution()},
                  {"count", scene.shape.size()},
                  {"voxels", "shape.raw"},
                  {"latent",
                   {{"side", scene.opts.latent_side},
                    {"channels", scene.opts.latent_channels},
                    {"file", "z0.raw"}}},
                  {"misaligned", scene.opts.misaligned},
                  {"seed", scene.seed}};
    write_text(dir / "shape.json", shape.dump(2) + "\n");

    std::vector<std::int32_t> vox;
    vox.reserve(scene.shape.size() * 3);
    for (const Vec3i& v : scene.shape.occupied()) {
        vox.push_back(v.x);
        vox.push_back(v.y);
        vox.push_back(v.z);
    }
    write_bytes(dir / "shape.raw", vox.data(), vox.size() * sizeof(std::int32_t));
    write_bytes(dir / "z0.raw", scene.z0.data(),
                static_cast<std::size_t>(scene.z0.size()) * sizeof(float));

    json cams;
    cams["image_side"] = scene.opts.image_side;
    cams["gt_similarity"] = similarity_to_json(scene.gt_similarity);
    cams["cameras"] = json::array();
    for (std::size_t i = 0; i < scene.cameras.size(); ++i) {
        json c = pose_to_json(scene.cameras[i]);
        json intr = intrinsics_to_json(scene.intrinsics[i]);
        c.update(intr);
        cams["cameras"].push_back(c);
    }
    write_text(dir / "cams.json", cams.dump(2) + "\n");

    for (std::size_t k = 0; k < scene.point_maps.size(); ++k)
        write_pointmap(dir, "pm_" + std::to_string(k), scene.point_maps[k]);
}

inline synth::Scene read_scene(const fs::path& dir) {
    synth::Scene scene;
    json shape = read_json(dir / "shape.json");
    scene.opts.resolution = shape.at("resolution").get<int>();
    scene.opts.latent_side = shape.at("latent").at("side").get<int>();
    scene.opts.latent_channels = shape.at("latent").at("channels").get<int>();
    scene.opts.misaligned = shape.value("misaligned", false);
    scene.seed = shape.value("seed", 0ull);

    scene.shape = SparseVoxelGrid(scene.opts.resolution);
    auto vox = read_bytes(dir / shape.at("voxels").get<std::string>());
    if (vox.size() % (3 * sizeof(std::int32_t)) != 0)
        throw IoError("shape.raw has unexpected size");
    const std::int32_t* vi = reinterpret_cast<const std::int32_t*>(vox.data());
    for (std::size_t i = 0; i < vox.size() / (3 * sizeof(std::int32_t)); ++i)
        scene.shape.insert(Vec3i{vi[3 * i], vi[3 * i + 1], vi[3 * i + 2]});

    auto z0 = read_bytes(dir / shape.at("latent").at("file").get<std::string>());
    int cells = scene.opts.latent_side * scene.opts.latent_side * scene.opts.latent_side;
    if (z0.size() != static_cast<std::size_t>(cells) * scene.opts.latent_channels *
                         sizeof(float))
        throw IoError("z0.raw has unexpected size");
    scene.z0 = nn::Mat<float>(cells, scene.opts.latent_channels);
    std::memcpy(scene.z0.data(), z0.data(), z0.size());

    json cams = read_json(dir / "cams.json");
    scene.opts.image_side = cams.at("image_side").get<int>();
    scene.gt_similarity = similarity_from_json(cams.at("gt_similarity"));
    for (const auto& c : cams.at("cameras")) {
        scene.cameras.push_back(pose_from_json(c));
        scene.intrinsics.push_back(intrinsics_from_json(c));
    }
    scene.opts.camera_count = static_cast<int>(scene.cameras.size());

    for (int k = 0; k < scene.opts.camera_count; ++k)
        scene.point_maps.push_back(
            read_pointmap(dir / ("pm_" + std::to_string(k) + ".json")));
    return scene;
}

// Loads every scene_* subdirectory, ordered by name.
inline std::vector<synth::Scene> read_dataset(const fs::path& dir) {
    if (!fs::exists(dir)) throw EmptyDataset("dataset directory missing: " + dir.string());
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory() &&
            entry.path().filename().string().rfind("scene_", 0) == 0)
            dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty())
        throw EmptyDataset("no scene_* directories in " + dir.string());
    std::vector<synth::Scene> scenes;
    for (const auto& d : dirs) scenes.push_back(read_scene(d));
    return scenes;
}

// ---------------------------------------------------------------------------
// Model configs and checkpoints
// ---------------------------------------------------------------------------

inline json model_config_to_json(const mot::ModelConfig& cfg) {
    return {{"dim", cfg.dim},
            {"heads", cfg.heads},
            {"n_trellis", cfg.n_trellis},
            {"n_pi3", cfg.n_pi3},
            {"latent_side", cfg.latent_side},
            {"latent_channels", cfg.latent_channels},
            {"image_side", cfg.image_side},
            {"patch", cfg.patch},
            {"views", cfg.views},
            {"ffn_mult", cfg.ffn_mult}};
}

inline mot::ModelConfig model_config_from_json(const json& j) {
    mot::ModelConfig cfg;
    cfg.dim = j.at("dim").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.n_trellis = j.at("n_trellis").get<int>();
    cfg.n_pi3 = j.at("n_pi3").get<int>();
    cfg.latent_side = j.at("latent_side").get<int>();
    cfg.latent_channels = j.at("latent_channels").get<int>();
    cfg.image_side = j.at("image_side").get<int>();
    cfg.patch = j.at("patch").get<int>();
    cfg.views = j.at("views").get<int>();
    cfg.ffn_mult = j.value("ffn_mult", 4);
    cfg.validate();
    return cfg;
}

// Single-file checkpoint: magic, u64 header length, JSON header with the
// config and a parameter manifest (names and shapes), then raw
// little-endian float32 blobs in manifest order.
struct Checkpoint {
    std::string kind; // "pretrain" or "mixed"
    json config;
    struct Entry {
        std::string name;
        Eigen::Index rows = 0, cols = 0;
    };
    std::vector<Entry> manifest;
    std::vector<float> blob;

    static constexpr char magic[9] = "MIXCKPT1";
};

template <class T>
void checkpoint_append_params(Checkpoint& ckpt, const nn::ParamStore<T>& params) {
    for (const auto& p : params.all()) {
        ckpt.manifest.push_back({p->name, p->value.rows(), p->value.cols()});
        for (Eigen::Index i = 0; i < p->value.rows(); ++i)
            for (Eigen::Index j = 0; j < p->value.cols(); ++j)
                ckpt.blob.push_back(static_cast<float>(p->value(i, j)));
    }
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    json header;
    header["kind"] = ckpt.kind;
    header["config"] = ckpt.config;
    header["manifest"] = json::array();
    for (const auto& e : ckpt.manifest)
        header["manifest"].push_back({{"name", e.name}, {"rows", e.rows},
                                      {"cols", e.cols}});
    std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(Checkpoint::magic, 8);
    std::uint64_t hlen = htext.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    out.write(reinterpret_cast<const char*>(ckpt.blob.data()),
              static_cast<std::streamsize>(ckpt.blob.size() * sizeof(float)));
    if (!out) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const fs::path& path) {
    auto bytes = read_bytes(path);
    if (bytes.size() < 16 || std::memcmp(bytes.data(), Checkpoint::magic, 8) != 0)
        throw IoError("not a checkpoint file: " + path.string());
    std::uint64_t hlen;
    std::memcpy(&hlen, bytes.data() + 8, sizeof(hlen));
    if (bytes.size() < 16 + hlen) throw IoError("truncated checkpoint header");
    json header = json::parse(bytes.begin() + 16, bytes.begin() + 16 +
                                                      static_cast<std::ptrdiff_t>(hlen));
    Checkpoint ckpt;
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.config = header.at("config");
    std::size_t floats = 0;
    for (const auto& e : header.at("manifest")) {
        Checkpoint::Entry ent;
        ent.name = e.at("name").get<std::string>();
        ent.rows = e.at("rows").get<Eigen::Index>();
        ent.cols = e.at("cols").get<Eigen::Index>();
        floats += static_cast<std::size_t>(ent.rows * ent.cols);
        ckpt.manifest.push_back(ent);
    }
    if (bytes.size() != 16 + hlen + floats * sizeof(float))
        throw IoError("checkpoint blob size mismatch");
    ckpt.blob.resize(floats);
    std::memcpy(ckpt.blob.data(), bytes.data() + 16 + hlen, floats * sizeof(float));
    return ckpt;
}

// Copies matching parameters (same name and shape) from the checkpoint and
// optionally marks them as pretrained. Returns how many were loaded.
template <class T>
int load_into_params(const Checkpoint& ckpt, nn::ParamStore<T>& params,
                     bool mark_pretrained) {
    int loaded = 0;
    std::size_t offset = 0;
    for (const auto& e : ckpt.manifest) {
        std::size_t count = static_cast<std::size_t>(e.rows * e.cols);
        nn::Param<T>* p = params.find(e.name);
        if (p && p->value.rows() == e.rows && p->value.cols() == e.cols) {
            for (Eigen::Index i = 0; i < e.rows; ++i)
                for (Eigen::Index j = 0; j < e.cols; ++j)
                    p->value(i, j) = static_cast<T>(
                        ckpt.blob[offset + static_cast<std::size_t>(i * e.cols + j)]);
            if (mark_pretrained) p->pretrained = true;
            ++loaded;
        }
        offset += count;
    }
    return loaded;
}

} // namespace mixrec::io
