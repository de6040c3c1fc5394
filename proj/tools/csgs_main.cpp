#include "csgs/agg/aggregation.hpp"
#include "csgs/core/serialization.hpp"
#include "csgs/eval/metrics.hpp"
#include "csgs/eval/synth.hpp"
#include "csgs/eval/tsdf.hpp"
#include "csgs/io/png.hpp"
#include "csgs/orch/orchestrator.hpp"
#include "csgs/train/trainer.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace csgs;

namespace {

[[noreturn]] void usage() {
    std::cerr <<
        "usage: csgs <command> [flags]\n"
        "\n"
        "scene commands\n"
        "  synth           --out DIR [--seed S] [--size N]\n"
        "  partition       --scene DIR --spec \"(PxP)*E\" --out RUN_ROOT\n"
        "\n"
        "pipeline commands\n"
        "  train-device    --scene DIR --cameras FILE --out DIR [--seed S] [--config FILE]\n"
        "  aggregate-edge  --edge J --inputs DIR,DIR,... --out DIR [--seed S] [--config FILE]\n"
        "  aggregate-cloud --inputs DIR,DIR,... --out DIR [--seed S] [--config FILE]\n"
        "  run-all         --scene DIR --spec \"(PxP)*E\" --out RUN_ROOT\n"
        "                  [--seed S] [--workers N] [--config FILE]\n"
        "\n"
        "evaluation commands\n"
        "  eval            --scene DIR --model FILE --out REPORT [--eps FRACTION] [--voxel V]\n"
        "  mesh            --scene DIR --model FILE --out MESH.ply [--voxel V]\n"
        "  report          --run RUN_ROOT\n";
    std::exit(2);
}

std::map<std::string, std::string> parse_flags(int argc, char** argv, int start) {
    std::map<std::string, std::string> flags;
    for (int i = start; i < argc; ++i) {
        std::string key = argv[i];
        if (key.rfind("--", 0) != 0 || i + 1 >= argc) usage();
        flags[key.substr(2)] = argv[++i];
    }
    return flags;
}

std::string need(const std::map<std::string, std::string>& flags, const std::string& key) {
    auto it = flags.find(key);
    if (it == flags.end()) {
        std::cerr << "missing required flag --" << key << "\n";
        usage();
    }
    return it->second;
}

std::string get(const std::map<std::string, std::string>& flags, const std::string& key,
                const std::string& fallback) {
    auto it = flags.find(key);
    return it == flags.end() ? fallback : it->second;
}

std::map<std::string, std::string> read_kv(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos && !line.empty() && line[0] != '#')
            kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

RunConfig load_run_config(const std::map<std::string, std::string>& flags) {
    RunConfig cfg;
    std::map<std::string, std::string> kv;
    if (flags.count("config")) kv = read_kv(flags.at("config"));
    auto num = [&](const char* key, double fallback) {
        return kv.count(key) ? std::stod(kv.at(key)) : fallback;
    };
    cfg.trainer.max_iters = static_cast<int>(num("max_iters", cfg.trainer.max_iters));
    cfg.trainer.stage1_iters = static_cast<int>(num("stage1_iters", cfg.trainer.stage1_iters));
    cfg.trainer.prune_iter = static_cast<int>(num("prune_iter", cfg.trainer.prune_iter));
    cfg.trainer.prune_fraction = num("prune_fraction", cfg.trainer.prune_fraction);
    cfg.trainer.densify_start = static_cast<int>(num("densify_start", cfg.trainer.densify_start));
    cfg.trainer.densify_stop = static_cast<int>(num("densify_stop", cfg.trainer.densify_stop));
    cfg.trainer.densify_interval =
        static_cast<int>(num("densify_interval", cfg.trainer.densify_interval));
    cfg.trainer.weights.mv_stride =
        static_cast<int>(num("mv_stride", cfg.trainer.weights.mv_stride));
    cfg.agg.distill_epochs = static_cast<int>(num("distill_epochs", cfg.agg.distill_epochs));
    cfg.workers = static_cast<int>(std::stod(get(flags, "workers", "1")));
    cfg.seed = static_cast<std::uint32_t>(std::stoul(get(flags, "seed", "0")));
    cfg.trainer.seed = cfg.seed;
    cfg.agg.seed = cfg.seed;
    return cfg;
}

int scene_init_points(const std::map<std::string, std::string>& flags) {
    if (!flags.count("config")) return 600;
    auto kv = read_kv(flags.at("config"));
    return kv.count("init_points") ? std::stoi(kv.at("init_points")) : 600;
}

// A scene directory is the seed plus generation parameters; geometry and
// ground truth are recreated analytically on demand.
SyntheticScene load_scene(const fs::path& dir, SceneSpec* spec_out = nullptr) {
    auto kv = read_kv(dir / "scene.txt");
    SceneSpec spec;
    if (kv.count("image_size")) spec.image_size = std::stoi(kv.at("image_size"));
    if (kv.count("plane_size")) spec.plane_size = std::stod(kv.at("plane_size"));
    if (spec_out) *spec_out = spec;
    return synth_scene(static_cast<std::uint32_t>(std::stoul(kv.at("seed"))), spec);
}

ImageRGB scene_image(const fs::path& scene_dir, const Camera& cam) {
    return read_png((scene_dir / "gt" / (cam.camera_id + ".png")).string());
}

GaussianModel device_init_model(const SyntheticScene& scene, const CameraSet& cams,
                                int total_points, std::uint32_t seed) {
    const auto full = init_model_from_scene(scene, total_points, seed);
    GaussianModel m;
    m.model_id = "init";
    for (const auto& p : full.primitives) {
        bool visible = false;
        for (const auto& [id, cam] : cams.cameras) {
            const Vec3 pc = cam.to_camera(p.mu);
            if (pc.z() <= 0) continue;
            const double u = cam.fx * pc.x() / pc.z() + cam.cx;
            const double v = cam.fy * pc.y() / pc.z() + cam.cy;
            if (u >= 0 && u < cam.width && v >= 0 && v < cam.height) {
                visible = true;
                break;
            }
        }
        if (visible) m.primitives.push_back(p);
    }
    m.recompute_extent();
    return m;
}

std::vector<DepthObservation> model_depths(const GaussianModel& model, const CameraSet& cams,
                                           const RenderConfig& rc) {
    std::vector<DepthObservation> out;
    for (const auto& [id, cam] : cams.cameras) {
        auto buf = render(model, cam, rc);
        auto depth = unbiased_depth(buf, cam);
        out.push_back({cam, std::move(depth.depth), std::move(depth.valid)});
    }
    return out;
}

int cmd_synth(const std::map<std::string, std::string>& flags) {
    const fs::path out = need(flags, "out");
    const auto seed = static_cast<std::uint32_t>(std::stoul(get(flags, "seed", "0")));
    SceneSpec spec;
    spec.image_size = std::stoi(get(flags, "size", "64"));
    auto scene = synth_scene(seed, spec);
    fs::create_directories(out / "gt");
    std::ofstream meta(out / "scene.txt");
    meta << "seed=" << seed << "\nimage_size=" << spec.image_size
         << "\nplane_size=" << spec.plane_size << "\n";
    std::ofstream(out / "cameras.txt") << cameras_to_text(scene.cameras);
    std::ofstream(out / "holdout.txt") << cameras_to_text(scene.holdout_cameras);
    for (const auto& [id, cam] : scene.cameras.cameras)
        write_png(trace_view(scene, cam).rgb, (out / "gt" / (id + ".png")).string());
    for (const auto& [id, cam] : scene.holdout_cameras.cameras)
        write_png(trace_view(scene, cam).rgb, (out / "gt" / (id + ".png")).string());
    std::cout << "scene " << out.string() << ": " << scene.cameras.size() << " rig cameras, "
              << scene.holdout_cameras.size() << " hold-outs\n";
    return 0;
}

int cmd_partition(const std::map<std::string, std::string>& flags) {
    const fs::path scene_dir = need(flags, "scene");
    const auto spec = parse_partition_spec(need(flags, "spec"));
    const fs::path out = need(flags, "out");
    auto scene = load_scene(scene_dir);
    auto topo = partition_cameras(scene.cameras, spec, scene.surface_extent());
    fs::create_directories(out / "partition");
    for (const auto& cell : topo.devices) {
        std::ofstream(out / "partition" / (cell.id() + ".cameras.txt"))
            << cameras_to_text(cell.cameras);
        std::cout << cell.id() << "\t" << cell.cameras.size() << " cameras\n";
    }
    return 0;
}

int cmd_train_device(const std::map<std::string, std::string>& flags) {
    const fs::path scene_dir = need(flags, "scene");
    const fs::path out = need(flags, "out");
    RunConfig cfg = load_run_config(flags);
    auto scene = load_scene(scene_dir);
    std::ifstream cf(need(flags, "cameras"));
    std::ostringstream css;
    css << cf.rdbuf();
    CameraSet cams = cameras_from_text(css.str());

    std::vector<TrainView> views;
    for (const auto& [id, cam] : cams.cameras) views.push_back({cam, scene_image(scene_dir, cam)});
    auto init = device_init_model(scene, cams, scene_init_points(flags), cfg.seed);
    auto model = train(std::move(init), views, cfg.trainer, &std::cout);
    model.model_id = out.filename().string();

    AgentMessage msg;
    msg.sender = model.model_id;
    msg.stage = AgentMessage::Stage::kDeviceToEdge;
    msg.model_bytes = serialize(model);
    msg.cameras = cams;
    msg.metadata["count"] = std::to_string(model.size());
    write_artifact(out, msg);
    std::cout << "trained " << msg.sender << ": " << model.size() << " primitives\n";
    return 0;
}

std::vector<AgentMessage> read_inputs(const std::string& list) {
    std::vector<AgentMessage> msgs;
    std::istringstream in(list);
    std::string dir;
    while (std::getline(in, dir, ','))
        if (!dir.empty()) msgs.push_back(read_artifact(dir));
    return msgs;
}

int cmd_aggregate_edge(const std::map<std::string, std::string>& flags) {
    RunConfig cfg = load_run_config(flags);
    const int j = std::stoi(get(flags, "edge", "0"));
    auto out = run_edge(j, read_inputs(need(flags, "inputs")), cfg.agg, &std::cout);
    write_artifact(need(flags, "out"), out);
    std::cout << "edge " << out.sender << ": " << out.metadata["count"] << " primitives\n";
    return 0;
}

int cmd_aggregate_cloud(const std::map<std::string, std::string>& flags) {
    RunConfig cfg = load_run_config(flags);
    auto msgs = read_inputs(need(flags, "inputs"));
    CameraSet all;
    for (const auto& m : msgs)
        for (const auto& [id, cam] : m.cameras.cameras) all.insert(cam);
    auto cloud = run_cloud(std::move(msgs), cfg.agg, &std::cout);
    const fs::path out = need(flags, "out");
    fs::create_directories(out);
    save_model(cloud, (out / "artifact.csgs").string());
    std::ofstream(out / "cameras.txt") << cameras_to_text(all);
    std::ofstream(out / "manifest.txt")
        << "sender=cloud\nstage=final\nsha256=" << sha256_hex(serialize(cloud))
        << "\ncount=" << cloud.size() << "\n";
    std::cout << "cloud: " << cloud.size() << " primitives\n";
    return 0;
}

int cmd_run_all(const std::map<std::string, std::string>& flags) {
    const fs::path scene_dir = need(flags, "scene");
    const fs::path run_root = need(flags, "out");
    RunConfig cfg = load_run_config(flags);
    const int init_points = scene_init_points(flags);
    auto scene = load_scene(scene_dir);
    auto topo = partition_cameras(scene.cameras, parse_partition_spec(need(flags, "spec")),
                                  scene.surface_extent());
    DeviceEnv env;
    env.image_for = [&](const Camera& cam) { return scene_image(scene_dir, cam); };
    env.init_model = [&](const DeviceCell& cell) {
        return device_init_model(scene, cell.cameras, init_points,
                                 cfg.seed + static_cast<std::uint32_t>(cell.edge * 131 +
                                                                       cell.device));
    };
    auto manifest = execute(run_root, topo, env, cfg);
    std::cout << manifest.to_text();
    return 0;
}

int cmd_mesh(const std::map<std::string, std::string>& flags) {
    auto scene = load_scene(need(flags, "scene"));
    auto model = load_model(need(flags, "model"));
    const Aabb bounds = scene.surface_extent();
    const double voxel = std::stod(get(flags, "voxel", "0.05"));
    auto mesh = tsdf_fuse(filter_depths(model_depths(model, scene.cameras, RenderConfig{})),
                          voxel, bounds);
    save_mesh_ply(mesh, need(flags, "out"));
    std::cout << "mesh: " << mesh.vertices.size() << " vertices, " << mesh.faces.size()
              << " faces\n";
    return 0;
}

int cmd_eval(const std::map<std::string, std::string>& flags) {
    auto scene = load_scene(need(flags, "scene"));
    auto model = load_model(need(flags, "model"));
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport rep;
    rep.model_size = model.size();

    RenderConfig rc;
    for (const auto& [id, cam] : scene.holdout_cameras.cameras) {
        auto buf = render(model, cam, rc);
        ImageRGB img(cam.width, cam.height);
        img.px = buf.rgb;
        const ImageRGB gt = trace_view(scene, cam).rgb;
        rep.view_psnr.emplace_back(id, psnr(img, gt));
        rep.view_ssim.emplace_back(id, ssim_metric(img, gt));
    }

    const Aabb bounds = scene.surface_extent();
    rep.eps = std::stod(get(flags, "eps", "0.01")) * bounds.diagonal();
    const double voxel = std::stod(get(flags, "voxel", std::to_string(rep.eps / 2)));
    auto mesh = tsdf_fuse(filter_depths(model_depths(model, scene.cameras, rc)), voxel, bounds);
    rep.mesh_fscore =
        fscore(mesh_sample(mesh, 20000, 1), surface_samples(scene, 20000, 2), rep.eps);
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::ofstream(need(flags, "out")) << rep.to_text();
    std::cout << rep.to_text();
    return 0;
}

int cmd_report(const std::map<std::string, std::string>& flags) {
    const fs::path run_root = need(flags, "run");
    std::ifstream mf(run_root / "manifest.txt");
    if (!mf) throw std::runtime_error("no manifest at " + run_root.string());
    std::cout << mf.rdbuf();
    for (const char* tier : {"devices", "edges"}) {
        const fs::path dir = run_root / tier;
        if (!fs::exists(dir)) continue;
        for (const auto& entry : fs::directory_iterator(dir)) {
            auto kv = read_manifest(entry.path());
            std::cout << tier << "." << kv["sender"] << ".count=" << kv["count"] << "\n";
        }
    }
    auto kv = read_manifest(run_root / "cloud");
    std::cout << "cloud.count=" << kv["count"] << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) usage();
    const std::string cmd = argv[1];
    try {
        const auto flags = parse_flags(argc, argv, 2);
        if (cmd == "synth") return cmd_synth(flags);
        if (cmd == "partition") return cmd_partition(flags);
        if (cmd == "train-device") return cmd_train_device(flags);
        if (cmd == "aggregate-edge") return cmd_aggregate_edge(flags);
        if (cmd == "aggregate-cloud") return cmd_aggregate_cloud(flags);
        if (cmd == "run-all") return cmd_run_all(flags);
        if (cmd == "eval") return cmd_eval(flags);
        if (cmd == "mesh") return cmd_mesh(flags);
        if (cmd == "report") return cmd_report(flags);
        usage();
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
}
