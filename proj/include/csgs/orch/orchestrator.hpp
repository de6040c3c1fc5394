#pragma once

#include "csgs/agg/aggregation.hpp"
#include "csgs/core/camera.hpp"
#include "csgs/core/gaussian.hpp"
#include "csgs/core/serialization.hpp"
#include "csgs/train/trainer.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace csgs {

struct PartitionSpecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyCellError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ArtifactHashError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct StageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// "(PxP)*E": P-by-P devices per edge, E edges.
struct PartitionSpec {
    int p = 1;
    int e = 1;
};

inline PartitionSpec parse_partition_spec(const std::string& s) {
    int p1 = 0, p2 = 0, e = 0;
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    std::istringstream in(s);
    if (!(in >> c1 >> p1 >> c2 >> p2 >> c3 >> c4 >> e) || c1 != '(' || (c2 != 'x' && c2 != 'X') ||
        c3 != ')' || c4 != '*' || !(in >> std::ws).eof())
        throw PartitionSpecError("bad partition spec (want \"(PxP)*E\"): " + s);
    if (p1 != p2 || p1 < 1 || e < 1)
        throw PartitionSpecError("partition spec needs square P>=1 and E>=1: " + s);
    return {p1, e};
}

// Factor pair of e minimizing |rows - cols|, rows <= cols.
inline std::pair<int, int> edge_grid_shape(int e) {
    int rows = 1;
    for (int r = 1; r * r <= e; ++r)
        if (e % r == 0) rows = r;
    return {rows, e / rows};
}

struct DeviceCell {
    int edge = 0;
    int device = 0;
    CameraSet cameras;

    std::string id() const {
        return "e" + std::to_string(edge) + "_d" + std::to_string(device);
    }
};

struct Topology {
    PartitionSpec spec;
    std::vector<DeviceCell> devices;  // row-major, edge-major order

    std::vector<DeviceCell> edge_devices(int j) const {
        std::vector<DeviceCell> out;
        for (const auto& d : devices)
            if (d.edge == j) out.push_back(d);
        return out;
    }
};

// Uniform ground-plane grid: the extent's two longest axes are split into an
// (edge grid) x (P x P per edge) lattice; each camera lands in the cell
// containing its projected center, exact boundaries going to the lower cell.
inline Topology partition_cameras(const CameraSet& cameras, const PartitionSpec& spec,
                                  const Aabb& extent) {
    if (cameras.empty()) throw NoCameraError("partition_cameras: no cameras");
    const Vec3 len = extent.empty() ? Vec3::Zero() : Vec3(extent.hi - extent.lo);
    int axis_u = 0, axis_v = 1;
    {
        std::vector<int> axes = {0, 1, 2};
        std::stable_sort(axes.begin(), axes.end(),
                         [&](int a, int b) { return len[a] > len[b]; });
        axis_u = std::min(axes[0], axes[1]);
        axis_v = std::max(axes[0], axes[1]);
    }
    const auto [erows, ecols] = edge_grid_shape(spec.e);
    const int nu = ecols * spec.p;  // columns along axis_u
    const int nv = erows * spec.p;

    auto cell_of = [](double x, double lo, double hi, int n) {
        if (n == 1 || hi <= lo) return 0;
        const double t = (x - lo) / (hi - lo) * n;
        const int idx = static_cast<int>(std::ceil(t)) - 1;
        return std::clamp(idx, 0, n - 1);
    };

    Topology topo;
    topo.spec = spec;
    topo.devices.resize(static_cast<std::size_t>(spec.e) * spec.p * spec.p);
    for (int j = 0; j < spec.e; ++j)
        for (int i = 0; i < spec.p * spec.p; ++i) {
            auto& cell = topo.devices[static_cast<std::size_t>(j) * spec.p * spec.p + i];
            cell.edge = j;
            cell.device = i;
        }

    for (const auto& [id, cam] : cameras.cameras) {
        const Vec3 c = cam.center();
        const int cu = cell_of(c[axis_u], extent.lo[axis_u], extent.hi[axis_u], nu);
        const int cv = cell_of(c[axis_v], extent.lo[axis_v], extent.hi[axis_v], nv);
        const int edge = (cv / spec.p) * ecols + (cu / spec.p);
        const int dev = (cv % spec.p) * spec.p + (cu % spec.p);
        topo.devices[static_cast<std::size_t>(edge) * spec.p * spec.p + dev].cameras.insert(cam);
    }

    for (const auto& d : topo.devices)
        if (d.cameras.empty())
            throw EmptyCellError("device cell " + d.id() + " has no cameras");
    return topo;
}

// Inter-agent payload. Holds Gaussians and camera geometry only; there is no
// field that could carry pixels or image paths.
struct AgentMessage {
    enum class Stage { kDeviceToEdge, kEdgeToCloud };
    std::string sender;
    Stage stage = Stage::kDeviceToEdge;
    std::string model_bytes;  // CSGS format
    CameraSet cameras;
    std::map<std::string, std::string> metadata;
};

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

namespace detail {

inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open for write: " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("missing artifact file: " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace detail

inline void write_artifact(const std::filesystem::path& dir, const AgentMessage& msg) {
    std::filesystem::create_directories(dir);
    detail::atomic_write(dir / "artifact.csgs", msg.model_bytes);
    detail::atomic_write(dir / "cameras.txt", cameras_to_text(msg.cameras));
    std::ostringstream mf;
    mf << "sender=" << msg.sender << "\n";
    mf << "stage=" << (msg.stage == AgentMessage::Stage::kDeviceToEdge ? "device-to-edge"
                                                                       : "edge-to-cloud")
       << "\n";
    mf << "sha256=" << sha256_hex(msg.model_bytes) << "\n";
    mf << "camera_count=" << msg.cameras.size() << "\n";
    for (const auto& [k, v] : msg.metadata) mf << k << "=" << v << "\n";
    detail::atomic_write(dir / "manifest.txt", mf.str());
}

inline std::map<std::string, std::string> read_manifest(const std::filesystem::path& dir) {
    std::istringstream in(detail::read_file(dir / "manifest.txt"));
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

inline AgentMessage read_artifact(const std::filesystem::path& dir) {
    AgentMessage msg;
    auto kv = read_manifest(dir);
    msg.sender = kv["sender"];
    msg.stage = kv["stage"] == "edge-to-cloud" ? AgentMessage::Stage::kEdgeToCloud
                                               : AgentMessage::Stage::kDeviceToEdge;
    msg.model_bytes = detail::read_file(dir / "artifact.csgs");
    if (sha256_hex(msg.model_bytes) != kv["sha256"])
        throw ArtifactHashError("artifact hash mismatch in " + dir.string());
    msg.cameras = cameras_from_text(detail::read_file(dir / "cameras.txt"));
    msg.metadata = std::move(kv);
    return msg;
}

// Edge aggregation over its device messages, in sender-id order.
inline AgentMessage run_edge(int j, std::vector<AgentMessage> device_msgs,
                             const AggregationConfig& cfg, std::ostream* log = nullptr) {
    if (device_msgs.empty()) throw StageError("edge " + std::to_string(j) + ": no device inputs");
    std::sort(device_msgs.begin(), device_msgs.end(),
              [](const AgentMessage& a, const AgentMessage& b) { return a.sender < b.sender; });
    std::vector<LocalAgent> locals;
    AgentMessage out;
    out.sender = "e" + std::to_string(j);
    out.stage = AgentMessage::Stage::kEdgeToCloud;
    for (const auto& msg : device_msgs) {
        locals.push_back({deserialize(msg.model_bytes, msg.sender), msg.cameras});
        for (const auto& [id, cam] : msg.cameras.cameras) out.cameras.insert(cam);
    }
    GaussianModel merged = aggregate(locals, cfg, log);
    merged.model_id = out.sender;
    out.model_bytes = serialize(merged);
    out.metadata["count"] = std::to_string(merged.size());
    return out;
}

// Cloud aggregation over the edge messages; same algorithm, final tier.
inline GaussianModel run_cloud(std::vector<AgentMessage> edge_msgs, const AggregationConfig& cfg,
                               std::ostream* log = nullptr) {
    if (edge_msgs.empty()) throw StageError("cloud: no edge inputs");
    std::sort(edge_msgs.begin(), edge_msgs.end(),
              [](const AgentMessage& a, const AgentMessage& b) { return a.sender < b.sender; });
    std::vector<LocalAgent> locals;
    for (const auto& msg : edge_msgs)
        locals.push_back({deserialize(msg.model_bytes, msg.sender), msg.cameras});
    GaussianModel cloud = aggregate(locals, cfg, log);
    cloud.model_id = "cloud";
    return cloud;
}

struct RunConfig {
    TrainerConfig trainer;
    AggregationConfig agg;
    int workers = 1;
    std::uint32_t seed = 0;
};

// Per-device hooks: images never cross this boundary, each device worker pulls
// its own pixels and initial points locally.
struct DeviceEnv {
    std::function<ImageRGB(const Camera&)> image_for;
    std::function<GaussianModel(const DeviceCell&)> init_model;
};

struct StageRecord {
    std::string name;
    double seconds = 0;
    std::size_t peak_model_size = 0;
};

struct RunManifest {
    std::vector<StageRecord> stages;
    std::filesystem::path cloud_model_path;

    std::string to_text() const {
        std::ostringstream out;
        for (const auto& s : stages)
            out << "stage." << s.name << ".seconds=" << s.seconds << "\n"
                << "stage." << s.name << ".peak_model_size=" << s.peak_model_size << "\n";
        out << "cloud_model=" << cloud_model_path.string() << "\n";
        return out.str();
    }
};

namespace detail {

// Fixed-size task list over a small thread pool; task order is assigned by
// index so results never depend on the worker count.
inline std::vector<std::string> run_parallel(std::size_t tasks, int workers,
                                             const std::function<void(std::size_t)>& fn) {
    std::vector<std::string> errors(tasks);
    std::mutex mu;
    std::size_t next = 0;
    auto worker = [&] {
        for (;;) {
            std::size_t k;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next == tasks) return;
                k = next++;
            }
            try {
                fn(k);
            } catch (const std::exception& ex) {
                errors[k] = ex.what();
            }
        }
    };
    const int n = std::max(1, std::min<int>(workers, static_cast<int>(tasks)));
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    errors.erase(std::remove(errors.begin(), errors.end(), std::string()), errors.end());
    return errors;
}

inline std::uint32_t device_seed(std::uint32_t base, const DeviceCell& cell) {
    return base + 7919u * static_cast<std::uint32_t>(cell.edge) +
           static_cast<std::uint32_t>(cell.device) + 1u;
}

}  // namespace detail

// Full pipeline: parallel device training, then edge aggregation after all of
// an edge's devices finish, then cloud aggregation after all edges.
inline RunManifest execute(const std::filesystem::path& run_root, const Topology& topo,
                           const DeviceEnv& env, const RunConfig& cfg) {
    namespace fs = std::filesystem;
    using clock = std::chrono::steady_clock;
    RunManifest manifest;

    auto stage_time = [](clock::time_point t0) {
        return std::chrono::duration<double>(clock::now() - t0).count();
    };

    // Device stage.
    auto t0 = clock::now();
    StageRecord devices{"devices", 0, 0};
    std::vector<std::size_t> device_sizes(topo.devices.size(), 0);
    auto errors = detail::run_parallel(
        topo.devices.size(), cfg.workers, [&](std::size_t k) {
            const DeviceCell& cell = topo.devices[k];
            std::vector<TrainView> views;
            for (const auto& [id, cam] : cell.cameras.cameras)
                views.push_back({cam, env.image_for(cam)});
            TrainerConfig tc = cfg.trainer;
            tc.seed = detail::device_seed(cfg.seed, cell);
            GaussianModel model = train(env.init_model(cell), views, tc);
            model.model_id = cell.id();
            device_sizes[k] = model.size();

            AgentMessage msg;
            msg.sender = cell.id();
            msg.stage = AgentMessage::Stage::kDeviceToEdge;
            msg.model_bytes = serialize(model);
            msg.cameras = cell.cameras;
            msg.metadata["count"] = std::to_string(model.size());
            write_artifact(run_root / "devices" / cell.id(), msg);
        });
    devices.seconds = stage_time(t0);
    for (std::size_t s : device_sizes) devices.peak_model_size = std::max(devices.peak_model_size, s);
    manifest.stages.push_back(devices);
    if (!errors.empty()) {
        std::string report = "device stage failed (" + std::to_string(errors.size()) + " of " +
                             std::to_string(topo.devices.size()) + " workers):";
        for (const auto& e : errors) report += "\n  " + e;
        throw StageError(report);
    }

    // Edge stage: each edge reads its device artifacts back through the
    // protocol (hash-checked barrier), aggregates, and publishes.
    t0 = clock::now();
    StageRecord edges{"edges", 0, 0};
    std::vector<std::size_t> edge_sizes(static_cast<std::size_t>(topo.spec.e), 0);
    errors = detail::run_parallel(
        static_cast<std::size_t>(topo.spec.e), cfg.workers, [&](std::size_t j) {
            std::vector<AgentMessage> msgs;
            for (const auto& cell : topo.edge_devices(static_cast<int>(j)))
                msgs.push_back(read_artifact(run_root / "devices" / cell.id()));
            AggregationConfig ac = cfg.agg;
            ac.seed = cfg.seed + 104729u * (static_cast<std::uint32_t>(j) + 1u);
            AgentMessage out = run_edge(static_cast<int>(j), std::move(msgs), ac);
            edge_sizes[j] = deserialize(out.model_bytes).size();
            write_artifact(run_root / "edges" / out.sender, out);
        });
    edges.seconds = stage_time(t0);
    for (std::size_t s : edge_sizes) edges.peak_model_size = std::max(edges.peak_model_size, s);
    manifest.stages.push_back(edges);
    if (!errors.empty()) {
        std::string report = "edge stage failed:";
        for (const auto& e : errors) report += "\n  " + e;
        throw StageError(report);
    }

    // Cloud stage.
    t0 = clock::now();
    std::vector<AgentMessage> edge_msgs;
    for (int j = 0; j < topo.spec.e; ++j)
        edge_msgs.push_back(read_artifact(run_root / "edges" / ("e" + std::to_string(j))));
    AggregationConfig ac = cfg.agg;
    ac.seed = cfg.seed + 1299709u;
    GaussianModel cloud = run_cloud(std::move(edge_msgs), ac);
    fs::create_directories(run_root / "cloud");
    detail::atomic_write(run_root / "cloud" / "artifact.csgs", serialize(cloud));
    CameraSet all_cams;
    for (const auto& cell : topo.devices)
        for (const auto& [id, cam] : cell.cameras.cameras) all_cams.insert(cam);
    detail::atomic_write(run_root / "cloud" / "cameras.txt", cameras_to_text(all_cams));
    std::ostringstream mf;
    mf << "sender=cloud\nstage=final\nsha256=" << sha256_hex(serialize(cloud)) << "\n"
       << "count=" << cloud.size() << "\n";
    detail::atomic_write(run_root / "cloud" / "manifest.txt", mf.str());
    manifest.stages.push_back({"cloud", stage_time(t0), cloud.size()});
    manifest.cloud_model_path = run_root / "cloud" / "artifact.csgs";
    detail::atomic_write(run_root / "manifest.txt", manifest.to_text());
    return manifest;
}

}  // namespace csgs
