#pragma once

#include "csgs/core/camera.hpp"
#include "csgs/core/gaussian.hpp"
#include "csgs/core/sh.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace csgs {

struct MalformedHeaderError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct VersionMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TruncatedPayloadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr char kCsgsMagic[4] = {'C', 'S', 'G', 'S'};
inline constexpr std::uint32_t kCsgsVersion = 1;

namespace detail {

inline void put_f32(std::string& out, double v) {
    const float f = static_cast<float>(v);
    char b[4];
    std::memcpy(b, &f, 4);
    out.append(b, 4);
}

inline void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

inline void put_u64(std::string& out, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

struct Reader {
    const char* p;
    std::size_t n;
    std::size_t pos = 0;

    void need(std::size_t k) const {
        if (pos + k > n) throw TruncatedPayloadError("csgs payload ends early");
    }
    double f32() {
        need(4);
        float f;
        std::memcpy(&f, p + pos, 4);
        pos += 4;
        return static_cast<double>(f);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v;
        std::memcpy(&v, p + pos, 4);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v;
        std::memcpy(&v, p + pos, 8);
        pos += 8;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        std::uint8_t v;
        std::memcpy(&v, p + pos, 1);
        pos += 1;
        return v;
    }
};

}  // namespace detail

// Canonical inter-agent model format: "CSGS", version u32, SH degree u8,
// primitive count u64, then little-endian f32 records
// mu(3) rotation(4,wxyz) log_scale(3) opacity_logit(1) color(3*(deg+1)^2).
inline std::string serialize(const GaussianModel& m) {
    int degree = 0;
    for (const auto& p : m.primitives) degree = std::max(degree, p.sh_degree());

    std::string out;
    out.append(kCsgsMagic, 4);
    detail::put_u32(out, kCsgsVersion);
    out.push_back(static_cast<char>(degree));
    detail::put_u64(out, m.primitives.size());
    const int ncoeff = sh_coeff_count(degree);
    out.reserve(out.size() + m.primitives.size() * 4 * (11 + 3 * ncoeff));
    for (const auto& p : m.primitives) {
        for (int i = 0; i < 3; ++i) detail::put_f32(out, p.mu[i]);
        for (int i = 0; i < 4; ++i) detail::put_f32(out, p.rotation[i]);
        for (int i = 0; i < 3; ++i) detail::put_f32(out, p.log_scale[i]);
        detail::put_f32(out, p.opacity_logit);
        for (int k = 0; k < ncoeff; ++k) {
            const Vec3 c = k < static_cast<int>(p.color_coeffs.size()) ? p.color_coeffs[k]
                                                                       : Vec3::Zero();
            for (int i = 0; i < 3; ++i) detail::put_f32(out, c[i]);
        }
    }
    return out;
}

inline GaussianModel deserialize(const std::string& bytes, const std::string& model_id = "") {
    if (bytes.size() < 17) throw MalformedHeaderError("csgs header too short");
    if (std::memcmp(bytes.data(), kCsgsMagic, 4) != 0)
        throw MalformedHeaderError("bad csgs magic bytes");
    detail::Reader r{bytes.data(), bytes.size(), 4};
    const std::uint32_t version = r.u32();
    if (version != kCsgsVersion)
        throw VersionMismatchError("unsupported csgs format version " + std::to_string(version));
    const int degree = r.u8();
    if (degree < 0 || degree > 2) throw MalformedHeaderError("unsupported SH degree");
    const std::uint64_t count = r.u64();
    const int ncoeff = sh_coeff_count(degree);

    GaussianModel m;
    m.model_id = model_id;
    m.primitives.resize(count);
    for (auto& p : m.primitives) {
        for (int i = 0; i < 3; ++i) p.mu[i] = r.f32();
        for (int i = 0; i < 4; ++i) p.rotation[i] = r.f32();
        for (int i = 0; i < 3; ++i) p.log_scale[i] = r.f32();
        p.opacity_logit = r.f32();
        p.color_coeffs.assign(ncoeff, Vec3::Zero());
        for (int k = 0; k < ncoeff; ++k)
            for (int i = 0; i < 3; ++i) p.color_coeffs[k][i] = r.f32();
    }
    m.recompute_extent();
    return m;
}

inline void save_model(const GaussianModel& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    const std::string bytes = serialize(m);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline GaussianModel load_model(const std::string& path, const std::string& model_id = "") {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str(), model_id);
}

// Binary little-endian PLY with the raw parameters as vertex properties.
inline void export_ply(const GaussianModel& m, const std::string& path) {
    int degree = 0;
    for (const auto& p : m.primitives) degree = std::max(degree, p.sh_degree());
    const int ncoeff = sh_coeff_count(degree);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << "ply\nformat binary_little_endian 1.0\n";
    f << "element vertex " << m.primitives.size() << "\n";
    for (const char* n : {"x", "y", "z"}) f << "property float " << n << "\n";
    for (int i = 0; i < 4; ++i) f << "property float rot_" << i << "\n";
    for (int i = 0; i < 3; ++i) f << "property float scale_" << i << "\n";
    f << "property float opacity\n";
    for (int k = 0; k < 3 * ncoeff; ++k) f << "property float f_sh_" << k << "\n";
    f << "end_header\n";

    std::string body;
    for (const auto& p : m.primitives) {
        for (int i = 0; i < 3; ++i) detail::put_f32(body, p.mu[i]);
        for (int i = 0; i < 4; ++i) detail::put_f32(body, p.rotation[i]);
        for (int i = 0; i < 3; ++i) detail::put_f32(body, p.log_scale[i]);
        detail::put_f32(body, p.opacity_logit);
        for (int k = 0; k < ncoeff; ++k) {
            const Vec3 c = k < static_cast<int>(p.color_coeffs.size()) ? p.color_coeffs[k]
                                                                       : Vec3::Zero();
            for (int i = 0; i < 3; ++i) detail::put_f32(body, c[i]);
        }
    }
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
}

// cameras.txt: one camera per line, "id fx fy cx cy w h r00..r22 tx ty tz".
// Image paths are deliberately not representable in this schema.
inline std::string cameras_to_text(const CameraSet& set) {
    std::ostringstream out;
    out.precision(17);
    for (const auto& [id, c] : set.cameras) {
        out << id << ' ' << c.fx << ' ' << c.fy << ' ' << c.cx << ' ' << c.cy << ' ' << c.width
            << ' ' << c.height;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) out << ' ' << c.rotation_w2c(i, j);
        for (int i = 0; i < 3; ++i) out << ' ' << c.translation_w2c[i];
        out << '\n';
    }
    return out.str();
}

inline CameraSet cameras_from_text(const std::string& text) {
    CameraSet set;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Camera c;
        if (!(ls >> c.camera_id >> c.fx >> c.fy >> c.cx >> c.cy >> c.width >> c.height))
            throw std::runtime_error("malformed camera line: " + line);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) ls >> c.rotation_w2c(i, j);
        for (int i = 0; i < 3; ++i) ls >> c.translation_w2c[i];
        if (!ls) throw std::runtime_error("malformed camera line: " + line);
        set.insert(c);
    }
    return set;
}

}  // namespace csgs
