#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace csgs {

// Forward-mode dual number with a fixed-width gradient. Used to get exact
// derivatives of the per-pixel geometric losses w.r.t. a handful of local
// buffer values without hand-deriving every chain.
template <int N>
struct Dual {
    double v = 0.0;
    std::array<double, N> g{};

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT: implicit by design
    static Dual var(double value, int slot) {
        Dual d(value);
        d.g[slot] = 1.0;
        return d;
    }

    Dual operator-() const {
        Dual r(-v);
        for (int i = 0; i < N; ++i) r.g[i] = -g[i];
        return r;
    }
    Dual& operator+=(const Dual& o) {
        v += o.v;
        for (int i = 0; i < N; ++i) g[i] += o.g[i];
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        v -= o.v;
        for (int i = 0; i < N; ++i) g[i] -= o.g[i];
        return *this;
    }
    Dual& operator*=(const Dual& o) {
        for (int i = 0; i < N; ++i) g[i] = g[i] * o.v + v * o.g[i];
        v *= o.v;
        return *this;
    }
    Dual& operator/=(const Dual& o) {
        const double iv = 1.0 / o.v;
        v *= iv;
        for (int i = 0; i < N; ++i) g[i] = (g[i] - v * o.g[i]) * iv;
        return *this;
    }

    friend Dual operator+(Dual a, const Dual& b) { return a += b; }
    friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
    friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
    friend Dual operator/(Dual a, const Dual& b) { return a /= b; }
    friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
    friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }

    friend Dual sqrt(const Dual& a) {
        Dual r(std::sqrt(a.v));
        const double s = r.v > 0 ? 0.5 / r.v : 0.0;
        for (int i = 0; i < N; ++i) r.g[i] = s * a.g[i];
        return r;
    }
    friend Dual abs(const Dual& a) {
        const double s = a.v < 0 ? -1.0 : 1.0;
        Dual r(std::abs(a.v));
        for (int i = 0; i < N; ++i) r.g[i] = s * a.g[i];
        return r;
    }
};

template <int N>
struct DualVec3 {
    Dual<N> x, y, z;

    Dual<N> dot(const DualVec3& o) const { return x * o.x + y * o.y + z * o.z; }
    DualVec3 cross(const DualVec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    Dual<N> norm() const { return sqrt(x * x + y * y + z * z); }
    DualVec3 operator+(const DualVec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    DualVec3 operator-(const DualVec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    DualVec3 operator*(const Dual<N>& s) const { return {x * s, y * s, z * s}; }
    DualVec3 operator/(const Dual<N>& s) const { return {x / s, y / s, z / s}; }
    DualVec3 normalized() const { return *this / norm(); }
    DualVec3 operator-() const { return {-x, -y, -z}; }
};

}  // namespace csgs
