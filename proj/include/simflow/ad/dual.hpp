#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace simflow::ad {

/// Forward-mode number carrying N directional derivatives. Used for exact
/// simulator gradients with respect to a handful of parameters.
template <std::size_t N>
struct dual {
    double v = 0.0;
    std::array<double, N> d{};

    dual() = default;
    dual(double value) : v(value) {}  // NOLINT: implicit promotion of constants

    static dual variable(double value, std::size_t slot) {
        dual x(value);
        x.d[slot] = 1.0;
        return x;
    }

    dual& operator+=(const dual& o) {
        v += o.v;
        for (std::size_t i = 0; i < N; ++i) d[i] += o.d[i];
        return *this;
    }
    dual& operator-=(const dual& o) {
        v -= o.v;
        for (std::size_t i = 0; i < N; ++i) d[i] -= o.d[i];
        return *this;
    }
    dual& operator*=(const dual& o) {
        for (std::size_t i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
        v *= o.v;
        return *this;
    }
    dual& operator/=(const dual& o) {
        const double inv = 1.0 / o.v;
        const double q = v * inv;
        for (std::size_t i = 0; i < N; ++i) d[i] = (d[i] - q * o.d[i]) * inv;
        v = q;
        return *this;
    }
    dual& operator*=(double s) {
        v *= s;
        for (auto& x : d) x *= s;
        return *this;
    }
};

template <std::size_t N>
dual<N> operator+(dual<N> a, const dual<N>& b) { return a += b; }
template <std::size_t N>
dual<N> operator-(dual<N> a, const dual<N>& b) { return a -= b; }
template <std::size_t N>
dual<N> operator*(dual<N> a, const dual<N>& b) { return a *= b; }
template <std::size_t N>
dual<N> operator/(dual<N> a, const dual<N>& b) { return a /= b; }

template <std::size_t N>
dual<N> operator+(dual<N> a, double b) { a.v += b; return a; }
template <std::size_t N>
dual<N> operator+(double b, dual<N> a) { a.v += b; return a; }
template <std::size_t N>
dual<N> operator-(dual<N> a, double b) { a.v -= b; return a; }
template <std::size_t N>
dual<N> operator-(double b, const dual<N>& a) {
    dual<N> r;
    r.v = b - a.v;
    for (std::size_t i = 0; i < N; ++i) r.d[i] = -a.d[i];
    return r;
}
template <std::size_t N>
dual<N> operator*(dual<N> a, double s) { return a *= s; }
template <std::size_t N>
dual<N> operator*(double s, dual<N> a) { return a *= s; }
template <std::size_t N>
dual<N> operator/(dual<N> a, double s) { return a *= (1.0 / s); }
template <std::size_t N>
dual<N> operator/(double s, const dual<N>& a) { return dual<N>(s) / a; }
template <std::size_t N>
dual<N> operator-(const dual<N>& a) { return 0.0 - a; }

template <std::size_t N>
bool operator<(const dual<N>& a, const dual<N>& b) { return a.v < b.v; }
template <std::size_t N>
bool operator>(const dual<N>& a, const dual<N>& b) { return a.v > b.v; }
template <std::size_t N>
bool operator<(const dual<N>& a, double b) { return a.v < b; }
template <std::size_t N>
bool operator>(const dual<N>& a, double b) { return a.v > b; }
template <std::size_t N>
bool operator<=(const dual<N>& a, double b) { return a.v <= b; }
template <std::size_t N>
bool operator>=(const dual<N>& a, double b) { return a.v >= b; }

// f(a) with derivative df applied by the chain rule.
template <std::size_t N>
dual<N> chain(const dual<N>& a, double f, double df) {
    dual<N> r;
    r.v = f;
    for (std::size_t i = 0; i < N; ++i) r.d[i] = df * a.d[i];
    return r;
}

template <std::size_t N>
dual<N> exp(const dual<N>& a) { const double e = std::exp(a.v); return chain(a, e, e); }
template <std::size_t N>
dual<N> log(const dual<N>& a) { return chain(a, std::log(a.v), 1.0 / a.v); }
template <std::size_t N>
dual<N> log1p(const dual<N>& a) { return chain(a, std::log1p(a.v), 1.0 / (1.0 + a.v)); }
template <std::size_t N>
dual<N> sqrt(const dual<N>& a) { const double s = std::sqrt(a.v); return chain(a, s, 0.5 / s); }
template <std::size_t N>
dual<N> sin(const dual<N>& a) { return chain(a, std::sin(a.v), std::cos(a.v)); }
template <std::size_t N>
dual<N> cos(const dual<N>& a) { return chain(a, std::cos(a.v), -std::sin(a.v)); }
template <std::size_t N>
dual<N> tanh(const dual<N>& a) { const double t = std::tanh(a.v); return chain(a, t, 1.0 - t * t); }
template <std::size_t N>
dual<N> atan(const dual<N>& a) { return chain(a, std::atan(a.v), 1.0 / (1.0 + a.v * a.v)); }
template <std::size_t N>
dual<N> atanh(const dual<N>& a) { return chain(a, std::atanh(a.v), 1.0 / (1.0 - a.v * a.v)); }
template <std::size_t N>
dual<N> abs(const dual<N>& a) { return a.v < 0 ? -a : a; }
template <std::size_t N>
dual<N> pow(const dual<N>& a, double p) {
    const double f = std::pow(a.v, p);
    return chain(a, f, p * std::pow(a.v, p - 1.0));
}
template <std::size_t N>
dual<N> atan2(const dual<N>& y, const dual<N>& x) {
    const double r2 = x.v * x.v + y.v * y.v;
    dual<N> r;
    r.v = std::atan2(y.v, x.v);
    for (std::size_t i = 0; i < N; ++i) r.d[i] = (x.v * y.d[i] - y.v * x.d[i]) / r2;
    return r;
}

inline double value_of(double x) { return x; }
template <std::size_t N>
double value_of(const dual<N>& x) { return x.v; }

inline bool is_finite(double x) { return std::isfinite(x); }
template <std::size_t N>
bool is_finite(const dual<N>& x) {
    if (!std::isfinite(x.v)) return false;
    for (auto g : x.d)
        if (!std::isfinite(g)) return false;
    return true;
}

} // namespace simflow::ad
