#pragma once

#include <array>
#include <cmath>

namespace enjoint {

/// Forward-mode dual number with N tangent directions. Used where a small
/// scalar expression (box decode + CIoU) needs its exact local Jacobian.
template <typename T, int N>
struct Dual {
  T v{};
  std::array<T, N> d{};

  Dual() = default;
  Dual(T value) : v(value) {}  // NOLINT: implicit constants are the point
  static Dual variable(T value, int k) {
    Dual x(value);
    x.d[static_cast<std::size_t>(k)] = T{1};
    return x;
  }

  friend Dual operator+(const Dual& a, const Dual& b) {
    Dual r(a.v + b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
    return r;
  }
  friend Dual operator-(const Dual& a, const Dual& b) {
    Dual r(a.v - b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
    return r;
  }
  friend Dual operator-(const Dual& a) {
    Dual r(-a.v);
    for (int i = 0; i < N; ++i) r.d[i] = -a.d[i];
    return r;
  }
  friend Dual operator*(const Dual& a, const Dual& b) {
    Dual r(a.v * b.v);
    for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
    return r;
  }
  friend Dual operator/(const Dual& a, const Dual& b) {
    Dual r(a.v / b.v);
    const T inv = T{1} / (b.v * b.v);
    for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv;
    return r;
  }
  friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
  friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
};

template <typename T>
struct is_dual : std::false_type {};
template <typename T, int N>
struct is_dual<Dual<T, N>> : std::true_type {};

template <typename T>
T value_of(const T& x) {
  return x;
}
template <typename T, int N>
T value_of(const Dual<T, N>& x) {
  return x.v;
}

template <typename T, int N>
Dual<T, N> chain(const Dual<T, N>& a, T fv, T dfdx) {
  Dual<T, N> r(fv);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * dfdx;
  return r;
}

template <typename T, int N>
Dual<T, N> exp(const Dual<T, N>& a) {
  const T e = std::exp(a.v);
  return chain(a, e, e);
}
template <typename T, int N>
Dual<T, N> atan(const Dual<T, N>& a) {
  return chain(a, std::atan(a.v), T{1} / (T{1} + a.v * a.v));
}
template <typename T, int N>
Dual<T, N> sqrt(const Dual<T, N>& a) {
  const T s = std::sqrt(a.v);
  return chain(a, s, T{0.5} / s);
}

// Branch selection follows the primal value; the tangent is the selected branch's.
template <typename S>
S dmax(const S& a, const S& b) {
  return value_of(a) >= value_of(b) ? a : b;
}
template <typename S>
S dmin(const S& a, const S& b) {
  return value_of(a) <= value_of(b) ? a : b;
}

}  // namespace enjoint
