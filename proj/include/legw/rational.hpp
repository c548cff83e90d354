// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <charconv>
#include <cmath>
#include <compare>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <string_view>

#include "legw/errors.hpp"

namespace legw {

/// Exact rational number with 64-bit terms, always stored in lowest terms
/// with a positive denominator. Arithmetic throws on overflow rather than
/// wrapping.
class Rational {
 public:
  constexpr Rational() = default;
  constexpr Rational(std::int64_t value) : num_(value) {}  // NOLINT(implicit)
  Rational(std::int64_t num, std::int64_t den) : num_(num), den_(den) { normalize(); }

  std::int64_t num() const noexcept { return num_; }
  std::int64_t den() const noexcept { return den_; }

  double to_double() const noexcept {
    return static_cast<double>(num_) / static_cast<double>(den_);
  }
  bool is_integer() const noexcept { return den_ == 1; }
  bool is_positive() const noexcept { return num_ > 0; }
  bool is_zero() const noexcept { return num_ == 0; }

  /// floor(num/den)
  std::int64_t floor() const noexcept {
    std::int64_t q = num_ / den_;
    if ((num_ % den_ != 0) && (num_ < 0)) --q;
    return q;
  }
  std::int64_t ceil() const noexcept { return -Rational(-num_, den_).floor(); }
  /// Nearest integer, halves rounded up (toward +inf).
  std::int64_t round_half_up() const { return (*this + Rational(1, 2)).floor(); }

  Rational reciprocal() const {
    if (num_ == 0) throw InvalidArgument("reciprocal of zero");
    return Rational(den_, num_);
  }

  friend Rational operator+(const Rational& a, const Rational& b) {
    const std::int64_t g = std::gcd(a.den_, b.den_);
    const std::int64_t lhs = mul(a.num_, b.den_ / g);
    const std::int64_t rhs = mul(b.num_, a.den_ / g);
    return Rational(add(lhs, rhs), mul(a.den_ / g, b.den_));
  }
  friend Rational operator-(const Rational& a) { return Rational(-a.num_, a.den_); }
  friend Rational operator-(const Rational& a, const Rational& b) { return a + (-b); }
  friend Rational operator*(const Rational& a, const Rational& b) {
    // Cross-reduce first to keep the intermediate terms small.
    const std::int64_t g1 = std::gcd(a.num_, b.den_);
    const std::int64_t g2 = std::gcd(b.num_, a.den_);
    const std::int64_t n1 = g1 ? a.num_ / g1 : a.num_;
    const std::int64_t d2 = g1 ? b.den_ / g1 : b.den_;
    const std::int64_t n2 = g2 ? b.num_ / g2 : b.num_;
    const std::int64_t d1 = g2 ? a.den_ / g2 : a.den_;
    return Rational(mul(n1, n2), mul(d1, d2));
  }
  friend Rational operator/(const Rational& a, const Rational& b) { return a * b.reciprocal(); }

  Rational& operator+=(const Rational& o) { return *this = *this + o; }
  Rational& operator*=(const Rational& o) { return *this = *this * o; }

  friend bool operator==(const Rational&, const Rational&) = default;
  friend std::strong_ordering operator<=>(const Rational& a, const Rational& b) {
    // a/b <=> c/d  ==  a*d <=> c*b  (denominators positive)
    const __int128 lhs = static_cast<__int128>(a.num_) * b.den_;
    const __int128 rhs = static_cast<__int128>(b.num_) * a.den_;
    return lhs <=> rhs;
  }

  /// "p" or "p/q".
  std::string to_string() const {
    if (den_ == 1) return std::to_string(num_);
    return std::to_string(num_) + "/" + std::to_string(den_);
  }

  /// Parses an integer ("7"), a fraction ("10/32"), or a finite decimal
  /// ("0.0145", "-2.5", "1e-3") exactly.
  static Rational parse(std::string_view text);

 private:
  static std::int64_t mul(std::int64_t a, std::int64_t b) {
    std::int64_t out = 0;
    if (__builtin_mul_overflow(a, b, &out)) throw InvalidArgument("rational overflow");
    return out;
  }
  static std::int64_t add(std::int64_t a, std::int64_t b) {
    std::int64_t out = 0;
    if (__builtin_add_overflow(a, b, &out)) throw InvalidArgument("rational overflow");
    return out;
  }
  void normalize() {
    if (den_ == 0) throw InvalidArgument("rational with zero denominator");
    if (den_ < 0) {
      num_ = -num_;
      den_ = -den_;
    }
    const std::int64_t g = std::gcd(num_, den_);
    if (g > 1) {
      num_ /= g;
      den_ /= g;
    }
  }

  std::int64_t num_ = 0;
  std::int64_t den_ = 1;
};

inline std::ostream& operator<<(std::ostream& os, const Rational& r) { return os << r.to_string(); }

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::int64_t parse_int(std::string_view s, std::string_view context) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw InvalidArgument("cannot parse integer '" + std::string(s) + "' in " + std::string(context));
  }
  return v;
}

inline Rational pow10(int e) {
  Rational r(1);
  for (int i = 0; i < e; ++i) r *= Rational(10);
  return r;
}

}  // namespace detail

inline Rational Rational::parse(std::string_view text) {
  using detail::trim;
  text = trim(text);
  if (text.empty()) throw InvalidArgument("empty rational");
  if (auto slash = text.find('/'); slash != std::string_view::npos) {
    return parse(text.substr(0, slash)) / parse(text.substr(slash + 1));
  }
  bool negative = false;
  if (text.front() == '-' || text.front() == '+') {
    negative = text.front() == '-';
    text.remove_prefix(1);
  }
  int exponent = 0;
  if (auto e = text.find_first_of("eE"); e != std::string_view::npos) {
    exponent = static_cast<int>(detail::parse_int(text.substr(e + 1), text));
    text = text.substr(0, e);
  }
  std::string digits;
  int frac_digits = 0;
  bool seen_point = false;
  for (char c : text) {
    if (c == '.' && !seen_point) {
      seen_point = true;
    } else if (c >= '0' && c <= '9') {
      digits.push_back(c);
      if (seen_point) ++frac_digits;
    } else {
      throw InvalidArgument("cannot parse number '" + std::string(text) + "'");
    }
  }
  if (digits.empty()) throw InvalidArgument("cannot parse number '" + std::string(text) + "'");
  Rational value(detail::parse_int(digits, text));
  exponent -= frac_digits;
  value = exponent >= 0 ? value * detail::pow10(exponent) : value / detail::pow10(-exponent);
  return negative ? -value : value;
}

}  // namespace legw
