#pragma once

#include <cstdint>
#include <numeric>
#include <string>

#include "pcfglab/errors.hpp"

namespace pcfglab {

// Small exact rational on 64-bit integers, used for grammar weights so that
// renormalization and sampling tables stay exact and platform-independent.
// Arbitrary-precision rationals (arithmetic bench) live elsewhere.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d) : num(n), den(d) { reduce(); }
  static Rational from_int(std::int64_t n) { return Rational(n, 1); }

  void reduce() {
    if (den == 0) throw NumericalError("rational with zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
    if (num == 0) den = 1;
  }

  double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }

  static std::int64_t checked(__int128 v) {
    if (v > INT64_MAX || v < INT64_MIN) throw NumericalError("rational overflow");
    return static_cast<std::int64_t>(v);
  }

  friend Rational operator+(const Rational& a, const Rational& b) {
    __int128 n = (__int128)a.num * b.den + (__int128)b.num * a.den;
    __int128 d = (__int128)a.den * b.den;
    __int128 g = gcd128(n < 0 ? -n : n, d);
    return Rational(checked(n / g), checked(d / g));
  }
  friend Rational operator*(const Rational& a, const Rational& b) {
    __int128 n = (__int128)a.num * b.num;
    __int128 d = (__int128)a.den * b.den;
    __int128 g = gcd128(n < 0 ? -n : n, d);
    return Rational(checked(n / g), checked(d / g));
  }
  friend Rational operator/(const Rational& a, const Rational& b) {
    if (b.num == 0) throw NumericalError("rational division by zero");
    return a * Rational(b.den, b.num);
  }
  friend bool operator==(const Rational& a, const Rational& b) {
    return a.num == b.num && a.den == b.den;
  }

  static __int128 gcd128(__int128 a, __int128 b) {
    while (b != 0) {
      __int128 t = a % b;
      a = b;
      b = t;
    }
    return a == 0 ? 1 : a;
  }
};

// Parses "0.7", "1", ".25" or "7/13" exactly. Throws DataError on junk.
inline Rational parse_rational(const std::string& s) {
  auto bad = [&] { throw DataError("malformed number: '" + s + "'"); };
  if (s.empty()) bad();
  auto slash = s.find('/');
  if (slash != std::string::npos) {
    std::int64_t n = 0, d = 0;
    try {
      n = std::stoll(s.substr(0, slash));
      d = std::stoll(s.substr(slash + 1));
    } catch (...) {
      bad();
    }
    if (d == 0) bad();
    return Rational(n, d);
  }
  bool neg = false;
  std::size_t i = 0;
  if (s[i] == '-' || s[i] == '+') {
    neg = s[i] == '-';
    ++i;
  }
  std::int64_t num = 0, den = 1;
  bool saw_digit = false, saw_dot = false;
  for (; i < s.size(); ++i) {
    char c = s[i];
    if (c == '.') {
      if (saw_dot) bad();
      saw_dot = true;
    } else if (c >= '0' && c <= '9') {
      saw_digit = true;
      if (num > (INT64_MAX - 9) / 10) throw NumericalError("number too long: " + s);
      num = num * 10 + (c - '0');
      if (saw_dot) {
        if (den > INT64_MAX / 10) throw NumericalError("number too long: " + s);
        den *= 10;
      }
    } else {
      bad();
    }
  }
  if (!saw_digit) bad();
  return Rational(neg ? -num : num, den);
}

}  // namespace pcfglab
