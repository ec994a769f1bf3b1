#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dllab {

// Base error for everything raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user-supplied configuration (CLI maps this to exit code 2).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf escaped from a numeric routine.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

// Corrupt or unreadable binary/CSV artifact.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Shortest round-trip decimal form, locale independent.
inline std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string fmt_int(int64_t v) {
  char buf[24];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Exact ratio of epochs, used for checkpoint cadence so grid alignment
// can be checked without floating-point slop.
struct Fraction {
  int64_t num = 1;
  int64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  void reduce() {
    if (den < 0) { num = -num; den = -den; }
    int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) { num /= g; den /= g; }
  }

  std::string str() const {
    return den == 1 ? fmt_int(num) : fmt_int(num) + "/" + fmt_int(den);
  }

  static Fraction parse(const std::string& text);
};

inline Fraction Fraction::parse(const std::string& text) {
  auto bad = [&] { throw ConfigError("cannot parse fraction: '" + text + "'"); };
  Fraction f;
  auto slash = text.find('/');
  if (slash != std::string::npos) {
    std::string a = text.substr(0, slash), b = text.substr(slash + 1);
    auto ra = std::from_chars(a.data(), a.data() + a.size(), f.num);
    auto rb = std::from_chars(b.data(), b.data() + b.size(), f.den);
    if (ra.ec != std::errc{} || ra.ptr != a.data() + a.size() ||
        rb.ec != std::errc{} || rb.ptr != b.data() + b.size() || f.den == 0) {
      bad();
    }
  } else if (text.find('.') != std::string::npos) {
    auto dot = text.find('.');
    std::string ip = text.substr(0, dot), fp = text.substr(dot + 1);
    if (fp.empty() || fp.size() > 9) bad();
    int64_t whole = 0, frac = 0;
    if (!ip.empty()) {
      auto r = std::from_chars(ip.data(), ip.data() + ip.size(), whole);
      if (r.ec != std::errc{} || r.ptr != ip.data() + ip.size()) bad();
    }
    auto r = std::from_chars(fp.data(), fp.data() + fp.size(), frac);
    if (r.ec != std::errc{} || r.ptr != fp.data() + fp.size()) bad();
    int64_t scale = 1;
    for (size_t i = 0; i < fp.size(); ++i) scale *= 10;
    f.num = whole * scale + (whole < 0 ? -frac : frac);
    f.den = scale;
  } else {
    auto r = std::from_chars(text.data(), text.data() + text.size(), f.num);
    if (r.ec != std::errc{} || r.ptr != text.data() + text.size()) bad();
    f.den = 1;
  }
  f.reduce();
  return f;
}

}  // namespace dllab
