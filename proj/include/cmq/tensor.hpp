#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmq {

/// Raised for every contract violation in the library (shape mismatches,
/// invalid configs, corrupt files). The message always names the offending
/// quantity.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major block of doubles. Rank 0 is a scalar, rank 1 a vector,
/// rank 2 a matrix whose rows are usually batch entries.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() : shape{}, data(1, 0.0) {}
  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (shape_numel(shape) != data.size())
      throw Error("tensor: shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                  " values, got " + std::to_string(data.size()));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vec(std::initializer_list<double> v) { return Tensor(Shape{v.size()}, std::vector<double>(v)); }
  static Tensor vec(std::vector<double> v) {
    auto n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor(Shape{r, c}, std::move(v)); }

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  /// Matrix view: a vector counts as a single row, a scalar as 1x1.
  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : shape.back(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw Error("tensor: item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }
};

/// 64-bit Mersenne twister with portable draws. The standard distributions
/// are implementation-defined, so uniform reals and integers are derived
/// directly from the raw 64-bit output.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

  std::uint64_t next() { return gen_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n), rejection sampled.
  std::size_t below(std::size_t n) {
    if (n == 0) throw Error("rng: below(0)");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do x = gen_();
    while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }
  bool bernoulli(double p) { return uniform() < p; }

  std::string state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> gen_;
    if (!is) throw Error("rng: malformed state string");
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.gen_ == b.gen_; }

 private:
  std::mt19937_64 gen_;
};

/// Deterministic seed derivation for independent streams (splitmix64).
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace cmq
