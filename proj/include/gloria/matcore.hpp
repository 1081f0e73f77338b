#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gloria {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vector col(std::size_t c) const;

  Matrix transposed() const;
  std::string shape_str() const;
  bool all_finite() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Counter-based generator: draw n is splitmix64(seed + n * 0x9E3779B97F4A7C15).
// The sequence depends only on the seed, so it is identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller.
  double normal();
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  // Independent generator for a named sub-stream.
  Rng fork(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::optional<double> spare_normal_;
};

std::uint64_t splitmix64(std::uint64_t x);

Matrix matmul(const Matrix& a, const Matrix& b);
// a^T * b without forming the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a * b^T without forming the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
// a^T * x
Vector matvec_t(const Matrix& a, std::span<const double> x);
// m += alpha * u v^T
void add_outer(Matrix& m, std::span<const double> u, std::span<const double> v, double alpha = 1.0);

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);

double frobenius_norm(const Matrix& a);
double frobenius_sq(const Matrix& a);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

Matrix xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng);

// Exact erf form by default. Flip to use 0.5x(1+tanh(sqrt(2/pi)(x+0.044715x^3))).
inline constexpr bool kGeluTanhApprox = false;

double softplus(double x);
double sigmoid(double x);
double gelu(double x);
double gelu_grad(double x);

using ScalarFn = std::function<double(std::span<const double>)>;

// Central finite differences of f at x with step h.
Vector central_diff(const ScalarFn& f, std::span<const double> x, double h = 1e-5);

// ||a - b|| / max(||a||, ||b||); zero when both norms are below `floor`.
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-10);

// Text format: "rows cols" header, then one row per line, 17 significant digits.
void write_matrix(std::ostream& os, const Matrix& m);
Matrix read_matrix(std::istream& is);
void save_matrix(const std::string& path, const Matrix& m);
Matrix load_matrix(const std::string& path);

// Full-range decimal parse; throws InputError on trailing garbage.
double parse_real(const std::string& tok);

// "%.17g" formatting shared by every text artifact.
std::string fmt_full(double v);
// Fixed six decimals.
std::string fmt_fixed6(double v);

}  // namespace gloria
