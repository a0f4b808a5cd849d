#pragma once

// Dense row-major float tensor. Storage is 32-bit, reductions accumulate in
// 64-bit. This is the carrier type for everything numeric in the project.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace vf {

/// Thrown when tensor shapes do not satisfy an operation's contract.
/// The message names the offending axis where that is meaningful.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<float> data);

  static Tensor scalar(float v);
  static Tensor full(std::vector<int> shape, float v);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool is_scalar() const { return size() == 1; }
  float scalar_value() const;

  bool all_finite() const;
  double sum() const;  // 64-bit accumulation
  double dot(const Tensor& other) const;
  float max_abs() const;

  void fill(float v);
  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

std::string shape_to_string(const std::vector<int>& shape);

// --- serialization -----------------------------------------------------
// Little-endian binary: magic "VFT1", u8 rank, u32 dims[rank], f32 data[].
// Used by checkpoints and dataset files.

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

// --- learnable parameter ------------------------------------------------

/// A named tensor with a gradient slot of the same shape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0f); }
};

// --- deterministic rng ---------------------------------------------------

/// Seeded rng used everywhere randomness is needed. Same seed, same stream,
/// on any platform (no std distributions, which are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }

  /// Uniform in [lo, hi).
  double uniform(double lo = 0.0, double hi = 1.0) {
    const double u = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
  }
  float uniform_f(float lo, float hi) {
    return static_cast<float>(uniform(lo, hi));
  }

  /// Uniform index in [0, n).
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(eng_() % n);
  }

 private:
  std::mt19937_64 eng_;
};

/// Derives an independent stream from (seed, stream id); splitmix64 finalizer.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace vf
