#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <exception>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace im {

enum class ErrKind : uint8_t { config, shape, numeric, io, usage };

class Error : public std::runtime_error {
 public:
  Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrKind kind() const { return kind_; }

 private:
  ErrKind kind_;
};

[[noreturn]] inline void fail(ErrKind kind, const std::string& msg) { throw Error(kind, msg); }

// 32-bit is the working precision; 64-bit is the verification mode.
enum class DType : uint8_t { f32 = 0, f64 = 1 };

inline size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

// Dense rank-1..4 extents, batch-channel-height-width order for rank 4.
struct Shape {
  std::array<int64_t, 4> d{1, 1, 1, 1};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) {
    if (dims.size() < 1 || dims.size() > 4) fail(ErrKind::shape, "shape rank must be 1..4");
    rank = static_cast<int>(dims.size());
    int i = 0;
    for (int64_t v : dims) d[i++] = v;
  }

  int64_t numel() const {
    int64_t n = 1;
    for (int i = 0; i < rank; ++i) n *= d[i];
    return n;
  }
  int64_t operator[](int i) const { return d[i]; }
  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (d[i] != o.d[i]) return false;
    return true;
  }
  std::string str() const;
  void validate() const {
    if (rank < 1 || rank > 4) fail(ErrKind::shape, "shape rank must be 1..4, got " + std::to_string(rank));
    for (int i = 0; i < rank; ++i)
      if (d[i] < 1) fail(ErrKind::shape, "all extents must be >= 1, got " + str());
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s, DType dt = DType::f32) {
    s.validate();
    Tensor t;
    t.shape_ = s;
    t.dtype_ = dt;
    t.buf_.assign(static_cast<size_t>(s.numel()) * dtype_size(dt), std::byte{0});
    return t;
  }
  static Tensor full(Shape s, double v, DType dt = DType::f32) {
    Tensor t = zeros(s, dt);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, v);
    return t;
  }
  static Tensor from(Shape s, std::span<const float> vals) {
    Tensor t = zeros(s, DType::f32);
    if (static_cast<int64_t>(vals.size()) != s.numel())
      fail(ErrKind::shape, "data length " + std::to_string(vals.size()) + " != numel of " + s.str());
    std::memcpy(t.buf_.data(), vals.data(), vals.size() * sizeof(float));
    return t;
  }
  static Tensor from(Shape s, std::span<const double> vals) {
    Tensor t = zeros(s, DType::f64);
    if (static_cast<int64_t>(vals.size()) != s.numel())
      fail(ErrKind::shape, "data length " + std::to_string(vals.size()) + " != numel of " + s.str());
    std::memcpy(t.buf_.data(), vals.data(), vals.size() * sizeof(double));
    return t;
  }

  const Shape& shape() const { return shape_; }
  DType dtype() const { return dtype_; }
  int rank() const { return shape_.rank; }
  int64_t dim(int i) const { return shape_[i]; }
  int64_t numel() const { return shape_.numel(); }
  bool defined() const { return shape_.rank > 0; }

  template <class T>
  std::span<T> data() {
    return {reinterpret_cast<T*>(buf_.data()), static_cast<size_t>(numel())};
  }
  template <class T>
  std::span<const T> data() const {
    return {reinterpret_cast<const T*>(buf_.data()), static_cast<size_t>(numel())};
  }
  std::byte* raw() { return buf_.data(); }
  const std::byte* raw() const { return buf_.data(); }

  double at(int64_t i) const {
    return dtype_ == DType::f32 ? static_cast<double>(data<float>()[i]) : data<double>()[i];
  }
  void set(int64_t i, double v) {
    if (dtype_ == DType::f32)
      data<float>()[i] = static_cast<float>(v);
    else
      data<double>()[i] = v;
  }

  // NCHW offset for rank-4 tensors.
  int64_t idx4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Tensor to(DType dt) const {
    if (dt == dtype_) return *this;
    Tensor t = zeros(shape_, dt);
    for (int64_t i = 0; i < numel(); ++i) t.set(i, at(i));
    return t;
  }
  Tensor reshaped(Shape s) const {
    s.validate();
    if (s.numel() != numel()) fail(ErrKind::shape, "reshape " + shape_.str() + " -> " + s.str() + " changes element count");
    Tensor t = *this;
    t.shape_ = s;
    return t;
  }

  bool same_bits(const Tensor& o) const {
    return shape_ == o.shape_ && dtype_ == o.dtype_ && buf_ == o.buf_;
  }

 private:
  Shape shape_;
  DType dtype_ = DType::f32;
  std::vector<std::byte> buf_;
};

enum class Grouping : uint8_t { depthwise, dense };

struct Conv2dSpec {
  int stride_h = 1, stride_w = 1;
  int pad_h = 0, pad_w = 0;
  Grouping grouping = Grouping::dense;
};

// Weights are [Cout, Cin, kH, kW] for dense, [C, 1, kH, kW] for depthwise.
struct ConvKernel {
  Tensor weights;
  std::optional<Tensor> bias;
  Conv2dSpec spec;
};

inline int64_t conv_out_extent(int64_t in, int pad, int64_t k, int stride) {
  return (in + 2 * pad - k) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& weights, const Tensor* bias, const Conv2dSpec& spec);
Tensor conv2d(const Tensor& x, const ConvKernel& k);
Tensor pointwise_conv(const Tensor& x, const ConvKernel& k);

std::vector<int64_t> split_sizes(int64_t channels, std::span<const double> ratios);
std::vector<Tensor> split_channels(const Tensor& x, std::span<const double> ratios);
Tensor concat_channels(std::span<const Tensor> parts);

// Normalizes across the channel axis at every other-axis site; gamma/beta are length C.
// When save_xhat/save_invstd are given, the normalized values and 1/std per site are
// written for reuse by the backward pass.
Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6,
                           Tensor* save_xhat = nullptr, Tensor* save_invstd = nullptr);

Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);                                   // [N,C,H,W] -> [N,C]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias);       // x [N,in], w [out,in]
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits = nullptr);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

double gelu_scalar(double x);
double dgelu_scalar(double x);
double silu_scalar(double x);
double dsilu_scalar(double x);
double softplus_scalar(double x);

// Effective thread cap from IM_THREADS (default 1, keeps runs bit-reproducible).
int thread_budget();

// Strided batch split; results are bit-identical for every thread count
// because each index writes disjoint output.
template <class F>
void parallel_for(int64_t n, F f) {
  const int64_t budget = std::min<int64_t>(thread_budget(), n);
  if (budget <= 1) {
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(budget);
  std::exception_ptr err;
  std::mutex err_mu;
  for (int64_t k = 0; k < budget; ++k)
    workers.emplace_back([&, k] {
      try {
        for (int64_t i = k; i < n; i += budget) f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  for (auto& w : workers) w.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace im
