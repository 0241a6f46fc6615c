#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <new>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace roictrl {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Allocation accounting. Every Tensor buffer goes through TrackingAllocator so
// the bench can report peak transient bytes per injection path.
// ---------------------------------------------------------------------------
class AllocationStats {
 public:
  static void on_alloc(std::size_t bytes) noexcept {
    const auto now = current().fetch_add(static_cast<std::int64_t>(bytes)) +
                     static_cast<std::int64_t>(bytes);
    auto prev = peak().load();
    while (now > prev && !peak().compare_exchange_weak(prev, now)) {
    }
  }
  static void on_free(std::size_t bytes) noexcept {
    current().fetch_sub(static_cast<std::int64_t>(bytes));
  }
  /// Restarts peak tracking from the current live byte count.
  static void reset_peak() noexcept { peak().store(current().load()); }
  static std::int64_t live_bytes() noexcept { return current().load(); }
  static std::int64_t peak_bytes() noexcept { return peak().load(); }

 private:
  static std::atomic<std::int64_t>& current() noexcept {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
  static std::atomic<std::int64_t>& peak() noexcept {
    static std::atomic<std::int64_t> v{0};
    return v;
  }
};

template <class T>
struct TrackingAllocator {
  using value_type = T;
  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    AllocationStats::on_alloc(n * sizeof(T));
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64}));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    AllocationStats::on_free(n * sizeof(T));
    ::operator delete(p, std::align_val_t{64});
  }
  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

// ---------------------------------------------------------------------------
// Shape: up to five extents, each >= 1.
// ---------------------------------------------------------------------------
class Shape {
 public:
  static constexpr int kMaxRank = 5;

  Shape() = default;
  Shape(std::initializer_list<std::int64_t> extents) {
    if (extents.size() > kMaxRank) throw DimensionError("shape rank exceeds 5");
    for (auto e : extents) push_back(e);
  }
  template <class It>
  Shape(It first, It last) {
    for (; first != last; ++first) push_back(static_cast<std::int64_t>(*first));
  }

  void push_back(std::int64_t e) {
    if (rank_ >= kMaxRank) throw DimensionError("shape rank exceeds 5");
    if (e < 1) throw DimensionError("shape extent must be >= 1, got " + std::to_string(e));
    ext_[rank_++] = e;
  }

  int rank() const noexcept { return rank_; }
  std::int64_t operator[](int i) const { return ext_[static_cast<std::size_t>(normalize(i))]; }
  std::int64_t numel() const noexcept {
    std::int64_t n = rank_ == 0 ? 0 : 1;
    for (int i = 0; i < rank_; ++i) n *= ext_[static_cast<std::size_t>(i)];
    return n;
  }
  /// Product of extents in [first, last).
  std::int64_t span_numel(int first, int last) const {
    std::int64_t n = 1;
    for (int i = first; i < last; ++i) n *= (*this)[i];
    return n;
  }
  int normalize(int axis) const {
    const int a = axis < 0 ? axis + rank_ : axis;
    if (a < 0 || a >= rank_) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for " + str());
    }
    return a;
  }

  bool operator==(const Shape& o) const noexcept {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (ext_[static_cast<std::size_t>(i)] != o.ext_[static_cast<std::size_t>(i)]) return false;
    return true;
  }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << ext_[static_cast<std::size_t>(i)];
    os << ']';
    return os.str();
  }

  auto begin() const noexcept { return ext_.begin(); }
  auto end() const noexcept { return ext_.begin() + rank_; }

 private:
  std::array<std::int64_t, kMaxRank> ext_{};
  int rank_ = 0;
};

// ---------------------------------------------------------------------------
// Tensor: contiguous row-major buffer with value semantics.
// ---------------------------------------------------------------------------
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, TrackingAllocator<T>>;

  /// Empty placeholder (rank 0, no storage). Only valid as a moved-from or
  /// not-yet-computed cache slot.
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_.numel()), fill) {
    require_rank();
  }

  Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
    require_rank();
    if (static_cast<std::int64_t>(values.size()) != shape_.numel()) {
      throw DimensionError("buffer of " + std::to_string(values.size()) +
                           " elements does not fill shape " + shape_.str());
    }
    data_.assign(values.begin(), values.end());
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return shape_.rank(); }
  std::int64_t extent(int axis) const { return shape_[axis]; }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return {data_.data(), data_.size()}; }
  std::span<const T> values() const noexcept { return {data_.data(), data_.size()}; }

  T& operator[](std::int64_t i) noexcept { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const noexcept { return data_[static_cast<std::size_t>(i)]; }

  template <class... I>
  T& at(I... idx) {
    return data_[static_cast<std::size_t>(offset(idx...))];
  }
  template <class... I>
  const T& at(I... idx) const {
    return data_[static_cast<std::size_t>(offset(idx...))];
  }

  template <class... I>
  std::int64_t offset(I... idx) const {
    static_assert(sizeof...(I) <= Shape::kMaxRank);
    if (static_cast<int>(sizeof...(I)) != rank()) {
      throw DimensionError("index arity does not match rank of " + shape_.str());
    }
    const std::array<std::int64_t, sizeof...(I)> ix{static_cast<std::int64_t>(idx)...};
    std::int64_t off = 0;
    for (std::size_t a = 0; a < ix.size(); ++a) off = off * shape_[static_cast<int>(a)] + ix[a];
    return off;
  }

  /// Same buffer, new extents (numel must match).
  Tensor reshaped(Shape s) const& {
    Tensor out = *this;
    out.reshape_inplace(std::move(s));
    return out;
  }
  Tensor reshaped(Shape s) && {
    reshape_inplace(std::move(s));
    return std::move(*this);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>((*this)[i]);
    return out;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  void require_rank() const {
    if (shape_.rank() == 0) throw DimensionError("rank-0 tensors are not allowed; use shape [1]");
  }
  void reshape_inplace(Shape s) {
    if (s.numel() != shape_.numel()) {
      throw DimensionError("cannot reshape " + shape_.str() + " to " + s.str());
    }
    shape_ = std::move(s);
  }

  Shape shape_;
  Storage data_;
};

using Mask = Tensor<std::uint8_t>;

/// Largest-magnitude finite negative logit; stands in for -inf so masked
/// entries never produce NaN.
template <class T>
constexpr T masked_logit() noexcept {
  return std::numeric_limits<T>::lowest();
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

}  // namespace roictrl
