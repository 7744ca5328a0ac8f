#pragma once

#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <string>

#include "denseplan/alloctrace.hpp"
#include "denseplan/errors.hpp"

namespace denseplan {

// Dense 4-D shape, batch-outermost layout (N, C, H, W).
struct Shape4 {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  friend bool operator==(const Shape4&, const Shape4&) = default;

  bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }

  // Element count with overflow checking.
  std::int64_t elems() const {
    if (!valid()) {
      throw ShapeError("invalid shape (" + str() + ")");
    }
    unsigned __int128 p = static_cast<unsigned __int128>(n);
    p *= static_cast<unsigned __int128>(c);
    p *= static_cast<unsigned __int128>(h);
    p *= static_cast<unsigned __int128>(w);
    if (p > static_cast<unsigned __int128>(
                 std::numeric_limits<std::int64_t>::max() / 16)) {
      throw SizeOverflowError("shape " + str() + " overflows element count");
    }
    return static_cast<std::int64_t>(p);
  }

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" +
           std::to_string(h) + "x" + std::to_string(w);
  }
};

// Dense 4-D tensor. Storage is reference counted; channel_view produces a
// non-owning alias over a channel range. Within one sample the layout is
// always contiguous channel-major, so a view differs from a contiguous
// tensor only by its inter-sample stride.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  // Zero-initialized contiguous tensor; bytes are charged to `arena` of
  // `tracker` and released when the last reference drops. The tracker must
  // outlive the tensor.
  static Tensor alloc(const Shape4& shape, ArenaTag arena,
                      MemoryTracker& tracker) {
    const std::int64_t count = shape.elems();
    const std::int64_t bytes = count * static_cast<std::int64_t>(sizeof(T));
    tracker.record_alloc(arena, bytes);
    MemoryTracker* tr = &tracker;
    std::shared_ptr<T[]> storage(new T[static_cast<std::size_t>(count)](),
                                 [tr, arena, bytes](T* p) {
                                   tr->record_free(arena, bytes);
                                   delete[] p;
                                 });
    Tensor t;
    t.shape_ = shape;
    t.storage_ = storage;
    t.ptr_ = storage.get();
    t.sample_stride_ = shape.c * shape.h * shape.w;
    t.contiguous_ = true;
    t.arena_ = arena;
    return t;
  }

  // Wraps a sub-range of pooled storage as a contiguous tensor. No bytes
  // are accounted; `keepalive` pins the backing pool allocation.
  static Tensor wrap(std::shared_ptr<T[]> keepalive, T* base,
                     const Shape4& shape, ArenaTag arena) {
    Tensor t;
    t.shape_ = shape;
    t.storage_ = std::move(keepalive);
    t.ptr_ = base;
    t.sample_stride_ = shape.c * shape.h * shape.w;
    t.contiguous_ = true;
    t.arena_ = arena;
    (void)shape.elems();
    return t;
  }

  bool valid() const { return ptr_ != nullptr; }
  const Shape4& shape() const { return shape_; }
  bool contiguous() const { return contiguous_; }
  ArenaTag arena() const { return arena_; }
  std::int64_t sample_stride() const { return sample_stride_; }
  std::int64_t elems() const { return shape_.elems(); }

  T& at(std::int64_t i, std::int64_t c, std::int64_t y, std::int64_t x) {
    return ptr_[i * sample_stride_ + (c * shape_.h + y) * shape_.w + x];
  }
  const T& at(std::int64_t i, std::int64_t c, std::int64_t y,
              std::int64_t x) const {
    return ptr_[i * sample_stride_ + (c * shape_.h + y) * shape_.w + x];
  }

  // Start of sample i; the sample's c*h*w elements are consecutive.
  T* sample_ptr(std::int64_t i) { return ptr_ + i * sample_stride_; }
  const T* sample_ptr(std::int64_t i) const { return ptr_ + i * sample_stride_; }

  // Raw pointer to the full contiguous run. Only meaningful when contiguous.
  T* data() {
    if (!contiguous_) throw ShapeError("data() on non-contiguous tensor");
    return ptr_;
  }
  const T* data() const {
    if (!contiguous_) throw ShapeError("data() on non-contiguous tensor");
    return ptr_;
  }

  // Zero-copy alias over channels [c_start, c_start+c_len). The arena
  // counters are untouched.
  Tensor channel_view(std::int64_t c_start, std::int64_t c_len) const {
    if (!contiguous_) {
      throw ShapeError("channel_view requires a contiguous tensor");
    }
    if (c_start < 0 || c_len < 1 || c_start + c_len > shape_.c) {
      throw BoundsError("channel slice [" + std::to_string(c_start) + ", " +
                        std::to_string(c_start + c_len) + ") out of range for " +
                        shape_.str());
    }
    Tensor v;
    v.shape_ = Shape4{shape_.n, c_len, shape_.h, shape_.w};
    v.storage_ = storage_;
    v.ptr_ = ptr_ + c_start * shape_.h * shape_.w;
    v.contiguous_ = (c_len == shape_.c) || (shape_.n == 1);
    v.sample_stride_ =
        v.contiguous_ && shape_.n == 1 && c_len != shape_.c
            ? c_len * shape_.h * shape_.w
            : sample_stride_;
    v.arena_ = arena_;
    return v;
  }

  void fill(T value) {
    const std::int64_t per_sample = shape_.c * shape_.h * shape_.w;
    for (std::int64_t i = 0; i < shape_.n; ++i) {
      T* p = sample_ptr(i);
      for (std::int64_t j = 0; j < per_sample; ++j) p[j] = value;
    }
  }

  std::shared_ptr<T[]> storage() const { return storage_; }

 private:
  Shape4 shape_{};
  std::shared_ptr<T[]> storage_;
  T* ptr_ = nullptr;
  std::int64_t sample_stride_ = 0;
  bool contiguous_ = false;
  ArenaTag arena_ = ArenaTag::Scratch;
};

// Strided copy, no allocation. Shapes must match exactly.
template <typename T>
void copy_into(const Tensor<T>& src, Tensor<T>& dst) {
  if (src.shape() != dst.shape()) {
    throw ShapeError("copy_into shape mismatch: " + src.shape().str() +
                     " vs " + dst.shape().str());
  }
  const std::int64_t per_sample =
      src.shape().c * src.shape().h * src.shape().w;
  for (std::int64_t i = 0; i < src.shape().n; ++i) {
    std::memcpy(dst.sample_ptr(i), src.sample_ptr(i),
                static_cast<std::size_t>(per_sample) * sizeof(T));
  }
}

}  // namespace denseplan
