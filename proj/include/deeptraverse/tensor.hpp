#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dt {

using Index = std::int64_t;

// Extents of a dense row-major tensor. Activations use N x C x H x W.
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<Index> dims);
    explicit Shape(std::vector<Index> dims);

    std::size_t rank() const { return dims_.size(); }
    Index operator[](std::size_t axis) const { return dims_[axis]; }
    Index numel() const;
    const std::vector<Index>& dims() const { return dims_; }

    bool operator==(const Shape& other) const = default;

    std::string str() const;

private:
    std::vector<Index> dims_;
};

// 64-byte aligned allocator whose value-less construct() leaves doubles
// uninitialized, so buffers that a kernel overwrites completely skip the zero
// fill. The fixed alignment matters for reproducibility: vectorized
// reductions peel a prefix that depends on the address, so an unaligned
// buffer could round differently from one run to the next.
template <class T>
struct DefaultInitAllocator : std::allocator<T> {
    static constexpr std::align_val_t kAlignment{64};

    template <class U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    using std::allocator<T>::allocator;

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }
    template <class U>
    void construct(U* p) noexcept {
        ::new (static_cast<void*>(p)) U;
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using Buffer = std::vector<double, DefaultInitAllocator<double>>;

// Dense tensor of 64-bit reals. Value type: copies are deep, moves are cheap.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::span<const double> data);

    // Contents are unspecified; the caller must write every element.
    static Tensor uninitialized(Shape shape);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

    const Shape& shape() const { return shape_; }
    Index numel() const { return static_cast<Index>(data_.size()); }
    Index dim(std::size_t axis) const { return shape_[axis]; }
    std::size_t rank() const { return shape_.rank(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

    // 4-D accessors (N, C, H, W).
    double& at(Index n, Index c, Index h, Index w);
    double at(Index n, Index c, Index h, Index w) const;

    double item() const;

    // Reinterpret the extents; element count must match.
    Tensor reshaped(Shape shape) const&;
    Tensor reshaped(Shape shape) &&;

    bool all_finite() const;

private:
    Shape shape_;
    Buffer data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

// Throws ConfigError with `what` in the message when the shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);
// Throws ConfigError unless x is rank 4.
void require_nchw(const Tensor& x, const char* what);

}  // namespace dt
