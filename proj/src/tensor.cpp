#include "deeptraverse/tensor.hpp"

#include <limits>

#include <cmath>
#include <cstring>
#include <sstream>

#include "deeptraverse/errors.hpp"

namespace dt {

Shape::Shape(std::initializer_list<Index> dims) : Shape(std::vector<Index>(dims)) {}

Shape::Shape(std::vector<Index> dims) : dims_(std::move(dims)) {
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (dims_[i] < 1) {
            throw ConfigError("shape " + str() + ": extent " + std::to_string(i) +
                              " must be >= 1");
        }
    }
}

Index Shape::numel() const {
    Index n = 1;
    for (Index d : dims_) n *= d;
    return n;
}

std::string Shape::str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << 'x';
        os << dims_[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_.numel()), fill) {}

Tensor::Tensor(Shape shape, std::span<const double> data)
    : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (static_cast<Index>(data_.size()) != shape_.numel()) {
        throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_.str());
    }
}

Tensor Tensor::uninitialized(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_.resize(static_cast<std::size_t>(t.shape_.numel()));
#ifdef DT_POISON
    for (double& v : t.data_) v = std::numeric_limits<double>::quiet_NaN();
#endif
    return t;
}

double& Tensor::at(Index n, Index c, Index h, Index w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

double Tensor::at(Index n, Index c, Index h, Index w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw InputError("item() on tensor of shape " + shape_.str());
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
    Tensor copy = *this;
    return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
    if (shape.numel() != shape_.numel()) {
        throw ConfigError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    shape_ = std::move(shape);
    return std::move(*this);
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.numel()) * sizeof(double)) == 0;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                          b.shape().str());
    }
}

void require_nchw(const Tensor& x, const char* what) {
    if (x.rank() != 4) {
        throw ConfigError(std::string(what) + ": expected N x C x H x W input, got " + x.shape().str());
    }
}

}  // namespace dt
