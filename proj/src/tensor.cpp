#include "sora/tensor.hpp"

#include "sora/errors.hpp"

#include <cmath>
#include <sstream>

namespace sora {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {
    for (std::size_t e : shape_) {
        if (e == 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str());
    }
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    for (std::size_t e : shape_) {
        if (e == 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str());
    }
    if (data_.size() != shape_product(shape_)) {
        std::ostringstream os;
        os << "tensor data size " << data_.size() << " does not match shape " << shape_str();
        throw DimensionError(os.str());
    }
}

Tensor Tensor::scalar(double v) {
    Tensor t;
    t.data_[0] = v;
    return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("axis out of range for shape " + shape_str());
    }
    return shape_[axis];
}

double Tensor::value() const {
    if (data_.size() != 1) {
        throw DimensionError("value() needs a single-element tensor, got shape " + shape_str());
    }
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

void ensure_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) {
        throw NumericError("non-finite values in " + what);
    }
}

} // namespace sora
