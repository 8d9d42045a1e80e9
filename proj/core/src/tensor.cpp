#include "sseg/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sseg {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw std::invalid_argument("negative tensor dimension");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<std::int64_t> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<std::int64_t> shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor Tensor::scalar(double v) {
    Tensor t({1});
    t.data_[0] = v;
    return t;
}

Tensor Tensor::from(std::vector<std::int64_t> shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument("Tensor::from: shape/data size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> shape) const {
    if (shape_numel(shape) != size())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str());
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
}

void Tensor::fill(double v) {
    for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
    for (double x : data_)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << "]";
    return os.str();
}

}  // namespace sseg
