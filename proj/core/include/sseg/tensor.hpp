#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace sseg {

/// Dense row-major tensor of doubles with value semantics.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> shape);
    Tensor(std::vector<std::int64_t> shape, double fill);

    static Tensor scalar(double v);
    static Tensor from(std::vector<std::int64_t> shape, std::vector<double> data);

    const std::vector<std::int64_t>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    bool defined() const { return !shape_.empty() || !data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // 2-D and 3-D element access, row-major.
    double& at(std::int64_t i, std::int64_t j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    double at(std::int64_t i, std::int64_t j) const { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
    double& at(std::int64_t c, std::int64_t y, std::int64_t x) {
        return data_[static_cast<std::size_t>((c * shape_[1] + y) * shape_[2] + x)];
    }
    double at(std::int64_t c, std::int64_t y, std::int64_t x) const {
        return data_[static_cast<std::size_t>((c * shape_[1] + y) * shape_[2] + x)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    Tensor reshaped(std::vector<std::int64_t> shape) const;
    void fill(double v);
    bool all_finite() const;
    std::string shape_str() const;

private:
    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);

}  // namespace sseg
