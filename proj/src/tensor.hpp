#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mq {

using Shape = std::vector<int64_t>;

// Dense row-major n-d array. Storage is double; ops can round results
// through float to emulate 32-bit training precision (see Precision).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);
    Tensor(Shape shape, double fill);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const;

    Tensor reshaped(Shape new_shape) const;

private:
    Shape shape_;
    std::vector<double> data_;
};

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class Precision { f32, f64 };

// Rounds every element through float when prec == f32.
void apply_precision(Tensor& t, Precision prec);

} // namespace mq
