#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tacq/errors.hpp"

namespace tacq {

/// Dense row-major tensor of 64-bit floats. The axis convention used across
/// the project is (batch, channel, height, width); lower-rank tensors drop
/// leading axes. Tensors are plain values: operations never mutate their
/// arguments and results are safe to share across threads.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s);
    Tensor(std::vector<size_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<size_t> s, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    size_t numel() const { return data.size(); }
    size_t rank() const { return shape.size(); }
    size_t dim(size_t i) const { return shape.at(i); }

    double& operator[](size_t i) { return data[i]; }
    double operator[](size_t i) const { return data[i]; }

    // (b,c,h,w) accessor for rank-4 tensors; no bounds checks beyond debug.
    double& at4(size_t b, size_t c, size_t h, size_t w);
    double at4(size_t b, size_t c, size_t h, size_t w) const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
};

std::string shape_str(const std::vector<size_t>& shape);
size_t shape_numel(const std::vector<size_t>& shape);

enum class EwOp { add, sub, mul, div, scale, abs, square, sqrt };
enum class ReduceOp { sum, mean, max, min };

// Pointwise arithmetic. Shapes must match exactly (only scalar broadcast is
// supported, via the scalar overloads). div follows IEEE semantics; the
// caller owns any zero-denominator policy.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor scale(const Tensor& a, double s);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

// Enum-dispatched forms of the above (binding / generic surface).
Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(EwOp op, const Tensor& a, double b);

/// Reduce over the given axes; reduced dimensions are removed from the
/// result shape (a full reduction yields shape {1}). Sum over an empty
/// tensor is 0; max/min over an empty tensor is an error.
Tensor reduce(ReduceOp op, const Tensor& a, const std::vector<size_t>& axes);

// Full reductions to a plain double.
double sum(const Tensor& a);
double mean(const Tensor& a);
double max(const Tensor& a);
double min(const Tensor& a);

/// Standard rank-2 matrix product.
Tensor matmul(const Tensor& a, const Tensor& b);

}  // namespace tacq
