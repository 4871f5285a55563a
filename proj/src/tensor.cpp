#include "tacq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace tacq {

std::string shape_str(const std::vector<size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

Tensor::Tensor(std::vector<size_t> s) : shape(std::move(s)) {
    for (size_t d : shape) {
        if (d == 0) throw ConfigError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    data.assign(shape_numel(shape), 0.0);
}

Tensor::Tensor(std::vector<size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size()) {
        throw ConfigError("tensor data length " + std::to_string(data.size()) +
                          " does not match shape " + shape_str(shape));
    }
}

Tensor Tensor::full(std::vector<size_t> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

double& Tensor::at4(size_t b, size_t c, size_t h, size_t w) {
    const size_t C = shape[1], H = shape[2], W = shape[3];
    return data[((b * C + c) * H + h) * W + w];
}

double Tensor::at4(size_t b, size_t c, size_t h, size_t w) const {
    const size_t C = shape[1], H = shape[2], W = shape[3];
    return data[((b * C + c) * H + h) * W + w];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                          " vs " + shape_str(b.shape));
    }
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f) {
    check_same_shape(a, b, name);
    Tensor r = a;
    for (size_t i = 0; i < r.data.size(); ++i) r.data[i] = f(a.data[i], b.data[i]);
    return r;
}

template <class F>
Tensor unary(const Tensor& a, F f) {
    Tensor r = a;
    for (double& v : r.data) v = f(v);
    return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, "add", [](double x, double y) { return x + y; }); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, "sub", [](double x, double y) { return x - y; }); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, "mul", [](double x, double y) { return x * y; }); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, "div", [](double x, double y) { return x / y; }); }

Tensor add(const Tensor& a, double s) { return unary(a, [s](double x) { return x + s; }); }
Tensor scale(const Tensor& a, double s) { return unary(a, [s](double x) { return x * s; }); }
Tensor abs(const Tensor& a) { return unary(a, [](double x) { return std::fabs(x); }); }
Tensor square(const Tensor& a) { return unary(a, [](double x) { return x * x; }); }
Tensor sqrt(const Tensor& a) { return unary(a, [](double x) { return std::sqrt(x); }); }

Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
    switch (op) {
        case EwOp::add: return add(a, b);
        case EwOp::sub: return sub(a, b);
        case EwOp::mul: return mul(a, b);
        case EwOp::div: return div(a, b);
        default: throw ConfigError("elementwise: op requires a scalar operand");
    }
}

Tensor elementwise(EwOp op, const Tensor& a, double b) {
    switch (op) {
        case EwOp::add: return add(a, b);
        case EwOp::sub: return add(a, -b);
        case EwOp::scale: return scale(a, b);
        case EwOp::mul: return scale(a, b);
        case EwOp::div: return scale(a, 1.0 / b);
        case EwOp::abs: return abs(a);
        case EwOp::square: return square(a);
        case EwOp::sqrt: return sqrt(a);
    }
    throw ConfigError("elementwise: unknown op");
}

Tensor reduce(ReduceOp op, const Tensor& a, const std::vector<size_t>& axes) {
    std::vector<bool> reduced(a.rank(), false);
    for (size_t ax : axes) {
        if (ax >= a.rank())
            throw ConfigError("reduce: axis " + std::to_string(ax) + " invalid for shape " + shape_str(a.shape));
        reduced[ax] = true;
    }
    std::vector<size_t> out_shape;
    for (size_t i = 0; i < a.rank(); ++i)
        if (!reduced[i]) out_shape.push_back(a.shape[i]);
    if (out_shape.empty()) out_shape.push_back(1);

    // Map each input element to its output slot by dropping reduced axes.
    std::vector<size_t> in_strides(a.rank(), 1);
    for (size_t i = a.rank(); i-- > 1;) in_strides[i - 1] = in_strides[i] * a.shape[i];
    std::vector<size_t> out_strides(out_shape.size(), 1);
    for (size_t i = out_shape.size(); i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];

    const bool is_minmax = (op == ReduceOp::max || op == ReduceOp::min);
    if (is_minmax && a.numel() == 0) throw ConfigError("reduce: max/min of empty tensor");

    const double init = (op == ReduceOp::max) ? -std::numeric_limits<double>::infinity()
                        : (op == ReduceOp::min) ? std::numeric_limits<double>::infinity()
                                                : 0.0;
    Tensor out = Tensor::full(out_shape, init);

    size_t count_per_slot = 1;
    for (size_t i = 0; i < a.rank(); ++i)
        if (reduced[i]) count_per_slot *= a.shape[i];

    std::vector<size_t> idx(a.rank(), 0);
    for (size_t flat = 0; flat < a.numel(); ++flat) {
        size_t out_flat = 0, oi = 0;
        for (size_t i = 0; i < a.rank(); ++i) {
            if (!reduced[i]) out_flat += idx[i] * out_strides[oi++];
        }
        double v = a.data[flat];
        double& slot = out.data[out_flat];
        switch (op) {
            case ReduceOp::sum:
            case ReduceOp::mean: slot += v; break;
            case ReduceOp::max: slot = std::max(slot, v); break;
            case ReduceOp::min: slot = std::min(slot, v); break;
        }
        for (size_t i = a.rank(); i-- > 0;) {
            if (++idx[i] < a.shape[i]) break;
            idx[i] = 0;
        }
    }
    if (op == ReduceOp::mean) {
        for (double& v : out.data) v /= static_cast<double>(count_per_slot);
    }
    return out;
}

namespace {
std::vector<size_t> all_axes(const Tensor& a) {
    std::vector<size_t> axes(a.rank());
    for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return axes;
}
}  // namespace

double sum(const Tensor& a) { return reduce(ReduceOp::sum, a, all_axes(a)).data[0]; }
double mean(const Tensor& a) { return reduce(ReduceOp::mean, a, all_axes(a)).data[0]; }
double max(const Tensor& a) { return reduce(ReduceOp::max, a, all_axes(a)).data[0]; }
double min(const Tensor& a) { return reduce(ReduceOp::min, a, all_axes(a)).data[0]; }

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ConfigError("matmul: expected rank-2 operands, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
    if (a.shape[1] != b.shape[0])
        throw ConfigError("matmul: inner dimensions disagree, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t n = a.shape[0], k = a.shape[1], m = b.shape[1];
    Tensor out({n, m});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* po = out.data.data();
    for (size_t i = 0; i < n; ++i) {
        const double* arow = pa + i * k;
        double* orow = po + i * m;
        for (size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = pb + kk * m;
            for (size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

}  // namespace tacq
