#include "qdpd/tensor.hpp"

#include <cmath>
#include <sstream>

#include "qdpd/errors.hpp"

namespace qdpd {

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor Tensor::full(std::vector<int> s, float v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<float> values) {
    if (shape_numel(s) != static_cast<int64_t>(values.size()))
        throw DimensionError("Tensor::from: " + shape_str(s) + " does not hold " +
                             std::to_string(values.size()) + " values");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
}

Tensor Tensor::randn(std::vector<int> s, Rng& rng, double scale) {
    Tensor t(std::move(s));
    rng.fill_normal(t.data, scale);
    return t;
}

void Tensor::fill(float v) {
    for (float& x : data) x = v;
}

bool Tensor::all_finite() const {
    for (float x : data)
        if (!std::isfinite(x)) return false;
    return true;
}

double Tensor::sum() const {
    double s = 0.0;
    for (float x : data) s += x;
    return s;
}

double Tensor::sq_norm() const {
    double s = 0.0;
    for (float x : data) s += static_cast<double>(x) * x;
    return s;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                             " vs " + shape_str(b.shape));
}

}  // namespace qdpd
