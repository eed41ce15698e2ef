#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qdpd/rng.hpp"

namespace qdpd {

int64_t shape_numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

// Dense row-major float32 tensor. Gradients live next to values in graph
// nodes and Param slots, always with the same shape as the data they belong
// to. Reductions over tensor data accumulate in double.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(shape_numel(shape), 0.0f) {}

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, float v);
    static Tensor from(std::vector<int> s, std::vector<float> values);
    static Tensor randn(std::vector<int> s, Rng& rng, double scale = 1.0);

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    float& operator()(int i) { return data[static_cast<size_t>(i)]; }
    float operator()(int i) const { return data[static_cast<size_t>(i)]; }
    float& operator()(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    float operator()(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    float& operator()(int i, int j, int k) {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    float operator()(int i, int j, int k) const {
        return data[(static_cast<size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    float& operator()(int i, int j, int k, int l) {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    float operator()(int i, int j, int k, int l) const {
        return data[((static_cast<size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    void fill(float v);
    bool all_finite() const;
    double sum() const;      // double accumulation
    double sq_norm() const;  // double accumulation
};

// Throws DimensionError unless shapes match.
void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace qdpd
