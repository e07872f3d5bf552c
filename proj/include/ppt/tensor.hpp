#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ppt/common.hpp"

namespace ppt {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EArr = Eigen::Array<double, Eigen::Dynamic, 1>;

// Dense 64-bit array, rank 1 or 2, row-major. Rank-1 tensors act as a single
// row in matrix contexts.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int64_t> s, double fill = 0.0) : shape(std::move(s)) {
        check(!shape.empty() && shape.size() <= 2, "tensor rank must be 1 or 2");
        for (int64_t d : shape) check(d > 0, "tensor dims must be positive");
        data.assign(static_cast<size_t>(numel()), fill);
    }
    static Tensor scalar(double v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }
    static Tensor row(std::vector<double> v) {
        Tensor t;
        t.shape = {static_cast<int64_t>(v.size())};
        t.data = std::move(v);
        return t;
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }
    int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    int64_t cols() const { return shape.size() == 2 ? shape[1] : shape[0]; }

    double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
    double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Eigen::Map<EMat> mat() { return {data.data(), rows(), cols()}; }
    Eigen::Map<const EMat> mat() const { return {data.data(), rows(), cols()}; }
    Eigen::Map<EArr> arr() { return {data.data(), numel()}; }
    Eigen::Map<const EArr> arr() const { return {data.data(), numel()}; }
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (size_t i = 0; i < t.shape.size(); ++i)
        s += (i ? "x" : "") + std::to_string(t.shape[i]);
    return s + ")";
}

// Ordered name -> tensor map. Iteration order is insertion order; names are
// unique. Used for both parameters and their gradients.
class NamedTensors {
public:
    void add(std::string name, Tensor t) {
        check(index_.find(name) == index_.end(), "duplicate tensor name: " + name);
        index_.emplace(name, entries_.size());
        entries_.emplace_back(std::move(name), std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        check(it != index_.end(), "no tensor named: " + name);
        return entries_[it->second].second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        check(it != index_.end(), "no tensor named: " + name);
        return entries_[it->second].second;
    }

    size_t size() const { return entries_.size(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }

    int64_t num_values() const {
        int64_t n = 0;
        for (const auto& [name, t] : entries_) n += t.numel();
        return n;
    }

    void check_finite(const std::string& what) const {
        for (const auto& [name, t] : entries_)
            check(t.all_finite(), what + " has non-finite values in \"" + name + "\"");
    }

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, size_t> index_;
};

using ParamStore = NamedTensors;
using GradStore = NamedTensors;

// GradStore contract: key set and shapes exactly mirror the source store.
inline void check_mirrors(const NamedTensors& grads, const NamedTensors& params,
                          const std::string& what = "grads") {
    check(grads.size() == params.size(), what + ": entry count mismatch");
    auto g = grads.begin();
    for (const auto& [name, t] : params) {
        check(g->first == name, what + ": name mismatch at \"" + name + "\"");
        check(g->second.shape == t.shape, what + ": shape mismatch at \"" + name + "\"");
        ++g;
    }
}

}  // namespace ppt
