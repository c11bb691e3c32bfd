#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "wsf/rng.hpp"

namespace wsf {

/// Dense row-major float32 tensor. Rank 1 and 2 cover everything in this
/// library; a rank-1 tensor behaves as a single row under broadcasting.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(size_t(numel_of(shape_)), 0.0f);
    }

    Tensor(std::vector<int> shape, std::vector<float> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (int64_t(data_.size()) != numel_of(shape_))
            throw std::invalid_argument("Tensor: data size does not match shape " + shape_str());
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, float v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0f); }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = stddev * rng.normal();
        return t;
    }

    static Tensor rand_uniform(std::vector<int> shape, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = rng.uniform(lo, hi);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return int(shape_.size()); }
    int dim(int i) const { return shape_.at(size_t(i)); }
    int64_t numel() const { return int64_t(data_.size()); }
    bool empty() const { return data_.empty(); }

    /// Rows/cols in the canonical 2-d view (rank-1 = one row).
    int rows() const { return ndim() == 2 ? shape_[0] : 1; }
    int cols() const { return ndim() == 2 ? shape_[1] : (ndim() == 1 ? shape_[0] : (ndim() == 0 ? 0 : -1)); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    float& at(int r, int c) { return data_[size_t(r) * size_t(cols()) + size_t(c)]; }
    float at(int r, int c) const { return data_[size_t(r) * size_t(cols()) + size_t(c)]; }
    float& operator[](int64_t i) { return data_[size_t(i)]; }
    float operator[](int64_t i) const { return data_[size_t(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != numel())
            throw std::invalid_argument("Tensor::reshaped: element count mismatch");
        return Tensor(std::move(shape), data_);
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << "]";
        return os.str();
    }

    bool all_finite() const {
        for (float v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

using EMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMatrix>;
using ECMap = Eigen::Map<const EMatrix>;

/// 2-d Eigen view of a tensor (rank-1 seen as a 1xN row).
inline ECMap emap(const Tensor& t) { return ECMap(t.data(), t.rows(), t.cols()); }
inline EMap emap(Tensor& t) { return EMap(t.data(), t.rows(), t.cols()); }

/// C = op(A) * op(B) with optional transposes.
inline Tensor matmul_val(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
    int am = ta ? a.cols() : a.rows(), ak = ta ? a.rows() : a.cols();
    int bk = tb ? b.cols() : b.rows(), bn = tb ? b.rows() : b.cols();
    if (ak != bk)
        throw std::invalid_argument("matmul: inner dimensions disagree, " + a.shape_str() + (ta ? "^T" : "") +
                                    " x " + b.shape_str() + (tb ? "^T" : ""));
    Tensor out({am, bn});
    auto A = emap(a);
    auto B = emap(b);
    auto C = emap(out);
    if (!ta && !tb)
        C.noalias() = A * B;
    else if (ta && !tb)
        C.noalias() = A.transpose() * B;
    else if (!ta && tb)
        C.noalias() = A * B.transpose();
    else
        C.noalias() = A.transpose() * B.transpose();
    return out;
}

} // namespace wsf
