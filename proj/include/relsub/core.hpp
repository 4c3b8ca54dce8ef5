#pragma once
// Dense row-major f64 tensor plus the error taxonomy shared by every module.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace relsub {

// exit-code mapping in the CLI: usage 2, shape/data 3, numeric 4
struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct shape_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return s.empty() ? 0 : n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), v_(shape_size(shape_), fill) {}

    static Tensor from(Shape shape, std::vector<double> values) {
        if (shape_size(shape) != values.size())
            throw shape_error("tensor value count " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.v_ = std::move(values);
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

    double& operator[](std::size_t i) { return v_[i]; }
    double operator[](std::size_t i) const { return v_[i]; }

    // (c,h,w) indexing for rank-3 maps
    double& at(std::size_t c, std::size_t h, std::size_t w) {
        return v_[(c * shape_[1] + h) * shape_[2] + w];
    }
    double at(std::size_t c, std::size_t h, std::size_t w) const {
        return v_[(c * shape_[1] + h) * shape_[2] + w];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(Shape s) const {
        if (shape_size(s) != v_.size())
            throw shape_error("reshape to " + shape_str(s) + " changes element count");
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

private:
    Shape shape_;
    std::vector<double> v_;
};

inline void ensure_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw numeric_error(std::string(what) + ": non-finite value");
}

// decimal form with enough digits for bit-exact double round-trips
inline std::string fmt17(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

}  // namespace relsub
