#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

namespace tdinf {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::runtime_error("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

// Dense symmetric positive-definite solver via Cholesky, used for the damped
// last-layer Hessian. Row-major n x n.
class Cholesky {
public:
    Cholesky(std::vector<double> a, std::size_t n) : l_(std::move(a)), n_(n) {
        if (l_.size() != n_ * n_) throw std::runtime_error("cholesky: bad shape");
        for (std::size_t j = 0; j < n_; ++j) {
            double d = l_[j * n_ + j];
            for (std::size_t k = 0; k < j; ++k) d -= l_[j * n_ + k] * l_[j * n_ + k];
            if (d <= 0.0)
                throw std::runtime_error("matrix is not positive definite (increase damping)");
            d = std::sqrt(d);
            l_[j * n_ + j] = d;
            for (std::size_t i = j + 1; i < n_; ++i) {
                double s = l_[i * n_ + j];
                for (std::size_t k = 0; k < j; ++k) s -= l_[i * n_ + k] * l_[j * n_ + k];
                l_[i * n_ + j] = s / d;
            }
        }
    }

    std::vector<double> solve(const std::vector<double>& b) const {
        if (b.size() != n_) throw std::runtime_error("cholesky solve: size mismatch");
        std::vector<double> y(n_);
        for (std::size_t i = 0; i < n_; ++i) {
            double s = b[i];
            for (std::size_t k = 0; k < i; ++k) s -= l_[i * n_ + k] * y[k];
            y[i] = s / l_[i * n_ + i];
        }
        for (std::size_t ii = n_; ii-- > 0;) {
            double s = y[ii];
            for (std::size_t k = ii + 1; k < n_; ++k) s -= l_[k * n_ + ii] * y[k];
            y[ii] = s / l_[ii * n_ + ii];
        }
        return y;
    }

    std::size_t dim() const { return n_; }

private:
    std::vector<double> l_;
    std::size_t n_;
};

}  // namespace tdinf
