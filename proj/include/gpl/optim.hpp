#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace gpl {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Adam over one flat parameter buffer.
class Adam {
public:
    Adam() = default;
    Adam(std::size_t n, AdamConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::span<double> params, std::span<const double> grads) {
        ++t_;
        const double b1t = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double b2t = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = grads[i] + cfg_.weight_decay * params[i];
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
            params[i] -= cfg_.lr * (m_[i] / b1t) / (std::sqrt(v_[i] / b2t) + cfg_.eps);
        }
    }

    long steps() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<double> m_, v_;
    long t_ = 0;
};

// Per-coordinate Adagrad for embedding tables; only touched rows are updated.
class SparseAdagrad {
public:
    SparseAdagrad() = default;
    SparseAdagrad(std::size_t rows, std::size_t cols, double lr, double init_accum = 0.0, double eps = 1e-10)
        : cols_(cols), lr_(lr), eps_(eps), accum_(rows * cols, init_accum) {}

    void update_row(std::span<double> row, std::span<const double> grad, std::size_t r) {
        double* acc = accum_.data() + r * cols_;
        for (std::size_t c = 0; c < cols_; ++c) {
            acc[c] += grad[c] * grad[c];
            row[c] -= lr_ * grad[c] / (std::sqrt(acc[c]) + eps_);
        }
    }

private:
    std::size_t cols_ = 0;
    double lr_ = 0.0;
    double eps_ = 1e-10;
    std::vector<double> accum_;
};

}  // namespace gpl
