#include "mpft/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace mpft {

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool all_finite(const Matrix& m) { return all_finite(std::span<const double>(m.data)); }

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double squared_norm(std::span<const double> v) { return dot(v, v); }

double euclidean_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
    std::vector<double> y(m.rows, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) y[r] = dot(m.row(r), x);
    return y;
}

std::vector<double> matvec_transposed(const Matrix& m, std::span<const double> x) {
    std::vector<double> y(m.cols, 0.0);
    for (std::size_t r = 0; r < m.rows; ++r) {
        const double xr = x[r];
        const auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols; ++c) y[c] += row[c] * xr;
    }
    return y;
}

void add_outer(Matrix& a, std::span<const double> u, std::span<const double> v,
               double scale) {
    for (std::size_t r = 0; r < a.rows; ++r) {
        const double ur = scale * u[r];
        auto row = a.row(r);
        for (std::size_t c = 0; c < a.cols; ++c) row[c] += ur * v[c];
    }
}

std::vector<double> softmax(std::span<const double> logits) {
    const double peak = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - peak);
        z += p[i];
    }
    for (auto& x : p) x /= z;
    return p;
}

CrossEntropyResult softmax_cross_entropy(std::span<const double> logits, int label) {
    if (logits.size() < 2) throw std::domain_error("softmax_cross_entropy: need K >= 2");
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
        throw std::domain_error("softmax_cross_entropy: label out of range");
    if (!all_finite(logits))
        throw std::domain_error("softmax_cross_entropy: non-finite logits");

    const double peak = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (const double l : logits) z += std::exp(l - peak);
    const double log_z = std::log(z) + peak;

    CrossEntropyResult out;
    out.loss = log_z - logits[static_cast<std::size_t>(label)];
    out.grad.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
        out.grad[i] = std::exp(logits[i] - log_z);
    out.grad[static_cast<std::size_t>(label)] -= 1.0;
    return out;
}

namespace {

double global_grad_norm(std::span<const Matrix* const> grads) {
    double s = 0.0;
    for (const Matrix* g : grads) s += squared_norm(g->data);
    return std::sqrt(s);
}

}  // namespace

void optimizer_step(OptimizerState& state, std::span<Matrix*> params,
                    std::span<const Matrix* const> grads) {
    if (params.size() != grads.size())
        throw std::invalid_argument("optimizer_step: parameter/gradient group mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->same_shape(*grads[i]))
            throw std::invalid_argument("optimizer_step: shape mismatch");
        if (!all_finite(*grads[i]))
            throw std::runtime_error("optimizer_step: non-finite gradient, step rejected");
    }

    double scale = 1.0;
    if (state.grad_clip) {
        const double norm = global_grad_norm(grads);
        if (norm > *state.grad_clip) scale = *state.grad_clip / norm;
    }

    if (state.kind == OptimizerKind::adam && state.first_moment.empty()) {
        for (const Matrix* p : params) {
            state.first_moment.emplace_back(p->rows, p->cols, 0.0);
            state.second_moment.emplace_back(p->rows, p->cols, 0.0);
        }
    }

    state.step_count += 1;
    const double lr = state.learning_rate;

    if (state.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i]->data;
            const auto& g = grads[i]->data;
            for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * scale * g[j];
        }
        return;
    }

    const double t = static_cast<double>(state.step_count);
    const double bias1 = 1.0 - std::pow(kAdamBeta1, t);
    const double bias2 = 1.0 - std::pow(kAdamBeta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->data;
        const auto& g = grads[i]->data;
        auto& m = state.first_moment[i].data;
        auto& v = state.second_moment[i].data;
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double gj = scale * g[j];
            m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * gj;
            v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * gj * gj;
            const double m_hat = m[j] / bias1;
            const double v_hat = v[j] / bias2;
            p[j] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEpsilon);
        }
    }
}

void optimizer_step(OptimizerState& state, Matrix& params, const Matrix& grads) {
    Matrix* p[] = {&params};
    const Matrix* g[] = {&grads};
    optimizer_step(state, std::span<Matrix*>(p), std::span<const Matrix* const>(g));
}

std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> point, double h) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: h must be positive");
    std::vector<double> x(point.begin(), point.end());
    std::vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = f(x);
        x[i] = saved - h;
        const double down = f(x);
        x[i] = saved;
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

}  // namespace mpft
