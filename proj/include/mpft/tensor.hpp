#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpft {

// Configuration mistakes (bad ratios, unknown method names, ...). The CLI
// maps these to exit code 2; everything else to exit code 1.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed binary inputs; message names the byte offset.
class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of 64-bit reals. 64-bit is used internally even
/// though the wire format is 32-bit, so accumulation order never leaks into
/// determinism contracts.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const {
        return {data.data() + r * cols, cols};
    }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    static Matrix column(std::span<const double> v) {
        Matrix m(v.size(), 1);
        for (std::size_t i = 0; i < v.size(); ++i) m.data[i] = v[i];
        return m;
    }
};

bool all_finite(std::span<const double> v);
bool all_finite(const Matrix& m);

double dot(std::span<const double> a, std::span<const double> b);
double squared_norm(std::span<const double> v);
double euclidean_distance(std::span<const double> a, std::span<const double> b);

/// y = M x
std::vector<double> matvec(const Matrix& m, std::span<const double> x);
/// y = M^T x
std::vector<double> matvec_transposed(const Matrix& m, std::span<const double> x);
/// A += scale * u v^T
void add_outer(Matrix& a, std::span<const double> u, std::span<const double> v,
               double scale);

/// Numerically stable softmax (max-subtraction).
std::vector<double> softmax(std::span<const double> logits);

struct CrossEntropyResult {
    double loss;
    std::vector<double> grad;  // softmax(logits) - one_hot(label)
};

/// loss = -log softmax(logits)[label]. Requires K >= 2 and label in range.
CrossEntropyResult softmax_cross_entropy(std::span<const double> logits, int label);

enum class OptimizerKind { sgd, adam };

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

/// First-order optimizer over a set of parameter tensors. Moments are
/// zero-initialized lazily on the first step; step_count increments by
/// exactly 1 per step. grad_clip, when set, rescales the joint gradient so
/// its global norm does not exceed the clip value (applied before the
/// moment update).
struct OptimizerState {
    OptimizerKind kind = OptimizerKind::sgd;
    double learning_rate = 0.001;
    std::optional<double> grad_clip;
    long step_count = 0;
    std::vector<Matrix> first_moment;
    std::vector<Matrix> second_moment;

    static OptimizerState sgd(double lr, std::optional<double> clip = std::nullopt) {
        OptimizerState s;
        s.kind = OptimizerKind::sgd;
        s.learning_rate = lr;
        s.grad_clip = clip;
        return s;
    }
    static OptimizerState adam(double lr, std::optional<double> clip = std::nullopt) {
        OptimizerState s;
        s.kind = OptimizerKind::adam;
        s.learning_rate = lr;
        s.grad_clip = clip;
        return s;
    }
};

/// One optimizer step over a parameter group. Throws std::runtime_error on a
/// non-finite gradient (the step is rejected, parameters untouched).
void optimizer_step(OptimizerState& state, std::span<Matrix*> params,
                    std::span<const Matrix* const> grads);

/// Single-matrix convenience wrapper.
void optimizer_step(OptimizerState& state, Matrix& params, const Matrix& grads);

/// Central-difference gradient estimate; error O(h^2) for smooth f.
std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> point, double h);

}  // namespace mpft
