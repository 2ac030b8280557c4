#include "mpft/attack.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "mpft/rng.hpp"
#include "mpft/tensor.hpp"

namespace mpft {
namespace {

constexpr std::uint64_t kStreamAttackInit = 71;

double prototype_mse(const FrozenEncoder& encoder, const std::vector<double>& x,
                     std::span<const double> p, std::vector<double>* embedding) {
    std::vector<double> e = encoder.encode(x);
    double mse = 0.0;
    for (std::size_t k = 0; k < e.size(); ++k) {
        double diff = e[k] - p[k];
        mse += diff * diff;
    }
    mse /= static_cast<double>(e.size());
    if (embedding) *embedding = std::move(e);
    return mse;
}

double input_mse(const std::vector<double>& x, const std::vector<double>* truth) {
    if (!truth) return std::numeric_limits<double>::quiet_NaN();
    double mse = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
        double diff = x[j] - (*truth)[j];
        mse += diff * diff;
    }
    return mse / static_cast<double>(x.size());
}

}  // namespace

void AttackConfig::validate() const {
    if (iterations < 0) throw ConfigError("attack.iterations: must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("attack.learning_rate: must be > 0");
    if (log_every < 1) throw ConfigError("attack.log_every: must be >= 1");
}

AttackReport hijack_attack(const FrozenEncoder& encoder,
                           std::span<const double> target_prototype,
                           const AttackConfig& config,
                           const std::vector<double>* ground_truth_x) {
    config.validate();
    if (target_prototype.size() != encoder.d_emb())
        throw ConfigError("attack: target prototype length " +
                          std::to_string(target_prototype.size()) +
                          " does not match d_emb " + std::to_string(encoder.d_emb()));
    if (ground_truth_x && ground_truth_x->size() != encoder.d_in())
        throw ConfigError("attack: ground truth length does not match d_in");

    AttackReport report;
    std::vector<double> x(encoder.d_in(), 0.0);
    if (config.init == AttackInit::gaussian) {
        Rng rng(derive_seed(config.init_seed, kStreamAttackInit));
        x = rng.gaussian_vector(encoder.d_in());
    }

    const double d_emb = static_cast<double>(encoder.d_emb());
    std::vector<double> embedding;
    double loss = prototype_mse(encoder, x, target_prototype, &embedding);
    double lr = config.learning_rate;

    auto log_point = [&](int iteration) {
        report.logged_iterations.push_back(iteration);
        report.prototype_space_mse_history.push_back(loss);
        report.input_space_mse_history.push_back(input_mse(x, ground_truth_x));
    };
    log_point(0);

    int t = 0;
    for (; t < config.iterations; ++t) {
        if (!std::isfinite(loss)) {
            report.aborted = true;
            break;
        }
        std::vector<double> upstream(encoder.d_emb());
        for (std::size_t k = 0; k < upstream.size(); ++k)
            upstream[k] = 2.0 * (embedding[k] - target_prototype[k]) / d_emb;
        std::vector<double> grad = encoder.input_grad(x, upstream);

        if (config.halving) {
            std::vector<double> candidate(x.size());
            std::vector<double> cand_emb;
            double cand_loss = 0.0;
            for (;;) {
                for (std::size_t j = 0; j < x.size(); ++j)
                    candidate[j] = x[j] - lr * grad[j];
                cand_loss = prototype_mse(encoder, candidate, target_prototype, &cand_emb);
                if (std::isfinite(cand_loss) && cand_loss <= loss) break;
                lr *= 0.5;
                if (lr < 1e-300) {  // gradient step can no longer help
                    candidate = x;
                    cand_emb = embedding;
                    cand_loss = loss;
                    break;
                }
            }
            x = std::move(candidate);
            embedding = std::move(cand_emb);
            loss = cand_loss;
        } else {
            for (std::size_t j = 0; j < x.size(); ++j) x[j] -= lr * grad[j];
            loss = prototype_mse(encoder, x, target_prototype, &embedding);
            if (!std::isfinite(loss)) {
                report.aborted = true;
                ++t;
                break;
            }
        }
        if ((t + 1) % config.log_every == 0) log_point(t + 1);
    }
    report.iterations_run = t;
    if (!report.aborted && config.iterations % config.log_every != 0)
        log_point(config.iterations);

    report.x_star = std::move(x);
    report.input_space_mse = input_mse(report.x_star, ground_truth_x);
    return report;
}

void write_attack_csv(const AttackReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "iteration,prototype_mse,input_mse\n";
    char buf[96];
    for (std::size_t i = 0; i < report.logged_iterations.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g", report.logged_iterations[i],
                      report.prototype_space_mse_history[i],
                      report.input_space_mse_history[i]);
        out << buf << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace mpft
