#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpft/world.hpp"

namespace mpft {

enum class AttackInit { zeros, gaussian };

struct AttackConfig {
    int iterations = 100000;
    double learning_rate = 0.05;
    AttackInit init = AttackInit::zeros;
    std::uint64_t init_seed = 0;
    int log_every = 100;
    bool halving = true;  // false: fixed-step attacker

    void validate() const;  // throws ConfigError
};

struct AttackReport {
    std::vector<double> x_star;
    std::vector<int> logged_iterations;
    std::vector<double> prototype_space_mse_history;
    // Aligned with the prototype history; NaN entries when no ground truth
    // was supplied.
    std::vector<double> input_space_mse_history;
    double input_space_mse = 0.0;  // final, NaN without ground truth
    int iterations_run = 0;
    bool aborted = false;  // non-finite loss cut the run short
};

/// Gradient descent on MSE(encode(x*), p). With the halving rule the logged
/// prototype-space MSE is non-increasing; fixed-step mode applies the raw
/// update and aborts with a partial report if the loss leaves the finite
/// range.
AttackReport hijack_attack(const FrozenEncoder& encoder,
                           std::span<const double> target_prototype,
                           const AttackConfig& config,
                           const std::vector<double>* ground_truth_x = nullptr);

/// Trajectory CSV: `iteration,prototype_mse,input_mse`.
void write_attack_csv(const AttackReport& report, const std::string& path);

}  // namespace mpft
