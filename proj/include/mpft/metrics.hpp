#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mpft/prototypes.hpp"
#include "mpft/tensor.hpp"

namespace mpft {

/// Row i holds the accuracies of client i's model over every test domain;
/// home_domain[i] names the domain whose column counts as in-domain for that
/// row. n[j] is the test-sample count of domain j.
struct AccuracyMatrix {
    Matrix acc;
    std::vector<std::size_t> n;
    std::vector<int> home_domain;

    std::size_t models() const { return acc.rows; }
    std::size_t domains() const { return acc.cols; }
};

struct IndOod {
    double ind = 0.0;
    double ood = 0.0;
};

/// ind: test-size-weighted accuracy of each model on its home domain.
/// ood: test-size-weighted accuracy over all foreign domains.
/// Requires at least 2 domains for ood.
IndOod ind_ood(const AccuracyMatrix& matrix);

double ind_only(const AccuracyMatrix& matrix);

struct FairnessReport {
    std::vector<double> per_domain;
    double roundness = 0.0;  // min / max; 1 is perfectly fair
    bool degenerate = false;  // max accuracy was zero
};

FairnessReport fairness(const std::vector<double>& per_domain_acc);

void write_fairness_csv(const FairnessReport& report, const std::string& path);

/// Right-hand sides of the divergence error bounds; alpha and beta are user
/// inputs, nothing is asserted about the measured errors.
struct ErrorBoundReport {
    double alpha = 0.0;
    double beta = 0.0;
    std::map<int, double> local_error;
    std::map<int, double> ind_bound;  // local + alpha * avg divergence
    std::map<std::pair<int, int>, double> pair_delta_max;
    std::map<std::pair<int, int>, double> ood_bound;  // local + beta * pairwise max
};

ErrorBoundReport error_bound_report(const DivergenceReport& divergence,
                                    const std::map<int, double>& local_errors,
                                    double alpha, double beta);

}  // namespace mpft
