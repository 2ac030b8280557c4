#include "mpft/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace mpft {

namespace {

void check_matrix(const AccuracyMatrix& m) {
    if (m.acc.rows == 0 || m.acc.cols == 0)
        throw ConfigError("accuracy matrix: empty");
    if (m.n.size() != m.acc.cols)
        throw ConfigError("accuracy matrix: test counts do not match domains");
    if (m.home_domain.size() != m.acc.rows)
        throw ConfigError("accuracy matrix: home domains do not match rows");
    for (double v : m.acc.data)
        if (v < 0.0 || v > 1.0) throw ConfigError("accuracy matrix: entry outside [0,1]");
    for (int h : m.home_domain)
        if (h < 0 || h >= static_cast<int>(m.acc.cols))
            throw ConfigError("accuracy matrix: home domain out of range");
    for (std::size_t c : m.n)
        if (c == 0) throw ConfigError("accuracy matrix: zero test count");
}

}  // namespace

double ind_only(const AccuracyMatrix& m) {
    check_matrix(m);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m.acc.rows; ++i) {
        std::size_t h = static_cast<std::size_t>(m.home_domain[i]);
        num += m.acc.at(i, h) * static_cast<double>(m.n[h]);
        den += static_cast<double>(m.n[h]);
    }
    return num / den;
}

IndOod ind_ood(const AccuracyMatrix& m) {
    check_matrix(m);
    if (m.acc.cols < 2)
        throw std::domain_error("ind_ood: out-of-domain accuracy needs >= 2 domains");

    IndOod out;
    out.ind = ind_only(m);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m.acc.rows; ++i)
        for (std::size_t j = 0; j < m.acc.cols; ++j) {
            if (static_cast<int>(j) == m.home_domain[i]) continue;
            num += m.acc.at(i, j) * static_cast<double>(m.n[j]);
            den += static_cast<double>(m.n[j]);
        }
    out.ood = num / den;
    return out;
}

FairnessReport fairness(const std::vector<double>& per_domain_acc) {
    if (per_domain_acc.empty()) throw ConfigError("fairness: empty accuracy vector");
    FairnessReport rep;
    rep.per_domain = per_domain_acc;
    double lo = *std::min_element(per_domain_acc.begin(), per_domain_acc.end());
    double hi = *std::max_element(per_domain_acc.begin(), per_domain_acc.end());
    if (hi <= 0.0) {
        rep.roundness = 0.0;
        rep.degenerate = true;
    } else {
        rep.roundness = lo / hi;
    }
    return rep;
}

void write_fairness_csv(const FairnessReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "domain,accuracy\n";
    char buf[64];
    for (std::size_t j = 0; j < report.per_domain.size(); ++j) {
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", j, report.per_domain[j]);
        out << buf;
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

ErrorBoundReport error_bound_report(const DivergenceReport& divergence,
                                    const std::map<int, double>& local_errors,
                                    double alpha, double beta) {
    if (alpha < 0.0 || beta < 0.0)
        throw ConfigError("error bounds: alpha and beta must be >= 0");
    ErrorBoundReport rep;
    rep.alpha = alpha;
    rep.beta = beta;
    rep.local_error = local_errors;

    for (int client : divergence.clients) {
        auto err = local_errors.find(client);
        if (err == local_errors.end()) continue;
        auto avg = divergence.client_avg_delta.find(client);
        double delta = avg == divergence.client_avg_delta.end() ? 0.0 : avg->second;
        rep.ind_bound[client] = err->second + alpha * delta;
    }

    for (int i : divergence.clients)
        for (int j : divergence.clients) {
            if (i == j) continue;
            double worst = 0.0;
            bool any = false;
            for (int k : divergence.classes) {
                auto pi = divergence.representative.find({i, k});
                auto pj = divergence.representative.find({j, k});
                if (pi == divergence.representative.end() ||
                    pj == divergence.representative.end())
                    continue;
                worst = std::max(worst, euclidean_distance(pi->second, pj->second));
                any = true;
            }
            if (!any) continue;
            rep.pair_delta_max[{i, j}] = worst;
            auto err = local_errors.find(i);
            if (err != local_errors.end())
                rep.ood_bound[{i, j}] = err->second + beta * worst;
        }
    return rep;
}

}  // namespace mpft
