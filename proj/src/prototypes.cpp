#include "mpft/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mpft/rng.hpp"

namespace mpft {
namespace {

enum : std::uint64_t {
    kStreamClass = 21,
    kStreamDp = 22,
};

std::vector<std::vector<std::size_t>> rows_by_class(const EmbeddedSplit& data,
                                                    int num_classes) {
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < data.labels.size(); ++i) {
        int label = data.labels[i];
        if (label < 0 || label >= num_classes)
            throw ConfigError("sampling: label out of range");
        by_class[label].push_back(i);
    }
    return by_class;
}

std::size_t count_for_rate(double rate, std::size_t n) {
    return static_cast<std::size_t>(std::ceil(rate * static_cast<double>(n)));
}

void check_rate(double rate) {
    if (!(rate > 0.0 && rate <= 1.0))
        throw ConfigError("sampling: rate must be in (0, 1]");
}

}  // namespace

PrototypeDataset build_prototype_dataset(const std::vector<PrototypeSet>& sets,
                                         std::size_t d_emb, int num_classes) {
    PrototypeDataset ds;
    ds.d_emb = d_emb;
    ds.num_classes = num_classes;
    for (const PrototypeSet& set : sets) {
        ds.contributing_clients.push_back(set.client_id);
        for (const Prototype& p : set.prototypes) {
            if (p.vec.size() != d_emb)
                throw ConfigError("prototype dataset: dimension mismatch");
            ds.prototypes.push_back(p);
        }
        for (int k : set.empty_classes) ds.missing.emplace_back(set.client_id, k);
    }
    std::sort(ds.contributing_clients.begin(), ds.contributing_clients.end());
    return ds;
}

PrototypeSet mean_sampling(int client_id, const EmbeddedSplit& data, int num_classes) {
    PrototypeSet out;
    out.client_id = client_id;
    auto by_class = rows_by_class(data, num_classes);
    for (int k = 0; k < num_classes; ++k) {
        if (by_class[k].empty()) {
            out.empty_classes.push_back(k);
            continue;
        }
        Prototype p;
        p.client_id = client_id;
        p.class_id = k;
        p.vec.assign(data.embeddings.cols, 0.0);
        for (std::size_t row : by_class[k]) {
            auto e = data.embeddings.row(row);
            for (std::size_t j = 0; j < e.size(); ++j) p.vec[j] += e[j];
        }
        for (double& v : p.vec) v /= static_cast<double>(by_class[k].size());
        out.prototypes.push_back(std::move(p));
    }
    return out;
}

PrototypeSet cluster_sampling(int client_id, const EmbeddedSplit& data, int num_classes,
                              double rate, std::uint64_t seed) {
    check_rate(rate);
    PrototypeSet out;
    out.client_id = client_id;
    auto by_class = rows_by_class(data, num_classes);
    for (int k = 0; k < num_classes; ++k) {
        const auto& rows = by_class[k];
        if (rows.empty()) {
            out.empty_classes.push_back(k);
            continue;
        }
        Matrix points(rows.size(), data.embeddings.cols);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            auto e = data.embeddings.row(rows[i]);
            std::copy(e.begin(), e.end(), points.row(i).begin());
        }
        std::size_t centers = count_for_rate(rate, rows.size());
        KMeansResult res = kmeans(points, centers,
                                  derive_seed(seed, kStreamClass,
                                              static_cast<std::uint64_t>(k)));
        for (std::size_t c = 0; c < res.centers.rows; ++c) {
            Prototype p;
            p.client_id = client_id;
            p.class_id = k;
            auto row = res.centers.row(c);
            p.vec.assign(row.begin(), row.end());
            out.prototypes.push_back(std::move(p));
        }
    }
    return out;
}

PrototypeSet random_sampling(int client_id, const EmbeddedSplit& data, int num_classes,
                             double rate, std::uint64_t seed) {
    check_rate(rate);
    PrototypeSet out;
    out.client_id = client_id;
    auto by_class = rows_by_class(data, num_classes);
    for (int k = 0; k < num_classes; ++k) {
        auto rows = by_class[k];
        if (rows.empty()) {
            out.empty_classes.push_back(k);
            continue;
        }
        Rng rng(derive_seed(seed, kStreamClass, static_cast<std::uint64_t>(k)));
        rng.shuffle(rows);
        std::size_t take = count_for_rate(rate, rows.size());
        for (std::size_t i = 0; i < take; ++i) {
            Prototype p;
            p.client_id = client_id;
            p.class_id = k;
            auto e = data.embeddings.row(rows[i]);
            p.vec.assign(e.begin(), e.end());
            out.prototypes.push_back(std::move(p));
        }
    }
    return out;
}

PrototypeSet sample_prototypes(SamplingMethod method, int client_id,
                               const EmbeddedSplit& data, int num_classes, double rate,
                               std::uint64_t seed) {
    switch (method) {
        case SamplingMethod::mean:
            return mean_sampling(client_id, data, num_classes);
        case SamplingMethod::cluster:
            return cluster_sampling(client_id, data, num_classes, rate, seed);
        case SamplingMethod::random:
            return random_sampling(client_id, data, num_classes, rate, seed);
    }
    throw ConfigError("sampling: unknown method");
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        double d = a[j] - b[j];
        s += d * d;
    }
    return s;
}

Matrix kmeanspp_init(const Matrix& points, std::size_t num_centers, Rng& rng) {
    const std::size_t n = points.rows;
    Matrix centers(num_centers, points.cols);
    std::vector<double> dist2(n, std::numeric_limits<double>::infinity());

    std::size_t first = static_cast<std::size_t>(rng.below(n));
    std::copy(points.row(first).begin(), points.row(first).end(), centers.row(0).begin());

    for (std::size_t c = 1; c < num_centers; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            dist2[i] = std::min(dist2[i], sq_dist(points.row(i), centers.row(c - 1)));
            total += dist2[i];
        }
        std::size_t pick = 0;
        if (total <= 0.0) {
            pick = static_cast<std::size_t>(rng.below(n));
        } else {
            double target = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += dist2[i];
                if (acc > target) {
                    pick = i;
                    break;
                }
            }
        }
        std::copy(points.row(pick).begin(), points.row(pick).end(),
                  centers.row(c).begin());
    }
    return centers;
}

}  // namespace

namespace {

KMeansResult kmeans_single(const Matrix& points, std::size_t num_centers,
                           std::uint64_t seed, int max_iters) {
    const std::size_t n = points.rows;
    Rng rng(seed);
    KMeansResult res;
    res.centers = kmeanspp_init(points, num_centers, rng);
    res.assignment.assign(n, 0);

    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        double objective = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < num_centers; ++c) {
                double d = sq_dist(points.row(i), res.centers.row(c));
                if (d < best_d) {  // strict: ties keep the lowest index
                    best_d = d;
                    best = c;
                }
            }
            objective += best_d;
            if (res.assignment[i] != best) {
                res.assignment[i] = best;
                changed = true;
            }
        }
        res.objective_history.push_back(objective);
        res.iterations = iter + 1;
        if (!changed && iter > 0) break;

        std::vector<std::size_t> counts(num_centers, 0);
        Matrix sums(num_centers, points.cols);
        for (std::size_t i = 0; i < n; ++i) {
            ++counts[res.assignment[i]];
            auto p = points.row(i);
            auto s = sums.row(res.assignment[i]);
            for (std::size_t j = 0; j < p.size(); ++j) s[j] += p[j];
        }
        for (std::size_t c = 0; c < num_centers; ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t j = 0; j < points.cols; ++j)
                res.centers.at(c, j) = sums.at(c, j) / static_cast<double>(counts[c]);
        }
        // Repair empty clusters: each steals the point currently farthest
        // from its assigned center.
        for (std::size_t c = 0; c < num_centers; ++c) {
            if (counts[c] != 0) continue;
            std::size_t worst = 0;
            double worst_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (counts[res.assignment[i]] <= 1) continue;
                double d = sq_dist(points.row(i), res.centers.row(res.assignment[i]));
                if (d > worst_d) {
                    worst_d = d;
                    worst = i;
                }
            }
            --counts[res.assignment[worst]];
            res.assignment[worst] = c;
            counts[c] = 1;
            std::copy(points.row(worst).begin(), points.row(worst).end(),
                      res.centers.row(c).begin());
        }
    }
    return res;
}

constexpr int kKmeansRestarts = 16;
constexpr std::uint64_t kStreamKmeansRestart = 23;

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t num_centers, std::uint64_t seed,
                    int max_iters) {
    if (num_centers < 1 || num_centers > points.rows)
        throw std::domain_error("kmeans: need 1 <= centers <= points");

    // Lloyd only finds a local optimum; restarting from several seeded
    // kmeans++ inits and keeping the best recovers the global optimum on the
    // small per-class instances this is used for.
    KMeansResult best;
    for (int r = 0; r < kKmeansRestarts; ++r) {
        KMeansResult cand = kmeans_single(
            points, num_centers, derive_seed(seed, kStreamKmeansRestart, r), max_iters);
        if (r == 0 || cand.objective_history.back() < best.objective_history.back())
            best = std::move(cand);
    }
    return best;
}

std::vector<PrototypeSet> apply_dp_noise(const std::vector<PrototypeSet>& sets, double q,
                                         double s, std::uint64_t seed) {
    if (q < 0.0 || s < 0.0) throw ConfigError("dp: q and s must be non-negative");
    if (q == 0.0 || s == 0.0) return sets;

    std::vector<PrototypeSet> out = sets;
    for (PrototypeSet& set : out) {
        for (std::size_t i = 0; i < set.prototypes.size(); ++i) {
            Rng rng(derive_seed(seed, kStreamDp,
                                static_cast<std::uint64_t>(set.client_id), i));
            for (double& v : set.prototypes[i].vec) v += q * rng.gaussian(0.0, s);
        }
    }
    return out;
}

DivergenceReport divergence_stats(const PrototypeDataset& dataset) {
    DivergenceReport rep;

    // Client representative per class: mean of that client's prototypes.
    std::map<std::pair<int, int>, std::pair<std::vector<double>, std::size_t>> acc;
    for (const Prototype& p : dataset.prototypes) {
        auto& slot = acc[{p.client_id, p.class_id}];
        if (slot.first.empty()) slot.first.assign(dataset.d_emb, 0.0);
        for (std::size_t j = 0; j < p.vec.size(); ++j) slot.first[j] += p.vec[j];
        ++slot.second;
    }
    std::map<int, bool> client_seen;
    std::map<int, std::vector<const std::vector<double>*>> per_class;
    for (auto& [key, slot] : acc) {
        for (double& v : slot.first) v /= static_cast<double>(slot.second);
        rep.representative[key] = slot.first;
        client_seen[key.first] = true;
    }
    for (auto& [key, vec] : rep.representative) per_class[key.second].push_back(&vec);
    for (auto& [client, seen] : client_seen) rep.clients.push_back(client);

    for (int k = 0; k < dataset.num_classes; ++k) {
        auto it = per_class.find(k);
        if (it == per_class.end()) {
            rep.excluded_classes.push_back(k);
            continue;
        }
        rep.classes.push_back(k);
        std::vector<double> mean(dataset.d_emb, 0.0);
        for (const auto* v : it->second)
            for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += (*v)[j];
        for (double& v : mean) v /= static_cast<double>(it->second.size());
        rep.class_mean[k] = std::move(mean);
    }

    std::map<int, std::pair<double, int>> avg_acc;
    for (const auto& [key, vec] : rep.representative) {
        auto mean_it = rep.class_mean.find(key.second);
        if (mean_it == rep.class_mean.end()) continue;
        double d = euclidean_distance(vec, mean_it->second);
        rep.delta[key] = d;
        rep.max_delta = std::max(rep.max_delta, d);
        auto& slot = avg_acc[key.first];
        slot.first += d;
        ++slot.second;
    }
    for (const auto& [client, slot] : avg_acc)
        rep.client_avg_delta[client] = slot.first / slot.second;
    return rep;
}

std::uint64_t prototype_payload_bytes(const PrototypeSet& set, std::size_t d_emb) {
    return emb_payload_bytes(set.prototypes.size(), d_emb);
}

EmbFile prototypes_to_emb(const std::vector<PrototypeSet>& sets, std::size_t d_emb,
                          int num_classes, int num_clients) {
    EmbFile file;
    file.d_emb = static_cast<std::uint32_t>(d_emb);
    file.num_classes = static_cast<std::uint32_t>(num_classes);
    file.num_clients = static_cast<std::uint32_t>(num_clients);
    for (const PrototypeSet& set : sets)
        for (const Prototype& p : set.prototypes) {
            EmbRecord rec;
            rec.client_id = static_cast<std::uint32_t>(p.client_id);
            rec.label = static_cast<std::uint32_t>(p.class_id);
            rec.values.assign(p.vec.begin(), p.vec.end());
            file.records.push_back(std::move(rec));
        }
    return file;
}

}  // namespace mpft
