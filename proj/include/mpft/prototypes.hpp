#pragma once

#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include "mpft/tensor.hpp"
#include "mpft/world.hpp"

namespace mpft {

struct Prototype {
    int client_id = 0;
    int class_id = 0;
    std::vector<double> vec;
};

/// One client's upload: its prototypes plus the classes it could not cover.
struct PrototypeSet {
    int client_id = 0;
    std::vector<Prototype> prototypes;
    std::vector<int> empty_classes;
};

/// The server-side training set: the plain union of client uploads. Never
/// averaged across clients; every prototype is an independent training point.
struct PrototypeDataset {
    std::vector<Prototype> prototypes;
    std::size_t d_emb = 0;
    int num_classes = 0;
    std::vector<int> contributing_clients;
    std::vector<std::pair<int, int>> missing;  // (client, class) gaps
};

PrototypeDataset build_prototype_dataset(const std::vector<PrototypeSet>& sets,
                                         std::size_t d_emb, int num_classes);

enum class SamplingMethod { mean, cluster, random };

/// One prototype per non-empty class: the arithmetic class mean.
PrototypeSet mean_sampling(int client_id, const EmbeddedSplit& data, int num_classes);

/// Per class, ceil(r * n_k) k-means centers become prototypes.
PrototypeSet cluster_sampling(int client_id, const EmbeddedSplit& data, int num_classes,
                              double rate, std::uint64_t seed);

/// Per class, ceil(r * n_k) embeddings drawn uniformly without replacement.
PrototypeSet random_sampling(int client_id, const EmbeddedSplit& data, int num_classes,
                             double rate, std::uint64_t seed);

PrototypeSet sample_prototypes(SamplingMethod method, int client_id,
                               const EmbeddedSplit& data, int num_classes, double rate,
                               std::uint64_t seed);

struct KMeansResult {
    Matrix centers;
    std::vector<std::size_t> assignment;
    std::vector<double> objective_history;  // one entry per assignment pass
    int iterations = 0;
};

/// Lloyd iterations from a k-means++ seeded start, run to an assignment
/// fixpoint or max_iters. Assignment ties break toward the lowest center
/// index; an emptied cluster steals the point farthest from its center.
KMeansResult kmeans(const Matrix& points, std::size_t num_centers, std::uint64_t seed,
                    int max_iters = 100);

/// p~ = p + q * N(0, s^2), i.i.d. per coordinate. q = 0 or s = 0 returns the
/// input untouched (bit-identical, no RNG draws).
std::vector<PrototypeSet> apply_dp_noise(const std::vector<PrototypeSet>& sets, double q,
                                         double s, std::uint64_t seed);

struct DivergenceReport {
    std::vector<int> clients;  // ascending contributing clients
    std::vector<int> classes;  // classes covered by at least one client
    std::vector<int> excluded_classes;
    // Representative per (client, class): that client's class mean.
    std::map<std::pair<int, int>, std::vector<double>> representative;
    std::map<int, std::vector<double>> class_mean;         // cross-client mean
    std::map<std::pair<int, int>, double> delta;           // ||rep - class mean||
    std::map<int, double> client_avg_delta;
    double max_delta = 0.0;
};

DivergenceReport divergence_stats(const PrototypeDataset& dataset);

/// Prototype sets travel on the wire in the embedding container format; this
/// is the exact uplink payload size used by cost accounting.
std::uint64_t prototype_payload_bytes(const PrototypeSet& set, std::size_t d_emb);

EmbFile prototypes_to_emb(const std::vector<PrototypeSet>& sets, std::size_t d_emb,
                          int num_classes, int num_clients);

}  // namespace mpft
