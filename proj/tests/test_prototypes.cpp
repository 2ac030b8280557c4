#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "mpft/prototypes.hpp"
#include "mpft/rng.hpp"

using namespace mpft;

namespace {

EmbeddedSplit make_split(const std::vector<std::vector<double>>& rows,
                         const std::vector<int>& labels) {
    EmbeddedSplit s;
    s.embeddings = Matrix(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].begin(), rows[i].end(), s.embeddings.row(i).begin());
    s.labels = labels;
    return s;
}

double kmeans_objective(const Matrix& points, const KMeansResult& result) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.rows; ++i) {
        auto p = points.row(i);
        auto c = result.centers.row(result.assignment[i]);
        double d = 0.0;
        for (std::size_t j = 0; j < p.size(); ++j) {
            double diff = p[j] - c[j];
            d += diff * diff;
        }
        total += d;
    }
    return total;
}

// Global k-means optimum by enumerating every complete assignment.
double exhaustive_kmeans_objective(const Matrix& points, std::size_t centers) {
    const std::size_t n = points.rows;
    const std::size_t d = points.cols;
    std::size_t combos = 1;
    for (std::size_t i = 0; i < n; ++i) combos *= centers;
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> assign(n);
    for (std::size_t code = 0; code < combos; ++code) {
        std::size_t c = code;
        for (std::size_t i = 0; i < n; ++i) {
            assign[i] = c % centers;
            c /= centers;
        }
        std::vector<std::size_t> count(centers, 0);
        for (std::size_t a : assign) ++count[a];
        if (std::any_of(count.begin(), count.end(),
                        [](std::size_t v) { return v == 0; }))
            continue;
        Matrix mean(centers, d);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                mean.at(assign[i], j) += points.at(i, j);
        for (std::size_t k = 0; k < centers; ++k)
            for (std::size_t j = 0; j < d; ++j)
                mean.at(k, j) /= static_cast<double>(count[k]);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double diff = points.at(i, j) - mean.at(assign[i], j);
                total += diff * diff;
            }
        best = std::min(best, total);
    }
    return best;
}

}  // namespace

TEST_CASE("mean sampling matches hand values") {
    EmbeddedSplit data = make_split({{1, 3}, {3, 1}}, {0, 0});
    PrototypeSet set = mean_sampling(7, data, 3);
    CHECK(set.client_id == 7);
    REQUIRE(set.prototypes.size() == 1);
    CHECK(set.prototypes[0].class_id == 0);
    CHECK(set.prototypes[0].client_id == 7);
    CHECK(set.prototypes[0].vec[0] == 2.0);
    CHECK(set.prototypes[0].vec[1] == 2.0);
    CHECK(set.empty_classes == std::vector<int>{1, 2});
}

TEST_CASE("mean sampling of a single sample returns that embedding") {
    EmbeddedSplit data = make_split({{0.25, -4.5, 9.0}}, {1});
    PrototypeSet set = mean_sampling(0, data, 2);
    REQUIRE(set.prototypes.size() == 1);
    CHECK(set.prototypes[0].class_id == 1);
    CHECK(set.prototypes[0].vec == std::vector<double>{0.25, -4.5, 9.0});
}

TEST_CASE("mean sampling matches a brute-force oracle on 50 random embeddings") {
    Rng rng(404);
    const int classes = 4;
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) {
        rows.push_back(rng.gaussian_vector(6, 3.0));
        labels.push_back(static_cast<int>(rng.below(classes)));
    }
    EmbeddedSplit data = make_split(rows, labels);
    PrototypeSet set = mean_sampling(0, data, classes);

    for (int k = 0; k < classes; ++k) {
        std::vector<double> sum(6, 0.0);
        int count = 0;
        // Reverse iteration gives an independent accumulation order.
        for (int i = 49; i >= 0; --i) {
            if (labels[i] != k) continue;
            for (int j = 0; j < 6; ++j) sum[j] += rows[i][j];
            ++count;
        }
        const Prototype* found = nullptr;
        for (const Prototype& p : set.prototypes)
            if (p.class_id == k) found = &p;
        if (count == 0) {
            CHECK(found == nullptr);
            continue;
        }
        REQUIRE(found != nullptr);
        for (int j = 0; j < 6; ++j)
            CHECK(std::abs(found->vec[j] - sum[j] / count) < 1e-12);
    }
}

TEST_CASE("cluster and random counts follow the ceiling rule") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const int classes = 3;
        std::vector<std::vector<double>> rows;
        std::vector<int> labels;
        std::vector<int> sizes = {25, static_cast<int>(rng.below(30)) + 1,
                                  static_cast<int>(rng.below(10)) + 1};
        for (int k = 0; k < classes; ++k)
            for (int i = 0; i < sizes[k]; ++i) {
                rows.push_back(rng.gaussian_vector(4));
                labels.push_back(k);
            }
        EmbeddedSplit data = make_split(rows, labels);
        for (double rate : {0.1, 0.37, 1.0}) {
            PrototypeSet cl = cluster_sampling(0, data, classes, rate, 100 + trial);
            PrototypeSet rd = random_sampling(0, data, classes, rate, 200 + trial);
            for (int k = 0; k < classes; ++k) {
                const auto expected = static_cast<std::size_t>(
                    std::ceil(rate * static_cast<double>(sizes[k])));
                std::size_t c_count = 0, r_count = 0;
                for (const Prototype& p : cl.prototypes)
                    if (p.class_id == k) ++c_count;
                for (const Prototype& p : rd.prototypes)
                    if (p.class_id == k) ++r_count;
                CHECK(c_count == expected);
                CHECK(r_count == expected);
            }
        }
    }
}

TEST_CASE("rate 0.1 of 25 samples gives 3 prototypes") {
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    Rng rng(5);
    for (int i = 0; i < 25; ++i) {
        rows.push_back(rng.gaussian_vector(2));
        labels.push_back(0);
    }
    EmbeddedSplit data = make_split(rows, labels);
    CHECK(random_sampling(0, data, 1, 0.1, 9).prototypes.size() == 3);
    CHECK(cluster_sampling(0, data, 1, 0.1, 9).prototypes.size() == 3);
}

TEST_CASE("random sampling draws members without replacement; r = 1 is the full set") {
    Rng rng(21);
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 12; ++i) {
        rows.push_back(rng.gaussian_vector(3));
        labels.push_back(i % 2);
    }
    EmbeddedSplit data = make_split(rows, labels);

    PrototypeSet partial = random_sampling(3, data, 2, 0.5, 77);
    std::set<std::vector<double>> members(rows.begin(), rows.end());
    std::set<std::vector<double>> drawn;
    for (const Prototype& p : partial.prototypes) {
        CHECK(members.count(p.vec) == 1);
        CHECK(drawn.insert(p.vec).second);  // no repeats
    }

    PrototypeSet full = random_sampling(3, data, 2, 1.0, 77);
    std::multiset<std::vector<double>> expected(rows.begin(), rows.end());
    std::multiset<std::vector<double>> got;
    for (const Prototype& p : full.prototypes) got.insert(p.vec);
    CHECK(got == expected);
}

TEST_CASE("cluster sampling with r = 1 returns every point as its own center") {
    Rng rng(31);
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 9; ++i) {
        rows.push_back(rng.gaussian_vector(2));
        labels.push_back(0);
    }
    EmbeddedSplit data = make_split(rows, labels);
    PrototypeSet set = cluster_sampling(0, data, 1, 1.0, 3);
    std::multiset<std::vector<double>> expected(rows.begin(), rows.end());
    std::multiset<std::vector<double>> got;
    for (const Prototype& p : set.prototypes) got.insert(p.vec);
    CHECK(got == expected);
}

TEST_CASE("sampling rejects out-of-range rates") {
    EmbeddedSplit data = make_split({{1, 2}}, {0});
    CHECK_THROWS_AS(random_sampling(0, data, 1, 0.0, 1), ConfigError);
    CHECK_THROWS_AS(random_sampling(0, data, 1, 1.5, 1), ConfigError);
    CHECK_THROWS_AS(cluster_sampling(0, data, 1, -0.2, 1), ConfigError);
}

TEST_CASE("kmeans separates the square corners") {
    Matrix points(4, 2);
    points.at(0, 0) = 0;  points.at(0, 1) = 0;
    points.at(1, 0) = 0;  points.at(1, 1) = 1;
    points.at(2, 0) = 10; points.at(2, 1) = 0;
    points.at(3, 0) = 10; points.at(3, 1) = 1;
    KMeansResult result = kmeans(points, 2, 42);
    std::set<std::pair<double, double>> centers;
    for (std::size_t k = 0; k < 2; ++k)
        centers.insert({result.centers.at(k, 0), result.centers.at(k, 1)});
    std::set<std::pair<double, double>> expected = {{0.0, 0.5}, {10.0, 0.5}};
    CHECK(centers == expected);
    CHECK(result.assignment[0] == result.assignment[1]);
    CHECK(result.assignment[2] == result.assignment[3]);
    CHECK(result.assignment[0] != result.assignment[2]);
}

TEST_CASE("kmeans attains the exhaustive-partition optimum on small instances") {
    Rng rng(987);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 2 + rng.below(7);                    // 2..8 points
        const std::size_t c = 1 + rng.below(std::min<std::uint64_t>(3, n));
        Matrix points(n, 2);
        for (std::size_t i = 0; i < n; ++i) {
            points.at(i, 0) = rng.gaussian(0.0, 2.0);
            points.at(i, 1) = rng.gaussian(0.0, 2.0);
        }
        KMeansResult result = kmeans(points, c, 1000 + trial);
        const double got = kmeans_objective(points, result);
        const double best = exhaustive_kmeans_objective(points, c);
        CHECK(got <= best + 1e-9);
        CHECK(got >= best - 1e-9);
    }
}

TEST_CASE("kmeans edge configurations") {
    Rng rng(55);
    Matrix points(5, 3);
    for (std::size_t i = 0; i < 5; ++i) {
        auto v = rng.gaussian_vector(3);
        std::copy(v.begin(), v.end(), points.row(i).begin());
    }

    SUBCASE("C equals the point count") {
        KMeansResult r = kmeans(points, 5, 8);
        CHECK(kmeans_objective(points, r) == 0.0);
        std::set<std::size_t> used(r.assignment.begin(), r.assignment.end());
        CHECK(used.size() == 5);
    }
    SUBCASE("C = 1 returns the mean") {
        KMeansResult r = kmeans(points, 1, 8);
        for (std::size_t j = 0; j < 3; ++j) {
            double mean = 0.0;
            for (std::size_t i = 0; i < 5; ++i) mean += points.at(i, j);
            mean /= 5.0;
            CHECK(r.centers.at(0, j) == doctest::Approx(mean).epsilon(1e-12));
        }
    }
    SUBCASE("objective history is non-increasing") {
        KMeansResult r = kmeans(points, 2, 8);
        for (std::size_t i = 1; i < r.objective_history.size(); ++i)
            CHECK(r.objective_history[i] <= r.objective_history[i - 1] + 1e-12);
    }
    SUBCASE("invalid center counts are rejected") {
        CHECK_THROWS_AS(kmeans(points, 6, 8), std::domain_error);
        CHECK_THROWS_AS(kmeans(points, 0, 8), std::domain_error);
    }
}

TEST_CASE("kmeans is deterministic in the seed") {
    Rng rng(66);
    Matrix points(8, 2);
    for (std::size_t i = 0; i < 8; ++i) {
        points.at(i, 0) = rng.gaussian();
        points.at(i, 1) = rng.gaussian();
    }
    KMeansResult a = kmeans(points, 3, 500);
    KMeansResult b = kmeans(points, 3, 500);
    CHECK(a.centers.data == b.centers.data);
    CHECK(a.assignment == b.assignment);
    CHECK(a.objective_history == b.objective_history);
}

namespace {

std::vector<PrototypeSet> sample_sets() {
    Rng rng(17);
    std::vector<PrototypeSet> sets;
    for (int c = 0; c < 3; ++c) {
        PrototypeSet set;
        set.client_id = c;
        for (int k = 0; k < 4; ++k)
            for (int rep = 0; rep < 2; ++rep) {
                Prototype p;
                p.client_id = c;
                p.class_id = k;
                p.vec = rng.gaussian_vector(5);
                set.prototypes.push_back(std::move(p));
            }
        sets.push_back(std::move(set));
    }
    return sets;
}

}  // namespace

TEST_CASE("dp noise with q = 0 or s = 0 is bit-identical") {
    std::vector<PrototypeSet> sets = sample_sets();
    for (auto [q, s] : std::vector<std::pair<double, double>>{{0.0, 1.0}, {0.5, 0.0}}) {
        std::vector<PrototypeSet> out = apply_dp_noise(sets, q, s, 999);
        REQUIRE(out.size() == sets.size());
        for (std::size_t c = 0; c < sets.size(); ++c)
            for (std::size_t i = 0; i < sets[c].prototypes.size(); ++i)
                CHECK(out[c].prototypes[i].vec == sets[c].prototypes[i].vec);
    }
}

TEST_CASE("dp noise std lands within 2% of q*s over 1e5 coordinates") {
    PrototypeSet big;
    big.client_id = 0;
    Prototype p;
    p.client_id = 0;
    p.class_id = 0;
    p.vec.assign(100000, 1.5);
    big.prototypes.push_back(std::move(p));

    std::vector<PrototypeSet> out = apply_dp_noise({big}, 0.2, 0.05, 31337);
    const std::vector<double>& noisy = out[0].prototypes[0].vec;
    double mean = 0.0;
    for (double v : noisy) mean += v - 1.5;
    mean /= static_cast<double>(noisy.size());
    double var = 0.0;
    for (double v : noisy) var += (v - 1.5 - mean) * (v - 1.5 - mean);
    var /= static_cast<double>(noisy.size() - 1);
    const double std_dev = std::sqrt(var);
    CHECK(std_dev > 0.01 * 0.98);
    CHECK(std_dev < 0.01 * 1.02);
}

TEST_CASE("dp noise is seed-deterministic and rejects negative parameters") {
    std::vector<PrototypeSet> sets = sample_sets();
    std::vector<PrototypeSet> a = apply_dp_noise(sets, 0.2, 0.05, 5);
    std::vector<PrototypeSet> b = apply_dp_noise(sets, 0.2, 0.05, 5);
    std::vector<PrototypeSet> c = apply_dp_noise(sets, 0.2, 0.05, 6);
    bool all_equal = true, any_diff = false;
    for (std::size_t i = 0; i < sets.size(); ++i)
        for (std::size_t j = 0; j < sets[i].prototypes.size(); ++j) {
            all_equal &= a[i].prototypes[j].vec == b[i].prototypes[j].vec;
            any_diff |= a[i].prototypes[j].vec != c[i].prototypes[j].vec;
        }
    CHECK(all_equal);
    CHECK(any_diff);
    CHECK_THROWS_AS(apply_dp_noise(sets, -0.1, 0.05, 5), ConfigError);
    CHECK_THROWS_AS(apply_dp_noise(sets, 0.1, -0.05, 5), ConfigError);
}

TEST_CASE("divergence of identical prototypes is zero") {
    std::vector<PrototypeSet> sets(3);
    for (int c = 0; c < 3; ++c) {
        sets[c].client_id = c;
        Prototype p;
        p.client_id = c;
        p.class_id = 0;
        p.vec = {1.0, -2.0};
        sets[c].prototypes.push_back(p);
    }
    PrototypeDataset ds = build_prototype_dataset(sets, 2, 1);
    DivergenceReport rep = divergence_stats(ds);
    CHECK(rep.max_delta == 0.0);
    for (const auto& [key, delta] : rep.delta) CHECK(delta == 0.0);
}

TEST_CASE("divergence of [0,0] and [2,0] is 1 for both clients") {
    std::vector<PrototypeSet> sets(2);
    sets[0].client_id = 0;
    sets[0].prototypes.push_back({0, 0, {0.0, 0.0}});
    sets[1].client_id = 1;
    sets[1].prototypes.push_back({1, 0, {2.0, 0.0}});
    PrototypeDataset ds = build_prototype_dataset(sets, 2, 1);
    DivergenceReport rep = divergence_stats(ds);
    CHECK(rep.class_mean.at(0) == std::vector<double>{1.0, 0.0});
    CHECK(rep.delta.at({0, 0}) == 1.0);
    CHECK(rep.delta.at({1, 0}) == 1.0);
    CHECK(rep.client_avg_delta.at(0) == 1.0);
    CHECK(rep.max_delta == 1.0);
}

TEST_CASE("divergence matches a brute-force recomputation on a random instance") {
    std::vector<PrototypeSet> sets = sample_sets();  // 3 clients, 4 classes, 2 each
    sets.push_back(PrototypeSet{3, {{3, 1, {9, 9, 9, 9, 9}}}, {}});
    PrototypeDataset ds = build_prototype_dataset(sets, 5, 4);
    DivergenceReport rep = divergence_stats(ds);

    // Representative of (client, class) = that client's class mean.
    std::map<std::pair<int, int>, std::vector<double>> reps;
    for (const PrototypeSet& set : sets) {
        std::map<int, std::pair<std::vector<double>, int>> acc;
        for (const Prototype& p : set.prototypes) {
            auto& slot = acc[p.class_id];
            if (slot.first.empty()) slot.first.assign(5, 0.0);
            for (int j = 0; j < 5; ++j) slot.first[j] += p.vec[j];
            slot.second += 1;
        }
        for (auto& [k, slot] : acc) {
            for (double& v : slot.first) v /= slot.second;
            reps[{set.client_id, k}] = slot.first;
        }
    }
    double max_delta = 0.0;
    for (int k = 0; k < 4; ++k) {
        std::vector<double> mean(5, 0.0);
        int contributors = 0;
        for (const auto& [key, rep_vec] : reps)
            if (key.second == k) {
                for (int j = 0; j < 5; ++j) mean[j] += rep_vec[j];
                ++contributors;
            }
        if (contributors == 0) continue;
        for (double& v : mean) v /= contributors;
        for (int j = 0; j < 5; ++j)
            CHECK(std::abs(rep.class_mean.at(k)[j] - mean[j]) < 1e-12);
        for (const auto& [key, rep_vec] : reps) {
            if (key.second != k) continue;
            double d = 0.0;
            for (int j = 0; j < 5; ++j)
                d += (rep_vec[j] - mean[j]) * (rep_vec[j] - mean[j]);
            d = std::sqrt(d);
            CHECK(std::abs(rep.delta.at(key) - d) < 1e-12);
            max_delta = std::max(max_delta, d);
        }
    }
    CHECK(std::abs(rep.max_delta - max_delta) < 1e-12);
}

TEST_CASE("divergence excludes classes no client covers") {
    std::vector<PrototypeSet> sets(2);
    sets[0].client_id = 0;
    sets[0].prototypes.push_back({0, 0, {1.0}});
    sets[1].client_id = 1;
    sets[1].prototypes.push_back({1, 0, {3.0}});
    PrototypeDataset ds = build_prototype_dataset(sets, 1, 3);
    DivergenceReport rep = divergence_stats(ds);
    CHECK(rep.excluded_classes == std::vector<int>{1, 2});
    CHECK(rep.classes == std::vector<int>{0});
}

TEST_CASE("prototype dataset unions uploads and records gaps") {
    std::vector<PrototypeSet> sets(2);
    sets[0].client_id = 0;
    sets[0].prototypes.push_back({0, 0, {1.0, 2.0}});
    sets[0].empty_classes = {1};
    sets[1].client_id = 1;
    sets[1].prototypes.push_back({1, 0, {0.0, 1.0}});
    sets[1].prototypes.push_back({1, 1, {5.0, 5.0}});
    PrototypeDataset ds = build_prototype_dataset(sets, 2, 2);
    CHECK(ds.prototypes.size() == 3);
    CHECK(ds.contributing_clients == std::vector<int>{0, 1});
    REQUIRE(ds.missing.size() == 1);
    CHECK(ds.missing[0] == std::pair<int, int>{0, 1});
}

TEST_CASE("prototype payload bytes equal the serialized container size") {
    std::vector<PrototypeSet> sets = sample_sets();
    for (const PrototypeSet& set : sets) {
        EmbFile file = prototypes_to_emb({set}, 5, 4, 3);
        std::string bytes = serialize_emb(file);
        CHECK(prototype_payload_bytes(set, 5) == bytes.size());
    }
}
