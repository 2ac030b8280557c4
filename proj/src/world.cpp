#include "mpft/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "mpft/rng.hpp"

namespace mpft {
namespace {

// Seed-stream tags; every random decision in world generation draws from its
// own derived stream so unrelated settings never shift each other's draws.
enum : std::uint64_t {
    kStreamMeans = 1,
    kStreamShift = 2,
    kStreamMixing = 3,
    kStreamNoise = 4,
    kStreamShards = 5,
    kStreamPartner = 6,
    kStreamSplit = 7,
    kStreamEncoder = 8,
};

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.data) v = rng.gaussian(0.0, stddev);
    return m;
}

// Row-orthonormal matrix via Gram-Schmidt on a seeded Gaussian draw.
Matrix orthogonal_matrix(Rng& rng, std::size_t dim) {
    Matrix q(dim, dim);
    for (std::size_t r = 0; r < dim; ++r) {
        while (true) {
            for (std::size_t c = 0; c < dim; ++c) q.at(r, c) = rng.gaussian();
            for (std::size_t p = 0; p < r; ++p) {
                double proj = 0.0;
                for (std::size_t c = 0; c < dim; ++c) proj += q.at(r, c) * q.at(p, c);
                for (std::size_t c = 0; c < dim; ++c) q.at(r, c) -= proj * q.at(p, c);
            }
            double norm = std::sqrt(squared_norm(q.row(r)));
            if (norm > 1e-8) {
                for (std::size_t c = 0; c < dim; ++c) q.at(r, c) /= norm;
                break;
            }
        }
    }
    return q;
}

std::vector<double> axis_scales(std::size_t dim, double sigma_w) {
    std::vector<double> s(dim, sigma_w);
    if (dim > 1) {
        for (std::size_t j = 0; j < dim; ++j)
            s[j] = sigma_w * (0.5 + static_cast<double>(j) / static_cast<double>(dim - 1));
    }
    return s;
}

struct DomainParams {
    std::vector<double> shift;
    Matrix mixing;
};

std::vector<double> draw_sample(Rng& rng, std::span<const double> mean,
                                const DomainParams& dom, std::span<const double> scales) {
    const std::size_t d = mean.size();
    std::vector<double> eps(d);
    for (std::size_t j = 0; j < d; ++j) eps[j] = scales[j] * rng.gaussian();
    std::vector<double> x = matvec(dom.mixing, eps);
    for (std::size_t j = 0; j < d; ++j) x[j] += mean[j] + dom.shift[j];
    return x;
}

}  // namespace

void WorldConfig::validate() const {
    if (domains < 1) throw ConfigError("world: domains must be >= 1");
    if (classes < 2) throw ConfigError("world: classes must be >= 2");
    if (input_dim == 0 || emb_dim == 0) throw ConfigError("world: dimensions must be positive");
    if (samples_per_class < 1) throw ConfigError("world: samples_per_class must be >= 1");
    if (domain_shift < 0.0) throw ConfigError("world: domain_shift must be >= 0");
    if (within_class_noise < 0.0) throw ConfigError("world: within_class_noise must be >= 0");
    if (mixed_ratio < 0.0 || mixed_ratio > 1.0)
        throw ConfigError("world: mixed_ratio must be in [0, 1]");
    if (mixed_ratio > 0.0 && domains < 2)
        throw ConfigError("world: mixed_ratio > 0 requires at least 2 domains");
    if (shards_per_domain < 1) throw ConfigError("world: shards_per_domain must be >= 1");
    if (encoder == EncoderKind::identity && input_dim != emb_dim)
        throw ConfigError("world: identity encoder requires input_dim == emb_dim");
}

FrozenEncoder FrozenEncoder::identity(std::size_t dim) {
    FrozenEncoder e;
    e.kind_ = EncoderKind::identity;
    e.d_in_ = dim;
    e.d_emb_ = dim;
    return e;
}

FrozenEncoder FrozenEncoder::mlp2(std::size_t d_in, std::size_t d_emb, std::uint64_t seed) {
    Rng rng(derive_seed(seed, kStreamEncoder));
    FrozenEncoder e;
    e.kind_ = EncoderKind::mlp2;
    e.d_in_ = d_in;
    e.d_emb_ = d_emb;
    e.w1_ = gaussian_matrix(rng, d_emb, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)));
    e.b1_.resize(d_emb);
    for (double& v : e.b1_) v = rng.gaussian(0.0, 0.1);
    e.w2_ = gaussian_matrix(rng, d_emb, d_emb, 1.0 / std::sqrt(static_cast<double>(d_emb)));
    e.b2_.resize(d_emb);
    for (double& v : e.b2_) v = rng.gaussian(0.0, 0.1);
    return e;
}

FrozenEncoder FrozenEncoder::mlp2_from(Matrix w1, std::vector<double> b1, Matrix w2,
                                       std::vector<double> b2) {
    if (w1.rows != b1.size() || w2.rows != b2.size() || w2.cols != w1.rows)
        throw ConfigError("encoder: inconsistent mlp2 shapes");
    FrozenEncoder e;
    e.kind_ = EncoderKind::mlp2;
    e.d_in_ = w1.cols;
    e.d_emb_ = w2.rows;
    e.w1_ = std::move(w1);
    e.b1_ = std::move(b1);
    e.w2_ = std::move(w2);
    e.b2_ = std::move(b2);
    return e;
}

std::vector<double> FrozenEncoder::encode(std::span<const double> x) const {
    if (x.size() != d_in_) throw ConfigError("encoder: input dimension mismatch");
    if (kind_ == EncoderKind::identity) return {x.begin(), x.end()};
    std::vector<double> h = matvec(w1_, x);
    for (std::size_t j = 0; j < h.size(); ++j) h[j] = std::tanh(h[j] + b1_[j]);
    std::vector<double> z = matvec(w2_, h);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] = std::tanh(z[j] + b2_[j]);
    return z;
}

std::vector<double> FrozenEncoder::input_grad(std::span<const double> x,
                                              std::span<const double> upstream) const {
    if (x.size() != d_in_ || upstream.size() != d_emb_)
        throw ConfigError("encoder: input_grad dimension mismatch");
    if (kind_ == EncoderKind::identity) return {upstream.begin(), upstream.end()};
    std::vector<double> pre1 = matvec(w1_, x);
    std::vector<double> h(pre1.size());
    for (std::size_t j = 0; j < h.size(); ++j) h[j] = std::tanh(pre1[j] + b1_[j]);
    std::vector<double> pre2 = matvec(w2_, h);
    // dL/dpre2 = upstream * (1 - tanh^2)
    std::vector<double> g2(pre2.size());
    for (std::size_t j = 0; j < g2.size(); ++j) {
        double t = std::tanh(pre2[j] + b2_[j]);
        g2[j] = upstream[j] * (1.0 - t * t);
    }
    std::vector<double> gh = matvec_transposed(w2_, g2);
    for (std::size_t j = 0; j < gh.size(); ++j) gh[j] *= 1.0 - h[j] * h[j];
    return matvec_transposed(w1_, gh);
}

std::uint64_t FrozenEncoder::param_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    std::uint64_t meta[3] = {static_cast<std::uint64_t>(kind_), d_in_, d_emb_};
    mix(meta, sizeof(meta));
    mix(w1_.data.data(), w1_.data.size() * sizeof(double));
    mix(b1_.data(), b1_.size() * sizeof(double));
    mix(w2_.data.data(), w2_.data.size() * sizeof(double));
    mix(b2_.data(), b2_.size() * sizeof(double));
    return h;
}

SplitIndices split_dataset(const std::vector<int>& labels, int num_classes,
                           std::array<double, 3> ratios, std::uint64_t seed) {
    for (double r : ratios)
        if (!(r > 0.0)) throw ConfigError("split: ratios must be positive");
    double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split: ratios must sum to 1");
    for (int label : labels)
        if (label < 0 || label >= num_classes)
            throw ConfigError("split: label out of range");

    SplitIndices out;
    for (int k = 0; k < num_classes; ++k) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == k) idx.push_back(i);
        if (idx.empty()) continue;
        Rng rng(derive_seed(seed, kStreamSplit, static_cast<std::uint64_t>(k)));
        rng.shuffle(idx);
        const std::size_t n = idx.size();
        std::size_t n_test = static_cast<std::size_t>(
            std::llround(ratios[1] * static_cast<double>(n)));
        n_test = std::min(n_test, n);
        std::size_t n_val = static_cast<std::size_t>(
            std::llround(ratios[2] * static_cast<double>(n)));
        n_val = std::min(n_val, n - n_test);
        std::size_t pos = 0;
        for (std::size_t i = 0; i < n_test; ++i) out.test.push_back(idx[pos++]);
        for (std::size_t i = 0; i < n_val; ++i) out.validation.push_back(idx[pos++]);
        for (; pos < n; ++pos) out.train.push_back(idx[pos]);
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.test.begin(), out.test.end());
    std::sort(out.validation.begin(), out.validation.end());
    return out;
}

Federation generate_federation(const WorldConfig& config) {
    config.validate();
    const int N = config.domains;
    const int K = config.classes;
    const int m = config.shards_per_domain;
    const std::size_t d = config.input_dim;

    Rng mean_rng(derive_seed(config.seed, kStreamMeans));
    std::vector<std::vector<double>> class_means(K);
    for (int k = 0; k < K; ++k) class_means[k] = mean_rng.gaussian_vector(d);

    std::vector<DomainParams> domains(N);
    for (int i = 0; i < N; ++i) {
        Rng shift_rng(derive_seed(config.seed, kStreamShift, static_cast<std::uint64_t>(i)));
        domains[i].shift = shift_rng.gaussian_vector(d, config.domain_shift);
        Rng mix_rng(derive_seed(config.seed, kStreamMixing, static_cast<std::uint64_t>(i)));
        domains[i].mixing = orthogonal_matrix(mix_rng, d);
    }

    const std::vector<double> scales = axis_scales(d, config.within_class_noise);

    Federation fed;
    fed.config = config;
    fed.num_domains = N;
    fed.encoder = config.encoder == EncoderKind::identity
                      ? FrozenEncoder::identity(d)
                      : FrozenEncoder::mlp2(d, config.emb_dim, config.seed);
    fed.clients.resize(static_cast<std::size_t>(N) * m);

    for (int dom = 0; dom < N; ++dom) {
        // Per-class pool for the whole domain, then a seeded shard partition
        // that keeps per-class counts equal across shards.
        std::vector<std::vector<std::vector<double>>> pool(K);
        for (int k = 0; k < K; ++k) {
            Rng rng(derive_seed(config.seed, kStreamNoise,
                                static_cast<std::uint64_t>(dom), static_cast<std::uint64_t>(k)));
            pool[k].reserve(static_cast<std::size_t>(m) * config.samples_per_class);
            for (int s = 0; s < m * config.samples_per_class; ++s)
                pool[k].push_back(draw_sample(rng, class_means[k], domains[dom], scales));
        }
        for (int shard = 0; shard < m; ++shard) {
            DomainDataset& ds = fed.clients[static_cast<std::size_t>(dom) * m + shard];
            ds.client_id = dom * m + shard;
            ds.home_domain = dom;
        }
        for (int k = 0; k < K; ++k) {
            std::vector<std::size_t> order(pool[k].size());
            std::iota(order.begin(), order.end(), 0);
            Rng rng(derive_seed(config.seed, kStreamShards,
                                static_cast<std::uint64_t>(dom), static_cast<std::uint64_t>(k)));
            rng.shuffle(order);
            for (int shard = 0; shard < m; ++shard) {
                DomainDataset& ds = fed.clients[static_cast<std::size_t>(dom) * m + shard];
                for (int s = 0; s < config.samples_per_class; ++s) {
                    Sample sample;
                    sample.x = std::move(pool[k][order[shard * config.samples_per_class + s]]);
                    sample.label = k;
                    sample.origin_domain = dom;
                    ds.samples.push_back(std::move(sample));
                }
            }
        }
    }

    if (config.mixed_ratio > 0.0) {
        for (DomainDataset& ds : fed.clients) {
            const int partner = (ds.home_domain + 1) % N;
            Rng rng(derive_seed(config.seed, kStreamPartner,
                                static_cast<std::uint64_t>(ds.client_id)));
            const std::size_t n = ds.samples.size();
            auto count = static_cast<std::size_t>(
                std::llround(config.mixed_ratio * static_cast<double>(n)));
            count = std::min(count, n);
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            for (std::size_t i = 0; i < count; ++i) {
                Sample& s = ds.samples[order[i]];
                s.x = draw_sample(rng, class_means[s.label], domains[partner], scales);
                s.origin_domain = partner;
            }
        }
    }

    for (DomainDataset& ds : fed.clients) {
        std::vector<int> labels;
        labels.reserve(ds.samples.size());
        for (const Sample& s : ds.samples) labels.push_back(s.label);
        ds.split = split_dataset(labels, K, {0.7, 0.2, 0.1},
                                 derive_seed(config.seed, kStreamSplit,
                                             static_cast<std::uint64_t>(ds.client_id)));
    }
    return fed;
}

EmbeddedSplit embed_split(const FrozenEncoder& encoder, const DomainDataset& ds,
                          SplitPart part) {
    const std::vector<std::size_t>* idx = &ds.split.train;
    if (part == SplitPart::test) idx = &ds.split.test;
    if (part == SplitPart::validation) idx = &ds.split.validation;

    EmbeddedSplit out;
    out.embeddings = Matrix(idx->size(), encoder.d_emb());
    out.labels.reserve(idx->size());
    out.origin_domains.reserve(idx->size());
    for (std::size_t r = 0; r < idx->size(); ++r) {
        const Sample& s = ds.samples[(*idx)[r]];
        std::vector<double> z = encoder.encode(s.x);
        std::copy(z.begin(), z.end(), out.embeddings.row(r).begin());
        out.labels.push_back(s.label);
        out.origin_domains.push_back(s.origin_domain);
    }
    return out;
}

ImportedWorld import_embeddings(const std::string& path, std::uint64_t split_seed) {
    EmbFile file = read_emb_file(path);
    ImportedWorld world;
    world.d_emb = file.d_emb;
    world.classes = static_cast<int>(file.num_classes);
    world.declared_clients = static_cast<int>(file.num_clients);

    std::vector<std::vector<const EmbRecord*>> grouped(file.num_clients);
    for (const EmbRecord& rec : file.records) grouped[rec.client_id].push_back(&rec);

    for (std::uint32_t c = 0; c < file.num_clients; ++c) {
        if (grouped[c].empty()) continue;
        DomainDataset ds;
        ds.client_id = static_cast<int>(c);
        ds.home_domain = static_cast<int>(c);
        std::vector<int> labels;
        for (const EmbRecord* rec : grouped[c]) {
            Sample s;
            s.x.assign(rec->values.begin(), rec->values.end());
            s.label = static_cast<int>(rec->label);
            s.origin_domain = static_cast<int>(c);
            labels.push_back(s.label);
            ds.samples.push_back(std::move(s));
        }
        ds.split = split_dataset(labels, world.classes, {0.7, 0.2, 0.1},
                                 derive_seed(split_seed, kStreamSplit, c));
        world.clients.push_back(std::move(ds));
    }
    return world;
}

void export_embeddings(const std::vector<DomainDataset>& clients, int num_classes,
                       const std::string& path) {
    EmbFile file;
    file.num_classes = static_cast<std::uint32_t>(num_classes);
    std::uint32_t max_client = 0;
    std::size_t d_emb = 0;
    for (const DomainDataset& ds : clients) {
        max_client = std::max(max_client, static_cast<std::uint32_t>(ds.client_id));
        for (const Sample& s : ds.samples) {
            if (d_emb == 0) d_emb = s.x.size();
            if (s.x.size() != d_emb)
                throw ConfigError("export: inconsistent embedding dimensions");
            EmbRecord rec;
            rec.client_id = static_cast<std::uint32_t>(ds.client_id);
            rec.label = static_cast<std::uint32_t>(s.label);
            rec.values.assign(s.x.begin(), s.x.end());
            file.records.push_back(std::move(rec));
        }
    }
    if (d_emb == 0) throw ConfigError("export: no samples to export");
    file.d_emb = static_cast<std::uint32_t>(d_emb);
    file.num_clients = max_client + 1;
    write_emb_file(file, path);
}

}  // namespace mpft
