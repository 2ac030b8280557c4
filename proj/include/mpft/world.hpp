#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpft/emb_io.hpp"
#include "mpft/tensor.hpp"

namespace mpft {

struct Sample {
    std::vector<double> x;  // raw input, length d_in
    int label = 0;          // class index in [0, K)
    int origin_domain = 0;  // domain the sample was drawn from
};

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    std::vector<std::size_t> validation;
};

struct DomainDataset {
    int client_id = 0;
    int home_domain = 0;
    std::vector<Sample> samples;
    SplitIndices split;
};

enum class EncoderKind { identity, mlp2 };

/// Deterministic stand-in for a pretrained image encoder. Parameters are a
/// pure function of the seed and immutable after construction. The mlp2 kind
/// is tanh(W2 tanh(W1 x + b1) + b2); tanh keeps the inversion objective
/// smooth and bounded.
class FrozenEncoder {
public:
    FrozenEncoder() = default;  // zero-dimensional identity; assign before use

    static FrozenEncoder identity(std::size_t dim);
    static FrozenEncoder mlp2(std::size_t d_in, std::size_t d_emb, std::uint64_t seed);
    static FrozenEncoder mlp2_from(Matrix w1, std::vector<double> b1, Matrix w2,
                                   std::vector<double> b2);

    std::vector<double> encode(std::span<const double> x) const;

    /// Exact chain-rule pullback of an embedding-space gradient to input space.
    std::vector<double> input_grad(std::span<const double> x,
                                   std::span<const double> upstream) const;

    EncoderKind kind() const { return kind_; }
    std::size_t d_in() const { return d_in_; }
    std::size_t d_emb() const { return d_emb_; }

    /// FNV-1a over parameter bytes; tests use it to prove immutability.
    std::uint64_t param_hash() const;

private:
    EncoderKind kind_ = EncoderKind::identity;
    std::size_t d_in_ = 0;
    std::size_t d_emb_ = 0;
    Matrix w1_, w2_;
    std::vector<double> b1_, b2_;
};

struct WorldConfig {
    int domains = 6;                  // N
    int classes = 10;                 // K
    std::size_t input_dim = 64;      // d_in
    std::size_t emb_dim = 32;        // d_emb
    int samples_per_class = 20;      // per class per client
    double domain_shift = 1.2;       // sigma_d
    double within_class_noise = 0.4; // sigma_w
    double mixed_ratio = 0.0;        // mr in [0, 1]
    int shards_per_domain = 1;       // m >= 1
    std::uint64_t seed = 0;
    EncoderKind encoder = EncoderKind::mlp2;

    int num_clients() const { return domains * shards_per_domain; }
    void validate() const;  // throws ConfigError
};

struct Federation {
    WorldConfig config;
    FrozenEncoder encoder;
    std::vector<DomainDataset> clients;
    int num_domains = 0;
};

/// Builds the seeded multi-domain federation. Raw inputs follow
/// x = mu_k + delta_dom + Q_dom * (axis_scales o eps): classes share means
/// across domains, each domain adds a shift of scale sigma_d and rotates an
/// anisotropic noise pattern so domains differ in both mean and covariance.
/// With mixed_ratio > 0, round(mr * n_i) samples per client are redrawn from
/// the partner domain (home + 1 mod N) and tagged accordingly. With
/// shards_per_domain > 1 each domain pool is partitioned into disjoint
/// shards with equal per-class counts.
Federation generate_federation(const WorldConfig& config);

/// Per-class stratified split: seeded shuffle then contiguous partition.
/// Ratios are train/test/validation, must be positive and sum to 1 within
/// 1e-9; rounding remainders go to train.
SplitIndices split_dataset(const std::vector<int>& labels, int num_classes,
                           std::array<double, 3> ratios, std::uint64_t seed);

enum class SplitPart { train, test, validation };

struct EmbeddedSplit {
    Matrix embeddings;  // one row per sample
    std::vector<int> labels;
    std::vector<int> origin_domains;
};

EmbeddedSplit embed_split(const FrozenEncoder& encoder, const DomainDataset& ds,
                          SplitPart part);

struct ImportedWorld {
    std::vector<DomainDataset> clients;  // embedding-space samples
    std::size_t d_emb = 0;
    int classes = 0;
    int declared_clients = 0;
};

/// Reads an MPFT-EMB file into embedding-space datasets (use the identity
/// encoder downstream). Splits are assigned with the standard 70/20/10 rule.
ImportedWorld import_embeddings(const std::string& path, std::uint64_t split_seed = 0);

/// Writes datasets (embedding-space samples) as MPFT-EMB.
void export_embeddings(const std::vector<DomainDataset>& clients, int num_classes,
                       const std::string& path);

}  // namespace mpft
