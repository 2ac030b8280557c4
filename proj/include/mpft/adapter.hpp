#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mpft/prototypes.hpp"
#include "mpft/rng.hpp"
#include "mpft/tensor.hpp"
#include "mpft/world.hpp"

namespace mpft {

enum class HeadMode { linear, cosine };

/// Fixed per-class anchor matrix. Logits are similarities between the
/// adapted embedding and the anchors; cosine mode stores row-normalized
/// anchors and scales by the temperature.
struct ClassificationHead {
    Matrix anchors;  // K x d_emb
    HeadMode mode = HeadMode::cosine;
    double temperature = 100.0;

    int num_classes() const { return static_cast<int>(anchors.rows); }
    std::size_t d_emb() const { return anchors.cols; }
};

/// Per class, averages `variants_per_class` seeded unit vectors (standing in
/// for prompt-variant embeddings), then renormalizes in cosine mode.
ClassificationHead build_head(int num_classes, std::size_t d_emb, std::uint64_t seed,
                              int variants_per_class = 4,
                              HeadMode mode = HeadMode::cosine,
                              double temperature = 100.0);

ClassificationHead head_from_anchors(Matrix anchors, HeadMode mode,
                                     double temperature = 100.0);

enum class AdapterKind { linear, bottleneck };

/// The only trainable module. linear: a = W e + b. bottleneck:
/// a = rho * (W2 relu(W1 e + b1) + b2) + (1 - rho) * e.
struct Adapter {
    AdapterKind kind = AdapterKind::linear;
    std::size_t d_emb = 0;
    std::size_t hidden = 0;        // bottleneck only
    double residual_weight = 0.2;  // rho, bottleneck only
    Matrix w, b;                   // linear
    Matrix w1, b1, w2, b2;         // bottleneck

    static Adapter make_linear(std::size_t d_emb, std::uint64_t seed);
    static Adapter identity_linear(std::size_t d_emb);
    static Adapter make_bottleneck(std::size_t d_emb, std::size_t hidden, double rho,
                                   std::uint64_t seed);

    std::vector<Matrix*> params();
    std::vector<const Matrix*> params() const;
    std::size_t param_count() const;
};

std::vector<double> flatten(const Adapter& adapter);
void unflatten(Adapter& adapter, std::span<const double> values);

/// Frobenius distance between two adapters of identical shape.
double param_distance(const Adapter& a, const Adapter& b);

std::vector<double> adapter_forward(const Adapter& adapter, std::span<const double> e);
std::vector<double> forward(const Adapter& adapter, const ClassificationHead& head,
                            std::span<const double> e);

struct TrainConfig {
    double learning_rate = 0.001;
    std::size_t batch_size = 32;  // 0 means full batch
    int max_epochs = 200;
    double variance_threshold = 0.001;  // <= 0 disables the variance stop
    int variance_window = 5;
    OptimizerKind optimizer = OptimizerKind::adam;
    std::optional<double> grad_clip = 1.0;
    std::uint64_t seed = 0;
    double kd_weight = 0.0;  // beta
    int few_shot = 5;        // F

    void validate() const;  // throws ConfigError
};

struct TrainLog {
    std::vector<double> losses;  // pre-step epoch means of the full objective
    std::vector<double> ce_losses;
    std::vector<double> kd_losses;
    std::vector<double> grad_sq_norms;  // squared global norm, pre-clip
    double final_loss = 0.0;            // full-data objective after training
    int epochs_used = 0;
    bool stopped_by_variance = false;
};

struct LossBreakdown {
    double total = 0.0;
    double ce = 0.0;
    double kd = 0.0;
    double prox = 0.0;
};

/// Mean objective and (optionally) parameter gradients over a batch:
/// CE + kd_weight * KL(softmax(teacher) || softmax(student))
/// + (prox_mu / 2) * ||A - prox_ref||^2.
LossBreakdown adapter_loss_and_grad(const Adapter& adapter, const ClassificationHead& head,
                                    const Matrix& x, const std::vector<int>& y,
                                    double kd_weight, const Adapter* kd_teacher,
                                    const Adapter* prox_ref, double prox_mu,
                                    std::vector<Matrix>* grads);

/// Mini-batch training of the adapter against a frozen head. Stops when the
/// variance of the last variance_window epoch losses drops below
/// variance_threshold, or at max_epochs. An external shuffle stream keeps
/// multi-round callers bit-reproducible; when absent one is derived from
/// config.seed.
TrainLog fit(Adapter& adapter, const ClassificationHead& head, const Matrix& x,
             const std::vector<int>& y, const TrainConfig& config,
             const Adapter* kd_teacher = nullptr, const Adapter* prox_ref = nullptr,
             double prox_mu = 0.0, Rng* shuffle_rng = nullptr);

struct GlobalTrainResult {
    Adapter adapter;
    TrainLog log;
};

/// Server-side optimization over the prototype dataset. Every prototype is
/// an independent training point; nothing is averaged across clients.
GlobalTrainResult train_global_adapter(const PrototypeDataset& dataset,
                                       const ClassificationHead& head,
                                       const Adapter& init, const TrainConfig& config);

/// Smoothness constant estimate for the linear adapter / linear head
/// configuration: L = 0.5 * sigma_max(H)^2 * max ||e||^2.
double lipschitz_bound(const PrototypeDataset& dataset, const ClassificationHead& head,
                       AdapterKind kind = AdapterKind::linear);

/// Largest singular value via power iteration on H^T H.
double spectral_norm(const Matrix& m);

/// Per class, min(F, available) samples drawn uniformly without replacement.
EmbeddedSplit few_shot_select(const EmbeddedSplit& data, int num_classes, int few_shot,
                              std::uint64_t seed);

/// Mean over rows of KL(softmax(global row) || softmax(local row)).
double kd_loss(const Matrix& global_logits, const Matrix& local_logits);

struct LocalAdaptResult {
    Adapter adapter;
    TrainLog log;
};

/// Few-shot adaptation started from the global adapter, with the frozen
/// global adapter as KD teacher (weight beta from config.kd_weight).
LocalAdaptResult local_adapt(const Adapter& global, const ClassificationHead& head,
                             const Matrix& x, const std::vector<int>& y,
                             const TrainConfig& config);

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t count = 0;
};

/// Mean cross-entropy and argmax accuracy (ties resolve to the lowest class).
EvalResult evaluate(const Adapter& adapter, const ClassificationHead& head,
                    const Matrix& x, const std::vector<int>& y);

// Adapter checkpoint wire format, little-endian: magic "MPFTADP1", u32 kind,
// u32 d_emb, u32 hidden, f32 residual_weight, u32 param_count, f32 params.
inline constexpr char kAdpMagic[8] = {'M', 'P', 'F', 'T', 'A', 'D', 'P', '1'};

std::string serialize_adapter(const Adapter& adapter);
Adapter deserialize_adapter(const std::string& bytes);  // throws ParseError
void write_adapter_file(const Adapter& adapter, const std::string& path);
Adapter read_adapter_file(const std::string& path);

/// Exact downlink payload size of one adapter broadcast.
std::uint64_t adapter_payload_bytes(const Adapter& adapter);

}  // namespace mpft
