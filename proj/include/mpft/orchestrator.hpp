#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mpft/adapter.hpp"
#include "mpft/metrics.hpp"
#include "mpft/prototypes.hpp"
#include "mpft/world.hpp"

namespace mpft {

enum class Method { mpft, local, fedavg, fedprox, proto_avg };

std::string method_name(Method m);
Method method_from_name(const std::string& name);  // throws ConfigError

struct DpConfig {
    double q = 0.0;
    double s = 0.0;
};

struct FLConfig {
    Method method = Method::mpft;
    SamplingMethod sampling = SamplingMethod::random;
    double rate = 0.3;
    int max_global_rounds = 200;
    int warmup_rounds = 10;
    int patience = 10;
    int local_epochs = 1;
    double fedprox_mu = 5.0;
    std::optional<DpConfig> dp;
    bool local_adaptation = false;  // MPFT few-shot phase
    int local_adapt_epochs = 50;
    // Per-client weighting knobs: accepted and echoed in reports, but the
    // method never consumes them.
    double alpha1 = 1.0;
    double alpha2 = 1.0;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Architecture knobs shared by every method so comparisons stay matched.
struct ModelConfig {
    AdapterKind adapter_kind = AdapterKind::bottleneck;
    std::size_t bottleneck_divisor = 4;  // hidden = max(1, d_emb / divisor)
    double residual_weight = 0.2;
    HeadMode head_mode = HeadMode::cosine;
    double temperature = 100.0;
    int variants_per_class = 4;
};

struct TransmissionEvent {
    std::string event;  // "uplink" or "downlink"
    int sender = 0;     // client id, -1 for server
    int receiver = 0;
    std::uint64_t bytes = 0;
    int round = 0;
};

struct CommCost {
    std::uint64_t uplink = 0;
    std::uint64_t downlink = 0;
    std::uint64_t total = 0;
};

struct RunReport {
    std::string method;
    std::string sampling;
    double rate = 0.0;
    int rounds_used = 0;
    int best_round = 0;
    int stop_round = 0;
    std::vector<double> val_losses;  // one per round
    AccuracyMatrix acc;
    double ind_acc = 0.0;
    double ood_acc = 0.0;  // NaN when only one domain exists
    CommCost comm;
    double wall_time_sec = 0.0;
    DivergenceReport divergence;  // prototype methods only
    std::vector<double> global_loss_history;
    std::vector<std::vector<double>> client_loss_histories;
    FairnessReport fairness_report;
    std::vector<TransmissionEvent> transmissions;
    std::optional<DpConfig> dp;
    double alpha1 = 1.0, alpha2 = 1.0;
    std::uint64_t seed = 0;
};

struct OrchestratorConfig {
    FLConfig fl;
    TrainConfig train;
    ModelConfig model;
};

RunReport run_mpft(const Federation& fed, const OrchestratorConfig& cfg);
RunReport run_local(const Federation& fed, const OrchestratorConfig& cfg);
RunReport run_fedavg(const Federation& fed, const OrchestratorConfig& cfg);
RunReport run_fedprox(const Federation& fed, const OrchestratorConfig& cfg);
RunReport run_proto_avg(const Federation& fed, const OrchestratorConfig& cfg);
RunReport run_method(const Federation& fed, const OrchestratorConfig& cfg);

struct EarlyStopDecision {
    bool stop_now = false;
    int best_round = 0;  // 1-based round with the best loss so far
};

/// Best loss is tracked from the first round; stopping is suppressed during
/// warmup, then triggers once `patience` rounds pass without improvement.
EarlyStopDecision early_stopping(const std::vector<double>& val_loss_history,
                                 int warmup, int patience);

/// Sums the trace and asserts it equals the method's closed-form cost.
CommCost account_costs(const std::vector<TransmissionEvent>& events, Method method,
                       int rounds_used, int num_clients);

/// The closed-form per-method cost given uniform payload sizes.
std::uint64_t theoretical_cost(Method method, int rounds, int num_clients,
                               std::uint64_t adapter_bytes,
                               std::uint64_t total_prototype_bytes,
                               std::uint64_t per_round_prototype_bytes);

std::string report_to_json(const RunReport& report, bool include_wall_time = true);
void write_report_json(const RunReport& report, const std::string& path);
void write_acc_csv(const RunReport& report, const std::string& path);
void write_transmissions_jsonl(const RunReport& report, const std::string& path);

/// Runs fn(0..n-1) on up to MPFT_THREADS workers (default: hardware
/// concurrency). Results must go into caller-owned indexed slots so the
/// outcome is independent of scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

int mpft_thread_cap();

}  // namespace mpft
