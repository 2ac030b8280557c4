#include "mpft/orchestrator.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace mpft {
namespace {

enum : std::uint64_t {
    kStreamSampling = 61,
    kStreamDpSeed = 62,
    kStreamServerInit = 63,
    kStreamHeadSeed = 64,
    kStreamClientShuffle = 65,
    kStreamFewShotSel = 66,
    kStreamServerTrain = 67,
};

constexpr int kServer = -1;

using ordered_json = nlohmann::ordered_json;

}  // namespace

std::string method_name(Method m) {
    switch (m) {
        case Method::mpft: return "mpft";
        case Method::local: return "local";
        case Method::fedavg: return "fedavg";
        case Method::fedprox: return "fedprox";
        case Method::proto_avg: return "proto_avg";
    }
    throw ConfigError("unknown method");
}

Method method_from_name(const std::string& name) {
    if (name == "mpft") return Method::mpft;
    if (name == "local") return Method::local;
    if (name == "fedavg") return Method::fedavg;
    if (name == "fedprox") return Method::fedprox;
    if (name == "proto_avg") return Method::proto_avg;
    throw ConfigError("fl.method: unknown method '" + name + "'");
}

void FLConfig::validate() const {
    if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("fl.rate: must be in (0, 1]");
    if (max_global_rounds < 1) throw ConfigError("fl.max_global_rounds: must be >= 1");
    if (warmup_rounds < 0) throw ConfigError("fl.warmup_rounds: must be >= 0");
    if (patience < 0) throw ConfigError("fl.patience: must be >= 0");
    if (local_epochs < 1) throw ConfigError("fl.local_epochs: must be >= 1");
    if (fedprox_mu < 0.0) throw ConfigError("fl.fedprox_mu: must be >= 0");
    if (local_adapt_epochs < 1) throw ConfigError("fl.local_adapt_epochs: must be >= 1");
    if (dp && (dp->q < 0.0 || dp->s < 0.0))
        throw ConfigError("fl.dp: q and s must be >= 0");
}

int mpft_thread_cap() {
    const char* env = std::getenv("MPFT_THREADS");
    if (env && *env) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end && *end == '\0' && v >= 1) return static_cast<int>(v);
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(mpft_thread_cap()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

EarlyStopDecision early_stopping(const std::vector<double>& val_loss_history,
                                 int warmup, int patience) {
    if (warmup < 0 || patience < 0)
        throw ConfigError("early_stopping: warmup and patience must be >= 0");
    EarlyStopDecision out;
    if (val_loss_history.empty()) return out;
    double best = val_loss_history[0];
    out.best_round = 1;
    for (std::size_t i = 1; i < val_loss_history.size(); ++i) {
        if (val_loss_history[i] < best) {
            best = val_loss_history[i];
            out.best_round = static_cast<int>(i) + 1;
        }
    }
    const int t = static_cast<int>(val_loss_history.size());
    out.stop_now = t > warmup && (t - out.best_round) >= patience;
    return out;
}

namespace {

struct EmbeddedFederation {
    std::vector<EmbeddedSplit> train, test, val;
    std::vector<std::size_t> train_sizes;
    std::vector<int> home;
    std::vector<EmbeddedSplit> domain_test;  // pooled per domain
    int num_domains = 0;
    int num_classes = 0;
    std::size_t d_emb = 0;
};

EmbeddedSplit concat_splits(const std::vector<const EmbeddedSplit*>& parts,
                            std::size_t d_emb) {
    std::size_t rows = 0;
    for (const auto* p : parts) rows += p->embeddings.rows;
    EmbeddedSplit out;
    out.embeddings = Matrix(rows, d_emb);
    out.labels.reserve(rows);
    out.origin_domains.reserve(rows);
    std::size_t at = 0;
    for (const auto* p : parts) {
        for (std::size_t r = 0; r < p->embeddings.rows; ++r) {
            auto src = p->embeddings.row(r);
            std::copy(src.begin(), src.end(), out.embeddings.row(at + r).begin());
            out.labels.push_back(p->labels[r]);
            out.origin_domains.push_back(
                p->origin_domains.empty() ? 0 : p->origin_domains[r]);
        }
        at += p->embeddings.rows;
    }
    return out;
}

EmbeddedFederation embed_federation(const Federation& fed) {
    EmbeddedFederation out;
    const std::size_t n = fed.clients.size();
    if (n == 0) throw ConfigError("federation has no clients");
    out.num_domains = fed.num_domains;
    out.num_classes = fed.config.classes;
    out.d_emb = fed.encoder.d_emb();
    out.train.resize(n);
    out.test.resize(n);
    out.val.resize(n);
    out.train_sizes.resize(n);
    out.home.resize(n);
    parallel_for(n, [&](std::size_t i) {
        out.train[i] = embed_split(fed.encoder, fed.clients[i], SplitPart::train);
        out.test[i] = embed_split(fed.encoder, fed.clients[i], SplitPart::test);
        out.val[i] = embed_split(fed.encoder, fed.clients[i], SplitPart::validation);
        out.train_sizes[i] = out.train[i].embeddings.rows;
        out.home[i] = fed.clients[i].home_domain;
    });
    out.domain_test.resize(out.num_domains);
    for (int d = 0; d < out.num_domains; ++d) {
        std::vector<const EmbeddedSplit*> parts;
        for (std::size_t i = 0; i < n; ++i)
            if (out.home[i] == d) parts.push_back(&out.test[i]);
        out.domain_test[d] = concat_splits(parts, out.d_emb);
        if (out.domain_test[d].embeddings.rows == 0)
            throw ConfigError("domain " + std::to_string(d) + " has no test samples");
    }
    return out;
}

Adapter make_adapter(const ModelConfig& model, std::size_t d_emb, std::uint64_t seed) {
    if (model.adapter_kind == AdapterKind::linear)
        return Adapter::make_linear(d_emb, seed);
    std::size_t hidden = std::max<std::size_t>(1, d_emb / model.bottleneck_divisor);
    return Adapter::make_bottleneck(d_emb, hidden, model.residual_weight, seed);
}

ClassificationHead make_head(const Federation& fed, const ModelConfig& model) {
    return build_head(fed.config.classes, fed.encoder.d_emb(),
                      derive_seed(fed.config.seed, kStreamHeadSeed),
                      model.variants_per_class, model.head_mode, model.temperature);
}

/// Pooled validation loss of one adapter across all clients.
double pooled_val_loss(const Adapter& adapter, const ClassificationHead& head,
                       const EmbeddedFederation& emb) {
    double num = 0.0;
    std::size_t den = 0;
    for (std::size_t i = 0; i < emb.val.size(); ++i) {
        if (emb.val[i].embeddings.rows == 0) continue;
        EvalResult r = evaluate(adapter, head, emb.val[i].embeddings, emb.val[i].labels);
        num += r.loss * static_cast<double>(r.count);
        den += r.count;
    }
    if (den == 0) throw ConfigError("no validation samples available");
    return num / static_cast<double>(den);
}

std::vector<double> per_domain_accuracy(const Adapter& adapter,
                                        const ClassificationHead& head,
                                        const EmbeddedFederation& emb) {
    std::vector<double> acc(emb.domain_test.size());
    parallel_for(emb.domain_test.size(), [&](std::size_t d) {
        acc[d] = evaluate(adapter, head, emb.domain_test[d].embeddings,
                          emb.domain_test[d].labels)
                     .accuracy;
    });
    return acc;
}

AccuracyMatrix replicated_matrix(const std::vector<double>& per_domain,
                                 const EmbeddedFederation& emb) {
    AccuracyMatrix m;
    m.acc = Matrix(emb.home.size(), per_domain.size());
    for (std::size_t i = 0; i < emb.home.size(); ++i)
        std::copy(per_domain.begin(), per_domain.end(), m.acc.row(i).begin());
    for (const auto& dt : emb.domain_test) m.n.push_back(dt.embeddings.rows);
    m.home_domain = emb.home;
    return m;
}

AccuracyMatrix per_client_matrix(const std::vector<Adapter>& adapters,
                                 const ClassificationHead& head,
                                 const EmbeddedFederation& emb) {
    AccuracyMatrix m;
    m.acc = Matrix(adapters.size(), emb.domain_test.size());
    parallel_for(adapters.size(), [&](std::size_t i) {
        for (std::size_t d = 0; d < emb.domain_test.size(); ++d)
            m.acc.at(i, d) = evaluate(adapters[i], head, emb.domain_test[d].embeddings,
                                      emb.domain_test[d].labels)
                                 .accuracy;
    });
    for (const auto& dt : emb.domain_test) m.n.push_back(dt.embeddings.rows);
    m.home_domain = emb.home;
    return m;
}

std::vector<double> column_means(const AccuracyMatrix& m) {
    std::vector<double> cols(m.acc.cols, 0.0);
    for (std::size_t i = 0; i < m.acc.rows; ++i)
        for (std::size_t j = 0; j < m.acc.cols; ++j) cols[j] += m.acc.at(i, j);
    for (double& v : cols) v /= static_cast<double>(m.acc.rows);
    return cols;
}

void finish_metrics(RunReport& rep) {
    if (rep.acc.domains() >= 2) {
        IndOod io = ind_ood(rep.acc);
        rep.ind_acc = io.ind;
        rep.ood_acc = io.ood;
    } else {
        rep.ind_acc = ind_only(rep.acc);
        rep.ood_acc = std::numeric_limits<double>::quiet_NaN();
    }
    rep.fairness_report = fairness(column_means(rep.acc));
}

struct Stopwatch {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    }
};

TrainConfig local_round_config(const OrchestratorConfig& cfg) {
    TrainConfig t = cfg.train;
    t.max_epochs = cfg.fl.local_epochs;
    t.variance_threshold = 0.0;  // fixed-epoch local rounds; rounds stop globally
    return t;
}

std::vector<Rng> client_shuffle_streams(const OrchestratorConfig& cfg, std::size_t n) {
    std::vector<Rng> streams;
    streams.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        streams.emplace_back(derive_seed(cfg.fl.seed, kStreamClientShuffle, i));
    return streams;
}

void record_uplink(RunReport& rep, int client, std::uint64_t bytes, int round) {
    rep.transmissions.push_back({"uplink", client, kServer, bytes, round});
}

void record_downlink(RunReport& rep, int client, std::uint64_t bytes, int round) {
    rep.transmissions.push_back({"downlink", kServer, client, bytes, round});
}

RunReport base_report(const OrchestratorConfig& cfg) {
    RunReport rep;
    rep.method = method_name(cfg.fl.method);
    rep.sampling = cfg.fl.sampling == SamplingMethod::mean      ? "mean"
                   : cfg.fl.sampling == SamplingMethod::cluster ? "cluster"
                                                                : "random";
    rep.rate = cfg.fl.rate;
    rep.dp = cfg.fl.dp;
    rep.alpha1 = cfg.fl.alpha1;
    rep.alpha2 = cfg.fl.alpha2;
    rep.seed = cfg.fl.seed;
    return rep;
}

Matrix average_class_prototypes(const std::vector<PrototypeSet>& sets, int num_classes,
                                std::size_t d_emb) {
    Matrix protos(num_classes, d_emb);
    std::vector<int> counts(num_classes, 0);
    for (const PrototypeSet& set : sets)
        for (const Prototype& p : set.prototypes) {
            auto row = protos.row(p.class_id);
            for (std::size_t j = 0; j < d_emb; ++j) row[j] += p.vec[j];
            ++counts[p.class_id];
        }
    for (int k = 0; k < num_classes; ++k) {
        if (counts[k] == 0)
            throw ConfigError("proto_avg: class " + std::to_string(k) +
                              " has no prototypes from any client");
        for (std::size_t j = 0; j < d_emb; ++j)
            protos.at(k, j) /= static_cast<double>(counts[k]);
    }
    return protos;
}

double nearest_prototype_accuracy(const Matrix& protos, const EmbeddedSplit& data) {
    if (data.embeddings.rows == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.embeddings.rows; ++i) {
        auto e = data.embeddings.row(i);
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < protos.rows; ++k) {
            double d = 0.0;
            auto p = protos.row(k);
            for (std::size_t j = 0; j < e.size(); ++j) {
                double diff = e[j] - p[j];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        if (static_cast<int>(best) == data.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.embeddings.rows);
}

}  // namespace

std::uint64_t theoretical_cost(Method method, int rounds, int num_clients,
                               std::uint64_t adapter_bytes,
                               std::uint64_t total_prototype_bytes,
                               std::uint64_t per_round_prototype_bytes) {
    switch (method) {
        case Method::local:
            return 0;
        case Method::mpft:
            return total_prototype_bytes +
                   static_cast<std::uint64_t>(num_clients) * adapter_bytes;
        case Method::fedavg:
        case Method::fedprox:
            return static_cast<std::uint64_t>(rounds) * num_clients * 2 * adapter_bytes;
        case Method::proto_avg:
            return static_cast<std::uint64_t>(rounds) * per_round_prototype_bytes;
    }
    throw ConfigError("unknown method");
}

CommCost account_costs(const std::vector<TransmissionEvent>& events, Method method,
                       int rounds_used, int num_clients) {
    CommCost cost;
    for (const TransmissionEvent& e : events) {
        if (e.event == "uplink")
            cost.uplink += e.bytes;
        else if (e.event == "downlink")
            cost.downlink += e.bytes;
        else
            throw std::logic_error("unknown transmission event: " + e.event);
    }
    cost.total = cost.uplink + cost.downlink;

    std::uint64_t expected = 0;
    switch (method) {
        case Method::local:
            expected = 0;
            break;
        case Method::mpft: {
            // Sum of prototype uploads plus one adapter broadcast per client.
            std::uint64_t adapter_bytes = 0;
            for (const auto& e : events)
                if (e.event == "downlink") adapter_bytes = e.bytes;
            expected = theoretical_cost(Method::mpft, 1, num_clients, adapter_bytes,
                                        cost.uplink, 0);
            break;
        }
        case Method::fedavg:
        case Method::fedprox: {
            std::uint64_t adapter_bytes = events.empty() ? 0 : events.front().bytes;
            for (const auto& e : events)
                if (e.bytes != adapter_bytes)
                    throw std::logic_error("fedavg trace has non-uniform payloads");
            expected = theoretical_cost(method, rounds_used, num_clients, adapter_bytes,
                                        0, 0);
            break;
        }
        case Method::proto_avg: {
            // Per-round volume from the first round's events.
            std::uint64_t per_round = 0;
            for (const auto& e : events)
                if (e.round == 1) per_round += e.bytes;
            expected = theoretical_cost(Method::proto_avg, rounds_used, num_clients, 0,
                                        0, per_round);
            break;
        }
    }
    if (cost.total != expected)
        throw std::logic_error("communication trace does not match the closed form: " +
                               std::to_string(cost.total) + " vs " +
                               std::to_string(expected));
    return cost;
}

RunReport run_mpft(const Federation& fed, const OrchestratorConfig& cfg) {
    Stopwatch clock;
    cfg.fl.validate();
    cfg.train.validate();
    RunReport rep = base_report(cfg);

    EmbeddedFederation emb = embed_federation(fed);
    ClassificationHead head = make_head(fed, cfg.model);
    const std::size_t n = fed.clients.size();

    // Client phase: sample prototypes, optionally perturb, upload.
    std::vector<PrototypeSet> sets(n);
    parallel_for(n, [&](std::size_t i) {
        sets[i] = sample_prototypes(cfg.fl.sampling, static_cast<int>(i), emb.train[i],
                                    emb.num_classes, cfg.fl.rate,
                                    derive_seed(cfg.fl.seed, kStreamSampling, i));
    });
    if (cfg.fl.dp)
        sets = apply_dp_noise(sets, cfg.fl.dp->q, cfg.fl.dp->s,
                              derive_seed(cfg.fl.seed, kStreamDpSeed));

    for (std::size_t i = 0; i < n; ++i)
        record_uplink(rep, static_cast<int>(i),
                      prototype_payload_bytes(sets[i], emb.d_emb), 1);

    PrototypeDataset dataset = build_prototype_dataset(sets, emb.d_emb, emb.num_classes);
    rep.divergence = divergence_stats(dataset);

    // Server phase: one round of global adapter training on the union.
    TrainConfig server = cfg.train;
    server.seed = derive_seed(cfg.fl.seed, kStreamServerTrain);
    Adapter init = make_adapter(cfg.model, emb.d_emb,
                                derive_seed(cfg.fl.seed, kStreamServerInit));
    GlobalTrainResult global = train_global_adapter(dataset, head, init, server);
    rep.global_loss_history = global.log.losses;

    for (std::size_t i = 0; i < n; ++i)
        record_downlink(rep, static_cast<int>(i), adapter_payload_bytes(global.adapter),
                        1);

    rep.rounds_used = 1;
    rep.best_round = 1;
    rep.stop_round = 1;
    rep.val_losses.push_back(pooled_val_loss(global.adapter, head, emb));

    if (cfg.fl.local_adaptation) {
        TrainConfig adapt = cfg.train;
        adapt.max_epochs = cfg.fl.local_adapt_epochs;
        adapt.variance_threshold = 0.0;
        std::vector<Adapter> adapted(n, global.adapter);
        rep.client_loss_histories.resize(n);
        parallel_for(n, [&](std::size_t i) {
            EmbeddedSplit few = few_shot_select(emb.train[i], emb.num_classes,
                                                cfg.train.few_shot,
                                                derive_seed(cfg.fl.seed, kStreamFewShotSel, i));
            TrainConfig mine = adapt;
            mine.seed = derive_seed(cfg.fl.seed, kStreamClientShuffle, i);
            LocalAdaptResult res = local_adapt(global.adapter, head, few.embeddings,
                                               few.labels, mine);
            adapted[i] = std::move(res.adapter);
            rep.client_loss_histories[i] = std::move(res.log.losses);
        });
        rep.acc = per_client_matrix(adapted, head, emb);
    } else {
        rep.acc = replicated_matrix(per_domain_accuracy(global.adapter, head, emb), emb);
    }

    finish_metrics(rep);
    rep.comm = account_costs(rep.transmissions, Method::mpft, 1, static_cast<int>(n));
    rep.wall_time_sec = clock.seconds();
    return rep;
}

RunReport run_local(const Federation& fed, const OrchestratorConfig& cfg) {
    Stopwatch clock;
    cfg.fl.validate();
    cfg.train.validate();
    RunReport rep = base_report(cfg);

    EmbeddedFederation emb = embed_federation(fed);
    ClassificationHead head = make_head(fed, cfg.model);
    const std::size_t n = fed.clients.size();

    Adapter init = make_adapter(cfg.model, emb.d_emb,
                                derive_seed(cfg.fl.seed, kStreamServerInit));
    std::vector<Rng> streams = client_shuffle_streams(cfg, n);
    std::vector<Adapter> adapters(n, init);
    rep.client_loss_histories.resize(n);
    parallel_for(n, [&](std::size_t i) {
        TrainLog log = fit(adapters[i], head, emb.train[i].embeddings,
                           emb.train[i].labels, cfg.train, nullptr, nullptr, 0.0,
                           &streams[i]);
        rep.client_loss_histories[i] = std::move(log.losses);
    });

    rep.rounds_used = 0;
    rep.best_round = 0;
    rep.stop_round = 0;
    rep.acc = per_client_matrix(adapters, head, emb);
    finish_metrics(rep);
    rep.comm = account_costs(rep.transmissions, Method::local, 0, static_cast<int>(n));
    rep.wall_time_sec = clock.seconds();
    return rep;
}

namespace {

RunReport run_averaging(const Federation& fed, const OrchestratorConfig& cfg,
                        bool proximal) {
    Stopwatch clock;
    cfg.fl.validate();
    cfg.train.validate();
    RunReport rep = base_report(cfg);

    EmbeddedFederation emb = embed_federation(fed);
    ClassificationHead head = make_head(fed, cfg.model);
    const std::size_t n = fed.clients.size();

    Adapter global = make_adapter(cfg.model, emb.d_emb,
                                  derive_seed(cfg.fl.seed, kStreamServerInit));
    const std::uint64_t adapter_bytes = adapter_payload_bytes(global);

    double total_train = 0.0;
    for (std::size_t sz : emb.train_sizes) total_train += static_cast<double>(sz);
    std::vector<double> weights(n);
    for (std::size_t i = 0; i < n; ++i)
        weights[i] = static_cast<double>(emb.train_sizes[i]) / total_train;

    TrainConfig local_cfg = local_round_config(cfg);
    std::vector<Rng> streams = client_shuffle_streams(cfg, n);
    rep.client_loss_histories.resize(n);

    Adapter best = global;
    int executed = 0;
    for (int round = 1; round <= cfg.fl.max_global_rounds; ++round) {
        const Adapter round_start = global;
        std::vector<Adapter> locals(n, round_start);
        parallel_for(n, [&](std::size_t i) {
            TrainLog log = fit(locals[i], head, emb.train[i].embeddings,
                               emb.train[i].labels, local_cfg, nullptr,
                               proximal ? &round_start : nullptr,
                               proximal ? cfg.fl.fedprox_mu : 0.0, &streams[i]);
            for (double l : log.losses) rep.client_loss_histories[i].push_back(l);
        });
        for (std::size_t i = 0; i < n; ++i)
            record_uplink(rep, static_cast<int>(i), adapter_bytes, round);

        // Dataset-size weighted average of the uploaded adapters.
        auto gp = global.params();
        for (Matrix* m : gp) std::fill(m->data.begin(), m->data.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            auto lp = locals[i].params();
            for (std::size_t t = 0; t < gp.size(); ++t)
                for (std::size_t j = 0; j < gp[t]->size(); ++j)
                    gp[t]->data[j] += weights[i] * lp[t]->data[j];
        }
        for (std::size_t i = 0; i < n; ++i)
            record_downlink(rep, static_cast<int>(i), adapter_bytes, round);

        rep.val_losses.push_back(pooled_val_loss(global, head, emb));
        rep.global_loss_history.push_back(rep.val_losses.back());
        executed = round;

        EarlyStopDecision decision =
            early_stopping(rep.val_losses, cfg.fl.warmup_rounds, cfg.fl.patience);
        if (decision.best_round == round) {
            best = global;
            rep.best_round = round;
        }
        if (decision.stop_now) break;
    }
    rep.rounds_used = executed;
    rep.stop_round = executed;

    rep.acc = replicated_matrix(per_domain_accuracy(best, head, emb), emb);
    finish_metrics(rep);
    rep.comm = account_costs(rep.transmissions,
                             proximal ? Method::fedprox : Method::fedavg, executed,
                             static_cast<int>(n));
    rep.wall_time_sec = clock.seconds();
    return rep;
}

}  // namespace

RunReport run_fedavg(const Federation& fed, const OrchestratorConfig& cfg) {
    return run_averaging(fed, cfg, false);
}

RunReport run_fedprox(const Federation& fed, const OrchestratorConfig& cfg) {
    return run_averaging(fed, cfg, true);
}

RunReport run_proto_avg(const Federation& fed, const OrchestratorConfig& cfg) {
    Stopwatch clock;
    cfg.fl.validate();
    cfg.train.validate();
    RunReport rep = base_report(cfg);
    rep.sampling = "mean";  // the baseline always uploads class means
    rep.rate = 1.0;

    EmbeddedFederation emb = embed_federation(fed);
    const std::size_t n = fed.clients.size();

    std::vector<PrototypeSet> sets(n);
    parallel_for(n, [&](std::size_t i) {
        sets[i] = mean_sampling(static_cast<int>(i), emb.train[i], emb.num_classes);
    });
    PrototypeDataset dataset = build_prototype_dataset(sets, emb.d_emb, emb.num_classes);
    rep.divergence = divergence_stats(dataset);

    Matrix global = average_class_prototypes(sets, emb.num_classes, emb.d_emb);
    const std::uint64_t down_bytes =
        emb_payload_bytes(static_cast<std::uint64_t>(emb.num_classes), emb.d_emb);

    // Pooled validation error of the nearest-prototype classifier. The
    // prototypes are static, so the loop exists for the protocol's round and
    // cost semantics.
    double val_err;
    {
        double num = 0.0;
        std::size_t den = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (emb.val[i].embeddings.rows == 0) continue;
            double acc = nearest_prototype_accuracy(global, emb.val[i]);
            num += (1.0 - acc) * static_cast<double>(emb.val[i].embeddings.rows);
            den += emb.val[i].embeddings.rows;
        }
        if (den == 0) throw ConfigError("no validation samples available");
        val_err = num / static_cast<double>(den);
    }

    int executed = 0;
    for (int round = 1; round <= cfg.fl.max_global_rounds; ++round) {
        for (std::size_t i = 0; i < n; ++i)
            record_uplink(rep, static_cast<int>(i),
                          prototype_payload_bytes(sets[i], emb.d_emb), round);
        for (std::size_t i = 0; i < n; ++i)
            record_downlink(rep, static_cast<int>(i), down_bytes, round);
        rep.val_losses.push_back(val_err);
        executed = round;
        EarlyStopDecision decision =
            early_stopping(rep.val_losses, cfg.fl.warmup_rounds, cfg.fl.patience);
        if (decision.best_round == round) rep.best_round = round;
        if (decision.stop_now) break;
    }
    rep.rounds_used = executed;
    rep.stop_round = executed;

    std::vector<double> per_domain(emb.domain_test.size());
    parallel_for(emb.domain_test.size(), [&](std::size_t d) {
        per_domain[d] = nearest_prototype_accuracy(global, emb.domain_test[d]);
    });
    rep.acc = replicated_matrix(per_domain, emb);
    finish_metrics(rep);
    rep.comm = account_costs(rep.transmissions, Method::proto_avg, executed,
                             static_cast<int>(n));
    rep.wall_time_sec = clock.seconds();
    return rep;
}

RunReport run_method(const Federation& fed, const OrchestratorConfig& cfg) {
    switch (cfg.fl.method) {
        case Method::mpft: return run_mpft(fed, cfg);
        case Method::local: return run_local(fed, cfg);
        case Method::fedavg: return run_fedavg(fed, cfg);
        case Method::fedprox: return run_fedprox(fed, cfg);
        case Method::proto_avg: return run_proto_avg(fed, cfg);
    }
    throw ConfigError("unknown method");
}

namespace {

ordered_json json_double(double v) {
    if (std::isnan(v)) return nullptr;
    return v;
}

}  // namespace

std::string report_to_json(const RunReport& rep, bool include_wall_time) {
    ordered_json j;
    j["method"] = rep.method;
    j["sampling"] = rep.sampling;
    j["rate"] = rep.rate;
    j["seed"] = rep.seed;
    j["rounds_used"] = rep.rounds_used;
    j["best_round"] = rep.best_round;
    j["stop_round"] = rep.stop_round;
    j["ind_acc"] = json_double(rep.ind_acc);
    j["ood_acc"] = json_double(rep.ood_acc);
    j["comm_bytes"] = {{"uplink", rep.comm.uplink},
                       {"downlink", rep.comm.downlink},
                       {"total", rep.comm.total}};
    if (include_wall_time) j["wall_time_sec"] = rep.wall_time_sec;
    if (rep.dp) {
        j["dp"] = {{"q", rep.dp->q}, {"s", rep.dp->s}};
    } else {
        j["dp"] = nullptr;
    }
    j["alpha1"] = rep.alpha1;
    j["alpha2"] = rep.alpha2;

    ordered_json acc = ordered_json::array();
    for (std::size_t i = 0; i < rep.acc.acc.rows; ++i) {
        ordered_json row = ordered_json::array();
        for (std::size_t d = 0; d < rep.acc.acc.cols; ++d)
            row.push_back(rep.acc.acc.at(i, d));
        acc.push_back(row);
    }
    j["acc_matrix"] = acc;
    j["domain_test_counts"] = rep.acc.n;
    j["home_domains"] = rep.acc.home_domain;
    j["val_losses"] = rep.val_losses;
    j["global_loss_history"] = rep.global_loss_history;
    j["client_loss_histories"] = rep.client_loss_histories;

    ordered_json divergence;
    divergence["max_delta"] = rep.divergence.max_delta;
    ordered_json client_avg = ordered_json::object();
    for (const auto& [client, avg] : rep.divergence.client_avg_delta)
        client_avg[std::to_string(client)] = avg;
    divergence["client_avg_delta"] = client_avg;
    ordered_json deltas = ordered_json::array();
    for (const auto& [key, d] : rep.divergence.delta)
        deltas.push_back({{"client", key.first}, {"class", key.second}, {"delta", d}});
    divergence["per_client_class"] = deltas;
    divergence["excluded_classes"] = rep.divergence.excluded_classes;
    j["divergence"] = divergence;

    j["fairness"] = {{"per_domain", rep.fairness_report.per_domain},
                     {"roundness", rep.fairness_report.roundness},
                     {"degenerate", rep.fairness_report.degenerate}};
    j["transmission_events"] = rep.transmissions.size();
    return j.dump(2) + "\n";
}

void write_report_json(const RunReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << report_to_json(rep);
    if (!out) throw std::runtime_error("write failed: " + path);
}

void write_acc_csv(const RunReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "model,home_domain";
    for (std::size_t d = 0; d < rep.acc.acc.cols; ++d) out << ",domain_" << d;
    out << "\n";
    char buf[64];
    for (std::size_t i = 0; i < rep.acc.acc.rows; ++i) {
        out << i << "," << rep.acc.home_domain[i];
        for (std::size_t d = 0; d < rep.acc.acc.cols; ++d) {
            std::snprintf(buf, sizeof(buf), ",%.17g", rep.acc.acc.at(i, d));
            out << buf;
        }
        out << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

void write_transmissions_jsonl(const RunReport& rep, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const TransmissionEvent& e : rep.transmissions) {
        ordered_json j;
        j["event"] = e.event;
        j["sender"] = e.sender;
        j["receiver"] = e.receiver;
        j["bytes"] = e.bytes;
        j["round"] = e.round;
        out << j.dump() << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace mpft
