#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "mpft/orchestrator.hpp"

using namespace mpft;

namespace {

Federation small_world(std::uint64_t seed = 7, int domains = 3) {
    WorldConfig w;
    w.domains = domains;
    w.classes = 3;
    w.input_dim = 8;
    w.emb_dim = 4;
    w.samples_per_class = 8;
    w.domain_shift = 1.5;
    w.within_class_noise = 0.4;
    w.seed = seed;
    return generate_federation(w);
}

OrchestratorConfig fast_config(Method method) {
    OrchestratorConfig cfg;
    cfg.fl.method = method;
    cfg.fl.max_global_rounds = 6;
    cfg.fl.warmup_rounds = 2;
    cfg.fl.patience = 2;
    cfg.fl.local_epochs = 1;
    cfg.fl.seed = 11;
    cfg.train.learning_rate = 0.02;
    cfg.train.max_epochs = 8;
    cfg.train.batch_size = 0;
    cfg.train.variance_threshold = 0.0;
    cfg.model.adapter_kind = AdapterKind::linear;
    cfg.model.head_mode = HeadMode::linear;
    return cfg;
}

}  // namespace

TEST_CASE("early stopping waits out warmup and patience") {
    // Best at round 5, no improvement afterwards, patience 10.
    std::vector<double> h = {9, 8, 7, 6, 1};
    for (int i = 0; i < 9; ++i) h.push_back(2.0);
    EarlyStopDecision d = early_stopping(h, 0, 10);  // t = 14
    CHECK(d.best_round == 5);
    CHECK(!d.stop_now);
    h.push_back(2.0);  // t = 15, 15 - 5 = 10
    d = early_stopping(h, 0, 10);
    CHECK(d.stop_now);
    CHECK(d.best_round == 5);

    // Warmup suppresses the stop but not best tracking.
    d = early_stopping(h, 20, 10);
    CHECK(!d.stop_now);
    CHECK(d.best_round == 5);

    // Strictly improving history never stops.
    std::vector<double> improving;
    for (int i = 0; i < 30; ++i) improving.push_back(30.0 - i);
    d = early_stopping(improving, 0, 3);
    CHECK(!d.stop_now);
    CHECK(d.best_round == 30);

    // Ties keep the earliest best.
    d = early_stopping({1.0, 1.0, 1.0}, 0, 5);
    CHECK(d.best_round == 1);

    d = early_stopping({}, 0, 5);
    CHECK(!d.stop_now);
    CHECK(d.best_round == 0);
}

TEST_CASE("closed-form costs reproduce the reference arithmetic") {
    // 24 rounds, 6 clients, 0.5 MB adapter both ways: 144 MB.
    CHECK(theoretical_cost(Method::fedavg, 24, 6, 500000, 0, 0) == 144000000ULL);
    CHECK(theoretical_cost(Method::fedprox, 24, 6, 500000, 0, 0) == 144000000ULL);
    // One prototype exchange round, 6 clients, 0.6 MB per client: 3.6 MB.
    CHECK(theoretical_cost(Method::proto_avg, 1, 6, 0, 0, 6 * 600000) == 3600000ULL);
    // MPFT: one prototype upload per client plus one adapter broadcast each.
    CHECK(theoretical_cost(Method::mpft, 1, 4, 1000, 2600, 0) == 2600 + 4000ULL);
    CHECK(theoretical_cost(Method::local, 99, 9, 123, 456, 789) == 0ULL);
}

TEST_CASE("account_costs accepts a consistent trace and rejects a broken one") {
    std::vector<TransmissionEvent> trace;
    trace.push_back({"uplink", 0, -1, 300, 1});
    trace.push_back({"uplink", 1, -1, 500, 1});
    trace.push_back({"downlink", -1, 0, 200, 1});
    trace.push_back({"downlink", -1, 1, 200, 1});
    CommCost c = account_costs(trace, Method::mpft, 1, 2);
    CHECK(c.uplink == 800);
    CHECK(c.downlink == 400);
    CHECK(c.total == 1200);

    std::vector<TransmissionEvent> broken = {{"uplink", 0, -1, 100, 1}};
    CHECK_THROWS_AS(account_costs(broken, Method::fedavg, 1, 2), std::logic_error);
    std::vector<TransmissionEvent> wrong_label = {{"sideways", 0, -1, 100, 1}};
    CHECK_THROWS_AS(account_costs(wrong_label, Method::local, 0, 2), std::logic_error);
}

TEST_CASE("local training moves no bytes") {
    Federation fed = small_world();
    RunReport rep = run_local(fed, fast_config(Method::local));
    CHECK(rep.method == "local");
    CHECK(rep.comm.total == 0);
    CHECK(rep.transmissions.empty());
    CHECK(rep.rounds_used == 0);
    CHECK(rep.acc.models() == 3);
    CHECK(rep.acc.domains() == 3);
    CHECK(rep.client_loss_histories.size() == 3);
    CHECK(std::isfinite(rep.ind_acc));
    CHECK(std::isfinite(rep.ood_acc));
}

TEST_CASE("mpft is a single-round protocol with 2N transmissions") {
    Federation fed = small_world();
    OrchestratorConfig cfg = fast_config(Method::mpft);
    RunReport rep = run_mpft(fed, cfg);
    CHECK(rep.method == "mpft");
    CHECK(rep.rounds_used == 1);
    CHECK(rep.best_round == 1);
    CHECK(rep.stop_round == 1);
    CHECK(rep.val_losses.size() == 1);
    REQUIRE(rep.transmissions.size() == 6);  // N uplinks + N downlinks

    std::uint64_t up = 0, down = 0, adapter_bytes = 0;
    int ups = 0, downs = 0;
    for (const TransmissionEvent& e : rep.transmissions) {
        if (e.event == "uplink") {
            up += e.bytes;
            ++ups;
        } else {
            down += e.bytes;
            ++downs;
            adapter_bytes = e.bytes;
        }
    }
    CHECK(ups == 3);
    CHECK(downs == 3);
    CHECK(rep.comm.uplink == up);
    CHECK(rep.comm.downlink == down);
    CHECK(rep.comm.total ==
          theoretical_cost(Method::mpft, 1, 3, adapter_bytes, up, 0));
    CHECK(!rep.divergence.clients.empty());
}

TEST_CASE("dp with q = 0 leaves every metric unchanged") {
    Federation fed = small_world();
    OrchestratorConfig clean = fast_config(Method::mpft);
    OrchestratorConfig noiseless = clean;
    noiseless.fl.dp = DpConfig{0.0, 1.0};
    RunReport a = run_mpft(fed, clean);
    RunReport b = run_mpft(fed, noiseless);
    CHECK(!a.dp.has_value());
    REQUIRE(b.dp.has_value());
    CHECK(b.dp->q == 0.0);
    CHECK(a.val_losses == b.val_losses);
    CHECK(a.acc.acc.data == b.acc.acc.data);
    CHECK(a.ind_acc == b.ind_acc);
    CHECK(a.ood_acc == b.ood_acc);
}

TEST_CASE("fedprox with mu 0 reproduces fedavg bit for bit") {
    Federation fed = small_world();
    OrchestratorConfig avg_cfg = fast_config(Method::fedavg);
    OrchestratorConfig prox_cfg = fast_config(Method::fedprox);
    prox_cfg.fl.fedprox_mu = 0.0;
    RunReport avg = run_fedavg(fed, avg_cfg);
    RunReport prox = run_fedprox(fed, prox_cfg);

    std::string avg_json = report_to_json(avg, false);
    std::string prox_json = report_to_json(prox, false);
    const std::string needle = "\"fedprox\"";
    auto pos = prox_json.find(needle);
    REQUIRE(pos != std::string::npos);
    prox_json.replace(pos, needle.size(), "\"fedavg\"");
    CHECK(avg_json == prox_json);
}

TEST_CASE("fedavg moves uniform adapter payloads every round") {
    Federation fed = small_world();
    RunReport rep = run_fedavg(fed, fast_config(Method::fedavg));
    CHECK(rep.rounds_used >= 1);
    REQUIRE(!rep.transmissions.empty());
    std::uint64_t payload = rep.transmissions.front().bytes;
    for (const TransmissionEvent& e : rep.transmissions) CHECK(e.bytes == payload);
    CHECK(rep.transmissions.size() ==
          static_cast<std::size_t>(rep.rounds_used) * 3 * 2);
    CHECK(rep.comm.total == theoretical_cost(Method::fedavg, rep.rounds_used, 3,
                                             payload, 0, 0));
    CHECK(rep.val_losses.size() == static_cast<std::size_t>(rep.rounds_used));
}

TEST_CASE("proto_avg keeps static prototypes and stops on schedule") {
    Federation fed = small_world();
    OrchestratorConfig cfg = fast_config(Method::proto_avg);
    RunReport rep = run_proto_avg(fed, cfg);
    CHECK(rep.method == "proto_avg");
    CHECK(rep.sampling == "mean");
    CHECK(rep.rate == 1.0);
    // Static prototypes: constant validation loss, best stays at round 1 and
    // the stop fires at warmup-respecting patience exhaustion.
    for (double v : rep.val_losses) CHECK(v == rep.val_losses.front());
    CHECK(rep.best_round == 1);
    CHECK(rep.rounds_used == 3);  // warmup 2, patience 2
    CHECK(rep.comm.total == theoretical_cost(Method::proto_avg, rep.rounds_used, 3, 0,
                                             0, rep.comm.total / 3));
}

TEST_CASE("thread cap does not change any reported byte") {
    Federation fed = small_world();
    OrchestratorConfig cfg = fast_config(Method::mpft);
    cfg.fl.local_adaptation = true;
    cfg.fl.local_adapt_epochs = 3;

    setenv("MPFT_THREADS", "1", 1);
    RunReport serial = run_method(fed, cfg);
    setenv("MPFT_THREADS", "8", 1);
    RunReport parallel = run_method(fed, cfg);
    unsetenv("MPFT_THREADS");
    CHECK(report_to_json(serial, false) == report_to_json(parallel, false));
}

TEST_CASE("run_method dispatches on the configured method") {
    Federation fed = small_world();
    OrchestratorConfig cfg = fast_config(Method::local);
    CHECK(report_to_json(run_method(fed, cfg), false) ==
          report_to_json(run_local(fed, cfg), false));
}

TEST_CASE("method names round-trip") {
    for (Method m : {Method::mpft, Method::local, Method::fedavg, Method::fedprox,
                     Method::proto_avg})
        CHECK(method_from_name(method_name(m)) == m);
    CHECK_THROWS_AS(method_from_name("gossip"), ConfigError);
}

TEST_CASE("fl config validation") {
    FLConfig fl;
    CHECK_NOTHROW(fl.validate());
    fl.rate = 0.0;
    CHECK_THROWS_AS(fl.validate(), ConfigError);
    fl.rate = 1.5;
    CHECK_THROWS_AS(fl.validate(), ConfigError);
    fl.rate = 0.3;
    fl.max_global_rounds = 0;
    CHECK_THROWS_AS(fl.validate(), ConfigError);
    fl.max_global_rounds = 10;
    fl.local_epochs = 0;
    CHECK_THROWS_AS(fl.validate(), ConfigError);
    fl.local_epochs = 1;
    fl.fedprox_mu = -1.0;
    CHECK_THROWS_AS(fl.validate(), ConfigError);
    fl.fedprox_mu = 0.0;
    fl.dp = DpConfig{-0.1, 1.0};
    CHECK_THROWS_AS(fl.validate(), ConfigError);
}

TEST_CASE("report json is stable and carries the config echoes") {
    Federation fed = small_world();
    OrchestratorConfig cfg = fast_config(Method::mpft);
    cfg.fl.alpha1 = 0.25;
    cfg.fl.alpha2 = 4.0;
    RunReport rep = run_mpft(fed, cfg);
    std::string a = report_to_json(rep, false);
    std::string b = report_to_json(rep, false);
    CHECK(a == b);
    CHECK(a.find("\"alpha1\": 0.25") != std::string::npos);
    CHECK(a.find("\"alpha2\": 4") != std::string::npos);
    CHECK(a.find("\"wall_time_sec\"") == std::string::npos);
    CHECK(report_to_json(rep, true).find("\"wall_time_sec\"") != std::string::npos);
}
