#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mpft/emb_io.hpp"
#include "mpft/experiment.hpp"

namespace fs = std::filesystem;
using mpft::ConfigError;

namespace {

struct CommonArgs {
    std::string config;
    std::string out;
    std::string method;
    std::uint64_t seed = 0;
    CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* sub, CommonArgs& args, bool with_method) {
    sub->add_option("--config", args.config, "experiment config file")
        ->required();
    sub->add_option("--out", args.out, "output directory (overrides the config)");
    args.seed_opt =
        sub->add_option("--seed", args.seed, "seed override for world and fl");
    if (with_method)
        sub->add_option("--method", args.method,
                        "method override: mpft|local|fedavg|fedprox|proto_avg");
}

mpft::ExperimentSpec load_with_overrides(const CommonArgs& args) {
    mpft::ExperimentSpec spec = mpft::load_spec(args.config);
    if (args.seed_opt && args.seed_opt->count() > 0) {
        spec.world.seed = args.seed;
        spec.run.fl.seed = args.seed;
    }
    if (!args.out.empty()) spec.output_dir = args.out;
    if (!args.method.empty())
        mpft::apply_override(spec, "fl.method=" + args.method);
    spec.validate();
    return spec;
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw std::runtime_error("cannot create output directory " + dir + ": " +
                                 ec.message());
}

int cmd_generate(const CommonArgs& args) {
    mpft::ExperimentSpec spec = load_with_overrides(args);
    ensure_out_dir(spec.output_dir);
    mpft::Federation fed = mpft::build_world(spec);

    mpft::EmbFile file;
    file.d_emb = fed.encoder.d_emb();
    file.num_classes = fed.config.classes;
    file.num_clients = static_cast<int>(fed.clients.size());
    for (const mpft::DomainDataset& client : fed.clients)
        for (const mpft::Sample& sample : client.samples) {
            std::vector<double> e = fed.encoder.encode(sample.x);
            mpft::EmbRecord rec;
            rec.client_id = client.client_id;
            rec.label = sample.label;
            rec.values.assign(e.begin(), e.end());
            file.records.push_back(std::move(rec));
        }
    const fs::path dir(spec.output_dir);
    mpft::write_emb_file(file, (dir / "embeddings.emb").string());

    nlohmann::ordered_json j;
    j["clients"] = fed.clients.size();
    j["domains"] = fed.num_domains;
    j["classes"] = fed.config.classes;
    j["input_dim"] = fed.encoder.d_in();
    j["emb_dim"] = fed.encoder.d_emb();
    j["encoder_param_hash"] = fed.encoder.param_hash();
    nlohmann::ordered_json per_client = nlohmann::ordered_json::array();
    for (const mpft::DomainDataset& c : fed.clients)
        per_client.push_back({{"client", c.client_id},
                              {"home_domain", c.home_domain},
                              {"samples", c.samples.size()},
                              {"train", c.split.train.size()},
                              {"test", c.split.test.size()},
                              {"validation", c.split.validation.size()}});
    j["per_client"] = per_client;
    std::ofstream out(dir / "world.json");
    if (!out) throw std::runtime_error("cannot write world.json");
    out << j.dump(2) << "\n";

    std::printf("generated %zu clients over %d domains -> %s\n", fed.clients.size(),
                fed.num_domains, spec.output_dir.c_str());
    return 0;
}

void print_run_summary(const mpft::RunReport& rep, const std::string& dir) {
    std::printf(
        "%s: ind %.4f ood %.4f rounds %d comm %" PRIu64 " B (%.2fs) -> %s\n",
        rep.method.c_str(), rep.ind_acc, rep.ood_acc, rep.rounds_used, rep.comm.total,
        rep.wall_time_sec, dir.c_str());
}

int cmd_run(const CommonArgs& args) {
    mpft::ExperimentSpec spec = load_with_overrides(args);
    mpft::RunReport rep = mpft::execute_run(spec);
    print_run_summary(rep, spec.output_dir);
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    mpft::ExperimentSpec base = load_with_overrides(args);
    if (base.sweep.empty())
        throw ConfigError("[sweep] the config declares no run entries");
    ensure_out_dir(base.output_dir);

    std::string csv = "entry,overrides,method,sampling,rate,seed,ind_acc,ood_acc,"
                      "rounds,comm_total_bytes\n";
    for (std::size_t i = 0; i < base.sweep.size(); ++i) {
        mpft::ExperimentSpec entry = base;
        entry.sweep.clear();
        mpft::apply_override(entry, base.sweep[i]);
        entry.validate();
        char suffix[32];
        std::snprintf(suffix, sizeof(suffix), "sweep_%03zu", i);
        entry.output_dir = (fs::path(base.output_dir) / suffix).string();
        mpft::RunReport rep = mpft::execute_run(entry);
        print_run_summary(rep, entry.output_dir);

        std::string overrides = base.sweep[i];
        std::size_t at = 0;
        while ((at = overrides.find(", ", at)) != std::string::npos)
            overrides.replace(at, 2, "; ");
        char row[512];
        std::snprintf(row, sizeof(row),
                      "%zu,%s,%s,%s,%.17g,%" PRIu64 ",%.17g,%.17g,%d,%" PRIu64 "\n", i,
                      overrides.c_str(), rep.method.c_str(), rep.sampling.c_str(),
                      rep.rate, rep.seed, rep.ind_acc, rep.ood_acc, rep.rounds_used,
                      rep.comm.total);
        csv += row;
    }
    const std::string summary = (fs::path(base.output_dir) / "sweep_summary.csv").string();
    std::ofstream out(summary);
    if (!out) throw std::runtime_error("cannot write " + summary);
    out << csv;
    std::printf("sweep summary -> %s\n", summary.c_str());
    return 0;
}

int cmd_attack(const CommonArgs& args) {
    mpft::ExperimentSpec spec = load_with_overrides(args);
    ensure_out_dir(spec.output_dir);
    mpft::Federation fed = mpft::build_world(spec);
    mpft::AttackReport rep = mpft::execute_attack(spec, fed);

    const fs::path dir(spec.output_dir);
    mpft::write_attack_csv(rep, (dir / "attack_trajectory.csv").string());

    nlohmann::ordered_json j;
    j["target_client"] = spec.attack.target_client;
    j["target_class"] = spec.attack.target_class;
    j["iterations_run"] = rep.iterations_run;
    j["aborted"] = rep.aborted;
    j["initial_prototype_mse"] = rep.prototype_space_mse_history.front();
    j["final_prototype_mse"] = rep.prototype_space_mse_history.back();
    j["input_space_mse"] =
        std::isnan(rep.input_space_mse) ? nlohmann::ordered_json(nullptr)
                                        : nlohmann::ordered_json(rep.input_space_mse);
    j["x_star"] = rep.x_star;
    std::ofstream out(dir / "attack_report.json");
    if (!out) throw std::runtime_error("cannot write attack_report.json");
    out << j.dump(2) << "\n";

    std::printf("attack: prototype mse %.3e -> %.3e over %d iterations -> %s\n",
                rep.prototype_space_mse_history.front(),
                rep.prototype_space_mse_history.back(), rep.iterations_run,
                spec.output_dir.c_str());
    return 0;
}

int cmd_compare(const std::vector<std::string>& paths, const std::string& out_csv) {
    struct Row {
        std::string method, path;
        double ood, ind, wall;
        int rounds;
        std::uint64_t comm;
    };
    std::vector<Row> rows;
    for (const std::string& path : paths) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open report: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("malformed report " + path + ": " + e.what());
        }
        Row row;
        row.path = path;
        row.method = j.at("method").get<std::string>();
        row.ind = j.at("ind_acc").get<double>();
        row.ood = j.at("ood_acc").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                            : j.at("ood_acc").get<double>();
        row.rounds = j.at("rounds_used").get<int>();
        row.comm = j.at("comm_bytes").at("total").get<std::uint64_t>();
        row.wall = j.contains("wall_time_sec") ? j.at("wall_time_sec").get<double>()
                                               : std::numeric_limits<double>::quiet_NaN();
        rows.push_back(std::move(row));
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return a.method != b.method ? a.method < b.method : a.path < b.path;
    });

    std::printf("%-10s %9s %9s %7s %14s %9s\n", "method", "ood_acc", "ind_acc", "rounds",
                "comm_bytes", "wall_time");
    std::string csv = "method,ood_acc,ind_acc,rounds,comm_bytes,wall_time\n";
    for (const Row& r : rows) {
        std::printf("%-10s %9.4f %9.4f %7d %14" PRIu64 " %9.3f\n", r.method.c_str(),
                    r.ood, r.ind, r.rounds, r.comm, r.wall);
        char line[256];
        std::snprintf(line, sizeof(line), "%s,%.17g,%.17g,%d,%" PRIu64 ",%.17g\n",
                      r.method.c_str(), r.ood, r.ind, r.rounds, r.comm, r.wall);
        csv += line;
    }
    if (!out_csv.empty()) {
        std::ofstream out(out_csv);
        if (!out) throw std::runtime_error("cannot write " + out_csv);
        out << csv;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "mpft: prototype-based federated fine-tuning simulator.\n"
        "MPFT_THREADS caps the worker count (default: hardware concurrency)."};
    app.require_subcommand(1);

    CommonArgs gen_args, run_args, sweep_args, attack_args;
    CLI::App* generate = app.add_subcommand("generate", "build the world and export embeddings");
    add_common(generate, gen_args, false);
    CLI::App* run = app.add_subcommand("run", "execute one federated run");
    add_common(run, run_args, true);
    CLI::App* sweep = app.add_subcommand("sweep", "execute every [sweep] entry");
    add_common(sweep, sweep_args, false);
    CLI::App* attack = app.add_subcommand("attack", "invert a target prototype");
    add_common(attack, attack_args, false);

    std::vector<std::string> compare_paths;
    std::string compare_out;
    CLI::App* compare = app.add_subcommand("compare", "tabulate run reports");
    compare->add_option("reports", compare_paths, "report.json paths")->required();
    compare->add_option("--out", compare_out, "also write the table as CSV here");

    try {
        app.parse(argc, argv);
        if (app.got_subcommand(generate)) return cmd_generate(gen_args);
        if (app.got_subcommand(run)) return cmd_run(run_args);
        if (app.got_subcommand(sweep)) return cmd_sweep(sweep_args);
        if (app.got_subcommand(attack)) return cmd_attack(attack_args);
        if (app.got_subcommand(compare)) return cmd_compare(compare_paths, compare_out);
        throw ConfigError("no subcommand selected");
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
