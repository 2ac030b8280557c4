#include "mpft/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mpft {
namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

long long parse_int(const std::string& field, const std::string& value) {
    try {
        std::size_t used = 0;
        long long v = std::stoll(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(field + ": expected an integer, got '" + value + "'");
    }
}

std::uint64_t parse_u64(const std::string& field, const std::string& value) {
    try {
        std::size_t used = 0;
        if (!value.empty() && value[0] == '-') throw std::invalid_argument("");
        std::uint64_t v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(field + ": expected an unsigned integer, got '" + value + "'");
    }
}

double parse_double(const std::string& field, const std::string& value) {
    try {
        std::size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(field + ": expected a number, got '" + value + "'");
    }
}

bool parse_bool(const std::string& field, const std::string& value) {
    if (value == "true" || value == "on" || value == "1") return true;
    if (value == "false" || value == "off" || value == "0") return false;
    throw ConfigError(field + ": expected a boolean, got '" + value + "'");
}

SamplingMethod sampling_from_name(const std::string& field, const std::string& value) {
    if (value == "mean") return SamplingMethod::mean;
    if (value == "cluster") return SamplingMethod::cluster;
    if (value == "random") return SamplingMethod::random;
    throw ConfigError(field + ": unknown sampling method '" + value + "'");
}

std::string sampling_name(SamplingMethod m) {
    switch (m) {
        case SamplingMethod::mean: return "mean";
        case SamplingMethod::cluster: return "cluster";
        case SamplingMethod::random: return "random";
    }
    throw ConfigError("unknown sampling method");
}

void set_key(ExperimentSpec& spec, const std::string& section, const std::string& key,
             const std::string& value) {
    const std::string field = section + "." + key;
    if (section == "world") {
        WorldConfig& w = spec.world;
        if (key == "domains") w.domains = static_cast<int>(parse_int(field, value));
        else if (key == "classes") w.classes = static_cast<int>(parse_int(field, value));
        else if (key == "input_dim") w.input_dim = parse_u64(field, value);
        else if (key == "emb_dim") w.emb_dim = parse_u64(field, value);
        else if (key == "samples_per_class")
            w.samples_per_class = static_cast<int>(parse_int(field, value));
        else if (key == "domain_shift") w.domain_shift = parse_double(field, value);
        else if (key == "within_class_noise")
            w.within_class_noise = parse_double(field, value);
        else if (key == "mixed_ratio") w.mixed_ratio = parse_double(field, value);
        else if (key == "shards_per_domain")
            w.shards_per_domain = static_cast<int>(parse_int(field, value));
        else if (key == "seed") w.seed = parse_u64(field, value);
        else if (key == "encoder") {
            if (value == "identity") w.encoder = EncoderKind::identity;
            else if (value == "mlp2") w.encoder = EncoderKind::mlp2;
            else throw ConfigError(field + ": unknown encoder '" + value + "'");
        } else if (key == "import") spec.import_path = value;
        else throw ConfigError("[world] unknown key '" + key + "'");
    } else if (section == "fl") {
        FLConfig& f = spec.run.fl;
        if (key == "method") f.method = method_from_name(value);
        else if (key == "sampling") f.sampling = sampling_from_name(field, value);
        else if (key == "rate") f.rate = parse_double(field, value);
        else if (key == "max_global_rounds")
            f.max_global_rounds = static_cast<int>(parse_int(field, value));
        else if (key == "warmup_rounds")
            f.warmup_rounds = static_cast<int>(parse_int(field, value));
        else if (key == "patience") f.patience = static_cast<int>(parse_int(field, value));
        else if (key == "local_epochs")
            f.local_epochs = static_cast<int>(parse_int(field, value));
        else if (key == "fedprox_mu") f.fedprox_mu = parse_double(field, value);
        else if (key == "dp") {
            if (parse_bool(field, value)) {
                if (!f.dp) f.dp = DpConfig{};
            } else {
                f.dp.reset();
            }
        } else if (key == "dp_q") {
            if (!f.dp) f.dp = DpConfig{};
            f.dp->q = parse_double(field, value);
        } else if (key == "dp_s") {
            if (!f.dp) f.dp = DpConfig{};
            f.dp->s = parse_double(field, value);
        } else if (key == "local_adaptation")
            f.local_adaptation = parse_bool(field, value);
        else if (key == "local_adapt_epochs")
            f.local_adapt_epochs = static_cast<int>(parse_int(field, value));
        else if (key == "alpha1") f.alpha1 = parse_double(field, value);
        else if (key == "alpha2") f.alpha2 = parse_double(field, value);
        else if (key == "seed") f.seed = parse_u64(field, value);
        else throw ConfigError("[fl] unknown key '" + key + "'");
    } else if (section == "train") {
        TrainConfig& t = spec.run.train;
        if (key == "learning_rate") t.learning_rate = parse_double(field, value);
        else if (key == "batch_size") t.batch_size = parse_u64(field, value);
        else if (key == "max_epochs")
            t.max_epochs = static_cast<int>(parse_int(field, value));
        else if (key == "variance_threshold")
            t.variance_threshold = parse_double(field, value);
        else if (key == "variance_window")
            t.variance_window = static_cast<int>(parse_int(field, value));
        else if (key == "optimizer") {
            if (value == "sgd") t.optimizer = OptimizerKind::sgd;
            else if (value == "adam") t.optimizer = OptimizerKind::adam;
            else throw ConfigError(field + ": unknown optimizer '" + value + "'");
        } else if (key == "grad_clip") {
            if (value == "none") t.grad_clip.reset();
            else t.grad_clip = parse_double(field, value);
        } else if (key == "kd_weight") t.kd_weight = parse_double(field, value);
        else if (key == "few_shot") t.few_shot = static_cast<int>(parse_int(field, value));
        else if (key == "seed") t.seed = parse_u64(field, value);
        else throw ConfigError("[train] unknown key '" + key + "'");
    } else if (section == "model") {
        ModelConfig& m = spec.run.model;
        if (key == "adapter") {
            if (value == "linear") m.adapter_kind = AdapterKind::linear;
            else if (value == "bottleneck") m.adapter_kind = AdapterKind::bottleneck;
            else throw ConfigError(field + ": unknown adapter '" + value + "'");
        } else if (key == "bottleneck_divisor")
            m.bottleneck_divisor = parse_u64(field, value);
        else if (key == "residual_weight") m.residual_weight = parse_double(field, value);
        else if (key == "head") {
            if (value == "linear") m.head_mode = HeadMode::linear;
            else if (value == "cosine") m.head_mode = HeadMode::cosine;
            else throw ConfigError(field + ": unknown head '" + value + "'");
        } else if (key == "temperature") m.temperature = parse_double(field, value);
        else if (key == "variants_per_class")
            m.variants_per_class = static_cast<int>(parse_int(field, value));
        else throw ConfigError("[model] unknown key '" + key + "'");
    } else if (section == "attack") {
        AttackSpec& a = spec.attack;
        if (key == "enabled") a.enabled = parse_bool(field, value);
        else if (key == "iterations")
            a.config.iterations = static_cast<int>(parse_int(field, value));
        else if (key == "learning_rate") a.config.learning_rate = parse_double(field, value);
        else if (key == "init") {
            if (value == "zeros") a.config.init = AttackInit::zeros;
            else if (value == "gaussian") a.config.init = AttackInit::gaussian;
            else throw ConfigError(field + ": unknown init '" + value + "'");
        } else if (key == "init_seed") a.config.init_seed = parse_u64(field, value);
        else if (key == "log_every")
            a.config.log_every = static_cast<int>(parse_int(field, value));
        else if (key == "halving") a.config.halving = parse_bool(field, value);
        else if (key == "target_client")
            a.target_client = static_cast<int>(parse_int(field, value));
        else if (key == "target_class")
            a.target_class = static_cast<int>(parse_int(field, value));
        else throw ConfigError("[attack] unknown key '" + key + "'");
    } else if (section == "outputs") {
        if (key == "directory") spec.output_dir = value;
        else throw ConfigError("[outputs] unknown key '" + key + "'");
    } else if (section == "sweep") {
        if (key == "run") {
            std::string normalized;
            std::stringstream ss(value);
            std::string clause;
            while (std::getline(ss, clause, ',')) {
                clause = trim(clause);
                if (clause.empty()) continue;
                if (clause.find('=') == std::string::npos)
                    throw ConfigError("[sweep] entry clause '" + clause +
                                      "' is not of the form section.key=value");
                if (!normalized.empty()) normalized += ", ";
                normalized += clause;
            }
            if (normalized.empty())
                throw ConfigError("[sweep] run entry has no clauses");
            spec.sweep.push_back(normalized);
        } else {
            throw ConfigError("[sweep] unknown key '" + key + "'");
        }
    } else {
        throw ConfigError("unknown config section '[" + section + "]'");
    }
}

}  // namespace

void ExperimentSpec::validate() const {
    world.validate();
    run.fl.validate();
    run.train.validate();
    attack.config.validate();
    if (output_dir.empty()) throw ConfigError("outputs.directory: must not be empty");
    if (run.model.bottleneck_divisor < 1)
        throw ConfigError("model.bottleneck_divisor: must be >= 1");
    if (!(run.model.residual_weight >= 0.0 && run.model.residual_weight <= 1.0))
        throw ConfigError("model.residual_weight: must be in [0, 1]");
    if (run.model.variants_per_class < 1)
        throw ConfigError("model.variants_per_class: must be >= 1");
    if (!(run.model.temperature > 0.0))
        throw ConfigError("model.temperature: must be > 0");
    if (attack.target_client < 0)
        throw ConfigError("attack.target_client: must be >= 0");
    if (attack.target_class < 0)
        throw ConfigError("attack.target_class: must be >= 0");
    // Sweep clauses must name real fields; probe them against a copy.
    for (const std::string& entry : sweep) {
        ExperimentSpec probe = *this;
        probe.sweep.clear();
        apply_override(probe, entry);
    }
}

void apply_override(ExperimentSpec& spec, const std::string& entry) {
    std::stringstream ss(entry);
    std::string clause;
    bool any = false;
    while (std::getline(ss, clause, ',')) {
        clause = trim(clause);
        if (clause.empty()) continue;
        any = true;
        std::size_t eq = clause.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + clause +
                              "' is not of the form section.key=value");
        std::string path = trim(clause.substr(0, eq));
        std::string value = trim(clause.substr(eq + 1));
        std::size_t dot = path.find('.');
        if (dot == std::string::npos)
            throw ConfigError("override key '" + path + "' must be section.key");
        set_key(spec, path.substr(0, dot), path.substr(dot + 1), value);
    }
    if (!any) throw ConfigError("empty override entry");
}

ExperimentSpec parse_spec(const std::string& text) {
    ExperimentSpec spec;
    std::string section;
    std::stringstream ss(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(ss, raw)) {
        ++line_no;
        std::string line = raw;
        std::size_t hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": malformed section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("config line " + std::to_string(line_no) +
                                  ": empty section name");
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key = value, got '" + line + "'");
        if (section.empty())
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": key outside any [section]");
        set_key(spec, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    spec.validate();
    return spec;
}

ExperimentSpec load_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_spec(buf.str());
}

std::string serialize_spec(const ExperimentSpec& spec) {
    std::ostringstream out;
    const WorldConfig& w = spec.world;
    out << "[world]\n";
    out << "domains = " << w.domains << "\n";
    out << "classes = " << w.classes << "\n";
    out << "input_dim = " << w.input_dim << "\n";
    out << "emb_dim = " << w.emb_dim << "\n";
    out << "samples_per_class = " << w.samples_per_class << "\n";
    out << "domain_shift = " << fmt_double(w.domain_shift) << "\n";
    out << "within_class_noise = " << fmt_double(w.within_class_noise) << "\n";
    out << "mixed_ratio = " << fmt_double(w.mixed_ratio) << "\n";
    out << "shards_per_domain = " << w.shards_per_domain << "\n";
    out << "seed = " << w.seed << "\n";
    out << "encoder = " << (w.encoder == EncoderKind::identity ? "identity" : "mlp2")
        << "\n";
    if (!spec.import_path.empty()) out << "import = " << spec.import_path << "\n";

    const FLConfig& f = spec.run.fl;
    out << "\n[fl]\n";
    out << "method = " << method_name(f.method) << "\n";
    out << "sampling = " << sampling_name(f.sampling) << "\n";
    out << "rate = " << fmt_double(f.rate) << "\n";
    out << "max_global_rounds = " << f.max_global_rounds << "\n";
    out << "warmup_rounds = " << f.warmup_rounds << "\n";
    out << "patience = " << f.patience << "\n";
    out << "local_epochs = " << f.local_epochs << "\n";
    out << "fedprox_mu = " << fmt_double(f.fedprox_mu) << "\n";
    out << "dp = " << (f.dp ? "on" : "off") << "\n";
    if (f.dp) {
        out << "dp_q = " << fmt_double(f.dp->q) << "\n";
        out << "dp_s = " << fmt_double(f.dp->s) << "\n";
    }
    out << "local_adaptation = " << (f.local_adaptation ? "on" : "off") << "\n";
    out << "local_adapt_epochs = " << f.local_adapt_epochs << "\n";
    out << "alpha1 = " << fmt_double(f.alpha1) << "\n";
    out << "alpha2 = " << fmt_double(f.alpha2) << "\n";
    out << "seed = " << f.seed << "\n";

    const TrainConfig& t = spec.run.train;
    out << "\n[train]\n";
    out << "learning_rate = " << fmt_double(t.learning_rate) << "\n";
    out << "batch_size = " << t.batch_size << "\n";
    out << "max_epochs = " << t.max_epochs << "\n";
    out << "variance_threshold = " << fmt_double(t.variance_threshold) << "\n";
    out << "variance_window = " << t.variance_window << "\n";
    out << "optimizer = " << (t.optimizer == OptimizerKind::sgd ? "sgd" : "adam") << "\n";
    out << "grad_clip = " << (t.grad_clip ? fmt_double(*t.grad_clip) : "none") << "\n";
    out << "kd_weight = " << fmt_double(t.kd_weight) << "\n";
    out << "few_shot = " << t.few_shot << "\n";
    out << "seed = " << t.seed << "\n";

    const ModelConfig& m = spec.run.model;
    out << "\n[model]\n";
    out << "adapter = " << (m.adapter_kind == AdapterKind::linear ? "linear" : "bottleneck")
        << "\n";
    out << "bottleneck_divisor = " << m.bottleneck_divisor << "\n";
    out << "residual_weight = " << fmt_double(m.residual_weight) << "\n";
    out << "head = " << (m.head_mode == HeadMode::linear ? "linear" : "cosine") << "\n";
    out << "temperature = " << fmt_double(m.temperature) << "\n";
    out << "variants_per_class = " << m.variants_per_class << "\n";

    const AttackSpec& a = spec.attack;
    out << "\n[attack]\n";
    out << "enabled = " << (a.enabled ? "on" : "off") << "\n";
    out << "iterations = " << a.config.iterations << "\n";
    out << "learning_rate = " << fmt_double(a.config.learning_rate) << "\n";
    out << "init = " << (a.config.init == AttackInit::zeros ? "zeros" : "gaussian")
        << "\n";
    out << "init_seed = " << a.config.init_seed << "\n";
    out << "log_every = " << a.config.log_every << "\n";
    out << "halving = " << (a.config.halving ? "on" : "off") << "\n";
    out << "target_client = " << a.target_client << "\n";
    out << "target_class = " << a.target_class << "\n";

    out << "\n[outputs]\n";
    out << "directory = " << spec.output_dir << "\n";

    if (!spec.sweep.empty()) {
        out << "\n[sweep]\n";
        for (const std::string& entry : spec.sweep) out << "run = " << entry << "\n";
    }
    return out.str();
}

Federation build_world(const ExperimentSpec& spec) {
    if (spec.import_path.empty()) return generate_federation(spec.world);
    ImportedWorld imported = import_embeddings(spec.import_path, spec.world.seed);
    Federation fed;
    fed.config = spec.world;
    fed.config.domains = imported.declared_clients;
    fed.config.shards_per_domain = 1;
    fed.config.classes = imported.classes;
    fed.config.input_dim = imported.d_emb;
    fed.config.emb_dim = imported.d_emb;
    fed.config.encoder = EncoderKind::identity;
    fed.encoder = FrozenEncoder::identity(imported.d_emb);
    fed.clients = std::move(imported.clients);
    fed.num_domains = imported.declared_clients;
    return fed;
}

AttackReport execute_attack(const ExperimentSpec& spec, const Federation& fed) {
    const AttackSpec& a = spec.attack;
    if (a.target_client >= static_cast<int>(fed.clients.size()))
        throw ConfigError("attack.target_client: no client " +
                          std::to_string(a.target_client));
    if (a.target_class >= fed.config.classes)
        throw ConfigError("attack.target_class: no class " +
                          std::to_string(a.target_class));

    EmbeddedSplit train =
        embed_split(fed.encoder, fed.clients[a.target_client], SplitPart::train);
    PrototypeSet set = mean_sampling(a.target_client, train, fed.config.classes);
    const Prototype* target = nullptr;
    for (const Prototype& p : set.prototypes)
        if (p.class_id == a.target_class) target = &p;
    if (!target)
        throw ConfigError("attack.target_class: client holds no samples of class " +
                          std::to_string(a.target_class));

    // Ground truth for the input-space error channel: the mean raw input of
    // the contributing samples.
    std::vector<double> truth(fed.encoder.d_in(), 0.0);
    std::size_t count = 0;
    const DomainDataset& ds = fed.clients[a.target_client];
    for (std::size_t idx : ds.split.train) {
        if (ds.samples[idx].label != a.target_class) continue;
        for (std::size_t j = 0; j < truth.size(); ++j) truth[j] += ds.samples[idx].x[j];
        ++count;
    }
    for (double& v : truth) v /= static_cast<double>(count);

    return hijack_attack(fed.encoder, target->vec, a.config, &truth);
}

RunReport execute_run(const ExperimentSpec& spec) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(spec.output_dir, ec);
    if (ec)
        throw std::runtime_error("cannot create output directory " + spec.output_dir +
                                 ": " + ec.message());

    Federation fed = build_world(spec);
    RunReport report = run_method(fed, spec.run);

    const fs::path dir(spec.output_dir);
    write_report_json(report, (dir / "report.json").string());
    write_acc_csv(report, (dir / "acc.csv").string());
    write_fairness_csv(report.fairness_report, (dir / "fairness.csv").string());
    write_transmissions_jsonl(report, (dir / "transmissions.jsonl").string());
    if (spec.attack.enabled) {
        AttackReport attack = execute_attack(spec, fed);
        write_attack_csv(attack, (dir / "attack_trajectory.csv").string());
    }
    return report;
}

}  // namespace mpft
