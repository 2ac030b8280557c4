#pragma once

#include <string>
#include <vector>

#include "mpft/attack.hpp"
#include "mpft/orchestrator.hpp"
#include "mpft/world.hpp"

namespace mpft {

struct AttackSpec {
    bool enabled = false;
    AttackConfig config;
    int target_client = 0;
    int target_class = 0;
};

/// One experiment: a world, a method configuration, optional attack, output
/// location, and optional sweep overrides ("fl.rate=0.1, fl.sampling=mean"
/// per entry).
struct ExperimentSpec {
    WorldConfig world;
    std::string import_path;  // when set, ingest embeddings instead of generating
    OrchestratorConfig run;
    AttackSpec attack;
    std::string output_dir = "out";
    std::vector<std::string> sweep;

    void validate() const;  // throws ConfigError
};

/// Sectioned key = value text ([world], [fl], [train], [model], [attack],
/// [outputs], [sweep]; # or ; comments). Unknown sections or keys are
/// ConfigErrors naming the offender.
ExperimentSpec parse_spec(const std::string& text);
ExperimentSpec load_spec(const std::string& path);

/// Canonical form: fixed key order, %.17g reals. parse(serialize(s)) == s.
std::string serialize_spec(const ExperimentSpec& spec);

/// Applies one "section.key=value" clause, or several separated by commas.
void apply_override(ExperimentSpec& spec, const std::string& entry);

/// Generates the synthetic federation, or ingests `import_path` through the
/// identity encoder when set.
Federation build_world(const ExperimentSpec& spec);

/// Runs the configured method and writes report.json, acc.csv, fairness.csv,
/// transmissions.jsonl (and the attack trajectory when enabled) into
/// output_dir. Returns the report.
RunReport execute_run(const ExperimentSpec& spec);

/// Runs just the attack against the configured target prototype.
AttackReport execute_attack(const ExperimentSpec& spec, const Federation& fed);

}  // namespace mpft
