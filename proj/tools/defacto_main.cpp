#include "defacto/clients.hpp"
#include "defacto/dataset.hpp"
#include "defacto/grpo.hpp"
#include "defacto/pipeline.hpp"
#include "defacto/scoring.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

namespace {

using namespace defacto;

// Exit codes: 0 success, 1 validation/scoring failures, 2 configuration errors.
constexpr int kExitSuccess = 0;

Rgb parse_fill(const std::string& text) {
    if (text == "black") return {0, 0, 0};
    if (text == "white") return {255, 255, 255};
    int r = 0, g = 0, b = 0;
    if (std::sscanf(text.c_str(), "%d,%d,%d", &r, &g, &b) == 3 && r >= 0 && r <= 255 && g >= 0 &&
        g <= 255 && b >= 0 && b <= 255)
        return {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                static_cast<std::uint8_t>(b)};
    throw CLI::ValidationError("--fill expects 'black', 'white' or 'R,G,B'");
}

int run_build_dataset(const std::string& input, const std::string& out_dir,
                      const std::string& services_config, const std::string& mode_override,
                      std::uint64_t seed, int workers, double tau, const std::string& fill,
                      double failure_ceiling) {
    ServiceConfig services = services_config.empty() ? ServiceConfig{} : ServiceConfig::load(services_config);
    if (services_config.empty()) services.apply_env_overrides();
    if (mode_override == "stub") services.mode = ServiceMode::stub;
    if (mode_override == "live") services.mode = ServiceMode::live;
    services.validate();

    BuildDatasetOptions options;
    options.source_jsonl = input;
    options.out_dir = out_dir;
    options.seed = seed;
    options.workers = workers;
    options.failure_ceiling = failure_ceiling;
    options.builder.tau = tau;
    options.builder.fill = parse_fill(fill);
    if (!(tau > 0.0 && tau < 1.0)) throw CLI::ValidationError("--tau must lie in (0,1)");

    const std::unique_ptr<EvidenceServices> client = make_services(services);
    const BuildDatasetReport report = build_dataset(*client, options);

    for (const std::string& w : report.warnings) std::cout << "warning: " << w << "\n";
    for (const std::string& e : report.errors) std::cerr << "error: " << e << "\n";
    std::cout << "records: " << report.records << ", instances: " << report.instances
              << ", failures: " << report.failures << "\n";

    if (report.aborted || report.failures > 0) {
        nlohmann::ordered_json summary;
        summary["aborted"] = report.aborted;
        summary["records"] = report.records;
        summary["failures"] = report.failures;
        summary["errors"] = report.errors;
        std::cerr << summary.dump() << "\n";
    }
    if (report.aborted) {
        std::cerr << "failure rate exceeded ceiling; no manifest written\n";
        return 1;
    }
    std::cout << "manifest: " << report.manifest_path.string() << "\n";
    return kExitSuccess;
}

int run_score(const std::string& manifest, const std::string& responses, const std::string& out,
              const std::string& reward_config, int workers) {
    ScoreOptions options;
    options.manifest = manifest;
    options.responses = responses;
    options.out = out;
    options.workers = workers;
    if (!reward_config.empty()) options.reward = RewardConfig::load(reward_config);

    const ScoreReport report = score_responses(options);
    std::cout << "scored: " << report.scored << ", errors: " << report.errors << "\n";
    for (const std::string& e : report.error_lines) std::cerr << "error: " << e << "\n";
    return report.errors == 0 ? kExitSuccess : 1;
}

int run_train_sim(const std::string& sim_config, const std::string& reward_config,
                  const std::string& out_dir, std::uint64_t seed, bool seed_given) {
    SimConfig cfg = sim_config.empty() ? SimConfig{} : SimConfig::load(sim_config);
    if (seed_given) cfg.seed = seed;
    RewardConfig reward;
    if (!reward_config.empty()) reward = RewardConfig::load(reward_config);

    std::filesystem::create_directories(out_dir);
    const TrainingResult result = train(cfg, reward);
    const auto csv = std::filesystem::path(out_dir) / "training_log.csv";
    const auto snapshot = std::filesystem::path(out_dir) / "policy.json";
    write_training_csv(result, csv);
    write_policy_snapshot(result, cfg, snapshot);

    std::cout << "iterations: " << result.log.size() << "\n"
              << "evidence selection rate (pos): " << result.evidence_selection_rate_pos << "\n"
              << "abstention rate (cf): " << result.abstention_rate_cf << "\n"
              << "abstention rate (rand): " << result.abstention_rate_rand << "\n"
              << "log: " << csv.string() << "\n"
              << "policy: " << snapshot.string() << "\n";
    return kExitSuccess;
}

int run_validate(const std::string& manifest, const std::string& images,
                 const std::string& out) {
    const std::filesystem::path manifest_path = manifest;
    const std::filesystem::path images_root =
        images.empty() ? manifest_path.parent_path() : std::filesystem::path(images);

    const std::vector<Violation> violations = validate_dataset(manifest_path, images_root);
    for (const Violation& v : violations)
        std::cout << "VIOLATION " << v.instance_id << " " << v.category << ": " << v.detail
                  << "\n";
    std::cout << "violations: " << violations.size() << "\n";

    if (!out.empty()) {
        std::ofstream report(out, std::ios::trunc);
        for (const Violation& v : violations) {
            nlohmann::ordered_json j;
            j["instance_id"] = v.instance_id;
            j["category"] = v.category;
            j["detail"] = v.detail;
            report << j.dump() << "\n";
        }
    }
    return violations.empty() ? kExitSuccess : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DeFacto counterfactual-supervision toolkit"};
    app.require_subcommand(1);

    // build-dataset
    auto* build = app.add_subcommand("build-dataset",
                                     "Build pos/cf/rand training instances from a source JSONL");
    std::string build_input, build_out, services_config, mode_override = "", fill = "black";
    std::uint64_t build_seed = 0;
    int build_workers = 1;
    double tau = 0.35, failure_ceiling = 0.10;
    build->add_option("--input", build_input, "source JSONL ({image, question, answer})")
        ->required();
    build->add_option("--out", build_out, "output directory")->required();
    build->add_option("--services-config", services_config, "evidence services config file");
    build->add_option("--mode", mode_override, "override service mode")
        ->check(CLI::IsMember({"stub", "live"}));
    build->add_option("--seed", build_seed, "pipeline seed")->required();
    build->add_option("--workers", build_workers, "parallel record workers");
    build->add_option("--tau", tau, "grounding threshold in (0,1)");
    build->add_option("--fill", fill, "mask fill: black, white or R,G,B");
    build->add_option("--failure-ceiling", failure_ceiling, "abort when failure rate exceeds this");

    // score
    auto* score = app.add_subcommand("score", "Score responses against a manifest");
    std::string score_manifest, score_input, score_out, reward_config;
    int score_workers = 1;
    score->add_option("--manifest", score_manifest, "manifest JSONL")->required();
    score->add_option("--input", score_input, "responses JSONL ({instance_id, response})")
        ->required();
    score->add_option("--out", score_out, "breakdown JSONL output")->required();
    score->add_option("--reward-config", reward_config, "reward coefficients file");
    score->add_option("--workers", score_workers, "parallel scoring workers");

    // train-sim
    auto* train_cmd = app.add_subcommand("train-sim", "Train the desk-scale selection policy");
    std::string sim_config, train_reward_config, train_out = ".";
    std::uint64_t train_seed = 0;
    train_cmd->add_option("--sim-config", sim_config, "simulation/optimizer config file");
    train_cmd->add_option("--reward-config", train_reward_config, "reward coefficients file");
    train_cmd->add_option("--out", train_out, "output directory for the CSV log and snapshot");
    auto* seed_opt = train_cmd->add_option("--seed", train_seed, "training seed");

    // validate
    auto* validate = app.add_subcommand("validate", "Re-check every manifest invariant");
    std::string validate_manifest, validate_images, validate_out;
    validate->add_option("--manifest", validate_manifest, "manifest JSONL")->required();
    validate->add_option("--images", validate_images, "image root (default: manifest directory)");
    validate->add_option("--out", validate_out, "violation report JSONL");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (build->parsed())
            return run_build_dataset(build_input, build_out, services_config, mode_override,
                                     build_seed, build_workers, tau, fill, failure_ceiling);
        if (score->parsed())
            return run_score(score_manifest, score_input, score_out, reward_config, score_workers);
        if (train_cmd->parsed())
            return run_train_sim(sim_config, train_reward_config, train_out, train_seed,
                                 seed_opt->count() > 0);
        if (validate->parsed())
            return run_validate(validate_manifest, validate_images, validate_out);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    } catch (const TrainingDivergedError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        // Configuration and startup problems (bad config files, missing
        // endpoints, unreadable inputs) land here.
        std::cerr << "configuration error: " << e.what() << "\n";
        return 2;
    }
    return kExitSuccess;
}
