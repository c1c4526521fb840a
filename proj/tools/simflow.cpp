#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "simflow/harness/pipeline.hpp"

namespace h = simflow::harness;

namespace {

h::json read_config(const std::string& path) {
    if (path.empty()) return h::json::object();
    std::ifstream is(path);
    if (!is) throw h::config_error("cannot open config file " + path);
    try {
        return h::json::parse(is, nullptr, true, true);
    } catch (const h::json::parse_error& e) {
        throw h::config_error(path + ": " + e.what());
    }
}

int run(const std::function<h::json(const h::experiment_config&)>& stage, const std::string& config_path,
        const h::overrides& o) {
    try {
        const auto cfg = h::resolve_config(read_config(config_path), o);
        const auto summary = stage(cfg);
        std::cout << summary.dump(2) << "\n";
        return 0;
    } catch (const h::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const h::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const h::artifact_error& e) {
        std::cerr << "missing or mismatched artifact: " << e.what() << "\n";
        return 4;
    } catch (const simflow::numerical_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const simflow::tasks::simulator_failure& e) {
        std::cerr << "simulator failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"simflow: flow-matching posterior estimation with simulator feedback"};
    app.require_subcommand(1);
    const std::map<std::string, std::function<h::json(const h::experiment_config&)>> stages = {
        {"generate", h::cmd_generate}, {"train", h::cmd_train}, {"finetune", h::cmd_finetune},
        {"sample", h::cmd_sample},     {"evaluate", h::cmd_evaluate}, {"sbc", h::cmd_sbc},
        {"mcmc", h::cmd_mcmc}};
    std::string config_path, out, profile;
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    std::string chosen;
    for (const auto& [name, fn] : stages) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--seed", seed, "root seed");
        sub->add_option("--out", out, "output directory");
        sub->add_option("--steps", steps, "training steps");
        sub->add_option("--profile", profile, "bundled profile")->check(CLI::IsMember(h::profile_names()));
        sub->callback([&chosen, n = std::string(name)] { chosen = n; });
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    const auto* sub = app.get_subcommand(chosen);
    h::overrides o;
    if (sub->count("--seed")) o.seed = seed;
    if (sub->count("--out")) o.out_dir = out;
    if (sub->count("--steps")) o.steps = steps;
    if (sub->count("--profile")) o.profile = profile;
    if (config_path.empty() && !o.profile) {
        std::cerr << "config error: give --config or --profile\n";
        return 2;
    }
    return run(stages.at(chosen), config_path, o);
}
