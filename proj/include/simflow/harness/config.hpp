#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "simflow/ad/checkpoint.hpp"
#include "simflow/ad/tensor.hpp"
#include "simflow/control/signal.hpp"
#include "simflow/tasks/registry.hpp"

#ifndef SIMFLOW_GIT_DESCRIBE
#define SIMFLOW_GIT_DESCRIBE "unknown"
#endif

namespace simflow::harness {

using json = nlohmann::json;

/// Exit code 2.
class config_error : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Exit code 4: a required file is absent or does not belong to this run.
class artifact_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline const char* git_describe() { return SIMFLOW_GIT_DESCRIBE; }

/// FNV-1a over bytes.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Hash of a JSON value's canonical (key-sorted) serialization.
inline std::string json_hash(const json& j) { return ad::hex64(fnv1a(j.dump())); }

struct data_section {
    std::size_t n_train = 10000;
    std::size_t n_val = 1000;
    std::size_t n_observations = 10;
    double max_failure_rate = 0.01;
    std::size_t workers = 0;  // 0: hardware concurrency
};

struct network_section {
    std::vector<std::size_t> widths{64, 64, 64};
    std::size_t time_embed_dim = 16;
    bool self_conditioning = false;
    std::string prediction = "velocity";  // velocity | x_prediction
    std::size_t conv_channels = 32;       // image tasks
    std::size_t conv_blocks = 4;
    std::size_t groups = 4;
};

struct train_section {
    std::size_t steps = 20000;
    std::size_t batch = 64;
    double lr = 1e-3;
    double weight_decay = 2e-5;
    double alpha = 0.0;
    std::string coupling = "ot";  // ot | independent
    double sigma_min = 1e-4;
    double ic_sigma = 1e-3;
    std::size_t eval_every = 100;
};

struct finetune_section {
    std::string variant = "gradient";
    std::size_t steps = 2000;
    std::size_t batch = 64;
    double lr = 1e-4;
    double weight_decay = 1e-5;
    double t_gate = 0.8;
    std::vector<std::size_t> control_widths{64, 64, 64};
    std::size_t time_embed_dim = 16;
    double grad_clip = 1e3;
    bool compress_cost = true;
    std::size_t record_every = 50;
};

struct sample_section {
    std::size_t euler_steps = 64;
    std::size_t n_samples = 1000;
    std::string controls = "none";  // none | gradient | learned | zero
};

struct mcmc_section {
    std::size_t walkers = 0;  // 0: default for the dimension
    std::size_t warmup = 2000;
    std::size_t steps = 2000;
    std::size_t thin = 1;
    double p_stretch = 0.5;
    double p_de = 0.5;
    std::size_t n_samples = 1000;
};

struct evaluate_section {
    std::vector<std::string> samples{"none"};  // sample sets by control tag
    std::vector<std::string> metrics{"c2st", "mmd"};
    std::string reference = "auto";  // auto | exact | mcmc
    std::size_t c2st_seeds = 5;
    std::size_t chi2_samples = 100;
};

struct sbc_section {
    std::size_t n_problems = 200;
    std::size_t L = 99;
    std::string sampler = "flow";  // flow | exact
    std::size_t bins = 20;
};

/// Fully resolved experiment configuration. `out_dir`, `stop_after` and the
/// worker count steer a single invocation and are excluded from the hash.
struct experiment_config {
    std::string task;
    std::string profile;
    std::uint64_t seed = 0;
    std::string out_dir = "runs/default";
    std::size_t stop_after = 0;  // train: stop (and checkpoint) at this step
    data_section data;
    network_section network;
    train_section train;
    finetune_section finetune;
    sample_section sample;
    mcmc_section mcmc;
    evaluate_section evaluate;
    sbc_section sbc;

    json to_json() const;
    json hashed_json() const {
        json j = to_json();
        j.erase("out_dir");
        j.erase("stop_after");
        j["data"].erase("workers");
        return j;
    }
    std::string hash() const { return json_hash(hashed_json()); }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(data_section, n_train, n_val, n_observations, max_failure_rate, workers)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(network_section, widths, time_embed_dim, self_conditioning, prediction,
                                   conv_channels, conv_blocks, groups)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(train_section, steps, batch, lr, weight_decay, alpha, coupling, sigma_min, ic_sigma,
                                   eval_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(finetune_section, variant, steps, batch, lr, weight_decay, t_gate, control_widths,
                                   time_embed_dim, grad_clip, compress_cost, record_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(sample_section, euler_steps, n_samples, controls)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(mcmc_section, walkers, warmup, steps, thin, p_stretch, p_de, n_samples)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(evaluate_section, samples, metrics, reference, c2st_seeds, chi2_samples)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(sbc_section, n_problems, L, sampler, bins)

inline json experiment_config::to_json() const {
    return {{"task", task},         {"profile", profile},   {"seed", seed},         {"out_dir", out_dir},
            {"stop_after", stop_after}, {"data", data},     {"network", network},   {"train", train},
            {"finetune", finetune}, {"sample", sample},     {"mcmc", mcmc},         {"evaluate", evaluate},
            {"sbc", sbc}};
}

inline std::vector<std::size_t> repeat_width(std::size_t w, std::size_t n) { return std::vector<std::size_t>(n, w); }

inline std::vector<std::size_t> concat_widths(std::initializer_list<std::vector<std::size_t>> parts) {
    std::vector<std::size_t> out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

/// Per-task defaults. The four benchmark rows (time exponent, batch size,
/// learning rate, residual-block widths) are the published tuned values.
inline experiment_config task_defaults(const std::string& task_name) {
    experiment_config c;
    try {
        c.task = tasks::canonical_task_name(task_name);
    } catch (const tasks::unknown_task& e) {
        throw config_error(e.what());
    }
    auto& t = c.train;
    auto& n = c.network;
    if (c.task == "lotka_volterra") {
        t.alpha = 1;
        t.batch = 32;
        t.lr = 1e-3;
        n.widths = concat_widths({{32, 64, 128, 256}, repeat_width(512, 5), {256, 128, 64, 32}});
    } else if (c.task == "slcp") {
        t.alpha = -0.5;
        t.batch = 256;
        t.lr = 5e-4;
        n.widths = concat_widths({{32, 64, 128, 256}, repeat_width(512, 5), {256, 128, 64, 32}});
    } else if (c.task == "sir") {
        t.alpha = 4;
        t.batch = 256;
        t.lr = 5e-4;
        n.widths = concat_widths({{32, 64, 128, 256}, repeat_width(512, 7), {256, 128, 64, 32}});
    } else if (c.task == "two_moons") {
        t.alpha = 4;
        t.batch = 64;
        t.lr = 2e-4;
        n.widths = concat_widths({{32, 64, 128, 256, 512}, repeat_width(1024, 3), {512, 128, 64, 32}});
    } else if (c.task == "linear_gaussian") {
        t.alpha = 0;
        t.batch = 128;
        t.lr = 1e-3;
        n.widths = {64, 64, 64};
    } else if (c.task == "lens") {
        t.alpha = 0;
        t.batch = 256;
        t.lr = 1e-4;
        t.weight_decay = 1e-5;
        n.widths = repeat_width(128, 8);
        auto& f = c.finetune;
        f.batch = 16;
        f.lr = 1e-4;
        f.weight_decay = 1e-5;
        f.control_widths = concat_widths({repeat_width(64, 3), repeat_width(32, 3)});
        c.sample.n_samples = 1000;
        c.evaluate.metrics = {"chi2"};
        c.evaluate.reference = "none";
    }
    return c;
}

inline std::vector<std::string> profile_names() { return {"toy", "tm-small", "lv-control", "lens-64", "paper-scale"}; }

/// Profile overlay as a JSON merge patch over the task defaults. The
/// desk-scale profiles pin their task; paper-scale applies to any task.
inline json profile_patch(const std::string& name, const std::string& task) {
    if (name == "toy")
        return {{"task", "linear_gaussian"},
                {"data", {{"n_train", 10000}, {"n_val", 1000}, {"n_observations", 3}}},
                {"network", {{"widths", {128, 128, 128, 128}}, {"time_embed_dim", 16}}},
                {"train", {{"steps", 15000}, {"batch", 256}, {"lr", 1e-3}, {"weight_decay", 0.0}}},
                {"sample", {{"n_samples", 2000}}},
                {"evaluate", {{"reference", "exact"}, {"metrics", {"c2st", "mmd"}}}},
                {"sbc", {{"n_problems", 200}, {"L", 99}}}};
    if (name == "tm-small")
        return {{"task", "two_moons"},
                {"data", {{"n_train", 10000}, {"n_val", 1000}, {"n_observations", 5}}},
                {"network",
                 {{"widths", concat_widths({{16, 32, 64, 128, 256}, repeat_width(512, 3), {256, 64, 32, 16}})}}},
                {"train", {{"steps", 20000}}},
                {"sample", {{"n_samples", 2000}}},
                {"mcmc", {{"walkers", 200}, {"warmup", 2000}, {"steps", 1000}, {"thin", 10}, {"n_samples", 2000}}},
                {"evaluate", {{"reference", "mcmc"}}}};
    if (name == "lv-control")
        return {{"task", "lotka_volterra"},
                {"data", {{"n_train", 10000}, {"n_val", 1000}, {"n_observations", 10}}},
                {"network", {{"widths", concat_widths({{16, 32, 64, 128}, repeat_width(256, 5), {128, 64, 32, 16}})}}},
                {"train", {{"steps", 8000}}},
                {"finetune", {{"variant", "gradient"}, {"steps", 1500}, {"batch", 64}, {"lr", 5e-4}}},
                {"sample", {{"n_samples", 2000}}},
                {"mcmc", {{"walkers", 64}, {"warmup", 2000}, {"steps", 2000}, {"thin", 10}, {"n_samples", 2000}}},
                {"evaluate", {{"reference", "mcmc"}, {"metrics", {"c2st"}}}}};
    if (name == "lens-64")
        return {{"task", "lens"},
                {"data", {{"n_train", 8000}, {"n_val", 500}, {"n_observations", 50}}},
                {"train", {{"steps", 3000}, {"batch", 64}, {"lr", 5e-4}}},
                {"finetune", {{"variant", "gradient"}, {"steps", 600}, {"batch", 16}, {"lr", 5e-4}}},
                {"sample", {{"n_samples", 64}}},
                {"mcmc", {{"walkers", 64}, {"warmup", 4000}, {"steps", 4000}, {"thin", 10}, {"n_samples", 1000}}},
                {"evaluate", {{"metrics", {"chi2"}}, {"chi2_samples", 64}}}};
    if (name == "paper-scale") {
        const auto d = task_defaults(task);
        const std::size_t n_train = d.task == "lens" ? 250000 : 100000;
        const std::size_t n_val = d.task == "lens" ? 25000 : 10000;
        // 2000 epochs of the training set at the task's batch size.
        const std::size_t steps = 2000 * (n_train / d.train.batch);
        return {{"data", {{"n_train", n_train}, {"n_val", n_val}, {"n_observations", 10}}},
                {"train", {{"steps", steps}}},
                {"finetune", {{"steps", 100000}}},
                {"sample", {{"n_samples", 10000}}},
                {"mcmc", {{"walkers", 400}, {"warmup", 20000}, {"steps", 10000}}}};
    }
    throw config_error("unknown profile '" + name + "'");
}

/// Rejects keys that the resolved structure does not know.
inline void check_known_keys(const json& user, const json& reference, const std::string& where = "") {
    if (!user.is_object()) return;
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string path = where.empty() ? it.key() : where + "." + it.key();
        if (!reference.contains(it.key())) throw config_error("unknown config key '" + path + "'");
        if (it.value().is_object()) check_known_keys(it.value(), reference.at(it.key()), path);
    }
}

/// Command-line overrides; unset fields leave the file values alone.
struct overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::size_t> steps;
    std::optional<std::string> profile;
};

/// task defaults <- profile <- user file <- command line. The seed must be
/// given explicitly.
inline experiment_config resolve_config(const json& user, const overrides& o = {}) {
    if (!user.is_object()) throw config_error("config must be a JSON object");
    std::string profile = o.profile.value_or(user.value("profile", std::string()));
    std::string task = user.value("task", std::string());
    if (task.empty() && !profile.empty() && profile != "paper-scale") task = profile_patch(profile, "").at("task");
    if (task.empty()) throw config_error("config must name a task (or a desk-scale profile)");
    json merged = task_defaults(task).to_json();
    if (!profile.empty()) {
        auto patch = profile_patch(profile, task);
        if (patch.contains("task") && tasks::canonical_task_name(patch.at("task")) != tasks::canonical_task_name(task))
            throw config_error("profile '" + profile + "' is for task " + patch.at("task").get<std::string>() +
                               ", config names " + task);
        patch.erase("task");
        merged.merge_patch(patch);
        merged["profile"] = profile;
    }
    check_known_keys(user, merged);
    json u = user;
    u.erase("task");
    u.erase("profile");
    merged.merge_patch(u);
    if (o.seed) merged["seed"] = *o.seed;
    else if (!user.contains("seed")) throw config_error("a seed must be given in the config or with --seed");
    if (o.out_dir) merged["out_dir"] = *o.out_dir;
    if (o.steps) merged["train"]["steps"] = *o.steps;
    experiment_config c;
    try {
        c.task = tasks::canonical_task_name(task);
        c.profile = merged.at("profile");
        c.seed = merged.at("seed").get<std::uint64_t>();
        c.out_dir = merged.at("out_dir");
        c.stop_after = merged.at("stop_after");
        c.data = merged.at("data");
        c.network = merged.at("network");
        c.train = merged.at("train");
        c.finetune = merged.at("finetune");
        c.sample = merged.at("sample");
        c.mcmc = merged.at("mcmc");
        c.evaluate = merged.at("evaluate");
        c.sbc = merged.at("sbc");
    } catch (const json::exception& e) {
        throw config_error(std::string("config value has the wrong type: ") + e.what());
    } catch (const tasks::unknown_task& e) {
        throw config_error(e.what());
    }
    auto fail = [](const std::string& m) { throw config_error(m); };
    if (c.data.n_train < 2 || c.data.n_val < 2) fail("data.n_train and data.n_val must be at least 2");
    if (!(c.data.max_failure_rate >= 0 && c.data.max_failure_rate < 1)) fail("data.max_failure_rate must be in [0, 1)");
    if (c.network.widths.empty()) fail("network.widths must not be empty");
    if (c.network.prediction != "velocity" && c.network.prediction != "x_prediction")
        fail("network.prediction must be velocity or x_prediction");
    if (c.train.steps == 0 || c.train.batch == 0 || !(c.train.lr > 0)) fail("train.steps, batch and lr must be positive");
    if (!(c.train.alpha > -1)) fail("train.alpha must exceed -1");
    if (c.train.coupling != "ot" && c.train.coupling != "independent") fail("train.coupling must be ot or independent");
    if (c.train.eval_every == 0) fail("train.eval_every must be positive");
    try {
        control::parse_variant(c.finetune.variant);
        control::parse_variant(c.sample.controls);
    } catch (const std::invalid_argument& e) {
        fail(e.what());
    }
    if (c.finetune.variant == "none") fail("finetune.variant 'none' trains nothing");
    if (!(c.finetune.t_gate >= 0 && c.finetune.t_gate < 1)) fail("finetune.t_gate must be in [0, 1)");
    if (c.finetune.control_widths.empty()) fail("finetune.control_widths must not be empty");
    if (c.sample.euler_steps == 0 || c.sample.n_samples == 0) fail("sample.euler_steps and n_samples must be positive");
    if (c.mcmc.thin == 0) fail("mcmc.thin must be positive");
    if (c.evaluate.reference != "auto" && c.evaluate.reference != "exact" && c.evaluate.reference != "mcmc" &&
        c.evaluate.reference != "none")
        fail("evaluate.reference must be auto, exact, mcmc or none");
    if (c.sbc.sampler != "flow" && c.sbc.sampler != "exact") fail("sbc.sampler must be flow or exact");
    return c;
}

} // namespace simflow::harness
