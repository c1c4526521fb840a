#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "simflow/control/controlled_flow.hpp"
#include "simflow/harness/config.hpp"
#include "simflow/harness/dataset.hpp"
#include "simflow/harness/models.hpp"
#include "simflow/mcmc/aies.hpp"
#include "simflow/metrics/c2st.hpp"
#include "simflow/metrics/calibration.hpp"
#include "simflow/metrics/mmd.hpp"
#include "simflow/metrics/report.hpp"
#include "simflow/tasks/registry.hpp"

namespace simflow::harness {

namespace fs = std::filesystem;

/// Resolved config plus the task built from the current task constants.
struct run_context {
    experiment_config cfg;
    json constants;
    std::unique_ptr<tasks::task> task;
    fs::path out;

    explicit run_context(experiment_config c) : cfg(std::move(c)) {
        try {
            constants = tasks::load_task_constants();
            task = tasks::make_task(cfg.task, constants);
        } catch (const json::exception& e) {
            throw config_error(std::string("task constants: ") + e.what());
        }
        out = cfg.out_dir;
        fs::create_directories(out);
    }

    const json& task_config() const { return constants.at(cfg.task); }
    std::string task_config_hash() const { return json_hash(task_config()); }

    /// Provenance stamped into every result file.
    json stamp() const { return {{"config_hash", cfg.hash()}, {"git", git_describe()}, {"task", cfg.task}}; }
};

inline void write_json(const fs::path& p, json j, const run_context& ctx) {
    j["provenance"] = ctx.stamp();
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << j.dump(2) << "\n";
}

inline json read_json(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw artifact_error("missing artifact " + p.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw artifact_error(p.string() + ": " + e.what());
    }
}

/// CSV with a leading comment line carrying the provenance.
class csv_writer {
public:
    csv_writer(const fs::path& p, const run_context& ctx, const std::string& header) : os_(p) {
        if (!os_) throw std::runtime_error("cannot write " + p.string());
        os_ << "# config_hash=" << ctx.cfg.hash() << " git=" << git_describe() << "\n" << header << "\n";
        os_.precision(10);
    }
    template <class... T>
    void row(const T&... v) {
        std::size_t k = 0;
        ((os_ << (k++ ? "," : "") << v), ...);
        os_ << "\n";
    }

private:
    std::ofstream os_;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline table_file new_table(const run_context& ctx, const std::string& kind,
                            std::vector<std::pair<std::string, std::size_t>> columns) {
    table_file t;
    t.columns = std::move(columns);
    t.header = {{"kind", kind},
                {"task", ctx.cfg.task},
                {"theta_dim", ctx.task->info().theta_dim},
                {"x_dim", ctx.task->info().x_dim},
                {"seed", ctx.cfg.seed},
                {"task_config", ctx.task_config()},
                {"task_config_hash", ctx.task_config_hash()},
                {"config_hash", ctx.cfg.hash()},
                {"git", git_describe()}};
    return t;
}

/// Loads a table written for this task with the current task constants.
inline table_file load_table(const run_context& ctx, const std::string& name) {
    auto t = table_file::load(ctx.out / name);
    if (t.header.value("task", std::string()) != ctx.cfg.task)
        throw artifact_error(name + " belongs to task " + t.header.value("task", std::string("?")));
    if (t.header.value("task_config_hash", std::string()) != ctx.task_config_hash())
        throw artifact_error(name + " was generated with different task constants");
    return t;
}

// ---------------------------------------------------------------- generate

struct simulated_rows {
    std::vector<param_vector> theta, x;
    std::size_t failures = 0;
    json failure_examples = json::array();
};

/// Prior draw and simulation for indices [0, n): row i uses the stream
/// (seed, tag, offset + i) alone, so any split over workers gives the same rows.
inline simulated_rows simulate_rows(const tasks::task& t, std::uint64_t seed, std::uint64_t tag, std::uint64_t offset,
                                    std::size_t n, std::size_t workers) {
    struct slot {
        param_vector theta, x;
        bool ok = false;
        std::string why;
    };
    std::vector<slot> slots(n);
    auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            rng r(derive_seed(seed, tag, offset + i));
            auto& s = slots[i];
            s.theta = t.sample_prior(r);
            try {
                s.x = t.simulate(s.theta, t.draw_noise(r));
                s.ok = std::all_of(s.x.begin(), s.x.end(), [](double v) { return std::isfinite(v); });
                if (!s.ok) s.why = "non-finite output";
            } catch (const tasks::simulator_failure& e) {
                s.why = e.what();
            }
        }
    };
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = std::min(workers, std::max<std::size_t>(n, 1));
    if (workers <= 1) {
        work(0, n);
    } else {
        std::vector<std::thread> pool;
        const std::size_t per = (n + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, std::min(n, w * per), std::min(n, (w + 1) * per));
        for (auto& th : pool) th.join();
    }
    simulated_rows out;
    for (std::size_t i = 0; i < n; ++i) {
        if (slots[i].ok) {
            out.theta.push_back(std::move(slots[i].theta));
            out.x.push_back(std::move(slots[i].x));
        } else {
            ++out.failures;
            if (out.failure_examples.size() < 5)
                out.failure_examples.push_back({{"index", offset + i}, {"theta", slots[i].theta}, {"error", slots[i].why}});
        }
    }
    return out;
}

inline constexpr std::uint64_t validation_offset = 1ULL << 40;

/// Training and validation sets plus held-out observations with their
/// generating parameters. Aborts when failures exceed the allowed rate.
inline json cmd_generate(const experiment_config& cfg) {
    run_context ctx(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const auto& t = *ctx.task;
    const std::size_t d = t.info().theta_dim, xd = t.info().x_dim;
    json summary = {{"stage", "generate"}};
    auto emit = [&](const std::string& kind, std::uint64_t offset, std::size_t n) {
        auto rows = simulate_rows(t, cfg.seed, stream::prior, offset, n, cfg.data.workers);
        const double rate = static_cast<double>(rows.failures) / static_cast<double>(n);
        if (rate > cfg.data.max_failure_rate)
            throw numerical_error(kind + ": simulator failure rate " + std::to_string(rate) + " exceeds " +
                                  std::to_string(cfg.data.max_failure_rate) + "; examples " + rows.failure_examples.dump());
        auto table = new_table(ctx, kind, {{"theta", d}, {"x", xd}});
        table.header["requested"] = n;
        table.header["failures"] = rows.failures;
        table.data.reserve(rows.theta.size() * (d + xd));
        for (std::size_t i = 0; i < rows.theta.size(); ++i) table.append({rows.theta[i], rows.x[i]});
        table.save(ctx.out / (kind + ".sfd"));
        summary[kind] = {{"requested", n},
                         {"rows", rows.theta.size()},
                         {"failures", rows.failures},
                         {"failure_examples", rows.failure_examples}};
    };
    emit("train", 0, cfg.data.n_train);
    emit("val", validation_offset, cfg.data.n_val);

    // Held-out observations: failures are skipped until enough succeed.
    auto obs = new_table(ctx, "observations", {{"theta", d}, {"x", xd}});
    std::size_t i = 0, failures = 0;
    while (obs.rows() < cfg.data.n_observations) {
        if (i > 100 * cfg.data.n_observations + 100) throw numerical_error("observations: too many simulator failures");
        auto rows = simulate_rows(t, cfg.seed, stream::observation, i++, 1, 1);
        if (rows.theta.empty()) {
            ++failures;
            continue;
        }
        obs.append({rows.theta[0], rows.x[0]});
    }
    obs.header["failures"] = failures;
    obs.save(ctx.out / "observations.sfd");
    summary["observations"] = {{"rows", obs.rows()}, {"failures", failures}};
    write_json(ctx.out / "generate.json", summary, ctx);
    write_json(ctx.out / "timing_generate.json", {{"seconds", seconds_since(t0)}}, ctx);
    return summary;
}

// ------------------------------------------------------------------- train

/// True when the validation loss trends down over the first half of training:
/// the means of four consecutive chunks of the first-half records decrease.
inline bool smoothed_decreasing(const std::vector<flow::loss_record>& h) {
    const std::size_t half = h.size() / 2;
    if (half < 4) return false;
    const std::size_t chunk = half / 4;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < 4; ++c) {
        double m = 0;
        for (std::size_t k = c * chunk; k < (c + 1) * chunk; ++k) m += h[k].val_loss;
        m /= static_cast<double>(chunk);
        if (!(m < prev)) return false;
        prev = m;
    }
    return true;
}

inline json history_json(const std::vector<flow::loss_record>& h) {
    json a = json::array();
    for (const auto& r : h) a.push_back({r.step, r.train_loss, r.val_loss});
    return a;
}

inline std::vector<flow::loss_record> history_from_json(const json& a) {
    std::vector<flow::loss_record> h;
    for (const auto& r : a) h.push_back({r.at(0).get<std::size_t>(), r.at(1).get<double>(), r.at(2).get<double>()});
    return h;
}

inline flow::train_config train_settings(const experiment_config& c) {
    flow::train_config tc;
    tc.steps = c.train.steps;
    tc.batch = c.train.batch;
    tc.adam.lr = c.train.lr;
    tc.adam.weight_decay = c.train.weight_decay;
    tc.path.kind = c.train.coupling == "ot" ? flow::path_kind::conditional_ot : flow::path_kind::independent_coupling;
    tc.path.sigma_min = c.train.sigma_min;
    tc.path.sigma = c.train.ic_sigma;
    tc.path.alpha = c.train.alpha;
    tc.seed = c.seed;
    tc.eval_every = c.train.eval_every;
    return tc;
}

/// Pretrains the base flow. An unfinished base.ckpt written under the same
/// config is resumed; the per-step RNG streams make the result identical to
/// an uninterrupted run.
inline json cmd_train(const experiment_config& cfg) {
    run_context ctx(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const auto& t = *ctx.task;
    const auto train = load_table(ctx, "train.sfd");
    const auto val = load_table(ctx, "val.sfd");
    const auto theta_raw = train.tensor_of("theta"), x_raw = train.tensor_of("x");
    flow_bundle b;
    b.task = cfg.task;
    b.theta_space = flow::standardizer::fit(theta_raw, t.info().theta_log);
    b.x_space = obs_transform::fit(t, x_raw);
    const auto theta = b.theta_space.forward(theta_raw), x = b.x_space.forward(x_raw);
    const auto vtheta = b.theta_space.forward(val.tensor_of("theta")), vx = b.x_space.forward(val.tensor_of("x"));

    flow::train_state st;
    const fs::path ck_path = ctx.out / "base.ckpt";
    bool resumed = false;
    if (fs::exists(ck_path)) {
        auto ck = ad::checkpoint::load(ck_path.string());
        if (!ck.meta.value("complete", true) && ck.meta.value("config_hash", std::string()) == cfg.hash()) {
            b.model.net = std::move(ck.net);
            st.opt = std::move(ck.optimizer);
            st.step = ck.meta.at("step");
            st.initial_val = ck.meta.at("initial_val");
            st.history = history_from_json(ck.meta.at("history"));
            st.loss_sum = ck.meta.at("loss_sum");
            st.loss_count = ck.meta.at("loss_count");
            resumed = true;
        }
    }
    if (!resumed) b.model.net = ad::build_network(base_network_spec(cfg.network, t), derive_seed(cfg.seed, stream::init));
    b.model.theta_dim = t.info().theta_dim;
    b.model.obs_dim = t.info().x_dim;
    b.model.self_conditioning = cfg.network.self_conditioning;
    b.model.mode = cfg.network.prediction == "x_prediction" ? flow::prediction::x_prediction : flow::prediction::velocity;
    b.model.check();

    const auto tc = train_settings(cfg);
    const std::size_t start_step = st.step;
    if (cfg.network.self_conditioning)
        control::train_self_conditioned(b.model, theta, x, vtheta, vx, tc, st, {}, cfg.stop_after);
    else
        flow::train_cfm(b.model, theta, x, vtheta, vx, tc, st, cfg.stop_after);

    const bool complete = st.step >= tc.steps;
    b.meta = {{"step", st.step},
              {"steps", tc.steps},
              {"complete", complete},
              {"initial_val", st.initial_val},
              {"history", history_json(st.history)},
              {"loss_sum", st.loss_sum},
              {"loss_count", st.loss_count},
              {"config_hash", cfg.hash()},
              {"train_rows", train.rows()}};
    auto ck = b.to_checkpoint(cfg.seed);
    ck.optimizer = st.opt;
    ck.save(ck_path.string());

    csv_writer loss(ctx.out / "loss.csv", ctx, "step,train_loss,val_loss");
    for (const auto& r : st.history) loss.row(r.step, r.train_loss, r.val_loss);
    json summary = {{"stage", "train"},
                    {"steps_done", st.step},
                    {"steps", tc.steps},
                    {"complete", complete},
                    {"resumed_from", start_step},
                    {"parameters", b.model.net.parameter_count()},
                    {"initial_val_loss", st.initial_val},
                    {"final_val_loss", st.history.empty() ? st.initial_val : st.history.back().val_loss},
                    {"val_loss_decreasing_first_half", smoothed_decreasing(st.history)},
                    {"base_checksum", b.checksum()}};
    write_json(ctx.out / "train.json", summary, ctx);
    write_json(ctx.out / "timing_train.json", {{"seconds", seconds_since(t0)}, {"steps", st.step - start_step}}, ctx);
    return summary;
}

// ---------------------------------------------------------------- finetune

inline std::unique_ptr<flow_bundle> load_base(const run_context& ctx) {
    auto b = std::make_unique<flow_bundle>(flow_bundle::load((ctx.out / "base.ckpt").string()));
    if (b->task != ctx.cfg.task) throw artifact_error("base.ckpt was trained for task " + b->task);
    if (!b->meta.value("complete", false)) throw artifact_error("base.ckpt holds an unfinished training run");
    return b;
}

inline std::string control_file(const std::string& variant) { return "control_" + variant + ".ckpt"; }

/// Trains the control network against the frozen base; the base checksum is
/// verified unchanged and written next to the simulator-call count.
inline json cmd_finetune(const experiment_config& cfg) {
    run_context ctx(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    const auto& t = *ctx.task;
    auto base = load_base(ctx);
    const auto train = load_table(ctx, "train.sfd");
    const auto kind = control::parse_variant(cfg.finetune.variant);
    if (kind == control::variant::gradient && !t.info().differentiable)
        throw config_error("gradient controls need a differentiable simulator; task " + cfg.task + " is not");
    const auto sim = make_handle(t, base->x_space);
    if (sim.theta_dim != base->model.theta_dim) throw config_error("base/control dimension mismatch");

    control::control_dataset data;
    data.theta = base->theta_space.forward(train.tensor_of("theta"));
    data.x = base->x_space.forward(train.tensor_of("x"));
    data.x_native.reserve(train.rows());
    for (std::size_t i = 0; i < train.rows(); ++i) data.x_native.push_back(train.get(i, "x"));

    auto cf = control::controlled_flow::make(base->model, base->theta_space, kind, cfg.seed, &sim,
                                             cfg.finetune.control_widths, cfg.finetune.time_embed_dim);
    cf.t_gate = cfg.finetune.t_gate;
    cf.signal.compress = cfg.finetune.compress_cost;
    cf.signal.grad_clip = cfg.finetune.grad_clip;
    control::finetune_config fc;
    fc.steps = cfg.finetune.steps;
    fc.batch = cfg.finetune.batch;
    fc.adam.lr = cfg.finetune.lr;
    fc.adam.weight_decay = cfg.finetune.weight_decay;
    fc.sigma_min = cfg.train.sigma_min;
    fc.seed = cfg.seed;
    fc.record_every = cfg.finetune.record_every;
    const std::string before = base->checksum();
    ad::adam_state<float> opt;
    const auto res = control::finetune_with_controls(cf, sim, data, fc, opt);
    const std::string after = base->checksum();
    if (before != after) throw std::logic_error("finetune changed the base flow");

    ad::checkpoint ck;
    ck.net = cf.control_net;
    ck.seed = cfg.seed;
    ck.base_hash = before;
    ck.meta = {{"variant", cfg.finetune.variant},
               {"t_gate", cf.t_gate},
               {"compress_cost", cf.signal.compress},
               {"grad_clip", cf.signal.grad_clip},
               {"config_hash", cfg.hash()}};
    ck.save((ctx.out / control_file(cfg.finetune.variant)).string());
    if (kind == control::variant::learned) {
        ad::checkpoint enc;
        enc.net = cf.encoder;
        enc.seed = cfg.seed;
        enc.base_hash = before;
        enc.save((ctx.out / ("control_" + cfg.finetune.variant + "_encoder.ckpt")).string());
    }
    const std::size_t control_params =
        cf.control_net.parameter_count() + (kind == control::variant::learned ? cf.encoder.parameter_count() : 0);
    const bool calls_simulator = kind == control::variant::gradient || kind == control::variant::learned;
    csv_writer loss(ctx.out / ("finetune_" + cfg.finetune.variant + "_loss.csv"), ctx, "step,loss");
    for (const auto& r : res.history) loss.row(r.step, r.loss);
    json summary = {{"stage", "finetune"},
                    {"variant", cfg.finetune.variant},
                    {"steps", fc.steps},
                    {"batch", fc.batch},
                    {"simulator_calls", res.counter.calls},
                    {"simulator_failures", res.counter.failures},
                    {"expected_calls", calls_simulator ? fc.steps * fc.batch : 0},
                    {"base_checksum_before", before},
                    {"base_checksum_after", after},
                    {"base_parameters", base->model.net.parameter_count()},
                    {"control_parameters", control_params},
                    {"control_fraction",
                     static_cast<double>(control_params) / static_cast<double>(base->model.net.parameter_count())},
                    {"final_loss", res.history.empty() ? 0.0 : res.history.back().loss}};
    write_json(ctx.out / ("finetune_" + cfg.finetune.variant + ".json"), summary, ctx);
    write_json(ctx.out / ("timing_finetune_" + cfg.finetune.variant + ".json"), {{"seconds", seconds_since(t0)}}, ctx);
    return summary;
}

// ------------------------------------------------------------------ sample

inline std::unique_ptr<posterior_sampler> make_sampler(const run_context& ctx, const std::string& controls) {
    auto s = std::make_unique<posterior_sampler>(load_base(ctx), *ctx.task);
    if (controls != "none") s->attach_control((ctx.out / control_file(controls)).string());
    return s;
}

inline std::string samples_file(const std::string& tag) { return "samples_" + tag + ".sfd"; }

/// Posterior samples for every held-out observation, with per-step timing.
inline json cmd_sample(const experiment_config& cfg) {
    run_context ctx(cfg);
    const auto& c = cfg.sample;
    auto sampler = make_sampler(ctx, c.controls);
    const auto obs = load_table(ctx, "observations.sfd");
    const std::size_t d = ctx.task->info().theta_dim;
    auto table = new_table(ctx, "samples", {{"obs_index", 1}, {"theta", d}});
    table.header["controls"] = c.controls;
    table.header["per_observation"] = c.n_samples;
    control::call_counter counter;
    json per_obs = json::array();
    double total_seconds = 0;
    for (std::size_t i = 0; i < obs.rows(); ++i) {
        rng r(derive_seed(cfg.seed, stream::sample, i));
        const auto t0 = std::chrono::steady_clock::now();
        const auto draws = sampler->sample(obs.get(i, "x"), c.n_samples, c.euler_steps, r, counter);
        const double sec = seconds_since(t0);
        total_seconds += sec;
        per_obs.push_back({{"obs", i}, {"seconds", sec}, {"seconds_per_step", sec / static_cast<double>(c.euler_steps)}});
        for (const auto& th : draws) table.append({{static_cast<double>(i)}, th});
    }
    table.save(ctx.out / samples_file(c.controls));
    const std::size_t gated =
        sampler->controlled() ? control::gated_steps(c.euler_steps, sampler->control().t_gate) : 0;
    const bool calls = sampler->controlled() && (sampler->control().kind == control::variant::gradient ||
                                                 sampler->control().kind == control::variant::learned);
    json summary = {{"stage", "sample"},
                    {"controls", c.controls},
                    {"observations", obs.rows()},
                    {"per_observation", c.n_samples},
                    {"euler_steps", c.euler_steps},
                    {"gated_steps", gated},
                    {"simulator_calls", counter.calls},
                    {"simulator_failures", counter.failures},
                    {"expected_calls", calls ? obs.rows() * c.n_samples * gated : 0}};
    write_json(ctx.out / ("sample_" + c.controls + ".json"), summary, ctx);
    const double per_obs_mean = total_seconds / static_cast<double>(obs.rows());
    write_json(ctx.out / ("timing_sample_" + c.controls + ".json"),
               {{"per_observation", per_obs},
                {"seconds_per_observation", per_obs_mean},
                {"seconds_per_1000_samples", per_obs_mean * 1000.0 / static_cast<double>(c.n_samples)},
                {"seconds_per_euler_step", per_obs_mean / static_cast<double>(c.euler_steps)}},
               ctx);
    return summary;
}

// -------------------------------------------------------------------- mcmc

/// Prior times likelihood; requires a tractable task.
inline mcmc::log_prob_fn posterior_log_prob(const tasks::task& t, const param_vector& x_o) {
    if (!t.info().tractable) throw config_error("task " + t.info().name + " has no tractable likelihood for MCMC");
    return [&t, x_o](const param_vector& th) {
        const double lp = t.log_prior(th);
        if (!std::isfinite(lp)) return lp;
        try {
            return lp + t.log_likelihood(th, x_o);
        } catch (const tasks::simulator_failure&) {
            return -std::numeric_limits<double>::infinity();
        }
    };
}

inline mcmc::aies_config aies_settings(const mcmc_section& m) {
    mcmc::aies_config a;
    a.warmup = m.warmup;
    a.n_steps = m.steps;
    a.thin = m.thin;
    a.moves.p_stretch = m.p_stretch;
    a.moves.p_de = m.p_de;
    return a;
}

/// `n` draws spread evenly over the kept ensemble states.
inline std::vector<param_vector> spread_draws(const mcmc::aies_result& res, std::size_t n) {
    const auto all = res.flat();
    if (all.size() < n) throw config_error("mcmc keeps " + std::to_string(all.size()) + " draws, fewer than n_samples");
    std::vector<param_vector> out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = all[k * all.size() / n];
    return out;
}

/// AIES reference posteriors for every held-out observation, with warmup and
/// sampling times reported separately.
inline json cmd_mcmc(const experiment_config& cfg) {
    run_context ctx(cfg);
    const auto& t = *ctx.task;
    const auto obs = load_table(ctx, "observations.sfd");
    const std::size_t d = t.info().theta_dim;
    const std::size_t walkers = cfg.mcmc.walkers ? cfg.mcmc.walkers : mcmc::default_walkers(d);
    auto table = new_table(ctx, "reference", {{"obs_index", 1}, {"theta", d}});
    json rows = json::array(), timing = json::array();
    for (std::size_t i = 0; i < obs.rows(); ++i) {
        rng r(derive_seed(cfg.seed, stream::mcmc, i));
        const auto lp = posterior_log_prob(t, obs.get(i, "x"));
        auto init = mcmc::init_ensemble([&t](rng& g) { return t.sample_prior(g); }, lp, walkers, r, 100000);
        const auto res = mcmc::aies_run(lp, std::move(init), aies_settings(cfg.mcmc), r);
        const auto ess = mcmc::effective_sample_size(res);
        const double min_ess = *std::min_element(ess.begin(), ess.end());
        for (const auto& th : spread_draws(res, cfg.mcmc.n_samples)) table.append({{static_cast<double>(i)}, th});
        rows.push_back({{"obs", i}, {"acceptance", res.acceptance}, {"ess", ess}, {"log_prob_calls", res.log_prob_calls}});
        const double total = res.warmup_seconds + res.sampling_seconds;
        timing.push_back({{"obs", i},
                          {"warmup_seconds", res.warmup_seconds},
                          {"sampling_seconds", res.sampling_seconds},
                          {"seconds_per_1000_effective", total * 1000.0 / min_ess}});
    }
    table.save(ctx.out / "reference.sfd");
    json summary = {{"stage", "mcmc"}, {"walkers", walkers}, {"per_observation", rows}};
    write_json(ctx.out / "mcmc.json", summary, ctx);
    write_json(ctx.out / "timing_mcmc.json", {{"per_observation", timing}}, ctx);
    return summary;
}

// ---------------------------------------------------------------- evaluate

/// Rows of a samples/reference table grouped by observation index.
inline std::vector<std::vector<param_vector>> group_by_observation(const table_file& t, std::size_t n_obs) {
    std::vector<std::vector<param_vector>> out(n_obs);
    for (std::size_t r = 0; r < t.rows(); ++r) {
        const auto i = static_cast<std::size_t>(t.get(r, "obs_index")[0]);
        if (i >= n_obs) throw artifact_error("sample table refers to observation " + std::to_string(i));
        out[i].push_back(t.get(r, "theta"));
    }
    return out;
}

/// Exact posterior sampler when the task has one.
inline std::optional<std::function<std::vector<param_vector>(const param_vector&, std::size_t, rng&)>>
exact_posterior(const tasks::task& t) {
    if (const auto* lg = dynamic_cast<const tasks::linear_gaussian*>(&t))
        return [lg](const param_vector& x, std::size_t n, rng& r) { return lg->sample_posterior(x, n, r); };
    if (const auto* tm = dynamic_cast<const tasks::two_moons*>(&t))
        return [tm](const param_vector& x, std::size_t n, rng& r) { return tm->sample_posterior(x, n, r); };
    return std::nullopt;
}

/// Reference posterior samples per observation, or nothing for reference "none".
inline std::optional<std::vector<std::vector<param_vector>>> reference_samples(const run_context& ctx,
                                                                                const table_file& obs) {
    std::string ref = ctx.cfg.evaluate.reference;
    const auto exact = exact_posterior(*ctx.task);
    if (ref == "auto") ref = exact ? "exact" : fs::exists(ctx.out / "reference.sfd") ? "mcmc" : "none";
    if (ref == "none") return std::nullopt;
    if (ref == "mcmc") return group_by_observation(load_table(ctx, "reference.sfd"), obs.rows());
    if (!exact) throw config_error("task " + ctx.cfg.task + " has no exact posterior sampler");
    std::vector<std::vector<param_vector>> out(obs.rows());
    for (std::size_t i = 0; i < obs.rows(); ++i) {
        rng r(derive_seed(ctx.cfg.seed, stream::metric, 1000 + i));
        out[i] = (*exact)(obs.get(i, "x"), ctx.cfg.sample.n_samples, r);
    }
    return out;
}

inline double lens_chi2(const tasks::task& t, const param_vector& theta, const param_vector& x_o) {
    const auto& lt = dynamic_cast<const lens::lens_task&>(t);
    return lens::chi2(lens::expand_free(theta), lens::observation_from_image(x_o, lt.inst()), lt.inst());
}

/// Metric rows per (sample set, observation), a C2ST null row on identical
/// sample sets, and per-set summaries.
inline json cmd_evaluate(const experiment_config& cfg) {
    run_context ctx(cfg);
    const auto& ev = cfg.evaluate;
    const auto obs = load_table(ctx, "observations.sfd");
    const auto ref = reference_samples(ctx, obs);
    const bool is_lens = dynamic_cast<const lens::lens_task*>(ctx.task.get()) != nullptr;
    metrics::c2st_config cc;
    cc.seeds = ev.c2st_seeds;
    cc.seed = derive_seed(cfg.seed, stream::metric);
    csv_writer csv(ctx.out / "metrics.csv", ctx, "samples,obs,metric,value,uncertainty");
    json rows = json::array(), summary = json::object();
    auto add = [&](const std::string& set, long long o, const std::string& metric, double v, double u) {
        csv.row(set, o, metric, v, u);
        rows.push_back({{"samples", set}, {"obs", o}, {"metric", metric}, {"value", v}, {"uncertainty", u}});
    };
    if (ref) {
        const auto m = metrics::to_matrix((*ref)[0]);
        const auto null = metrics::c2st(m, m, cc);
        add("reference", 0, "c2st_null", null.accuracy, null.standard_error());
    }
    for (const auto& set : ev.samples) {
        const auto samples = group_by_observation(load_table(ctx, samples_file(set)), obs.rows());
        std::map<std::string, std::vector<double>> per_metric;
        for (std::size_t i = 0; i < obs.rows(); ++i) {
            for (const auto& metric : ev.metrics) {
                if (metric == "chi2") {
                    if (!is_lens) throw config_error("metric chi2 is defined for the lens task only");
                    const auto x_o = obs.get(i, "x");
                    const std::size_t n = std::min(ev.chi2_samples, samples[i].size());
                    double s = 0;
                    std::size_t k = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double c = lens_chi2(*ctx.task, samples[i][j], x_o);
                        if (std::isfinite(c)) {
                            s += c;
                            ++k;
                        }
                    }
                    const double v = k ? s / static_cast<double>(k) : std::nan("");
                    add(set, static_cast<long long>(i), "chi2", v, std::nan(""));
                    per_metric["chi2"].push_back(v);
                    continue;
                }
                if (!ref) throw config_error("metric " + metric + " needs a reference posterior");
                const auto p = metrics::to_matrix(samples[i]), q = metrics::to_matrix((*ref)[i]);
                if (metric == "c2st") {
                    const auto res = metrics::c2st(p, q, cc);
                    add(set, static_cast<long long>(i), "c2st", res.accuracy, res.standard_error());
                    per_metric["c2st"].push_back(res.accuracy);
                } else if (metric == "mmd") {
                    const double v = metrics::mmd(p, q);
                    add(set, static_cast<long long>(i), "mmd", v, std::nan(""));
                    per_metric["mmd"].push_back(v);
                } else {
                    throw config_error("unknown metric '" + metric + "'");
                }
            }
        }
        for (const auto& [metric, vals] : per_metric) {
            double m = 0, s2 = 0;
            for (double v : vals) m += v / static_cast<double>(vals.size());
            for (double v : vals) s2 += (v - m) * (v - m);
            summary[set][metric] = {{"mean", m},
                                    {"sd", vals.size() > 1 ? std::sqrt(s2 / static_cast<double>(vals.size() - 1)) : 0.0},
                                    {"values", vals}};
        }
    }
    json out = {{"stage", "evaluate"}, {"rows", rows}, {"summary", summary}};
    write_json(ctx.out / "metrics.json", out, ctx);
    return out;
}

// --------------------------------------------------------------------- sbc

/// Simulation-based calibration of the base flow (or the exact sampler):
/// coordinate ranks, histograms and chi-square uniformity p-values.
inline json cmd_sbc(const experiment_config& cfg) {
    run_context ctx(cfg);
    const auto& t = *ctx.task;
    const auto& s = cfg.sbc;
    std::unique_ptr<posterior_sampler> flow_sampler;
    std::optional<std::function<std::vector<param_vector>(const param_vector&, std::size_t, rng&)>> exact;
    if (s.sampler == "exact") {
        exact = exact_posterior(t);
        if (!exact) throw config_error("task " + cfg.task + " has no exact posterior sampler");
    } else {
        flow_sampler = make_sampler(ctx, cfg.sample.controls);
    }
    control::call_counter counter;
    metrics::sbc_problem_fns fns;
    fns.prior = [&t](rng& r) { return t.sample_prior(r); };
    fns.simulate = [&t](const param_vector& th, rng& r) { return t.simulate(th, t.draw_noise(r)); };
    fns.posterior = [&](const param_vector& x, std::size_t L, rng& r) {
        if (exact) return (*exact)(x, L, r);
        return flow_sampler->sample(x, L, cfg.sample.euler_steps, r, counter);
    };
    rng r(derive_seed(cfg.seed, stream::metric, 7));
    const std::size_t d = t.info().theta_dim;
    metrics::sbc_result res;
    try {
        res = metrics::sbc_ranks(fns, metrics::coordinate_probes(d), s.n_problems, s.L, r);
    } catch (const std::invalid_argument& e) {
        throw config_error(e.what());
    }
    csv_writer ranks(ctx.out / "sbc_ranks.csv", ctx, "coordinate,problem,rank");
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t p = 0; p < res.ranks[j].size(); ++p) ranks.row(j, p, res.ranks[j][p]);
    const std::size_t bins = s.bins ? s.bins : s.L + 1;
    csv_writer hist(ctx.out / "sbc_histogram.csv", ctx, "coordinate,bin,count");
    json pvalues = json::array();
    for (std::size_t j = 0; j < d; ++j) {
        std::vector<std::size_t> counts(bins, 0);
        for (auto k : res.ranks[j]) ++counts[k * bins / (s.L + 1)];
        for (std::size_t b = 0; b < bins; ++b) hist.row(j, b, counts[b]);
        try {
            pvalues.push_back(metrics::uniformity_test(res.ranks[j], s.L, s.bins));
        } catch (const std::invalid_argument& e) {
            throw config_error(e.what());
        }
    }
    json summary = {{"stage", "sbc"},
                    {"sampler", s.sampler},
                    {"L", s.L},
                    {"problems", s.n_problems},
                    {"failures", res.failures},
                    {"bins", bins},
                    {"uniformity_p_values", pvalues}};
    write_json(ctx.out / "sbc.json", summary, ctx);
    return summary;
}

} // namespace simflow::harness
