// SPDX-License-Identifier: Apache-2.0
// pcolab command-line driver. Every command reads the experiment config,
// writes its artifacts under --out and a JSON run record to <out>/runs/.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pcolab/experiment.hpp"
#include "pcolab/oracle.hpp"

namespace fs = std::filesystem;
using namespace pcolab;

namespace {

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kMissing = 3, kNumeric = 4, kIo = 5, kChecksFailed = 6 };

int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::config:
        case ErrorKind::invalid_argument: return kConfig;
        case ErrorKind::missing_artifact: return kMissing;
        case ErrorKind::numeric: return kNumeric;
        case ErrorKind::io: return kIo;
        case ErrorKind::shape:
        case ErrorKind::data: return kOther;
    }
    return kOther;
}

struct Args {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = "runs/default";
    std::string precision = "f64";
    std::string loss = "pairwise-cringe";
    std::string task = "repetition";
    int iterations = 2;
    std::string checkpoint;
    std::string baseline;
    std::string method;
    int seeds = 1;
    bool quiet = false;
};

struct Context {
    Args args;
    ExperimentConfig cfg;
    nlohmann::json cfg_json;
    std::uint64_t seed = 0;
    std::vector<std::string> outputs;
    nlohmann::json summary = nlohmann::json::object();

    std::string path(const std::string& name) const { return (fs::path(args.out) / name).string(); }
    void log(const std::string& msg) const {
        if (!args.quiet) std::cerr << "[pcolab] " << msg << std::endl;
    }
};

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write " + path);
    f << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorKind::missing_artifact, "not found: " + path);
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::data, path + ": " + e.what());
    }
}

ExperimentConfig load_config(const Args& a) {
    if (a.config_path.empty()) return ExperimentConfig{};
    auto j = read_json(a.config_path);
    try {
        return j.get<ExperimentConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::config, a.config_path + ": " + e.what());
    }
}

std::string require_file(const std::string& p, const std::string& hint) {
    if (!fs::exists(p)) throw Error(ErrorKind::missing_artifact, p + " does not exist; run '" + hint + "' first");
    return p;
}

// ----------------------------- commands -----------------------------

void cmd_gen_corpus(Context& c) {
    auto data = make_data(c.cfg, c.seed);
    c.outputs = save_data(c.args.out, data);
    c.summary = {{"train_sentences", data.train.size()}, {"held_out", data.held_out.size()},
                 {"vocab_size", data.vocab.size()}};
    c.log("wrote corpus with " + std::to_string(data.train.size()) + " training sentences");
}

ExperimentData staged_data(const Context& c) {
    require_file(c.path(kVocabFile), "gen-corpus");
    return load_data(c.args.out);
}

template <typename T>
TransformerLM<T> load_model(const std::string& path, const std::string& hint) {
    return TransformerLM<T>::load(require_file(path, hint));
}

template <typename T>
void cmd_sft(Context& c) {
    auto data = staged_data(c);
    double ce = 0.0;
    auto model = train_sft_model<T>(c.cfg, data, c.seed, &ce);
    const auto out = c.path("sft.ckpt");
    model.save(out, c.seed, {}, {{"stage", "sft"}});
    c.outputs = {out};
    c.summary = {{"held_out_ce", ce}, {"parameters", model.parameter_count()}};
    c.log("sft held-out CE " + std::to_string(ce));
}

std::string pairs_file(const Context& c, Task t) { return c.path(std::string("pairs_") + to_string(t) + ".jsonl"); }

template <typename T>
void cmd_make_pairs(Context& c) {
    auto data = staged_data(c);
    auto model = load_model<T>(c.path("sft.ckpt"), "sft");
    const auto task = parse_task(c.args.task);
    MiningStats st;
    auto ds = original_pairs(task, model, data, c.cfg, c.seed, &st);
    if (ds.empty()) throw Error(ErrorKind::data, "no preference pairs survived for task " + c.args.task);
    ds.save_jsonl(pairs_file(c, task), data.vocab);
    c.outputs = {pairs_file(c, task)};
    c.summary = {{"prompts", st.prompts},           {"kept", st.kept},
                 {"no_repeat", st.no_repeat},       {"degenerate", st.degenerate},
                 {"fallback_count", st.fallback_count}};
    c.log("kept " + std::to_string(ds.size()) + " pairs");
}

template <typename T>
MetricReport evaluate_for(const Context& c, const ExperimentData& data, const TransformerLM<T>& model, Task task,
                          const std::string& method, int iteration) {
    const auto judge = task_reward(task, c.cfg, data.vocab, c.seed);
    std::optional<std::vector<double>> base;
    if (task == Task::hidden_reward) {
        const auto baseline_path = c.args.baseline.empty() ? c.path("sft.ckpt") : c.args.baseline;
        base = baseline_rewards(load_model<T>(baseline_path, "sft"), data, c.cfg, judge);
    }
    return evaluate_task(model, data, c.cfg, judge, method, iteration, c.seed, base ? &*base : nullptr);
}

template <typename T>
void cmd_train(Context& c) {
    auto data = staged_data(c);
    auto sft_model = load_model<T>(c.path("sft.ckpt"), "sft");
    const auto task = parse_task(c.args.task);
    const auto variant = parse_loss_variant(c.args.loss);
    auto ds = PreferenceDataset::load_jsonl(require_file(pairs_file(c, task), "make-pairs"), data.vocab);
    TrainPlan plan = c.cfg.pref;
    plan.loss = task_loss(task, c.cfg, variant);
    plan.seed = c.seed;
    const auto reward = task_reward(task, c.cfg, data.vocab, c.seed);
    auto res = train_pref(sft_model, ds, plan, &sft_model, {},
                          plan.patience > 0 ? reward_validation<T>(data, c.cfg, reward) : Validation<T>{});
    const std::string name = std::string(to_string(task)) + "_" + to_string(variant);
    const auto ckpt = c.path("train_" + name + ".ckpt");
    res.model.save(ckpt, c.seed, {}, {{"stage", "train"}, {"loss", plan.loss}});
    auto metrics = evaluate_for(c, data, res.model, task, to_string(variant), 1);
    const auto report = c.path("train_" + name + ".json");
    write_json(report, {{"metrics", metrics},
                        {"curve", res.curve},
                        {"steps_run", res.steps_run},
                        {"early_stopped", res.early_stopped},
                        {"final_loss", res.final_loss}});
    c.outputs = {ckpt, report};
    c.summary = metrics;
}

template <typename T>
void cmd_pco(Context& c) {
    auto data = staged_data(c);
    auto sft_model = load_model<T>(c.path("sft.ckpt"), "sft");
    const auto task = parse_task(c.args.task);
    const auto variant = parse_loss_variant(c.args.loss);
    require(c.args.iterations >= 1, ErrorKind::config, "--iterations must be >= 1");
    auto ds = PreferenceDataset::load_jsonl(require_file(pairs_file(c, task), "make-pairs"), data.vocab);
    const std::string name = std::string(to_string(task)) + "_" + to_string(variant);
    const auto dir = c.path("pco_" + name);
    Evaluator<T> eval = [&](const TransformerLM<T>& m) {
        return evaluate_for(c, data, m, task, to_string(variant), 0);
    };
    auto res = run_iterations(task, sft_model, ds, data, c.cfg, c.seed, variant, c.args.iterations, eval, dir);
    const auto report = c.path("pco_" + name + ".json");
    write_json(report, {{"task", to_string(task)}, {"iterations", res.reports}});
    c.outputs = {report};
    for (const auto& r : res.reports) c.outputs.push_back(r.checkpoint);
    c.summary = res.reports.back().metrics;
}

template <typename T>
void cmd_eval(Context& c) {
    auto data = staged_data(c);
    const auto task = parse_task(c.args.task);
    const auto ckpt = c.args.checkpoint.empty() ? c.path("sft.ckpt") : c.args.checkpoint;
    auto model = load_model<T>(ckpt, "sft");
    const auto method = c.args.method.empty() ? fs::path(ckpt).stem().string() : c.args.method;
    auto metrics = evaluate_for(c, data, model, task, method, 0);
    const auto out = c.path("eval_" + std::string(to_string(task)) + "_" + method + ".json");
    write_json(out, metrics);
    c.outputs = {out};
    c.summary = metrics;
}

/// Collects metric rows from every report under --out.
void cmd_report(Context& c) {
    std::vector<MetricReport> rows;
    std::vector<fs::path> files;
    if (!fs::is_directory(c.args.out)) throw Error(ErrorKind::missing_artifact, "no such directory: " + c.args.out);
    for (const auto& e : fs::directory_iterator(c.args.out)) {
        if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        const auto name = f.filename().string();
        auto j = read_json(f.string());
        if (name.rfind("eval_", 0) == 0) {
            rows.push_back(j.get<MetricReport>());
        } else if (name.rfind("train_", 0) == 0) {
            rows.push_back(j.at("metrics").get<MetricReport>());
        } else if (name.rfind("pco_", 0) == 0) {
            for (const auto& it : j.at("iterations")) rows.push_back(it.at("metrics").get<MetricReport>());
        } else if (name == "experiment.json") {
            for (const auto& s : j.at("seeds")) {
                rows.push_back(s.at("sft").get<MetricReport>());
                for (const auto& [_, reps] : s.at("repetition").items()) {
                    for (const auto& it : reps) rows.push_back(it.at("metrics").get<MetricReport>());
                }
                if (s.at("hidden_reward").contains("iterations")) {
                    for (const auto& it : s["hidden_reward"]["iterations"]) {
                        rows.push_back(it.at("metrics").get<MetricReport>());
                    }
                }
            }
        }
    }
    if (rows.empty()) throw Error(ErrorKind::missing_artifact, "no metric reports under " + c.args.out);
    const auto table = format_table(rows);
    std::cout << table;
    const auto txt = c.path("report.txt");
    std::ofstream(txt, std::ios::trunc) << table;
    c.outputs = {txt};
    for (const char* metric : {"repeat_at_n", "f1", "win_rate"}) {
        const auto svg = c.path(std::string("report_") + metric + ".svg");
        std::ofstream(svg, std::ios::trunc) << svg_bar_chart(sorted_for_table(rows), metric);
        c.outputs.push_back(svg);
    }
    c.summary = {{"rows", rows.size()}};
}

/// Oracle suite: gradient checks, independent transcriptions, limits,
/// two-pathway decomposition and top-k exclusion.
bool cmd_verify(Context& c) {
    auto report = oracle_suite(c.seed);
    const auto out = c.path("verify.json");
    write_json(out, report.to_json());
    for (const auto& ch : report.checks) {
        std::cout << (ch.pass ? "PASS " : "FAIL ") << ch.name << "  value=" << ch.value << " threshold=" << ch.threshold
                  << "  " << ch.detail << '\n';
    }
    c.outputs = {out};
    c.summary = {{"all_pass", report.all_pass()}};
    return report.all_pass();
}

template <typename T>
void cmd_experiment(Context& c) {
    require(c.args.seeds >= 1, ErrorKind::config, "--seeds must be >= 1");
    nlohmann::json seeds = nlohmann::json::array();
    std::vector<MetricReport> rows;
    double seconds = 0.0;
    RunHooks hooks;
    hooks.checkpoint_dir = c.path("checkpoints");
    hooks.log = [&](const std::string& m) { c.log(m); };
    for (int i = 0; i < c.args.seeds; ++i) {
        auto rep = run_seed<T>(c.cfg, c.seed + static_cast<std::uint64_t>(i), hooks);
        seconds += rep.seconds;
        seeds.push_back(rep.metrics_json());
        for (auto& r : rep.rows()) rows.push_back(r);
    }
    const auto out = c.path("experiment.json");
    write_json(out, {{"config_hash", config_hash(c.cfg_json)}, {"seeds", seeds}});
    std::cout << format_table(rows);
    c.outputs = {out, hooks.checkpoint_dir};
    c.summary = {{"seeds", c.args.seeds}, {"pipeline_seconds", seconds}};
}

template <typename T>
bool dispatch(const std::string& cmd, Context& c) {
    if (cmd == "gen-corpus") {
        cmd_gen_corpus(c);
    } else if (cmd == "sft") {
        cmd_sft<T>(c);
    } else if (cmd == "make-pairs") {
        cmd_make_pairs<T>(c);
    } else if (cmd == "train") {
        cmd_train<T>(c);
    } else if (cmd == "pco") {
        cmd_pco<T>(c);
    } else if (cmd == "eval") {
        cmd_eval<T>(c);
    } else if (cmd == "report") {
        cmd_report(c);
    } else if (cmd == "verify") {
        return cmd_verify(c);
    } else if (cmd == "experiment") {
        cmd_experiment<T>(c);
    } else if (cmd == "config") {
        std::cout << c.cfg_json.dump(2) << '\n';
    }
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pcolab: preference optimization with pairwise cringe losses on toy language models"};
    app.require_subcommand(1);
    app.fallthrough();
    Args a;
    app.add_option("--config", a.config_path, "experiment config (JSON)");
    app.add_option("--seed", a.seed, "global seed (overrides the config)");
    app.add_option("--out", a.out, "artifact directory")->capture_default_str();
    app.add_option("--precision", a.precision, "scalar type")->check(CLI::IsMember({"f32", "f64"}))->capture_default_str();
    app.add_flag("--quiet", a.quiet, "no progress messages");

    app.add_subcommand("gen-corpus", "sample the synthetic corpus and prompt splits");
    app.add_subcommand("sft", "supervised fine-tuning on the corpus");
    auto* pairs = app.add_subcommand("make-pairs", "build the original preference pairs from the SFT model");
    auto* train = app.add_subcommand("train", "train one preference loss from the SFT model");
    auto* pco = app.add_subcommand("pco", "iterated generate-label-retrain loop");
    auto* eval = app.add_subcommand("eval", "greedy Repeat@n, F1, reward and win rate of a checkpoint");
    app.add_subcommand("report", "summary table and charts of the reports under --out");
    app.add_subcommand("verify", "gradient and oracle checks of every loss");
    app.add_subcommand("config", "print the effective config (defaults filled in)");
    auto* exp = app.add_subcommand("experiment", "both tasks end to end for one or more seeds");

    const std::vector<std::string> losses{"ce", "binary-cringe", "pairwise-cringe", "hard-margin-cringe", "dpo",
                                          "unlikelihood"};
    for (auto* sc : {pairs, train, pco, eval}) {
        sc->add_option("--task", a.task, "repetition or hidden_reward")
            ->check(CLI::IsMember({"repetition", "hidden_reward", "hidden-reward"}))
            ->capture_default_str();
    }
    for (auto* sc : {train, pco}) {
        sc->add_option("--loss", a.loss, "loss variant")->check(CLI::IsMember(losses))->capture_default_str();
    }
    pco->add_option("--iterations", a.iterations, "number of iterations")->capture_default_str();
    eval->add_option("--checkpoint", a.checkpoint, "checkpoint to evaluate (default <out>/sft.ckpt)");
    eval->add_option("--baseline", a.baseline, "win-rate baseline checkpoint (default <out>/sft.ckpt)");
    eval->add_option("--method", a.method, "row label");
    exp->add_option("--seeds", a.seeds, "number of consecutive seeds")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();

    Context c;
    c.args = a;
    const auto t0 = std::chrono::steady_clock::now();
    nlohmann::json record = {{"command", cmd}, {"argv", std::vector<std::string>(argv, argv + argc)}};
    int rc = kOk;
    try {
        c.cfg = load_config(a);
        if (a.seed) c.cfg.seed = *a.seed;
        c.cfg.validate();
        c.cfg_json = c.cfg;
        c.seed = c.cfg.seed;
        record["config_hash"] = config_hash(c.cfg_json);
        record["seed"] = c.seed;
        record["precision"] = a.precision;
        fs::create_directories(a.out);
        const bool ok = a.precision == "f32" ? dispatch<float>(cmd, c) : dispatch<double>(cmd, c);
        rc = ok ? kOk : kChecksFailed;
        record["status"] = ok ? "ok" : "checks_failed";
    } catch (const Error& e) {
        rc = exit_code(e.kind());
        record["status"] = "error";
        record["error"] = {{"category", to_string(e.kind())}, {"message", e.what()}};
        std::cerr << nlohmann::json(record["error"]).dump() << std::endl;
    } catch (const std::exception& e) {
        rc = kOther;
        record["status"] = "error";
        record["error"] = {{"category", "other"}, {"message", e.what()}};
        std::cerr << nlohmann::json(record["error"]).dump() << std::endl;
    }
    record["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record["outputs"] = c.outputs;
    record["summary"] = c.summary;
    try {
        fs::create_directories(fs::path(a.out) / "runs");
        write_json((fs::path(a.out) / "runs" / (cmd + ".json")).string(), record);
    } catch (const std::exception& e) {
        std::cerr << "{\"category\":\"io\",\"message\":\"cannot write run record: " << e.what() << "\"}" << std::endl;
        if (rc == kOk) rc = kIo;
    }
    return rc;
}
