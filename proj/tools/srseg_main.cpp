#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "srseg/config.hpp"
#include "srseg/data.hpp"
#include "srseg/gradcheck.hpp"
#include "srseg/report.hpp"
#include "srseg/serialize.hpp"
#include "srseg/train.hpp"

namespace {

using namespace srseg;

// generates both splits a run consumes: the training set from the dataset
// section's seed, the held-out set from a derived seed
void make_splits(const RunConfigFile& cfg, std::vector<Sample>& train_set, std::vector<Sample>& eval_set) {
    train_set.reserve(static_cast<std::size_t>(cfg.dataset.count));
    for (std::int64_t i = 0; i < cfg.dataset.count; ++i)
        train_set.push_back(generate_sample(cfg.dataset.seed, i, cfg.dataset));
    const DatasetConfig ec = eval_dataset_config(cfg.dataset, cfg.eval_count);
    eval_set.reserve(static_cast<std::size_t>(ec.count));
    for (std::int64_t i = 0; i < ec.count; ++i) eval_set.push_back(generate_sample(ec.seed, i, ec));
}

void ensure_dir(const std::string& dir) { std::filesystem::create_directories(dir); }

bool wants_format(const OutputConfig& out, const std::string& format) {
    for (const std::string& f : out.formats)
        if (f == format) return true;
    return false;
}

int run_gen_data(const std::string& config_path, const std::string& out_dir) {
    const RunConfigFile cfg = parse_config(config_path);
    write_dataset(out_dir, cfg.dataset);
    std::printf("wrote %lld samples (%lldx%lld, %zu classes) to %s\n", static_cast<long long>(cfg.dataset.count),
                static_cast<long long>(cfg.dataset.w), static_cast<long long>(cfg.dataset.h),
                cfg.dataset.classes.size(), out_dir.c_str());
    return 0;
}

template <typename T>
int run_gradcheck(const std::string& only_op) {
    if (!only_op.empty()) {
        bool known = false;
        for (const std::string& op : gradcheck_op_names()) known = known || op == only_op;
        if (!known) throw std::invalid_argument("gradcheck: unknown op '" + only_op + "'");
    }
    const double tol = gradcheck_default_tol<T>();
    const double h = gradcheck_default_step<T>();
    bool all_passed = true;
    for (const std::string& op : gradcheck_op_names()) {
        if (!only_op.empty() && op != only_op) continue;
        if (!gradcheck_op_enabled<T>(op)) {
            std::printf("%-22s skipped (64-bit only)\n", op.c_str());
            continue;
        }
        const OpReport r = run_gradcheck_op<T>(op, 0x67726164ull, gradcheck_default_cases(op), tol, h);
        std::printf("%-22s cases %-3d elements %-7lld max_rel %.3e  %s\n", r.op.c_str(), r.cases,
                    static_cast<long long>(r.elements), r.max_rel_err, r.passed ? "ok" : "FAIL");
        if (!r.passed) {
            std::printf("  worst: %s\n", r.worst_case.c_str());
            all_passed = false;
        }
    }
    if (!all_passed) {
        std::printf("gradient check FAILED (tolerance %.1e)\n", tol);
        return 2;
    }
    std::printf("all gradients within %.1e\n", tol);
    return 0;
}

int run_train(const std::string& config_path, std::int64_t seed_override, bool seed_given,
              const std::string& out_override) {
    RunConfigFile cfg = parse_config(config_path);
    if (seed_given) cfg.train.seed = static_cast<std::uint64_t>(seed_override);
    const std::string out_dir = out_override.empty() ? cfg.output.directory : out_override;

    std::vector<Sample> train_set, eval_set;
    make_splits(cfg, train_set, eval_set);

    Model<float> model = build_model<float>(cfg.model, cfg.train.seed);
    RunLog log = train(model, train_set, eval_set, cfg.train);

    ensure_dir(out_dir);
    if (wants_format(cfg.output, "csv")) write_text_file(out_dir + "/runlog.csv", runlog_csv(log));
    if (wants_format(cfg.output, "csv") && !log.epoch_evals.empty()) {
        std::string curve = "epoch,miou\n";
        char buf[64];
        for (const auto& e : log.epoch_evals) {
            std::snprintf(buf, sizeof buf, "%lld,%.17g\n", static_cast<long long>(e.epoch), e.miou);
            curve += buf;
        }
        write_text_file(out_dir + "/evalcurve.csv", curve);
    }
    if (wants_format(cfg.output, "json")) write_text_file(out_dir + "/metrics.json", eval_metrics_json(log.final_eval));
    save_model(out_dir + "/params.srtn", model);

    std::printf("trained %zu steps, final mIoU %.2f%%, outputs in %s\n", log.steps.size(),
                log.final_eval.miou * 100.0, out_dir.c_str());
    return 0;
}

int run_eval(const std::string& model_path, const std::string& data_dir, const std::string& out_dir) {
    const Dataset ds = read_dataset(data_dir);
    Model<float> model = load_model_auto<float>(model_path, ds.config.h, ds.config.w);
    const EvalResult r = evaluate(model, ds.samples);
    ensure_dir(out_dir);
    write_text_file(out_dir + "/metrics.json", eval_metrics_json(r));
    std::printf("mIoU %.2f%% over %lld pixels, metrics in %s/metrics.json\n", r.miou * 100.0,
                static_cast<long long>(r.confusion.total()), out_dir.c_str());
    return 0;
}

int run_ablate(const std::string& config_path, int seeds, const std::string& out_dir, int jobs) {
    const RunConfigFile cfg = parse_config(config_path);
    std::vector<Sample> train_set, eval_set;
    make_splits(cfg, train_set, eval_set);

    const AblationResult result = ablate<float>(cfg.model, cfg.train, train_set, eval_set, default_ablation_grid(),
                                                seeds, jobs);
    const std::string csv = ablation_csv(result);
    ensure_dir(out_dir);
    write_text_file(out_dir + "/ablation.csv", csv);
    write_text_file(out_dir + "/runs.csv", ablation_runs_csv(result));
    write_text_file(out_dir + "/ablation.md", render_ablation_markdown(csv, true));

    std::fputs(render_ablation_markdown(csv, false).c_str(), stdout);
    std::printf("\n%zu rows x %d seeds in %.1fs, outputs in %s\n", result.rows.size(), seeds, result.wall_seconds,
                out_dir.c_str());
    return 0;
}

int run_report(const std::string& in_path, bool no_timestamp) {
    std::ifstream in(in_path, std::ios::binary);
    if (!in) throw std::invalid_argument("report: cannot open '" + in_path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    std::fputs(render_ablation_markdown(std::move(buf).str(), !no_timestamp).c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Workbench for multi-exit segmentation with bidirectional self-distillation"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shape dataset directory");
    std::string gen_config, gen_out;
    gen->add_option("--config", gen_config, "Run config JSON (dataset section is used)")->required();
    gen->add_option("--out", gen_out, "Output dataset directory")->required();

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference verification of every backward pass");
    int gc_precision = 64;
    std::string gc_op;
    gc->add_option("--precision", gc_precision, "Scalar width in bits")
        ->check(CLI::IsMember({32, 64}))
        ->capture_default_str();
    gc->add_option("--op", gc_op, "Check a single operation by name");

    // train
    auto* tr = app.add_subcommand("train", "Train one model per the config");
    std::string tr_config, tr_out;
    std::int64_t tr_seed = 0;
    tr->add_option("--config", tr_config, "Run config JSON")->required();
    auto* tr_seed_opt = tr->add_option("--seed", tr_seed, "Override train.seed");
    tr->add_option("--out", tr_out, "Output directory (default: output.directory from the config)");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
    std::string ev_model, ev_data, ev_out;
    ev->add_option("--model", ev_model, "Checkpoint written by train")->required();
    ev->add_option("--data", ev_data, "Dataset directory written by gen-data")->required();
    ev->add_option("--out", ev_out, "Output directory")->required();

    // ablate
    auto* ab = app.add_subcommand("ablate", "Run the five-row toggle grid over multiple seeds");
    std::string ab_config, ab_out;
    int ab_seeds = 5, ab_jobs = 1;
    ab->add_option("--config", ab_config, "Run config JSON")->required();
    ab->add_option("--seeds", ab_seeds, "Seeds per row")->check(CLI::PositiveNumber)->capture_default_str();
    ab->add_option("--out", ab_out, "Output directory")->required();
    ab->add_option("--jobs", ab_jobs, "Concurrent runs (SR_NUM_THREADS caps this)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();

    // report
    auto* rp = app.add_subcommand("report", "Render an ablation CSV as a Markdown table");
    std::string rp_in;
    bool rp_no_timestamp = false;
    rp->add_option("input", rp_in, "Aggregated ablation CSV")->required();
    rp->add_flag("--no-timestamp", rp_no_timestamp, "Omit the generation timestamp");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed()) return run_gen_data(gen_config, gen_out);
        if (gc->parsed())
            return gc_precision == 64 ? run_gradcheck<double>(gc_op) : run_gradcheck<float>(gc_op);
        if (tr->parsed()) return run_train(tr_config, tr_seed, !tr_seed_opt->empty(), tr_out);
        if (ev->parsed()) return run_eval(ev_model, ev_data, ev_out);
        if (ab->parsed()) return run_ablate(ab_config, ab_seeds, ab_out, ab_jobs);
        if (rp->parsed()) return run_report(rp_in, rp_no_timestamp);
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
