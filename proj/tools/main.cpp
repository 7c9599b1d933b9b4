// Command-line front end: dataset generation, gradient verification,
// training, inference, evaluation and a timing breakdown, as subcommands of
// one executable. Exit codes: 0 success, 1 operational failure, 2 usage.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "iseg/evaluation.hpp"
#include "iseg/gradcheck.hpp"
#include "iseg/inference.hpp"

namespace {

using TrainScalar = float;  // training runs single precision

struct RunReport {
    std::string subcommand;
    std::string config_echo;
    std::vector<std::string> notes;
    int status = 0;

    void print() const {
        std::ostringstream os;
        os << "---- run report ----\n";
        os << "subcommand: " << subcommand << "\n";
        if (!config_echo.empty()) {
            os << "config:\n";
            std::istringstream is(config_echo);
            std::string line;
            while (std::getline(is, line)) os << "  " << line << "\n";
        }
        for (const std::string& n : notes) os << n << "\n";
        os << "status: " << status << "\n";
        std::cout << os.str();
    }
};

struct CommonArgs {
    std::string config_path;
    std::string dataset_path;
    std::string checkpoint_path;
    std::string out_path;
    std::string predictions_path;
    std::uint64_t seed = 0;
    bool seed_given = false;
    int stages = 0;  // 0: keep the config value
    int iters = 0;   // 0: run the config schedule
    int threads = 0; // 0: hardware concurrency
};

iseg::CascadeConfig load_config_or_default(const CommonArgs& args) {
    iseg::CascadeConfig cfg;
    if (!args.config_path.empty()) cfg = iseg::load_cascade_config(args.config_path);
    if (args.stages != 0) cfg.train_stages = args.stages;
    cfg.validate();
    return cfg;
}

int run_gendata(const CommonArgs& args, RunReport& report) {
    iseg::DatasetSpec spec;
    if (!args.config_path.empty()) spec = iseg::load_dataset_spec(args.config_path);
    if (args.seed_given) spec.seed = args.seed;
    spec.validate();
    report.config_echo = iseg::dataset_spec_to_text(spec);
    if (args.out_path.empty()) throw iseg::ConfigError("gendata needs --out for the dataset");

    const iseg::Dataset ds = iseg::generate_dataset(spec);
    iseg::save_dataset(ds, args.out_path);
    std::size_t instances = 0;
    for (const auto& s : ds.scenes) instances += s.instances.size();
    report.notes.push_back("scenes: " + std::to_string(ds.scenes.size()));
    report.notes.push_back("instances: " + std::to_string(instances));
    report.notes.push_back("dataset: " + args.out_path);
    return 0;
}

int run_gradcheck(const CommonArgs& args, RunReport& report) {
    const auto results = iseg::run_all_gradchecks(args.seed);
    const std::string text = iseg::format_gradcheck_report(results);
    std::cout << text;
    if (!args.out_path.empty()) {
        std::ofstream os(args.out_path, std::ios::trunc);
        if (!os) throw iseg::IoError("cannot write report: " + args.out_path);
        os << text;
    }
    for (const auto& r : results)
        report.notes.push_back(r.name + (r.passed() ? " within tolerance" : " OUT OF TOLERANCE"));
    return iseg::all_passed(results) ? 0 : 1;
}

int run_train(const CommonArgs& args, RunReport& report) {
    iseg::CascadeConfig cfg = load_config_or_default(args);
    report.config_echo = iseg::cascade_config_to_text(cfg);
    if (args.dataset_path.empty()) throw iseg::ConfigError("train needs --dataset");
    const iseg::Dataset data = iseg::load_dataset(args.dataset_path);
    if (cfg.num_categories != data.spec.num_categories)
        throw iseg::ConfigError("config and dataset disagree on the category count");

    iseg::CascadeModel<TrainScalar> model;
    model.cfg = cfg;
    model.init(args.seed);
    report.notes.push_back("parameters: " + std::to_string(model.params.parameter_count()));

    const std::string log_path = args.out_path.empty() ? "train_loss.log" : args.out_path;
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw iseg::IoError("cannot write loss log: " + log_path);

    iseg::TrainOptions opts;
    opts.iterations = args.iters;
    opts.seed = args.seed;
    const auto timing = iseg::train_cascade(model, data, opts, &log);

    const std::string ckpt = args.checkpoint_path.empty() ? "cascade.ckpt" : args.checkpoint_path;
    iseg::save_checkpoint(model.params, ckpt);
    report.notes.push_back("loss log: " + log_path);
    report.notes.push_back("checkpoint: " + ckpt);
    {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "wall seconds: forward=%.2f backward=%.2f update=%.2f",
                      timing.forward_s, timing.backward_s, timing.update_s);
        report.notes.push_back(buf);
    }
    return 0;
}

int run_infer(const CommonArgs& args, RunReport& report) {
    iseg::CascadeConfig cfg = load_config_or_default(args);
    report.config_echo = iseg::cascade_config_to_text(cfg);
    if (args.dataset_path.empty()) throw iseg::ConfigError("infer needs --dataset");
    if (args.checkpoint_path.empty()) throw iseg::ConfigError("infer needs --checkpoint");

    iseg::CascadeModel<TrainScalar> model;
    model.cfg = cfg;
    model.init(args.seed);
    iseg::load_checkpoint(model.params, args.checkpoint_path);

    const iseg::Dataset data = iseg::load_dataset(args.dataset_path);
    const int threads =
        args.threads > 0 ? args.threads : int(std::max(1u, std::thread::hardware_concurrency()));
    const auto records = iseg::run_inference_over_dataset(model, data, threads);
    const std::string out = args.out_path.empty() ? "predictions.txt" : args.out_path;
    iseg::write_predictions(records, out);
    report.notes.push_back("scenes: " + std::to_string(data.scenes.size()));
    report.notes.push_back("instances written: " + std::to_string(records.size()));
    report.notes.push_back("predictions: " + out);
    return 0;
}

int run_eval(const CommonArgs& args, RunReport& report) {
    if (args.predictions_path.empty()) throw iseg::ConfigError("eval needs --predictions");
    if (args.dataset_path.empty()) throw iseg::ConfigError("eval needs --dataset");
    const iseg::Dataset data = iseg::load_dataset(args.dataset_path);
    const auto preds = iseg::read_predictions(args.predictions_path);
    const auto mask_result = iseg::evaluate_map(preds, data, {0.5, 0.7}, iseg::MatchKind::mask);
    const auto box_result = iseg::evaluate_map(preds, data, {0.5, 0.7}, iseg::MatchKind::box);
    const std::string text = iseg::format_eval_report(mask_result, box_result);
    std::cout << text;
    if (!args.out_path.empty()) {
        std::ofstream os(args.out_path, std::ios::trunc);
        if (!os) throw iseg::IoError("cannot write report: " + args.out_path);
        os << text;
    }
    report.notes.push_back("predictions: " + std::to_string(preds.size()));
    for (double thr : {0.5, 0.7}) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "map_r@%.2f = %.6f", thr, mask_result.mean_ap.at(thr));
        report.notes.push_back(buf);
    }
    return 0;
}

int run_bench(const CommonArgs& args, RunReport& report) {
    iseg::CascadeConfig cfg = load_config_or_default(args);
    if (args.dataset_path.empty()) throw iseg::ConfigError("bench needs --dataset");
    iseg::CascadeModel<TrainScalar> model;
    model.cfg = cfg;
    model.init(args.seed);
    if (!args.checkpoint_path.empty()) iseg::load_checkpoint(model.params, args.checkpoint_path);

    const iseg::Dataset data = iseg::load_dataset(args.dataset_path);
    iseg::SegmentTimes times;
    for (const auto& scene : data.scenes) iseg::infer_scene(model, scene, &times);
    const double n = std::max(1, times.images);
    std::printf("%-9s %-9s %-9s %-9s %-9s %-9s %-9s\n", "conv", "stage 2", "stage 3", "stage 4",
                "stage 5", "others", "total");
    std::printf("%-9.4f %-9.4f %-9.4f %-9.4f %-9.4f %-9.4f %-9.4f\n", times.conv / n,
                times.stage2 / n, times.stage3 / n, times.stage4 / n, times.stage5 / n,
                times.others / n, times.total() / n);
    report.notes.push_back("images: " + std::to_string(times.images));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale instance segmentation cascade"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string selected;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", args.config_path, "config file (key = value)");
        sub->add_option("--dataset", args.dataset_path, "dataset file");
        sub->add_option("--checkpoint", args.checkpoint_path, "checkpoint file");
        sub->add_option("--out", args.out_path, "output file");
        sub->add_option("--seed", args.seed, "random seed")->default_val(0);
        sub->add_option("--stages", args.stages, "training stage count")
            ->check(CLI::IsMember({3, 5}));
        sub->add_option("--iters", args.iters, "iteration count override")
            ->check(CLI::NonNegativeNumber);
        sub->callback([&, sub]() {
            selected = sub->get_name();
            args.seed_given = sub->count("--seed") > 0;
        });
        return sub;
    };

    add_common(app.add_subcommand("gradcheck",
                                  "finite-difference verification of all gradient paths"));
    add_common(app.add_subcommand("gendata", "materialize a synthetic dataset from a spec"));
    add_common(app.add_subcommand("train", "train a cascade, writing checkpoint and loss log"));
    CLI::App* infer =
        add_common(app.add_subcommand("infer", "run inference, writing the prediction file"));
    infer->add_option("--threads", args.threads, "worker threads (default: hardware)");
    CLI::App* eval =
        add_common(app.add_subcommand("eval", "report mAP from predictions and a dataset"));
    eval->add_option("--predictions", args.predictions_path, "prediction file");
    add_common(app.add_subcommand("bench", "per-stage inference timing breakdown"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    RunReport report;
    report.subcommand = selected;
    try {
        if (selected == "gradcheck") report.status = run_gradcheck(args, report);
        else if (selected == "gendata") report.status = run_gendata(args, report);
        else if (selected == "train") report.status = run_train(args, report);
        else if (selected == "infer") report.status = run_infer(args, report);
        else if (selected == "eval") report.status = run_eval(args, report);
        else if (selected == "bench") report.status = run_bench(args, report);
        else {
            std::cerr << "unknown subcommand\n";
            return 2;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        report.status = 1;
    }
    report.print();
    return report.status;
}
