#include "cglearn/common.hpp"
#include "cglearn/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

namespace {

std::vector<int> parse_int_list(const std::string& spec) {
    std::vector<int> out;
    std::stringstream stream(spec);
    std::string item;
    while (std::getline(stream, item, ',')) {
        try {
            std::size_t used = 0;
            const int value = std::stoi(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(value);
        } catch (const std::exception&) {
            throw cglearn::ConfigError("'" + item + "' is not an integer");
        }
    }
    if (out.empty()) throw cglearn::ConfigError("empty list '" + spec + "'");
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gradient-consistency training experiments"};
    std::string scenario;
    std::string config_path;
    std::string methods;
    std::string batches;
    std::string dataset;
    std::string data_dir;
    std::string output;
    int trials = 0;
    int jobs = 0;
    std::uint64_t seed = 0;
    double threshold = 0.0;
    bool quiet = false;

    app.add_option("--scenario", scenario,
                   "linear-multi | linear-single | real-regression | real-classification | "
                   "demo | gradcheck");
    app.add_option("--config", config_path, "JSON config file; flags override its values");
    app.add_option("--trials", trials, "trial count (0 = scenario default)");
    app.add_option("--seed", seed, "master seed");
    app.add_option("--methods", methods, "comma list of erm, cglearn, irmv1");
    app.add_option("--threshold", threshold,
                   "fix the mask threshold instead of selecting it on validation");
    app.add_option("--batches", batches,
                   "comma list of pseudo-environment counts (linear-single)");
    app.add_option("--dataset", dataset, "boston | yacht | wine-red | wine-white");
    app.add_option("--data-dir", data_dir, "directory holding the dataset CSVs");
    app.add_option("--output", output, "directory for result files");
    app.add_option("--jobs", jobs, "worker pool size (0 = available parallelism)");
    app.add_flag("--quiet", quiet, "suppress the console table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        cglearn::ExperimentConfig config;
        if (app.count("--config")) config = cglearn::load_experiment_config(config_path);
        if (app.count("--scenario")) config.scenario = cglearn::scenario_from_name(scenario);
        if (app.count("--trials")) config.trials = trials;
        if (app.count("--seed")) config.seed = seed;
        if (app.count("--methods")) config.methods = cglearn::methods_from_string(methods);
        if (app.count("--threshold")) config.threshold = threshold;
        if (app.count("--batches")) config.batch_counts = parse_int_list(batches);
        if (app.count("--dataset")) config.dataset = dataset;
        if (app.count("--data-dir")) config.data_dir = data_dir;
        if (app.count("--output")) config.output_dir = output;
        if (app.count("--jobs")) config.jobs = jobs;
        if (quiet) config.quiet = true;
        return cglearn::run_experiment(config);
    } catch (const cglearn::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    }
}
