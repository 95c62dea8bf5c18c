#include "gpl/pipeline.hpp"
#include "gpl/tensor_file.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

using namespace gpl;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "runs";
    std::string mode;
    bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "flat key = value config file");
    app->add_option("--seed", c.seed, "overrides the config seed");
    app->add_option("--out", c.out, "artifact root directory");
    app->add_option("--mode", c.mode, "run mode (gpl, bc, wo_confidence, ...)");
    app->add_flag("-q,--quiet", c.quiet, "no progress lines on stderr");
}

KvConfig load_base(const Common& c) {
    if (c.config.empty()) {
        return {};
    }
    if (!std::filesystem::exists(c.config)) {
        throw ConfigError("config file '" + c.config + "' does not exist");
    }
    return KvConfig::load(c.config);
}

std::string mode_of(const Common& c, const KvConfig& kv) {
    return c.mode.empty() ? kv.get_string("mode", "gpl") : c.mode;
}

pipeline::Logger logger(const Common& c) {
    if (c.quiet) {
        return {};
    }
    return [](const std::string& s) { std::cerr << s << std::endl; };
}

std::vector<double> parse_grid(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(tok, &used));
            if (used != tok.size()) {
                throw std::invalid_argument(tok);
            }
        } catch (const std::exception&) {
            throw ConfigError("bad grid value '" + tok + "'");
        }
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"generative pseudo-labeling experiments"};
    app.require_subcommand(1);

    Common common;
    bool with_deps = false;
    std::vector<std::pair<CLI::App*, pipeline::Stage>> stage_cmds;
    for (pipeline::Stage s : pipeline::all_stages()) {
        CLI::App* sub = app.add_subcommand(pipeline::stage_name(s), "run the " + pipeline::stage_name(s) + " stage");
        add_common(sub, common);
        sub->add_flag("--with-deps", with_deps, "also run missing upstream stages");
        stage_cmds.emplace_back(sub, s);
    }

    std::vector<std::string> modes;
    CLI::App* ablate = app.add_subcommand("ablate", "evaluate several run modes on shared artifacts");
    add_common(ablate, common);
    ablate->add_option("--modes", modes, "modes to compare (default: all)")->delimiter(',');

    std::string param, grid;
    std::optional<bool> overlay;
    CLI::App* sweep = app.add_subcommand("sweep", "sensitivity sweep over one parameter");
    add_common(sweep, common);
    sweep->add_option("--param", param, "lambda, lambda1, lambda2, log_tau, tau or B")->required();
    sweep->add_option("--grid", grid, "comma-separated values")->required();
    sweep->add_option("--overlay", overlay, "also run without confidence weighting");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        const KvConfig base = load_base(common);
        const std::string mode = mode_of(common, base);

        for (auto& [sub, stage] : stage_cmds) {
            if (!sub->parsed()) {
                continue;
            }
            pipeline::Runner runner(common.out, pipeline::resolve(base, mode, common.seed), logger(common));
            if (with_deps) {
                runner.ensure(stage);
            } else {
                runner.run(stage);
            }
            std::cout << runner.dir(stage) << '\n';
            if (stage == pipeline::Stage::evaluate) {
                std::cout << runner.report().to_text();
            }
            return 0;
        }
        if (ablate->parsed()) {
            if (modes.empty()) {
                modes = pipeline::run_modes();
            }
            const auto rows = pipeline::run_ablation(common.out, base, modes, common.seed, logger(common));
            const std::string table = pipeline::ablation_table(rows);
            std::filesystem::create_directories(common.out);
            write_file((std::filesystem::path(common.out) / "ablation.csv").string(), table);
            std::cout << table;
            return 0;
        }
        if (sweep->parsed()) {
            const auto points = pipeline::run_sweep(common.out, base, mode, param, parse_grid(grid), common.seed,
                                                    logger(common), overlay);
            const std::string csv = pipeline::sweep_csv(param, points);
            std::filesystem::create_directories(common.out);
            write_file((std::filesystem::path(common.out) / ("sweep_" + param + ".csv")).string(), csv);
            std::cout << csv;
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const MissingArtifact& e) {
        std::cerr << "missing artifact: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
