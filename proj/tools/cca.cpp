// Command-line driver for the staged pipeline.
//
//   cca <stage> [flags]        one stage (pretrain, gen-corpus, ..., report)
//   cca run --stage <stage>    the same, stage given as a flag
//   cca all                    every stage in order
//   cca config                 print the resolved configuration and its hash
//
// Exit codes: 0 success, 2 missing upstream artifact or stale run directory,
// 3 numeric abort, 1 anything else.

#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "cca/pipeline.hpp"

namespace {

struct Flags {
    std::string config;
    std::string run_dir;
    std::optional<std::uint64_t> seed;
    std::string stage;
    std::string method;
    std::string configuration;
};

void add_flags(CLI::App* app, Flags& f, bool with_stage) {
    app->add_option("--config", f.config, "INI run configuration")->check(CLI::ExistingFile);
    app->add_option("--run-dir", f.run_dir, "run directory (default runs/<config hash>)");
    app->add_option("--seed", f.seed, "restrict to one experiment seed");
    app->add_option("--method", f.method, "restrict to one localization method")
        ->check(CLI::IsMember({"prefix", "branching"}));
    app->add_option("--configuration", f.configuration, "restrict to one configuration")
        ->check(CLI::IsMember({"cca_mask", "cca_nomask", "lora"}));
    if (with_stage) app->add_option("--stage", f.stage, "stage to run")->required();
}

int execute(const Flags& f, std::optional<cca::Stage> stage) {
    const cca::RunConfig cfg = cca::load_run_config(f.config, [](const char* k) { return std::getenv(k); });
    const std::filesystem::path dir = f.run_dir.empty() ? std::filesystem::path("runs") / cfg.hash() : std::filesystem::path(f.run_dir);
    cca::StageFilter filter;
    if (!f.method.empty()) filter.method = cca::method_from_string(f.method);
    if (!f.configuration.empty()) filter.configuration = f.configuration;
    filter.seed = f.seed;
    cca::Pipeline pipe(cfg, dir, [](const std::string& msg) { std::cerr << msg << std::endl; });
    std::cerr << "run directory " << dir.string() << " (config " << cfg.hash() << ")" << std::endl;
    if (stage) {
        pipe.run(*stage, filter);
    } else {
        pipe.run_all(filter);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Circuit amplification pipeline on a toy transformer"};
    app.require_subcommand(1);
    std::vector<std::pair<CLI::App*, std::unique_ptr<Flags>>> subs;
    std::map<CLI::App*, std::optional<cca::Stage>> stage_of;

    for (cca::Stage s : cca::all_stages()) {
        auto* sub = app.add_subcommand(std::string(cca::to_string(s)), "run the " + std::string(cca::to_string(s)) + " stage");
        auto& f = subs.emplace_back(sub, std::make_unique<Flags>()).second;
        add_flags(sub, *f, false);
        stage_of[sub] = s;
    }
    auto* run = app.add_subcommand("run", "run the stage named by --stage");
    auto& run_flags = subs.emplace_back(run, std::make_unique<Flags>()).second;
    add_flags(run, *run_flags, true);
    auto* all = app.add_subcommand("all", "run every stage in order");
    subs.emplace_back(all, std::make_unique<Flags>());
    add_flags(all, *subs.back().second, false);
    stage_of[all] = std::nullopt;
    auto* show = app.add_subcommand("config", "print the resolved configuration and its hash");
    std::string show_config;
    show->add_option("--config", show_config, "INI run configuration")->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (show->parsed()) {
            const auto cfg = cca::load_run_config(show_config, [](const char* k) { return std::getenv(k); });
            std::cout << cfg.canonical_text() << "# hash " << cfg.hash() << "\n";
            return 0;
        }
        for (auto& [sub, flags] : subs) {
            if (!sub->parsed()) continue;
            if (sub == run) return execute(*flags, cca::stage_from_string(flags->stage));
            return execute(*flags, stage_of.at(sub));
        }
    } catch (const cca::DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << std::endl;
        return 2;
    } catch (const cca::StalenessError& e) {
        std::cerr << "stale run directory: " << e.what() << std::endl;
        return 2;
    } catch (const cca::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << std::endl;
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 1;
}
