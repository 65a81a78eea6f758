// pseg: dataset generation, training, evaluation, ablations and gradient
// checks from one config file.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pseg/config.hpp"
#include "pseg/gradcheck_suite.hpp"
#include "pseg/report.hpp"
#include "pseg/settings.hpp"
#include "pseg/trainer.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string command;
    std::string config_path;
    std::string out;
    std::string data;
    std::string run;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
};

int fail(const char* kind, const std::string& msg, int code) {
    nlohmann::json j{{"error", kind}, {"message", msg}, {"exit", code}};
    std::cerr << j.dump() << std::endl;
    return code;
}

pseg::Config resolve_config(const Options& o, const std::string& fallback_text = "") {
    pseg::Config c;
    if (!o.config_path.empty()) {
        if (!fs::is_regular_file(o.config_path)) throw UsageError("config file not found: " + o.config_path);
        c.merge_text(pseg::read_text(o.config_path), o.config_path);
    } else if (!fallback_text.empty()) {
        c.merge_text(fallback_text, "run config");
    }
    for (const auto& ov : o.overrides) c.apply_override(ov);
    if (o.seed) c.set(o.command == "gen-data" ? "data.seed" : "train.seed", std::to_string(*o.seed));
    return c;
}

fs::path require_out(const Options& o) {
    if (o.out.empty()) throw UsageError(o.command + " needs --out DIR");
    fs::create_directories(o.out);
    return o.out;
}

pseg::LoadedDataset require_data(const Options& o) {
    if (o.data.empty()) throw UsageError(o.command + " needs --data DIR");
    if (!fs::is_regular_file(fs::path(o.data) / "manifest.txt")) {
        throw UsageError("no dataset at " + o.data + " (manifest.txt missing)");
    }
    return pseg::load_dataset(o.data);
}

int cmd_gen_data(const Options& o) {
    const pseg::Config cfg = resolve_config(o);
    const auto sc = pseg::synth_config(cfg);
    const fs::path out = require_out(o);
    const auto ds = pseg::generate_dataset(sc);
    pseg::write_dataset(out, ds, cfg.echo());
    pseg::write_text(out / "config.txt", cfg.echo());
    std::cout << "wrote " << ds.source.size() << " source, " << ds.target.size() << " target and "
              << ds.target_test.size() << " target test slices to " << out.string() << std::endl;
    return 0;
}

template <class T>
int train_typed(const Options& o, const pseg::Config& cfg) {
    const auto tc = pseg::train_config(cfg);
    const auto data = require_data(o);
    const fs::path out = require_out(o);
    pseg::write_text(out / "config.txt", cfg.echo());
    const auto r = pseg::train<T>(tc, data, out, cfg.echo(), &std::cout);
    const auto s = pseg::final_score(r.rows);
    std::cout << "final target dice " << (s.dice ? pseg::detail::format_double(*s.dice) : "-") << " asd "
              << (s.asd ? pseg::detail::format_double(*s.asd) : "-") << std::endl;
    return 0;
}

int cmd_train(const Options& o) {
    const pseg::Config cfg = resolve_config(o);
    pseg::train_config(cfg);
    return cfg.get_string("model.precision") == "f64" ? train_typed<double>(o, cfg) : train_typed<float>(o, cfg);
}

std::vector<pseg::LossCurve> curves_from_history(const fs::path& path) {
    std::vector<pseg::LossCurve> curves;
    if (!fs::is_regular_file(path)) return curves;
    std::istringstream is(pseg::read_text(path));
    std::string line;
    std::getline(is, line);
    std::vector<std::string> header;
    {
        std::stringstream hs(line);
        for (std::string cell; std::getline(hs, cell, ',');) header.push_back(cell);
    }
    const std::vector<std::string> wanted = {"seg", "cycle", "adv_img", "adv_seg", "sim", "cl", "all", "disc"};
    std::vector<std::size_t> cols;
    for (const auto& w : wanted) {
        auto it = std::find(header.begin(), header.end(), w);
        if (it == header.end()) throw pseg::FormatError(path.string() + ": missing column " + w);
        cols.push_back(static_cast<std::size_t>(it - header.begin()));
        curves.push_back({w, {}});
    }
    std::string current;
    std::vector<double> acc(wanted.size());
    std::size_t n = 0;
    auto flush = [&] {
        if (n == 0) return;
        for (std::size_t k = 0; k < acc.size(); ++k) curves[k].values.push_back(acc[k] / static_cast<double>(n));
        std::fill(acc.begin(), acc.end(), 0.0);
        n = 0;
    };
    while (std::getline(is, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
        if (cells.size() < header.size() - 3) continue;
        if (cells[0] != current) {
            flush();
            current = cells[0];
        }
        for (std::size_t k = 0; k < cols.size(); ++k) acc[k] += std::stod(cells[cols[k]]);
        ++n;
    }
    flush();
    return curves;
}

template <class T>
int eval_typed(const Options& o, const pseg::Config& cfg) {
    const auto tc = pseg::train_config(cfg);
    const auto data = require_data(o);
    const fs::path out = require_out(o);
    const fs::path run(o.run);
    const auto st = pseg::load_generators<T>(run / "checkpoint", tc);
    auto ev = pseg::evaluate(st.gs, st.gt, data.target_test, 0, tc);
    const auto rows = pseg::emit_report(ev.samples, curves_from_history(run / "history.csv"),
                                        pseg::cap_features(ev.features, tc.max_features), out);
    pseg::write_text(out / "config.txt", cfg.echo());
    const auto s = pseg::final_score(rows);
    std::cout << "target test dice " << (s.dice ? pseg::detail::format_double(*s.dice) : "-") << " asd "
              << (s.asd ? pseg::detail::format_double(*s.asd) : "-") << std::endl;
    return 0;
}

int cmd_eval(const Options& o) {
    if (o.run.empty()) throw UsageError("eval needs --run DIR (a train output directory)");
    const fs::path cfg_file = fs::path(o.run) / "config.txt";
    if (!fs::is_regular_file(cfg_file) && o.config_path.empty()) {
        throw UsageError("no config.txt in " + o.run + " and no --config given");
    }
    const pseg::Config cfg =
        resolve_config(o, fs::is_regular_file(cfg_file) ? pseg::read_text(cfg_file) : std::string());
    pseg::train_config(cfg);
    return cfg.get_string("model.precision") == "f64" ? eval_typed<double>(o, cfg) : eval_typed<float>(o, cfg);
}

template <class T>
int ablate_typed(const Options& o, const pseg::Config& cfg) {
    const auto tc = pseg::train_config(cfg);
    const auto ab = pseg::ablation_settings(cfg);
    const auto data = require_data(o);
    const fs::path out = require_out(o);
    pseg::write_text(out / "config.txt", cfg.echo());
    const auto cells = pseg::ablation_cells(ab.grid, tc, ab.lambda1, ab.lambda2, ab.sizes);
    const auto rows = pseg::run_ablation<T>(cells, ab.seeds, data, out, &std::cout);
    for (const auto& r : rows) {
        std::cout << r.rank << ' ' << r.setting << " dice "
                  << (r.mean_dice ? pseg::detail::format_double(*r.mean_dice) : "-") << std::endl;
    }
    return 0;
}

int cmd_ablate(const Options& o) {
    const pseg::Config cfg = resolve_config(o);
    pseg::train_config(cfg);
    pseg::ablation_settings(cfg);
    return cfg.get_string("model.precision") == "f64" ? ablate_typed<double>(o, cfg) : ablate_typed<float>(o, cfg);
}

int cmd_gradcheck(const Options& o) {
    const pseg::Config cfg = resolve_config(o);
    pseg::GradSuiteOptions opt;
    opt.seed = cfg.get_u64("train.seed");
    std::ostringstream report;
    bool ok = true;
    for (const auto& r : pseg::run_all_grad_suites(opt)) {
        report << (r.passed ? "PASS " : "FAIL ") << r.name << " instances " << r.instances << " max_rel_error "
               << r.max_rel_error << '\n';
        ok = ok && r.passed;
    }
    std::cout << report.str();
    if (!o.out.empty()) {
        const fs::path out = require_out(o);
        pseg::write_text(out / "gradcheck.txt", report.str());
        pseg::write_text(out / "config.txt", cfg.echo());
    }
    if (!ok) return fail("gradcheck", "finite-difference check exceeded tolerance", kExitRuntime);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Prototype-aligned cross-domain segmentation on synthetic data"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "config file");
        sub->add_option("--out", o.out, "output directory");
        sub->add_option("--seed", o.seed, "seed (data.seed for gen-data, train.seed otherwise)");
        sub->add_option("--override", o.overrides, "section.key=value, repeatable");
    };
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
    common(gen);
    auto* train = app.add_subcommand("train", "train and evaluate every epoch");
    common(train);
    train->add_option("--data", o.data, "dataset directory");
    auto* eval = app.add_subcommand("eval", "evaluate a trained run on the target test split");
    common(eval);
    eval->add_option("--data", o.data, "dataset directory");
    eval->add_option("--run", o.run, "train output directory");
    auto* ablate = app.add_subcommand("ablate", "train a grid of configurations over several seeds");
    common(ablate);
    ablate->add_option("--data", o.data, "dataset directory");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss");
    common(grad);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), kExitUsage);
    }
    o.command = app.get_subcommands().front()->get_name();

    try {
        if (o.command == "gen-data") return cmd_gen_data(o);
        if (o.command == "train") return cmd_train(o);
        if (o.command == "eval") return cmd_eval(o);
        if (o.command == "ablate") return cmd_ablate(o);
        return cmd_gradcheck(o);
    } catch (const UsageError& e) {
        return fail("usage", e.what(), kExitUsage);
    } catch (const pseg::ConfigError& e) {
        return fail("usage", e.what(), kExitUsage);
    } catch (const std::exception& e) {
        return fail("runtime", e.what(), kExitRuntime);
    }
}
