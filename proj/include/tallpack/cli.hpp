#pragma once

// Command-line front end. Subcommands: merge, mask, compress, reconstruct,
// stats, storage, synth. Precedence for every option: flag > --config JSON >
// built-in default.

#include <cmath>
#include <cstdlib>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "tallpack/baselines.hpp"
#include "tallpack/compression.hpp"
#include "tallpack/error.hpp"
#include "tallpack/merging.hpp"
#include "tallpack/parallel.hpp"
#include "tallpack/synthetic.hpp"
#include "tallpack/tall_masks.hpp"
#include "tallpack/task_vectors.hpp"
#include "tallpack/tensor_store.hpp"

namespace tallpack::cli {

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel log_level_from_env() {
    const char* env = std::getenv("TALLPACK_LOG");
    if (!env) return LogLevel::warn;
    const std::string v = env;
    if (v == "error") return LogLevel::error;
    if (v == "info") return LogLevel::info;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::warn;
}

class Logger {
public:
    Logger(std::ostream& sink, LogLevel level) : sink_(sink), level_(level) {}

    void info(const std::string& msg) const { emit(LogLevel::info, "info", msg); }
    void debug(const std::string& msg) const { emit(LogLevel::debug, "debug", msg); }
    void warn(const std::string& msg) const { emit(LogLevel::warn, "warn", msg); }

private:
    void emit(LogLevel at, const char* tag, const std::string& msg) const {
        if (at <= level_) sink_ << "[tallpack " << tag << "] " << msg << '\n';
    }

    std::ostream& sink_;
    LogLevel level_;
};

/// Reads --config files as JSON. Nested objects name subcommands:
///   {"threads": 4, "merge": {"k": 1, "lambda-grid": [0.3, 0.5]}}
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        nlohmann::json j;
        try {
            input >> j;
        } catch (const nlohmann::json::exception& e) {
            throw CLI::ConversionError(std::string("config file: ") + e.what());
        }
        std::vector<CLI::ConfigItem> items;
        collect(j, {}, items);
        return items;
    }

private:
    static std::string scalar(const nlohmann::json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        return v.dump();
    }

    static void collect(const nlohmann::json& j, std::vector<std::string> parents,
                        std::vector<CLI::ConfigItem>& items) {
        if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
        for (const auto& [key, value] : j.items()) {
            if (value.is_object()) {
                auto nested = parents;
                nested.push_back(key);
                collect(value, nested, items);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = key;
            if (value.is_array()) {
                for (const auto& v : value) item.inputs.push_back(scalar(v));
            } else {
                item.inputs.push_back(scalar(value));
            }
            items.push_back(std::move(item));
        }
    }
};

struct CommonInputs {
    std::string pretrained;
    std::vector<std::string> checkpoints;
    std::vector<std::string> freeze;
};

namespace detail {

inline std::vector<LabeledCheckpoint> load_checkpoints(const std::vector<std::string>& paths, const Logger& log) {
    std::vector<LabeledCheckpoint> out;
    std::map<std::string, int> seen;
    for (const auto& p : paths) {
        std::string label = fs::path(p).stem().string();
        if (seen[label]++) label += "_" + std::to_string(seen[label] - 1);
        log.info("loading checkpoint '" + label + "' from " + p);
        out.push_back({label, load_archive(p)});
    }
    if (out.empty()) throw error(errc::empty_input, "no checkpoints given");
    return out;
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void emit(std::ostream& out, const std::string& text, const std::string& path) {
    if (path.empty()) {
        out << text;
    } else {
        write_text_atomic(path, text);
    }
}

inline MergeMethod require_method(const std::string& name) {
    auto m = parse_method(name);
    if (!m) throw CLI::ValidationError("--method", "unknown merge method '" + name + "'");
    return *m;
}

inline MaskMethod require_mask_method(const std::string& name) {
    if (name == "tall") return MaskMethod::tall;
    if (name == "magnitude") return MaskMethod::magnitude;
    throw CLI::ValidationError("--mask-method", "expected tall or magnitude");
}

/// Builds the per-task masks for `mask` and `stats` when working from raw checkpoints.
inline MaskSet masks_from_checkpoints(const TensorMap& pretrained, const std::vector<LabeledCheckpoint>& cps,
                                      const TrainableKeySpec& keys, const CompressConfig& config) {
    auto archive = compress_checkpoints(pretrained, cps, keys, config);
    return archive.mask_set();
}

inline std::uint64_t count_arg(double v, const char* flag) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw CLI::ValidationError(flag, "must be a non-negative count");
    return static_cast<std::uint64_t>(std::llround(v));
}

} // namespace detail

/// Runs the CLI on argv-style arguments (args[0] is the program name).
/// Returns 0 on success, 2 on usage errors, 1 on domain errors.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    const Logger log(err, log_level_from_env());

    CLI::App app{"tallpack: merge and compress fine-tuned checkpoints"};
    app.config_formatter(std::make_shared<JsonConfig>());
    app.set_config("--config", "", "JSON config file (flags override it)");
    app.require_subcommand(1);
    app.fallthrough();
    unsigned threads = 1;
    app.add_option("--threads", threads, "worker threads (0 = all cores)");

    CommonInputs in;
    std::string method = "task_arithmetic";
    std::string mask_method = "tall";
    std::optional<double> alpha;
    std::vector<double> alpha_grid = default_alpha_grid();
    std::vector<double> lambda_grid = default_lambda_grid();
    std::int64_t k = 2;
    double trim_fraction = 0.2;
    double top_fraction = default_magnitude_fraction;
    std::string out_path;
    std::string archive_path;
    std::string task;
    std::string format = "json";

    auto add_inputs = [&](CLI::App* sub, bool required) {
        auto* p = sub->add_option("--pretrained", in.pretrained, "pre-trained checkpoint")->check(CLI::ExistingFile);
        auto* c = sub->add_option("--checkpoints", in.checkpoints, "fine-tuned checkpoints")->check(CLI::ExistingFile);
        if (required) {
            p->required();
            c->required();
        }
        sub->add_option("--freeze", in.freeze, "glob patterns of frozen tensors");
        return std::pair{p, c};
    };
    auto add_format = [&](CLI::App* sub) {
        sub->add_option("--format", format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    };

    auto* merge = app.add_subcommand("merge", "merge checkpoints into one model");
    add_inputs(merge, true);
    merge->add_option("--method", method, "average|task_arithmetic|ties|consensus_ta|consensus_ties");
    auto* alpha_opt = merge->add_option("--alpha", alpha, "fixed scaling factor");
    merge->add_option("--alpha-grid", alpha_grid, "grid searched when --alpha is absent")->excludes(alpha_opt);
    merge->add_option("--lambda-grid", lambda_grid, "per-task mask sparsity grid");
    merge->add_option("--k", k, "consensus threshold");
    merge->add_option("--trim-fraction", trim_fraction, "TIES keep fraction");
    merge->add_option("--out", out_path, "merged checkpoint path (metadata goes to <out>.json)")->required();

    auto* mask = app.add_subcommand("mask", "build per-task masks and report them");
    add_inputs(mask, true);
    mask->add_option("--method", method, "task_arithmetic|ties multi-task vector");
    mask->add_option("--mask-method", mask_method, "tall|magnitude");
    mask->add_option("--lambda-grid", lambda_grid, "per-task mask sparsity grid");
    mask->add_option("--trim-fraction", trim_fraction, "TIES keep fraction");
    mask->add_option("--top-fraction", top_fraction, "magnitude-mask keep fraction");
    mask->add_option("--out", out_path, "write the report here instead of stdout");
    add_format(mask);

    auto* compress = app.add_subcommand("compress", "write a TLPK archive");
    add_inputs(compress, true);
    compress->add_option("--method", method, "task_arithmetic|ties multi-task vector");
    compress->add_option("--mask-method", mask_method, "tall|magnitude");
    compress->add_option("--lambda-grid", lambda_grid, "per-task mask sparsity grid");
    compress->add_option("--trim-fraction", trim_fraction, "TIES keep fraction");
    compress->add_option("--top-fraction", top_fraction, "magnitude-mask keep fraction");
    compress->add_option("--alpha", alpha, "scale stored for reconstruction (default 1)");
    compress->add_option("--out", out_path, "archive path")->required();

    auto* rebuild = app.add_subcommand("reconstruct", "recover one task's model from a TLPK archive");
    rebuild->add_option("--archive", archive_path, "TLPK archive")->required()->check(CLI::ExistingFile);
    rebuild->add_option("--task", task, "task label")->required();
    rebuild->add_option("--alpha", alpha, "override the archive's reconstruction scale");
    rebuild->add_option("--out", out_path, "output checkpoint")->required();

    auto* stats = app.add_subcommand("stats", "mask agreement histogram and weight taxonomy");
    auto [stats_pre, stats_cps] = add_inputs(stats, false);
    auto* stats_archive = stats->add_option("--archive", archive_path, "TLPK archive")->check(CLI::ExistingFile);
    stats_archive->excludes(stats_pre)->excludes(stats_cps);
    stats->add_option("--method", method, "task_arithmetic|ties multi-task vector");
    stats->add_option("--lambda-grid", lambda_grid, "per-task mask sparsity grid");
    stats->add_option("--trim-fraction", trim_fraction, "TIES keep fraction");
    stats->add_option("--out", out_path, "write the report here instead of stdout");
    add_format(stats);

    auto* storage = app.add_subcommand("storage", "storage cost table");
    double tasks_arg = 0, p_prime = 0, frozen = 0;
    storage->add_option("--T", tasks_arg, "number of tasks")->required();
    storage->add_option("--p-prime", p_prime, "trainable parameter count")->required();
    storage->add_option("--frozen", frozen, "frozen parameter count");
    storage->add_option("--out", out_path, "write the report here instead of stdout");
    add_format(storage);

    auto* synth = app.add_subcommand("synth", "generate a synthetic checkpoint collection");
    SyntheticSpec spec;
    std::string mode = "disjoint";
    synth->add_option("--P", spec.P, "trainable scalars")->required();
    synth->add_option("--T", spec.T, "tasks")->required();
    synth->add_option("--seed", spec.seed, "RNG seed");
    synth->add_option("--mode", mode, "disjoint|overlapping")->check(CLI::IsMember({"disjoint", "overlapping"}));
    synth->add_option("--overlap-fraction", spec.overlap_fraction, "support fraction (overlapping mode)");
    synth->add_option("--value-scale", spec.value_scale, "update magnitude bound");
    synth->add_flag("--layered", spec.layered, "emit several tensors instead of one");
    synth->add_option("--out", out_path, "output directory")->required();

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        set_num_threads(threads);
        log.debug("threads=" + std::to_string(num_threads()));

        auto compress_config = [&] {
            CompressConfig cc;
            cc.method = detail::require_method(method);
            cc.mask_method = detail::require_mask_method(mask_method);
            cc.lambda_grid = lambda_grid;
            cc.ties_trim_fraction = trim_fraction;
            cc.magnitude_fraction = top_fraction;
            cc.alpha = alpha.value_or(1.0);
            return cc;
        };
        auto load_inputs = [&] {
            TensorMap pre = load_archive(in.pretrained);
            auto cps = detail::load_checkpoints(in.checkpoints, log);
            auto keys = TrainableKeySpec::from_frozen_patterns(pre, in.freeze);
            return std::tuple{std::move(pre), std::move(cps), std::move(keys)};
        };

        if (*merge) {
            auto [pre, cps, keys] = load_inputs();
            MergeConfig mc;
            mc.method = detail::require_method(method);
            mc.alpha = alpha;
            mc.alpha_grid = alpha_grid;
            mc.lambda_grid = lambda_grid;
            mc.consensus_k = k;
            mc.ties_trim_fraction = trim_fraction;
            auto result = merge_checkpoints(pre, cps, keys, mc);
            save_archive(result.model, out_path);
            const auto meta = result.metadata.dump(2) + "\n";
            detail::write_text_atomic(out_path + ".json", meta);
            out << meta;
            log.info("wrote " + out_path);
        } else if (*mask) {
            auto [pre, cps, keys] = load_inputs();
            const auto set = detail::masks_from_checkpoints(pre, cps, keys, compress_config());
            std::ostringstream os;
            os.precision(17);
            if (format == "csv") {
                os << "task,lambda,ones,bits,density\n";
                for (const auto& e : set.masks)
                    os << e.label << ',' << e.lambda << ',' << e.mask.count_ones() << ',' << e.mask.bit_count() << ','
                       << e.mask.density() << '\n';
            } else {
                nlohmann::json rows = nlohmann::json::array();
                for (const auto& e : set.masks)
                    rows.push_back({{"task", e.label}, {"lambda", e.lambda}, {"ones", e.mask.count_ones()},
                                    {"bits", e.mask.bit_count()}, {"density", e.mask.density()}});
                os << rows.dump(2) << '\n';
            }
            detail::emit(out, os.str(), out_path);
        } else if (*compress) {
            auto [pre, cps, keys] = load_inputs();
            const auto archive = compress_checkpoints(pre, cps, keys, compress_config());
            write_tallpack(archive, out_path);
            nlohmann::json summary = {{"archive", out_path},
                                      {"num_tasks", archive.masks.size()},
                                      {"bit_count", archive.trainable_count()},
                                      {"merge_method", archive.manifest.merge_method},
                                      {"mask_method", archive.manifest.mask_method}};
            nlohmann::json lambdas = nlohmann::json::object();
            for (const auto& t : archive.manifest.tasks) lambdas[t.label] = t.lambda;
            summary["lambdas"] = lambdas;
            out << summary.dump(2) << '\n';
        } else if (*rebuild) {
            const auto archive = read_tallpack(archive_path);
            const auto model = reconstruct(archive.pretrained, archive.mtl_vector, archive.unpack(task),
                                           alpha.value_or(archive.manifest.alpha));
            save_archive(model, out_path);
            log.info("reconstructed '" + task + "' into " + out_path);
        } else if (*stats) {
            MaskSet set;
            if (!archive_path.empty()) {
                set = read_tallpack(archive_path).mask_set();
            } else {
                if (in.pretrained.empty() || in.checkpoints.empty())
                    throw CLI::ValidationError("stats", "needs --archive or --pretrained with --checkpoints");
                auto [pre, cps, keys] = load_inputs();
                set = detail::masks_from_checkpoints(pre, cps, keys, compress_config());
            }
            const auto tax = classify_weights(set);
            detail::emit(out, format == "csv" ? tax.to_csv() : tax.to_json().dump(2) + "\n", out_path);
        } else if (*storage) {
            const auto report = storage_report(detail::count_arg(tasks_arg, "--T"),
                                               detail::count_arg(p_prime, "--p-prime"),
                                               detail::count_arg(frozen, "--frozen"));
            detail::emit(out, format == "csv" ? report.to_csv() : report.to_json().dump(2) + "\n", out_path);
        } else if (*synth) {
            spec.mode = mode == "disjoint" ? SyntheticMode::disjoint : SyntheticMode::overlapping;
            const auto tasks = generate_tasks(spec);
            fs::create_directories(out_path);
            const fs::path dir = out_path;
            save_archive(tasks.pretrained, dir / "pretrained.safetensors");
            nlohmann::json supports = nlohmann::json::object();
            for (std::size_t t = 0; t < tasks.finetuned.size(); ++t) {
                save_archive(tasks.finetuned[t], dir / (tasks.labels[t] + ".safetensors"));
                supports[tasks.labels[t]] = tasks.supports[t];
            }
            detail::write_text_atomic(dir / "supports.json", supports.dump() + "\n");
            out << nlohmann::json({{"out", out_path}, {"P", spec.P}, {"T", spec.T}, {"seed", spec.seed}}).dump() << '\n';
        }
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const error& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return run(std::vector<std::string>(argv, argv + argc), out, err);
}

} // namespace tallpack::cli
