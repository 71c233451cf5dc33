#include "fairproto/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "fairproto/checkpoint.hpp"
#include "fairproto/embedding_store.hpp"
#include "fairproto/evaluator.hpp"
#include "fairproto/file_util.hpp"
#include "fairproto/report.hpp"
#include "fairproto/trainer.hpp"

namespace fairproto {

namespace fs = std::filesystem;

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::usage: return 2;
        case ErrorKind::numeric: return 4;
        default: return 3;
    }
}

std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
    auto trim = [](std::string_view s) {
        const auto* ws = " \t\r\n";
        auto b = s.find_first_not_of(ws);
        if (b == std::string_view::npos) return std::string_view{};
        auto e = s.find_last_not_of(ws);
        return s.substr(b, e - b + 1);
    };
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        auto line = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
        start = end == std::string_view::npos ? text.size() + 1 : end + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw UsageError(fmt::format("config line {}: expected 'key = value'", line_no));
        }
        auto key = trim(line.substr(0, eq));
        auto value = trim(line.substr(eq + 1));
        if (key.empty()) throw UsageError(fmt::format("config line {}: empty key", line_no));
        out.emplace_back(std::string(key), std::string(value));
    }
    return out;
}

namespace {

struct SynthOptions {
    std::uint32_t classes = 7;
    std::uint32_t per_class = 60;
    std::uint32_t dim = 16;
    std::uint32_t resnet_dim = 0;
    double sep = 10.0;
    double resnet_sep = 0.0;
    std::uint32_t support = 5;
    std::string category_sizes;
    std::uint64_t seed = 1;
    std::string out;
    std::string vit_only_out;
};

struct TrainOptions {
    std::string manifest;
    std::string checkpoint;
    std::string history;
    TrainConfig config;
    std::string objective = "prototypical_ce";
};

struct ProtocolOptions {
    std::string shots = "1,3,5";
    int trials = 10;
    int assignments = 5;
    int queries = 10;
    std::uint64_t seed = 0;
};

struct EvalOptions {
    std::string manifest;
    std::string checkpoint;
    std::string out;
    std::string backbone;
    std::string ablation = "full";
    ProtocolOptions protocol;
};

struct AblateOptions {
    std::string manifest;
    std::string checkpoint;
    std::string vit_manifest;
    std::string vit_checkpoint;
    std::string out;
    ProtocolOptions protocol;
};

struct ReportOptions {
    std::string metrics;
    std::string out;
};

void add_protocol_flags(CLI::App* cmd, ProtocolOptions& p) {
    cmd->add_option("--shots", p.shots, "Comma-separated, strictly increasing shot counts");
    cmd->add_option("--trials", p.trials, "Independent trials");
    cmd->add_option("--assignments", p.assignments, "Test assignments per trial");
    cmd->add_option("--queries", p.queries, "Static query samples per class");
    cmd->add_option("--seed", p.seed, "Protocol seed");
}

std::vector<int> parse_shots(const std::string& text) {
    std::vector<int> shots;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            int v = std::stoi(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            shots.push_back(v);
        } catch (const std::exception&) {
            throw UsageError("--shots: '" + item + "' is not an integer");
        }
    }
    if (shots.empty()) throw UsageError("--shots is empty");
    return shots;
}

std::vector<std::uint32_t> parse_sizes(const std::string& text) {
    std::vector<std::uint32_t> sizes;
    if (text.empty()) return sizes;
    for (int s : parse_shots(text)) {
        if (s < 1) throw UsageError("--category-sizes entries must be positive");
        sizes.push_back(static_cast<std::uint32_t>(s));
    }
    return sizes;
}

unsigned threads_from_env() {
    const char* raw = std::getenv("FAIRPROTO_THREADS");
    if (raw == nullptr || *raw == '\0') return 0;
    try {
        std::size_t used = 0;
        long v = std::stol(raw, &used);
        if (used != std::string(raw).size() || v < 0) throw std::invalid_argument(raw);
        return static_cast<unsigned>(v);
    } catch (const std::exception&) {
        throw UsageError(std::string("FAIRPROTO_THREADS must be a non-negative integer, got '") + raw + "'");
    }
}

ProtocolConfig protocol_config(const ProtocolOptions& p) {
    ProtocolConfig c;
    c.shots = parse_shots(p.shots);
    c.trials = p.trials;
    c.assignments = p.assignments;
    c.queries_per_class = p.queries;
    c.seed = p.seed;
    c.threads = threads_from_env();
    return c;
}

void require_input(const std::string& path, const char* what) {
    if (path.empty()) throw UsageError(fmt::format("--{} is required", what));
    if (!fs::exists(path)) throw UsageError(fmt::format("{} not found: {}", what, path));
}

/// Resolved `key = value` echo of every option on a command.
std::string config_echo(const CLI::App* cmd) {
    std::string out = fmt::format("# resolved configuration for '{}'\n", cmd->get_name());
    for (const CLI::Option* opt : cmd->get_options()) {
        const auto& name = opt->get_single_name();
        if (name == "help" || name == "config" || opt->get_lnames().empty()) continue;
        std::string value;
        if (opt->count() > 0) {
            const auto& results = opt->results();
            value = results.empty() ? "" : results.back();
        } else {
            value = opt->get_default_str();
        }
        out += fmt::format("{} = {}\n", name, value);
    }
    return out;
}

std::string stem_label(const std::string& path) {
    return fs::path(path).stem().string();
}

int cmd_synth(const SynthOptions& o, const CLI::App* cmd, std::ostream& out) {
    if (o.out.empty()) throw UsageError("--out is required");
    SynthSpec spec;
    spec.classes = o.classes;
    spec.per_class = o.per_class;
    spec.dim_vit = o.dim;
    spec.dim_resnet = o.resnet_dim;
    spec.separation_vit = o.sep;
    spec.separation_resnet = o.resnet_sep;
    spec.support_per_class = o.support;
    spec.seed = o.seed;
    auto m = synthesize(spec);
    auto sizes = parse_sizes(o.category_sizes);
    if (!sizes.empty()) label_categories(m, sizes);

    save_manifest_file(m, o.out);
    if (!o.vit_only_out.empty()) save_manifest_file(vit_only_view(m), o.vit_only_out);
    write_file_atomic(o.out + ".config", config_echo(cmd));

    out << fmt::format("wrote {} records ({} classes, dim {} = {} + {}) to {}\n", m.records.size(),
                       m.class_table.size(), m.dim_total(), m.dim_vit, m.dim_resnet, o.out);
    out << fmt::format("{:>8}  {:<12} {:>6} {:>6} {:>8} {:>6}\n", "class_id", "name", "train", "val", "support",
                       "query");
    for (const auto& [id, name] : m.class_table) {
        std::array<int, 4> counts{};
        for (const auto& r : m.records) {
            if (r.class_id == id) ++counts[static_cast<std::size_t>(r.split)];
        }
        out << fmt::format("{:>8}  {:<12} {:>6} {:>6} {:>8} {:>6}\n", id, name, counts[0], counts[1], counts[2],
                           counts[3]);
    }
    return 0;
}

int cmd_train(TrainOptions o, const CLI::App* cmd, std::ostream& out) {
    require_input(o.manifest, "manifest");
    if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
    o.config.episode.objective = parse_objective(o.objective);
    const std::string history_path = o.history.empty() ? o.checkpoint + ".history.csv" : o.history;
    const auto manifest = load_manifest_file(o.manifest);

    TrainResult result;
    try {
        result = train(manifest, o.config);
    } catch (const TrainingAborted& aborted) {
        write_file_atomic(history_path, aborted.history().to_csv());
        throw;
    }
    save_checkpoint_file(result.params, &result.optimizer, o.checkpoint);
    write_file_atomic(history_path, result.history.to_csv());
    write_file_atomic(o.checkpoint + ".config", config_echo(cmd));

    const auto& h = result.history;
    out << fmt::format("{} after {} episodes ({} steps)\n",
                       h.stop_reason == StopReason::completed ? "completed" : "early stopped", h.val_losses.size(),
                       h.steps.size());
    out << fmt::format("final train loss {:.6f}, final val loss {:.6f}, best val loss {:.6f} at episode {}\n",
                       h.steps.back().train_loss, h.val_losses.back(), h.best_val_loss, h.best_episode);
    return 0;
}

Checkpoint load_matching(const std::string& path) {
    require_input(path, "checkpoint");
    return load_checkpoint_file(path);
}

int cmd_eval(const EvalOptions& o, const CLI::App* cmd, std::ostream& out) {
    require_input(o.manifest, "manifest");
    require_input(o.checkpoint, "checkpoint");
    if (o.out.empty()) throw UsageError("--out is required");
    auto config = protocol_config(o.protocol);
    config.ablation = parse_ablation(o.ablation);
    const auto manifest = load_manifest_file(o.manifest);
    const auto ck = load_checkpoint_file(o.checkpoint);
    config.backbone = o.backbone.empty() ? stem_label(o.manifest) : o.backbone;

    auto report = run_protocol(manifest, ck.params, config);
    auto rows = metric_rows(report);
    auto table = render_table(rows);
    write_file_atomic(o.out + ".table.txt", table);
    write_file_atomic(o.out + ".metrics.csv", metrics_csv(rows));
    write_file_atomic(o.out + ".tarfar.csv", tar_far_csv(report));
    write_file_atomic(o.out + ".config", config_echo(cmd));
    out << table;
    return 0;
}

int cmd_ablate(const AblateOptions& o, const CLI::App* cmd, std::ostream& out) {
    require_input(o.manifest, "manifest");
    require_input(o.checkpoint, "checkpoint");
    if (o.out.empty()) throw UsageError("--out is required");
    if (!o.vit_manifest.empty() && o.vit_checkpoint.empty()) {
        throw UsageError("--vit-manifest needs a matching --vit-checkpoint");
    }
    auto config = protocol_config(o.protocol);
    const auto full_manifest = load_manifest_file(o.manifest);
    const auto full_ck = load_checkpoint_file(o.checkpoint);

    config.backbone = stem_label(o.manifest);
    config.ablation = Ablation::full;
    auto full = run_protocol(full_manifest, full_ck.params, config);

    EvalReport vit;
    config.ablation = Ablation::vit_only;
    if (!o.vit_manifest.empty()) {
        require_input(o.vit_manifest, "vit-manifest");
        const auto vit_manifest = load_manifest_file(o.vit_manifest);
        const auto vit_ck = load_matching(o.vit_checkpoint);
        config.backbone = stem_label(o.vit_manifest);
        vit = run_protocol(vit_manifest, vit_ck.params, config);
    } else if (!o.vit_checkpoint.empty()) {
        const auto vit_ck = load_matching(o.vit_checkpoint);
        vit = run_protocol(full_manifest, vit_ck.params, config);
    } else {
        vit = run_protocol(full_manifest, full_ck.params, config);
    }

    auto rows = ablation_rows(full, vit);
    write_file_atomic(o.out, ablation_csv(rows));
    write_file_atomic(o.out + ".config", config_echo(cmd));
    out << fmt::format("{:<12} {:>5} {:>10} {:>10}\n", "category", "shot", "full", "vit_only");
    for (const auto& r : rows) {
        out << fmt::format("{:<12} {:>5} {:>10.2f} {:>10.2f}\n", r.category, r.shot, 100.0 * r.full_accuracy,
                           100.0 * r.vit_only_accuracy);
    }
    return 0;
}

int cmd_report(const ReportOptions& o, const CLI::App* cmd, std::ostream& out) {
    require_input(o.metrics, "metrics");
    auto table = render_table(parse_metrics_csv(read_file(o.metrics)));
    if (o.out.empty()) {
        out << table;
    } else {
        write_file_atomic(o.out, table);
        write_file_atomic(o.out + ".config", config_echo(cmd));
    }
    return 0;
}

/// Splices config-file values in front of the command-line flags so that
/// explicit flags win (every option keeps its last value).
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
        }
    }
    if (path.empty() || args.empty()) return args;
    if (!fs::exists(path)) throw UsageError("config file not found: " + path);
    std::vector<std::string> expanded{args.front()};
    for (const auto& [key, value] : parse_config_text(read_file(path))) {
        expanded.push_back("--" + key + "=" + value);
    }
    expanded.insert(expanded.end(), args.begin() + 1, args.end());
    return expanded;
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Few-shot prototypical learning and demographic fairness evaluation on embedding files",
                 "fairproto"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    std::string config_path;

    SynthOptions synth;
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic Gaussian-cluster manifest");
    synth_cmd->add_option("--config", config_path, "key = value config file; flags override it");
    synth_cmd->add_option("--classes", synth.classes, "Number of classes (>= 2)");
    synth_cmd->add_option("--per-class", synth.per_class, "Samples per class (>= 2)");
    synth_cmd->add_option("--dim", synth.dim, "ViT block width");
    synth_cmd->add_option("--resnet-dim", synth.resnet_dim, "ResNet block width (0: ViT only)");
    synth_cmd->add_option("--sep", synth.sep, "Closest-center distance in the ViT block, in stddevs");
    synth_cmd->add_option("--resnet-sep", synth.resnet_sep, "Closest-center distance in the ResNet block");
    synth_cmd->add_option("--support", synth.support, "Support-split samples per class");
    synth_cmd->add_option("--category-sizes", synth.category_sizes,
                          "Label class blocks as race,gender,age_group, e.g. 7,3,3");
    synth_cmd->add_option("--seed", synth.seed, "Random seed");
    synth_cmd->add_option("--out", synth.out, "Output manifest path");
    synth_cmd->add_option("--vit-only-out", synth.vit_only_out, "Also write the ViT-only slice here");

    TrainOptions tr;
    auto& tc = tr.config;
    auto* train_cmd = app.add_subcommand("train", "Episodic meta-training of the projection head");
    train_cmd->add_option("--config", config_path, "key = value config file; flags override it");
    train_cmd->add_option("--manifest", tr.manifest, "Input manifest");
    train_cmd->add_option("--checkpoint", tr.checkpoint, "Output checkpoint path");
    train_cmd->add_option("--history", tr.history, "History CSV path (default: <checkpoint>.history.csv)");
    train_cmd->add_option("--seed", tc.episode.seed, "Random seed");
    train_cmd->add_option("--episodes", tc.episode.episodes, "Training episodes");
    train_cmd->add_option("--mini-epochs", tc.episode.mini_epochs, "Updates per episode");
    train_cmd->add_option("--k-min", tc.episode.k_min, "Minimum ways");
    train_cmd->add_option("--k-max", tc.episode.k_max, "Maximum ways");
    train_cmd->add_option("--n-min", tc.episode.n_min, "Minimum shots");
    train_cmd->add_option("--n-max", tc.episode.n_max, "Maximum shots");
    train_cmd->add_option("--q-train", tc.episode.q_train, "Queries per class per episode");
    train_cmd->add_option("--objective", tr.objective, "prototypical_ce | pairwise_bce | sum_both");
    train_cmd->add_option("--patience", tc.episode.patience, "Early-stopping patience in episodes");
    train_cmd->add_option("--min-delta", tc.episode.min_delta, "Minimum validation improvement");
    train_cmd->add_option("--val-episodes", tc.episode.val_episodes, "Frozen validation episodes");
    train_cmd->add_option("--hidden", tc.hidden, "Hidden layer width");
    train_cmd->add_option("--out-dim", tc.output, "Embedding width");
    train_cmd->add_option("--dropout", tc.dropout, "Dropout rate after the hidden layer");
    train_cmd->add_option("--l2", tc.l2, "L2 penalty on weight matrices");
    train_cmd->add_option("--lr-max", tc.lr_max, "Initial learning rate");
    train_cmd->add_option("--lr-min", tc.lr_min, "Final learning rate");
    train_cmd->add_option("--clip", tc.clip, "Global gradient-norm clip");

    EvalOptions ev;
    auto* eval_cmd = app.add_subcommand("eval", "Run the nested-shot test protocol and write reports");
    eval_cmd->add_option("--config", config_path, "key = value config file; flags override it");
    eval_cmd->add_option("--manifest", ev.manifest, "Input manifest");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "Head checkpoint");
    eval_cmd->add_option("--out", ev.out, "Output prefix (.table.txt, .metrics.csv, .tarfar.csv)");
    eval_cmd->add_option("--backbone", ev.backbone, "Model label in reports (default: manifest file stem)");
    eval_cmd->add_option("--ablation", ev.ablation, "full | vit_only");
    add_protocol_flags(eval_cmd, ev.protocol);

    AblateOptions ab;
    auto* ablate_cmd = app.add_subcommand("ablate", "Compare fused and ViT-only accuracy per shot");
    ablate_cmd->add_option("--config", config_path, "key = value config file; flags override it");
    ablate_cmd->add_option("--manifest", ab.manifest, "Fused manifest");
    ablate_cmd->add_option("--checkpoint", ab.checkpoint, "Checkpoint trained on the fused manifest");
    ablate_cmd->add_option("--vit-manifest", ab.vit_manifest, "ViT-only manifest (default: zero the ResNet block)");
    ablate_cmd->add_option("--vit-checkpoint", ab.vit_checkpoint, "Checkpoint trained on ViT-only features");
    ablate_cmd->add_option("--out", ab.out, "Comparison CSV path");
    add_protocol_flags(ablate_cmd, ab.protocol);

    ReportOptions rp;
    auto* report_cmd = app.add_subcommand("report", "Re-render a metrics CSV as a table");
    report_cmd->add_option("--config", config_path, "key = value config file; flags override it");
    report_cmd->add_option("--metrics", rp.metrics, "Metrics CSV written by eval");
    report_cmd->add_option("--out", rp.out, "Table path (default: stdout)");

    try {
        auto args = expand_config(raw_args);
        std::vector<const char*> argv{"fairproto"};
        for (const auto& a : args) argv.push_back(a.c_str());
        try {
            app.parse(static_cast<int>(argv.size()), argv.data());
        } catch (const CLI::ParseError& e) {
            int code = app.exit(e, out, err);
            return code == 0 ? 0 : 2;
        }

        if (*synth_cmd) return cmd_synth(synth, synth_cmd, out);
        if (*train_cmd) return cmd_train(tr, train_cmd, out);
        if (*eval_cmd) return cmd_eval(ev, eval_cmd, out);
        if (*ablate_cmd) return cmd_ablate(ab, ablate_cmd, out);
        if (*report_cmd) return cmd_report(rp, report_cmd, out);
        return 2;
    } catch (const Error& e) {
        err << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace fairproto
