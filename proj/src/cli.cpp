#include "mpq/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "mpq/inference.hpp"
#include "mpq/qat.hpp"
#include "mpq/search.hpp"

namespace mpq {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

/// Budget or reachability failure; maps to exit code 2.
struct ConstraintFailure : Error {
    using Error::Error;
};

std::uint64_t default_seed() {
    if (const char* s = std::getenv("MPQ_SEED")) {
        try {
            return std::stoull(s);
        } catch (const std::exception&) {
            throw CLI::ValidationError("MPQ_SEED", std::string("not an unsigned integer: ") + s);
        }
    }
    return 0;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write " + path.string());
    f << text;
}

/// Expands `--config file.json` into flags for keys not already given on the
/// command line. Keys are flag names without the leading dashes.
std::vector<std::string> expand_config(std::vector<std::string> args) {
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty()) return args;
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open config file " + path);
    json cfg;
    try {
        cfg = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError("config file " + path + ": " + e.what());
    }
    if (!cfg.is_object()) throw ParseError("config file " + path + ": top level must be an object");
    for (const auto& [key, value] : cfg.items()) {
        const std::string flag = "--" + key;
        const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
            return a == flag || a.rfind(flag + "=", 0) == 0;
        });
        if (given || key == "config") continue;
        if (value.is_boolean()) {
            if (value.get<bool>()) args.push_back(flag);
        } else if (value.is_string()) {
            args.push_back(flag);
            args.push_back(value.get<std::string>());
        } else if (value.is_number()) {
            args.push_back(flag);
            args.push_back(value.dump());
        } else {
            throw ParseError("config key '" + key + "' must be a string, number or boolean");
        }
    }
    return args;
}

/// Inputs, settings and outcome of one command for the run manifest.
struct Run {
    std::string command;
    std::uint64_t seed = 0;
    std::string manifest;
    std::vector<std::string> inputs;
    std::string config_path;
};

json config_snapshot(const CLI::App& sub) {
    json cfg = json::object();
    for (const CLI::Option* o : sub.get_options()) {
        if (o->get_lnames().empty()) continue;
        const std::string& name = o->get_lnames().front();
        if (name == "help" || name == "manifest") continue;
        if (o->get_expected_min() == 0) {
            cfg[name] = o->count() > 0;
        } else if (o->count() > 0) {
            cfg[name] = o->results().back();
        } else if (!o->get_default_str().empty()) {
            cfg[name] = o->get_default_str();
        }
    }
    return cfg;
}

void hash_inputs(const std::vector<std::string>& paths, json& out) {
    for (const std::string& p : paths) {
        if (p.empty()) continue;
        if (fs::is_directory(p)) {
            std::vector<fs::path> files;
            for (const auto& e : fs::recursive_directory_iterator(p)) {
                if (e.is_regular_file()) files.push_back(e.path());
            }
            std::sort(files.begin(), files.end());
            for (const auto& f : files) out[f.string()] = sha256_file(f.string());
        } else if (fs::exists(p)) {
            out[p] = sha256_file(p);
        }
    }
}

void write_manifest(const Run& run, const CLI::App& sub, double seconds) {
    json m;
    m["command"] = run.command;
    m["config"] = config_snapshot(sub);
    m["seed"] = run.seed;
    json inputs = json::object();
    auto all = run.inputs;
    all.push_back(run.config_path);
    hash_inputs(all, inputs);
    m["inputs"] = inputs;
    m["version"] = kToolVersion;
    m["duration_seconds"] = seconds;
    write_text(run.manifest, m.dump(2) + "\n");
}

FootprintOptions footprint_options(bool exclude_overheads) { return FootprintOptions{!exclude_overheads}; }

QuantPolicy uniform_from_spec(const NetworkGraph& g, const std::string& spec) {
    int w = 0, a = 0;
    const auto comma = spec.find(',');
    try {
        w = std::stoi(spec.substr(0, comma));
        a = comma == std::string::npos ? w : std::stoi(spec.substr(comma + 1));
    } catch (const std::exception&) {
        throw PolicyError("--uniform-bits expects W or W,A");
    }
    if (!is_policy_bits(w) || !is_policy_bits(a)) throw PolicyError("--uniform-bits values must be 2, 4, 8 or 32");
    return QuantPolicy::uniform(g, w, a);
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed << v;
    return os.str();
}

// ---- commands ----

struct FootprintArgs {
    std::string graph, policy, uniform, rom_csv, ram_csv;
    std::int64_t rom = 0, ram = 0;
    bool exclude_overheads = false;
};

int cmd_footprint(const FootprintArgs& a, Run& run, std::ostream& out) {
    run.inputs = {a.graph, a.policy};
    const NetworkGraph g = load_graph(a.graph);
    const QuantPolicy p = !a.policy.empty() ? load_policy(a.policy)
                                            : uniform_from_spec(g, a.uniform.empty() ? "8" : a.uniform);
    MemoryBudget b;
    if (a.rom > 0) b.rom_bytes = a.rom;
    if (a.ram > 0) b.ram_bytes = a.ram;
    const ConstraintCheck c = check_constraints(g, p, b, footprint_options(a.exclude_overheads));
    out << "rom_bytes " << c.report.rom_total << "\n";
    out << "ram_peak_bytes " << c.report.ram_peak << "\n";
    out << "ram_peak_step " << c.report.ram_peak_step << "\n";
    out << "m1 " << (c.m1_ok ? "ok" : "violated") << "\n";
    out << "m2 " << (c.m2_ok ? "ok" : "violated") << "\n";
    if (!a.rom_csv.empty()) write_text(a.rom_csv, rom_csv(c.report));
    if (!a.ram_csv.empty()) write_text(a.ram_csv, ram_csv(c.report));
    return c.m1_ok && c.m2_ok ? kExitOk : kExitConstraint;
}

struct DatasetArgs {
    std::string out_dir, format = "idx";
    std::size_t n_train = 4000, n_test = 1000;
};

int cmd_make_dataset(const DatasetArgs& a, Run& run, std::ostream& out) {
    const DatasetSplits d = make_shapes_dataset(a.n_train, a.n_test, run.seed);
    if (a.format == "idx") {
        save_dataset_idx(d, a.out_dir);
    } else {
        save_raw_dir(d.train, fs::path(a.out_dir) / "train");
        save_raw_dir(d.test, fs::path(a.out_dir) / "test");
    }
    out << "train " << d.train.size() << "\ntest " << d.test.size() << "\n";
    return kExitOk;
}

struct TrainArgs {
    std::string graph, dataset, weights, policy, out_weights, out_model;
    int epochs = 0, batch = 32;
    double lr = 0.0;
};

TrainConfig train_config(const TrainArgs& a, std::uint64_t seed) {
    TrainConfig c;
    c.learning_rate = a.lr;
    c.batch_size = a.batch;
    c.epochs = a.epochs;
    c.seed = seed;
    return c;
}

int cmd_pretrain(const TrainArgs& a, Run& run, std::ostream& out) {
    run.inputs = {a.graph, a.dataset};
    const NetworkGraph g = load_graph(a.graph);
    const DatasetSplits d = load_dataset(a.dataset);
    const TrainResult r = pretrain(g, d.train, d.test, train_config(a, run.seed));
    save_checkpoint(r.model, a.out_weights);
    if (!r.epoch_loss.empty()) out << "train_loss " << fmt_double(r.epoch_loss.back()) << "\n";
    out << "top1 " << fmt_double(r.val_top1) << "\n";
    return kExitOk;
}

struct SearchArgs {
    std::string graph, dataset, weights, mode = "independent", out_policy = "policy.json", history_csv = "history.csv";
    std::int64_t rom = 0, ram = 0;
    int episodes = -1, warmup = -1, pretrain_epochs = 10;
    double proxy_train = 0.2, proxy_val = 0.1, discount = 0.0;
    bool freeze_first_last = false, exclude_overheads = false;
};

int cmd_search(const SearchArgs& a, Run& run, std::ostream& out) {
    run.inputs = {a.graph, a.dataset, a.weights};
    const NetworkGraph g = load_graph(a.graph);
    const DatasetSplits d = load_dataset(a.dataset);
    SearchConfig cfg = SearchConfig::defaults(parse_search_mode(a.mode));
    if (a.episodes >= 0) cfg.episodes = a.episodes;
    if (a.warmup >= 0) cfg.warmup = a.warmup;
    if (a.rom > 0) cfg.budget.rom_bytes = a.rom;
    if (a.ram > 0) cfg.budget.ram_bytes = a.ram;
    cfg.footprint = footprint_options(a.exclude_overheads);
    cfg.seed = run.seed;
    cfg.freeze_first_last = a.freeze_first_last;
    cfg.agent.discount = a.discount;

    FloatModel pretrained;
    if (!a.weights.empty()) {
        pretrained = load_checkpoint(a.weights);
    } else {
        TrainConfig tc;
        tc.learning_rate = 3e-3;
        tc.epochs = a.pretrain_epochs;
        tc.seed = run.seed;
        pretrained = pretrain(g, d.train, d.test, tc).model;
    }
    const auto n = static_cast<double>(d.train.size());
    const ProxySplit proxy = make_proxy(d.train, static_cast<std::size_t>(n * a.proxy_train),
                                        static_cast<std::size_t>(n * a.proxy_val), run.seed);
    SearchResult r;
    try {
        r = search(g, cfg, proxy, pretrained);
    } catch (const InfeasibleError& e) {
        throw ConstraintFailure(e.what());
    }
    save_policy(r.best_policy, a.out_policy);
    write_text(a.history_csv, history_csv(r));
    const auto& best = r.history[static_cast<std::size_t>(r.best_episode)];
    out << "best_episode " << r.best_episode << "\n";
    out << "best_top1 " << fmt_double(r.best_top1) << "\n";
    out << "rom_bytes " << best.rom_bytes << "\n";
    out << "ram_peak_bytes " << best.ram_bytes << "\n";
    return kExitOk;
}

int cmd_finetune(const TrainArgs& a, Run& run, std::ostream& out) {
    run.inputs = {a.graph, a.dataset, a.weights, a.policy};
    const NetworkGraph g = load_graph(a.graph);
    const DatasetSplits d = load_dataset(a.dataset);
    const FloatModel start = load_checkpoint(a.weights);
    const QuantPolicy p = load_policy(a.policy);
    const FinetuneResult r = finetune(g, start, p, d.train, d.test, train_config(a, run.seed));
    if (!a.out_weights.empty()) save_checkpoint(r.train.model, a.out_weights);
    save_model(r.packed, a.out_model);
    out << "top1 " << fmt_double(r.train.val_top1) << "\n";
    return kExitOk;
}

struct EvalArgs {
    std::string graph, dataset, model, weights, policy, per_class_csv;
};

int cmd_eval(const EvalArgs& a, Run& run, std::ostream& out) {
    run.inputs = {a.graph, a.dataset, a.model, a.weights, a.policy};
    const NetworkGraph g = load_graph(a.graph);
    const DatasetSplits d = load_dataset(a.dataset);
    Accuracy acc;
    if (!a.model.empty()) {
        acc = evaluate_accuracy(g, load_model(a.model), d.test);
    } else {
        if (a.weights.empty()) throw CLI::ValidationError("eval", "needs --model or --weights");
        const FloatModel m = load_checkpoint(a.weights);
        if (a.policy.empty()) {
            acc = evaluate_accuracy(g, m, ForwardConfig{}, d.test);
        } else {
            const QuantPolicy p = load_policy(a.policy);
            validate_policy(g, p);
            acc = evaluate_accuracy(g, m, ForwardConfig{ActMode::fake_quant, &p}, d.test);
        }
    }
    out << "top1 " << fmt_double(acc.top1) << "\n";
    if (!a.per_class_csv.empty()) {
        write_text(a.per_class_csv, acc.per_class_csv());
    } else {
        out << acc.per_class_csv();
    }
    return kExitOk;
}

int cmd_export(const TrainArgs& a, Run& run, std::ostream& out) {
    run.inputs = {a.graph, a.weights, a.policy};
    const NetworkGraph g = load_graph(a.graph);
    const IntModel m = build_int_model(g, load_checkpoint(a.weights), load_policy(a.policy));
    const auto bytes = serialize_model(m);
    save_model(m, a.out_model);
    out << "model_bytes " << bytes.size() << "\n";
    return kExitOk;
}

}  // namespace

std::string sha256_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot read " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 14];
    while (f) {
        f.read(buf, sizeof buf);
        EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(f.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
    return os.str();
}

int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Mixed-precision quantization policy search for microcontroller CNNs", "mpq"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    Run run;
    std::uint64_t seed = 0;
    auto common = [&](CLI::App* sub, bool with_seed) {
        sub->add_option("--config", run.config_path, "JSON file with flag values (keys are flag names)");
        sub->add_option("--manifest", run.manifest, "Run manifest path (default mpq-<command>.manifest.json)");
        if (with_seed) sub->add_option("--seed", seed, "Random seed (default $MPQ_SEED or 0)");
    };

    FootprintArgs fa;
    auto* fp = app.add_subcommand("footprint", "ROM/RAM footprint of a policy; exit 2 when a budget is violated");
    fp->add_option("--graph", fa.graph)->required();
    fp->add_option("--policy", fa.policy, "Policy JSON");
    fp->add_option("--uniform-bits", fa.uniform, "Uniform policy W or W,A (2, 4, 8 or 32) instead of --policy");
    fp->add_option("--rom-bytes", fa.rom, "ROM budget in bytes");
    fp->add_option("--ram-bytes", fa.ram, "RAM budget in bytes");
    fp->add_flag("--exclude-overheads", fa.exclude_overheads, "Leave biases and requantization words out of ROM");
    fp->add_option("--rom-csv", fa.rom_csv, "Write layer,rom_bytes");
    fp->add_option("--ram-csv", fa.ram_csv, "Write step,ram_bytes");
    common(fp, false);

    DatasetArgs da;
    auto* md = app.add_subcommand("make-dataset", "Write the synthetic shapes dataset");
    md->add_option("--out", da.out_dir)->required();
    md->add_option("--train", da.n_train)->capture_default_str();
    md->add_option("--test", da.n_test)->capture_default_str();
    md->add_option("--format", da.format)->check(CLI::IsMember({"idx", "raw"}))->capture_default_str();
    common(md, true);

    TrainArgs pa;
    pa.epochs = 10;
    pa.lr = 3e-3;
    auto* pt = app.add_subcommand("pretrain", "Full-precision training and range calibration");
    pt->add_option("--graph", pa.graph)->required();
    pt->add_option("--dataset", pa.dataset)->required();
    pt->add_option("--out-weights", pa.out_weights)->required();
    pt->add_option("--epochs", pa.epochs)->capture_default_str();
    pt->add_option("--lr", pa.lr)->capture_default_str();
    pt->add_option("--batch", pa.batch)->capture_default_str();
    common(pt, true);

    SearchArgs sa;
    auto* se = app.add_subcommand("search", "Policy search under ROM/RAM budgets");
    se->add_option("--graph", sa.graph)->required();
    se->add_option("--dataset", sa.dataset)->required();
    se->add_option("--weights", sa.weights, "Pretrained checkpoint (trained on the fly when absent)");
    se->add_option("--rom-bytes", sa.rom, "ROM budget in bytes");
    se->add_option("--ram-bytes", sa.ram, "RAM budget in bytes");
    se->add_option("--mode", sa.mode)->check(CLI::IsMember({"independent", "concurrent"}))->capture_default_str();
    se->add_option("--episodes", sa.episodes, "Episodes (per phase in independent mode)");
    se->add_option("--warmup", sa.warmup, "Random warm-up episodes");
    se->add_option("--out-policy", sa.out_policy)->capture_default_str();
    se->add_option("--history-csv", sa.history_csv)->capture_default_str();
    se->add_option("--proxy-train", sa.proxy_train, "Proxy training fraction of the train split")->capture_default_str();
    se->add_option("--proxy-val", sa.proxy_val, "Proxy validation fraction of the train split")->capture_default_str();
    se->add_option("--discount", sa.discount)->capture_default_str();
    se->add_option("--pretrain-epochs", sa.pretrain_epochs)->capture_default_str();
    se->add_flag("--freeze-first-last", sa.freeze_first_last, "Pin first and last weighted layers to 8 bits");
    se->add_flag("--exclude-overheads", sa.exclude_overheads);
    common(se, true);

    TrainArgs ta;
    ta.epochs = kFinetuneEpochs;
    ta.lr = 1e-4;
    auto* ft = app.add_subcommand("finetune", "Quantization-aware fine-tuning of a policy; writes the packed model");
    ft->add_option("--graph", ta.graph)->required();
    ft->add_option("--dataset", ta.dataset)->required();
    ft->add_option("--weights", ta.weights)->required();
    ft->add_option("--policy", ta.policy)->required();
    ft->add_option("--out-model", ta.out_model)->required();
    ft->add_option("--out-weights", ta.out_weights, "Also save the fine-tuned float checkpoint");
    ft->add_option("--epochs", ta.epochs)->capture_default_str();
    ft->add_option("--lr", ta.lr)->capture_default_str();
    ft->add_option("--batch", ta.batch)->capture_default_str();
    common(ft, true);

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Top-1 on the test split");
    ev->add_option("--graph", ea.graph)->required();
    ev->add_option("--dataset", ea.dataset)->required();
    ev->add_option("--model", ea.model, "Packed integer model");
    ev->add_option("--weights", ea.weights, "Float checkpoint (with --policy: fake-quantized)");
    ev->add_option("--policy", ea.policy);
    ev->add_option("--per-class-csv", ea.per_class_csv, "Per-class CSV path (default: standard output)");
    common(ev, false);

    TrainArgs xa;
    auto* ex = app.add_subcommand("export", "Quantize a checkpoint under a policy into the packed model");
    ex->add_option("--graph", xa.graph)->required();
    ex->add_option("--weights", xa.weights)->required();
    ex->add_option("--policy", xa.policy)->required();
    ex->add_option("--out-model", xa.out_model)->required();
    common(ex, false);

    try {
        seed = default_seed();
        args = expand_config(std::move(args));
        std::reverse(args.begin(), args.end());
        app.parse(std::move(args));
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::CallForVersion&) {
        out << kToolVersion << "\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << "run with --help for usage\n";
        return kExitUsage;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    }

    const CLI::App* sub = app.get_subcommands().front();
    run.command = sub->get_name();
    run.seed = seed;
    if (run.manifest.empty()) run.manifest = "mpq-" + run.command + ".manifest.json";

    const auto t0 = std::chrono::steady_clock::now();
    int code = kExitOk;
    try {
        if (sub == fp) code = cmd_footprint(fa, run, out);
        else if (sub == md) code = cmd_make_dataset(da, run, out);
        else if (sub == pt) code = cmd_pretrain(pa, run, out);
        else if (sub == se) code = cmd_search(sa, run, out);
        else if (sub == ft) code = cmd_finetune(ta, run, out);
        else if (sub == ev) code = cmd_eval(ea, run, out);
        else code = cmd_export(xa, run, out);
    } catch (const CLI::ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConstraintFailure& e) {
        err << "error: " << e.what() << "\n";
        code = kExitConstraint;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitInput;
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    try {
        write_manifest(run, *sub, seconds);
    } catch (const std::exception& e) {
        err << "error: manifest: " << e.what() << "\n";
        return kExitInput;
    }
    return code;
}

}  // namespace mpq
