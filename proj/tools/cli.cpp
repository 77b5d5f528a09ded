#include "cli.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "deeptraverse/accounting.hpp"
#include "deeptraverse/checkpoint.hpp"
#include "deeptraverse/errors.hpp"
#include "deeptraverse/verify.hpp"

namespace dt::cli {

namespace fs = std::filesystem;

namespace {

// A training/evaluation run needs one of these per dataset kind.
Index dataset_classes(const std::string& kind) {
    if (kind == "cifar100") return 100;
    return 10;
}

std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string join_fixed(const std::vector<double>& v, int digits) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fixed(v[i], digits);
    return s;
}

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

fs::path resolve_data_dir(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("DT_DATA_DIR")) return env;
    return {};
}

void require_single_thread(int threads) {
    if (threads != 1) {
        throw ConfigError("--threads " + std::to_string(threads) +
                          ": only single-threaded execution is implemented (use --threads 1)");
    }
}

void require_fp64(const std::string& precision) {
    if (precision == "fp64") return;
    if (precision == "fp32") throw ConfigError("--precision fp32 is not supported; every computation runs in fp64");
    throw ConfigError("--precision must be fp64, got `" + precision + "`");
}

std::pair<Index, Index> parse_resolution(const std::string& s) {
    const auto x = s.find('x');
    try {
        std::size_t used = 0;
        if (x == std::string::npos) {
            const long v = std::stol(s, &used);
            if (used == s.size() && v > 0) return {v, v};
        } else {
            const long h = std::stol(s.substr(0, x), &used);
            const std::string rest = s.substr(x + 1);
            std::size_t used_w = 0;
            const long w = std::stol(rest, &used_w);
            if (used == x && used_w == rest.size() && h > 0 && w > 0) return {h, w};
        }
    } catch (const std::exception&) {
    }
    throw ConfigError("--input must be <size> or <height>x<width>, got `" + s + "`");
}

// `dir` may be the dataset directory itself or a root holding it under its
// conventional name.
fs::path dataset_subdir(const fs::path& dir, const char* conventional, const char* probe) {
    if (!fs::exists(dir / probe) && fs::exists(dir / conventional / probe)) return dir / conventional;
    return dir;
}

Dataset load_split(const RunConfig& rc, const fs::path& dir, Split split, Index limit) {
    const std::string& kind = rc.dataset;
    if (kind == "blobs") {
        const Index n = split == Split::Train ? rc.blobs_train : rc.blobs_test;
        const std::uint64_t seed = split == Split::Train ? rc.seed : rc.seed + 1;
        Dataset d = synthetic_blobs(n, rc.model.num_classes,
                                    Shape{rc.model.input_channels, rc.model.input_height, rc.model.input_width}, seed);
        d.split = split;
        return take(d, limit);
    }
    if (dir.empty()) throw ConfigError("no data directory: pass --data or set DT_DATA_DIR");
    if (!fs::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
    const Index lim = limit > 0 ? limit : -1;
    if (kind == "cifar10") {
        return load_cifar10(dataset_subdir(dir, "cifar-10-batches-bin", "test_batch.bin"), split, lim);
    }
    if (kind == "cifar100") return load_cifar100(dataset_subdir(dir, "cifar-100-binary", "test.bin"), split, lim);
    if (kind == "mnist") return load_mnist(dataset_subdir(dir, "mnist", "t10k-images-idx3-ubyte"), split, lim);
    throw ConfigError("unknown dataset `" + kind + "` (expected cifar10, cifar100, mnist or blobs)");
}

void check_data_matches_model(const Dataset& d, const ModelConfig& m, const std::string& kind) {
    const Shape s = d.image_shape();
    if (s[0] != m.input_channels) {
        throw ConfigError("input_channels = " + std::to_string(m.input_channels) + " but dataset " + kind + " has " +
                          std::to_string(s[0]) + " channels");
    }
    if (s[1] != m.input_height || s[2] != m.input_width) {
        throw ConfigError("input size " + std::to_string(m.input_height) + "x" + std::to_string(m.input_width) +
                          " but dataset " + kind + " images are " + std::to_string(s[1]) + "x" +
                          std::to_string(s[2]));
    }
    if (d.num_classes != m.num_classes) {
        throw ConfigError("num_classes = " + std::to_string(m.num_classes) + " but dataset " + kind + " has " +
                          std::to_string(d.num_classes) + " classes");
    }
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + p.string());
    f << text;
    if (!f) throw IoError("cannot write " + p.string());
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    std::optional<double> lr;
    std::optional<Index> batch_size;
    std::optional<Index> train_limit;
    std::optional<Index> test_limit;
    std::optional<int> recursion;
    std::optional<std::string> augment;
    int threads = 1;
    std::string precision = "fp64";
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    require_single_thread(a.threads);
    require_fp64(a.precision);
    RunConfig rc = run_config_from(KeyValues::load(a.config));
    if (a.seed) rc.seed = *a.seed;
    if (a.epochs) rc.train.epochs = *a.epochs;
    if (a.lr) rc.train.learning_rate = *a.lr;
    if (a.batch_size) rc.train.batch_size = *a.batch_size;
    if (a.train_limit) rc.train_limit = *a.train_limit;
    if (a.test_limit) rc.test_limit = *a.test_limit;
    if (a.recursion) {
        rc.model.recursion = *a.recursion;
        for (StageConfig& s : rc.model.stages) s.recursion.reset();
    }
    if (a.augment) rc.train.augment = parse_augment_policy(*a.augment);
    validate(rc.model);
    OptimState st = make_optim_state(rc.train);

    const fs::path out_dir = a.out;
    if (out_dir.empty()) throw ConfigError("--out is required");
    if (fs::exists(out_dir)) throw ConfigError("run directory already exists: " + out_dir.string());
    const fs::path data_dir = resolve_data_dir(a.data);
    RunData data = load_run_data(rc, data_dir);
    check_data_matches_model(data.train, rc.model, rc.dataset);

    if (out_dir.has_parent_path()) fs::create_directories(out_dir.parent_path());
    if (!fs::create_directory(out_dir)) throw ConfigError("run directory already exists: " + out_dir.string());

    const KeyValues resolved = run_config_to(rc);
    const std::string resolved_text = resolved.serialize();
    KeyValues manifest;
    for (const auto& [k, v] : resolved.entries()) manifest.set("config." + k, v);
    manifest.set("config_hash", git_blob_sha1(resolved_text));
    manifest.set("config_path", a.config);
    manifest.set("seed", std::to_string(rc.seed));
    manifest.set("data_dir", rc.dataset == "blobs" ? "(synthetic)" : fs::absolute(data_dir).string());
    manifest.set("out_dir", fs::absolute(out_dir).string());
    manifest.set("train_samples", std::to_string(data.train.size()));
    manifest.set("test_samples", std::to_string(data.test.size()));
    manifest.set("data.mean", join_fixed(data.train.stats.mean, 6));
    manifest.set("data.std", join_fixed(data.train.stats.std, 6));
    manifest.set("threads", "1");
    manifest.set("precision", "fp64");
    manifest.set("started", utc_now());
    write_text(out_dir / "manifest.txt", manifest.serialize());

    const std::string method = fs::path(a.config).stem().string();
    write_text(out_dir / "cost.csv",
               emit_cost_table({cost_report(rc.model, rc.model.input_height, rc.model.input_width, method,
                                            "R=" + std::to_string(rc.model.recursion))})
                   .csv);

    out << "dataset " << rc.dataset << ": " << data.train.size() << " train / " << data.test.size() << " test\n"
        << "channel mean " << join_fixed(data.train.stats.mean, 6) << "\n"
        << "channel std  " << join_fixed(data.train.stats.std, 6) << "\n";

    Model model = build_model(rc.model, rc.seed);
    Rng rng(rc.seed ^ 0x9e3779b97f4a7c15ULL);
    std::ofstream metrics(out_dir / "metrics.csv", std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + (out_dir / "metrics.csv").string());
    metrics << metrics_csv_header() << "\n" << std::flush;

    TrainState state;
    state.stats = data.train.stats;
    state.extra = resolved;
    const fs::path last = out_dir / "last.ckpt";
    const fs::path best = out_dir / "best.ckpt";
    double best_top1 = -1.0;
    bool have_checkpoint = false;
    while (st.epoch < rc.train.epochs) {
        EpochRecord rec;
        try {
            const auto t0 = std::chrono::steady_clock::now();
            const EpochMetrics m = train_epoch(model, data.train, st, rng, rc.train.batch_size, rc.train.augment);
            const EvalMetrics e = evaluate(model, data.test);
            rec = {st.epoch, st.learning_rate, m.loss, m.accuracy, e.loss, e.top1, e.top5};
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            out << "epoch " << rec.epoch << "/" << rc.train.epochs << " lr " << fixed(rec.lr, 6) << " train_loss "
                << fixed(rec.train_loss, 4) << " train_acc " << fixed(100 * rec.train_acc, 2) << "% test_loss "
                << fixed(rec.test_loss, 4) << " top1 " << fixed(100 * rec.test_top1, 2) << "% top5 "
                << fixed(100 * rec.test_top5, 2) << "% (" << fixed(secs, 1) << " s)\n"
                << std::flush;
        } catch (const NumericError& e) {
            err << "numerical abort: " << e.what() << "; last good checkpoint: "
                << (have_checkpoint ? last.string() : std::string("none")) << "\n";
            return kExitNumeric;
        }
        metrics << metrics_csv_row(rec) << "\n" << std::flush;
        state.optim = st;
        state.rng_state = rng.state();
        state.history.push_back(rec);
        save_checkpoint(last, model, state);
        have_checkpoint = true;
        if (rec.test_top1 > best_top1) {
            best_top1 = rec.test_top1;
            save_checkpoint(best, model, state);
        }
    }
    manifest.set("finished", utc_now());
    write_text(out_dir / "manifest.txt", manifest.serialize());
    out << "run directory " << out_dir.string() << "\n";
    return kExitOk;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string split = "test";
    Index limit = 0;
    Index batch_size = 256;
    int threads = 1;
    std::string precision = "fp64";
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    require_single_thread(a.threads);
    require_fp64(a.precision);
    if (a.split != "test" && a.split != "train") throw ConfigError("--split must be test or train");
    Checkpoint ck = load_checkpoint(a.checkpoint);
    RunConfig rc = run_config_from(ck.state.extra);
    rc.model = ck.config;
    const Split split = a.split == "train" ? Split::Train : Split::Test;
    Dataset d = load_split(rc, resolve_data_dir(a.data), split, a.limit > 0 ? a.limit : (split == Split::Test ? rc.test_limit : rc.train_limit));
    check_data_matches_model(d, ck.config, rc.dataset);
    d.stats = ck.state.stats;
    const EvalMetrics m = evaluate(ck.model, d, a.batch_size);
    out << "checkpoint " << a.checkpoint << " (epoch " << ck.state.optim.epoch << ")\n"
        << rc.dataset << " " << to_string(split) << ": " << m.samples << " samples\n"
        << "top-1 " << fixed(100 * m.top1, 2) << "%  top-5 " << fixed(100 * m.top5, 2) << "%  loss "
        << fixed(m.loss, 6) << "\n"
        << "RESULT top1=" << fixed(100 * m.top1, 4) << " top5=" << fixed(100 * m.top5, 4)
        << " loss=" << fixed(m.loss, 6) << "\n";
    return kExitOk;
}

// ---- count ---------------------------------------------------------------

struct CountArgs {
    std::string config;
    std::string input;
    std::optional<int> recursion;
    std::string method;
    bool breakdown = false;
    int threads = 1;
};

int cmd_count(const CountArgs& a, std::ostream& out) {
    require_single_thread(a.threads);
    ModelConfig cfg = dt_tiny();
    std::string method = "DT-Tiny";
    if (!a.config.empty()) {
        cfg = run_config_from(KeyValues::load(a.config)).model;
        method = fs::path(a.config).stem().string();
    }
    if (!a.method.empty()) method = a.method;
    if (a.recursion) {
        cfg.recursion = *a.recursion;
        for (StageConfig& s : cfg.stages) s.recursion.reset();
    }
    if (!a.input.empty()) std::tie(cfg.input_height, cfg.input_width) = parse_resolution(a.input);
    validate(cfg);
    const CostReport r =
        cost_report(cfg, cfg.input_height, cfg.input_width, method, "R=" + std::to_string(cfg.recursion));
    const CostTable t = emit_cost_table({r});
    out << t.text << "\n";
    if (a.breakdown) out << format_breakdown(r) << "\n";
    out << t.csv;
    return kExitOk;
}

// ---- gradcheck -----------------------------------------------------------

struct GradcheckArgs {
    std::string config;
    std::uint64_t seed = 1;
    std::string input = "8";
    std::string inject_fault;
    int threads = 1;
    std::string precision = "fp64";
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
    require_single_thread(a.threads);
    if (a.precision != "fp64") {
        throw ConfigError("gradcheck runs in fp64 only; --precision " + a.precision + " refused");
    }
    ModelConfig cfg = dt_tiny();
    if (!a.config.empty()) cfg = run_config_from(KeyValues::load(a.config)).model;
    std::tie(cfg.input_height, cfg.input_width) = parse_resolution(a.input);
    validate(cfg);

    GradCheckOptions opt;
    set_backward_fault(a.inject_fault);
    std::vector<GradCheckCase> cases;
    try {
        cases = run_gradcheck_suite(cfg, a.seed, opt);
    } catch (...) {
        set_backward_fault("");
        throw;
    }
    set_backward_fault("");

    bool ok = true;
    char line[160];
    std::snprintf(line, sizeof line, "%-22s %8s %12s  %s\n", "component", "coords", "max_rel_err", "status");
    out << line;
    for (const GradCheckCase& c : cases) {
        Index coords = 0;
        for (const GradCheckEntry& e : c.report.entries) coords += e.checked;
        const bool pass = c.report.passed(opt.tolerance);
        ok = ok && pass;
        std::snprintf(line, sizeof line, "%-22s %8lld %12.3e  %s\n", c.component.c_str(),
                      static_cast<long long>(coords), c.report.max_rel_error, pass ? "PASS" : "FAIL");
        out << line;
        if (!c.report.failure.empty()) out << "  " << c.report.failure << "\n";
        if (!pass) {
            for (const GradCheckEntry& e : c.report.entries) {
                if (e.max_rel_error < opt.tolerance) continue;
                out << "  " << e.name << "[" << e.worst_index << "] analytic " << e.analytic << " numeric "
                    << e.numeric << " rel " << e.max_rel_error << "\n";
            }
        }
    }
    out << "RESULT gradcheck=" << (ok ? "PASS" : "FAIL") << " tolerance=" << opt.tolerance << " step=" << opt.step
        << "\n";
    return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

RunConfig run_config_from(const KeyValues& kv) {
    RunConfig rc;
    rc.model = model_config_from(kv);
    TrainConfig& t = rc.train;
    t.epochs = static_cast<int>(kv.get_int("epochs", t.epochs));
    t.batch_size = kv.get_int("batch_size", t.batch_size);
    t.learning_rate = kv.get_double("learning_rate", t.learning_rate);
    t.momentum = kv.get_double("momentum", t.momentum);
    t.weight_decay = kv.get_double("weight_decay", t.weight_decay);
    if (kv.has("decay_norm_and_bias")) t.decay_norm_and_bias = kv.get_bool("decay_norm_and_bias");
    t.schedule = parse_schedule(kv.get_string("schedule", to_string(t.schedule)));
    t.augment = parse_augment_policy(kv.get_string("augment", to_string(t.augment)));
    rc.dataset = kv.get_string("dataset", rc.dataset);
    const std::int64_t seed = kv.get_int("seed", static_cast<std::int64_t>(rc.seed));
    if (seed < 0) throw ConfigError("seed must be >= 0");
    rc.seed = static_cast<std::uint64_t>(seed);
    rc.train_limit = kv.get_int("train_limit", rc.train_limit);
    rc.test_limit = kv.get_int("test_limit", rc.test_limit);
    rc.blobs_train = kv.get_int("blobs_train", rc.blobs_train);
    rc.blobs_test = kv.get_int("blobs_test", rc.blobs_test);
    const std::vector<std::string> unknown = kv.unused_keys();
    if (!unknown.empty()) {
        std::string list;
        for (const std::string& k : unknown) list += (list.empty() ? "" : ", ") + k;
        throw ConfigError("unknown config field(s): " + list);
    }
    if (rc.dataset != "cifar10" && rc.dataset != "cifar100" && rc.dataset != "mnist" && rc.dataset != "blobs") {
        throw ConfigError("dataset must be cifar10, cifar100, mnist or blobs, got `" + rc.dataset + "`");
    }
    if (rc.train_limit < 0 || rc.test_limit < 0) throw ConfigError("train_limit and test_limit must be >= 0");
    if (rc.blobs_train < 2 || rc.blobs_test < 1) throw ConfigError("blobs_train must be >= 2, blobs_test >= 1");
    return rc;
}

KeyValues run_config_to(const RunConfig& rc) {
    KeyValues kv;
    model_config_to(rc.model, kv);
    kv.set("epochs", std::to_string(rc.train.epochs));
    kv.set("batch_size", std::to_string(rc.train.batch_size));
    kv.set("learning_rate", format_double(rc.train.learning_rate));
    kv.set("momentum", format_double(rc.train.momentum));
    kv.set("weight_decay", format_double(rc.train.weight_decay));
    kv.set("decay_norm_and_bias", rc.train.decay_norm_and_bias ? "true" : "false");
    kv.set("schedule", to_string(rc.train.schedule));
    kv.set("augment", to_string(rc.train.augment));
    kv.set("dataset", rc.dataset);
    kv.set("seed", std::to_string(rc.seed));
    kv.set("train_limit", std::to_string(rc.train_limit));
    kv.set("test_limit", std::to_string(rc.test_limit));
    kv.set("blobs_train", std::to_string(rc.blobs_train));
    kv.set("blobs_test", std::to_string(rc.blobs_test));
    return kv;
}

std::string git_blob_sha1(const std::string& text) {
    const std::string header = "blob " + std::to_string(text.size()) + std::string(1, '\0');
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
        EVP_DigestUpdate(ctx, text.data(), text.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw InternalError("SHA-1 digest failed");
    }
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (unsigned int i = 0; i < len; ++i) {
        s += hex[digest[i] >> 4];
        s += hex[digest[i] & 15];
    }
    return s;
}

RunData load_run_data(const RunConfig& rc, const fs::path& data_dir) {
    RunData d;
    d.train = load_split(rc, data_dir, Split::Train, rc.train_limit);
    d.test = load_split(rc, data_dir, Split::Test, rc.test_limit);
    if (d.train.num_classes != dataset_classes(rc.dataset) && rc.dataset != "blobs") {
        throw InternalError("dataset class count mismatch");
    }
    d.train.stats = channel_stats(d.train);
    d.test.stats = d.train.stats;
    return d;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"DeepTraverse backbone: train, evaluate, count and verify", "dtrv"};
    app.require_subcommand(1);

    TrainArgs ta;
    CLI::App* train = app.add_subcommand("train", "Train a model and write a run directory");
    train->add_option("--config", ta.config, "Run config file (key = value)")->required();
    train->add_option("--data", ta.data, "Dataset directory (default: $DT_DATA_DIR)");
    train->add_option("--out", ta.out, "Run directory to create (must not exist)")->required();
    train->add_option("--seed", ta.seed, "Seed for initialization, shuffling and augmentation");
    train->add_option("--epochs", ta.epochs, "Epoch budget");
    train->add_option("--lr", ta.lr, "Initial learning rate");
    train->add_option("--batch-size", ta.batch_size, "Mini-batch size");
    train->add_option("--train-limit", ta.train_limit, "Keep only the first N training records (0 = all)");
    train->add_option("--test-limit", ta.test_limit, "Keep only the first N test records (0 = all)");
    train->add_option("--recursion", ta.recursion, "Recursion depth R for every stage");
    train->add_option("--augment", ta.augment, "Augmentation policy: none | flipcrop");
    train->add_option("--threads", ta.threads, "Worker threads (only 1 is supported)");
    train->add_option("--precision", ta.precision, "Floating-point precision (fp64)");

    EvalArgs ea;
    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", ea.data, "Dataset directory (default: $DT_DATA_DIR)");
    eval->add_option("--split", ea.split, "test | train");
    eval->add_option("--limit", ea.limit, "Evaluate only the first N records (0 = as trained)");
    eval->add_option("--batch-size", ea.batch_size, "Evaluation batch size");
    eval->add_option("--threads", ea.threads, "Worker threads (only 1 is supported)");
    eval->add_option("--precision", ea.precision, "Floating-point precision (fp64)");

    CountArgs ca;
    CLI::App* count = app.add_subcommand("count", "Print parameter and FLOP counts");
    count->add_option("--config", ca.config, "Config file (default: DT-Tiny)");
    count->add_option("--input", ca.input, "Input resolution <size> or <h>x<w> (default: from config)");
    count->add_option("--recursion", ca.recursion, "Recursion depth R for every stage");
    count->add_option("--method", ca.method, "Row label");
    count->add_flag("--breakdown", ca.breakdown, "Also print per-module rows");
    count->add_option("--threads", ca.threads, "Worker threads (only 1 is supported)");

    GradcheckArgs ga;
    CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
    gc->add_option("--config", ga.config, "Config file for the end-to-end model (default: DT-Tiny)");
    gc->add_option("--seed", ga.seed, "Seed for parameters and probe inputs");
    gc->add_option("--input", ga.input, "Input resolution of the end-to-end model check");
    gc->add_option("--inject-fault", ga.inject_fault,
                   "Perturb one op's backward rule (conv2d, batchnorm2d, relu, sigmoid, ...)");
    gc->add_option("--threads", ga.threads, "Worker threads (only 1 is supported)");
    gc->add_option("--precision", ga.precision, "Floating-point precision (fp64 only)");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitUsage;
    }

    try {
        if (*train) return cmd_train(ta, out, err);
        if (*eval) return cmd_eval(ea, out);
        if (*count) return cmd_count(ca, out);
        if (*gc) return cmd_gradcheck(ga, out);
    } catch (const NumericError& e) {
        err << "numerical abort: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const InputError& e) {
        err << "input error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const fs::filesystem_error& e) {
        err << "i/o error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace dt::cli
