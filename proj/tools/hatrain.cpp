// hatrain: experiment runner.
//
//   hatrain <command> [flags] [--config file.ini]
//
// Each command reads its keys from the INI section of the same name; flags
// win over file values. Exit status: 0 ok, 1 usage error, 2 runtime failure.
// See docs/cli.md for every key.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "hatrain/hatrain.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

unsigned cores() { return std::max(1u, std::thread::hardware_concurrency()); }

std::string default_out() {
    const char* env = std::getenv("HATRAIN_OUT");
    return env && *env ? env : "out";
}

// ---- shared option groups ---------------------------------------------------------

struct Common {
    std::string out = default_out();
    std::string name;
    std::uint64_t seed = 1;
    unsigned workers = 1;

    void add(CLI::App* app, const std::string& default_name, unsigned default_workers) {
        name = default_name;
        workers = default_workers;
        app->add_option("--out", out, "Output directory (default: $HATRAIN_OUT or ./out)");
        app->add_option("--name", name, "Stem for output files")->capture_default_str();
        app->add_option("--seed", seed, "Run seed")->capture_default_str();
        app->add_option("--workers", workers, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    }
};

struct DataOpts {
    std::string source = "blobs";
    std::string images, labels, test_images, test_labels;
    std::size_t blob_n = 4000;
    double spread = hat::BlobConfig{}.spread;
    std::uint64_t data_seed = hat::desk::kDataSeed;
    double test_fraction = 0.25;

    void add(CLI::App* app) {
        app->add_option("--data", source, "Data source")->check(CLI::IsMember({"blobs", "idx"}))->capture_default_str();
        app->add_option("--images", images, "IDX training images (data=idx)");
        app->add_option("--labels", labels, "IDX training labels (data=idx)");
        app->add_option("--test-images", test_images, "IDX test images (data=idx)");
        app->add_option("--test-labels", test_labels, "IDX test labels (data=idx)");
        app->add_option("--blob-n", blob_n, "Synthetic sample count")->capture_default_str();
        app->add_option("--blob-spread", spread, "Synthetic within-class spread")->capture_default_str();
        app->add_option("--data-seed", data_seed, "Synthetic data seed")->capture_default_str();
        app->add_option("--test-fraction", test_fraction, "Synthetic held-out fraction")->capture_default_str();
    }

    std::vector<std::string> inputs() const {
        if (source == "blobs") return {};
        return {images, labels, test_images, test_labels};
    }

    /// Loads data shaped for `arch`.
    hat::DataSplit load(const hat::Architecture& arch) const {
        if (source == "blobs") {
            hat::BlobConfig c;
            c.n = blob_n;
            c.dims = arch.input_size();
            c.classes = arch.classes();
            c.spread = spread;
            c.seed = data_seed;
            c.test_fraction = test_fraction;
            auto d = hat::synth_blobs(c);
            return {hat::with_shape(std::move(d.train), arch.spec().input_shape),
                    hat::with_shape(std::move(d.test), arch.spec().input_shape)};
        }
        if (images.empty() || labels.empty() || test_images.empty() || test_labels.empty())
            throw UsageError("data=idx needs --images, --labels, --test-images and --test-labels");
        auto tr = hat::idx_read(images, labels);
        auto te = hat::idx_read(test_images, test_labels);
        for (const auto* d : {&tr, &te})
            for (auto y : d->labels)
                if (y >= arch.classes()) throw hat::FormatError("idx: label exceeds model class count");
        return {hat::with_shape(std::move(tr), arch.spec().input_shape),
                hat::with_shape(std::move(te), arch.spec().input_shape)};
    }
};

/// Leading rows of the test split used to score flips.
hat::Batch eval_rows(const hat::Dataset& test, std::size_t n, bool full) {
    const std::size_t take = full ? test.size() : std::min(n, test.size());
    if (take == 0) throw hat::ArgumentError("evaluation set is empty");
    std::vector<std::size_t> ids(take);
    std::iota(ids.begin(), ids.end(), 0);
    return test.gather(ids);
}

// ---- manifest -----------------------------------------------------------------------

class Run {
public:
    Run(std::string command, CLI::App* sub, const Common& c) : command_(std::move(command)), sub_(sub), common_(c) {
        fs::create_directories(c.out);
    }

    fs::path path(const std::string& suffix) const { return fs::path(common_.out) / (common_.name + suffix); }

    /// `timed` marks files holding wall-clock measurements.
    void write(const std::string& suffix, const std::string& text, bool timed = false) {
        hat::write_text(path(suffix), text);
        outputs_.emplace_back(path(suffix), timed);
    }

    void write_bytes(const std::string& suffix, std::span<const unsigned char> bytes) {
        hat::write_file(path(suffix), bytes);
        outputs_.emplace_back(path(suffix), false);
    }

    void input(const std::string& p) {
        if (!p.empty()) inputs_.push_back(p);
    }

    void seed(const std::string& key, std::uint64_t v) { seeds_[key] = v; }

    /// Writes `name.manifest.json`. Outputs flagged `wall_time` carry timings;
    /// everything else reproduces byte for byte from the same inputs.
    void finish() {
        json m;
        m["command"] = command_;
        json cfg = json::object();
        std::istringstream in(sub_->config_to_str(true, false));
        for (std::string line; std::getline(in, line);) {
            const auto eq = line.find('=');
            if (eq == std::string::npos || line[0] == '#' || line[0] == '[') continue;
            const std::string key = line.substr(0, eq);
            if (key == "out" || key == "name") continue;  // recorded under outputs
            std::string v = line.substr(eq + 1);
            if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
                v = v.substr(1, v.size() - 2);
            cfg[key] = v;
        }
        m["config"] = cfg;
        m["seeds"] = seeds_;
        json ins = json::array();
        for (const auto& p : inputs_) {
            json e;
            e["path"] = p;
            if (fs::exists(p)) e["fnv1a64"] = digest(p);
            ins.push_back(e);
        }
        m["inputs"] = ins;
        m["output_dir"] = common_.out;
        json outs = json::array();
        for (const auto& [p, timed] : outputs_) {
            json e;
            e["path"] = p.filename().string();
            e["bytes"] = fs::file_size(p);
            e["fnv1a64"] = digest(p);
            if (timed) e["wall_time"] = true;
            outs.push_back(e);
        }
        m["outputs"] = outs;
        timing_["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
        m["timing"] = timing_;
        hat::write_text(path(".manifest.json"), m.dump(2) + "\n");
    }

    json& timing() { return timing_; }

    static std::string digest(const fs::path& p) {
        const auto b = hat::read_file(p);
        return hat::hex64(hat::fnv1a64(std::as_bytes(std::span<const unsigned char>(b))));
    }

private:
    std::string command_;
    CLI::App* sub_;
    const Common& common_;
    std::vector<std::pair<fs::path, bool>> outputs_;
    std::vector<std::string> inputs_;
    json seeds_ = json::object();
    json timing_ = json::object();
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};


std::string pct(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.2f%%", 100.0 * v);
    return b;
}

// ---- train ------------------------------------------------------------------------------

struct TrainCmd {
    Common common;
    DataOpts data;
    std::string model = "basenet";
    std::string preset = "none";
    std::vector<std::size_t> input_shape;
    std::size_t classes = 0;
    std::string optimizer = "sgd";
    double lr = 0.1, momentum = 0.8, lr_gamma = 0.25;
    std::size_t lr_step = 10, epochs = hat::desk::kEpochs, batch = 64;
    double alpha = 0.0;
    std::size_t probes = 50, trace_probes = 0;
    std::string gating = "median", normalization = "none", eigen_norm = "rayleigh";
    std::vector<std::size_t> hessian_layers;
    bool last_layer = false;

    void add(CLI::App* app) {
        common.add(app, "model", 1);
        data.add(app);
        app->add_option("--model", model, "Architecture")
            ->check(CLI::IsMember({"basenet", "lenet", "tinynet", "micronet"}))
            ->capture_default_str();
        app->add_option("--preset", preset, "Start from a named configuration; explicit keys still apply")
            ->check(CLI::IsMember({"none", "baseline", "hat", "desk-baseline", "desk-hat"}))
            ->capture_default_str();
        app->add_option("--input-shape", input_shape, "Override the model input shape, e.g. 1 28 28");
        app->add_option("--classes", classes, "Override the class count");
        app->add_option("--optimizer", optimizer)->check(CLI::IsMember({"sgd", "rmsprop"}))->capture_default_str();
        app->add_option("--lr", lr)->capture_default_str();
        app->add_option("--momentum", momentum)->capture_default_str();
        app->add_option("--lr-gamma", lr_gamma, "Step decay factor")->capture_default_str();
        app->add_option("--lr-step", lr_step, "Epochs per decay step (0 = constant)")->capture_default_str();
        app->add_option("--epochs", epochs)->capture_default_str();
        app->add_option("--batch-size", batch)->capture_default_str();
        app->add_option("--alpha", alpha, "Trace regularisation weight (0 = baseline)")->capture_default_str();
        app->add_option("--probes", probes, "Hutchinson probes per step")->capture_default_str();
        app->add_option("--trace-probes", trace_probes, "Probes entering the differentiable term (0 = all)")
            ->capture_default_str();
        app->add_option("--gating", gating)->check(CLI::IsMember({"median", "always", "average"}))->capture_default_str();
        app->add_option("--normalization", normalization)->check(CLI::IsMember({"none", "minmax"}))->capture_default_str();
        app->add_option("--eigen-norm", eigen_norm)->check(CLI::IsMember({"rayleigh", "norm"}))->capture_default_str();
        app->add_option("--hessian-layers", hessian_layers, "Layer ids for curvature (empty = all)");
        app->add_flag("--last-layer", last_layer, "Restrict curvature to the final parameterised layer");
        app->footer("Presets: baseline | hat (40-epoch defaults), desk-baseline | desk-hat (the desk campaign arms).");
    }

    hat::ModelSpec spec(std::size_t default_classes) const {
        std::vector<std::size_t> shape = input_shape;
        std::size_t k = classes ? classes : default_classes;
        if (model == "tinynet") {
            auto s = hat::zoo::tinynet();
            if (!shape.empty() || classes) s = hat::zoo::tinynet(shape.empty() ? 4 : hat::product(shape), 6, k ? k : 3);
            return s;
        }
        if (model == "micronet") return hat::zoo::micronet();
        if (shape.empty()) shape = hat::desk::input_shape();
        return model == "lenet" ? hat::zoo::lenet(shape, k ? k : 4) : hat::zoo::basenet(shape, k ? k : 4);
    }

    hat::TrainConfig config(CLI::App* app, const hat::Architecture& arch) const {
        hat::TrainConfig c;
        if (preset == "baseline") c = hat::baseline_config();
        else if (preset == "hat") c = hat::hat_config();
        else if (preset == "desk-baseline") c = hat::desk::baseline(common.seed);
        else if (preset == "desk-hat") c = hat::desk::hessian_aware(common.seed);
        const bool from_preset = preset != "none";
        auto set = [&](const char* key) { return !from_preset || app->count(key) > 0; };
        if (set("--optimizer")) c.optimizer = optimizer == "sgd" ? hat::OptimizerKind::sgd : hat::OptimizerKind::rmsprop;
        if (set("--lr")) c.lr = lr;
        if (set("--momentum")) c.momentum = c.optimizer == hat::OptimizerKind::sgd ? momentum : 0.0;
        if (set("--lr-gamma")) c.lr_gamma = lr_gamma;
        if (set("--lr-step")) c.lr_step_epochs = lr_step;
        if (set("--epochs")) c.epochs = epochs;
        if (set("--batch-size")) c.batch_size = batch;
        if (set("--alpha")) c.alpha = alpha;
        if (set("--probes")) c.probes = probes;
        if (set("--trace-probes")) c.trace_probes = trace_probes;
        if (set("--gating"))
            c.gating = gating == "median" ? hat::Gating::median_threshold
                       : gating == "always" ? hat::Gating::always
                                            : hat::Gating::running_average;
        if (set("--normalization"))
            c.normalization = normalization == "minmax" ? hat::Normalization::min_max : hat::Normalization::none;
        if (set("--eigen-norm")) c.eigen_norm = eigen_norm == "norm" ? hat::EigenNorm::norm : hat::EigenNorm::rayleigh;
        if (set("--hessian-layers")) c.hessian_layers = hessian_layers;
        if (last_layer) c.hessian_layers = hat::last_layers(arch, 1);
        c.seed = common.seed;
        for (std::size_t li : c.hessian_layers)
            if (li >= arch.layers().size() || !arch.layer(li).has_params())
                throw UsageError("--hessian-layers: layer " + std::to_string(li) + " has no parameters");
        try {
            c.validate();
        } catch (const hat::ArgumentError& e) {
            throw UsageError(e.what());
        }
        return c;
    }

    int run(CLI::App* app) {
        std::size_t default_classes = 0;
        if (data.source == "idx" && classes == 0) default_classes = 10;
        const auto arch = std::make_shared<const hat::Architecture>(spec(default_classes));
        const hat::DataSplit d = data.load(*arch);
        const hat::TrainConfig cfg = config(app, *arch);

        Run run("train", app, common);
        for (const auto& p : data.inputs()) run.input(p);
        run.seed("seed", cfg.seed);
        run.seed("data_seed", data.data_seed);

        const auto res = hat::train(arch->spec(), d.train, cfg, &d.test);

        std::string steps = "epoch,step,loss,trace,gated,accuracy\n";
        for (const auto& s : res.steps)
            steps += hat::csv_row(s.epoch, s.step, s.loss, s.trace, static_cast<int>(s.regularized), s.accuracy);
        std::string epochs = "epoch,loss,trace,regularized_fraction,train_accuracy,test_accuracy\n";
        std::string timing = "epoch,wall_ms\n";
        for (const auto& e : res.epochs) {
            epochs += hat::csv_row(e.epoch, e.loss, e.trace, e.regularized_fraction, e.train_accuracy, e.test_accuracy);
            timing += hat::csv_row(e.epoch, e.wall_ms);
        }
        run.write_bytes(".hatm", hat::serialize(res.model));
        run.write("_steps.csv", steps);
        run.write("_epochs.csv", epochs);
        run.write("_epoch_times.csv", timing, true);
        run.finish();

        const auto& last = res.epochs.back();
        std::printf("%s: %zu params, %zu epochs, train %.4f, test %.4f -> %s\n", model.c_str(), arch->param_count(),
                    res.epochs.size(), last.train_accuracy, last.test_accuracy, run.path(".hatm").string().c_str());
        return 0;
    }
};

// ---- sweep --------------------------------------------------------------------------------

hat::SweepStrategy parse_strategy(const std::string& s) {
    if (s == "all") return hat::SweepStrategy::all_bits;
    if (s == "exponent-only") return hat::SweepStrategy::exponent_only;
    if (s == "msb-only") return hat::SweepStrategy::msb_only;
    return hat::SweepStrategy::sampled;
}

struct SweepCmd {
    Common common;
    DataOpts data;
    std::string model;
    std::string strategy = "exponent-only";
    double fraction = 0.1;
    std::vector<std::size_t> layers;
    std::size_t eval_size = hat::desk::kEvalSize;
    bool full_eval = false;
    double threshold = hat::kErraticThreshold;

    void add(CLI::App* app) {
        common.add(app, "sweep", cores());
        data.add(app);
        app->add_option("--model", model, "Model file (.hatm)")->required();
        app->add_option("--strategy", strategy)
            ->check(CLI::IsMember({"all", "exponent-only", "msb-only", "sampled"}))
            ->capture_default_str();
        app->add_option("--fraction", fraction, "Pair fraction for strategy=sampled")->capture_default_str();
        app->add_option("--layers", layers, "Layer ids to sweep (empty = all)");
        app->add_option("--eval-size", eval_size, "Leading test rows used as the eval set")->capture_default_str();
        app->add_flag("--full-eval", full_eval, "Score on the whole test split");
        app->add_option("--threshold", threshold, "RAD above which a parameter is erratic")->capture_default_str();
    }

    int run(CLI::App* app) {
        const auto m = hat::load(model);
        const auto d = data.load(m.arch());
        const hat::Batch ev = eval_rows(d.test, eval_size, full_eval);
        hat::SweepPlan plan;
        plan.strategy = parse_strategy(strategy);
        plan.fraction = fraction;
        plan.seed = common.seed;
        plan.layers = layers;

        Run run("sweep", app, common);
        run.input(model);
        for (const auto& p : data.inputs()) run.input(p);
        run.seed("seed", common.seed);
        run.seed("data_seed", data.data_seed);

        const auto t0 = std::chrono::steady_clock::now();
        const auto rec = hat::sweep(m, plan, ev.view(), common.workers);
        run.timing()["sweep_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        const auto c = hat::census(rec, threshold);
        const auto h = hat::histogram(rec);
        const auto bp = hat::bit_position_hist(rec, threshold);
        const auto pt = hat::perturb_threshold(rec, threshold);

        std::string summary = "metric,value\n";
        summary += hat::csv_row(std::string("clean_accuracy"), hat::CachedEvaluator(m, ev.view()).clean_accuracy());
        summary += hat::csv_row(std::string("flips"), rec.size());
        summary += hat::csv_row(std::string("swept_params"), c.swept);
        summary += hat::csv_row(std::string("erratic_params"), c.erratic);
        summary += hat::csv_row(std::string("erratic_ratio"), c.ratio);
        summary += hat::csv_row(std::string("mass_90_100"), h.mass_from(0.9));
        summary += hat::csv_row(std::string("exponent_msb_share"), bp.msb_share());
        summary += hat::csv_row(std::string("perturb_min"), pt.min);
        summary += hat::csv_row(std::string("perturb_median"), pt.median);
        run.write("_flips.csv", hat::flips_csv(rec));
        run.write("_histogram.csv", hat::histogram_csv(h));
        run.write("_bits.csv", hat::bit_position_csv(bp));
        run.write("_summary.csv", summary);
        std::string ids = "param_id\n";
        for (auto id : c.erratic_ids) ids += std::to_string(id) + "\n";
        run.write("_erratic.csv", ids);
        run.finish();
        std::printf("%zu flips, %zu/%zu erratic (%s), %zu in [0.90,1.00], exponent-MSB share %s\n", rec.size(),
                    c.erratic, c.swept, pct(c.ratio).c_str(), h.mass_from(0.9), pct(bp.msb_share()).c_str());
        return 0;
    }
};

// ---- attack -----------------------------------------------------------------------------

struct AttackCmd {
    Common common;
    DataOpts data;
    std::string model;
    hat::AttackConfig cfg;
    bool no_sign = false;
    std::size_t attack_size = hat::desk::kAttackSize, eval_size = hat::desk::kEvalSize;

    void add(CLI::App* app) {
        common.add(app, "attack", cores());
        data.add(app);
        app->add_option("--model", model, "Model file (.hatm)")->required();
        app->add_option("--target-rad", cfg.target_rad)->capture_default_str();
        app->add_option("--budget", cfg.budget, "Maximum flips")->capture_default_str();
        app->add_option("--k", cfg.k, "Candidates per layer")->capture_default_str()->check(CLI::PositiveNumber);
        app->add_flag("--no-sign", no_sign, "Only try the exponent MSB");
        app->add_option("--attack-size", attack_size, "Leading training rows used as the attack batch")
            ->capture_default_str();
        app->add_option("--eval-size", eval_size, "Leading test rows used as the eval set")->capture_default_str();
    }

    int run(CLI::App* app) {
        const auto m = hat::load(model);
        const auto d = data.load(m.arch());
        const hat::Batch ab = eval_rows(d.train, attack_size, false);
        const hat::Batch ev = eval_rows(d.test, eval_size, false);
        cfg.include_sign = !no_sign;
        cfg.workers = common.workers;

        Run run("attack", app, common);
        run.input(model);
        for (const auto& p : data.inputs()) run.input(p);
        run.seed("data_seed", data.data_seed);
        const auto res = hat::progressive_search(m, ab.view(), ev.view(), cfg);
        std::string summary = "metric,value\n";
        summary += hat::csv_row(std::string("clean_accuracy"), res.clean_accuracy);
        summary += hat::csv_row(std::string("final_accuracy"), res.final_accuracy);
        summary += hat::csv_row(std::string("final_rad"), res.final_rad());
        summary += hat::csv_row(std::string("flips"), res.flips());
        summary += hat::csv_row(std::string("reached_target"), static_cast<int>(res.reached_target));
        run.write("_transcript.csv", hat::attack_csv(res));
        run.write("_summary.csv", summary);
        run.write_bytes("_attacked.hatm", hat::serialize(res.attacked));
        run.finish();
        std::printf("%zu flips, accuracy %.4f -> %.4f (RAD %.3f), target %s\n", res.flips(), res.clean_accuracy,
                    res.final_accuracy, res.final_rad(), res.reached_target ? "reached" : "not reached");
        return 0;
    }
};

// ---- defend -----------------------------------------------------------------------------

struct DefendCmd {
    Common common;
    DataOpts data;
    std::string model;
    std::vector<std::size_t> groups{8, 16, 32, 64};
    std::string coverage = "all";
    std::string erratic;
    std::size_t flips = 15;
    std::size_t eval_size = hat::desk::kEvalSize;
    std::string sidecar, golden;
    bool repair = false;

    void add(CLI::App* app) {
        common.add(app, "defend", 1);
        data.add(app);
        app->add_option("--model", model, "Model file (.hatm)")->required();
        app->add_option("--groups", groups, "Group sizes G")->capture_default_str();
        app->add_option("--coverage", coverage)->check(CLI::IsMember({"all", "erratic"}))->capture_default_str();
        app->add_option("--erratic", erratic, "Erratic id list from `sweep` (coverage=erratic)");
        app->add_option("--flips", flips, "Random covered flips to inject")->capture_default_str();
        app->add_option("--eval-size", eval_size)->capture_default_str();
        app->add_option("--sidecar", sidecar, "Check the model against this stored table instead");
        app->add_option("--golden", golden, "Golden store paired with --sidecar");
        app->add_flag("--repair", repair, "With --sidecar: write the repaired model");
    }

    std::vector<std::size_t> erratic_ids() const {
        if (coverage != "erratic") return {};
        if (erratic.empty()) throw UsageError("coverage=erratic needs --erratic");
        const auto t = hat::read_csv(erratic);
        const auto col = t.column("param_id");
        std::vector<std::size_t> ids;
        for (const auto& r : t.rows) ids.push_back(std::stoull(r[col]));
        return ids;
    }

    int check(CLI::App* app) {
        if (golden.empty()) throw UsageError("--sidecar needs --golden");
        auto m = hat::load(model);
        const auto table = hat::load_checksums(sidecar, golden);
        Run run("defend", app, common);
        run.input(model);
        run.input(sidecar);
        run.input(golden);
        const auto bad = hat::detect(m, table, common.workers);
        std::string out = "group,first_param,count\n";
        for (auto g : bad) out += hat::csv_row(g, table.covered[table.groups[g].first], table.groups[g].count);
        run.write("_detected.csv", out);
        if (repair) {
            hat::recover(m, table, bad);
            run.write_bytes("_repaired.hatm", hat::serialize(m));
        }
        run.finish();
        std::printf("%zu corrupted group(s)%s\n", bad.size(), repair ? ", repaired" : "");
        return 0;
    }

    int run(CLI::App* app) {
        if (!sidecar.empty()) return check(app);
        if (groups.empty()) throw UsageError("--groups: need at least one size");
        const auto m = hat::load(model);
        const auto d = data.load(m.arch());
        const hat::Batch ev = eval_rows(d.test, eval_size, false);
        const auto ids = erratic_ids();
        const hat::Coverage cov = coverage == "all" ? hat::Coverage::all : hat::Coverage::erratic;

        Run run("defend", app, common);
        run.input(model);
        if (!erratic.empty()) run.input(erratic);
        run.seed("seed", common.seed);

        const double clean = hat::accuracy(m, ev.view());
        std::vector<hat::OverheadRow> rows;
        std::string trials = "G,flips,detected_groups,corrupted_accuracy,recovered_accuracy,byte_identical\n";
        for (std::size_t g : groups) {
            const auto table = hat::build_checksums(m, g, cov, ids);
            if (g == groups.front()) {
                run.write_bytes("_G" + std::to_string(g) + ".sidecar", hat::serialize_sidecar(table));
                run.write_bytes("_G" + std::to_string(g) + ".golden", hat::serialize_golden(table));
            }
            hat::ParamStore hit = m;
            hat::SplitMix64 rng(hat::substream(common.seed, g)());
            for (std::size_t f = 0; f < flips && !table.covered.empty(); ++f) {
                const auto id = table.covered[rng.below(table.covered.size())];
                hit.set_bits(id, hat::flip_bit(hit.bits(id), static_cast<int>(rng.below(32))));
            }
            const double corrupted = hat::accuracy(hit, ev.view());
            const auto bad = hat::detect(hit, table, common.workers);
            hat::recover(hit, table, bad);
            const double recovered = hat::accuracy(hit, ev.view());
            trials += hat::csv_row(g, flips, bad.size(), corrupted, recovered, static_cast<int>(hit == m));
            const double ms = hat::scan_ms(m, table);
            rows.push_back({g, table.space_bytes(), ms, recovered});
        }
        run.write("_overhead.csv", hat::overhead_csv(rows), true);
        run.write("_trials.csv", trials);
        run.finish();
        std::printf("clean accuracy %.4f; %zu group size(s) tested, see %s\n", clean, groups.size(),
                    run.path("_trials.csv").string().c_str());
        return 0;
    }
};

// ---- landscape --------------------------------------------------------------------------

struct LandscapeCmd {
    Common common;
    DataOpts data;
    std::string model;
    std::optional<std::size_t> layer;
    double extent = 3.0;
    std::size_t steps = 21, batch = hat::desk::kEvalSize;
    std::uint64_t seed1 = 1, seed2 = 2;

    void add(CLI::App* app) {
        common.add(app, "landscape", cores());
        data.add(app);
        app->add_option("--model", model, "Model file (.hatm)")->required();
        app->add_option("--layer", layer, "Layer id (default: last parameterised layer)");
        app->add_option("--extent", extent)->capture_default_str();
        app->add_option("--steps", steps, "Grid points per axis (odd)")->capture_default_str();
        app->add_option("--batch-size", batch, "Leading test rows scored per cell")->capture_default_str();
        app->add_option("--seed1", seed1, "Direction seed, first axis")->capture_default_str();
        app->add_option("--seed2", seed2, "Direction seed, second axis")->capture_default_str();
    }

    int run(CLI::App* app) {
        const auto m = hat::load(model);
        const auto d = data.load(m.arch());
        const hat::Batch b = eval_rows(d.test, batch, false);
        const std::size_t li = layer.value_or(m.arch().param_layers().back());
        Run run("landscape", app, common);
        run.input(model);
        run.seed("seed1", seed1);
        run.seed("seed2", seed2);
        const auto g = hat::landscape(m, li, b.view(), extent, steps, seed1, seed2, common.workers);
        run.write("_grid.csv", hat::landscape_csv(g));
        std::string summary = "metric,value\n";
        summary += hat::csv_row(std::string("layer"), li);
        summary += hat::csv_row(std::string("center_loss"), g.at(g.center(), g.center()));
        summary += hat::csv_row(std::string("center_curvature"), hat::center_curvature(g));
        run.write("_summary.csv", summary);
        run.finish();
        std::printf("layer %zu: centre loss %.6g, centre curvature %.6g\n", li, g.at(g.center(), g.center()),
                    hat::center_curvature(g));
        return 0;
    }
};

// ---- prune / quantize --------------------------------------------------------------------

struct PruneCmd {
    Common common;
    DataOpts data;
    std::string model;
    std::vector<double> sparsities{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::size_t eval_size = hat::desk::kEvalSize;
    std::optional<double> save;

    void add(CLI::App* app) {
        common.add(app, "prune", 1);
        data.add(app);
        app->add_option("--model", model, "Model file (.hatm)")->required();
        app->add_option("--sparsities", sparsities)->capture_default_str();
        app->add_option("--eval-size", eval_size)->capture_default_str();
        app->add_option("--save", save, "Also write the model pruned at this sparsity");
    }

    int run(CLI::App* app) {
        const auto m = hat::load(model);
        const auto d = data.load(m.arch());
        const hat::Batch ev = eval_rows(d.test, eval_size, false);
        for (double s : sparsities)
            if (!(s >= 0.0 && s <= 1.0)) throw UsageError("--sparsities: values must be in [0,1]");
        Run run("prune", app, common);
        run.input(model);
        const auto curve = hat::prune_sweep(m, sparsities, ev.view());
        run.write("_curve.csv", hat::prune_csv(curve));
        if (save) run.write_bytes("_pruned.hatm", hat::serialize(hat::prune(m, *save).model));
        run.finish();
        const double clean = hat::accuracy(m, ev.view());
        std::printf("clean %.4f; accuracy stays within 10 points up to sparsity %.2f\n", clean,
                    hat::retained_sparsity(curve, clean));
        return 0;
    }
};

struct QuantizeCmd {
    Common common;
    DataOpts data;
    std::string model;
    std::string mode = "uniform";
    int bits = 8;
    std::size_t eval_size = hat::desk::kEvalSize;

    void add(CLI::App* app) {
        common.add(app, "quantize", 1);
        data.add(app);
        app->add_option("--model", model, "Model file (.hatm)")->required();
        app->add_option("--mode", mode)->check(CLI::IsMember({"uniform", "mixed"}))->capture_default_str();
        app->add_option("--bits", bits, "Bit width for mode=uniform")->check(CLI::IsMember({2, 4, 8}))->capture_default_str();
        app->add_option("--eval-size", eval_size)->capture_default_str();
    }

    int run(CLI::App* app) {
        const auto m = hat::load(model);
        const auto d = data.load(m.arch());
        const hat::Batch ev = eval_rows(d.test, eval_size, false);
        hat::QuantConfig qc;
        qc.mode = mode == "uniform" ? hat::QuantMode::uniform : hat::QuantMode::mixed;
        qc.bits = bits;
        Run run("quantize", app, common);
        run.input(model);
        const auto view = ev.view();
        const auto r = hat::quantize(m, qc, &view);
        const double clean = hat::accuracy(m, view);
        std::string summary = "metric,value\n";
        summary += hat::csv_row(std::string("clean_accuracy"), clean);
        summary += hat::csv_row(std::string("quantized_accuracy"), r.accuracy);
        run.write("_layers.csv", hat::quant_csv(r));
        run.write("_summary.csv", summary);
        run.write_bytes("_quantized.hatm", hat::serialize(r.model));
        run.finish();
        std::printf("accuracy %.4f -> %.4f\n", clean, r.accuracy);
        return 0;
    }
};

// ---- report ---------------------------------------------------------------------------------

struct FlipSummary {
    bool empty = true;
    double ratio = 0.0;
    std::size_t erratic = 0, swept = 0, flips = 0;
    hat::RadHistogram hist;
};

FlipSummary summarize_flips(const std::string& path) {
    const auto t = hat::read_csv(path);
    const auto rec = hat::parse_flips_csv(t);
    FlipSummary s;
    s.empty = rec.empty();
    const auto c = hat::census(rec);
    s.ratio = c.ratio;
    s.erratic = c.erratic;
    s.swept = c.swept;
    s.flips = rec.size();
    s.hist = hat::histogram(rec);
    return s;
}

std::optional<std::size_t> attack_flips(const std::string& path) {
    const auto t = hat::read_csv(path);
    const std::vector<std::string> want = {"iteration", "param_id", "bit", "loss_before", "loss_after", "acc_after"};
    if (t.header != want) throw hat::FormatError(path + ": not an attack transcript");
    return t.rows.size();
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ReportCmd {
    Common common;
    std::vector<std::string> compare, baseline, hat_runs, attack_base, attack_hat, overhead;

    void add(CLI::App* app) {
        common.add(app, "report", 1);
        app->add_option("--compare", compare, "Baseline and HAT flip CSVs")->expected(2);
        app->add_option("--baseline", baseline, "Baseline flip CSVs, one per seed");
        app->add_option("--hat", hat_runs, "HAT flip CSVs, paired with --baseline");
        app->add_option("--attack-baseline", attack_base, "Baseline attack transcripts");
        app->add_option("--attack-hat", attack_hat, "HAT attack transcripts");
        app->add_option("--overhead", overhead, "Defense overhead CSVs to collate");
    }

    int run(CLI::App* app) {
        if (!compare.empty()) {
            baseline.insert(baseline.begin(), compare[0]);
            hat_runs.insert(hat_runs.begin(), compare[1]);
        }
        if (baseline.size() != hat_runs.size()) throw UsageError("report: baseline and HAT lists differ in length");
        if (attack_base.size() != attack_hat.size()) throw UsageError("report: attack lists differ in length");

        Run run("report", app, common);
        std::vector<FlipSummary> b, h;
        for (const auto& p : baseline) run.input(p), b.push_back(summarize_flips(p));
        for (const auto& p : hat_runs) run.input(p), h.push_back(summarize_flips(p));

        std::string csv = "section,metric,baseline,hat,delta\n";
        std::string md = "# Resilience comparison\n\n";
        auto row = [&](const std::string& sec, const std::string& metric, std::optional<double> x,
                       std::optional<double> y, bool reduction) {
            if (!x || !y) {
                csv += sec + "," + metric + ",no data,no data,no data\n";
                md += "| " + metric + " | no data | no data | no data |\n";
                return;
            }
            const double dl = reduction ? *x - *y : *y - *x;
            csv += hat::csv_row(sec, metric, *x, *y, dl);
            char line[256];
            std::snprintf(line, sizeof line, "| %s | %.6g | %.6g | %.6g |\n", metric.c_str(), *x, *y, dl);
            md += line;
        };

        auto med = [](const std::vector<FlipSummary>& v, auto f) -> std::optional<double> {
            std::vector<double> xs;
            for (const auto& s : v)
                if (!s.empty) xs.push_back(f(s));
            if (xs.empty()) return std::nullopt;
            return median_of(xs);
        };

        md += "Pairs: " + std::to_string(b.size()) + ". Values are medians over pairs. Delta is baseline minus HAT"
              " (positive = HAT better) except where noted.\n\n";
        md += "## Erratic parameters\n\n| metric | baseline | HAT | delta |\n|---|---|---|---|\n";
        row("census", "erratic_ratio", med(b, [](auto& s) { return s.ratio; }), med(h, [](auto& s) { return s.ratio; }), true);
        row("census", "erratic_params", med(b, [](auto& s) { return double(s.erratic); }),
            med(h, [](auto& s) { return double(s.erratic); }), true);
        row("census", "swept_params", med(b, [](auto& s) { return double(s.swept); }),
            med(h, [](auto& s) { return double(s.swept); }), true);

        md += "\n## RAD distribution (flips per bin)\n\n| bin | baseline | HAT | delta |\n|---|---|---|---|\n";
        row("histogram", "underflow", med(b, [](auto& s) { return double(s.hist.underflow); }),
            med(h, [](auto& s) { return double(s.hist.underflow); }), true);
        for (std::size_t k = 0; k < hat::RadHistogram::kBins; ++k) {
            char name[32];
            std::snprintf(name, sizeof name, "rad_%.2f_%.2f", 0.05 * k, 0.05 * (k + 1));
            row("histogram", name, med(b, [k](auto& s) { return double(s.hist.bins[k]); }),
                med(h, [k](auto& s) { return double(s.hist.bins[k]); }), true);
        }
        auto hb = med(b, [](auto& s) { return double(s.hist.mass_from(0.9)); });
        auto hh = med(h, [](auto& s) { return double(s.hist.mass_from(0.9)); });
        row("histogram", "mass_90_100", hb, hh, true);
        md += "\n";
        if (hb && hh && *hb > 0) {
            csv += hat::csv_row(std::string("histogram"), std::string("mass_90_100_ratio"), *hb, *hh, *hh / *hb);
            char line[160];
            std::snprintf(line, sizeof line, "Flips in [0.90,1.00]: HAT/baseline = %.3f.\n\n", *hh / *hb);
            md += line;
        } else {
            csv += "histogram,mass_90_100_ratio,no data,no data,no data\n";
            md += "Flips in [0.90,1.00]: no data for a ratio.\n\n";
        }

        if (!attack_base.empty()) {
            std::vector<double> fb, fh;
            for (const auto& p : attack_base) run.input(p), fb.push_back(static_cast<double>(*attack_flips(p)));
            for (const auto& p : attack_hat) run.input(p), fh.push_back(static_cast<double>(*attack_flips(p)));
            md += "## Progressive attack (delta = HAT minus baseline)\n\n| metric | baseline | HAT | delta |\n|---|---|---|---|\n";
            row("attack", "flips_to_target", median_of(fb), median_of(fh), false);
            md += "\n";
        }
        if (!overhead.empty()) {
            md += "## Defense overhead\n\n| file | G | space bytes | scan ms | recovered accuracy |\n|---|---|---|---|---|\n";
            for (const auto& p : overhead) {
                run.input(p);
                const auto t = hat::read_csv(p);
                const std::vector<std::size_t> cols = {t.column("G"), t.column("space_bytes"), t.column("scan_ms"),
                                                       t.column("recovered_accuracy")};
                for (const auto& r : t.rows) {
                    md += "| " + fs::path(p).filename().string();
                    for (auto c : cols) md += " | " + r[c];
                    md += " |\n";
                    csv += "overhead," + fs::path(p).filename().string() + "_G" + r[cols[0]] + "," + r[cols[1]] + "," +
                           r[cols[2]] + "," + r[cols[3]] + "\n";
                }
            }
        }
        run.write(".md", md);
        run.write(".csv", csv);
        run.finish();
        std::cout << md;
        return 0;
    }
};

/// Every configurable key of `sub`, for usage errors.
std::string valid_keys(const CLI::App* sub) {
    std::string out;
    for (const CLI::Option* o : sub->get_options()) {
        const std::string n = o->get_single_name();
        if (n.empty() || n == "help" || n == "config") continue;
        out += "  " + n + "\n";
    }
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app("hatrain: Hessian-aware training and bit-flip resilience experiments");
    app.set_config("--config", "", "INI file with one [section] per command");
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.require_subcommand(1);
    app.fallthrough();

    TrainCmd train;
    SweepCmd sweep;
    AttackCmd attack;
    DefendCmd defend;
    LandscapeCmd landscape;
    PruneCmd prune;
    QuantizeCmd quantize;
    ReportCmd report;

    auto* s_train = app.add_subcommand("train", "Train a model (baseline when alpha = 0)");
    auto* s_sweep = app.add_subcommand("sweep", "Single-bit flip sweep over a saved model");
    auto* s_attack = app.add_subcommand("attack", "Progressive multi-bit attack");
    auto* s_defend = app.add_subcommand("defend", "Group checksum detection and recovery");
    auto* s_land = app.add_subcommand("landscape", "2-D loss grid around a saved model");
    auto* s_prune = app.add_subcommand("prune", "Global magnitude pruning sweep");
    auto* s_quant = app.add_subcommand("quantize", "Layer-wise symmetric weight quantization");
    auto* s_report = app.add_subcommand("report", "Paired summary of sweep and attack outputs");
    train.add(s_train);
    sweep.add(s_sweep);
    attack.add(s_attack);
    defend.add(s_defend);
    landscape.add(s_land);
    prune.add(s_prune);
    quantize.add(s_quant);
    report.add(s_report);

    const std::vector<CLI::App*> subs = {s_train, s_sweep, s_attack, s_defend, s_land, s_prune, s_quant, s_report};
    auto usage = [&](const std::string& msg) {
        std::cerr << "error: " << msg << "\n";
        for (const CLI::App* s : subs) {
            if (s->parsed() || std::none_of(subs.begin(), subs.end(), [](const CLI::App* x) { return x->parsed(); }))
                std::cerr << "valid keys for [" << s->get_name() << "]:\n" << valid_keys(s);
        }
        return 1;
    };

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return usage(e.what());
    }

    try {
        if (s_train->parsed()) return train.run(s_train);
        if (s_sweep->parsed()) return sweep.run(s_sweep);
        if (s_attack->parsed()) return attack.run(s_attack);
        if (s_defend->parsed()) return defend.run(s_defend);
        if (s_land->parsed()) return landscape.run(s_land);
        if (s_prune->parsed()) return prune.run(s_prune);
        if (s_quant->parsed()) return quantize.run(s_quant);
        if (s_report->parsed()) return report.run(s_report);
    } catch (const UsageError& e) {
        return usage(e.what());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
