#include "stone/cli.hpp"

#include "stone/config.hpp"
#include "stone/datasets.hpp"
#include "stone/error.hpp"
#include "stone/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#ifndef STONE_DATA_DIR
#define STONE_DATA_DIR "data"
#endif

namespace stone::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kDataDir = STONE_DATA_DIR;

struct RunLayout {
    fs::path root;
    fs::path checkpoints() const { return root / "checkpoints"; }
    fs::path logs() const { return root / "logs"; }
    fs::path reports() const { return root / "reports"; }

    void create() const
    {
        std::error_code ec;
        for (const fs::path& d : {root, checkpoints(), logs(), reports()}) {
            fs::create_directories(d, ec);
            if (ec) {
                throw DataError("cannot create directory " + d.string() + ": " + ec.message());
            }
        }
    }
};

void write_json(const fs::path& path, const json& j)
{
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << std::setw(2) << j << '\n';
}

json loss_json(const LossBreakdown& l)
{
    return {{"total", l.total}, {"l_ab", l.l_ab}, {"l_aa", l.l_aa}, {"l_ba", l.l_ba}, {"bce", l.bce}};
}

RunConfig base_config(const std::string& config_path)
{
    return config_path.empty() ? RunConfig{} : load_run_config(config_path);
}

void apply_seed(RunConfig& cfg, std::optional<std::uint64_t> seed)
{
    if (seed) {
        cfg.seed = *seed;
        cfg.training.seed = *seed;
        cfg.synth.seed = *seed;
    }
}

std::vector<TrainingTrack> load_tracks(const DatasetManifest& manifest, const CqtParams& frontend, bool need_labels,
                                       std::ostream& err)
{
    std::vector<TrainingTrack> tracks;
    tracks.reserve(manifest.entries.size());
    const ConstantQTransform cqt(frontend);
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const ManifestEntry& e = manifest.entries[i];
        if (need_labels && !e.label) {
            throw DataError("manifest entry " + e.path + " has no key label");
        }
        const AudioClip clip = load_audio(manifest.resolve(e), frontend.sample_rate);
        TrainingTrack t;
        t.id = e.path;
        t.label = e.label;
        try {
            t.cqt = cqt.compute(clip.samples);
        } catch (const std::invalid_argument& ex) {
            throw DataError(e.path + ": " + ex.what());
        }
        tracks.push_back(std::move(t));
        if ((i + 1) % 500 == 0) {
            err << "  loaded " << (i + 1) << "/" << manifest.entries.size() << " tracks\n";
        }
    }
    return tracks;
}

/// load_model plus the checks decoding needs.
Model load_usable_model(const fs::path& path, CqtParams& frontend)
{
    Model model = load_model(path, &frontend);
    if (model.structured() && model.norm.updates == 0) {
        throw DataError(path.string() + ": structured model has no normalization statistics; train it first");
    }
    return model;
}

DatasetManifest load_split(const fs::path& path, const std::string& split)
{
    DatasetManifest m = load_manifest(path);
    return split.empty() ? m : m.filter_split(split);
}

// ---------------------------------------------------------------------------

struct SynthOptions {
    std::string config;
    std::string out_dir;
    std::optional<int> tracks;
    std::optional<std::uint64_t> seed;
    std::optional<double> cadential_share;
    std::optional<std::string> key_distribution;
    std::string split = "train";
    std::string calibration_clip;
};

int cmd_synth(const SynthOptions& o, std::ostream& out)
{
    if (!o.calibration_clip.empty()) {
        write_wav(o.calibration_clip, calibration_clip());
        out << o.calibration_clip << '\n';
        return kExitOk;
    }
    RunConfig cfg = base_config(o.config);
    apply_seed(cfg, o.seed);
    if (o.tracks) {
        cfg.synth.n_tracks = *o.tracks;
    }
    if (o.cadential_share) {
        cfg.synth.cadential_share = *o.cadential_share;
    }
    if (o.key_distribution) {
        json j = to_json(cfg.synth);
        j["key_distribution"] = *o.key_distribution;
        cfg.synth = synth_spec_from_json(j);
    }
    cfg.synth.validate();
    const fs::path dir = o.out_dir.empty() ? cfg.output_dir / "corpus" : fs::path(o.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw DataError("output directory " + dir.string() + " is not writable: " + ec.message());
    }
    synthesize_corpus(cfg.synth, dir, o.split);
    json captured = to_json(cfg);
    captured["synth"] = to_json(cfg.synth);
    write_json(dir / "synth_config.json", captured);
    out << (dir / "manifest.csv").string() << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainOptions {
    std::string config;
    std::string output;
    std::optional<std::string> mode;
    std::optional<int> epochs;
    std::optional<double> label_fraction;
    std::optional<std::uint64_t> seed;
    std::optional<int> batch_size;
    std::optional<double> lr;
    std::optional<int> omega;
    std::string unlabeled;
    std::string labeled;
    std::string resume;
};

int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err)
{
    RunConfig cfg = base_config(o.config);
    apply_seed(cfg, o.seed);
    if (!o.output.empty()) {
        cfg.output_dir = o.output;
    }
    if (o.mode) {
        cfg.training.mode = parse_train_mode(*o.mode);
        cfg.match_heads_to_mode();
    }
    if (o.epochs) {
        cfg.training.epochs = *o.epochs;
    }
    if (o.label_fraction) {
        cfg.training.label_fraction = *o.label_fraction;
    }
    if (o.batch_size) {
        cfg.training.batch_size = *o.batch_size;
    }
    if (o.lr) {
        cfg.training.lr = *o.lr;
    }
    if (o.omega) {
        cfg.training.omega = *o.omega;
    }
    if (!o.unlabeled.empty()) {
        cfg.unlabeled_manifest = o.unlabeled;
    }
    if (!o.labeled.empty()) {
        cfg.labeled_manifest = o.labeled;
    }

    std::optional<Trainer> trainer;
    if (!o.resume.empty()) {
        trainer.emplace(Trainer::load(o.resume));
        cfg.training = trainer->config();
        cfg.chromanet = trainer->model().net.config();
        cfg.frontend = trainer->frontend();
    }
    cfg.validate();
    const TrainMode mode = cfg.training.mode;
    const bool needs_ssl = mode != TrainMode::Supervised;
    const bool needs_labels = mode == TrainMode::Supervised || mode == TrainMode::Alternating;
    if (needs_ssl && cfg.unlabeled_manifest.empty()) {
        throw ConfigError(std::string(to_string(mode)) + " training needs data.unlabeled");
    }
    if (needs_labels && cfg.labeled_manifest.empty()) {
        throw ConfigError(std::string(to_string(mode)) + " training needs data.labeled");
    }

    const RunLayout run{cfg.output_dir};
    run.create();
    write_json(run.root / "config.json", to_json(cfg));

    std::vector<TrainingTrack> unlabeled;
    std::vector<TrainingTrack> labeled;
    if (needs_ssl) {
        err << "loading " << cfg.unlabeled_manifest.string() << '\n';
        unlabeled = load_tracks(load_manifest(cfg.unlabeled_manifest), cfg.frontend, false, err);
    }
    if (needs_labels) {
        err << "loading " << cfg.labeled_manifest.string() << '\n';
        labeled = load_tracks(load_manifest(cfg.labeled_manifest), cfg.frontend, true, err);
    }
    if (!trainer) {
        trainer.emplace(cfg.training, cfg.chromanet, cfg.frontend);
    }

    std::ofstream log(run.logs() / "train.ndjson", o.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) {
        throw DataError("cannot write the training log");
    }
    log << std::setprecision(17);
    const auto on_step = [&](const StepRecord& r) {
        log << json{{"type", "step"},  {"epoch", r.epoch}, {"step", r.step},
                    {"kind", to_string(r.kind)}, {"lr", r.lr}, {"loss", loss_json(r.loss)}}
                   .dump()
            << '\n';
    };
    const auto on_epoch = [&](const EpochReport& r) {
        log << json{{"type", "epoch"}, {"epoch", r.epoch}, {"kind", to_string(r.kind)}, {"steps", r.steps},
                    {"mean_loss", loss_json(r.mean_loss)}}
                   .dump()
            << '\n';
        log.flush();
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d.ckpt", r.epoch);
        trainer->save(run.checkpoints() / name);
        trainer->save(run.checkpoints() / "last.ckpt");
        err << "epoch " << r.epoch << " (" << to_string(r.kind) << ") loss " << r.mean_loss.total << '\n';
    };
    try {
        trainer->fit(unlabeled, labeled, on_step, on_epoch);
    } catch (const NonFiniteLossError& e) {
        log << json{{"type", "error"}, {"message", e.what()}, {"batch", e.batch_ids()}}.dump() << '\n';
        throw;
    }
    trainer->save(run.checkpoints() / "last.ckpt");

    // Collapse check on a probe set: the evaluation data if configured, else
    // the training tracks.
    std::vector<CqtMatrix> probe;
    if (!cfg.eval_manifest.empty()) {
        DatasetManifest m = load_split(cfg.eval_manifest, cfg.eval_split);
        m.entries.resize(std::min<std::size_t>(m.entries.size(), static_cast<std::size_t>(cfg.training.probe_size)));
        for (TrainingTrack& t : load_tracks(m, cfg.frontend, false, err)) {
            probe.push_back(std::move(t.cqt));
        }
    } else {
        for (const auto* set : {&unlabeled, &labeled}) {
            for (const TrainingTrack& t : *set) {
                if (probe.size() < static_cast<std::size_t>(cfg.training.probe_size)) {
                    probe.push_back(t.cqt);
                }
            }
        }
    }
    out << (run.checkpoints() / "last.ckpt").string() << '\n';
    if (probe.size() < 100) {
        err << "collapse check skipped: " << probe.size() << " probe tracks, 100 needed\n";
        return kExitOk;
    }
    const CollapseReport collapse =
        collapse_monitor(trainer->model(), probe, cfg.training.collapse_threshold_bits);
    const json report{{"entropy_bits", collapse.entropy_bits},
                      {"threshold_bits", cfg.training.collapse_threshold_bits},
                      {"collapsed", collapse.collapsed},
                      {"probe_size", probe.size()},
                      {"histogram", collapse.histogram}};
    write_json(run.reports() / "collapse.json", report);
    log << json{{"type", "collapse"}, {"report", report}}.dump() << '\n';
    if (collapse.collapsed) {
        err << "training collapsed: prediction entropy " << collapse.entropy_bits << " bits < "
            << cfg.training.collapse_threshold_bits << " bits over " << probe.size() << " probe tracks\n";
        return kExitCollapse;
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct CalibrateOptions {
    std::string checkpoint;
    std::string clip;
};

int cmd_calibrate(const CalibrateOptions& o, std::ostream& out)
{
    CqtParams frontend;
    Model model = load_usable_model(o.checkpoint, frontend);
    AudioClip clip;
    fs::path clip_path = o.clip.empty() ? kDataDir / "calibration_c_major.wav" : fs::path(o.clip);
    if (o.clip.empty() && !fs::exists(clip_path)) {
        clip = calibration_clip(frontend.sample_rate);
        clip_path = "<built-in C major clip>";
    } else {
        clip = load_audio(clip_path, frontend.sample_rate);
    }
    CqtMatrix x;
    try {
        x = compute_cqt(clip, frontend);
    } catch (const std::invalid_argument& e) {
        throw DataError(clip_path.string() + ": " + e.what());
    }
    const Calibration cal = calibrate(model, x);
    store_calibration(o.checkpoint, cal);
    out << "q_cal=" << cal.q_cal << " mode_swap=" << (cal.mode_swap ? "true" : "false") << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalOptions {
    std::string config;
    std::string checkpoint;
    std::string manifest;
    std::optional<std::string> split;
    std::string output;
    std::vector<std::string> baselines;
    std::string profiles;
    std::string fifth = "above";
    std::string from_counts;
};

void print_summary(const EvaluationSummary& s, std::ostream& out)
{
    const auto counts = [&](const EvalCounts& c) {
        out << " correct=" << c.correct << " fifth=" << c.fifth << " relative=" << c.relative
            << " parallel=" << c.parallel << " wrong=" << c.wrong;
    };
    out << std::fixed << std::setprecision(4);
    out << s.system << ": tracks=" << s.tracks << " KSEA=" << s.ksea.score;
    counts(s.ksea.counts);
    out << '\n';
    if (s.mirex) {
        out << s.system << ": MIREX=" << s.mirex->score;
        counts(s.mirex->counts);
        out << '\n';
    }
    out << s.system << ": prediction_entropy_bits=" << s.prediction_entropy_bits << '\n';
    out.unsetf(std::ios::fixed);
}

int cmd_eval(const EvalOptions& o, std::ostream& out, std::ostream& err)
{
    if (!o.from_counts.empty()) {
        bool with_mode = false;
        const EvalCounts c = parse_counts(o.from_counts, with_mode);
        out << std::fixed << std::setprecision(2);
        if (with_mode) {
            out << "MIREX=" << 100.0 * mirex_from_counts(c) << "%\n";
        } else {
            out << "KSEA=" << 100.0 * ksea_from_counts(c) << "%\n";
        }
        out.unsetf(std::ios::fixed);
        return kExitOk;
    }
    const FifthDirection fifth = o.fifth == "both" ? FifthDirection::Both : FifthDirection::Above;
    if (o.fifth != "both" && o.fifth != "above") {
        throw ConfigError("--fifth must be 'above' or 'both'");
    }
    RunConfig cfg = base_config(o.config);
    fs::path manifest_path = o.manifest.empty() ? cfg.eval_manifest : fs::path(o.manifest);
    const std::string split = o.split ? *o.split : cfg.eval_split;
    if (manifest_path.empty()) {
        throw ConfigError("eval needs --manifest or data.eval in the config");
    }
    if (o.checkpoint.empty() && o.baselines.empty()) {
        throw ConfigError("eval needs --checkpoint and/or --baseline");
    }
    for (const std::string& b : o.baselines) {
        if (b != "chroma" && b != "template") {
            throw ConfigError("unknown baseline '" + b + "' (chroma, template)");
        }
    }

    fs::path out_dir;
    if (!o.output.empty()) {
        out_dir = o.output;
    } else if (!o.checkpoint.empty() && fs::path(o.checkpoint).parent_path().filename() == "checkpoints") {
        out_dir = RunLayout{fs::path(o.checkpoint).parent_path().parent_path()}.reports();
    } else {
        out_dir = RunLayout{cfg.output_dir}.reports();
    }
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw DataError("cannot create " + out_dir.string());
    }

    std::optional<Model> model;
    CqtParams frontend = cfg.frontend;
    if (!o.checkpoint.empty()) {
        model.emplace(load_usable_model(o.checkpoint, frontend));
        if (!model->calibrated) {
            err << "warning: checkpoint is not calibrated; decoding without an offset\n";
        }
    }
    const DatasetManifest manifest = load_split(manifest_path, split);
    if (manifest.entries.empty()) {
        throw DataError("no evaluation entries in " + manifest_path.string() +
                        (split.empty() ? "" : " for split " + split));
    }
    const std::vector<TrainingTrack> tracks = load_tracks(manifest, frontend, true, err);

    std::map<std::string, std::vector<TrackResult>> results;
    std::optional<KeyProfiles> profiles;
    for (const std::string& b : o.baselines) {
        if (b == "template") {
            profiles = load_key_profiles(o.profiles.empty() ? kDataDir / "krumhansl_profiles.json" : fs::path(o.profiles));
        }
    }
    for (const TrainingTrack& t : tracks) {
        if (model) {
            results["stone"].push_back({t.id, *t.label, predict_key(*model, t.cqt)});
        }
        for (const std::string& b : o.baselines) {
            const KeyPrediction p = b == "chroma" ? baseline_chroma_argmax(t.cqt, frontend.log_gain)
                                                  : baseline_template_matching(t.cqt, *profiles, frontend.log_gain);
            results[b == "chroma" ? "baseline_chroma" : "baseline_template"].push_back({t.id, *t.label, p});
        }
    }
    for (const auto& [system, rows] : results) {
        const EvaluationSummary summary = summarize(system, rows, fifth);
        write_evaluation_report(out_dir, system, rows, summary, fifth);
        print_summary(summary, out);
    }
    out << "reports written to " << out_dir.string() << '\n';
    return kExitOk;
}

}  // namespace

EvalCounts parse_counts(const std::string& text, bool& with_mode)
{
    EvalCounts c;
    const auto number = [&](const std::string& s) -> std::size_t {
        std::size_t used = 0;
        long long v = -1;
        try {
            v = std::stoll(s, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != s.size() || v < 0) {
            throw ConfigError("bad count '" + s + "' in '" + text + "'");
        }
        return static_cast<std::size_t>(v);
    };
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        parts.push_back(item);
    }
    if (text.find('=') == std::string::npos) {
        if (parts.size() == 3) {
            c = {number(parts[0]), number(parts[1]), 0, 0, number(parts[2])};
            with_mode = false;
        } else if (parts.size() == 5) {
            c = {number(parts[0]), number(parts[1]), number(parts[2]), number(parts[3]), number(parts[4])};
            with_mode = true;
        } else {
            throw ConfigError("--from-counts expects 3 (KSEA) or 5 (MIREX) comma-separated counts");
        }
    } else {
        std::map<std::string, std::size_t> named;
        for (const std::string& p : parts) {
            const auto eq = p.find('=');
            const std::string key = p.substr(0, eq);
            if (eq == std::string::npos || named.contains(key)) {
                throw ConfigError("bad count entry '" + p + "'");
            }
            if (key != "correct" && key != "fifth" && key != "relative" && key != "parallel" && key != "wrong" &&
                key != "total") {
                throw ConfigError("unknown count '" + key + "'");
            }
            named[key] = number(p.substr(eq + 1));
        }
        if (!named.contains("correct") || !named.contains("fifth") ||
            named.contains("wrong") == named.contains("total")) {
            throw ConfigError("named counts need correct, fifth and exactly one of wrong or total");
        }
        with_mode = named.contains("relative") || named.contains("parallel");
        c.correct = named["correct"];
        c.fifth = named["fifth"];
        c.relative = named["relative"];
        c.parallel = named["parallel"];
        if (named.contains("wrong")) {
            c.wrong = named["wrong"];
        } else {
            const std::size_t known = c.correct + c.fifth + c.relative + c.parallel;
            if (named["total"] < known) {
                throw ConfigError("total is smaller than the listed counts");
            }
            c.wrong = named["total"] - known;
        }
    }
    if (c.total() == 0) {
        throw ConfigError("counts sum to zero");
    }
    return c;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Self-supervised key signature and tonality estimation"};
    app.name(args.empty() ? "stone" : args[0]);
    app.require_subcommand(1);

    SynthOptions synth;
    CLI::App* s = app.add_subcommand("synth", "Render a synthetic tonal corpus with a manifest");
    s->add_option("--config", synth.config, "Run config (JSON); the synth section is used");
    s->add_option("--out", synth.out_dir, "Output directory (default <output_dir>/corpus)");
    s->add_option("--tracks", synth.tracks, "Number of tracks")->check(CLI::PositiveNumber);
    s->add_option("--seed", synth.seed, "Global seed");
    s->add_option("--cadential-share", synth.cadential_share, "Share of cadential progressions")
        ->check(CLI::Range(0.0, 1.0));
    s->add_option("--key-distribution", synth.key_distribution, "balanced or uniform");
    s->add_option("--split", synth.split, "Split tag written to the manifest");
    s->add_option("--calibration-clip", synth.calibration_clip,
                  "Only write the C major calibration clip to this WAV path");

    TrainOptions train;
    CLI::App* t = app.add_subcommand("train", "Train a ChromaNet (ssl12, ssl24, supervised, alternating)");
    t->add_option("--config", train.config, "Run config (JSON)");
    t->add_option("--output", train.output, "Run directory (overrides output_dir)");
    t->add_option("--mode", train.mode, "ssl12, ssl24, supervised or alternating");
    t->add_option("--epochs", train.epochs, "Number of epochs");
    t->add_option("--label-fraction", train.label_fraction, "Share of labeled tracks used");
    t->add_option("--seed", train.seed, "Global seed");
    t->add_option("--batch-size", train.batch_size, "Batch size");
    t->add_option("--lr", train.lr, "Peak learning rate");
    t->add_option("--omega", train.omega, "CPSD frequency (1 or 7)");
    t->add_option("--unlabeled", train.unlabeled, "Unlabeled manifest");
    t->add_option("--labeled", train.labeled, "Labeled manifest");
    t->add_option("--resume", train.resume, "Continue from a checkpoint");

    CalibrateOptions cal;
    CLI::App* c = app.add_subcommand("calibrate", "Fix the absolute pitch offset from a C major clip");
    c->add_option("--checkpoint", cal.checkpoint, "Checkpoint to update")->required();
    c->add_option("--clip", cal.clip, "Calibration audio (default: the shipped C major clip)");

    EvalOptions ev;
    CLI::App* e = app.add_subcommand("eval", "Evaluate a checkpoint and/or baselines on a labeled manifest");
    e->add_option("--config", ev.config, "Run config (JSON); data.eval and frontend are used");
    e->add_option("--checkpoint", ev.checkpoint, "Trained checkpoint");
    e->add_option("--manifest", ev.manifest, "Labeled manifest");
    e->add_option("--split", ev.split, "Only entries with this split tag");
    e->add_option("--output", ev.output, "Report directory");
    e->add_option("--baseline", ev.baselines, "Baseline to run: chroma, template (repeatable)");
    e->add_option("--profiles", ev.profiles, "Key profiles JSON for template matching");
    e->add_option("--fifth", ev.fifth, "MIREX fifth relation: above (default) or both");
    e->add_option("--from-counts", ev.from_counts,
                  "Score category counts: c,f,w (KSEA) or c,f,r,p,w (MIREX) or named form");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& ex) {
        err << "usage error: " << ex.what() << '\n';
        return kExitConfig;
    }

    try {
        if (s->parsed()) {
            return cmd_synth(synth, out);
        }
        if (t->parsed()) {
            return cmd_train(train, out, err);
        }
        if (c->parsed()) {
            return cmd_calibrate(cal, out);
        }
        return cmd_eval(ev, out, err);
    } catch (const ConfigError& ex) {
        err << "config error: " << ex.what() << '\n';
        return kExitConfig;
    } catch (const DataError& ex) {
        err << "data error: " << ex.what() << '\n';
        return kExitData;
    } catch (const CollapseError& ex) {
        err << "collapse: " << ex.what() << '\n';
        return kExitCollapse;
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << '\n';
        return kExitFailure;
    }
}

}  // namespace stone::cli
