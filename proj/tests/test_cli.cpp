#include "support.hpp"

#include "stone/cli.hpp"
#include "stone/config.hpp"
#include "stone/datasets.hpp"
#include "stone/error.hpp"
#include "stone/training.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace stone;
using namespace stone::test;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code = 0;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args)
{
    args.insert(args.begin(), "stone");
    std::ostringstream out, err;
    Result r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path scratch(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / ("stone_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_json_file(const fs::path& p, const json& j)
{
    std::ofstream(p) << j.dump(2);
}

json tiny_net_json()
{
    const ChromaNetConfig c = tiny_config(2);
    return {{"n_blocks", c.n_blocks},         {"channels", c.channels},
            {"time_downsample", c.time_downsample}, {"kernel_rows", c.kernel_rows},
            {"kernel_frames", c.kernel_frames}, {"expansion", c.expansion}};
}

/// Synthesizes a small corpus once per directory name and returns its manifest.
fs::path small_corpus(const std::string& name, int tracks, double seconds)
{
    const fs::path dir = scratch(name);
    write_json_file(dir / "synth.json", {{"seed", 3}, {"synth", {{"n_tracks", tracks}, {"duration", seconds}}}});
    const Result r = run_cli({"synth", "--config", (dir / "synth.json").string(), "--out", (dir / "corpus").string()});
    REQUIRE(r.code == 0);
    return dir / "corpus" / "manifest.csv";
}

json train_config(const fs::path& manifest, const fs::path& out, const std::string& mode, int epochs)
{
    return {{"seed", 21},
            {"output_dir", out.string()},
            {"chromanet", tiny_net_json()},
            {"training", {{"mode", mode}, {"epochs", epochs}, {"batch_size", 8}, {"segment_seconds", 2.0}}},
            {"data", {{"unlabeled", manifest.string()}, {"labeled", manifest.string()}}}};
}

/// Checkpoint of a tiny network after one training step.
fs::path trained_checkpoint(const fs::path& path, TrainMode mode)
{
    TrainConfig tc;
    tc.mode = mode;
    tc.segment_seconds = 2.0;
    Trainer trainer(tc, tiny_config(mode == TrainMode::Ssl12 ? 1 : 2));
    SynthSpec spec;
    spec.duration = 5.0;
    RandomSource rng(1);
    std::vector<ViewTriple> batch;
    for (int i = 0; i < 4; ++i) {
        const SynthTrack t = synthesize_track(spec, i);
        const SegmentPair pair =
            sample_segment_pair(compute_cqt(t.audio), frames_for_duration(2.0, {}), rng, {}, t.id);
        batch.push_back(make_views(pair, sample_intervals(rng)));
    }
    trainer.plan(4, 0);
    trainer.train_step(batch, EpochKind::Ssl);
    trainer.save(path);
    return path;
}

std::vector<json> log_records(const fs::path& run, const std::string& type)
{
    std::vector<json> out;
    std::ifstream in(run / "logs" / "train.ndjson");
    for (std::string line; std::getline(in, line);) {
        json j = json::parse(line);
        if (j["type"] == type) {
            out.push_back(j);
        }
    }
    return out;
}

}  // namespace

TEST_SUITE("cli")
{
    TEST_CASE("usage errors exit with the config code")
    {
        CHECK(run_cli({}).code == cli::kExitConfig);
        CHECK(run_cli({"dance"}).code == cli::kExitConfig);
        const Result zero = run_cli({"synth", "--tracks", "0"});
        CHECK(zero.code == cli::kExitConfig);
        CHECK(zero.err.find("usage error") != std::string::npos);
        CHECK(run_cli({"synth", "--tracks", "-3"}).code == cli::kExitConfig);
        CHECK(run_cli({"train", "--no-such-flag"}).code == cli::kExitConfig);
        CHECK(run_cli({"calibrate"}).code == cli::kExitConfig);
        CHECK(run_cli({"eval", "--from-counts", "1,2"}).code == cli::kExitConfig);
        CHECK(run_cli({"eval", "--manifest", "x.csv"}).code == cli::kExitConfig);
    }

    TEST_CASE("help lists the subcommands")
    {
        const Result r = run_cli({"--help"});
        CHECK(r.code == 0);
        for (const char* sub : {"synth", "train", "calibrate", "eval"}) {
            CHECK(r.out.find(sub) != std::string::npos);
        }
    }

    TEST_CASE("config files reject unknown fields")
    {
        const fs::path dir = scratch("config");
        write_json_file(dir / "top.json", {{"seed", 1}, {"sead", 2}});
        Result r = run_cli({"train", "--config", (dir / "top.json").string()});
        CHECK(r.code == cli::kExitConfig);
        CHECK(r.err.find("sead") != std::string::npos);

        write_json_file(dir / "nested.json", {{"training", {{"epochs", 3}, {"learning_rate", 0.1}}}});
        r = run_cli({"train", "--config", (dir / "nested.json").string()});
        CHECK(r.code == cli::kExitConfig);
        CHECK(r.err.find("learning_rate") != std::string::npos);

        CHECK_THROWS_AS(run_config_from_json(json{{"chromanet", {{"preset", "huge"}}}}), ConfigError);
        CHECK_THROWS_AS(run_config_from_json(json{{"synth", {{"timbre", {{"partials", 6}, {"hue", 1}}}}}}),
                        ConfigError);
        std::ofstream(dir / "broken.json") << "{\"seed\": ";
        CHECK(run_cli({"train", "--config", (dir / "broken.json").string()}).code == cli::kExitConfig);
        CHECK(run_cli({"train", "--config", (dir / "absent.json").string()}).code == cli::kExitConfig);
    }

    TEST_CASE("run config round trip and validation")
    {
        RunConfig c;
        c.seed = 5;
        c.training.mode = TrainMode::Ssl12;
        c.match_heads_to_mode();
        c.training.epochs = 7;
        c.synth.n_tracks = 48;
        const RunConfig back = run_config_from_json(to_json(c));
        CHECK(to_json(back) == to_json(c));
        CHECK(back.chromanet == desk_chromanet_config(1));
        CHECK(run_config_from_json(json{{"training", {{"mode", "ssl12"}}}}).chromanet.out_channels == 1);
        CHECK(run_config_from_json(json{{"chromanet", {{"preset", "paper"}}}}).chromanet.n_blocks == 7);
        CHECK_THROWS_AS(run_config_from_json(json{{"training", {{"mode", "ssl12"}}}, {"chromanet", {{"out_channels", 2}}}}),
                        ConfigError);
        CHECK_THROWS_AS(run_config_from_json(json{{"training", {{"omega", 5}}}}), ConfigError);
    }

    TEST_CASE("shipped example configs load")
    {
        const fs::path dir = fs::path(STONE_DATA_DIR).parent_path() / "configs";
        const RunConfig ssl24 = load_run_config(dir / "desk_ssl24.json");
        CHECK(ssl24.training.mode == TrainMode::Ssl24);
        CHECK(ssl24.chromanet == desk_chromanet_config(2));
        CHECK(ssl24.synth.n_tracks == 2000);
        CHECK(ssl24.output_dir == dir / "../runs/desk_ssl24");
        CHECK(load_run_config(dir / "desk_ssl12.json").chromanet.out_channels == 1);
        const RunConfig alt = load_run_config(dir / "desk_alternating.json");
        CHECK(alt.training.mode == TrainMode::Alternating);
        CHECK(alt.training.label_fraction == 0.1);
        CHECK(load_run_config(dir / "paper_ssl24.json").chromanet.n_blocks == 7);
    }

    TEST_CASE("synth writes a corpus and reruns identically")
    {
        const fs::path dir = scratch("synth");
        Result a = run_cli({"synth", "--tracks", "24", "--seed", "7", "--out", (dir / "a").string()});
        REQUIRE(a.code == 0);
        CHECK(a.out.find("manifest.csv") != std::string::npos);
        const DatasetManifest m = load_manifest(dir / "a" / "manifest.csv");
        CHECK(m.entries.size() == 24);
        std::size_t wavs = 0;
        for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
            wavs += e.path().extension() == ".wav" ? 1 : 0;
        }
        CHECK(wavs == 24);
        CHECK(fs::exists(dir / "a" / "synth_config.json"));

        REQUIRE(run_cli({"synth", "--tracks", "24", "--seed", "7", "--out", (dir / "b").string()}).code == 0);
        CHECK(slurp(dir / "a" / "manifest.csv") == slurp(dir / "b" / "manifest.csv"));
        for (const auto& e : m.entries) {
            CHECK(slurp(dir / "a" / e.path) == slurp(dir / "b" / e.path));
        }
        REQUIRE(run_cli({"synth", "--tracks", "24", "--seed", "8", "--out", (dir / "c").string()}).code == 0);
        CHECK(slurp(dir / "a" / m.entries[0].path) != slurp(dir / "c" / m.entries[0].path));
    }

    TEST_CASE("synth writes the calibration clip")
    {
        const fs::path dir = scratch("clip");
        REQUIRE(run_cli({"synth", "--calibration-clip", (dir / "cal.wav").string()}).code == 0);
        const AudioClip clip = load_audio(dir / "cal.wav");
        CHECK(clip.samples.size() == calibration_clip().samples.size());
    }

    TEST_CASE("missing data exits with the data code")
    {
        const fs::path dir = scratch("missing");
        json cfg = train_config(dir / "nowhere.csv", dir / "run", "ssl24", 1);
        write_json_file(dir / "cfg.json", cfg);
        const Result r = run_cli({"train", "--config", (dir / "cfg.json").string()});
        CHECK(r.code == cli::kExitData);
        CHECK(r.err.find("nowhere.csv") != std::string::npos);
        CHECK(run_cli({"calibrate", "--checkpoint", (dir / "none.ckpt").string()}).code == cli::kExitData);
    }

    TEST_CASE("train writes the run layout and resumes with continued epoch numbers")
    {
        const fs::path manifest = small_corpus("train_corpus", 12, 5.0);
        const fs::path dir = scratch("train");
        write_json_file(dir / "cfg.json", train_config(manifest, dir / "run", "alternating", 4));
        Result r = run_cli({"train", "--config", (dir / "cfg.json").string()});
        REQUIRE(r.code == 0);
        CHECK(r.err.find("collapse check skipped") != std::string::npos);
        for (const char* p : {"config.json", "checkpoints/last.ckpt", "checkpoints/epoch_000.ckpt",
                              "checkpoints/epoch_003.ckpt", "logs/train.ndjson"}) {
            CHECK_MESSAGE(fs::exists(dir / "run" / p), p);
        }
        const auto epochs = log_records(dir / "run", "epoch");
        REQUIRE(epochs.size() == 4);
        CHECK(epochs[0]["kind"] == "ssl");
        CHECK(epochs[1]["kind"] == "supervised");
        CHECK(epochs[2]["kind"] == "ssl");
        CHECK(epochs[3]["kind"] == "supervised");

        // The captured config reproduces the run on its own.
        const RunConfig captured = load_run_config(dir / "run" / "config.json");
        CHECK(captured.training.epochs == 4);
        CHECK(captured.chromanet == run_config_from_json(train_config(manifest, dir / "run", "alternating", 4)).chromanet);

        r = run_cli({"train", "--config", (dir / "cfg.json").string(), "--output", (dir / "resumed").string(),
                     "--resume", (dir / "run" / "checkpoints" / "epoch_001.ckpt").string()});
        REQUIRE(r.code == 0);
        const auto resumed = log_records(dir / "resumed", "epoch");
        REQUIRE(resumed.size() == 2);
        CHECK(resumed[0]["epoch"] == 2);
        CHECK(resumed[1]["epoch"] == 3);
        CHECK(resumed[0]["mean_loss"] == epochs[2]["mean_loss"]);
        CHECK(resumed[1]["mean_loss"] == epochs[3]["mean_loss"]);
    }

    TEST_CASE("label fraction flag limits the supervised epochs")
    {
        const fs::path manifest = small_corpus("fraction_corpus", 20, 5.0);
        const fs::path dir = scratch("fraction");
        write_json_file(dir / "cfg.json", train_config(manifest, dir / "run", "alternating", 2));
        REQUIRE(run_cli({"train", "--config", (dir / "cfg.json").string(), "--label-fraction", "0.1"}).code == 0);
        const auto epochs = log_records(dir / "run", "epoch");
        REQUIRE(epochs.size() == 2);
        CHECK(epochs[0]["steps"] == 3);  // 20 unlabeled tracks, batch 8
        CHECK(epochs[1]["steps"] == 1);  // 2 labeled tracks
        CHECK(load_run_config(dir / "run" / "config.json").training.label_fraction == 0.1);
    }

    TEST_CASE("train reports a collapse with its own exit code")
    {
        const fs::path manifest = small_corpus("collapse_corpus", 100, 4.5);
        const fs::path dir = scratch("collapse");
        json cfg = train_config(manifest, dir / "run", "ssl24", 1);
        // No model reaches 10 bits over 12 classes.
        cfg["training"]["collapse_threshold_bits"] = 10.0;
        write_json_file(dir / "cfg.json", cfg);
        const Result r = run_cli({"train", "--config", (dir / "cfg.json").string()});
        CHECK(r.code == cli::kExitCollapse);
        CHECK(r.err.find("collapsed") != std::string::npos);
        const json report = json::parse(slurp(dir / "run" / "reports" / "collapse.json"));
        CHECK(report["collapsed"] == true);
        CHECK(report["probe_size"] == 100);
    }

    TEST_CASE("calibrate stores the offset and is idempotent")
    {
        const fs::path dir = scratch("calibrate");
        trained_checkpoint(dir / "model.ckpt", TrainMode::Ssl24);

        Result r = run_cli({"calibrate", "--checkpoint", (dir / "model.ckpt").string()});
        REQUIRE(r.code == 0);
        const Model model = load_model(dir / "model.ckpt");
        CHECK(model.calibrated);
        CHECK(r.out.find("q_cal=" + std::to_string(model.calibration.q_cal)) != std::string::npos);
        // After calibration the clip itself decodes as C major / A minor.
        const KeyPrediction p = predict_key(model, compute_cqt(calibration_clip()));
        CHECK(p.key_signature == 0);
        CHECK(p.key() == parse_key("C:maj"));

        // Calibration is measured on raw outputs, so repeating it changes nothing.
        r = run_cli({"calibrate", "--checkpoint", (dir / "model.ckpt").string()});
        REQUIRE(r.code == 0);
        const Model again = load_model(dir / "model.ckpt");
        CHECK(again.calibration.q_cal == model.calibration.q_cal);
        CHECK(again.calibration.mode_swap == model.calibration.mode_swap);
    }

    TEST_CASE("calibrate rejects a non-discriminative model")
    {
        const fs::path dir = scratch("calibrate_flat");
        TrainConfig tc;
        tc.mode = TrainMode::Ssl12;
        Trainer trainer(tc, tiny_config(1));
        std::fill(trainer.model().net.parameters().begin(), trainer.model().net.parameters().end(), 0.0f);
        trainer.save(dir / "flat.ckpt");
        const Result r = run_cli({"calibrate", "--checkpoint", (dir / "flat.ckpt").string()});
        CHECK(r.code == cli::kExitData);
        CHECK(r.err.find("not discriminative") != std::string::npos);
        CHECK_FALSE(load_model(dir / "flat.ckpt").calibrated);

        TrainConfig untrained;
        untrained.mode = TrainMode::Ssl24;
        Trainer(untrained, tiny_config(2)).save(dir / "untrained.ckpt");
        const Result u = run_cli({"calibrate", "--checkpoint", (dir / "untrained.ckpt").string()});
        CHECK(u.code == cli::kExitData);
        CHECK(u.err.find("normalization statistics") != std::string::npos);
    }

    TEST_CASE("eval from counts reproduces the published scores")
    {
        const auto score = [](const std::string& counts) { return run_cli({"eval", "--from-counts", counts}); };
        const auto percent = [&](const std::string& counts, const std::string& metric) {
            const Result r = score(counts);
            REQUIRE(r.code == 0);
            REQUIRE(r.out.starts_with(metric + "="));
            return std::stod(r.out.substr(metric.size() + 1));
        };
        CHECK(score("1599,981,2909").out == "KSEA=38.07%\n");
        CHECK(std::abs(percent("correct=3587,fifth=1225,total=5489", "KSEA") - 77.0) <= 0.5);
        CHECK(std::abs(percent("correct=3883,fifth=920,total=5489", "KSEA") - 79.0) <= 0.5);
        CHECK(std::abs(percent("correct=4090,fifth=741,total=5489", "KSEA") - 81.0) <= 0.5);
        CHECK(score("2398,631,390,506,1564").out == "MIREX=53.41%\n");
        CHECK(std::abs(percent("421,535,399,253,3881", "MIREX") - 15.6) <= 0.1);
        CHECK(std::abs(percent("2443,628,1320,115,983", "MIREX") - 57.9) <= 0.1);
        CHECK(std::abs(percent("3586,482,504,165,752", "MIREX") - 73.1) <= 0.1);
        CHECK(std::abs(percent("correct=551,fifth=568,relative=498,parallel=286,wrong=3586", "MIREX") - 19.0) <= 0.1);
        CHECK(score("correct=1,fifth=2,total=1").code == cli::kExitConfig);
        CHECK(score("correct=1,fifth=x,wrong=1").code == cli::kExitConfig);
        CHECK(score("0,0,0").code == cli::kExitConfig);
    }

    TEST_CASE("eval runs the baselines and a checkpoint on one manifest")
    {
        const fs::path manifest = small_corpus("eval_corpus", 24, 6.0);
        const fs::path dir = scratch("eval");
        trained_checkpoint(dir / "model.ckpt", TrainMode::Ssl24);
        Result r = run_cli({"eval", "--manifest", manifest.string(), "--baseline", "chroma", "--baseline", "template",
                            "--checkpoint", (dir / "model.ckpt").string(), "--output", (dir / "reports").string()});
        REQUIRE(r.code == 0);
        CHECK(r.err.find("not calibrated") != std::string::npos);
        for (const char* system : {"stone", "baseline_chroma", "baseline_template"}) {
            CHECK(r.out.find(std::string(system) + ": tracks=24 KSEA=") != std::string::npos);
        }
        CHECK(r.out.find("stone: MIREX=") != std::string::npos);
        CHECK(r.out.find("baseline_template: MIREX=") != std::string::npos);
        CHECK(r.out.find("baseline_chroma: MIREX=") == std::string::npos);
        for (const char* f : {"stone.csv", "stone.json", "stone_confusion.csv", "stone_confusion.pgm",
                              "baseline_chroma_confusion.csv"}) {
            CHECK_MESSAGE(fs::exists(dir / "reports" / f), f);
        }
        CHECK(run_cli({"eval", "--manifest", manifest.string(), "--baseline", "oracle"}).code == cli::kExitConfig);
        CHECK(run_cli({"eval", "--manifest", manifest.string(), "--baseline", "chroma", "--fifth", "sideways"}).code ==
              cli::kExitConfig);
    }
}
