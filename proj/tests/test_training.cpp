#include "support.hpp"

#include "stone/cqt.hpp"
#include "stone/datasets.hpp"
#include "stone/error.hpp"
#include "stone/training.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

using namespace stone;
using namespace stone::test;
namespace fs = std::filesystem;

namespace {

/// Short synthetic tracks with their CQTs.
std::vector<TrainingTrack> synthetic_tracks(int count, std::uint64_t seed, double seconds = 6.0)
{
    SynthSpec spec;
    spec.n_tracks = count;
    spec.seed = seed;
    spec.duration = seconds;
    std::vector<TrainingTrack> out;
    for (int i = 0; i < count; ++i) {
        SynthTrack t = synthesize_track(spec, i);
        out.push_back({t.id, compute_cqt(t.audio), t.label});
    }
    return out;
}

TrainConfig small_config(TrainMode mode)
{
    TrainConfig c;
    c.mode = mode;
    c.epochs = 4;
    c.batch_size = 4;
    c.segment_seconds = 2.0;
    c.seed = 11;
    return c;
}

ChromaNetConfig net_for(TrainMode mode)
{
    return tiny_config(mode == TrainMode::Ssl12 ? 1 : 2);
}

std::vector<ViewTriple> fixed_views(std::span<const TrainingTrack> tracks, std::uint64_t seed, bool labeled)
{
    const int frames = frames_for_duration(2.0, {});
    RandomSource rng(seed);
    std::vector<ViewTriple> out;
    for (const TrainingTrack& t : tracks) {
        const SegmentPair pair = sample_segment_pair(t.cqt, frames, rng, {}, t.id);
        out.push_back(make_views(pair, sample_intervals(rng), labeled ? t.label : std::nullopt));
    }
    return out;
}

double eval_loss(const Model& model, std::span<const ViewTriple> items, const TrainConfig& config)
{
    NormState norm = model.norm;
    return batch_objective<float>(model.net, norm, items, {config.omega, config.ablation_crossentropy},
                                  std::span<float>())
        .total;
}

fs::path scratch(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / ("stone_train_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Five-point central difference of the batch objective in double precision.
struct GradCheck {
    double worst = 0.0;
    std::size_t checked = 0;
};

GradCheck gradient_check(const ChromaNetConfig& config, bool labeled, bool crossentropy, std::uint64_t seed)
{
    BasicChromaNet<double> net(config);
    RandomSource rng(seed);
    net.initialize(rng);
    // Move away from the initialisation so norms and gates are generic.
    for (double& p : net.parameters()) {
        p += 0.3 * normal(rng);
    }
    std::vector<ViewTriple> items;
    for (int i = 0; i < 3; ++i) {
        CqtMatrix x(12);
        CqtMatrix y(12);
        for (float& v : x.data) {
            v = static_cast<float>(uniform_real(rng));
        }
        for (float& v : y.data) {
            v = static_cast<float>(uniform_real(rng));
        }
        const SegmentPair pair{x.slice_frames(0, 6), y.slice_frames(0, 6), "item" + std::to_string(i)};
        std::optional<KeyLabel> label;
        if (labeled && i != 1) {
            label = KeyLabel::from_index24(5 + 7 * i);
        }
        items.push_back(make_views(pair, Intervals{3 + i, 2 - 2 * i}, label));
    }
    const ObjectiveOptions options{7, crossentropy};
    const NormState norm0;
    std::vector<double> grad(net.parameter_count(), 0.0);
    NormState n = norm0;
    batch_objective<double>(net, n, items, options, grad);

    const double h = 1e-4;
    GradCheck result;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double saved = net.parameters()[i];
        const auto at = [&](double value) {
            net.parameters()[i] = value;
            NormState ni = norm0;
            return batch_objective<double>(net, ni, items, options, std::span<double>()).total;
        };
        const double fd = (8.0 * (at(saved + h) - at(saved - h)) - (at(saved + 2 * h) - at(saved - 2 * h))) / (12.0 * h);
        net.parameters()[i] = saved;
        const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
        result.worst = std::max(result.worst, std::abs(fd - grad[i]) / scale);
        ++result.checked;
    }
    return result;
}

}  // namespace

TEST_SUITE("training")
{
    TEST_CASE("intervals respect the crop range")
    {
        RandomSource rng(1);
        std::array<int, kMaxCrop + 1> c_hist{};
        bool c15_up = false;
        bool c0_down = false;
        const int draws = 100000;
        for (int i = 0; i < draws; ++i) {
            const Intervals iv = sample_intervals(rng);
            REQUIRE(iv.c >= 0);
            REQUIRE(iv.c <= kMaxCrop);
            REQUIRE(iv.c + iv.k >= 0);
            REQUIRE(iv.c + iv.k <= kMaxCrop);
            REQUIRE(iv.k >= -12);
            REQUIRE(iv.k <= 12);
            c15_up |= iv.c == 15 && iv.k > 0;
            c0_down |= iv.c == 0 && iv.k < 0;
            ++c_hist[static_cast<std::size_t>(iv.c)];
        }
        CHECK_FALSE(c15_up);
        CHECK_FALSE(c0_down);
        const double expected = draws / 16.0;
        double chi2 = 0.0;
        for (int h : c_hist) {
            chi2 += (h - expected) * (h - expected) / expected;
        }
        // 15 degrees of freedom; 0.99 quantile is 30.58.
        CHECK(chi2 < 30.58);
    }

    TEST_CASE("k given c is uniform over the feasible range")
    {
        RandomSource rng(2);
        std::array<int, 25> hist{};
        int n = 0;
        while (n < 20000) {
            const Intervals iv = sample_intervals(rng);
            if (iv.c == 4) {
                ++hist[static_cast<std::size_t>(iv.k + 12)];
                ++n;
            }
        }
        // Feasible k for c = 4: -4..11, 16 values.
        double chi2 = 0.0;
        for (int k = -12; k <= 12; ++k) {
            const int h = hist[static_cast<std::size_t>(k + 12)];
            if (k < -4 || k > 11) {
                CHECK(h == 0);
            } else {
                chi2 += (h - n / 16.0) * (h - n / 16.0) / (n / 16.0);
            }
        }
        CHECK(chi2 < 30.58);
    }

    TEST_CASE("epoch parity")
    {
        for (int e = 0; e < 20; ++e) {
            CHECK(epoch_kind(TrainMode::Alternating, e) == (e % 2 == 0 ? EpochKind::Ssl : EpochKind::Supervised));
            CHECK(epoch_kind(TrainMode::Ssl24, e) == EpochKind::Ssl);
            CHECK(epoch_kind(TrainMode::Ssl12, e) == EpochKind::Ssl);
            CHECK(epoch_kind(TrainMode::Supervised, e) == EpochKind::Supervised);
        }
    }

    TEST_CASE("learning-rate schedule")
    {
        for (std::uint64_t total : {1u, 7u, 40u, 1000u}) {
            const double lr = 1e-3;
            int at_max = 0;
            double prev = 0.0;
            bool rising = true;
            const auto warmup = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(0.05 * total)));
            for (std::uint64_t s = 0; s < total; ++s) {
                const double v = learning_rate(s, total, lr, 0.05);
                CHECK(v >= 0.0);
                CHECK(v <= lr);
                at_max += v == lr ? 1 : 0;
                if (s < warmup) {
                    CHECK(v == doctest::Approx(lr * static_cast<double>(s + 1) / static_cast<double>(warmup)));
                    CHECK(v > prev);
                } else {
                    rising = false;
                    CHECK(v <= prev);
                }
                prev = v;
            }
            CHECK(at_max == 1);
            if (total > 1) {
                CHECK_FALSE(rising);
            }
            if (total >= 40) {
                CHECK(learning_rate(total - 1, total, lr, 0.05) < 1e-2 * lr);
            }
        }
        CHECK_THROWS_AS(learning_rate(0, 0, 1e-3, 0.05), std::invalid_argument);
    }

    TEST_CASE("mode names and validation")
    {
        for (TrainMode m : {TrainMode::Ssl12, TrainMode::Ssl24, TrainMode::Supervised, TrainMode::Alternating}) {
            CHECK(parse_train_mode(to_string(m)) == m);
        }
        CHECK_THROWS_AS(parse_train_mode("ssl36"), ConfigError);
        TrainConfig c = small_config(TrainMode::Ssl24);
        CHECK_NOTHROW(c.validate(tiny_config(2)));
        CHECK_THROWS_AS(c.validate(tiny_config(1)), ConfigError);
        c.omega = 5;
        CHECK_THROWS_AS(c.validate(tiny_config(2)), ConfigError);
        c = small_config(TrainMode::Ssl24);
        c.ablation_crossentropy = true;
        CHECK_THROWS_AS(c.validate(tiny_config(2)), ConfigError);
        c = small_config(TrainMode::Ssl12);
        c.probe_size = 50;
        CHECK_THROWS_AS(c.validate(tiny_config(1)), ConfigError);
        c = small_config(TrainMode::Supervised);
        c.label_fraction = 0.0;
        CHECK_THROWS_AS(c.validate(tiny_config(2)), ConfigError);
    }

    TEST_CASE("first ssl24 batch loss is bounded by the uniform-prediction losses")
    {
        const auto tracks = synthetic_tracks(8, 3);
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            TrainConfig config = small_config(TrainMode::Ssl24);
            config.seed = seed;
            Trainer trainer(config, desk_chromanet_config(2));
            trainer.plan(tracks.size(), 0);
            const auto batch = fixed_views(tracks, seed, false);
            const StepRecord r = trainer.train_step(batch, EpochKind::Ssl);
            CHECK(std::isfinite(r.loss.total));
            CHECK(r.loss.total <= 1.5 + 3.0 * std::numbers::ln2 + 1e-9);
            CHECK(r.loss.total == doctest::Approx(r.loss.cpsd_total() + r.loss.bce_total()));
        }
    }

    TEST_CASE("identical seeds give identical steps")
    {
        const auto tracks = synthetic_tracks(8, 4);
        std::vector<double> losses[2];
        for (auto& out : losses) {
            Trainer trainer(small_config(TrainMode::Ssl24), tiny_config(2));
            trainer.plan(tracks.size(), 0);
            for (std::uint64_t s = 0; s < 2; ++s) {
                out.push_back(trainer.train_step(fixed_views(tracks, 100 + s, false), EpochKind::Ssl).loss.total);
            }
        }
        CHECK(losses[0] == losses[1]);
    }

    TEST_CASE("train_step needs a plan")
    {
        const auto tracks = synthetic_tracks(2, 5);
        Trainer trainer(small_config(TrainMode::Ssl24), tiny_config(2));
        CHECK_THROWS_AS(trainer.train_step(fixed_views(tracks, 1, false), EpochKind::Ssl), std::logic_error);
    }

    TEST_CASE("supervised substitution leaves the A-to-A term untouched")
    {
        const auto tracks = synthetic_tracks(4, 6);
        BasicChromaNet<float> net(tiny_config(1));
        RandomSource rng(7);
        net.initialize(rng);
        const auto ssl = fixed_views(tracks, 9, false);
        const auto sup = fixed_views(tracks, 9, true);
        NormState n1, n2;
        const auto a = batch_objective<float>(net, n1, ssl, {7, false}, std::span<float>());
        const auto b = batch_objective<float>(net, n2, sup, {7, false}, std::span<float>());
        CHECK(a.l_aa == b.l_aa);
        CHECK(a.l_ab != b.l_ab);
    }

    TEST_CASE("one supervised epoch on 10 labeled tracks reduces the training loss")
    {
        const auto tracks = synthetic_tracks(10, 8);
        TrainConfig config = small_config(TrainMode::Supervised);
        config.batch_size = 2;
        config.epochs = 1;
        config.warmup_fraction = 0.0;
        Trainer trainer(config, desk_chromanet_config(2));
        const auto probe = fixed_views(tracks, 21, true);
        const double before = eval_loss(trainer.model(), probe, config);
        const auto reports = trainer.fit({}, tracks);
        REQUIRE(reports.size() == 1);
        CHECK(reports[0].kind == EpochKind::Supervised);
        CHECK(reports[0].steps == 5);
        const double after = eval_loss(trainer.model(), probe, config);
        MESSAGE("supervised loss " << before << " -> " << after);
        CHECK(after < before);
    }

    TEST_CASE("alternating training runs ssl, sup, ssl, sup")
    {
        const auto tracks = synthetic_tracks(6, 10);
        Trainer trainer(small_config(TrainMode::Alternating), tiny_config(2));
        std::vector<EpochKind> kinds;
        std::vector<EpochKind> step_kinds;
        trainer.fit(tracks, tracks, [&](const StepRecord& r) { step_kinds.push_back(r.kind); },
                    [&](const EpochReport& r) { kinds.push_back(r.kind); });
        CHECK(kinds == std::vector<EpochKind>{EpochKind::Ssl, EpochKind::Supervised, EpochKind::Ssl, EpochKind::Supervised});
        CHECK(step_kinds.size() == trainer.total_steps());
        CHECK(trainer.epoch() == 4);
        CHECK(trainer.global_step() == 8);
    }

    TEST_CASE("alternating training needs both datasets")
    {
        const auto tracks = synthetic_tracks(2, 12);
        const std::vector<TrainingTrack> none;
        Trainer alt(small_config(TrainMode::Alternating), tiny_config(2));
        CHECK_THROWS_AS(alt.fit(tracks, none), std::invalid_argument);
        CHECK_THROWS_AS(alt.fit(none, tracks), std::invalid_argument);
        Trainer ssl(small_config(TrainMode::Ssl24), tiny_config(2));
        CHECK_THROWS_AS(ssl.fit(none, tracks), std::invalid_argument);
        Trainer sup(small_config(TrainMode::Supervised), tiny_config(2));
        CHECK_THROWS_AS(sup.fit(tracks, none), std::invalid_argument);
    }

    TEST_CASE("label fraction 0.1 uses a tenth of the labels every supervised epoch")
    {
        std::vector<TrainingTrack> labeled(100);
        for (std::size_t i = 0; i < labeled.size(); ++i) {
            labeled[i].id = "t" + std::to_string(i);
            labeled[i].label = KeyLabel::from_index24(static_cast<int>(i % 24));
        }
        TrainConfig config = small_config(TrainMode::Alternating);
        config.label_fraction = 0.1;
        Trainer trainer(config, tiny_config(2));
        const auto subset = trainer.labeled_subset(labeled);
        CHECK(subset.size() == 10);
        CHECK(trainer.labeled_subset(labeled) == subset);
        // Same subset in every epoch: the plan counts ceil(10 / 4) = 3 steps per supervised epoch.
        trainer.plan(40, labeled.size());
        CHECK(trainer.total_steps() == 2 * 10 + 2 * 3);
    }

    TEST_CASE("alternating loss is at most the ssl-only loss with consistent labels")
    {
        // Mean training loss over the last four of 20 epochs; the alternating
        // run uses the unlabeled tracks as its labeled set.
        const auto tracks = synthetic_tracks(32, 13);
        double loss[2] = {0.0, 0.0};
        for (int variant = 0; variant < 2; ++variant) {
            TrainConfig config = small_config(variant == 0 ? TrainMode::Ssl24 : TrainMode::Alternating);
            config.epochs = 20;
            Trainer trainer(config, desk_chromanet_config(2));
            const auto reports = trainer.fit(tracks, variant == 0 ? std::vector<TrainingTrack>{} : tracks);
            for (std::size_t e = reports.size() - 4; e < reports.size(); ++e) {
                loss[variant] += reports[e].mean_loss.total / 4.0;
            }
        }
        MESSAGE("late training loss: ssl-only " << loss[0] << ", alternating " << loss[1]);
        CHECK(loss[1] <= loss[0]);
    }

    TEST_CASE("collapse monitor")
    {
        std::array<std::size_t, kNumChroma> same{};
        same[3] = 200;
        CHECK(histogram_entropy_bits(same) == 0.0);
        std::array<std::size_t, kNumChroma> flat{};
        flat.fill(10);
        CHECK(histogram_entropy_bits(flat) == doctest::Approx(std::log2(12.0)).epsilon(1e-12));

        // Zero weights give uniform profiles, whose argmax is always chroma 0.
        Model model(tiny_config(1));
        std::fill(model.net.parameters().begin(), model.net.parameters().end(), 0.0f);
        RandomSource rng(14);
        std::vector<CqtMatrix> probe;
        for (int i = 0; i < 100; ++i) {
            CqtMatrix x(8);
            for (float& v : x.data) {
                v = static_cast<float>(uniform_real(rng));
            }
            probe.push_back(x);
        }
        const CollapseReport r = collapse_monitor(model, probe);
        CHECK(r.entropy_bits == 0.0);
        CHECK(r.collapsed);
        CHECK(r.histogram[0] == 100);
        probe.pop_back();
        CHECK_THROWS_AS(collapse_monitor(model, probe), std::invalid_argument);
    }

    TEST_CASE("a trained-from-scratch model is not collapsed")
    {
        Model model(tiny_config(1));
        RandomSource rng(15);
        model.net.initialize(rng);
        std::vector<CqtMatrix> probe;
        for (int i = 0; i < 120; ++i) {
            CqtMatrix x(8);
            for (float& v : x.data) {
                v = static_cast<float>(uniform_real(rng));
            }
            probe.push_back(x);
        }
        CHECK(collapse_monitor(model, probe).entropy_bits > 1.0);
    }

    TEST_CASE("non-finite loss names the batch")
    {
        auto tracks = synthetic_tracks(2, 16);
        for (float& v : tracks[1].cqt.data) {
            v = std::numeric_limits<float>::quiet_NaN();
        }
        Trainer trainer(small_config(TrainMode::Ssl24), tiny_config(2));
        trainer.plan(2, 0);
        try {
            trainer.train_step(fixed_views(tracks, 1, false), EpochKind::Ssl);
            FAIL("expected a non-finite loss");
        } catch (const NonFiniteLossError& e) {
            CHECK(e.batch_ids() == std::vector<std::string>{tracks[0].id, tracks[1].id});
            CHECK(std::string(e.what()).find(tracks[1].id) != std::string::npos);
        }
        CHECK(trainer.global_step() == 0);
    }

    TEST_CASE("checkpoint round trip reproduces the next step bitwise")
    {
        const auto tracks = synthetic_tracks(8, 17);
        const fs::path dir = scratch("ckpt");
        for (TrainMode mode : {TrainMode::Ssl12, TrainMode::Ssl24}) {
            Trainer trainer(small_config(mode), net_for(mode));
            trainer.plan(tracks.size(), 0);
            trainer.train_step(fixed_views(tracks, 1, false), EpochKind::Ssl);
            trainer.save(dir / "a.ckpt");
            Trainer restored = Trainer::load(dir / "a.ckpt");
            CHECK(restored.config() == trainer.config());
            CHECK(restored.global_step() == trainer.global_step());
            CHECK(restored.model().norm == trainer.model().norm);
            const auto batch = fixed_views(tracks, 2, false);
            const StepRecord a = trainer.train_step(batch, EpochKind::Ssl);
            const StepRecord b = restored.train_step(batch, EpochKind::Ssl);
            CHECK(a.loss.total == b.loss.total);
            CHECK(a.lr == b.lr);
            const auto pa = trainer.model().net.parameters();
            const auto pb = restored.model().net.parameters();
            CHECK(std::equal(pa.begin(), pa.end(), pb.begin(), pb.end()));
        }
        CHECK_THROWS_AS(Trainer::load(dir / "missing.ckpt"), DataError);
        std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
        CHECK_THROWS_AS(Trainer::load(dir / "junk.ckpt"), DataError);
    }

    TEST_CASE("resuming from an epoch checkpoint matches the uninterrupted run")
    {
        const auto tracks = synthetic_tracks(8, 18);
        const fs::path dir = scratch("resume");
        TrainConfig config = small_config(TrainMode::Alternating);
        Trainer full(config, tiny_config(2));
        full.fit(tracks, tracks);

        Trainer first(config, tiny_config(2));
        first.plan(tracks.size(), tracks.size());
        first.run_epoch(tracks, tracks);
        first.run_epoch(tracks, tracks);
        first.save(dir / "e2.ckpt");
        Trainer resumed = Trainer::load(dir / "e2.ckpt");
        CHECK(resumed.epoch() == 2);
        const auto rest = resumed.fit(tracks, tracks);
        REQUIRE(rest.size() == 2);
        CHECK(rest[0].epoch == 2);
        CHECK(rest[1].epoch == 3);
        REQUIRE(resumed.history().size() == full.history().size());
        for (std::size_t i = 0; i < full.history().size(); ++i) {
            CHECK(resumed.history()[i].mean_loss.total == full.history()[i].mean_loss.total);
        }
        const auto pa = full.model().net.parameters();
        const auto pb = resumed.model().net.parameters();
        CHECK(std::equal(pa.begin(), pa.end(), pb.begin(), pb.end()));
    }

    TEST_CASE("50 desk-scale epochs reduce the mean loss")
    {
        const auto tracks = synthetic_tracks(48, 19, 10.0);
        TrainConfig config;
        config.mode = TrainMode::Ssl24;
        config.epochs = 50;
        config.seed = 19;
        Trainer trainer(config, desk_chromanet_config(2));
        const auto reports = trainer.fit(tracks, {});
        REQUIRE(reports.size() == 50);
        MESSAGE("epoch 1 loss " << reports.front().mean_loss.total << ", epoch 50 loss " << reports.back().mean_loss.total);
        CHECK(reports.back().mean_loss.total < reports.front().mean_loss.total);
    }

    TEST_CASE("analytic gradients match finite differences in double precision")
    {
        struct Case {
            const char* name;
            int out_channels;
            bool fc;
            bool labeled;
            bool crossentropy;
        };
        const Case cases[] = {
            {"ssl24", 2, false, false, false},       {"ssl12", 1, false, false, false},
            {"fc head", 1, true, false, false},      {"cross-entropy", 1, false, false, true},
            {"supervised ssl24", 2, false, true, false}, {"supervised ssl12", 1, false, true, false},
        };
        for (const Case& c : cases) {
            ChromaNetConfig config = tiny_config(c.out_channels);
            config.ablation_fc_head = c.fc;
            for (std::uint64_t seed : {3u, 4u}) {
                const GradCheck r = gradient_check(config, c.labeled, c.crossentropy, seed);
                CHECK(r.checked == BasicChromaNet<double>(config).parameter_count());
                CHECK_MESSAGE(r.worst < 1e-4, c.name << " seed " << seed << " worst relative error " << r.worst);
            }
        }
    }
}
