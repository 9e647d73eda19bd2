#include "stone/training.hpp"

#include "stone/config.hpp"
#include "stone/datasets.hpp"
#include "stone/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

namespace stone {

namespace {

template <typename S>
std::vector<double> to_double(const std::vector<S>& v)
{
    return {v.begin(), v.end()};
}

template <typename S>
std::vector<S> from_double(const std::vector<double>& v)
{
    std::vector<S> out(v.size());
    std::transform(v.begin(), v.end(), out.begin(), [](double x) { return static_cast<S>(x); });
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model and inference

Model::Model(ChromaNetConfig config) : net(std::move(config)) {}

CroppedCqt inference_crop(const CqtMatrix& x)
{
    return pitch_transpose(x, 0);
}

Ksp predict_profile(const Model& model, const CqtMatrix& x)
{
    const std::vector<float> features = model.net.forward(inference_crop(x));
    if (model.structured()) {
        return lambda_of(structured_head(to_double(features), model.norm));
    }
    if (model.net.config().ablation_fc_head) {
        return model.net.fc_head(features);
    }
    return octave_pool_g(to_double(features));
}

KeyModeMatrix predict_matrix(const Model& model, const CqtMatrix& x)
{
    if (!model.structured()) {
        throw std::logic_error("model has no mode output");
    }
    return structured_head(to_double(model.net.forward(inference_crop(x))), model.norm);
}

KeyPrediction predict_key(const Model& model, const CqtMatrix& x)
{
    if (model.structured()) {
        return decode_key(predict_matrix(model, x), model.calibration);
    }
    return decode_key(predict_profile(model, x), Calibration{model.calibration.q_cal, false});
}

Calibration calibrate(Model& model, const CqtMatrix& x_cal)
{
    const Calibration cal = model.structured() ? calibrate_from_matrix(predict_matrix(model, x_cal))
                                               : calibrate_from_profile(predict_profile(model, x_cal));
    model.calibration = cal;
    model.calibrated = true;
    return cal;
}

Calibration calibrate(Model& model, const AudioClip& clip, const CqtParams& params)
{
    return calibrate(model, compute_cqt(clip, params));
}

// ---------------------------------------------------------------------------
// Configuration

const char* to_string(TrainMode mode)
{
    switch (mode) {
    case TrainMode::Ssl12: return "ssl12";
    case TrainMode::Ssl24: return "ssl24";
    case TrainMode::Supervised: return "supervised";
    case TrainMode::Alternating: return "alternating";
    }
    return "?";
}

TrainMode parse_train_mode(const std::string& text)
{
    for (TrainMode m : {TrainMode::Ssl12, TrainMode::Ssl24, TrainMode::Supervised, TrainMode::Alternating}) {
        if (text == to_string(m)) {
            return m;
        }
    }
    throw ConfigError("unknown training mode '" + text + "' (ssl12, ssl24, supervised, alternating)");
}

void TrainConfig::validate(const ChromaNetConfig& net) const
{
    if (omega != 1 && omega != 7) {
        throw ConfigError("omega must be 1 or 7");
    }
    if (epochs < 1) {
        throw ConfigError("epochs must be positive");
    }
    if (batch_size < 1) {
        throw ConfigError("batch_size must be positive");
    }
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw ConfigError("lr must be positive");
    }
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
        throw ConfigError("warmup_fraction must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("weight_decay must be non-negative");
    }
    if (!(segment_seconds > 0.0)) {
        throw ConfigError("segment_seconds must be positive");
    }
    if (!(label_fraction > 0.0 && label_fraction <= 1.0)) {
        throw ConfigError("label_fraction must lie in (0, 1]");
    }
    if (probe_size < 100) {
        throw ConfigError("probe_size must be at least 100");
    }
    if (!(collapse_threshold_bits >= 0.0)) {
        throw ConfigError("collapse_threshold_bits must be non-negative");
    }
    const int want_channels = mode == TrainMode::Ssl12 ? 1 : 2;
    if (net.out_channels != want_channels) {
        throw ConfigError(std::string("mode ") + to_string(mode) + " needs out_channels = " +
                          std::to_string(want_channels));
    }
    if (ablation_crossentropy && mode != TrainMode::Ssl12) {
        throw ConfigError("the cross-entropy ablation is defined for ssl12 only");
    }
    if (net.ablation_fc_head && mode != TrainMode::Ssl12) {
        throw ConfigError("the fully connected head ablation is defined for ssl12 only");
    }
    net.validate();
}

// ---------------------------------------------------------------------------
// Sampling

Intervals sample_intervals(RandomSource& rng)
{
    Intervals iv;
    iv.c = static_cast<int>(uniform_int(rng, 0, kMaxCrop));
    do {
        iv.k = static_cast<int>(uniform_int(rng, -kNumChroma, kNumChroma));
    } while (iv.c + iv.k < 0 || iv.c + iv.k > kMaxCrop);
    return iv;
}

ViewTriple make_views(const SegmentPair& pair, Intervals intervals, std::optional<KeyLabel> label)
{
    ViewTriple v;
    v.a_c = pitch_transpose(pair.xa, intervals.c);
    if (!label) {
        v.b_c = pitch_transpose(pair.xb, intervals.c);
    }
    v.a_ck = pitch_transpose(pair.xa, intervals.c + intervals.k);
    v.intervals = intervals;
    v.label = label;
    v.source_id = pair.source_id;
    return v;
}

// ---------------------------------------------------------------------------
// Objective

template <typename S>
LossBreakdown batch_objective(const BasicChromaNet<S>& net, NormState& norm, std::span<const ViewTriple> items,
                              const ObjectiveOptions& options, std::span<S> grad)
{
    using Net = BasicChromaNet<S>;
    using Trace = typename Net::Trace;
    const bool want_grad = !grad.empty();
    const bool structured = net.config().out_channels == 2;
    const bool fc = net.config().ablation_fc_head;
    if (items.empty()) {
        throw std::invalid_argument("empty batch");
    }

    // Forward every view; slot 0 = A_c, 1 = B_c, 2 = A_{c+k}.
    struct Pass {
        std::vector<S> features;
        Trace trace;
        bool present = false;
    };
    std::vector<std::array<Pass, 3>> passes(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        const ViewTriple& item = items[i];
        if (!item.b_c && !item.label) {
            throw std::invalid_argument("item without B segment needs a label");
        }
        const CroppedCqt* views[3] = {&item.a_c, item.b_c ? &*item.b_c : nullptr, &item.a_ck};
        for (int s = 0; s < 3; ++s) {
            if (views[s] == nullptr) {
                continue;
            }
            Pass& p = passes[i][static_cast<std::size_t>(s)];
            p.features = net.forward(*views[s], want_grad ? &p.trace : nullptr);
            p.present = true;
        }
    }

    // Heads.
    std::vector<std::array<Ksp, 3>> lambda(items.size());
    std::vector<std::array<ModeVector, 3>> mu(items.size());
    StructuredHeadBatch head;
    std::vector<std::pair<std::size_t, int>> head_slots;
    if (structured) {
        std::vector<std::vector<double>> features;
        for (std::size_t i = 0; i < items.size(); ++i) {
            for (int s = 0; s < 3; ++s) {
                if (passes[i][static_cast<std::size_t>(s)].present) {
                    features.push_back(to_double(passes[i][static_cast<std::size_t>(s)].features));
                    head_slots.emplace_back(i, s);
                }
            }
        }
        const std::vector<KeyModeMatrix> y = head.forward(features, norm);
        for (std::size_t n = 0; n < y.size(); ++n) {
            const auto [i, s] = head_slots[n];
            lambda[i][static_cast<std::size_t>(s)] = lambda_of(y[n]);
            mu[i][static_cast<std::size_t>(s)] = mu_of(y[n]);
        }
    } else {
        for (std::size_t i = 0; i < items.size(); ++i) {
            for (std::size_t s = 0; s < 3; ++s) {
                if (passes[i][s].present) {
                    lambda[i][s] = fc ? net.fc_head(passes[i][s].features) : octave_pool_g(to_double(passes[i][s].features));
                }
            }
        }
    }

    // Losses; supervised items take oracles in place of the B responses.
    const double scale = 1.0 / static_cast<double>(items.size());
    LossBreakdown total;
    std::vector<std::array<Ksp, 3>> d_lambda(items.size());
    std::vector<std::array<ModeVector, 3>> d_mu(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        const ViewTriple& item = items[i];
        const int k = item.intervals.k;
        std::optional<SupervisedOracles> oracle;
        if (!item.b_c) {
            oracle = supervised_oracles(*item.label, item.intervals.c);
        }
        const Responses<Ksp> y{lambda[i][0], oracle ? oracle->lambda_ref : lambda[i][1], lambda[i][2]};
        Responses<Ksp> dy;
        LossBreakdown l = options.ablation_crossentropy
                              ? crossentropy_loss(y, k, want_grad ? &dy : nullptr)
                              : cpsd_loss(y, k, options.omega, want_grad ? &dy : nullptr);
        d_lambda[i] = {dy.a_c, dy.b_c, dy.a_ck};
        if (structured) {
            const Responses<ModeVector> m{mu[i][0], oracle ? oracle->mu_ref : mu[i][1], mu[i][2]};
            Responses<ModeVector> dm;
            const LossBreakdown b = bce_loss(m, want_grad ? &dm : nullptr);
            l.bce = b.bce;
            l.total += b.total;
            d_mu[i] = {dm.a_c, dm.b_c, dm.a_ck};
        }
        total += l;
    }
    total *= scale;
    if (!want_grad) {
        return total;
    }

    // Backward through heads and backbone.
    const auto backbone = [&](std::size_t i, int s, const std::vector<double>& d_features) {
        std::vector<S> d = from_double<S>(d_features);
        net.backward(passes[i][static_cast<std::size_t>(s)].trace, d, grad);
    };
    if (structured) {
        std::vector<KeyModeMatrix> d_y(head_slots.size());
        for (std::size_t n = 0; n < head_slots.size(); ++n) {
            const auto [i, s] = head_slots[n];
            const auto su = static_cast<std::size_t>(s);
            for (int q = 0; q < kNumChroma; ++q) {
                for (int m = 0; m < 2; ++m) {
                    d_y[n].at(q, m) = scale * (d_lambda[i][su][static_cast<std::size_t>(q)] +
                                               d_mu[i][su][static_cast<std::size_t>(m)]);
                }
            }
        }
        const std::vector<std::vector<double>> d_features = head.backward(d_y);
        for (std::size_t n = 0; n < head_slots.size(); ++n) {
            backbone(head_slots[n].first, head_slots[n].second, d_features[n]);
        }
    } else {
        for (std::size_t i = 0; i < items.size(); ++i) {
            for (int s = 0; s < 3; ++s) {
                const auto su = static_cast<std::size_t>(s);
                if (!passes[i][su].present) {
                    continue;
                }
                Ksp d = d_lambda[i][su];
                for (double& v : d.values) {
                    v *= scale;
                }
                if (fc) {
                    const std::array<double, kNumChroma> d_logits = softmax_backward(lambda[i][su].values, d.values);
                    Ksp dl;
                    dl.values = d_logits;
                    backbone(i, s, net.fc_head_backward(passes[i][su].features, dl, grad));
                } else {
                    backbone(i, s, octave_pool_g_backward(lambda[i][su], d));
                }
            }
        }
    }
    return total;
}

template LossBreakdown batch_objective<float>(const BasicChromaNet<float>&, NormState&, std::span<const ViewTriple>,
                                              const ObjectiveOptions&, std::span<float>);
template LossBreakdown batch_objective<double>(const BasicChromaNet<double>&, NormState&,
                                               std::span<const ViewTriple>, const ObjectiveOptions&,
                                               std::span<double>);

// ---------------------------------------------------------------------------
// Optimisation

void AdamW::step(std::span<float> params, std::span<const float> grad, double lr)
{
    if (m.empty()) {
        m.assign(params.size(), 0.0f);
        v.assign(params.size(), 0.0f);
    }
    if (m.size() != params.size() || grad.size() != params.size()) {
        throw std::invalid_argument("optimizer state does not match the parameters");
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    const double decay = 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grad[i];
        const double mi = beta1 * m[i] + (1.0 - beta1) * g;
        const double vi = beta2 * v[i] + (1.0 - beta2) * g * g;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + eps);
        params[i] = static_cast<float>(params[i] * decay - lr * update);
    }
}

double learning_rate(std::uint64_t step, std::uint64_t total, double lr, double warmup_fraction)
{
    if (total == 0) {
        throw std::invalid_argument("empty schedule");
    }
    const auto warmup = std::max<std::uint64_t>(
        1, static_cast<std::uint64_t>(std::llround(warmup_fraction * static_cast<double>(total))));
    if (step < warmup) {
        return lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    const double progress =
        static_cast<double>(step - warmup + 1) / static_cast<double>(total - std::min(warmup, total) + 1);
    return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

const char* to_string(EpochKind kind)
{
    return kind == EpochKind::Ssl ? "ssl" : "supervised";
}

EpochKind epoch_kind(TrainMode mode, int epoch)
{
    switch (mode) {
    case TrainMode::Supervised: return EpochKind::Supervised;
    case TrainMode::Alternating: return epoch % 2 == 0 ? EpochKind::Ssl : EpochKind::Supervised;
    default: return EpochKind::Ssl;
    }
}

CollapseReport collapse_monitor(const Model& model, std::span<const CqtMatrix> probe, double threshold_bits)
{
    if (probe.size() < 100) {
        throw std::invalid_argument("collapse probe needs at least 100 items");
    }
    CollapseReport report;
    for (const CqtMatrix& x : probe) {
        ++report.histogram[static_cast<std::size_t>(predict_profile(model, x).argmax())];
    }
    report.entropy_bits = histogram_entropy_bits(report.histogram);
    report.collapsed = report.entropy_bits < threshold_bits;
    return report;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, ChromaNetConfig net, CqtParams frontend)
    : config_(std::move(config)), frontend_(frontend), model_(std::move(net))
{
    config_.validate(model_.net.config());
    RandomSource rng(derive_seed(config_.seed, 0x100));
    model_.net.initialize(rng);
    optimizer_.weight_decay = config_.weight_decay;
}

std::vector<const TrainingTrack*> Trainer::labeled_subset(std::span<const TrainingTrack> labeled) const
{
    std::vector<const TrainingTrack*> out;
    if (labeled.empty()) {
        return out;
    }
    for (std::size_t i : random_subset(labeled.size(), config_.label_fraction, derive_seed(config_.seed, 0x200))) {
        out.push_back(&labeled[i]);
    }
    return out;
}

void Trainer::plan(std::size_t unlabeled_count, std::size_t labeled_count)
{
    const auto batches = [&](std::size_t n) {
        return (n + static_cast<std::size_t>(config_.batch_size) - 1) / static_cast<std::size_t>(config_.batch_size);
    };
    std::size_t labeled_used = 0;
    if (labeled_count > 0) {
        labeled_used = static_cast<std::size_t>(
            std::floor(config_.label_fraction * static_cast<double>(labeled_count) + 0.5));
    }
    std::uint64_t total = 0;
    for (int e = 0; e < config_.epochs; ++e) {
        total += epoch_kind(config_.mode, e) == EpochKind::Ssl ? batches(unlabeled_count) : batches(labeled_used);
    }
    if (total == 0) {
        throw std::invalid_argument("training data is empty");
    }
    if (step_ > 0 && total != total_steps_) {
        throw std::invalid_argument("dataset sizes differ from the ones this run was planned with");
    }
    total_steps_ = total;
}

StepRecord Trainer::train_step(std::span<const ViewTriple> batch, EpochKind kind)
{
    if (total_steps_ == 0) {
        throw std::logic_error("plan() must run before training steps");
    }
    std::vector<float> grad(model_.net.parameter_count(), 0.0f);
    const ObjectiveOptions options{config_.omega, config_.ablation_crossentropy};
    NormState norm = model_.norm;
    const LossBreakdown loss = batch_objective<float>(model_.net, norm, batch, options, grad);
    if (!std::isfinite(loss.total)) {
        std::vector<std::string> ids;
        std::string list;
        for (const ViewTriple& item : batch) {
            ids.push_back(item.source_id);
            list += (list.empty() ? "" : ", ") + item.source_id;
        }
        throw NonFiniteLossError("non-finite loss at step " + std::to_string(step_) + "; batch: " + list,
                                 std::move(ids));
    }
    model_.norm = norm;
    StepRecord record;
    record.epoch = epoch_;
    record.step = step_;
    record.kind = kind;
    record.lr = learning_rate(std::min(step_, total_steps_ - 1), total_steps_, config_.lr, config_.warmup_fraction);
    record.loss = loss;
    optimizer_.step(model_.net.parameters(), grad, record.lr);
    ++step_;
    return record;
}

EpochReport Trainer::run_epoch(std::span<const TrainingTrack> unlabeled, std::span<const TrainingTrack> labeled,
                               const std::function<void(const StepRecord&)>& on_step)
{
    const EpochKind kind = epoch_kind(config_.mode, epoch_);
    std::vector<const TrainingTrack*> pool;
    if (kind == EpochKind::Ssl) {
        for (const TrainingTrack& t : unlabeled) {
            pool.push_back(&t);
        }
    } else {
        pool = labeled_subset(labeled);
        for (const TrainingTrack* t : pool) {
            if (!t->label) {
                throw DataError("labeled set contains the unlabeled track " + t->id);
            }
        }
    }
    if (pool.empty()) {
        throw std::invalid_argument(std::string("no tracks for a ") + to_string(kind) + " epoch");
    }

    RandomSource rng(derive_seed(config_.seed, 0x1000 + static_cast<std::uint64_t>(epoch_)));
    for (std::size_t i = pool.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i - 1)));
        std::swap(pool[i - 1], pool[j]);
    }
    const int frames = frames_for_duration(config_.segment_seconds, frontend_);

    EpochReport report;
    report.epoch = epoch_;
    report.kind = kind;
    const auto batch = static_cast<std::size_t>(config_.batch_size);
    for (std::size_t begin = 0; begin < pool.size(); begin += batch) {
        std::vector<ViewTriple> items;
        for (std::size_t i = begin; i < std::min(pool.size(), begin + batch); ++i) {
            const TrainingTrack& t = *pool[i];
            const SegmentPair pair = sample_segment_pair(t.cqt, frames, rng, frontend_, t.id);
            const Intervals iv = sample_intervals(rng);
            items.push_back(make_views(pair, iv, kind == EpochKind::Supervised ? t.label : std::nullopt));
        }
        const StepRecord record = train_step(items, kind);
        report.mean_loss += record.loss;
        ++report.steps;
        if (on_step) {
            on_step(record);
        }
    }
    report.mean_loss *= 1.0 / report.steps;
    history_.push_back(report);
    ++epoch_;
    return report;
}

std::vector<EpochReport> Trainer::fit(std::span<const TrainingTrack> unlabeled, std::span<const TrainingTrack> labeled,
                                      const std::function<void(const StepRecord&)>& on_step,
                                      const std::function<void(const EpochReport&)>& on_epoch)
{
    const bool needs_ssl = config_.mode != TrainMode::Supervised;
    const bool needs_labels = config_.mode == TrainMode::Supervised || config_.mode == TrainMode::Alternating;
    if (needs_ssl && unlabeled.empty()) {
        throw std::invalid_argument(std::string(to_string(config_.mode)) + " training needs unlabeled data");
    }
    if (needs_labels && labeled.empty()) {
        throw std::invalid_argument(std::string(to_string(config_.mode)) + " training needs labeled data");
    }
    plan(needs_ssl ? unlabeled.size() : 0, needs_labels ? labeled.size() : 0);
    std::vector<EpochReport> reports;
    while (epoch_ < config_.epochs) {
        reports.push_back(run_epoch(unlabeled, labeled, on_step));
        if (on_epoch) {
            on_epoch(reports.back());
        }
    }
    return reports;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointSchema = "stone-checkpoint/1";

nlohmann::json floats_to_binary(std::span<const float> v)
{
    std::vector<std::uint8_t> bytes(v.size() * sizeof(float));
    std::memcpy(bytes.data(), v.data(), bytes.size());
    return nlohmann::json::binary(std::move(bytes));
}

std::vector<float> binary_to_floats(const nlohmann::json& j, std::size_t expected, const char* what)
{
    if (!j.is_binary()) {
        throw DataError(std::string("checkpoint field '") + what + "' is not binary");
    }
    const auto& bytes = j.get_binary();
    if (bytes.size() != expected * sizeof(float)) {
        throw DataError(std::string("checkpoint field '") + what + "' has the wrong size");
    }
    std::vector<float> v(expected);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

nlohmann::json loss_to_json(const LossBreakdown& l)
{
    return {{"l_ab", l.l_ab}, {"l_aa", l.l_aa}, {"l_ba", l.l_ba}, {"bce", l.bce}, {"total", l.total}};
}

LossBreakdown loss_from_json(const nlohmann::json& j)
{
    LossBreakdown l;
    l.l_ab = j.at("l_ab").get<double>();
    l.l_aa = j.at("l_aa").get<double>();
    l.l_ba = j.at("l_ba").get<double>();
    l.bce = j.at("bce").get<std::array<double, 3>>();
    l.total = j.at("total").get<double>();
    return l;
}

nlohmann::json read_bundle(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open checkpoint " + path.string());
    }
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    nlohmann::json j = nlohmann::json::from_cbor(bytes, true, false);
    if (j.is_discarded() || !j.is_object()) {
        throw DataError("checkpoint " + path.string() + " is not a valid bundle");
    }
    if (j.value("schema", "") != kCheckpointSchema) {
        throw DataError("checkpoint " + path.string() + " has an unsupported schema");
    }
    return j;
}

void write_bundle(const std::filesystem::path& path, const nlohmann::json& j)
{
    const std::vector<std::uint8_t> bytes = nlohmann::json::to_cbor(j);
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) {
            throw DataError("cannot write checkpoint " + path.string());
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw DataError("cannot write checkpoint " + path.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Model model_from_bundle(const nlohmann::json& j)
{
    try {
        Model model(chromanet_config_from_json(j.at("chromanet")));
        const std::vector<float> params =
            binary_to_floats(j.at("parameters"), model.net.parameter_count(), "parameters");
        std::copy(params.begin(), params.end(), model.net.parameters().begin());
        model.norm = norm_state_from_json(j.at("norm"));
        model.calibration.q_cal = j.at("calibration").at("q_cal").get<int>();
        model.calibration.mode_swap = j.at("calibration").at("mode_swap").get<bool>();
        model.calibrated = j.at("calibrated").get<bool>();
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint holds an invalid configuration: ") + e.what());
    }
}

}  // namespace

void Trainer::save(const std::filesystem::path& path) const
{
    nlohmann::json j;
    j["schema"] = kCheckpointSchema;
    j["chromanet"] = to_json(model_.net.config());
    j["parameters"] = floats_to_binary(model_.net.parameters());
    j["norm"] = to_json(model_.norm);
    j["calibration"] = {{"q_cal", model_.calibration.q_cal}, {"mode_swap", model_.calibration.mode_swap}};
    j["calibrated"] = model_.calibrated;
    j["training"] = to_json(config_);
    j["frontend"] = to_json(frontend_);
    j["optimizer"] = {{"t", optimizer_.t}, {"m", floats_to_binary(optimizer_.m)}, {"v", floats_to_binary(optimizer_.v)}};
    j["epoch"] = epoch_;
    j["step"] = step_;
    j["total_steps"] = total_steps_;
    nlohmann::json history = nlohmann::json::array();
    for (const EpochReport& r : history_) {
        history.push_back({{"epoch", r.epoch}, {"kind", to_string(r.kind)}, {"steps", r.steps},
                           {"mean_loss", loss_to_json(r.mean_loss)}});
    }
    j["history"] = std::move(history);
    write_bundle(path, j);
}

Trainer Trainer::load(const std::filesystem::path& path)
{
    const nlohmann::json j = read_bundle(path);
    Model model = model_from_bundle(j);
    try {
        Trainer trainer(train_config_from_json(j.at("training")), model.net.config(),
                        cqt_params_from_json(j.at("frontend")));
        trainer.model_ = std::move(model);
        const nlohmann::json& opt = j.at("optimizer");
        trainer.optimizer_.t = opt.at("t").get<std::uint64_t>();
        if (trainer.optimizer_.t > 0) {
            const std::size_t n = trainer.model_.net.parameter_count();
            trainer.optimizer_.m = binary_to_floats(opt.at("m"), n, "optimizer.m");
            trainer.optimizer_.v = binary_to_floats(opt.at("v"), n, "optimizer.v");
        }
        trainer.epoch_ = j.at("epoch").get<int>();
        trainer.step_ = j.at("step").get<std::uint64_t>();
        trainer.total_steps_ = j.at("total_steps").get<std::uint64_t>();
        for (const nlohmann::json& r : j.at("history")) {
            EpochReport report;
            report.epoch = r.at("epoch").get<int>();
            report.kind = r.at("kind").get<std::string>() == "ssl" ? EpochKind::Ssl : EpochKind::Supervised;
            report.steps = r.at("steps").get<int>();
            report.mean_loss = loss_from_json(r.at("mean_loss"));
            trainer.history_.push_back(report);
        }
        return trainer;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("checkpoint holds an invalid configuration: ") + e.what());
    }
}

Model load_model(const std::filesystem::path& path, CqtParams* frontend)
{
    const nlohmann::json j = read_bundle(path);
    if (frontend != nullptr) {
        try {
            *frontend = cqt_params_from_json(j.at("frontend"));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("malformed checkpoint: ") + e.what());
        }
    }
    return model_from_bundle(j);
}

void store_calibration(const std::filesystem::path& path, const Calibration& calibration)
{
    nlohmann::json j = read_bundle(path);
    j["calibration"] = {{"q_cal", calibration.q_cal}, {"mode_swap", calibration.mode_swap}};
    j["calibrated"] = true;
    write_bundle(path, j);
}

}  // namespace stone
