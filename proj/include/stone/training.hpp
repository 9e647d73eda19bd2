#pragma once

#include "stone/chromanet.hpp"
#include "stone/cqt.hpp"
#include "stone/evaluation.hpp"
#include "stone/objectives.hpp"
#include "stone/random.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stone {

// ---------------------------------------------------------------------------
// Model bundle and inference

struct Model {
    ChromaNet net;
    NormState norm;
    Calibration calibration;
    bool calibrated = false;

    explicit Model(ChromaNetConfig config);
    bool structured() const { return net.config().out_channels == 2; }
};

/// Crop used at inference and calibration (no transposition).
CroppedCqt inference_crop(const CqtMatrix& x);

/// Uncalibrated 12-dim profile: g (or the ablation head) for 12-dim models,
/// lambda for structured models.
Ksp predict_profile(const Model& model, const CqtMatrix& x);
/// Uncalibrated structured output. Throws std::logic_error on 12-dim models.
KeyModeMatrix predict_matrix(const Model& model, const CqtMatrix& x);
/// Calibrated decoding (identity calibration if the model was never calibrated).
KeyPrediction predict_key(const Model& model, const CqtMatrix& x);

/// Computes and stores the calibration of `model` from a C major clip.
Calibration calibrate(Model& model, const CqtMatrix& x_cal);
Calibration calibrate(Model& model, const AudioClip& clip, const CqtParams& params = {});

// ---------------------------------------------------------------------------
// Configuration

enum class TrainMode { Ssl12, Ssl24, Supervised, Alternating };

const char* to_string(TrainMode mode);
/// Throws ConfigError.
TrainMode parse_train_mode(const std::string& text);

struct TrainConfig {
    TrainMode mode = TrainMode::Ssl24;
    int omega = 7;
    int epochs = 30;
    int batch_size = 16;
    double lr = 1e-3;
    double warmup_fraction = 0.05;
    double weight_decay = 0.01;
    double segment_seconds = 4.0;
    /// Share of the labeled set used by supervised epochs.
    double label_fraction = 1.0;
    /// Replace the CPSD terms by 12-class cross-entropies (12-dim models).
    bool ablation_crossentropy = false;
    std::uint64_t seed = 0;
    int probe_size = 128;
    double collapse_threshold_bits = 1.0;

    /// Throws ConfigError, including when the network does not fit the mode.
    void validate(const ChromaNetConfig& net) const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Sampling and objectives

struct Intervals {
    int c = 0;
    int k = 0;
};

/// c uniform on 0..15; k uniform on -12..12, redrawn until 0 <= c + k <= 15.
Intervals sample_intervals(RandomSource& rng);

/// One training item: the three crops the objective needs. For supervised
/// items b_c is absent and the label provides oracles instead.
struct ViewTriple {
    CroppedCqt a_c;
    std::optional<CroppedCqt> b_c;
    CroppedCqt a_ck;
    Intervals intervals;
    std::optional<KeyLabel> label;
    std::string source_id;
};

ViewTriple make_views(const SegmentPair& pair, Intervals intervals, std::optional<KeyLabel> label = std::nullopt);

struct ObjectiveOptions {
    int omega = 7;
    bool ablation_crossentropy = false;
};

/// Batch-mean loss of the items under the network; the gradient (if grad is
/// non-empty) is accumulated into grad. Structured networks use batch
/// statistics over all views and update `norm`.
template <typename S>
LossBreakdown batch_objective(const BasicChromaNet<S>& net, NormState& norm, std::span<const ViewTriple> items,
                              const ObjectiveOptions& options, std::span<S> grad);

extern template LossBreakdown batch_objective<float>(const BasicChromaNet<float>&, NormState&,
                                                     std::span<const ViewTriple>, const ObjectiveOptions&,
                                                     std::span<float>);
extern template LossBreakdown batch_objective<double>(const BasicChromaNet<double>&, NormState&,
                                                      std::span<const ViewTriple>, const ObjectiveOptions&,
                                                      std::span<double>);

// ---------------------------------------------------------------------------
// Optimisation

struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::vector<float> m;
    std::vector<float> v;
    std::uint64_t t = 0;

    void step(std::span<float> params, std::span<const float> grad, double lr);
};

/// Linear warm-up over max(1, round(warmup_fraction * total)) steps up to
/// `lr`, then cosine decay that would reach 0 one step after the last.
double learning_rate(std::uint64_t step, std::uint64_t total, double lr, double warmup_fraction);

enum class EpochKind { Ssl, Supervised };

const char* to_string(EpochKind kind);
/// Alternating mode: even epochs are SSL, odd epochs supervised.
EpochKind epoch_kind(TrainMode mode, int epoch);

struct TrainingTrack {
    std::string id;
    CqtMatrix cqt;
    std::optional<KeyLabel> label;
};

struct StepRecord {
    int epoch = 0;
    std::uint64_t step = 0;
    EpochKind kind = EpochKind::Ssl;
    double lr = 0.0;
    LossBreakdown loss;
};

struct EpochReport {
    int epoch = 0;
    EpochKind kind = EpochKind::Ssl;
    int steps = 0;
    LossBreakdown mean_loss;
};

struct CollapseReport {
    double entropy_bits = 0.0;
    bool collapsed = false;
    std::array<std::size_t, kNumChroma> histogram{};
};

/// Entropy of the argmax histogram of the model's profiles over a probe set
/// of at least 100 items. Throws std::invalid_argument on smaller sets.
CollapseReport collapse_monitor(const Model& model, std::span<const CqtMatrix> probe, double threshold_bits = 1.0);

/// Raised when a step produces a non-finite loss; the message lists the
/// source ids of the batch.
class NonFiniteLossError : public std::runtime_error {
public:
    NonFiniteLossError(const std::string& what, std::vector<std::string> batch_ids)
        : std::runtime_error(what), batch_ids_(std::move(batch_ids))
    {
    }
    const std::vector<std::string>& batch_ids() const { return batch_ids_; }

private:
    std::vector<std::string> batch_ids_;
};

class Trainer {
public:
    Trainer(TrainConfig config, ChromaNetConfig net, CqtParams frontend = {});

    const TrainConfig& config() const { return config_; }
    const CqtParams& frontend() const { return frontend_; }
    Model& model() { return model_; }
    const Model& model() const { return model_; }
    int epoch() const { return epoch_; }
    std::uint64_t global_step() const { return step_; }
    std::uint64_t total_steps() const { return total_steps_; }
    const std::vector<EpochReport>& history() const { return history_; }

    /// Fixes the schedule length from the dataset sizes; fit() calls it
    /// before the first step.
    void plan(std::size_t unlabeled_count, std::size_t labeled_count);

    /// Applies label_fraction (seeded, round half up) to a labeled set.
    std::vector<const TrainingTrack*> labeled_subset(std::span<const TrainingTrack> labeled) const;

    /// One epoch of the kind given by the mode and the epoch counter.
    EpochReport run_epoch(std::span<const TrainingTrack> unlabeled, std::span<const TrainingTrack> labeled,
                          const std::function<void(const StepRecord&)>& on_step = {});

    /// Runs the remaining epochs up to config().epochs. Throws
    /// std::invalid_argument when a dataset the mode needs is empty.
    std::vector<EpochReport> fit(std::span<const TrainingTrack> unlabeled, std::span<const TrainingTrack> labeled,
                                 const std::function<void(const StepRecord&)>& on_step = {},
                                 const std::function<void(const EpochReport&)>& on_epoch = {});

    /// Gradient step on an explicit batch.
    StepRecord train_step(std::span<const ViewTriple> batch, EpochKind kind);

    void save(const std::filesystem::path& path) const;
    /// Throws DataError on unreadable or incompatible files.
    static Trainer load(const std::filesystem::path& path);

private:
    TrainConfig config_;
    CqtParams frontend_;
    Model model_;
    AdamW optimizer_;
    int epoch_ = 0;
    std::uint64_t step_ = 0;
    std::uint64_t total_steps_ = 0;
    std::vector<EpochReport> history_;
};

/// Reads only the model part of a checkpoint.
Model load_model(const std::filesystem::path& path, CqtParams* frontend = nullptr);
/// Rewrites the calibration stored in a checkpoint.
void store_calibration(const std::filesystem::path& path, const Calibration& calibration);

}  // namespace stone
