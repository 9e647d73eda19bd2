#pragma once

#include "stone/cqt.hpp"
#include "stone/profiles.hpp"

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace stone {

/// Absolute-pitch calibration of a relatively trained model.
struct Calibration {
    int q_cal = 0;
    /// Swap the two mode channels (structured models only).
    bool mode_swap = false;

    friend bool operator==(const Calibration&, const Calibration&) = default;
};

/// Minimum gap between the largest and the median entry of the calibration
/// profile.
inline constexpr double kCalibrationMinContrast = 0.05;

/// q_cal is the argmax of the raw profile of the calibration clip. Throws
/// DataError "calibration sample not discriminative" if max - median < 0.05.
Calibration calibrate_from_profile(const Ksp& raw);
/// As above on lambda; mode_swap is set when the realigned matrix decodes
/// as minor.
Calibration calibrate_from_matrix(const KeyModeMatrix& raw);

/// Undoes the offset found by calibration: result[q] = y[(q + q_cal) mod 12],
/// so the calibration peak moves to chroma 0.
Ksp realign(const Ksp& y, int q_cal);
KeyModeMatrix realign(const KeyModeMatrix& y, const Calibration& cal);

struct KeyPrediction {
    int key_signature = 0;
    std::optional<Mode> mode;
    /// 12 profile values or 24 matrix values (q * 2 + m) after calibration.
    std::vector<double> scores;

    /// Throws std::logic_error if the mode is unknown.
    KeyLabel key() const;
};

/// Argmax of the realigned profile, lowest index on ties.
KeyPrediction decode_key(const Ksp& y, const Calibration& cal = {});
/// Argmax over the 24 realigned coefficients; the column gives the mode and
/// the row the key signature.
KeyPrediction decode_key(const KeyModeMatrix& y, const Calibration& cal = {});

struct EvalCounts {
    std::size_t correct = 0;
    std::size_t fifth = 0;
    std::size_t relative = 0;
    std::size_t parallel = 0;
    std::size_t wrong = 0;

    std::size_t total() const { return correct + fifth + relative + parallel + wrong; }
    friend bool operator==(const EvalCounts&, const EvalCounts&) = default;
};

/// (correct + 0.5 fifth) / total.
double ksea_from_counts(const EvalCounts& counts);
/// (correct + 0.5 fifth + 0.3 relative + 0.2 parallel) / total.
double mirex_from_counts(const EvalCounts& counts);

/// KSEA credit of predicted signature s against reference S: 1, 0.5 when
/// |s - S| is 5 or 7, else 0.
double ksea_credit(int s, int S);

struct ScoreReport {
    double score = 0.0;
    EvalCounts counts;
};

/// Signature-level accuracy; mode is ignored. Throws std::invalid_argument on
/// length mismatch.
ScoreReport ksea(std::span<const KeyPrediction> preds, std::span<const KeyLabel> refs);

enum class KeyRelation { Correct, Fifth, Relative, Parallel, Wrong };

enum class FifthDirection {
    Above,  // estimated tonic a fifth above the reference, same mode
    Both,   // a fifth above or below
};

KeyRelation mirex_relation(const KeyLabel& ref, const KeyLabel& est, FifthDirection fifth = FifthDirection::Above);
const char* relation_name(KeyRelation relation);

/// Weighted score over 24-class predictions. Throws std::invalid_argument on
/// length mismatch or missing modes.
ScoreReport mirex_score(std::span<const KeyPrediction> preds, std::span<const KeyLabel> refs,
                        FifthDirection fifth = FifthDirection::Above);

/// Counts with axes in circle-of-fifths order. 12 classes are key
/// signatures; 24 classes pair each signature's major with its relative
/// minor. Rows are references, columns predictions.
struct ConfusionMatrix {
    int classes = 12;
    std::vector<std::string> labels;
    std::vector<std::size_t> counts;

    std::size_t at(int ref, int pred) const { return counts[static_cast<std::size_t>(ref * classes + pred)]; }
    std::size_t row_sum(int ref) const;
    /// Each row divided by its sum; empty rows stay zero.
    std::vector<double> row_normalized() const;
};

ConfusionMatrix confusion_matrix(std::span<const KeyPrediction> preds, std::span<const KeyLabel> refs,
                                 bool with_mode);
void write_confusion_csv(const ConfusionMatrix& matrix, const std::filesystem::path& path);
/// Greyscale PGM rendering of the row-normalised matrix; darker is larger.
void write_confusion_image(const ConfusionMatrix& matrix, const std::filesystem::path& path, int cell_pixels = 16);

/// Time average of the CQT magnitudes folded onto the 12 pitch classes
/// (0 = C). The log compression is undone first.
std::array<double, kNumChroma> chroma_vector(const CqtMatrix& x, double log_gain = CqtParams{}.log_gain);

/// Pitch class with the highest average energy, taken as the key signature.
KeyPrediction baseline_chroma_argmax(const CqtMatrix& x, double log_gain = CqtParams{}.log_gain);

struct KeyProfiles {
    std::array<double, kNumChroma> major{};
    std::array<double, kNumChroma> minor{};
};

/// Reads {"major": [12 numbers], "minor": [12 numbers]}. Throws DataError if
/// the file is missing or malformed.
KeyProfiles load_key_profiles(const std::filesystem::path& path);

/// Pearson correlation of the chroma vector with the 24 rotated profiles,
/// scored in index24 order (majors C..B, then minors); lowest index wins ties.
/// Zero-variance input correlates as 0 with everything.
KeyPrediction baseline_template_matching(const std::array<double, kNumChroma>& chroma, const KeyProfiles& profiles);
KeyPrediction baseline_template_matching(const CqtMatrix& x, const KeyProfiles& profiles,
                                         double log_gain = CqtParams{}.log_gain);

/// One evaluated track.
struct TrackResult {
    std::string id;
    KeyLabel reference;
    KeyPrediction prediction;
};

struct EvaluationSummary {
    std::string system;
    std::size_t tracks = 0;
    ScoreReport ksea;
    std::optional<ScoreReport> mirex;
    double prediction_entropy_bits = 0.0;
};

/// KSEA always; MIREX when every prediction carries a mode.
EvaluationSummary summarize(const std::string& system, std::span<const TrackResult> results,
                            FifthDirection fifth = FifthDirection::Above);

/// Writes `<stem>.csv` (per track), `<stem>.json` (summary) and the
/// confusion matrix as `<stem>_confusion.csv` / `.pgm` into `dir`.
void write_evaluation_report(const std::filesystem::path& dir, const std::string& stem,
                             std::span<const TrackResult> results, const EvaluationSummary& summary,
                             FifthDirection fifth = FifthDirection::Above);

}  // namespace stone
