#include "stone/evaluation.hpp"

#include "stone/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace stone {

namespace {

/// Key signatures around the circle of fifths starting from C.
constexpr std::array<int, kNumChroma> kCircleOfFifths = {0, 7, 2, 9, 4, 11, 6, 1, 8, 3, 10, 5};

double median(std::array<double, kNumChroma> v)
{
    std::sort(v.begin(), v.end());
    return 0.5 * (v[5] + v[6]);
}

template <std::size_t N>
std::size_t argmax_lowest(const std::array<double, N>& v)
{
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

Calibration calibrate_from_profile(const Ksp& raw)
{
    const double top = *std::max_element(raw.values.begin(), raw.values.end());
    if (top - median(raw.values) < kCalibrationMinContrast) {
        throw DataError("calibration sample not discriminative");
    }
    return {raw.argmax(), false};
}

Calibration calibrate_from_matrix(const KeyModeMatrix& raw)
{
    Calibration cal = calibrate_from_profile(lambda_of(raw));
    const KeyPrediction decoded = decode_key(raw, cal);
    cal.mode_swap = decoded.mode == Mode::Minor;
    return cal;
}

Ksp realign(const Ksp& y, int q_cal)
{
    return y.rolled(-q_cal);
}

KeyModeMatrix realign(const KeyModeMatrix& y, const Calibration& cal)
{
    const KeyModeMatrix shifted = y.rolled(-cal.q_cal);
    return cal.mode_swap ? shifted.mode_swapped() : shifted;
}

KeyLabel KeyPrediction::key() const
{
    if (!mode) {
        throw std::logic_error("prediction carries no mode");
    }
    return KeyLabel::from_signature(key_signature, *mode);
}

KeyPrediction decode_key(const Ksp& y, const Calibration& cal)
{
    const Ksp aligned = realign(y, cal.q_cal);
    KeyPrediction p;
    p.key_signature = aligned.argmax();
    p.scores.assign(aligned.values.begin(), aligned.values.end());
    return p;
}

KeyPrediction decode_key(const KeyModeMatrix& y, const Calibration& cal)
{
    const KeyModeMatrix aligned = realign(y, cal);
    const std::size_t best = argmax_lowest(aligned.values);
    KeyPrediction p;
    p.key_signature = static_cast<int>(best / 2);
    p.mode = static_cast<Mode>(best % 2);
    p.scores.assign(aligned.values.begin(), aligned.values.end());
    return p;
}

double ksea_from_counts(const EvalCounts& counts)
{
    const auto n = static_cast<double>(counts.total());
    return n > 0 ? (static_cast<double>(counts.correct) + 0.5 * static_cast<double>(counts.fifth)) / n : 0.0;
}

double mirex_from_counts(const EvalCounts& counts)
{
    const auto n = static_cast<double>(counts.total());
    if (n == 0) {
        return 0.0;
    }
    return (static_cast<double>(counts.correct) + 0.5 * static_cast<double>(counts.fifth) +
            0.3 * static_cast<double>(counts.relative) + 0.2 * static_cast<double>(counts.parallel)) /
           n;
}

double ksea_credit(int s, int S)
{
    const int d = wrap_chroma(s - S);
    if (d == 0) {
        return 1.0;
    }
    return d == 5 || d == 7 ? 0.5 : 0.0;
}

ScoreReport ksea(std::span<const KeyPrediction> preds, std::span<const KeyLabel> refs)
{
    if (preds.size() != refs.size()) {
        throw std::invalid_argument("ksea: " + std::to_string(preds.size()) + " predictions for " +
                                    std::to_string(refs.size()) + " references");
    }
    ScoreReport report;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double credit = ksea_credit(preds[i].key_signature, refs[i].key_signature());
        if (credit == 1.0) {
            ++report.counts.correct;
        } else if (credit == 0.5) {
            ++report.counts.fifth;
        } else {
            ++report.counts.wrong;
        }
    }
    report.score = ksea_from_counts(report.counts);
    return report;
}

KeyRelation mirex_relation(const KeyLabel& ref, const KeyLabel& est, FifthDirection fifth)
{
    if (ref == est) {
        return KeyRelation::Correct;
    }
    const int d = wrap_chroma(est.tonic - ref.tonic);
    if (est.mode == ref.mode && (d == 7 || (fifth == FifthDirection::Both && d == 5))) {
        return KeyRelation::Fifth;
    }
    if (est.mode != ref.mode && est.key_signature() == ref.key_signature()) {
        return KeyRelation::Relative;
    }
    if (est.mode != ref.mode && d == 0) {
        return KeyRelation::Parallel;
    }
    return KeyRelation::Wrong;
}

const char* relation_name(KeyRelation relation)
{
    switch (relation) {
    case KeyRelation::Correct:
        return "correct";
    case KeyRelation::Fifth:
        return "fifth";
    case KeyRelation::Relative:
        return "relative";
    case KeyRelation::Parallel:
        return "parallel";
    case KeyRelation::Wrong:
        break;
    }
    return "wrong";
}

ScoreReport mirex_score(std::span<const KeyPrediction> preds, std::span<const KeyLabel> refs, FifthDirection fifth)
{
    if (preds.size() != refs.size()) {
        throw std::invalid_argument("mirex_score: " + std::to_string(preds.size()) + " predictions for " +
                                    std::to_string(refs.size()) + " references");
    }
    ScoreReport report;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (!preds[i].mode) {
            throw std::invalid_argument("mirex_score needs 24-class predictions");
        }
        switch (mirex_relation(refs[i], preds[i].key(), fifth)) {
        case KeyRelation::Correct:
            ++report.counts.correct;
            break;
        case KeyRelation::Fifth:
            ++report.counts.fifth;
            break;
        case KeyRelation::Relative:
            ++report.counts.relative;
            break;
        case KeyRelation::Parallel:
            ++report.counts.parallel;
            break;
        case KeyRelation::Wrong:
            ++report.counts.wrong;
            break;
        }
    }
    report.score = mirex_from_counts(report.counts);
    return report;
}

// ---------------------------------------------------------------------------

std::size_t ConfusionMatrix::row_sum(int ref) const
{
    const auto begin = counts.begin() + static_cast<std::ptrdiff_t>(ref * classes);
    return std::accumulate(begin, begin + classes, std::size_t{0});
}

std::vector<double> ConfusionMatrix::row_normalized() const
{
    std::vector<double> out(counts.size(), 0.0);
    for (int r = 0; r < classes; ++r) {
        const std::size_t total = row_sum(r);
        if (total == 0) {
            continue;
        }
        for (int c = 0; c < classes; ++c) {
            out[static_cast<std::size_t>(r * classes + c)] =
                static_cast<double>(at(r, c)) / static_cast<double>(total);
        }
    }
    return out;
}

ConfusionMatrix confusion_matrix(std::span<const KeyPrediction> preds, std::span<const KeyLabel> refs, bool with_mode)
{
    if (preds.size() != refs.size()) {
        throw std::invalid_argument("confusion_matrix: length mismatch");
    }
    ConfusionMatrix m;
    m.classes = with_mode ? 24 : 12;
    m.counts.assign(static_cast<std::size_t>(m.classes * m.classes), 0);
    // position[signature * 2 + mode] -> axis index.
    std::array<int, 24> position{};
    for (int i = 0; i < kNumChroma; ++i) {
        const int q = kCircleOfFifths[static_cast<std::size_t>(i)];
        if (with_mode) {
            position[static_cast<std::size_t>(q * 2)] = 2 * i;
            position[static_cast<std::size_t>(q * 2 + 1)] = 2 * i + 1;
            m.labels.push_back(format_key(KeyLabel::from_signature(q, Mode::Major)));
            m.labels.push_back(format_key(KeyLabel::from_signature(q, Mode::Minor)));
        } else {
            position[static_cast<std::size_t>(q * 2)] = i;
            position[static_cast<std::size_t>(q * 2 + 1)] = i;
            m.labels.emplace_back(chroma_name(q));
        }
    }
    const auto axis = [&](int signature, Mode mode) {
        return position[static_cast<std::size_t>(signature * 2 + (with_mode ? static_cast<int>(mode) : 0))];
    };
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (with_mode && !preds[i].mode) {
            throw std::invalid_argument("confusion_matrix: prediction without mode");
        }
        const int r = axis(refs[i].key_signature(), refs[i].mode);
        const int c = axis(preds[i].key_signature, preds[i].mode.value_or(Mode::Major));
        ++m.counts[static_cast<std::size_t>(r * m.classes + c)];
    }
    return m;
}

void write_confusion_csv(const ConfusionMatrix& matrix, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << "reference";
    for (const auto& l : matrix.labels) {
        out << ',' << l;
    }
    out << '\n';
    for (int r = 0; r < matrix.classes; ++r) {
        out << matrix.labels[static_cast<std::size_t>(r)];
        for (int c = 0; c < matrix.classes; ++c) {
            out << ',' << matrix.at(r, c);
        }
        out << '\n';
    }
}

void write_confusion_image(const ConfusionMatrix& matrix, const std::filesystem::path& path, int cell_pixels)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    const int side = matrix.classes * cell_pixels;
    out << "P5\n" << side << ' ' << side << "\n255\n";
    const auto normalized = matrix.row_normalized();
    std::vector<unsigned char> row(static_cast<std::size_t>(side));
    for (int y = 0; y < side; ++y) {
        const int r = y / cell_pixels;
        for (int x = 0; x < side; ++x) {
            const double v = normalized[static_cast<std::size_t>(r * matrix.classes + x / cell_pixels)];
            row[static_cast<std::size_t>(x)] = static_cast<unsigned char>(std::lround(255.0 * (1.0 - v)));
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

// ---------------------------------------------------------------------------

std::array<double, kNumChroma> chroma_vector(const CqtMatrix& x, double log_gain)
{
    std::array<double, kNumChroma> chroma{};
    for (int t = 0; t < x.frames; ++t) {
        const auto frame = x.frame(t);
        for (int p = 0; p < kCqtBins; ++p) {
            // Bin 0 is A0, pitch class 9.
            chroma[static_cast<std::size_t>((p + 9) % kNumChroma)] +=
                std::expm1(static_cast<double>(frame[static_cast<std::size_t>(p)])) / log_gain;
        }
    }
    if (x.frames > 0) {
        for (double& c : chroma) {
            c /= x.frames;
        }
    }
    return chroma;
}

KeyPrediction baseline_chroma_argmax(const CqtMatrix& x, double log_gain)
{
    const auto chroma = chroma_vector(x, log_gain);
    KeyPrediction p;
    p.key_signature = static_cast<int>(argmax_lowest(chroma));
    p.scores.assign(chroma.begin(), chroma.end());
    return p;
}

KeyProfiles load_key_profiles(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw DataError("key profile file not found: " + path.string());
    }
    KeyProfiles profiles;
    try {
        const auto doc = nlohmann::json::parse(in);
        const auto major = doc.at("major").get<std::vector<double>>();
        const auto minor = doc.at("minor").get<std::vector<double>>();
        if (major.size() != kNumChroma || minor.size() != kNumChroma) {
            throw DataError("key profiles need 12 values each");
        }
        std::copy(major.begin(), major.end(), profiles.major.begin());
        std::copy(minor.begin(), minor.end(), profiles.minor.begin());
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed key profile file " + path.string() + ": " + e.what());
    }
    return profiles;
}

namespace {

double pearson(const std::array<double, kNumChroma>& a, const std::array<double, kNumChroma>& b)
{
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / kNumChroma;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / kNumChroma;
    double num = 0.0;
    double va = 0.0;
    double vb = 0.0;
    for (std::size_t i = 0; i < kNumChroma; ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    const double den = std::sqrt(va * vb);
    return den > 1e-12 ? num / den : 0.0;
}

}  // namespace

KeyPrediction baseline_template_matching(const std::array<double, kNumChroma>& chroma, const KeyProfiles& profiles)
{
    std::array<double, 24> scores{};
    for (int index = 0; index < 24; ++index) {
        const KeyLabel key = KeyLabel::from_index24(index);
        const auto& profile = key.mode == Mode::Major ? profiles.major : profiles.minor;
        std::array<double, kNumChroma> rotated{};
        for (int q = 0; q < kNumChroma; ++q) {
            rotated[static_cast<std::size_t>(q)] = profile[static_cast<std::size_t>(wrap_chroma(q - key.tonic))];
        }
        scores[static_cast<std::size_t>(index)] = pearson(chroma, rotated);
    }
    const KeyLabel best = KeyLabel::from_index24(static_cast<int>(argmax_lowest(scores)));
    KeyPrediction p;
    p.key_signature = best.key_signature();
    p.mode = best.mode;
    p.scores.assign(scores.begin(), scores.end());
    return p;
}

KeyPrediction baseline_template_matching(const CqtMatrix& x, const KeyProfiles& profiles, double log_gain)
{
    return baseline_template_matching(chroma_vector(x, log_gain), profiles);
}

// ---------------------------------------------------------------------------

EvaluationSummary summarize(const std::string& system, std::span<const TrackResult> results, FifthDirection fifth)
{
    std::vector<KeyPrediction> preds;
    std::vector<KeyLabel> refs;
    std::array<std::size_t, kNumChroma> histogram{};
    bool all_modes = !results.empty();
    for (const auto& r : results) {
        preds.push_back(r.prediction);
        refs.push_back(r.reference);
        all_modes = all_modes && r.prediction.mode.has_value();
        ++histogram[static_cast<std::size_t>(wrap_chroma(r.prediction.key_signature))];
    }
    EvaluationSummary s;
    s.system = system;
    s.tracks = results.size();
    s.ksea = ksea(preds, refs);
    if (all_modes) {
        s.mirex = mirex_score(preds, refs, fifth);
    }
    s.prediction_entropy_bits = histogram_entropy_bits(histogram);
    return s;
}

void write_evaluation_report(const std::filesystem::path& dir, const std::string& stem,
                             std::span<const TrackResult> results, const EvaluationSummary& summary,
                             FifthDirection fifth)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    std::ofstream csv(dir / (stem + ".csv"));
    if (!csv) {
        throw DataError("cannot write report in " + dir.string());
    }
    const bool with_mode = summary.mirex.has_value();
    csv << "id,reference,prediction,category\n";
    for (const auto& r : results) {
        std::string predicted;
        std::string category;
        if (with_mode) {
            predicted = format_key(r.prediction.key());
            category = relation_name(mirex_relation(r.reference, r.prediction.key(), fifth));
        } else {
            predicted = chroma_name(r.prediction.key_signature);
            const double credit = ksea_credit(r.prediction.key_signature, r.reference.key_signature());
            category = credit == 1.0 ? "correct" : (credit == 0.5 ? "fifth" : "wrong");
        }
        csv << r.id << ',' << format_key(r.reference) << ',' << predicted << ',' << category << '\n';
    }

    const auto counts_json = [](const EvalCounts& c) {
        return nlohmann::json{{"correct", c.correct}, {"fifth", c.fifth},       {"relative", c.relative},
                              {"parallel", c.parallel}, {"wrong", c.wrong}, {"total", c.total()}};
    };
    nlohmann::json doc = {
        {"system", summary.system},
        {"tracks", summary.tracks},
        {"ksea", {{"score", summary.ksea.score}, {"counts", counts_json(summary.ksea.counts)}}},
        {"prediction_entropy_bits", summary.prediction_entropy_bits},
    };
    if (summary.mirex) {
        doc["mirex"] = {{"score", summary.mirex->score},
                        {"counts", counts_json(summary.mirex->counts)},
                        {"fifth_direction", fifth == FifthDirection::Above ? "above" : "both"}};
    }
    std::ofstream(dir / (stem + ".json")) << doc.dump(2) << '\n';

    std::vector<KeyPrediction> preds;
    std::vector<KeyLabel> refs;
    for (const auto& r : results) {
        preds.push_back(r.prediction);
        refs.push_back(r.reference);
    }
    const ConfusionMatrix matrix = confusion_matrix(preds, refs, with_mode);
    write_confusion_csv(matrix, dir / (stem + "_confusion.csv"));
    write_confusion_image(matrix, dir / (stem + "_confusion.pgm"));
}

}  // namespace stone
