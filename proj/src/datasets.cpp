#include "stone/datasets.hpp"

#include "stone/error.hpp"
#include "stone/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

namespace stone {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifests

fs::path DatasetManifest::resolve(const ManifestEntry& entry) const
{
    const fs::path p(entry.path);
    return p.is_absolute() ? p : base_dir / p;
}

std::size_t DatasetManifest::labeled_count() const
{
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [](const ManifestEntry& e) { return e.label.has_value(); }));
}

DatasetManifest DatasetManifest::filter_split(const std::string& split) const
{
    DatasetManifest out = *this;
    out.entries.clear();
    std::copy_if(entries.begin(), entries.end(), std::back_inserter(out.entries),
                 [&](const ManifestEntry& e) { return e.split == split; });
    return out;
}

namespace {

std::string trim(std::string s)
{
    const auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

std::vector<std::string> split_csv_row(const std::string& line)
{
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
        fields.push_back(trim(field));
    }
    if (!line.empty() && line.back() == ',') {
        fields.emplace_back();
    }
    return fields;
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open manifest " + path.string());
    }
    DatasetManifest manifest;
    manifest.name = path.stem().string();
    manifest.base_dir = path.parent_path();

    std::string line;
    int row = 0;
    bool header_seen = false;
    std::set<std::string> seen_paths;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (trim(line).empty()) {
            continue;
        }
        if (line.front() == '#') {
            // "# name: value" metadata lines.
            const auto colon = line.find(':');
            if (colon != std::string::npos) {
                const std::string key = trim(line.substr(1, colon - 1));
                const std::string value = trim(line.substr(colon + 1));
                if (key == "name") {
                    manifest.name = value;
                } else if (key == "version") {
                    manifest.version = value;
                }
            }
            continue;
        }
        const auto fields = split_csv_row(line);
        if (!header_seen) {
            header_seen = true;
            if (fields.size() < 2 || fields[0] != "path" || fields[1] != "key") {
                throw DataError(path.string() + ": row " + std::to_string(row) +
                                ": expected header 'path,key,split'");
            }
            continue;
        }
        if (fields.empty() || fields.size() > 3 || fields[0].empty()) {
            throw DataError(path.string() + ": row " + std::to_string(row) + ": malformed row '" + line + "'");
        }
        ManifestEntry entry;
        entry.path = fields[0];
        if (fields.size() > 1 && !fields[1].empty()) {
            try {
                entry.label = parse_key(fields[1]);
            } catch (const std::invalid_argument& e) {
                throw DataError(path.string() + ": row " + std::to_string(row) + ": " + e.what());
            }
        }
        if (fields.size() > 2) {
            entry.split = fields[2];
        }
        if (!seen_paths.insert(entry.path).second) {
            throw DataError(path.string() + ": row " + std::to_string(row) + ": duplicate path '" +
                            entry.path + "'");
        }
        manifest.entries.push_back(std::move(entry));
    }
    if (!header_seen) {
        throw DataError(path.string() + ": empty manifest");
    }
    return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path)
{
    std::ofstream out(path);
    if (!out) {
        throw DataError("cannot write manifest " + path.string());
    }
    out << "# name: " << manifest.name << "\n# version: " << manifest.version << "\n";
    out << "path,key,split\n";
    for (const auto& e : manifest.entries) {
        out << e.path << ',' << (e.label ? format_key(*e.label) : std::string()) << ',' << e.split << '\n';
    }
    if (!out) {
        throw DataError("failed writing manifest " + path.string());
    }
}

std::vector<std::size_t> random_subset(std::size_t n, double fraction, std::uint64_t seed)
{
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ConfigError("label fraction must lie in (0, 1]");
    }
    const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5));
    if (keep == 0) {
        throw ConfigError("label fraction " + std::to_string(fraction) + " leaves no labeled entries out of " +
                          std::to_string(n));
    }
    std::vector<std::size_t> index(n);
    std::iota(index.begin(), index.end(), std::size_t{0});
    // Partial Fisher-Yates; the chosen positions come back sorted.
    RandomSource rng(seed);
    for (std::size_t i = 0; i < keep; ++i) {
        const auto j = static_cast<std::size_t>(
            uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(n - 1)));
        std::swap(index[i], index[j]);
    }
    index.resize(keep);
    std::sort(index.begin(), index.end());
    return index;
}

DatasetManifest subsample_labels(const DatasetManifest& manifest, double fraction, std::uint64_t seed)
{
    std::vector<std::size_t> labeled;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        if (manifest.entries[i].label) {
            labeled.push_back(i);
        }
    }
    DatasetManifest out = manifest;
    out.entries.clear();
    for (std::size_t i : random_subset(labeled.size(), fraction, seed)) {
        out.entries.push_back(manifest.entries[labeled[i]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthesis

void SynthSpec::validate() const
{
    if (n_tracks < 1) {
        throw ConfigError("n_tracks must be positive");
    }
    if (!(tempo_min > 0.0 && tempo_max >= tempo_min)) {
        throw ConfigError("invalid tempo range");
    }
    if (!(cadential_share >= 0.0 && cadential_share <= 1.0)) {
        throw ConfigError("cadential_share must lie in [0, 1]");
    }
    if (!(duration > 0.0)) {
        throw ConfigError("duration must be positive");
    }
    if (!(sample_rate >= 8000.0)) {
        throw ConfigError("sample_rate too low");
    }
    if (timbre.partials < 1 || timbre.rolloff_min > timbre.rolloff_max || timbre.detune_cents < 0.0) {
        throw ConfigError("invalid timbre parameters");
    }
}

namespace {

struct Note {
    double midi = 60.0;
    double start = 0.0;     // seconds
    double duration = 0.0;  // seconds
    double gain = 0.0;
};

struct Voice {
    int partials = 6;
    double rolloff = 1.0;
    double decay = 1.0;  // seconds
};

double midi_to_hz(double midi)
{
    return 440.0 * std::pow(2.0, (midi - 69.0) / 12.0);
}

/// Adds one note (harmonic partials, attack/decay/release envelope) into out.
void render_note(const Note& note, const Voice& voice, double sample_rate, std::vector<double>& out)
{
    const auto begin = static_cast<std::size_t>(std::lround(note.start * sample_rate));
    if (begin >= out.size()) {
        return;
    }
    const std::size_t length =
        std::min(out.size() - begin, static_cast<std::size_t>(std::lround(note.duration * sample_rate)));
    if (length == 0) {
        return;
    }
    const double attack = 0.01 * sample_rate;
    const double release = std::min(0.05 * sample_rate, 0.5 * static_cast<double>(length));
    const double decay_rate = 1.0 / (voice.decay * sample_rate);

    std::vector<double> tone(length, 0.0);
    const double f0 = midi_to_hz(note.midi);
    for (int h = 1; h <= voice.partials; ++h) {
        const double f = f0 * h;
        if (f >= 0.45 * sample_rate) {
            break;
        }
        const double amp = std::pow(static_cast<double>(h), -voice.rolloff);
        // Second-order oscillator recurrence: s[n] = 2 cos(w) s[n-1] - s[n-2].
        const double w = 2.0 * std::numbers::pi * f / sample_rate;
        const double k = 2.0 * std::cos(w);
        double s1 = std::sin(-w);
        double s0 = 0.0;
        for (std::size_t n = 0; n < length; ++n) {
            tone[n] += amp * s0;
            const double next = k * s0 - s1;
            s1 = s0;
            s0 = next;
        }
    }
    for (std::size_t n = 0; n < length; ++n) {
        const double t = static_cast<double>(n);
        double env = std::exp(-t * decay_rate);
        if (t < attack) {
            env *= t / attack;
        }
        const double remaining = static_cast<double>(length - n);
        if (remaining < release) {
            env *= remaining / release;
        }
        out[begin + n] += note.gain * env * tone[n];
    }
}

constexpr std::array<int, 6> kMajorLoopDegrees = {0, 1, 2, 3, 4, 5};
constexpr std::array<int, 6> kMinorLoopDegrees = {0, 2, 3, 4, 5, 6};
constexpr std::array<int, 7> kMajorScale = {0, 2, 4, 5, 7, 9, 11};
constexpr std::array<int, 7> kNaturalMinorScale = {0, 2, 3, 5, 7, 8, 10};

struct Transition {
    int to;
    double weight;
};

/// Next scale degree of a functional-harmony random walk.
int next_degree(int degree, Mode mode, RandomSource& rng)
{
    static const std::array<std::vector<Transition>, 7> major = {{
        {{3, 0.3}, {4, 0.3}, {5, 0.2}, {1, 0.2}},  // I
        {{4, 0.7}, {0, 0.3}},                      // ii
        {{5, 0.6}, {3, 0.4}},                      // iii
        {{4, 0.5}, {0, 0.3}, {1, 0.2}},            // IV
        {{0, 0.7}, {5, 0.3}},                      // V
        {{1, 0.4}, {3, 0.4}, {2, 0.2}},            // vi
        {{0, 1.0}},                                // vii (unused)
    }};
    static const std::array<std::vector<Transition>, 7> minor = {{
        {{3, 0.35}, {4, 0.3}, {5, 0.2}, {6, 0.15}},  // i
        {{4, 1.0}},                                  // ii (unused)
        {{5, 0.5}, {3, 0.5}},                        // III
        {{4, 0.6}, {0, 0.4}},                        // iv
        {{0, 0.75}, {5, 0.25}},                      // V
        {{3, 0.4}, {6, 0.3}, {2, 0.3}},              // VI
        {{2, 0.6}, {0, 0.4}},                        // VII
    }};
    const auto& options = (mode == Mode::Major ? major : minor)[static_cast<std::size_t>(degree)];
    double u = uniform_real(rng);
    for (const auto& t : options) {
        if (u < t.weight) {
            return t.to;
        }
        u -= t.weight;
    }
    return options.back().to;
}

/// Pitch class offsets (from the tonic) of the scale used over a chord.
std::array<int, 7> scale_for(Mode mode, int degree, bool harmonic_dominant)
{
    if (mode == Mode::Major) {
        return kMajorScale;
    }
    auto scale = kNaturalMinorScale;
    if (harmonic_dominant && degree == 4) {
        scale[6] = 11;
    }
    return scale;
}

/// MIDI number with the given pitch class in [low, low + 12).
int place(int pitch_class, int low)
{
    return low + wrap_chroma(pitch_class - low);
}

std::vector<Note> compose(const KeyLabel& key, double tempo, double duration, double cadential_share,
                          RandomSource& rng)
{
    const double beat = 60.0 / tempo;
    const bool harmonic_dominant = uniform_real(rng) < 0.75;
    const int chord_low = static_cast<int>(uniform_int(rng, 50, 57));
    const int bass_low = chord_low - 17;
    const int melody_low = chord_low + 14;

    // Cadential tracks walk a functional grammar from the tonic back to the
    // tonic; loop tracks repeat four diatonic chords from an arbitrary
    // starting point, so the tonic gets no special weight.
    const bool cadential = uniform_real(rng) < cadential_share;
    std::array<int, 4> loop{};
    if (!cadential) {
        // Tonic, predominant and dominant chords cover the whole scale; the
        // fourth chord and the order are free.
        const bool major = key.mode == Mode::Major;
        const auto pick = [&](std::initializer_list<int> options) {
            return *(options.begin() + uniform_int(rng, 0, static_cast<std::int64_t>(options.size()) - 1));
        };
        loop[0] = 0;
        loop[1] = major ? pick({1, 3}) : 3;
        loop[2] = major ? 4 : pick({4, 6});
        const auto& pool = major ? kMajorLoopDegrees : kMinorLoopDegrees;
        do {
            loop[3] = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(pool.size()) - 1))];
        } while (std::find(loop.begin(), loop.begin() + 3, loop[3]) != loop.begin() + 3);
        for (std::size_t i = loop.size() - 1; i > 0; --i) {
            std::swap(loop[i], loop[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i)))]);
        }
    }
    const int loop_beats = uniform_real(rng) < 0.5 ? 2 : 4;
    std::size_t loop_pos = static_cast<std::size_t>(uniform_int(rng, 0, 3));

    std::vector<Note> notes;
    double t = 0.0;
    int degree = cadential ? 0 : loop[loop_pos];
    int melody_step = static_cast<int>(uniform_int(rng, 7, 11));  // index into a two-octave scale
    while (t < duration - 1e-9) {
        const int beats = cadential ? (uniform_real(rng) < 0.5 ? 2 : 4) : loop_beats;
        double length = beats * beat;
        const bool last = t + length >= duration - 2.0 * beat;
        if (last) {
            if (cadential) {
                degree = 0;
            }
            length = duration - t;
        }
        const auto scale = scale_for(key.mode, degree, harmonic_dominant);
        std::array<int, 3> triad{};
        for (int i = 0; i < 3; ++i) {
            triad[static_cast<std::size_t>(i)] = key.tonic + scale[static_cast<std::size_t>((degree + 2 * i) % 7)];
        }
        for (int pc : triad) {
            notes.push_back({static_cast<double>(place(pc, chord_low)), t, length, 0.22});
        }
        notes.push_back({static_cast<double>(place(triad[0], bass_low)), t, length, 0.35});

        const int melody_beats = static_cast<int>(std::ceil(length / beat - 1e-9));
        for (int b = 0; b < melody_beats; ++b) {
            if (b == 0) {
                // Land on the nearest chord tone.
                const auto chord_tone = [&](int step) {
                    const int rel = ((step % 7) - degree + 7) % 7;
                    return step >= 0 && step < 14 && (rel == 0 || rel == 2 || rel == 4);
                };
                for (int d = 0; d <= 3; ++d) {
                    if (chord_tone(melody_step - d)) {
                        melody_step -= d;
                        break;
                    }
                    if (chord_tone(melody_step + d)) {
                        melody_step += d;
                        break;
                    }
                }
            } else {
                melody_step = std::clamp(melody_step + static_cast<int>(uniform_int(rng, -2, 2)), 0, 13);
            }
            const int pc = key.tonic + scale[static_cast<std::size_t>(melody_step % 7)];
            const int midi = place(pc, melody_low) + (melody_step >= 7 ? 12 : 0);
            const double start = t + b * beat;
            const double note_len = std::min(beat, t + length - start);
            if (note_len > 0.02) {
                notes.push_back({static_cast<double>(midi), start, note_len, 0.3});
            }
        }
        t += length;
        if (cadential) {
            degree = next_degree(degree, key.mode, rng);
        } else {
            loop_pos = (loop_pos + 1) % loop.size();
            degree = loop[loop_pos];
        }
    }
    return notes;
}

AudioClip render(const std::vector<Note>& notes, double duration, double sample_rate, const TimbreParams& timbre,
                 RandomSource& rng)
{
    std::vector<double> mix(static_cast<std::size_t>(std::lround(duration * sample_rate)), 0.0);
    Voice voice;
    voice.partials = timbre.partials;
    voice.rolloff = uniform_real(rng, timbre.rolloff_min, timbre.rolloff_max);
    voice.decay = uniform_real(rng, 0.6, 2.5);
    for (Note note : notes) {
        note.midi += uniform_real(rng, -timbre.detune_cents, timbre.detune_cents) / 100.0;
        render_note(note, voice, sample_rate, mix);
    }
    double peak = 0.0;
    for (double v : mix) {
        peak = std::max(peak, std::abs(v));
    }
    const double scale = peak > 0.0 ? 0.8 / peak : 0.0;
    const double noise = 0.8 * std::pow(10.0, timbre.noise_floor_db / 20.0);
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.samples.resize(mix.size());
    for (std::size_t n = 0; n < mix.size(); ++n) {
        clip.samples[n] = static_cast<float>(mix[n] * scale + noise * normal(rng));
    }
    return clip;
}

std::string track_id(int index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "track_%05d", index);
    return buf;
}

}  // namespace

SynthTrack synthesize_track(const SynthSpec& spec, int index)
{
    spec.validate();
    RandomSource rng(derive_seed(spec.seed, static_cast<std::uint64_t>(index)));
    SynthTrack track;
    track.id = track_id(index);
    track.label = spec.key_distribution == KeyDistribution::Balanced
                      ? KeyLabel::from_index24(index % 24)
                      : KeyLabel::from_index24(static_cast<int>(uniform_int(rng, 0, 23)));
    const double tempo = uniform_real(rng, spec.tempo_min, spec.tempo_max);
    const auto notes = compose(track.label, tempo, spec.duration, spec.cadential_share, rng);
    track.audio = render(notes, spec.duration, spec.sample_rate, spec.timbre, rng);
    return track;
}

DatasetManifest synthesize_corpus(const SynthSpec& spec, const fs::path& out_dir, const std::string& split)
{
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir / "audio", ec);
    if (ec) {
        throw DataError("cannot create " + (out_dir / "audio").string() + ": " + ec.message());
    }
    DatasetManifest manifest;
    manifest.name = "synthetic";
    manifest.base_dir = out_dir;
    for (int i = 0; i < spec.n_tracks; ++i) {
        const SynthTrack track = synthesize_track(spec, i);
        const std::string rel = "audio/" + track.id + ".wav";
        write_wav(out_dir / rel, track.audio);
        manifest.entries.push_back({rel, track.label, split});
    }
    save_manifest(manifest, out_dir / "manifest.csv");
    return manifest;
}

AudioClip calibration_clip(double sample_rate)
{
    const double beat = 0.5;
    std::vector<Note> notes;
    // Ascending then descending C major scale from C5.
    std::vector<int> melody;
    for (int s : kMajorScale) {
        melody.push_back(72 + s);
    }
    melody.push_back(84);
    for (int i = static_cast<int>(kMajorScale.size()) - 1; i >= 0; --i) {
        melody.push_back(72 + kMajorScale[static_cast<std::size_t>(i)]);
    }
    for (std::size_t i = 0; i < melody.size(); ++i) {
        notes.push_back({static_cast<double>(melody[i]), static_cast<double>(i) * beat, beat, 0.3});
    }
    const double duration = static_cast<double>(melody.size()) * beat;
    for (double t = 0.0; t < duration - 1e-9; t += 4 * beat) {
        const double length = std::min(4 * beat, duration - t);
        for (int midi : {60, 64, 67}) {
            notes.push_back({static_cast<double>(midi), t, length, 0.22});
        }
        notes.push_back({48.0, t, length, 0.35});
    }
    TimbreParams timbre;
    timbre.detune_cents = 0.0;
    RandomSource rng(0x5eed);
    Voice voice;
    std::vector<double> mix(static_cast<std::size_t>(std::lround(duration * sample_rate)), 0.0);
    voice.rolloff = 1.1;
    voice.decay = 1.5;
    for (const Note& note : notes) {
        render_note(note, voice, sample_rate, mix);
    }
    double peak = 0.0;
    for (double v : mix) {
        peak = std::max(peak, std::abs(v));
    }
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.samples.resize(mix.size());
    for (std::size_t n = 0; n < mix.size(); ++n) {
        clip.samples[n] = static_cast<float>(mix[n] * 0.8 / peak + 0.008 * normal(rng));
    }
    return clip;
}

}  // namespace stone
