#pragma once

#include "stone/audio.hpp"
#include "stone/keys.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace stone {

struct ManifestEntry {
    std::string path;  // relative to the manifest's directory unless absolute
    std::optional<KeyLabel> label;
    std::string split;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// CSV with header `path,key,split`. The key and split columns may be empty.
struct DatasetManifest {
    std::string name;
    std::string version = "1";
    std::filesystem::path base_dir;
    std::vector<ManifestEntry> entries;

    std::filesystem::path resolve(const ManifestEntry& entry) const;
    std::size_t labeled_count() const;
    /// Entries whose split tag equals `split`.
    DatasetManifest filter_split(const std::string& split) const;
};

/// Throws DataError naming the row on malformed rows, unknown key strings or
/// duplicate paths. Audio files are not touched.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Sorted positions of a uniform random subset of {0..n-1} of size
/// floor(fraction * n + 0.5). Throws ConfigError if fraction is outside
/// (0, 1] or the subset is empty.
std::vector<std::size_t> random_subset(std::size_t n, double fraction, std::uint64_t seed);

/// Uniform random subset of the labeled entries, of size
/// floor(fraction * n_labeled + 0.5). Unlabeled entries are dropped.
/// Throws ConfigError if fraction is outside (0, 1] or the subset is empty.
DatasetManifest subsample_labels(const DatasetManifest& manifest, double fraction, std::uint64_t seed);

struct TimbreParams {
    int partials = 6;
    /// Partial h has amplitude h^-rolloff; rolloff is drawn per track.
    double rolloff_min = 0.7;
    double rolloff_max = 1.5;
    /// Per-note detune drawn from [-detune_cents, detune_cents].
    double detune_cents = 6.0;
    /// White noise level relative to the peak amplitude.
    double noise_floor_db = -40.0;

    friend bool operator==(const TimbreParams&, const TimbreParams&) = default;
};

enum class KeyDistribution { Balanced, Uniform };

struct SynthSpec {
    int n_tracks = 240;
    /// Balanced cycles through the 24 keys in order; Uniform draws each key.
    KeyDistribution key_distribution = KeyDistribution::Balanced;
    /// Share of tracks built from cadential progressions; the rest repeat a
    /// four-chord diatonic loop.
    double cadential_share = 0.7;
    double tempo_min = 70.0;
    double tempo_max = 140.0;
    double duration = 10.0;  // seconds
    double sample_rate = kCanonicalSampleRate;
    TimbreParams timbre;
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

struct SynthTrack {
    std::string id;
    KeyLabel label;
    AudioClip audio;
};

/// One track of the corpus; depends only on (spec, index).
SynthTrack synthesize_track(const SynthSpec& spec, int index);

/// Renders every track to `<out_dir>/audio/<id>.wav` and writes
/// `<out_dir>/manifest.csv` with the given split tag.
DatasetManifest synthesize_corpus(const SynthSpec& spec, const std::filesystem::path& out_dir,
                                  const std::string& split = "train");

/// C major scale in quarter notes over sustained C major triads.
AudioClip calibration_clip(double sample_rate = kCanonicalSampleRate);

}  // namespace stone
