#pragma once

#include "stone/chromanet.hpp"
#include "stone/cqt.hpp"
#include "stone/datasets.hpp"
#include "stone/training.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>

namespace stone {

// Strict JSON conversions: from_json rejects unknown fields with ConfigError
// and leaves absent fields at their defaults.

nlohmann::json to_json(const CqtParams& p);
nlohmann::json to_json(const ChromaNetConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const SynthSpec& s);
nlohmann::json to_json(const NormState& n);

CqtParams cqt_params_from_json(const nlohmann::json& j);
ChromaNetConfig chromanet_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
SynthSpec synth_spec_from_json(const nlohmann::json& j);
NormState norm_state_from_json(const nlohmann::json& j);

/// Declarative description of a run. Sections a command does not use may be
/// omitted.
struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "run";
    CqtParams frontend;
    /// out_channels follows the training mode unless the file sets it.
    ChromaNetConfig chromanet = desk_chromanet_config();
    TrainConfig training;
    SynthSpec synth;
    /// Manifests; relative paths resolve against the config file's directory.
    std::filesystem::path unlabeled_manifest;
    std::filesystem::path labeled_manifest;
    std::filesystem::path eval_manifest;
    std::string eval_split;

    /// Cross-section checks. Throws ConfigError.
    void validate() const;
    /// Sets out_channels to what the training mode needs.
    void match_heads_to_mode();
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
/// Throws ConfigError on unreadable files, malformed JSON or unknown fields.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace stone
