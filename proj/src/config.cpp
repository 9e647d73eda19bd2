#include "stone/config.hpp"

#include "stone/error.hpp"

#include <fstream>
#include <set>

namespace stone {

using nlohmann::json;

namespace {

/// Walks one JSON object, remembers which keys were read and rejects the rest.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name))
    {
        if (!j_.is_object()) {
            throw ConfigError("section '" + name_ + "' must be an object");
        }
    }

    template <typename T>
    void get(const char* key, T& out)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        if (it == j_.end()) {
            return;
        }
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError("field '" + name_ + "." + key + "' has the wrong type");
        }
    }

    const json* child(const char* key)
    {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const
    {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.contains(key)) {
                throw ConfigError("unknown field '" + (name_.empty() ? key : name_ + "." + key) + "'");
            }
        }
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

const char* to_string(KeyDistribution d)
{
    return d == KeyDistribution::Balanced ? "balanced" : "uniform";
}

KeyDistribution parse_key_distribution(const std::string& text)
{
    if (text == "balanced") {
        return KeyDistribution::Balanced;
    }
    if (text == "uniform") {
        return KeyDistribution::Uniform;
    }
    throw ConfigError("unknown key distribution '" + text + "' (balanced, uniform)");
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p)
{
    if (p.empty()) {
        return {};
    }
    const std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

void read_timbre(Section& s, TimbreParams& t)
{
    s.get("partials", t.partials);
    s.get("rolloff_min", t.rolloff_min);
    s.get("rolloff_max", t.rolloff_max);
    s.get("detune_cents", t.detune_cents);
    s.get("noise_floor_db", t.noise_floor_db);
    s.finish();
}

TrainConfig read_train_config(const json& j, TrainConfig c)
{
    Section s(j, "training");
    std::string mode = to_string(c.mode);
    s.get("mode", mode);
    c.mode = parse_train_mode(mode);
    s.get("omega", c.omega);
    s.get("epochs", c.epochs);
    s.get("batch_size", c.batch_size);
    s.get("lr", c.lr);
    s.get("warmup_fraction", c.warmup_fraction);
    s.get("weight_decay", c.weight_decay);
    s.get("segment_seconds", c.segment_seconds);
    s.get("label_fraction", c.label_fraction);
    s.get("ablation_crossentropy", c.ablation_crossentropy);
    s.get("seed", c.seed);
    s.get("probe_size", c.probe_size);
    s.get("collapse_threshold_bits", c.collapse_threshold_bits);
    s.finish();
    return c;
}

SynthSpec read_synth_spec(const json& j, SynthSpec spec)
{
    Section s(j, "synth");
    s.get("n_tracks", spec.n_tracks);
    std::string dist = to_string(spec.key_distribution);
    s.get("key_distribution", dist);
    spec.key_distribution = parse_key_distribution(dist);
    s.get("cadential_share", spec.cadential_share);
    s.get("tempo_min", spec.tempo_min);
    s.get("tempo_max", spec.tempo_max);
    s.get("duration", spec.duration);
    s.get("sample_rate", spec.sample_rate);
    if (const json* t = s.child("timbre")) {
        Section ts(*t, "synth.timbre");
        read_timbre(ts, spec.timbre);
    }
    s.get("seed", spec.seed);
    s.finish();
    return spec;
}

}  // namespace

json to_json(const CqtParams& p)
{
    return {{"sample_rate", p.sample_rate}, {"hop", p.hop}, {"log_gain", p.log_gain},
            {"kernel_threshold", p.kernel_threshold}};
}

json to_json(const ChromaNetConfig& c)
{
    return {{"n_blocks", c.n_blocks},
            {"channels", c.channels},
            {"time_downsample", c.time_downsample},
            {"width_multiplier", c.width_multiplier},
            {"kernel_rows", c.kernel_rows},
            {"kernel_frames", c.kernel_frames},
            {"expansion", c.expansion},
            {"input_time_pool", c.input_time_pool},
            {"out_channels", c.out_channels},
            {"ablation_fc_head", c.ablation_fc_head}};
}

json to_json(const TrainConfig& c)
{
    return {{"mode", to_string(c.mode)},
            {"omega", c.omega},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"warmup_fraction", c.warmup_fraction},
            {"weight_decay", c.weight_decay},
            {"segment_seconds", c.segment_seconds},
            {"label_fraction", c.label_fraction},
            {"ablation_crossentropy", c.ablation_crossentropy},
            {"seed", c.seed},
            {"probe_size", c.probe_size},
            {"collapse_threshold_bits", c.collapse_threshold_bits}};
}

json to_json(const SynthSpec& s)
{
    return {{"n_tracks", s.n_tracks},
            {"key_distribution", to_string(s.key_distribution)},
            {"cadential_share", s.cadential_share},
            {"tempo_min", s.tempo_min},
            {"tempo_max", s.tempo_max},
            {"duration", s.duration},
            {"sample_rate", s.sample_rate},
            {"timbre",
             {{"partials", s.timbre.partials},
              {"rolloff_min", s.timbre.rolloff_min},
              {"rolloff_max", s.timbre.rolloff_max},
              {"detune_cents", s.timbre.detune_cents},
              {"noise_floor_db", s.timbre.noise_floor_db}}},
            {"seed", s.seed}};
}

json to_json(const NormState& n)
{
    return {{"mean", n.mean}, {"var", n.var}, {"updates", n.updates}, {"momentum", n.momentum}, {"eps", n.eps}};
}

CqtParams cqt_params_from_json(const json& j)
{
    CqtParams p;
    Section s(j, "frontend");
    s.get("sample_rate", p.sample_rate);
    s.get("hop", p.hop);
    s.get("log_gain", p.log_gain);
    s.get("kernel_threshold", p.kernel_threshold);
    s.finish();
    if (!(p.sample_rate > 0.0) || p.hop < 1 || !(p.log_gain > 0.0) || !(p.kernel_threshold >= 0.0)) {
        throw ConfigError("frontend parameters out of range");
    }
    return p;
}

ChromaNetConfig chromanet_config_from_json(const json& j)
{
    Section s(j, "chromanet");
    std::string preset = "desk";
    s.get("preset", preset);
    int out_channels = 2;
    s.get("out_channels", out_channels);
    ChromaNetConfig c = chromanet_preset(preset, out_channels);
    s.get("n_blocks", c.n_blocks);
    s.get("channels", c.channels);
    s.get("time_downsample", c.time_downsample);
    s.get("width_multiplier", c.width_multiplier);
    s.get("kernel_rows", c.kernel_rows);
    s.get("kernel_frames", c.kernel_frames);
    s.get("expansion", c.expansion);
    s.get("input_time_pool", c.input_time_pool);
    s.get("out_channels", c.out_channels);
    s.get("ablation_fc_head", c.ablation_fc_head);
    s.finish();
    c.validate();
    return c;
}

TrainConfig train_config_from_json(const json& j)
{
    return read_train_config(j, TrainConfig{});
}

SynthSpec synth_spec_from_json(const json& j)
{
    SynthSpec spec = read_synth_spec(j, SynthSpec{});
    spec.validate();
    return spec;
}

NormState norm_state_from_json(const json& j)
{
    NormState n;
    Section s(j, "norm");
    s.get("mean", n.mean);
    s.get("var", n.var);
    s.get("updates", n.updates);
    s.get("momentum", n.momentum);
    s.get("eps", n.eps);
    s.finish();
    return n;
}

void RunConfig::validate() const
{
    chromanet.validate();
    training.validate(chromanet);
    synth.validate();
}

void RunConfig::match_heads_to_mode()
{
    chromanet.out_channels = training.mode == TrainMode::Ssl12 ? 1 : 2;
}

json to_json(const RunConfig& c)
{
    return {{"seed", c.seed},
            {"output_dir", c.output_dir.string()},
            {"frontend", to_json(c.frontend)},
            {"chromanet", to_json(c.chromanet)},
            {"training", to_json(c.training)},
            {"synth", to_json(c.synth)},
            {"data",
             {{"unlabeled", c.unlabeled_manifest.string()},
              {"labeled", c.labeled_manifest.string()},
              {"eval", c.eval_manifest.string()},
              {"eval_split", c.eval_split}}}};
}

RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir)
{
    RunConfig c;
    Section s(j, "");
    s.get("seed", c.seed);
    // The global seed is the default for every seeded section.
    c.training.seed = c.seed;
    c.synth.seed = c.seed;
    std::string output_dir = c.output_dir.string();
    s.get("output_dir", output_dir);
    c.output_dir = resolve(base_dir, output_dir);
    if (const json* f = s.child("frontend")) {
        c.frontend = cqt_params_from_json(*f);
    }
    if (const json* t = s.child("training")) {
        c.training = read_train_config(*t, c.training);
    }
    c.match_heads_to_mode();
    if (const json* n = s.child("chromanet")) {
        json net = *n;
        if (net.is_object() && !net.contains("out_channels")) {
            net["out_channels"] = c.chromanet.out_channels;
        }
        c.chromanet = chromanet_config_from_json(net);
    }
    if (const json* y = s.child("synth")) {
        c.synth = read_synth_spec(*y, c.synth);
    }
    if (const json* d = s.child("data")) {
        Section ds(*d, "data");
        std::string unlabeled, labeled, eval;
        ds.get("unlabeled", unlabeled);
        ds.get("labeled", labeled);
        ds.get("eval", eval);
        ds.get("eval_split", c.eval_split);
        ds.finish();
        c.unlabeled_manifest = resolve(base_dir, unlabeled);
        c.labeled_manifest = resolve(base_dir, labeled);
        c.eval_manifest = resolve(base_dir, eval);
    }
    s.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) {
        throw ConfigError("config file " + path.string() + " is not valid JSON");
    }
    return run_config_from_json(j, path.parent_path());
}

}  // namespace stone
