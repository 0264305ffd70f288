#include "acd/config.hpp"

#include "acd/errors.hpp"

#include <fstream>
#include <set>

namespace acd {

namespace {

// Reads the keys of one namespace and rejects any it did not ask for.
class KeyReader {
public:
    KeyReader(const nlohmann::json& j, std::string ns) : j_(j), ns_(std::move(ns)) {
        if (!j_.is_object())
            throw UsageError("config section '" + ns_ + "' must be an object");
    }

    template <class T>
    void read(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key))
            return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw UsageError("config key '" + path(key) + "' has the wrong type");
        }
    }

    const nlohmann::json* section(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string path(const std::string& key) const { return ns_.empty() ? key : ns_ + "." + key; }

    void finish() const {
        for (const auto& item : j_.items())
            if (!seen_.count(item.key()))
                throw UsageError("unknown config key '" + path(item.key()) + "'");
    }

private:
    const nlohmann::json& j_;
    std::string ns_;
    std::set<std::string> seen_;
};

std::string pairing_name(PairingPolicy p) { return p == PairingPolicy::AllOrdered ? "all_ordered" : "from_first_scan"; }

nlohmann::json band_json(const IntensityBand& b) { return {b.low, b.high}; }

void read_band(KeyReader& r, const std::string& key, IntensityBand& band) {
    std::array<float, 2> v{band.low, band.high};
    r.read(key, v);
    band = {v[0], v[1]};
}

LossWeights read_loss_weights(const nlohmann::json& j, const std::string& ns) {
    LossWeights w;
    KeyReader r(j, ns);
    r.read("lambda_imax", w.imax);
    r.read("lambda_align", w.align);
    r.read("lambda_mse", w.mse);
    r.finish();
    return w;
}

TrainConfig read_train(const nlohmann::json& j, const std::string& ns, bool allow_lambdas) {
    TrainConfig c;
    KeyReader r(j, ns);
    r.read("epochs", c.epochs);
    r.read("batch_size", c.batch_size);
    r.read("learning_rate", c.learning_rate);
    r.read("seed", c.seed);
    r.read("baseline_branch_fraction", c.baseline_branch_fraction);
    r.read("schedule", c.schedule);
    r.read("T", c.T);
    r.read("checkpoint_interval", c.checkpoint_interval);
    r.read("output_dir", c.output_dir);
    std::string pairing = pairing_name(c.pairing);
    r.read("pairing", pairing);
    try {
        c.pairing = parse_pairing_policy(pairing);
    } catch (const UsageError& e) {
        throw UsageError("config key '" + r.path("pairing") + "': " + e.what());
    }
    if (allow_lambdas) {
        if (const auto* l = r.section("lambdas"))
            c.lambdas = read_loss_weights(*l, r.path("lambdas"));
    }
    r.finish();
    return c;
}

} // namespace

nlohmann::json to_json(const LossWeights& w) {
    return {{"lambda_imax", w.imax}, {"lambda_align", w.align}, {"lambda_mse", w.mse}};
}

LossWeights loss_weights_from_json(const nlohmann::json& j) { return read_loss_weights(j, "loss"); }

nlohmann::json to_json(const LossBreakdown& b) {
    return {{"l_mse", b.l_mse},
            {"l_attn_align", b.l_attn_align},
            {"l_attn_imax", b.l_attn_imax},
            {"total", b.total},
            {"lambdas", to_json(b.lambdas)},
            {"skipped_alignment", b.skipped_alignment},
            {"skipped_alignment_count", b.skipped_alignment_count}};
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"seed", c.seed},
            {"lambdas", to_json(c.lambdas)},
            {"baseline_branch_fraction", c.baseline_branch_fraction},
            {"schedule", c.schedule},
            {"T", c.T},
            {"checkpoint_interval", c.checkpoint_interval},
            {"output_dir", c.output_dir},
            {"pairing", pairing_name(c.pairing)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) { return read_train(j, "train", true); }

nlohmann::json to_json(const NetworkConfig& c) {
    return {{"image_size", c.image_size},
            {"base_channels", c.base_channels},
            {"levels", c.levels},
            {"d", c.d},
            {"d_prime", c.d_prime},
            {"age_bins", c.age_bins},
            {"taps", c.taps},
            {"condition_hidden", c.condition_hidden},
            {"norm_groups", c.norm_groups},
            {"extra_decoder_layers", c.extra_decoder_layers}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
    NetworkConfig c;
    KeyReader r(j, "network");
    r.read("image_size", c.image_size);
    r.read("base_channels", c.base_channels);
    r.read("levels", c.levels);
    r.read("d", c.d);
    r.read("d_prime", c.d_prime);
    r.read("age_bins", c.age_bins);
    r.read("taps", c.taps);
    r.read("condition_hidden", c.condition_hidden);
    r.read("norm_groups", c.norm_groups);
    r.read("extra_decoder_layers", c.extra_decoder_layers);
    r.finish();
    return c;
}

nlohmann::json to_json(const PhantomConfig& c) {
    return {{"height", c.height},
            {"width", c.width},
            {"depth", c.depth},
            {"train_subjects", c.train_subjects},
            {"test_subjects", c.test_subjects},
            {"min_scans", c.min_scans},
            {"max_scans", c.max_scans},
            {"interval_mean", c.interval_mean},
            {"interval_sd", c.interval_sd},
            {"interval_min", c.interval_min},
            {"interval_max", c.interval_max},
            {"ventricle_growth", c.ventricle_growth},
            {"atrophy", c.atrophy},
            {"tissue_intensity", c.tissue_intensity},
            {"ventricle_intensity", c.ventricle_intensity},
            {"hippocampus_intensity", c.hippocampus_intensity},
            {"amygdala_intensity", c.amygdala_intensity},
            {"texture_amplitude", c.texture_amplitude},
            {"ventricle_band", band_json(c.ventricle_band)},
            {"hippocampus_band", band_json(c.hippocampus_band)},
            {"amygdala_band", band_json(c.amygdala_band)},
            {"tissue_band", band_json(c.tissue_band)},
            {"seed", c.seed}};
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
    PhantomConfig c;
    KeyReader r(j, "data");
    r.read("height", c.height);
    r.read("width", c.width);
    r.read("depth", c.depth);
    r.read("train_subjects", c.train_subjects);
    r.read("test_subjects", c.test_subjects);
    r.read("min_scans", c.min_scans);
    r.read("max_scans", c.max_scans);
    r.read("interval_mean", c.interval_mean);
    r.read("interval_sd", c.interval_sd);
    r.read("interval_min", c.interval_min);
    r.read("interval_max", c.interval_max);
    r.read("ventricle_growth", c.ventricle_growth);
    r.read("atrophy", c.atrophy);
    r.read("tissue_intensity", c.tissue_intensity);
    r.read("ventricle_intensity", c.ventricle_intensity);
    r.read("hippocampus_intensity", c.hippocampus_intensity);
    r.read("amygdala_intensity", c.amygdala_intensity);
    r.read("texture_amplitude", c.texture_amplitude);
    read_band(r, "ventricle_band", c.ventricle_band);
    read_band(r, "hippocampus_band", c.hippocampus_band);
    read_band(r, "amygdala_band", c.amygdala_band);
    read_band(r, "tissue_band", c.tissue_band);
    r.read("seed", c.seed);
    r.finish();
    return c;
}

nlohmann::json to_json(const InferenceConfig& c) {
    return {{"steps", c.steps}, {"analysis_layer", c.analysis_layer}, {"attention_t", c.attention_t}};
}

InferenceConfig inference_config_from_json(const nlohmann::json& j) {
    InferenceConfig c;
    KeyReader r(j, "inference");
    r.read("steps", c.steps);
    r.read("analysis_layer", c.analysis_layer);
    r.read("attention_t", c.attention_t);
    r.finish();
    return c;
}

nlohmann::json to_json(const EvalConfig& c) {
    return {{"fid_extractor", c.fid_extractor}, {"max_pairs_per_subject", c.max_pairs_per_subject}, {"seed", c.seed}};
}

EvalConfig eval_config_from_json(const nlohmann::json& j) {
    EvalConfig c;
    KeyReader r(j, "eval");
    r.read("fid_extractor", c.fid_extractor);
    r.read("max_pairs_per_subject", c.max_pairs_per_subject);
    r.read("seed", c.seed);
    r.finish();
    return c;
}

void ExperimentConfig::validate() const {
    data.validate();
    network.validate();
    train.validate();
    inference.validate(network, train.T);
    eval.validate();
    if (network.image_size != data.height || network.image_size != data.width)
        throw UsageError("network.image_size must match data.height and data.width");
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    KeyReader r(j, "");
    if (const auto* s = r.section("data"))
        c.data = phantom_config_from_json(*s);
    if (const auto* s = r.section("network"))
        c.network = network_config_from_json(*s);
    if (const auto* s = r.section("train"))
        c.train = read_train(*s, "train", false);
    if (const auto* s = r.section("loss"))
        c.train.lambdas = read_loss_weights(*s, "loss");
    if (const auto* s = r.section("inference"))
        c.inference = inference_config_from_json(*s);
    if (const auto* s = r.section("eval"))
        c.eval = eval_config_from_json(*s);
    r.finish();
    c.validate();
    return c;
}

nlohmann::json to_json(const ExperimentConfig& c) {
    auto train = to_json(c.train);
    train.erase("lambdas");
    return {{"data", to_json(c.data)},
            {"network", to_json(c.network)},
            {"loss", to_json(c.train.lambdas)},
            {"train", train},
            {"inference", to_json(c.inference)},
            {"eval", to_json(c.eval)}};
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        throw UsageError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return experiment_config_from_json(j);
}

} // namespace acd
