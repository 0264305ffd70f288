#pragma once

#include "acd/evaluation.hpp"
#include "acd/inference.hpp"
#include "acd/networks.hpp"
#include "acd/phantom.hpp"
#include "acd/training.hpp"

#include <json.hpp>

#include <filesystem>

namespace acd {

// One document with a namespace per module: data, network, loss, train,
// inference, eval. Every namespace and key is optional; unknown keys are
// rejected by name.
struct ExperimentConfig {
    PhantomConfig data;
    NetworkConfig network;
    TrainConfig train;
    InferenceConfig inference;
    EvalConfig eval;

    void validate() const;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

nlohmann::json to_json(const InferenceConfig& config);
InferenceConfig inference_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EvalConfig& config);
EvalConfig eval_config_from_json(const nlohmann::json& j);

} // namespace acd
