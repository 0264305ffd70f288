#pragma once

#include "acd/alignment.hpp"
#include "acd/container.hpp"
#include "acd/diffusion.hpp"
#include "acd/networks.hpp"
#include "acd/phantom.hpp"

#include <json.hpp>
#include <torch/torch.h>

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace acd {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 32;
    double learning_rate = 1e-4;
    uint64_t seed = 0;
    LossWeights lambdas;
    double baseline_branch_fraction = 0.25;
    std::string schedule = "linear";
    int T = 1000;
    int checkpoint_interval = 5;
    std::string output_dir = "run";
    PairingPolicy pairing = PairingPolicy::AllOrdered;

    void validate() const;
};

inline constexpr int kCheckpointVersion = 1;

struct CheckpointManifest {
    int version = kCheckpointVersion;
    NetworkConfig network;
    TrainConfig train;
    int epoch = 0;
    int64_t global_step = 0;
    int64_t optimizer_step = 0;
    std::string rng_state; // hex-encoded generator state
    std::vector<nlohmann::json> loss_history_tail;
};

struct LoadedCheckpoint {
    CheckpointManifest manifest;
    AlignCdae model{nullptr};
    std::vector<NamedArray> optimizer_arrays;
};

// A checkpoint is a directory holding manifest.json and params.ackp.
void save_checkpoint(AlignCdae& model, const torch::optim::Adam* optimizer, const CheckpointManifest& manifest,
                     const std::filesystem::path& dir);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

std::string encode_rng_state(const at::Generator& gen);
void restore_rng_state(at::Generator& gen, const std::string& hex);

// Model, optimizer and sampling stream of one training run.
class Trainer {
public:
    Trainer(const NetworkConfig& network, const TrainConfig& config);
    // Continues from a checkpoint written by save_state (parameters, moments, rng).
    Trainer(const LoadedCheckpoint& checkpoint, const TrainConfig& config);

    // One optimizer step on the batch-mean objective. Throws NumericalError if
    // any loss component is non-finite.
    LossBreakdown train_step(std::span<const PairSample* const> batch);

    // Remaining epochs up to config.epochs over `pairs`; appends one JSON
    // record per epoch to <output_dir>/train_log.jsonl and writes checkpoints.
    void fit(std::span<const PairSample> pairs);

    void save_state(const std::filesystem::path& dir) const;

    AlignCdae& model() { return model_; }
    const TrainConfig& config() const { return config_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    int epoch() const { return epoch_; }
    int64_t global_step() const { return global_step_; }
    int64_t baseline_branch_count() const { return baseline_branch_count_; }
    const std::vector<nlohmann::json>& history() const { return history_; }

private:
    void make_optimizer();

    TrainConfig config_;
    NetworkConfig network_;
    NoiseSchedule schedule_;
    AlignCdae model_{nullptr};
    std::unique_ptr<torch::optim::Adam> optimizer_;
    at::Generator rng_;
    int epoch_ = 0;
    int64_t global_step_ = 0;
    int64_t baseline_branch_count_ = 0;
    std::vector<nlohmann::json> history_;
};

// Runs training from scratch, or from `resume` when given, and returns the
// final checkpoint directory (<output_dir>/final).
std::filesystem::path train(std::span<const PairSample> pairs, const NetworkConfig& network, const TrainConfig& config,
                            const std::optional<std::filesystem::path>& resume = std::nullopt);

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const NetworkConfig& config);
NetworkConfig network_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LossWeights& lambdas);
LossWeights loss_weights_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LossBreakdown& loss);

} // namespace acd
