#include "acd/training.hpp"

#include "acd/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

namespace acd {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok)
            throw UsageError("train config: " + msg);
    };
    require(epochs >= 0, "epochs must be non-negative");
    require(batch_size > 0, "batch_size must be positive");
    require(learning_rate > 0, "learning_rate must be positive");
    require(lambdas.imax >= 0 && lambdas.align >= 0 && lambdas.mse >= 0, "loss weights must be non-negative");
    require(baseline_branch_fraction >= 0 && baseline_branch_fraction <= 1, "baseline_branch_fraction outside [0, 1]");
    require(T >= 1, "T must be positive");
    require(checkpoint_interval > 0, "checkpoint_interval must be positive");
    make_schedule(schedule, 1);
}

std::string encode_rng_state(const at::Generator& gen) {
    auto state = gen.get_state();
    static constexpr char digits[] = "0123456789abcdef";
    std::string hex;
    hex.reserve(static_cast<size_t>(state.numel()) * 2);
    const auto* bytes = state.data_ptr<uint8_t>();
    for (int64_t i = 0; i < state.numel(); ++i) {
        hex.push_back(digits[bytes[i] >> 4]);
        hex.push_back(digits[bytes[i] & 0xf]);
    }
    return hex;
}

void restore_rng_state(at::Generator& gen, const std::string& hex) {
    if (hex.size() % 2 != 0)
        throw DataError("rng state has odd length");
    auto state = torch::empty({static_cast<int64_t>(hex.size() / 2)}, torch::kUInt8);
    auto* bytes = state.data_ptr<uint8_t>();
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9')
            return c - '0';
        if (c >= 'a' && c <= 'f')
            return c - 'a' + 10;
        throw DataError("rng state is not hex");
    };
    for (size_t i = 0; i < hex.size() / 2; ++i)
        bytes[i] = static_cast<uint8_t>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
    try {
        gen.set_state(state);
    } catch (const c10::Error& e) {
        throw DataError(std::string("rng state rejected: ") + e.what_without_backtrace());
    }
}

namespace {

NamedArray to_named_array(const std::string& name, const torch::Tensor& tensor) {
    auto t = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    NamedArray a;
    a.name = name;
    a.shape.assign(t.sizes().begin(), t.sizes().end());
    a.values.assign(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
    return a;
}

void copy_into(torch::Tensor& dst, const NamedArray& src) {
    if (!dst.sizes().equals(src.shape))
        throw DataError("checkpoint array '" + src.name + "' has an unexpected shape");
    auto host = torch::from_blob(const_cast<float*>(src.values.data()), dst.sizes(), torch::kFloat32);
    torch::NoGradGuard no_grad;
    dst.copy_(host);
}

nlohmann::json manifest_json(const CheckpointManifest& m) {
    return {{"version", m.version},
            {"network", to_json(m.network)},
            {"train", to_json(m.train)},
            {"epoch", m.epoch},
            {"global_step", m.global_step},
            {"optimizer_step", m.optimizer_step},
            {"rng_state", m.rng_state},
            {"loss_history_tail", m.loss_history_tail}};
}

} // namespace

void save_checkpoint(AlignCdae& model, const torch::optim::Adam* optimizer, const CheckpointManifest& manifest,
                     const fs::path& dir) {
    fs::create_directories(dir);
    std::vector<NamedArray> arrays;
    for (const auto& item : model->named_parameters())
        arrays.push_back(to_named_array(item.key(), item.value()));
    if (optimizer) {
        const auto& state = optimizer->state();
        for (const auto& item : model->named_parameters()) {
            auto it = state.find(item.value().unsafeGetTensorImpl());
            if (it == state.end())
                continue;
            const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
            arrays.push_back(to_named_array("adam.exp_avg/" + item.key(), s.exp_avg()));
            arrays.push_back(to_named_array("adam.exp_avg_sq/" + item.key(), s.exp_avg_sq()));
        }
    }
    write_array_bundle(arrays, dir / "params.ackp");
    std::ofstream out(dir / "manifest.json");
    out << manifest_json(manifest).dump(2) << '\n';
    if (!out)
        throw DataError("failed writing " + (dir / "manifest.json").string());
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in)
        throw DataError("cannot open checkpoint manifest " + (dir / "manifest.json").string());
    LoadedCheckpoint out;
    try {
        const auto j = nlohmann::json::parse(in);
        const int version = j.at("version").get<int>();
        if (version != kCheckpointVersion)
            throw DataError("checkpoint " + dir.string() + " has format version " + std::to_string(version) +
                            ", this build reads version " + std::to_string(kCheckpointVersion));
        auto& m = out.manifest;
        m.version = version;
        m.network = network_config_from_json(j.at("network"));
        m.train = train_config_from_json(j.at("train"));
        m.epoch = j.at("epoch").get<int>();
        m.global_step = j.at("global_step").get<int64_t>();
        m.optimizer_step = j.at("optimizer_step").get<int64_t>();
        m.rng_state = j.at("rng_state").get<std::string>();
        m.loss_history_tail = j.at("loss_history_tail").get<std::vector<nlohmann::json>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError((dir / "manifest.json").string() + ": " + e.what());
    } catch (const UsageError& e) {
        throw DataError((dir / "manifest.json").string() + ": " + e.what());
    }

    out.model = AlignCdae(out.manifest.network);
    auto arrays = read_array_bundle(dir / "params.ackp");
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) {
        if (!by_name.emplace(a.name, &a).second)
            throw DataError("checkpoint array '" + a.name + "' appears twice");
    }
    for (auto& item : out.model->named_parameters()) {
        auto it = by_name.find(item.key());
        if (it == by_name.end())
            throw DataError("checkpoint " + dir.string() + " is missing parameter '" + item.key() + "'");
        copy_into(item.value(), *it->second);
    }
    for (auto& a : arrays) {
        if (a.name.starts_with("adam."))
            out.optimizer_arrays.push_back(std::move(a));
    }
    return out;
}

Trainer::Trainer(const NetworkConfig& network, const TrainConfig& config)
    : config_(config), network_(network), schedule_(make_schedule(config.schedule, config.T)),
      rng_(at::make_generator<at::CPUGeneratorImpl>(config.seed)) {
    config_.validate();
    model_ = init_parameters(network, config.seed);
    make_optimizer();
}

Trainer::Trainer(const LoadedCheckpoint& checkpoint, const TrainConfig& config)
    : config_(config), network_(checkpoint.manifest.network), schedule_(make_schedule(config.schedule, config.T)),
      rng_(at::make_generator<at::CPUGeneratorImpl>(config.seed)) {
    config_.validate();
    model_ = checkpoint.model;
    make_optimizer();
    epoch_ = checkpoint.manifest.epoch;
    global_step_ = checkpoint.manifest.global_step;
    history_ = checkpoint.manifest.loss_history_tail;
    restore_rng_state(rng_, checkpoint.manifest.rng_state);

    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : checkpoint.optimizer_arrays)
        by_name.emplace(a.name, &a);
    auto& state = optimizer_->state();
    for (auto& item : model_->named_parameters()) {
        auto m = by_name.find("adam.exp_avg/" + item.key());
        auto v = by_name.find("adam.exp_avg_sq/" + item.key());
        if (m == by_name.end() || v == by_name.end())
            continue;
        auto s = std::make_unique<torch::optim::AdamParamState>();
        s->step(checkpoint.manifest.optimizer_step);
        auto exp_avg = torch::zeros_like(item.value());
        auto exp_avg_sq = torch::zeros_like(item.value());
        copy_into(exp_avg, *m->second);
        copy_into(exp_avg_sq, *v->second);
        s->exp_avg(exp_avg);
        s->exp_avg_sq(exp_avg_sq);
        state[item.value().unsafeGetTensorImpl()] = std::move(s);
    }
}

void Trainer::make_optimizer() {
    optimizer_ = std::make_unique<torch::optim::Adam>(
        model_->parameters(),
        torch::optim::AdamOptions(config_.learning_rate).betas({0.9, 0.999}).eps(1e-8).weight_decay(0.0));
}

LossBreakdown Trainer::train_step(std::span<const PairSample* const> batch) {
    if (batch.empty())
        throw UsageError("train_step: empty batch");
    const auto n = static_cast<int64_t>(batch.size());
    model_->train();

    std::vector<ImageGrid> bases, follows;
    std::vector<ProgressionAttributes> attrs;
    for (const auto* p : batch) {
        bases.push_back(p->x_b);
        follows.push_back(p->x_f);
        attrs.push_back(p->attrs);
    }
    auto x_b = to_tensor(bases);
    auto x_f = to_tensor(follows);

    auto t = torch::randint(1, config_.T + 1, {n}, rng_, torch::kLong);
    auto baseline_branch = torch::rand({n}, rng_) < config_.baseline_branch_fraction;
    auto eps = torch::randn(x_f.sizes(), rng_);

    auto z_b = encode_semantic(model_, x_b);
    auto z_prime = encode_condition(model_, attrs);
    auto z_f = compose_follow_up_latent(z_b, z_prime);
    auto z = torch::where(baseline_branch.view({n, 1}), z_b, z_f);
    auto target = torch::where(baseline_branch.view({n, 1, 1, 1}), x_b, x_f);
    auto x_t = forward_diffuse(target, t, eps, schedule_);

    auto result = denoise(model_, x_t, t, z, config_.T);
    std::vector<std::pair<int64_t, int64_t>> shapes;
    std::vector<AttentionTap> taps;
    for (auto& tap : result.taps) {
        shapes.emplace_back(tap.height(), tap.width());
        taps.push_back(compute_cross_attention(model_, z_prime, std::move(tap)));
    }
    auto mask = build_progression_mask(x_b, x_f, shapes);
    auto loss = total_loss(taps, mask, target, result.x0_hat, config_.lambdas, baseline_branch.logical_not());

    const auto& b = loss.breakdown;
    for (auto [name, value] : {std::pair{"l_mse", b.l_mse}, std::pair{"l_attn_align", b.l_attn_align},
                               std::pair{"l_attn_imax", b.l_attn_imax}, std::pair{"total", b.total}}) {
        if (!std::isfinite(value))
            throw NumericalError(std::string("non-finite ") + name + " at step " + std::to_string(global_step_ + 1));
    }
    optimizer_->zero_grad();
    loss.total.backward();
    optimizer_->step();
    ++global_step_;
    baseline_branch_count_ += baseline_branch.sum().item<int64_t>();
    return loss.breakdown;
}

void Trainer::save_state(const fs::path& dir) const {
    CheckpointManifest m;
    m.network = network_;
    m.train = config_;
    m.epoch = epoch_;
    m.global_step = global_step_;
    m.rng_state = encode_rng_state(rng_);
    const auto& state = optimizer_->state();
    if (!state.empty())
        m.optimizer_step = static_cast<const torch::optim::AdamParamState&>(*state.begin()->second).step();
    const size_t tail = std::min<size_t>(history_.size(), 10);
    m.loss_history_tail.assign(history_.end() - static_cast<std::ptrdiff_t>(tail), history_.end());
    auto model = model_;
    save_checkpoint(model, optimizer_.get(), m, dir);
}

namespace {

std::string epoch_dir_name(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "epoch_%04d", epoch);
    return buf;
}

uint64_t shuffle_seed(uint64_t seed, int epoch) {
    uint64_t x = seed ^ (0x9e3779b97f4a7c15ull * static_cast<uint64_t>(epoch + 1));
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

} // namespace

void Trainer::fit(std::span<const PairSample> pairs) {
    if (pairs.empty())
        throw UsageError("training needs a non-empty dataset");
    const fs::path out_dir = config_.output_dir;
    fs::create_directories(out_dir / "checkpoints");
    std::ofstream log(out_dir / "train_log.jsonl", std::ios::app);
    if (!log)
        throw DataError("cannot open training log in " + out_dir.string());

    if (epoch_ == 0)
        save_state(out_dir / "checkpoints" / epoch_dir_name(0));

    std::vector<size_t> order(pairs.size());
    while (epoch_ < config_.epochs) {
        const auto started = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), size_t{0});
        std::mt19937_64 shuffler(shuffle_seed(config_.seed, epoch_));
        std::shuffle(order.begin(), order.end(), shuffler);

        double sum_mse = 0, sum_align = 0, sum_imax = 0, sum_total = 0;
        int64_t skipped = 0;
        int64_t steps = 0;
        const auto baseline_before = baseline_branch_count_;
        std::vector<const PairSample*> batch;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config_.batch_size)) {
            batch.clear();
            const size_t end = std::min(order.size(), start + static_cast<size_t>(config_.batch_size));
            for (size_t i = start; i < end; ++i)
                batch.push_back(&pairs[order[i]]);
            const auto b = train_step(batch);
            sum_mse += b.l_mse;
            sum_align += b.l_attn_align;
            sum_imax += b.l_attn_imax;
            sum_total += b.total;
            skipped += b.skipped_alignment_count;
            ++steps;
        }
        ++epoch_;
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        nlohmann::json record{{"epoch", epoch_},
                              {"l_mse", sum_mse / steps},
                              {"l_attn_align", sum_align / steps},
                              {"l_attn_imax", sum_imax / steps},
                              {"total", sum_total / steps},
                              {"skipped_alignment_count", skipped},
                              {"baseline_branch_count", baseline_branch_count_ - baseline_before},
                              {"steps", steps},
                              {"global_step", global_step_},
                              {"seconds", seconds}};
        history_.push_back(record);
        log << record.dump() << '\n';
        log.flush();
        if (epoch_ % config_.checkpoint_interval == 0)
            save_state(out_dir / "checkpoints" / epoch_dir_name(epoch_));
    }
    save_state(out_dir / "final");
}

fs::path train(std::span<const PairSample> pairs, const NetworkConfig& network, const TrainConfig& config,
               const std::optional<fs::path>& resume) {
    std::unique_ptr<Trainer> trainer;
    if (resume)
        trainer = std::make_unique<Trainer>(load_checkpoint(*resume), config);
    else
        trainer = std::make_unique<Trainer>(network, config);
    trainer->fit(pairs);
    return fs::path(config.output_dir) / "final";
}

} // namespace acd
