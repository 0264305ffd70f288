// acd: phantom data generation, training, synthesis, evaluation and
// attention-map figures from one entry point.
#include "acd/config.hpp"
#include "acd/container.hpp"
#include "acd/errors.hpp"
#include "acd/evaluation.hpp"
#include "acd/inference.hpp"
#include "acd/phantom.hpp"
#include "acd/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace acd;

namespace {

ExperimentConfig load_config_or_default(const std::string& path) {
    if (path.empty()) {
        ExperimentConfig c;
        c.validate();
        return c;
    }
    return load_experiment_config(path);
}

int num_workers() {
    const char* env = std::getenv("ACD_NUM_WORKERS");
    if (!env || !*env)
        return 1;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1 || n > 256)
        throw UsageError(std::string("ACD_NUM_WORKERS must be a positive integer, got '") + env + "'");
    return static_cast<int>(n);
}

const SubjectRecord& find_subject(const Dataset& ds, const std::string& id) {
    for (const auto* group : {&ds.test, &ds.train})
        for (const auto& s : *group)
            if (s.subject_id == id)
                return s;
    throw UsageError("unknown subject '" + id + "'");
}

NoiseSchedule checkpoint_schedule(const LoadedCheckpoint& ckpt) {
    return make_schedule(ckpt.manifest.train.schedule, ckpt.manifest.train.T);
}

void require_compatible(const LoadedCheckpoint& ckpt, const Dataset& ds) {
    const auto& net = ckpt.manifest.network;
    if (net.image_size != ds.config.height || net.image_size != ds.config.width)
        throw DataError("checkpoint expects " + std::to_string(net.image_size) + "x" + std::to_string(net.image_size) +
                        " slices, dataset has " + std::to_string(ds.config.height) + "x" +
                        std::to_string(ds.config.width));
}

std::vector<ImageGrid> slices_of(const Volume& v) {
    std::vector<ImageGrid> out;
    for (int64_t c = 0; c < v.depth; ++c)
        out.push_back(v.slice(c));
    return out;
}

std::string slice_name(const char* prefix, int64_t c, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%02lld.%s", prefix, static_cast<long long>(c), ext);
    return buf;
}

struct GenDataArgs {
    std::string config, out;
    std::optional<uint64_t> seed;
};

int run_gen_data(const GenDataArgs& a) {
    auto cfg = load_config_or_default(a.config);
    if (a.seed)
        cfg.data.seed = *a.seed;
    cfg.data.validate();
    const auto ds = generate_dataset(cfg.data);
    write_dataset(ds, a.out);
    const auto pairs_train = build_pairs(ds.train, cfg.network.age_bins, cfg.train.pairing);
    const auto pairs_test = build_pairs(ds.test, cfg.network.age_bins, cfg.train.pairing);
    std::cout << "subjects: train " << ds.train.size() << ", test " << ds.test.size() << "\n"
              << "slice pairs: train " << pairs_train.size() << ", test " << pairs_test.size() << "\n";
    return 0;
}

struct TrainArgs {
    std::string config, data, out, resume;
    bool ablate_alignment = false, ablate_imax = false;
    std::optional<int> epochs;
    std::optional<uint64_t> seed;
};

int run_train(const TrainArgs& a) {
    auto cfg = load_config_or_default(a.config);
    cfg.train.output_dir = a.out;
    if (a.epochs)
        cfg.train.epochs = *a.epochs;
    if (a.seed)
        cfg.train.seed = *a.seed;
    if (a.ablate_alignment) {
        cfg.train.lambdas.imax = 0.0;
        cfg.train.lambdas.align = 0.0;
    }
    if (a.ablate_imax)
        cfg.train.lambdas.imax = 0.0;
    cfg.validate();
    std::optional<LoadedCheckpoint> resume;
    if (!a.resume.empty()) {
        resume = load_checkpoint(a.resume);
        cfg.network = resume->manifest.network;
    }
    const auto ds = read_dataset(a.data);
    if (ds.config.height != cfg.network.image_size || ds.config.width != cfg.network.image_size)
        throw UsageError("network.image_size does not match the dataset slices");
    const auto pairs = build_pairs(ds.train, cfg.network.age_bins, cfg.train.pairing);
    if (pairs.empty())
        throw DataError("dataset " + a.data + " has no training pairs");

    fs::create_directories(a.out);
    {
        std::ofstream snap(fs::path(a.out) / "config.json");
        snap << to_json(cfg).dump(2) << '\n';
    }
    const auto& l = cfg.train.lambdas;
    std::cout << "training on " << pairs.size() << " pairs, lambdas (" << l.imax << ", " << l.align << ", " << l.mse
              << ")\n";
    std::unique_ptr<Trainer> trainer = resume ? std::make_unique<Trainer>(*resume, cfg.train)
                                              : std::make_unique<Trainer>(cfg.network, cfg.train);
    trainer->fit(pairs);
    if (!trainer->history().empty())
        std::cout << "last epoch: " << trainer->history().back().dump() << "\n";
    std::cout << "final checkpoint: " << (fs::path(a.out) / "final").string() << "\n";
    return 0;
}

struct InferArgs {
    std::string config, ckpt, data, subject, disease, out;
    double target_age = 0.0;
    uint64_t seed = 0;
    int baseline_scan = 0;
    std::optional<int> steps;
};

int run_infer(const InferArgs& a) {
    auto cfg = load_config_or_default(a.config);
    const auto state = parse_disease_state(a.disease);
    auto ckpt = load_checkpoint(a.ckpt);
    const auto sched = checkpoint_schedule(ckpt);
    const int steps = a.steps.value_or(cfg.inference.steps);
    if (steps < 1 || steps > sched.steps())
        throw UsageError("--steps must lie in [1, " + std::to_string(sched.steps()) + "]");
    const auto ds = read_dataset(a.data);
    require_compatible(ckpt, ds);
    const auto& subject = find_subject(ds, a.subject);
    if (a.baseline_scan < 0 || a.baseline_scan >= static_cast<int>(subject.scans.size()))
        throw UsageError("subject " + a.subject + " has no scan " + std::to_string(a.baseline_scan));
    const auto& base = subject.scans[static_cast<size_t>(a.baseline_scan)];
    if (a.target_age <= base.age)
        throw UsageError("follow-up must postdate baseline (baseline age " + std::to_string(base.age) + ")");
    if (a.target_age > kMaxAge)
        throw UsageError("target age above " + std::to_string(kMaxAge));

    const auto x_b = slices_of(base.volume);
    const auto attrs = ProgressionAttributes::for_age(a.target_age, state, ckpt.manifest.network.age_bins);
    const std::vector<ProgressionAttributes> batch_attrs(x_b.size(), attrs);
    std::vector<uint64_t> seeds;
    for (size_t c = 0; c < x_b.size(); ++c)
        seeds.push_back(a.seed * 1000003ull + c);
    const auto pred = synthesize_follow_up(ckpt.model, x_b, batch_attrs, sched, steps, seeds);

    fs::create_directories(a.out);
    write_volume(stack_slices(pred, base.volume.depth), fs::path(a.out) / "follow_up.vol");
    for (size_t c = 0; c < pred.size(); ++c)
        write_pgm(pred[c], fs::path(a.out) / slice_name("slice", static_cast<int64_t>(c), "pgm"));
    std::cout << "wrote " << pred.size() << " slices to " << a.out << "\n";
    return 0;
}

struct EvalArgs {
    std::string config, ckpt, compare, data, out;
    std::optional<int> steps, max_pairs;
    std::optional<std::string> extractor;
};

int run_eval(const EvalArgs& a) {
    auto cfg = load_config_or_default(a.config);
    if (a.steps)
        cfg.inference.steps = *a.steps;
    if (a.max_pairs)
        cfg.eval.max_pairs_per_subject = *a.max_pairs;
    if (a.extractor)
        cfg.eval.fid_extractor = *a.extractor;
    cfg.eval.validate();
    auto ckpt = load_checkpoint(a.ckpt);
    std::optional<LoadedCheckpoint> other;
    if (!a.compare.empty())
        other = load_checkpoint(a.compare);
    const auto ds = read_dataset(a.data);
    require_compatible(ckpt, ds);
    if (other)
        require_compatible(*other, ds);
    if (ds.test.empty())
        throw DataError("dataset " + a.data + " has an empty test set");
    cfg.inference.validate(ckpt.manifest.network, ckpt.manifest.train.T);

    auto report = evaluate(ckpt.model, ds.test, ds.config, checkpoint_schedule(ckpt), cfg.inference, cfg.eval);
    write_report(report, a.out);
    nlohmann::json summary;
    for (const auto& g : report.groups)
        summary.push_back(to_json(g));
    if (other) {
        cfg.inference.validate(other->manifest.network, other->manifest.train.T);
        auto report_b =
            evaluate(other->model, ds.test, ds.config, checkpoint_schedule(*other), cfg.inference, cfg.eval);
        auto b_path = fs::path(a.out);
        b_path.replace_filename(b_path.stem().string() + ".compare" + b_path.extension().string());
        write_report(report_b, b_path);
        summary = compare_reports(report, a.ckpt, report_b, a.compare);
        auto cmp_path = fs::path(a.out);
        cmp_path.replace_filename(cmp_path.stem().string() + ".side_by_side.json");
        std::ofstream(cmp_path) << summary.dump(2) << '\n';
    }
    std::cout << summary.dump(2) << "\n";
    return 0;
}

struct AttnArgs {
    std::string config, ckpt, data, subject, out;
    std::optional<int> layer, slice, t, steps;
    uint64_t seed = 0;
};

int run_attn_map(const AttnArgs& a) {
    auto cfg = load_config_or_default(a.config);
    auto ckpt = load_checkpoint(a.ckpt);
    const auto& net = ckpt.manifest.network;
    const auto sched = checkpoint_schedule(ckpt);
    const int layer = a.layer.value_or(cfg.inference.resolved_analysis_layer(net));
    if (layer < 1 || layer > net.decoder_layers())
        throw UsageError("--layer must lie in [1, " + std::to_string(net.decoder_layers()) + "]");
    ckpt.model->query_projection(layer);
    const int t = a.t.value_or(cfg.inference.resolved_attention_t(sched.steps()));
    if (t < 1 || t > sched.steps())
        throw UsageError("--t must lie in [1, " + std::to_string(sched.steps()) + "]");
    const int steps = a.steps.value_or(cfg.inference.steps);
    if (steps < 1 || steps > sched.steps())
        throw UsageError("--steps must lie in [1, " + std::to_string(sched.steps()) + "]");
    const auto ds = read_dataset(a.data);
    require_compatible(ckpt, ds);
    const auto& subject = find_subject(ds, a.subject);
    const auto& base = subject.scans.front();
    const auto& follow = subject.scans.back();
    const int slice = a.slice.value_or(static_cast<int>(base.volume.depth / 2));
    if (slice < 0 || slice >= base.volume.depth)
        throw UsageError("--slice outside the volume");

    const auto x_b = base.volume.slice(slice);
    const auto x_f = follow.volume.slice(slice);
    const auto attrs = ProgressionAttributes::for_age(follow.age, subject.disease, net.age_bins);
    const auto map = extract_attention_map(ckpt.model, x_b, attrs, sched, t, layer, a.seed);
    const auto pred = synthesize_follow_up(ckpt.model, x_b, attrs, sched, steps, a.seed);

    ImageGrid overlay(x_b.height, x_b.width), diff_pred(x_b.height, x_b.width), diff_gt(x_b.height, x_b.width);
    float scale = 0.0f;
    for (int64_t i = 0; i < x_b.size(); ++i) {
        const auto k = static_cast<size_t>(i);
        overlay.pixels[k] = 0.5f * x_b.pixels[k] + 0.5f * map.pixels[k];
        scale = std::max({scale, std::abs(pred.pixels[k] - x_b.pixels[k]), std::abs(x_f.pixels[k] - x_b.pixels[k])});
    }
    if (scale == 0.0f)
        scale = 1.0f;
    for (int64_t i = 0; i < x_b.size(); ++i) {
        const auto k = static_cast<size_t>(i);
        diff_pred.pixels[k] = 0.5f + 0.5f * (pred.pixels[k] - x_b.pixels[k]) / scale;
        diff_gt.pixels[k] = 0.5f + 0.5f * (x_f.pixels[k] - x_b.pixels[k]) / scale;
    }
    fs::create_directories(a.out);
    write_pgm(overlay, fs::path(a.out) / "overlay.pgm");
    write_pgm(diff_pred, fs::path(a.out) / "diff_pred.pgm");
    write_pgm(diff_gt, fs::path(a.out) / "diff_gt.pgm");
    write_pgm(map, fs::path(a.out) / "attention.pgm");
    std::cout << "layer " << layer << ", t " << t << ", slice " << slice << " -> " << a.out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Phantom progression synthesis with attention-aligned diffusion auto-encoders"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Write a phantom dataset");
    gen_cmd->add_option("--config", gen.config, "Experiment config (JSON)");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--seed", gen.seed, "Overrides data.seed");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train a model");
    train_cmd->add_option("--config", tr.config, "Experiment config (JSON)");
    train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
    train_cmd->add_option("--out", tr.out, "Run directory")->required();
    train_cmd->add_flag("--ablate-alignment", tr.ablate_alignment, "Set lambda_imax = lambda_align = 0");
    train_cmd->add_flag("--ablate-imax", tr.ablate_imax, "Set lambda_imax = 0");
    train_cmd->add_option("--resume", tr.resume, "Checkpoint directory to continue from");
    train_cmd->add_option("--epochs", tr.epochs, "Overrides train.epochs");
    train_cmd->add_option("--seed", tr.seed, "Overrides train.seed");

    InferArgs inf;
    auto* infer_cmd = app.add_subcommand("infer", "Synthesize a follow-up volume");
    infer_cmd->add_option("--config", inf.config, "Experiment config (JSON)");
    infer_cmd->add_option("--ckpt", inf.ckpt, "Checkpoint directory")->required();
    infer_cmd->add_option("--data", inf.data, "Dataset directory")->required();
    infer_cmd->add_option("--subject", inf.subject, "Subject id")->required();
    infer_cmd->add_option("--target-age", inf.target_age, "Follow-up age in years")->required();
    infer_cmd->add_option("--disease", inf.disease, "CN, MCI or AD")->required();
    infer_cmd->add_option("--out", inf.out, "Output directory")->required();
    infer_cmd->add_option("--seed", inf.seed, "Sampler seed");
    infer_cmd->add_option("--baseline-scan", inf.baseline_scan, "Index of the baseline scan");
    infer_cmd->add_option("--steps", inf.steps, "Overrides inference.steps");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on the test subjects");
    eval_cmd->add_option("--config", ev.config, "Experiment config (JSON)");
    eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint directory")->required();
    eval_cmd->add_option("--compare", ev.compare, "Second checkpoint for a side-by-side report");
    eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
    eval_cmd->add_option("--out", ev.out, "Report path (JSON; TSV tables are written beside it)")->required();
    eval_cmd->add_option("--steps", ev.steps, "Overrides inference.steps");
    eval_cmd->add_option("--max-pairs", ev.max_pairs, "Overrides eval.max_pairs_per_subject");
    eval_cmd->add_option("--fid-extractor", ev.extractor, "latent or pooled_pixels");

    AttnArgs at;
    auto* attn_cmd = app.add_subcommand("attn-map", "Write attention overlay and difference maps");
    attn_cmd->add_option("--config", at.config, "Experiment config (JSON)");
    attn_cmd->add_option("--ckpt", at.ckpt, "Checkpoint directory")->required();
    attn_cmd->add_option("--data", at.data, "Dataset directory")->required();
    attn_cmd->add_option("--subject", at.subject, "Subject id")->required();
    attn_cmd->add_option("--layer", at.layer, "Decoder layer (default: analysis layer)");
    attn_cmd->add_option("--out", at.out, "Output directory")->required();
    attn_cmd->add_option("--slice", at.slice, "Slice index (default: middle)");
    attn_cmd->add_option("--t", at.t, "Diffusion step for the attention pass");
    attn_cmd->add_option("--steps", at.steps, "Sampler steps for diff_pred");
    attn_cmd->add_option("--seed", at.seed, "Noise seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const int workers = num_workers();
        torch::set_num_threads(workers);
        if (*gen_cmd)
            return run_gen_data(gen);
        if (*train_cmd)
            return run_train(tr);
        if (*infer_cmd)
            return run_infer(inf);
        if (*eval_cmd)
            return run_eval(ev);
        if (*attn_cmd)
            return run_attn_map(at);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
