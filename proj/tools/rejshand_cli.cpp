// rejshand: train / eval / infer / bench / make-synth / ingest-freihand /
// export-obj. Exit codes: 0 success, 1 validation (bad config, flags or
// inputs), 2 runtime (I/O, numeric failure, anything else).

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rejshand/config.hpp"
#include "rejshand/data_io.hpp"
#include "rejshand/image_io.hpp"
#include "rejshand/pipeline.hpp"

using namespace rejshand;

namespace {

struct GlobalOptions {
    std::string config;
    std::vector<std::string> overrides;
    bool full_scale = false;
};

RunConfig load_run_config(const GlobalOptions& g) {
    KeyValueConfig kv = g.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(g.config);
    if (g.full_scale) apply_full_scale(kv);
    for (const auto& o : g.overrides) kv.set_assignment(o);
    RunConfig cfg = RunConfig::from(kv);
    cfg.validate();
    return cfg;
}

void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw ValidationError(what + " is required");
    if (!fs::is_regular_file(path)) throw ValidationError(what + " '" + path + "' does not exist");
}

void require_dir(const std::string& path, const std::string& what) {
    if (path.empty()) throw ValidationError(what + " is required");
    if (!fs::is_directory(path)) throw ValidationError(what + " '" + path + "' is not a directory");
}

Model build_model(const RunConfig& cfg, const std::string& checkpoint) {
    Model model(cfg.model, cfg.make_regressor(), cfg.seed);
    if (!checkpoint.empty()) load_checkpoint(model.params(), checkpoint);
    return model;
}

std::vector<Face> load_faces(const RunConfig& cfg) { return cfg.assets.faces.empty() ? std::vector<Face>{} : read_faces(cfg.assets.faces); }

HandSample find_sample(const std::string& manifest, const std::string& id) {
    ManifestReader reader(manifest);
    while (auto s = reader.next()) {
        if (id.empty() || s->id == id) return std::move(*s);
    }
    throw ValidationError("sample '" + id + "' not found in " + manifest);
}

void write_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw LoadError("cannot write " + path);
    os << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data, out;
};

int run_train(const GlobalOptions& g, const TrainArgs& a) {
    RunConfig cfg = load_run_config(g);
    const std::string data = a.data.empty() ? cfg.train_manifest : a.data;
    require_file(data, "training manifest");
    if (a.out.empty()) throw ValidationError("--out is required");
    auto samples = load_manifest(data);
    Model model = build_model(cfg, "");
    for (const auto& s : samples) check_sample_fits(model, s);

    const fs::path out = a.out;
    fs::create_directories(out);
    {
        std::ofstream os(out / "config.cfg");
        os << cfg.dump();
    }
    std::ofstream log(out / "train.log");
    const auto best_path = out / "best.ckpt";
    std::cout << "params_head=" << model.head_parameters() << " params_total=" << model.total_parameters()
              << " samples=" << samples.size() << '\n';
    train_model(
        model, samples, cfg,
        [&](const EpochLog& e) {
            log << e.line() << '\n';
            std::cout << e.line() << '\n';
        },
        [&](const EpochLog&) { save_checkpoint(model.params(), best_path); });
    save_checkpoint(model.params(), out / "final.ckpt");
    std::cout << "wrote " << (out / "final.ckpt").string() << '\n';
    return 0;
}

struct EvalArgs {
    std::string checkpoint, data, predictions, json;
    bool no_align = false;
    std::size_t workers = 0;
};

int run_eval(const GlobalOptions& g, const EvalArgs& a) {
    RunConfig cfg = load_run_config(g);
    const std::string data = a.data.empty() ? cfg.eval_manifest : a.data;
    require_file(data, "evaluation manifest");
    if (a.predictions.empty() == a.checkpoint.empty()) {
        throw ValidationError("pass exactly one of --checkpoint or --predictions");
    }
    if (!a.checkpoint.empty()) require_file(a.checkpoint, "checkpoint");
    if (!a.predictions.empty()) require_file(a.predictions, "predictions manifest");
    EvalOptions opt = cfg.metrics;
    if (a.no_align) opt.align_fscore = false;
    const std::size_t workers = a.workers ? a.workers : cfg.eval_workers;

    auto gt = load_manifest(data);
    MetricsReport report;
    if (!a.predictions.empty()) {
        report = evaluate_samples(load_manifest(a.predictions), gt, opt, workers);
    } else {
        Model model = build_model(cfg, a.checkpoint);
        report = evaluate_model(model, gt, opt, workers);
    }
    write_report_text(report, std::cout);
    if (!a.json.empty()) write_json(report_json(report), a.json);
    return 0;
}

struct InferArgs {
    std::string checkpoint, image, data, id, out;
    bool resize = false;
};

int run_infer(const GlobalOptions& g, const InferArgs& a) {
    RunConfig cfg = load_run_config(g);
    require_file(a.checkpoint, "checkpoint");
    if (a.image.empty() == a.data.empty()) throw ValidationError("pass exactly one of --image or --data");
    if (a.out.empty()) throw ValidationError("--out is required");
    const auto faces = load_faces(cfg);
    Model model = build_model(cfg, a.checkpoint);

    Tensor image;
    if (!a.image.empty()) {
        require_file(a.image, "image");
        image = load_image_rgb(a.image, cfg.model.backbone.input_size, a.resize).image;
    } else {
        require_file(a.data, "manifest");
        HandSample s = find_sample(a.data, a.id);
        check_sample_fits(model, s);
        image = s.image;
    }
    ForwardResult r = predict(model, image);

    const fs::path out = a.out;
    fs::create_directories(out);
    write_matrix_file(r.kp2d, out / "kp2d.txt");
    write_matrix_file(r.joints3d, out / "joints3d.txt");
    export_obj(r.mesh.coords, faces, out / "mesh.obj");
    std::cout << "wrote kp2d.txt (" << r.kp2d.dim(0) << " rows), joints3d.txt (" << r.joints3d.dim(0)
              << " rows), mesh.obj (" << r.mesh.coords.dim(0) << " vertices) to " << out.string() << '\n';
    return 0;
}

struct BenchArgs {
    std::string checkpoint, json;
    std::size_t iters = 0, warmup = 0;
    bool has_warmup = false;
};

int run_bench(const GlobalOptions& g, const BenchArgs& a) {
    RunConfig cfg = load_run_config(g);
    const std::size_t iters = a.iters ? a.iters : cfg.bench_iters;
    const std::size_t warmup = a.has_warmup ? a.warmup : cfg.bench_warmup;
    if (iters < 100) throw ValidationError("bench needs at least 100 timed iterations, got " + std::to_string(iters));
    if (warmup < 10) throw ValidationError("bench needs at least 10 warmup iterations, got " + std::to_string(warmup));
    if (!a.checkpoint.empty()) require_file(a.checkpoint, "checkpoint");
    Model model = build_model(cfg, a.checkpoint);

    MetricsReport report;
    report.latency = bench_model(model, iters, warmup, cfg.seed);
    report.head_parameters = model.head_parameters();
    report.total_parameters = model.total_parameters();
    write_report_text(report, std::cout);
    if (!a.json.empty()) write_json(report_json(report), a.json);
    return 0;
}

struct SynthArgs {
    std::size_t count = 0;
    std::string out;
    std::optional<std::uint64_t> seed;
};

int run_make_synth(const GlobalOptions& g, const SynthArgs& a) {
    RunConfig cfg = load_run_config(g);
    if (a.count == 0) throw ValidationError("--count must be at least 1");
    if (a.out.empty()) throw ValidationError("--out is required");
    const JointRegressor reg = cfg.make_regressor();
    SyntheticOptions opt;
    opt.image_size = cfg.model.backbone.input_size;
    opt.channels = cfg.model.backbone.in_channels;
    const fs::path manifest = make_synthetic(a.count, a.seed.value_or(cfg.seed), a.out, reg, opt);
    std::cout << "wrote " << a.count << " samples to " << manifest.string() << '\n';
    return 0;
}

struct IngestArgs {
    std::string xyz, verts, k, images, out;
    bool resize = true;
};

int run_ingest(const GlobalOptions& g, const IngestArgs& a) {
    RunConfig cfg = load_run_config(g);
    require_file(a.xyz, "--xyz");
    require_file(a.verts, "--verts");
    require_file(a.k, "--K");
    require_dir(a.images, "--images");
    if (a.out.empty()) throw ValidationError("--out is required");
    const std::size_t size = cfg.model.backbone.input_size;
    const bool resize = a.resize;
    try {
        const std::size_t n = ingest_freihand(a.xyz, a.verts, a.k, a.images, a.out,
                                              [&](const fs::path& p) { return load_image_rgb(p, size, resize); });
        std::cout << "ingested " << n << " samples into " << a.out << '\n';
    } catch (...) {
        std::error_code ec;
        fs::remove(a.out, ec);
        throw;
    }
    return 0;
}

struct ExportArgs {
    std::string vertices, data, id, checkpoint, out;
};

int run_export_obj(const GlobalOptions& g, const ExportArgs& a) {
    RunConfig cfg = load_run_config(g);
    if (a.vertices.empty() == a.data.empty()) throw ValidationError("pass exactly one of --vertices or --data");
    if (a.out.empty()) throw ValidationError("--out is required");
    const auto faces = load_faces(cfg);
    Tensor coords;
    if (!a.vertices.empty()) {
        require_file(a.vertices, "--vertices");
        coords = read_matrix_file(a.vertices);
    } else {
        require_file(a.data, "manifest");
        if (!a.checkpoint.empty()) require_file(a.checkpoint, "checkpoint");
        HandSample s = find_sample(a.data, a.id);
        if (a.checkpoint.empty()) {
            coords = s.vertices;
        } else {
            Model model = build_model(cfg, a.checkpoint);
            check_sample_fits(model, s);
            coords = predict(model, s.image).mesh.coords;
        }
    }
    if (coords.dim(1) != 3) throw ValidationError("vertices must be V x 3, got " + shape_str(coords.shape()));
    export_obj(coords, faces, a.out);
    std::cout << "wrote " << coords.dim(0) << " vertices, " << faces.size() << " faces to " << a.out << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hand pose and mesh network: training, evaluation, inference and benchmarking"};
    app.require_subcommand(1);
    app.fallthrough();
    GlobalOptions g;
    app.add_option("-c,--config", g.config, "Key = value config file (see configs/)");
    app.add_option("-s,--set", g.overrides, "Override a config key, key=value (repeatable)");
    app.add_flag("--full-scale", g.full_scale, "224 input, batch 32, 200 epochs, 5e-4 -> 5e-5 at epoch 100");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train on a manifest; writes final.ckpt, best.ckpt, train.log");
    train_cmd->add_option("--data", train.data, "Training manifest (default: data.train_manifest)");
    train_cmd->add_option("-o,--out", train.out, "Output directory")->required();

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "PA-MPJPE, PA-MPVPE and F-scores over a manifest");
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "Model checkpoint to evaluate");
    eval_cmd->add_option("--predictions", eval.predictions, "Manifest of predictions, matched to --data by order");
    eval_cmd->add_option("--data", eval.data, "Ground-truth manifest (default: data.eval_manifest)");
    eval_cmd->add_flag("--no-align", eval.no_align, "F-scores on raw vertices instead of Procrustes-aligned ones");
    eval_cmd->add_option("--workers", eval.workers, "Evaluation threads (default: eval.workers)");
    eval_cmd->add_option("--json", eval.json, "Also write the report as JSON");

    InferArgs infer;
    auto* infer_cmd = app.add_subcommand("infer", "Run one image; writes kp2d.txt, joints3d.txt, mesh.obj");
    infer_cmd->add_option("--checkpoint", infer.checkpoint, "Model checkpoint")->required();
    infer_cmd->add_option("--image", infer.image, "Image file (PNG/JPEG)");
    infer_cmd->add_option("--data", infer.data, "Manifest to take the input image from");
    infer_cmd->add_option("--id", infer.id, "Sample id within --data (default: first)");
    infer_cmd->add_flag("--resize", infer.resize, "Resize the image to the model input size");
    infer_cmd->add_option("-o,--out", infer.out, "Output directory")->required();

    BenchArgs bench;
    auto* bench_cmd = app.add_subcommand("bench", "Forward latency, FPS and parameter counts");
    bench_cmd->add_option("--checkpoint", bench.checkpoint, "Optional checkpoint (latency does not depend on it)");
    bench_cmd->add_option("--iters", bench.iters, "Timed iterations (default: bench.iters, min 100)");
    bench_cmd->add_option("--warmup", bench.warmup, "Untimed warmup iterations (default: bench.warmup, min 10)")
        ->each([&](const std::string&) { bench.has_warmup = true; });
    bench_cmd->add_option("--json", bench.json, "Also write the report as JSON");

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("make-synth", "Write a seeded synthetic manifest");
    synth_cmd->add_option("-n,--count", synth.count, "Number of samples")->required();
    synth_cmd->add_option("-o,--out", synth.out, "Output directory (manifest.txt + blobs/)")->required();
    synth_cmd->add_option("--seed", synth.seed, "Data seed (default: config seed)");

    IngestArgs ingest;
    auto* ingest_cmd = app.add_subcommand("ingest-freihand", "Convert FreiHAND-style annotations to a manifest");
    ingest_cmd->add_option("--xyz", ingest.xyz, "Joint annotations JSON")->required();
    ingest_cmd->add_option("--verts", ingest.verts, "Vertex annotations JSON")->required();
    ingest_cmd->add_option("--K", ingest.k, "Camera intrinsics JSON")->required();
    ingest_cmd->add_option("--images", ingest.images, "Image directory")->required();
    ingest_cmd->add_option("-o,--out", ingest.out, "Output manifest path")->required();
    ingest_cmd->add_flag("!--no-resize", ingest.resize, "Reject images that are not the model input size");

    ExportArgs exp;
    auto* export_cmd = app.add_subcommand("export-obj", "Write vertices (ground truth or predicted) as OBJ");
    export_cmd->add_option("--vertices", exp.vertices, "V x 3 matrix file");
    export_cmd->add_option("--data", exp.data, "Manifest holding the sample");
    export_cmd->add_option("--id", exp.id, "Sample id within --data (default: first)");
    export_cmd->add_option("--checkpoint", exp.checkpoint, "Export the prediction for the sample instead");
    export_cmd->add_option("-o,--out", exp.out, "Output OBJ path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*train_cmd) return run_train(g, train);
        if (*eval_cmd) return run_eval(g, eval);
        if (*infer_cmd) return run_infer(g, infer);
        if (*bench_cmd) return run_bench(g, bench);
        if (*synth_cmd) return run_make_synth(g, synth);
        if (*ingest_cmd) return run_ingest(g, ingest);
        if (*export_cmd) return run_export_obj(g, exp);
    } catch (const Error& e) {
        std::cerr << "rejshand: " << e.what() << '\n';
        return e.is_validation() ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "rejshand: runtime error: " << e.what() << '\n';
        return 2;
    }
    return 2;
}
