#include "eddy/cli.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "eddy/checkpoint.hpp"
#include "eddy/datapack.hpp"
#include "eddy/gradcheck_suite.hpp"
#include "eddy/loss.hpp"
#include "eddy/synthgen.hpp"
#include "eddy/trainer.hpp"

namespace eddy::cli {

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GenArgs {
    std::string out;
    std::size_t n_train = 512;
    std::size_t n_test = 256;
    std::size_t size = 128;
    std::uint64_t seed = 42;
    std::size_t grid = 0;
    synth::FieldConfig field;
    double noise = 0.02;
};

struct TrainArgs {
    std::string data;
    std::string loss = "combined";
    std::string channels = "ssh,sst,uv";
    std::string dilation = "on";
    std::size_t epochs = 50;
    std::size_t batch = 8;
    double lr = 1e-3;
    double min_lr = 1e-30;
    std::uint64_t seed = 42;
    std::string out;
    std::string history;
    bool quiet = false;
};

struct EvalArgs {
    std::string data;
    std::string weights;
    std::string split = "test";
    std::string report;
};

struct SegmentArgs {
    std::string input;
    std::string weights;
    std::string out;
};

struct GradcheckArgs {
    std::uint64_t seed = 7;
    std::size_t instances = 5;
    bool inject_fault = false;
    bool skip_network = false;
};

std::string fmt(double v, int precision = 6) {
    std::ostringstream ss;
    ss << std::setprecision(precision) << v;
    return ss.str();
}

int cmd_gen(GenArgs a, std::ostream& out) {
    if (a.size == 0 || a.size % 16 != 0) throw UsageError("--size must be a positive multiple of 16");
    const std::size_t grid = a.grid ? a.grid : a.size + a.size / 4;
    if (grid < a.size) throw UsageError("--grid must be at least --size");
    a.field.height = a.field.width = grid;
    a.field.noise_fraction.fill(a.noise);
    synth::DatasetOptions opts{a.n_train, a.n_test, a.size, a.seed};
    const Manifest m = synth::gen_dataset(a.field, opts, a.out);
    out << "wrote " << m.count(Split::train) << " train + " << m.count(Split::test) << " test samples ("
        << a.size << "x" << a.size << ", seed " << a.seed << ") to " << (std::filesystem::path(a.out) / "manifest.json").string()
        << '\n';
    return kExitOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
    TrainConfig cfg;
    try {
        cfg.loss = parse_loss_kind(a.loss);
        cfg.channels = parse_channels(a.channels);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    cfg.dilation = a.dilation == "on";
    cfg.epochs = a.epochs;
    cfg.batch = a.batch;
    cfg.lr0 = a.lr;
    cfg.min_lr = a.min_lr;
    cfg.seed = a.seed;
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }

    const Manifest manifest = read_manifest(a.data);
    out << "training on " << manifest.count(Split::train) << " samples, channels " << format_channels(cfg.channels)
        << ", loss " << to_string(cfg.loss) << ", dilation " << (cfg.dilation ? 4 : 1) << ", lr " << cfg.lr0
        << ", batch " << cfg.batch << ", epochs " << cfg.epochs << '\n';
    const TrainResult result = train(cfg, manifest, [&](const HistoryRow& r) {
        if (a.quiet) return;
        out << "epoch " << r.epoch << "  loss " << fmt(r.loss) << "  ce " << fmt(r.ce) << "  dice_loss "
            << fmt(r.dice_loss) << "  train_acc " << fmt(r.train_acc) << "  val_acc " << fmt(r.val_acc) << "  lr "
            << r.lr << '\n';
        out.flush();
    });

    const std::filesystem::path ckpt(a.out);
    if (ckpt.has_parent_path()) std::filesystem::create_directories(ckpt.parent_path());
    save_checkpoint(ckpt, result.best);
    write_model_card(model_card_path(ckpt), {result.best.spec(), cfg.channels, manifest.stats, cfg.loss});
    const std::filesystem::path history =
        a.history.empty() ? (ckpt.has_parent_path() ? ckpt.parent_path() / "history.csv" : "history.csv")
                          : std::filesystem::path(a.history);
    write_history_csv(history, result.state.history);
    out << "best validation objective " << fmt(result.state.best_val_loss) << "; checkpoint " << ckpt.string()
        << ", history " << history.string() << '\n';
    return kExitOk;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    Split split;
    try {
        split = parse_split(a.split);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const ModelCard card = read_model_card(model_card_path(a.weights));
    Network<float> net = load_checkpoint(a.weights, card.network);
    const Manifest manifest = read_manifest(a.data);
    const Dataset data = load_split(manifest, split, card.channels);
    const Evaluation ev = evaluate(net, data);
    const LossReport& l = ev.loss;
    const Metrics& m = ev.metrics;

    out << "split " << a.split << " (" << data.n << " samples, " << m.total << " pixels)\n";
    out << "  ce " << fmt(l.ce, 9) << "  dice_loss " << fmt(l.dice_loss, 9) << "  combined " << fmt(l.combined, 9)
        << "  (= ce - ln(1 - dice_loss))\n";
    out << "  dice per class  background " << fmt(l.per_class_dice[kBackground]) << "  anticyclonic "
        << fmt(l.per_class_dice[kAnticyclonic]) << "  cyclonic " << fmt(l.per_class_dice[kCyclonic]) << '\n';
    out << "  pixel accuracy " << fmt(m.pixel_accuracy, 6) << '\n';
    out << "  confusion (rows truth, cols prediction; background, anticyclonic, cyclonic)\n";
    for (const auto& row : m.confusion) out << "    " << row[0] << ' ' << row[1] << ' ' << row[2] << '\n';

    if (!a.report.empty()) {
        nlohmann::ordered_json j;
        j["split"] = a.split;
        j["samples"] = data.n;
        j["ce"] = l.ce;
        j["dice_loss"] = l.dice_loss;
        j["combined"] = l.combined;
        j["per_class_dice"] = l.per_class_dice;
        j["pixel_accuracy"] = m.pixel_accuracy;
        j["confusion"] = m.confusion;
        j["precision"] = m.precision;
        j["recall"] = m.recall;
        std::ofstream f(a.report, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open " + a.report + " for writing");
        f << j.dump(2) << '\n';
    }
    return kExitOk;
}

int cmd_segment(const SegmentArgs& a, std::ostream& out) {
    const ModelCard card = read_model_card(model_card_path(a.weights));
    Network<float> net = load_checkpoint(a.weights, card.network);
    const Sample sample = read_sample(std::filesystem::path(a.input));
    try {
        card.network.validate_input(sample.h, sample.w);
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error(std::string("segment: ") + e.what());
    }
    const Sample one[] = {sample};
    const Dataset data = make_dataset(one, card.stats, card.channels);
    const std::size_t idx[] = {0};
    const auto classes = argmax_classes(predict(net, data.batch_inputs(idx)));

    std::vector<std::uint8_t> pixels(classes.size());
    std::array<std::uint64_t, kNumClasses> counts{};
    for (std::size_t i = 0; i < classes.size(); ++i) {
        ++counts[classes[i]];
        pixels[i] = classes[i] == kBackground ? kGreyBackground
                    : classes[i] == kAnticyclonic ? kGreyAnticyclonic
                                                  : kGreyCyclonic;
    }
    write_pgm(a.out, sample.w, sample.h, pixels);
    nlohmann::ordered_json j;
    j["width"] = sample.w;
    j["height"] = sample.h;
    j["grey_levels"] = {{"cyclonic", kGreyCyclonic}, {"background", kGreyBackground},
                        {"anticyclonic", kGreyAnticyclonic}};
    j["counts"] = {{"cyclonic", counts[kCyclonic]}, {"background", counts[kBackground]},
                   {"anticyclonic", counts[kAnticyclonic]}};
    const auto sidecar = mask_sidecar_path(a.out);
    std::ofstream f(sidecar, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + sidecar.string() + " for writing");
    f << j.dump(2) << '\n';
    out << "wrote " << sample.w << "x" << sample.h << " mask to " << a.out << " (cyclonic " << counts[kCyclonic]
        << ", background " << counts[kBackground] << ", anticyclonic " << counts[kAnticyclonic] << ")\n";
    return kExitOk;
}

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
    GradSuiteOptions opts;
    opts.seed = a.seed;
    opts.instances = a.instances;
    opts.inject_fault = a.inject_fault;
    opts.include_network = !a.skip_network;
    const auto checks = run_gradcheck_suite(opts);
    bool ok = true;
    for (const auto& c : checks) {
        char line[192];
        std::snprintf(line, sizeof line, "%-24s %s  max_rel_err %.3e  tol %.0e  instances %zu  kinks %zu\n",
                      c.name.c_str(), c.pass ? "PASS" : "FAIL", c.max_rel_err, c.tol, c.instances, c.kinks);
        out << line;
        ok = ok && c.pass;
    }
    out << (ok ? "all gradient checks passed\n" : "gradient check FAILED\n");
    return ok ? kExitOk : kExitFailure;
}

}  // namespace

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels) {
    if (pixels.size() != width * height) throw std::invalid_argument("write_pgm: pixel count mismatch");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f << "P5\n" << width << ' ' << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!f) throw std::runtime_error("write failed for " + path.string());
}

Pgm read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::string magic;
    std::size_t maxval = 0;
    Pgm pgm;
    f >> magic >> pgm.width >> pgm.height >> maxval;
    if (!f || magic != "P5" || maxval != 255) throw std::runtime_error(path.string() + ": not an 8-bit P5 PGM");
    f.get();
    pgm.pixels.resize(pgm.width * pgm.height);
    if (!f.read(reinterpret_cast<char*>(pgm.pixels.data()), static_cast<std::streamsize>(pgm.pixels.size()))) {
        throw std::runtime_error(path.string() + ": truncated PGM");
    }
    return pgm;
}

std::filesystem::path mask_sidecar_path(const std::filesystem::path& mask) {
    auto p = mask;
    p.replace_extension(".json");
    return p;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Mesoscale eddy segmentation toolkit"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic labelled dataset");
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    gen_cmd->add_option("--n-train", gen.n_train, "Training samples")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 24));
    gen_cmd->add_option("--n-test", gen.n_test, "Test samples")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 24));
    gen_cmd->add_option("--size", gen.size, "Patch edge length (multiple of 16)");
    gen_cmd->add_option("--seed", gen.seed, "Random seed");
    gen_cmd->add_option("--grid", gen.grid, "Field edge length patches are cut from (default size * 5/4)");
    gen_cmd->add_option("--eddies-min", gen.field.eddies_min, "Minimum eddies per field");
    gen_cmd->add_option("--eddies-max", gen.field.eddies_max, "Maximum eddies per field");
    gen_cmd->add_option("--radius-min", gen.field.radius_min, "Minimum eddy radius [cells]");
    gen_cmd->add_option("--radius-max", gen.field.radius_max, "Maximum eddy radius [cells]");
    gen_cmd->add_option("--amplitude-min", gen.field.amplitude_min, "Minimum SSH amplitude [m]");
    gen_cmd->add_option("--amplitude-max", gen.field.amplitude_max, "Maximum SSH amplitude [m]");
    gen_cmd->add_option("--sst-coupling", gen.field.sst_coupling, "SST response to SSH [degC/m]");
    gen_cmd->add_option("--geostrophic-c", gen.field.geostrophic_c, "Geostrophic constant g/f");
    gen_cmd->add_option("--noise", gen.noise, "Noise std as a fraction of each channel's std")->check(CLI::NonNegativeNumber);

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train a network on a generated dataset");
    train_cmd->add_option("--data", tr.data, "manifest.json")->required();
    train_cmd->add_option("--loss", tr.loss, "combined | ce | dice")->check(CLI::IsMember({"combined", "ce", "dice"}));
    train_cmd->add_option("--channels", tr.channels, "Comma list of ssh, sst, uv, u, v, all");
    train_cmd->add_option("--dilation", tr.dilation, "on | off")->check(CLI::IsMember({"on", "off"}));
    train_cmd->add_option("--epochs", tr.epochs, "Epochs")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20));
    train_cmd->add_option("--batch", tr.batch, "Mini-batch size")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20));
    train_cmd->add_option("--lr", tr.lr, "Initial learning rate")->check(CLI::PositiveNumber);
    train_cmd->add_option("--min-lr", tr.min_lr, "Learning-rate floor")->check(CLI::PositiveNumber);
    train_cmd->add_option("--seed", tr.seed, "Random seed");
    train_cmd->add_option("--out", tr.out, "Checkpoint path")->required();
    train_cmd->add_option("--history", tr.history, "history.csv path (default: next to the checkpoint)");
    train_cmd->add_flag("--quiet", tr.quiet, "Suppress per-epoch lines");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    eval_cmd->add_option("--data", ev.data, "manifest.json")->required();
    eval_cmd->add_option("--weights", ev.weights, "Checkpoint path")->required();
    eval_cmd->add_option("--split", ev.split, "train | test")->check(CLI::IsMember({"train", "test"}));
    eval_cmd->add_option("--report", ev.report, "Also write the report as JSON");

    SegmentArgs seg;
    auto* seg_cmd = app.add_subcommand("segment", "Segment one .eddy sample into a PGM mask");
    seg_cmd->add_option("--input", seg.input, ".eddy sample")->required();
    seg_cmd->add_option("--weights", seg.weights, "Checkpoint path")->required();
    seg_cmd->add_option("--out", seg.out, "Output .pgm")->required();

    GradcheckArgs gc;
    auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
    gc_cmd->add_option("--seed", gc.seed, "Random seed");
    gc_cmd->add_option("--instances", gc.instances, "Random instances per op")->check(CLI::Range(std::size_t{1}, std::size_t{1000}));
    gc_cmd->add_flag("--inject-fault", gc.inject_fault, "Add an op with a deliberately wrong backward (harness self-test)");
    gc_cmd->add_flag("--skip-network", gc.skip_network, "Skip the end-to-end network check");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen(gen, out);
        if (train_cmd->parsed()) return cmd_train(tr, out);
        if (eval_cmd->parsed()) return cmd_eval(ev, out);
        if (seg_cmd->parsed()) return cmd_segment(seg, out);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc, out);
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace eddy::cli
