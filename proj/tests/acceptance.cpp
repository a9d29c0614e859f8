// Acceptance checks, one PASS/FAIL line per criterion.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "eddy/checkpoint.hpp"
#include "eddy/cli.hpp"
#include "eddy/gradcheck_suite.hpp"
#include "eddy/loss.hpp"
#include "eddy/symmetricnet.hpp"
#include "eddy/trainer.hpp"

using namespace eddy;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::string digest(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string all;
    for (const auto& f : files) all += f.filename().string() + '\0' + slurp(f);
    return all;
}

int eddyseg(const std::vector<std::string>& args, bool echo = true) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (echo) std::cout << out.str();
    std::cerr << err.str();
    return code;
}

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

// gen --n-train 128 --n-test 32 --size 64 --seed 42, shared by criteria 5 and 6.
fs::path desk_dataset(const fs::path& work) {
    const auto dir = work / "seed42";
    if (!fs::exists(dir / "manifest.json")) {
        fs::remove_all(dir);
        if (eddyseg({"gen", "--out", dir.string(), "--n-train", "128", "--n-test", "32", "--size", "64", "--seed",
                     "42"}) != 0)
            throw std::runtime_error("gen failed");
    }
    return dir;
}

double majority_baseline(const Dataset& d) {
    std::array<std::size_t, kNumClasses> counts{};
    for (auto c : d.classes) ++counts[c];
    return double(*std::max_element(counts.begin(), counts.end())) / double(d.classes.size());
}

Outcome criterion1() {
    struct Row {
        const char* name;
        double ce, dl, paper;
    };
    const Row rows[] = {{"Multivariate fusion", 0.0763, 0.1076, 0.1902}, {"SSH", 0.0935, 0.1314, 0.2351}};
    Outcome o{true, {}};
    for (const auto& r : rows) {
        const double got = combine_losses(r.ce, r.dl);
        const double diff = std::abs(got - r.paper);
        const bool ok = diff <= 5e-4;
        std::cout << "  " << r.name << ": ce " << r.ce << " DL " << r.dl << " -> " << fmt(got, 6) << " vs "
                  << r.paper << "  |diff| " << fmt(diff, 6) << (ok ? "  ok" : "  out of tolerance") << '\n';
        o.pass = o.pass && ok;
        o.detail += std::string(o.detail.empty() ? "" : ", ") + r.name + " diff " + fmt(diff, 6);
    }
    o.detail += " (tol 5e-4)";
    return o;
}

Outcome criterion2() {
    const auto t0 = Clock::now();
    const auto checks = run_gradcheck_suite({.instances = 5, .seed = 7});
    const double secs = seconds_since(t0);
    bool pass = secs <= 120.0;
    double worst_linear = 0.0, worst_other = 0.0;
    for (const auto& c : checks) {
        std::printf("  %-24s %s  max_rel_err %.3e  tol %.0e  instances %zu\n", c.name.c_str(), c.pass ? "ok  " : "FAIL",
                    c.max_rel_err, c.tol, c.instances);
        pass = pass && c.pass && c.instances >= 5 && c.tol <= 1e-4;
        (c.tol <= 1e-6 ? worst_linear : worst_other) =
            std::max(c.tol <= 1e-6 ? worst_linear : worst_other, c.max_rel_err);
    }
    return {pass, std::to_string(checks.size()) + " checks, worst linear-op rel err " + sci(worst_linear) +
                      ", worst other " + sci(worst_other) + ", " + fmt(secs, 1) + " s (limit 120 s)"};
}

Outcome criterion3() {
    NetworkSpec spec;
    bool pass = true;
    for (std::size_t s : {16u, 64u, 128u}) {
        const auto t = shape_trace(spec, s, s);
        const std::size_t ch[] = {8, 16, 32, 64, 128, 64, 32, 16, 8, 3};
        const std::size_t hw[] = {s / 2, s / 4, s / 8, s / 16, s / 16, s / 8, s / 4, s / 2, s, s};
        bool ok = t.size() == 10;
        for (std::size_t i = 0; ok && i < 10; ++i) ok = t[i].channels == ch[i] && t[i].h == hw[i] && t[i].w == hw[i];
        for (const auto& l : lateral_shapes(spec, s, s))
            ok = ok && l.high.channels == l.skip.channels && l.high.h == l.skip.h && l.high.w == l.skip.w;
        std::cout << "  " << s << "x" << s << ":";
        for (const auto& st : t) std::cout << ' ' << st.stage << '(' << st.channels << ',' << st.h << ')';
        std::cout << (ok ? "  ok" : "  MISMATCH") << '\n';
        pass = pass && ok;
    }
    std::mt19937_64 rng(1);
    auto net = build<float>(spec, rng);
    for (Shape in : {Shape{2, 4, 16, 16}, Shape{1, 4, 64, 64}, Shape{1, 4, 32, 80}}) {
        const auto out = predict(net, Tensor4<float>(in, 0.1f)).shape();
        const bool ok = out == Shape{in.n, 3, in.h, in.w};
        std::cout << "  forward " << in.str() << " -> " << out.str() << (ok ? "  ok" : "  MISMATCH") << '\n';
        pass = pass && ok;
    }
    return {pass, "ladder for 16/64/128, 4 lateral levels, forward output (n,3,H,W)"};
}

Outcome criterion4() {
    NetworkSpec r4;
    NetworkSpec r1;
    r1.dilation = 1;
    const auto a = Network<float>(r4).parameter_count();
    const auto b = Network<float>(r1).parameter_count();
    return {a == b, "rate 4: " + std::to_string(a) + " parameters, rate 1: " + std::to_string(b)};
}

Outcome criterion5(const fs::path& work) {
    const auto t0 = Clock::now();
    const auto data = desk_dataset(work);
    const auto ckpt = work / "c5.bin";
    if (eddyseg({"train", "--data", (data / "manifest.json").string(), "--epochs", "15", "--batch", "8", "--out",
                 ckpt.string(), "--history", (work / "c5_history.csv").string()}) != 0)
        return {false, "train failed"};
    const double train_secs = seconds_since(t0);

    const auto card = read_model_card(model_card_path(ckpt));
    auto net = load_checkpoint(ckpt, card.network);
    const auto manifest = read_manifest(data / "manifest.json");
    const auto test = load_split(manifest, Split::test, card.channels);
    const auto ev = evaluate(net, test);
    const double acc = ev.metrics.pixel_accuracy;
    const double base = majority_baseline(test);
    std::cout << "  test pixel accuracy " << fmt(acc) << ", majority baseline " << fmt(base) << ", training "
              << fmt(train_secs, 1) << " s\n";

    // Single-batch overfit probe: first training batch, 300 train-mode steps.
    const auto train_set = load_split(manifest, Split::train, card.channels);
    TrainConfig cfg;
    cfg.channels = card.channels;
    std::mt19937_64 rng(cfg.seed);
    auto probe = build<float>(cfg.network_spec(), rng);
    std::vector<std::size_t> idx(cfg.batch);
    std::iota(idx.begin(), idx.end(), 0);
    const auto losses = fit_batch(probe, train_set.batch_inputs(idx), train_set.batch_labels(idx), 300, cfg);
    const auto hit = std::find_if(losses.begin(), losses.end(), [](double l) { return l < 0.1; });
    const double min_loss = *std::min_element(losses.begin(), losses.end());
    std::cout << "  overfit probe: combined loss " << fmt(losses.front()) << " -> " << fmt(losses.back())
              << " (min " << fmt(min_loss) << ")"
              << (hit != losses.end() ? " below 0.1 at step " + std::to_string(hit - losses.begin() + 1) : "")
              << '\n';
    const double secs = seconds_since(t0);

    const bool acc_ok = acc >= 0.90;
    const bool margin_ok = acc - base >= 0.05;
    const bool probe_ok = hit != losses.end();
    return {acc_ok && margin_ok && probe_ok && secs <= 900.0,
            "accuracy " + fmt(acc) + " (need 0.90), margin over baseline " + fmt(acc - base) +
                " (need 0.05), overfit min loss " + fmt(min_loss) + " (need < 0.1), " + fmt(secs, 0) +
                " s (limit 900 s)"};
}

Outcome criterion6(const fs::path& work) {
    const auto data = desk_dataset(work);
    const auto manifest_path = (data / "manifest.json").string();
    const auto manifest = read_manifest(manifest_path);
    struct Variant {
        std::string label, channels, loss;
    };
    const std::vector<Variant> variants{{"SSH+SST+UV / combined", "all", "combined"},
                                        {"SSH only", "ssh", "combined"},
                                        {"SST only", "sst", "combined"},
                                        {"UV only", "uv", "combined"},
                                        {"ce only", "all", "ce"},
                                        {"dice only", "all", "dice"}};
    std::printf("  %-24s %9s %9s %9s %9s\n", "run", "accuracy", "ce", "dice_loss", "combined");
    std::map<std::string, double> acc;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        const auto& v = variants[i];
        const auto ckpt = work / ("c6_" + std::to_string(i) + ".bin");
        if (eddyseg({"train", "--data", manifest_path, "--channels", v.channels, "--loss", v.loss, "--epochs", "15",
                     "--batch", "8", "--out", ckpt.string(), "--quiet"},
                    false) != 0)
            return {false, "train failed for " + v.label};
        const auto card = read_model_card(model_card_path(ckpt));
        auto net = load_checkpoint(ckpt, card.network);
        const auto ev = evaluate(net, load_split(manifest, Split::test, card.channels));
        acc[v.label] = ev.metrics.pixel_accuracy;
        std::printf("  %-24s %9.4f %9.4f %9.4f %9.4f\n", v.label.c_str(), ev.metrics.pixel_accuracy, ev.loss.ce,
                    ev.loss.dice_loss, ev.loss.combined);
    }
    const double fused = acc["SSH+SST+UV / combined"];
    const bool fusion_best = fused >= acc["SSH only"] && fused >= acc["SST only"] && fused >= acc["UV only"];
    const bool combined_best = fused >= acc["ce only"] && fused >= acc["dice only"];
    std::cout << "  direction: fusion " << (fusion_best ? ">=" : "<") << " every single variable; combined loss "
              << (combined_best ? ">=" : "<") << " ce-only and dice-only\n";
    return {true, std::string("report only; fusion ") + (fusion_best ? "best" : "not best") + ", combined loss " +
                      (combined_best ? "best" : "not best")};
}

Outcome criterion7(const fs::path& work) {
    bool pass = true;
    std::string detail;
    auto note = [&](const std::string& what, bool ok) {
        std::cout << "  " << what << (ok ? "  ok" : "  FAILED") << '\n';
        pass = pass && ok;
    };

    const auto a = work / "det_a";
    const auto b = work / "det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    const std::vector<std::string> gen{"--n-train", "16", "--n-test", "8", "--size", "64", "--seed", "42"};
    auto gen_into = [&](const fs::path& d) {
        std::vector<std::string> args{"gen", "--out", d.string()};
        args.insert(args.end(), gen.begin(), gen.end());
        return eddyseg(args, false) == 0;
    };
    note("gen twice succeeded", gen_into(a) && gen_into(b));
    note("dataset directories byte-identical", digest(a) == digest(b));

    auto train_into = [&](const fs::path& d) {
        return eddyseg({"train", "--data", (d / "manifest.json").string(), "--epochs", "2", "--batch", "8", "--out",
                        (d / "w.bin").string(), "--quiet"},
                       false) == 0;
    };
    note("train twice succeeded", train_into(a) && train_into(b));
    note("history.csv byte-identical", slurp(a / "history.csv") == slurp(b / "history.csv"));
    note("checkpoint byte-identical", slurp(a / "w.bin") == slurp(b / "w.bin"));

    const auto manifest = read_manifest(a / "manifest.json");
    bool eddy_ok = true;
    for (const auto& p : manifest.paths(Split::train)) {
        const auto s = read_sample(p);
        write_sample(work / "rt.eddy", s);
        eddy_ok = eddy_ok && read_sample(work / "rt.eddy").bitwise_equal(s) && slurp(work / "rt.eddy") == slurp(p);
    }
    note(".eddy round trips bitwise exact", eddy_ok);

    const auto card = read_model_card(model_card_path(a / "w.bin"));
    save_checkpoint(work / "rt.bin", load_checkpoint(a / "w.bin", card.network));
    note("checkpoint round trip bitwise exact", slurp(work / "rt.bin") == slurp(a / "w.bin"));

    Sample big(128, 128);
    write_sample(work / "big.eddy", big);
    const auto size = fs::file_size(work / "big.eddy");
    note("128x128 sample file is " + std::to_string(size) + " bytes", size == 278544);
    return {pass, "dataset, history.csv and checkpoint reproducible; round trips exact; 128x128 file " +
                      std::to_string(size) + " bytes"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    int only = 0;
    std::string workdir = (fs::temp_directory_path() / "eddy_acceptance").string();
    app.add_option("--criterion", only, "Run a single criterion (1-7); 0 runs all")->check(CLI::Range(0, 7));
    app.add_option("--workdir", workdir, "Scratch directory for generated data and checkpoints");
    CLI11_PARSE(app, argc, argv);

    const fs::path work(workdir);
    fs::create_directories(work);
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"loss identity vs Table 1", criterion1},
        {"gradient suite", criterion2},
        {"shape and ladder suite", criterion3},
        {"equal parameter count, rate 4 vs rate 1", criterion4},
        {"desk-scale learning", [&] { return criterion5(work); }},
        {"ablation direction report", [&] { return criterion6(work); }},
        {"determinism and formats", [&] { return criterion7(work); }}};

    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (only != 0 && std::size_t(only) != i + 1) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << "criterion " << i + 1 << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
                  << o.detail << std::endl;
        all = all && o.pass;
    }
    return all ? 0 : 1;
}
