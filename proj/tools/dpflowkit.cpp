#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dpflow/io.hpp"
#include "dpflow/metrics.hpp"
#include "dpflow/policy.hpp"
#include "dpflow/synthgen.hpp"
#include "dpflow/train.hpp"

namespace fs = std::filesystem;
using namespace dpflow;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Flat key=value file. Blank lines and '#' comments are skipped.
std::vector<std::pair<std::string, std::string>> read_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path);
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
        ++lineno;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
        out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return out;
}

// Splices config entries in front of the user's flags unless the user already gave them.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    std::optional<std::string> config;
    std::vector<std::string> rest;
    std::set<std::string> given;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const auto& a = args[i];
        if (a == "--config") {
            if (i + 1 >= args.size()) throw UsageError("--config needs a path");
            config = args[++i];
            continue;
        }
        if (a.rfind("--config=", 0) == 0) {
            config = a.substr(9);
            continue;
        }
        if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2));
        rest.push_back(a);
    }
    if (!config) return rest;
    std::vector<std::string> out;
    // subcommand name stays first
    auto it = rest.begin();
    if (it != rest.end() && it->rfind("-", 0) != 0) out.push_back(*it++);
    for (const auto& [k, v] : read_config(*config)) {
        if (given.count(k)) continue;
        if (v == "true") {
            out.push_back("--" + k);
        } else if (v != "false") {
            out.push_back("--" + k);
            out.push_back(v);
        }
    }
    out.insert(out.end(), it, rest.end());
    return out;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(cell, &used));
            if (used != cell.size()) throw std::invalid_argument(cell);
        } catch (const std::exception&) {
            throw UsageError("bad integer list '" + text + "'");
        }
    }
    if (out.empty()) throw UsageError("empty integer list");
    return out;
}

Resolution parse_resolution_flag(const std::string& flag, const std::string& text) {
    try {
        return Resolution::parse(text);
    } catch (const std::invalid_argument& e) {
        throw UsageError(flag + ": " + e.what());
    }
}

struct PolicyFlags {
    int levels = 0;
    int iters = 0;
    std::string tile;
    int overlap = 16;
    std::string downsample;

    void add(CLI::App* app) {
        app->add_option("--levels", levels, "Pyramid levels (default: automatic)");
        app->add_option("--iters", iters, "Refinement iterations per level");
        app->add_option("--tile", tile, "Tiled inference with WxH tiles");
        app->add_option("--overlap", overlap, "Tile overlap in pixels");
        app->add_option("--downsample", downsample, "Predict at WxH and resize the flow back");
    }

    PredictOptions options() const {
        PredictOptions o;
        if (levels > 0) o.n_levels = levels;
        if (iters > 0) o.iters = iters;
        return o;
    }

    FlowField run(const DPFlowModel<float>& model, const ImagePair& pair, PredictOptions o) const {
        if (!tile.empty() && !downsample.empty()) throw UsageError("--tile and --downsample are exclusive");
        if (!tile.empty()) return tiled_inference(model, pair, parse_resolution_flag("--tile", tile), overlap, o);
        if (!downsample.empty())
            return downsampled_inference(model, pair, parse_resolution_flag("--downsample", downsample), o);
        return predict(model, pair, o).flow;
    }
};

int cmd_gen(std::uint64_t seed, int scenes, const std::string& factors, const std::string& out, bool translation_only,
            const std::string& base) {
    if (out.empty()) throw UsageError("gen needs --out");
    SceneOptions opts;
    opts.translation_only = translation_only;
    if (!base.empty()) opts.base = parse_resolution_flag("--base", base);
    const auto rows = generate_suite(seed, scenes, parse_int_list(factors), out, opts);
    std::cout << "wrote " << rows.size() << " samples to " << (fs::path(out) / "manifest.csv").string() << "\n";
    return 0;
}

struct TrainFlags {
    std::string data;
    int synthetic = 0;
    int factor = 1;
    int steps = 1000;
    int batch = 2;
    int accum = 1;
    int width = 32;
    double lr = 2.5e-4;
    double wd = 1e-4;
    std::string crop = "128x96";
    std::string reference = "192x108";
    std::string resume;
    int checkpoint_every = 0;
};

int cmd_train(const TrainFlags& f, std::uint64_t seed, int levels, int iters, double gamma, const std::string& out) {
    if (out.empty()) throw UsageError("train needs --out");
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.steps = f.steps;
    cfg.batch = f.batch;
    cfg.accumulation = f.accum;
    cfg.lr = f.lr;
    cfg.weight_decay = f.wd;
    cfg.gamma = gamma;
    cfg.levels = levels > 0 ? levels : 3;
    cfg.crop = parse_resolution_flag("--crop", f.crop);
    cfg.model.width = f.width;
    if (iters > 0) cfg.model.iters = iters;
    cfg.model.reference = parse_resolution_flag("--reference", f.reference);

    std::vector<Sample> data;
    if (!f.data.empty()) {
        std::vector<ManifestRow> rows;
        for (auto& r : read_manifest(f.data))
            if (r.factor == f.factor) rows.push_back(r);
        if (rows.empty()) throw std::invalid_argument("manifest has no samples at factor " + std::to_string(f.factor));
        data = load_samples(rows);
    } else if (f.synthetic > 0) {
        data = synthetic_samples(seed, f.synthetic, f.factor);
    } else {
        throw UsageError("train needs --data MANIFEST or --synthetic N");
    }

    Trainer trainer(cfg, std::move(data));
    if (!f.resume.empty()) trainer.load_checkpoint(f.resume);
    fs::create_directories(out);
    const auto ckpt = (fs::path(out) / "checkpoint.dpfk").string();
    const int remaining = cfg.steps - trainer.completed_steps();
    train(trainer, remaining, (fs::path(out) / "loss.csv").string(), [&](const StepReport& r) {
        if (r.step % 50 == 0 || r.step == cfg.steps)
            std::cerr << "step " << r.step << " loss " << r.loss << " lr " << r.lr << "\n";
        if (f.checkpoint_every > 0 && r.step % f.checkpoint_every == 0) trainer.save_checkpoint(ckpt);
    });
    trainer.save_checkpoint(ckpt);
    save_model(trainer.model(), (fs::path(out) / "model.dpfk").string());
    std::cout << "trained " << trainer.completed_steps() << " steps; checkpoint " << ckpt << "\n";
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest, const PolicyFlags& pf,
             const std::string& sweep, int factor, const std::string& out) {
    if (checkpoint.empty() || manifest.empty()) throw UsageError("eval needs --checkpoint and --manifest");
    const auto model = load_model(checkpoint);
    auto rows = read_manifest(manifest);
    if (factor > 0) std::erase_if(rows, [&](const ManifestRow& r) { return r.factor != factor; });
    if (rows.empty()) throw std::invalid_argument("no manifest rows to evaluate");

    std::vector<int> level_list = sweep.empty() ? std::vector<int>{pf.levels} : parse_int_list(sweep);
    std::vector<int> factors;
    for (const auto& r : rows)
        if (std::find(factors.begin(), factors.end(), r.factor) == factors.end()) factors.push_back(r.factor);

    std::ostringstream csv;
    csv << "levels,factor," << EvalReport::csv_header() << "\n";
    for (int levels : level_list) {
        std::map<int, std::vector<EvalReport>> by_factor;
        for (const auto& r : rows) {
            const auto sample = load_samples({r});
            auto o = pf.options();
            if (levels > 0) o.n_levels = levels;
            EvalReport rep;
            char name[64];
            std::snprintf(name, sizeof name, "scene%05d_x%d", r.scene_id, r.factor);
            try {
                const auto flow = pf.run(model, sample[0].pair, o);
                rep = evaluate(flow, sample[0].flow, sample[0].mask, name);
            } catch (const std::invalid_argument& e) {
                rep.sample = name;
                rep.skipped = true;
                rep.note = e.what();
                for (auto& ch : rep.note)
                    if (ch == ',' || ch == '\n') ch = ';';
            }
            const std::string lv = levels > 0 ? std::to_string(levels) : "auto";
            csv << lv << ',' << r.factor << ',' << rep.to_csv_row() << "\n";
            by_factor[r.factor].push_back(std::move(rep));
        }
        for (int f : factors) {
            const auto agg = aggregate(by_factor[f]);
            const std::string lv = levels > 0 ? std::to_string(levels) : "auto";
            csv << lv << ',' << f << ',' << agg.to_csv_row() << "\n";
            std::cerr << "levels=" << lv << " factor=" << f << " epe=" << agg.epe << " 1px=" << agg.one_px
                      << " wauc=" << agg.wauc << "\n";
        }
    }
    if (out.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream os(out);
        if (!os) throw std::runtime_error("cannot open " + out + " for writing");
        os << csv.str();
    }
    return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& image1, const std::string& image2,
                const PolicyFlags& pf, const std::string& out) {
    if (checkpoint.empty() || out.empty()) throw UsageError("predict needs --checkpoint and --out");
    const auto model = load_model(checkpoint);
    const auto a = read_png(image1);
    const auto b = read_png(image2);
    if (!a.same_shape(b)) {
        throw std::invalid_argument("image sizes differ: " + std::to_string(a.width()) + "x" + std::to_string(a.height()) +
                                    " vs " + std::to_string(b.width()) + "x" + std::to_string(b.height()));
    }
    const auto pair = ImagePair::make(a, b);
    auto o = pf.options();
    const int levels = o.n_levels ? *o.n_levels : select_levels(pair.resolution(), model.config.reference);
    const auto t0 = std::chrono::steady_clock::now();
    const auto flow = pf.run(model, pair, o);
    const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    write_flo(out + ".flo", flow);
    write_png(out + ".png", flow_to_color(flow));
    std::cout << "levels=" << levels << " time_ms=" << ms << "\n";
    return 0;
}

std::string category(const std::exception& e) {
    if (dynamic_cast<const UsageError*>(&e)) return "usage";
    if (dynamic_cast<const FormatError*>(&e)) return "format";
    if (dynamic_cast<const std::out_of_range*>(&e)) return "range";
    if (dynamic_cast<const std::invalid_argument*>(&e)) return "argument";
    return "io";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-pyramid optical flow toolkit"};
    app.require_subcommand(1);

    std::uint64_t seed = 1;
    int levels = 0, iters = 0;
    double gamma = 0.8;
    std::string out;

    auto* gen = app.add_subcommand("gen", "Render a synthetic multi-resolution suite");
    int scenes = 10;
    std::string factors = "1,2,4,8", base;
    bool translation_only = false;
    gen->add_option("--seed", seed);
    gen->add_option("--scenes", scenes);
    gen->add_option("--factors", factors, "Comma-separated scale factors");
    gen->add_option("--base", base, "Base resolution WxH");
    gen->add_flag("--translation-only", translation_only);
    gen->add_option("--out", out);

    auto* tr = app.add_subcommand("train", "Train a model");
    TrainFlags tf;
    tr->add_option("--seed", seed);
    tr->add_option("--levels", levels);
    tr->add_option("--iters", iters);
    tr->add_option("--gamma", gamma);
    tr->add_option("--out", out, "Output directory");
    tr->add_option("--data", tf.data, "Manifest CSV");
    tr->add_option("--synthetic", tf.synthetic, "Render N scenes in memory instead of reading a manifest");
    tr->add_option("--factor", tf.factor);
    tr->add_option("--steps", tf.steps);
    tr->add_option("--batch", tf.batch);
    tr->add_option("--accum", tf.accum);
    tr->add_option("--width", tf.width);
    tr->add_option("--lr", tf.lr);
    tr->add_option("--wd", tf.wd);
    tr->add_option("--crop", tf.crop);
    tr->add_option("--reference", tf.reference, "Resolution that maps to three levels");
    tr->add_option("--resume", tf.resume);
    tr->add_option("--checkpoint-every", tf.checkpoint_every);

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
    PolicyFlags evp;
    std::string checkpoint, manifest, sweep;
    int eval_factor = 0;
    ev->add_option("--checkpoint", checkpoint);
    ev->add_option("--manifest", manifest);
    ev->add_option("--level-sweep", sweep, "Comma-separated level counts");
    ev->add_option("--factor", eval_factor, "Only rows at this factor");
    ev->add_option("--seed", seed);
    ev->add_option("--gamma", gamma);
    ev->add_option("--out", out, "Report CSV");
    evp.add(ev);

    auto* pr = app.add_subcommand("predict", "Predict flow for an image pair");
    PolicyFlags prp;
    std::string image1, image2;
    pr->add_option("--checkpoint", checkpoint);
    pr->add_option("image1", image1)->required();
    pr->add_option("image2", image2)->required();
    pr->add_option("--seed", seed);
    pr->add_option("--gamma", gamma);
    pr->add_option("--out", out, "Output prefix for .flo and .png");
    prp.add(pr);

    try {
        std::vector<std::string> args(argv + 1, argv + argc);
        args = expand_config(args);
        std::reverse(args.begin(), args.end());
        app.parse(args);
        if (*gen) return cmd_gen(seed, scenes, factors, out, translation_only, base);
        if (*tr) return cmd_train(tf, seed, levels, iters, gamma, out);
        if (*ev) return cmd_eval(checkpoint, manifest, evp, sweep, eval_factor, out);
        if (*pr) return cmd_predict(checkpoint, image1, image2, prp, out);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error:usage: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& c : msg)
            if (c == '\n') c = ' ';
        std::cerr << "error:" << category(e) << ": " << msg << "\n";
        return 1;
    }
    return 0;
}
