// Command-line pipeline: gen -> extract -> learn -> explain/eval, exchanging
// everything through files. Every run writes a manifest JSON echoing the
// resolved configuration; `relsub --config manifest.json` replays the run.
// Exit codes: 0 ok, 2 usage, 3 data/shape, 4 numerical.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "relsub/attribution.hpp"
#include "relsub/core.hpp"
#include "relsub/dataset_io.hpp"
#include "relsub/eval.hpp"
#include "relsub/io.hpp"
#include "relsub/lrp.hpp"
#include "relsub/model_io.hpp"
#include "relsub/net.hpp"
#include "relsub/rng.hpp"
#include "relsub/subspace.hpp"
#include "relsub/synth.hpp"
#include "relsub/vlayer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace relsub;

namespace {

constexpr const char* kVersion = "1.0.0";

struct Global {
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::string config;
};

template <class T>
void jget(const json& o, const char* key, T& v) {
    if (o.contains(key)) v = o.at(key).get<T>();
}

json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open: " + path);
    try {
        json j;
        f >> j;
        return j;
    } catch (const json::exception& e) {
        throw data_error(path + ": " + e.what());
    }
}

void write_manifest(const std::string& path, const std::string& command, const Global& g,
                    const json& options) {
    json m = {{"version", kVersion},
              {"command", command},
              {"seed", g.seed},
              {"threads", g.threads},
              {"options", options}};
    std::ofstream f(path);
    if (!f) throw data_error("cannot open for writing: " + path);
    f << m.dump(2) << "\n";
}

std::vector<std::size_t> parse_blocks(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        try {
            long v = std::stol(cell);
            if (v <= 0) throw usage_error("block dims must be positive");
            out.push_back(std::size_t(v));
        } catch (const usage_error&) {
            throw;
        } catch (const std::exception&) {
            throw usage_error("bad block list entry '" + cell + "'");
        }
    }
    if (out.empty()) throw usage_error("empty block list");
    return out;
}

struct ImageSet {
    std::vector<Tensor> images;  // each (1,H,W)
    std::vector<std::uint32_t> labels;  // empty when no labels.json sits next to the images
};

ImageSet load_image_dir(const std::string& dir) {
    if (!fs::is_directory(dir)) throw data_error("not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".pgm") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw data_error("no .pgm files in " + dir);
    ImageSet s;
    for (const auto& f : files) {
        Tensor t = load_pgm(f);
        s.images.push_back(t.reshaped(Shape{1, t.shape()[0], t.shape()[1]}));
    }
    std::string lp = (fs::path(dir) / "labels.json").string();
    if (fs::exists(lp)) {
        s.labels = load_labels(lp);
        if (s.labels.size() != s.images.size())
            throw data_error(lp + ": label count does not match image count");
    }
    return s;
}

void save_image_dir(const std::string& dir, const std::vector<Tensor>& images,
                    const std::vector<std::uint32_t>& labels) {
    fs::create_directories(dir);
    char name[32];
    for (std::size_t i = 0; i < images.size(); ++i) {
        std::snprintf(name, sizeof name, "img_%04zu.pgm", i);
        save_pgm((fs::path(dir) / name).string(), images[i]);
    }
    save_labels((fs::path(dir) / "labels.json").string(), labels);
}

// shared attribution/backend flags
struct BackendOpts {
    std::string backend = "lrp";
    std::size_t ig_steps = 100;
    std::size_t shapley_permutations = 25;
    std::size_t patch_size = 4;
    std::string lrp_rule = "zero";
    double lrp_epsilon = 1e-6;
    double lrp_gamma = 0.25;

    void bind(CLI::App* app) {
        app->add_option("--backend", backend, "lrp | gradinput | ig | shapley | shapley-sampling");
        app->add_option("--ig-steps", ig_steps, "integration steps for ig");
        app->add_option("--shapley-permutations", shapley_permutations,
                        "sampled permutations for shapley-sampling");
        app->add_option("--patch-size", patch_size, "square patch edge for pixel grouping");
        app->add_option("--lrp-rule", lrp_rule, "zero | epsilon | gamma | gen-gamma");
        app->add_option("--lrp-epsilon", lrp_epsilon, "stabilizer for the epsilon rule");
        app->add_option("--lrp-gamma", lrp_gamma, "positive-weight boost for the gamma rules");
    }
    void merge(const json& o) {
        jget(o, "backend", backend);
        jget(o, "ig_steps", ig_steps);
        jget(o, "shapley_permutations", shapley_permutations);
        jget(o, "patch_size", patch_size);
        jget(o, "lrp_rule", lrp_rule);
        jget(o, "lrp_epsilon", lrp_epsilon);
        jget(o, "lrp_gamma", lrp_gamma);
    }
    json to_json() const {
        return {{"backend", backend},
                {"ig_steps", ig_steps},
                {"shapley_permutations", shapley_permutations},
                {"patch_size", patch_size},
                {"lrp_rule", lrp_rule},
                {"lrp_epsilon", lrp_epsilon},
                {"lrp_gamma", lrp_gamma}};
    }
    LrpRule rule() const {
        if (lrp_rule == "zero") return LrpRule::zero();
        if (lrp_rule == "epsilon") return LrpRule::epsilon(lrp_epsilon);
        if (lrp_rule == "gamma") return LrpRule::with_gamma(lrp_gamma);
        if (lrp_rule == "gen-gamma") return LrpRule::gen_gamma(lrp_gamma);
        throw usage_error("unknown lrp rule '" + lrp_rule + "'");
    }
    AttributionConfig config(const Model& m, const Global& g) const {
        AttributionConfig cfg;
        cfg.ig_steps = ig_steps;
        cfg.shapley_permutations = shapley_permutations;
        cfg.patch_size = patch_size;
        cfg.seed = g.seed;
        cfg.threads = g.threads;
        cfg.lrp = uniform_lrp(m, rule());
        return cfg;
    }
    ContextMethod method() const { return context_method_from(backend); }
};

// class spec: a fixed index or "label" for each image's own label
std::uint32_t resolve_class(const std::string& spec, const std::vector<std::uint32_t>& labels,
                            std::size_t image_id) {
    if (spec == "label") {
        if (labels.empty()) throw data_error("--class label needs a labels.json beside the images");
        return labels[image_id];
    }
    try {
        long v = std::stol(spec);
        if (v < 0) throw usage_error("class index must be non-negative");
        return std::uint32_t(v);
    } catch (const usage_error&) {
        throw;
    } catch (const std::exception&) {
        throw usage_error("bad class spec '" + spec + "' (index or 'label')");
    }
}

// per-class means, then the mean across classes
double class_balanced_mean(const std::vector<double>& values,
                           const std::vector<std::uint32_t>& labels,
                           std::map<std::uint32_t, double>* per_class = nullptr) {
    std::map<std::uint32_t, std::pair<double, std::size_t>> acc;
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto& a = acc[labels.empty() ? 0 : labels[i]];
        a.first += values[i];
        a.second += 1;
    }
    double total = 0.0;
    for (auto& [cls, a] : acc) {
        double mean = a.first / double(a.second);
        if (per_class) (*per_class)[cls] = mean;
        total += mean;
    }
    return total / double(acc.size());
}

json per_class_json(const std::map<std::uint32_t, double>& per_class) {
    json o = json::object();
    for (auto& [cls, v] : per_class) o[std::to_string(cls)] = v;
    return o;
}

/* gen */

struct GenCmd {
    std::string scenario, out;
    std::size_t n = 500;
    std::size_t num_concepts = 3;
    std::size_t image_dim = 48;
    double poison_rate = 0.25;
    std::size_t n_train = 60, n_val = 60;

    void bind(CLI::App* app) {
        app->add_option("scenario", scenario, "prca2d | drsa2d | concepts | cleverhans");
        app->add_option("--out", out, "output directory");
        app->add_option("--n", n, "sample/image count");
        app->add_option("--num-concepts", num_concepts, "planted concepts (concepts scenario)");
        app->add_option("--image-dim", image_dim, "square image edge (concepts scenario)");
        app->add_option("--poison-rate", poison_rate, "stamped fraction of class-B validation");
        app->add_option("--n-train", n_train, "training images per class (cleverhans)");
        app->add_option("--n-val", n_val,
                        "validation images: per class for cleverhans, total for concepts");
    }
    void merge(const json& o) {
        jget(o, "scenario", scenario);
        jget(o, "out", out);
        jget(o, "n", n);
        jget(o, "num_concepts", num_concepts);
        jget(o, "image_dim", image_dim);
        jget(o, "poison_rate", poison_rate);
        jget(o, "n_train", n_train);
        jget(o, "n_val", n_val);
    }
    json to_json() const {
        return {{"scenario", scenario}, {"out", out},
                {"n", n},               {"num_concepts", num_concepts},
                {"image_dim", image_dim}, {"poison_rate", poison_rate},
                {"n_train", n_train},   {"n_val", n_val}};
    }

    void run(const Global& g) const {
        if (scenario.empty()) throw usage_error("gen needs a scenario");
        if (out.empty()) throw usage_error("gen needs --out");
        fs::create_directories(out);
        fs::path dir(out);
        if (scenario == "prca2d") {
            Prca2dData d = gen_prca2d(g.seed, n);
            save_dataset(d.ds, (dir / "dataset.acds").string());
            save_dataset_csv(d.ds, (dir / "dataset.csv").string());
            std::ofstream f(dir / "planted.json");
            f << json{{"scenario", scenario},
                      {"planted_axis", {d.planted_axis.x(), d.planted_axis.y()}},
                      {"distractor_axis", {d.distractor_axis.x(), d.distractor_axis.y()}}}
                     .dump(2)
              << "\n";
        } else if (scenario == "drsa2d") {
            Drsa2dData d = gen_drsa2d(g.seed, n);
            save_dataset(d.ds, (dir / "dataset.acds").string());
            save_dataset_csv(d.ds, (dir / "dataset.csv").string());
            std::ofstream f(dir / "planted.json");
            f << json{{"scenario", scenario},
                      {"axis1", {d.axis1.x(), d.axis1.y()}},
                      {"axis2", {d.axis2.x(), d.axis2.y()}}}
                     .dump(2)
              << "\n";
        } else if (scenario == "concepts") {
            ConceptsImageData d = gen_concepts_image(g.seed, num_concepts, image_dim, n, n_val);
            save_image_dir((dir / "images").string(), d.images, d.labels);
            if (!d.val_images.empty())
                save_image_dir((dir / "val").string(), d.val_images, d.val_labels);
            save_model(d.model, (dir / "model.json").string());
            std::ofstream f(dir / "planted.json");
            f << json{{"scenario", scenario},
                      {"feature_layer", d.feature_layer},
                      {"theta", d.theta},
                      {"epsilon", d.epsilon},
                      {"eta", d.eta},
                      {"cell_pitch", d.cell_pitch},
                      {"grid", d.grid},
                      {"channel_baseline", d.channel_baseline},
                      {"concept_channels", d.concept_channels},
                      {"concept_cells", d.concept_cells}}
                     .dump(2)
              << "\n";
        } else if (scenario == "cleverhans") {
            CleverHansData d = gen_cleverhans(g.seed, poison_rate, n_train, n_val);
            save_image_dir((dir / "train").string(), d.train_images, d.train_labels);
            save_image_dir((dir / "val").string(), d.val_images, d.val_labels);
            save_image_dir((dir / "val_clean").string(), d.val_images_clean, d.val_labels);
            std::vector<std::uint32_t> tg(d.train_glyph.begin(), d.train_glyph.end());
            std::vector<std::uint32_t> vg(d.val_glyph.begin(), d.val_glyph.end());
            std::vector<std::uint32_t> vcg;  // glyphs in the unstamped copies: class A only
            for (std::uint32_t l : d.val_labels) vcg.push_back(l == 0 ? 1 : 0);
            save_labels((dir / "train" / "glyph.json").string(), tg);
            save_labels((dir / "val" / "glyph.json").string(), vg);
            save_labels((dir / "val_clean" / "glyph.json").string(), vcg);
            save_model(d.model, (dir / "model.json").string());
            save_pgm((dir / "glyph_mask.pgm").string(), d.glyph_mask);
            std::ofstream f(dir / "planted.json");
            f << json{{"scenario", scenario},
                      {"feature_layer", d.feature_layer},
                      {"glyph_channel", d.glyph_channel},
                      {"poison_rate", d.poison_rate}}
                     .dump(2)
              << "\n";
        } else {
            throw usage_error("unknown scenario '" + scenario + "'");
        }
        write_manifest((dir / "manifest.json").string(), "gen", g, to_json());
    }
};

/* extract */

struct ExtractCmd {
    std::string model, images, out, cls = "0", csv;
    std::size_t layer = 0, positions = 20;
    BackendOpts be;

    void bind(CLI::App* app) {
        app->add_option("--model", model, "model JSON");
        app->add_option("--images", images, "directory of .pgm images");
        app->add_option("--layer", layer, "layer whose output is sampled");
        app->add_option("--class", cls, "context class index, or 'label'");
        app->add_option("--positions-per-image", positions, "spatial positions sampled per image");
        app->add_option("--out", out, "output .acds dataset");
        app->add_option("--csv", csv, "also write the dataset as CSV here");
        be.bind(app);
    }
    void merge(const json& o) {
        jget(o, "model", model);
        jget(o, "images", images);
        jget(o, "layer", layer);
        jget(o, "class", cls);
        jget(o, "positions_per_image", positions);
        jget(o, "out", out);
        jget(o, "csv", csv);
        be.merge(o);
    }
    json to_json() const {
        json o = be.to_json();
        o.update({{"model", model},
                  {"images", images},
                  {"layer", layer},
                  {"class", cls},
                  {"positions_per_image", positions},
                  {"out", out},
                  {"csv", csv}});
        return o;
    }

    void run(const Global& g) const {
        if (model.empty() || images.empty() || out.empty())
            throw usage_error("extract needs --model, --images and --out");
        if (positions == 0) throw usage_error("positions-per-image must be positive");
        Model m = load_model(model);
        ImageSet set = load_image_dir(images);
        AttributionConfig cfg = be.config(m, g);
        ContextMethod method = be.method();
        ActivationContextDataset ds;
        std::vector<Eigen::VectorXd> as, cs;
        for (std::size_t i = 0; i < set.images.size(); ++i) {
            std::uint32_t target = resolve_class(cls, set.labels, i);
            ForwardTrace trace = forward(m, set.images[i]);
            if (layer >= m.layers.size()) throw shape_error("layer index out of range");
            const Tensor& act = trace.outputs[layer];
            Tensor ctx = context_map(m, trace, layer, target, method, cfg);
            std::size_t D = act.shape()[0];
            if (act.shape().size() == 1) D = act.size();
            std::size_t hw = detail::positions_of(act, D);
            std::size_t w = act.shape().size() == 3 ? act.shape()[2] : 1;
            Rng rng(mix_seed(g.seed, i));
            std::vector<std::size_t> picks;
            if (hw <= positions) {  // small maps: keep every position
                for (std::size_t p = 0; p < hw; ++p) picks.push_back(p);
            } else {
                picks = rng.sample_indices(hw, positions);
            }
            for (std::size_t p : picks) {
                as.push_back(detail::fiber(act, D, hw, p));
                cs.push_back(detail::fiber(ctx, D, hw, p));
                SampleMeta meta;
                meta.image_id = std::uint32_t(i);
                meta.class_label = set.labels.empty() ? target : set.labels[i];
                meta.row = std::uint16_t(p / w);
                meta.col = std::uint16_t(p % w);
                ds.meta.push_back(meta);
            }
        }
        ds.A.resize(as[0].size(), Eigen::Index(as.size()));
        ds.C.resize(as[0].size(), Eigen::Index(as.size()));
        for (std::size_t j = 0; j < as.size(); ++j) {
            ds.A.col(Eigen::Index(j)) = as[j];
            ds.C.col(Eigen::Index(j)) = cs[j];
        }
        save_dataset(ds, out);
        if (!csv.empty()) save_dataset_csv(ds, csv);
        write_manifest(out + ".manifest.json", "extract", g, to_json());
        std::cout << "extracted " << ds.size() << " samples of dimension " << ds.dim() << "\n";
    }
};

/* learn */

struct LearnCmd {
    std::string method, data, out, blocks, trajectory;
    std::size_t dim = 1;
    double q = 0.5, learning_rate = 0.01;
    std::size_t iterations = 1000, restarts = 3;

    void bind(CLI::App* app) {
        app->add_option("method", method, "prca | pca | drsa | dsa | random | maxrel");
        app->add_option("--data", data, "input .acds dataset");
        app->add_option("--out", out, "output basis JSON");
        app->add_option("-d,--dim", dim, "subspace dimension (prca/pca/maxrel)");
        app->add_option("--blocks", blocks, "comma-separated block dims (drsa/dsa/random)");
        app->add_option("--q", q, "soft-min exponent");
        app->add_option("--iterations", iterations, "gradient steps per restart");
        app->add_option("--learning-rate", learning_rate, "gradient step size");
        app->add_option("--restarts", restarts, "independent restarts");
        app->add_option("--trajectory", trajectory, "objective trajectory CSV (optimizers)");
    }
    void merge(const json& o) {
        jget(o, "method", method);
        jget(o, "data", data);
        jget(o, "out", out);
        jget(o, "dim", dim);
        jget(o, "blocks", blocks);
        jget(o, "q", q);
        jget(o, "iterations", iterations);
        jget(o, "learning_rate", learning_rate);
        jget(o, "restarts", restarts);
        jget(o, "trajectory", trajectory);
    }
    json to_json() const {
        return {{"method", method},   {"data", data},
                {"out", out},         {"dim", dim},
                {"blocks", blocks},   {"q", q},
                {"iterations", iterations}, {"learning_rate", learning_rate},
                {"restarts", restarts}, {"trajectory", trajectory}};
    }

    void run(const Global& g) const {
        if (method.empty()) throw usage_error("learn needs a method");
        if (data.empty() || out.empty()) throw usage_error("learn needs --data and --out");
        ActivationContextDataset ds = load_dataset(data);
        if (method == "prca" || method == "pca") {
            EigenBasisResult r = method == "prca" ? prca(ds, dim) : pca(ds, dim);
            save_basis(r.basis, out);
            std::cout << "objective " << fmt17(r.objective) << "\n";
        } else if (method == "drsa" || method == "dsa") {
            if (blocks.empty()) throw usage_error(method + " needs --blocks");
            normalize_dataset(ds);  // dimension- and scale-invariant objective
            DrsaOptions opts;
            opts.q = q;
            opts.block_dims = parse_blocks(blocks);
            opts.iterations = iterations;
            opts.learning_rate = learning_rate;
            opts.restarts = restarts;
            opts.seed = g.seed;
            opts.threads = g.threads;
            std::string traj = trajectory.empty() ? out + ".traj.csv" : trajectory;
            std::ofstream tf(traj);
            if (!tf) throw data_error("cannot open for writing: " + traj);
            tf << "restart,iteration,objective\n";
            DrsaMonitor monitor = [&](std::size_t r, std::size_t it, double J) {
                tf << r << "," << it << "," << fmt17(J) << "\n";
            };
            DrsaResult r = method == "drsa" ? drsa(ds, opts, monitor) : dsa(ds, opts, monitor);
            save_basis(r.basis, out);
            std::cout << "objective " << fmt17(r.best_objective) << " (restart "
                      << r.best_restart << ")\n";
        } else if (method == "random") {
            if (blocks.empty()) throw usage_error("random needs --blocks");
            save_basis(random_basis(ds.dim(), parse_blocks(blocks), g.seed), out);
        } else if (method == "maxrel") {
            std::vector<double> rel(ds.dim());
            for (std::size_t j = 0; j < ds.dim(); ++j)
                rel[j] = (ds.A.row(Eigen::Index(j)).array() * ds.C.row(Eigen::Index(j)).array())
                             .sum() /
                         double(ds.size());
            save_basis(maxrel(rel, dim), out);
        } else {
            throw usage_error("unknown method '" + method + "'");
        }
        write_manifest(out + ".manifest.json", "learn", g, to_json());
    }
};

/* explain */

struct ExplainCmd {
    std::string model, image, basis, out_prefix;
    std::size_t cls = 0, layer = 0;
    BackendOpts be;

    void bind(CLI::App* app) {
        app->add_option("--model", model, "model JSON");
        app->add_option("--image", image, "input .pgm image");
        app->add_option("--class", cls, "explained class index");
        app->add_option("--layer", layer, "virtual-layer position");
        app->add_option("--basis", basis, "subspace basis JSON");
        app->add_option("--out-prefix", out_prefix, "prefix for heatmap/summary files");
        be.bind(app);
    }
    void merge(const json& o) {
        jget(o, "model", model);
        jget(o, "image", image);
        jget(o, "class", cls);
        jget(o, "layer", layer);
        jget(o, "basis", basis);
        jget(o, "out_prefix", out_prefix);
        be.merge(o);
    }
    json to_json() const {
        json o = be.to_json();
        o.update({{"model", model},
                  {"image", image},
                  {"class", cls},
                  {"layer", layer},
                  {"basis", basis},
                  {"out_prefix", out_prefix}});
        return o;
    }

    void run(const Global& g) const {
        if (model.empty() || image.empty() || basis.empty() || out_prefix.empty())
            throw usage_error("explain needs --model, --image, --basis and --out-prefix");
        Model m = load_model(model);
        Tensor img2 = load_pgm(image);
        Tensor x = img2.reshaped(Shape{1, img2.shape()[0], img2.shape()[1]});
        SubspaceBasis b = load_basis(basis);
        AttributionConfig cfg = be.config(m, g);
        ContextMethod method = be.method();
        JointExplanation joint = two_step_explain(m, x, cls, layer, b, method, cfg);
        SubspaceBasis full;  // single identity block: the unpartitioned explanation
        full.dim = b.dim;
        full.block_dims = {b.dim};
        full.matrix = Eigen::MatrixXd::Identity(Eigen::Index(b.dim), Eigen::Index(b.dim));
        JointExplanation one = two_step_explain(m, x, cls, layer, full, method, cfg);
        for (std::size_t k = 0; k < joint.maps.size(); ++k) {
            std::string stem = out_prefix + "_component_" + std::to_string(k);
            save_relevance_csv(stem + ".csv", joint.maps[k]);
            save_pgm(stem + ".pgm", joint.maps[k]);
        }
        save_relevance_csv(out_prefix + "_onestep.csv", one.maps[0]);
        save_pgm(out_prefix + "_onestep.pgm", one.maps[0]);
        double sum = 0.0, onestep_total = 0.0;
        for (double v : joint.concept_scores) sum += v;
        for (std::size_t i = 0; i < one.maps[0].size(); ++i) onestep_total += one.maps[0][i];
        std::ofstream f(out_prefix + "_summary.json");
        if (!f) throw data_error("cannot open for writing: " + out_prefix + "_summary.json");
        f << json{{"class_index", cls},
                  {"concept_relevance", joint.concept_scores},
                  {"concept_relevance_sum", sum},
                  {"onestep_total", onestep_total}}
                 .dump(2)
          << "\n";
        write_manifest(out_prefix + "_manifest.json", "explain", g, to_json());
    }
};

/* eval */

struct EvalCmd {
    std::string kind, model, images, clean_images, data, basis, labels, out = "report.json";
    std::string cls = "label", ch_blocks;
    std::size_t layer = 0, component = 0;
    long means_class = -1;
    double alpha = 0.75, beta = 0.85;
    std::size_t count = 8, size = 0;
    double q = 0.5;
    // patch flipping knobs
    std::size_t flip_patch = 4, flips_per_step = 1;
    bool tau_squared = false, no_rectify = false;
    std::string inpainter = "zero";
    BackendOpts be;

    void bind(CLI::App* app) {
        app->add_option("kind", kind,
                        "flip | flip-multi | metrics | match | auroc | refine | prototypes");
        app->add_option("--model", model, "model JSON");
        app->add_option("--images", images, "directory of evaluation images");
        app->add_option("--clean-images", clean_images, "unperturbed copies (refine)");
        app->add_option("--data", data, "input .acds dataset");
        app->add_option("--basis", basis, "subspace basis JSON");
        app->add_option("--labels", labels, "binary labels JSON keyed by image id (auroc)");
        app->add_option("--class", cls, "target class index, or 'label'");
        app->add_option("--layer", layer, "virtual-layer position");
        app->add_option("--component", component, "basis block index scored or flipped");
        app->add_option("--ch-blocks", ch_blocks, "comma-separated artifact block indices (refine)");
        app->add_option("--means-class", means_class,
                        "class whose samples calibrate block means (refine; -1: --class)");
        app->add_option("--alpha", alpha, "within-class quantile level (match)");
        app->add_option("--beta", beta, "overall quantile level (match)");
        app->add_option("--count", count, "candidate subsets (prototypes)");
        app->add_option("--size", size, "subset size (prototypes)");
        app->add_option("--q", q, "soft-min exponent (prototypes)");
        app->add_option("--flip-patch", flip_patch, "square patch edge for flipping");
        app->add_option("--flips-per-step", flips_per_step, "patches removed per step");
        app->add_flag("--tau-squared", tau_squared, "quadratic removal schedule");
        app->add_flag("--no-rectify", no_rectify, "record raw instead of rectified outputs");
        app->add_option("--inpainter", inpainter, "zero | neighborhood_mean");
        app->add_option("--out", out, "report JSON path");
        be.bind(app);
    }
    void merge(const json& o) {
        jget(o, "kind", kind);
        jget(o, "model", model);
        jget(o, "images", images);
        jget(o, "clean_images", clean_images);
        jget(o, "data", data);
        jget(o, "basis", basis);
        jget(o, "labels", labels);
        jget(o, "class", cls);
        jget(o, "layer", layer);
        jget(o, "component", component);
        jget(o, "ch_blocks", ch_blocks);
        jget(o, "means_class", means_class);
        jget(o, "alpha", alpha);
        jget(o, "beta", beta);
        jget(o, "count", count);
        jget(o, "size", size);
        jget(o, "q", q);
        jget(o, "flip_patch", flip_patch);
        jget(o, "flips_per_step", flips_per_step);
        jget(o, "tau_squared", tau_squared);
        jget(o, "no_rectify", no_rectify);
        jget(o, "inpainter", inpainter);
        jget(o, "out", out);
        be.merge(o);
    }
    json to_json() const {
        json o = be.to_json();
        o.update({{"kind", kind},       {"model", model},
                  {"images", images},   {"clean_images", clean_images},
                  {"data", data},       {"basis", basis},
                  {"labels", labels},   {"class", cls},
                  {"layer", layer},     {"component", component},
                  {"ch_blocks", ch_blocks}, {"means_class", means_class},
                  {"alpha", alpha},     {"beta", beta},
                  {"count", count},     {"size", size},
                  {"q", q},             {"flip_patch", flip_patch},
                  {"flips_per_step", flips_per_step}, {"tau_squared", tau_squared},
                  {"no_rectify", no_rectify}, {"inpainter", inpainter},
                  {"out", out}});
        return o;
    }

    FlipOptions flip_options() const {
        FlipOptions o;
        o.patch_size = flip_patch;
        o.flips_per_step = flips_per_step;
        o.tau_squared_schedule = tau_squared;
        o.rectify_output = !no_rectify;
        if (inpainter == "zero")
            o.inpainter = Inpainter::Zero;
        else if (inpainter == "neighborhood_mean")
            o.inpainter = Inpainter::NeighborhoodMean;
        else
            throw usage_error("unknown inpainter '" + inpainter + "'");
        return o;
    }

    void write_report(const json& body, const Global& g) const {
        std::ofstream f(out);
        if (!f) throw data_error("cannot open for writing: " + out);
        f << body.dump(2) << "\n";
        write_manifest(out + ".manifest.json", "eval", g, to_json());
    }

    // image-level scores: samples of one image summed per block
    static std::vector<std::vector<double>> image_block_scores(
        const ActivationContextDataset& ds, const SubspaceBasis& b,
        std::vector<std::uint32_t>* image_ids, std::vector<std::uint32_t>* image_classes) {
        std::map<std::uint32_t, std::vector<double>> acc;
        std::map<std::uint32_t, std::uint32_t> cls_of;
        for (std::size_t n = 0; n < ds.size(); ++n) {
            std::vector<double> r =
                concept_relevance(ds.A.col(Eigen::Index(n)), ds.C.col(Eigen::Index(n)), b);
            std::uint32_t id = ds.meta.empty() ? std::uint32_t(n) : ds.meta[n].image_id;
            auto& a = acc[id];
            if (a.empty()) a.assign(b.blocks(), 0.0);
            for (std::size_t k = 0; k < r.size(); ++k) a[k] += r[k];
            cls_of[id] = ds.meta.empty() ? 0 : ds.meta[n].class_label;
        }
        std::vector<std::vector<double>> scores;
        for (auto& [id, v] : acc) {
            if (image_ids) image_ids->push_back(id);
            if (image_classes) image_classes->push_back(cls_of[id]);
            scores.push_back(v);
        }
        return scores;
    }

    void run(const Global& g) const {
        if (kind == "flip" || kind == "flip-multi")
            run_flip(g);
        else if (kind == "metrics")
            run_metrics(g);
        else if (kind == "match")
            run_match(g);
        else if (kind == "auroc")
            run_auroc(g);
        else if (kind == "refine")
            run_refine(g);
        else if (kind == "prototypes")
            run_prototypes(g);
        else
            throw usage_error("unknown eval kind '" + kind + "'");
    }

    void run_flip(const Global& g) const {
        if (model.empty() || images.empty() || basis.empty())
            throw usage_error("flip needs --model, --images and --basis");
        Model m = load_model(model);
        ImageSet set = load_image_dir(images);
        SubspaceBasis b = load_basis(basis);
        AttributionConfig cfg = be.config(m, g);
        FlipOptions fo = flip_options();
        std::vector<double> aupc;
        for (std::size_t i = 0; i < set.images.size(); ++i) {
            std::uint32_t target = resolve_class(cls, set.labels, i);
            JointExplanation joint =
                two_step_explain(m, set.images[i], target, layer, b, be.method(), cfg);
            FlipReport r;
            if (kind == "flip") {
                if (component >= joint.maps.size())
                    throw usage_error("component index out of range");
                r = patch_flip(m, set.images[i], target, joint.maps[component], fo);
            } else {
                r = patch_flip_multi(m, set.images[i], target, joint, fo);
            }
            aupc.push_back(r.aupc);
        }
        std::map<std::uint32_t, double> per_class;
        double mean = class_balanced_mean(aupc, set.labels, &per_class);
        write_report(json{{"kind", kind},
                          {"aupc", mean},
                          {"per_class", per_class_json(per_class)},
                          {"per_image", aupc}},
                     g);
        std::cout << "aupc " << fmt17(mean) << "\n";
    }

    void run_metrics(const Global& g) const {
        if (model.empty() || images.empty() || basis.empty())
            throw usage_error("metrics needs --model, --images and --basis");
        Model m = load_model(model);
        ImageSet set = load_image_dir(images);
        SubspaceBasis b = load_basis(basis);
        AttributionConfig cfg = be.config(m, g);
        std::vector<double> sep, peak;
        for (std::size_t i = 0; i < set.images.size(); ++i) {
            std::uint32_t target = resolve_class(cls, set.labels, i);
            JointExplanation joint =
                two_step_explain(m, set.images[i], target, layer, b, be.method(), cfg);
            sep.push_back(separability(joint));
            peak.push_back(peakness(joint));
        }
        std::map<std::uint32_t, double> sep_cls, peak_cls;
        json body{{"kind", kind},
                  {"separability", class_balanced_mean(sep, set.labels, &sep_cls)},
                  {"peakness", class_balanced_mean(peak, set.labels, &peak_cls)},
                  {"separability_per_class", per_class_json(sep_cls)},
                  {"peakness_per_class", per_class_json(peak_cls)}};
        write_report(body, g);
        std::cout << "separability " << fmt17(body["separability"].get<double>()) << " peakness "
                  << fmt17(body["peakness"].get<double>()) << "\n";
    }

    void run_match(const Global& g) const {
        if (data.empty() || basis.empty()) throw usage_error("match needs --data and --basis");
        ActivationContextDataset ds = load_dataset(data);
        SubspaceBasis b = load_basis(basis);
        std::vector<std::vector<double>> scores(b.blocks(), std::vector<double>(ds.size()));
        std::vector<std::uint32_t> lab(ds.size(), 0);
        for (std::size_t n = 0; n < ds.size(); ++n) {
            std::vector<double> r =
                concept_relevance(ds.A.col(Eigen::Index(n)), ds.C.col(Eigen::Index(n)), b);
            for (std::size_t k = 0; k < r.size(); ++k) scores[k][n] = r[k];
            if (!ds.meta.empty()) lab[n] = ds.meta[n].class_label;
        }
        std::size_t num_classes = 0;
        for (std::uint32_t l : lab) num_classes = std::max<std::size_t>(num_classes, l + 1);
        std::vector<std::vector<bool>> table =
            class_subspace_match(scores, lab, num_classes, alpha, beta);
        json jt = json::array();
        for (const auto& row : table) {
            json r = json::array();
            for (bool v : row) r.push_back(v ? 1 : 0);
            jt.push_back(r);
        }
        write_report(json{{"kind", kind}, {"alpha", alpha}, {"beta", beta}, {"table", jt}}, g);
    }

    void run_auroc(const Global& g) const {
        if (data.empty() || basis.empty() || labels.empty())
            throw usage_error("auroc needs --data, --basis and --labels");
        ActivationContextDataset ds = load_dataset(data);
        SubspaceBasis b = load_basis(basis);
        if (component >= b.blocks()) throw usage_error("component index out of range");
        std::vector<std::uint32_t> bin = load_labels(labels);
        std::vector<std::uint32_t> ids;
        std::vector<std::vector<double>> scores = image_block_scores(ds, b, &ids, nullptr);
        std::vector<double> s;
        std::vector<char> y;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= bin.size()) throw data_error("image id missing from labels file");
            s.push_back(scores[i][component]);
            y.push_back(bin[ids[i]] ? 1 : 0);
        }
        double v = auroc(s, y);
        write_report(json{{"kind", kind}, {"component", component}, {"auroc", v}}, g);
        std::cout << "auroc " << fmt17(v) << "\n";
    }

    void run_refine(const Global& g) const {
        if (model.empty() || images.empty() || basis.empty() || data.empty() || ch_blocks.empty())
            throw usage_error("refine needs --model, --images, --basis, --data and --ch-blocks");
        if (cls == "label") throw usage_error("refine needs a fixed --class index");
        Model m = load_model(model);
        SubspaceBasis b = load_basis(basis);
        std::vector<std::size_t> chb = parse_blocks(ch_blocks);
        std::uint32_t target = resolve_class(cls, {}, 0);
        std::uint32_t mc = means_class < 0 ? target : std::uint32_t(means_class);
        ActivationContextDataset ref = load_dataset(data);
        std::vector<std::uint32_t> ref_cls;
        std::vector<std::vector<double>> ref_scores = image_block_scores(ref, b, nullptr, &ref_cls);
        std::vector<double> means(b.blocks(), 0.0);
        std::size_t used = 0;
        for (std::size_t i = 0; i < ref_scores.size(); ++i) {
            if (ref_cls[i] != mc) continue;
            for (std::size_t k = 0; k < means.size(); ++k) means[k] += ref_scores[i][k];
            ++used;
        }
        if (used == 0) throw data_error("no reference samples of the calibration class");
        for (double& v : means) v /= double(used);

        AttributionConfig cfg = be.config(m, g);
        auto evaluate = [&](const std::string& dir, json& into) {
            ImageSet set = load_image_dir(dir);
            if (set.labels.empty()) throw data_error(dir + ": refine needs labels.json");
            std::size_t ok_raw = 0, ok_ref = 0;
            for (std::size_t i = 0; i < set.images.size(); ++i) {
                std::vector<double> logits = forward(m, set.images[i]).logits().values();
                std::size_t pred_raw =
                    std::max_element(logits.begin(), logits.end()) - logits.begin();
                double refined = refine_prediction(m, set.images[i], target, layer, b, chb,
                                                   means, be.method(), cfg);
                std::vector<double> rl = logits;
                rl[target] = refined;
                std::size_t pred_ref = std::max_element(rl.begin(), rl.end()) - rl.begin();
                ok_raw += pred_raw == set.labels[i];
                ok_ref += pred_ref == set.labels[i];
            }
            into["accuracy"] = double(ok_raw) / double(set.images.size());
            into["accuracy_refined"] = double(ok_ref) / double(set.images.size());
        };
        json body{{"kind", kind}, {"class", target}, {"block_means", means}};
        json pois;
        evaluate(images, pois);
        body["poisoned"] = pois;
        if (!clean_images.empty()) {
            json cleanb;
            evaluate(clean_images, cleanb);
            body["clean"] = cleanb;
        }
        write_report(body, g);
        std::cout << "poisoned accuracy " << fmt17(pois["accuracy"].get<double>()) << " -> "
                  << fmt17(pois["accuracy_refined"].get<double>()) << "\n";
    }

    void run_prototypes(const Global& g) const {
        if (data.empty() || basis.empty()) throw usage_error("prototypes needs --data and --basis");
        if (size == 0) throw usage_error("prototypes needs --size");
        ActivationContextDataset ds = load_dataset(data);
        SubspaceBasis b = load_basis(basis);
        PrototypeResult r = prototypes(ds, b, count, size, g.seed, q);
        std::vector<std::size_t> ids(r.ids.begin(), r.ids.end());
        write_report(json{{"kind", kind}, {"ids", ids}, {"objective", r.objective}}, g);
    }
};

}  // namespace

int main(int argc, char** argv) {
    Global g;
    GenCmd gen;
    ExtractCmd extract;
    LearnCmd learn;
    ExplainCmd explain;
    EvalCmd eval;
    try {
        // the config file is found before CLI11 runs so that explicit flags win
        for (int i = 1; i < argc; ++i) {
            std::string a = argv[i];
            if (a == "--config" && i + 1 < argc)
                g.config = argv[i + 1];
            else if (a.rfind("--config=", 0) == 0)
                g.config = a.substr(9);
        }
        json cfg;
        std::string cfg_command;
        if (!g.config.empty()) {
            cfg = load_json(g.config);
            jget(cfg, "command", cfg_command);
            jget(cfg, "seed", g.seed);
            jget(cfg, "threads", g.threads);
            if (cfg.contains("options")) {
                const json& o = cfg["options"];
                if (cfg_command == "gen") gen.merge(o);
                if (cfg_command == "extract") extract.merge(o);
                if (cfg_command == "learn") learn.merge(o);
                if (cfg_command == "explain") explain.merge(o);
                if (cfg_command == "eval") eval.merge(o);
            }
        }

        CLI::App app{"relevance-subspace toolkit"};
        app.require_subcommand(0, 1);
        app.add_option("--seed", g.seed, "master seed");
        app.add_option("--threads", g.threads, "worker threads (never changes results)");
        app.add_option("--config", g.config, "JSON manifest supplying defaults");
        CLI::App* s_gen = app.add_subcommand("gen", "generate a synthetic scenario");
        CLI::App* s_extract = app.add_subcommand("extract", "collect activation-context pairs");
        CLI::App* s_learn = app.add_subcommand("learn", "fit a subspace basis");
        CLI::App* s_explain = app.add_subcommand("explain", "joint heatmaps for one image");
        CLI::App* s_eval = app.add_subcommand("eval", "evaluation reports");
        for (CLI::App* s : {s_gen, s_extract, s_learn, s_explain, s_eval}) s->fallthrough();
        gen.bind(s_gen);
        extract.bind(s_extract);
        learn.bind(s_learn);
        explain.bind(s_explain);
        eval.bind(s_eval);

        try {
            app.parse(argc, argv);
        } catch (const CLI::CallForHelp& e) {
            return app.exit(e);
        } catch (const CLI::ParseError& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 2;
        }

        std::string command;
        if (s_gen->parsed()) command = "gen";
        else if (s_extract->parsed()) command = "extract";
        else if (s_learn->parsed()) command = "learn";
        else if (s_explain->parsed()) command = "explain";
        else if (s_eval->parsed()) command = "eval";
        if (command.empty()) command = cfg_command;
        if (command.empty()) throw usage_error("no command given (see --help)");
        if (!cfg_command.empty() && command != cfg_command)
            throw usage_error("config is for command '" + cfg_command + "'");
        if (g.threads == 0) throw usage_error("threads must be positive");

        if (command == "gen") gen.run(g);
        else if (command == "extract") extract.run(g);
        else if (command == "learn") learn.run(g);
        else if (command == "explain") explain.run(g);
        else if (command == "eval") eval.run(g);
        return 0;
    } catch (const usage_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const shape_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const data_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
