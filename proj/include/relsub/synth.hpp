#pragma once
// Seeded synthetic scenarios with analytically known ground truth. Image tasks
// compose 4x4 Walsh-pattern stamps whose worst shifted/cross correlation is
// 3/4, so a matched-filter conv channel with bias below -(max amplitude * 3/4)
// fires only on exact own-stamp alignments; every margin here relies on that.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "relsub/core.hpp"
#include "relsub/net.hpp"
#include "relsub/rng.hpp"
#include "relsub/subspace.hpp"

namespace relsub {

/* 2D toy clouds */

struct Prca2dData {
    ActivationContextDataset ds;
    Eigen::Vector2d planted_axis;     // direction the response actually uses
    Eigen::Vector2d distractor_axis;  // high-variance direction the response ignores
};

// activations spread 3x wider along a rotated e1, but the context (model
// response) lives entirely on the rotated e2
inline Prca2dData gen_prca2d(std::uint64_t seed, std::size_t n) {
    if (n < 10) throw usage_error("need at least 10 samples");
    Rng rng(seed);
    double th = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Eigen::Matrix2d Q;
    Q << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    Prca2dData out;
    out.planted_axis = Q.col(1);
    out.distractor_axis = Q.col(0);
    out.ds.A.resize(2, Eigen::Index(n));
    out.ds.C.resize(2, Eigen::Index(n));
    out.ds.meta.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double g1 = rng.normal(), g2 = rng.normal();
        Eigen::Vector2d a(3.0 * g1, g2), c(0.0, g2);
        out.ds.A.col(Eigen::Index(i)) = Q * a;
        out.ds.C.col(Eigen::Index(i)) = Q * c;
        out.ds.meta[i].image_id = std::uint32_t(i);
    }
    return out;
}

struct Drsa2dData {
    ActivationContextDataset ds;
    Eigen::Vector2d axis1, axis2;  // planted concept axes
};

// two relevant concepts on rotated axes plus an irrelevant high-variance
// cloud at 30 degrees off axis 1; the activation-only ablation is drawn to
// a balanced split of that cloud, the context-aware objective is not
inline Drsa2dData gen_drsa2d(std::uint64_t seed, std::size_t n) {
    if (n < 10) throw usage_error("need at least 10 samples");
    Rng rng(seed);
    double th = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Eigen::Matrix2d Q;
    Q << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
    Drsa2dData out;
    out.axis1 = Q.col(0);
    out.axis2 = Q.col(1);
    out.ds.A.resize(2, Eigen::Index(n));
    out.ds.C.resize(2, Eigen::Index(n));
    out.ds.meta.resize(n);
    const double c30 = std::cos(std::numbers::pi / 6.0), s30 = std::sin(std::numbers::pi / 6.0);
    for (std::size_t i = 0; i < n; ++i) {
        double g = rng.normal(), h = rng.normal();
        Eigen::Vector2d a, c;
        switch (i % 3) {
            case 0:
                a = {1.2 * std::abs(g) + 0.3, 0.05 * h};
                c = {a.x(), 0.0};
                break;
            case 1:
                a = {0.05 * h, 1.2 * std::abs(g) + 0.3};
                c = {0.0, a.y()};
                break;
            default:
                a = {4.0 * g * c30, 4.0 * g * s30};
                c = {0.0, 0.0};
                break;
        }
        out.ds.A.col(Eigen::Index(i)) = Q * a;
        out.ds.C.col(Eigen::Index(i)) = Q * c;
        out.ds.meta[i].image_id = std::uint32_t(i);
    }
    return out;
}

/* Walsh stamp machinery shared by the image scenarios */

namespace detail {

// rows of the order-4 Walsh-Hadamard family, unit norm
inline const double* walsh_row(std::size_t i) {
    static const double rows[4][4] = {
        {0.5, 0.5, 0.5, 0.5},
        {0.5, 0.5, -0.5, -0.5},
        {0.5, -0.5, -0.5, 0.5},
        {0.5, -0.5, 0.5, -0.5},
    };
    return rows[i];
}

inline Tensor walsh_stamp(std::size_t a, std::size_t b) {
    Tensor t(Shape{4, 4});
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) t[r * 4 + c] = walsh_row(a)[r] * walsh_row(b)[c];
    return t;
}

inline void draw_stamp(Tensor& img, const Tensor& stamp, std::size_t r0, std::size_t c0,
                       double amplitude) {
    std::size_t W = img.shape()[2];
    for (std::size_t u = 0; u < 4; ++u)
        for (std::size_t v = 0; v < 4; ++v)
            img[(0 * img.shape()[1] + r0 + u) * W + c0 + v] += amplitude * stamp[u * 4 + v];
}

}  // namespace detail

/* multi-concept images */

struct ConceptsImageData {
    std::vector<Tensor> images;
    std::vector<std::uint32_t> labels;
    std::vector<Tensor> val_images;
    std::vector<std::uint32_t> val_labels;
    Model model;
    std::size_t feature_layer = 4;  // recentered detector vector, length K + 6
    std::vector<std::vector<std::size_t>> concept_channels;  // K planted channel groups
    std::vector<std::vector<std::size_t>> concept_cells;     // disjoint cell regions
    std::vector<std::size_t> texture_channels;  // background texture detector pair
    std::vector<std::size_t> texture_cells;     // its cell region
    std::vector<std::size_t> fixture_channels;  // constant scene fixtures, one cell each
    std::vector<std::size_t> fixture_cells;
    std::vector<double> channel_baseline;  // population mean subtracted per channel
    std::size_t cell_pitch = 6;
    std::size_t grid = 0;
    double theta = 0.0;
    double epsilon = 0.0;  // head weight of the texture channels
    double eta = 0.0;      // head weight of foreign concepts relative to the own concept
    std::size_t num_concepts = 0;
};

namespace detail {

// random orthonormal 4x4 patterns: aligned windows respond only to their own
// channel, and for a well-chosen seed every partially overlapping window
// response stays far enough below the detector threshold that no stamp
// amplitude used by the renderer can fire a foreign channel
inline std::vector<Tensor> orthonormal_patterns(std::uint64_t seed, std::size_t count) {
    Rng rng(seed);
    std::vector<std::vector<double>> basis;
    while (basis.size() < count) {
        std::vector<double> v(16);
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        for (const std::vector<double>& u : basis) {
            double d = 0.0;
            for (std::size_t t = 0; t < 16; ++t) d += u[t] * v[t];
            for (std::size_t t = 0; t < 16; ++t) v[t] -= d * u[t];
        }
        double n2 = 0.0;
        for (double x : v) n2 += x * x;
        if (n2 < 0.25) continue;
        double inv = 1.0 / std::sqrt(n2);
        for (double& x : v) x *= inv;
        basis.push_back(std::move(v));
    }
    std::vector<Tensor> out;
    for (const std::vector<double>& v : basis) {
        Tensor t(Shape{4, 4});
        for (std::size_t i = 0; i < 16; ++i) t[i] = v[i];
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace detail

// stamp patterns, one per detector channel, all pairwise-orthonormal
inline std::vector<Tensor> concept_patterns(std::size_t count) {
    return detail::orthonormal_patterns(433, count);
}

namespace detail {

// one image: every cell of every concept region carries a faint stamp just
// above the detector threshold, and a burst lifts a random half of the
// region's cells to high amplitude, so class evidence spreads over many
// distinct patches instead of pooling in a few. The class identity only
// raises the own concept's burst rate (about 1/2 versus 1/5), and own-class
// rates are tiered by concept index so no two concepts have identical
// moments and eigenbases stay unique. Bursts stay independent across
// concepts, and a mixture of two detector directions scales both the
// activation and the weight projection of each stream, so it strictly
// loses relevance mass and the disentanglement optimum keeps the detector
// axes apart. The texture cells co-move between the faint and a high
// amplitude on both channels at once in half the images: symmetric about
// the mean, so folding texture into a concept direction adds variance with
// zero expected relevance, while the variance itself tops the raw
// covariance spectrum. Each fixture cell carries its stamp in every image
// at one of two strengths a fixed step from its mean, so fixture detectors
// deviate by an exact +-step and never sit on zero.
inline Tensor concepts_render(Rng& rng, std::uint32_t label, const ConceptsImageData& layout,
                              const std::vector<Tensor>& patterns, std::size_t image_dim) {
    Tensor img(Shape{1, image_dim, image_dim});
    auto draw_cell = [&](std::size_t cid, std::size_t pat, double amp) {
        detail::draw_stamp(img, patterns[pat], (cid / layout.grid) * layout.cell_pitch,
                           (cid % layout.grid) * layout.cell_pitch,
                           amp * rng.uniform(0.98, 1.02));
    };
    for (std::size_t j = 0; j < layout.num_concepts; ++j) {
        const std::vector<std::size_t>& region = layout.concept_cells[j];
        bool burst = rng.below(20) < (j == label ? 11 - j : 4u);
        std::vector<char> lift(region.size(), 0);
        if (burst)
            for (std::size_t t : rng.sample_indices(region.size(), region.size() / 2))
                lift[t] = 1;
        for (std::size_t t = 0; t < region.size(); ++t)
            draw_cell(region[t], j, lift[t] ? 1.4 : 0.9);
    }
    {
        double amp = rng.below(2) != 0 ? 1.8 : 0.9;
        for (std::size_t t = 0; t < layout.texture_cells.size(); ++t)
            draw_cell(layout.texture_cells[t], layout.num_concepts + (t & 1), amp);
    }
    for (std::size_t m = 0; m < layout.fixture_cells.size(); ++m) {
        std::size_t cid = layout.fixture_cells[m];
        double amp = rng.below(2) != 0 ? 1.02 : 0.98;
        detail::draw_stamp(img, patterns[layout.num_concepts + 2 + m],
                           (cid / layout.grid) * layout.cell_pitch,
                           (cid % layout.grid) * layout.cell_pitch, amp);
    }
    return img;
}

}  // namespace detail

// Every image carries stamps of all K concepts plus a background texture and
// two constant fixtures in disjoint cell regions; class w draws surplus
// stamps of concept w. The model is a matched-filter conv bank with one
// channel per concept, a channel pair for the texture, and one channel per
// fixture, a fixed recentering layer that turns pooled detector outputs into
// signed deviations from their population means, and a summing head that
// reads the own concept at weight 1, foreign concepts at eta, and the
// texture and fixture channels at epsilon. The head bias adds the
// subtracted means back, so the logits equal the plain weighted detector
// sums. Fixture detectors sit at their population mean, so any relevance a
// mixed-in direction routes through them is amplified by the near-zero
// denominator of the recentering layer, while an aligned direction sends
// them only their own vanishing share.
inline ConceptsImageData gen_concepts_image(std::uint64_t seed, std::size_t K,
                                            std::size_t image_dim, std::size_t n_images,
                                            std::size_t n_val = 0) {
    if (K < 2 || K > 4) throw usage_error("concept count must be 2, 3 or 4");
    if (image_dim % 8 != 0 || (image_dim / 8) * (image_dim / 8) < 14 * (K + 1))
        throw usage_error("image dim must be a multiple of 8 with 14 or more cells per group");
    if (n_images < 2 * K) throw usage_error("need at least two images per class");
    ConceptsImageData out;
    out.num_concepts = K;
    out.cell_pitch = 8;  // stamps sit on a pitch-8 lattice, each inside one 4x4 patch
    out.grid = image_dim / 8;
    // 0.86 clears the worst misaligned-window response (9/16 coupling at the
    // highest stamp amplitude) while the faintest aligned stamp still fires
    out.theta = 0.86;
    out.epsilon = 0.05;
    out.eta = 0.5;
    std::size_t cells = out.grid * out.grid;
    // contiguous row-major cell regions: fixtures and texture first so the
    // lowest patch indices carry the least class evidence, then K concept
    // regions of equal size
    std::size_t base = cells / (K + 1), next = 0;
    out.fixture_cells = {0, 1, 2, 3};
    out.fixture_channels = {K + 2, K + 3, K + 4, K + 5};
    next = 4;
    while (next < cells - K * base) out.texture_cells.push_back(next++);
    out.texture_channels = {K, K + 1};
    for (std::size_t j = 0; j < K; ++j) {
        std::vector<std::size_t> region(base);
        for (std::size_t t = 0; t < base; ++t) region[t] = next++;
        out.concept_cells.push_back(std::move(region));
        out.concept_channels.push_back({j});
    }
    // exact population means of the summed stamp responses: faint stamps
    // respond at 0.04 on every region cell, a burst adds 0.50 on half the
    // cells at the class-mixture burst rate, the texture pair sits halfway
    // between its faint and high amplitudes, fixtures respond at 0.14
    for (std::size_t j = 0; j < K; ++j) {
        double rate = (double(11 - j) / 20.0 + 0.2 * double(K - 1)) / double(K);
        out.channel_baseline.push_back(0.04 * double(base) + 0.50 * rate * double(base / 2));
    }
    std::size_t tex_count = cells - 4 - K * base;
    out.channel_baseline.push_back(0.49 * double((tex_count + 1) / 2));
    out.channel_baseline.push_back(0.49 * double(tex_count / 2));
    for (std::size_t m = 0; m < 4; ++m) out.channel_baseline.push_back(0.14);

    std::size_t D = K + 6;
    std::vector<Tensor> patterns = concept_patterns(D);
    std::size_t conv_out = image_dim - 3;
    {
        Tensor W(Shape{D, 1, 4, 4});
        std::vector<double> bias(D, -out.theta);
        for (std::size_t ch = 0; ch < D; ++ch)
            for (std::size_t t = 0; t < 16; ++t) W[ch * 16 + t] = patterns[ch][t];
        double beta = double(conv_out * conv_out);  // undo mean pooling: summed response scale
        Tensor recenter(Shape{D, D});
        std::vector<double> rbias(D);
        for (std::size_t j = 0; j < D; ++j) {
            recenter[j * D + j] = beta;
            rbias[j] = -out.channel_baseline[j];
        }
        Tensor head(Shape{D, K});
        std::vector<double> hbias(K, 0.0);
        for (std::size_t j = 0; j < D; ++j)
            for (std::size_t l = 0; l < K; ++l) {
                double w = j >= K ? out.epsilon : (j == l ? 1.0 : out.eta);
                head[j * K + l] = w;
                hbias[l] += w * out.channel_baseline[j];
            }
        out.model.input_shape = {1, image_dim, image_dim};
        out.model.num_classes = K;
        out.model.layers.push_back(Layer::conv2d(std::move(W), std::move(bias)));
        out.model.layers.push_back(Layer::relu());
        out.model.layers.push_back(Layer::avgpool(conv_out, conv_out));
        out.model.layers.push_back(Layer::flatten());
        out.model.layers.push_back(Layer::dense(std::move(recenter), std::move(rbias)));
        out.model.layers.push_back(Layer::dense(std::move(head), std::move(hbias)));
        validate(out.model);
    }

    for (std::size_t i = 0; i < n_images; ++i) {
        std::uint32_t label = std::uint32_t(i % K);
        Rng rng(mix_seed(seed, i));
        out.images.push_back(detail::concepts_render(rng, label, out, patterns, image_dim));
        out.labels.push_back(label);
    }
    for (std::size_t i = 0; i < n_val; ++i) {
        std::uint32_t label = std::uint32_t(i % K);
        Rng rng(mix_seed(seed, (std::uint64_t(1) << 32) + i));
        out.val_images.push_back(detail::concepts_render(rng, label, out, patterns, image_dim));
        out.val_labels.push_back(label);
    }
    return out;
}

/* planted-watermark shortcut task */

struct CleverHansData {
    std::vector<Tensor> train_images;
    std::vector<std::uint32_t> train_labels;
    std::vector<char> train_glyph;
    std::vector<Tensor> val_images_clean;  // same scenes, watermark never applied
    std::vector<Tensor> val_images;        // poison_rate of class-B images stamped
    std::vector<std::uint32_t> val_labels;
    std::vector<char> val_glyph;
    Model model;
    std::size_t feature_layer = 3;  // flattened pooled detector triple (A, B, glyph)
    std::size_t glyph_channel = 2;
    Tensor glyph_mask;  // 16x16, ones over the watermark cell
    double poison_rate = 0.0;
};

namespace detail {

struct ChScene {
    std::vector<std::size_t> cells;  // of {0,1,2}: stamp anchors (0,0),(0,8),(8,0)
    std::vector<double> amps;
    double opacity = 0.0;  // watermark opacity when stamped
};

inline ChScene ch_scene(Rng& rng) {
    ChScene s;
    std::size_t count = 1 + rng.below(3);
    s.cells = rng.sample_indices(3, count);
    for (std::size_t t = 0; t < count; ++t) s.amps.push_back(rng.uniform(0.9, 1.1));
    s.opacity = rng.uniform(0.3, 0.7);
    return s;
}

inline Tensor ch_render(const ChScene& s, bool class_b, bool glyph, double opacity) {
    static const std::size_t anchors[3][2] = {{0, 0}, {0, 8}, {8, 0}};
    Tensor img(Shape{1, 16, 16});
    Tensor stamp = walsh_stamp(1, class_b ? 3 : 1);  // class A: w1xw1, class B: w1xw3
    for (std::size_t t = 0; t < s.cells.size(); ++t)
        draw_stamp(img, stamp, anchors[s.cells[t]][0], anchors[s.cells[t]][1], s.amps[t]);
    if (glyph) draw_stamp(img, walsh_stamp(0, 0), 12, 12, opacity);
    return img;
}

}  // namespace detail

// Class A carries true feature w1xw1 plus a corner watermark (opacity varies);
// class B carries w1xw3 and is watermark-free in training. The hand-built
// model genuinely uses the watermark channel for logit A, so stamping class-B
// validation images at full opacity flips them.
inline CleverHansData gen_cleverhans(std::uint64_t seed, double poison_rate,
                                     std::size_t n_train_per_class = 60,
                                     std::size_t n_val_per_class = 60) {
    if (poison_rate < 0.0 || poison_rate > 1.0) throw usage_error("poison rate must be in [0,1]");
    if (n_train_per_class == 0 || n_val_per_class == 0)
        throw usage_error("need at least one image per class and split");
    CleverHansData out;
    out.poison_rate = poison_rate;
    {
        Tensor convw(Shape{3, 1, 4, 4});
        Tensor ta = detail::walsh_stamp(1, 1), tb = detail::walsh_stamp(1, 3),
               g = detail::walsh_stamp(0, 0);
        for (std::size_t t = 0; t < 16; ++t) {
            convw[0 * 16 + t] = ta[t];
            convw[1 * 16 + t] = tb[t];
            convw[2 * 16 + t] = g[t];
        }
        // thresholds: true-feature junk peaks at 1.1/4 + watermark spill, glyph
        // junk at 1.1/4; 0.45 and 0.2 clip those while every aligned hit survives
        std::vector<double> bias = {-0.45, -0.45, -0.2};
        Tensor head(Shape{3, 2});
        head[0 * 2 + 0] = 1.0;  // true A feature
        head[1 * 2 + 1] = 1.0;  // true B feature
        head[2 * 2 + 0] = 1.2;  // watermark boosts logit A: the planted shortcut
        out.model.input_shape = {1, 16, 16};
        out.model.num_classes = 2;
        out.model.layers.push_back(Layer::conv2d(std::move(convw), std::move(bias)));
        out.model.layers.push_back(Layer::relu());
        out.model.layers.push_back(Layer::maxpool(13, 13));
        out.model.layers.push_back(Layer::flatten());
        out.model.layers.push_back(Layer::dense(std::move(head)));
        validate(out.model);
    }
    out.glyph_mask = Tensor(Shape{16, 16});
    for (std::size_t r = 12; r < 16; ++r)
        for (std::size_t c = 12; c < 16; ++c) out.glyph_mask[r * 16 + c] = 1.0;

    for (std::size_t i = 0; i < 2 * n_train_per_class; ++i) {
        bool class_b = i % 2 == 1;
        Rng rng(mix_seed(seed, i));
        detail::ChScene s = detail::ch_scene(rng);
        out.train_images.push_back(detail::ch_render(s, class_b, !class_b, s.opacity));
        out.train_labels.push_back(class_b ? 1 : 0);
        out.train_glyph.push_back(class_b ? 0 : 1);
    }
    std::vector<std::size_t> b_rows;  // val indices holding class-B images
    for (std::size_t i = 0; i < 2 * n_val_per_class; ++i) {
        bool class_b = i % 2 == 1;
        Rng rng(mix_seed(seed, (std::uint64_t(1) << 32) + i));
        detail::ChScene s = detail::ch_scene(rng);
        out.val_images_clean.push_back(detail::ch_render(s, class_b, !class_b, s.opacity));
        out.val_images.push_back(out.val_images_clean.back());
        out.val_labels.push_back(class_b ? 1 : 0);
        out.val_glyph.push_back(class_b ? 0 : 1);
        if (class_b) b_rows.push_back(i);
    }
    std::size_t n_poison = std::size_t(poison_rate * double(b_rows.size()) + 0.5);
    Rng prng(mix_seed(seed, (std::uint64_t(2) << 32)));
    std::vector<std::size_t> chosen = prng.sample_indices(b_rows.size(), n_poison);
    for (std::size_t t : chosen) {
        std::size_t i = b_rows[t];
        Rng rng(mix_seed(seed, (std::uint64_t(1) << 32) + i));
        detail::ChScene s = detail::ch_scene(rng);
        out.val_images[i] = detail::ch_render(s, true, true, 1.0);  // full-opacity watermark
        out.val_glyph[i] = 1;
    }
    return out;
}

}  // namespace relsub
