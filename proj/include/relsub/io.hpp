#pragma once
// Flat-file exchange formats: relevance maps as CSV with a JSON shape sidecar,
// grayscale PGM (P2) with the scaling range recorded in a header comment, flip
// reports as JSON/CSV, and label sidecars. Values print via fmt17 so that
// write/read round-trips are bit-faithful where the format allows.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relsub/core.hpp"
#include "relsub/eval.hpp"

namespace relsub {

namespace detail {

inline std::ofstream open_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw data_error("cannot open for writing: " + path);
    return f;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open: " + path);
    return f;
}

inline nlohmann::json parse_json_file(const std::string& path) {
    std::ifstream f = open_in(path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw data_error(path + ": " + e.what());
    }
    return j;
}

inline void write_json_array(std::ostream& os, const std::vector<double>& v) {
    os << "[";
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << fmt17(v[i]);
    os << "]";
}

}  // namespace detail

/* relevance maps: CSV body, shape in a sidecar JSON next to it */

inline std::string sidecar_path(const std::string& csv_path) { return csv_path + ".json"; }

inline void save_relevance_csv(const std::string& csv_path, const Tensor& t) {
    if (t.shape().empty()) throw shape_error("cannot save rank-0 tensor");
    std::ofstream f = detail::open_out(csv_path);
    std::size_t rows = t.shape()[0], cols = t.size() / rows;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) f << (c ? "," : "") << fmt17(t[r * cols + c]);
        f << "\n";
    }
    std::ofstream side = detail::open_out(sidecar_path(csv_path));
    side << "{\"shape\":[";
    for (std::size_t i = 0; i < t.shape().size(); ++i)
        side << (i ? "," : "") << t.shape()[i];
    side << "]}\n";
}

inline Tensor load_relevance_csv(const std::string& csv_path) {
    nlohmann::json meta = detail::parse_json_file(sidecar_path(csv_path));
    if (!meta.contains("shape") || !meta["shape"].is_array())
        throw data_error(csv_path + ": sidecar lacks shape");
    Shape shape;
    for (const auto& d : meta["shape"]) {
        if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0)
            throw data_error(csv_path + ": bad shape entry");
        shape.push_back(d.get<std::size_t>());
    }
    Tensor t(shape);
    std::ifstream f = detail::open_in(csv_path);
    std::string line;
    std::size_t k = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            if (k >= t.size()) throw data_error(csv_path + ": more values than shape holds");
            try {
                t[k++] = std::stod(cell);
            } catch (const std::exception&) {
                throw data_error(csv_path + ": bad number '" + cell + "'");
            }
        }
    }
    if (k != t.size()) throw data_error(csv_path + ": value count does not match shape");
    return t;
}

/* PGM (P2), 16-bit, min/max of the source data kept in a comment */

inline void save_pgm(const std::string& path, const Tensor& t) {
    std::size_t h, w;
    std::vector<double> plane;
    if (t.shape().size() == 2) {
        h = t.shape()[0];
        w = t.shape()[1];
        plane.assign(t.data(), t.data() + t.size());
    } else if (t.shape().size() == 3) {
        h = t.shape()[1];
        w = t.shape()[2];
        plane.assign(h * w, 0.0);  // collapse channels by summing
        for (std::size_t c = 0; c < t.shape()[0]; ++c)
            for (std::size_t i = 0; i < h * w; ++i) plane[i] += t[c * h * w + i];
    } else {
        throw shape_error("pgm wants a rank-2 or rank-3 tensor, got " + shape_str(t.shape()));
    }
    double lo = plane[0], hi = plane[0];
    for (double v : plane) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::ofstream f = detail::open_out(path);
    f << "P2\n# min " << fmt17(lo) << " max " << fmt17(hi) << "\n" << w << " " << h << "\n65535\n";
    double span = hi - lo;
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            long q = span > 0.0 ? std::lround((plane[r * w + c] - lo) / span * 65535.0) : 0;
            f << (c ? " " : "") << q;
        }
        f << "\n";
    }
}

// inverts the quantization using the recorded range; exact only up to 1/65535
inline Tensor load_pgm(const std::string& path) {
    std::ifstream f = detail::open_in(path);
    std::string magic;
    f >> magic;
    if (magic != "P2") throw data_error(path + ": not a P2 pgm");
    double lo = 0.0, hi = 0.0;
    bool have_range = false;
    f >> std::ws;
    while (f.peek() == '#') {
        std::string line;
        std::getline(f, line);
        std::stringstream ss(line);
        std::string hash, key;
        ss >> hash >> key;
        if (key == "min") {
            std::string maxkey;
            ss >> lo >> maxkey >> hi;
            have_range = !ss.fail() && maxkey == "max";
        }
        f >> std::ws;
    }
    std::size_t w, h, maxval;
    f >> w >> h >> maxval;
    if (!f || w == 0 || h == 0 || maxval == 0) throw data_error(path + ": bad pgm header");
    if (!have_range) {
        lo = 0.0;
        hi = double(maxval);
    }
    Tensor t(Shape{h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
        long q;
        f >> q;
        if (!f) throw data_error(path + ": truncated pixel data");
        if (q < 0 || std::size_t(q) > maxval) throw data_error(path + ": pixel out of range");
        t[i] = lo + (hi > lo ? double(q) / double(maxval) * (hi - lo) : 0.0);
    }
    return t;
}

/* flip reports */

inline void save_flip_report(const std::string& json_path, const FlipReport& r) {
    std::ofstream f = detail::open_out(json_path);
    f << "{\n  \"steps\": ";
    detail::write_json_array(f, r.steps);
    f << ",\n  \"weights\": ";
    detail::write_json_array(f, r.weights);
    f << ",\n  \"aupc\": " << fmt17(r.aupc) << ",\n  \"options\": {";
    f << "\"patch_size\": " << r.options.patch_size;
    f << ", \"flips_per_step\": " << r.options.flips_per_step;
    f << ", \"tau_squared_schedule\": " << (r.options.tau_squared_schedule ? "true" : "false");
    f << ", \"inpainter\": \"" << inpainter_name(r.options.inpainter) << "\"";
    f << ", \"rectify_output\": " << (r.options.rectify_output ? "true" : "false");
    f << "}\n}\n";
}

inline void save_flip_csv(const std::string& csv_path, const FlipReport& r) {
    std::ofstream f = detail::open_out(csv_path);
    f << "step,fraction_removed,output\n";
    double removed = 0.0;
    for (std::size_t i = 0; i < r.steps.size(); ++i) {
        if (i > 0) removed += r.weights[i - 1];
        f << i << "," << fmt17(removed) << "," << fmt17(r.steps[i]) << "\n";
    }
}

inline FlipReport load_flip_report(const std::string& json_path) {
    nlohmann::json j = detail::parse_json_file(json_path);
    FlipReport r;
    try {
        r.steps = j.at("steps").get<std::vector<double>>();
        r.weights = j.at("weights").get<std::vector<double>>();
        r.aupc = j.at("aupc").get<double>();
        const auto& o = j.at("options");
        r.options.patch_size = o.at("patch_size").get<std::size_t>();
        r.options.flips_per_step = o.at("flips_per_step").get<std::size_t>();
        r.options.tau_squared_schedule = o.at("tau_squared_schedule").get<bool>();
        r.options.rectify_output = o.at("rectify_output").get<bool>();
        std::string name = o.at("inpainter").get<std::string>();
        if (name == "zero")
            r.options.inpainter = Inpainter::Zero;
        else if (name == "neighborhood_mean")
            r.options.inpainter = Inpainter::NeighborhoodMean;
        else
            throw data_error(json_path + ": unknown inpainter '" + name + "'");
    } catch (const nlohmann::json::exception& e) {
        throw data_error(json_path + ": " + e.what());
    }
    if (r.steps.size() != r.weights.size() + 1)
        throw data_error(json_path + ": weights must be one shorter than steps");
    return r;
}

/* label sidecars */

inline void save_labels(const std::string& path, const std::vector<std::uint32_t>& labels) {
    std::ofstream f = detail::open_out(path);
    f << "{\"labels\":[";
    for (std::size_t i = 0; i < labels.size(); ++i) f << (i ? "," : "") << labels[i];
    f << "]}\n";
}

inline std::vector<std::uint32_t> load_labels(const std::string& path) {
    nlohmann::json j = detail::parse_json_file(path);
    if (!j.contains("labels") || !j["labels"].is_array())
        throw data_error(path + ": missing labels array");
    std::vector<std::uint32_t> out;
    for (const auto& v : j["labels"]) {
        if (!v.is_number_unsigned()) throw data_error(path + ": labels must be unsigned");
        out.push_back(v.get<std::uint32_t>());
    }
    return out;
}

}  // namespace relsub
