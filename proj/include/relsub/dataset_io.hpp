#pragma once
// Activation/context dataset files. Binary layout: magic "ACDS0001",
// little-endian u32 D, u64 N, then N records of (D f64 activations,
// D f64 contexts, u32 image id, u32 class, u16 row, u16 col).
// The CSV form carries the same fields with a header row.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "relsub/core.hpp"
#include "relsub/subspace.hpp"

namespace relsub {

static_assert(std::endian::native == std::endian::little,
              "dataset writer assumes a little-endian host");

inline void save_dataset(const ActivationContextDataset& ds, const std::string& path) {
    ds.check();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open " + path + " for writing");
    f.write("ACDS0001", 8);
    std::uint32_t D = std::uint32_t(ds.dim());
    std::uint64_t N = std::uint64_t(ds.size());
    f.write(reinterpret_cast<const char*>(&D), 4);
    f.write(reinterpret_cast<const char*>(&N), 8);
    std::vector<double> buf(D);
    for (std::size_t n = 0; n < ds.size(); ++n) {
        for (std::size_t i = 0; i < D; ++i) buf[i] = ds.A(Eigen::Index(i), Eigen::Index(n));
        f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(8 * D));
        for (std::size_t i = 0; i < D; ++i) buf[i] = ds.C(Eigen::Index(i), Eigen::Index(n));
        f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(8 * D));
        SampleMeta meta = ds.meta.empty() ? SampleMeta{} : ds.meta[n];
        f.write(reinterpret_cast<const char*>(&meta.image_id), 4);
        f.write(reinterpret_cast<const char*>(&meta.class_label), 4);
        f.write(reinterpret_cast<const char*>(&meta.row), 2);
        f.write(reinterpret_cast<const char*>(&meta.col), 2);
    }
    if (!f) throw data_error("write failed: " + path);
}

inline ActivationContextDataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, "ACDS0001", 8) != 0)
        throw data_error(path + " is not a dataset file (bad magic)");
    std::uint32_t D = 0;
    std::uint64_t N = 0;
    f.read(reinterpret_cast<char*>(&D), 4);
    f.read(reinterpret_cast<char*>(&N), 8);
    if (!f || D == 0 || N == 0) throw data_error(path + " has an empty or corrupt header");
    ActivationContextDataset ds;
    ds.A.resize(Eigen::Index(D), Eigen::Index(N));
    ds.C.resize(Eigen::Index(D), Eigen::Index(N));
    ds.meta.resize(N);
    std::vector<double> buf(D);
    for (std::uint64_t n = 0; n < N; ++n) {
        f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(8 * D));
        for (std::size_t i = 0; i < D; ++i) ds.A(Eigen::Index(i), Eigen::Index(n)) = buf[i];
        f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(8 * D));
        for (std::size_t i = 0; i < D; ++i) ds.C(Eigen::Index(i), Eigen::Index(n)) = buf[i];
        SampleMeta& meta = ds.meta[n];
        f.read(reinterpret_cast<char*>(&meta.image_id), 4);
        f.read(reinterpret_cast<char*>(&meta.class_label), 4);
        f.read(reinterpret_cast<char*>(&meta.row), 2);
        f.read(reinterpret_cast<char*>(&meta.col), 2);
        if (!f) throw data_error(path + " is truncated");
    }
    ds.check();
    return ds;
}

inline void save_dataset_csv(const ActivationContextDataset& ds, const std::string& path) {
    ds.check();
    std::ofstream f(path);
    if (!f) throw data_error("cannot open " + path + " for writing");
    std::size_t D = ds.dim();
    for (std::size_t i = 0; i < D; ++i) f << "a" << i << ',';
    for (std::size_t i = 0; i < D; ++i) f << "c" << i << ',';
    f << "image_id,class,row,col\n";
    for (std::size_t n = 0; n < ds.size(); ++n) {
        for (std::size_t i = 0; i < D; ++i)
            f << fmt17(ds.A(Eigen::Index(i), Eigen::Index(n))) << ',';
        for (std::size_t i = 0; i < D; ++i)
            f << fmt17(ds.C(Eigen::Index(i), Eigen::Index(n))) << ',';
        SampleMeta meta = ds.meta.empty() ? SampleMeta{} : ds.meta[n];
        f << meta.image_id << ',' << meta.class_label << ',' << meta.row << ',' << meta.col
          << '\n';
    }
    if (!f) throw data_error("write failed: " + path);
}

inline ActivationContextDataset load_dataset_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw data_error("cannot open " + path);
    std::string header;
    if (!std::getline(f, header)) throw data_error(path + " is empty");
    std::size_t D = 0;
    {
        std::stringstream ss(header);
        std::string col;
        while (std::getline(ss, col, ','))
            if (!col.empty() && col[0] == 'a') ++D;
    }
    if (D == 0) throw data_error(path + " header has no activation columns");
    std::vector<std::vector<double>> arows, crows;
    std::vector<SampleMeta> metas;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 2 * D + 4)
            throw data_error(path + ": row has " + std::to_string(cells.size()) +
                             " fields, expected " + std::to_string(2 * D + 4));
        std::vector<double> a(D), c(D);
        try {
            for (std::size_t i = 0; i < D; ++i) a[i] = std::stod(cells[i]);
            for (std::size_t i = 0; i < D; ++i) c[i] = std::stod(cells[D + i]);
            SampleMeta meta;
            meta.image_id = std::uint32_t(std::stoul(cells[2 * D]));
            meta.class_label = std::uint32_t(std::stoul(cells[2 * D + 1]));
            meta.row = std::uint16_t(std::stoul(cells[2 * D + 2]));
            meta.col = std::uint16_t(std::stoul(cells[2 * D + 3]));
            metas.push_back(meta);
        } catch (const std::exception&) {
            throw data_error(path + ": unparseable numeric field");
        }
        arows.push_back(std::move(a));
        crows.push_back(std::move(c));
    }
    if (arows.empty()) throw data_error(path + " has no data rows");
    ActivationContextDataset ds;
    ds.A.resize(Eigen::Index(D), Eigen::Index(arows.size()));
    ds.C.resize(Eigen::Index(D), Eigen::Index(arows.size()));
    for (std::size_t n = 0; n < arows.size(); ++n)
        for (std::size_t i = 0; i < D; ++i) {
            ds.A(Eigen::Index(i), Eigen::Index(n)) = arows[n][i];
            ds.C(Eigen::Index(i), Eigen::Index(n)) = crows[n][i];
        }
    ds.meta = std::move(metas);
    ds.check();
    return ds;
}

}  // namespace relsub
