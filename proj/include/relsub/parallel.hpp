#pragma once
// Chunk-ordered reductions: work is split into fixed-size chunks, chunk partials
// are combined strictly in chunk order, so results never depend on thread count.

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace relsub {

constexpr std::size_t kDefaultChunk = 1024;

// fn(chunk_idx, begin, end) -> partial for samples [begin, end), in chunk order
template <class T, class Fn>
std::vector<T> chunk_map(std::size_t n, std::size_t chunk, std::size_t threads, Fn&& fn) {
    if (chunk == 0) chunk = kDefaultChunk;
    std::size_t nchunks = (n + chunk - 1) / chunk;
    std::vector<T> partials(nchunks);
    if (threads <= 1 || nchunks <= 1) {
        for (std::size_t c = 0; c < nchunks; ++c)
            partials[c] = fn(c, c * chunk, std::min(n, (c + 1) * chunk));
        return partials;
    }
    std::size_t nw = std::min(threads, nchunks);
    std::vector<std::thread> workers;
    workers.reserve(nw);
    for (std::size_t w = 0; w < nw; ++w) {
        workers.emplace_back([&, w] {
            for (std::size_t c = w; c < nchunks; c += nw)
                partials[c] = fn(c, c * chunk, std::min(n, (c + 1) * chunk));
        });
    }
    for (auto& t : workers) t.join();
    return partials;
}

template <class Fn>
double chunked_sum(std::size_t n, std::size_t chunk, std::size_t threads, Fn&& fn) {
    auto partials = chunk_map<double>(n, chunk, threads, std::forward<Fn>(fn));
    double total = 0.0;
    for (double p : partials) total += p;
    return total;
}

}  // namespace relsub
