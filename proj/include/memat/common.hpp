#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace memat {

// Row-major to match the row-vector convention (x * W) and the on-disk
// tensor layout.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::RowVectorXd;

// ----------------------------------------------------------------- errors

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----------------------------------------------------------------- rng

// Deterministic RNG wrapper. The raw mt19937_64 stream is pinned by the
// standard; the float/normal construction here avoids the unspecified
// std::*_distribution algorithms so that byte-identical reruns hold across
// standard library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t bits() { return engine_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // uniform integer in [lo, hi] via rejection-free scaling (bias < 2^-53)
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const auto span = static_cast<double>(hi - lo + 1);
        auto v = lo + static_cast<int64_t>(uniform() * span);
        return v > hi ? hi : v;
    }

    // standard normal, Box-Muller (second value discarded)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// Splitmix-style mixing for deriving independent per-record streams.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

// ----------------------------------------------------------------- hashing

constexpr uint64_t fnv1a64_init() { return 0xcbf29ce484222325ULL; }

inline uint64_t fnv1a64(uint64_t h, const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(fnv1a64_init(), s.data(), s.size()); }

std::string hex64(uint64_t v);

// ----------------------------------------------------------------- parallel

// Resolves a worker-count setting: 0 means "all available cores".
inline int resolve_workers(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n). Results must land in caller-provided slots so
// the outcome is independent of scheduling.
void parallel_for(int64_t n, int workers, const std::function<void(int64_t)>& fn);

// Ordered reduction: evaluates chunk sums in parallel and merges them in
// chunk-index order, so floating-point totals do not depend on the worker
// count. `eval` fills an accumulator for [begin, end); `merge` folds it in.
template <typename Acc>
void chunked_ordered_reduce(int64_t n, int64_t chunk, int workers,
                            const std::function<void(int64_t, int64_t, Acc&)>& eval,
                            const std::function<void(Acc&&)>& merge) {
    if (n <= 0) return;
    const int64_t nchunks = (n + chunk - 1) / chunk;
    std::vector<std::unique_ptr<Acc>> done(static_cast<size_t>(nchunks));
    std::atomic<int64_t> next{0};
    std::mutex m;
    std::condition_variable cv;
    int64_t frontier = 0;

    auto work = [&] {
        for (;;) {
            const int64_t c = next.fetch_add(1);
            if (c >= nchunks) return;
            auto acc = std::make_unique<Acc>();
            eval(c * chunk, std::min(n, (c + 1) * chunk), *acc);
            std::unique_lock lock(m);
            done[static_cast<size_t>(c)] = std::move(acc);
            while (frontier < nchunks && done[static_cast<size_t>(frontier)]) {
                auto ready = std::move(done[static_cast<size_t>(frontier)]);
                ++frontier;
                lock.unlock();
                merge(std::move(*ready));
                lock.lock();
            }
            cv.notify_all();
        }
    };

    const int t = std::min<int64_t>(resolve_workers(workers), nchunks);
    if (t <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(t));
        for (int i = 0; i < t; ++i) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }
    if (frontier != nchunks) throw ContractError("ordered reduce incomplete");
}

bool all_finite(const Mat& m);

}  // namespace memat
