#pragma once

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace timnet {

// ---------------------------------------------------------------------------
// Deterministic seeding helpers.
//
// All randomness in the project flows through Rng below, seeded by values
// produced with mix64 / hash_str. std::mt19937_64 is bit-specified by the
// standard; the distributions are hand-rolled here because the standard
// library's are not.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ (b * 0x9E3779B97F4A7C15ULL) ^ 0x1234ABCD5678EF00ULL);
}

inline std::uint64_t hash_str(const std::string& s) {
    // FNV-1a
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // In [0, 1).
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // In [0, n). Rejection sampling to keep the draw unbiased.
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        // Box-Muller, no caching so the draw count stays predictable.
        const double u1 = 1.0 - uniform01();
        const double u2 = uniform01();
        const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
        return mean + stddev * z;
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const std::uint64_t j = uniform_int(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Thread pool.
//
// Kernels using parallel_for must write disjoint output elements and reduce
// within each element in a canonical serial order, so results are
// bit-identical for any thread count.
// ---------------------------------------------------------------------------

class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    void set_threads(int n);
    int threads() const { return n_threads_; }

    // Runs fn(i) for i in [0, count). Blocks until all complete.
    void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn);

    ~ThreadPool();

private:
    ThreadPool();
    void worker_loop();
    void stop_workers();

    struct Job {
        const std::function<void(std::int64_t)>* fn = nullptr;
        std::int64_t count = 0;
        std::atomic<std::int64_t> next{0};
        std::atomic<std::int64_t> done{0};
    };

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable cv_done_;
    std::shared_ptr<Job> job_;
    std::uint64_t generation_ = 0;
    bool stopping_ = false;
    int n_threads_ = 1;
};

inline void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn) {
    ThreadPool::instance().parallel_for(count, fn);
}

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------

inline std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream oss;
    oss << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) oss << ",";
        oss << shape[i];
    }
    oss << "]";
    return oss.str();
}

}  // namespace timnet
