#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#if defined(__SSE2__)
#include <immintrin.h>
#endif

namespace vcstar {

// Subnormal floats show up in saturated-gate gradients and cost two orders
// of magnitude per FMA on x86. Flush them to zero on every thread that
// touches tensor math.
inline void flush_denormals_on_this_thread() {
#if defined(__SSE2__)
    _mm_setcsr(_mm_getcsr() | 0x8040);  // FTZ | DAZ
#endif
}

// Training allocates and frees multi-megabyte activation buffers every
// step. Keep them on the heap instead of round-tripping through mmap, or
// page faults dominate the step time.
inline void tune_allocator_once() {
#if defined(__GLIBC__)
    static bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
        return true;
    }();
    (void)done;
#endif
    thread_local bool ftz_set = [] {
        flush_denormals_on_this_thread();
        return true;
    }();
    (void)ftz_set;
}

// Error taxonomy. Everything user-facing funnels through these so the CLI
// can map them onto exit codes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// PCG32: small deterministic PRNG with serializable state. std:: engines are
// not guaranteed bit-stable across standard library versions, and training
// resume requires checkpointing the exact stream position.
class Pcg32 {
public:
    Pcg32() : Pcg32(0x853c49e6748fea9bULL) {}
    explicit Pcg32(uint64_t seed, uint64_t stream = 0xda3e39cb94b95bdbULL) { reseed(seed, stream); }

    void reseed(uint64_t seed, uint64_t stream = 0xda3e39cb94b95bdbULL) {
        inc_ = (stream << 1u) | 1u;
        state_ = 0u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    // Unbiased integer in [0, bound) via rejection.
    uint32_t next_below(uint32_t bound) {
        if (bound == 0) throw Error("Pcg32::next_below: bound must be positive");
        uint32_t threshold = (0u - bound) % bound;
        for (;;) {
            uint32_t r = next_u32();
            if (r >= threshold) return r % bound;
        }
    }

    // Uniform in [0,1) with 32-bit resolution.
    double next_double() { return next_u32() * (1.0 / 4294967296.0); }

    float uniform(float lo, float hi) { return lo + static_cast<float>(next_double()) * (hi - lo); }

    uint64_t state() const { return state_; }
    uint64_t inc() const { return inc_; }
    void set_raw(uint64_t state, uint64_t inc) {
        state_ = state;
        inc_ = inc | 1u;
    }

private:
    uint64_t state_ = 0;
    uint64_t inc_ = 0;
};

// Persistent worker pool for data-parallel loops inside ops. Work is split
// into fixed ranges by worker index, so results do not depend on scheduling.
// Each output element is still accumulated sequentially by a single worker,
// which keeps results bitwise reproducible for any thread count.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int thread_count() const { return n_threads_; }

    // parallel_for over [0, n): fn(begin, end) on contiguous chunks.
    // Nested calls degrade to serial execution.
    void run_chunks(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
        if (n <= 0) return;
        int workers = n_threads_;
        if (workers <= 1 || n < 2 || in_parallel_region()) {
            fn(0, n);
            return;
        }
        std::lock_guard<std::mutex> outer(run_mutex_);
        in_parallel_region() = true;
        int64_t chunk = (n + workers - 1) / workers;
        int used = static_cast<int>((n + chunk - 1) / chunk);
        pending_.store(used - 1, std::memory_order_release);
        task_ = &fn;
        chunk_size_ = chunk;
        total_ = n;
        generation_.fetch_add(1, std::memory_order_release);
        {
            std::lock_guard<std::mutex> lk(mutex_);
            cv_.notify_all();
        }
        fn(0, std::min<int64_t>(chunk, n));
        while (pending_.load(std::memory_order_acquire) > 0) std::this_thread::yield();
        task_ = nullptr;
        in_parallel_region() = false;
    }

    static bool& in_parallel_region() {
        thread_local bool flag = false;
        return flag;
    }

    ~ThreadPool() {
        stop_.store(true);
        {
            std::lock_guard<std::mutex> lk(mutex_);
            cv_.notify_all();
        }
        for (auto& t : threads_) t.join();
    }

private:
    ThreadPool() {
        n_threads_ = static_cast<int>(std::thread::hardware_concurrency());
        if (n_threads_ <= 0) n_threads_ = 1;
        if (const char* env = std::getenv("VCSTAR_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) n_threads_ = v;
        }
        for (int t = 1; t < n_threads_; ++t) threads_.emplace_back([this, t] { worker_loop(t); });
    }

    void worker_loop(int index) {
        flush_denormals_on_this_thread();
        uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> lk(mutex_);
                cv_.wait(lk, [&] {
                    return stop_.load() || generation_.load(std::memory_order_acquire) != seen;
                });
            }
            if (stop_.load()) return;
            seen = generation_.load(std::memory_order_acquire);
            const auto* task = task_;
            if (!task) continue;
            int64_t begin = static_cast<int64_t>(index) * chunk_size_;
            if (begin < total_) {
                in_parallel_region() = true;
                (*task)(begin, std::min<int64_t>(begin + chunk_size_, total_));
                in_parallel_region() = false;
                pending_.fetch_sub(1, std::memory_order_release);
            }
        }
    }

    int n_threads_ = 1;
    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::mutex run_mutex_;
    std::condition_variable cv_;
    std::atomic<bool> stop_{false};
    std::atomic<uint64_t> generation_{0};
    std::atomic<int> pending_{0};
    const std::function<void(int64_t, int64_t)>* task_ = nullptr;
    int64_t chunk_size_ = 0;
    int64_t total_ = 0;
};

inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    ThreadPool::instance().run_chunks(n, fn);
}

}  // namespace vcstar
