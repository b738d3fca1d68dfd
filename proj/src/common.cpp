#include "timnet/common.hpp"

#include <algorithm>
#include <memory>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace timnet {

ThreadPool::ThreadPool() {
#if defined(__GLIBC__)
    // Training allocates and frees tens of MB of tensor buffers per batch;
    // keep those chunks on the heap instead of round-tripping through mmap.
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    set_threads(std::min(hw, 8));
}

ThreadPool::~ThreadPool() { stop_workers(); }

void ThreadPool::set_threads(int n) {
    if (n < 1) n = 1;
    stop_workers();
    n_threads_ = n;
    stopping_ = false;
    for (int i = 1; i < n; ++i) {
        workers_.emplace_back([this] { worker_loop(); });
    }
}

void ThreadPool::stop_workers() {
    {
        std::lock_guard<std::mutex> lock(mu_);
        stopping_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
}

void ThreadPool::worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
        std::shared_ptr<Job> job;
        {
            std::unique_lock<std::mutex> lock(mu_);
            cv_.wait(lock, [this, seen] { return stopping_ || generation_ != seen; });
            if (stopping_) return;
            seen = generation_;
            job = job_;
        }
        if (!job) continue;
        std::int64_t i;
        while ((i = job->next.fetch_add(1)) < job->count) {
            (*job->fn)(i);
            job->done.fetch_add(1);
        }
        {
            std::lock_guard<std::mutex> lock(mu_);
            if (job->done.load() >= job->count) cv_done_.notify_all();
        }
    }
}

void ThreadPool::parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn) {
    if (count <= 0) return;
    if (n_threads_ == 1 || count == 1 || workers_.empty()) {
        for (std::int64_t i = 0; i < count; ++i) fn(i);
        return;
    }
    auto job = std::make_shared<Job>();
    job->fn = &fn;
    job->count = count;
    {
        std::lock_guard<std::mutex> lock(mu_);
        job_ = job;
        ++generation_;
    }
    cv_.notify_all();
    // The calling thread participates too.
    std::int64_t i;
    while ((i = job->next.fetch_add(1)) < count) {
        fn(i);
        job->done.fetch_add(1);
    }
    {
        std::unique_lock<std::mutex> lock(mu_);
        cv_done_.wait(lock, [&job] { return job->done.load() >= job->count; });
        job_.reset();
    }
}

}  // namespace timnet
