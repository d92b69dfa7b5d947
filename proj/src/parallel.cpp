#include "bags/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace bags {

namespace {
std::atomic<int> g_threads{1};
}

void set_thread_count(int count) {
    if (count <= 0) {
        count = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    }
    g_threads.store(count);
}

int thread_count() { return g_threads.load(); }

void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& body) {
    if (n == 0) {
        return;
    }
    grain = std::max<std::size_t>(grain, 1);
    const std::size_t chunks = (n + grain - 1) / grain;
    const auto workers = static_cast<std::size_t>(
        std::min<std::size_t>(static_cast<std::size_t>(thread_count()), chunks));
    if (workers <= 1) {
        body(0, n);
        return;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&] {
        try {
            for (;;) {
                const std::size_t c = next.fetch_add(1);
                if (c >= chunks) {
                    break;
                }
                const std::size_t begin = c * grain;
                body(begin, std::min(n, begin + grain));
            }
        } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) {
                failure = std::current_exception();
            }
            next.store(chunks);
        }
    };

    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) {
        pool.emplace_back(run);
    }
    run();
    pool.clear();
    if (failure) {
        std::rethrow_exception(failure);
    }
}

} // namespace bags
