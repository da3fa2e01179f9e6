#pragma once

// Shared plumbing: deterministic RNG, seed derivation, hashing, error
// classes, and a small parallel_for. Everything here is portable across
// platforms: no std:: distributions, no locale-dependent formatting.

#include <cstdint>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace selfrefine {

// ----------------------------- errors -----------------------------
// One class per CLI exit-code family (see tools/selfrefine.cpp).

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Sequence does not fit the model context window.
struct LengthError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct LockError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct AnnotationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----------------------------- hashing -----------------------------

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// All randomness flows from one global seed through named derivations,
// so every stage and sub-task gets an independent, reproducible stream.
inline uint64_t derive_seed(uint64_t base, std::string_view name) {
    return splitmix64(base ^ fnv1a64(name));
}

inline uint64_t derive_seed(uint64_t base, std::string_view name, uint64_t index) {
    return splitmix64(derive_seed(base, name) ^ splitmix64(index + 0x9e37ull));
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

// ----------------------------- rng -----------------------------
// splitmix64-based generator. Deterministic on every platform, unlike
// std:: distributions whose output is implementation-defined.

class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x5bf0363546e57ull)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [0, n) without modulo bias
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("Rng::next_below(0)");
        const uint64_t threshold = (0ull - n) % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int next_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    double next_normal(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + spare_ * stddev;
        }
        // Box-Muller; u clamped away from 0
        const double u = 1.0 - next_double();
        const double v = next_double();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double a = 6.283185307179586 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return mean + r * std::cos(a) * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ----------------------------- parallel_for -----------------------------
// Static partition over [0, n). Each item must be independent; callers do
// any reduction serially afterwards so results do not depend on the
// thread count.

inline unsigned worker_count() {
    unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1u : n;
}

inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    const unsigned workers = worker_count();
    if (n == 0) return;
    if (workers <= 1 || n == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const unsigned k = static_cast<unsigned>(std::min<size_t>(workers, n));
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(k);
    threads.reserve(k);
    for (unsigned w = 0; w < k; ++w) {
        threads.emplace_back([&, w]() {
            try {
                for (size_t i = w; i < n; i += k) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

// ----------------------------- misc text helpers -----------------------------

inline std::vector<std::string> split_lines(std::string_view text) {
    std::vector<std::string> lines;
    size_t start = 0;
    while (start <= text.size()) {
        const size_t nl = text.find('\n', start);
        if (nl == std::string_view::npos) {
            lines.emplace_back(text.substr(start));
            break;
        }
        lines.emplace_back(text.substr(start, nl - start));
        start = nl + 1;
    }
    return lines;
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

inline std::string trim(std::string_view s) {
    size_t a = 0, b = s.size();
    while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r' || s[a] == '\n')) ++a;
    while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r' || s[b - 1] == '\n')) --b;
    return std::string(s.substr(a, b - a));
}

}  // namespace selfrefine
