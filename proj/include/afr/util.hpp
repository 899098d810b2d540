#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace afr::util {

/// FNV-1a 64-bit over raw bytes. Used for config fingerprints and for
/// deriving deterministic per-item RNG seeds.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

/// Mixes a seed with a stream of tags; every parallel work item draws from
/// its own generator seeded this way so results do not depend on thread count.
inline uint64_t seed_mix(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t buf[4] = {seed, a, b, c};
    uint64_t h = fnv1a(buf, sizeof(buf));
    return h ? h : 0x9e3779b97f4a7c15ull;  // mt19937_64 accepts 0, but keep seeds distinct from "unset"
}

using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Threading. A process-wide cap used by all data-parallel sections. Outputs
// must not depend on this value: parallel loops write disjoint slots and all
// reductions happen in index order.

int threads();
void set_threads(int n);

/// Runs fn(i) for i in [0, n). Grain controls how many consecutive indices a
/// single task takes.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

// ---------------------------------------------------------------------------
// Small text helpers.

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

/// Formats a double with enough digits to round-trip, without locale effects.
/// All CSV output goes through this so artifacts are byte-stable.
std::string fmt_double(double v);

// ---------------------------------------------------------------------------
// "key = value" config files with [section] headers and '#' comments.

class KeyValueConfig {
public:
    KeyValueConfig() = default;
    static KeyValueConfig parse_file(const std::string& path);
    static KeyValueConfig parse_string(const std::string& text);

    bool has(const std::string& section, const std::string& key) const;
    std::string get(const std::string& section, const std::string& key,
                    const std::string& fallback = "") const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    int64_t get_int(const std::string& section, const std::string& key, int64_t fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

private:
    // flat map section + '\0' + key -> value; order irrelevant
    std::vector<std::pair<std::string, std::string>> kv_;
};

// ---------------------------------------------------------------------------
// Subprocess helper for CLI-level tests.

struct CommandResult {
    int exit_code = -1;
    std::string output;  // stdout+stderr merged
};

CommandResult run_command(const std::string& cmd);

/// Reads a whole file into a byte string; throws on failure.
std::string read_file_bytes(const std::string& path);

}  // namespace afr::util
