#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fuse/numerics/matrix.hpp"
#include "fuse/numerics/rng.hpp"
#include "fuse/util/log.hpp"

namespace testutil {

inline fuse::num::Matrix random_matrix(std::size_t r, std::size_t c, fuse::num::Rng& rng, double scale = 1.0) {
    fuse::num::Matrix m(r, c);
    for (double& v : m.values()) v = scale * rng.normal();
    return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("fuse_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Collects warnings while alive.
struct WarningCapture {
    std::vector<std::string> warnings;
    fuse::ScopedLogSink guard{[this](fuse::LogLevel level, std::string_view msg) {
        if (level == fuse::LogLevel::Warn) warnings.emplace_back(msg);
    }};
};

}  // namespace testutil
