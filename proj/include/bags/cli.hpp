#pragma once

#include "bags/camera.hpp"
#include "bags/error.hpp"
#include "bags/renderer.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace bags {

/// Process exit codes.
enum ExitCode : int {
    kExitOk = 0,
    kExitUnknown = 1,
    kExitConfig = 2,
    kExitIo = 3,
    kExitFormat = 4,
    kExitDimension = 5,
    kExitNumeric = 6,
    kExitState = 7,
};

int exit_code(ErrorKind kind);

/// Reads a TOML file into nested JSON. Scalars become numbers or booleans when they parse as such.
nlohmann::json load_toml(const std::filesystem::path& path);

struct BenchReport {
    std::size_t splats = 0;
    int width = 0;
    int height = 0;
    int threads = 0;
    std::size_t iterations = 0;
    double mean_fps = 0.0;
    double median_fps = 0.0;
    double mean_ms = 0.0;

    nlohmann::json to_json() const;
};

/// Times `iterations` forward renders after one untimed warm-up render. Throws ConfigError for 0.
BenchReport bench_render(const SplatSet& splats, const Camera& camera, const Vec3& background,
                         std::size_t iterations);

/// Entry point shared by the executable and the tests. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace bags
