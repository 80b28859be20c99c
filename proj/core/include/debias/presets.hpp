#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "debias/harness.hpp"

namespace debias {

struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct PresetOptions {
    /// Preset outputs go to `<output_dir>/<preset>`; empty keeps everything in memory.
    std::filesystem::path output_dir;
    const MnistSplits* mnist = nullptr;
    std::ostream* log = nullptr;
    std::size_t workers = 1;
    /// Replaces the preset's seed list when non-empty.
    std::vector<std::uint64_t> seeds;
    /// Extra `section.key=value` overrides applied to the preset config.
    std::vector<std::string> overrides;
};

struct PresetOutcome {
    std::string preset;
    RunRecord record;
    std::vector<Check> checks;

    bool passed() const;
};

std::vector<std::string> preset_names();
bool preset_needs_mnist(const std::string& name);

/// The preset's settings as a Config (the INI a user could edit and rerun).
Config preset_config(const std::string& name);

/// Runs the named preset and evaluates its pass/fail checks. Unknown names
/// throw InvalidArgument listing the known presets.
PresetOutcome reproduce(const std::string& name, const PresetOptions& options);

/// Pass/fail checks of a finished preset run.
std::vector<Check> evaluate_checks(const std::string& name, const RunRecord& record);

/// One line per check: `PASS|FAIL name: detail`.
std::string format_verdict(const PresetOutcome& outcome);

} // namespace debias
