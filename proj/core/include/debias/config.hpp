#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "debias/ecs.hpp"
#include "debias/trainers.hpp"

namespace debias {

/// Flat `section.key -> value` settings read from an INI file and command
/// line overrides. Keys outside a section have no prefix.
class Config {
public:
    Config() = default;

    static Config load(const std::filesystem::path& path);
    static Config parse(const std::string& ini_text);

    /// Applies one `section.key=value` override.
    void apply_override(const std::string& assignment);
    void set(const std::string& key, std::string value);
    bool contains(const std::string& key) const { return values_.count(key) != 0; }

    std::optional<std::string> find(const std::string& key) const;
    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    /// Comma-separated list; empty when the key is absent.
    std::vector<std::string> get_list(const std::string& key) const;

    const std::map<std::string, std::string>& values() const { return values_; }
    /// Stable FNV-1a over the sorted entries.
    std::uint64_t hash() const;
    /// INI rendering that parse() reads back to an equal Config.
    std::string to_ini() const;

private:
    std::map<std::string, std::string> values_;
};

/// Reads `ecs.*` keys on top of `base`.
EcsConfig ecs_config_from(const Config& cfg, EcsConfig base = {});
/// Reads `train.*` keys on top of `base`.
TrainConfig train_config_from(const Config& cfg, TrainConfig base = {});

std::vector<std::size_t> parse_sizes(const std::string& text);

} // namespace debias
