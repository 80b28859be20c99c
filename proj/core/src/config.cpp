#include "debias/config.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <sstream>

#include "debias/error.hpp"
#include "debias/rng.hpp"

namespace debias {

namespace {

Config from_tree(const boost::property_tree::ptree& tree) {
    Config out;
    for (const auto& [name, node] : tree) {
        if (node.empty()) {
            out.set(name, node.data());
            continue;
        }
        for (const auto& [key, leaf] : node) {
            out.set(name + "." + key, leaf.data());
        }
    }
    return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    T value{};
    const std::string trimmed = boost::algorithm::trim_copy(text);
    const auto* end = trimmed.data() + trimmed.size();
    const auto [ptr, ec] = std::from_chars(trimmed.data(), end, value);
    if (ec != std::errc{} || ptr != end) {
        throw InvalidArgument("config key '" + key + "': cannot parse '" + text + "' as a number");
    }
    return value;
}

} // namespace

Config Config::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open config " + path.string());
    }
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw FormatError(path.string() + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    return from_tree(tree);
}

Config Config::parse(const std::string& ini_text) {
    std::istringstream in(ini_text);
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw FormatError("line " + std::to_string(e.line()) + ": " + e.message());
    }
    return from_tree(tree);
}

void Config::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw InvalidArgument("override '" + assignment + "' is not of the form key=value");
    }
    set(boost::algorithm::trim_copy(assignment.substr(0, eq)),
        boost::algorithm::trim_copy(assignment.substr(eq + 1)));
}

void Config::set(const std::string& key, std::string value) {
    values_[key] = std::move(value);
}

std::optional<std::string> Config::find(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
    return find(key).value_or(fallback);
}

double Config::get_double(const std::string& key, double fallback) const {
    const auto v = find(key);
    return v ? parse_number<double>(key, *v) : fallback;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
    const auto v = find(key);
    return v ? parse_number<std::int64_t>(key, *v) : fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    const auto v = find(key);
    if (!v) return fallback;
    const std::string s = boost::algorithm::to_lower_copy(boost::algorithm::trim_copy(*v));
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw InvalidArgument("config key '" + key + "': expected a boolean, got '" + *v + "'");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
    std::vector<std::string> out;
    const auto v = find(key);
    if (!v || boost::algorithm::trim_copy(*v).empty()) return out;
    boost::algorithm::split(out, *v, boost::algorithm::is_any_of(","));
    for (auto& item : out) boost::algorithm::trim(item);
    return out;
}

std::uint64_t Config::hash() const {
    std::uint64_t h = fnv1a64("config");
    for (const auto& [k, v] : values_) {
        const std::string entry = k + '\x1f' + v + '\x1e';
        h = fnv1a64(entry.data(), entry.size(), h);
    }
    return h;
}

std::string Config::to_ini() const {
    std::ostringstream out;
    std::string section;
    for (const auto& [k, v] : values_) {
        if (k.find('.') == std::string::npos) out << k << " = " << v << '\n';
    }
    for (const auto& [k, v] : values_) {
        const auto dot = k.find('.');
        if (dot == std::string::npos) continue;
        const std::string s = k.substr(0, dot);
        if (s != section) {
            out << '[' << s << "]\n";
            section = s;
        }
        out << k.substr(dot + 1) << " = " << v << '\n';
    }
    return out.str();
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
    std::vector<std::size_t> out;
    std::vector<std::string> parts;
    if (boost::algorithm::trim_copy(text).empty()) return out; // no hidden layers
    boost::algorithm::split(parts, text, boost::algorithm::is_any_of(",x"));
    for (const auto& p : parts) {
        if (boost::algorithm::trim_copy(p).empty()) {
            throw InvalidArgument("layer sizes '" + text + "' contain an empty entry");
        }
        out.push_back(static_cast<std::size_t>(parse_number<std::uint64_t>("sizes", p)));
    }
    return out;
}

EcsConfig ecs_config_from(const Config& cfg, EcsConfig base) {
    base.eta = cfg.get_double("ecs.eta", base.eta);
    base.epochs = static_cast<std::size_t>(cfg.get_int("ecs.epochs", static_cast<std::int64_t>(base.epochs)));
    base.iterations =
        static_cast<std::size_t>(cfg.get_int("ecs.iterations", static_cast<std::int64_t>(base.iterations)));
    base.checkpoint_interval = static_cast<std::size_t>(
        cfg.get_int("ecs.checkpoint_interval", static_cast<std::int64_t>(base.checkpoint_interval)));
    base.batch_size =
        static_cast<std::size_t>(cfg.get_int("ecs.batch_size", static_cast<std::int64_t>(base.batch_size)));
    base.adam.learning_rate = cfg.get_double("ecs.lr", base.adam.learning_rate);
    if (const auto h = cfg.find("ecs.hidden")) base.hidden = parse_sizes(*h);
    base.peer_seed_1 = static_cast<std::uint64_t>(cfg.get_int("ecs.peer_seed_1", static_cast<std::int64_t>(base.peer_seed_1)));
    base.peer_seed_2 = static_cast<std::uint64_t>(cfg.get_int("ecs.peer_seed_2", static_cast<std::int64_t>(base.peer_seed_2)));
    base.batch_seed = static_cast<std::uint64_t>(cfg.get_int("ecs.batch_seed", static_cast<std::int64_t>(base.batch_seed)));
    base.warmup_epochs = cfg.get_double("ecs.warmup_epochs", base.warmup_epochs);
    base.confident_picking = cfg.get_bool("ecs.confident_picking", base.confident_picking);
    base.peer_model = cfg.get_bool("ecs.peer_model", base.peer_model);
    base.epoch_ensemble = cfg.get_bool("ecs.epoch_ensemble", base.epoch_ensemble);
    base.validate();
    return base;
}

TrainConfig train_config_from(const Config& cfg, TrainConfig base) {
    if (const auto s = cfg.find("train.strategy")) base.strategy = parse_strategy(*s);
    base.gamma = cfg.get_double("train.gamma", base.gamma);
    base.tau = cfg.get_double("train.tau", base.tau);
    base.epochs = static_cast<std::size_t>(cfg.get_int("train.epochs", static_cast<std::int64_t>(base.epochs)));
    base.batch_size =
        static_cast<std::size_t>(cfg.get_int("train.batch_size", static_cast<std::int64_t>(base.batch_size)));
    base.adam.learning_rate = cfg.get_double("train.lr", base.adam.learning_rate);
    if (const auto h = cfg.find("train.hidden")) base.hidden = parse_sizes(*h);
    if (const auto p = cfg.find("train.partition")) {
        if (*p == "scores") base.partition_source = PartitionSource::scores;
        else if (*p == "ground_truth" || *p == "gt") base.partition_source = PartitionSource::ground_truth;
        else throw InvalidArgument("train.partition must be 'scores' or 'ground_truth', got '" + *p + "'");
    }
    if (const auto s = cfg.find("train.ssl")) {
        if (*s == "off" || *s == "none") base.ssl = SslMode::off;
        else if (*s == "rotation") base.ssl = SslMode::rotation;
        else throw InvalidArgument("train.ssl must be 'off' or 'rotation', got '" + *s + "'");
    }
    base.ssl_weight = cfg.get_double("train.ssl_weight", base.ssl_weight);
    base.init_seed = static_cast<std::uint64_t>(cfg.get_int("train.init_seed", static_cast<std::int64_t>(base.init_seed)));
    base.batch_seed = static_cast<std::uint64_t>(cfg.get_int("train.batch_seed", static_cast<std::int64_t>(base.batch_seed)));
    base.validate();
    return base;
}

} // namespace debias
