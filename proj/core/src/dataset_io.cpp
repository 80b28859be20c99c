#include "debias/dataset_io.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "debias/rng.hpp"

namespace debias {

namespace {

constexpr std::uint32_t kTensorVersion = 1;

template <class T>
void put(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& in, const std::filesystem::path& path) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw CacheError(CacheError::Kind::malformed, path.string() + " is truncated");
    }
    return value;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

std::string join_doubles(const std::vector<double>& values) {
    std::ostringstream os;
    os << std::setprecision(17);
    for (std::size_t i = 0; i < values.size(); ++i) {
        os << (i ? "," : "") << values[i];
    }
    return os.str();
}

std::vector<double> split_doubles(const std::string& text, char sep) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, sep)) {
        if (!item.empty()) {
            out.push_back(std::stod(item));
        }
    }
    return out;
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw CacheError(CacheError::Kind::malformed, "unknown split '" + s + "'");
}

BiasLayout parse_layout(const std::string& s) {
    if (s == "none") return BiasLayout::none;
    if (s == "tint") return BiasLayout::tint;
    if (s == "halves") return BiasLayout::halves;
    throw CacheError(CacheError::Kind::malformed, "unknown layout '" + s + "'");
}

} // namespace

std::string to_string(Split split) {
    return split == Split::train ? "train" : "test";
}

std::string to_string(BiasLayout layout) {
    switch (layout) {
    case BiasLayout::none: return "none";
    case BiasLayout::tint: return "tint";
    case BiasLayout::halves: return "halves";
    }
    return "none";
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw CacheError(CacheError::Kind::missing, "cannot open " + path.string());
    }
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    std::array<char, 1 << 16> buffer{};
    while (in) {
        in.read(buffer.data(), buffer.size());
        hash = fnv1a64(buffer.data(), static_cast<std::size_t>(in.gcount()), hash);
    }
    return hash;
}

std::filesystem::path write_dataset_cache(const BiasedDataset& ds, const std::string& source,
                                          const std::filesystem::path& directory,
                                          const std::string& stem) {
    std::filesystem::create_directories(directory);
    const auto tensor_path = directory / (stem + ".bin");
    const auto manifest_path = directory / (stem + ".manifest");
    {
        auto tmp = tensor_path;
        tmp += ".tmp";
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write("DBDS", 4);
        put<std::uint32_t>(out, kTensorVersion);
        put<std::uint8_t>(out, static_cast<std::uint8_t>(ds.layout));
        put<std::uint8_t>(out, static_cast<std::uint8_t>(ds.split));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.size()));
        put<std::int32_t>(out, ds.num_classes);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.attributes()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.shape.channels));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.shape.height));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.shape.width));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.dim()));
        put<std::uint64_t>(out, ds.seed);
        for (double rho : ds.severity) {
            put<double>(out, rho);
        }
        put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.palette.size()));
        for (const Color& c : ds.palette.colors()) {
            put<double>(out, c.r);
            put<double>(out, c.g);
            put<double>(out, c.b);
        }
        for (int y : ds.targets) {
            put<std::int32_t>(out, y);
        }
        for (const auto& attr : ds.bias) {
            for (int b : attr) {
                put<std::int32_t>(out, b);
            }
        }
        if (ds.shape.is_image()) {
            out.write(reinterpret_cast<const char*>(ds.gray.data()),
                      static_cast<std::streamsize>(ds.gray.size()));
        } else {
            for (Eigen::Index r = 0; r < ds.features.rows(); ++r) {
                for (Eigen::Index c = 0; c < ds.features.cols(); ++c) {
                    put<double>(out, ds.features(r, c));
                }
            }
        }
        out.close();
        if (!out) {
            throw Error("failed writing " + tmp.string());
        }
        std::filesystem::rename(tmp, tensor_path);
    }

    std::ostringstream m;
    m << "# debias dataset manifest\n";
    m << "format = 1\n";
    m << "source = " << source << "\n";
    m << "split = " << to_string(ds.split) << "\n";
    m << "count = " << ds.size() << "\n";
    m << "classes = " << ds.num_classes << "\n";
    m << "layout = " << to_string(ds.layout) << "\n";
    m << "rho = " << join_doubles(ds.severity) << "\n";
    m << "seed = " << ds.seed << "\n";
    std::vector<double> aligned;
    for (std::size_t a = 0; a < ds.attributes(); ++a) {
        aligned.push_back(static_cast<double>(ds.aligned_count(a)));
    }
    m << "aligned_count = " << join_doubles(aligned) << "\n";
    m << "palette = ";
    for (std::size_t i = 0; i < ds.palette.size(); ++i) {
        const Color& c = ds.palette[i];
        m << (i ? ";" : "") << join_doubles({c.r, c.g, c.b});
    }
    m << "\n";
    m << "tensor = " << tensor_path.filename().string() << "\n";
    m << "checksum = " << hex64(file_checksum(tensor_path)) << "\n";

    auto tmp = manifest_path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << m.str();
    }
    std::filesystem::rename(tmp, manifest_path);
    return manifest_path;
}

DatasetManifest read_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw CacheError(CacheError::Kind::missing, "no manifest at " + manifest_path.string());
    }
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) {
            throw CacheError(CacheError::Kind::malformed, "bad manifest line: " + line);
        }
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    auto need = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) {
            throw CacheError(CacheError::Kind::malformed, "manifest lacks '" + key + "'");
        }
        return it->second;
    };
    DatasetManifest m;
    try {
        m.source = need("source");
        m.split = parse_split(need("split"));
        m.count = std::stoull(need("count"));
        m.classes = std::stoi(need("classes"));
        m.layout = parse_layout(need("layout"));
        m.severity = split_doubles(need("rho"), ',');
        m.seed = std::stoull(need("seed"));
        for (double v : split_doubles(need("aligned_count"), ',')) {
            m.aligned_counts.push_back(static_cast<std::size_t>(v));
        }
        std::vector<Color> colors;
        std::stringstream ss(need("palette"));
        std::string entry;
        while (std::getline(ss, entry, ';')) {
            const auto rgb = split_doubles(entry, ',');
            if (rgb.size() != 3) {
                throw CacheError(CacheError::Kind::malformed, "palette entry needs 3 channels");
            }
            colors.push_back({rgb[0], rgb[1], rgb[2]});
        }
        if (!colors.empty()) {
            m.palette = Palette(std::move(colors));
        }
        m.tensor_file = need("tensor");
        m.checksum = std::stoull(need("checksum"), nullptr, 16);
    } catch (const std::logic_error& e) {
        throw CacheError(CacheError::Kind::malformed,
                         "manifest " + manifest_path.string() + ": " + e.what());
    }
    return m;
}

BiasedDataset read_dataset_cache(const std::filesystem::path& manifest_path) {
    const DatasetManifest m = read_manifest(manifest_path);
    const auto tensor_path = manifest_path.parent_path() / m.tensor_file;
    if (!std::filesystem::exists(tensor_path)) {
        throw CacheError(CacheError::Kind::missing, "tensor file " + tensor_path.string() + " is missing");
    }
    const std::uint64_t actual = file_checksum(tensor_path);
    if (actual != m.checksum) {
        throw CacheError(CacheError::Kind::checksum_mismatch,
                         tensor_path.string() + ": checksum " + hex64(actual) + " != manifest " +
                             hex64(m.checksum));
    }

    std::ifstream in(tensor_path, std::ios::binary);
    std::array<char, 4> magic{};
    in.read(magic.data(), 4);
    if (!in || std::memcmp(magic.data(), "DBDS", 4) != 0) {
        throw CacheError(CacheError::Kind::malformed, tensor_path.string() + ": bad magic");
    }
    if (get<std::uint32_t>(in, tensor_path) != kTensorVersion) {
        throw CacheError(CacheError::Kind::malformed, tensor_path.string() + ": unsupported version");
    }
    BiasedDataset ds;
    ds.layout = static_cast<BiasLayout>(get<std::uint8_t>(in, tensor_path));
    ds.split = static_cast<Split>(get<std::uint8_t>(in, tensor_path));
    const auto count = get<std::uint32_t>(in, tensor_path);
    ds.num_classes = get<std::int32_t>(in, tensor_path);
    const auto attributes = get<std::uint32_t>(in, tensor_path);
    ds.shape.channels = get<std::uint32_t>(in, tensor_path);
    ds.shape.height = get<std::uint32_t>(in, tensor_path);
    ds.shape.width = get<std::uint32_t>(in, tensor_path);
    const auto dim = get<std::uint32_t>(in, tensor_path);
    ds.seed = get<std::uint64_t>(in, tensor_path);
    for (std::uint32_t a = 0; a < attributes; ++a) {
        ds.severity.push_back(get<double>(in, tensor_path));
    }
    std::vector<Color> colors(get<std::uint32_t>(in, tensor_path));
    for (auto& c : colors) {
        c.r = get<double>(in, tensor_path);
        c.g = get<double>(in, tensor_path);
        c.b = get<double>(in, tensor_path);
    }
    if (!colors.empty()) {
        ds.palette = Palette(std::move(colors));
    }
    ds.targets.resize(count);
    for (auto& y : ds.targets) {
        y = get<std::int32_t>(in, tensor_path);
    }
    ds.bias.assign(attributes, std::vector<int>(count));
    for (auto& attr : ds.bias) {
        for (auto& b : attr) {
            b = get<std::int32_t>(in, tensor_path);
        }
    }
    if (ds.shape.is_image()) {
        ds.gray.resize(std::size_t{count} * ds.shape.height * ds.shape.width);
        in.read(reinterpret_cast<char*>(ds.gray.data()), static_cast<std::streamsize>(ds.gray.size()));
        if (!in) {
            throw CacheError(CacheError::Kind::malformed, tensor_path.string() + " is truncated");
        }
        ds.features = render_features(ds);
    } else {
        ds.features.resize(count, dim);
        for (Eigen::Index r = 0; r < ds.features.rows(); ++r) {
            for (Eigen::Index c = 0; c < ds.features.cols(); ++c) {
                ds.features(r, c) = get<double>(in, tensor_path);
            }
        }
    }
    ds.aligned = recompute_alignment(ds);
    return ds;
}

} // namespace debias
