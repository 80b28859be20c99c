#include "debias/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "debias/rng.hpp"

namespace debias {

namespace {

std::uint32_t read_be32(std::ifstream& in, const std::filesystem::path& path) {
    unsigned char bytes[4];
    in.read(reinterpret_cast<char*>(bytes), 4);
    if (!in) {
        throw IdxError(IdxError::Kind::truncated, path.string() + ": header is truncated");
    }
    return (std::uint32_t{bytes[0]} << 24) | (std::uint32_t{bytes[1]} << 16) |
           (std::uint32_t{bytes[2]} << 8) | std::uint32_t{bytes[3]};
}

void write_be32(std::ofstream& out, std::uint32_t value) {
    const unsigned char bytes[4] = {
        static_cast<unsigned char>(value >> 24), static_cast<unsigned char>(value >> 16),
        static_cast<unsigned char>(value >> 8), static_cast<unsigned char>(value)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::ifstream open_idx(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IdxError(IdxError::Kind::io, "cannot open IDX file " + path.string());
    }
    return in;
}

void read_payload(std::ifstream& in, const std::filesystem::path& path, std::uint8_t* dst,
                  std::size_t bytes) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(in.gcount()) != bytes) {
        throw IdxError(IdxError::Kind::truncated,
                       path.string() + ": expected " + std::to_string(bytes) + " payload bytes, got " +
                           std::to_string(in.gcount()));
    }
}

// Draws a palette index: the class color with probability rho, otherwise one
// of the other entries uniformly.
int draw_color(Rng& rng, int target, double rho, std::size_t colors) {
    if (colors == 1 || rng.bernoulli(rho)) {
        return target;
    }
    const auto k = static_cast<int>(rng.below(colors - 1));
    return k < target ? k : k + 1;
}

void check_rho(double rho) {
    if (!(rho >= 0.0 && rho <= 1.0)) {
        throw InvalidArgument("bias severity rho must lie in [0, 1]");
    }
}

BiasedDataset image_dataset(const RawImages& raw, const Palette& palette, BiasLayout layout,
                            Split split, std::uint64_t seed) {
    BiasedDataset ds;
    ds.targets = raw.labels;
    ds.num_classes = static_cast<int>(palette.size());
    ds.split = split;
    ds.layout = layout;
    ds.shape = {3, raw.rows, raw.cols};
    ds.palette = palette;
    ds.seed = seed;
    ds.gray = raw.pixels;
    for (int y : raw.labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= palette.size()) {
            throw InvalidArgument("label " + std::to_string(y) + " has no palette color");
        }
    }
    return ds;
}

void finish_image_dataset(BiasedDataset& ds) {
    ds.aligned = recompute_alignment(ds);
    ds.features = render_features(ds);
}

} // namespace

RawImages RawImages::select(std::span<const std::size_t> indices) const {
    RawImages out;
    out.rows = rows;
    out.cols = cols;
    const std::size_t ppi = pixels_per_image();
    out.pixels.reserve(indices.size() * ppi);
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        const auto first = pixels.begin() + static_cast<std::ptrdiff_t>(i * ppi);
        out.pixels.insert(out.pixels.end(), first, first + static_cast<std::ptrdiff_t>(ppi));
        out.labels.push_back(labels[i]);
    }
    return out;
}

RawImages load_idx(const std::filesystem::path& images_path,
                   const std::filesystem::path& labels_path) {
    std::ifstream images = open_idx(images_path);
    std::ifstream labels = open_idx(labels_path);

    const std::uint32_t image_magic = read_be32(images, images_path);
    if (image_magic != kIdxImageMagic) {
        throw IdxError(IdxError::Kind::bad_magic, images_path.string() + ": magic " +
                                                      std::to_string(image_magic) + ", expected 2051");
    }
    const std::uint32_t label_magic = read_be32(labels, labels_path);
    if (label_magic != kIdxLabelMagic) {
        throw IdxError(IdxError::Kind::bad_magic, labels_path.string() + ": magic " +
                                                      std::to_string(label_magic) + ", expected 2049");
    }
    const std::uint32_t image_count = read_be32(images, images_path);
    const std::uint32_t rows = read_be32(images, images_path);
    const std::uint32_t cols = read_be32(images, images_path);
    const std::uint32_t label_count = read_be32(labels, labels_path);
    if (image_count != label_count) {
        throw IdxError(IdxError::Kind::count_mismatch,
                       "IDX pair disagrees: " + std::to_string(image_count) + " images vs " +
                           std::to_string(label_count) + " labels");
    }

    RawImages raw;
    raw.rows = rows;
    raw.cols = cols;
    raw.pixels.resize(std::size_t{image_count} * rows * cols);
    read_payload(images, images_path, raw.pixels.data(), raw.pixels.size());
    std::vector<std::uint8_t> label_bytes(label_count);
    read_payload(labels, labels_path, label_bytes.data(), label_bytes.size());
    raw.labels.assign(label_bytes.begin(), label_bytes.end());
    return raw;
}

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               const RawImages& raw) {
    std::ofstream images(images_path, std::ios::binary | std::ios::trunc);
    std::ofstream labels(labels_path, std::ios::binary | std::ios::trunc);
    if (!images || !labels) {
        throw IdxError(IdxError::Kind::io, "cannot create IDX files");
    }
    write_be32(images, kIdxImageMagic);
    write_be32(images, static_cast<std::uint32_t>(raw.size()));
    write_be32(images, static_cast<std::uint32_t>(raw.rows));
    write_be32(images, static_cast<std::uint32_t>(raw.cols));
    images.write(reinterpret_cast<const char*>(raw.pixels.data()),
                 static_cast<std::streamsize>(raw.pixels.size()));
    write_be32(labels, kIdxLabelMagic);
    write_be32(labels, static_cast<std::uint32_t>(raw.size()));
    for (int y : raw.labels) {
        labels.put(static_cast<char>(static_cast<std::uint8_t>(y)));
    }
}

RawImages balanced_subset(const RawImages& raw, std::size_t per_class, std::uint64_t seed) {
    int max_label = 0;
    for (int y : raw.labels) {
        max_label = std::max(max_label, y);
    }
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label) + 1);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        by_class[static_cast<std::size_t>(raw.labels[i])].push_back(i);
    }
    Rng rng(seed);
    std::vector<std::size_t> chosen;
    chosen.reserve(per_class * by_class.size());
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& pool = by_class[c];
        if (pool.size() < per_class) {
            throw InvalidArgument("class " + std::to_string(c) + " has only " +
                                  std::to_string(pool.size()) + " samples, " +
                                  std::to_string(per_class) + " requested");
        }
        rng.shuffle(pool);
        chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(per_class));
    }
    return raw.select(chosen);
}

Palette::Palette(std::vector<Color> colors) : colors_(std::move(colors)) {
    if (colors_.empty()) {
        throw InvalidArgument("palette must not be empty");
    }
    // Tinting multiplies a color by pixel intensity, so two colors that are
    // scalar multiples of each other cannot be told apart. Compare them after
    // scaling the brightest channel to 1.
    auto normalized = [](const Color& c) {
        const double peak = std::max({c.r, c.g, c.b});
        return Color{c.r / peak, c.g / peak, c.b / peak};
    };
    for (std::size_t i = 0; i < colors_.size(); ++i) {
        const Color& c = colors_[i];
        for (double ch : {c.r, c.g, c.b}) {
            if (!(ch >= 0.0 && ch <= 1.0)) {
                throw InvalidArgument("palette color " + std::to_string(i) + " leaves [0, 1]");
            }
        }
        if (std::max({c.r, c.g, c.b}) <= 0.0) {
            throw InvalidArgument("palette color " + std::to_string(i) + " is black");
        }
    }
    for (std::size_t i = 0; i < colors_.size(); ++i) {
        for (std::size_t j = i + 1; j < colors_.size(); ++j) {
            const Color a = normalized(colors_[i]);
            const Color b = normalized(colors_[j]);
            if (std::abs(a.r - b.r) + std::abs(a.g - b.g) + std::abs(a.b - b.b) < 1e-9) {
                throw InvalidArgument("palette colors " + std::to_string(i) + " and " +
                                      std::to_string(j) + " differ only in brightness");
            }
        }
    }
}

Palette Palette::standard(std::size_t classes) {
    static const std::vector<Color> table = {
        {1.0, 0.0, 0.0}, // red
        {0.0, 1.0, 0.0}, // green
        {0.0, 0.0, 1.0}, // blue
        {1.0, 1.0, 0.0}, // yellow
        {1.0, 0.0, 1.0}, // magenta
        {0.0, 1.0, 1.0}, // cyan
        {1.0, 0.5, 0.0}, // orange
        {0.5, 0.0, 1.0}, // violet
        {0.0, 0.5, 1.0}, // azure
        {1.0, 1.0, 1.0}, // white
    };
    if (classes == 0 || classes > table.size()) {
        throw InvalidArgument("standard palette supports 1 to 10 classes");
    }
    return Palette(std::vector<Color>(table.begin(), table.begin() + static_cast<std::ptrdiff_t>(classes)));
}

bool BiasedDataset::conflicting(std::size_t i) const {
    for (const auto& flags : aligned) {
        if (!flags[i]) {
            return true;
        }
    }
    return false;
}

std::vector<std::uint8_t> BiasedDataset::conflicting_flags() const {
    std::vector<std::uint8_t> out(size());
    for (std::size_t i = 0; i < size(); ++i) {
        out[i] = conflicting(i) ? 1 : 0;
    }
    return out;
}

std::size_t BiasedDataset::aligned_count(std::size_t attribute) const {
    const auto& flags = aligned.at(attribute);
    return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), std::uint8_t{1}));
}

Matrix BiasedDataset::gather(std::span<const std::size_t> rows) const {
    Matrix out(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        out.row(static_cast<Eigen::Index>(r)) = features.row(static_cast<Eigen::Index>(rows[r]));
    }
    return out;
}

std::vector<int> BiasedDataset::gather_targets(std::span<const std::size_t> rows) const {
    std::vector<int> out(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        out[r] = targets[rows[r]];
    }
    return out;
}

BiasedDataset colorize(const RawImages& raw, double rho, const Palette& palette, std::uint64_t seed,
                       Split split) {
    check_rho(rho);
    BiasedDataset ds = image_dataset(raw, palette, BiasLayout::tint, split, seed);
    ds.severity = {rho};
    Rng rng(seed);
    ds.bias.assign(1, std::vector<int>(raw.size()));
    for (std::size_t i = 0; i < raw.size(); ++i) {
        ds.bias[0][i] = draw_color(rng, raw.labels[i], rho, palette.size());
    }
    finish_image_dataset(ds);
    return ds;
}

BiasedDataset multi_colorize(const RawImages& raw, double rho_left, double rho_right,
                             std::uint64_t seed, const Palette& palette, Split split) {
    check_rho(rho_left);
    check_rho(rho_right);
    BiasedDataset ds = image_dataset(raw, palette, BiasLayout::halves, split, seed);
    ds.severity = {rho_left, rho_right};
    Rng left_rng(derive_seed(seed, "left"));
    Rng right_rng(derive_seed(seed, "right"));
    ds.bias.assign(2, std::vector<int>(raw.size()));
    for (std::size_t i = 0; i < raw.size(); ++i) {
        ds.bias[0][i] = draw_color(left_rng, raw.labels[i], rho_left, palette.size());
        ds.bias[1][i] = draw_color(right_rng, raw.labels[i], rho_right, palette.size());
    }
    finish_image_dataset(ds);
    return ds;
}

BiasedDataset make_unbiased_test(const RawImages& raw, const Palette& palette, std::uint64_t seed,
                                 BiasLayout layout) {
    if (layout == BiasLayout::none) {
        throw InvalidArgument("unbiased image test split needs a tint or halves layout");
    }
    BiasedDataset ds = image_dataset(raw, palette, layout, Split::test, seed);
    const std::size_t attributes = layout == BiasLayout::halves ? 2 : 1;
    const double uniform = 1.0 / static_cast<double>(palette.size());
    ds.severity.assign(attributes, uniform);
    ds.bias.assign(attributes, std::vector<int>(raw.size()));
    for (std::size_t a = 0; a < attributes; ++a) {
        Rng rng(derive_seed(seed, a == 0 ? "left" : "right"));
        for (std::size_t i = 0; i < raw.size(); ++i) {
            ds.bias[a][i] = static_cast<int>(rng.below(palette.size()));
        }
    }
    finish_image_dataset(ds);
    return ds;
}

BiasedDataset synth_blobs(std::size_t n, std::size_t signal_dim, double rho, int classes,
                          std::uint64_t seed, const BlobOptions& options) {
    check_rho(rho);
    if (classes <= 0 || n < static_cast<std::size_t>(classes)) {
        throw InvalidArgument("synth_blobs needs n >= classes > 0");
    }
    const auto C = static_cast<std::size_t>(classes);
    Rng means_rng(options.means_seed.value_or(derive_seed(seed, "means")));
    Matrix means(classes, static_cast<Eigen::Index>(signal_dim));
    for (Eigen::Index c = 0; c < means.rows(); ++c) {
        for (Eigen::Index d = 0; d < means.cols(); ++d) {
            means(c, d) = options.mean_scale * means_rng.normal();
        }
    }

    BiasedDataset ds;
    ds.num_classes = classes;
    ds.layout = BiasLayout::none;
    ds.seed = seed;
    ds.severity = {rho};
    ds.targets.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        ds.targets[i] = static_cast<int>(i % C);
    }
    Rng rng(seed);
    rng.shuffle(ds.targets);

    ds.bias.assign(1, std::vector<int>(n));
    ds.features = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(signal_dim + C));
    for (std::size_t i = 0; i < n; ++i) {
        const int y = ds.targets[i];
        const auto row = static_cast<Eigen::Index>(i);
        for (std::size_t d = 0; d < signal_dim; ++d) {
            ds.features(row, static_cast<Eigen::Index>(d)) =
                means(y, static_cast<Eigen::Index>(d)) + options.noise * rng.normal();
        }
        const int b = draw_color(rng, y, rho, C);
        ds.bias[0][i] = b;
        ds.features(row, static_cast<Eigen::Index>(signal_dim) + b) = options.bias_scale;
    }
    ds.aligned = recompute_alignment(ds);
    return ds;
}

Matrix render_features(const BiasedDataset& ds) {
    if (!ds.shape.is_image()) {
        throw InvalidArgument("render_features needs an image dataset");
    }
    const std::size_t H = ds.shape.height;
    const std::size_t W = ds.shape.width;
    const std::size_t plane = H * W;
    Matrix features(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(3 * plane));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const std::uint8_t* px = ds.gray.data() + i * plane;
        const Color& left = ds.palette[static_cast<std::size_t>(ds.bias[0][i])];
        const Color& right =
            ds.layout == BiasLayout::halves ? ds.palette[static_cast<std::size_t>(ds.bias[1][i])] : left;
        for (std::size_t r = 0; r < H; ++r) {
            for (std::size_t c = 0; c < W; ++c) {
                const std::size_t p = r * W + c;
                const double v = px[p] / 255.0;
                const Color& color = c < W / 2 ? left : right;
                features(row, static_cast<Eigen::Index>(p)) = v * color.r;
                features(row, static_cast<Eigen::Index>(plane + p)) = v * color.g;
                features(row, static_cast<Eigen::Index>(2 * plane + p)) = v * color.b;
            }
        }
    }
    return features;
}

std::vector<std::vector<std::uint8_t>> recompute_alignment(const BiasedDataset& ds) {
    std::vector<std::vector<std::uint8_t>> flags(ds.bias.size(), std::vector<std::uint8_t>(ds.size()));
    for (std::size_t a = 0; a < ds.bias.size(); ++a) {
        for (std::size_t i = 0; i < ds.size(); ++i) {
            flags[a][i] = ds.bias[a][i] == ds.targets[i] ? 1 : 0;
        }
    }
    return flags;
}

} // namespace debias
