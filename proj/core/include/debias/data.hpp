#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "debias/error.hpp"
#include "debias/nn.hpp"

namespace debias {

/// Grayscale images with labels as stored in an IDX pair.
struct RawImages {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> pixels; // count * rows * cols, row-major per image
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t pixels_per_image() const { return rows * cols; }
    /// Pixel value scaled to [0, 1].
    double intensity(std::size_t sample, std::size_t pixel) const {
        return pixels[sample * pixels_per_image() + pixel] / 255.0;
    }
    /// Copies the listed samples, in order.
    RawImages select(std::span<const std::size_t> indices) const;
};

class IdxError : public Error {
public:
    enum class Kind { io, bad_magic, truncated, count_mismatch };

    IdxError(Kind kind, std::string what) : Error(std::move(what)), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

/// Parses a big-endian IDX image/label file pair.
RawImages load_idx(const std::filesystem::path& images_path,
                   const std::filesystem::path& labels_path);
void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               const RawImages& raw);

/// Picks `per_class` samples of every label (without replacement, seeded);
/// the result is ordered by class then by draw.
RawImages balanced_subset(const RawImages& raw, std::size_t per_class, std::uint64_t seed);

struct Color {
    double r, g, b;
    bool operator==(const Color&) const = default;
};

/// One color per class; entry c is the color aligned with class c.
class Palette {
public:
    Palette() = default;
    explicit Palette(std::vector<Color> colors);

    /// The first `classes` entries of a fixed 10-color table.
    static Palette standard(std::size_t classes = 10);

    std::size_t size() const { return colors_.size(); }
    const Color& operator[](std::size_t i) const { return colors_[i]; }
    const std::vector<Color>& colors() const { return colors_; }

private:
    std::vector<Color> colors_;
};

enum class Split : std::uint8_t { train, test };

/// How bias attributes are rendered into the image.
enum class BiasLayout : std::uint8_t {
    none,   // features are not images (synthetic blobs)
    tint,   // one color attribute tints the whole digit
    halves, // left and right halves tinted by two independent attributes
};

struct ImageShape {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t size() const { return channels * height * width; }
    bool is_image() const { return height > 0 && width > 0; }
};

/// A labeled dataset with full ground-truth bias annotations.
struct BiasedDataset {
    Matrix features; // N x D, channel-major 3 x H x W for images
    std::vector<int> targets;
    std::vector<std::vector<int>> bias;                 // [attribute][sample]
    std::vector<std::vector<std::uint8_t>> aligned;     // [attribute][sample]
    std::vector<double> severity;                       // rho per attribute
    int num_classes = 0;
    Split split = Split::train;
    BiasLayout layout = BiasLayout::none;
    ImageShape shape;
    Palette palette;
    std::uint64_t seed = 0;
    /// Source grayscale pixels (image datasets only), N x H x W.
    std::vector<std::uint8_t> gray;

    std::size_t size() const { return targets.size(); }
    std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
    std::size_t attributes() const { return bias.size(); }

    /// Bias-conflicting with respect to at least one attribute.
    bool conflicting(std::size_t i) const;
    std::vector<std::uint8_t> conflicting_flags() const;
    std::size_t aligned_count(std::size_t attribute = 0) const;

    Matrix gather(std::span<const std::size_t> rows) const;
    std::vector<int> gather_targets(std::span<const std::size_t> rows) const;
};

/// Tints grayscale digits: each sample takes its class color with
/// probability rho, otherwise a uniformly drawn different palette color.
BiasedDataset colorize(const RawImages& raw, double rho, const Palette& palette, std::uint64_t seed,
                       Split split = Split::train);

/// Two independent color attributes on the left and right image halves.
BiasedDataset multi_colorize(const RawImages& raw, double rho_left, double rho_right,
                             std::uint64_t seed, const Palette& palette = Palette::standard(),
                             Split split = Split::train);

/// Test split whose colors are uniform over the whole palette and independent
/// of the class (for `halves`, both attributes independently).
BiasedDataset make_unbiased_test(const RawImages& raw, const Palette& palette, std::uint64_t seed,
                                 BiasLayout layout = BiasLayout::tint);

struct BlobOptions {
    double mean_scale = 1.0; // class means drawn from N(0, mean_scale^2 I)
    double noise = 1.0;      // isotropic noise around the class mean
    double bias_scale = 1.0; // magnitude of the one-hot bias block
    /// Seed of the class means; defaults to one derived from the sample seed.
    /// Train and test splits of one problem must share it.
    std::optional<std::uint64_t> means_seed;
};

/// Class-conditional Gaussian signal followed by a one-hot bias block that
/// equals the class with probability rho. Classes are balanced.
BiasedDataset synth_blobs(std::size_t n, std::size_t signal_dim, double rho, int classes,
                          std::uint64_t seed, const BlobOptions& options = {});

/// Recomputes the feature matrix of an image dataset from its grayscale
/// pixels, bias labels and palette.
Matrix render_features(const BiasedDataset& dataset);

/// Recomputes alignment flags from (target, bias label): the color of class y
/// is palette index y, and for blobs the bias block index.
std::vector<std::vector<std::uint8_t>> recompute_alignment(const BiasedDataset& dataset);

} // namespace debias
