#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace debias {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct LinePlot {
    std::string title;
    std::string x_label;
    std::string y_label;
    std::vector<Series> series;
    /// Fixes the y range to [0, 1] instead of fitting the data.
    bool unit_y = false;
};

/// Standalone SVG document for one line plot.
std::string render_svg(const LinePlot& plot);

/// Reads the telemetry and PR curves under a run directory and writes
///   accuracy.svg                 unbiased test accuracy per epoch, one line per method
///   gradients_<method>.svg       per-iteration aligned/conflicting contributions (first seed)
///   pr_seed<k>.svg               precision-recall curve of every scorer
/// into `plot_dir`. A directory without runs or curves yields no files and a
/// notice on `log`; a run missing its telemetry throws.
std::vector<std::filesystem::path> emit_plots(const std::filesystem::path& run_dir,
                                              const std::filesystem::path& plot_dir, std::ostream* log = nullptr);

} // namespace debias
