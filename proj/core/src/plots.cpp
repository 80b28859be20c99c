#include "debias/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "debias/error.hpp"
#include "debias/harness.hpp"

namespace debias {

namespace fs = std::filesystem;

namespace {

constexpr double kWidth = 720, kHeight = 440;
constexpr double kLeft = 70, kRight = 190, kTop = 40, kBottom = 55;

const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                               "#8c564b", "#e377c2", "#7f7f7f", "#17becf", "#bcbd22"};

std::string esc(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

/// Round tick step covering `span` in about five intervals.
double tick_step(double span) {
    const double raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        if (raw <= m * mag) return m * mag;
    }
    return 10.0 * mag;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path, char sep) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot read " + path.string());
    }
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        if (sep == ' ') {
            while (ls >> cell) cells.push_back(cell);
        } else {
            while (std::getline(ls, cell, sep)) cells.push_back(cell);
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name, const fs::path& file) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
        throw FormatError(file.string() + ": no column '" + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
}

double cell(const std::vector<std::string>& row, std::size_t i) {
    if (i >= row.size() || row[i].empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::stod(row[i]);
}

void write_text(const fs::path& path, const std::string& text) {
    write_file_atomic(path, text);
}

std::vector<fs::path> sorted_dirs(const fs::path& dir) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory()) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace

std::string render_svg(const LinePlot& plot) {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : plot.series) {
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) {
        x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    }
    if (plot.unit_y) {
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 <= x0) x1 = x0 + 1.0;
    if (y1 <= y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
       << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << kLeft + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(plot.title)
       << "</text>\n";

    const double xs = tick_step(x1 - x0), ys = tick_step(y1 - y0);
    for (double t = std::ceil(x0 / xs) * xs; t <= x1 + 1e-9 * xs; t += xs) {
        os << "<line x1=\"" << px(t) << "\" y1=\"" << kTop << "\" x2=\"" << px(t) << "\" y2=\"" << kTop + ph
           << "\" stroke=\"#e5e5e5\"/>\n<text x=\"" << px(t) << "\" y=\"" << kTop + ph + 16
           << "\" text-anchor=\"middle\">" << fmt(t) << "</text>\n";
    }
    for (double t = std::ceil(y0 / ys) * ys; t <= y1 + 1e-9 * ys; t += ys) {
        os << "<line x1=\"" << kLeft << "\" y1=\"" << py(t) << "\" x2=\"" << kLeft + pw << "\" y2=\"" << py(t)
           << "\" stroke=\"#e5e5e5\"/>\n<text x=\"" << kLeft - 6 << "\" y=\"" << py(t) + 4
           << "\" text-anchor=\"end\">" << fmt(t) << "</text>\n";
    }
    os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"black\"/>\n"
       << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
       << esc(plot.x_label) << "</text>\n"
       << "<text transform=\"translate(18," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << esc(plot.y_label) << "</text>\n";

    for (std::size_t k = 0; k < plot.series.size(); ++k) {
        const Series& s = plot.series[k];
        const char* color = kColors[k % std::size(kColors)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            os << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i])) << ' ';
        }
        os << "\"/>\n";
        const double ly = kTop + 10 + 18.0 * static_cast<double>(k);
        os << "<line x1=\"" << kLeft + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + pw + 36 << "\" y2=\""
           << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n<text x=\"" << kLeft + pw + 42
           << "\" y=\"" << ly + 4 << "\">" << esc(s.name) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::vector<fs::path> emit_plots(const fs::path& run_dir, const fs::path& plot_dir, std::ostream* log) {
    std::vector<fs::path> written;
    const auto methods = sorted_dirs(run_dir / "runs");
    std::vector<fs::path> curves;
    if (fs::is_directory(run_dir / "pr")) {
        for (const auto& e : fs::directory_iterator(run_dir / "pr")) {
            if (e.path().extension() == ".csv") curves.push_back(e.path());
        }
        std::sort(curves.begin(), curves.end());
    }
    if (methods.empty() && curves.empty()) {
        if (log) *log << "notice: no runs or curves under " << run_dir.string() << "; no plots written\n";
        return written;
    }

    if (!methods.empty()) {
        LinePlot acc{"Unbiased test accuracy", "epoch", "unbiased accuracy", {}, true};
        for (const auto& mdir : methods) {
            const auto seeds = sorted_dirs(mdir);
            if (seeds.empty()) {
                throw Error("method directory " + mdir.string() + " holds no seed runs");
            }
            // Mean over seeds, epoch by epoch.
            Series mean{mdir.filename().string(), {}, {}};
            std::vector<std::size_t> counts;
            for (const auto& sdir : seeds) {
                const fs::path file = sdir / "epochs.csv";
                if (!fs::exists(file)) {
                    throw Error("missing telemetry " + file.string());
                }
                const auto rows = read_csv(file, ',');
                if (rows.empty()) throw FormatError(file.string() + " is empty");
                const std::size_t ce = column(rows[0], "epoch", file);
                const std::size_t cu = column(rows[0], "unbiased_accuracy", file);
                for (std::size_t r = 1; r < rows.size(); ++r) {
                    const std::size_t i = r - 1;
                    if (mean.x.size() <= i) {
                        mean.x.push_back(cell(rows[r], ce));
                        mean.y.push_back(0.0);
                        counts.push_back(0);
                    }
                    const double v = cell(rows[r], cu);
                    if (std::isfinite(v)) {
                        mean.y[i] += v;
                        ++counts[i];
                    }
                }
            }
            for (std::size_t i = 0; i < mean.y.size(); ++i) {
                mean.y[i] = counts[i] ? mean.y[i] / static_cast<double>(counts[i])
                                      : std::numeric_limits<double>::quiet_NaN();
            }
            acc.series.push_back(std::move(mean));

            const fs::path tel = seeds.front() / "telemetry.txt";
            if (!fs::exists(tel)) continue; // iteration telemetry is optional
            const auto rows = read_csv(tel, ' ');
            if (rows.empty()) throw FormatError(tel.string() + " is empty");
            const std::size_t ci = column(rows[0], "iter", tel);
            const std::size_t cr = column(rows[0], "r", tel);
            const std::size_t cs = column(rows[0], "skipped", tel);
            const std::size_t ca = column(rows[0], "pg_aligned", tel);
            const std::size_t cc = column(rows[0], "pg_conflicting", tel);
            Series aligned{"aligned x weight", {}, {}}, conflicting{"conflicting", {}, {}};
            for (std::size_t r = 1; r < rows.size(); ++r) {
                if (cell(rows[r], cs) != 0.0) continue;
                const double it = cell(rows[r], ci);
                aligned.x.push_back(it);
                aligned.y.push_back(cell(rows[r], cr) * cell(rows[r], ca));
                conflicting.x.push_back(it);
                conflicting.y.push_back(cell(rows[r], cc));
            }
            LinePlot g{"Gradient contributions, " + mdir.filename().string() + " (" +
                           seeds.front().filename().string() + ")",
                       "iteration", "summed contribution", {std::move(aligned), std::move(conflicting)}, false};
            const fs::path out = plot_dir / ("gradients_" + mdir.filename().string() + ".svg");
            write_text(out, render_svg(g));
            written.push_back(out);
        }
        const fs::path out = plot_dir / "accuracy.svg";
        write_text(out, render_svg(acc));
        written.push_back(out);
    }

    // Curves are named seed<k>_<scorer>.csv.
    std::map<std::string, LinePlot> pr;
    for (const auto& file : curves) {
        const std::string stem = file.stem().string();
        const auto us = stem.find('_');
        if (us == std::string::npos) continue;
        const std::string seed = stem.substr(0, us), scorer = stem.substr(us + 1);
        LinePlot& p = pr[seed];
        p.title = "Precision-recall of bias-conflicting scores (" + seed + ")";
        p.x_label = "recall";
        p.y_label = "precision";
        p.unit_y = true;
        const auto rows = read_csv(file, ',');
        if (rows.empty()) throw FormatError(file.string() + " is empty");
        Series s{scorer, {}, {}};
        const std::size_t cr = column(rows[0], "recall", file), cp = column(rows[0], "precision", file);
        for (std::size_t r = 1; r < rows.size(); ++r) {
            s.x.push_back(cell(rows[r], cr));
            s.y.push_back(cell(rows[r], cp));
        }
        p.series.push_back(std::move(s));
    }
    for (const auto& [seed, p] : pr) {
        const fs::path out = plot_dir / ("pr_" + seed + ".svg");
        write_text(out, render_svg(p));
        written.push_back(out);
    }
    return written;
}

} // namespace debias
