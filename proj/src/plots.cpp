#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "janus/eval.hpp"

namespace janus::eval {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& file) {
  io::require_file(file);
  std::istringstream is(io::read_text(file));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw Error("empty table: " + file.string());
  return rows;
}

std::size_t column(const std::vector<std::string>& header, const std::string& name, const fs::path& file) {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw Error(file.string() + " has no column " + name);
  return static_cast<std::size_t>(it - header.begin());
}

class Svg {
 public:
  Svg(double w, double h) : w_(w), h_(h) {}
  void line(double x1, double y1, double x2, double y2, const std::string& stroke, double width = 1.0) {
    os_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\"" << num(y2)
        << "\" stroke=\"" << stroke << "\" stroke-width=\"" << num(width) << "\"/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& fill) {
    os_ << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w) << "\" height=\"" << num(h)
        << "\" fill=\"" << fill << "\"/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 12, const std::string& anchor = "start") {
    os_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\"" << size << "\" text-anchor=\"" << anchor
        << "\" font-family=\"sans-serif\">" << s << "</text>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    os_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) os_ << (i ? " " : "") << num(pts[i].first) << ',' << num(pts[i].second);
    os_ << "\"/>\n";
  }
  void save(const fs::path& file) const {
    std::ostringstream out;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(w_) << "\" height=\"" << num(h_)
        << "\" viewBox=\"0 0 " << num(w_) << ' ' << num(h_) << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << os_.str() << "</svg>\n";
    io::write_text(file, out.str());
  }

 private:
  double w_, h_;
  std::ostringstream os_;
};

// Plot frame mapping data coordinates into a fixed box.
struct Frame {
  double x0 = 60, y0 = 30, w = 520, h = 300;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  double px(double x) const { return x0 + (x - xmin) / (xmax - xmin) * w; }
  double py(double y) const { return y0 + h - (y - ymin) / (ymax - ymin) * h; }
  void axes(Svg& s, const std::string& xl, const std::string& yl) const {
    s.line(x0, y0 + h, x0 + w, y0 + h, "black");
    s.line(x0, y0, x0, y0 + h, "black");
    s.text(x0 + w / 2, y0 + h + 35, xl, 12, "middle");
    s.text(15, y0 + h / 2, yl, 12, "start");
    s.text(x0, y0 + h + 15, num(xmin), 10, "middle");
    s.text(x0 + w, y0 + h + 15, num(xmax), 10, "middle");
    s.text(x0 - 5, y0 + h, num(ymin), 10, "end");
    s.text(x0 - 5, y0 + 10, num(ymax), 10, "end");
  }
};

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

fs::path line_plot(const fs::path& csv, const std::string& xcol, const std::vector<std::string>& ycols,
                   const fs::path& out, const std::string& title, bool logy = false) {
  const auto rows = read_csv(csv);
  const auto xi = column(rows[0], xcol, csv);
  std::vector<std::size_t> yi;
  for (const auto& c : ycols) yi.push_back(column(rows[0], c, csv));
  Frame f;
  f.xmin = f.ymin = 1e300;
  f.xmax = f.ymax = -1e300;
  auto tr = [&](double y) { return logy ? std::log10(std::max(y, 1e-12)) : y; };
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const double x = std::stod(rows[r][xi]);
    f.xmin = std::min(f.xmin, x), f.xmax = std::max(f.xmax, x);
    for (auto i : yi) {
      if (rows[r][i].empty()) continue;
      const double y = tr(std::stod(rows[r][i]));
      f.ymin = std::min(f.ymin, y), f.ymax = std::max(f.ymax, y);
    }
  }
  if (!(f.xmax > f.xmin)) f.xmax = f.xmin + 1;
  if (!(f.ymax > f.ymin)) f.ymax = f.ymin + 1;
  Svg s(640, 400);
  s.text(320, 18, title, 14, "middle");
  f.axes(s, xcol, logy ? "log10" : "");
  for (std::size_t k = 0; k < yi.size(); ++k) {
    std::vector<std::pair<double, double>> pts;
    for (std::size_t r = 1; r < rows.size(); ++r)
      if (!rows[r][yi[k]].empty()) pts.emplace_back(f.px(std::stod(rows[r][xi])), f.py(tr(std::stod(rows[r][yi[k]]))));
    s.polyline(pts, kColors[k % 5]);
    s.text(f.x0 + f.w - 5, f.y0 + 15 + 15 * static_cast<double>(k), ycols[k], 11, "end");
    s.rect(f.x0 + f.w, f.y0 + 7 + 15 * static_cast<double>(k), 10, 8, kColors[k % 5]);
  }
  s.save(out);
  return out;
}

fs::path rebalance_chart(const fs::path& run, const fs::path& out) {
  const auto rec = sds::DistillRunRecord::parse_csv(io::read_text(run / "record.csv"));
  const auto h = rebalance_histogram(rec);
  double top = 1.0;
  for (std::size_t s = 0; s < kSectorCount; ++s) top = std::max({top, double(h.kept[s]), double(h.pruned[s])});
  Frame f;
  f.xmin = 0, f.xmax = 3, f.ymin = 0, f.ymax = top;
  Svg svg(640, 400);
  svg.text(320, 18, "pseudo-GT sectors: kept vs pruned", 14, "middle");
  f.axes(svg, "sector", "count");
  for (std::size_t s = 0; s < kSectorCount; ++s) {
    const double x = f.px(static_cast<double>(s) + 0.15);
    const double bw = f.w / 3 * 0.33;
    svg.rect(x, f.py(double(h.kept[s])), bw, f.py(0) - f.py(double(h.kept[s])), kColors[0]);
    svg.rect(x + bw, f.py(double(h.pruned[s])), bw, f.py(0) - f.py(double(h.pruned[s])), kColors[1]);
    svg.text(x + bw, f.y0 + f.h + 15, std::string(sector_name(static_cast<Sector>(s))), 11, "middle");
  }
  svg.text(f.x0 + f.w - 5, f.y0 + 15, "kept", 11, "end");
  svg.text(f.x0 + f.w - 5, f.y0 + 30, "pruned", 11, "end");
  svg.save(out);
  return out;
}

fs::path theta_heatmaps(const fs::path& run, const fs::path& out) {
  const auto theta = scene::load_texture(run / "theta.bin");
  const double cell = 12, gap = 30;
  Svg svg(3 * (theta.azimuth_bins * cell + gap) + gap, theta.height_bins * cell + 70);
  const char* names[] = {"body", "face", "tail"};
  for (int c = 0; c < theta.channels && c < 3; ++c) {
    double mx = 1e-12;
    for (int a = 0; a < theta.azimuth_bins; ++a)
      for (int hh = 0; hh < theta.height_bins; ++hh) mx = std::max(mx, std::abs(theta.at(a, hh, c)));
    const double ox = gap + c * (theta.azimuth_bins * cell + gap);
    svg.text(ox + theta.azimuth_bins * cell / 2, 20, std::string(names[c]) + " (max " + num(mx) + ")", 12, "middle");
    for (int a = 0; a < theta.azimuth_bins; ++a)
      for (int hh = 0; hh < theta.height_bins; ++hh) {
        const int g = static_cast<int>(std::lround(255.0 * (1.0 - std::clamp(std::abs(theta.at(a, hh, c)) / mx, 0.0, 1.0))));
        char col[16];
        std::snprintf(col, sizeof col, "#%02x%02x%02x", g, g, g);
        svg.rect(ox + a * cell, 30 + hh * cell, cell, cell, col);
      }
    svg.text(ox, 30 + theta.height_bins * cell + 15, "-180", 10, "start");
    svg.text(ox + theta.azimuth_bins * cell, 30 + theta.height_bins * cell + 15, "180", 10, "end");
  }
  svg.save(out);
  return out;
}

}  // namespace

std::vector<fs::path> emit_plots(const fs::path& run_dir) {
  io::require_file(run_dir / "manifest.json");
  const auto m = io::read_json(run_dir / "manifest.json");
  const std::string kind = m.value("kind", "");
  const fs::path out = run_dir / "plots";
  std::vector<fs::path> files;
  auto ensure = [&] { fs::create_directories(out); };
  if (kind == "fokker-planck") {
    io::require_file(run_dir / "density.csv");
    ensure();
    files.push_back(line_plot(run_dir / "density.csv", "x", {"p_data", "p_forward_T", "p_reverse_0"},
                              out / "density_overlay.svg", "density recovery"));
  } else if (kind == "train") {
    io::require_file(run_dir / "loss_trace.csv");
    io::require_file(run_dir / "attention.csv");
    ensure();
    files.push_back(line_plot(run_dir / "loss_trace.csv", "step", {"loss", "smoothed"}, out / "loss.svg",
                              "training loss", true));
    files.push_back(line_plot(run_dir / "attention.csv", "prompt_length", {"viewpoint_mass"},
                              out / "attention_mass.svg", "viewpoint-token attention vs prompt length"));
  } else if (kind == "distill") {
    io::require_file(run_dir / "record.csv");
    io::require_file(run_dir / "theta.bin");
    ensure();
    files.push_back(rebalance_chart(run_dir, out / "rebalance.svg"));
    files.push_back(theta_heatmaps(run_dir, out / "theta.svg"));
  } else if (kind == "ablate") {
    io::require_file(run_dir / "summary.csv");
    ensure();
    const auto rows = read_csv(run_dir / "summary.csv");
    const auto ai = column(rows[0], "arm", run_dir / "summary.csv");
    const auto fi = column(rows[0], "fired_fraction", run_dir / "summary.csv");
    Frame f;
    f.xmin = 0, f.xmax = static_cast<double>(rows.size() - 1), f.ymin = 0, f.ymax = 1;
    Svg svg(640, 400);
    svg.text(320, 18, "Janus proxy fired fraction by arm", 14, "middle");
    f.axes(svg, "arm", "fraction");
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const double v = std::stod(rows[r][fi]);
      const double x = f.px(static_cast<double>(r - 1) + 0.2);
      svg.rect(x, f.py(v), f.w / f.xmax * 0.6, f.py(0) - f.py(v), kColors[0]);
      svg.text(x + f.w / f.xmax * 0.3, f.y0 + f.h + 15, rows[r][ai], 11, "middle");
    }
    svg.save(out / "ablation.svg");
    files.push_back(out / "ablation.svg");
  } else {
    throw Error("run directory kind '" + kind + "' has no plots");
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace janus::eval
