#pragma once

// Plain-string SVG figures: histogram grids, line charts, strip charts and
// paired heatmaps. Output depends only on the inputs, so reruns are stable.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attnscope/tensor.hpp"

namespace attnscope::svg {

inline std::string num(double v, int precision = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

inline std::string escape(const std::string& s) {
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

class Document {
 public:
  Document(double width, double height) : width_(width), height_(height) {}

  Document& rect(double x, double y, double w, double h, const std::string& fill,
                 const std::string& extra = {}) {
    body_ << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\"" << num(w)
          << "\" height=\"" << num(h) << "\" fill=\"" << fill << "\"" << extra << "/>\n";
    return *this;
  }

  Document& line(double x1, double y1, double x2, double y2, const std::string& stroke,
                 double width = 1.0) {
    body_ << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2)
          << "\" y2=\"" << num(y2) << "\" stroke=\"" << stroke << "\" stroke-width=\""
          << num(width) << "\"/>\n";
    return *this;
  }

  Document& polyline(const std::vector<std::pair<double, double>>& pts, const std::string& stroke) {
    body_ << "<polyline fill=\"none\" stroke=\"" << stroke << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i)
      body_ << (i ? " " : "") << num(pts[i].first) << "," << num(pts[i].second);
    body_ << "\"/>\n";
    return *this;
  }

  Document& circle(double cx, double cy, double r, const std::string& fill) {
    body_ << "<circle cx=\"" << num(cx) << "\" cy=\"" << num(cy) << "\" r=\"" << num(r)
          << "\" fill=\"" << fill << "\"/>\n";
    return *this;
  }

  Document& text(double x, double y, const std::string& s, int size = 10,
                 const std::string& anchor = "middle", const std::string& extra = {}) {
    body_ << "<text x=\"" << num(x) << "\" y=\"" << num(y) << "\" font-size=\"" << size
          << "\" text-anchor=\"" << anchor << "\"" << extra << ">" << escape(s) << "</text>\n";
    return *this;
  }

  std::string str() const {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width_, 0)
       << "\" height=\"" << num(height_, 0) << "\" viewBox=\"0 0 " << num(width_, 0) << " "
       << num(height_, 0) << "\" font-family=\"sans-serif\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << body_.str() << "</svg>\n";
    return os.str();
  }

 private:
  double width_, height_;
  std::ostringstream body_;
};

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  return colors[i % 8];
}

// White-to-blue ramp for v in [0, 1].
inline std::string ramp(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(255 - v * (255 - 8)));
  const int g = static_cast<int>(std::lround(255 - v * (255 - 48)));
  const int b = static_cast<int>(std::lround(255 - v * (255 - 107)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

struct HistogramPanel {
  std::string title;
  int first_offset = 0;
  std::vector<double> display;  // values in [0, 1]
};

/// Grid of bar charts, one panel per head, x spanning the offset range.
inline std::string histogram_grid(const std::string& title,
                                  const std::vector<HistogramPanel>& panels,
                                  std::size_t columns = 4) {
  columns = std::max<std::size_t>(1, std::min(columns, std::max<std::size_t>(panels.size(), 1)));
  const std::size_t rows = (panels.size() + columns - 1) / columns;
  const double pw = 260, ph = 150, margin = 30, top = 40;
  const double width = columns * (pw + margin) + margin;
  Document doc(width, top + rows * (ph + margin) + margin);
  doc.text(width / 2, 22, title, 14);
  for (std::size_t k = 0; k < panels.size(); ++k) {
    const auto& p = panels[k];
    const double x0 = margin + (k % columns) * (pw + margin);
    const double y0 = top + (k / columns) * (ph + margin);
    const double plot_h = ph - 30;
    doc.rect(x0, y0, pw, plot_h, "#fafafa", " stroke=\"#999\"");
    const std::size_t n = p.display.size();
    const double bw = n ? pw / static_cast<double>(n) : pw;
    for (std::size_t b = 0; b < n; ++b) {
      const double h = std::clamp(p.display[b], 0.0, 1.0) * (plot_h - 4);
      if (h > 0) doc.rect(x0 + b * bw, y0 + plot_h - h, bw, h, "#1f77b4");
    }
    if (n) {
      const double zero_x = x0 + (static_cast<double>(-p.first_offset) + 0.5) * bw;
      doc.line(zero_x, y0, zero_x, y0 + plot_h, "#d62728", 0.5);
      doc.text(x0, y0 + plot_h + 12, std::to_string(p.first_offset), 9, "start");
      doc.text(x0 + pw, y0 + plot_h + 12,
               std::to_string(p.first_offset + static_cast<int>(n) - 1), 9, "end");
      doc.text(zero_x, y0 + plot_h + 12, "0", 9);
    }
    doc.text(x0 + pw / 2, y0 + ph - 4, p.title, 11);
  }
  return doc.str();
}

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

inline std::pair<double, double> value_range(const std::vector<Series>& series, bool include_zero) {
  double lo = include_zero ? 0.0 : 1e300, hi = include_zero ? 0.0 : -1e300;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  if (lo > hi) return {0.0, 1.0};
  if (hi - lo < 1e-12) {
    lo -= 1.0;
    hi += 1.0;
  }
  return {lo, hi};
}

/// Line chart of several series over shared axes with a zero line.
inline std::string line_chart(const std::string& title, const std::string& x_label,
                              const std::string& y_label, const std::vector<Series>& series) {
  const double w = 640, h = 360, left = 70, right = 150, top = 40, bottom = 50;
  Document doc(w, h);
  doc.text(w / 2, 22, title, 14);
  double xlo = 1e300, xhi = -1e300;
  for (const auto& s : series)
    for (const auto& pt : s.points) {
      xlo = std::min(xlo, pt.first);
      xhi = std::max(xhi, pt.first);
    }
  if (xlo > xhi) xlo = 0, xhi = 1;
  if (xhi == xlo) xhi = xlo + 1;
  auto [ylo, yhi] = value_range(series, true);
  const double pw = w - left - right, ph = h - top - bottom;
  auto sx = [&](double x) { return left + (x - xlo) / (xhi - xlo) * pw; };
  auto sy = [&](double y) { return top + (yhi - y) / (yhi - ylo) * ph; };
  doc.rect(left, top, pw, ph, "none", " stroke=\"#999\"");
  doc.line(left, sy(0), left + pw, sy(0), "#888", 0.5);
  doc.text(left - 6, sy(yhi) + 4, num(yhi), 9, "end");
  doc.text(left - 6, sy(ylo) + 4, num(ylo), 9, "end");
  doc.text(left - 6, sy(0) + 4, "0", 9, "end");
  std::vector<double> xs;
  for (const auto& s : series)
    for (const auto& pt : s.points) xs.push_back(pt.first);
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  for (double x : xs) doc.text(sx(x), top + ph + 14, num(x, 0), 9);
  doc.text(left + pw / 2, h - 10, x_label, 11);
  doc.text(16, top + ph / 2, y_label, 11, "middle",
           " transform=\"rotate(-90 16 " + num(top + ph / 2) + ")\"");
  for (std::size_t k = 0; k < series.size(); ++k) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& [x, y] : series[k].points) pts.emplace_back(sx(x), sy(y));
    doc.polyline(pts, palette(k));
    for (const auto& [x, y] : pts) doc.circle(x, y, 2.5, palette(k));
    doc.rect(w - right + 15, top + 10 + 18 * k, 12, 12, palette(k));
    doc.text(w - right + 32, top + 20 + 18 * k, series[k].name, 10, "start");
  }
  return doc.str();
}

struct Category {
  std::string label;
  std::vector<double> values;
};

/// One column per category: individual values as dots plus a median tick.
inline std::string strip_chart(const std::string& title, const std::string& y_label,
                               const std::vector<Category>& cats, double ylo = -1.0,
                               double yhi = 1.0) {
  const double col = 44, left = 70, top = 40, bottom = 50, ph = 300;
  const double w = left + col * std::max<std::size_t>(cats.size(), 1) + 30;
  const double h = top + ph + bottom;
  Document doc(w, h);
  doc.text(w / 2, 22, title, 14);
  auto sy = [&](double y) { return top + (yhi - std::clamp(y, ylo, yhi)) / (yhi - ylo) * ph; };
  doc.rect(left, top, col * cats.size(), ph, "none", " stroke=\"#999\"");
  for (double tick : {ylo, 0.0, 0.5, yhi}) {
    if (tick < ylo || tick > yhi) continue;
    doc.line(left, sy(tick), left + col * cats.size(), sy(tick), "#ddd", 0.5);
    doc.text(left - 6, sy(tick) + 4, num(tick), 9, "end");
  }
  doc.text(16, top + ph / 2, y_label, 11, "middle",
           " transform=\"rotate(-90 16 " + num(top + ph / 2) + ")\"");
  for (std::size_t c = 0; c < cats.size(); ++c) {
    const double cx = left + col * (c + 0.5);
    const auto& vals = cats[c].values;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double jitter = vals.size() > 1
                                ? (static_cast<double>(i) / static_cast<double>(vals.size() - 1) - 0.5) * col * 0.5
                                : 0.0;
      doc.circle(cx + jitter, sy(vals[i]), 2.5, "#1f77b4");
    }
    if (!vals.empty()) {
      auto sorted = vals;
      std::sort(sorted.begin(), sorted.end());
      const std::size_t n = sorted.size();
      const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
      doc.line(cx - col * 0.35, sy(med), cx + col * 0.35, sy(med), "#d62728", 2);
    }
    doc.text(cx, top + ph + 14, cats[c].label, 9);
  }
  return doc.str();
}

struct Heatmap {
  std::string title;
  Tensor values;  // rows: attending token, cols: attended token
};

/// Heatmaps stacked vertically with shared token labels. Each map is scaled
/// by its own maximum unless `shared_scale` is set.
inline std::string heatmap_stack(const std::string& title, const std::vector<std::string>& tokens,
                                 const std::vector<Heatmap>& maps, bool shared_scale) {
  const std::size_t n = tokens.size();
  const double cell = std::clamp(360.0 / std::max<std::size_t>(n, 1), 6.0, 40.0);
  const double left = 90, top = 40, label_h = 80, gap = 40;
  const double map_side = cell * n;
  const double w = left + map_side + 150;
  const double h = top + maps.size() * (map_side + label_h + gap);
  Document doc(w, h);
  doc.text(w / 2, 22, title, 14);
  double global = 0.0;
  for (const auto& m : maps)
    for (double v : m.values.data()) global = std::max(global, v);
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const auto& m = maps[k];
    double local = 0.0;
    for (double v : m.values.data()) local = std::max(local, v);
    const double scale = shared_scale ? global : local;
    const double y0 = top + k * (map_side + label_h + gap) + 20;
    doc.text(left + map_side / 2, y0 - 6, m.title, 12);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double v = m.values.at(i, j);
        doc.rect(left + j * cell, y0 + i * cell, cell, cell, ramp(scale > 0 ? v / scale : 0.0));
      }
    doc.rect(left, y0, map_side, map_side, "none", " stroke=\"#666\"");
    const int fs = static_cast<int>(std::clamp(cell * 0.8, 6.0, 11.0));
    for (std::size_t i = 0; i < n; ++i) {
      doc.text(left - 4, y0 + (i + 0.5) * cell + fs / 3.0, tokens[i], fs, "end");
      const double tx = left + (i + 0.5) * cell;
      const double ty = y0 + map_side + 6;
      doc.text(tx, ty, tokens[i], fs, "start",
               " transform=\"rotate(60 " + num(tx) + " " + num(ty) + ")\"");
    }
    const double lx = left + map_side + 20;
    for (int s = 0; s < 10; ++s)
      doc.rect(lx, y0 + s * 12, 14, 12, ramp(1.0 - s / 9.0));
    doc.text(lx + 20, y0 + 9, num(scale, 3), 9, "start");
    doc.text(lx + 20, y0 + 117, "0", 9, "start");
    doc.text(lx, y0 + 136, shared_scale ? "shared scale" : "per-map scale", 9, "start");
  }
  return doc.str();
}

}  // namespace attnscope::svg
