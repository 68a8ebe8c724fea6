#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace lensdyn::svg {

inline std::string escape(std::string_view s) {
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

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Series {
  std::string name;
  std::vector<double> values;
};

inline constexpr const char* kPalette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"};

namespace detail {

inline std::string open(double w, double h, std::string_view title) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) +
         "\" height=\"" + num(h) + "\" viewBox=\"0 0 " + num(w) + " " + num(h) +
         "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
         "<text x=\"" + num(w / 2) + "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" + escape(title) +
         "</text>\n";
}

inline std::string text(double x, double y, std::string_view s, std::string_view anchor = "middle",
                        std::string_view extra = {}) {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" text-anchor=\"" + std::string(anchor) + "\"" +
         std::string(extra) + ">" + escape(s) + "</text>\n";
}

}  // namespace detail

/// Line chart of equally spaced samples; y range [y_min, y_max].
inline std::string line_chart(std::string_view title, std::string_view x_label, std::string_view y_label,
                              const std::vector<Series>& series, double y_min = 0.0, double y_max = 1.0) {
  const double W = 640, H = 400, left = 60, right = 150, top = 32, bottom = 48;
  const double pw = W - left - right, ph = H - top - bottom;
  std::size_t n = 0;
  for (const auto& s : series) n = std::max(n, s.values.size());
  if (!(y_max > y_min)) y_max = y_min + 1.0;
  auto sx = [&](std::size_t i) { return left + (n > 1 ? pw * static_cast<double>(i) / static_cast<double>(n - 1) : pw / 2); };
  auto sy = [&](double v) { return top + ph * (1.0 - (std::clamp(v, y_min, y_max) - y_min) / (y_max - y_min)); };

  std::string out = detail::open(W, H, title);
  out += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = y_min + (y_max - y_min) * t / 4.0;
    out += detail::text(left - 6, sy(v) + 4, num(v), "end");
    out += "<line x1=\"" + num(left) + "\" x2=\"" + num(left + pw) + "\" y1=\"" + num(sy(v)) + "\" y2=\"" + num(sy(v)) +
           "\" stroke=\"#ddd\"/>\n";
  }
  const std::size_t step = std::max<std::size_t>(1, n / 10);
  for (std::size_t i = 0; i < n; i += step) out += detail::text(sx(i), top + ph + 14, std::to_string(i));
  out += detail::text(left + pw / 2, H - 10, x_label);
  out += detail::text(14, top + ph / 2, y_label, "middle",
                      " transform=\"rotate(-90 14 " + num(top + ph / 2) + ")\"");
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kPalette[k % std::size(kPalette)];
    std::string pts;
    for (std::size_t i = 0; i < series[k].values.size(); ++i)
      pts += (i ? " " : "") + num(sx(i)) + "," + num(sy(series[k].values[i]));
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    const double ly = top + 12 + 16 * static_cast<double>(k);
    out += "<line x1=\"" + num(W - right + 10) + "\" x2=\"" + num(W - right + 30) + "\" y1=\"" + num(ly - 4) +
           "\" y2=\"" + num(ly - 4) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    out += detail::text(W - right + 34, ly, series[k].name, "start");
  }
  return out + "</svg>\n";
}

/// Diverging heatmap, rows top to bottom; colour saturates at |v| = scale.
inline std::string heatmap(std::string_view title, const std::vector<std::string>& row_labels,
                           const std::vector<std::string>& col_labels, const std::vector<std::vector<double>>& values,
                           std::string_view x_label) {
  double scale = 1e-12;
  for (const auto& r : values)
    for (double v : r) scale = std::max(scale, std::abs(v));
  const double cell = 26, left = 110, top = 32;
  const double W = left + cell * static_cast<double>(col_labels.size()) + 90;
  const double H = top + cell * static_cast<double>(row_labels.size()) + 48;
  std::string out = detail::open(W, H, title);
  for (std::size_t r = 0; r < values.size(); ++r) {
    out += detail::text(left - 6, top + cell * (r + 0.5) + 4, row_labels[r], "end");
    for (std::size_t c = 0; c < values[r].size(); ++c) {
      const double t = std::clamp(values[r][c] / scale, -1.0, 1.0);
      const int fade = static_cast<int>(std::lround(255 * (1.0 - std::abs(t))));
      char color[16];
      if (t >= 0) std::snprintf(color, sizeof color, "#ff%02x%02x", fade, fade);
      else std::snprintf(color, sizeof color, "#%02x%02xff", fade, fade);
      out += "<rect x=\"" + num(left + cell * c) + "\" y=\"" + num(top + cell * r) + "\" width=\"" + num(cell) +
             "\" height=\"" + num(cell) + "\" fill=\"" + color + "\"><title>" + escape(num(values[r][c])) +
             "</title></rect>\n";
    }
  }
  for (std::size_t c = 0; c < col_labels.size(); ++c)
    out += detail::text(left + cell * (c + 0.5), top + cell * row_labels.size() + 14, col_labels[c]);
  out += detail::text(left + cell * col_labels.size() / 2, H - 8, x_label);
  out += detail::text(W - 80, top + 12, "max |v| " + num(scale), "start");
  return out + "</svg>\n";
}

/// Grouped bars; every series has one value per category, range [0, 1].
inline std::string bar_chart(std::string_view title, const std::vector<std::string>& categories,
                             const std::vector<Series>& series) {
  const double W = 560, H = 360, left = 50, top = 32, bottom = 40, right = 140;
  const double pw = W - left - right, ph = H - top - bottom;
  const double group_w = pw / std::max<std::size_t>(1, categories.size());
  const double bar_w = group_w * 0.8 / std::max<std::size_t>(1, series.size());
  std::string out = detail::open(W, H, title);
  out += "<line x1=\"" + num(left) + "\" x2=\"" + num(left + pw) + "\" y1=\"" + num(top + ph) + "\" y2=\"" +
         num(top + ph) + "\" stroke=\"#444\"/>\n";
  for (int t = 0; t <= 4; ++t) out += detail::text(left - 6, top + ph * (1 - t / 4.0) + 4, num(t / 4.0), "end");
  for (std::size_t c = 0; c < categories.size(); ++c) {
    out += detail::text(left + group_w * (c + 0.5), top + ph + 16, categories[c]);
    for (std::size_t k = 0; k < series.size(); ++k) {
      const double v = c < series[k].values.size() ? std::clamp(series[k].values[c], 0.0, 1.0) : 0.0;
      out += "<rect x=\"" + num(left + group_w * c + group_w * 0.1 + bar_w * k) + "\" y=\"" + num(top + ph * (1 - v)) +
             "\" width=\"" + num(bar_w) + "\" height=\"" + num(ph * v) + "\" fill=\"" +
             kPalette[k % std::size(kPalette)] + "\"/>\n";
    }
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double ly = top + 12 + 16 * static_cast<double>(k);
    out += "<rect x=\"" + num(W - right + 10) + "\" y=\"" + num(ly - 9) + "\" width=\"12\" height=\"10\" fill=\"" +
           kPalette[k % std::size(kPalette)] + "\"/>\n";
    out += detail::text(W - right + 28, ly, series[k].name, "start");
  }
  return out + "</svg>\n";
}

}  // namespace lensdyn::svg
