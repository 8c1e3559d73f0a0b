#include "rae/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "rae/error.hpp"

namespace rae {

namespace {
const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
}

void write_line_chart(const std::string& path, const std::string& title,
                      const std::vector<ChartSeries>& series, const std::string& x_label,
                      const std::string& y_label) {
  const double width = 720, height = 420;
  const double left = 64, right = 24, top = 40, bottom = 48;
  const double plot_w = width - left - right, plot_h = height - top - bottom;

  std::size_t max_n = 0;
  double y_min = 0.0, y_max = 1e-12;
  for (const auto& s : series) {
    max_n = std::max(max_n, s.values.size());
    for (double v : s.values) {
      y_min = std::min(y_min, v);
      y_max = std::max(y_max, v);
    }
  }
  if (max_n < 2) max_n = 2;
  if (y_max <= y_min) y_max = y_min + 1.0;

  auto sx = [&](double i) { return left + plot_w * i / static_cast<double>(max_n - 1); };
  auto sy = [&](double v) { return top + plot_h * (1.0 - (v - y_min) / (y_max - y_min)); };

  std::ofstream out(path);
  if (!out) throw IoError("cannot write chart '" + path + "'");
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
      << "' viewBox='0 0 " << width << " " << height << "'>\n"
      << "<rect width='100%' height='100%' fill='white'/>\n"
      << "<text x='" << width / 2 << "' y='24' text-anchor='middle' font-size='16' "
      << "font-family='sans-serif'>" << title << "</text>\n";

  // Axes and gridlines.
  out << "<line x1='" << left << "' y1='" << top << "' x2='" << left << "' y2='" << top + plot_h
      << "' stroke='black'/>\n"
      << "<line x1='" << left << "' y1='" << top + plot_h << "' x2='" << left + plot_w << "' y2='"
      << top + plot_h << "' stroke='black'/>\n";
  for (int g = 0; g <= 4; ++g) {
    const double v = y_min + (y_max - y_min) * g / 4.0;
    const double y = sy(v);
    out << "<line x1='" << left << "' y1='" << y << "' x2='" << left + plot_w << "' y2='" << y
        << "' stroke='#dddddd'/>\n"
        << "<text x='" << left - 6 << "' y='" << y + 4
        << "' text-anchor='end' font-size='11' font-family='sans-serif'>";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    out << buf << "</text>\n";
  }
  out << "<text x='" << left + plot_w / 2 << "' y='" << height - 12
      << "' text-anchor='middle' font-size='12' font-family='sans-serif'>" << x_label << "</text>\n"
      << "<text x='16' y='" << top + plot_h / 2
      << "' text-anchor='middle' font-size='12' font-family='sans-serif' transform='rotate(-90 16 "
      << top + plot_h / 2 << ")'>" << y_label << "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& sr = series[s];
    if (sr.values.empty()) continue;
    out << "<polyline fill='none' stroke='" << kPalette[s % 6] << "' stroke-width='1.5' points='";
    for (std::size_t i = 0; i < sr.values.size(); ++i)
      out << sx(static_cast<double>(i)) << "," << sy(sr.values[i]) << " ";
    out << "'/>\n";
    const double ly = top + 16 + 16 * static_cast<double>(s);
    out << "<line x1='" << left + plot_w - 130 << "' y1='" << ly << "' x2='" << left + plot_w - 110
        << "' y2='" << ly << "' stroke='" << kPalette[s % 6] << "' stroke-width='2'/>\n"
        << "<text x='" << left + plot_w - 104 << "' y='" << ly + 4
        << "' font-size='11' font-family='sans-serif'>" << sr.name << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace rae
