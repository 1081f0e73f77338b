#include "gloria/geoviz.hpp"

#include <algorithm>
#include <fstream>

#include "gloria/errors.hpp"

namespace gloria {

namespace {

double normalize_value(double v, double lo, double hi) {
  if (!(hi > lo)) return 0.5;
  return std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  return os;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += ch;
    }
  }
  return out;
}

void check_permutation(const std::vector<std::size_t>& order, std::size_t n, const char* what) {
  std::vector<bool> seen(n, false);
  bool ok = order.size() == n;
  for (std::size_t i : order) {
    if (!ok) break;
    if (i >= n || seen[i]) ok = false;
    else seen[i] = true;
  }
  if (!ok) {
    throw InputError(std::string("export_heatmap_svg: ") + what + " order is not a permutation of 0.." +
                     std::to_string(n == 0 ? 0 : n - 1));
  }
}

}  // namespace

MapLayer make_map_layer(const NmfFactors& f, const std::vector<Location>& locations,
                        std::size_t component) {
  if (component >= f.l.rows()) {
    throw InputError("component " + std::to_string(component) + " out of range (k = " +
                     std::to_string(f.l.rows()) + ")");
  }
  if (locations.size() != f.l.cols()) {
    throw DimensionError("map layer: " + std::to_string(locations.size()) + " locations for " +
                         std::to_string(f.l.cols()) + " columns of L");
  }
  MapLayer layer;
  layer.component = component;
  const auto row = f.l.row(component);
  if (!row.empty()) {
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    layer.min = *lo;
    layer.max = *hi;
  }
  for (std::size_t i = 0; i < locations.size(); ++i) {
    layer.points.push_back({locations[i].c.lng, locations[i].c.lat, row[i],
                            normalize_value(row[i], layer.min, layer.max)});
  }
  return layer;
}

void export_map_csv(const NmfFactors& f, const std::vector<Location>& locations,
                    std::size_t component, const std::filesystem::path& path) {
  const MapLayer layer = make_map_layer(f, locations, component);
  std::ofstream os = open_out(path);
  os << "lng,lat,activation,normalized\n";
  for (const auto& p : layer.points) {
    os << fmt_full(p.lng) << ',' << fmt_full(p.lat) << ',' << fmt_full(p.raw) << ','
       << fmt_full(p.normalized) << '\n';
  }
}

void export_map_svg(const MapLayer& layer, const std::filesystem::path& path, MapStyle style) {
  if (layer.points.empty()) throw InputError("export_map_svg: layer has no points");
  double lng_lo = layer.points[0].lng, lng_hi = lng_lo;
  double lat_lo = layer.points[0].lat, lat_hi = lat_lo;
  for (const auto& p : layer.points) {
    lng_lo = std::min(lng_lo, p.lng);
    lng_hi = std::max(lng_hi, p.lng);
    lat_lo = std::min(lat_lo, p.lat);
    lat_hi = std::max(lat_hi, p.lat);
  }
  // A single point or a line of points still gets a visible canvas.
  const double min_span = std::max(4.0 * style.radius, 1e-6);
  auto widen = [&](double& lo, double& hi) {
    if (hi - lo < min_span) {
      const double mid = 0.5 * (lo + hi);
      lo = mid - 0.5 * min_span;
      hi = mid + 0.5 * min_span;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  };
  widen(lng_lo, lng_hi);
  widen(lat_lo, lat_hi);

  std::ofstream os = open_out(path);
  // North up: SVG y grows downwards, so y = -lat.
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"" << fmt_fixed6(lng_lo) << ' '
     << fmt_fixed6(-lat_hi) << ' ' << fmt_fixed6(lng_hi - lng_lo) << ' '
     << fmt_fixed6(lat_hi - lat_lo) << "\" width=\"600\" height=\"600\" "
     << "preserveAspectRatio=\"xMidYMid meet\">\n"
     << "<title>component " << layer.component << "</title>\n"
     << "<rect x=\"" << fmt_fixed6(lng_lo) << "\" y=\"" << fmt_fixed6(-lat_hi) << "\" width=\""
     << fmt_fixed6(lng_hi - lng_lo) << "\" height=\"" << fmt_fixed6(lat_hi - lat_lo)
     << "\" fill=\"#ffffff\"/>\n";
  const std::string color = xml_escape(style.color);
  for (const auto& p : layer.points) {
    os << "<circle cx=\"" << fmt_fixed6(p.lng) << "\" cy=\"" << fmt_fixed6(-p.lat) << "\" r=\""
       << fmt_fixed6(style.radius) << "\" fill=\"" << color << "\" fill-opacity=\""
       << fmt_fixed6(std::max(p.normalized, 0.05)) << "\"/>\n";
  }
  os << "</svg>\n";
}

void export_heatmap_svg(const Matrix& agg, const std::vector<std::size_t>& row_order,
                        const std::vector<std::size_t>& col_order,
                        const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::filesystem::path& path) {
  const std::size_t k = agg.rows();
  const std::size_t r = agg.cols();
  if (k == 0 || r == 0) throw InputError("export_heatmap_svg: empty matrix");
  check_permutation(row_order, k, "row");
  check_permutation(col_order, r, "column");
  if (!row_labels.empty() && row_labels.size() != k) {
    throw InputError("export_heatmap_svg: " + std::to_string(row_labels.size()) +
                     " row labels for " + std::to_string(k) + " rows");
  }
  if (!col_labels.empty() && col_labels.size() != r) {
    throw InputError("export_heatmap_svg: " + std::to_string(col_labels.size()) +
                     " column labels for " + std::to_string(r) + " columns");
  }
  const auto vals = agg.values();
  const auto [lo, hi] = std::minmax_element(vals.begin(), vals.end());

  constexpr double cell = 24.0;
  constexpr double left = 60.0;
  constexpr double top = 60.0;
  const double width = left + cell * static_cast<double>(r) + 10.0;
  const double height = top + cell * static_cast<double>(k) + 10.0;

  auto label = [](const std::vector<std::string>& labels, std::size_t i, const char* prefix) {
    return labels.empty() ? prefix + std::to_string(i) : labels[i];
  };

  std::ofstream os = open_out(path);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << fmt_fixed6(width) << ' '
     << fmt_fixed6(height) << "\" width=\"" << fmt_fixed6(width) << "\" height=\""
     << fmt_fixed6(height) << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  for (std::size_t ci = 0; ci < r; ++ci) {
    const double x = left + cell * (static_cast<double>(ci) + 0.5);
    os << "<text class=\"col-label\" x=\"" << fmt_fixed6(x) << "\" y=\"" << fmt_fixed6(top - 6.0)
       << "\" text-anchor=\"middle\">" << xml_escape(label(col_labels, col_order[ci], "r"))
       << "</text>\n";
  }
  for (std::size_t ri = 0; ri < k; ++ri) {
    const double y = top + cell * (static_cast<double>(ri) + 0.5);
    os << "<text class=\"row-label\" x=\"" << fmt_fixed6(left - 6.0) << "\" y=\""
       << fmt_fixed6(y + 3.0) << "\" text-anchor=\"end\">"
       << xml_escape(label(row_labels, row_order[ri], "c")) << "</text>\n";
  }
  for (std::size_t ri = 0; ri < k; ++ri) {
    for (std::size_t ci = 0; ci < r; ++ci) {
      const double v = agg(row_order[ri], col_order[ci]);
      os << "<rect class=\"cell\" x=\"" << fmt_fixed6(left + cell * static_cast<double>(ci))
         << "\" y=\"" << fmt_fixed6(top + cell * static_cast<double>(ri)) << "\" width=\""
         << fmt_fixed6(cell) << "\" height=\"" << fmt_fixed6(cell)
         << "\" fill=\"#08306b\" fill-opacity=\"" << fmt_fixed6(normalize_value(v, *lo, *hi))
         << "\"/>\n";
    }
  }
  os << "</svg>\n";
}

}  // namespace gloria
