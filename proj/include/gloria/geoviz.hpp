#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gloria/interp.hpp"

namespace gloria {

struct MapPoint {
  double lng = 0.0;
  double lat = 0.0;
  double raw = 0.0;
  double normalized = 0.0;
};

// One NMF component over the locations, min-max normalized per component.
struct MapLayer {
  std::vector<MapPoint> points;
  std::size_t component = 0;
  double min = 0.0;
  double max = 0.0;
};

// Row `component` of L against the location coordinates. A constant row normalizes to 0.5.
MapLayer make_map_layer(const NmfFactors& f, const std::vector<Location>& locations,
                        std::size_t component);

// "lng,lat,activation,normalized", one row per location in index order.
void export_map_csv(const NmfFactors& f, const std::vector<Location>& locations,
                    std::size_t component, const std::filesystem::path& path);

struct MapStyle {
  double radius = 0.01;  // in coordinate units
  std::string color = "#b2182b";
};

void export_map_svg(const MapLayer& layer, const std::filesystem::path& path, MapStyle style = {});

// k x R grid, rows and columns laid out in the given orders. Empty label lists fall back to
// "c<i>" and "r<j>".
void export_heatmap_svg(const Matrix& agg, const std::vector<std::size_t>& row_order,
                        const std::vector<std::size_t>& col_order,
                        const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::filesystem::path& path);

}  // namespace gloria
