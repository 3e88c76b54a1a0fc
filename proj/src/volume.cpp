#include "bitr/volume.hpp"

namespace bitr {

namespace {

void check_box(const Grid& g, const std::array<Index, 3>& origin, const Grid& extent) {
  const std::array<Index, 3> dims{g.x, g.y, g.z}, ext{extent.x, extent.y, extent.z};
  for (int a = 0; a < 3; ++a)
    if (origin[a] < 0 || ext[a] <= 0 || origin[a] + ext[a] > dims[a])
      throw ShapeError("crop box does not fit inside the volume on spatial axis " + std::to_string(a));
}

}  // namespace

Volume4D crop(const Volume4D& v, const std::array<Index, 3>& origin, const Grid& extent) {
  check_box(v.grid, origin, extent);
  Volume4D out(extent, v.channels);
  out.spacing = v.spacing;
  out.normalization = v.normalization;
  for (int c = 0; c < v.channels; ++c)
    for (Index x = 0; x < extent.x; ++x)
      for (Index y = 0; y < extent.y; ++y)
        for (Index z = 0; z < extent.z; ++z)
          out.at(c, extent.offset(x, y, z)) = v.at(c, v.grid.offset(origin[0] + x, origin[1] + y, origin[2] + z));
  return out;
}

SegmentationMask crop(const SegmentationMask& m, const std::array<Index, 3>& origin, const Grid& extent) {
  check_box(m.grid, origin, extent);
  SegmentationMask out(extent);
  for (Index x = 0; x < extent.x; ++x)
    for (Index y = 0; y < extent.y; ++y)
      for (Index z = 0; z < extent.z; ++z)
        out.labels[static_cast<std::size_t>(extent.offset(x, y, z))] =
            m.labels[static_cast<std::size_t>(m.grid.offset(origin[0] + x, origin[1] + y, origin[2] + z))];
  return out;
}

Volume4D pad_to_multiple(const Volume4D& v, Index multiple, std::array<Index, 3>& origin) {
  auto up = [multiple](Index n) { return (n + multiple - 1) / multiple * multiple; };
  const Grid padded{up(v.grid.x), up(v.grid.y), up(v.grid.z)};
  origin = {(padded.x - v.grid.x) / 2, (padded.y - v.grid.y) / 2, (padded.z - v.grid.z) / 2};
  Volume4D out(padded, v.channels);
  out.spacing = v.spacing;
  out.normalization = v.normalization;
  for (int c = 0; c < v.channels; ++c)
    for (Index x = 0; x < v.grid.x; ++x)
      for (Index y = 0; y < v.grid.y; ++y)
        for (Index z = 0; z < v.grid.z; ++z)
          out.at(c, padded.offset(origin[0] + x, origin[1] + y, origin[2] + z)) = v.at(c, v.grid.offset(x, y, z));
  return out;
}

}  // namespace bitr
