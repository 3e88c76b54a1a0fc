#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "bitr/nifti.hpp"

namespace bitr::testing {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

/// Concentric tumour phantom: necrotic core (1) inside enhancing rim (4)
/// inside edema (2). Each modality sees the labels with a different
/// contrast plus Gaussian noise.
inline SegmentationMask phantom_label(Grid g, double radius) {
  SegmentationMask m(g);
  const double cx = (g.x - 1) / 2.0, cy = (g.y - 1) / 2.0, cz = (g.z - 1) / 2.0;
  for (Index x = 0; x < g.x; ++x)
    for (Index y = 0; y < g.y; ++y)
      for (Index z = 0; z < g.z; ++z) {
        const double r = std::hypot(x - cx, y - cy, z - cz);
        int ext = r <= 0.35 * radius ? 1 : r <= 0.6 * radius ? 4 : r <= radius ? 2 : 0;
        m.labels[static_cast<std::size_t>(g.offset(x, y, z))] = internal_label(ext);
      }
  return m;
}

/// Writes <dir>/<id>/<id>_{t1,t1ce,t2,flair,seg}.nii.gz and returns the case directory.
inline std::filesystem::path write_phantom_case(const std::filesystem::path& dir, const std::string& id, Grid g,
                                                std::uint64_t seed, double radius = 5.0) {
  const auto case_dir = dir / id;
  std::filesystem::create_directories(case_dir);
  const auto label = phantom_label(g, radius);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.2f);
  const float contrast[4][4] = {{1.0f, 0.6f, 0.8f, 0.7f},
                                {1.0f, 0.5f, 0.9f, 2.0f},
                                {1.0f, 1.8f, 1.5f, 1.2f},
                                {1.0f, 1.2f, 2.2f, 1.1f}};
  const std::array<double, 3> spacing{1.0, 1.0, 1.5};
  for (int c = 0; c < 4; ++c) {
    std::vector<float> data(label.labels.size());
    for (std::size_t v = 0; v < data.size(); ++v) data[v] = 100.0f * (contrast[c][label.labels[v]] + noise(rng));
    write_nifti(case_dir / (id + "_" + kModalities[static_cast<std::size_t>(c)] + ".nii.gz"),
                make_nifti(g, std::move(data), NiftiType::float32, spacing));
  }
  const auto ext = label.to_external();
  write_nifti(case_dir / (id + "_seg.nii.gz"),
              make_nifti(g, std::vector<float>(ext.begin(), ext.end()), NiftiType::uint8, spacing));
  return case_dir;
}

}  // namespace bitr::testing
