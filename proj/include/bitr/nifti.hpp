#pragma once

// NIfTI-1 single-file volumes (.nii, .nii.gz), 3D, datatypes uint8 / int16 /
// float32. Voxel data is returned as (x, y, z) with z fastest; files store x
// fastest.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bitr/volume.hpp"

namespace bitr {

enum class NiftiType : std::int16_t { uint8 = 2, int16 = 4, float32 = 16 };

struct NiftiHeader {
  std::array<std::int16_t, 8> dim{3, 1, 1, 1, 1, 1, 1, 1};
  NiftiType datatype = NiftiType::float32;
  std::int16_t bitpix = 32;
  std::array<float, 8> pixdim{1, 1, 1, 1, 1, 1, 1, 1};
  float vox_offset = 352;
  float scl_slope = 0;
  float scl_inter = 0;
  std::int8_t xyzt_units = 2;  // millimetres
  std::string descrip;
  // Orientation is carried through untouched.
  std::int16_t qform_code = 0, sform_code = 0;
  std::array<float, 6> quatern{};  // b, c, d, qoffset x, y, z
  std::array<float, 12> srow{};
  bool big_endian = false;

  Grid grid() const { return Grid{dim[1], dim[2], dim[3]}; }
  std::array<double, 3> spacing() const { return {pixdim[1], pixdim[2], pixdim[3]}; }
};

struct NiftiVolume {
  NiftiHeader header;
  std::vector<float> data;  // scaled values, (x, y, z) with z fastest
};

/// Reads plain or gzip-compressed files. Throws FormatError (bad_magic,
/// unsupported_datatype, truncated, invalid_field) with a byte offset.
NiftiVolume read_nifti(const std::filesystem::path& path);
NiftiVolume parse_nifti(const std::vector<std::uint8_t>& bytes);

/// Writes header.datatype values (rounded for integer types, no scaling);
/// gzip-compressed when the path ends in ".gz".
void write_nifti(const std::filesystem::path& path, const NiftiVolume& volume);
std::vector<std::uint8_t> encode_nifti(const NiftiVolume& volume);

NiftiVolume make_nifti(Grid grid, std::vector<float> data, NiftiType type = NiftiType::float32,
                       std::array<double, 3> spacing = {1, 1, 1});

/// Stacks four modality files (t1, t1ce, t2, flair order) into one scan.
Volume4D stack_modalities(const std::array<std::filesystem::path, 4>& paths);

/// Per-channel z-score over nonzero voxels; zeros stay zero.
Volume4D normalize(const Volume4D& v);

SegmentationMask read_label(const std::filesystem::path& path);
void write_label(const std::filesystem::path& path, const SegmentationMask& mask, const NiftiHeader& like);

/// Files of one case directory, matched by the suffixes _t1, _t1ce, _t2,
/// _flair and _seg before .nii or .nii.gz.
struct CaseFiles {
  std::string id;
  std::array<std::filesystem::path, 4> modalities;
  std::filesystem::path label;  // empty when absent
};

CaseFiles find_case_files(const std::filesystem::path& dir);

/// Stacked, normalized scan plus optional label.
CaseRecord load_case_directory(const std::filesystem::path& dir);

/// "BTRC" cache: magic, version, id, dims, spacing, normalization, float32
/// image, optional uint8 label (file labels), trailing CRC-32.
std::vector<std::uint8_t> encode_case(const CaseRecord& record);
CaseRecord decode_case(const std::vector<std::uint8_t>& bytes);
void cache_case(const CaseRecord& record, const std::filesystem::path& path);
CaseRecord load_case(const std::filesystem::path& path);

}  // namespace bitr
