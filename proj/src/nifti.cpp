#include "bitr/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "bitr/binary_io.hpp"

namespace bitr {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDataStart = 352;  // header plus the 4-byte extension flag

using Kind = FormatError::Kind;

class HeaderView {
 public:
  HeaderView(const std::vector<std::uint8_t>& bytes, bool swap) : bytes_(bytes), swap_(swap) {}
  template <class T>
  T get(std::size_t offset) const {
    T v;
    std::memcpy(&v, bytes_.data() + offset, sizeof(T));
    return swap_ ? byteswap_value(v) : v;
  }
  std::string text(std::size_t offset, std::size_t n) const {
    std::string s(reinterpret_cast<const char*>(bytes_.data() + offset), n);
    return s.substr(0, s.find('\0'));
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  bool swap_;
};

template <class T>
void put_at(std::vector<std::uint8_t>& b, std::size_t offset, T v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap_value(v);
  std::memcpy(b.data() + offset, &v, sizeof(T));
}

int bytes_per_voxel(NiftiType t) {
  switch (t) {
    case NiftiType::uint8: return 1;
    case NiftiType::int16: return 2;
    case NiftiType::float32: return 4;
  }
  return 0;
}

std::vector<std::uint8_t> read_maybe_gzip(const std::filesystem::path& path) {
  if (path.empty() || !std::filesystem::is_regular_file(path)) throw IoError("file not found: " + path.string());
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  int err = 0;
  const char* msg = gzerror(f, &err);
  const std::string message = msg ? msg : "";
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_BUF_ERROR))
    throw FormatError(Kind::truncated, out.size(), "corrupt compressed stream in '" + path.string() + "': " + message);
  return out;
}

bool is_gzip_path(const std::filesystem::path& path) { return path.extension() == ".gz"; }

}  // namespace

NiftiVolume parse_nifti(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kHeaderSize)
    throw FormatError(Kind::truncated, bytes.size(),
                      "header needs 348 bytes, have " + std::to_string(bytes.size()));
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, bytes.data(), 4);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (byteswap_value(sizeof_hdr) != 348)
      throw FormatError(Kind::invalid_field, 0, "sizeof_hdr is " + std::to_string(sizeof_hdr) + ", expected 348");
    swap = true;
  }
  const bool native_big = std::endian::native == std::endian::big;
  HeaderView h(bytes, swap);
  if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0)
    throw FormatError(Kind::bad_magic, 344, "magic is not \"n+1\" (single-file NIfTI-1)");

  NiftiVolume out;
  auto& hdr = out.header;
  hdr.big_endian = swap != native_big;
  for (std::size_t i = 0; i < 8; ++i) hdr.dim[i] = h.get<std::int16_t>(40 + 2 * i);
  if (hdr.dim[0] < 3 || hdr.dim[0] > 4)
    throw FormatError(Kind::invalid_field, 40, "dim[0] is " + std::to_string(hdr.dim[0]) + ", expected 3 or 4");
  if (hdr.dim[0] == 4 && hdr.dim[4] != 1)
    throw FormatError(Kind::invalid_field, 48, "4D volumes with more than one frame are not supported");
  for (std::size_t i = 1; i <= 3; ++i)
    if (hdr.dim[i] < 1)
      throw FormatError(Kind::invalid_field, 40 + 2 * i, "dim[" + std::to_string(i) + "] must be positive");
  const auto code = h.get<std::int16_t>(70);
  if (code != 2 && code != 4 && code != 16)
    throw FormatError(Kind::unsupported_datatype, 70,
                      "datatype " + std::to_string(code) + " is not uint8 (2), int16 (4) or float32 (16)");
  hdr.datatype = static_cast<NiftiType>(code);
  hdr.bitpix = h.get<std::int16_t>(72);
  for (std::size_t i = 0; i < 8; ++i) hdr.pixdim[i] = h.get<float>(76 + 4 * i);
  hdr.vox_offset = h.get<float>(108);
  hdr.scl_slope = h.get<float>(112);
  hdr.scl_inter = h.get<float>(116);
  hdr.xyzt_units = static_cast<std::int8_t>(bytes[123]);
  hdr.descrip = h.text(148, 80);
  hdr.qform_code = h.get<std::int16_t>(252);
  hdr.sform_code = h.get<std::int16_t>(254);
  for (std::size_t i = 0; i < 6; ++i) hdr.quatern[i] = h.get<float>(256 + 4 * i);
  for (std::size_t i = 0; i < 12; ++i) hdr.srow[i] = h.get<float>(280 + 4 * i);

  if (!(hdr.vox_offset >= static_cast<float>(kHeaderSize)) || hdr.vox_offset != std::floor(hdr.vox_offset))
    throw FormatError(Kind::invalid_field, 108, "vox_offset " + std::to_string(hdr.vox_offset) + " is invalid");
  const Grid g = hdr.grid();
  const auto width = static_cast<std::size_t>(bytes_per_voxel(hdr.datatype));
  const auto start = static_cast<std::size_t>(hdr.vox_offset);
  const auto need = start + static_cast<std::size_t>(g.voxels()) * width;
  if (bytes.size() < need)
    throw FormatError(Kind::truncated, bytes.size(),
                      "voxel data needs " + std::to_string(need) + " bytes, file has " + std::to_string(bytes.size()));

  const bool scaled = hdr.scl_slope != 0.0f && std::isfinite(hdr.scl_slope);
  out.data.resize(static_cast<std::size_t>(g.voxels()));
  std::size_t pos = start;
  for (Index z = 0; z < g.z; ++z)
    for (Index y = 0; y < g.y; ++y)
      for (Index x = 0; x < g.x; ++x, pos += width) {
        float v = 0;
        switch (hdr.datatype) {
          case NiftiType::uint8: v = bytes[pos]; break;
          case NiftiType::int16: v = h.get<std::int16_t>(pos); break;
          case NiftiType::float32: v = h.get<float>(pos); break;
        }
        if (scaled) v = v * hdr.scl_slope + hdr.scl_inter;
        out.data[static_cast<std::size_t>(g.offset(x, y, z))] = v;
      }
  return out;
}

NiftiVolume read_nifti(const std::filesystem::path& path) {
  try {
    return parse_nifti(read_maybe_gzip(path));
  } catch (const FormatError& e) {
    throw e.in_file(path);
  }
}

std::vector<std::uint8_t> encode_nifti(const NiftiVolume& volume) {
  const auto& hdr = volume.header;
  const Grid g = hdr.grid();
  if (static_cast<Index>(volume.data.size()) != g.voxels())
    throw ShapeError("NIfTI data holds " + std::to_string(volume.data.size()) + " voxels, header says " +
                     std::to_string(g.voxels()));
  const int width = bytes_per_voxel(hdr.datatype);
  std::vector<std::uint8_t> b(kDataStart + static_cast<std::size_t>(g.voxels() * width), 0);
  put_at<std::int32_t>(b, 0, 348);
  b[38] = 'r';
  for (std::size_t i = 0; i < 8; ++i) put_at<std::int16_t>(b, 40 + 2 * i, hdr.dim[i]);
  put_at<std::int16_t>(b, 70, static_cast<std::int16_t>(hdr.datatype));
  put_at<std::int16_t>(b, 72, static_cast<std::int16_t>(8 * width));
  for (std::size_t i = 0; i < 8; ++i) put_at<float>(b, 76 + 4 * i, hdr.pixdim[i]);
  put_at<float>(b, 108, static_cast<float>(kDataStart));
  b[123] = static_cast<std::uint8_t>(hdr.xyzt_units);
  std::memcpy(b.data() + 148, hdr.descrip.data(), std::min<std::size_t>(hdr.descrip.size(), 79));
  put_at<std::int16_t>(b, 252, hdr.qform_code);
  put_at<std::int16_t>(b, 254, hdr.sform_code);
  for (std::size_t i = 0; i < 6; ++i) put_at<float>(b, 256 + 4 * i, hdr.quatern[i]);
  for (std::size_t i = 0; i < 12; ++i) put_at<float>(b, 280 + 4 * i, hdr.srow[i]);
  std::memcpy(b.data() + 344, "n+1\0", 4);

  std::size_t pos = kDataStart;
  for (Index z = 0; z < g.z; ++z)
    for (Index y = 0; y < g.y; ++y)
      for (Index x = 0; x < g.x; ++x, pos += static_cast<std::size_t>(width)) {
        const float v = volume.data[static_cast<std::size_t>(g.offset(x, y, z))];
        switch (hdr.datatype) {
          case NiftiType::uint8: {
            const float r = std::round(v);
            if (!(r >= 0 && r <= 255)) throw std::out_of_range("value " + std::to_string(v) + " does not fit uint8");
            b[pos] = static_cast<std::uint8_t>(r);
            break;
          }
          case NiftiType::int16: {
            const float r = std::round(v);
            if (!(r >= -32768 && r <= 32767))
              throw std::out_of_range("value " + std::to_string(v) + " does not fit int16");
            put_at<std::int16_t>(b, pos, static_cast<std::int16_t>(r));
            break;
          }
          case NiftiType::float32: put_at<float>(b, pos, v); break;
        }
      }
  return b;
}

void write_nifti(const std::filesystem::path& path, const NiftiVolume& volume) {
  const auto bytes = encode_nifti(volume);
  if (!is_gzip_path(path)) {
    write_file_bytes(path, bytes);
    return;
  }
  gzFile f = gzopen(path.string().c_str(), "wb6");
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  const int written = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
  const int closed = gzclose(f);
  if (written != static_cast<int>(bytes.size()) || closed != Z_OK)
    throw IoError("write to '" + path.string() + "' failed");
}

NiftiVolume make_nifti(Grid grid, std::vector<float> data, NiftiType type, std::array<double, 3> spacing) {
  NiftiVolume v;
  v.header.dim = {3, static_cast<std::int16_t>(grid.x), static_cast<std::int16_t>(grid.y),
                  static_cast<std::int16_t>(grid.z), 1, 1, 1, 1};
  v.header.datatype = type;
  v.header.bitpix = static_cast<std::int16_t>(8 * bytes_per_voxel(type));
  for (std::size_t i = 0; i < 3; ++i) v.header.pixdim[i + 1] = static_cast<float>(spacing[i]);
  v.data = std::move(data);
  return v;
}

Volume4D stack_modalities(const std::array<std::filesystem::path, 4>& paths) {
  Volume4D out;
  for (std::size_t c = 0; c < 4; ++c) {
    const auto nii = read_nifti(paths[c]);
    const Grid g = nii.header.grid();
    if (c == 0) {
      out = Volume4D(g, 4);
      out.spacing = nii.header.spacing();
    } else {
      if (!(g == out.grid))
        throw ShapeError("modality " + std::string(kModalities[c]) + " (" + paths[c].string() +
                         ") has a different grid from " + kModalities[0]);
      for (std::size_t a = 0; a < 3; ++a)
        if (std::abs(nii.header.spacing()[a] - out.spacing[a]) > 1e-5)
          throw ShapeError("modality " + std::string(kModalities[c]) + " (" + paths[c].string() +
                           ") has a different voxel spacing");
    }
    std::copy(nii.data.begin(), nii.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(c * g.voxels()));
  }
  return out;
}

Volume4D normalize(const Volume4D& v) {
  Volume4D out = v;
  const Index n = v.grid.voxels();
  for (int c = 0; c < v.channels; ++c) {
    double sum = 0, sq = 0;
    Index count = 0;
    for (Index i = 0; i < n; ++i)
      if (const double x = v.at(c, i); x != 0) {
        sum += x;
        ++count;
      }
    auto& norm = out.normalization[static_cast<std::size_t>(c)];
    if (count == 0) {
      norm = {0.0, 1.0, true};
      continue;
    }
    const double mean = sum / static_cast<double>(count);
    for (Index i = 0; i < n; ++i)
      if (const double x = v.at(c, i); x != 0) sq += (x - mean) * (x - mean);
    double sd = std::sqrt(sq / static_cast<double>(count));
    if (!(sd > 0)) sd = 1.0;
    norm = {mean, sd, true};
    for (Index i = 0; i < n; ++i)
      if (const double x = v.at(c, i); x != 0) out.at(c, i) = static_cast<float>((x - mean) / sd);
  }
  return out;
}

SegmentationMask read_label(const std::filesystem::path& path) {
  const auto nii = read_nifti(path);
  std::vector<std::uint8_t> values(nii.data.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float v = nii.data[i];
    if (v != 0 && v != 1 && v != 2 && v != 4)
      throw FormatError(Kind::invalid_field, kDataStart,
                        path.string() + ": label " + std::to_string(v) + " at voxel " + std::to_string(i) +
                            " is outside {0, 1, 2, 4}");
    values[i] = static_cast<std::uint8_t>(v);
  }
  return SegmentationMask::from_external(nii.header.grid(), values);
}

void write_label(const std::filesystem::path& path, const SegmentationMask& mask, const NiftiHeader& like) {
  NiftiVolume nii;
  nii.header = like;
  nii.header.dim = {3, static_cast<std::int16_t>(mask.grid.x), static_cast<std::int16_t>(mask.grid.y),
                    static_cast<std::int16_t>(mask.grid.z), 1, 1, 1, 1};
  nii.header.datatype = NiftiType::uint8;
  nii.header.bitpix = 8;
  nii.header.scl_slope = 0;
  nii.header.scl_inter = 0;
  const auto ext = mask.to_external();
  nii.data.assign(ext.begin(), ext.end());
  write_nifti(path, nii);
}

CaseFiles find_case_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("case directory not found: " + dir.string());
  CaseFiles files;
  files.id = dir.filename().string();
  if (files.id.empty()) files.id = dir.parent_path().filename().string();
  std::vector<std::filesystem::path> entries;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file()) entries.push_back(e.path());
  std::sort(entries.begin(), entries.end());
  for (const auto& p : entries) {
    std::string name = p.filename().string();
    for (const char* ext : {".nii.gz", ".nii"})
      if (name.size() > std::strlen(ext) && name.ends_with(ext)) {
        name.resize(name.size() - std::strlen(ext));
        for (std::size_t c = 0; c < 4; ++c)
          if (name.ends_with(std::string("_") + kModalities[c])) files.modalities[c] = p;
        if (name.ends_with("_seg")) files.label = p;
        break;
      }
  }
  for (std::size_t c = 0; c < 4; ++c)
    if (files.modalities[c].empty())
      throw IoError("case directory " + dir.string() + " has no *_" + kModalities[c] + ".nii[.gz] file");
  return files;
}

CaseRecord load_case_directory(const std::filesystem::path& dir) {
  const auto files = find_case_files(dir);
  CaseRecord record;
  record.id = files.id;
  record.image = normalize(stack_modalities(files.modalities));
  for (const auto& p : files.modalities) record.sources.push_back(p.string());
  if (!files.label.empty()) {
    auto label = read_label(files.label);
    if (!(label.grid == record.image.grid))
      throw ShapeError("label " + files.label.string() + " does not match the scan grid");
    record.label = std::move(label);
    record.sources.push_back(files.label.string());
  }
  return record;
}

namespace {

constexpr std::uint32_t kCacheVersion = 1;

void put_string(ByteWriter& w, const std::string& s) {
  w.put(static_cast<std::uint32_t>(s.size()));
  w.put_bytes(s);
}

std::string get_string(ByteReader& r, const char* what) {
  const auto n = r.get<std::uint32_t>(what);
  return r.get_bytes(n, what);
}

}  // namespace

std::vector<std::uint8_t> encode_case(const CaseRecord& record) {
  const auto& img = record.image;
  if (static_cast<Index>(img.data.size()) != img.grid.voxels() * img.channels)
    throw ShapeError("case '" + record.id + "' image buffer does not match its grid");
  if (record.label && !(record.label->grid == img.grid))
    throw ShapeError("case '" + record.id + "' label does not match its grid");
  ByteWriter w;
  w.put_bytes("BTRC");
  w.put(kCacheVersion);
  put_string(w, record.id);
  w.put(static_cast<std::uint32_t>(img.channels));
  for (Index d : {img.grid.x, img.grid.y, img.grid.z}) w.put(static_cast<std::uint32_t>(d));
  for (double s : img.spacing) w.put(s);
  for (int c = 0; c < img.channels; ++c) {
    const auto n = c < static_cast<int>(img.normalization.size()) ? img.normalization[static_cast<std::size_t>(c)]
                                                                   : Volume4D::Normalization{};
    w.put(n.mean);
    w.put(n.stddev);
    w.put(static_cast<std::uint8_t>(n.applied));
  }
  w.put(static_cast<std::uint32_t>(record.sources.size()));
  for (const auto& s : record.sources) put_string(w, s);
  w.put(static_cast<std::uint8_t>(record.label.has_value()));
  w.put_array(img.data.data(), img.data.size());
  if (record.label) {
    const auto ext = record.label->to_external();
    w.put_array(ext.data(), ext.size());
  }
  auto& bytes = w.bytes();
  w.put(crc32_of(bytes.data(), bytes.size()));
  return std::move(w.bytes());
}

CaseRecord decode_case(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw FormatError(Kind::truncated, bytes.size(), "cache file too short");
  const std::size_t body = bytes.size() - 4;
  ByteReader tail(bytes.data() + body, 4);
  const auto stored = tail.get<std::uint32_t>("checksum");
  if (stored != crc32_of(bytes.data(), body))
    throw FormatError(Kind::checksum, body, "cache checksum mismatch");

  ByteReader r(bytes.data(), body);
  if (r.get_bytes(4, "magic") != "BTRC") throw FormatError(Kind::bad_magic, 0, "not a BTRC cache file");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCacheVersion)
    throw FormatError(Kind::unsupported_version, 4,
                      "cache version " + std::to_string(version) + " (supported: " + std::to_string(kCacheVersion) +
                          ")");
  CaseRecord record;
  record.id = get_string(r, "case id");
  const auto channels = r.get<std::uint32_t>("channel count");
  Grid g;
  g.x = r.get<std::uint32_t>("dims");
  g.y = r.get<std::uint32_t>("dims");
  g.z = r.get<std::uint32_t>("dims");
  if (channels == 0 || channels > 64 || g.voxels() <= 0)
    throw FormatError(Kind::invalid_field, r.offset(), "implausible cache dimensions");
  record.image = Volume4D(g, static_cast<int>(channels));
  for (auto& s : record.image.spacing) s = r.get<double>("spacing");
  for (auto& n : record.image.normalization) {
    n.mean = r.get<double>("normalization");
    n.stddev = r.get<double>("normalization");
    n.applied = r.get<std::uint8_t>("normalization") != 0;
  }
  const auto n_sources = r.get<std::uint32_t>("source count");
  for (std::uint32_t i = 0; i < n_sources; ++i) record.sources.push_back(get_string(r, "source path"));
  const bool has_label = r.get<std::uint8_t>("label flag") != 0;
  auto& data = record.image.data;
  r.get_array(data.data(), data.size(), "image payload");
  if (has_label) {
    const auto at = r.offset();
    const auto raw = r.get_bytes(static_cast<std::size_t>(g.voxels()), "label payload");
    try {
      record.label = SegmentationMask::from_external(g, std::vector<std::uint8_t>(raw.begin(), raw.end()));
    } catch (const std::invalid_argument& e) {
      throw FormatError(Kind::invalid_field, at, e.what());
    }
  }
  if (r.remaining() != 0) throw FormatError(Kind::invalid_field, r.offset(), "trailing bytes before checksum");
  return record;
}

void cache_case(const CaseRecord& record, const std::filesystem::path& path) {
  write_file_bytes(path, encode_case(record));
}

CaseRecord load_case(const std::filesystem::path& path) {
  try {
    return decode_case(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw e.in_file(path);
  }
}

}  // namespace bitr
