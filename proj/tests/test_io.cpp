#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "bitr/binary_io.hpp"
#include "bitr/nifti.hpp"

using namespace bitr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<float> random_floats(std::size_t n, std::mt19937_64& rng) {
  std::vector<float> v(n);
  std::normal_distribution<float> nd(0.0f, 100.0f);
  for (auto& x : v) x = nd(rng);
  return v;
}

template <class T>
void poke(std::vector<std::uint8_t>& b, std::size_t offset, T v) {
  std::memcpy(b.data() + offset, &v, sizeof(T));
}

CaseRecord random_case(std::mt19937_64& rng, Grid g = {16, 16, 16}) {
  CaseRecord c;
  c.id = "case_007";
  c.image = Volume4D(g, 4);
  c.image.data = random_floats(c.image.data.size(), rng);
  c.image.spacing = {1.0, 1.2, 0.8};
  c.image.normalization[2] = {3.5, 1.25, true};
  SegmentationMask m(g);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng() % 4);
  c.label = m;
  c.sources = {"a_t1.nii.gz", "a_seg.nii.gz"};
  return c;
}

FormatError::Kind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.kind();
  }
  FAIL("no FormatError thrown");
  return FormatError::Kind::invalid_field;
}

}  // namespace

TEST_CASE("nifti float32 roundtrip is bit exact") {
  TempDir dir("bitr_io_rt");
  std::mt19937_64 rng(1);
  const Grid g{4, 5, 6};
  auto v = make_nifti(g, random_floats(120, rng), NiftiType::float32, {1.0, 2.0, 3.0});
  v.header.srow = {1, 0, 0, -10, 0, 1, 0, -20, 0, 0, 1, -30};
  v.header.sform_code = 1;
  for (const char* name : {"v.nii", "v.nii.gz"}) {
    write_nifti(dir.path / name, v);
    auto back = read_nifti(dir.path / name);
    CHECK(std::memcmp(back.data.data(), v.data.data(), v.data.size() * 4) == 0);
    CHECK(back.header.grid() == g);
    CHECK(back.header.spacing() == std::array<double, 3>{1.0, 2.0, 3.0});
    CHECK(back.header.srow == v.header.srow);
    CHECK(back.header.sform_code == 1);
  }
  CHECK(fs::file_size(dir.path / "v.nii") == 352 + 120 * 4);
  // x varies fastest on disk
  auto bytes = read_file_bytes(dir.path / "v.nii");
  float second;
  std::memcpy(&second, bytes.data() + 356, 4);
  CHECK(second == v.data[static_cast<std::size_t>(g.offset(1, 0, 0))]);
}

TEST_CASE("nifti integer types and scaling") {
  const Grid g{2, 2, 2};
  auto v = make_nifti(g, {0, 1, 2, 3, -4, 5, 6, 300}, NiftiType::int16);
  auto bytes = encode_nifti(v);
  CHECK(parse_nifti(bytes).data == v.data);
  poke<float>(bytes, 112, 2.0f);
  poke<float>(bytes, 116, 1.0f);
  auto scaled = parse_nifti(bytes);
  CHECK(scaled.data[static_cast<std::size_t>(g.offset(0, 1, 1))] == 7.0f);  // stored 3
  auto u8 = make_nifti(g, {0, 1, 2, 4, 0, 1, 2, 4}, NiftiType::uint8);
  CHECK(parse_nifti(encode_nifti(u8)).data == u8.data);
  u8.data[0] = 256;
  CHECK_THROWS_AS(encode_nifti(u8), std::out_of_range);
}

TEST_CASE("nifti big-endian files are read") {
  const Grid g{2, 1, 3};
  auto v = make_nifti(g, {1.5f, -2.0f, 3.25f, 4.0f, 5.0f, -6.5f});
  auto le = encode_nifti(v);
  auto be = le;
  auto swap_at = [&](std::size_t off, std::size_t width) { std::reverse(be.begin() + off, be.begin() + off + width); };
  swap_at(0, 4);
  for (std::size_t i = 0; i < 8; ++i) swap_at(40 + 2 * i, 2);
  swap_at(70, 2);
  swap_at(72, 2);
  for (std::size_t i = 0; i < 8; ++i) swap_at(76 + 4 * i, 4);
  for (std::size_t off : {108, 112, 116}) swap_at(off, 4);
  for (std::size_t i = 0; i < 6; ++i) swap_at(352 + 4 * i, 4);
  auto back = parse_nifti(be);
  CHECK(back.header.big_endian);
  CHECK(back.data == v.data);
}

TEST_CASE("nifti errors carry kind and offset") {
  auto bytes = encode_nifti(make_nifti(Grid{2, 2, 2}, std::vector<float>(8, 1.0f)));
  auto bad = bytes;
  std::memcpy(bad.data() + 344, "bad!", 4);
  CHECK(kind_of([&] { parse_nifti(bad); }) == FormatError::Kind::bad_magic);
  bad = bytes;
  poke<std::int16_t>(bad, 70, 64);
  CHECK(kind_of([&] { parse_nifti(bad); }) == FormatError::Kind::unsupported_datatype);
  try {
    parse_nifti(bad);
  } catch (const FormatError& e) {
    CHECK(e.offset() == 70);
  }
  bad = bytes;
  bad.resize(bad.size() - 3);
  CHECK(kind_of([&] { parse_nifti(bad); }) == FormatError::Kind::truncated);
  bad.resize(100);
  CHECK(kind_of([&] { parse_nifti(bad); }) == FormatError::Kind::truncated);
  bad = bytes;
  poke<std::int16_t>(bad, 40, 5);
  CHECK(kind_of([&] { parse_nifti(bad); }) == FormatError::Kind::invalid_field);
  CHECK_THROWS_AS(read_nifti("/nonexistent/x.nii.gz"), IoError);
}

TEST_CASE("stacking and normalization") {
  TempDir dir("bitr_io_stack");
  const Grid g{2, 2, 2};
  std::array<fs::path, 4> paths;
  for (std::size_t c = 0; c < 4; ++c) {
    paths[c] = dir.path / ("m" + std::to_string(c) + ".nii");
    write_nifti(paths[c], make_nifti(g, std::vector<float>(8, static_cast<float>(c + 1))));
  }
  auto v = stack_modalities(paths);
  CHECK(v.channels == 4);
  CHECK(v.grid == g);
  CHECK(v.at(3, 5) == 4.0f);
  write_nifti(paths[2], make_nifti(Grid{2, 2, 3}, std::vector<float>(12)));
  CHECK_THROWS_AS(stack_modalities(paths), ShapeError);

  Volume4D s(g, 4);
  s.at(0, 0) = 2;
  s.at(0, 5) = 4;
  auto n = normalize(s);
  CHECK(n.at(0, 0) == -1.0f);
  CHECK(n.at(0, 5) == 1.0f);
  CHECK(n.at(0, 1) == 0.0f);
  CHECK(n.normalization[0].mean == 3.0);
  CHECK(n.normalization[0].stddev == 1.0);
  for (Index i = 0; i < 8; ++i) CHECK(n.at(1, i) == 0.0f);
  std::mt19937_64 rng(2);
  Volume4D r(Grid{4, 4, 4}, 4);
  r.data = random_floats(r.data.size(), rng);
  auto once = normalize(r), twice = normalize(once);
  for (std::size_t i = 0; i < once.data.size(); ++i) CHECK(std::abs(once.data[i] - twice.data[i]) < 1e-5);
  CHECK(std::abs(twice.normalization[1].mean) < 1e-5);
  CHECK(std::abs(twice.normalization[1].stddev - 1.0) < 1e-5);
}

TEST_CASE("case directories") {
  TempDir dir("bitr_io_case");
  const auto case_dir = dir.path / "BraTS_0001";
  fs::create_directories(case_dir);
  const Grid g{3, 3, 3};
  for (const char* m : kModalities)
    write_nifti(case_dir / ("BraTS_0001_" + std::string(m) + ".nii.gz"), make_nifti(g, std::vector<float>(27, 1.0f)));
  auto files = find_case_files(case_dir);
  CHECK(files.id == "BraTS_0001");
  CHECK(files.modalities[0].filename() == "BraTS_0001_t1.nii.gz");
  CHECK(files.modalities[1].filename() == "BraTS_0001_t1ce.nii.gz");
  CHECK(files.label.empty());
  std::vector<float> labels(27, 0.0f);
  labels[4] = 4;
  labels[5] = 2;
  write_nifti(case_dir / "BraTS_0001_seg.nii.gz", make_nifti(g, labels, NiftiType::uint8));
  auto record = load_case_directory(case_dir);
  REQUIRE(record.label.has_value());
  CHECK(record.label->labels[4] == 3);
  CHECK(record.label->to_external()[5] == 2);
  CHECK(record.sources.size() == 5);
  labels[6] = 3;
  write_nifti(case_dir / "BraTS_0001_seg.nii.gz", make_nifti(g, labels, NiftiType::uint8));
  CHECK_THROWS_AS(load_case_directory(case_dir), FormatError);
  fs::remove(case_dir / "BraTS_0001_flair.nii.gz");
  CHECK_THROWS_AS(find_case_files(case_dir), IoError);
}

TEST_CASE("case cache") {
  TempDir dir("bitr_io_cache");
  std::mt19937_64 rng(3);
  auto c = random_case(rng);
  const auto path = dir.path / "c.btrc";
  cache_case(c, path);
  auto back = load_case(path);
  CHECK(back.id == c.id);
  CHECK(std::memcmp(back.image.data.data(), c.image.data.data(), c.image.data.size() * 4) == 0);
  CHECK(back.image.spacing == c.image.spacing);
  CHECK(back.image.normalization[2].stddev == 1.25);
  CHECK(back.label == c.label);
  CHECK(back.sources == c.sources);
  CHECK(encode_case(back) == encode_case(c));
  const auto size = fs::file_size(path);
  const auto payload = 4u * 16 * 16 * 16 * 4 + 16 * 16 * 16;
  CHECK(size > payload);
  CHECK(size - payload < 1024);

  auto bytes = read_file_bytes(path);
  auto flipped = bytes;
  flipped.back() ^= 0x01;
  CHECK(kind_of([&] { decode_case(flipped); }) == FormatError::Kind::checksum);
  flipped = bytes;
  flipped[1000] ^= 0x40;
  CHECK(kind_of([&] { decode_case(flipped); }) == FormatError::Kind::checksum);
  auto with_crc = [](std::vector<std::uint8_t> b) {
    b.resize(b.size() - 4);
    const auto crc = crc32_of(b.data(), b.size());
    ByteWriter w;
    w.put(crc);
    b.insert(b.end(), w.bytes().begin(), w.bytes().end());
    return b;
  };
  auto magic = bytes;
  magic[0] = 'X';
  CHECK(kind_of([&] { decode_case(with_crc(magic)); }) == FormatError::Kind::bad_magic);
  auto version = bytes;
  version[4] = 9;
  CHECK(kind_of([&] { decode_case(with_crc(version)); }) == FormatError::Kind::unsupported_version);

  c.label.reset();
  auto unlabeled = decode_case(encode_case(c));
  CHECK(!unlabeled.label.has_value());
}
