#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "pointdif/errors.hpp"
#include "pointdif/point_cloud.hpp"
#include "pointdif/rng.hpp"
#include "temp_dir.hpp"

using namespace pointdif;
using pointdif::testing::TempDir;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

PointCloud random_cloud(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  return PointCloud(rng.normal_matrix(n, 3));
}

}  // namespace

TEST_CASE("load_xyz parses points in file order") {
  TempDir dir;
  write_file(dir / "one.xyz", "0 0 0\n");
  auto one = load_xyz(dir / "one.xyz");
  CHECK(one.size() == 1);
  CHECK(one.points.row(0).norm() == 0.0);

  write_file(dir / "two.xyz", "# header\n1 2 3\n\n4 5 6\n");
  auto two = load_xyz(dir / "two.xyz");
  REQUIRE(two.size() == 2);
  CHECK(two.points(0, 0) == 1.0);
  CHECK(two.points(1, 2) == 6.0);
}

TEST_CASE("load_xyz reports the offending line") {
  TempDir dir;
  write_file(dir / "bad.xyz", "0 0 0\n1 1 1\n1 2\n");
  try {
    load_xyz(dir / "bad.xyz");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  write_file(dir / "extra.xyz", "1 2 3 4\n");
  CHECK_THROWS_AS(load_xyz(dir / "extra.xyz"), ParseError);
  write_file(dir / "empty.xyz", "# nothing\n\n");
  CHECK_THROWS_AS(load_xyz(dir / "empty.xyz"), EmptyInputError);
  CHECK_THROWS_AS(load_xyz(dir / "missing.xyz"), IoError);
}

TEST_CASE("xyz round trip stays within 1e-8") {
  TempDir dir;
  auto pc = random_cloud(1024, 3);
  save_xyz(pc, dir / "c.xyz");
  auto back = load_xyz(dir / "c.xyz");
  REQUIRE(back.size() == 1024);
  CHECK((back.points - pc.points).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("save_xyz refuses invalid clouds") {
  TempDir dir;
  CHECK_THROWS_AS(save_xyz(PointCloud{}, dir / "e.xyz"), InvariantError);
  auto pc = random_cloud(4, 1);
  pc.points(2, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(save_xyz(pc, dir / "n.xyz"), InvariantError);
  CHECK_FALSE(std::filesystem::exists(dir / "n.xyz"));
}

TEST_CASE("binary round trip is bit-exact for float32 coordinates") {
  TempDir dir;
  auto pc = random_cloud(256, 5);
  pc.points = pc.points.cast<float>().cast<double>();
  save_bin(pc, dir / "c.bin");
  auto back = load_bin(dir / "c.bin");
  CHECK(back.points == pc.points);
  auto bytes = encode_bin(pc);
  CHECK(bytes.size() == 12 + 256 * 12);
  CHECK(decode_bin(bytes).points == pc.points);
}

TEST_CASE("binary format errors are distinct") {
  auto bytes = encode_bin(random_cloud(100, 2));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  bad_magic[1] = 'X';
  bad_magic[2] = 'X';
  bad_magic[3] = 'X';
  CHECK_THROWS_AS(decode_bin(bad_magic), BadMagicError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_bin(bad_version), UnsupportedVersionError);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 12);  // 99 triples for n = 100
  CHECK_THROWS_AS(decode_bin(truncated), TruncatedError);
  CHECK_THROWS_AS(decode_bin({'P', 'D'}), FormatError);
}

TEST_CASE("normalize_unit_sphere") {
  Points p(2, 3);
  p << 2, 0, 0, 4, 0, 0;
  auto n = normalize_unit_sphere(PointCloud(p));
  CHECK(n.points(0, 0) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(n.points(1, 0) == doctest::Approx(1.0).epsilon(1e-15));

  Points same = Points::Constant(5, 3, 0.25);
  CHECK(normalize_unit_sphere(PointCloud(same)).points.cwiseAbs().maxCoeff() == 0.0);

  for (std::uint64_t s = 0; s < 10; ++s) {
    auto pc = random_cloud(50, s);
    pc.points.array() += 3.0;
    auto once = normalize_unit_sphere(pc);
    CHECK(once.points.colwise().mean().cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(once.points.rowwise().norm().maxCoeff() - 1.0) < 1e-9);
    auto twice = normalize_unit_sphere(once);
    CHECK((twice.points - once.points).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("subsample draws distinct points deterministically") {
  auto pc = random_cloud(1024, 7);
  auto all = subsample(pc, 1024, 1);
  CHECK(all.size() == 1024);
  std::set<std::tuple<double, double, double>> seen;
  for (Eigen::Index i = 0; i < all.size(); ++i) seen.insert({all.points(i, 0), all.points(i, 1), all.points(i, 2)});
  CHECK(seen.size() == 1024);

  auto one = subsample(pc, 1, 3);
  REQUIRE(one.size() == 1);
  bool found = false;
  for (Eigen::Index i = 0; i < pc.size(); ++i) found |= pc.points.row(i) == one.points.row(0);
  CHECK(found);

  CHECK(subsample(pc, 100, 9).points == subsample(pc, 100, 9).points);
  CHECK(subsample(pc, 100, 9).points != subsample(pc, 100, 10).points);
  CHECK_THROWS_AS(subsample(pc, 1025, 0), ValidationError);
  CHECK_THROWS_AS(subsample(pc, 0, 0), ValidationError);
}

TEST_CASE("synthetic shapes lie on their surfaces") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto s = synth_shape(ShapeKind::sphere, 500, seed);
    CHECK((s.points.rowwise().norm().array() - 1.0).abs().maxCoeff() < 1e-6);
    auto c = synth_shape(ShapeKind::cube, 500, seed);
    CHECK((c.points.cwiseAbs().rowwise().maxCoeff().array() - 1.0).abs().maxCoeff() < 1e-6);
    auto t = synth_shape(ShapeKind::torus, 500, seed);
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const double rho = std::hypot(t.points(i, 0), t.points(i, 1));
      const double z = t.points(i, 2);
      CHECK(std::abs((rho - kTorusMajor) * (rho - kTorusMajor) + z * z - 0.09) < 1e-6);
    }
  }
  CHECK(parse_shape_kind("torus") == ShapeKind::torus);
  CHECK(to_string(ShapeKind::cube) == "cube");
  CHECK_THROWS_AS(parse_shape_kind("cone"), ValidationError);
}

TEST_CASE("cube samples cover all six faces") {
  auto c = synth_shape(ShapeKind::cube, 600, 4);
  std::set<int> faces;
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    Eigen::Index axis = 0;
    c.points.row(i).cwiseAbs().maxCoeff(&axis);
    faces.insert(static_cast<int>(axis) * 2 + (c.points(i, axis) > 0 ? 1 : 0));
  }
  CHECK(faces.size() == 6);
}

TEST_CASE("toy dataset shape and split") {
  auto ds = make_toy_dataset(50, 64, 1);
  CHECK(ds.size() == 150);
  CHECK(ds.indices(Split::train).size() == 120);
  CHECK(ds.indices(Split::val).size() == 30);
  for (int label = 0; label < 3; ++label) CHECK(std::count(ds.labels.begin(), ds.labels.end(), label) == 50);

  auto small = make_toy_dataset(5, 16, 2);
  for (int label = 0; label < 3; ++label) CHECK(std::count(small.labels.begin(), small.labels.end(), label) == 5);

  auto again = make_toy_dataset(50, 64, 1);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(ds.clouds[i].points == again.clouds[i].points);

  auto tiny = make_toy_dataset(2, 8, 0);
  CHECK(tiny.indices(Split::train).size() == 3);
  CHECK(tiny.indices(Split::val).size() == 3);
  CHECK_THROWS_AS(make_toy_dataset(1, 8, 0), ValidationError);
}

TEST_CASE("dataset directory round trip") {
  TempDir dir;
  auto ds = make_toy_dataset(3, 32, 5);
  save_dataset(ds, dir.path());
  auto back = load_dataset(dir.path());
  REQUIRE(back.size() == ds.size());
  CHECK(back.labels == ds.labels);
  CHECK(back.splits == ds.splits);
  for (std::size_t i = 0; i < ds.size(); ++i)
    CHECK((back.clouds[i].points - ds.clouds[i].points).cwiseAbs().maxCoeff() < 1e-6);
  write_file(dir / "labels.csv", "file,label,split\ncloud_00000.bin,7,train\n");
  CHECK_THROWS_AS(load_dataset(dir.path()), ParseError);
}

TEST_CASE("rng state round trip") {
  Rng a(11);
  a.normal();
  const auto state = a.state();
  const double next = a.uniform();
  Rng b(0);
  b.set_state(state);
  CHECK(b.uniform() == next);
  CHECK(derive_seed(1, 2) != derive_seed(2, 1));
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
}
