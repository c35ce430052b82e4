#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <unistd.h>

#include "im/io.hpp"
#include "im/random.hpp"
#include "oracles.hpp"

using namespace im;
namespace fs = std::filesystem;

namespace {
struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("im_test_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};
}  // namespace

TEST_CASE("IMTN: header layout and bit-exact write-read-write") {
  Rng rng(80);
  Tensor t = rng.tensor_normal({2, 3, 4, 5}, 0, 1);
  auto bytes = io::encode_tensor(t);
  CHECK(static_cast<char>(bytes[0]) == 'I');
  CHECK(static_cast<char>(bytes[1]) == 'M');
  CHECK(static_cast<char>(bytes[2]) == 'T');
  CHECK(static_cast<char>(bytes[3]) == 'N');
  CHECK(static_cast<uint8_t>(bytes[4]) == 1);  // version
  CHECK(static_cast<uint8_t>(bytes[5]) == 4);  // rank
  CHECK(static_cast<uint8_t>(bytes[6]) == 2);  // first extent, little-endian
  CHECK(static_cast<uint8_t>(bytes[7]) == 0);

  TempDir dir;
  io::write_tensor(t, dir.file("a.imtn"));
  Tensor back = io::read_tensor(dir.file("a.imtn"));
  CHECK(back.same_bits(t));
  auto bytes2 = io::encode_tensor(back);
  CHECK(bytes == bytes2);
}

TEST_CASE("IMTN: truncation and corrupt magic rejected") {
  Rng rng(81);
  Tensor t = rng.tensor_normal({3, 3}, 0, 1);
  auto bytes = io::encode_tensor(t);
  auto truncated = std::span<const std::byte>(bytes).first(bytes.size() - 5);
  CHECK_THROWS_AS(io::decode_tensor(truncated), Error);
  bytes[0] = std::byte{'X'};
  CHECK_THROWS_AS(io::decode_tensor(bytes), Error);
}

TEST_CASE("config json: round trip preserves the architecture") {
  zoo::ModelConfig cfg = zoo::preset("T-plain-ss2d");
  const std::string js = io::config_to_json(cfg);
  zoo::ModelConfig back = io::config_from_json(js);
  CHECK(io::config_to_json(back) == js);
  CHECK(io::config_hash(back) == io::config_hash(cfg));
  CHECK(io::config_hash(zoo::preset("T")) != io::config_hash(cfg));
  CHECK_THROWS_AS(io::config_from_json("{not json"), Error);
}

TEST_CASE("weights: round trip is bit-exact, config hash guards loading") {
  TempDir dir;
  zoo::Model m = zoo::Model::build(zoo::preset("toy"), 21);
  Rng rng(82);
  Tensor x = rng.tensor_normal({1, 3, 32, 32}, 0, 1);
  Tensor before = m.forward(x);
  io::save_weights(m, dir.file("w.imwt"));

  zoo::Model fresh = zoo::Model::build(zoo::preset("toy"), 99);
  CHECK_FALSE(fresh.forward(x).same_bits(before));
  io::load_weights(fresh, dir.file("w.imwt"));
  CHECK(fresh.forward(x).same_bits(before));

  // same bytes when saved again
  io::save_weights(fresh, dir.file("w2.imwt"));
  CHECK(io::read_file(dir.file("w.imwt")) == io::read_file(dir.file("w2.imwt")));

  zoo::ModelConfig other = zoo::preset("toy");
  other.num_classes = 7;
  zoo::Model mismatched = zoo::Model::build(other, 21);
  CHECK_THROWS_AS(io::load_weights(mismatched, dir.file("w.imwt")), Error);

  const std::string data = io::read_file(dir.file("w.imwt"));
  io::write_file(dir.file("short.imwt"),
                 {reinterpret_cast<const std::byte*>(data.data()), data.size() - 9});
  zoo::Model victim = zoo::Model::build(zoo::preset("toy"), 21);
  CHECK_THROWS_AS(io::load_weights(victim, dir.file("short.imwt")), Error);

  std::string corrupt = data;
  corrupt[0] = 'Z';
  io::write_file(dir.file("bad.imwt"), {reinterpret_cast<const std::byte*>(corrupt.data()), corrupt.size()});
  CHECK_THROWS_AS(io::load_weights(victim, dir.file("bad.imwt")), Error);
}

TEST_CASE("pgm: constant plane maps to mid gray") {
  TempDir dir;
  io::write_pgm(Tensor::full({4, 6}, 3.25), dir.file("c.pgm"));
  const std::string data = io::read_file(dir.file("c.pgm"));
  CHECK(data.rfind("P5\n6 4\n255\n", 0) == 0);
  for (size_t i = data.size() - 24; i < data.size(); ++i)
    CHECK(static_cast<uint8_t>(data[i]) == 128);
}

TEST_CASE("cosine csv: duplicated channels score 1.0, zero channels 0.0") {
  Tensor f = Tensor::zeros({1, 3, 2, 2});
  const float vals[4] = {0.4f, -1.0f, 2.0f, 0.7f};
  for (int64_t s = 0; s < 4; ++s) {
    f.set(0 * 4 + s, vals[s]);
    f.set(1 * 4 + s, vals[s]);  // duplicate of channel 0
    // channel 2 stays zero
  }
  const std::string csv = io::cosine_csv(f);
  CHECK(csv.find("0,1,1.000000") != std::string::npos);
  CHECK(csv.find("0,2,0.000000") != std::string::npos);
  CHECK(csv.rfind("channel_i,channel_j,cosine", 0) == 0);
}

TEST_CASE("dump_features: one graymap per channel plus the csv") {
  TempDir dir;
  zoo::Model m = zoo::Model::build(zoo::preset("toy"), 23);
  Rng rng(83);
  Tensor x = rng.tensor_normal({1, 3, 32, 32}, 0, 1);
  io::FeatureDump dump = io::dump_features(m, x, 1, 0, dir.file("features"));
  CHECK(dump.channels == 32);
  CHECK(dump.image_files.size() == 32);
  for (const std::string& p : dump.image_files) CHECK(fs::exists(p));
  CHECK(fs::exists(dump.csv_file));
  const std::string first = io::read_file(dump.image_files[0]);
  CHECK(first.rfind("P5\n8 8\n255\n", 0) == 0);
}
