#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "hyperlora/serialize.hpp"

using namespace hyperlora;

namespace {

std::filesystem::path temp_dir() {
  auto p = std::filesystem::temp_directory_path() / "hyperlora_test_serialize";
  std::filesystem::create_directories(p);
  return p;
}

WeightFile sample_file() {
  WeightFile wf;
  wf.meta["task_id"] = "reverse";
  wf.meta["rank"] = "4";
  Tensor<float> a({2, 3});
  for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = 0.25f * float(i) - 0.5f;
  Tensor<float> b({4});
  b[0] = -0.0f;
  b[1] = 1e-30f;
  b[2] = 3.14159f;
  b[3] = -65504.0f;
  wf.add("layer0.A", a);
  wf.add("layer0.B", b);
  return wf;
}

}  // namespace

TEST_CASE("encode/decode round-trips bit-exactly") {
  WeightFile wf = sample_file();
  std::string bytes = encode_weight_file(wf);
  WeightFile back = decode_weight_file(bytes);
  CHECK(back.meta == wf.meta);
  REQUIRE(back.tensors.size() == wf.tensors.size());
  for (std::size_t i = 0; i < wf.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == wf.tensors[i].name);
    CHECK(back.tensors[i].shape == wf.tensors[i].shape);
    CHECK(back.tensors[i].offset == wf.tensors[i].offset);
  }
  REQUIRE(back.payload.size() == wf.payload.size());
  for (std::size_t i = 0; i < wf.payload.size(); ++i)
    REQUIRE(detail::float_bits(back.payload[i]) ==
            detail::float_bits(wf.payload[i]));
}

TEST_CASE("encoding is byte-stable (little-endian, fixed layout)") {
  // identical input must give identical bytes; header starts with the magic
  WeightFile wf = sample_file();
  std::string a = encode_weight_file(wf);
  std::string b = encode_weight_file(wf);
  CHECK(a == b);
  CHECK(a.substr(0, 8) == "HLWF0001");
  // version 1 little-endian after magic
  CHECK(static_cast<unsigned char>(a[8]) == 1);
  CHECK(static_cast<unsigned char>(a[9]) == 0);
}

TEST_CASE("get retrieves by name, missing name throws") {
  WeightFile wf = sample_file();
  Tensor<float> a = wf.get("layer0.A");
  CHECK(a.shape() == std::vector<std::int64_t>{2, 3});
  CHECK(a(0, 1) == -0.25f);
  CHECK(wf.has("layer0.B"));
  CHECK(!wf.has("layer9.Z"));
  CHECK_THROWS_AS(wf.get("layer9.Z"), StructuralError);
}

TEST_CASE("save/load through the filesystem") {
  auto path = temp_dir() / "sub" / "wf.bin";
  std::filesystem::remove_all(temp_dir() / "sub");
  WeightFile wf = sample_file();
  save_weight_file(wf, path);  // creates parent dirs
  WeightFile back = load_weight_file(path);
  CHECK(back.meta_or("task_id", "?") == "reverse");
  Tensor<float> b = back.get("layer0.B");
  CHECK(detail::float_bits(b[3]) == detail::float_bits(-65504.0f));
  std::filesystem::remove_all(temp_dir());
}

TEST_CASE("corrupt inputs raise io errors") {
  WeightFile wf = sample_file();
  std::string bytes = encode_weight_file(wf);
  SECTION("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_weight_file(bad), IoError);
  }
  SECTION("bad version") {
    std::string bad = bytes;
    bad[8] = 99;
    CHECK_THROWS_AS(decode_weight_file(bad), IoError);
  }
  SECTION("truncated") {
    std::string bad = bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(decode_weight_file(bad), IoError);
  }
  SECTION("missing file") {
    CHECK_THROWS_AS(load_weight_file("/nonexistent/nowhere.bin"), IoError);
  }
}

TEST_CASE("content hash is stable and content-sensitive") {
  auto dir = temp_dir();
  auto p1 = dir / "h1.bin";
  auto p2 = dir / "h2.bin";
  write_file(p1, "hello world");
  write_file(p2, "hello world");
  CHECK(file_content_hash(p1) == file_content_hash(p2));
  write_file(p2, "hello worle");
  CHECK(file_content_hash(p1) != file_content_hash(p2));
  CHECK(hash_hex(0x1234abcdull) == "000000001234abcd");
  std::filesystem::remove_all(dir);
}
