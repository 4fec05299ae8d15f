#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>

#include "ecglang/checkpoint.hpp"
#include "ecglang/io.hpp"
#include "ecglang/nn.hpp"
#include "ecglang/rng.hpp"

using namespace ecglang;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("ecglang_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(io::sha256_hex(std::string()),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(io::sha256_hex(std::string("abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(
      io::sha256_hex(std::string(
          "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq")),
      "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
}

TEST(Checkpoint, RoundTripIsBitExact) {
  nn::ParamStore<double> store;
  Rng rng(4);
  store.add("w", nn::fan_in_init<double>({3, 5}, 5, rng));
  store.add("b", Tensor<double>::zeros({3}));
  store.add("running", Tensor<double>::full({2}, 0.25), false);

  nlohmann::json cfg{{"dim", 5}, {"name", "toy"}};
  nlohmann::json extra{{"epochs", 3}};
  auto c = ckpt::make_checkpoint("toy_stage", cfg, store, extra);

  auto dir = temp_dir("ckpt");
  auto path = dir / "model.ckpt";
  ckpt::save_checkpoint(c, path);
  auto loaded = ckpt::load_checkpoint(path);

  EXPECT_EQ(loaded.kind, "toy_stage");
  EXPECT_EQ(loaded.config.at("dim").get<int>(), 5);
  EXPECT_EQ(loaded.extra.at("epochs").get<int>(), 3);
  ASSERT_EQ(loaded.tensors.size(), 3u);
  EXPECT_EQ(loaded.tensors[0].first, "w");
  for (const auto& [name, t] : loaded.tensors) {
    const Tensor<double>& src = store.at(name);
    ASSERT_EQ(t.shape(), src.shape());
    for (int64_t i = 0; i < t.numel(); ++i)
      EXPECT_EQ(t.data()[i], static_cast<float>(src[i])) << name << " " << i;
  }
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, LoadIntoRestoresParams) {
  Rng rng(9);
  nn::ParamStore<double> a;
  a.add("w", nn::fan_in_init<double>({4, 4}, 4, rng));
  a.add("b", nn::fan_in_init<double>({4}, 4, rng));

  auto dir = temp_dir("ckpt_into");
  auto path = dir / "m.ckpt";
  ckpt::save_checkpoint(ckpt::make_checkpoint("s", {}, a), path);

  nn::ParamStore<double> b;
  b.add("w", Tensor<double>::zeros({4, 4}));
  b.add("b", Tensor<double>::zeros({4}));
  ckpt::load_into(ckpt::load_checkpoint(path), b);
  for (int64_t i = 0; i < 16; ++i)
    EXPECT_EQ(b.at("w")[i], static_cast<double>(static_cast<float>(a.at("w")[i])));

  nn::ParamStore<double> wrong;
  wrong.add("w", Tensor<double>::zeros({2, 2}));
  EXPECT_THROW(ckpt::load_into(ckpt::load_checkpoint(path), wrong), DataError);

  nn::ParamStore<double> missing;
  missing.add("other", Tensor<double>::zeros({4}));
  EXPECT_THROW(ckpt::load_into(ckpt::load_checkpoint(path), missing),
               DataError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  auto dir = temp_dir("ckpt_bad");
  auto good = dir / "good.ckpt";
  nn::ParamStore<float> store;
  store.add("w", Tensor<float>::full({2, 2}, 1.5f));
  ckpt::save_checkpoint(ckpt::make_checkpoint("s", {}, store), good);

  auto bytes = io::read_binary(good);
  bytes[0] = 'X';
  auto bad_magic = dir / "bad_magic.ckpt";
  io::write_binary_atomic(bad_magic, bytes.data(), bytes.size());
  EXPECT_THROW(ckpt::load_checkpoint(bad_magic), DataError);

  bytes = io::read_binary(good);
  auto truncated = dir / "truncated.ckpt";
  io::write_binary_atomic(truncated, bytes.data(), bytes.size() - 8);
  EXPECT_THROW(ckpt::load_checkpoint(truncated), DataError);

  bytes = io::read_binary(good);
  bytes[4] = 99;  // unsupported version
  auto bad_version = dir / "bad_version.ckpt";
  io::write_binary_atomic(bad_version, bytes.data(), bytes.size());
  EXPECT_THROW(ckpt::load_checkpoint(bad_version), DataError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RefusesNonFiniteTensors) {
  nn::ParamStore<float> store;
  store.add("w", Tensor<float>::full({2}, 1.0f));
  store.at("w")[1] = std::numeric_limits<float>::infinity();
  auto dir = temp_dir("ckpt_nan");
  EXPECT_THROW(
      ckpt::save_checkpoint(ckpt::make_checkpoint("s", {}, store),
                            dir / "m.ckpt"),
      NumericError);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, SaveIsDeterministic) {
  nn::ParamStore<float> store;
  Rng rng(12);
  store.add("w", nn::fan_in_init<float>({8, 8}, 8, rng));
  auto dir = temp_dir("ckpt_det");
  auto a = dir / "a.ckpt";
  auto b = dir / "b.ckpt";
  ckpt::save_checkpoint(ckpt::make_checkpoint("s", {{"k", 1}}, store), a);
  ckpt::save_checkpoint(ckpt::make_checkpoint("s", {{"k", 1}}, store), b);
  EXPECT_EQ(io::sha256_file(a), io::sha256_file(b));
  std::filesystem::remove_all(dir);
}
