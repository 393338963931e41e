#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <fstream>

#include "doctest.h"
#include "gift/io.hpp"
#include "gift/transformer.hpp"
#include "test_util.hpp"

using namespace gift;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 16;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.d_ff = 32;
  cfg.max_seq = 16;
  return cfg;
}

}  // namespace

TEST_CASE("checkpoint round-trip reproduces forward logits bitwise") {
  const auto cfg = tiny_config();
  auto ckpt = init_params<float>(cfg, 77);
  const auto dir = gift_test::temp_dir("ckpt");
  const std::string path = (dir / "model.bin").string();
  save_checkpoint(path, ckpt);
  auto loaded = load_checkpoint<float>(path);
  CHECK(checkpoints_equal(ckpt, loaded));

  std::vector<int> tokens = {1, 2, 3, 4, 5, 6, 7};
  auto a = forward_logits(ckpt, tokens);
  auto b = forward_logits(loaded, tokens);
  CHECK(a->data == b->data);

  // Same content saved twice gives identical bytes.
  const std::string path2 = (dir / "model2.bin").string();
  save_checkpoint(path2, ckpt);
  CHECK(read_file_bytes(path) == read_file_bytes(path2));
  std::filesystem::remove_all(dir);
}

TEST_CASE("adapter round-trip preserves factors and hyperparameters") {
  const auto cfg = tiny_config();
  auto ad = init_adapter<float>(cfg, default_lora_targets(cfg), 4, 8.0, 0.05, 9);
  Rng rng(10);
  for (auto& f : ad.factors)
    for (auto& v : f.b->data) v = static_cast<float>(0.02 * rng.normal());
  const auto dir = gift_test::temp_dir("adapter");
  const std::string path = (dir / "adapter.bin").string();
  save_adapter(path, ad);
  auto loaded = load_adapter<float>(path);
  CHECK(loaded.rank == 4);
  CHECK(loaded.alpha == 8.0);
  CHECK(loaded.dropout_p == 0.05);
  REQUIRE(loaded.targets == ad.targets);
  for (std::size_t i = 0; i < ad.factors.size(); ++i) {
    CHECK(loaded.factors[i].a->data == ad.factors[i].a->data);
    CHECK(loaded.factors[i].b->data == ad.factors[i].b->data);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("container validation catches mismatched kind, magic, version") {
  const auto cfg = tiny_config();
  const auto dir = gift_test::temp_dir("container");
  const std::string ck_path = (dir / "c.bin").string();
  const std::string ad_path = (dir / "a.bin").string();
  save_checkpoint(ck_path, init_params<float>(cfg, 1));
  save_adapter(ad_path,
               init_adapter<float>(cfg, default_lora_targets(cfg), 2, 4.0, 0.0, 2));

  CHECK_THROWS_AS(load_adapter<float>(ck_path), schema_error);
  CHECK_THROWS_AS(load_checkpoint<float>(ad_path), schema_error);

  auto bytes = read_file_bytes(ck_path);
  {
    auto bad = bytes;
    bad[0] = 'X';
    const std::string p = (dir / "badmagic.bin").string();
    std::ofstream(p, std::ios::binary).write(bad.data(), static_cast<std::streamsize>(bad.size()));
    CHECK_THROWS_AS(load_checkpoint<float>(p), schema_error);
  }
  {
    auto bad = bytes;
    bad[4] = 9;  // unsupported version
    const std::string p = (dir / "badver.bin").string();
    std::ofstream(p, std::ios::binary).write(bad.data(), static_cast<std::streamsize>(bad.size()));
    CHECK_THROWS_AS(load_checkpoint<float>(p), schema_error);
  }
  {
    // Truncated payload: offsets run past the data.
    auto bad = bytes;
    bad.resize(bad.size() - 64);
    const std::string p = (dir / "trunc.bin").string();
    std::ofstream(p, std::ios::binary).write(bad.data(), static_cast<std::streamsize>(bad.size()));
    CHECK_THROWS_AS(load_checkpoint<float>(p), schema_error);
  }
  CHECK_THROWS_AS(load_checkpoint<float>((dir / "missing.bin").string()), io_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("wide-mode load carries float32 payload values exactly") {
  const auto cfg = tiny_config();
  auto ckpt = init_params<float>(cfg, 5);
  const auto dir = gift_test::temp_dir("wide");
  const std::string path = (dir / "model.bin").string();
  save_checkpoint(path, ckpt);
  auto wide = load_checkpoint<double>(path);
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i)
    for (std::size_t j = 0; j < ckpt.tensors[i]->numel(); ++j)
      CHECK(wide.tensors[i]->data[j] ==
            static_cast<double>(ckpt.tensors[i]->data[j]));
  std::filesystem::remove_all(dir);
}
