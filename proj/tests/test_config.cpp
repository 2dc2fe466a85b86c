#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "mvi2p/config.hpp"

using namespace mvi2p;
namespace fs = std::filesystem;

TEST_CASE("defaults carry the full-protocol constants") {
  RunConfig c;
  CHECK(c.lambda == 0.007);
  CHECK(c.M == 4);
  CHECK(c.P == 8);
  CHECK(c.K == 8);
  CHECK(c.P * c.K == 64);
  CHECK(c.epsilon == 0.1);
  CHECK(c.lr == 3e-4);
  CHECK(c.lr_decay_factor == 0.1);
  CHECK(c.lr_decay_epochs == std::vector<int>{40, 70});
  CHECK(c.epochs == 120);
  CHECK(c.variant == Variant::IP_L_Q);
  CHECK(c.detach_teacher);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("desk preset scales the schedule") {
  RunConfig d = RunConfig::desk_scale();
  CHECK(d.epochs == 30);
  CHECK(d.lr_decay_epochs == std::vector<int>{10, 17});
  CHECK(d.lambda == 0.007);
  CHECK(d.M == 4);
  CHECK_NOTHROW(d.validate());
}

TEST_CASE("derived module configs mirror the run config") {
  RunConfig c;
  c.set("num_ids", "12");
  c.set("gem_p", "2.5");
  CHECK(c.split_config().num_ids == 12);
  CHECK(c.loss_config().gem_p == 2.5);
  CHECK(c.loss_config().views_per_group == 4);
  CHECK(c.backbone_config().feature_channels() == 64);
  CHECK(lr_at(c.schedule(), 40) == doctest::Approx(3e-5));
}

TEST_CASE("set and get round trip every key") {
  RunConfig c;
  for (const auto& key : RunConfig::keys()) {
    RunConfig d;
    d.set(key, c.get(key));
    CHECK(d.get(key) == c.get(key));
  }
  c.set("lambda", "0.3");
  CHECK(c.get("lambda") == "0.3");
  c.set("variant", "ip_l");
  CHECK(c.variant == Variant::IP_L);
  c.set("detach_teacher", "no");
  CHECK_FALSE(c.detach_teacher);
  c.set("stage_channels", "8,8,16");
  CHECK(c.stage_channels == std::vector<std::size_t>{8, 8, 16});
}

TEST_CASE("bad keys and values raise ConfigError") {
  RunConfig c;
  CHECK_THROWS_AS(c.set("lamda", "1"), ConfigError);
  CHECK_THROWS_AS(c.set("lambda", "abc"), ConfigError);
  CHECK_THROWS_AS(c.set("lambda", "0.1x"), ConfigError);
  CHECK_THROWS_AS(c.set("P", "-3"), ConfigError);
  CHECK_THROWS_AS(c.set("detach_teacher", "maybe"), ConfigError);
  CHECK_THROWS_AS(c.set("variant", "nope"), ConfigError);
}

TEST_CASE("validation rules") {
  auto invalid = [](const char* key, const char* value) {
    RunConfig c;
    c.set(key, value);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  invalid("M", "3");      // does not divide K=8
  invalid("epochs", "0");
  invalid("lambda", "-0.1");
  invalid("num_cams", "1");
  invalid("P", "30");     // more identities than the 25 training ones
  invalid("epsilon", "1");
  invalid("lr_decay_epochs", "5,5");
  RunConfig ok;
  ok.set("M", "1");
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("text parsing with comments and located errors") {
  RunConfig c;
  c.apply_text("# a run\nlambda = 0.05  # stronger\n\nM=2\n", "x.cfg");
  CHECK(c.lambda == 0.05);
  CHECK(c.M == 2);
  try {
    c.apply_text("epochs=3\nbogus=1\n", "x.cfg");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("x.cfg:2") != std::string::npos);
  }
  CHECK_THROWS_AS(c.apply_text("no equals sign\n"), ConfigError);
}

TEST_CASE("precedence: default < file < explicit overrides") {
  const fs::path path = fs::temp_directory_path() / "mvi2p_test.cfg";
  std::ofstream(path) << "lambda=0.05\nepochs=7\n";
  RunConfig c;
  CHECK(c.lambda == 0.007);
  c.apply_file(path);
  CHECK(c.lambda == 0.05);
  CHECK(c.epochs == 7);
  c.apply({{"lambda", "0.001"}});
  CHECK(c.lambda == 0.001);
  CHECK(c.epochs == 7);
  fs::remove(path);
  CHECK_THROWS_AS(c.apply_file(path), ConfigError);
}

TEST_CASE("resolved listing reproduces the config") {
  RunConfig c = RunConfig::desk_scale();
  c.set("seed", "4");
  c.set("lambda", "0.3");
  RunConfig d;
  d.apply_text(c.to_text());
  CHECK(d.to_text() == c.to_text());
  CHECK(d.hash() == c.hash());
  CHECK(c.to_text().find("lambda=0.3\n") != std::string::npos);
}

TEST_CASE("hash tracks settings but not locations") {
  RunConfig a, b;
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);
  b.output_dir = "elsewhere";
  b.corpus = "/tmp/corpus";
  CHECK(a.hash() == b.hash());
  b.seed = 1;
  CHECK(a.hash() != b.hash());
}
