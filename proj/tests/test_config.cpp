#include <doctest.h>

#include "speechrl/config.hpp"
#include "speechrl/pipeline.hpp"

using namespace speechrl;

namespace {

std::string error_of(std::string_view text) {
  try {
    Config::parse(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("parses the supported value kinds") {
  const auto c = Config::parse(R"(
# comment
seed = 7
[sft]
learning_rate = 1e-3   # trailing comment
name = "mix # not a comment"
on = true
[sweep]
gammas = [0, 0.25, 1]
[a.b]
x = -3
)");
  CHECK(c.get_int("seed", 0) == 7);
  CHECK(c.get_double("sft.learning_rate", 0) == 1e-3);
  CHECK(c.get_string("sft.name", "") == "mix # not a comment");
  CHECK(c.get_bool("sft.on", false));
  CHECK(c.get_doubles("sweep.gammas", {}) == std::vector<double>{0, 0.25, 1});
  CHECK(c.get_int("a.b.x", 0) == -3);
  CHECK(c.get_double("seed", 0) == 7.0);  // integers read as numbers
  CHECK(c.get_int("missing", 42) == 42);
  c.check_all_used();
}

TEST_CASE("type mismatches and unknown keys") {
  const auto c = Config::parse("a = \"x\"\nb = 1.5\nc = 2\n");
  CHECK_THROWS_AS(c.get_int("a", 0), ConfigError);
  CHECK_THROWS_AS(c.get_int("b", 0), ConfigError);
  CHECK_THROWS_AS(c.get_bool("c", false), ConfigError);
  const auto d = Config::parse("used = 1\nstray = 2\n");
  d.get_int("used", 0);
  try {
    d.check_all_used();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("stray") != std::string::npos);
  }
  CHECK_THROWS_AS(Config::parse("n = -1").get_u64("n", 0), ConfigError);
}

TEST_CASE("syntax errors name the line") {
  CHECK(error_of("a = 1\nb 2\n").find("line 2") != std::string::npos);
  CHECK(error_of("a = 1\n[bad\n").find("line 2") != std::string::npos);
  CHECK(error_of("x = 1\nx = 2\n").find("duplicate") != std::string::npos);
  CHECK(error_of("[s]\nx = \"open\n").find("line 2") != std::string::npos);
  CHECK_FALSE(error_of("x = [1, 2").empty());
  CHECK_THROWS_AS(Config::load("/nonexistent/speechrl.toml"), ConfigError);
}

TEST_CASE("canonical form ignores layout") {
  const auto a = Config::parse("[s]\nx = 1.50\ny = \"v\"\n");
  const auto b = Config::parse("s.y=\"v\"   \n\n# c\ns.x = 1.5\n");
  CHECK(a.canonical() == b.canonical());
}

TEST_CASE("experiment config: defaults, overrides and round trip") {
  const ExperimentConfig def;
  def.validate();
  CHECK(ExperimentConfig::from_config(Config::parse("")).canonical() == def.canonical());

  const auto e = ExperimentConfig::from_config(Config::parse("seed = 9\n[ppo]\nkl_coeff = 0.2\n[sweep]\ngammas = [0, 1]\n"));
  CHECK(e.seed == 9);
  CHECK(e.ppo.kl_coeff == 0.2);
  CHECK(e.gammas == std::vector<double>{0, 1});
  CHECK(e.hash() != def.hash());

  // The canonical dump is itself a valid config that reproduces the settings.
  const auto back = ExperimentConfig::from_config(Config::parse(e.canonical()));
  CHECK(back.canonical() == e.canonical());
  CHECK(back.hash() == e.hash());

  CHECK_THROWS_AS(ExperimentConfig::from_config(Config::parse("[ppo]\nno_such_knob = 1\n")), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_config(Config::parse("[model]\nvocab_size = 20\n")), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_config(Config::parse("[reward]\nmp_source = \"crowd\"\n")), ConfigError);
}

TEST_CASE("stage names") {
  for (auto s : {Stage::kGenData, Stage::kTrainCodebook, Stage::kTokenize, Stage::kPretrain, Stage::kSft,
                 Stage::kTrainMp, Stage::kRlhf, Stage::kSweepGamma, Stage::kEval, Stage::kReport})
    CHECK(parse_stage(stage_name(s)) == s);
  CHECK_THROWS_AS(parse_stage("nope"), ArgumentError);
  CHECK(gamma_tag(0.0) == "g0.00");
  CHECK(gamma_tag(0.25) == "g0.25");
}
