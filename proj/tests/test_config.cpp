#include <gtest/gtest.h>

#include <filesystem>

#include "voxkit/config.hpp"

using namespace voxkit;

namespace {

std::string message_of(const nlohmann::json& j, ErrorCode expect = ErrorCode::ConfigError) {
  try {
    parse_run_config(j);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), expect);
    return e.what();
  }
  ADD_FAILURE() << "expected an Error";
  return {};
}

}  // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
  const RunConfig c = parse_run_config(nlohmann::json::object());
  EXPECT_EQ(c.model.dim, 128);
  EXPECT_EQ(c.sampler.mode, ConfidenceMode::SelfCritic);
  EXPECT_EQ(c.eval.steps, (std::vector<int>{4, 8, 16}));
  EXPECT_EQ(c.eval.seeds, 5);
  EXPECT_EQ(c.task, Task::Enhancement);
}

TEST(Config, JsonRoundTrip) {
  nlohmann::json j = {{"model", {{"dim", 64}, {"heads", 4}, {"corpus", "tokenized-audio"}}},
                      {"sampler", {{"mode", "vanilla"}, {"temperature", 0.5}}},
                      {"degradation", {{"snr_db", {0, 10}}, {"task", "extraction"}}},
                      {"eval", {{"modes", {"self_critic"}}, {"steps", {2, 3}}}}};
  const RunConfig c = parse_run_config(j);
  EXPECT_EQ(c.model.dim, 64);
  EXPECT_EQ(c.model.corpus, "tokenized-audio");
  EXPECT_EQ(c.sampler.mode, ConfidenceMode::Vanilla);
  EXPECT_EQ(c.degradation.snr_db_max, 10.0);
  EXPECT_EQ(c.task, Task::Extraction);
  EXPECT_EQ(c.eval.modes, std::vector<ConfidenceMode>{ConfidenceMode::SelfCritic});
  EXPECT_EQ(to_json(parse_run_config(to_json(c))), to_json(c));
}

TEST(Config, UnknownKeysAreNamed) {
  EXPECT_NE(message_of({{"model", {{"dimm", 3}}}}).find("'model.dimm'"), std::string::npos);
  EXPECT_NE(message_of({{"sampler", {{"steps", 4}, {"tempreature", 1}}}}).find("'sampler.tempreature'"),
            std::string::npos);
  EXPECT_NE(message_of({{"modle", {}}}).find("'modle'"), std::string::npos);
}

TEST(Config, BadValuesAreNamed) {
  EXPECT_NE(message_of({{"model", {{"dim", "wide"}}}}).find("'model.dim'"), std::string::npos);
  EXPECT_NE(message_of({{"degradation", {{"snr_db", {1, 2, 3}}}}}).find("'degradation.snr_db'"), std::string::npos);
  EXPECT_NE(message_of({{"degradation", {{"eq_bells", {1}}}}}).find("eq_bells"), std::string::npos);
  message_of({{"sampler", {{"mode", "greedy"}}}});
  message_of({{"model", {{"corpus", "mp3"}}}});
  message_of({{"eval", {{"steps", {0}}}}});
  message_of({{"audio", {{"hop", 4096}}}});
  message_of({{"degradation", {{"p_noise", 1.5}}}});
  message_of(nlohmann::json::array());
  message_of({{"model", 3}});
}

TEST(Config, LoadFromFile) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto good = dir / "voxkit_cfg_good.json";
  const auto bad = dir / "voxkit_cfg_bad.json";
  detail::write_file_atomic(good, std::string_view(R"({"model": {"batch": 3}})"));
  detail::write_file_atomic(bad, std::string_view("{ not json"));
  EXPECT_EQ(load_run_config(good).model.batch, 3);
  try {
    load_run_config(bad);
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigError);
  }
  try {
    load_run_config(dir / "voxkit_cfg_missing.json");
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigError);
  }
  std::filesystem::remove(good);
  std::filesystem::remove(bad);
}

TEST(Config, TrainConfigMapping) {
  RunConfig c = parse_run_config({{"model", {{"dim", 32}, {"heads", 2}, {"lr", 0.01}}}, {"tokenizer", {{"vocab", 16}}}});
  const TrainConfig t = c.train_config(40);
  EXPECT_EQ(t.model.input_bins, 40);
  EXPECT_EQ(t.model.dim, 32);
  EXPECT_EQ(t.model.vocab, 16);
  EXPECT_EQ(t.lr, 0.01);
  EXPECT_EQ(t.seed, c.model_seed());
  EXPECT_NE(c.data_seed(), c.model_seed());
  EXPECT_NE(c.model_seed(), c.sampler_seed());
  const std::uint64_t before = c.data_seed();
  c.base_seed = 9;
  EXPECT_NE(c.data_seed(), before);
  c.model.heads = 3;  // 32 / 3 does not split
  EXPECT_THROW(c.train_config(40), Error);
}
