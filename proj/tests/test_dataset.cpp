#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "parenlens/dataset.hpp"
#include "parenlens/model.hpp"
#include "support/oracles.hpp"

using namespace parenlens;

TEST_CASE("sub-task helpers") {
  CHECK(classify_subtask("))") == SubTask::kTwo);
  CHECK(classify_subtask("))))") == SubTask::kFour);
  CHECK_THROWS_AS(classify_subtask(")"), InvalidArgument);
  CHECK_THROWS_AS(classify_subtask("]))"), InvalidArgument);
  CHECK(derive_counterfactual(")))") == "))");
  CHECK(parse_sub_task("Three") == SubTask::kThree);
  CHECK_THROWS_AS(parse_sub_task("three"), InvalidArgument);
  CHECK(to_string(SubTask::kFour) == "Four");
}

TEST_CASE("lines and comments") {
  CHECK(build_line("str", 3, "12", false) == "print(str(str(12)))");
  CHECK(build_line("list", 4, "2", true) == "print(list(list(tuple([2]))))");
  CHECK_THROWS_AS(build_line("set", 2, "1", true), InvalidArgument);
  CHECK(comment_for("str", "12") == "#print a string 12");
  CHECK(comment_for("set", "123") == "#print a set containing 123");
}

TEST_CASE("generated records match the enumeration oracle on random configs") {
  const auto vocab = build_vocab();
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const auto cfg = oracle::random_config(rng);
    const auto recs = generate(cfg, vocab);
    const auto want = oracle::enumerate_counts(cfg);
    const auto got = count_sub_tasks(recs);
    CAPTURE(cfg.to_json());
    CHECK(got.counts == want);
  }
}

TEST_CASE("every record is balanced and self-consistent") {
  const auto vocab = build_vocab();
  for (const auto& cfg : {DatasetConfig::paper_mimic(), DatasetConfig::training_grid(), DatasetConfig{}}) {
    const auto recs = generate(cfg, vocab);
    REQUIRE_FALSE(recs.empty());
    for (const auto& r : recs) {
      const auto opens = std::count(r.code_prefix.begin(), r.code_prefix.end(), '(');
      const auto closes = std::count(r.code_prefix.begin(), r.code_prefix.end(), ')');
      CHECK(opens == r.n_open);
      CHECK(closes == r.n_already_closed);
      CHECK(static_cast<std::size_t>(r.n_open - r.n_already_closed) == r.target.size());
      CHECK(static_cast<int>(r.target.size()) == static_cast<int>(r.sub_task));
      CHECK(r.counterfactual.size() + 1 == r.target.size());
      CHECK(r.tokens.front() == vocab.bos());
      CHECK(vocab.token(r.target_id) == r.target);
      CHECK(vocab.token(r.counterfactual_id) == r.counterfactual);
      const auto line = r.full_line();
      CHECK(std::count(line.begin(), line.end(), '(') == std::count(line.begin(), line.end(), ')'));
    }
    CHECK_NOTHROW(check_vocab_consistency(recs, vocab));
  }
}

TEST_CASE("paper-mimic totals sit within ten points of the reference split") {
  const auto c = count_sub_tasks(generate(DatasetConfig::paper_mimic(), build_vocab()));
  CHECK(c.total() == 168);
  const double n = c.total();
  CHECK(std::abs(c[SubTask::kTwo] / n - 56.0 / 168) <= 0.10);
  CHECK(std::abs(c[SubTask::kThree] / n - 84.0 / 168) <= 0.10);
  CHECK(std::abs(c[SubTask::kFour] / n - 28.0 / 168) <= 0.10);
}

TEST_CASE("generation is deterministic and ids are dense") {
  const auto v = build_vocab();
  auto a = generate(DatasetConfig::paper_mimic(), v), b = generate(DatasetConfig::paper_mimic(), v);
  std::ostringstream sa, sb;
  write_jsonl(sa, a);
  write_jsonl(sb, b);
  CHECK(sa.str() == sb.str());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].id == static_cast<int>(i));
}

TEST_CASE("JSONL round trip") {
  const auto v = build_vocab();
  auto recs = generate(DatasetConfig::paper_mimic(), v);
  std::stringstream ss;
  write_jsonl(ss, recs);
  auto back = read_jsonl(ss);
  REQUIRE(back.size() == recs.size());
  CHECK(to_jsonl_line(back[17]) == to_jsonl_line(recs[17]));
  CHECK_THROWS_AS(from_jsonl_line("{\"id\": 1}"), MismatchError);
  testing::TempDir dir("ds");
  save_dataset(dir / "d.jsonl", recs);
  CHECK(load_dataset(dir / "d.jsonl").size() == recs.size());
}

TEST_CASE("config JSON") {
  auto c = DatasetConfig::from_json(R"({"preset": "paper-mimic"})");
  CHECK(c.literals.size() == 14);
  CHECK(DatasetConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS_AS(DatasetConfig::from_json(R"({"constructors": []})"), ConfigError);
  CHECK_THROWS_AS(DatasetConfig::from_json(R"({"constructors": ["dict"]})"), ConfigError);
  CHECK_THROWS_AS(DatasetConfig::from_json(R"({"depth_max": 13})"), ConfigError);
  CHECK_THROWS_AS(DatasetConfig::from_json(R"({"literals": ["1a"]})"), ConfigError);
  CHECK_THROWS_AS(DatasetConfig::from_json(R"({"colour": 1})"), ConfigError);
  CHECK_THROWS_AS(DatasetConfig::from_json("not json"), ConfigError);
}

TEST_CASE("vocab consistency catches tampered records") {
  const auto v = build_vocab();
  auto recs = generate(DatasetConfig::paper_mimic(), v);
  recs[3].tokens[2] = 5;
  CHECK_THROWS_AS(check_vocab_consistency(recs, v), MismatchError);
}

TEST_CASE("accuracy bookkeeping") {
  const auto v = build_vocab();
  auto recs = generate(DatasetConfig::paper_mimic(), v);
  auto c = ModelConfig::tiny_default(static_cast<int>(v.size()));
  c.n_layers = 1;
  const auto w = init_random<float>(c, 3);
  auto acc = evaluate_accuracy(w, c, recs);
  CHECK(acc.total.total() == 168);
  CHECK(acc.predictions.size() == 168);
  int correct = 0;
  for (const auto& p : acc.predictions) correct += p.correct();
  CHECK(correct == acc.correct.total());
  auto small = c;
  small.vocab_size = 10;
  CHECK_THROWS_AS(evaluate_accuracy(init_random<float>(small, 1), small, recs), MismatchError);
}
