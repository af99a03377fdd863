#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "kgedit/error.hpp"
#include "kgedit/kgemodel.hpp"
#include "test_support.hpp"

using namespace kgedit;
using namespace kgedit::model;
using kgedit::testing::oracle_rank;
using kgedit::testing::TempDir;
using kgedit::testing::tiny_config;
using kgedit::testing::tiny_model;

namespace {

std::vector<kg::QueryKey> some_keys(std::size_t entities, std::size_t relations, std::size_t n,
                                    std::uint64_t seed) {
  Rng rng(seed);
  std::vector<kg::QueryKey> keys;
  for (std::size_t i = 0; i < n; ++i) {
    keys.push_back({rng.below(2) == 0 ? kg::Direction::tail_query : kg::Direction::head_query,
                    static_cast<kg::EntityId>(rng.below(entities)),
                    static_cast<kg::RelationId>(rng.below(relations))});
  }
  return keys;
}

kg::Graph small_graph() { return kg::synthesize_graph({12, 3, 40, 4}); }

}  // namespace

TEST(ModelConfig, Validation) {
  auto c = tiny_config(5, 2);
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config(5, 2);
  c.entity_vocab_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config(5, 2);
  c.max_seq_len = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_head("pt"), HeadKind::pt);
  EXPECT_THROW(parse_head("xx"), ConfigError);
}

TEST(Model, TokenLayoutPutsEntitiesAfterWords) {
  kg::Vocabulary ents;
  for (const char* n : {"a", "b", "c"}) ents.add(n);
  const auto desc = Descriptions::build(ents, {{"a", "red fox"}, {"c", "fox den extra"}}, 2);
  EXPECT_EQ(desc.words, (std::vector<std::string>{"red", "fox", "den"}));
  EXPECT_EQ(desc.entity_words[2], (std::vector<std::uint32_t>{1, 2}));
  auto config = tiny_config(3, 2);
  BaseModel m(config, desc);
  EXPECT_EQ(m.config().word_vocab_size, 3u);
  EXPECT_EQ(m.relation_token(1), kNumSpecial + 1);
  EXPECT_EQ(m.entity_token(0), kNumSpecial + 2 + 3);
  EXPECT_EQ(m.vocab_size(), kNumSpecial + 2 + 3 + 3);
  const auto q = m.make_query({kg::Direction::tail_query, 2, 1});
  EXPECT_EQ(q.tokens, (std::vector<std::size_t>{kCls, m.entity_token(2), kNumSpecial + 2 + 1,
                                                kNumSpecial + 2 + 2, m.relation_token(1), kMask, kSep}));
  EXPECT_EQ(q.tokens[q.mask_position], kMask);
  EXPECT_EQ(std::count(q.tokens.begin(), q.tokens.end(), kMask), 1);
}

TEST(Model, HeadQueryHasOneMaskFirst) {
  auto m = tiny_model(5, 2);
  const auto q = m->make_query({kg::Direction::head_query, 4, 0});
  EXPECT_EQ(q.tokens, (std::vector<std::size_t>{kCls, kMask, m->relation_token(0), m->entity_token(4), kSep}));
  EXPECT_EQ(q.mask_position, 1u);
}

TEST(Model, NamedParamsMatchDeclaredShapes) {
  auto m = tiny_model(7, 3);
  std::size_t total = 0;
  for (const auto& [name, v] : m->named_params()) {
    total += v.value().size();
    if (name == "token_embedding") EXPECT_EQ(v.shape(), (ad::Shape{m->vocab_size(), 8}));
    if (name == "layer1.w1") EXPECT_EQ(v.shape(), (ad::Shape{8, 16}));
    if (name == "layer1.w2") EXPECT_EQ(v.shape(), (ad::Shape{16, 8}));
    if (name == "pt_head.w") EXPECT_EQ(v.shape(), (ad::Shape{8, 7}));
  }
  EXPECT_EQ(total, m->param_count());
}

TEST(Model, ScoreEntitiesIsADistribution) {
  auto m = tiny_model(9, 3);
  for (const auto& key : some_keys(9, 3, 20, 1)) {
    const auto p = m->score_entities(key);
    ASSERT_EQ(p.size(), 9u);
    double s = 0;
    for (double x : p) {
      EXPECT_GE(x, 0.0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Model, RankAgreesWithSortOracle) {
  auto m = tiny_model(11, 3);
  const auto keys = some_keys(11, 3, 30, 2);
  const auto scores = m->ranking_scores(keys);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::span<const double> row(scores.data() + i * 11, 11);
    for (kg::EntityId g = 0; g < 11; ++g) EXPECT_EQ(m->rank(keys[i], g), oracle_rank(row, g));
  }
}

TEST(Model, BatchedScoresEqualSingleQueryScores) {
  auto m = tiny_model(8, 2);
  const auto keys = some_keys(8, 2, 10, 3);
  const auto batched = m->ranking_scores(keys);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const auto one = m->ranking_scores(std::span(&keys[i], 1));
    for (std::size_t e = 0; e < 8; ++e) EXPECT_NEAR(one[e], batched[i * 8 + e], 1e-12);
  }
}

TEST(Model, ReadoutOnlyMatchesFullEncoding) {
  auto m = tiny_model(8, 2);
  const auto keys = some_keys(8, 2, 6, 4);
  std::vector<Query> qs;
  for (const auto& k : keys) qs.push_back(m->make_query(k));
  const auto full = m->encode(qs);
  const auto readout = m->encode(qs, nullptr, true);
  for (std::size_t b = 0; b < qs.size(); ++b) {
    for (std::size_t c = 0; c < 8; ++c) {
      EXPECT_NEAR(readout.hidden.value().at(b, c),
                  full.hidden.value().at(b * full.seq_len + qs[b].mask_position, c), 1e-12);
    }
  }
}

TEST(Model, FtHeadRanksCandidateTriples) {
  auto config = tiny_config(6, 2);
  config.head = HeadKind::ft;
  auto m = std::make_shared<BaseModel>(config);
  const kg::QueryKey key{kg::Direction::head_query, 3, 1};
  const auto scores = m->ranking_scores(std::span(&key, 1));
  for (kg::EntityId e = 0; e < 6; ++e) {
    const double logit = m->triple_logits(std::vector<kg::Triple>{key.complete(e)}).value()[0];
    EXPECT_NEAR(scores[e], logit, 1e-12);
  }
}

TEST(GradCheck, FullModelPtLoss) {
  auto m = tiny_model(6, 2);
  const auto keys = some_keys(6, 2, 4, 5);
  const std::vector<std::size_t> targets{1, 0, 5, 3};
  auto params = m->params();
  const auto report =
      ad::grad_check([&] { return ad::cross_entropy(m->entity_logits(keys), targets); }, params);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
  EXPECT_EQ(report.entries.size(), m->param_count());
}

TEST(GradCheck, FullModelFtLoss) {
  auto config = tiny_config(6, 2);
  config.head = HeadKind::ft;
  BaseModel m(config);
  const std::vector<kg::Triple> triples{{0, 1, 2}, {3, 0, 4}, {5, 1, 1}};
  const std::vector<double> labels{1, 0, 1};
  auto params = m.params();
  ad::GradCheckOptions opts;
  opts.max_coordinates = 400;
  opts.seed = 8;
  const auto report = ad::grad_check(
      [&] { return ad::binary_cross_entropy(m.triple_logits(triples), labels); }, params, opts);
  EXPECT_TRUE(report.passed) << report.max_relative_error;
}

TEST(Freeze, FrozenParamsReceiveNoGradient) {
  auto m = tiny_model(6, 2);
  m->freeze();
  const auto keys = some_keys(6, 2, 3, 6);
  const std::vector<std::size_t> t{0, 1, 2};
  const auto logits = m->entity_logits(keys);
  EXPECT_FALSE(logits.requires_grad());
  for (const auto& v : m->params()) EXPECT_FALSE(v.has_grad());
  m->unfreeze();
  ad::backward(ad::cross_entropy(m->entity_logits(keys), t));
  EXPECT_TRUE(m->params().front().has_grad());
}

TEST(Freeze, CloneIsIndependent) {
  auto m = tiny_model(6, 2);
  const auto before = m->param_hash();
  BaseModel c = m->clone();
  EXPECT_EQ(c.param_hash(), before);
  c.params().front().mutable_value()[0] += 1.0;
  EXPECT_NE(c.param_hash(), before);
  EXPECT_EQ(m->param_hash(), before);
}

TEST(Pretrain, LearnsASmallGraphDeterministically) {
  const auto g = small_graph();
  auto run = [&] {
    BaseModel m(tiny_config(g.entities.size(), g.relations.size()));
    PretrainConfig pc;
    pc.epochs = 40;
    pc.batch_size = 8;
    pc.warmup_steps = 10;
    const auto r = pretrain(m, g, pc);
    return std::make_pair(m.param_hash(), r);
  };
  const auto [hash1, r1] = run();
  const auto [hash2, r2] = run();
  EXPECT_EQ(hash1, hash2);
  EXPECT_EQ(r1.curve.size(), 40u);
  EXPECT_LT(r1.curve.back().loss, 0.75 * r1.curve.front().loss);
  EXPECT_GT(r1.initial_loss, 0.0);
  EXPECT_EQ(r1.curve.back().loss, r2.curve.back().loss);
}

TEST(Pretrain, EarlyStopAtTargetHits) {
  const auto g = small_graph();
  BaseModel m(tiny_config(g.entities.size(), g.relations.size()));
  PretrainConfig pc;
  pc.epochs = 400;
  pc.batch_size = 8;
  pc.warmup_steps = 10;
  pc.target_hits_at_1 = 0.5;
  pc.eval_every = 5;
  const auto r = pretrain(m, g, pc);
  EXPECT_LT(r.epochs_run, 400u);
  EXPECT_EQ(r.epochs_run % 5, 0u);
  EXPECT_GE(r.final_hits_at_1, 0.5);
}

TEST(Pretrain, DivergenceIsReported) {
  const auto g = small_graph();
  BaseModel m(tiny_config(g.entities.size(), g.relations.size()));
  PretrainConfig pc;
  pc.epochs = 50;
  pc.lr = 1e200;
  pc.warmup_steps = 0;
  EXPECT_THROW(pretrain(m, g, pc), DivergenceError);
}

TEST(FilteredHits, MatchesBruteForce) {
  const auto g = small_graph();
  auto m = tiny_model(g.entities.size(), g.relations.size(), 9);
  const auto probes = kg::all_probes(g);
  for (std::size_t k : {1u, 3u}) {
    std::size_t hits = 0;
    for (const auto& p : probes) {
      auto scores = m->ranking_scores(std::vector<kg::QueryKey>{p.key()});
      // Remove the other known answers, then sort.
      for (auto other : g.answers(p.key())) {
        if (other != p.gold()) scores[other] = -1e300;
      }
      hits += oracle_rank(scores, p.gold()) <= k ? 1 : 0;
    }
    EXPECT_DOUBLE_EQ(filtered_hits_at_k(*m, g, k),
                     static_cast<double>(hits) / static_cast<double>(probes.size()));
  }
}

TEST(Checkpoint, RoundTripIsExact) {
  kg::Vocabulary ents;
  for (const char* n : {"a", "b", "c", "d"}) ents.add(n);
  const auto desc = Descriptions::build(ents, {{"b", "blue"}}, 4);
  auto config = tiny_config(4, 2);
  BaseModel m(config, desc);
  const auto bytes = encode_checkpoint(m);
  const BaseModel back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.descriptions(), m.descriptions());
  EXPECT_EQ(back.param_hash(), m.param_hash());
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, Float32KeepsSinglePrecision) {
  auto m = tiny_model(5, 2);
  const BaseModel back = decode_checkpoint(encode_checkpoint(*m, Precision::f32));
  const auto& a = m->named_params();
  const auto& b = back.named_params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].second.value().size(); ++j) {
      EXPECT_EQ(b[i].second.value()[j], static_cast<double>(static_cast<float>(a[i].second.value()[j])));
    }
  }
}

TEST(Checkpoint, FileRoundTripAndCorruption) {
  TempDir dir("ckpt");
  auto m = tiny_model(5, 2);
  save_checkpoint(*m, dir.path() / "m.ckpt");
  EXPECT_EQ(load_checkpoint(dir.path() / "m.ckpt").param_hash(), m->param_hash());
  auto bytes = encode_checkpoint(*m);
  bytes[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}
