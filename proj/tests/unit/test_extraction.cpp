#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <thread>

#include "support/expect.hpp"
#include "xlab/extraction.hpp"
#include "xlab/metrics.hpp"

using namespace xlab;

namespace {

LabeledDataset pool_of(std::size_t per_class, std::uint64_t seed = 1) {
  SynthConfig s;
  s.num_classes = 20;
  s.samples_per_class = per_class;
  s.side = 16;
  s.seed = seed;
  s.template_seed = 99;
  return synth_generate(s, DatasetRole::adversary_pool, "pool");
}

Model victim() { return build_model(cnn_small({1, 16, 16}, 4), 17); }

ExtractionConfig config(std::size_t budget) {
  ExtractionConfig c;
  c.budget = budget;
  c.surrogate_spec = mlp_wide({1, 16, 16}, 4);
  c.train_config.max_epochs = 2;
  c.train_config.seed = 5;
  c.seed = 7;
  return c;
}

// Oracle double that misbehaves on demand.
class FakeOracle final : public Oracle {
 public:
  FakeOracle(Model m, std::size_t fail_after, bool malformed)
      : inner_(std::move(m)), fail_after_(fail_after), malformed_(malformed) {}
  Tensor<float> query(const Tensor<float>& batch) override {
    if (served_ >= fail_after_) throw Error(Errc::budget_exhausted, "fake oracle out of budget");
    served_ += batch.dim(0);
    Tensor<float> rows = inner_.query(batch);
    if (malformed_) return slice_rows(rows, 0, 1);
    return rows;
  }
  std::optional<std::size_t> budget_remaining() const override { return std::nullopt; }
  std::size_t queries_used() const override { return served_; }
  std::string id() const override { return "fake"; }

 private:
  LocalOracle inner_;
  std::size_t fail_after_;
  bool malformed_;
  std::size_t served_ = 0;
};

}  // namespace

TEST(BuildTransferset, BudgetRowsAreProbabilities) {
  const LabeledDataset pool = pool_of(10);
  LocalOracle oracle(victim());
  const TransferSet ts = build_transferset(oracle, pool, 100, 3);
  ASSERT_EQ(ts.size(), 100u);
  ASSERT_EQ(ts.soft_labels.shape(), (Shape{100, 4}));
  for (std::size_t r = 0; r < 100; ++r) {
    double mass = 0.0;
    for (std::size_t k = 0; k < 4; ++k) mass += ts.soft_labels[r * 4 + k];
    EXPECT_NEAR(mass, 1.0, 1e-5);
  }
  EXPECT_EQ(oracle.queries_used(), 100u);
  EXPECT_EQ(ts.provenance, (TransferProvenance{"local", "pool", 3, 100}));
}

TEST(BuildTransferset, SeededUniformSampleWithoutReplacement) {
  const LabeledDataset pool = pool_of(10);
  LocalOracle a(victim()), b(victim());
  const TransferSet first = build_transferset(a, pool, 50, 21, 7);
  const TransferSet second = build_transferset(b, pool, 50, 21, 64);
  EXPECT_EQ(first.inputs, second.inputs);
  EXPECT_EQ(first.soft_labels, second.soft_labels);

  std::vector<std::size_t> order = permutation(pool.size(), 21);
  order.resize(50);
  EXPECT_EQ(first.inputs, gather_rows(pool.inputs, order));
  std::sort(order.begin(), order.end());
  EXPECT_EQ(std::adjacent_find(order.begin(), order.end()), order.end());
}

TEST(BuildTransferset, SoftLabelsAreTheOracleOutputs) {
  const LabeledDataset pool = pool_of(5);
  LocalOracle oracle(victim());
  const TransferSet ts = build_transferset(oracle, pool, 60, 2, 64);
  EXPECT_EQ(ts.soft_labels, predict_proba(victim(), ts.inputs));
}

TEST(BuildTransferset, BudgetErrors) {
  const LabeledDataset pool = pool_of(5);
  LocalOracle oracle(victim(), 30);
  EXPECT_ERRC(build_transferset(oracle, pool, pool.size() + 1, 1), Errc::budget_exceeds_pool);
  EXPECT_ERRC(build_transferset(oracle, pool, 31, 1), Errc::budget_exhausted);
  EXPECT_EQ(oracle.queries_used(), 0u);
  EXPECT_ERRC(build_transferset(oracle, pool, 0, 1), Errc::invalid_argument);
  EXPECT_NO_THROW(build_transferset(oracle, pool, 30, 1));
  EXPECT_EQ(oracle.budget_remaining(), std::optional<std::size_t>(0));
  EXPECT_ERRC(oracle.query(slice_rows(pool.inputs, 0, 1)), Errc::budget_exhausted);
}

TEST(BuildTransferset, MidBuildFailureSurfaces) {
  const LabeledDataset pool = pool_of(5);
  FakeOracle exhausted(victim(), 40, false);
  EXPECT_ERRC(build_transferset(exhausted, pool, 90, 1, 20), Errc::budget_exhausted);
  FakeOracle malformed(victim(), 1000, true);
  EXPECT_ERRC(build_transferset(malformed, pool, 50, 1, 20), Errc::malformed_response);
}

TEST(QueryBudget, AllOrNothing) {
  QueryBudget b(10);
  EXPECT_TRUE(b.try_reserve(6));
  EXPECT_FALSE(b.try_reserve(5));
  EXPECT_EQ(b.used(), 6u);
  EXPECT_TRUE(b.try_reserve(4));
  EXPECT_EQ(b.remaining(), std::optional<std::size_t>(0));
  QueryBudget unlimited;
  EXPECT_TRUE(unlimited.try_reserve(1u << 30));
  EXPECT_FALSE(unlimited.remaining().has_value());
}

TEST(QueryBudget, NeverOverspentUnderContention) {
  for (std::size_t chunk : {1u, 3u, 7u}) {
    QueryBudget b(100);
    std::atomic<std::size_t> granted{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
      threads.emplace_back([&] {
        for (int i = 0; i < 100; ++i) {
          if (b.try_reserve(chunk)) granted += chunk;
        }
      });
    }
    for (auto& t : threads) t.join();
    EXPECT_EQ(granted.load(), b.used());
    EXPECT_LE(b.used(), 100u);
    EXPECT_GT(b.used(), 100u - chunk);
  }
}

TEST(LocalOracle, ConcurrentQueriesShareTheBudget) {
  const LabeledDataset pool = pool_of(5);
  LocalOracle oracle(victim(), 100);
  std::atomic<std::size_t> served{0};
  std::vector<std::thread> clients;
  for (int c = 0; c < 4; ++c) {
    clients.emplace_back([&, c] {
      for (std::size_t i = 0; i < 40; ++i) {
        try {
          served += oracle.query(slice_rows(pool.inputs, (c * 10 + i) % 90, (c * 10 + i) % 90 + 1)).dim(0);
        } catch (const Error& e) {
          EXPECT_EQ(e.code(), Errc::budget_exhausted);
        }
      }
    });
  }
  for (auto& t : clients) t.join();
  EXPECT_EQ(served.load(), 100u);
  EXPECT_EQ(oracle.queries_used(), 100u);
}

TEST(ExtractionConfig, Validation) {
  ExtractionConfig c = config(0);
  EXPECT_ERRC(c.validate(), Errc::invalid_argument);
  c = config(10);
  c.surrogate_spec.layers.pop_back();
  EXPECT_ERRC(c.validate(), Errc::invalid_spec);
}

TEST(TrainSurrogate, DeterministicAndTagged) {
  const LabeledDataset pool = pool_of(10);
  LocalOracle oracle(victim());
  const TransferSet ts = build_transferset(oracle, pool, 120, 4);
  const Model a = train_surrogate(config(120), ts);
  const Model b = train_surrogate(config(120), ts);
  for (std::size_t i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value, b.params()[i].value);
  EXPECT_EQ(a.spec(), mlp_wide({1, 16, 16}, 4));
  EXPECT_NE(a.meta().provenance.find("oracle=local"), std::string::npos) << a.meta().provenance;
  EXPECT_NE(a.meta().provenance.find("budget=120"), std::string::npos);
}

TEST(Extract, ComposesBuildAndTrain) {
  const LabeledDataset pool = pool_of(10);
  LocalOracle o1(victim()), o2(victim());
  const ExtractionResult r = extract(o1, pool, config(80));
  const TransferSet ts = build_transferset(o2, pool, 80, 7);
  EXPECT_EQ(r.transferset.inputs, ts.inputs);
  const Model manual = train_surrogate(config(80), ts);
  for (std::size_t i = 0; i < manual.params().size(); ++i) EXPECT_EQ(manual.params()[i].value, r.surrogate.params()[i].value);
  EXPECT_EQ(r.history.epochs.size(), 2u);
  EXPECT_EQ(o1.queries_used(), 80u);
}

TEST(Extract, SurrogateLearnsTheVictim) {
  // A trained victim on its own domain, extracted through an unrelated pool.
  SynthConfig vs;
  vs.num_classes = 4;
  vs.samples_per_class = 100;
  vs.side = 16;
  vs.seed = 3;
  vs.template_seed = 8;
  vs.noise = 0.1;
  const LabeledDataset train_set = synth_generate(vs, DatasetRole::victim_train, "v-train");
  vs.seed = 4;
  vs.samples_per_class = 50;
  const LabeledDataset test_set = synth_generate(vs, DatasetRole::heldout_test, "v-test");
  TrainConfig tc;
  tc.initial_lr = 0.05;
  tc.max_epochs = 10;
  tc.seed = 1;
  const Model v = train(build_model(cnn_small({1, 16, 16}, 4), 1), train_set, tc).model;
  LocalOracle oracle(v);
  ExtractionConfig c = config(1000);
  c.train_config = tc;
  c.train_config.max_epochs = 30;
  c.train_config.batch_size = 32;
  const ExtractionResult r = extract(oracle, pool_of(100), c);
  EXPECT_GT(agreement(r.surrogate, v, test_set), 0.7);
}

TEST(Transferset, SaveLoadRoundTrip) {
  const LabeledDataset pool = pool_of(5);
  LocalOracle oracle(victim());
  const TransferSet ts = build_transferset(oracle, pool, 33, 9);
  const auto dir = std::filesystem::temp_directory_path() / "xlab_test_transferset";
  std::filesystem::remove_all(dir);
  save_transferset(ts, dir);
  const TransferSet back = load_transferset(dir);
  EXPECT_EQ(back.inputs, ts.inputs);
  EXPECT_EQ(back.soft_labels, ts.soft_labels);
  EXPECT_EQ(back.provenance, ts.provenance);
  std::filesystem::resize_file(dir / "tensors.bin", 100);
  EXPECT_ERRC(load_transferset(dir), Errc::corrupt_file);
}

TEST(Transferset, ValidateRejectsBadRows) {
  TransferSet ts;
  ts.inputs = Tensor<float>({2, 1, 2, 2}, 0.5f);
  ts.soft_labels = Tensor<float>({2, 2}, std::vector<float>{0.5f, 0.5f, 0.9f, 0.3f});
  EXPECT_ERRC(ts.validate(), Errc::not_normalized);
  ts.soft_labels = Tensor<float>({3, 2}, 0.5f);
  EXPECT_ERRC(ts.validate(), Errc::shape_mismatch);
}
