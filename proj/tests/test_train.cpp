#include "sedan/checkpoint.hpp"
#include "sedan/eval.hpp"
#include "sedan/train.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace sedan;
using sedan::testing::central_difference;
using sedan::testing::relative_error;

namespace {

ModelConfig toy_model(std::size_t d_source = 3, std::size_t d_target = 2) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.d_ff = 8;
  c.dropout = 0.0;
  c.d_in_source = c.d_out_source = d_source;
  c.d_in_target = c.d_out_target = d_target;
  c.d_time_source = c.d_time_target = 4;
  c.sdg_hidden = 6;
  c.tdg_kernel = 2;
  c.tdg_pool = 2;
  return c;
}

TrainConfig toy_train() {
  TrainConfig t;
  t.batch_size = 2;
  t.contrast.k_negatives = 2;
  t.contrast.bank_capacity = 4;
  t.adapt.n_subsequences = 2;
  t.adapt.kernel.policy = BandwidthPolicy::fixed;
  t.adapt.kernel.sigma = 2.0;
  t.adapt.ipm.residual_tolerance = 1e-13;
  t.adapt.ipm.gap_tolerance_per_cell = 1e-14;
  t.adapt.ipm.max_iterations = 80;
  t.lr = 1e-3;
  return t;
}

struct Toy {
  DomainData source, target;
};

Toy toy_data(std::uint64_t seed = 3, std::size_t len = 160) {
  SyntheticSpec spec;
  spec.source_len = spec.target_len = len;
  auto [s, t] = make_synthetic_transfer(seed, spec);
  const WindowSpec w{8, 4, 4, 2};
  const SplitRatios r{0.6, 0.2, 0.2};
  return {prepare_domain(s, r, w), prepare_domain(t, r, w)};
}

void warm_banks(TrainState& state, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& bank : state.banks) {
    Eigen::MatrixXd keys(static_cast<Eigen::Index>(bank.capacity()), static_cast<Eigen::Index>(bank.dim()));
    for (Eigen::Index i = 0; i < keys.size(); ++i) keys.data()[i] = n(rng);
    keys.rowwise().normalize();
    bank.enqueue(keys, 0.5);
  }
}

}  // namespace

TEST(TotalLoss, Examples) {
  EXPECT_DOUBLE_EQ(total_loss(1.0, 2.0, 3.0, 0.1, 0.1), 1.5);
  EXPECT_EQ(total_loss(0.7, 5.0, 9.0, 0.0, 0.0), 0.7);
  EXPECT_EQ(total_loss(0.0, 0.0, 0.0, 0.1, 0.1), 0.0);
}

TEST(TotalLoss, NonFiniteComponentIsNamed) {
  const double nan = std::nan("");
  auto message = [](auto f) {
    try {
      f();
    } catch (const std::domain_error& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message([&] { total_loss(nan, 0, 0, 1, 1); }).find("L_mse"), std::string::npos);
  EXPECT_NE(message([&] { total_loss(0, nan, 0, 1, 1); }).find("L_dec"), std::string::npos);
  EXPECT_NE(message([&] { total_loss(0, 0, INFINITY, 1, 1); }).find("L_adapt"), std::string::npos);
}

TEST(TrainConfig, Validation) {
  auto ok = toy_train();
  EXPECT_NO_THROW(ok.validate());
  for (auto mutate : std::vector<void (*)(TrainConfig&)>{
           [](TrainConfig& c) { c.lambda = -1; }, [](TrainConfig& c) { c.gamma = std::nan(""); },
           [](TrainConfig& c) { c.lr = 0; }, [](TrainConfig& c) { c.lr_decay = 1.5; },
           [](TrainConfig& c) { c.epochs = 0; }, [](TrainConfig& c) { c.patience = 0; },
           [](TrainConfig& c) { c.batch_size = 0; }, [](TrainConfig& c) { c.contrast.k_negatives = 99; }}) {
    auto bad = ok;
    mutate(bad);
    EXPECT_THROW(bad.validate(), std::invalid_argument);
  }
}

TEST(EpochLearningRate, DecaysAfterThreshold) {
  TrainConfig c;
  c.lr = 1e-3;
  c.lr_decay = 0.5;
  c.decay_after = 2;
  EXPECT_EQ(epoch_learning_rate(c, 1), 1e-3);
  EXPECT_EQ(epoch_learning_rate(c, 2), 1e-3);
  EXPECT_DOUBLE_EQ(epoch_learning_rate(c, 3), 5e-4);
  EXPECT_DOUBLE_EQ(epoch_learning_rate(c, 5), 1.25e-4);
}

TEST(TrainStep, ZeroWeightsReduceToSupervisedLoss) {
  auto data = toy_data();
  SedanModel model(toy_model());
  auto cfg = toy_train();
  cfg.lambda = cfg.gamma = 0.0;
  TrainState state(model.config(), cfg);
  Adam adam(model.parameters());
  auto sb = make_batch(data.source.train, {0, 1});
  auto tb = make_batch(data.target.train, {0, 1});
  for (int i = 0; i < 3; ++i) {
    const auto parts = train_step(model, adam, state, &sb, tb, cfg, cfg.lr);
    EXPECT_EQ(parts.dec, 0.0);
    EXPECT_EQ(parts.adapt, 0.0);
    EXPECT_EQ(parts.total, parts.mse());
    EXPECT_TRUE(parts.warm);
  }
  for (const auto& bank : state.banks) EXPECT_EQ(bank.filled(), 0u);
}

TEST(TrainStep, WarmUpFillsBanksBeforeContrast) {
  auto data = toy_data();
  SedanModel model(toy_model());
  auto cfg = toy_train();
  TrainState state(model.config(), cfg);
  Adam adam(model.parameters());
  auto sb = make_batch(data.source.train, {0, 1});
  auto tb = make_batch(data.target.train, {2, 3});
  // Each step enqueues batch-size keys per bank; capacity 4 takes two steps.
  auto first = train_step(model, adam, state, &sb, tb, cfg, cfg.lr);
  EXPECT_FALSE(first.warm);
  EXPECT_EQ(first.adapt, 0.0);
  EXPECT_GT(first.dec, 0.0);  // the KL part runs during warm-up
  train_step(model, adam, state, &sb, tb, cfg, cfg.lr);
  for (const auto& bank : state.banks) EXPECT_TRUE(bank.full());
  auto third = train_step(model, adam, state, &sb, tb, cfg, cfg.lr);
  EXPECT_TRUE(third.warm);
  EXPECT_GT(third.adapt, 0.0);
  EXPECT_TRUE(std::isfinite(third.total));
  EXPECT_GT(third.grad_norm, 0.0);
  EXPECT_NEAR(third.total, third.mse() + cfg.lambda * third.dec + cfg.gamma * third.adapt, 1e-12);
}

TEST(TrainStep, SeededRunsAreReproducible) {
  auto data = toy_data();
  auto run = [&] {
    SedanModel model(toy_model());
    auto cfg = toy_train();
    TrainState state(model.config(), cfg);
    Adam adam(model.parameters());
    model.set_training(true);
    std::vector<double> losses;
    detail::IndexCycle sc(data.source.train.size()), tc(data.target.train.size());
    for (int i = 0; i < 5; ++i) {
      auto sb = make_batch(data.source.train, sc.next(2, state.rng));
      auto tb = make_batch(data.target.train, tc.next(2, state.rng));
      losses.push_back(train_step(model, adam, state, &sb, tb, cfg, cfg.lr).total);
    }
    return losses;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(ComputeLosses, Errors) {
  auto data = toy_data();
  SedanModel model(toy_model());
  auto cfg = toy_train();
  TrainState state(model.config(), cfg);
  Rng rng(1);
  auto tb = make_batch(data.target.train, {0, 1});
  EXPECT_THROW(compute_losses(model, state, nullptr, tb, cfg, rng), std::invalid_argument);
  EXPECT_THROW(compute_losses(model, state, &tb, tb, cfg, rng, Domain::source), std::invalid_argument);
}

TEST(ComputeLosses, ZeroGammaMatchesDetachedAdaptation) {
  // With gamma = 0 the adaptation graph, even when built, contributes nothing.
  auto data = toy_data();
  SedanModel model(toy_model());
  auto cfg = toy_train();
  cfg.gamma = 0.0;
  TrainState state(model.config(), cfg);
  std::mt19937_64 keys_rng(4);
  warm_banks(state, keys_rng);
  model.set_training(false);
  auto sb = make_batch(data.source.train, {0, 3});
  auto tb = make_batch(data.target.train, {1, 2});
  auto grads = [&](bool force) {
    auto c = cfg;
    c.force_adapt_graph = force;
    model.parameters().zero_grad();
    Rng rng(11);
    auto losses = compute_losses(model, state, &sb, tb, c, rng);
    losses.total.backward();
    std::vector<std::vector<double>> out;
    for (const auto& [name, p] : model.parameters().entries()) out.push_back(p.grad());
    return std::make_pair(losses.parts, out);
  };
  const auto [plain_parts, plain] = grads(false);
  const auto [forced_parts, forced] = grads(true);
  EXPECT_EQ(plain_parts.adapt, 0.0);
  EXPECT_GT(forced_parts.adapt, 0.0);
  EXPECT_EQ(plain_parts.total, forced_parts.total);
  ASSERT_EQ(plain.size(), forced.size());
  for (std::size_t k = 0; k < plain.size(); ++k) {
    ASSERT_EQ(plain[k].size(), forced[k].size());
    for (std::size_t i = 0; i < plain[k].size(); ++i) EXPECT_NEAR(plain[k][i], forced[k][i], 1e-15);
  }
}

TEST(ComputeLosses, EndToEndGradientMatchesFiniteDifferences) {
  auto data = toy_data();
  SedanModel model(toy_model());
  auto cfg = toy_train();
  ASSERT_EQ(cfg.lambda, 0.1);
  ASSERT_EQ(cfg.gamma, 0.1);
  TrainState state(model.config(), cfg);
  std::mt19937_64 rng(5);
  warm_banks(state, rng);
  model.set_training(false);
  auto sb = make_batch(data.source.train, {0, 5});
  auto tb = make_batch(data.target.train, {3, 7});

  // Momentum keys are stop-gradient, so finite differences replay them.
  KeySet keys;
  auto build = [&] {
    Rng step_rng(21);
    return compute_losses(model, state, &sb, tb, cfg, step_rng, Domain::target, &keys).total;
  };
  {
    Rng step_rng(21);
    keys = compute_losses(model, state, &sb, tb, cfg, step_rng).pending_keys;
  }
  for (const auto& k : keys) ASSERT_TRUE(k.has_value());
  model.parameters().zero_grad();
  auto loss = build();
  ASSERT_GT(loss.item(), 0.0);
  loss.backward();

  std::vector<std::pair<std::string, Tensor>> entries(model.parameters().entries().begin(),
                                                      model.parameters().entries().end());
  std::uniform_int_distribution<std::size_t> pick_tensor(0, entries.size() - 1);
  auto value = [&] {
    NoGradGuard no_grad;
    return build().item();
  };
  int informative = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto& [name, p] = entries[pick_tensor(rng)];
    std::uniform_int_distribution<std::size_t> pick_entry(0, p.size() - 1);
    const std::size_t i = pick_entry(rng);
    const double analytic = p.grad().empty() ? 0.0 : p.grad()[i];
    const double fd = central_difference(value, p, i, 1e-5);
    if (std::abs(analytic) > 1e-6) ++informative;
    EXPECT_LT(relative_error(analytic, fd), 1e-4) << name << "[" << i << "] analytic " << analytic << " fd " << fd;
  }
  EXPECT_GE(informative, 5);
}

TEST(Fit, EarlyStoppingOnWorseningValidation) {
  auto data = toy_data();
  SedanModel model(toy_model());
  auto cfg = toy_train();
  cfg.lambda = cfg.gamma = 0.0;
  cfg.use_source = false;
  cfg.lr = 0.5;  // large enough that validation degrades after the first epoch
  cfg.lr_decay = 1.0;
  cfg.patience = 1;
  cfg.epochs = 10;
  cfg.steps_per_epoch = 4;
  auto result = fit(model, nullptr, data.target, cfg);
  ASSERT_GE(result.history.size(), 2u);
  if (result.history[1].val_mse >= result.history[0].val_mse) {
    EXPECT_EQ(result.history.size(), 2u);
  }
  double best = INFINITY;
  for (const auto& r : result.history) best = std::min(best, r.val_mse);
  EXPECT_EQ(result.best_val_mse, best);
  EXPECT_NEAR(evaluate(model, data.target.val, Domain::target, cfg.decomposition).mse, best, 1e-12);
  EXPECT_FALSE(model.training());
}

TEST(Fit, HistoryAndLearningRates) {
  auto data = toy_data();
  SedanModel model(toy_model());
  auto cfg = toy_train();
  cfg.epochs = 4;
  cfg.patience = 10;
  cfg.decay_after = 1;
  cfg.steps_per_epoch = 3;
  std::ostringstream log;
  auto result = fit(model, &data.source, data.target, cfg, &log);
  ASSERT_EQ(result.history.size(), 4u);
  EXPECT_EQ(result.steps.size(), 12u);
  for (std::size_t e = 0; e < 4; ++e) {
    EXPECT_EQ(result.history[e].epoch, e + 1);
    EXPECT_DOUBLE_EQ(result.history[e].lr, epoch_learning_rate(cfg, e + 1));
  }
  std::istringstream lines(log.str());
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("val_mse"));
    EXPECT_TRUE(j.contains("l_adapt"));
    ++count;
  }
  EXPECT_EQ(count, 4u);
  EXPECT_GT(result.history.back().l_adapt, 0.0);
}

TEST(Fit, ImprovesOnUntrainedModel) {
  auto data = toy_data(7, 400);
  SedanModel model(toy_model());
  auto cfg = toy_train();
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.contrast.bank_capacity = 16;
  cfg.contrast.k_negatives = 8;
  const double untrained = evaluate(model, data.target.val, Domain::target, cfg.decomposition).mse;
  auto result = fit(model, &data.source, data.target, cfg);
  EXPECT_LT(result.best_val_mse, untrained);
}

TEST(Fit, Errors) {
  auto data = toy_data();
  SedanModel model(toy_model());
  auto cfg = toy_train();
  EXPECT_THROW(fit(model, nullptr, data.target, cfg), std::invalid_argument);
  DomainData empty;
  cfg.use_source = false;
  EXPECT_THROW(fit(model, nullptr, empty, cfg), std::invalid_argument);
}

TEST(Checkpoint, RoundTripReproducesForecasts) {
  auto data = toy_data();
  SedanModel model(toy_model());
  auto cfg = toy_train();
  cfg.epochs = 1;
  cfg.steps_per_epoch = 3;
  auto result = fit(model, &data.source, data.target, cfg);
  CheckpointMeta meta;
  meta.scaler = data.target.scaler;
  meta.window = {8, 4, 4, 2};
  meta.config_hash = "abc";
  meta.best_val_mse = result.best_val_mse;
  const auto dir = std::filesystem::temp_directory_path() / "sedan_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto batch = make_batch(data.target.test, {0, 1});
  const auto reference = model.forward(batch, Domain::target, cfg.decomposition).forecast;

  for (auto scope : {CheckpointScope::full, CheckpointScope::inference}) {
    const auto path = (dir / (scope == CheckpointScope::full ? "full.json" : "inf.json")).string();
    save_checkpoint(path, model, meta, scope, &result.state);
    auto bundle = load_checkpoint(path);
    EXPECT_EQ(bundle.scope, scope);
    EXPECT_EQ(bundle.meta.config_hash, "abc");
    EXPECT_EQ(bundle.meta.window.input_len, 8u);
    EXPECT_TRUE(bundle.meta.scaler.mean.isApprox(meta.scaler.mean));
    auto again = bundle.model->forward(batch, Domain::target, cfg.decomposition).forecast;
    for (std::size_t i = 0; i < reference.size(); ++i) EXPECT_NEAR(again.at(i), reference.at(i), 1e-7);
    if (scope == CheckpointScope::full) {
      ASSERT_EQ(bundle.banks.size(), 4u);
      for (std::size_t b = 0; b < 4; ++b) {
        EXPECT_EQ(bundle.banks[b].filled(), result.state.banks[b].filled());
        EXPECT_TRUE(bundle.banks[b].keys().isApprox(result.state.banks[b].keys()));
      }
    }
  }

  const auto full_path = (dir / "full.json").string();
  auto j = nlohmann::json::parse(std::ifstream(full_path));
  j["version"] = kCheckpointVersion + 1;
  const auto bumped = (dir / "bumped.json").string();
  std::ofstream(bumped) << j.dump();
  EXPECT_THROW(load_checkpoint(bumped), std::runtime_error);
  EXPECT_THROW(load_checkpoint((dir / "missing.json").string()), std::runtime_error);
  std::filesystem::remove_all(dir);
}
