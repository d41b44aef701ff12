#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "mmk/checkpoint.hpp"
#include "mmk/errors.hpp"
#include "mmk/gradcheck.hpp"
#include "mmk/model.hpp"

using namespace mmk;

namespace {

ModelConfig nano() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ff = 32;
  c.d_adapter = 4;
  c.d_vis = 8;
  c.d_know = 16;
  c.max_len = 24;
  c.vocab_size = 50;
  return c;
}

TokenSequence seq(std::vector<TokenId> ids) { return TokenSequence{std::move(ids)}; }

Tensor random_row(std::size_t n, Rng& rng) {
  Tensor t({1, n});
  for (std::size_t i = 0; i < n; ++i) t[i] = rng.normal();
  return t;
}

// Closed-form parameter count, written independently of param_specs().
std::size_t closed_form_count(const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff, a = c.d_adapter;
  const std::size_t ln = 2 * d;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t enc_layer = 2 * ln + attn + ffn;
  const std::size_t dec_layer = 3 * ln + 2 * attn + ffn;
  auto adapter = [&](std::size_t dm) { return dm * d + 2 * d * d + d + ln + d * a + a * d; };
  return c.vocab_size * d + c.max_len * d + c.n_enc_layers * enc_layer + ln + adapter(c.d_know) + adapter(c.d_vis) +
         c.n_dec_layers * dec_layer + ln;
}

TrainingRecord nano_record(const std::string& id, Rng& rng) {
  TrainingRecord r;
  r.id = id;
  r.encoder = seq({kBos, kPatient, 20, 21, 22, kSep, kDoctor, 23, 24, kEos});
  r.knowledge = {{30, 31}, {32}};
  std::vector<double> vis(8);
  for (auto& v : vis) v = rng.normal();
  r.visual = vis;
  r.targets[Task::Sum] = seq({kBos, kTaskSum, 40, 41, 42, kEos});
  r.targets[Task::Mcs] = seq({kBos, kTaskMcs, 40, 43, kEos});
  r.targets[Task::Di] = seq({kBos, kTaskDi, 44, kEos});
  return r;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(nano().validate());
  auto c = nano();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = nano();
  c.d_adapter = 16;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = nano();
  c.dropout_rate = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = nano();
  c.d_know = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = nano();
  c.vocab_size = 0;
  CHECK_THROWS_AS(init_params(c, 1), ConfigError);
  CHECK(ModelConfig::from_json(nano().to_json()) == nano());
}

TEST_CASE("init_params examples") {
  auto a = init_params(nano(), 42);
  auto b = init_params(nano(), 42);
  CHECK(a == b);
  CHECK(a != init_params(nano(), 43));

  auto c = nano();
  c.gate_bias_init = 3.0;
  auto p = init_params(c, 1);
  for (const char* name : {"adapter.know.b_g", "adapter.vis.b_g"})
    for (double v : p.at(name).data()) CHECK(v == 3.0);
  CHECK(p.at("enc.0.ln1.g") == Tensor::filled({16}, 1.0));
  CHECK(p.at("enc.0.self.bq") == Tensor::zeros({16}));

  CHECK(param_count(init_params(nano(), 1)) == closed_form_count(nano()));
  auto big = nano();
  big.n_enc_layers = 3;
  big.n_dec_layers = 2;
  big.d_ff = 40;
  CHECK(param_count(init_params(big, 1)) == closed_form_count(big));
}

TEST_CASE("linear weights have the documented scale") {
  auto c = nano();
  c.vocab_size = 400;
  auto p = init_params(c, 7);
  const auto& e = p.at("embed.tokens");
  double s = 0, s2 = 0;
  for (double v : e.data()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(e.numel());
  CHECK(std::abs(s / n) < 0.002);
  CHECK(std::sqrt(s2 / n) == doctest::Approx(0.02).epsilon(0.05));
}

TEST_CASE("encode shape contract and dimension errors") {
  auto cfg = nano();
  auto params = init_params(cfg, 3);
  Graph g;
  ModelGraph mg(g, cfg, params, false);
  auto enc = mg.encode(seq({kBos}), g.constant(Tensor::zeros({1, 16})), g.constant(Tensor::zeros({1, 8})), nullptr);
  CHECK(enc.h.shape() == Shape{1, 16});
  CHECK_THROWS_AS(mg.encode(seq({kBos}), g.constant(Tensor::zeros({1, 15})), g.constant(Tensor::zeros({1, 8})), nullptr),
                  ConfigError);
  CHECK_THROWS_AS(mg.encode(seq({kBos}), g.constant(Tensor::zeros({1, 16})), g.constant(Tensor::zeros({1, 9})), nullptr),
                  ConfigError);
  std::vector<TokenId> too_long(25, 20);
  CHECK_THROWS_AS(mg.encode_text(seq(too_long), nullptr), ConfigError);
  CHECK_THROWS_AS(mg.encode_text(seq({kBos, kTaskSum, kEos}), nullptr), ContractError);
}

TEST_CASE("saturated gate with zero modality reproduces the text encoder") {
  auto cfg = nano();
  cfg.gate_bias_init = 50.0;
  auto params = init_params(cfg, 5);
  Graph g;
  ModelGraph mg(g, cfg, params, false);
  auto tokens = seq({kBos, kPatient, 20, 21, kSep, kDoctor, 22, kEos});
  Var zk = g.constant(Tensor::zeros({1, 16}));
  auto text = mg.encode_text(tokens, nullptr);

  Var fused;
  mg.adapter_fuse(text.h, zk, "adapter.know", &fused);
  CHECK(max_abs_diff(fused.value(), text.h.value()) < 1e-6);

  auto zeroed = params;
  zeroed.at("adapter.know.w_u").fill(0.0);
  zeroed.at("adapter.vis.w_u").fill(0.0);
  Graph g2;
  ModelGraph mg2(g2, cfg, zeroed, false);
  auto full = mg2.encode(tokens, g2.constant(Tensor::zeros({1, 16})), g2.constant(Tensor::zeros({1, 8})), nullptr);
  CHECK(max_abs_diff(full.h.value(), text.h.value()) < 1e-9);
}

TEST_CASE("adapter_fuse examples") {
  auto cfg = nano();
  cfg.gate_bias_init = 50.0;
  auto params = init_params(cfg, 6);
  Rng rng(1);
  Graph g;
  ModelGraph mg(g, cfg, params, false);
  Tensor h({3, 16});
  for (std::size_t i = 0; i < h.numel(); ++i) h[i] = rng.normal();
  Var hv = g.constant(h);
  Var fused;
  mg.adapter_fuse(hv, g.constant(random_row(16, rng)), "adapter.know", &fused);
  CHECK(max_abs_diff(fused.value(), h) < 1e-6);

  auto zeroed = params;
  zeroed.at("adapter.vis.w_u").fill(0.0);
  Graph g2;
  ModelGraph mg2(g2, cfg, zeroed, false);
  Var out = mg2.adapter_fuse(g2.constant(h), g2.constant(random_row(8, rng)), "adapter.vis");
  CHECK(out.value() == h);
}

TEST_CASE("adapter_fuse hand-sized case") {
  ModelConfig cfg;
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.d_adapter = 1;
  cfg.d_know = 2;
  cfg.d_vis = 1;
  cfg.vocab_size = 12;
  ParamMap p;
  p["adapter.vis.w_m"] = Tensor::matrix({{2, -1}});
  p["adapter.vis.w_g"] = Tensor::matrix({{0.1, 0}, {0, 0.1}, {0.2, 0}, {0, -0.2}});
  p["adapter.vis.b_g"] = Tensor({2}, {0.0, 0.5});
  p["adapter.vis.ln.g"] = Tensor({2}, {1.0, 1.0});
  p["adapter.vis.ln.b"] = Tensor({2}, {0.0, 0.0});
  p["adapter.vis.w_d"] = Tensor::matrix({{1}, {-1}});
  p["adapter.vis.w_u"] = Tensor::matrix({{0.5, 2}});
  Graph g;
  ModelGraph mg(g, cfg, p, false);
  Var out = mg.adapter_fuse(g.constant(Tensor::matrix({{1, 2}})), g.constant(Tensor::matrix({{0.5}})), "adapter.vis");

  // Scalar oracle.
  const double mp0 = 1.0, mp1 = -0.5;
  const double g0 = 1 / (1 + std::exp(-(0.1 * 1 + 0.2 * mp0)));
  const double g1 = 1 / (1 + std::exp(-(0.1 * 2 - 0.2 * mp1 + 0.5)));
  const double f0 = g0 * 1 + (1 - g0) * mp0, f1 = g1 * 2 + (1 - g1) * mp1;
  const double mean = (f0 + f1) / 2, var = ((f0 - mean) * (f0 - mean) + (f1 - mean) * (f1 - mean)) / 2;
  const double n0 = (f0 - mean) / std::sqrt(var + 1e-5), n1 = (f1 - mean) / std::sqrt(var + 1e-5);
  const double down = std::max(0.0, n0 - n1);
  CHECK(out.value().at(0, 0) == doctest::Approx(1 + 0.5 * down).epsilon(1e-12));
  CHECK(out.value().at(0, 1) == doctest::Approx(2 + 2 * down).epsilon(1e-12));
}

TEST_CASE("permuting tail PAD positions leaves non-PAD rows unchanged") {
  auto cfg = nano();
  auto params = init_params(cfg, 8);
  // Positions differ per slot, so swap two PADs by swapping their positions'
  // embeddings: equivalently compare sequences that differ only in PAD count.
  Graph g;
  ModelGraph mg(g, cfg, params, false);
  auto a = mg.encode_text(seq({kBos, kPatient, 20, 21, kEos, kPad, kPad}), nullptr);
  auto b = mg.encode_text(seq({kBos, kPatient, 20, 21, kEos}), nullptr);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 16; ++c) CHECK(a.h.value().at(r, c) == doctest::Approx(b.h.value().at(r, c)).epsilon(1e-12));

  auto swapped = params;
  auto& pos = swapped.at("embed.positions");
  for (std::size_t c = 0; c < 16; ++c) std::swap(pos.at(5, c), pos.at(6, c));
  Graph g2;
  ModelGraph mg2(g2, cfg, swapped, false);
  auto s = mg2.encode_text(seq({kBos, kPatient, 20, 21, kEos, kPad, kPad}), nullptr);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 16; ++c) CHECK(a.h.value().at(r, c) == doctest::Approx(s.h.value().at(r, c)).epsilon(1e-12));
}

TEST_CASE("decode_step contracts") {
  auto cfg = nano();
  auto params = init_params(cfg, 9);
  Graph g;
  ModelGraph mg(g, cfg, params, false);
  auto enc = mg.encode_text(seq({kBos, kPatient, 20, kEos}), nullptr);
  std::vector<TokenId> prefix{kBos, kTaskMcs, 30, 31};
  CHECK(mg.decode_step(prefix, enc, nullptr).shape() == Shape{4, 50});

  std::vector<TokenId> no_task{kBos, 30};
  CHECK_THROWS_AS(mg.decode_step(no_task, enc, nullptr), ContractError);
  std::vector<TokenId> two_tasks{kBos, kTaskMcs, kTaskDi};
  CHECK_THROWS_AS(mg.decode_step(two_tasks, enc, nullptr), ContractError);

  std::vector<TokenId> di{kBos, kTaskDi, 30, 31};
  CHECK(max_abs_diff(mg.decode_step(prefix, enc, nullptr).value(), mg.decode_step(di, enc, nullptr).value()) > 1e-6);
}

TEST_CASE("decoder is causal") {
  auto cfg = nano();
  auto params = init_params(cfg, 10);
  Graph g;
  ModelGraph mg(g, cfg, params, false);
  auto enc = mg.encode_text(seq({kBos, kPatient, 20, 21, kEos}), nullptr);
  std::vector<TokenId> p{kBos, kTaskSum, 30, 31};
  auto short_logits = mg.decode_step(p, enc, nullptr).value();
  p.push_back(32);
  auto long_logits = mg.decode_step(p, enc, nullptr).value();
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 50; ++c) CHECK(short_logits.at(r, c) == doctest::Approx(long_logits.at(r, c)).epsilon(1e-12));
}

TEST_CASE("forward is deterministic without dropout") {
  auto cfg = nano();
  cfg.dropout_rate = 0.3;
  auto params = init_params(cfg, 11);
  Rng rng(2);
  auto rec = nano_record("a", rng);
  std::vector<const TrainingRecord*> batch{&rec};
  auto eval = [&] {
    Graph g;
    ModelGraph mg(g, cfg, params, false);
    return multitask_forward(mg, batch, TaskSet{Task::Sum, Task::Mcs}, {}).at(Task::Sum).value().item();
  };
  CHECK(eval() == eval());

  Rng d1(5), d2(5);
  auto with_dropout = [&](Rng& r) {
    Graph g;
    ModelGraph mg(g, cfg, params, true);
    ForwardRngs rngs{&r, {}};
    return multitask_forward(mg, batch, TaskSet{Task::Sum}, rngs).at(Task::Sum).value().item();
  };
  const double x = with_dropout(d1);
  CHECK(x == with_dropout(d2));
  CHECK(x != eval());
}

TEST_CASE("multitask_forward examples") {
  auto cfg = nano();
  auto params = init_params(cfg, 12);
  Rng rng(3);
  auto rec = nano_record("r", rng);
  std::vector<const TrainingRecord*> batch{&rec};
  {
    Graph g;
    ModelGraph mg(g, cfg, params, false);
    CHECK(multitask_forward(mg, batch, TaskSet{Task::Sum}, {}).size() == 1);
  }

  // Identical gold for MCS and SUM.
  auto same = rec;
  same.targets[Task::Mcs] = seq({kBos, kTaskMcs, 40, 41, 42, kEos});
  std::vector<const TrainingRecord*> sb{&same};
  auto losses = [&](const ParamMap& p) {
    Graph g;
    ModelGraph mg(g, cfg, p, false);
    auto l = multitask_forward(mg, sb, TaskSet{Task::Sum, Task::Mcs}, {});
    return std::pair{l.at(Task::Sum).value().item(), l.at(Task::Mcs).value().item()};
  };
  auto [ls, lm] = losses(params);
  CHECK(ls != lm);
  auto tied = params;
  for (std::size_t c = 0; c < 16; ++c) tied.at("embed.tokens").at(kTaskMcs, c) = tied.at("embed.tokens").at(kTaskSum, c);
  auto [ts, tm] = losses(tied);
  CHECK(ts == tm);

  auto pad = rec;
  pad.targets[Task::Sum] = seq({kBos, kTaskSum, kPad, kPad});
  std::vector<const TrainingRecord*> pb{&pad};
  Graph g;
  ModelGraph mg(g, cfg, params, false);
  CHECK_THROWS_AS(multitask_forward(mg, pb, TaskSet{Task::Sum}, {}), DatasetError);

  auto missing = rec;
  missing.targets.erase(Task::Di);
  std::vector<const TrainingRecord*> mb{&missing};
  CHECK_THROWS_AS(multitask_forward(mg, mb, TaskSet{Task::Sum, Task::Di}, {}), DatasetError);
}

TEST_CASE("per-task loss averages over all target tokens of the batch") {
  auto cfg = nano();
  auto params = init_params(cfg, 13);
  Rng rng(4);
  auto a = nano_record("a", rng);
  auto b = nano_record("b", rng);
  b.targets[Task::Sum] = seq({kBos, kTaskSum, 45, kEos});
  auto single = [&](const TrainingRecord& r) {
    Graph g;
    ModelGraph mg(g, cfg, params, false);
    std::vector<const TrainingRecord*> batch{&r};
    return multitask_forward(mg, batch, TaskSet{Task::Sum}, {}).at(Task::Sum).value().item();
  };
  Graph g;
  ModelGraph mg(g, cfg, params, false);
  std::vector<const TrainingRecord*> both{&a, &b};
  const double joint = multitask_forward(mg, both, TaskSet{Task::Sum}, {}).at(Task::Sum).value().item();
  // a predicts 4 tokens, b predicts 2.
  CHECK(joint == doctest::Approx((4 * single(a) + 2 * single(b)) / 6).epsilon(1e-12));
}

TEST_CASE("full nano model passes the finite-difference check") {
  auto cfg = nano();
  cfg.max_len = 12;
  cfg.vocab_size = 48;
  auto params = init_params(cfg, 21);
  Rng rng(6);
  auto r1 = nano_record("a", rng);
  auto r2 = nano_record("b", rng);
  r2.knowledge.clear();
  r2.visual.reset();
  LossBuilder build = [&](Graph& g, const ParamMap& p) {
    ModelGraph mg(g, cfg, p, true);
    std::vector<const TrainingRecord*> batch{&r1, &r2};
    auto l = multitask_forward(mg, batch, TaskSet{Task::Sum, Task::Mcs, Task::Di}, {});
    return scale(add(add(l.at(Task::Sum), l.at(Task::Mcs)), l.at(Task::Di)), 1.0 / 3.0);
  };
  FiniteDiffOptions opts;
  opts.max_coords_per_block = 24;
  opts.sample_seed = 3;
  auto report = finite_diff_check(build, params, opts);
  CHECK(report.passed);
  CHECK(report.max_rel_err < 1e-4);
  CHECK(report.blocks.size() == params.size());
}

TEST_CASE("checkpoint round trip within f32 rounding") {
  Checkpoint c;
  c.config = nano();
  c.params = init_params(c.config, 14);
  c.vocab_fingerprint = 0xdeadbeef12345678ULL;
  c.step = 17;
  c.metrics["dev_loss"] = 1.25;
  const std::string bytes = serialize_checkpoint(c);
  CHECK(bytes.substr(0, 4) == "MMKS");
  auto back = parse_checkpoint(bytes, "mem");
  CHECK(back.config == c.config);
  CHECK(back.vocab_fingerprint == c.vocab_fingerprint);
  CHECK(back.step == 17);
  CHECK(back.metrics["dev_loss"] == 1.25);
  for (const auto& [name, t] : c.params) {
    const auto& u = back.params.at(name);
    REQUIRE(u.shape() == t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(std::abs(u[i] - t[i]) <= 1e-6 * std::max(1.0, std::abs(t[i])));
  }
  CHECK(serialize_checkpoint(back) == bytes);

  std::string bad = bytes;
  bad[4] = 9;
  try {
    parse_checkpoint(bad, "old.ckpt");
    FAIL("expected refusal");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("version 9") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3), "t"), SchemaError);
  CHECK_THROWS_AS(parse_checkpoint("XXXX", "t"), SchemaError);
}
