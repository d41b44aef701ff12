#include "mmk/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmk/errors.hpp"

namespace mmk {

namespace {

enum class Init { Normal, Zero, One, GateBias };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
};

void add_attention_specs(std::vector<ParamSpec>& out, const std::string& p, std::size_t d) {
  for (const char* w : {"q", "k", "v", "o"}) {
    out.push_back({p + ".w" + w, {d, d}, Init::Normal});
    out.push_back({p + ".b" + w, {d}, Init::Zero});
  }
}

void add_ln_specs(std::vector<ParamSpec>& out, const std::string& p, std::size_t d) {
  out.push_back({p + ".g", {d}, Init::One});
  out.push_back({p + ".b", {d}, Init::Zero});
}

void add_ffn_specs(std::vector<ParamSpec>& out, const std::string& p, std::size_t d, std::size_t ff) {
  out.push_back({p + ".w1", {d, ff}, Init::Normal});
  out.push_back({p + ".b1", {ff}, Init::Zero});
  out.push_back({p + ".w2", {ff, d}, Init::Normal});
  out.push_back({p + ".b2", {d}, Init::Zero});
}

void add_adapter_specs(std::vector<ParamSpec>& out, const std::string& p, std::size_t d_mod, std::size_t d,
                       std::size_t da) {
  out.push_back({p + ".w_m", {d_mod, d}, Init::Normal});
  out.push_back({p + ".w_g", {2 * d, d}, Init::Normal});
  out.push_back({p + ".b_g", {d}, Init::GateBias});
  add_ln_specs(out, p + ".ln", d);
  out.push_back({p + ".w_d", {d, da}, Init::Normal});
  out.push_back({p + ".w_u", {da, d}, Init::Normal});
}

// Creation order fixes the order in which init_params draws from the RNG.
std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  std::vector<ParamSpec> s;
  s.push_back({"embed.tokens", {c.vocab_size, c.d_model}, Init::Normal});
  s.push_back({"embed.positions", {c.max_len, c.d_model}, Init::Normal});
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    add_ln_specs(s, p + ".ln1", c.d_model);
    add_attention_specs(s, p + ".self", c.d_model);
    add_ln_specs(s, p + ".ln2", c.d_model);
    add_ffn_specs(s, p + ".ffn", c.d_model, c.d_ff);
  }
  add_ln_specs(s, "enc.ln_f", c.d_model);
  add_adapter_specs(s, "adapter.know", c.d_know, c.d_model, c.d_adapter);
  add_adapter_specs(s, "adapter.vis", c.d_vis, c.d_model, c.d_adapter);
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    add_ln_specs(s, p + ".ln1", c.d_model);
    add_attention_specs(s, p + ".self", c.d_model);
    add_ln_specs(s, p + ".ln2", c.d_model);
    add_attention_specs(s, p + ".cross", c.d_model);
    add_ln_specs(s, p + ".ln3", c.d_model);
    add_ffn_specs(s, p + ".ffn", c.d_model, c.d_ff);
  }
  add_ln_specs(s, "dec.ln_f", c.d_model);
  return s;
}

std::string adapter_prefix(Modality m) { return m == Modality::Knowledge ? "adapter.know" : "adapter.vis"; }

}  // namespace

std::string_view modality_name(Modality m) { return m == Modality::Knowledge ? "know" : "vis"; }

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
  };
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(d_ff, "d_ff");
  positive(d_adapter, "d_adapter");
  positive(d_vis, "d_vis");
  positive(d_know, "d_know");
  positive(vocab_size, "vocab_size");
  if (max_len < 4) throw ConfigError("model config: max_len must be >= 4");
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model (" + std::to_string(d_model) + ") not divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (d_adapter >= d_model) throw ConfigError("model config: d_adapter must be smaller than d_model");
  if (d_know != d_model) throw ConfigError("model config: d_know must equal d_model (knowledge is pooled from token embeddings)");
  if (vocab_size < static_cast<std::size_t>(kNumSpecials)) throw ConfigError("model config: vocab_size below special-token count");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("model config: dropout_rate must be in [0, 1)");
  if (!(ln_eps > 0.0)) throw ConfigError("model config: ln_eps must be > 0");
  if (!std::isfinite(gate_bias_init)) throw ConfigError("model config: gate_bias_init must be finite");
  std::vector<Modality> sorted = adapter_order;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("model config: adapter_order lists a modality twice");
  }
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["n_enc_layers"] = n_enc_layers;
  j["n_dec_layers"] = n_dec_layers;
  j["d_ff"] = d_ff;
  j["d_adapter"] = d_adapter;
  j["d_vis"] = d_vis;
  j["d_know"] = d_know;
  j["max_len"] = max_len;
  j["vocab_size"] = vocab_size;
  j["dropout_rate"] = dropout_rate;
  j["gate_bias_init"] = gate_bias_init;
  j["ln_eps"] = ln_eps;
  std::vector<std::string> order;
  for (Modality m : adapter_order) order.emplace_back(modality_name(m));
  j["adapter_order"] = order;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_enc_layers = j.at("n_enc_layers").get<std::size_t>();
    c.n_dec_layers = j.at("n_dec_layers").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.d_adapter = j.at("d_adapter").get<std::size_t>();
    c.d_vis = j.at("d_vis").get<std::size_t>();
    c.d_know = j.at("d_know").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    c.gate_bias_init = j.at("gate_bias_init").get<double>();
    c.ln_eps = j.at("ln_eps").get<double>();
    c.adapter_order.clear();
    for (const auto& m : j.at("adapter_order")) {
      const auto s = m.get<std::string>();
      if (s == "know") c.adapter_order.push_back(Modality::Knowledge);
      else if (s == "vis") c.adapter_order.push_back(Modality::Visual);
      else throw SchemaError("unknown adapter '" + s + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamMap out;
  for (const auto& s : param_specs(cfg)) {
    Tensor t(s.shape);
    switch (s.init) {
      case Init::Normal:
        for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.02 * rng.normal();
        break;
      case Init::Zero: break;
      case Init::One: t.fill(1.0); break;
      case Init::GateBias: t.fill(cfg.gate_bias_init); break;
    }
    out.emplace(s.name, std::move(t));
  }
  return out;
}

std::size_t param_count(const ParamMap& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

void check_params(const ModelConfig& cfg, const ParamMap& params) {
  const auto specs = param_specs(cfg);
  if (specs.size() != params.size()) {
    throw ConfigError("parameter set has " + std::to_string(params.size()) + " tensors, config expects " +
                      std::to_string(specs.size()));
  }
  for (const auto& s : specs) {
    auto it = params.find(s.name);
    if (it == params.end()) throw ConfigError("missing parameter '" + s.name + "'");
    if (it->second.shape() != s.shape) {
      throw ConfigError("parameter '" + s.name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                        shape_str(s.shape));
    }
  }
}

// ---------------------------------------------------------------------------

ModelGraph::ModelGraph(Graph& g, const ModelConfig& cfg, const ParamMap& params, bool trainable)
    : g_(g), cfg_(cfg), params_(params), trainable_(trainable) {}

Var ModelGraph::param(const std::string& name) {
  auto it = vars_.find(name);
  if (it != vars_.end()) return it->second;
  auto p = params_.find(name);
  if (p == params_.end()) throw ConfigError("missing parameter '" + name + "'");
  Var v = trainable_ ? g_.parameter(name, p->second) : g_.constant(p->second);
  vars_.emplace(name, v);
  return v;
}

Var ModelGraph::ln(Var x, const std::string& p) { return layer_norm(x, param(p + ".g"), param(p + ".b"), cfg_.ln_eps); }

Var ModelGraph::drop(Var x, Rng* rng) {
  if (rng == nullptr || cfg_.dropout_rate == 0.0) return x;
  return dropout(x, cfg_.dropout_rate, *rng);
}

Var ModelGraph::embed(std::span<const TokenId> ids) {
  if (ids.size() > cfg_.max_len) {
    throw ConfigError("sequence of " + std::to_string(ids.size()) + " tokens exceeds max_len " +
                      std::to_string(cfg_.max_len));
  }
  std::vector<TokenId> pos(ids.size());
  std::iota(pos.begin(), pos.end(), 0);
  return add(embedding(param("embed.tokens"), ids), embedding(param("embed.positions"), pos));
}

Var ModelGraph::block_attention(Var x, Var src, const std::string& p, const AttentionMask& mask) {
  Var q = add_bias(matmul(x, param(p + ".wq")), param(p + ".bq"));
  Var k = add_bias(matmul(src, param(p + ".wk")), param(p + ".bk"));
  Var v = add_bias(matmul(src, param(p + ".wv")), param(p + ".bv"));
  Var a = attention(q, k, v, cfg_.n_heads, mask);
  return add_bias(matmul(a, param(p + ".wo")), param(p + ".bo"));
}

Var ModelGraph::feed_forward(Var x, const std::string& p) {
  Var h = relu(add_bias(matmul(x, param(p + ".w1")), param(p + ".b1")));
  return add_bias(matmul(h, param(p + ".w2")), param(p + ".b2"));
}

Encoded ModelGraph::encode_text(const TokenSequence& tokens, Rng* rng) {
  if (tokens.ids.empty()) throw ContractError("encode: empty token sequence");
  if (std::any_of(tokens.ids.begin(), tokens.ids.end(), is_task_token)) {
    throw ContractError("encode: task tokens are not allowed in encoder input");
  }
  Encoded enc;
  enc.key_valid.resize(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) enc.key_valid[i] = tokens.ids[i] != kPad;
  AttentionMask mask{false, enc.key_valid};

  Var x = drop(embed(tokens.ids), rng);
  for (std::size_t l = 0; l < cfg_.n_enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    Var xn = ln(x, p + ".ln1");
    Var a = block_attention(xn, xn, p + ".self", mask);
    x = add(x, drop(a, rng));
    x = add(x, drop(feed_forward(ln(x, p + ".ln2"), p + ".ffn"), rng));
  }
  enc.h = ln(x, "enc.ln_f");
  return enc;
}

Var ModelGraph::adapter_fuse(Var h, Var m, const std::string& prefix, Var* fused_out) {
  const std::size_t len = h.value().rows();
  Var mp = repeat_rows(matmul(m, param(prefix + ".w_m")), len);
  Var gate = sigmoid(add_bias(matmul(concat_cols(h, mp), param(prefix + ".w_g")), param(prefix + ".b_g")));
  // g*h + (1-g)*m' written as m' + g*(h - m').
  Var fused = add(mp, mul(gate, sub(h, mp)));
  if (fused_out) *fused_out = fused;
  Var down = relu(matmul(ln(fused, prefix + ".ln"), param(prefix + ".w_d")));
  return add(h, matmul(down, param(prefix + ".w_u")));
}

Encoded ModelGraph::encode(const TokenSequence& tokens, Var know_vec, Var vis_vec, Rng* rng) {
  const auto& kv = know_vec.value();
  const auto& vv = vis_vec.value();
  if (kv.rank() != 2 || kv.rows() != 1 || kv.cols() != cfg_.d_know) {
    throw ConfigError("knowledge vector " + shape_str(kv.shape()) + " does not match d_know " + std::to_string(cfg_.d_know));
  }
  if (vv.rank() != 2 || vv.rows() != 1 || vv.cols() != cfg_.d_vis) {
    throw ConfigError("visual vector " + shape_str(vv.shape()) + " does not match d_vis " + std::to_string(cfg_.d_vis));
  }
  Encoded enc = encode_text(tokens, rng);
  for (Modality m : cfg_.adapter_order) {
    enc.h = adapter_fuse(enc.h, m == Modality::Knowledge ? know_vec : vis_vec, adapter_prefix(m));
  }
  return enc;
}

Var ModelGraph::knowledge_vector(std::span<const std::vector<TokenId>> descriptions) {
  if (descriptions.empty()) return g_.constant(Tensor::zeros({1, cfg_.d_know}));
  return encode_knowledge(g_, descriptions, param("embed.tokens"));
}

Var ModelGraph::visual_vector(const std::optional<std::vector<double>>& visual) {
  if (!visual) return g_.constant(Tensor::zeros({1, cfg_.d_vis}));
  if (visual->size() != cfg_.d_vis) {
    throw ConfigError("visual vector has " + std::to_string(visual->size()) + " entries, model expects d_vis " +
                      std::to_string(cfg_.d_vis));
  }
  return g_.constant(Tensor::row(*visual));
}

Var ModelGraph::decode_step(std::span<const TokenId> prefix, const Encoded& enc, Rng* rng) {
  if (prefix.size() < 2 || prefix[0] != kBos || !is_task_token(prefix[1])) {
    throw ContractError("decode_step: prefix must begin with BOS and a task token");
  }
  if (std::count_if(prefix.begin(), prefix.end(), is_task_token) != 1) {
    throw ContractError("decode_step: prefix contains more than one task token");
  }
  AttentionMask self_mask{true, {}};
  AttentionMask cross_mask{false, enc.key_valid};

  Var x = drop(embed(prefix), rng);
  for (std::size_t l = 0; l < cfg_.n_dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    Var xn = ln(x, p + ".ln1");
    x = add(x, drop(block_attention(xn, xn, p + ".self", self_mask), rng));
    x = add(x, drop(block_attention(ln(x, p + ".ln2"), enc.h, p + ".cross", cross_mask), rng));
    x = add(x, drop(feed_forward(ln(x, p + ".ln3"), p + ".ffn"), rng));
  }
  // Tied output projection.
  return matmul(ln(x, "dec.ln_f"), transpose(param("embed.tokens")));
}

// ---------------------------------------------------------------------------

TrainingRecord prepare_record(const Dialogue& d, const Vocabulary& v, const KnowledgeIndex* kb, std::size_t k,
                              std::size_t max_len, bool with_targets) {
  TrainingRecord r;
  r.id = d.id;
  r.encoder = encode_dialogue(d, v, max_len);
  if (kb) {
    for (const auto& hit : kb->retrieve(dialogue_tokens(d), k)) {
      r.retrieved.push_back(hit.entry);
      r.knowledge.push_back(text_ids(kb->entry(hit.entry).description, v));
    }
  }
  r.visual = d.visual;
  if (with_targets) {
    for (Task t : kAllTasks) {
      const std::string& text = target_text(d.targets, t);
      if (!normalize(text).empty()) r.targets.emplace(t, encode_target(t, text, v, max_len));
    }
  }
  return r;
}

std::vector<TrainingRecord> prepare_records(std::span<const Dialogue> ds, const Vocabulary& v,
                                            const KnowledgeIndex* kb, std::size_t k, std::size_t max_len,
                                            bool with_targets) {
  std::vector<TrainingRecord> out;
  out.reserve(ds.size());
  for (const auto& d : ds) out.push_back(prepare_record(d, v, kb, k, max_len, with_targets));
  return out;
}

TeacherForcing teacher_forcing(const TokenSequence& seq) {
  if (seq.size() < 3 || seq.ids[0] != kBos || !is_task_token(seq.ids[1])) {
    throw DatasetError("decoder sequence must be [BOS, TASK, ..., EOS]");
  }
  TeacherForcing tf;
  tf.input.assign(seq.ids.begin(), seq.ids.end() - 1);
  tf.target.push_back(kPad);
  tf.target.insert(tf.target.end(), seq.ids.begin() + 2, seq.ids.end());
  return tf;
}

std::map<Task, Var> multitask_forward(ModelGraph& mg, std::span<const TrainingRecord* const> batch,
                                      const TaskSet& tasks, const ForwardRngs& rngs) {
  if (tasks.empty()) throw ConfigError("multitask_forward: no tasks requested");
  if (batch.empty()) throw DatasetError("multitask_forward: empty batch");
  std::map<Task, std::optional<Var>> sums;
  std::map<Task, std::size_t> counts;
  for (const TrainingRecord* r : batch) {
    for (Task t : tasks.tasks()) {
      auto it = r->targets.find(t);
      if (it == r->targets.end()) {
        throw DatasetError("record '" + r->id + "' has no gold " + std::string(task_name(t)) + " target");
      }
    }
    Var know = mg.knowledge_vector(r->knowledge);
    Var vis = mg.visual_vector(r->visual);
    Encoded enc = mg.encode(r->encoder, know, vis, rngs.encoder);
    for (Task t : tasks.tasks()) {
      TeacherForcing tf = teacher_forcing(r->targets.at(t));
      const std::size_t n = static_cast<std::size_t>(std::count_if(tf.target.begin(), tf.target.end(),
                                                                   [](TokenId id) { return id != kPad; }));
      if (n == 0) throw DatasetError("record '" + r->id + "': " + std::string(task_name(t)) + " target is all padding");
      auto rit = rngs.tasks.find(t);
      Var logits = mg.decode_step(tf.input, enc, rit == rngs.tasks.end() ? nullptr : rit->second);
      Var ce = cross_entropy(logits, tf.target, kPad, Reduction::Sum);
      sums[t] = sums[t] ? add(*sums[t], ce) : ce;
      counts[t] += n;
    }
  }
  std::map<Task, Var> out;
  for (Task t : tasks.tasks()) out.emplace(t, scale(*sums[t], 1.0 / static_cast<double>(counts[t])));
  return out;
}

}  // namespace mmk
