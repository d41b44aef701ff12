#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmk/autograd.hpp"
#include "mmk/dialogue.hpp"
#include "mmk/knowledge.hpp"
#include "mmk/rng.hpp"
#include "mmk/textproc.hpp"

namespace mmk {

enum class Modality { Knowledge, Visual };

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t d_ff = 64;
  std::size_t d_adapter = 8;
  std::size_t d_vis = 20;
  std::size_t d_know = 32;  // must equal d_model: pooled from token embeddings
  std::size_t max_len = 96;  // positions shared by encoder and decoder
  std::size_t vocab_size = 0;
  double dropout_rate = 0.0;
  double gate_bias_init = 2.0;
  double ln_eps = 1e-5;
  // Adapters applied after the final encoder layer, in this order.
  std::vector<Modality> adapter_order{Modality::Knowledge, Modality::Visual};

  // Throws ConfigError naming the offending field.
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string_view modality_name(Modality m);

// Linear weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1, gate bias =
// gate_bias_init. Deterministic in (cfg, seed).
ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed);
std::size_t param_count(const ParamMap& params);
// Throws ConfigError if names or shapes disagree with cfg.
void check_params(const ModelConfig& cfg, const ParamMap& params);

// Encoder output plus the key mask the decoder's cross-attention needs.
struct Encoded {
  Var h;
  std::vector<bool> key_valid;
};

// Builds the model's forward pass on one Graph. Parameters enter the graph
// on first use (trainable leaves, or constants for inference) and are reused
// by later records.
class ModelGraph {
 public:
  ModelGraph(Graph& g, const ModelConfig& cfg, const ParamMap& params, bool trainable);

  Graph& graph() { return g_; }
  const ModelConfig& config() const { return cfg_; }
  Var param(const std::string& name);

  // Token + position embeddings, pre-norm layers, final layer norm. No
  // adapters. PAD ids are masked as attention keys.
  Encoded encode_text(const TokenSequence& tokens, Rng* dropout_rng);
  // Text encoder followed by the adapters in cfg order.
  Encoded encode(const TokenSequence& tokens, Var know_vec, Var vis_vec, Rng* dropout_rng);

  // m' = m W_m; g = sigmoid([h; m'] W_g + b_g); fused = g*h + (1-g)*m';
  // out = h + ReLU(LN(fused) W_d) W_u. `prefix` is "adapter.know" etc.
  // When `fused_out` is given it receives the fused state.
  Var adapter_fuse(Var h, Var m, const std::string& prefix, Var* fused_out = nullptr);

  // Mean-pooled description embeddings, or zeros [1 x d_know].
  Var knowledge_vector(std::span<const std::vector<TokenId>> descriptions);
  // [1 x d_vis]; zeros when absent.
  Var visual_vector(const std::optional<std::vector<double>>& visual);

  // Logits [prefix_len x vocab] for a prefix that starts [BOS, TASK_*] and
  // has no other task token; ContractError otherwise.
  Var decode_step(std::span<const TokenId> prefix, const Encoded& enc, Rng* dropout_rng);

 private:
  // Projections of x (queries) and src (keys/values), attention, output projection.
  Var block_attention(Var x, Var src, const std::string& p, const AttentionMask& mask);
  Var feed_forward(Var x, const std::string& p);
  Var ln(Var x, const std::string& p);
  Var drop(Var x, Rng* rng);
  Var embed(std::span<const TokenId> ids);

  Graph& g_;
  const ModelConfig& cfg_;
  const ParamMap& params_;
  bool trainable_;
  std::map<std::string, Var> vars_;
};

// One dialogue prepared for the model: retrieval is done once, here, and
// cached together with the encoded sequences.
struct TrainingRecord {
  std::string id;
  TokenSequence encoder;
  std::vector<std::size_t> retrieved;           // knowledge entry indices
  std::vector<std::vector<TokenId>> knowledge;  // description ids of retrieved entries
  std::optional<std::vector<double>> visual;
  std::map<Task, TokenSequence> targets;        // [BOS, TASK, ..., EOS]
};

TrainingRecord prepare_record(const Dialogue& d, const Vocabulary& v, const KnowledgeIndex* kb, std::size_t k,
                              std::size_t max_len, bool with_targets);
std::vector<TrainingRecord> prepare_records(std::span<const Dialogue> ds, const Vocabulary& v,
                                            const KnowledgeIndex* kb, std::size_t k, std::size_t max_len,
                                            bool with_targets = true);

// Teacher forcing split of a decoder sequence S = [BOS, TASK, t1..tn, EOS]:
// input = S without its last id; target = [PAD, t1..tn, EOS] (PAD ignored,
// so the task token itself is never predicted).
struct TeacherForcing {
  std::vector<TokenId> input;
  std::vector<TokenId> target;
};
TeacherForcing teacher_forcing(const TokenSequence& seq);

struct ForwardRngs {
  Rng* encoder = nullptr;
  std::map<Task, Rng*> tasks;
};

// One encode per record shared by every task; per task the summed token CE
// over the batch divided by the batch's target-token count. DatasetError if
// a record lacks a requested target or a target has no predictable token.
std::map<Task, Var> multitask_forward(ModelGraph& mg, std::span<const TrainingRecord* const> batch,
                                      const TaskSet& tasks, const ForwardRngs& rngs);

}  // namespace mmk
