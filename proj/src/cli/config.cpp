#include "mmk/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <functional>

#include "mmk/errors.hpp"
#include "mmk/io.hpp"

namespace mmk {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::uint64_t to_u64(std::string_view v) {
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) throw ConfigError("expected a non-negative integer, got '" + std::string(v) + "'");
  return x;
}

double to_double(std::string_view v) {
  const std::string s(v);
  char* end = nullptr;
  const double x = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(x)) throw ConfigError("expected a finite number, got '" + s + "'");
  return x;
}

// Shortest text that parses back to the same double.
std::string num(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename T>
Field size_field(std::string key, T RunConfig::*group, std::size_t T::*member) {
  return {std::move(key), [=](const RunConfig& c) { return std::to_string(c.*group.*member); },
          [=](RunConfig& c, std::string_view v) { c.*group.*member = static_cast<std::size_t>(to_u64(v)); }};
}

template <typename T>
Field double_field(std::string key, T RunConfig::*group, double T::*member) {
  return {std::move(key), [=](const RunConfig& c) { return num(c.*group.*member); },
          [=](RunConfig& c, std::string_view v) { c.*group.*member = to_double(v); }};
}

const std::vector<Field>& fields() {
  using M = ModelConfig;
  using T = TrainConfig;
  using D = DecodeConfig;
  static const std::vector<Field> f{
      size_field("model.d_model", &RunConfig::model, &M::d_model),
      size_field("model.n_heads", &RunConfig::model, &M::n_heads),
      size_field("model.n_enc_layers", &RunConfig::model, &M::n_enc_layers),
      size_field("model.n_dec_layers", &RunConfig::model, &M::n_dec_layers),
      size_field("model.d_ff", &RunConfig::model, &M::d_ff),
      size_field("model.d_adapter", &RunConfig::model, &M::d_adapter),
      size_field("model.d_vis", &RunConfig::model, &M::d_vis),
      size_field("model.d_know", &RunConfig::model, &M::d_know),
      size_field("model.max_len", &RunConfig::model, &M::max_len),
      size_field("model.vocab_size", &RunConfig::model, &M::vocab_size),
      double_field("model.dropout", &RunConfig::model, &M::dropout_rate),
      double_field("model.gate_bias_init", &RunConfig::model, &M::gate_bias_init),
      double_field("model.ln_eps", &RunConfig::model, &M::ln_eps),
      {"model.adapter_order",
       [](const RunConfig& c) {
         std::string s;
         for (Modality m : c.model.adapter_order) s += (s.empty() ? "" : ",") + std::string(modality_name(m));
         return s.empty() ? std::string("none") : s;
       },
       [](RunConfig& c, std::string_view v) {
         c.model.adapter_order.clear();
         if (v == "none") return;
         for (const auto& m : split_list(v)) {
           if (m == "know") c.model.adapter_order.push_back(Modality::Knowledge);
           else if (m == "vis") c.model.adapter_order.push_back(Modality::Visual);
           else throw ConfigError("adapter_order entries are 'know' or 'vis', got '" + m + "'");
         }
       }},
      double_field("train.lr", &RunConfig::train, &T::lr),
      double_field("train.beta1", &RunConfig::train, &T::beta1),
      double_field("train.beta2", &RunConfig::train, &T::beta2),
      double_field("train.adam_eps", &RunConfig::train, &T::adam_eps),
      size_field("train.batch_size", &RunConfig::train, &T::batch_size),
      size_field("train.max_steps", &RunConfig::train, &T::max_steps),
      size_field("train.warmup_steps", &RunConfig::train, &T::warmup_steps),
      {"train.task_weights",
       [](const RunConfig& c) {
         const auto& w = c.train.task_weights;
         return num(w[0]) + "," + num(w[1]) + "," + num(w[2]);
       },
       [](RunConfig& c, std::string_view v) {
         const auto parts = split_list(v);
         if (parts.size() != 3) throw ConfigError("task_weights needs three values (sum,mcs,di)");
         for (std::size_t i = 0; i < 3; ++i) c.train.task_weights[i] = to_double(parts[i]);
       }},
      {"train.seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
       [](RunConfig& c, std::string_view v) { c.train.seed = to_u64(v); }},
      double_field("train.grad_clip_norm", &RunConfig::train, &T::grad_clip_norm),
      size_field("train.eval_every", &RunConfig::train, &T::eval_every),
      {"decode.strategy",
       [](const RunConfig& c) { return std::string(c.decode.strategy == DecodeStrategy::Greedy ? "greedy" : "beam"); },
       [](RunConfig& c, std::string_view v) {
         if (v == "greedy") c.decode.strategy = DecodeStrategy::Greedy;
         else if (v == "beam") c.decode.strategy = DecodeStrategy::Beam;
         else throw ConfigError("strategy is 'greedy' or 'beam', got '" + std::string(v) + "'");
       }},
      size_field("decode.beam_width", &RunConfig::decode, &D::beam_width),
      size_field("decode.max_new_tokens", &RunConfig::decode, &D::max_new_tokens),
      double_field("decode.length_penalty", &RunConfig::decode, &D::length_penalty),
      {"data.retrieve_k", [](const RunConfig& c) { return std::to_string(c.retrieve_k); },
       [](RunConfig& c, std::string_view v) { c.retrieve_k = static_cast<std::size_t>(to_u64(v)); }},
      {"data.min_freq", [](const RunConfig& c) { return std::to_string(c.min_freq); },
       [](RunConfig& c, std::string_view v) {
         const auto x = to_u64(v);
         if (x < 1 || x > 1000000) throw ConfigError("min_freq must be in [1, 1000000]");
         c.min_freq = static_cast<int>(x);
       }},
  };
  return f;
}

}  // namespace

void RunConfig::validate() const {
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = kNumSpecials + 1;  // filled in from the data
  m.validate();
  train.validate();
  decode.validate();
  if (retrieve_k < 1) throw ConfigError("data.retrieve_k must be >= 1");
  if (min_freq < 1) throw ConfigError("data.min_freq must be >= 1");
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"test-nano", "test-small", "desk-default"};
  return names;
}

RunConfig preset(std::string_view name) {
  RunConfig c;
  if (name == "test-nano") {
    // Gradient-check scale; the vocabulary is synthetic.
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.n_enc_layers = 1;
    c.model.n_dec_layers = 1;
    c.model.d_ff = 32;
    c.model.d_adapter = 4;
    c.model.d_vis = 8;
    c.model.d_know = 16;
    c.model.max_len = 24;
    c.model.vocab_size = 50;
    c.train.max_steps = 50;
    c.train.batch_size = 4;
    c.train.warmup_steps = 10;
  } else if (name == "test-small") {
    // Overfits 16 synthetic dialogues in a few hundred steps.
    c.train.lr = 3e-3;
    c.train.warmup_steps = 50;
    c.train.max_steps = 2000;
    c.train.eval_every = 100;
    c.decode.max_new_tokens = 40;
  } else if (name == "desk-default") {
    c.model.dropout_rate = 0.1;
    c.train.lr = 2e-3;
    c.train.warmup_steps = 100;
    c.train.max_steps = 1500;
    c.train.eval_every = 250;
    c.decode.strategy = DecodeStrategy::Beam;
    c.decode.beam_width = 4;
    c.decode.length_penalty = 0.6;
    c.decode.max_new_tokens = 40;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown config preset '" + std::string(name) + "' (known: " + known + ")");
  }
  return c;
}

RunConfig parse_run_config(std::string_view text, const std::string& source) {
  RunConfig c;
  std::string section;
  std::size_t line_no = 0, pos = 0;
  std::vector<std::string> seen;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(raw.substr(0, hash));
    if (line.empty()) continue;
    auto fail = [&](const std::string& msg) -> void {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + msg);
    };
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header '" + line + "'");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "decode" && section != "data")
        fail("unknown section '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + line + "'");
    std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
    const auto& fs = fields();
    auto it = std::find_if(fs.begin(), fs.end(), [&](const Field& f) { return f.key == key; });
    if (it == fs.end()) fail("unknown key '" + key + "'");
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) fail("key '" + key + "' set twice");
    seen.push_back(key);
    if (value.empty()) fail("key '" + key + "' has no value");
    try {
      it->set(c, value);
    } catch (const ConfigError& e) {
      fail(key + ": " + e.what());
    }
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return c;
}

RunConfig load_run_config(const std::string& name_or_path) {
  const auto& names = preset_names();
  if (std::find(names.begin(), names.end(), name_or_path) != names.end()) return preset(name_or_path);
  if (!std::filesystem::exists(name_or_path))
    throw ConfigError("--config: '" + name_or_path + "' is neither a preset nor an existing file");
  return parse_run_config(read_file(name_or_path), name_or_path);
}

std::string format_run_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace mmk
