#include "morpheus/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "morpheus/errors.hpp"

namespace morpheus::trainer {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw UsageError("config: bad value for " + std::string(key) + ": '" + std::string(value) + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw UsageError("config: bad boolean for " + std::string(key) + ": '" + std::string(value) + "'");
}

}  // namespace

std::string to_string(JointMode mode) { return mode == JointMode::summed ? "summed" : "alternating"; }

void TrainingConfig::validate() const {
  auto fail = [](const std::string& msg) { throw UsageError("config: " + msg); };
  if (codes < 1) fail("codes must be >= 1");
  if (segments < 1) fail("segments must be >= 1");
  if (d < 1 || layers < 1 || heads < 1 || d % heads != 0) fail("d must be a positive multiple of heads");
  if (max_sequence_length < 2) fail("max_sequence_length must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (!(beta > 0.0) || !(tau > 0.0)) fail("beta and tau must be positive");
  for (double w : {lambda_g, lambda_v, lambda_d, lambda_c}) {
    if (!(w >= 0.0) || !std::isfinite(w)) fail("loss weights must be finite and non-negative");
  }
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (!(clip_norm >= 0.0)) fail("clip_norm must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (stage1_epochs < 0 || stage3_epochs < 0) fail("epoch counts must be >= 0");
  if (average_batch < 0) fail("average_batch must be >= 0");
  if (em_max_iters < 1) fail("em_max_iters must be >= 1");
  if (!(nucleus_p > 0.0 && nucleus_p <= 1.0)) fail("nucleus_p must be in (0, 1]");
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (max_response_tokens < 1) fail("max_response_tokens must be >= 1");
  if (self_bleu_cap < 2) fail("self_bleu_cap must be >= 2");
}

neural::ModelConfig TrainingConfig::model_config(int vocab_size) const {
  neural::ModelConfig m;
  m.d = d;
  m.layers = layers;
  m.heads = heads;
  m.max_sequence_length = max_sequence_length;
  m.vocab_size = vocab_size;
  m.dropout = dropout;
  m.segments = segments;
  return m;
}

std::vector<std::pair<std::string, std::string>> TrainingConfig::to_key_values() const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"codes", std::to_string(codes)},
      {"segments", std::to_string(segments)},
      {"d", std::to_string(d)},
      {"layers", std::to_string(layers)},
      {"heads", std::to_string(heads)},
      {"max_sequence_length", std::to_string(max_sequence_length)},
      {"dropout", format_double(dropout)},
      {"beta", format_double(beta)},
      {"tau", format_double(tau)},
      {"lambda_g", format_double(lambda_g)},
      {"lambda_v", format_double(lambda_v)},
      {"lambda_d", format_double(lambda_d)},
      {"lambda_c", format_double(lambda_c)},
      {"learning_rate", format_double(learning_rate)},
      {"warmup_steps", std::to_string(warmup_steps)},
      {"clip_norm", format_double(clip_norm)},
      {"batch_size", std::to_string(batch_size)},
      {"stage1_epochs", std::to_string(stage1_epochs)},
      {"stage3_epochs", std::to_string(stage3_epochs)},
      {"seed", std::to_string(seed)},
      {"init_strategy", codebook::to_string(init_strategy)},
      {"average_batch", std::to_string(average_batch)},
      {"em_max_iters", std::to_string(em_max_iters)},
      {"em_tol", format_double(em_tol)},
      {"peft", b(peft)},
      {"straight_through", b(straight_through)},
      {"joint_mode", to_string(joint_mode)},
      {"unconditioned", b(unconditioned)},
      {"nucleus_p", format_double(nucleus_p)},
      {"temperature", format_double(temperature)},
      {"max_response_tokens", std::to_string(max_response_tokens)},
      {"sample_codes", b(sample_codes)},
      {"self_bleu_cap", std::to_string(self_bleu_cap)},
  };
}

std::string TrainingConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : to_key_values()) out += k + "=" + v + "\n";
  return out;
}

std::string TrainingConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(to_text())));
  return buf;
}

void TrainingConfig::set(std::string_view key, std::string_view value) {
  const std::string v = trim(value);
  auto i = [&] { return parse_number<int>(key, v); };
  auto f = [&] { return parse_number<double>(key, v); };
  if (key == "codes") codes = i();
  else if (key == "segments") segments = i();
  else if (key == "d") d = i();
  else if (key == "layers") layers = i();
  else if (key == "heads") heads = i();
  else if (key == "max_sequence_length") max_sequence_length = i();
  else if (key == "dropout") dropout = f();
  else if (key == "beta") beta = f();
  else if (key == "tau") tau = f();
  else if (key == "lambda_g") lambda_g = f();
  else if (key == "lambda_v") lambda_v = f();
  else if (key == "lambda_d") lambda_d = f();
  else if (key == "lambda_c") lambda_c = f();
  else if (key == "learning_rate") learning_rate = f();
  else if (key == "warmup_steps") warmup_steps = i();
  else if (key == "clip_norm") clip_norm = f();
  else if (key == "batch_size") batch_size = i();
  else if (key == "stage1_epochs") stage1_epochs = i();
  else if (key == "stage3_epochs") stage3_epochs = i();
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else if (key == "init_strategy") init_strategy = codebook::parse_init_strategy(v);
  else if (key == "average_batch") average_batch = i();
  else if (key == "em_max_iters") em_max_iters = i();
  else if (key == "em_tol") em_tol = f();
  else if (key == "peft") peft = parse_bool(key, v);
  else if (key == "straight_through") straight_through = parse_bool(key, v);
  else if (key == "joint_mode") {
    if (v == "summed") joint_mode = JointMode::summed;
    else if (v == "alternating") joint_mode = JointMode::alternating;
    else throw UsageError("config: joint_mode must be summed or alternating");
  } else if (key == "unconditioned") unconditioned = parse_bool(key, v);
  else if (key == "nucleus_p") nucleus_p = f();
  else if (key == "temperature") temperature = f();
  else if (key == "max_response_tokens") max_response_tokens = i();
  else if (key == "sample_codes") sample_codes = parse_bool(key, v);
  else if (key == "self_bleu_cap") self_bleu_cap = i();
  else throw UsageError("config: unknown key '" + std::string(key) + "'");
}

TrainingConfig parse_config(std::string_view text, TrainingConfig base) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    base.set(trim(t.substr(0, eq)), t.substr(eq + 1));
  }
  base.validate();
  return base;
}

TrainingConfig load_config(const std::filesystem::path& path, TrainingConfig base) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), std::move(base));
}

}  // namespace morpheus::trainer
