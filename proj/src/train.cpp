#include "thm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "thm/errors.hpp"
#include "thm/evaluation.hpp"

namespace thm {

namespace {

constexpr std::uint64_t kBatchSalt = 0xba7c4000;
constexpr std::uint64_t kDropoutSalt = 0xd409;

}  // namespace

double lr_at(long step, std::size_t d_model, long warmup) {
  if (step < 1) throw ParameterError("lr_at: step must be at least 1, got " + std::to_string(step));
  if (warmup < 1) throw ParameterError("lr_at: warmup must be at least 1");
  if (d_model == 0) throw ParameterError("lr_at: d_model must be positive");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

TrainState TrainState::fresh(const Model& model, std::uint64_t seed) {
  TrainState st;
  for (const auto& p : model.parameters()) {
    st.m.emplace_back(p.value().shape());
    st.v.emplace_back(p.value().shape());
  }
  st.rng = Rng(seed).fork(kDropoutSalt);
  return st;
}

namespace {

Var batch_loss(const Model& model, const Batch& b, Rng& rng, bool training) {
  const ModelConfig& c = model.config();
  const EncoderInput input = training && c.arch == Arch::THM ? EncoderInput{b.src_left, b.src_right}
                                                              : EncoderInput::clean(b.src);
  const EncoderMemory memory = model.encode(input, rng, training);
  const Var logits = model.decode(memory, b.tgt_in, rng, training);
  return cross_entropy(logits, b.tgt_out.ids, c.label_smoothing, kPad);
}

}  // namespace

double train_step(Model& model, std::span<const Batch> batches, TrainState& state,
                  const OptimConfig& opt) {
  if (batches.empty()) throw DataError("train_step: no batches");
  auto& params = model.parameters();
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("train_step: optimizer state does not match the model");
  }
  for (auto& p : params) p.var.zero_grad();

  const long step = state.step + 1;
  const double weight = 1.0 / static_cast<double>(batches.size());
  double loss_sum = 0.0;
  for (const auto& b : batches) {
    const Var loss = batch_loss(model, b, state.rng, true);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
      throw DivergenceError("non-finite training loss at step " + std::to_string(step), step);
    }
    loss_sum += value;
    backward(scale(loss, weight));
  }

  const double lr = opt.lr_scale * lr_at(step, model.config().d_model, opt.warmup);
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i].value();
    const Tensor& g = params[i].grad();
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      if (!std::isfinite(gk)) {
        throw DivergenceError("non-finite gradient for '" + params[i].name + "' at step " +
                                  std::to_string(step), step);
      }
      m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * gk;
      v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt.eps);
    }
    // Everything persistent lives on the float32 grid so that checkpoints
    // restore it exactly.
    round_to_float(w);
    round_to_float(m);
    round_to_float(v);
  }
  state.step = step;
  return loss_sum * weight;
}

double evaluate_loss(const Model& model, std::span<const EncodedPair> pairs,
                     std::size_t token_budget) {
  if (pairs.empty()) throw DataError("evaluate_loss: no sentence pairs");
  NoGradGuard guard;
  Rng rng(0);
  double sum = 0.0;
  std::size_t tokens = 0;
  for (const auto& b : make_batches(pairs, token_budget, rng, 0.0, false)) {
    const std::size_t n = b.tgt_out.non_pad();
    sum += batch_loss(model, b, rng, false).value()[0] * static_cast<double>(n);
    tokens += n;
  }
  return sum / static_cast<double>(tokens);
}

// ---- run records -------------------------------------------------------------

long select_best(const RunRecord& record) {
  if (record.empty()) throw DataError("select_best: empty run record");
  std::size_t best = 0;
  for (std::size_t i = 1; i < record.size(); ++i) {
    if (record[i].dev_bleu > record[best].dev_bleu) best = i;
  }
  return record[best].epoch;
}

bool topk_selection(const RunRecord& record, long k) {
  if (k < 1) throw ParameterError("topk_selection: k must be at least 1, got " + std::to_string(k));
  const long chosen = select_best(record);
  const auto it = std::find_if(record.begin(), record.end(),
                               [&](const EpochRecord& r) { return r.epoch == chosen; });
  long rank = 1;
  for (const auto& r : record) rank += r.test_bleu > it->test_bleu;
  return rank <= k;
}

std::string loss_log_line(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%ld %.6g %.6g %.6g %.6g", r.epoch, r.train_loss, r.valid_loss,
                r.dev_bleu, r.test_bleu);
  return buf;
}

std::string format_loss_log(const RunRecord& record) {
  std::string out;
  for (const auto& r : record) out += loss_log_line(r) + '\n';
  return out;
}

RunRecord parse_loss_log(const std::string& text) {
  RunRecord record;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    EpochRecord r;
    if (!(ls >> r.epoch >> r.train_loss >> r.valid_loss >> r.dev_bleu >> r.test_bleu)) {
      throw DataError("loss log line " + std::to_string(line_no) + ": expected 5 columns");
    }
    record.push_back(r);
  }
  return record;
}

// ---- configuration -------------------------------------------------------------

void apply_train_kv(TrainConfig& c, const KeyValues& kv) {
  if (const auto it = kv.find("preset"); it != kv.end()) {
    c.model = preset(it->second);
  }
  for (const auto& [k, v] : kv) {
    if (k == "preset") continue;
    if (k == "seed") c.seed = parse_size(k, v);
    else if (k == "epochs") c.epochs = parse_long(k, v);
    else if (k == "token_budget") c.token_budget = parse_size(k, v);
    else if (k == "accum_steps") c.accum_steps = parse_size(k, v);
    else if (k == "decode_extra_len") c.decode_extra_len = parse_size(k, v);
    else if (k == "stop_dev_bleu") c.stop_dev_bleu = parse_double(k, v);
    else if (k == "stop_dev_accuracy") c.stop_dev_accuracy = parse_double(k, v);
    else if (k == "warmup") c.optim.warmup = parse_long(k, v);
    else if (k == "lr_scale") c.optim.lr_scale = parse_double(k, v);
    else if (k == "beta1") c.optim.beta1 = parse_double(k, v);
    else if (k == "beta2") c.optim.beta2 = parse_double(k, v);
    else if (k == "adam_eps") c.optim.eps = parse_double(k, v);
    else if (!apply_config_kv(c.model, {{k, v}}).empty()) {
      throw ParameterError("unknown config key '" + k + "'");
    }
  }
  c.model.validate();
  if (c.epochs < 1) throw ParameterError("epochs must be at least 1");
  if (c.accum_steps < 1) throw ParameterError("accum_steps must be at least 1");
  if (c.token_budget < 1) throw ParameterError("token_budget must be at least 1");
  if (c.optim.warmup < 1) throw ParameterError("warmup must be at least 1");
}

KeyValues train_config_kv(const TrainConfig& c) {
  KeyValues kv = parse_kv(config_to_kv(c.model));
  kv["seed"] = std::to_string(c.seed);
  kv["epochs"] = std::to_string(c.epochs);
  kv["token_budget"] = std::to_string(c.token_budget);
  kv["accum_steps"] = std::to_string(c.accum_steps);
  kv["decode_extra_len"] = std::to_string(c.decode_extra_len);
  kv["stop_dev_bleu"] = format_double(c.stop_dev_bleu);
  kv["stop_dev_accuracy"] = format_double(c.stop_dev_accuracy);
  kv["warmup"] = std::to_string(c.optim.warmup);
  kv["lr_scale"] = format_double(c.optim.lr_scale);
  kv["beta1"] = format_double(c.optim.beta1);
  kv["beta2"] = format_double(c.optim.beta2);
  kv["adam_eps"] = format_double(c.optim.eps);
  return kv;
}

// ---- experiments -------------------------------------------------------------

namespace {

// Keys that may differ between an interrupted run and its continuation.
bool resumable_override(const std::string& key) {
  return key == "epochs" || key == "stop_dev_bleu" || key == "stop_dev_accuracy";
}

std::string record_entry(const EpochRecord& r) {
  return std::to_string(r.epoch) + ' ' + format_double(r.train_loss) + ' ' +
         format_double(r.valid_loss) + ' ' + format_double(r.dev_bleu) + ' ' +
         format_double(r.test_bleu) + ' ' + format_double(r.dev_accuracy) + ' ' +
         format_double(r.seconds);
}

EpochRecord parse_record_entry(const std::string& text) {
  std::istringstream is(text);
  EpochRecord r;
  if (!(is >> r.epoch >> r.train_loss >> r.valid_loss >> r.dev_bleu >> r.test_bleu >>
        r.dev_accuracy >> r.seconds)) {
    throw DataError("checkpoint: malformed run record entry '" + text + "'");
  }
  return r;
}

std::string record_key(long epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "record.%06ld", epoch);
  return buf;
}

Checkpoint training_checkpoint(const Model& model, const TrainConfig& config,
                               const TrainState& state, const RunRecord& record) {
  Checkpoint ck = make_checkpoint(model, state.step);
  for (const auto& [k, v] : train_config_kv(config)) {
    if (!parse_kv(config_to_kv(config.model)).count(k)) ck.extra["train." + k] = v;
  }
  ck.extra["state.epoch"] = std::to_string(state.epoch);
  ck.extra["state.rng"] = state.rng.save_state();
  ck.extra["state.best_dev_bleu"] = format_double(state.best_dev_bleu);
  for (const auto& r : record) ck.extra[record_key(r.epoch)] = record_entry(r);
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.tensors.emplace_back("optim.m." + params[i].name, state.m[i]);
    ck.tensors.emplace_back("optim.v." + params[i].name, state.v[i]);
  }
  return ck;
}

struct Restored {
  TrainConfig config;
  TrainState state;
  RunRecord record;
};

Restored restore(const Checkpoint& ck, const Model& model) {
  Restored r;
  r.config.model = ck.config;
  KeyValues train_keys;
  for (const auto& [k, v] : ck.extra) {
    if (k.starts_with("train.")) train_keys[k.substr(6)] = v;
  }
  apply_train_kv(r.config, train_keys);
  r.state.step = ck.step;
  const auto get = [&](const std::string& k) {
    const auto it = ck.extra.find(k);
    if (it == ck.extra.end()) throw DataError("checkpoint lacks training entry '" + k + "'");
    return it->second;
  };
  r.state.epoch = parse_long("state.epoch", get("state.epoch"));
  r.state.rng = Rng::load_state(get("state.rng"));
  r.state.best_dev_bleu = parse_double("state.best_dev_bleu", get("state.best_dev_bleu"));
  for (const auto& [k, v] : ck.extra) {
    if (k.starts_with("record.")) r.record.push_back(parse_record_entry(v));
  }
  const auto& params = model.parameters();
  const std::size_t n = params.size();
  if (ck.tensors.size() != 3 * n) {
    throw DataError("checkpoint holds no optimizer state; it cannot be resumed");
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [mn, m] = ck.tensors[n + 2 * i];
    const auto& [vn, v] = ck.tensors[n + 2 * i + 1];
    if (mn != "optim.m." + params[i].name || vn != "optim.v." + params[i].name) {
      throw DataError("checkpoint optimizer state out of order at '" + params[i].name + "'");
    }
    r.state.m.push_back(m);
    r.state.v.push_back(v);
  }
  return r;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << text;
}

}  // namespace

RunRecord run_experiment(const TrainConfig& config, const ExperimentData& data,
                         const RunOptions& options) {
  namespace fs = std::filesystem;
  config.model.validate();
  if (data.train.empty() || data.dev.empty()) throw DataError("run_experiment: empty train or dev set");
  if (config.model.vocab_size < data.bpe.vocab_size()) {
    throw VocabError("model vocabulary " + std::to_string(config.model.vocab_size) +
                     " is smaller than the BPE vocabulary " + std::to_string(data.bpe.vocab_size()));
  }
  const fs::path out(options.out_dir);
  fs::create_directories(out);

  Model model(config.model, config.seed);
  TrainState state = TrainState::fresh(model, config.seed);
  RunRecord record;
  if (options.resume_from) {
    const Checkpoint ck = load_checkpoint(*options.resume_from);
    model = model_from_checkpoint(ck);
    Restored r = restore(ck, model);
    const KeyValues saved = train_config_kv(r.config);
    for (const auto& [k, v] : train_config_kv(config)) {
      if (!resumable_override(k) && saved.at(k) != v) {
        throw ParameterError("resume: setting '" + k + "' differs from the checkpoint (" +
                             saved.at(k) + " vs " + v + ")");
      }
    }
    state = std::move(r.state);
    record = std::move(r.record);
  }

  const std::size_t max_pair = [&] {
    std::size_t m = 0;
    for (const auto& p : data.train) m = std::max(m, pair_cost(p));
    return m;
  }();
  if (max_pair > config.token_budget) {
    throw DataError("token_budget " + std::to_string(config.token_budget) +
                    " is below the longest training pair (" + std::to_string(max_pair) + ")");
  }
  const std::size_t eval_budget = std::max<std::size_t>(config.token_budget, 1024);

  auto stop_reached = [&](const EpochRecord& r) {
    const bool any = config.stop_dev_bleu > 0 || config.stop_dev_accuracy > 0;
    return any && r.dev_bleu >= config.stop_dev_bleu && r.dev_accuracy >= config.stop_dev_accuracy;
  };
  if (!record.empty() && stop_reached(record.back())) return record;

  for (long epoch = state.epoch + 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng batch_rng = Rng(config.seed).fork(kBatchSalt + static_cast<std::uint64_t>(epoch));
    const auto batches = make_batches(data.train, config.token_budget, batch_rng, config.model.swap_prob);
    double loss_sum = 0.0;
    std::size_t updates = 0;
    for (std::size_t i = 0; i < batches.size(); i += config.accum_steps) {
      const std::size_t n = std::min(config.accum_steps, batches.size() - i);
      loss_sum += train_step(model, std::span(batches).subspan(i, n), state, config.optim);
      ++updates;
    }
    state.epoch = epoch;

    EpochRecord row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(updates);
    row.valid_loss = evaluate_loss(model, data.dev, eval_budget);
    row.dev_bleu = corpus_bleu(model, data.bpe, data.dev, config.decode_extra_len);
    row.test_bleu = data.test.empty() ? 0.0 : corpus_bleu(model, data.bpe, data.test, config.decode_extra_len);
    row.dev_accuracy = token_accuracy(model, data.dev);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    record.push_back(row);
    const bool improved = row.dev_bleu > state.best_dev_bleu;
    if (improved) state.best_dev_bleu = row.dev_bleu;

    const Checkpoint ck = training_checkpoint(model, config, state, record);
    save_checkpoint(ck, (out / ("epoch_" + std::to_string(epoch) + ".ckpt")).string());
    if (improved) save_checkpoint(ck, (out / "best.ckpt").string());
    write_text(out / "loss.log", format_loss_log(record));
    if (options.verbose) {
      std::fprintf(stderr, "%s  acc=%.4f  %.1fs\n", loss_log_line(row).c_str(), row.dev_accuracy,
                   row.seconds);
    }
    if (stop_reached(row)) break;
  }
  return record;
}

Model load_model(const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); }

}  // namespace thm
