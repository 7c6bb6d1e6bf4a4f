// Command-line front end: data preparation, training, decoding and checks.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "thm/errors.hpp"
#include "thm/evaluation.hpp"
#include "thm/model_check.hpp"
#include "thm/train.hpp"

namespace fs = std::filesystem;
using namespace thm;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3, kCheckFailed = 4 };

std::string option_key(const CLI::Option* opt) {
  std::string key = opt->get_lnames().empty() ? opt->get_name() : opt->get_lnames().front();
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

// Appends "--key=value" for every config-file entry whose flag is absent from
// the command line, so explicit flags take precedence over the file.
std::vector<std::string> merge_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].starts_with("--config=")) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  for (const auto& [key, value] : read_kv_file(path)) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.starts_with(flag + "=");
    });
    if (!given) args.push_back(flag + "=" + value);
  }
  return args;
}

ParallelCorpus read_pair(const std::string& src, const std::string& tgt) {
  return read_parallel(src, tgt);
}

// ---- make-synth ----------------------------------------------------------------

struct SynthArgs {
  std::string task = "copy";
  std::size_t vocab = 20;
  std::size_t pairs = 2000;
  std::size_t dev_pairs = 200;
  std::size_t test_pairs = 200;
  std::size_t min_len = 3;
  std::size_t max_len = 12;
  std::uint64_t seed = 0;
  std::string out;
};

int run_make_synth(const SynthArgs& a) {
  const SyntheticTask task = parse_task(a.task);
  Rng rng(a.seed);
  fs::create_directories(a.out);
  const std::pair<std::size_t, std::size_t> lens{a.min_len, a.max_len};
  const auto train = gen_synthetic(task, a.vocab, a.pairs, lens, rng);
  const auto dev = gen_synthetic(task, a.vocab, a.dev_pairs, lens, rng);
  const auto test = gen_synthetic(task, a.vocab, a.test_pairs, lens, rng);
  const fs::path out(a.out);
  write_parallel(train, (out / "train.src").string(), (out / "train.tgt").string());
  write_parallel(dev, (out / "dev.src").string(), (out / "dev.tgt").string());
  write_parallel(test, (out / "test.src").string(), (out / "test.tgt").string());
  std::printf("%s: %zu train, %zu dev, %zu test pairs in %s\n", std::string(task_name(task)).c_str(),
              train.size(), dev.size(), test.size(), a.out.c_str());
  return kOk;
}

// ---- learn-bpe / apply-bpe -------------------------------------------------------

struct BpeArgs {
  std::vector<std::string> inputs;
  std::size_t vocab = 0;
  std::string out;
};

int run_learn_bpe(const BpeArgs& a) {
  std::vector<std::string> text;
  for (const auto& f : a.inputs) {
    const auto lines = read_lines(f);
    text.insert(text.end(), lines.begin(), lines.end());
  }
  const std::size_t target = a.vocab == 0 ? base_vocab_size(text) : a.vocab;
  const BpeModel bpe = learn_bpe(text, target);
  bpe.save(a.out);
  std::printf("vocabulary %zu (%zu merges) -> %s\n", bpe.vocab_size(), bpe.merges().size(),
              a.out.c_str());
  return kOk;
}

struct ApplyArgs {
  std::string bpe;
  std::string input;
  std::string out;
  bool ids = false;
};

int run_apply_bpe(const ApplyArgs& a) {
  const BpeModel bpe = BpeModel::load(a.bpe);
  std::vector<std::string> out;
  for (const auto& line : read_lines(a.input)) {
    std::string s;
    if (a.ids) {
      for (TokenId id : apply_bpe(bpe, line)) s += (s.empty() ? "" : " ") + std::to_string(id);
    } else {
      for (const auto& piece : bpe.segment(line)) s += (s.empty() ? "" : " ") + piece;
    }
    out.push_back(std::move(s));
  }
  if (a.out.empty()) {
    for (const auto& l : out) std::cout << l << '\n';
  } else {
    write_lines(a.out, out);
  }
  return kOk;
}

// ---- train -----------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string src, tgt, dev_src, dev_tgt, test_src, test_tgt;
  std::string bpe;
  std::size_t bpe_vocab = 0;
  std::string out;
  std::string resume;
  std::size_t filter_max_len = 250;
  double filter_ratio = 1.5;
  bool quiet = false;
};

// Flags handled by the command itself rather than the training configuration.
bool is_command_key(const std::string& key) {
  static const std::vector<std::string> keys{
      "config", "data", "src", "tgt", "dev_src", "dev_tgt", "test_src", "test_tgt", "bpe",
      "bpe_vocab", "out", "resume", "filter_max_len", "filter_ratio", "quiet", "help"};
  return std::find(keys.begin(), keys.end(), key) != keys.end();
}

int run_train(const TrainArgs& a, const CLI::App& cmd) {
  KeyValues kv;
  for (const CLI::Option* opt : cmd.get_options()) {
    const std::string key = option_key(opt);
    if (opt->count() == 0 || is_command_key(key)) continue;
    kv[key] = opt->as<std::string>();
  }
  const fs::path data(a.data);
  auto pick = [&](const std::string& flag, const char* name) {
    return !flag.empty() ? flag : (a.data.empty() ? std::string() : (data / name).string());
  };
  const std::string src = pick(a.src, "train.src"), tgt = pick(a.tgt, "train.tgt");
  const std::string dev_src = pick(a.dev_src, "dev.src"), dev_tgt = pick(a.dev_tgt, "dev.tgt");
  std::string test_src = pick(a.test_src, "test.src"), test_tgt = pick(a.test_tgt, "test.tgt");
  if (src.empty() || tgt.empty() || dev_src.empty() || dev_tgt.empty()) {
    throw ParameterError("train: give --data DIR or --src/--tgt/--dev-src/--dev-tgt");
  }
  const ParallelCorpus train = length_filter(read_pair(src, tgt), a.filter_max_len, a.filter_ratio);
  const ParallelCorpus dev = read_pair(dev_src, dev_tgt);
  const bool have_test = !test_src.empty() && fs::exists(test_src) && fs::exists(test_tgt);

  fs::create_directories(a.out);
  ExperimentData d;
  if (!a.bpe.empty()) {
    d.bpe = BpeModel::load(a.bpe);
  } else {
    std::vector<std::string> text = train.source;
    text.insert(text.end(), train.target.begin(), train.target.end());
    d.bpe = learn_bpe(text, a.bpe_vocab == 0 ? base_vocab_size(text) : a.bpe_vocab);
  }
  d.bpe.save((fs::path(a.out) / "bpe.model").string());
  d.train = encode_corpus(train, d.bpe);
  d.dev = encode_corpus(dev, d.bpe);
  if (have_test) d.test = encode_corpus(read_pair(test_src, test_tgt), d.bpe);

  TrainConfig config;
  if (const auto it = kv.find("preset"); it != kv.end()) {
    config.model = preset(it->second);
    kv.erase(it);
  }
  // The vocabulary follows the BPE model unless set explicitly.
  config.model.vocab_size = d.bpe.vocab_size();
  apply_train_kv(config, kv);

  RunOptions options{a.out, std::nullopt, !a.quiet};
  if (!a.resume.empty()) options.resume_from = a.resume;
  const RunRecord record = run_experiment(config, d, options);
  const long best = select_best(record);
  const auto& row = record[static_cast<std::size_t>(best - 1)];
  std::printf("epochs %zu  selected epoch %ld  dev BLEU %.2f  test BLEU %.2f  dev accuracy %.4f\n",
              record.size(), best, row.dev_bleu, row.test_bleu, row.dev_accuracy);
  return kOk;
}

// ---- translate / bleu ------------------------------------------------------------

struct TranslateArgs {
  std::string model;
  std::string bpe;
  std::string src;
  std::string out;
  std::size_t beam = 1;
  double alpha = 0.0;
  std::size_t max_extra = 10;
};

int run_translate(const TranslateArgs& a) {
  const Model model = load_model(a.model);
  const BpeModel bpe = BpeModel::load(a.bpe);
  if (bpe.vocab_size() > model.config().vocab_size) {
    throw VocabError("BPE vocabulary exceeds the model vocabulary");
  }
  std::vector<std::vector<TokenId>> srcs;
  for (const auto& line : read_lines(a.src)) {
    auto ids = apply_bpe(bpe, line);
    ids.push_back(kEos);
    srcs.push_back(std::move(ids));
  }
  std::vector<std::string> hyps;
  if (a.beam <= 1) {
    std::size_t longest = 0;
    for (const auto& s : srcs) longest = std::max(longest, s.size());
    for (const auto& out : greedy_decode_batch(model, srcs, longest + a.max_extra)) {
      hyps.push_back(bpe.decode(out));
    }
  } else {
    for (const auto& s : srcs) {
      hyps.push_back(bpe.decode(beam_search(model, s, a.beam, s.size() + a.max_extra, a.alpha)));
    }
  }
  if (a.out.empty()) {
    for (const auto& h : hyps) std::cout << h << '\n';
  } else {
    write_lines(a.out, hyps);
  }
  return kOk;
}

int run_bleu(const std::string& hyp, const std::string& ref) {
  std::printf("%.2f\n", corpus_bleu(read_lines(hyp), read_lines(ref)));
  return kOk;
}

// ---- gradcheck / param-count -------------------------------------------------------

struct GradcheckArgs {
  std::string preset_name = "tiny";
  std::uint64_t seed = 0;
  std::size_t samples = 16;
  std::size_t vocab = 0;
  double tolerance = 1e-4;
  bool verbose = false;
};

int run_gradcheck(const GradcheckArgs& a) {
  const ModelConfig config = preset(a.preset_name, a.vocab);
  GradCheckOptions opts;
  opts.tolerance = a.tolerance;
  opts.max_entries = a.samples;
  opts.sample_seed = a.seed;
  const auto report = model_gradcheck(config, a.seed, opts);
  if (a.verbose) {
    for (const auto& p : report.parameters) std::printf("%-32s %.3e\n", p.name.c_str(), p.max_rel_error);
  }
  std::printf("%s: %zu parameters, max relative error %.3e (tolerance %.1e) %s\n",
              a.preset_name.c_str(), report.parameters.size(), report.max_rel_error, a.tolerance,
              report.passed ? "PASS" : "FAIL");
  return report.passed ? kOk : kCheckFailed;
}

int run_param_count(const std::string& name, std::size_t vocab, const std::string& compare) {
  const auto count = count_parameters(preset(name, vocab));
  std::printf("%s total %zu\n", name.c_str(), count.total);
  for (const auto& [component, n] : count.components) std::printf("  %-24s %zu\n", component.c_str(), n);
  if (!compare.empty()) {
    const auto other = count_parameters(preset(compare, vocab));
    std::printf("%s total %zu\n", compare.c_str(), other.total);
    std::printf("ratio %.4f\n", static_cast<double>(count.total) / static_cast<double>(other.total));
  }
  return kOk;
}

// ---- select-model / plot-loss -------------------------------------------------------

RunRecord read_loss_log(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open loss log '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_loss_log(ss.str());
}

int run_select_model(const std::string& log, const std::vector<long>& ks) {
  const RunRecord record = read_loss_log(log);
  const long best = select_best(record);
  const auto& row = record[static_cast<std::size_t>(
      std::find_if(record.begin(), record.end(), [&](const EpochRecord& r) { return r.epoch == best; }) -
      record.begin())];
  std::printf("selected epoch %ld  dev BLEU %g  test BLEU %g\n", best, row.dev_bleu, row.test_bleu);
  for (long k : ks) std::printf("top%ld %s\n", k, topk_selection(record, k) ? "yes" : "no");
  return kOk;
}

std::string svg_plot(const RunRecord& record) {
  const double W = 640, H = 400, L = 60, R = 20, T = 30, B = 50;
  double ymax = 0.0;
  for (const auto& r : record) ymax = std::max({ymax, r.train_loss, r.valid_loss});
  ymax = ymax > 0 ? ymax * 1.05 : 1.0;
  const double emax = static_cast<double>(std::max<long>(record.back().epoch, 2));
  auto x = [&](double e) { return L + (e - 1) / (emax - 1) * (W - L - R); };
  auto y = [&](double v) { return H - B - v / ymax * (H - T - B); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">Loss vs Epoch</text>\n"
     << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"12\">epoch</text>\n"
     << "<text x=\"15\" y=\"" << H / 2 << "\" font-size=\"12\" transform=\"rotate(-90 15 " << H / 2
     << ")\">loss</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = ymax * i / 4;
    os << "<text x=\"" << L - 5 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
       << std::setprecision(3) << v << "</text>\n";
  }
  auto series = [&](auto field, const char* colour, const char* label, double ly) {
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (const auto& r : record) os << x(static_cast<double>(r.epoch)) << ',' << y(field(r)) << ' ';
    os << "\"/>\n<text x=\"" << W - R - 90 << "\" y=\"" << ly << "\" fill=\"" << colour
       << "\" font-size=\"12\">" << label << "</text>\n";
  };
  series([](const EpochRecord& r) { return r.train_loss; }, "#1f77b4", "train loss", T + 15);
  series([](const EpochRecord& r) { return r.valid_loss; }, "#d62728", "valid loss", T + 30);
  os << "</svg>\n";
  return os.str();
}

int run_plot_loss(const std::string& log, const std::string& out) {
  const RunRecord record = read_loss_log(log);
  if (record.empty()) throw DataError("loss log '" + log + "' has no rows");
  std::ofstream os(out, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + out + "' for writing");
  if (fs::path(out).extension() == ".svg") {
    os << svg_plot(record);
  } else {
    os << "# epoch train_loss valid_loss dev_bleu test_bleu\n" << format_loss_log(record);
    std::ofstream gp(out + ".gp", std::ios::trunc);
    gp << "set title 'Loss vs Epoch'\nset xlabel 'epoch'\nset ylabel 'loss'\n"
       << "plot '" << out << "' using 1:2 with linespoints title 'train loss', \\\n"
       << "     '" << out << "' using 1:3 with linespoints title 'valid loss'\n";
  }
  std::printf("%zu epochs -> %s\n", record.size(), out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Keep freed tensor buffers in the heap instead of returning them to the
  // system on every graph teardown.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Crossed co-attention (two-headed) encoder-decoder and Transformer baseline", "thm"};
  app.require_subcommand(1);
  std::string config_path;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key=value file; keys mirror the long flags");
  };

  SynthArgs synth;
  auto* make_synth = app.add_subcommand("make-synth", "Generate a synthetic parallel corpus");
  add_config(make_synth);
  make_synth->add_option("--task", synth.task, "copy, reverse or sort")
      ->check(CLI::IsMember({"copy", "reverse", "sort"}))
      ->capture_default_str();
  make_synth->add_option("--vocab", synth.vocab, "Vocabulary size including 4 specials")->capture_default_str();
  make_synth->add_option("--pairs", synth.pairs, "Training pairs")->capture_default_str();
  make_synth->add_option("--dev-pairs", synth.dev_pairs, "Dev pairs")->capture_default_str();
  make_synth->add_option("--test-pairs", synth.test_pairs, "Test pairs")->capture_default_str();
  make_synth->add_option("--min-len", synth.min_len, "Shortest source")->capture_default_str();
  make_synth->add_option("--max-len", synth.max_len, "Longest source")->capture_default_str();
  make_synth->add_option("--seed", synth.seed, "Random seed")->required();
  make_synth->add_option("--out", synth.out, "Output directory")->required();

  BpeArgs bpe_args;
  auto* learn = app.add_subcommand("learn-bpe", "Learn a shared BPE vocabulary");
  add_config(learn);
  learn->add_option("--src", bpe_args.inputs, "Source-side text")->required();
  std::string learn_tgt;
  learn->add_option("--tgt", learn_tgt, "Target-side text");
  learn->add_option("--vocab", bpe_args.vocab, "Target vocabulary size (0: characters only)")->capture_default_str();
  learn->add_option("--out", bpe_args.out, "Model file")->required();

  ApplyArgs apply_args;
  auto* apply = app.add_subcommand("apply-bpe", "Segment text with a BPE model");
  add_config(apply);
  apply->add_option("--bpe", apply_args.bpe, "BPE model file")->required();
  apply->add_option("--src,--in", apply_args.input, "Input text")->required();
  apply->add_option("--out", apply_args.out, "Output file (default stdout)");
  apply->add_flag("--ids", apply_args.ids, "Print token ids instead of subwords");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and write per-epoch checkpoints");
  add_config(train);
  train->add_option("--preset", "Model preset: thm-base, thm-big, transformer-base, transformer-big, tiny, transformer-tiny");
  train->add_option("--seed", "Random seed")->required();
  train->add_option("--epochs", "Number of epochs");
  train->add_option("--data", ta.data, "Directory with train/dev/test .src/.tgt files");
  train->add_option("--src", ta.src, "Training source text");
  train->add_option("--tgt", ta.tgt, "Training target text");
  train->add_option("--dev-src", ta.dev_src, "Dev source text");
  train->add_option("--dev-tgt", ta.dev_tgt, "Dev target text");
  train->add_option("--test-src", ta.test_src, "Test source text");
  train->add_option("--test-tgt", ta.test_tgt, "Test target text");
  train->add_option("--bpe", ta.bpe, "Existing BPE model (default: learn one on the training data)");
  train->add_option("--bpe-vocab", ta.bpe_vocab, "Vocabulary size when learning BPE (0: characters only)");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--resume", ta.resume, "Checkpoint to continue from");
  train->add_option("--filter-max-len", ta.filter_max_len, "Drop training pairs longer than this")->capture_default_str();
  train->add_option("--filter-ratio", ta.filter_ratio, "Drop training pairs with a larger length ratio")->capture_default_str();
  train->add_flag("--quiet", ta.quiet, "No per-epoch progress on stderr");
  for (const char* name : {"--arch", "--d-model", "--n-heads", "--n-blocks", "--d-ff", "--vocab-size",
                           "--max-len", "--dropout-p", "--swap-prob", "--label-smoothing",
                           "--token-budget", "--accum-steps", "--warmup", "--lr-scale", "--beta1",
                           "--beta2", "--adam-eps", "--stop-dev-bleu", "--stop-dev-accuracy",
                           "--decode-extra-len"}) {
    train->add_option(name, "Override of the training configuration key of the same name");
  }

  TranslateArgs tr;
  auto* translate = app.add_subcommand("translate", "Decode a source file with a checkpoint");
  add_config(translate);
  translate->add_option("--model", tr.model, "Checkpoint")->required();
  translate->add_option("--bpe", tr.bpe, "BPE model")->required();
  translate->add_option("--src", tr.src, "Source text")->required();
  translate->add_option("--out", tr.out, "Output file (default stdout)");
  translate->add_option("--beam", tr.beam, "Beam width (1: greedy)")->capture_default_str();
  translate->add_option("--alpha", tr.alpha, "Length penalty exponent")->capture_default_str();
  translate->add_option("--max-extra", tr.max_extra, "Output limit beyond the source length")->capture_default_str();

  std::string hyp, ref;
  auto* bleu = app.add_subcommand("bleu", "Corpus BLEU of a hypothesis file");
  add_config(bleu);
  bleu->add_option("--hyp", hyp, "Hypotheses, one per line")->required();
  bleu->add_option("--ref", ref, "References, one per line")->required();

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check of a preset");
  add_config(gradcheck);
  gradcheck->add_option("--preset", ga.preset_name, "Model preset")->capture_default_str();
  gradcheck->add_option("--seed", ga.seed, "Random seed")->required();
  gradcheck->add_option("--samples", ga.samples, "Entries checked per parameter (0: all)")->capture_default_str();
  gradcheck->add_option("--vocab", ga.vocab, "Vocabulary override")->capture_default_str();
  gradcheck->add_option("--tolerance", ga.tolerance, "Largest accepted relative error")->capture_default_str();
  gradcheck->add_flag("--verbose", ga.verbose, "Per-parameter errors");

  std::string pc_preset, pc_compare;
  std::size_t pc_vocab = 0;
  auto* param_count = app.add_subcommand("param-count", "Closed-form parameter count of a preset");
  add_config(param_count);
  param_count->add_option("--preset", pc_preset, "Model preset")->required();
  param_count->add_option("--vocab", pc_vocab, "Vocabulary size (0: preset default)")->capture_default_str();
  param_count->add_option("--compare", pc_compare, "Second preset; prints the ratio");

  std::string sel_log;
  std::vector<long> ks{1, 3, 5, 10};
  auto* select = app.add_subcommand("select-model", "Dev-BLEU model selection over a loss log");
  add_config(select);
  select->add_option("--log", sel_log, "loss.log written by train")->required();
  select->add_option("--k", ks, "Ranks to test")->delimiter(',')->capture_default_str();

  std::string plot_log, plot_out;
  auto* plot = app.add_subcommand("plot-loss", "Loss-vs-epoch plot (.svg) or gnuplot data file");
  add_config(plot);
  plot->add_option("--log", plot_log, "loss.log written by train")->required();
  plot->add_option("--out", plot_out, "Output: .svg image, otherwise data file plus .gp script")->required();

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = merge_config(std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*make_synth) return run_make_synth(synth);
    if (*learn) {
      if (!learn_tgt.empty()) bpe_args.inputs.push_back(learn_tgt);
      return run_learn_bpe(bpe_args);
    }
    if (*apply) return run_apply_bpe(apply_args);
    if (*train) return run_train(ta, *train);
    if (*translate) return run_translate(tr);
    if (*bleu) return run_bleu(hyp, ref);
    if (*gradcheck) return run_gradcheck(ga);
    if (*param_count) return run_param_count(pc_preset, pc_vocab, pc_compare);
    if (*select) return run_select_model(sel_log, ks);
    if (*plot) return run_plot_loss(plot_log, plot_out);
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return kDivergence;
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
