// unlearn: command-line driver for base training, biased fine-tuning, task
// vectors, PCGU, evaluation and k/lambda sweeps.
//
// Exit codes: 0 ok, 1 usage or configuration, 2 data/format/I-O, 3 numeric.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "unlearn/checkpoint.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/eval.hpp"
#include "unlearn/format.hpp"
#include "unlearn/pcgu.hpp"
#include "unlearn/shard.hpp"
#include "unlearn/sweep.hpp"
#include "unlearn/synth.hpp"
#include "unlearn/task_vector.hpp"
#include "unlearn/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unlearn;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// --config FILE expands in place into "--key value" tokens, so flags given
// after it win (options take the last value).
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::size_t i = 0;
  while (i < args.size()) {
    if (args[i] != "--config") {
      ++i;
      continue;
    }
    if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--config needs a file");
    const auto text = read_text_file(args[i + 1]);
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw FormatError("config file '" + args[i + 1] + "': " + e.what());
    }
    if (!j.is_object()) throw FormatError("config file '" + args[i + 1] + "' must hold a JSON object");
    std::vector<std::string> tokens;
    for (const auto& [key, v] : j.items()) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      if (v.is_boolean()) {
        if (v.get<bool>()) tokens.push_back(flag);
      } else if (v.is_array()) {
        std::string joined;
        for (const auto& x : v) joined += (joined.empty() ? "" : ",") + (x.is_string() ? x.get<std::string>() : x.dump());
        tokens.insert(tokens.end(), {flag, joined});
      } else {
        tokens.insert(tokens.end(), {flag, v.is_string() ? v.get<std::string>() : v.dump()});
      }
    }
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(i), tokens.begin(), tokens.end());
    i += tokens.size();
  }
  return args;
}

Vocab load_vocab(const std::string& path) { return Vocab::from_text(read_text_file(path)); }

void require_vocab_matches(const ParameterSet& p, const Vocab& v) {
  if (static_cast<std::size_t>(p.config.vocab_size) != v.size()) {
    throw FormatError("vocabulary has " + std::to_string(v.size()) + " tokens but the checkpoint expects " +
                      std::to_string(p.config.vocab_size));
  }
}

std::vector<double> parse_grid(const std::string& s, double lo, double hi, const char* what) {
  return normalize_grid(parse_double_list(s, what), lo, hi, what);
}

// Evaluation inputs shared by eval and the sweeps.
struct EvalFlags {
  std::string eval_pairs, ppl_corpus, mc;

  void add(CLI::App* c) {
    c->add_option("--eval-pairs", eval_pairs, "bias minimal pairs (JSONL: stereo, anti, category)")->required();
    c->add_option("--ppl-corpus", ppl_corpus, "held-out text, one document per line")->required();
    c->add_option("--mc", mc, "multiple-choice items (JSONL: prompt, choices, answer_index)")->required();
  }

  EvalSets load(const Vocab& v) const {
    EvalSets s;
    s.pairs = encode_bias_eval(parse_bias_eval(read_text_file(eval_pairs)), v);
    for (const auto& doc : read_corpus(ppl_corpus)) {
      auto t = v.encode_document(doc);
      t.push_back(Vocab::kEos);
      s.ppl_documents.push_back(std::move(t));
    }
    s.mc_items = encode_mc(parse_mc(read_text_file(mc)), v);
    return s;
  }

  json to_json() const { return {{"eval_pairs", eval_pairs}, {"ppl_corpus", ppl_corpus}, {"mc", mc}}; }
};

struct PcguFlags {
  double k = 0.25;
  float alpha = PCGUConfig{}.alpha;
  int epochs = PCGUConfig{}.epochs;
  int batch_size = PCGUConfig{}.batch_size;
  std::string axis = "input";
  std::string direction = "decrease-advantaged";
  std::uint64_t seed = 0;
  int shards = 1;

  void add(CLI::App* c, bool with_k) {
    if (with_k) c->add_option("--k", k, "fraction of weight vectors updated per batch")->capture_default_str();
    c->add_option("--alpha", alpha, "step size")->capture_default_str();
    c->add_option("--epochs", epochs)->capture_default_str();
    c->add_option("--batch-size", batch_size)->capture_default_str();
    c->add_option("--axis", axis, "input (rows) | output (columns)")->capture_default_str();
    c->add_option("--direction", direction, "decrease-advantaged | increase-disadvantaged")->capture_default_str();
    c->add_option("--seed", seed)->capture_default_str();
    c->add_option("--shards", shards, "number of shard workers")->capture_default_str();
  }

  PCGUConfig config() const {
    PCGUConfig c;
    c.k_fraction = k;
    c.alpha = alpha;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.axis = parse_axis(axis);
    c.direction = parse_direction(direction);
    c.seed = seed;
    c.validate();
    if (shards < 1) throw ConfigError("--shards must be at least 1");
    return c;
  }
};

std::vector<ContrastivePair> load_pairs(const std::string& path, const Vocab& v) {
  auto pairs = parse_pairs(read_text_file(path), v);
  if (pairs.empty()) throw FormatError("'" + path + "' holds no contrastive pairs");
  return pairs;
}

void write_json(const std::string& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

int run(int argc, char** argv) {
  CLI::App app{"Debiasing experiments on small decoder-only language models"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all");
  // Accept --config on every subcommand; it is expanded before parsing.
  std::string unused_config;
  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", unused_config, "JSON object of flag values (keys are long flag names)");
  };

  // build-vocab
  std::vector<std::string> bv_corpus;
  std::string bv_out;
  auto* build_vocab = app.add_subcommand("build-vocab", "word-level vocabulary from text corpora");
  build_vocab->add_option("--corpus", bv_corpus, "text files, one document per line")->required()->expected(1, -1);
  build_vocab->add_option("--out", bv_out)->required();
  add_config(build_vocab);

  // gen-synth
  SynthConfig sc;
  std::string gs_out;
  auto* gen_synth = app.add_subcommand("gen-synth", "write the synthetic bias benchmark");
  gen_synth->add_option("--out", gs_out, "output directory")->required();
  gen_synth->add_option("--seed", sc.seed)->capture_default_str();
  gen_synth->add_option("--rho", sc.rho, "stereotype skew in [0, 1]")->capture_default_str();
  gen_synth->add_option("--n-attributes", sc.n_attributes)->capture_default_str();
  gen_synth->add_option("--n-declarative", sc.n_declarative)->capture_default_str();
  gen_synth->add_option("--n-facts", sc.n_facts)->capture_default_str();
  gen_synth->add_option("--n-questions", sc.n_questions)->capture_default_str();
  gen_synth->add_option("--n-heldout", sc.n_heldout)->capture_default_str();
  gen_synth->add_option("--n-qa", sc.n_qa_records)->capture_default_str();
  gen_synth->add_option("--n-stereoset", sc.n_stereoset)->capture_default_str();
  gen_synth->add_option("--n-comments", sc.n_comments)->capture_default_str();
  add_config(gen_synth);

  // make-pairs
  std::string mp_input, mp_vocab, mp_out;
  auto* make_pairs = app.add_subcommand("make-pairs", "contrastive pairs from ambiguous QA records");
  make_pairs->add_option("--input", mp_input, "QA records (JSONL)")->required();
  make_pairs->add_option("--vocab", mp_vocab)->required();
  make_pairs->add_option("--out", mp_out)->required();
  add_config(make_pairs);

  // build-bias-corpus
  std::string bc_stereoset, bc_comments, bc_out;
  double bc_threshold = 0.5;
  auto* bias_corpus = app.add_subcommand("build-bias-corpus", "biased fine-tuning corpus");
  bias_corpus->add_option("--stereoset", bc_stereoset, "JSONL: context, stereotyped_sentence, domain");
  bias_corpus->add_option("--comments", bc_comments, "JSONL: text, toxicity, domain");
  bias_corpus->add_option("--threshold", bc_threshold, "keep comments with toxicity above this")->capture_default_str();
  bias_corpus->add_option("--out", bc_out)->required();
  add_config(bias_corpus);

  // train-base
  std::string tb_corpus, tb_vocab, tb_out;
  ModelConfig mc;
  TrainConfig tc;
  tc.steps = 2000;
  tc.batch_size = 16;
  tc.learning_rate = 1e-3f;
  auto* train_base = app.add_subcommand("train-base", "train a model from scratch");
  train_base->add_option("--corpus", tb_corpus)->required();
  train_base->add_option("--vocab", tb_vocab)->required();
  train_base->add_option("--out", tb_out)->required();
  train_base->add_option("--steps", tc.steps)->capture_default_str();
  train_base->add_option("--lr", tc.learning_rate)->capture_default_str();
  train_base->add_option("--batch-size", tc.batch_size)->capture_default_str();
  train_base->add_option("--grad-accum", tc.grad_accum)->capture_default_str();
  train_base->add_option("--seed", tc.seed)->capture_default_str();
  train_base->add_option("--layers", mc.n_layers)->capture_default_str();
  train_base->add_option("--heads", mc.n_heads)->capture_default_str();
  train_base->add_option("--d-model", mc.d_model)->capture_default_str();
  train_base->add_option("--d-ff", mc.d_ff)->capture_default_str();
  train_base->add_option("--max-seq-len", mc.max_seq_len)->capture_default_str();
  add_config(train_base);

  // finetune
  std::string ft_base, ft_corpus, ft_vocab, ft_out;
  FinetuneConfig fc;
  LoraConfig lc;
  bool ft_full = false;
  auto* finetune = app.add_subcommand("finetune", "fine-tune on a (biased) corpus, low-rank by default");
  finetune->add_option("--base", ft_base)->required();
  finetune->add_option("--corpus", ft_corpus)->required();
  finetune->add_option("--vocab", ft_vocab)->required();
  finetune->add_option("--out", ft_out)->required();
  finetune->add_option("--steps", fc.steps)->capture_default_str();
  finetune->add_option("--lr", fc.learning_rate)->capture_default_str();
  finetune->add_option("--batch-size", fc.batch_size)->capture_default_str();
  finetune->add_option("--grad-accum", fc.grad_accum)->capture_default_str();
  finetune->add_option("--seed", fc.seed)->capture_default_str();
  finetune->add_option("--lora-rank", lc.rank)->capture_default_str();
  finetune->add_option("--lora-alpha", lc.scale_alpha)->capture_default_str();
  finetune->add_flag("--full", ft_full, "train every weight instead of adapters");
  add_config(finetune);

  // tv extract / tv apply
  auto* tv = app.add_subcommand("tv", "task vectors");
  tv->require_subcommand(1);
  std::string tx_base, tx_ft, tx_out;
  auto* tv_extract = tv->add_subcommand("extract", "tau = finetuned - base");
  tv_extract->add_option("--base", tx_base)->required();
  tv_extract->add_option("--finetuned", tx_ft)->required();
  tv_extract->add_option("--out", tx_out)->required();
  add_config(tv_extract);
  std::string ta_base, ta_tv, ta_out;
  double ta_lambda = 1.0;
  bool ta_negate = false;
  auto* tv_apply = tv->add_subcommand("apply", "base + s*lambda*tau (s = -1 with --negate)");
  tv_apply->add_option("--base", ta_base)->required();
  tv_apply->add_option("--tv", ta_tv)->required();
  tv_apply->add_option("--lambda", ta_lambda)->capture_default_str();
  tv_apply->add_flag("--negate", ta_negate, "subtract the vector");
  tv_apply->add_option("--out", ta_out)->required();
  add_config(tv_apply);

  // pcgu
  std::string pg_base, pg_pairs, pg_vocab, pg_out, pg_log;
  PcguFlags pf;
  auto* pcgu = app.add_subcommand("pcgu", "partitioned contrastive gradient unlearning");
  pcgu->add_option("--base", pg_base)->required();
  pcgu->add_option("--pairs", pg_pairs, "contrastive pairs (JSONL)")->required();
  pcgu->add_option("--vocab", pg_vocab)->required();
  pcgu->add_option("--out", pg_out)->required();
  pcgu->add_option("--log", pg_log, "per-batch CSV log");
  pf.add(pcgu, true);
  add_config(pcgu);

  // eval
  std::string ev_ckpt, ev_vocab, ev_out;
  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "bias score, perplexity and multiple-choice accuracy");
  eval->add_option("--checkpoint", ev_ckpt)->required();
  eval->add_option("--vocab", ev_vocab)->required();
  eval->add_option("--out", ev_out, "report JSON (stdout when omitted)");
  ef.add(eval);
  add_config(eval);

  // generate
  std::string gn_ckpt, gn_vocab, gn_prompt, gn_out;
  int gn_max_new = 16;
  double gn_temperature = 0.0;
  std::uint64_t gn_seed = 0;
  auto* gen = app.add_subcommand("generate", "continue a prompt");
  gen->add_option("--checkpoint", gn_ckpt)->required();
  gen->add_option("--vocab", gn_vocab)->required();
  gen->add_option("--prompt", gn_prompt)->required();
  gen->add_option("--max-new", gn_max_new)->capture_default_str();
  gen->add_option("--temperature", gn_temperature, "0 = greedy")->capture_default_str();
  gen->add_option("--seed", gn_seed)->capture_default_str();
  gen->add_option("--out", gn_out, "write the text here instead of stdout");
  add_config(gen);

  // sweep-tv
  std::string st_base, st_ft, st_tv, st_vocab, st_out, st_lambdas = "0,0.2,0.4,0.6,0.8,1";
  std::uint64_t st_seed = 0;
  bool st_runtime = false;
  EvalFlags st_ef;
  auto* sweep_tv_cmd = app.add_subcommand("sweep-tv", "evaluate base - lambda*tau over a lambda grid");
  sweep_tv_cmd->add_option("--base", st_base)->required();
  auto* st_ft_opt = sweep_tv_cmd->add_option("--finetuned", st_ft, "biased checkpoint; tau = finetuned - base");
  auto* st_tv_opt = sweep_tv_cmd->add_option("--tv", st_tv, "precomputed task vector");
  st_ft_opt->excludes(st_tv_opt);
  sweep_tv_cmd->add_option("--vocab", st_vocab)->required();
  sweep_tv_cmd->add_option("--lambdas", st_lambdas)->capture_default_str();
  sweep_tv_cmd->add_option("--seed", st_seed, "recorded in the seed column")->capture_default_str();
  sweep_tv_cmd->add_option("--out", st_out)->required();
  sweep_tv_cmd->add_flag("--record-runtime", st_runtime, "write wall-clock seconds (otherwise 0)");
  st_ef.add(sweep_tv_cmd);
  add_config(sweep_tv_cmd);

  // sweep-pcgu
  std::string sp_base, sp_pairs, sp_vocab, sp_out, sp_ks = "0.2,0.25,0.3,0.35,0.4";
  bool sp_runtime = false;
  PcguFlags sp_pf;
  EvalFlags sp_ef;
  auto* sweep_pcgu_cmd = app.add_subcommand("sweep-pcgu", "run PCGU from the base for each k and evaluate");
  sweep_pcgu_cmd->add_option("--base", sp_base)->required();
  sweep_pcgu_cmd->add_option("--pairs", sp_pairs)->required();
  sweep_pcgu_cmd->add_option("--vocab", sp_vocab)->required();
  sweep_pcgu_cmd->add_option("--ks", sp_ks)->capture_default_str();
  sweep_pcgu_cmd->add_option("--out", sp_out)->required();
  sweep_pcgu_cmd->add_flag("--record-runtime", sp_runtime, "write wall-clock seconds (otherwise 0)");
  sp_pf.add(sweep_pcgu_cmd, false);
  sp_ef.add(sweep_pcgu_cmd);
  add_config(sweep_pcgu_cmd);

  std::vector<std::string> args(argv + 1, argv + argc);
  args = expand_config(std::move(args));
  std::reverse(args.begin(), args.end());  // CLI11 consumes a reversed vector
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  if (*build_vocab) {
    std::vector<std::string> docs;
    for (const auto& path : bv_corpus)
      for (auto& line : read_corpus(path)) docs.push_back(std::move(line));
    const auto v = Vocab::build(docs);
    write_text_file(bv_out, v.to_text());
    std::printf("vocab: %zu tokens\n", v.size());
  } else if (*gen_synth) {
    write_synthetic_benchmark(gen_synthetic_benchmark(sc), gs_out);
    std::printf("wrote synthetic benchmark to %s\n", gs_out.c_str());
  } else if (*make_pairs) {
    const auto v = load_vocab(mp_vocab);
    const auto pairs = make_contrastive_pairs(parse_bbq(read_text_file(mp_input)), v);
    std::vector<json> rows;
    for (const auto& p : pairs) rows.push_back(pair_to_json(p, v));
    write_text_file(mp_out, to_jsonl(rows));
    std::printf("pairs: %zu\n", pairs.size());
  } else if (*bias_corpus) {
    if (bc_stereoset.empty() && bc_comments.empty()) throw ConfigError("give --stereoset and/or --comments");
    BiasedCorpusSpec spec;
    if (!bc_stereoset.empty()) spec.stereoset = parse_stereoset(read_text_file(bc_stereoset));
    if (!bc_comments.empty()) spec.comments = parse_comments(read_text_file(bc_comments));
    spec.toxicity_threshold = bc_threshold;
    const auto lines = build_bias_corpus(spec);
    write_text_file(bc_out, join_lines(lines));
    std::printf("lines: %zu\n", lines.size());
  } else if (*train_base) {
    const auto v = load_vocab(tb_vocab);
    mc.vocab_size = static_cast<int>(v.size());
    mc.init_seed = static_cast<std::uint32_t>(tc.seed);
    mc.validate();
    const auto seqs = training_sequences(read_corpus(tb_corpus), v, static_cast<std::size_t>(mc.max_seq_len));
    const auto res = train_lm(init_model(mc), seqs, tc);
    for (const auto& [name, t] : res.params.tensors) require_finite(t, "trained weights");
    save_checkpoint_file(tb_out, res.params);
    if (res.losses.empty()) std::printf("steps: 0\n");
    else std::printf("final loss: %s\n", format_double(res.losses.back()).c_str());
  } else if (*finetune) {
    const auto base = load_checkpoint_file(ft_base);
    const auto v = load_vocab(ft_vocab);
    require_vocab_matches(base, v);
    if (ft_full) fc.lora.reset();
    else fc.lora = lc;
    const auto seqs = training_sequences(read_corpus(ft_corpus), v, static_cast<std::size_t>(base.config.max_seq_len));
    const auto res = finetune_lm(base, seqs, fc);
    for (const auto& [name, t] : res.params.tensors) require_finite(t, "fine-tuned weights");
    save_checkpoint_file(ft_out, res.params);
    if (!res.losses.empty()) std::printf("final loss: %s\n", format_double(res.losses.back()).c_str());
  } else if (*tv_extract) {
    save_task_vector_file(tx_out, compute_task_vector(load_checkpoint_file(tx_base), load_checkpoint_file(tx_ft)));
  } else if (*tv_apply) {
    const auto out = apply_task_vector(load_checkpoint_file(ta_base), load_task_vector_file(ta_tv), ta_lambda, ta_negate);
    save_checkpoint_file(ta_out, out);
  } else if (*pcgu) {
    const auto base = load_checkpoint_file(pg_base);
    const auto v = load_vocab(pg_vocab);
    require_vocab_matches(base, v);
    const auto pairs = load_pairs(pg_pairs, v);
    const auto cfg = pf.config();
    const bool sharded = pf.shards > 1 || pcgu->get_option("--shards")->count() > 0;
    if (sharded) {
      const auto res = run_pcgu_sharded(base, std::span<const ContrastivePair>(pairs), cfg, pf.shards);
      save_checkpoint_file(pg_out, res.params);
      if (!pg_log.empty()) write_text_file(pg_log, sharded_log_csv(res));
    } else {
      const auto res = run_pcgu(base, std::span<const ContrastivePair>(pairs), cfg);
      save_checkpoint_file(pg_out, res.params);
      if (!pg_log.empty()) write_text_file(pg_log, pcgu_log_csv(res.log));
    }
  } else if (*eval) {
    const auto params = load_checkpoint_file(ev_ckpt);
    const auto v = load_vocab(ev_vocab);
    require_vocab_matches(params, v);
    const auto report = evaluate(params, ef.load(v));
    json cfg = ef.to_json();
    cfg["vocab"] = ev_vocab;
    cfg["tie_tolerance"] = kScoreTieTolerance;
    const auto j = report_to_json(report, ev_ckpt, cfg);
    if (ev_out.empty()) std::cout << j.dump(2) << "\n";
    else write_json(ev_out, j);
  } else if (*gen) {
    const auto params = load_checkpoint_file(gn_ckpt);
    const auto v = load_vocab(gn_vocab);
    require_vocab_matches(params, v);
    const auto prompt = v.encode_document(gn_prompt);
    const auto out = generate(params, std::span<const TokenId>(prompt), gn_max_new, gn_temperature, gn_seed);
    const std::string text = v.decode(std::span<const TokenId>(out).subspan(1)) + "\n";
    if (gn_out.empty()) std::cout << text;
    else write_text_file(gn_out, text);
  } else if (*sweep_tv_cmd) {
    if (st_ft.empty() == st_tv.empty()) throw ConfigError("give exactly one of --finetuned or --tv");
    const auto base = load_checkpoint_file(st_base);
    const auto v = load_vocab(st_vocab);
    require_vocab_matches(base, v);
    const auto tau = st_tv.empty() ? compute_task_vector(base, load_checkpoint_file(st_ft)) : load_task_vector_file(st_tv);
    const auto grid = parse_grid(st_lambdas, 0.0, 1e9, "--lambdas");
    const auto rows = sweep_tv(base, tau, grid, st_ef.load(v), st_seed);
    write_text_file(st_out, sweep_csv(rows, st_runtime));
  } else if (*sweep_pcgu_cmd) {
    const auto base = load_checkpoint_file(sp_base);
    const auto v = load_vocab(sp_vocab);
    require_vocab_matches(base, v);
    const auto pairs = load_pairs(sp_pairs, v);
    const auto grid = parse_grid(sp_ks, 0.0, 1.0, "--ks");
    const auto rows = sweep_pcgu(base, std::span<const ContrastivePair>(pairs), grid, sp_pf.config(), sp_ef.load(v),
                                 sp_pf.shards);
    write_text_file(sp_out, sweep_csv(rows, sp_runtime));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kData;
  } catch (const CLI::Error& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
}
