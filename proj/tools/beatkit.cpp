// beatkit command-line tool.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
// 3 numeric divergence.

#include <CLI11.hpp>

#include <iostream>

#include "beatkit/commands.hpp"

namespace {

using namespace beatkit;
using namespace beatkit::cli;

constexpr int kExitUsage = 1, kExitData = 2, kExitNumeric = 3;

std::map<std::string, std::string> overrides_from(const std::vector<std::string>& sets, const std::string& file) {
  std::map<std::string, std::string> kv;
  if (!file.empty()) kv = parse_key_values(read_file(file));
  for (const auto& [k, v] : split_overrides(sets)) kv[k] = v;
  return kv;
}

void print_warnings(const std::vector<std::string>& ws) {
  for (const std::string& w : ws) std::cerr << "warning: " << w << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"beatkit: dilated-attention beat tracking toolkit"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  std::string profile = "desk";
  app.add_option("--seed", seed, "Seed for every stochastic choice")->capture_default_str();
  app.add_option("--profile", profile, "Model defaults: desk or paper")
      ->check(CLI::IsMember({"desk", "paper"}))
      ->capture_default_str();

  // gen-data
  GenDataOptions gen;
  std::vector<std::string> gen_sets;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write synthetic clips, annotations and a checksum manifest");
  gen_cmd->add_option("--count", gen.count, "Number of clips")->capture_default_str();
  gen_cmd->add_option("--out", gen.out_dir, "Output directory")->required();
  gen_cmd->add_option("--set", gen_sets, "Synth override key=value (frames, mel_bins, fps, noise, min_bpm, max_bpm)");

  // train-demo
  TrainDemoOptions train;
  std::vector<std::string> train_sets;
  std::string train_config;
  auto* train_cmd = app.add_subcommand("train-demo", "Train on a generated dataset");
  train_cmd->add_option("--data", train.data_dir, "Dataset directory with manifest")->required();
  train_cmd->add_option("--out", train.checkpoint, "Checkpoint to write after each epoch")->required();
  train_cmd->add_option("--log", train.log_path, "Loss log TSV (default <out>.loss.tsv)");
  train_cmd->add_option("--resume", train.resume, "Continue from this checkpoint");
  train_cmd->add_option("--epochs", train.train.epochs, "Total epochs")->capture_default_str();
  train_cmd->add_option("--lr", train.train.lr, "Initial learning rate")->capture_default_str();
  train_cmd->add_option("--patience", train.train.patience, "Plateau patience in epochs")->capture_default_str();
  train_cmd->add_option("--val-fraction", train.train.val_fraction, "Held-out fraction")->capture_default_str();
  train_cmd->add_flag("!--no-augment", train.train.augment, "Disable partial-demix augmentation");
  train_cmd->add_option("--config", train_config, "Model config file (key=value)");
  train_cmd->add_option("--set", train_sets, "Model override key=value");

  // decode
  DecodeOptions dec;
  std::vector<std::string> dec_sets;
  auto* dec_cmd = app.add_subcommand("decode", "Run the model and the DBN on one clip");
  dec_cmd->add_option("--checkpoint", dec.checkpoint, "Model checkpoint")->required();
  dec_cmd->add_option("--config", dec.config, "Model config (default <checkpoint>.cfg)");
  dec_cmd->add_option("--clip", dec.clip, "Spectrogram clip (.bspc)")->required();
  dec_cmd->add_option("--out", dec.out, "Beat annotation output")->required();
  dec_cmd->add_option("--activations", dec.activations, "Activation file (default <out>.bact)");
  dec_cmd->add_option("--dbn", dec_sets,
                      "DBN override key=value (min_bpm, max_bpm, meters, observation_lambda, transition_lambda, "
                      "threshold, correct)");

  // bench-dsa
  BenchOptions bench;
  std::string bench_out;
  auto* bench_cmd = app.add_subcommand("bench-dsa", "Time the windowed kernel against the dense masked oracle");
  bench_cmd->add_option("--lengths", bench.lengths, "Sequence lengths")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--trials", bench.trials, "Timed repetitions (median reported)")->capture_default_str();
  bench_cmd->add_option("--warmup", bench.warmup, "Untimed repetitions")->capture_default_str();
  bench_cmd->add_option("--head-dim", bench.head_dim, "Head dimension")->capture_default_str();
  bench_cmd->add_option("--dilation", bench.dilation, "Dilation rate")->capture_default_str();
  bench_cmd->add_option("--oracle-max", bench.oracle_max, "Skip the oracle above this length")->capture_default_str();
  bench_cmd->add_option("--out", bench_out, "CSV output (default stdout)");

  // export-attention
  ExportOptions exp;
  std::string exp_head = "avg";
  auto* exp_cmd = app.add_subcommand("export-attention", "Write multi-step attention products as CSV and PGM");
  exp_cmd->add_option("--checkpoint", exp.checkpoint, "Model checkpoint")->required();
  exp_cmd->add_option("--config", exp.config, "Model config (default <checkpoint>.cfg)");
  exp_cmd->add_option("--clip", exp.clip, "Spectrogram clip (.bspc)")->required();
  exp_cmd->add_option("--out", exp.out_dir, "Output directory")->required();
  exp_cmd->add_option("--steps", exp.steps, "Products to export, e.g. 1,3,5,9")->delimiter(',');
  exp_cmd->add_option("--channel", exp.channel, "Channel name or index")->capture_default_str();
  exp_cmd->add_option("--head", exp_head, "Head index or avg")->capture_default_str();

  // evaluate
  EvaluateOptions ev;
  auto* ev_cmd = app.add_subcommand("evaluate", "Score estimated beat files against references");
  ev_cmd->add_option("--est", ev.est_dir, "Directory of estimated .beats files")->required();
  ev_cmd->add_option("--ref", ev.ref_dir, "Directory of reference .beats files")->required();
  ev_cmd->add_option("--out", ev.out, "TSV report (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) {
      gen.seed = seed;
      gen.synth = apply_synth_config(SynthSettings{}, split_overrides(gen_sets));
      const Manifest m = gen_data(gen);
      std::cout << "wrote " << m.entries.size() / 2 << " clips to " << gen.out_dir << "\n";
    } else if (train_cmd->parsed()) {
      train.profile = profile;
      train.train.seed = seed;
      train.model_overrides = overrides_from(train_sets, train_config);
      train.on_epoch = [](const EpochStats& s) {
        std::cout << loss_log_line(s) << std::flush;
      };
      train_demo(train);
    } else if (dec_cmd->parsed()) {
      dec.profile = profile;
      dec.dbn_overrides = split_overrides(dec_sets);
      const BeatSequence s = decode(dec);
      std::cout << "decoded " << s.size() << " beats";
      if (s.beats_per_bar) std::cout << " in " << s.beats_per_bar << "/x meter";
      std::cout << "\n";
    } else if (bench_cmd->parsed()) {
      bench.seed = seed;
      const std::string csv = bench_csv(bench_dsa(bench));
      if (bench_out.empty()) {
        std::cout << csv;
      } else {
        ensure_parent(bench_out);
        write_file(bench_out, csv);
        RunManifest run;
        run.command = "bench-dsa";
        run.seed = seed;
        run.profile = profile;
        run.config = {{"head_dim", std::to_string(bench.head_dim)},
                      {"window", std::to_string(bench.m) + ":" + std::to_string(bench.n)},
                      {"dilation", std::to_string(bench.dilation)},
                      {"trials", std::to_string(bench.trials)},
                      {"warmup", std::to_string(bench.warmup)}};
        add_digest(run.outputs, bench_out);
        write_run_manifest(run_manifest_path_for_file(bench_out), run);
      }
    } else if (exp_cmd->parsed()) {
      exp.profile = profile;
      if (exp_head != "avg") {
        if (exp_head.empty() || exp_head.find_first_not_of("0123456789") != std::string::npos)
          throw ConfigError("--head expects an index or avg");
        exp.head = std::stoul(exp_head);
      }
      for (const std::string& f : export_attention(exp)) std::cout << f << "\n";
    } else if (ev_cmd->parsed()) {
      const EvaluateResult r = evaluate(ev);
      print_warnings(r.warnings);
      if (ev.out.empty()) std::cout << evaluate_tsv(r);
    }
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
