// apnea: command-line front end for the sleep-apnea detection pipeline.

#include <CLI11.hpp>

#include <iostream>

#include "apnea/errors.hpp"
#include "commands.hpp"

using namespace apnea::cli;

namespace {

void add_common(CLI::App* cmd, CommonOptions& common) {
  cmd->add_option("-c,--config", common.config_file, "key = value run configuration file");
  cmd->add_option("--set", common.set, "override one config key (key=value), repeatable");
}

// Shorthand flags that map onto config keys.
void add_shorthands(CLI::App* cmd, CommonOptions& common) {
  auto key_flag = [&](const std::string& flag, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [&common, key](const std::string& v) { common.flag_keys[key] = v; }, help);
  };
  key_flag("--seed", "seed", "random seed");
  key_flag("--variant", "variant", "CNN_DENSE, CNN_LSTM, SPO2_BILSTM or CNN_LSTM_SPO2");
  key_flag("--preset", "preset", "stroke or apnea_ecg defaults");
  key_flag("--epochs", "train.epochs", "training epochs");
  key_flag("--max-epochs", "train.max_epochs", "epochs spanned by the learning-rate schedule");
  key_flag("--batch-size", "train.batch_size", "training batch size");
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sleep apnea detection from ECG and SpO2"};
  app.require_subcommand(1);

  CommonOptions common;

  ImportOptions import_opts;
  auto* import_cmd = app.add_subcommand("import", "convert a source dataset into the native format");
  import_cmd->add_option("--format", import_opts.format, "apnea-ecg or synthetic")->required();
  import_cmd->add_option("--source", import_opts.source, "source directory (apnea-ecg)");
  import_cmd->add_option("-o,--out", import_opts.out, "output dataset directory")->required();
  import_cmd->add_flag("--force", import_opts.force, "overwrite an existing dataset");
  import_cmd->add_option("--patients", import_opts.patients, "synthetic: number of patients");
  import_cmd->add_option("--duration", import_opts.duration_s, "synthetic: seconds per patient");
  import_cmd->add_option("--rate", import_opts.rate_hz, "synthetic: ECG rate (80 or 100)");
  import_cmd->add_flag("--no-spo2", import_opts.no_spo2, "synthetic: omit the SpO2 channel");
  import_cmd->add_option("--synthetic-seed", import_opts.seed, "synthetic: generator seed");
  add_common(import_cmd, common);

  DataOptions data_opts;
  auto add_data = [&data_opts](CLI::App* cmd) {
    cmd->add_option("-d,--data", data_opts.data, "native dataset directory")->required();
    cmd->add_option("-o,--out", data_opts.out, "output directory")->required();
    cmd->add_option("--split", data_opts.split, "train, test or all");
  };

  auto* preprocess_cmd = app.add_subcommand("preprocess", "filter, window and cache instances");
  add_data(preprocess_cmd);
  add_common(preprocess_cmd, common);

  auto* train_cmd = app.add_subcommand("train", "train a model and write a checkpoint");
  add_data(train_cmd);
  add_common(train_cmd, common);
  add_shorthands(train_cmd, common);

  InferOptions infer_opts;
  auto* infer_cmd = app.add_subcommand("infer", "score one recording");
  infer_cmd->add_option("--checkpoint", infer_opts.checkpoint, "model checkpoint");
  infer_cmd->add_option("-r,--recording", infer_opts.recording, "patient directory")->required();
  infer_cmd->add_option("-o,--out", infer_opts.out, "output directory")->required();
  infer_cmd->add_flag("--svg", infer_opts.svg, "write an event timeline SVG");
  infer_cmd->add_flag("--oracle", infer_opts.oracle, "score with the ground-truth labels");
  add_common(infer_cmd, common);

  EvaluateOptions eval_opts;
  auto* eval_cmd = app.add_subcommand("evaluate", "per-patient report for a trained model");
  eval_cmd->add_option("--checkpoint", eval_opts.checkpoint, "model checkpoint");
  eval_cmd->add_option("-d,--data", eval_opts.data.data, "native dataset directory")->required();
  eval_cmd->add_option("-o,--out", eval_opts.data.out, "output directory")->required();
  eval_cmd->add_option("--split", eval_opts.data.split, "train, test or all (default: test if present)");
  eval_cmd->add_flag("--oracle", eval_opts.oracle, "score with the ground-truth labels");
  eval_cmd->add_flag("--svg", eval_opts.svg, "write an event timeline SVG per patient");
  add_common(eval_cmd, common);

  auto* cv_cmd = app.add_subcommand("cv", "leave-one-patient-out cross-validation");
  add_data(cv_cmd);
  add_common(cv_cmd, common);
  add_shorthands(cv_cmd, common);

  auto* sweep_cmd = app.add_subcommand("sweep", "training-set size sweep");
  add_data(sweep_cmd);
  add_common(sweep_cmd, common);
  add_shorthands(sweep_cmd, common);
  sweep_cmd->add_option_function<std::string>(
      "--fractions", [&common](const std::string& v) { common.flag_keys["sweep.fractions"] = v; },
      "comma-separated training fractions");
  sweep_cmd->add_option_function<std::string>(
      "--repeats", [&common](const std::string& v) { common.flag_keys["sweep.repeats"] = v; },
      "random subsets per fraction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*import_cmd) {
      return cmd_import(common, import_opts);
    }
    if (*preprocess_cmd) {
      return cmd_preprocess(common, data_opts);
    }
    if (*train_cmd) {
      return cmd_train(common, data_opts);
    }
    if (*infer_cmd) {
      return cmd_infer(common, infer_opts);
    }
    if (*eval_cmd) {
      return cmd_evaluate(common, eval_opts);
    }
    if (*cv_cmd) {
      return cmd_cv(common, data_opts);
    }
    if (*sweep_cmd) {
      return cmd_sweep(common, data_opts);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const apnea::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
