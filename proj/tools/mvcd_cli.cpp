#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mvcd/checkpoint.hpp"
#include "mvcd/config.hpp"
#include "mvcd/datagen.hpp"
#include "mvcd/evalkit.hpp"
#include "mvcd/selfcheck.hpp"
#include "mvcd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

// Bad input the user can fix: missing or malformed files, invalid values.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<double> lambda;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Override the training seed");
  cmd->add_option("--epochs", o.epochs, "Override the epoch count of this stage");
  cmd->add_option("--lr", o.lr, "Override the base learning rate of this stage");
  cmd->add_option("--lambda", o.lambda, "Override the correlation loss weight");
}

mvcd::RunConfig load_config(const std::string& path) {
  mvcd::RunConfig cfg;
  try {
    if (!path.empty()) cfg = mvcd::load_run_config(path);
    mvcd::apply_env_seed(cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return cfg;
}

void apply_overrides(const Overrides& o, mvcd::TrainConfig& t, bool incremental) {
  if (o.seed) t.seed = *o.seed;
  if (o.epochs) (incremental ? t.epochs_incr : t.epochs_old) = *o.epochs;
  if (o.lr) (incremental ? t.lr_incr : t.lr_old) = *o.lr;
  if (o.lambda) t.lambda = *o.lambda;
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

mvcd::Dataset load_data(const std::string& dir) {
  try {
    return mvcd::load_dataset(dir);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const json::exception& e) {
    throw UsageError("dataset " + dir + ": " + e.what());
  }
}

mvcd::DetectorParams load_model(const std::string& path) {
  try {
    return mvcd::load_checkpoint(path);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const json::exception& e) {
    throw UsageError("checkpoint " + path + ": " + e.what());
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(path + " is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void emit_report(const mvcd::EvalReport& report, const std::string& out, const std::string& csv) {
  const std::string text = report.to_json().dump(2) + "\n";
  if (out.empty()) {
    std::cout << text;
  } else {
    write_text(out, text);
  }
  if (!csv.empty()) write_text(csv, report.to_csv());
}

std::vector<std::string> names_for(const mvcd::DetectorParams& params, const std::vector<int>& classes) {
  std::vector<std::string> names;
  for (int c : classes) {
    const int col = params.column_of(c);
    if (col < 1) throw UsageError("class " + std::to_string(c) + " is unknown to the checkpoint");
    names.push_back(params.class_names[static_cast<std::size_t>(col - 1)]);
  }
  return names;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental detector training with correlation distillation on synthetic shapes"};
  app.require_subcommand(1);

  std::string config_path;
  std::string data_dir;
  std::string out_path;
  std::string log_path;
  std::string old_path;
  std::string checkpoint_path;
  std::string detections_path;
  std::string gt_path;
  std::string table_path;
  std::string csv_path;
  std::string partition = "test";
  std::vector<int> eval_classes;
  std::size_t n_old = 0;
  std::size_t step = 0;
  Overrides overrides;
  bool no_dcc = false, no_dpc = false, no_dic = false, no_dout = false, no_pseudo = false;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic shapes dataset");
  gen->add_option("--config", config_path, "Run config JSON")->check(CLI::ExistingFile);
  gen->add_option("--out", out_path, "Output directory (default <output_dir>/data)");
  std::optional<std::uint64_t> data_seed;
  gen->add_option("--seed", data_seed, "Override the data seed");

  auto* train_old = app.add_subcommand("train-old", "Train the old-class detector");
  train_old->add_option("--config", config_path, "Run config JSON")->check(CLI::ExistingFile);
  train_old->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train_old->add_option("--out", out_path, "Checkpoint path (default <output_dir>/old.json)");
  train_old->add_option("--log", log_path, "JSONL log path (default <output_dir>/old.log.jsonl)");
  add_overrides(train_old, overrides);

  auto* train_incr = app.add_subcommand("train-incr", "Add new classes to an old detector");
  train_incr->add_option("--config", config_path, "Run config JSON")->check(CLI::ExistingFile);
  train_incr->add_option("--data", data_dir, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  train_incr->add_option("--old", old_path, "Old-model checkpoint")->required()->check(CLI::ExistingFile);
  train_incr->add_option("--out", out_path, "Checkpoint path (default <output_dir>/incr.json)");
  train_incr->add_option("--log", log_path, "JSONL log path (default <output_dir>/incr.log.jsonl)");
  train_incr->add_option("--step", step, "Increment index of the split protocol");
  train_incr->add_flag("--no-dcc", no_dcc, "Disable channel-wise correlation distillation");
  train_incr->add_flag("--no-dpc", no_dpc, "Disable point-wise correlation distillation");
  train_incr->add_flag("--no-dic", no_dic, "Disable instance-wise correlation distillation");
  train_incr->add_flag("--no-dout", no_dout, "Disable output-layer distillation");
  train_incr->add_flag("--no-pseudo", no_pseudo, "Do not merge old-model detections into the labels");
  add_overrides(train_incr, overrides);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint, or a detections file against ground truth");
  eval->add_option("--checkpoint", checkpoint_path, "Checkpoint to evaluate")->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "Dataset directory")->check(CLI::ExistingDirectory);
  eval->add_option("--partition", partition, "Image partition: test or train")
      ->check(CLI::IsMember({"test", "train"}));
  eval->add_option("--detections", detections_path, "Detections JSON file")->check(CLI::ExistingFile);
  eval->add_option("--ground-truth", gt_path, "Ground-truth JSON file")->check(CLI::ExistingFile);
  eval->add_option("--classes", eval_classes, "Classes to score (default: all known)");
  eval->add_option("--out", out_path, "Report JSON path (default stdout)");
  eval->add_option("--csv", csv_path, "Also write the report as CSV");

  auto* spmap_cmd = app.add_subcommand("spmap", "SPmAP from an up-bound/incremental AP table");
  spmap_cmd->add_option("--table", table_path, "CSV with header class,up,inc")->required()->check(CLI::ExistingFile);
  spmap_cmd->add_option("--n-old", n_old, "Number of old classes (leading rows)")->required();
  spmap_cmd->add_option("--out", out_path, "Report JSON path (default stdout)");
  spmap_cmd->add_option("--csv", csv_path, "Also write the report as CSV");

  auto* selfcheck = app.add_subcommand("selfcheck", "Gradient checks and loss identities");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*gen) {
      auto cfg = load_config(config_path);
      if (data_seed) cfg.data.seed = *data_seed;
      const fs::path dir = out_path.empty() ? fs::path(cfg.output_dir) / "data" : fs::path(out_path);
      const auto ds = mvcd::generate(cfg.data);
      mvcd::save_dataset(ds, dir);
      std::cout << "wrote " << ds.images.size() << " images to " << dir.string() << "\n";
    } else if (*train_old) {
      auto cfg = load_config(config_path);
      apply_overrides(overrides, cfg.train, false);
      const auto ds = load_data(data_dir);
      cfg.split.validate(ds.class_names.size());
      const auto views = mvcd::base_split(ds, cfg.split);
      const auto result = mvcd::train_old(ds, views.train, cfg.train);
      const fs::path ckpt = out_path.empty() ? fs::path(cfg.output_dir) / "old.json" : fs::path(out_path);
      const fs::path log = log_path.empty() ? fs::path(cfg.output_dir) / "old.log.jsonl" : fs::path(log_path);
      if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
      mvcd::save_checkpoint(result.params, ckpt);
      mvcd::write_log(result.log, log);
      std::cout << "wrote " << ckpt.string() << " and " << log.string() << "\n";
    } else if (*train_incr) {
      auto cfg = load_config(config_path);
      apply_overrides(overrides, cfg.train, true);
      if (no_dcc) cfg.train.losses.dcc = false;
      if (no_dpc) cfg.train.losses.dpc = false;
      if (no_dic) cfg.train.losses.dic = false;
      if (no_dout) cfg.train.losses.dout = false;
      if (no_pseudo) cfg.train.losses.pseudo_labels = false;
      const auto ds = load_data(data_dir);
      cfg.split.validate(ds.class_names.size());
      if (step >= cfg.split.increments.size())
        throw UsageError("--step " + std::to_string(step) + " exceeds the number of increments");
      const auto old = load_model(old_path);
      const auto views = mvcd::apply_split(ds, cfg.split, step);
      const auto result = mvcd::train_incremental(old, ds, views.train, cfg.split.seen_classes(step), cfg.train);
      const fs::path ckpt = out_path.empty() ? fs::path(cfg.output_dir) / "incr.json" : fs::path(out_path);
      const fs::path log = log_path.empty() ? fs::path(cfg.output_dir) / "incr.log.jsonl" : fs::path(log_path);
      if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
      mvcd::save_checkpoint(result.params, ckpt);
      mvcd::write_log(result.log, log);
      std::cout << "wrote " << ckpt.string() << " and " << log.string() << "\n";
    } else if (*eval) {
      const bool model_mode = !checkpoint_path.empty();
      const bool file_mode = !detections_path.empty();
      if (model_mode == file_mode) throw UsageError("eval needs either --checkpoint or --detections");
      if (model_mode) {
        if (data_dir.empty()) throw UsageError("eval --checkpoint needs --data");
        const auto params = load_model(checkpoint_path);
        const auto ds = load_data(data_dir);
        const auto classes = eval_classes.empty() ? params.class_ids : eval_classes;
        names_for(params, classes);
        const auto view = mvcd::full_view(ds, classes, partition == "test");
        emit_report(mvcd::evaluate_model(params, ds, view, classes), out_path, csv_path);
      } else {
        if (gt_path.empty()) throw UsageError("eval --detections needs --ground-truth");
        std::vector<mvcd::DetectionRecord> dets;
        std::vector<mvcd::GroundTruthRecord> gts;
        try {
          dets = mvcd::detections_from_json(read_json_file(detections_path));
          gts = mvcd::ground_truth_from_json(read_json_file(gt_path));
        } catch (const std::invalid_argument& e) {
          throw UsageError(e.what());
        } catch (const json::exception& e) {
          throw UsageError(e.what());
        }
        auto classes = eval_classes;
        if (classes.empty()) {
          for (const auto& g : gts) classes.push_back(g.class_id);
          std::sort(classes.begin(), classes.end());
          classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
        }
        std::vector<std::string> names;
        for (int c : classes) names.push_back(std::to_string(c));
        emit_report(mvcd::evaluate_records(dets, gts, classes, names), out_path, csv_path);
      }
    } else if (*spmap_cmd) {
      mvcd::ApTable table;
      mvcd::EvalReport report;
      try {
        table = mvcd::read_ap_table(table_path);
        report = mvcd::spmap_report(table.classes, table.up, table.inc, n_old);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      emit_report(report, out_path, csv_path);
      std::ostringstream line;
      line.precision(4);
      line << "SPmAP " << report.components.spmap;
      std::cerr << line.str() << "\n";
    } else if (*selfcheck) {
      bool ok = true;
      for (const auto& r : mvcd::run_selfcheck()) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
        ok = ok && r.passed;
      }
      return ok ? 0 : kRuntimeError;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}
