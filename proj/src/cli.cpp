#include "nq/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "nq/error.hpp"
#include "nq/pipeline.hpp"

namespace nq {

namespace {

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

struct Command {
  CLI::App* app = nullptr;
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, CLI::Option*> flags;
  std::map<std::string, std::string> values;
  bool json = false;
};

void add_config_options(Command& cmd) {
  cmd.app->add_option("-c,--config", cmd.config_file, "key=value config file");
  cmd.app->add_option("--set", cmd.sets, "override one key (key=value), repeatable");
  for (const auto& key : PipelineConfig::keys()) {
    cmd.flags[key] = cmd.app->add_option(flag_name(key), cmd.values[key], "config key " + key);
  }
}

PipelineConfig build_config(const Command& cmd) {
  PipelineConfig cfg;
  if (!cmd.config_file.empty()) apply_config_file(cfg, cmd.config_file);
  for (const auto& key : PipelineConfig::keys()) {
    if (cmd.flags.at(key)->count() > 0) cfg.set(key, cmd.values.at(key));
  }
  for (const auto& s : cmd.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Network quantization toolkit"};
  app.require_subcommand(1);

  std::map<std::string, Command> commands;
  const std::vector<std::pair<std::string, std::string>> names = {
      {"train-ref", "train the reference MLP and write a model directory"},
      {"prune", "magnitude-prune a model directory"},
      {"curvature", "compute and store per-parameter curvature"},
      {"quantize", "quantize, code and evaluate a model"},
      {"sweep", "quantize over a list of k or lambda values and write a CSV"},
      {"report", "summarize a serialized model"},
  };
  for (const auto& [name, help] : names) {
    Command& cmd = commands[name];
    cmd.app = app.add_subcommand(name, help);
    add_config_options(cmd);
    if (name == "quantize" || name == "report") cmd.app->add_flag("--json", cmd.json, "print JSON instead of a table");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    for (auto& [name, cmd] : commands) {
      if (!cmd.app->parsed()) continue;
      const PipelineConfig cfg = build_config(cmd);
      if (name == "train-ref") {
        cmd_train_ref(cfg);
        out << "model written to " << cfg.output_dir << "\n";
      } else if (name == "prune") {
        cmd_prune(cfg);
        out << "pruned model written to " << cfg.output_dir << "\n";
      } else if (name == "curvature") {
        cmd_curvature(cfg);
        out << "curvature written to " << cfg.output_dir << "\n";
      } else if (name == "quantize") {
        const auto report = cmd_quantize(cfg);
        out << (cmd.json ? report.dump(2) + "\n" : format_report(report));
      } else if (name == "sweep") {
        out << cmd_sweep(cfg);
      } else if (name == "report") {
        const auto report = cmd_report(cfg);
        out << (cmd.json ? report.dump(2) + "\n" : format_report(report));
      }
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace nq
