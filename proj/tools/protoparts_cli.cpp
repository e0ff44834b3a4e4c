#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "protoparts/pipeline.hpp"

namespace pp = protoparts;

namespace {

// Values given on the command line, keyed by config key.
struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> flags;
};

std::string flag_name(const std::string& key) {
  std::string s = "--" + key;
  for (auto& c : s)
    if (c == '_') c = '-';
  return s;
}

void add_run_options(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
  for (const auto& f : pp::config_fields()) {
    if (f.is_flag) {
      sub->add_flag(flag_name(f.key), o.flags[f.key], f.help);
    } else {
      sub->add_option(flag_name(f.key), o.values[f.key], f.help);
    }
  }
}

pp::RunConfig resolve(const CLI::App* sub, const Overrides& o) {
  pp::RunConfig cfg;
  if (!o.config_path.empty()) cfg = pp::load_config(o.config_path);
  for (const auto& f : pp::config_fields()) {
    if (sub->count(flag_name(f.key)) == 0) continue;
    f.set(cfg, f.is_flag ? std::string(o.flags.at(f.key) ? "true" : "false") : o.values.at(f.key));
  }
  cfg.validate();
  return cfg;
}

const std::string& need(const std::string& value, const char* key) {
  if (value.empty()) throw pp::Error(pp::ErrorCode::ConfigError, std::string("missing required setting '") + key + "'");
  return value;
}

void emit_report(const pp::MetricReport& r, const pp::RunConfig& cfg) {
  const auto text = r.to_text();
  std::cout << text;
  if (!cfg.out.empty()) {
    std::ofstream out(cfg.out);
    out << text;
    if (!out) throw pp::Error(pp::ErrorCode::IoError, "cannot write report to " + cfg.out);
  }
}

int run(const std::string& command, const pp::RunConfig& cfg) {
  if (command == "synth") {
    const auto data = pp::write_synthetic(cfg, need(cfg.out, "out"));
    std::cout << "wrote " << data.train.batch() << " train and " << data.test.batch() << " test images to " << cfg.out
              << "\n";
  } else if (command == "learn") {
    const auto train = pp::read_ptfd(need(cfg.train, "train"));
    pp::save_bundle(pp::learn(train, cfg), need(cfg.out, "out"));
    std::cout << "stage 1 done, bundle written to " << cfg.out << "\n";
  } else if (command == "finetune") {
    const auto train = pp::read_ptfd(need(cfg.train, "train"));
    auto model = pp::load_bundle(need(cfg.bundle, "bundle"));
    pp::save_bundle(pp::finetune(train, std::move(model), cfg), need(cfg.out, "out"));
    std::cout << (cfg.no_finetune ? "stage 2 skipped" : "stage 2 done") << ", bundle written to " << cfg.out << "\n";
  } else if (command == "eval") {
    const auto model = pp::load_bundle(need(cfg.bundle, "bundle"));
    emit_report(pp::evaluate(model, pp::read_ptfd(need(cfg.test, "test")), cfg), cfg);
  } else if (command == "explain") {
    const auto model = pp::load_bundle(need(cfg.bundle, "bundle"));
    const auto test = pp::read_ptfd(need(cfg.test, "test"));
    const auto items = pp::explain(model, test, pp::split_ids(cfg.ids), need(cfg.out, "out"), cfg.top_k);
    std::cout << "rendered " << items.size() << " heatmaps into " << cfg.out << "\n";
  } else if (command == "metrics") {
    emit_report(pp::evaluate_maps(pp::read_ptfd(need(cfg.test, "test")), cfg), cfg);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Part-prototype learning, fine-tuning, evaluation and explanation"};
  app.require_subcommand(1);
  Overrides overrides;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "write a synthetic train/test pair with known part centers"},
      {"learn", "stage 1: cluster foreground tokens into part prototypes"},
      {"finetune", "stage 2: train the adapter and prototype weights"},
      {"eval", "accuracy, distinctiveness and comprehensiveness on a test file"},
      {"explain", "render the top prototype heatmaps of chosen test images"},
      {"metrics", "score externally produced activation maps"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    subs[name] = app.add_subcommand(name, help);
    add_run_options(subs[name], overrides);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    for (const auto& [name, sub] : subs) {
      if (sub->parsed()) return run(name, resolve(sub, overrides));
    }
  } catch (const pp::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pp::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
