// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

// twin-metrology <command> --config <path> [--out <dir>] [--seed <u64>] [--threads <k>]

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "twin_metrology/cli.hpp"
#include "twin_metrology/parallel.hpp"

namespace tmc = twin_metrology::cli;

namespace {

// Output directory for a failure manifest when the config did not validate.
std::string fallback_directory(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    const auto& d = j.at("output").at("directory");
    if (d.is_string() && !d.get<std::string>().empty()) return d.get<std::string>();
  } catch (const std::exception&) {
  }
  return tmc::RunConfig{}.directory;
}

bool parse_threads(const char* s, unsigned& out) {
  try {
    std::size_t pos = 0;
    const unsigned long v = std::stoul(s, &pos);
    if (s[pos] != '\0' || v > 4096) return false;
    out = static_cast<unsigned>(v);
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantum and classical Fisher information of a two-mode interferometer fed by independent sources",
               "twin-metrology"};
  app.set_version_flag("--version", std::string(tmc::kVersion));
  std::string command_name, config_path, out_dir;
  std::uint64_t seed = 0;
  unsigned threads = 0;
  app.add_option("command", command_name, "qfi, fisher, sweep, prob-map, hellinger or validate")
      ->required()
      ->check(CLI::IsMember({"qfi", "fisher", "sweep", "prob-map", "hellinger", "validate"}));
  app.add_option("--config", config_path, "JSON run configuration")->required()->check(CLI::ExistingFile);
  auto* out_opt = app.add_option("--out", out_dir, "output directory (overrides output.directory)");
  auto* seed_opt = app.add_option("--seed", seed, "disorder seed (overrides disorder.seed)");
  auto* threads_opt =
      app.add_option("--threads", threads, "worker threads, 0 = all cores (default: $TWIN_METROLOGY_THREADS)")
          ->check(CLI::Range(0u, 4096u));
  CLI11_PARSE(app, argc, argv);

  if (!*threads_opt) {
    if (const char* env = std::getenv("TWIN_METROLOGY_THREADS"); env != nullptr && *env != '\0') {
      if (!parse_threads(env, threads)) {
        std::cerr << "twin-metrology: invalid value of TWIN_METROLOGY_THREADS\n";
        return 2;
      }
    }
  }
  threads = twin_metrology::resolve_threads(threads);

  std::ifstream in(config_path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  const auto command = *tmc::parse_command(command_name);

  tmc::RunConfig cfg;
  try {
    cfg = tmc::parse_config(text, command);
  } catch (const tmc::ConfigError& e) {
    const std::string dir = *out_opt ? out_dir : fallback_directory(text);
    std::cerr << "twin-metrology: " << e.what() << "\n";
    try {
      tmc::write_failure_manifest(dir, command_name, e.what(), e.path());
    } catch (const std::exception& w) {
      std::cerr << "twin-metrology: " << w.what() << "\n";
    }
    return 2;
  }
  if (*out_opt) cfg.directory = out_dir;
  if (*seed_opt) cfg.seed = seed;

  const auto result = tmc::execute(cfg, {threads});
  const auto& m = result.manifest;
  if (m.contains("error")) std::cerr << "twin-metrology: " << m["error"]["message"].get<std::string>() << "\n";
  if (m.contains("warnings"))
    for (const auto& w : m["warnings"]) std::cerr << "warning: " << w.get<std::string>() << "\n";
  if (m["status"] == "checks_failed") {
    for (const auto& [name, passed] : m["summary"].items())
      if (!passed.get<bool>()) std::cerr << "check failed: " << name << "\n";
  }
  for (const auto& f : m["outputs"]) std::cout << cfg.directory << "/" << f["file"].get<std::string>() << "\n";
  std::cout << cfg.directory << "/" << tmc::kManifestName << "\n";
  return result.exit_code;
}
