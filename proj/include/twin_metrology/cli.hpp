// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

/**
 * @file cli.hpp
 * @brief JSON run configuration, command dispatch, CSV datasets and the run
 *        manifest of the twin-metrology tool.
 *
 * Needs nlohmann_json and OpenSSL libcrypto in addition to the core headers;
 * link the twin_metrology_cli target.
 */

#pragma once

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "twin_metrology/ensemble.hpp"
#include "twin_metrology/error.hpp"
#include "twin_metrology/estimation.hpp"
#include "twin_metrology/metrology.hpp"
#include "twin_metrology/spin_algebra.hpp"
#include "twin_metrology/state_model.hpp"

#ifndef TWIN_METROLOGY_VERSION
#define TWIN_METROLOGY_VERSION "1.0.0"
#endif

namespace twin_metrology::cli {

inline constexpr std::string_view kToolName = "twin-metrology";
inline constexpr std::string_view kVersion = TWIN_METROLOGY_VERSION;
inline constexpr int kSchemaVersion = 1;

enum class Command { qfi, fisher, sweep, prob_map, hellinger, validate };

inline constexpr std::string_view to_string(Command c) noexcept {
  switch (c) {
    case Command::qfi: return "qfi";
    case Command::fisher: return "fisher";
    case Command::sweep: return "sweep";
    case Command::prob_map: return "prob-map";
    case Command::hellinger: return "hellinger";
    case Command::validate: return "validate";
  }
  return "?";
}

inline std::optional<Command> parse_command(std::string_view s) noexcept {
  for (Command c : {Command::qfi, Command::fisher, Command::sweep, Command::prob_map, Command::hellinger,
                    Command::validate})
    if (to_string(c) == s) return c;
  return std::nullopt;
}

/// Error tied to the config path that caused it.
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& message) : Error(message), path_(std::move(path)) {}

  static ConfigError unrecognized(const std::string& path) { return {path, "unrecognized field " + path}; }
  static ConfigError invalid(const std::string& path) { return {path, "invalid value at " + path}; }

  [[nodiscard]] const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

struct RunConfig {
  Command command = Command::qfi;

  // physics
  EnvelopeKind envelope = EnvelopeKind::gaussian;
  double n_bar = 0.0;  // derived from the tables for the table envelope
  std::vector<double> sigmas;
  std::vector<double> epsilons{0.0};
  Generator generator = Generator::x;
  std::optional<TableEnvelope> table_a, table_b;

  // disorder
  DisorderKind disorder = DisorderKind::iid_uniform;
  bool shared = true;
  std::uint64_t seed = 42;
  std::uint64_t realization = 0;  // stream used by the single-state commands
  std::optional<DisorderTable> disorder_table;

  // ensemble
  std::size_t realizations = 100;
  bool ensemble_fisher = true;

  // theta
  int grid_points = 16;
  double refine_tol = 1e-4;
  std::optional<double> theta;
  std::vector<double> delta_thetas{0.01};

  double mass_tol = 1e-12;

  // prob_map
  std::optional<int> block;
  std::size_t theta_points = 361;
  std::optional<double> n_min, n_max;

  // output
  std::string directory = "output";
  std::string format = "csv";

  [[nodiscard]] bool has_physics() const noexcept {
    return envelope == EnvelopeKind::table ? table_a.has_value() : !sigmas.empty();
  }
  [[nodiscard]] double sigma() const { return sigmas.empty() ? 0.0 : sigmas.front(); }
  [[nodiscard]] double epsilon() const { return epsilons.front(); }
};

namespace detail {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

inline std::string join(std::string_view parent, std::string_view key) {
  std::string out(parent);
  if (!out.empty()) out += '.';
  out += key;
  return out;
}

/// One JSON object of the config; rejects keys outside `allowed`. A null
/// value counts as absent so that a config echo parses back unchanged.
class Section {
 public:
  Section(const Json* node, std::string path, std::initializer_list<std::string_view> allowed)
      : node_(node != nullptr && !node->is_null() ? node : nullptr), path_(std::move(path)) {
    if (node_ == nullptr) return;
    if (!node_->is_object()) throw ConfigError::invalid(path_.empty() ? "<root>" : path_);
    for (auto it = node_->begin(); it != node_->end(); ++it)
      if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
        throw ConfigError::unrecognized(join(path_, it.key()));
  }

  [[nodiscard]] bool present() const noexcept { return node_ != nullptr; }
  [[nodiscard]] std::string path(std::string_view key) const { return join(path_, key); }

  [[nodiscard]] const Json* find(std::string_view key) const {
    if (node_ == nullptr) return nullptr;
    const auto it = node_->find(std::string(key));
    return it == node_->end() || it->is_null() ? nullptr : &*it;
  }

  [[nodiscard]] std::optional<double> number(std::string_view key) const {
    const Json* j = find(key);
    if (j == nullptr) return std::nullopt;
    return as_number(*j, path(key));
  }

  [[nodiscard]] std::optional<std::int64_t> integer(std::string_view key) const {
    const Json* j = find(key);
    if (j == nullptr) return std::nullopt;
    return as_integer(*j, path(key));
  }

  [[nodiscard]] std::optional<std::uint64_t> unsigned_integer(std::string_view key) const {
    const Json* j = find(key);
    if (j == nullptr) return std::nullopt;
    if (j->is_number_unsigned()) return j->get<std::uint64_t>();
    const std::int64_t v = as_integer(*j, path(key));
    if (v < 0) throw ConfigError::invalid(path(key));
    return static_cast<std::uint64_t>(v);
  }

  [[nodiscard]] std::optional<bool> boolean(std::string_view key) const {
    const Json* j = find(key);
    if (j == nullptr) return std::nullopt;
    if (!j->is_boolean()) throw ConfigError::invalid(path(key));
    return j->get<bool>();
  }

  [[nodiscard]] std::optional<std::string> string(std::string_view key) const {
    const Json* j = find(key);
    if (j == nullptr) return std::nullopt;
    if (!j->is_string()) throw ConfigError::invalid(path(key));
    return j->get<std::string>();
  }

  /// A number or a non-empty array of numbers; elements report "key[i]".
  [[nodiscard]] std::optional<std::vector<double>> numbers(std::string_view key) const {
    const Json* j = find(key);
    if (j == nullptr) return std::nullopt;
    if (!j->is_array()) return std::vector<double>{as_number(*j, path(key))};
    if (j->empty()) throw ConfigError::invalid(path(key));
    std::vector<double> out;
    for (std::size_t i = 0; i < j->size(); ++i)
      out.push_back(as_number((*j)[i], path(key) + "[" + std::to_string(i) + "]"));
    return out;
  }

  [[nodiscard]] Section child(std::string_view key, std::initializer_list<std::string_view> allowed) const {
    return Section(find(key), path(key), allowed);
  }

  static double as_number(const Json& j, const std::string& path) {
    if (!j.is_number()) throw ConfigError::invalid(path);
    const double v = j.get<double>();
    if (!std::isfinite(v)) throw ConfigError::invalid(path);
    return v;
  }

  static std::int64_t as_integer(const Json& j, const std::string& path) {
    if (j.is_number_unsigned()) {
      const auto u = j.get<std::uint64_t>();
      if (u > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) throw ConfigError::invalid(path);
      return static_cast<std::int64_t>(u);
    }
    if (j.is_number_integer()) return j.get<std::int64_t>();
    if (j.is_number_float()) {
      const double v = j.get<double>();
      if (std::isfinite(v) && v == std::floor(v) && std::abs(v) <= 0x1.0p53) return static_cast<std::int64_t>(v);
    }
    throw ConfigError::invalid(path);
  }

 private:
  const Json* node_;
  std::string path_;
};

inline void require(bool ok, const std::string& path) {
  if (!ok) throw ConfigError::invalid(path);
}

inline TableEnvelope read_envelope_table(const Section& parent, std::string_view key) {
  const Section t = parent.child(key, {"start", "values"});
  const std::string vpath = t.path("values");
  const auto start = t.integer("start").value_or(0);
  require(start >= 0 && start <= 1'000'000, t.path("start"));
  const Json* values = t.find("values");
  require(values != nullptr && values->is_array() && !values->empty() && values->size() <= 1'000'000, vpath);
  TableEnvelope out{static_cast<int>(start), {}};
  double total = 0.0;
  for (std::size_t i = 0; i < values->size(); ++i) {
    const std::string p = vpath + "[" + std::to_string(i) + "]";
    const double v = Section::as_number((*values)[i], p);
    require(v >= 0.0, p);
    out.values.push_back(v);
    total += v;
  }
  require(total > 0.0, vpath);
  return out;
}

inline DisorderTable read_disorder_table(const Section& parent, std::string_view key) {
  const Section t = parent.child(key, {"start", "values"});
  const std::string vpath = t.path("values");
  const auto start = t.integer("start").value_or(0);
  require(start >= 0 && start <= 1'000'000, t.path("start"));
  const Json* values = t.find("values");
  require(values != nullptr && values->is_array() && !values->empty() && values->size() <= 2'000'000, vpath);
  DisorderTable out;
  out.start = static_cast<int>(start);
  for (std::size_t i = 0; i < values->size(); ++i) {
    const std::string p = vpath + "[" + std::to_string(i) + "]";
    const double v = Section::as_number((*values)[i], p);
    require(v >= -1.0 && v <= 1.0, p);
    out.values.push_back(v);
  }
  return out;
}

/// Support of a source distribution, without building it.
inline std::pair<int, int> source_window(const RunConfig& cfg, double sigma, Source s) {
  if (cfg.envelope == EnvelopeKind::table) {
    const auto& t = s == Source::a || !cfg.table_b ? *cfg.table_a : *cfg.table_b;
    return {t.start, t.start + static_cast<int>(t.values.size()) - 1};
  }
  const double half = gaussian_window_halfwidth(cfg.mass_tol) * sigma;
  const double mu = 0.5 * cfg.n_bar;
  return {static_cast<int>(std::max(0.0, std::ceil(mu - half))), static_cast<int>(std::ceil(mu + half))};
}

inline constexpr double kMaxWindow = 2'000'000.0;

/// Cross-field and per-command preconditions.
inline void check_command(const RunConfig& cfg) {
  const bool physics = cfg.has_physics();
  if (cfg.command != Command::validate) require(physics, cfg.envelope == EnvelopeKind::table ? "physics.table" : "physics.sigma");
  if (cfg.command != Command::sweep) {
    require(cfg.sigmas.size() <= 1, "physics.sigma");
    require(cfg.epsilons.size() == 1, "physics.epsilon");
  }
  if (cfg.command == Command::sweep) require(cfg.envelope == EnvelopeKind::gaussian, "physics.envelope");
  if (cfg.disorder == DisorderKind::table) require(cfg.disorder_table.has_value(), "disorder.table");
  if (cfg.disorder == DisorderKind::iid_uniform) require(!cfg.disorder_table.has_value(), "disorder.table");
  if (cfg.command == Command::prob_map && physics) {
    const auto [a0, a1] = source_window(cfg, cfg.sigma(), Source::a);
    const auto [b0, b1] = source_window(cfg, cfg.sigma(), Source::b);
    if (cfg.block) require(*cfg.block >= a0 + b0 && *cfg.block <= a1 + b1, "prob_map.block");
    if (cfg.n_min && cfg.n_max) require(*cfg.n_min <= *cfg.n_max, "prob_map.n_max");
  }
}

}  // namespace detail

/**
 * Parses and validates a JSON config. `command` fills in a missing "command"
 * field; when both are given they must agree.
 */
[[nodiscard]] inline RunConfig parse_config(std::string_view text, std::optional<Command> command = std::nullopt) {
  using detail::require;
  using detail::Section;
  detail::Json doc;
  try {
    doc = detail::Json::parse(text);
  } catch (const detail::Json::parse_error& e) {
    throw ConfigError("", std::string("malformed config: ") + e.what());
  }
  const Section root(&doc, "",
                     {"schema", "command", "physics", "disorder", "ensemble", "theta", "truncation", "prob_map",
                      "output"});
  require(root.present(), "<root>");
  RunConfig cfg;

  if (const auto schema = root.integer("schema")) require(*schema == kSchemaVersion, "schema");
  const auto name = root.string("command");
  std::optional<Command> parsed;
  if (name) {
    parsed = parse_command(*name);
    require(parsed.has_value(), "command");
  }
  require(parsed || command, "command");
  if (parsed && command) require(*parsed == *command, "command");
  cfg.command = parsed ? *parsed : *command;

  // Truncation first: the Gaussian window depends on it.
  const Section trunc = root.child("truncation", {"mass_tol"});
  if (const auto v = trunc.number("mass_tol")) {
    require(*v > 0.0 && *v <= 1e-3, trunc.path("mass_tol"));
    cfg.mass_tol = *v;
  }

  const Section phys = root.child("physics", {"n_bar", "sigma", "epsilon", "envelope", "generator", "table", "table_b"});
  if (const auto v = phys.string("envelope")) {
    require(*v == "gaussian" || *v == "table", phys.path("envelope"));
    cfg.envelope = *v == "gaussian" ? EnvelopeKind::gaussian : EnvelopeKind::table;
  }
  if (const auto v = phys.string("generator")) {
    require(*v == "jx" || *v == "jy", phys.path("generator"));
    cfg.generator = *v == "jx" ? Generator::x : Generator::y;
  }
  if (const auto v = phys.numbers("epsilon")) {
    for (std::size_t i = 0; i < v->size(); ++i)
      require((*v)[i] >= 0.0 && (*v)[i] <= 1.0, v->size() == 1 ? phys.path("epsilon")
                                                                 : phys.path("epsilon") + "[" + std::to_string(i) + "]");
    cfg.epsilons = *v;
  }
  if (cfg.envelope == EnvelopeKind::gaussian) {
    require(phys.find("table") == nullptr, phys.path("table"));
    require(phys.find("table_b") == nullptr, phys.path("table_b"));
    const auto n_bar = phys.number("n_bar");
    const auto sigmas = phys.numbers("sigma");
    if (phys.present() || cfg.command != Command::validate) {
      require(n_bar && *n_bar > 0.0 && *n_bar <= 1e6, phys.path("n_bar"));
      require(sigmas.has_value(), phys.path("sigma"));
      for (std::size_t i = 0; i < sigmas->size(); ++i) {
        const double s = (*sigmas)[i];
        const std::string p =
            sigmas->size() == 1 ? phys.path("sigma") : phys.path("sigma") + "[" + std::to_string(i) + "]";
        require(s > 0.0 && 2.0 * gaussian_window_halfwidth(cfg.mass_tol) * s <= detail::kMaxWindow, p);
      }
      cfg.n_bar = *n_bar;
      cfg.sigmas = *sigmas;
    }
  } else {
    require(phys.find("sigma") == nullptr, phys.path("sigma"));
    cfg.table_a = detail::read_envelope_table(phys, "table");
    if (phys.find("table_b") != nullptr) cfg.table_b = detail::read_envelope_table(phys, "table_b");
    const auto da = build_distribution(*cfg.table_a);
    const auto db = cfg.table_b ? build_distribution(*cfg.table_b) : da;
    const double mean = da.mean_atoms() + db.mean_atoms();
    if (const auto v = phys.number("n_bar")) require(std::abs(*v - mean) <= 1e-9 * std::max(1.0, mean), phys.path("n_bar"));
    require(mean > 0.0, phys.path("table"));
    cfg.n_bar = mean;
  }

  const Section dis = root.child("disorder", {"kind", "shared", "seed", "realization", "table", "kappa0", "kappa1"});
  if (const auto v = dis.string("kind")) {
    require(*v == "iid_uniform" || *v == "table", dis.path("kind"));
    cfg.disorder = *v == "iid_uniform" ? DisorderKind::iid_uniform : DisorderKind::table;
  }
  if (const auto v = dis.boolean("shared")) cfg.shared = *v;
  if (const auto v = dis.unsigned_integer("seed")) cfg.seed = *v;
  if (const auto v = dis.unsigned_integer("realization")) cfg.realization = *v;
  if (dis.find("table") != nullptr) {
    cfg.disorder_table = detail::read_disorder_table(dis, "table");
    if (const auto v = dis.number("kappa0")) cfg.disorder_table->kappa0 = *v;
    if (const auto v = dis.number("kappa1")) cfg.disorder_table->kappa1 = *v;
  } else {
    require(dis.find("kappa0") == nullptr, dis.path("kappa0"));
    require(dis.find("kappa1") == nullptr, dis.path("kappa1"));
  }

  const Section ens = root.child("ensemble", {"realizations", "fisher"});
  if (const auto v = ens.integer("realizations")) {
    require(*v >= 1 && *v <= 1'000'000, ens.path("realizations"));
    cfg.realizations = static_cast<std::size_t>(*v);
  }
  if (const auto v = ens.boolean("fisher")) cfg.ensemble_fisher = *v;

  const Section th = root.child("theta", {"grid_points", "refine_tol", "theta", "delta_theta"});
  if (const auto v = th.integer("grid_points")) {
    require(*v >= 8 && *v <= 4096, th.path("grid_points"));
    cfg.grid_points = static_cast<int>(*v);
  }
  if (const auto v = th.number("refine_tol")) {
    require(*v > 0.0 && *v <= 0.1, th.path("refine_tol"));
    cfg.refine_tol = *v;
  }
  if (const auto v = th.number("theta")) {
    require(std::abs(*v) <= 1e6, th.path("theta"));
    cfg.theta = *v;
  }
  if (const auto v = th.numbers("delta_theta")) {
    for (std::size_t i = 0; i < v->size(); ++i)
      require((*v)[i] > 0.0 && (*v)[i] <= 0.1, v->size() == 1 ? th.path("delta_theta")
                                                             : th.path("delta_theta") + "[" + std::to_string(i) + "]");
    cfg.delta_thetas = *v;
  }

  const Section pm = root.child("prob_map", {"block", "theta_points", "n_min", "n_max"});
  if (const auto v = pm.integer("block")) {
    require(*v >= 0 && *v <= 4'000'000, pm.path("block"));
    cfg.block = static_cast<int>(*v);
  }
  if (const auto v = pm.integer("theta_points")) {
    require(*v >= 1 && *v <= 100'000, pm.path("theta_points"));
    cfg.theta_points = static_cast<std::size_t>(*v);
  }
  cfg.n_min = pm.number("n_min");
  cfg.n_max = pm.number("n_max");

  const Section out = root.child("output", {"directory", "format"});
  if (const auto v = out.string("directory")) {
    require(!v->empty(), out.path("directory"));
    cfg.directory = *v;
  }
  if (const auto v = out.string("format")) {
    require(*v == "csv", out.path("format"));
    cfg.format = *v;
  }

  detail::check_command(cfg);
  return cfg;
}

/// Fully defaulted config as JSON; parse_config() accepts it back.
[[nodiscard]] inline nlohmann::ordered_json echo(const RunConfig& cfg) {
  using J = nlohmann::ordered_json;
  auto scalar_or_list = [](const std::vector<double>& v) { return v.size() == 1 ? J(v.front()) : J(v); };
  auto opt = [](const auto& v) { return v ? J(*v) : J(nullptr); };
  J j;
  j["schema"] = kSchemaVersion;
  j["command"] = std::string(to_string(cfg.command));
  J phys;
  if (cfg.has_physics()) {
    phys["n_bar"] = cfg.n_bar;
    if (cfg.envelope == EnvelopeKind::gaussian) phys["sigma"] = scalar_or_list(cfg.sigmas);
    phys["epsilon"] = scalar_or_list(cfg.epsilons);
    phys["envelope"] = cfg.envelope == EnvelopeKind::gaussian ? "gaussian" : "table";
    phys["generator"] = std::string(to_string(cfg.generator));
    if (cfg.table_a) phys["table"] = J{{"start", cfg.table_a->start}, {"values", cfg.table_a->values}};
    if (cfg.table_b) phys["table_b"] = J{{"start", cfg.table_b->start}, {"values", cfg.table_b->values}};
    j["physics"] = phys;
  } else {
    j["physics"] = nullptr;
  }
  J dis;
  dis["kind"] = cfg.disorder == DisorderKind::iid_uniform ? "iid_uniform" : "table";
  dis["shared"] = cfg.shared;
  dis["seed"] = cfg.seed;
  dis["realization"] = cfg.realization;
  if (cfg.disorder_table) {
    dis["table"] = J{{"start", cfg.disorder_table->start}, {"values", cfg.disorder_table->values}};
    dis["kappa0"] = cfg.disorder_table->kappa0;
    dis["kappa1"] = cfg.disorder_table->kappa1;
  }
  j["disorder"] = dis;
  j["ensemble"] = J{{"realizations", cfg.realizations}, {"fisher", cfg.ensemble_fisher}};
  j["theta"] = J{{"grid_points", cfg.grid_points},
                 {"refine_tol", cfg.refine_tol},
                 {"theta", opt(cfg.theta)},
                 {"delta_theta", scalar_or_list(cfg.delta_thetas)}};
  j["truncation"] = J{{"mass_tol", cfg.mass_tol}};
  j["prob_map"] = J{{"block", opt(cfg.block)},
                    {"theta_points", cfg.theta_points},
                    {"n_min", opt(cfg.n_min)},
                    {"n_max", opt(cfg.n_max)}};
  j["output"] = J{{"directory", cfg.directory}, {"format", cfg.format}};
  return j;
}

[[nodiscard]] inline SweepConfig sweep_config(const RunConfig& cfg, unsigned threads) {
  SweepConfig s;
  s.n_bar = cfg.n_bar;
  s.sigmas = cfg.sigmas;
  s.epsilons = cfg.epsilons;
  s.realizations = cfg.realizations;
  s.seed = cfg.seed;
  s.generator = cfg.generator;
  s.optimizer = {cfg.grid_points, cfg.refine_tol, 1};
  s.sharing = cfg.shared ? DisorderSharing::shared : DisorderSharing::independent;
  s.table = cfg.disorder_table;
  s.mass_tol = cfg.mass_tol;
  s.compute_fisher = cfg.ensemble_fisher;
  s.threads = threads;
  return s;
}

/// Clean (disorder-free) source distributions.
[[nodiscard]] inline std::pair<NumberDistribution, NumberDistribution> clean_sources(const RunConfig& cfg) {
  if (cfg.envelope == EnvelopeKind::gaussian) {
    auto a = build_distribution(GaussianEnvelope{0.5 * cfg.n_bar, cfg.sigma(), cfg.mass_tol});
    return {a, a};
  }
  auto a = build_distribution(*cfg.table_a);
  return {a, cfg.table_b ? build_distribution(*cfg.table_b) : a};
}

/// Sources of the single-state commands: realization `cfg.realization`.
[[nodiscard]] inline RealizedSources configured_sources(const RunConfig& cfg) {
  auto [a, b] = clean_sources(cfg);
  RealizedSources out{a, b, {}};
  const double eps = cfg.epsilon();
  if (cfg.disorder_table) {
    const auto& t = *cfg.disorder_table;
    out.disorder = disorder_from_table(a, b, eps, t.start, t.values, t.kappa0, t.kappa1);
  } else {
    out.disorder = draw_disorder(a, b, eps, cfg.shared ? DisorderSharing::shared : DisorderSharing::independent,
                                 cfg.seed, cfg.realization);
  }
  out.a = apply_disorder(a, out.disorder, Source::a);
  out.b = apply_disorder(b, out.disorder, Source::b);
  return out;
}

/// Shortest decimal that reads back to the same double.
[[nodiscard]] inline std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class CsvTable {
 public:
  explicit CsvTable(std::initializer_list<std::string_view> header) {
    bool first = true;
    for (auto h : header) {
      text_ += first ? "" : ",";
      text_ += h;
      first = false;
    }
    text_ += '\n';
    columns_ = header.size();
  }

  CsvTable& add(double v) { return field(format_number(v)); }
  CsvTable& add(std::int64_t v) { return field(std::to_string(v)); }
  CsvTable& add(std::uint64_t v) { return field(std::to_string(v)); }
  CsvTable& add(std::string_view s) { return field(quote(s)); }
  CsvTable& add(std::optional<double> v) { return field(v ? format_number(*v) : std::string()); }

  [[nodiscard]] const std::string& text() const noexcept { return text_; }

 private:
  static std::string quote(std::string_view s) {
    if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
  }

  CsvTable& field(const std::string& s) {
    text_ += at_ == 0 ? "" : ",";
    text_ += s;
    if (++at_ == columns_) {
      text_ += '\n';
      at_ = 0;
    }
    return *this;
  }

  std::string text_;
  std::size_t columns_ = 0;
  std::size_t at_ = 0;
};

struct OutputFile {
  std::string name;
  std::string content;
};

struct ValidationCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Everything a command produces before anything touches the disk.
struct CommandOutput {
  std::vector<OutputFile> files;
  std::vector<std::string> warnings;
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  bool succeeded = true;  // false when a validation check failed
};

namespace detail {

/// Runs fn and attaches `path` to any library error it throws.
template <class Fn>
decltype(auto) at_path(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(path, std::string(e.what()) + " (at " + path + ")");
  }
}

inline void warn_clamped(CommandOutput& out, std::size_t clamped) {
  if (clamped > 0)
    out.warnings.push_back(std::to_string(clamped) + " disordered probabilities were negative and clamped to zero");
}

inline void warn_qfi(CommandOutput& out, const QfiReport& r) {
  if (r.skipped_mass > 0.0)
    out.warnings.push_back("eigenvalue pairs below the underflow guard were skipped, mass " +
                           format_number(r.skipped_mass));
}

inline void warn_fisher(CommandOutput& out, const FisherReport& r) {
  if (r.flagged_outcomes > 0)
    out.warnings.push_back(std::to_string(r.flagged_outcomes) +
                           " outcomes with vanishing probability and non-zero slope at theta " +
                           format_number(r.theta));
}

inline BlockSpectrum configured_spectrum(const RunConfig& cfg, CommandOutput& out) {
  return at_path("physics", [&] {
    const auto src = configured_sources(cfg);
    warn_clamped(out, src.a.clamped_entries + src.b.clamped_entries);
    return block_spectra(src.a, src.b);
  });
}

inline CommandOutput run_qfi(const RunConfig& cfg) {
  CommandOutput out;
  const auto spec = configured_spectrum(cfg, out);
  CsvTable csv{"method", "qfi", "n_bar", "qfi_over_snl"};
  auto row = [&](const QfiReport& r, double n_bar) {
    csv.add(to_string(r.method)).add(r.value).add(n_bar).add(r.value / n_bar);
    out.summary[std::string(to_string(r.method))] = r.value;
  };
  const auto exact = qfi_exact(spec, cfg.generator);
  warn_qfi(out, exact);
  row(exact, exact.mean_atoms);
  if (spec.dense_dimension() <= kOracleDimensionLimit) {
    row(qfi_oracle_general(spec, cfg.generator), spec.mean_atoms);
  } else {
    out.warnings.push_back("oracle skipped: dense dimension " + std::to_string(spec.dense_dimension()) +
                           " exceeds " + std::to_string(kOracleDimensionLimit));
  }
  const auto [clean_a, clean_b] = clean_sources(cfg);
  if (cfg.envelope == EnvelopeKind::gaussian && cfg.epsilon() == 0.0)
    row(at_path("physics", [&] { return qfi_continuum(clean_a, clean_b); }), cfg.n_bar);
  if (cfg.epsilon() > 0.0) {
    const auto src = configured_sources(cfg);
    row(at_path("physics", [&] { return qfi_perturbative(clean_a, clean_b, src.disorder, cfg.epsilon()); }),
        spec.mean_atoms);
  }
  if (cfg.envelope == EnvelopeKind::gaussian) {
    const double k0 = cfg.disorder_table ? cfg.disorder_table->kappa0 : 1.0 / 3.0;
    const double k1 = cfg.disorder_table ? cfg.disorder_table->kappa1 : 0.0;
    row(plateau_prediction(cfg.n_bar, cfg.sigma(), cfg.epsilon(), k0, k1), cfg.n_bar);
  }
  out.files.push_back({"qfi.csv", csv.text()});
  return out;
}

inline CommandOutput run_fisher(const RunConfig& cfg, unsigned threads) {
  CommandOutput out;
  const auto spec = configured_spectrum(cfg, out);
  const FisherReport r = cfg.theta ? at_path("theta.theta", [&] { return fisher_information(spec, *cfg.theta, cfg.generator); })
                                   : at_path("theta", [&] {
                                       return optimize_fisher(spec, cfg.generator,
                                                              {cfg.grid_points, cfg.refine_tol, threads});
                                     });
  warn_fisher(out, r);
  CsvTable csv{"theta", "fisher", "qfi", "n_bar", "fisher_over_snl", "fisher_over_qfi"};
  csv.add(r.theta).add(r.value).add(r.qfi).add(r.mean_atoms).add(r.over_snl()).add(r.value / r.qfi);
  out.summary["theta"] = r.theta;
  out.summary["fisher"] = r.value;
  out.summary["qfi"] = r.qfi;
  out.summary["evaluations"] = r.evaluations;
  out.files.push_back({"fisher.csv", csv.text()});
  return out;
}

inline CommandOutput run_sweep(const RunConfig& cfg, unsigned threads) {
  CommandOutput out;
  const auto res = at_path("physics", [&] { return sweep_sigma(sweep_config(cfg, threads)); });
  CsvTable csv{"sigma",   "epsilon",      "qfi_mean",     "qfi_std", "cfi_mean",
               "cfi_std", "qfi_over_snl", "cfi_over_snl", "plateau_prediction"};
  CsvTable raw{"sigma", "epsilon", "realization", "n_bar", "qfi", "cfi", "theta_opt"};
  std::size_t clamped = 0;
  const bool fisher = cfg.ensemble_fisher;
  for (const auto& c : res.cells) {
    auto maybe = [&](double v) { return fisher ? std::optional<double>(v) : std::nullopt; };
    csv.add(c.sigma).add(c.epsilon).add(c.qfi_stats.mean).add(c.qfi_stats.std);
    csv.add(maybe(c.cfi_stats.mean)).add(maybe(c.cfi_stats.std)).add(c.qfi_snl_stats.mean);
    csv.add(maybe(c.cfi_snl_stats.mean)).add(c.plateau / cfg.n_bar);
    for (std::size_t r = 0; r < c.realizations(); ++r) {
      raw.add(c.sigma).add(c.epsilon).add(static_cast<std::uint64_t>(r)).add(c.n_bar[r]).add(c.qfi[r]);
      raw.add(fisher ? std::optional<double>(c.cfi[r]) : std::nullopt);
      raw.add(fisher ? std::optional<double>(c.theta_opt[r]) : std::nullopt);
    }
    clamped += c.clamped_entries;
  }
  warn_clamped(out, clamped);
  out.summary["cells"] = res.cells.size();
  out.summary["realizations"] = cfg.realizations;
  out.files.push_back({"sweep.csv", csv.text()});
  out.files.push_back({"sweep_raw.csv", raw.text()});
  return out;
}

inline int default_block(const RunConfig& cfg, const BlockSpectrum& spec) {
  if (cfg.block) return *cfg.block;
  if (cfg.envelope == EnvelopeKind::gaussian) return static_cast<int>(std::lround(cfg.n_bar));
  const SpectrumBlock* best = nullptr;
  double best_mass = -1.0;
  for (const auto& b : spec.blocks)
    if (const double m = b.mass(); m > best_mass) {
      best_mass = m;
      best = &b;
    }
  return best->total_atoms;
}

inline CommandOutput run_prob_map(const RunConfig& cfg) {
  CommandOutput out;
  const auto spec = configured_spectrum(cfg, out);
  const int block = default_block(cfg, spec);
  const auto grid = full_turn_grid(cfg.theta_points);
  const auto map = at_path("prob_map.block",
                           [&] { return probability_map(spec, block, grid, cfg.generator, cfg.n_min, cfg.n_max); });
  CsvTable csv{"theta", "n", "probability"};
  for (std::size_t t = 0; t < map.thetas.size(); ++t)
    for (int k = map.k_min; k <= map.k_max; ++k)
      csv.add(map.thetas[t]).add(map.imbalance(k)).add(map.probabilities[t][static_cast<std::size_t>(k - map.k_min)]);
  out.summary["block"] = map.block;
  out.summary["block_mass"] = map.block_mass;
  out.summary["theta_min"] = grid.front();
  out.summary["theta_max"] = grid.back();
  out.summary["theta_points"] = grid.size();
  out.summary["n_min"] = map.imbalance(map.k_min);
  out.summary["n_max"] = map.imbalance(map.k_max);
  out.summary["total_variation"] = total_variation(map);
  out.files.push_back({"probmap.csv", csv.text()});
  return out;
}

inline CommandOutput run_hellinger(const RunConfig& cfg, unsigned threads) {
  CommandOutput out;
  const auto spec = configured_spectrum(cfg, out);
  const FisherReport at = cfg.theta ? at_path("theta.theta", [&] { return fisher_information(spec, *cfg.theta, cfg.generator); })
                                    : at_path("theta", [&] {
                                        return optimize_fisher(spec, cfg.generator,
                                                               {cfg.grid_points, cfg.refine_tol, threads});
                                      });
  warn_fisher(out, at);
  CsvTable csv{"theta", "delta_theta", "distance_sq", "fisher_estimate", "fisher", "relative_error"};
  for (double step : cfg.delta_thetas) {
    const auto h = at_path("theta.delta_theta", [&] { return hellinger_fisher(spec, at.theta, step, cfg.generator); });
    csv.add(h.theta).add(h.delta_theta).add(h.distance_sq).add(h.fisher).add(at.value);
    csv.add(at.value > 0.0 ? std::optional<double>((h.fisher - at.value) / at.value) : std::nullopt);
  }
  out.summary["theta"] = at.theta;
  out.summary["fisher"] = at.value;
  out.files.push_back({"hellinger.csv", csv.text()});
  return out;
}

inline ValidationCheck check_normalization(const BlockSpectrum& spec) {
  double worst = 0.0, lowest = 0.0;
  for (double theta : {0.4, 1.3, 2.9}) {
    const auto o = outcome_probabilities(spec, theta);
    worst = std::max(worst, std::abs(o.total() - 1.0));
    for (std::size_t b = 0; b < o.blocks.size(); ++b) {
      double sum = 0.0;
      for (double p : o.probabilities[b]) {
        sum += p;
        lowest = std::min(lowest, p);
      }
      worst = std::max(worst, std::abs(sum - spec.blocks[b].mass()));
    }
  }
  return {"normalization", worst <= 1e-10 && lowest >= -1e-14,
          "max deviation " + format_number(worst) + ", min probability " + format_number(lowest)};
}

inline ValidationCheck check_hierarchy(const BlockSpectrum& spec, Generator gen) {
  double worst = 0.0;
  for (double theta : {0.4, 1.3, 2.9}) {
    const auto f = fisher_information(spec, theta, gen);
    worst = std::max(worst, f.value / f.qfi);
  }
  return {"fisher_below_qfi", worst <= 1 + 1e-6, "max fisher/qfi " + format_number(worst)};
}

inline ValidationCheck check_unitarity() {
  double worst = 0.0, worst_dk = 0.0;
  for (int n : {1, 2, 5, 10, 20, 50, 100}) {
    for (double theta : {0.0, 0.3, 0.9, 1.5707963267948966, 2.2, 3.1, 4.0, 5.9}) {
      const auto k = rotation_kernel(n, theta, Generator::x);
      worst = std::max({worst, (k.probabilities.rowwise().sum().array() - 1.0).abs().maxCoeff(),
                        (k.probabilities.colwise().sum().array() - 1.0).abs().maxCoeff()});
      worst_dk = std::max({worst_dk, k.derivative.rowwise().sum().cwiseAbs().maxCoeff(),
                           k.derivative.colwise().sum().cwiseAbs().maxCoeff()});
    }
  }
  return {"unitarity", worst <= 1e-10 && worst_dk <= 1e-8,
          "max row/column deviation " + format_number(worst) + ", derivative " + format_number(worst_dk)};
}

inline ValidationCheck check_ladder_agreement() {
  double worst = 0.0;
  for (int n : {10, 50, 150}) {
    for (double theta : {0.5, 1.9, 3.0}) {
      const auto a = rotation_kernel(n, theta, Generator::x);
      const auto b = recursive_rotation_kernel(n, theta, Generator::x);
      worst = std::max(worst, (a.probabilities - b.probabilities).cwiseAbs().maxCoeff());
    }
  }
  return {"ladder_agreement", worst <= 1e-11, "max kernel difference " + format_number(worst)};
}

inline ValidationCheck check_oracle(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> start(0, 5), length(1, 5);
  std::uniform_real_distribution<double> weight(0.0, 1.0);
  auto table = [&] {
    TableEnvelope t{start(rng), {}};
    const int len = length(rng);
    for (int i = 0; i < len; ++i) t.values.push_back(weight(rng) + 1e-3);
    return t;
  };
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const auto spec = block_spectra(build_distribution(table()), build_distribution(table()));
    const Generator gen = i % 2 == 0 ? Generator::x : Generator::y;
    const double exact = qfi_exact(spec, gen).value;
    const double oracle = qfi_oracle_general(spec, gen).value;
    worst = std::max(worst, std::abs(exact - oracle) / std::max(oracle, 1e-300));
  }
  return {"oracle_equivalence", worst <= 1e-10, "50 spectra with N <= 20, max relative deviation " + format_number(worst)};
}

inline ValidationCheck check_hong_ou_mandel() {
  const auto one = build_distribution(TableEnvelope{1, {1.0}});
  const auto o = outcome_probabilities(block_spectra(one, one), 1.5707963267948966);
  const auto& p = o.probabilities.front();
  const double dev = std::max({std::abs(p[0] - 0.5), std::abs(p[1]), std::abs(p[2] - 0.5)});
  return {"hong_ou_mandel", dev <= 1e-12, "max deviation " + format_number(dev)};
}

inline ValidationCheck check_twin_fock() {
  const auto half = build_distribution(TableEnvelope{50, {1.0}});
  const double f = qfi_exact(block_spectra(half, half)).value;
  return {"twin_fock_qfi", std::abs(f - 5100.0) <= 1e-9 * 5100.0, "N=100 qfi " + format_number(f)};
}

inline CommandOutput run_validate(const RunConfig& cfg) {
  CommandOutput out;
  std::vector<ValidationCheck> checks{check_unitarity(), check_ladder_agreement(), check_oracle(cfg.seed),
                                      check_hong_ou_mandel(), check_twin_fock()};
  if (cfg.has_physics()) {
    const auto spec = configured_spectrum(cfg, out);
    checks.push_back(check_normalization(spec));
    checks.push_back(check_hierarchy(spec, cfg.generator));
  }
  CsvTable csv{"check", "passed", "detail"};
  std::size_t failed = 0;
  for (const auto& c : checks) {
    csv.add(c.name).add(c.passed ? "true" : "false").add(c.detail);
    out.summary[c.name] = c.passed;
    failed += !c.passed;
  }
  out.succeeded = failed == 0;
  out.files.push_back({"validate.csv", csv.text()});
  return out;
}

}  // namespace detail

/// Computes a command's datasets in memory.
[[nodiscard]] inline CommandOutput run_command(const RunConfig& cfg, unsigned threads = 1) {
  switch (cfg.command) {
    case Command::qfi: return detail::run_qfi(cfg);
    case Command::fisher: return detail::run_fisher(cfg, threads);
    case Command::sweep: return detail::run_sweep(cfg, threads);
    case Command::prob_map: return detail::run_prob_map(cfg);
    case Command::hellinger: return detail::run_hellinger(cfg, threads);
    case Command::validate: return detail::run_validate(cfg);
  }
  throw Error("unknown command");
}

[[nodiscard]] inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("digest failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xf];
  }
  return out;
}

struct RunOptions {
  unsigned threads = 1;
};

struct RunResult {
  nlohmann::ordered_json manifest;
  int exit_code = 0;
};

inline constexpr std::string_view kManifestName = "manifest.json";

namespace detail {

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string());
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  f.close();
  if (!f) throw Error("cannot write " + path.string());
}

inline nlohmann::ordered_json manifest_header(std::string_view command) {
  nlohmann::ordered_json m;
  m["tool"] = std::string(kToolName);
  m["version"] = std::string(kVersion);
  m["command"] = std::string(command);
  return m;
}

/// Digest of everything that identifies a run's results: version, config,
/// summary, warnings and output digests. Timing, thread count and the output
/// directory are left out.
inline std::string run_digest(const nlohmann::ordered_json& m) {
  nlohmann::ordered_json d;
  for (const char* key : {"tool", "version", "command", "status", "seed", "config", "summary", "warnings", "outputs",
                          "error"})
    if (m.contains(key)) d[key] = m[key];
  if (d.contains("config") && d["config"].contains("output")) d["config"]["output"].erase("directory");
  return sha256_hex(d.dump());
}

}  // namespace detail

/// Manifest for a run that failed before execution; written to `directory`.
inline nlohmann::ordered_json write_failure_manifest(const std::filesystem::path& directory, std::string_view command,
                                                     const std::string& message, const std::string& path) {
  auto m = detail::manifest_header(command);
  m["status"] = "error";
  m["error"] = {{"message", message}, {"path", path}};
  m["outputs"] = nlohmann::ordered_json::array();
  m["run_digest"] = detail::run_digest(m);
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  detail::write_file(directory / kManifestName, m.dump(2) + "\n");
  return m;
}

/**
 * Runs the configured command and writes its CSV files plus manifest.json
 * (last) into cfg.directory. Failures leave only the manifest with the error
 * record. Exit code 0 on success, 1 on a failed computation or check.
 */
inline RunResult execute(const RunConfig& cfg, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::filesystem::path dir(cfg.directory);
  auto m = detail::manifest_header(to_string(cfg.command));
  m["status"] = "ok";
  m["seed"] = cfg.seed;
  m["threads"] = opt.threads;
  m["config"] = echo(cfg);
  RunResult result;
  std::vector<std::filesystem::path> written;
  try {
    CommandOutput out = run_command(cfg, opt.threads);
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json files = nlohmann::ordered_json::array();
    for (const auto& f : out.files) {
      written.push_back(dir / f.name);
      detail::write_file(written.back(), f.content);
      files.push_back({{"file", f.name}, {"bytes", f.content.size()}, {"sha256", sha256_hex(f.content)}});
    }
    if (!out.succeeded) {
      m["status"] = "checks_failed";
      result.exit_code = 1;
    }
    m["summary"] = out.summary;
    m["warnings"] = out.warnings;
    m["outputs"] = files;
  } catch (const std::exception& e) {
    std::error_code ec;
    for (const auto& p : written) std::filesystem::remove(p, ec);
    const auto* ce = dynamic_cast<const ConfigError*>(&e);
    m["status"] = "error";
    m["error"] = {{"message", e.what()}, {"path", ce ? ce->path() : std::string()}};
    m["outputs"] = nlohmann::ordered_json::array();
    result.exit_code = 1;
  }
  m["run_digest"] = detail::run_digest(m);
  m["duration_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  detail::write_file(dir / kManifestName, m.dump(2) + "\n");
  result.manifest = std::move(m);
  return result;
}

}  // namespace twin_metrology::cli
