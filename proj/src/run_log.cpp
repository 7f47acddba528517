#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cmpc/sim.hpp"

namespace cmpc {

using nlohmann::json;

const std::vector<std::string> kTickColumns = {
    "tick",       "t",         "s",          "e",         "dpsi",           "Ux",            "Uy",
    "r",          "mu",        "delta",      "hold",      "status",         "iterations",    "solve_ms",
    "residual",   "objective", "sigma_stab_nom", "sigma_env_nom", "sigma_stab_c", "sigma_env_c"};

const std::vector<std::string> kHorizonColumns = {"tick", "branch", "stage",  "t", "s",          "Ux",
                                                  "kappa", "Uy",    "r",      "dpsi", "e",       "u",
                                                  "sigma_stab", "sigma_env"};

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

QpStatus status_from_string(const std::string& s) {
  for (QpStatus st : {QpStatus::Solved, QpStatus::MaxIterations, QpStatus::PrimalInfeasible, QpStatus::DualInfeasible,
                      QpStatus::NumericalError}) {
    if (s == to_string(st)) return st;
  }
  throw Error(ErrorCode::ParseError, "unknown solver status '" + s + "'");
}

RunOutcome outcome_from_string(const std::string& s) {
  for (RunOutcome o : {RunOutcome::Completed, RunOutcome::SolverFailure, RunOutcome::NonFinite}) {
    if (s == to_string(o)) return o;
  }
  throw Error(ErrorCode::ParseError, "unknown run outcome '" + s + "'");
}

std::string join(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) line += ',';
    line += cells[i];
  }
  return line;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

double to_double(const std::string& cell, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (end == cell.c_str() || *end != '\0') throw Error(ErrorCode::ParseError, where + ": not a number '" + cell + "'");
  return v;
}

// Reads a CSV whose header must equal `columns`; returns the data rows.
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& file,
                                               const std::vector<std::string>& columns) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::ParseError, "cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line) || split(line) != columns) {
    throw Error(ErrorCode::ParseError, file.string() + ":1: unexpected header");
  }
  std::vector<std::vector<std::string>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != columns.size()) {
      throw Error(ErrorCode::ParseError, file.string() + ":" + std::to_string(line_no) + ": expected " +
                                             std::to_string(columns.size()) + " columns");
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

json solver_stats(const RunLog& log) {
  int max_it = 0;
  double total_it = 0;
  for (const auto& t : log.ticks) {
    max_it = std::max(max_it, t.iterations);
    total_it += t.iterations;
  }
  return {{"mean_iterations", log.ticks.empty() ? 0.0 : total_it / log.ticks.size()}, {"max_iterations", max_it}};
}

}  // namespace

void write_log(const RunLog& log, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "ticks.csv");
    out << join(kTickColumns) << '\n';
    for (const TickRecord& t : log.ticks) {
      const VehicleState& x = t.state;
      out << join({std::to_string(t.tick), fmt(t.t), fmt(x.s), fmt(x.e), fmt(x.dpsi), fmt(x.Ux), fmt(x.Uy), fmt(x.r),
                   fmt(t.mu), fmt(t.delta), t.hold ? "1" : "0", to_string(t.status), std::to_string(t.iterations),
                   fmt(t.solve_ms), fmt(t.residual), fmt(t.objective), fmt(t.sigma_stab_nom), fmt(t.sigma_env_nom),
                   fmt(t.sigma_stab_c), fmt(t.sigma_env_c)})
          << '\n';
    }
  }
  {
    std::ofstream out(dir / "horizons.csv");
    out << join(kHorizonColumns) << '\n';
    for (const HorizonRecord& h : log.horizons) {
      out << join({std::to_string(h.tick), h.branch == Branch::Nominal ? "nominal" : "contingency",
                   std::to_string(h.stage), fmt(h.t), fmt(h.s), fmt(h.Ux), fmt(h.kappa), fmt(h.x(0)), fmt(h.x(1)),
                   fmt(h.x(2)), fmt(h.x(3)), fmt(h.u), fmt(h.sigma_stab), fmt(h.sigma_env)})
          << '\n';
    }
  }
  json doc = {{"schema_version", kSchemaVersion},
              {"scenario", scenario_to_json(log.scenario)},
              {"outcome", to_string(log.outcome)},
              {"diagnostic", log.diagnostic},
              {"reached_end", log.reached_end},
              {"metrics", metrics_to_json(compute_metrics(log, log.scenario))},
              {"solver", solver_stats(log)},
              {"columns", {{"ticks", kTickColumns}, {"horizons", kHorizonColumns}}}};
  std::ofstream(dir / "run.json") << doc.dump(2) << '\n';
}

RunLog read_log(const std::filesystem::path& dir, bool with_horizons) {
  std::ifstream in(dir / "run.json");
  if (!in) throw Error(ErrorCode::ParseError, "cannot open " + (dir / "run.json").string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ParseError, (dir / "run.json").string() + ": " + e.what());
  }
  if (!doc.contains("scenario") || !doc.contains("outcome")) {
    throw Error(ErrorCode::ParseError, "run.json needs 'scenario' and 'outcome'");
  }
  RunLog log;
  log.scenario = scenario_from_json(doc.at("scenario"));
  log.outcome = outcome_from_string(doc.at("outcome").get<std::string>());
  log.diagnostic = doc.value("diagnostic", "");
  log.reached_end = doc.value("reached_end", false);

  const auto where = (dir / "ticks.csv").string();
  for (const auto& c : read_csv(dir / "ticks.csv", kTickColumns)) {
    TickRecord t;
    t.tick = static_cast<int>(to_double(c[0], where));
    t.t = to_double(c[1], where);
    t.state = {to_double(c[2], where), to_double(c[3], where), to_double(c[4], where),
               to_double(c[5], where), to_double(c[6], where), to_double(c[7], where)};
    t.mu = to_double(c[8], where);
    t.delta = to_double(c[9], where);
    t.hold = c[10] == "1";
    t.status = status_from_string(c[11]);
    t.iterations = static_cast<int>(to_double(c[12], where));
    t.solve_ms = to_double(c[13], where);
    t.residual = to_double(c[14], where);
    t.objective = to_double(c[15], where);
    t.sigma_stab_nom = to_double(c[16], where);
    t.sigma_env_nom = to_double(c[17], where);
    t.sigma_stab_c = to_double(c[18], where);
    t.sigma_env_c = to_double(c[19], where);
    log.ticks.push_back(t);
  }
  if (with_horizons) {
    const auto hwhere = (dir / "horizons.csv").string();
    for (const auto& c : read_csv(dir / "horizons.csv", kHorizonColumns)) {
      HorizonRecord h;
      h.tick = static_cast<int>(to_double(c[0], hwhere));
      h.branch = c[1] == "nominal" ? Branch::Nominal : Branch::Contingency;
      h.stage = static_cast<int>(to_double(c[2], hwhere));
      h.t = to_double(c[3], hwhere);
      h.s = to_double(c[4], hwhere);
      h.Ux = to_double(c[5], hwhere);
      h.kappa = to_double(c[6], hwhere);
      h.x = MpcState(to_double(c[7], hwhere), to_double(c[8], hwhere), to_double(c[9], hwhere),
                     to_double(c[10], hwhere));
      h.u = to_double(c[11], hwhere);
      h.sigma_stab = to_double(c[12], hwhere);
      h.sigma_env = to_double(c[13], hwhere);
      log.horizons.push_back(h);
    }
  }
  return log;
}

}  // namespace cmpc
