#include <fstream>
#include <sstream>

#include "cmpc/sim.hpp"

namespace cmpc {

using nlohmann::json;

namespace {

// Field access that names the full dotted path in every ParseError.
class Fields {
 public:
  Fields(const json& node, std::string where) : node_(node), where_(std::move(where)) {
    if (!node_.is_object()) fail(where_, "expected an object");
  }

  bool has(const std::string& key) const { return node_.contains(key); }

  const json& at(const std::string& key) const {
    if (!node_.contains(key)) fail(path(key), "missing field");
    return node_.at(key);
  }

  double number(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_number()) fail(path(key), "expected a number");
    return v.get<double>();
  }
  double number(const std::string& key, double fallback) const { return has(key) ? number(key) : fallback; }

  int integer(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_number_integer()) fail(path(key), "expected an integer");
    return v.get<int>();
  }
  int integer(const std::string& key, int fallback) const { return has(key) ? integer(key) : fallback; }

  std::uint64_t unsigned_integer(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_number_unsigned()) fail(path(key), "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const json& v = at(key);
    if (!v.is_boolean()) fail(path(key), "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_string()) fail(path(key), "expected a string");
    return v.get<std::string>();
  }
  std::string string(const std::string& key, const std::string& fallback) const {
    return has(key) ? string(key) : fallback;
  }

  Fields object(const std::string& key) const { return Fields(at(key), path(key)); }

  const json& array(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_array()) fail(path(key), "expected an array");
    return v;
  }

  std::string path(const std::string& key) const { return where_.empty() ? key : where_ + "." + key; }
  const std::string& where() const { return where_; }

  [[noreturn]] static void fail(const std::string& field, const std::string& what) {
    throw Error(ErrorCode::ParseError, "field '" + field + "': " + what);
  }

 private:
  const json& node_;
  std::string where_;
};

std::string element(const std::string& array_path, std::size_t i) {
  return array_path + "[" + std::to_string(i) + "]";
}

void check_schema(const Fields& f) {
  const int version = f.integer("schema_version");
  if (version != kSchemaVersion) {
    throw Error(ErrorCode::SchemaVersionMismatch, f.path("schema_version") + " is " + std::to_string(version) +
                                                       ", expected " + std::to_string(kSchemaVersion));
  }
}

json read_json_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorCode::ParseError, "cannot open " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    int line = 1;
    std::size_t line_start = 0;
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        line_start = i + 1;
      }
    }
    throw Error(ErrorCode::ParseError, file.string() + ":" + std::to_string(line) + ":" +
                                           std::to_string(end - line_start + 1) + ": " + e.what());
  }
}

PathSpec path_from_json(const Fields& f) {
  PathSpec p;
  const std::string type = f.string("type");
  if (type == "left_turn") {
    p.kind = PathSpec::Kind::LeftTurn;
    p.radius = f.number("radius");
    p.entry_length = f.number("entry_length");
    p.exit_length = f.number("exit_length");
    p.half_width = f.number("half_width");
  } else if (type == "straight") {
    p.kind = PathSpec::Kind::Straight;
    p.length = f.number("length");
    p.half_width = f.number("half_width");
  } else if (type == "samples") {
    p.kind = PathSpec::Kind::Samples;
    const json& rows = f.array("samples");
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Fields r(rows[i], element(f.path("samples"), i));
      p.samples.push_back({r.number("s"), r.number("kappa"), r.number("e_min"), r.number("e_max")});
    }
  } else {
    Fields::fail(f.path("type"), "unknown path type '" + type + "'");
  }
  return p;
}

json path_to_json(const PathSpec& p) {
  switch (p.kind) {
    case PathSpec::Kind::LeftTurn:
      return {{"type", "left_turn"},
              {"radius", p.radius},
              {"entry_length", p.entry_length},
              {"exit_length", p.exit_length},
              {"half_width", p.half_width}};
    case PathSpec::Kind::Straight:
      return {{"type", "straight"}, {"length", p.length}, {"half_width", p.half_width}};
    case PathSpec::Kind::Samples: {
      json rows = json::array();
      for (const auto& s : p.samples) {
        rows.push_back({{"s", s.s}, {"kappa", s.kappa}, {"e_min", s.e_min}, {"e_max", s.e_max}});
      }
      return {{"type", "samples"}, {"samples", rows}};
    }
  }
  return {};
}

VehicleParams vehicle_from_fields(const Fields& f) {
  VehicleParams p = make_vehicle_params(f.number("m"), f.number("Iz"), f.number("a"), f.number("b"), f.number("g"),
                                        f.number("C_front"), f.number("C_rear"), f.number("mu_front"),
                                        f.number("mu_rear"));
  p.ux_min = f.number("ux_min", p.ux_min);
  return p;
}

Weights weights_from_json(const Fields& f) {
  Weights w;
  if (f.has("Q_diag")) {
    const json& q = f.array("Q_diag");
    if (q.size() != 4) Fields::fail(f.path("Q_diag"), "expected 4 entries");
    Eigen::Vector4d d;
    for (int i = 0; i < 4; ++i) {
      if (!q[i].is_number()) Fields::fail(element(f.path("Q_diag"), i), "expected a number");
      d(i) = q[i].get<double>();
    }
    w.Q = d.asDiagonal();
  }
  w.R = f.number("R", w.R);
  w.W_stab = f.number("W_stab", w.W_stab);
  w.W_env = f.number("W_env", w.W_env);
  w.W_slip = f.number("W_slip", w.W_slip);
  w.delta_max = f.number("delta_max", w.delta_max);
  w.slew_rate_max = f.number("slew_rate_max", w.slew_rate_max);
  w.support_fraction = f.number("support_fraction", w.support_fraction);
  return w;
}

json weights_to_json(const Weights& w) {
  const Eigen::Vector4d d = w.Q.diagonal();
  return {{"Q_diag", {d(0), d(1), d(2), d(3)}},
          {"R", w.R},
          {"W_stab", w.W_stab},
          {"W_env", w.W_env},
          {"W_slip", w.W_slip},
          {"delta_max", w.delta_max},
          {"slew_rate_max", w.slew_rate_max},
          {"support_fraction", w.support_fraction}};
}

ControllerConfig controller_from_json(const Fields& f) {
  ControllerConfig c;
  try {
    c.kind = controller_kind_from_string(f.string("kind"));
  } catch (const Error& e) {
    Fields::fail(f.path("kind"), e.what());
  }
  c.nominal_mu = f.number("nominal_mu");
  c.contingency_mu = f.number("contingency_mu");
  c.max_failures = f.integer("max_failures", c.max_failures);
  c.warm_start = f.boolean("warm_start", c.warm_start);
  if (f.has("horizon")) {
    const Fields h = f.object("horizon");
    c.horizon.n_short = h.integer("n_short", c.horizon.n_short);
    c.horizon.dt_short = h.number("dt_short", c.horizon.dt_short);
    c.horizon.n_long = h.integer("n_long", c.horizon.n_long);
    c.horizon.dt_long = h.number("dt_long", c.horizon.dt_long);
  }
  if (f.has("weights")) c.weights = weights_from_json(f.object("weights"));
  if (f.has("qp")) {
    const Fields q = f.object("qp");
    c.qp.tol = q.number("tol", c.qp.tol);
    c.qp.acceptable_tol = q.number("acceptable_tol", c.qp.acceptable_tol);
    c.qp.max_iterations = q.integer("max_iterations", c.qp.max_iterations);
  }
  return c;
}

json controller_to_json(const ControllerConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"nominal_mu", c.nominal_mu},
          {"contingency_mu", c.contingency_mu},
          {"max_failures", c.max_failures},
          {"warm_start", c.warm_start},
          {"horizon",
           {{"n_short", c.horizon.n_short},
            {"dt_short", c.horizon.dt_short},
            {"n_long", c.horizon.n_long},
            {"dt_long", c.horizon.dt_long}}},
          {"weights", weights_to_json(c.weights)},
          {"qp",
           {{"tol", c.qp.tol}, {"acceptable_tol", c.qp.acceptable_tol}, {"max_iterations", c.qp.max_iterations}}}};
}

}  // namespace

Scenario::Scenario()
    : vehicle(make_vehicle_params(1500.0, 2250.0, 1.04, 1.42, 9.81, 80000.0, 80000.0, 0.25, 0.25)) {
  initial.Ux = 5.0;
}

Path PathSpec::build() const {
  switch (kind) {
    case Kind::LeftTurn: return build_left_turn_scenario(radius, entry_length, exit_length, half_width);
    case Kind::Straight:
      if (!(length > 0 && half_width > 0)) throw Error(ErrorCode::InvalidGeometry, "straight road needs length, width > 0");
      return Path({{0.0, 0.0, -half_width, half_width}, {length, 0.0, -half_width, half_width}});
    case Kind::Samples: return Path(samples);
  }
  throw Error(ErrorCode::InvalidGeometry, "unknown path kind");
}

void Scenario::validate() const {
  if (!(duration > 0)) throw Error(ErrorCode::InvalidParameter, "duration must be positive");
  if (!(speed_gain >= 0)) throw Error(ErrorCode::InvalidParameter, "speed gain must be non-negative");
  if (!(jitter_e >= 0 && jitter_dpsi >= 0)) throw Error(ErrorCode::InvalidParameter, "jitter must be non-negative");
  if (!(initial.Ux >= vehicle.ux_min)) throw Error(ErrorCode::UxTooSmall, "initial Ux below ux_min");
  if (!(controller.nominal_mu > 0 && controller.contingency_mu > 0)) {
    throw Error(ErrorCode::InvalidParameter, "controller friction values must be positive");
  }
  controller.horizon.validate();
  controller.weights.validate();
  path.build();
  speed_profile();
}

VehicleParams vehicle_from_json(const json& doc) {
  const Fields f(doc, "");
  if (f.has("schema_version")) check_schema(f);
  return vehicle_from_fields(f);
}

json vehicle_to_json(const VehicleParams& p) {
  return {{"m", p.m},
          {"Iz", p.Iz},
          {"a", p.a},
          {"b", p.b},
          {"g", p.g},
          {"C_front", p.front_tire.C},
          {"C_rear", p.rear_tire.C},
          {"mu_front", p.front_tire.mu},
          {"mu_rear", p.rear_tire.mu},
          {"ux_min", p.ux_min}};
}

Scenario scenario_from_json(const json& doc, const std::filesystem::path& base_dir) {
  const Fields f(doc, "");
  check_schema(f);
  Scenario s;
  s.name = f.string("name", "scenario");
  s.path = path_from_json(f.object("path"));

  const Fields fr = f.object("friction");
  std::vector<FrictionZone> zones;
  if (fr.has("zones")) {
    const json& zs = fr.array("zones");
    for (std::size_t i = 0; i < zs.size(); ++i) {
      const Fields z(zs[i], element(fr.path("zones"), i));
      zones.push_back({z.number("s_start"), z.number("s_end"), z.number("mu")});
    }
  }
  s.friction = FrictionMap(fr.number("default_mu"), zones);

  if (f.has("speed")) {
    const Fields sp = f.object("speed");
    const json& prof = sp.array("profile");
    s.speed.clear();
    for (std::size_t i = 0; i < prof.size(); ++i) {
      const Fields p(prof[i], element(sp.path("profile"), i));
      s.speed.push_back({p.number("s"), p.number("Ux")});
    }
    s.speed_gain = sp.number("gain", s.speed_gain);
  }

  const json& veh = f.at("vehicle");
  if (veh.is_string()) {
    const std::filesystem::path file = base_dir / veh.get<std::string>();
    const json vdoc = read_json_file(file);
    const Fields vf(vdoc, file.filename().string());
    check_schema(vf);
    s.vehicle = vehicle_from_fields(vf);
  } else {
    s.vehicle = vehicle_from_fields(f.object("vehicle"));
  }

  s.controller = controller_from_json(f.object("controller"));

  if (f.has("initial_state")) {
    const Fields x = f.object("initial_state");
    s.initial = {x.number("s", 0.0), x.number("e", 0.0), x.number("dpsi", 0.0),
                 x.number("Ux"),     x.number("Uy", 0.0), x.number("r", 0.0)};
  } else {
    s.initial.Ux = s.speed.front().Ux;
  }
  s.duration = f.number("duration");
  s.seed = f.unsigned_integer("seed", 0);
  if (f.has("jitter")) {
    const Fields j = f.object("jitter");
    s.jitter_e = j.number("e", 0.0);
    s.jitter_dpsi = j.number("dpsi", 0.0);
  }
  s.validate();
  return s;
}

json scenario_to_json(const Scenario& s) {
  json zones = json::array();
  for (const auto& z : s.friction.zones()) zones.push_back({{"s_start", z.s_start}, {"s_end", z.s_end}, {"mu", z.mu}});
  json profile = json::array();
  for (const auto& p : s.speed) profile.push_back({{"s", p.s}, {"Ux", p.Ux}});
  const VehicleState& x = s.initial;
  return {{"schema_version", kSchemaVersion},
          {"name", s.name},
          {"path", path_to_json(s.path)},
          {"friction", {{"default_mu", s.friction.default_mu()}, {"zones", zones}}},
          {"speed", {{"profile", profile}, {"gain", s.speed_gain}}},
          {"vehicle", vehicle_to_json(s.vehicle)},
          {"controller", controller_to_json(s.controller)},
          {"initial_state", {{"s", x.s}, {"e", x.e}, {"dpsi", x.dpsi}, {"Ux", x.Ux}, {"Uy", x.Uy}, {"r", x.r}}},
          {"duration", s.duration},
          {"seed", s.seed},
          {"jitter", {{"e", s.jitter_e}, {"dpsi", s.jitter_dpsi}}}};
}

Scenario load_scenario(const std::filesystem::path& file) {
  const json doc = read_json_file(file);
  Scenario s = scenario_from_json(doc, file.parent_path());
  if (!doc.contains("name")) s.name = file.stem().string();
  return s;
}

}  // namespace cmpc
