#pragma once

// Scenario files: YAML with a closed key set. Needs yaml-cpp.

#include <sempc/core.hpp>
#include <sempc/costs.hpp>
#include <sempc/geometry.hpp>
#include <sempc/mpc.hpp>
#include <sempc/noise.hpp>
#include <sempc/systems.hpp>
#include <sempc/tube.hpp>

#include <yaml-cpp/yaml.h>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace sempc {

/// Parse or validation failure with the source position when known.
class ScenarioError : public Error {
 public:
  ScenarioError(const std::string& source, int line, int column, const std::string& msg)
      : Error(source + (line >= 0 ? ":" + std::to_string(line + 1) + ":" + std::to_string(column + 1) : "") + ": " +
              msg),
        line_(line) {}
  /// Zero-based line, -1 when the error is not tied to a position.
  [[nodiscard]] int line() const { return line_; }

 private:
  int line_;
};

struct PlantSpec {
  std::string kind;  // linear | tanh | unicycle | quadrotor
  Matrix a;
  Matrix b;
  double beta = 0.0;
  UnicycleParams unicycle;
  QuadrotorParams quadrotor;
  Box input_set;
  std::optional<double> lipschitz;  // overrides the plant's own value
};

struct NoiseSpec {
  std::string kind = "gaussian";
  double value = 0.0;
  /// How `value` is read for the gaussian kind: "variance" or "std".
  std::string parameter = "variance";
  [[nodiscard]] double sigma() const { return kind == "gaussian" && parameter == "variance" ? std::sqrt(value) : value; }
  [[nodiscard]] NoiseModel model() const {
    if (kind == "zero") return NoiseModel::zero();
    if (kind == "gaussian") return NoiseModel::gaussian(sigma());
    if (kind == "uniform_ball") return NoiseModel::uniform_ball(value);
    return NoiseModel::bounded_sphere(value);
  }
};

struct CostSpec {
  std::string kind = "l1";  // l1 | quadratic
  double a = 1.0;
  double b = 0.1;
  Matrix q, r, qf;
};

struct Scenario {
  std::string name;
  std::string source;
  std::string text;  // raw file contents, hashed for provenance
  PlantSpec plant;
  NoiseSpec noise;
  SafeSet safe_set;
  // tube
  double delta = 1e-3;
  double epsilon = 0.7;
  int delta_t = 1;
  bool optimize_tube = false;
  // mpc
  int window = 20;
  TerminalSet terminal_set;
  CostSpec costs;
  SolverConfig solver;
  bool enforce_safety = true;
  // run
  int horizon = 30;
  std::optional<int> full_horizon;
  Vector initial_state;
  std::size_t runs = 1000;
  std::uint64_t seed = 1;
  int parallelism = 1;
  std::size_t subsample_traces = 20;
  bool stabilizer_baseline = true;
  int certify_samples = 2000;
  /// Dotted paths of keys that were not present and took their default.
  std::vector<std::string> defaulted;

  [[nodiscard]] Plant make_plant() const {
    Plant p = [&]() {
      if (plant.kind == "linear") return make_linear_plant(plant.a, plant.b, plant.input_set);
      if (plant.kind == "tanh") return make_tanh_plant(plant.a, plant.beta, plant.b, plant.input_set);
      if (plant.kind == "unicycle") {
        UnicycleParams u = plant.unicycle;
        u.input_set = plant.input_set;
        return make_unicycle(u);
      }
      QuadrotorParams q = plant.quadrotor;
      q.input_set = plant.input_set;
      return make_quadrotor(q);
    }();
    if (plant.lipschitz) p.with_lipschitz(*plant.lipschitz, false);
    return p;
  }

  [[nodiscard]] TubeParams tube_params(int t_final, const Plant& p) const {
    TubeParams tp;
    tp.sigma = noise.model().variance_proxy();
    tp.lipschitz = p.lipschitz();
    tp.state_dim = p.state_dim();
    tp.delta = delta;
    tp.horizon = t_final;
    tp.epsilon = epsilon;
    tp.delta_t = delta_t;
    return optimize_tube ? optimize_tube_params(tp) : tp;
  }

  [[nodiscard]] CostModel cost_model() const {
    const int n = plant.kind == "linear" || plant.kind == "tanh" ? static_cast<int>(plant.a.rows())
                  : plant.kind == "unicycle"                      ? 3
                                                                  : 6;
    if (costs.kind == "l1") return l1_cost(costs.a, costs.b, n);
    return quadratic_cost(costs.q, costs.r, costs.qf);
  }

  [[nodiscard]] MpcConfig mpc_config(const Plant& p) const {
    MpcConfig c;
    c.window = window;
    c.terminal_set = terminal_set;
    c.terminal_controller = zero_input_controller(p.input_dim());
    c.costs = cost_model();
    c.solver = solver;
    c.enforce_safety = enforce_safety;
    return c;
  }
};

namespace detail {

/// Mapping reader that records consumed keys and rejects unknown ones.
class Reader {
 public:
  Reader(YAML::Node node, std::string path, const std::string& source, std::vector<std::string>* defaulted)
      : node_(std::move(node)), path_(std::move(path)), source_(source), defaulted_(defaulted) {
    if (!node_.IsMap()) fail(node_, "expected a mapping");
  }

  [[noreturn]] void fail(const YAML::Node& at, const std::string& msg) const {
    const auto m = at.Mark();
    throw ScenarioError(source_, m.line, m.column, (path_.empty() ? "" : path_ + ": ") + msg);
  }

  [[nodiscard]] bool has(const std::string& key) {
    seen_.insert(key);
    return static_cast<bool>(node_[key]);
  }

  [[nodiscard]] YAML::Node get(const std::string& key) {
    seen_.insert(key);
    YAML::Node n = node_[key];
    if (!n) fail(node_, "missing required key '" + key + "'");
    return n;
  }

  template <typename T>
  T scalar(const std::string& key) {
    return as<T>(get(key), key);
  }

  template <typename T>
  T scalar_or(const std::string& key, T fallback) {
    seen_.insert(key);
    YAML::Node n = node_[key];
    if (!n) {
      if (defaulted_) defaulted_->push_back(dotted(key));
      return fallback;
    }
    return as<T>(n, key);
  }

  template <typename T>
  T as(const YAML::Node& n, const std::string& key) const {
    if (!n.IsScalar()) fail(n, "'" + key + "' must be a scalar");
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      fail(n, "'" + key + "' has an invalid value '" + n.Scalar() + "'");
    }
  }

  [[nodiscard]] Vector vector(const YAML::Node& n, const std::string& key) const {
    if (!n.IsSequence()) fail(n, "'" + key + "' must be a list of numbers");
    Vector v(static_cast<Eigen::Index>(n.size()));
    for (std::size_t i = 0; i < n.size(); ++i) v[static_cast<Eigen::Index>(i)] = as<double>(n[i], key);
    return v;
  }

  [[nodiscard]] Vector vector(const std::string& key) { return vector(get(key), key); }

  /// A matrix as a list of rows, or {diag: [...]} for a diagonal matrix.
  [[nodiscard]] Matrix matrix(const std::string& key) {
    YAML::Node n = get(key);
    if (n.IsMap()) {
      Reader sub(n, dotted(key), source_, nullptr);
      Vector d = sub.vector("diag");
      sub.finish();
      return d.asDiagonal();
    }
    if (!n.IsSequence() || n.size() == 0) fail(n, "'" + key + "' must be a list of rows or {diag: [...]}");
    const std::size_t cols = n[0].IsSequence() ? n[0].size() : 0;
    Matrix m(static_cast<Eigen::Index>(n.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < n.size(); ++i) {
      if (!n[i].IsSequence() || n[i].size() != cols) fail(n[i], "'" + key + "' rows must have equal length");
      for (std::size_t j = 0; j < cols; ++j)
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = as<double>(n[i][j], key);
    }
    return m;
  }

  [[nodiscard]] Reader child(const std::string& key) { return Reader(get(key), dotted(key), source_, defaulted_); }

  [[nodiscard]] std::optional<Reader> child_if(const std::string& key) {
    if (!has(key)) {
      if (defaulted_) defaulted_->push_back(dotted(key));
      return std::nullopt;
    }
    return child(key);
  }

  /// Rejects keys that were never asked for.
  void finish() const {
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) fail(kv.first, "unknown key '" + key + "'");
    }
  }

  [[nodiscard]] std::string dotted(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  [[nodiscard]] const YAML::Node& node() const { return node_; }
  [[nodiscard]] const std::string& source() const { return source_; }

 private:
  YAML::Node node_;
  std::string path_;
  const std::string& source_;
  std::vector<std::string>* defaulted_;
  std::set<std::string> seen_;
};

inline void one_of(Reader& r, const YAML::Node& at, const std::string& value, const std::set<std::string>& allowed,
                   const std::string& what) {
  if (!allowed.count(value)) {
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    r.fail(at, what + " must be one of {" + list + "}, got '" + value + "'");
  }
}

inline Obstacle read_obstacle(Reader& r) {
  Obstacle o;
  std::array<int, 2> dims{0, 1};
  if (r.has("dims")) {
    const Vector d = r.vector("dims");
    if (d.size() != 2) r.fail(r.get("dims"), "'dims' must have two entries");
    dims = {static_cast<int>(d[0]), static_cast<int>(d[1])};
  }
  if (r.has("disk")) {
    auto d = r.child("disk");
    const Vector c = d.vector("center");
    if (c.size() != 2) d.fail(d.get("center"), "'center' must have two entries");
    o = make_disk(c[0], c[1], d.scalar<double>("radius"), dims);
    d.finish();
  } else if (r.has("rect")) {
    auto d = r.child("rect");
    const Vector lo = d.vector("lower");
    const Vector hi = d.vector("upper");
    if (lo.size() != 2 || hi.size() != 2) d.fail(d.node(), "'lower' and 'upper' must have two entries");
    o = make_rect(lo[0], lo[1], hi[0], hi[1], dims);
    d.finish();
  } else {
    r.fail(r.node(), "obstacle needs a 'disk' or 'rect' entry");
  }
  r.finish();
  return o;
}

}  // namespace detail

/// Parses and fully validates a scenario document.
inline Scenario parse_scenario(const std::string& text, const std::string& source = "<scenario>") {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ScenarioError(source, e.mark.line, e.mark.column, e.msg);
  }
  if (!root || root.IsNull()) throw ScenarioError(source, -1, -1, "empty scenario");
  Scenario s;
  s.source = source;
  s.text = text;
  detail::Reader top(root, "", source, &s.defaulted);
  s.name = top.scalar<std::string>("name");

  // plant
  {
    auto p = top.child("plant");
    const YAML::Node kind_node = p.get("kind");
    s.plant.kind = p.as<std::string>(kind_node, "kind");
    detail::one_of(p, kind_node, s.plant.kind, {"linear", "tanh", "unicycle", "quadrotor"}, "plant.kind");
    const int input_dim = [&]() -> int {
      if (s.plant.kind == "unicycle" || s.plant.kind == "quadrotor") return 2;
      s.plant.a = p.matrix("A");
      s.plant.b = p.matrix("B");
      if (s.plant.a.rows() != s.plant.a.cols()) p.fail(p.get("A"), "'A' must be square");
      if (s.plant.b.rows() != s.plant.a.rows()) p.fail(p.get("B"), "'B' must have as many rows as 'A'");
      if (s.plant.kind == "tanh") s.plant.beta = p.scalar<double>("beta");
      return static_cast<int>(s.plant.b.cols());
    }();
    const double bound = p.scalar_or<double>("input_bound", s.plant.kind == "quadrotor" ? 3.0 : 2.0);
    if (!(bound > 0.0)) p.fail(p.node(), "'input_bound' must be positive");
    s.plant.input_set = Box::symmetric(input_dim, bound);
    if (p.has("lipschitz")) s.plant.lipschitz = p.scalar<double>("lipschitz");
    if (s.plant.kind == "unicycle") {
      auto& u = s.plant.unicycle;
      u.step_size = p.scalar_or<double>("step_size", 0.1);
      u.stabilizer.k_rho = p.scalar_or<double>("k_rho", 1.0);
      u.stabilizer.k_alpha = p.scalar_or<double>("k_alpha", 3.0);
      if (!s.plant.lipschitz) s.defaulted.push_back("plant.lipschitz");
    } else if (s.plant.kind == "quadrotor") {
      auto& q = s.plant.quadrotor;
      q.step_size = p.scalar_or<double>("step_size", 0.001);
      q.gravity = p.scalar_or<double>("gravity", 9.8);
      q.arm_length = p.scalar_or<double>("arm_length", 0.25);
      q.inertia = p.scalar_or<double>("inertia", 0.035);
      q.mass = p.scalar_or<double>("mass", 0.141);
      q.gain = p.matrix("gain");
      if (q.gain.rows() != 2 || q.gain.cols() != 6) p.fail(p.get("gain"), "'gain' must be 2x6");
      if (!s.plant.lipschitz) s.defaulted.push_back("plant.lipschitz");
    }
    p.finish();
  }

  // noise
  {
    auto n = top.child("noise");
    const YAML::Node kind_node = n.get("kind");
    s.noise.kind = n.as<std::string>(kind_node, "kind");
    detail::one_of(n, kind_node, s.noise.kind, {"zero", "gaussian", "uniform_ball", "bounded_sphere"}, "noise.kind");
    s.noise.value = s.noise.kind == "zero" ? n.scalar_or<double>("value", 0.0) : n.scalar<double>("value");
    if (!(std::isfinite(s.noise.value) && s.noise.value >= 0.0)) n.fail(n.get("value"), "'value' must be >= 0");
    if (s.noise.kind == "gaussian") {
      s.noise.parameter = n.scalar_or<std::string>("parameter", "variance");
      if (n.has("parameter"))
        detail::one_of(n, n.get("parameter"), s.noise.parameter, {"variance", "std"}, "noise.parameter");
    }
    n.finish();
  }

  // safe set
  if (auto ss = top.child_if("safe_set")) {
    if (ss->has("obstacles")) {
      const YAML::Node list = ss->get("obstacles");
      if (!list.IsSequence()) ss->fail(list, "'obstacles' must be a list");
      for (std::size_t i = 0; i < list.size(); ++i) {
        detail::Reader o(list[i], "safe_set.obstacles[" + std::to_string(i) + "]", source, nullptr);
        s.safe_set.obstacles.push_back(detail::read_obstacle(o));
      }
    }
    if (auto w = ss->child_if("workspace")) {
      const Vector lo = w->vector("lower");
      const Vector hi = w->vector("upper");
      if (lo.size() != 2 || hi.size() != 2) w->fail(w->node(), "'lower' and 'upper' must have two entries");
      SafeSet::Workspace ws;
      ws.box = Rect{Point2(lo[0], lo[1]), Point2(hi[0], hi[1])};
      if (w->has("dims")) {
        const Vector d = w->vector("dims");
        if (d.size() != 2) w->fail(w->get("dims"), "'dims' must have two entries");
        ws.dims = {static_cast<int>(d[0]), static_cast<int>(d[1])};
      }
      s.safe_set.workspace = ws;
      w->finish();
    }
    ss->finish();
  }

  // tube
  if (auto t = top.child_if("tube")) {
    s.delta = t->scalar_or<double>("delta", 1e-3);
    if (t->has("epsilon") && t->as<std::string>(t->get("epsilon"), "epsilon") == "optimize") {
      s.optimize_tube = true;
    } else {
      s.epsilon = t->scalar_or<double>("epsilon", 0.7);
    }
    s.delta_t = t->scalar_or<int>("delta_t", 1);
    t->finish();
  } else {
    s.defaulted.insert(s.defaulted.end(), {"tube.delta", "tube.epsilon", "tube.delta_t"});
  }

  // mpc
  {
    auto m = top.child("mpc");
    s.window = m.scalar_or<int>("window", 20);
    s.enforce_safety = m.scalar_or<bool>("enforce_safety", true);
    {
      auto ts = m.child("terminal_set");
      s.terminal_set.radius = ts.scalar<double>("radius");
      if (ts.has("dims")) {
        const Vector d = ts.vector("dims");
        for (Eigen::Index i = 0; i < d.size(); ++i) s.terminal_set.dims.push_back(static_cast<int>(d[i]));
      }
      if (ts.has("center")) {
        s.terminal_set.center = ts.vector("center");
      }
      if (ts.has("weight")) s.terminal_set.weight = ts.matrix("weight");
      ts.finish();
    }
    if (auto c = m.child_if("costs")) {
      const YAML::Node kind_node = c->get("kind");
      s.costs.kind = c->as<std::string>(kind_node, "kind");
      detail::one_of(*c, kind_node, s.costs.kind, {"l1", "quadratic"}, "mpc.costs.kind");
      if (s.costs.kind == "l1") {
        s.costs.a = c->scalar_or<double>("a", 1.0);
        s.costs.b = c->scalar_or<double>("b", 0.1);
      } else {
        s.costs.q = c->matrix("Q");
        s.costs.r = c->matrix("R");
        s.costs.qf = c->matrix("Qf");
      }
      c->finish();
    } else {
      s.defaulted.insert(s.defaulted.end(), {"mpc.costs.kind", "mpc.costs.a", "mpc.costs.b"});
    }
    if (auto sv = m.child_if("solver")) {
      auto& so = s.solver;
      so.max_iterations = sv->scalar_or<int>("max_iterations", so.max_iterations);
      so.penalty_weight = sv->scalar_or<double>("penalty_weight", so.penalty_weight);
      so.penalty_growth = sv->scalar_or<double>("penalty_growth", so.penalty_growth);
      so.max_penalty_updates = sv->scalar_or<int>("max_penalty_updates", so.max_penalty_updates);
      so.armijo = sv->scalar_or<double>("armijo", so.armijo);
      so.backtrack = sv->scalar_or<double>("backtrack", so.backtrack);
      so.max_backtracks = sv->scalar_or<int>("max_backtracks", so.max_backtracks);
      so.fd_step = sv->scalar_or<double>("fd_step", so.fd_step);
      so.convergence_tol = sv->scalar_or<double>("convergence_tol", so.convergence_tol);
      so.restoration = sv->scalar_or<bool>("restoration", so.restoration);
      so.constraint_buffer = sv->scalar_or<double>("constraint_buffer", so.constraint_buffer);
      const auto mode = sv->scalar_or<std::string>("gradient_mode", "analytic_if_available");
      if (sv->has("gradient_mode"))
        detail::one_of(*sv, sv->get("gradient_mode"), mode, {"analytic_if_available", "finite_difference"},
                       "mpc.solver.gradient_mode");
      so.gradient_mode =
          mode == "finite_difference" ? GradientMode::finite_difference : GradientMode::analytic_if_available;
      sv->finish();
    }
    m.finish();
  }

  // run
  s.horizon = top.scalar<int>("horizon");
  if (top.has("full_horizon")) s.full_horizon = top.scalar<int>("full_horizon");
  s.initial_state = top.vector("initial_state");
  if (auto mc = top.child_if("monte_carlo")) {
    s.runs = mc->scalar_or<std::size_t>("runs", 1000);
    s.seed = mc->scalar_or<std::uint64_t>("seed", 1);
    s.parallelism = mc->scalar_or<int>("parallelism", 1);
    s.subsample_traces = mc->scalar_or<std::size_t>("subsample_traces", 20);
    s.certify_samples = mc->scalar_or<int>("certify_samples", 2000);
    mc->finish();
  } else {
    s.defaulted.insert(s.defaulted.end(), {"monte_carlo.runs", "monte_carlo.seed", "monte_carlo.parallelism",
                                           "monte_carlo.subsample_traces", "monte_carlo.certify_samples"});
  }
  s.stabilizer_baseline = top.scalar_or<bool>("stabilizer_baseline", true);
  top.finish();

  // cross-field validation
  auto invalid = [&](const std::string& msg) { throw ScenarioError(source, -1, -1, msg); };
  Plant plant = [&]() {
    try {
      return s.make_plant();
    } catch (const Error& e) {
      invalid(e.what());
    }
    throw;  // unreachable
  }();
  const int n = plant.state_dim();
  if (s.initial_state.size() != n)
    invalid("initial_state has " + std::to_string(s.initial_state.size()) + " entries, the plant state has " +
            std::to_string(n));
  if (s.terminal_set.center.size() == 0) {
    s.terminal_set.center = Vector::Zero(static_cast<Eigen::Index>(s.terminal_set.active_dims(n).size()));
    s.defaulted.push_back("mpc.terminal_set.center");
  }
  if (s.horizon < 1) invalid("horizon must be >= 1");
  if (s.full_horizon && *s.full_horizon < 1) invalid("full_horizon must be >= 1");
  if (s.runs < 1) invalid("monte_carlo.runs must be >= 1");
  if (s.parallelism < 1) invalid("monte_carlo.parallelism must be >= 1");
  if (s.certify_samples < 1) invalid("monte_carlo.certify_samples must be >= 1");
  if (s.costs.kind == "quadratic") {
    if (s.costs.q.rows() != n || s.costs.q.cols() != n || s.costs.qf.rows() != n || s.costs.qf.cols() != n)
      invalid("mpc.costs Q and Qf must be " + std::to_string(n) + "x" + std::to_string(n));
    if (s.costs.r.rows() != plant.input_dim() || s.costs.r.cols() != plant.input_dim())
      invalid("mpc.costs R must match the input dimension");
  }
  try {
    s.safe_set.validate(n);
    s.mpc_config(plant).validate(plant);
    TubeParams tp = s.tube_params(s.horizon, plant);
    tp.validate();
  } catch (const ScenarioError&) {
    throw;
  } catch (const Error& e) {
    invalid(e.what());
  }
  return s;
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError(path, -1, -1, "cannot open file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str(), path);
}

/// FNV-1a 64-bit hash of the scenario text, as 16 hex digits.
inline std::string scenario_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace sempc
