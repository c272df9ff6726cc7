#include "tsenkf/experiments.hpp"

#include "tsenkf/stepper.hpp"

#include <json.hpp>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <utility>

namespace tsenkf {

namespace {

constexpr double kTimeTol = 1e-9;
constexpr double kZ95 = 1.959963984540054;
constexpr double kInf = std::numeric_limits<double>::infinity();

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string join17(const double* v, int n) {
  std::string s;
  for (int i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += fmt17(v[i]);
  }
  return s;
}

Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  if (text.find('-') != std::string::npos)
    throw std::invalid_argument(key + ": expected a nonnegative integer, got '" +
                                text + "'");
  errno = 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
  if (end == text.c_str() || *end != '\0' || errno == ERANGE)
    throw std::invalid_argument(key + ": expected a nonnegative integer, got '" +
                                text + "'");
  return v;
}

bool aligned(double t, double dt) {
  return std::abs(t - std::llround(t / dt) * dt) <= kTimeTol;
}

// Reference interface curves before the arctan squash; the physical curves
// are squash(raw), the same map applied to ensemble members.
Vec channel_truth_curve(int which, const Vec& x) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i)
    g[i] = which == 1 ? 0.7 + 0.1 * std::sin(3.0 * M_PI * x[i])
                      : 0.4 + 0.2 * std::sin(2.0 * M_PI * x[i] + 0.1);
  return ChannelModel::squash(g);
}

SpMat sparse_of(const Mat& A) {
  std::vector<Triplet> tr;
  for (Eigen::Index j = 0; j < A.cols(); ++j)
    for (Eigen::Index i = 0; i < A.rows(); ++i)
      if (A(i, j) != 0.0) tr.emplace_back(i, j, A(i, j));
  SpMat S(A.rows(), A.cols());
  S.setFromTriplets(tr.begin(), tr.end());
  return S;
}

} // namespace

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Channel: return "channel";
    case ExperimentKind::Source: return "source";
    case ExperimentKind::Hierarchical: return "hierarchical";
  }
  return "?";
}

std::string to_string(RunMethod method) {
  switch (method) {
    case RunMethod::Standard: return "standard";
    case RunMethod::TwoStage: return "two-stage";
    case RunMethod::NsTwoStage: return "ns-two-stage";
    case RunMethod::Smoother: return "smoother";
  }
  return "?";
}

RunMethod run_method_from_string(const std::string& name) {
  if (name == "standard") return RunMethod::Standard;
  if (name == "two-stage") return RunMethod::TwoStage;
  if (name == "ns-two-stage") return RunMethod::NsTwoStage;
  if (name == "smoother") return RunMethod::Smoother;
  throw std::invalid_argument(
      "unknown run method '" + name +
      "' (expected standard, two-stage, ns-two-stage, or smoother)");
}

std::vector<std::pair<double, double>> SensorLayout::points() const {
  std::vector<std::pair<double, double>> pts;
  pts.reserve(static_cast<size_t>(nx) * ny);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const double x = nx == 1 ? xlo : xlo + (xhi - xlo) * i / (nx - 1);
      const double y = ny == 1 ? ylo : ylo + (yhi - ylo) * j / (ny - 1);
      pts.emplace_back(x, y);
    }
  return pts;
}

int ObsSchedule::instants_per_step() const {
  if (!(spacing > 0.0) || stop < start) return 0;
  return static_cast<int>(std::floor((stop - start) / spacing + kTimeTol)) + 1;
}

std::vector<double> ObsSchedule::step_times(int step) const {
  std::vector<double> t(instants_per_step());
  for (size_t j = 0; j < t.size(); ++j)
    t[j] = start + stride * step + spacing * static_cast<double>(j);
  return t;
}

int ExperimentConfig::dim() const {
  switch (kind) {
    case ExperimentKind::Channel: return 3 + 2 * curve_modes;
    case ExperimentKind::Source: return 1 + 2 * n_pulses();
    case ExperimentKind::Hierarchical: return field_modes;
  }
  return 0;
}

ExperimentConfig ExperimentConfig::from_config(Config& raw) {
  ExperimentConfig cfg;
  std::vector<std::string> errors;
  auto grab = [&errors](auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      errors.emplace_back(e.what());
    }
  };

  grab([&] {
    const std::string k = raw.get_string("experiment.kind");
    if (k == "channel") cfg.kind = ExperimentKind::Channel;
    else if (k == "source") cfg.kind = ExperimentKind::Source;
    else if (k == "hierarchical") cfg.kind = ExperimentKind::Hierarchical;
    else
      throw std::invalid_argument(
          "experiment.kind: expected channel, source, or hierarchical, got '" +
          k + "'");
  });
  grab([&] {
    cfg.seed = parse_u64("experiment.seed", raw.get_string("experiment.seed", "1"));
  });
  grab([&] {
    cfg.truth_seed =
        parse_u64("experiment.truth_seed", raw.get_string("experiment.truth_seed", "0"));
  });
  grab([&] { cfg.stage.threads = raw.get_int("experiment.threads", 1); });
  grab([&] { cfg.fine_n = raw.get_int("experiment.fine_n", cfg.fine_n); });
  grab([&] { cfg.coarse_n = raw.get_int("experiment.coarse_n", cfg.coarse_n); });
  grab([&] { cfg.T = raw.get_double("experiment.T", cfg.T); });
  grab([&] { cfg.dt_truth = raw.get_double("experiment.dt_truth", cfg.dt_truth); });
  grab([&] { cfg.dt_assim = raw.get_double("experiment.dt_assim", cfg.dt_assim); });
  grab([&] { cfg.gamma = raw.get_double("experiment.gamma", cfg.gamma); });
  grab([&] { cfg.f_const = raw.get_double("experiment.f_const", cfg.f_const); });
  grab([&] { cfg.sigma = raw.get_double("experiment.sigma", cfg.sigma); });
  grab([&] {
    cfg.snap_n_theta = raw.get_int("experiment.snap_n_theta", cfg.snap_n_theta);
  });
  grab([&] { cfg.m_snap = raw.get_int("experiment.m_snap", cfg.m_snap); });

  grab([&] { cfg.sensors.nx = raw.get_int("sensors.nx", cfg.sensors.nx); });
  grab([&] { cfg.sensors.ny = raw.get_int("sensors.ny", cfg.sensors.ny); });
  grab([&] { cfg.sensors.xlo = raw.get_double("sensors.xlo", cfg.sensors.xlo); });
  grab([&] { cfg.sensors.xhi = raw.get_double("sensors.xhi", cfg.sensors.xhi); });
  grab([&] { cfg.sensors.ylo = raw.get_double("sensors.ylo", cfg.sensors.ylo); });
  grab([&] { cfg.sensors.yhi = raw.get_double("sensors.yhi", cfg.sensors.yhi); });

  grab([&] { cfg.schedule.start = raw.get_double("schedule.start", cfg.schedule.start); });
  grab([&] { cfg.schedule.stop = raw.get_double("schedule.stop", cfg.schedule.stop); });
  grab([&] {
    cfg.schedule.spacing = raw.get_double("schedule.spacing", cfg.schedule.spacing);
  });
  grab([&] { cfg.schedule.stride = raw.get_double("schedule.stride", cfg.schedule.stride); });

  grab([&] { cfg.stage.n1 = raw.get_int("stage.n1", 500); });
  grab([&] { cfg.stage.n2 = raw.get_int("stage.n2", 2000); });
  grab([&] { cfg.stage.M1 = raw.get_int("stage.M1", 4); });
  grab([&] { cfg.stage.M2 = raw.get_int("stage.M2", 8); });
  grab([&] { cfg.stage.I1 = raw.get_int("stage.I1", 3); });
  grab([&] { cfg.stage.I2 = raw.get_int("stage.I2", 9); });
  grab([&] { cfg.stage.N0 = raw.get_int("stage.N0", 2); });
  grab([&] {
    const std::string f = raw.get_string("stage.flavor", "plain");
    if (f == "plain") cfg.stage.flavor = FilterFlavor::Plain;
    else if (f == "normal-score") cfg.stage.flavor = FilterFlavor::NormalScore;
    else
      throw std::invalid_argument(
          "stage.flavor: expected plain or normal-score, got '" + f + "'");
  });
  grab([&] {
    const std::string b = raw.get_string("stage.new_prior", "enkf");
    if (b == "enkf") cfg.stage.new_prior_builder = NewPriorBuilder::EnKF;
    else if (b == "es") cfg.stage.new_prior_builder = NewPriorBuilder::ES;
    else
      throw std::invalid_argument("stage.new_prior: expected enkf or es, got '" +
                                  b + "'");
  });
  grab([&] {
    const std::string s = raw.get_string("stage.start", "after-stage-one");
    if (s == "after-stage-one")
      cfg.stage.stage_two_start = StageTwoStart::AfterStageOne;
    else if (s == "from-first-step")
      cfg.stage.stage_two_start = StageTwoStart::FromFirstStep;
    else
      throw std::invalid_argument(
          "stage.start: expected after-stage-one or from-first-step, got '" + s +
          "'");
  });
  grab([&] {
    const std::string n = raw.get_string("stage.noise", "known");
    if (n == "known")
      cfg.stage.noise = NoiseModel::known(raw.get_double("stage.noise_sigma2", 1e-4));
    else if (n == "hyper")
      cfg.stage.noise = NoiseModel::hyper(raw.get_double("stage.noise_n_s", 0.05));
    else
      throw std::invalid_argument("stage.noise: expected known or hyper, got '" +
                                  n + "'");
  });
  grab([&] { cfg.stage.l1_alpha = raw.get_double("stage.l1_alpha", 1e-8); });
  grab([&] { cfg.stage.use_surrogate = raw.get_bool("stage.use_surrogate", true); });
  grab([&] {
    cfg.stage.refresh_basis_each_step = raw.get_bool("stage.refresh_basis", false);
  });

  if (cfg.kind == ExperimentKind::Channel) {
    grab([&] {
      cfg.channel_c_truth = to_vec(raw.has("channel.c_truth")
                                       ? raw.get_list("channel.c_truth")
                                       : std::vector<double>{0.0, 4.0, 1.0});
    });
    grab([&] { cfg.c_prior_std = raw.get_double("channel.c_prior_std", cfg.c_prior_std); });
    grab([&] { cfg.curve_kle_var = raw.get_double("channel.kle_var", cfg.curve_kle_var); });
    grab([&] { cfg.curve_kle_l2 = raw.get_double("channel.kle_l2", cfg.curve_kle_l2); });
    grab([&] { cfg.curve_modes = raw.get_int("channel.modes", cfg.curve_modes); });
  } else if (cfg.kind == ExperimentKind::Source) {
    grab([&] {
      if (raw.has("source.strengths"))
        cfg.pulse_strengths = raw.get_list("source.strengths");
    });
    grab([&] { cfg.pulse_tau = raw.get_double("source.tau", cfg.pulse_tau); });
    grab([&] {
      if (raw.has("source.switch_times"))
        cfg.switch_times = raw.get_list("source.switch_times");
    });
    grab([&] {
      cfg.source_truth = to_vec(raw.has("source.truth")
                                    ? raw.get_list("source.truth")
                                    : std::vector<double>{0.5, 0.2, 0.6, 0.5, 0.3});
    });
    grab([&] {
      cfg.k_background = raw.get_double("source.k_background", cfg.k_background);
    });
    grab([&] {
      cfg.k_inclusion = raw.get_double("source.k_inclusion", cfg.k_inclusion);
    });
    grab([&] {
      std::vector<double> flat{0.1, 0.4, 0.55, 0.75, 0.55, 0.85, 0.2, 0.45};
      if (raw.has("source.inclusions")) flat = raw.get_list("source.inclusions");
      if (flat.size() % 4 != 0)
        throw std::invalid_argument(
            "source.inclusions: expected groups of four values (xlo xhi ylo yhi)");
      cfg.inclusions.clear();
      for (size_t i = 0; i < flat.size(); i += 4)
        cfg.inclusions.push_back({flat[i], flat[i + 1], flat[i + 2], flat[i + 3]});
    });
    grab([&] {
      std::vector<double> lo(static_cast<size_t>(cfg.dim()), 0.0);
      if (raw.has("source.box_lo")) lo = raw.get_list("source.box_lo");
      std::vector<double> hi(static_cast<size_t>(cfg.dim()), 1.0);
      if (!hi.empty()) hi[0] = 2.0;
      if (raw.has("source.box_hi")) hi = raw.get_list("source.box_hi");
      cfg.stage.lo = to_vec(lo);
      cfg.stage.hi = to_vec(hi);
    });
  } else {
    grab([&] { cfg.field_lx = raw.get_double("field.lx", cfg.field_lx); });
    grab([&] { cfg.field_ly = raw.get_double("field.ly", cfg.field_ly); });
    grab([&] { cfg.field_var = raw.get_double("field.var", cfg.field_var); });
    grab([&] { cfg.field_modes = raw.get_int("field.modes", cfg.field_modes); });
    grab([&] { cfg.kle_grid = raw.get_int("field.grid", cfg.kle_grid); });
  }

  grab([&] { raw.reject_unconsumed(); });

  if (!errors.empty()) {
    std::string msg = "invalid experiment config:";
    for (const std::string& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
  return cfg;
}

void ExperimentConfig::apply_scale_preset(bool paper) {
  if (paper) {
    switch (kind) {
      case ExperimentKind::Channel:
        fine_n = 80;
        coarse_n = 5;
        m_snap = 20;
        stage.n1 = 5000;
        stage.n2 = 10000;
        stage.M1 = 7;
        stage.M2 = 8;
        stage.N0 = 3;
        break;
      case ExperimentKind::Source:
        fine_n = 100;
        coarse_n = 5;
        m_snap = 10;
        stage.n1 = 2000;
        stage.n2 = 3000;
        stage.M1 = 8;
        stage.M2 = 9;
        stage.N0 = 7;
        break;
      case ExperimentKind::Hierarchical:
        fine_n = 100;
        coarse_n = 5;
        m_snap = 20;
        kle_grid = 50;
        stage.n1 = 3000;
        stage.n2 = 10000;
        stage.M1 = 3;
        stage.M2 = 5;
        stage.N0 = 3;
        break;
    }
    return;
  }
  fine_n = 32;
  coarse_n = 4;
  stage.n1 = 500;
  stage.n2 = 2000;
  switch (kind) {
    case ExperimentKind::Channel:
      m_snap = 20;
      stage.M1 = 4;
      stage.M2 = 8;
      stage.N0 = 2;
      break;
    case ExperimentKind::Source:
      m_snap = 10;
      stage.M1 = 4;
      stage.M2 = 8;
      stage.N0 = 3;
      break;
    case ExperimentKind::Hierarchical:
      m_snap = 20;
      kle_grid = 32;
      stage.M1 = 3;
      stage.M2 = 5;
      stage.N0 = 2;
      break;
  }
}

std::string ExperimentConfig::canonical_text() const {
  std::vector<std::pair<std::string, std::string>> kv;
  auto add = [&kv](const std::string& k, std::string v) {
    kv.emplace_back(k, std::move(v));
  };
  add("experiment.kind", to_string(kind));
  add("experiment.seed", std::to_string(seed));
  add("experiment.truth_seed", std::to_string(truth_seed));
  add("experiment.threads", std::to_string(stage.threads));
  add("experiment.fine_n", std::to_string(fine_n));
  add("experiment.coarse_n", std::to_string(coarse_n));
  add("experiment.T", fmt17(T));
  add("experiment.dt_truth", fmt17(dt_truth));
  add("experiment.dt_assim", fmt17(dt_assim));
  add("experiment.gamma", fmt17(gamma));
  add("experiment.f_const", fmt17(f_const));
  add("experiment.sigma", fmt17(sigma));
  add("experiment.snap_n_theta", std::to_string(snap_n_theta));
  add("experiment.m_snap", std::to_string(m_snap));

  add("sensors.nx", std::to_string(sensors.nx));
  add("sensors.ny", std::to_string(sensors.ny));
  add("sensors.xlo", fmt17(sensors.xlo));
  add("sensors.xhi", fmt17(sensors.xhi));
  add("sensors.ylo", fmt17(sensors.ylo));
  add("sensors.yhi", fmt17(sensors.yhi));

  add("schedule.start", fmt17(schedule.start));
  add("schedule.stop", fmt17(schedule.stop));
  add("schedule.spacing", fmt17(schedule.spacing));
  add("schedule.stride", fmt17(schedule.stride));

  add("stage.n1", std::to_string(stage.n1));
  add("stage.n2", std::to_string(stage.n2));
  add("stage.M1", std::to_string(stage.M1));
  add("stage.M2", std::to_string(stage.M2));
  add("stage.I1", std::to_string(stage.I1));
  add("stage.I2", std::to_string(stage.I2));
  add("stage.N0", std::to_string(stage.N0));
  add("stage.flavor",
      stage.flavor == FilterFlavor::Plain ? "plain" : "normal-score");
  add("stage.new_prior",
      stage.new_prior_builder == NewPriorBuilder::EnKF ? "enkf" : "es");
  add("stage.start", stage.stage_two_start == StageTwoStart::AfterStageOne
                         ? "after-stage-one"
                         : "from-first-step");
  if (stage.noise.kind == NoiseModel::Kind::Known) {
    add("stage.noise", "known");
    add("stage.noise_sigma2", fmt17(stage.noise.sigma2));
  } else {
    add("stage.noise", "hyper");
    add("stage.noise_n_s", fmt17(stage.noise.n_s));
  }
  add("stage.l1_alpha", fmt17(stage.l1_alpha));
  add("stage.use_surrogate", stage.use_surrogate ? "true" : "false");
  add("stage.refresh_basis", stage.refresh_basis_each_step ? "true" : "false");

  switch (kind) {
    case ExperimentKind::Channel:
      add("channel.c_truth",
          join17(channel_c_truth.data(), static_cast<int>(channel_c_truth.size())));
      add("channel.c_prior_std", fmt17(c_prior_std));
      add("channel.kle_var", fmt17(curve_kle_var));
      add("channel.kle_l2", fmt17(curve_kle_l2));
      add("channel.modes", std::to_string(curve_modes));
      break;
    case ExperimentKind::Source: {
      add("source.truth",
          join17(source_truth.data(), static_cast<int>(source_truth.size())));
      add("source.strengths",
          join17(pulse_strengths.data(), static_cast<int>(pulse_strengths.size())));
      add("source.tau", fmt17(pulse_tau));
      add("source.switch_times",
          join17(switch_times.data(), static_cast<int>(switch_times.size())));
      add("source.k_background", fmt17(k_background));
      add("source.k_inclusion", fmt17(k_inclusion));
      std::vector<double> flat;
      for (const auto& box : inclusions)
        flat.insert(flat.end(), box.begin(), box.end());
      add("source.inclusions", join17(flat.data(), static_cast<int>(flat.size())));
      add("source.box_lo",
          join17(stage.lo.data(), static_cast<int>(stage.lo.size())));
      add("source.box_hi",
          join17(stage.hi.data(), static_cast<int>(stage.hi.size())));
      break;
    }
    case ExperimentKind::Hierarchical:
      add("field.lx", fmt17(field_lx));
      add("field.ly", fmt17(field_ly));
      add("field.var", fmt17(field_var));
      add("field.modes", std::to_string(field_modes));
      add("field.grid", std::to_string(kle_grid));
      break;
  }

  std::sort(kv.begin(), kv.end());
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += " = ";
    out += v;
    out += '\n';
  }
  return out;
}

void ExperimentConfig::validate() const {
  std::vector<std::string> errors;
  auto check = [&errors](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };

  check(fine_n >= 4, "fine_n must be at least 4");
  check(coarse_n >= 2, "coarse_n must be at least 2");
  check(coarse_n >= 2 && fine_n > coarse_n && fine_n % coarse_n == 0,
        "fine_n must be a proper multiple of coarse_n");
  check(T > 0.0, "T must be positive");
  check(dt_truth > 0.0 && dt_assim > 0.0, "time steps must be positive");
  check(gamma > 0.0 && gamma < 2.0, "gamma must lie in (0, 2)");
  check(sigma >= 0.0, "sigma must be nonnegative");
  check(snap_n_theta >= 1, "snap_n_theta must be at least 1");
  check(m_snap >= 1, "m_snap must be at least 1");

  check(sensors.nx >= 1 && sensors.ny >= 1, "sensor counts must be at least 1");
  check(sensors.xlo >= 0.0 && sensors.xlo <= sensors.xhi && sensors.xhi <= 1.0 &&
            sensors.ylo >= 0.0 && sensors.ylo <= sensors.yhi && sensors.yhi <= 1.0,
        "sensors must lie inside the unit square");

  check(schedule.spacing > 0.0 && schedule.stride > 0.0 &&
            schedule.start > 0.0 && schedule.stop >= schedule.start,
        "schedule needs 0 < start <= stop and positive spacing and stride");

  try {
    stage.validate(dim());
  } catch (const std::exception& e) {
    errors.emplace_back(e.what());
  }

  if (schedule.spacing > 0.0 && schedule.stride > 0.0) {
    bool past_T = false, misaligned = false;
    for (int k = 1; k <= stage.I2; ++k)
      for (double t : schedule.step_times(k)) {
        if (t > T + kTimeTol) past_T = true;
        if (!aligned(t, dt_truth) || !aligned(t, dt_assim)) misaligned = true;
      }
    check(!past_T, "observation schedule runs past T");
    check(!misaligned, "observation instants must be multiples of both time steps");
  }

  if (stage.noise.kind == NoiseModel::Kind::Hyper)
    check(n_d() > dim(),
          "hyper noise needs more observations per step than parameters");

  switch (kind) {
    case ExperimentKind::Channel:
      check(channel_c_truth.size() == 3, "channel.c_truth must have 3 entries");
      check(c_prior_std > 0.0, "channel.c_prior_std must be positive");
      check(curve_kle_var > 0.0 && curve_kle_l2 > 0.0,
            "channel curve covariance parameters must be positive");
      check(curve_modes >= 1, "channel.modes must be at least 1");
      break;
    case ExperimentKind::Source: {
      check(!pulse_strengths.empty(), "source needs at least one pulse");
      check(pulse_tau > 0.0, "source.tau must be positive");
      if (static_cast<int>(switch_times.size()) != n_pulses()) {
        check(false, "source.switch_times must have one entry per pulse");
      } else {
        bool ordered = switch_times.front() > 0.0;
        for (size_t i = 1; i < switch_times.size(); ++i)
          if (switch_times[i] <= switch_times[i - 1]) ordered = false;
        check(ordered, "source.switch_times must be positive and increasing");
        check(switch_times.back() <= T + kTimeTol,
              "source.switch_times must not run past T");
      }
      if (source_truth.size() != dim()) {
        check(false, "source.truth must have one entry per parameter");
      } else if (stage.lo.size() == dim() && stage.hi.size() == dim()) {
        bool inside = true;
        for (int i = 0; i < dim(); ++i) {
          if (!(stage.lo[i] < stage.hi[i])) inside = false;
          if (!(source_truth[i] > stage.lo[i] && source_truth[i] < stage.hi[i]))
            inside = false;
        }
        check(inside, "source.truth must lie strictly inside the box");
      }
      check(k_background > 0.0 && k_inclusion > 0.0,
            "source permeability values must be positive");
      for (const auto& box : inclusions)
        check(box[0] >= 0.0 && box[0] < box[1] && box[1] <= 1.0 && box[2] >= 0.0 &&
                  box[2] < box[3] && box[3] <= 1.0,
              "source inclusions must be proper boxes inside the unit square");
      break;
    }
    case ExperimentKind::Hierarchical:
      check(field_lx > 0.0 && field_ly > 0.0 && field_var > 0.0,
            "field covariance parameters must be positive");
      check(field_modes >= 1, "field.modes must be at least 1");
      check(kle_grid >= 2, "field.grid must be at least 2");
      check((kle_grid + 1) * (kle_grid + 1) >= field_modes,
            "field.grid too small for the requested mode count");
      break;
  }

  if (!errors.empty()) {
    std::string msg = "invalid experiment config:";
    for (const std::string& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
}

struct Experiment::Impl {
  ExperimentConfig cfg;
  Grid fine;
  FemAssembler fem;
  BoundarySpec bc;
  SpMat B_full;
  SpMat Hobs;
  ConstrainedSystem cs_ref;  // k-independent structure: free set, mass, lift
  Mat Hobs_free;
  Vec h0;
  Vec F_const_full;  // zero-size when the load is pulse-driven

  ChannelModel channel;
  KleBasis field_kle;
  Mat field_phi_scaled;
  Vec field_mean;
  Vec k_fixed;

  double gamma_truth = 0.5;
  Vec truth;  // empty for Channel
  Vec k_truth;

  Vec x_err;
  Mat curve_phi_err;
  Vec truth_curve1, truth_curve2;

  std::unique_ptr<GmsfemReducer> reducer;

  struct Reduced {
    int m_i = 0;
    Mat Rf;
    SpMat Rf_sp;
    Mat Br;
    Mat Hr;
    Vec Fc_r;  // zero-size when the load is pulse-driven
    bool fixed_k = false;
    Mat Kr_fixed;
    Vec bcl_fixed;
  };
  Reduced red1, red2;

  struct LoadTerm {
    Vec F;  // already restricted (or reduced); active on [t_on, t_off)
    double t_on = 0.0, t_off = kInf;
  };

  explicit Impl(const ExperimentConfig& c);

  Vec draw_prior_vec(RngStream& rng) const;
  Vec prior_mean() const;
  Vec permeability_of(const Vec& theta) const;
  double gamma_of(const Vec& theta) const;
  Vec pulse_load(double strength, double px, double py) const;
  std::vector<LoadTerm> full_terms(const Vec& theta,
                                   const ConstrainedSystem& cs) const;
  std::vector<LoadTerm> reduced_source_terms(const Vec& theta,
                                             const Reduced& red) const;

  template <class MatT>
  std::vector<Vec> states_at(double gamma, double dt, const MatT& K,
                             const MatT& B, const std::vector<LoadTerm>& terms,
                             const Vec& bc_load,
                             const std::vector<int>& want) const;

  std::vector<int> window_indices(int lo, int hi, double dt) const;

  std::vector<Vec> member_full_states(const Vec& theta,
                                      const std::vector<int>& want,
                                      double dt) const;
  std::vector<Vec> truth_full_states(const std::vector<int>& want,
                                     double dt) const;
  std::vector<Vec> member_reduced_states(const Reduced& red, const Vec& theta,
                                         const std::vector<int>& want) const;

  Vec full_window(const Vec& theta, int lo, int hi, double dt) const;
  Vec truth_window(int lo, int hi, double dt) const;
  Vec reduced_window(const Reduced& red, const Vec& theta, int lo, int hi) const;

  void build_reduced(Reduced& red, int m_i, const Vec& theta_bar) const;
};

Experiment::Impl::Impl(const ExperimentConfig& c)
    : cfg(c), fine(c.fine_n, c.fine_n), fem(fine) {
  if (cfg.kind == ExperimentKind::Hierarchical) {
    bc.left = bc.right = bc.bottom = bc.top = SideBc{BcType::Dirichlet, 0.0};
  } else {
    bc.left = SideBc{BcType::Dirichlet, 1.0};
    bc.right = SideBc{BcType::Dirichlet, 0.0};
    bc.bottom = bc.top = SideBc{BcType::Neumann, 0.0};
  }

  B_full = fem.mass();
  Hobs = observation_matrix(fine, cfg.sensors.points());

  const int n_nodes = fine.n_nodes();
  switch (cfg.kind) {
    case ExperimentKind::Channel: {
      Mat xpts(fine.nx + 1, 1);
      for (int i = 0; i <= fine.nx; ++i) xpts(i, 0) = fine.x0 + fine.hx * i;
      channel.basis = KleBasis::build(
          SqExpKernel{cfg.curve_kle_var, cfg.curve_kle_l2, 0.0}, xpts,
          TruncationRule::fixed_n(cfg.curve_modes));
      channel.m1 = channel.m2 = cfg.curve_modes;

      const Vec xn = xpts.col(0);
      const Vec g1 = channel_truth_curve(1, xn);
      const Vec g2 = channel_truth_curve(2, xn);
      const Vec logk = channel_log_k_from_curves(cfg.channel_c_truth, g1, g2, fine);
      k_truth = logk.array().exp();
      gamma_truth = cfg.gamma;

      x_err = Vec::LinSpaced(200, 0.0, 1.0);
      Mat xq(x_err.size(), 1);
      xq.col(0) = x_err;
      curve_phi_err = channel.basis.extend_phi(xq) *
                      channel.basis.lambda.cwiseSqrt().asDiagonal();
      truth_curve1 = channel_truth_curve(1, x_err);
      truth_curve2 = channel_truth_curve(2, x_err);
      break;
    }
    case ExperimentKind::Source: {
      k_fixed = Vec::Constant(n_nodes, cfg.k_background);
      for (int n = 0; n < n_nodes; ++n) {
        const double x = fine.node_x(n), y = fine.node_y(n);
        for (const auto& box : cfg.inclusions)
          if (x >= box[0] && x <= box[1] && y >= box[2] && y <= box[3])
            k_fixed[n] = cfg.k_inclusion;
      }
      truth = cfg.source_truth;
      gamma_truth = truth[0];
      k_truth = k_fixed;
      break;
    }
    case ExperimentKind::Hierarchical: {
      Grid kg(cfg.kle_grid, cfg.kle_grid);
      Mat kpts(kg.n_nodes(), 2);
      for (int n = 0; n < kg.n_nodes(); ++n) {
        kpts(n, 0) = kg.node_x(n);
        kpts(n, 1) = kg.node_y(n);
      }
      field_kle = KleBasis::build(
          SqExpKernel{cfg.field_var, cfg.field_lx * cfg.field_lx,
                      cfg.field_ly * cfg.field_ly},
          kpts, TruncationRule::fixed_n(cfg.field_modes));
      Mat fpts(n_nodes, 2);
      for (int n = 0; n < n_nodes; ++n) {
        fpts(n, 0) = fine.node_x(n);
        fpts(n, 1) = fine.node_y(n);
      }
      field_phi_scaled =
          field_kle.extend_phi(fpts) * field_kle.lambda.cwiseSqrt().asDiagonal();
      field_mean = Vec::Zero(n_nodes);

      RngStream rng(cfg.truth_seed, 0, 0, Tag::TruthDraw);
      truth = Vec(cfg.field_modes);
      for (int i = 0; i < cfg.field_modes; ++i) truth[i] = rng.normal();
      k_truth = (field_mean + field_phi_scaled * truth).array().exp();
      gamma_truth = cfg.gamma;
      break;
    }
  }

  const Vec k_ref =
      cfg.kind == ExperimentKind::Source ? k_fixed : Vec::Ones(n_nodes);
  cs_ref = constrain(fine, fem.stiffness(k_ref), B_full, bc);

  const Mat Hd = Mat(Hobs);
  Hobs_free.resize(Hd.rows(), cs_ref.n_free());
  for (int i = 0; i < cs_ref.n_free(); ++i)
    Hobs_free.col(i) = Hd.col(cs_ref.free_nodes[i]);
  h0 = Hobs * cs_ref.lift;

  if (cfg.kind != ExperimentKind::Source) {
    const double f = cfg.f_const;
    F_const_full = fem.load([f](double, double) { return f; });
  }

  GmsfemOptions opt;
  opt.coarse_nx = opt.coarse_ny = cfg.coarse_n;
  opt.m_snap = cfg.m_snap;
  std::vector<Vec> snaps;
  if (cfg.kind == ExperimentKind::Source) {
    snaps.push_back(Vec::Zero(cfg.dim()));
  } else {
    for (int j = 0; j < cfg.snap_n_theta; ++j) {
      RngStream rng(cfg.truth_seed, 0, static_cast<std::uint64_t>(j),
                    Tag::SnapshotDraw);
      snaps.push_back(draw_prior_vec(rng));
    }
  }
  opt.n_theta = static_cast<int>(snaps.size());
  reducer = std::make_unique<GmsfemReducer>(
      fine, opt, [this](const Vec& t) { return permeability_of(t); }, snaps);

  const Vec tbar = prior_mean();
  build_reduced(red1, cfg.stage.M1, tbar);
  build_reduced(red2, cfg.stage.M2, tbar);
}

Vec Experiment::Impl::draw_prior_vec(RngStream& rng) const {
  const int d = cfg.dim();
  Vec t(d);
  switch (cfg.kind) {
    case ExperimentKind::Channel:
      for (int i = 0; i < 3; ++i) t[i] = cfg.c_prior_std * rng.normal();
      for (int i = 3; i < d; ++i) t[i] = rng.normal();
      break;
    case ExperimentKind::Source:
      for (int i = 0; i < d; ++i)
        t[i] = cfg.stage.lo[i] + (cfg.stage.hi[i] - cfg.stage.lo[i]) * rng.uniform();
      break;
    case ExperimentKind::Hierarchical:
      for (int i = 0; i < d; ++i) t[i] = rng.normal();
      break;
  }
  return t;
}

Vec Experiment::Impl::prior_mean() const {
  if (cfg.kind == ExperimentKind::Source)
    return 0.5 * (cfg.stage.lo + cfg.stage.hi);
  return Vec::Zero(cfg.dim());
}

Vec Experiment::Impl::permeability_of(const Vec& theta) const {
  switch (cfg.kind) {
    case ExperimentKind::Channel: return channel.permeability(theta, fine);
    case ExperimentKind::Source: return k_fixed;
    case ExperimentKind::Hierarchical:
      return (field_mean + field_phi_scaled * theta).array().exp();
  }
  throw std::logic_error("unknown experiment kind");
}

double Experiment::Impl::gamma_of(const Vec& theta) const {
  if (cfg.kind != ExperimentKind::Source) return cfg.gamma;
  const double g = theta[0];
  if (!(g > 0.0 && g < 2.0))
    throw std::runtime_error("member fractional order " + std::to_string(g) +
                             " lies outside (0, 2)");
  return g;
}

Vec Experiment::Impl::pulse_load(double strength, double px, double py) const {
  const double tau2 = cfg.pulse_tau * cfg.pulse_tau;
  const double amp = strength / (2.0 * M_PI * tau2);
  return fem.load([amp, px, py, tau2](double x, double y) {
    const double dx = x - px, dy = y - py;
    return amp * std::exp(-0.5 * (dx * dx + dy * dy) / tau2);
  });
}

std::vector<Experiment::Impl::LoadTerm> Experiment::Impl::full_terms(
    const Vec& theta, const ConstrainedSystem& cs) const {
  std::vector<LoadTerm> terms;
  if (cfg.kind == ExperimentKind::Source) {
    for (int p = 0; p < cfg.n_pulses(); ++p) {
      LoadTerm term;
      term.F = cs.restrict_full(
          pulse_load(cfg.pulse_strengths[p], theta[1 + 2 * p], theta[2 + 2 * p]));
      term.t_on = p == 0 ? 0.0 : cfg.switch_times[p - 1];
      term.t_off = p == 0 ? cfg.switch_times.back() : kInf;
      terms.push_back(std::move(term));
    }
  } else {
    terms.push_back(LoadTerm{cs.restrict_full(F_const_full), 0.0, kInf});
  }
  return terms;
}

std::vector<Experiment::Impl::LoadTerm> Experiment::Impl::reduced_source_terms(
    const Vec& theta, const Reduced& red) const {
  std::vector<LoadTerm> terms;
  for (int p = 0; p < cfg.n_pulses(); ++p) {
    LoadTerm term;
    term.F = red.Rf.transpose() *
             cs_ref.restrict_full(pulse_load(cfg.pulse_strengths[p],
                                             theta[1 + 2 * p], theta[2 + 2 * p]));
    term.t_on = p == 0 ? 0.0 : cfg.switch_times[p - 1];
    term.t_off = p == 0 ? cfg.switch_times.back() : kInf;
    terms.push_back(std::move(term));
  }
  return terms;
}

template <class MatT>
std::vector<Vec> Experiment::Impl::states_at(double gamma, double dt,
                                             const MatT& K, const MatT& B,
                                             const std::vector<LoadTerm>& terms,
                                             const Vec& bc_load,
                                             const std::vector<int>& want) const {
  const int n_steps = *std::max_element(want.begin(), want.end());
  const auto load_at = [&](int n) {
    const double t = n * dt;
    Vec F = -bc_load;
    for (const LoadTerm& term : terms)
      if (t >= term.t_on - kTimeTol && t < term.t_off - kTimeTol) F += term.F;
    return F;
  };
  const std::vector<Vec> u = march_caputo<MatT>(
      gamma, dt, K, B, Vec::Zero(K.rows()), n_steps, load_at);
  std::vector<Vec> out;
  out.reserve(want.size());
  for (int idx : want) out.push_back(u[static_cast<size_t>(idx)]);
  return out;
}

std::vector<int> Experiment::Impl::window_indices(int lo, int hi,
                                                  double dt) const {
  if (lo < 1 || hi < lo || hi > cfg.stage.I2)
    throw std::invalid_argument("data-step window out of range");
  std::vector<int> idx;
  for (int k = lo; k <= hi; ++k)
    for (double t : cfg.schedule.step_times(k))
      idx.push_back(static_cast<int>(std::llround(t / dt)));
  return idx;
}

std::vector<Vec> Experiment::Impl::member_full_states(
    const Vec& theta, const std::vector<int>& want, double dt) const {
  const Vec k = permeability_of(theta);
  const ConstrainedSystem cs = constrain(fine, fem.stiffness(k), B_full, bc);
  return states_at(gamma_of(theta), dt, cs.K, cs.B, full_terms(theta, cs),
                   cs.bc_load, want);
}

std::vector<Vec> Experiment::Impl::truth_full_states(const std::vector<int>& want,
                                                     double dt) const {
  const ConstrainedSystem cs = constrain(fine, fem.stiffness(k_truth), B_full, bc);
  return states_at(gamma_truth, dt, cs.K, cs.B, full_terms(truth, cs), cs.bc_load,
                   want);
}

std::vector<Vec> Experiment::Impl::member_reduced_states(
    const Reduced& red, const Vec& theta, const std::vector<int>& want) const {
  if (red.fixed_k) {
    return states_at(gamma_of(theta), cfg.dt_assim, red.Kr_fixed, red.Br,
                     reduced_source_terms(theta, red), red.bcl_fixed, want);
  }
  const Vec k = permeability_of(theta);
  const ConstrainedSystem cs = constrain(fine, fem.stiffness(k), B_full, bc);
  const SpMat KR = cs.K * red.Rf_sp;
  const SpMat KrS = red.Rf_sp.transpose() * KR;
  const Mat Kr = Mat(KrS);
  const Vec bcl = red.Rf.transpose() * cs.bc_load;
  const std::vector<LoadTerm> terms{LoadTerm{red.Fc_r, 0.0, kInf}};
  return states_at(cfg.gamma, cfg.dt_assim, Kr, red.Br, terms, bcl, want);
}

Vec Experiment::Impl::full_window(const Vec& theta, int lo, int hi,
                                  double dt) const {
  const std::vector<int> idx = window_indices(lo, hi, dt);
  const std::vector<Vec> states = member_full_states(theta, idx, dt);
  const Eigen::Index n_sens = Hobs.rows();
  Vec out(n_sens * static_cast<Eigen::Index>(states.size()));
  for (size_t i = 0; i < states.size(); ++i)
    out.segment(static_cast<Eigen::Index>(i) * n_sens, n_sens) =
        Hobs_free * states[i] + h0;
  return out;
}

Vec Experiment::Impl::truth_window(int lo, int hi, double dt) const {
  const std::vector<int> idx = window_indices(lo, hi, dt);
  const std::vector<Vec> states = truth_full_states(idx, dt);
  const Eigen::Index n_sens = Hobs.rows();
  Vec out(n_sens * static_cast<Eigen::Index>(states.size()));
  for (size_t i = 0; i < states.size(); ++i)
    out.segment(static_cast<Eigen::Index>(i) * n_sens, n_sens) =
        Hobs_free * states[i] + h0;
  return out;
}

Vec Experiment::Impl::reduced_window(const Reduced& red, const Vec& theta,
                                     int lo, int hi) const {
  const std::vector<int> idx = window_indices(lo, hi, cfg.dt_assim);
  const std::vector<Vec> states = member_reduced_states(red, theta, idx);
  const Eigen::Index n_sens = Hobs.rows();
  Vec out(n_sens * static_cast<Eigen::Index>(states.size()));
  for (size_t i = 0; i < states.size(); ++i)
    out.segment(static_cast<Eigen::Index>(i) * n_sens, n_sens) =
        red.Hr * states[i] + h0;
  return out;
}

void Experiment::Impl::build_reduced(Reduced& red, int m_i,
                                     const Vec& theta_bar) const {
  red.m_i = m_i;
  const MultiscaleBasis basis = reducer->build_basis(theta_bar, m_i);
  red.Rf.resize(cs_ref.n_free(), basis.R.cols());
  for (int i = 0; i < cs_ref.n_free(); ++i)
    red.Rf.row(i) = basis.R.row(cs_ref.free_nodes[i]);
  red.Rf_sp = sparse_of(red.Rf);
  red.Br = red.Rf.transpose() * (cs_ref.B * red.Rf);
  red.Hr = Hobs_free * red.Rf;
  if (F_const_full.size() > 0)
    red.Fc_r = red.Rf.transpose() * cs_ref.restrict_full(F_const_full);
  if (cfg.kind == ExperimentKind::Source) {
    red.fixed_k = true;
    red.Kr_fixed = red.Rf.transpose() * (cs_ref.K * red.Rf);
    red.bcl_fixed = red.Rf.transpose() * cs_ref.bc_load;
  }
}

namespace {
const ExperimentConfig& validated(const ExperimentConfig& cfg) {
  cfg.validate();
  return cfg;
}
} // namespace

Experiment::Experiment(const ExperimentConfig& cfg)
    : impl_(std::make_unique<Impl>(validated(cfg))),
      cfg_(cfg),
      fine_(cfg.fine_n, cfg.fine_n) {
  truth_ = impl_->truth;
  k_truth_ = impl_->k_truth;

  Impl* impl = impl_.get();
  models_.coarse =
      SteppedModel{cfg_.stage.I2, cfg_.n_d(), [impl](const Vec& t, int lo, int hi) {
                     return impl->reduced_window(impl->red1, t, lo, hi);
                   }};
  models_.fine =
      SteppedModel{cfg_.stage.I2, cfg_.n_d(), [impl](const Vec& t, int lo, int hi) {
                     return impl->reduced_window(impl->red2, t, lo, hi);
                   }};
  models_.refresh_fine = [impl](const Vec& mean) {
    impl->build_reduced(impl->red2, impl->cfg.stage.M2, mean);
  };
}

Experiment::~Experiment() = default;

PriorSampler Experiment::prior() const {
  Impl* impl = impl_.get();
  return PriorSampler{cfg_.dim(),
                      [impl](RngStream& rng) { return impl->draw_prior_vec(rng); }};
}

std::vector<Vec> Experiment::generate_data(bool with_noise) const {
  const int I2 = cfg_.stage.I2;
  const Vec all = impl_->truth_window(1, I2, cfg_.dt_truth);
  const int n_d = cfg_.n_d();
  std::vector<Vec> data(static_cast<size_t>(I2));
  for (int k = 1; k <= I2; ++k) {
    Vec d = all.segment(static_cast<Eigen::Index>(k - 1) * n_d, n_d);
    if (with_noise && cfg_.sigma > 0.0) {
      RngStream rng(cfg_.truth_seed, static_cast<std::uint64_t>(k), 0,
                    Tag::DataNoise);
      for (int i = 0; i < n_d; ++i) d[i] += cfg_.sigma * rng.normal();
    }
    data[static_cast<size_t>(k - 1)] = std::move(d);
  }
  return data;
}

SteppedModel Experiment::full_model(double dt) const {
  Impl* impl = impl_.get();
  return SteppedModel{cfg_.stage.I2, cfg_.n_d(),
                      [impl, dt](const Vec& t, int lo, int hi) {
                        return impl->full_window(t, lo, hi, dt);
                      }};
}

SteppedModel Experiment::reduced_model_for(int m_i, const Vec& theta_bar) const {
  auto red = std::make_shared<Impl::Reduced>();
  impl_->build_reduced(*red, m_i, theta_bar);
  Impl* impl = impl_.get();
  return SteppedModel{cfg_.stage.I2, cfg_.n_d(),
                      [impl, red](const Vec& t, int lo, int hi) {
                        return impl->reduced_window(*red, t, lo, hi);
                      }};
}

RunReport Experiment::run(RunMethod method, const std::vector<Vec>& data) {
  StageConfig sc = cfg_.stage;
  const PriorSampler ps = prior();
  switch (method) {
    case RunMethod::Standard:
      return run_standard_enkf(ps, sc, data, models_.fine, cfg_.seed);
    case RunMethod::Smoother:
      return run_smoother(ps, sc, data, models_.fine, cfg_.seed);
    case RunMethod::TwoStage:
      sc.flavor = FilterFlavor::Plain;
      return run_two_stage(ps, sc, data, models_, cfg_.seed);
    case RunMethod::NsTwoStage:
      sc.flavor = FilterFlavor::NormalScore;
      return run_two_stage(ps, sc, data, models_, cfg_.seed);
  }
  throw std::logic_error("unknown run method");
}

Mat Experiment::evaluate_at_points(const Mat& members,
                                   const std::vector<std::pair<double, double>>& pts,
                                   double t, double dt, int m_i) const {
  const int idx = static_cast<int>(std::llround(t / dt));
  if (idx < 1 || !aligned(t, dt))
    throw std::invalid_argument("evaluation time must be a positive multiple of dt");
  const std::vector<int> want{idx};

  const SpMat Hp = observation_matrix(fine_, pts);
  const Mat Hp_d = Mat(Hp);
  Mat Hp_free(Hp_d.rows(), impl_->cs_ref.n_free());
  for (int i = 0; i < impl_->cs_ref.n_free(); ++i)
    Hp_free.col(i) = Hp_d.col(impl_->cs_ref.free_nodes[i]);
  const Vec h0p = Hp * impl_->cs_ref.lift;

  Mat out(static_cast<Eigen::Index>(pts.size()), members.cols());
  if (m_i <= 0) {
    for (Eigen::Index j = 0; j < members.cols(); ++j) {
      const std::vector<Vec> states =
          impl_->member_full_states(members.col(j), want, dt);
      out.col(j) = Hp_free * states[0] + h0p;
    }
    return out;
  }

  const Impl::Reduced* red = nullptr;
  if (m_i == impl_->red2.m_i) red = &impl_->red2;
  else if (m_i == impl_->red1.m_i) red = &impl_->red1;
  if (red == nullptr)
    throw std::invalid_argument("basis count matches neither reduced model");
  if (std::abs(dt - cfg_.dt_assim) > kTimeTol)
    throw std::invalid_argument("reduced responses march with the assimilation step");
  const Mat Hrp = Hp_free * red->Rf;
  for (Eigen::Index j = 0; j < members.cols(); ++j) {
    const std::vector<Vec> states =
        impl_->member_reduced_states(*red, members.col(j), want);
    out.col(j) = Hrp * states[0] + h0p;
  }
  return out;
}

Vec Experiment::truth_at_points(const std::vector<std::pair<double, double>>& pts,
                                double t) const {
  const int idx = static_cast<int>(std::llround(t / cfg_.dt_truth));
  if (idx < 1 || !aligned(t, cfg_.dt_truth))
    throw std::invalid_argument(
        "evaluation time must be a positive multiple of dt_truth");
  const std::vector<Vec> states =
      impl_->truth_full_states({idx}, cfg_.dt_truth);
  const SpMat Hp = observation_matrix(fine_, pts);
  return Hp * impl_->cs_ref.expand(states[0]);
}

Experiment::MetricSeries Experiment::relative_errors(const RunReport& rep) const {
  MetricSeries out;
  const int R = static_cast<int>(rep.analyses.size());
  switch (cfg_.kind) {
    case ExperimentKind::Channel: {
      out.names = {"eps_curve1", "eps_curve2"};
      out.values.assign(2, {});
      const int m = cfg_.curve_modes;
      const double n1 = impl_->truth_curve1.norm();
      const double n2 = impl_->truth_curve2.norm();
      for (int r = 0; r < R; ++r) {
        const Vec mean = ensemble_mean(rep.analyses[r]);
        const Vec c1 = ChannelModel::squash(impl_->curve_phi_err * mean.segment(3, m));
        const Vec c2 =
            ChannelModel::squash(impl_->curve_phi_err * mean.segment(3 + m, m));
        out.values[0].push_back((c1 - impl_->truth_curve1).norm() / n1);
        out.values[1].push_back((c2 - impl_->truth_curve2).norm() / n2);
      }
      break;
    }
    case ExperimentKind::Source: {
      out.names = {"eps_theta", "subdiffusion_fraction"};
      out.values.assign(2, {});
      const double tn = truth_.norm();
      for (int r = 0; r < R; ++r) {
        const Mat& ens = rep.analyses[r];
        out.values[0].push_back((ensemble_mean(ens) - truth_).norm() / tn);
        int below = 0;
        for (Eigen::Index j = 0; j < ens.cols(); ++j)
          if (ens(0, j) < 1.0) ++below;
        out.values[1].push_back(static_cast<double>(below) /
                                static_cast<double>(ens.cols()));
      }
      break;
    }
    case ExperimentKind::Hierarchical: {
      out.names = {"eps_k", "eps_theta", "eps_sigma2"};
      out.values.assign(3, {});
      const double kn = impl_->k_truth.norm();
      const double tn = truth_.norm();
      const double s2_true = cfg_.sigma * cfg_.sigma;
      for (int r = 0; r < R; ++r) {
        const Vec mean = ensemble_mean(rep.analyses[r]);
        const Vec k =
            (impl_->field_mean + impl_->field_phi_scaled * mean).array().exp();
        out.values[0].push_back((k - impl_->k_truth).norm() / kn);
        out.values[1].push_back((mean - truth_).norm() / tn);
        out.values[2].push_back(s2_true > 0.0
                                    ? std::abs(rep.sigma2[r] - s2_true) / s2_true
                                    : rep.sigma2[r]);
      }
      break;
    }
  }
  return out;
}

std::vector<Experiment::IntervalTable> Experiment::intervals(
    const RunReport& rep) const {
  if (rep.analyses.empty()) throw std::invalid_argument("empty run report");
  const Mat& ens = rep.final_ensemble();
  const int M = static_cast<int>(ens.cols());
  const int step = rep.steps.back();
  const double t = cfg_.schedule.step_times(step).back();
  const double sigma2 = rep.sigma2.back();

  struct SliceSpec {
    std::string name;
    bool vary_x;
    double fixed;
  };
  std::vector<SliceSpec> slices;
  if (cfg_.kind == ExperimentKind::Source)
    slices = {{"y=0", true, 0.0}, {"x=0.9", false, 0.9}};
  else
    slices = {{"y=0.5", true, 0.5}, {"x=0.5", false, 0.5}};

  const int n_pts = 101;
  std::vector<std::pair<double, double>> pts;
  pts.reserve(slices.size() * n_pts);
  for (const SliceSpec& s : slices)
    for (int i = 0; i < n_pts; ++i) {
      const double c = static_cast<double>(i) / (n_pts - 1);
      pts.emplace_back(s.vary_x ? c : s.fixed, s.vary_x ? s.fixed : c);
    }

  const int m2 = impl_->red2.m_i;
  const Mat resp = evaluate_at_points(ens, pts, t, cfg_.dt_assim, m2);
  const Vec truth_resp = truth_at_points(pts, t);

  const int n_err = 20;
  Mat diff(static_cast<Eigen::Index>(pts.size()), n_err);
  for (int j = 0; j < n_err; ++j) {
    RngStream rng(cfg_.truth_seed, 0, static_cast<std::uint64_t>(j),
                  Tag::CoarseErrorDraw);
    Mat th(cfg_.dim(), 1);
    th.col(0) = impl_->draw_prior_vec(rng);
    diff.col(j) = evaluate_at_points(th, pts, t, cfg_.dt_assim, 0).col(0) -
                  evaluate_at_points(th, pts, t, cfg_.dt_assim, m2).col(0);
  }
  Vec coarse_var(diff.rows());
  for (Eigen::Index i = 0; i < diff.rows(); ++i) {
    const double mu = diff.row(i).mean();
    coarse_var[i] = (diff.row(i).array() - mu).square().sum() / (n_err - 1);
  }

  std::vector<IntervalTable> tables;
  for (size_t s = 0; s < slices.size(); ++s) {
    IntervalTable tab;
    tab.slice = slices[s].name;
    tab.step = step;
    tab.time = t;
    tab.reliable = M >= 40;
    tab.coord = Vec::LinSpaced(n_pts, 0.0, 1.0);
    tab.truth = Vec(n_pts);
    tab.mean = Vec(n_pts);
    tab.cred_lo = Vec(n_pts);
    tab.cred_hi = Vec(n_pts);
    tab.pred_lo = Vec(n_pts);
    tab.pred_hi = Vec(n_pts);
    for (int i = 0; i < n_pts; ++i) {
      const Eigen::Index row = static_cast<Eigen::Index>(s) * n_pts + i;
      const Vec vals = resp.row(row).transpose();
      tab.truth[i] = truth_resp[row];
      tab.mean[i] = vals.mean();
      tab.cred_lo[i] = empirical_percentile(vals, 0.025);
      tab.cred_hi[i] = empirical_percentile(vals, 0.975);
      const double add = kZ95 * std::sqrt(sigma2 + coarse_var[row]);
      tab.pred_lo[i] = tab.cred_lo[i] - add;
      tab.pred_hi[i] = tab.cred_hi[i] + add;
    }
    tables.push_back(std::move(tab));
  }
  return tables;
}

double empirical_percentile(Vec values, double p) {
  if (values.size() == 0)
    throw std::invalid_argument("percentile of an empty sample");
  p = std::min(1.0, std::max(0.0, p));
  std::sort(values.data(), values.data() + values.size());
  const double rank = p * static_cast<double>(values.size() - 1);
  const Eigen::Index lo = static_cast<Eigen::Index>(std::floor(rank));
  const Eigen::Index hi = std::min<Eigen::Index>(lo + 1, values.size() - 1);
  const double w = rank - static_cast<double>(lo);
  return (1.0 - w) * values[lo] + w * values[hi];
}

Vec silverman_kde(const Vec& samples, const Vec& grid) {
  const Eigen::Index n = samples.size();
  if (n < 2) throw std::invalid_argument("kde needs at least two samples");
  const double mean = samples.mean();
  const double sd =
      std::sqrt((samples.array() - mean).square().sum() / static_cast<double>(n - 1));
  const double iqr =
      empirical_percentile(samples, 0.75) - empirical_percentile(samples, 0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  if (!(spread > 0.0))
    throw std::invalid_argument("kde on a degenerate sample");
  const double h = 0.9 * spread * std::pow(static_cast<double>(n), -0.2);
  const double scale = 1.0 / (static_cast<double>(n) * h * std::sqrt(2.0 * M_PI));
  Vec out(grid.size());
  for (Eigen::Index i = 0; i < grid.size(); ++i) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double z = (grid[i] - samples[j]) / h;
      acc += std::exp(-0.5 * z * z);
    }
    out[i] = scale * acc;
  }
  return out;
}

std::vector<DensityCurve> marginal_densities(const RunReport& rep) {
  std::vector<DensityCurve> out;
  for (size_t r = 0; r < rep.analyses.size(); ++r) {
    const Mat& ens = rep.analyses[r];
    const Eigen::Index M = ens.cols();
    if (M < 40) {
      std::cerr << "densities: skipping step " << rep.steps[r]
                << ", ensemble smaller than 40\n";
      continue;
    }
    for (Eigen::Index i = 0; i < ens.rows(); ++i) {
      const Vec s = ens.row(i).transpose();
      const double mean = s.mean();
      const double sd = std::sqrt((s.array() - mean).square().sum() /
                                  static_cast<double>(M - 1));
      if (!(sd > 0.0) || !std::isfinite(sd)) {
        std::cerr << "densities: skipping degenerate component " << i
                  << " at step " << rep.steps[r] << "\n";
        continue;
      }
      DensityCurve c;
      c.component = static_cast<int>(i);
      c.record = static_cast<int>(r);
      c.step = rep.steps[r];
      c.x = Vec::LinSpaced(200, mean - 4.0 * sd, mean + 4.0 * sd);
      c.pdf = silverman_kde(s, c.x);
      out.push_back(std::move(c));
    }
  }
  return out;
}

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path);
}

std::string data_csv_text(const std::vector<Vec>& data) {
  std::string s = "step,index,value\n";
  for (size_t k = 0; k < data.size(); ++k)
    for (Eigen::Index i = 0; i < data[k].size(); ++i) {
      s += std::to_string(k + 1);
      s += ',';
      s += std::to_string(i);
      s += ',';
      s += fmt17(data[k][i]);
      s += '\n';
    }
  return s;
}

std::string ensemble_csv_text(const Mat& ens) {
  std::string s;
  for (Eigen::Index j = 0; j < ens.cols(); ++j) {
    for (Eigen::Index i = 0; i < ens.rows(); ++i) {
      if (i) s += ',';
      s += fmt17(ens(i, j));
    }
    s += '\n';
  }
  return s;
}

Mat parse_ensemble_csv(const std::string& path, int dim) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    row.reserve(static_cast<size_t>(dim));
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (end == tok.c_str() || *end != '\0')
        throw std::runtime_error(path + ": bad number '" + tok + "'");
      row.push_back(v);
    }
    if (static_cast<int>(row.size()) != dim)
      throw std::runtime_error(path + ": expected " + std::to_string(dim) +
                               " columns");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(path + ": no members");
  Mat ens(dim, static_cast<Eigen::Index>(rows.size()));
  for (size_t j = 0; j < rows.size(); ++j)
    for (int i = 0; i < dim; ++i) ens(i, static_cast<Eigen::Index>(j)) = rows[j][i];
  return ens;
}

// Stage-one records whose step index reappears later keep their own file.
std::vector<bool> stage1_file_flags(const std::vector<int>& steps,
                                    int stage_one_records) {
  std::vector<bool> flags(steps.size(), false);
  for (int r = 0; r < stage_one_records && r < static_cast<int>(steps.size());
       ++r)
    for (size_t q = static_cast<size_t>(stage_one_records); q < steps.size(); ++q)
      if (steps[q] == steps[static_cast<size_t>(r)]) {
        flags[static_cast<size_t>(r)] = true;
        break;
      }
  return flags;
}

std::string ensemble_file_name(int step, bool stage1) {
  return (stage1 ? std::string("ensemble_stage1_step_")
                 : std::string("ensemble_step_")) +
         std::to_string(step) + ".csv";
}

int stage_one_record_count(const RunReport& rep, const StageConfig& sc,
                           RunMethod method) {
  if (method != RunMethod::TwoStage && method != RunMethod::NsTwoStage) return 0;
  const int start =
      sc.stage_two_start == StageTwoStart::FromFirstStep ? 1 : sc.I1 + 1;
  return static_cast<int>(rep.steps.size()) - (sc.I2 - start + 1);
}

nlohmann::ordered_json metrics_json(const ExperimentConfig& cfg,
                                    const std::string& method,
                                    int stage_one_records, const RunReport& rep,
                                    const Experiment::MetricSeries& errs) {
  nlohmann::ordered_json j;
  j["experiment"] = to_string(cfg.kind);
  j["method"] = method;
  j["seed"] = cfg.seed;
  j["truth_seed"] = cfg.truth_seed;
  j["threads"] = cfg.stage.threads;
  j["n_d"] = cfg.n_d();
  j["n_d_sigma2"] = cfg.n_d() * cfg.sigma * cfg.sigma;
  j["stage_one_records"] = stage_one_records;
  j["steps"] = rep.steps;
  j["sigma2"] = rep.sigma2;
  j["discrepancy"] = rep.forecast_discrepancy;
  nlohmann::ordered_json re;
  for (size_t i = 0; i < errs.names.size(); ++i) re[errs.names[i]] = errs.values[i];
  j["relative_errors"] = re;
  return j;
}

std::string intervals_csv_text(const std::vector<Experiment::IntervalTable>& tabs) {
  std::string s =
      "slice,step,time,coord,truth,mean,cred_lo,cred_hi,pred_lo,pred_hi,reliable\n";
  for (const auto& tab : tabs)
    for (Eigen::Index i = 0; i < tab.coord.size(); ++i) {
      s += tab.slice;
      s += ',';
      s += std::to_string(tab.step);
      s += ',';
      s += fmt17(tab.time);
      s += ',';
      s += fmt17(tab.coord[i]);
      s += ',';
      s += fmt17(tab.truth[i]);
      s += ',';
      s += fmt17(tab.mean[i]);
      s += ',';
      s += fmt17(tab.cred_lo[i]);
      s += ',';
      s += fmt17(tab.cred_hi[i]);
      s += ',';
      s += fmt17(tab.pred_lo[i]);
      s += ',';
      s += fmt17(tab.pred_hi[i]);
      s += ',';
      s += tab.reliable ? '1' : '0';
      s += '\n';
    }
  return s;
}

std::string densities_csv_text(const std::vector<DensityCurve>& curves) {
  std::string s = "component,record,step,x,pdf\n";
  for (const auto& c : curves)
    for (Eigen::Index i = 0; i < c.x.size(); ++i) {
      s += std::to_string(c.component);
      s += ',';
      s += std::to_string(c.record);
      s += ',';
      s += std::to_string(c.step);
      s += ',';
      s += fmt17(c.x[i]);
      s += ',';
      s += fmt17(c.pdf[i]);
      s += '\n';
    }
  return s;
}

void write_derived(const std::string& dir, const Experiment& exp,
                   const std::string& method, int stage_one_records,
                   const RunReport& rep) {
  const Experiment::MetricSeries errs = exp.relative_errors(rep);
  write_file(dir + "/metrics.json",
             metrics_json(exp.cfg(), method, stage_one_records, rep, errs).dump(2) +
                 "\n");
  write_file(dir + "/intervals.csv", intervals_csv_text(exp.intervals(rep)));
  write_file(dir + "/densities.csv", densities_csv_text(marginal_densities(rep)));
}

} // namespace

void write_data_artifacts(const Experiment& exp, const std::vector<Vec>& data,
                          const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir + "/config.echo", exp.cfg().canonical_text());
  write_file(dir + "/data.csv", data_csv_text(data));
}

void write_run_artifacts(const Experiment& exp, RunMethod method,
                         const RunReport& rep, const std::vector<Vec>& data,
                         const RunTimings& timings, const std::string& dir) {
  const auto t0 = Clock::now();
  std::filesystem::create_directories(dir);
  write_file(dir + "/config.echo", exp.cfg().canonical_text());
  write_file(dir + "/data.csv", data_csv_text(data));

  const int s1 = stage_one_record_count(rep, exp.cfg().stage, method);
  const std::vector<bool> stage1 = stage1_file_flags(rep.steps, s1);
  for (size_t r = 0; r < rep.analyses.size(); ++r)
    write_file(dir + "/" + ensemble_file_name(rep.steps[r], stage1[r]),
               ensemble_csv_text(rep.analyses[r]));

  write_derived(dir, exp, to_string(method), s1, rep);

  RunTimings t = timings;
  t.artifacts_seconds = seconds_since(t0);
  nlohmann::ordered_json tj;
  tj["data_seconds"] = t.data_seconds;
  tj["stage_one_seconds"] = t.stage_one_seconds;
  tj["stage_two_seconds"] = t.stage_two_seconds;
  tj["artifacts_seconds"] = t.artifacts_seconds;
  write_file(dir + "/timings.json", tj.dump(2) + "\n");
}

int report_run_dir(const std::string& dir) {
  try {
    Config raw = Config::parse_file(dir + "/config.echo");
    const ExperimentConfig cfg = ExperimentConfig::from_config(raw);
    Experiment exp(cfg);

    std::ifstream mf(dir + "/metrics.json");
    if (!mf) throw std::runtime_error("cannot read " + dir + "/metrics.json");
    const nlohmann::ordered_json j = nlohmann::ordered_json::parse(mf);

    RunReport rep;
    rep.steps = j.at("steps").get<std::vector<int>>();
    rep.sigma2 = j.at("sigma2").get<std::vector<double>>();
    rep.forecast_discrepancy = j.at("discrepancy").get<std::vector<double>>();
    const int s1 = j.at("stage_one_records").get<int>();
    const std::string method = j.at("method").get<std::string>();
    if (rep.steps.size() != rep.sigma2.size() ||
        rep.steps.size() != rep.forecast_discrepancy.size() || rep.steps.empty())
      throw std::runtime_error("metrics.json series lengths disagree");

    const std::vector<bool> stage1 = stage1_file_flags(rep.steps, s1);
    for (size_t r = 0; r < rep.steps.size(); ++r)
      rep.analyses.push_back(parse_ensemble_csv(
          dir + "/" + ensemble_file_name(rep.steps[r], stage1[r]), cfg.dim()));

    write_derived(dir, exp, method, s1, rep);
    std::cout << "report: rewrote metrics.json, intervals.csv, densities.csv in "
              << dir << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "report: " << e.what() << "\n";
    return 1;
  }
}

} // namespace tsenkf
