#pragma once

// Volume files: raw little-endian f32 payload in (z, y, x) order plus a JSON
// sidecar at <path>.json. Run configurations are JSON as well.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "psi3d/binary.hpp"
#include "psi3d/errors.hpp"
#include "psi3d/forward_model.hpp"
#include "psi3d/phantom.hpp"
#include "psi3d/prior.hpp"
#include "psi3d/remote_prior.hpp"
#include "psi3d/sampler.hpp"
#include "psi3d/volume.hpp"

namespace psi3d::io {

using nlohmann::json;

struct VolumeMeta {
  Dims dims;
  double peak = 1.0;
  json provenance = json::object();
  json forward;  ///< null when not a measurement

  json to_json() const {
    json j{{"dims", {dims.depth, dims.height, dims.width}},
           {"dtype", "f32le"},
           {"order", "zyx"},
           {"peak", peak},
           {"provenance", provenance}};
    if (!forward.is_null()) j["forward"] = forward;
    return j;
  }

  static VolumeMeta from_json(const json& j) {
    VolumeMeta m;
    try {
      const auto d = j.at("dims").get<std::vector<std::size_t>>();
      if (d.size() != 3) throw InvalidInput("sidecar dims must have 3 entries");
      m.dims = {d[0], d[1], d[2]};
      if (j.at("dtype").get<std::string>() != "f32le")
        throw InvalidInput("unsupported dtype '" + j.at("dtype").get<std::string>() + "'");
      if (j.at("order").get<std::string>() != "zyx")
        throw InvalidInput("unsupported order '" + j.at("order").get<std::string>() + "'");
      m.peak = j.value("peak", 1.0);
      m.provenance = j.value("provenance", json::object());
      if (j.contains("forward")) m.forward = j.at("forward");
    } catch (const json::exception& e) {
      throw InvalidInput(std::string("bad volume sidecar: ") + e.what());
    }
    return m;
  }
};

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

inline void write_volume(const std::string& path, const Volume& v, VolumeMeta meta = {}) {
  meta.dims = v.dims();
  binary::Writer w;
  w.bytes().reserve(v.size() * 4);
  for (float f : v.data()) w.put_f32(f);
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw InvalidInput("cannot write " + path);
    os.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
    if (!os) throw InvalidInput("write failed: " + path);
  }
  std::ofstream js(sidecar_path(path), std::ios::trunc);
  if (!js) throw InvalidInput("cannot write " + sidecar_path(path));
  js << meta.to_json().dump(2) << '\n';
}

inline VolumeMeta read_meta(const std::string& path) {
  std::ifstream js(sidecar_path(path));
  if (!js) throw InvalidInput("missing sidecar " + sidecar_path(path));
  try {
    return VolumeMeta::from_json(json::parse(js));
  } catch (const json::parse_error& e) {
    throw InvalidInput("cannot parse " + sidecar_path(path) + ": " + e.what());
  }
}

inline Volume read_volume(const std::string& path, VolumeMeta* meta_out = nullptr) {
  const VolumeMeta meta = read_meta(path);
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw InvalidInput("cannot stat " + path + ": " + ec.message());
  if (bytes != meta.dims.size() * 4)
    throw InvalidInput(path + ": payload is " + std::to_string(bytes) + " bytes, sidecar dims " + meta.dims.str() +
                       " need " + std::to_string(meta.dims.size() * 4));
  std::ifstream is(path, std::ios::binary);
  std::vector<unsigned char> raw(bytes);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw InvalidInput("read failed: " + path);
  binary::Reader r(raw);
  std::vector<float> data(meta.dims.size());
  for (float& f : data) f = r.get_f32();
  if (meta_out) *meta_out = meta;
  return Volume(meta.dims, std::move(data));
}

// ---------------------------------------------------------------------------
// Run configuration

struct PriorConfig {
  /// "isotropic" (mean, variance), "fit" (training files, nugget),
  /// "score_gaussian" (isotropic score through the reverse sampler),
  /// "remote" (address).
  std::string kind = "isotropic";
  double mean = 0.5;
  double variance = 0.05;
  std::vector<std::string> training;
  double nugget = 0.05;
  std::string address;
  std::size_t timeout_ms = 30000;
  std::size_t retries = 3;
  EdmParams edm;
};

struct RunConfig {
  ChainConfig chain;
  PriorConfig prior;

  void validate(std::size_t depth) const { chain.validate(depth); }
};

inline std::string to_string(ChurnMode m) {
  switch (m) {
    case ChurnMode::none: return "none";
    case ChurnMode::classic: return "classic";
    case ChurnMode::reverse_sde: return "reverse_sde";
  }
  return "?";
}

inline ChurnMode parse_churn(const std::string& s) {
  if (s == "none") return ChurnMode::none;
  if (s == "classic") return ChurnMode::classic;
  if (s == "reverse_sde") return ChurnMode::reverse_sde;
  throw InvalidInput("unknown churn mode '" + s + "'");
}

inline json schedule_json(const AnnealSchedule& s) { return {{"start", s.start}, {"end", s.end}, {"steps", s.steps}}; }

inline AnnealSchedule schedule_from(const json& j, AnnealSchedule def) {
  def.start = j.value("start", def.start);
  def.end = j.value("end", def.end);
  def.steps = j.value("steps", def.steps);
  return def;
}

inline json to_json(const RunConfig& c) {
  const ChainConfig& k = c.chain;
  const PriorConfig& p = c.prior;
  json edm{{"steps", p.edm.steps},
           {"sigma_min", p.edm.sigma_min},
           {"sigma_max", p.edm.sigma_max},
           {"rho_exponent", p.edm.rho_exponent},
           {"churn", to_string(p.edm.churn)},
           {"s_churn", p.edm.s_churn},
           {"s_tmin", p.edm.s_tmin},
           {"s_tmax", p.edm.s_tmax},
           {"s_noise", p.edm.s_noise}};
  return json{
      {"iterations", k.iterations},
      {"burn_in", k.burn_in},
      {"sample_every", k.sample_every},
      {"collect", k.collect},
      {"rho_d", schedule_json(k.rho_d)},
      {"rho_tv", schedule_json(k.rho_tv)},
      {"cover",
       {{"batch", k.batch_size},
        {"coverage", k.coverage},
        {"budget", k.budget},
        {"refresh", k.cover_refresh == CoverRefresh::once ? "once" : "every_iteration"},
        {"method", k.cover_method == CoverMethod::sliding_window ? "sliding_window" : "randomized"}}},
      {"tv_lambda", k.tv_lambda},
      {"seed", k.seed},
      {"threads", k.threads},
      {"checkpoint_every", k.checkpoint_every},
      {"keep_samples", k.keep_samples},
      {"prior",
       {{"kind", p.kind},
        {"mean", p.mean},
        {"variance", p.variance},
        {"training", p.training},
        {"nugget", p.nugget},
        {"address", p.address},
        {"timeout_ms", p.timeout_ms},
        {"retries", p.retries},
        {"edm", edm}}},
  };
}

/// Missing keys keep their defaults; unknown top-level keys are rejected.
inline RunConfig run_config_from_json(const json& j) {
  static const std::vector<std::string> known = {"iterations", "burn_in",   "sample_every", "collect",
                                                 "rho_d",      "rho_tv",    "cover",        "tv_lambda",
                                                 "seed",       "threads",   "checkpoint_every", "keep_samples",
                                                 "prior"};
  if (!j.is_object()) throw InvalidInput("run config must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end()) throw InvalidInput("unknown config key '" + key + "'");
  RunConfig c;
  ChainConfig& k = c.chain;
  try {
    k.iterations = j.value("iterations", k.iterations);
    k.burn_in = j.value("burn_in", k.burn_in);
    k.sample_every = j.value("sample_every", k.sample_every);
    k.collect = j.value("collect", k.collect);
    if (j.contains("rho_d")) k.rho_d = schedule_from(j["rho_d"], k.rho_d);
    if (j.contains("rho_tv")) k.rho_tv = schedule_from(j["rho_tv"], k.rho_tv);
    if (j.contains("cover")) {
      const json& cv = j["cover"];
      k.batch_size = cv.value("batch", k.batch_size);
      k.coverage = cv.value("coverage", k.coverage);
      k.budget = cv.value("budget", k.budget);
      const std::string refresh = cv.value("refresh", std::string("every_iteration"));
      if (refresh != "once" && refresh != "every_iteration") throw InvalidInput("unknown cover refresh '" + refresh + "'");
      k.cover_refresh = refresh == "once" ? CoverRefresh::once : CoverRefresh::every_iteration;
      const std::string method = cv.value("method", std::string("randomized"));
      if (method != "randomized" && method != "sliding_window") throw InvalidInput("unknown cover method '" + method + "'");
      k.cover_method = method == "sliding_window" ? CoverMethod::sliding_window : CoverMethod::randomized;
    }
    k.tv_lambda = j.value("tv_lambda", k.tv_lambda);
    k.seed = j.value("seed", k.seed);
    k.threads = j.value("threads", k.threads);
    k.checkpoint_every = j.value("checkpoint_every", k.checkpoint_every);
    k.keep_samples = j.value("keep_samples", k.keep_samples);
    if (j.contains("prior")) {
      const json& pj = j["prior"];
      PriorConfig& p = c.prior;
      p.kind = pj.value("kind", p.kind);
      p.mean = pj.value("mean", p.mean);
      p.variance = pj.value("variance", p.variance);
      p.training = pj.value("training", p.training);
      p.nugget = pj.value("nugget", p.nugget);
      p.address = pj.value("address", p.address);
      p.timeout_ms = pj.value("timeout_ms", p.timeout_ms);
      p.retries = pj.value("retries", p.retries);
      if (pj.contains("edm")) {
        const json& e = pj["edm"];
        p.edm.steps = e.value("steps", p.edm.steps);
        p.edm.sigma_min = e.value("sigma_min", p.edm.sigma_min);
        p.edm.sigma_max = e.value("sigma_max", p.edm.sigma_max);
        p.edm.rho_exponent = e.value("rho_exponent", p.edm.rho_exponent);
        p.edm.churn = parse_churn(e.value("churn", to_string(p.edm.churn)));
        p.edm.s_churn = e.value("s_churn", p.edm.s_churn);
        p.edm.s_tmin = e.value("s_tmin", p.edm.s_tmin);
        p.edm.s_tmax = e.value("s_tmax", p.edm.s_tmax);
        p.edm.s_noise = e.value("s_noise", p.edm.s_noise);
      }
      static const std::vector<std::string> kinds = {"isotropic", "fit", "score_gaussian", "remote"};
      if (std::find(kinds.begin(), kinds.end(), p.kind) == kinds.end())
        throw InvalidInput("unknown prior kind '" + p.kind + "'");
    }
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("bad run config: ") + e.what());
  }
  return c;
}

inline RunConfig read_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput("cannot open config " + path);
  try {
    return run_config_from_json(json::parse(is));
  } catch (const json::parse_error& e) {
    throw InvalidInput("cannot parse config " + path + ": " + e.what());
  }
}

inline json forward_json(const ForwardModel& m) {
  return {{"kind", m.kind() == ModelKind::identity ? "identity" : "downsample"},
          {"factor", m.factor()},
          {"axes", to_string(m.axes())},
          {"sigma", m.noise_sigma()},
          {"domain", {m.domain_height(), m.domain_width()}}};
}

/// Rebuilds the forward model recorded in a measurement sidecar.
inline ForwardModel forward_from_json(const json& j) {
  try {
    const std::string kind = j.at("kind").get<std::string>();
    const auto dom = j.at("domain").get<std::vector<std::size_t>>();
    if (dom.size() != 2) throw InvalidInput("forward domain must have 2 entries");
    const double sigma = j.at("sigma").get<double>();
    if (kind == "identity") return ForwardModel::identity(dom[0], dom[1], sigma);
    if (kind == "downsample")
      return ForwardModel::downsample(dom[0], dom[1], j.at("factor").get<std::size_t>(), sigma,
                                      parse_axes(j.at("axes").get<std::string>()));
    throw InvalidInput("unknown forward kind '" + kind + "'");
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("bad forward record: ") + e.what());
  }
}

/// Instantiates the configured prior for slices of height x width.
inline std::shared_ptr<const PriorSampler> build_prior(const PriorConfig& p, std::size_t height, std::size_t width) {
  const auto h = static_cast<Eigen::Index>(height), w = static_cast<Eigen::Index>(width);
  if (p.kind == "isotropic") return std::make_shared<GaussianAnalyticPrior>(
      GaussianAnalyticPrior::isotropic(Plane::Constant(h, w, p.mean), p.variance));
  if (p.kind == "score_gaussian") {
    auto g = std::make_shared<GaussianAnalyticPrior>(
        GaussianAnalyticPrior::isotropic(Plane::Constant(h, w, p.mean), p.variance));
    return std::make_shared<ScorePrior>([g](const Plane& u, double sigma) { return g->score(u, sigma); }, p.edm);
  }
  if (p.kind == "fit") {
    if (p.training.empty()) throw InvalidInput("prior kind 'fit' needs training volumes");
    std::vector<Volume> vols;
    for (const std::string& path : p.training) vols.push_back(read_volume(path));
    auto prior = std::make_shared<GaussianAnalyticPrior>(fit_gaussian_prior(vols, p.nugget));
    if (prior->height() != height || prior->width() != width)
      throw InvalidInput("training slices are " + std::to_string(prior->height()) + "x" +
                         std::to_string(prior->width()) + ", reconstruction needs " + std::to_string(height) + "x" +
                         std::to_string(width));
    return prior;
  }
  if (p.kind == "remote") {
    auto [host, port] = bridge::parse_remote_address(p.address);
    bridge::RemoteOptions opts;
    opts.timeout = std::chrono::milliseconds(p.timeout_ms);
    opts.retries = p.retries;
    return std::make_shared<bridge::RemotePrior>(host, port, opts);
  }
  throw InvalidInput("unknown prior kind '" + p.kind + "'");
}

}  // namespace psi3d::io
