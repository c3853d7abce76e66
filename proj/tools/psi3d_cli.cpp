// psi3d command-line front end.
//
// Exit codes: 0 ok, 2 usage, 3 data/config error, 4 numerical or prior failure.
// Failures print one line to stderr:  error code=<n> kind=<kind> message="<text>"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "psi3d/psi3d.hpp"

namespace fs = std::filesystem;
using namespace psi3d;
using nlohmann::json;

namespace {

struct Failure {
  int code;
  std::string kind;
  std::string message;
};

std::string quote(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out;
}

int report(const Failure& f) {
  std::cerr << "error code=" << f.code << " kind=" << f.kind << " message=\"" << quote(f.message) << "\"\n";
  return f.code;
}

PhantomSpec phantom_spec_from_json(const json& j) {
  PhantomSpec p;
  try {
    if (j.contains("dims")) {
      const auto d = j.at("dims").get<std::vector<std::size_t>>();
      if (d.size() != 3) throw InvalidInput("phantom dims must be [D, H, W]");
      p.dims = {d[0], d[1], d[2]};
    }
    p.kind = parse_phantom_kind(j.value("kind", std::string("layered")));
    p.seed = j.value("seed", p.seed);
    p.layers = j.value("layers", p.layers);
    p.roughness = j.value("roughness", p.roughness);
    p.speckle = j.value("speckle", p.speckle);
    p.mean = j.value("mean", p.mean);
    p.variance = j.value("variance", p.variance);
    p.length_z = j.value("length_z", p.length_z);
    p.length_y = j.value("length_y", p.length_y);
    p.length_x = j.value("length_x", p.length_x);
    p.segments = j.value("segments", p.segments);
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("bad phantom spec: ") + e.what());
  }
  return p;
}

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw InvalidInput("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw InvalidInput("cannot parse " + path + ": " + e.what());
  }
}

int cmd_phantom(const std::string& spec_path, std::optional<std::uint64_t> seed, const std::string& out) {
  PhantomSpec spec = phantom_spec_from_json(read_json_file(spec_path));
  if (seed) spec.seed = *seed;
  const Volume v = generate_phantom(spec);
  io::VolumeMeta meta;
  meta.peak = spec.kind == PhantomKind::layered ? 1.0 : std::max(1.0, static_cast<double>(*std::max_element(v.data().begin(), v.data().end())));
  meta.provenance = {{"tool", "phantom"}, {"kind", to_string(spec.kind)}, {"seed", spec.seed}};
  io::write_volume(out, v, meta);
  return 0;
}

int cmd_degrade(const std::string& in, std::size_t factor, double sigma, std::uint64_t seed, const std::string& axes,
                const std::string& out) {
  io::VolumeMeta src;
  const Volume vol = io::read_volume(in, &src);
  const ForwardModel model = factor == 1 ? ForwardModel::identity(vol.height(), vol.width(), sigma)
                                         : ForwardModel::downsample(vol.height(), vol.width(), factor, sigma,
                                                                    parse_axes(axes));
  const Volume meas = degrade(model, vol, seed);
  io::VolumeMeta meta;
  meta.peak = src.peak;
  meta.forward = io::forward_json(model);
  meta.provenance = {{"tool", "degrade"}, {"seed", seed}, {"source", in}};
  io::write_volume(out, meas, meta);
  return 0;
}

int cmd_reconstruct(const std::string& meas_path, const std::string& config_path, const std::string& out_dir,
                    const std::string& resume, const std::string& prior_override, std::optional<std::size_t> threads,
                    bool quiet) {
  io::VolumeMeta meta;
  const Volume y = io::read_volume(meas_path, &meta);
  if (meta.forward.is_null()) throw InvalidInput(meas_path + " has no forward-model record in its sidecar");
  const ForwardModel model = io::forward_from_json(meta.forward);
  io::RunConfig cfg = config_path.empty() ? io::RunConfig{} : io::read_run_config(config_path);
  if (!prior_override.empty()) {
    if (prior_override.rfind("remote:", 0) == 0) {
      cfg.prior.kind = "remote";
      cfg.prior.address = prior_override;
    } else {
      cfg.prior.kind = prior_override;
    }
  }
  if (threads) cfg.chain.threads = *threads;
  fs::create_directories(out_dir);
  if (cfg.chain.checkpoint_path.empty()) cfg.chain.checkpoint_path = (fs::path(out_dir) / "checkpoint.ck").string();
  cfg.validate(y.depth());
  const auto prior = io::build_prior(cfg.prior, model.domain_height(), model.domain_width());

  std::ofstream progress(fs::path(out_dir) / "progress.log", resume.empty() ? std::ios::trunc : std::ios::app);
  ChainHooks hooks;
  hooks.progress = [&](const ProgressRecord& r) {
    const std::string line = format_progress(r);
    progress << line << '\n';
    progress.flush();
    if (!quiet) std::cout << line << '\n';
  };
  const fs::path sample_dir = fs::path(out_dir) / "samples";
  if (cfg.chain.keep_samples) fs::create_directories(sample_dir);
  const auto sample_meta = [&] {
    io::VolumeMeta m;
    m.peak = meta.peak;
    m.provenance = {{"tool", "reconstruct"}, {"seed", cfg.chain.seed}, {"measurement", meas_path}};
    return m;
  };
  hooks.on_sample = [&](std::size_t it, const Volume& x) {
    if (!cfg.chain.keep_samples) return;
    char name[32];
    std::snprintf(name, sizeof name, "iter_%06zu.f32", it);
    io::write_volume((sample_dir / name).string(), x, sample_meta());
  };

  std::optional<ChainState> start;
  if (!resume.empty()) start = load_checkpoint(resume);
  const ChainState state = run_chain(model, y, cfg.chain, *prior, hooks, std::move(start));
  const PosteriorSummary summary = posterior_mean_sd(state);
  io::write_volume((fs::path(out_dir) / "mean.f32").string(), summary.mean, sample_meta());
  io::write_volume((fs::path(out_dir) / "sd.f32").string(), summary.sd, sample_meta());
  std::ofstream(fs::path(out_dir) / "config.json") << io::to_json(cfg).dump(2) << '\n';
  return 0;
}

int cmd_metrics(const std::string& truth_path, const std::string& recon_path, const std::string& sd_path,
                const std::string& out, const std::string& csv, std::optional<double> peak_override) {
  io::VolumeMeta tm;
  const Volume truth = io::read_volume(truth_path, &tm);
  const Volume recon = io::read_volume(recon_path);
  std::optional<Volume> sd;
  if (!sd_path.empty()) sd = io::read_volume(sd_path);
  const double peak = peak_override.value_or(tm.peak);
  const MetricReport r = evaluate(fs::path(recon_path).filename().string(), truth, recon, peak, sd ? &*sd : nullptr);
  const std::string text = r.to_json().dump() + "\n";
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    std::ofstream os(out);
    if (!os) throw InvalidInput("cannot write " + out);
    os << text;
  }
  if (!csv.empty()) {
    const bool fresh = !fs::exists(csv);
    std::ofstream os(csv, std::ios::app);
    if (!os) throw InvalidInput("cannot write " + csv);
    if (fresh) os << MetricReport::csv_header() << '\n';
    os << r.csv_row() << '\n';
  }
  return 0;
}

int cmd_schedule_preview(std::size_t depth, std::size_t batch, std::size_t coverage, std::size_t budget,
                         std::uint64_t seed, bool sliding) {
  const CoverSpec spec{depth, batch, coverage, budget, seed};
  const BatchCover c = sliding ? sliding_window_cover(spec) : sample_cover(spec);
  std::cout << "depth=" << depth << " batch=" << batch << " coverage=" << coverage << " budget=" << budget
            << " seed=" << seed << " swaps=" << c.swaps << " fallback=" << (c.fallback ? 1 : 0) << '\n';
  std::cout << "starts:";
  for (std::size_t s : c.starts) std::cout << ' ' << s;
  std::cout << '\n';
  const std::size_t peak = *std::max_element(c.multiplicity.begin(), c.multiplicity.end());
  for (std::size_t z = 0; z < depth; ++z) {
    std::cout << std::setw(5) << z << ' ' << std::setw(3) << c.multiplicity[z] << ' '
              << std::string(c.multiplicity[z], '#') << std::string(peak - c.multiplicity[z], ' ')
              << (c.multiplicity[z] < coverage ? " UNDER" : "") << '\n';
  }
  return 0;
}

int cmd_baseline(const std::string& method, const std::string& in, const std::string& out,
                 std::optional<std::size_t> factor_override, double weight) {
  io::VolumeMeta meta;
  const Volume meas = io::read_volume(in, &meta);
  std::size_t factor = 1;
  DownsampleAxes axes = DownsampleAxes::both;
  if (!meta.forward.is_null()) {
    const ForwardModel m = io::forward_from_json(meta.forward);
    factor = m.kind() == ModelKind::identity ? 1 : m.factor();
    axes = m.axes();
  }
  if (factor_override) factor = *factor_override;
  Volume result;
  if (method == "bilinear") {
    result = bilinear(meas, factor, axes);
  } else if (method == "bicubic") {
    result = bicubic(meas, factor, axes);
  } else if (method == "tv3d") {
    // Upsample bicubically first when the input is a low-resolution measurement.
    const Volume base = factor > 1 ? bicubic(meas, factor, axes) : meas;
    result = tv3d_denoise(base, Tv3dParams{weight}).u;
  } else {
    throw InvalidInput("unknown baseline method '" + method + "' (bilinear, bicubic, tv3d)");
  }
  io::VolumeMeta om;
  om.peak = meta.peak;
  om.provenance = {{"tool", "baseline"}, {"method", method}, {"source", in}};
  io::write_volume(out, result, om);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"psi3d: split-Gibbs plug-and-play sampler for 3D linear inverse problems"};
  app.require_subcommand(1);

  std::string spec_path, out, in, axes = "yx", meas, config, out_dir, resume, prior, truth, recon, sd, csv, method;
  std::optional<std::uint64_t> seed_opt;
  std::optional<std::size_t> threads, factor_opt;
  std::optional<double> peak;
  std::uint64_t seed = 0;
  std::size_t factor = 2, depth = 0, batch = 0, coverage = 1, budget = 0;
  double sigma = 0.0, weight = 0.1;
  bool quiet = false, sliding = false;

  auto* ph = app.add_subcommand("phantom", "generate a synthetic volume");
  ph->add_option("--spec", spec_path, "phantom spec (JSON)")->required();
  ph->add_option("--seed", seed_opt, "override the seed in the phantom spec");
  ph->add_option("--out", out, "output volume")->required();

  auto* dg = app.add_subcommand("degrade", "apply the forward model and add noise");
  dg->add_option("--in", in, "input volume")->required();
  dg->add_option("--factor", factor, "downsampling factor (1 = identity)")->check(CLI::PositiveNumber);
  dg->add_option("--sigma", sigma, "noise SD")->check(CLI::NonNegativeNumber);
  dg->add_option("--seed", seed, "noise seed");
  dg->add_option("--axes", axes, "downsampled axes: yx, y or x");
  dg->add_option("--out", out, "output measurement")->required();

  auto* rc = app.add_subcommand("reconstruct", "run the sampler");
  rc->add_option("--meas", meas, "measurement volume")->required();
  rc->add_option("--config", config, "run config (JSON)");
  rc->add_option("--out-dir", out_dir, "output directory")->required();
  rc->add_option("--resume", resume, "resume from checkpoint");
  rc->add_option("--prior", prior, "prior override: isotropic, fit, score_gaussian or remote:<host>:<port>");
  rc->add_option("--threads", threads, "worker threads");
  rc->add_flag("--quiet", quiet, "do not echo progress");

  auto* mt = app.add_subcommand("metrics", "compare a reconstruction to ground truth");
  mt->add_option("--truth", truth, "ground-truth volume")->required();
  mt->add_option("--recon", recon, "reconstruction")->required();
  mt->add_option("--sd", sd, "posterior SD volume");
  mt->add_option("--peak", peak, "peak value (default from truth sidecar)");
  mt->add_option("--out", out, "report file (default stdout)");
  mt->add_option("--csv", csv, "append a CSV row here");

  auto* sp = app.add_subcommand("schedule-preview", "print a batch cover");
  sp->add_option("--depth", depth)->required();
  sp->add_option("--batch", batch)->required();
  sp->add_option("--coverage", coverage);
  sp->add_option("--budget", budget)->required();
  sp->add_option("--seed", seed);
  sp->add_flag("--sliding", sliding, "deterministic sliding-window cover");

  auto* bl = app.add_subcommand("baseline", "baseline reconstruction");
  bl->add_option("--method", method, "bilinear, bicubic or tv3d")->required();
  bl->add_option("--meas", in, "measurement volume")->required();
  bl->add_option("--out", out, "output volume")->required();
  bl->add_option("--factor", factor_opt, "override upsampling factor");
  bl->add_option("--weight", weight, "tv3d weight");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report({2, "usage", e.what()});
  }

  try {
    if (*ph) return cmd_phantom(spec_path, seed_opt, out);
    if (*dg) return cmd_degrade(in, factor, sigma, seed, axes, out);
    if (*rc) return cmd_reconstruct(meas, config, out_dir, resume, prior, threads, quiet);
    if (*mt) return cmd_metrics(truth, recon, sd, out, csv, peak);
    if (*sp) return cmd_schedule_preview(depth, batch, coverage, budget, seed, sliding);
    if (*bl) return cmd_baseline(method, in, out, factor_opt, weight);
  } catch (const ChainAborted& e) {
    std::string msg = e.what();
    if (!e.checkpoint().empty()) msg += " (checkpoint " + e.checkpoint() + ")";
    return report({4, "chain_aborted", msg});
  } catch (const PriorUnavailable& e) {
    return report({4, "prior_unavailable", e.what()});
  } catch (const NumericalError& e) {
    return report({4, "numerical", e.what()});
  } catch (const ProtocolError& e) {
    return report({4, "protocol", e.what()});
  } catch (const UnsupportedOperator& e) {
    return report({3, "unsupported", e.what()});
  } catch (const InvalidInput& e) {
    return report({3, "invalid_input", e.what()});
  } catch (const std::filesystem::filesystem_error& e) {
    return report({3, "io", e.what()});
  } catch (const std::exception& e) {
    return report({4, "internal", e.what()});
  }
  return report({2, "usage", "no subcommand"});
}
