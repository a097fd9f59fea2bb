#include "csmamba/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "csmamba/cassi.hpp"
#include "csmamba/hqs.hpp"
#include "csmamba/io.hpp"
#include "csmamba/metrics.hpp"
#include "csmamba/scan_order.hpp"
#include "csmamba/training.hpp"

namespace csm::cli {

namespace {

struct SimulateArgs {
  std::string cube, mask, out;
  std::size_t shift = 2;
  int noise_bits = 0;
  std::uint64_t seed = 0;
};

struct ModelArgs {
  std::string config;
  std::optional<std::size_t> stages;
  std::optional<double> mask_ratio;
  std::uint64_t seed = 0;
};

struct ReconstructArgs {
  std::string meas, mask, weights, out;
  std::size_t shift = 2;
  std::optional<std::size_t> bands;
  ModelArgs model;
};

struct TrainArgs {
  std::vector<std::string> cubes;
  std::string data_dir, mask, out;
  std::size_t crop = 0;
  std::size_t bands = 0;
  std::optional<std::uint64_t> crop_seed;
  std::size_t shift = 2;
  std::size_t log_every = 50;
  bool resample_mask = false;
  ModelArgs model;
  train::TrainConfig tc;
};

struct EvalArgs {
  std::string ref, test, format = "kv";
  std::optional<double> range;
};

struct ExportArgs {
  std::string cube, out;
  std::size_t band = 0;
};

struct DumpArgs {
  std::string kind = "global";
  std::size_t height = 0, width = 0, channels = 1, patch = 4;
  std::string cube = "2x2x4";
  bool reverse = false;
};

void add_model_options(CLI::App* cmd, ModelArgs& m) {
  cmd->add_option("--config", m.config, "network profile (key=value lines)");
  cmd->add_option("--stages", m.stages, "number of unfolding stages (overrides the profile)");
  cmd->add_option("--mask-ratio", m.mask_ratio, "feature-mask zero ratio (overrides the profile)")
      ->check(CLI::Range(0.0, 0.999999));
  cmd->add_option("--seed", m.seed, "initialization seed");
}

io::Profile resolve_profile(const ModelArgs& m) {
  io::Profile p = m.config.empty() ? io::Profile{} : io::load_profile(m.config);
  if (m.stages) p.unfold.stages = *m.stages;
  if (m.mask_ratio) p.mask_ratio = *m.mask_ratio;
  return p;
}

std::size_t infer_bands(const cassi::Measurement& y, const cassi::CodedMask& mask, std::size_t shift,
                        std::optional<std::size_t> bands) {
  if (y.height != mask.height || y.width < mask.width) {
    throw std::runtime_error("measurement " + std::to_string(y.height) + "x" + std::to_string(y.width) +
                             " does not fit mask " + std::to_string(mask.height) + "x" +
                             std::to_string(mask.width));
  }
  const std::size_t extra = y.width - mask.width;
  std::size_t n = 0;
  if (shift == 0) {
    if (!bands) throw std::runtime_error("--bands is required when --d is 0");
    if (extra != 0) throw std::runtime_error("measurement width must equal mask width when --d is 0");
    n = *bands;
  } else {
    if (extra % shift != 0) throw std::runtime_error("measurement width is inconsistent with --d");
    n = extra / shift + 1;
    if (bands && *bands != n) {
      throw std::runtime_error("--bands " + std::to_string(*bands) + " disagrees with the measurement (" +
                               std::to_string(n) + " bands)");
    }
  }
  return n;
}

int do_simulate(const SimulateArgs& a, std::ostream& out) {
  const cassi::HsiCube cube = io::load_cube(a.cube);
  const cassi::CodedMask mask = io::load_mask(a.mask);
  if (mask.height != cube.height || mask.width != cube.width) {
    throw std::runtime_error("mask dimensions do not match the cube");
  }
  const cassi::SensingOperator op(mask, a.shift, cube.bands);
  cassi::Measurement y = cassi::forward_project(cube, op);
  if (a.noise_bits > 0) y = cassi::add_shot_noise(y, a.noise_bits, a.seed);
  io::save_measurement(y, a.out);
  out << "wrote " << a.out << " (" << y.height << "x" << y.width << ")\n";
  return kExitOk;
}

int do_reconstruct(const ReconstructArgs& a, std::ostream& out) {
  const cassi::Measurement y = io::load_measurement(a.meas);
  const cassi::CodedMask mask = io::load_mask(a.mask);
  const std::size_t bands = infer_bands(y, mask, a.shift, a.bands);
  const cassi::SensingOperator op(mask, a.shift, bands);
  const io::Profile profile = resolve_profile(a.model);

  net::ModelWeights weights;
  std::optional<train::FeatureMask> fmask;
  if (!a.weights.empty()) {
    io::WeightsFile wf = io::load_weights(a.weights);
    if (wf.config_digest != io::config_digest(profile.unfold, bands)) {
      throw std::runtime_error("weights in '" + a.weights +
                               "' were saved for a different network configuration or band count");
    }
    weights = std::move(wf.weights);
    fmask = train::take_mask(weights);
  } else {
    weights = hqs::init_model(profile.unfold, bands, a.model.seed);
    if (profile.mask_ratio) {
      fmask = train::generate_mask(mask.height, mask.width, *profile.mask_ratio, profile.mask_seed);
    }
  }
  if (profile.unfold.stages > 0) profile.unfold.denoiser.validate(mask.height, mask.width);
  if (fmask && (fmask->height != mask.height || fmask->width != mask.width)) {
    throw std::runtime_error("stored feature mask does not match the measurement size");
  }
  const cassi::HsiCube rec =
      hqs::reconstruct(y, op, weights, profile.unfold, fmask ? &fmask->values : nullptr);
  io::save_cube(rec, a.out);
  out << "wrote " << a.out << " (" << rec.height << "x" << rec.width << "x" << rec.bands << ")\n";
  if (fmask) out << "mask_digest=" << fmask->digest() << "\n";
  return kExitOk;
}

int do_train(TrainArgs a, std::ostream& out) {
  std::vector<cassi::HsiCube> cubes;
  for (const auto& p : a.cubes) cubes.push_back(io::load_cube(p));
  if (!a.data_dir.empty()) {
    if (a.crop == 0 || a.bands == 0) throw std::runtime_error("--data requires --crop and --bands");
    auto more = io::ingest_dataset(a.data_dir, a.crop, a.bands, a.crop_seed);
    std::move(more.begin(), more.end(), std::back_inserter(cubes));
  }
  if (cubes.empty()) throw std::runtime_error("no training cubes given (use --cube or --data)");
  const cassi::CodedMask mask = io::load_mask(a.mask);
  const std::size_t bands = cubes.front().bands;
  for (const auto& c : cubes) {
    if (c.height != mask.height || c.width != mask.width || c.bands != bands) {
      throw std::runtime_error("training cubes must share the mask size and band count");
    }
  }
  const io::Profile profile = resolve_profile(a.model);
  profile.unfold.denoiser.validate(mask.height, mask.width);

  const cassi::SensingOperator op(mask, a.shift, bands);
  std::vector<train::Sample> data;
  for (auto& c : cubes) data.push_back({std::move(c), op});

  a.tc.resample_mask = a.resample_mask;
  if (profile.mask_ratio) {
    a.tc.zero_ratio = *profile.mask_ratio;
    a.tc.mask_seed = profile.mask_seed;
  }
  train::Trainer trainer(profile.unfold, a.tc, hqs::init_model(profile.unfold, bands, a.model.seed),
                         profile.mask_ratio.has_value());
  const auto fmt = [](double v) {
    std::ostringstream s;
    s << std::setprecision(9) << v;
    return s.str();
  };
  const auto results = trainer.run(data, [&](std::size_t k, const train::StepResult& r) {
    if (a.log_every > 0 && (k % a.log_every == 0 || k + 1 == a.tc.steps)) {
      out << "step=" << k << " loss=" << fmt(r.loss) << " lr=" << fmt(r.learning_rate)
          << " grad_norm=" << fmt(r.grad_norm) << "\n";
    }
  });
  const double final_loss = train::evaluate_loss(
      data, trainer.weights(), profile.unfold, trainer.mask() ? &*trainer.mask() : nullptr);

  io::WeightsFile wf{io::config_digest(profile.unfold, bands), trainer.weights()};
  if (trainer.mask()) train::store_mask(wf.weights, *trainer.mask());
  io::save_weights(wf, a.out);
  if (!results.empty()) out << "loss_initial=" << fmt(results.front().loss) << "\n";
  out << "loss_final=" << fmt(final_loss) << "\n";
  if (trainer.mask()) out << "mask_digest=" << trainer.mask()->digest() << "\n";
  out << "wrote " << a.out << "\n";
  return kExitOk;
}

int do_eval(const EvalArgs& a, std::ostream& out) {
  const cassi::HsiCube ref = io::load_cube(a.ref);
  const cassi::HsiCube test = io::load_cube(a.test);
  const metrics::MetricReport rep = metrics::evaluate(ref, test, a.range);
  out << std::fixed << std::setprecision(6);
  if (a.format == "table") {
    out << "band      psnr_db      ssim\n";
    for (std::size_t b = 0; b < rep.psnr_per_band.size(); ++b) {
      out << std::setw(4) << b << "  " << std::setw(11) << rep.psnr_per_band[b] << "  " << std::setw(8)
          << rep.ssim_per_band[b] << "\n";
    }
    out << "mean  " << std::setw(11) << rep.psnr_mean << "  " << std::setw(8) << rep.ssim_mean << "\n";
    out << "data_range " << rep.data_range << "\n";
  } else {
    for (std::size_t b = 0; b < rep.psnr_per_band.size(); ++b) {
      out << "band=" << b << " psnr=" << rep.psnr_per_band[b] << " ssim=" << rep.ssim_per_band[b] << "\n";
    }
    out << "psnr_mean=" << rep.psnr_mean << " ssim_mean=" << rep.ssim_mean << "\n";
    out << "data_range=" << rep.data_range << "\n";
  }
  return kExitOk;
}

int do_export(const ExportArgs& a, std::ostream& out) {
  const cassi::HsiCube cube = io::load_cube(a.cube);
  io::export_band(cube, a.band, a.out);
  out << "wrote " << a.out << " (" << cube.width << "x" << cube.height << ")\n";
  return kExitOk;
}

scan::CubeSpec parse_cube(const std::string& text, std::size_t patch) {
  const io::Profile p = io::parse_profile("cube=" + text + "\npatch=" + std::to_string(patch));
  scan::CubeSpec spec = p.unfold.denoiser.cube;
  spec.patch = patch;
  return spec;
}

int do_dump(const DumpArgs& a, std::ostream& out) {
  scan::ScanOrder order;
  if (a.kind == "global") {
    order = scan::global_order(a.height, a.width, a.reverse);
  } else if (a.kind == "local") {
    order = scan::local_patch_order(a.height, a.width, a.patch, a.reverse);
  } else if (a.kind == "cross") {
    order = scan::cross_cube_order(a.height, a.width, a.channels, parse_cube(a.cube, a.patch));
  } else {
    order = scan::spectral_pixel_order(a.height, a.width, a.channels);
  }
  const scan::OrderReport rep = scan::validate_order(order);
  out << "order=" << order.descriptor().to_string() << "\n";
  out << "length=" << order.length() << " is_bijection=" << (rep.is_bijection ? "true" : "false")
      << " max_neighbor_distance=" << rep.max_neighbor_distance << "\n";
  for (std::size_t i = 0; i < order.length(); ++i) out << (i ? " " : "") << order[i];
  out << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Coded-aperture spectral imaging: simulation, unfolding reconstruction, training, evaluation"};
  app.name("csmamba");
  app.require_subcommand(1);

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "project a cube through the coded aperture");
  c_sim->add_option("--cube", sim.cube, "input cube (.hsic)")->required();
  c_sim->add_option("--mask", sim.mask, "coded mask (.hsic)")->required();
  c_sim->add_option("--out", sim.out, "output measurement (.hsic)")->required();
  c_sim->add_option("--d", sim.shift, "dispersion shift per band, in pixels")->capture_default_str();
  c_sim->add_option("--noise-bits", sim.noise_bits, "shot-noise bit depth (0 disables)")
      ->check(CLI::Range(0, 16))
      ->capture_default_str();
  c_sim->add_option("--seed", sim.seed, "noise seed")->capture_default_str();

  ReconstructArgs rec;
  auto* c_rec = app.add_subcommand("reconstruct", "recover a cube from a measurement");
  c_rec->add_option("--meas", rec.meas, "measurement (.hsic)")->required();
  c_rec->add_option("--mask", rec.mask, "coded mask (.hsic)")->required();
  c_rec->add_option("--out", rec.out, "output cube (.hsic)")->required();
  c_rec->add_option("--weights", rec.weights, "trained weights (.csmw); seeded init when omitted");
  c_rec->add_option("--d", rec.shift, "dispersion shift per band")->capture_default_str();
  c_rec->add_option("--bands", rec.bands, "band count (required when --d is 0)");
  add_model_options(c_rec, rec.model);

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "fit the unfolding network on simulated measurements");
  c_tr->add_option("--cube", tr.cubes, "training cube (.hsic), repeatable");
  c_tr->add_option("--data", tr.data_dir, "directory of training cubes");
  c_tr->add_option("--crop", tr.crop, "crop size for --data");
  c_tr->add_option("--bands", tr.bands, "leading bands kept for --data");
  c_tr->add_option("--crop-seed", tr.crop_seed, "random crops from this seed (centre crops otherwise)");
  c_tr->add_option("--mask", tr.mask, "coded mask (.hsic)")->required();
  c_tr->add_option("--out", tr.out, "output weights (.csmw)")->required();
  c_tr->add_option("--d", tr.shift, "dispersion shift per band")->capture_default_str();
  c_tr->add_option("--steps", tr.tc.steps, "gradient steps")->capture_default_str();
  c_tr->add_option("--lr", tr.tc.learning_rate, "initial learning rate")->capture_default_str();
  c_tr->add_option("--min-lr-fraction", tr.tc.min_lr_fraction, "cosine floor as a fraction of --lr")
      ->capture_default_str();
  c_tr->add_option("--batch", tr.tc.batch_size, "samples per step")->capture_default_str();
  c_tr->add_option("--clip", tr.tc.clip_norm, "gradient-norm clip (0 disables)")->capture_default_str();
  c_tr->add_option("--noise-bits", tr.tc.noise_bits, "shot noise on training measurements (0 disables)")
      ->check(CLI::Range(0, 16));
  c_tr->add_option("--noise-seed", tr.tc.noise_seed, "shot-noise seed");
  c_tr->add_option("--log-every", tr.log_every, "progress interval in steps (0 silences)")
      ->capture_default_str();
  c_tr->add_flag("--resample-mask", tr.resample_mask, "experimental: draw a new feature mask every step");
  add_model_options(c_tr, tr.model);

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "PSNR / SSIM of a reconstruction against a reference");
  c_ev->add_option("--ref", ev.ref, "reference cube (.hsic)")->required();
  c_ev->add_option("--test", ev.test, "test cube (.hsic)")->required();
  c_ev->add_option("--range", ev.range, "data range (reference maximum by default)");
  c_ev->add_option("--format", ev.format, "kv or table")
      ->check(CLI::IsMember({"kv", "table"}))
      ->capture_default_str();

  ExportArgs ex;
  auto* c_ex = app.add_subcommand("export-band", "write one band as a binary PGM");
  c_ex->add_option("--cube", ex.cube, "cube (.hsic)")->required();
  c_ex->add_option("--band", ex.band, "band index")->required();
  c_ex->add_option("--out", ex.out, "output image (.pgm)")->required();

  DumpArgs du;
  auto* c_du = app.add_subcommand("dump-scan-order", "print a scan permutation and its locality report");
  c_du->add_option("--kind", du.kind, "global, local, cross or spectral")
      ->check(CLI::IsMember({"global", "local", "cross", "spectral"}))
      ->capture_default_str();
  c_du->add_option("--height", du.height)->required();
  c_du->add_option("--width", du.width)->required();
  c_du->add_option("--channels", du.channels, "channels (cross, spectral)")->capture_default_str();
  c_du->add_option("--patch", du.patch, "patch side (local, cross)")->capture_default_str();
  c_du->add_option("--cube", du.cube, "cube h x w x c (cross)")->capture_default_str();
  c_du->add_flag("--reverse", du.reverse, "reverse the sequence (global, local)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  try {
    if (c_sim->parsed()) return do_simulate(sim, out);
    if (c_rec->parsed()) return do_reconstruct(rec, out);
    if (c_tr->parsed()) return do_train(tr, out);
    if (c_ev->parsed()) return do_eval(ev, out);
    if (c_ex->parsed()) return do_export(ex, out);
    if (c_du->parsed()) return do_dump(du, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  err << app.help();
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + (argc > 0 ? 1 : 0), argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace csm::cli
