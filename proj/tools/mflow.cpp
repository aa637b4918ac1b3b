// mflow: train, sample, verify and pde-lab subcommands.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
// 3 verification failure.

#include "mflow/config.hpp"
#include "mflow/data_io.hpp"
#include "mflow/morphology.hpp"
#include "mflow/train.hpp"
#include "mflow/verify.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerify = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainArgs {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string block;
  std::optional<int> iterations;
};

struct SampleArgs {
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  int count = 16;
  int steps = 0;
  int cols = 0;
  bool trace = false;
};

struct VerifyArgs {
  std::string suite = "all";
  std::string out = "runs/verify";
  std::uint64_t seed = 1;
  bool flip_ck = false;
};

struct PdeLabArgs {
  std::string init = "bump";
  double k = 2.0;
  std::string p = "2";
  double t = 0.25;
  std::string method = "both";
  std::string sign = "erosion";
  int size = 64;
  std::string out = "runs/pde-lab";
};

void apply_block(mflow::RunConfig& cfg, const std::string& block) {
  if (block.empty()) return;
  if (block == "cde") {
    cfg.model.block = mflow::BlockType::cde;
  } else if (block == "resnet") {
    cfg.model.block = mflow::BlockType::resnet;
  } else {
    throw UsageError("--block must be cde or resnet");
  }
}

int cmd_train(const TrainArgs& a) {
  std::unique_ptr<mflow::Trainer> trainer;
  if (!a.checkpoint.empty()) {
    if (!a.config.empty()) throw UsageError("train: pass either --config or --checkpoint, not both");
    if (a.seed || !a.block.empty()) throw UsageError("train: --seed and --block cannot change a resumed run");
    const auto ck = mflow::load_checkpoint(a.checkpoint);
    mflow::RunConfig cfg = mflow::config_from_checkpoint(ck);
    if (!a.out.empty()) cfg.output.dir = a.out;
    if (a.iterations) cfg.optimizer.iterations = *a.iterations;
    cfg.validate();
    trainer = std::make_unique<mflow::Trainer>(cfg);
    trainer->restore(ck);
    std::cout << "resumed " << a.checkpoint << " at step " << trainer->step() << '\n';
  } else {
    mflow::RunConfig cfg = a.config.empty() ? mflow::default_config() : mflow::load_config(a.config);
    if (a.seed) cfg.seed = *a.seed;
    if (!a.out.empty()) cfg.output.dir = a.out;
    if (a.iterations) cfg.optimizer.iterations = *a.iterations;
    apply_block(cfg, a.block);
    cfg.validate();
    trainer = std::make_unique<mflow::Trainer>(cfg);
  }
  const auto& cfg = trainer->config();
  std::cout << "model parameters " << trainer->model().parameters().scalar_count() << ", block "
            << (cfg.model.block == mflow::BlockType::cde ? "cde" : "resnet") << ", images " << trainer->data().train.size()
            << " x " << cfg.model.image_side << 'x' << cfg.model.image_side << '\n';
  const auto rows = mflow::run_training(*trainer, std::cout);
  std::cout << "wrote " << (fs::path(cfg.output.dir) / "checkpoint.bin").string() << " after " << trainer->step()
            << " iterations (" << rows.size() << " metric rows)\n";
  return 0;
}

int cmd_sample(const SampleArgs& a) {
  if (a.count < 1) throw UsageError("sample: --count must be >= 1");
  const auto ck = mflow::load_checkpoint(a.checkpoint);
  const auto trainer = mflow::trainer_from_checkpoint(ck, false);
  const auto& cfg = trainer->config();
  if (a.steps < 0 || a.steps > cfg.diffusion.T) {
    throw UsageError("sample: --T must lie in [1, " + std::to_string(cfg.diffusion.T) + "]");
  }
  const fs::path dir(a.out.empty() ? cfg.output.dir : a.out);
  fs::create_directories(dir);
  const std::uint64_t seed = a.seed ? *a.seed : cfg.seed;
  const int cols = a.cols > 0 ? a.cols : std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(a.count)))));
  mflow::SampleTrace trace;
  const auto images = trainer->sample(a.count, seed, a.trace ? &trace : nullptr, 0, a.steps);
  mflow::emit_grid(images, cols, (dir / "samples.pgm").string());
  std::cout << "wrote " << (dir / "samples.pgm").string() << '\n';
  if (a.trace) {
    for (std::size_t k = 0; k < trace.steps.size(); ++k) {
      std::ostringstream name;
      name << "trace_t" << std::setw(5) << std::setfill('0') << trace.steps[k] << ".pgm";
      mflow::emit_grid(trace.states[k], cols, (dir / name.str()).string());
    }
    std::cout << "wrote " << trace.steps.size() << " trace grids\n";
  }
  return 0;
}

int cmd_verify(const VerifyArgs& a) {
  mflow::VerifyOptions opt;
  opt.seed = a.seed;
  opt.flip_structuring_sign = a.flip_ck;
  const auto results = mflow::run_verification(a.suite, opt);
  mflow::print_verification(results, std::cout);
  fs::create_directories(a.out);
  const auto csv = (fs::path(a.out) / "verify.csv").string();
  mflow::write_verification_csv(results, csv);
  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.passed; });
  std::cout << results.size() - static_cast<std::size_t>(failed) << '/' << results.size() << " checks passed; report " << csv
            << '\n';
  return failed == 0 ? 0 : kExitVerify;
}

mflow::GridFunction<double> pde_initial(const std::string& init, int size) {
  if (init == "bump" || init == "edge" || init == "constant") {
    if (size < 2) throw UsageError("pde-lab: --size must be >= 2");
    mflow::GridFunction<double> f(1, size, size);
    const double h = 1.0 / (size - 1);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double px = x * h - 0.5, py = y * h - 0.5;
        if (init == "bump") f(0, y, x) = std::exp(-(px * px + py * py) / (2.0 * 0.15 * 0.15));
        if (init == "edge") f(0, y, x) = 0.5 * (1.0 + std::tanh((px + 0.3 * py) / 0.05));
        if (init == "constant") f(0, y, x) = 0.5;
      }
    }
    return f;
  }
  return mflow::load_pgm(init).cast<double>();
}

/// Maps [lo, hi] to [-1, 1] for display.
mflow::GridFunction<float> display(const mflow::GridFunction<double>& g, double lo, double hi) {
  const double span = hi > lo ? hi - lo : 1.0;
  mflow::GridFunction<double> s = g;
  s.values() = (g.values() - lo) / span * 2.0 - 1.0;
  return s.cast<float>();
}

int cmd_pde_lab(const PdeLabArgs& a) {
  if (!(a.t > 0.0)) throw UsageError("pde-lab: --t must be > 0");
  if (!(a.k > 1.0)) throw UsageError("pde-lab: --k must be > 1");
  mflow::MorphPDEProblem<double> p;
  p.initial = pde_initial(a.init, a.size);
  p.k = a.k;
  p.horizon = a.t;
  p.grid_spacing = 1.0 / std::max(1, std::max(p.initial.height(), p.initial.width()) - 1);
  if (a.p == "1") {
    p.lp_norm = mflow::LpNorm::l1;
  } else if (a.p == "2") {
    p.lp_norm = mflow::LpNorm::l2;
  } else if (a.p == "inf") {
    p.lp_norm = mflow::LpNorm::linf;
  } else {
    throw UsageError("pde-lab: --p must be 1, 2 or inf");
  }
  if (a.sign == "erosion") {
    p.sign = mflow::MorphSign::erosion;
  } else if (a.sign == "dilation") {
    p.sign = mflow::MorphSign::dilation;
  } else {
    throw UsageError("pde-lab: --sign must be erosion or dilation");
  }
  if (a.method != "hopflax" && a.method != "fd" && a.method != "both") {
    throw UsageError("pde-lab: --method must be hopflax, fd or both");
  }

  const fs::path dir(a.out);
  fs::create_directories(dir);
  const double lo = p.initial.values().minCoeff();
  const double hi = p.initial.values().maxCoeff();
  mflow::emit_grid({display(p.initial, lo, hi)}, 1, (dir / "input.pgm").string());

  std::optional<mflow::GridFunction<double>> hl, fd;
  if (a.method != "fd") {
    hl = mflow::hopf_lax_solve(p);
    mflow::emit_grid({display(*hl, lo, hi)}, 1, (dir / "hopflax.pgm").string());
  }
  if (a.method != "hopflax") {
    fd = mflow::fd_hj_solve(p);
    mflow::emit_grid({display(*fd, lo, hi)}, 1, (dir / "fd.pgm").string());
  }

  std::vector<std::vector<std::string>> rows;
  auto fmt = [](double v) {
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
  };
  auto report = [&](const std::string& name, const mflow::GridFunction<double>& u, const mflow::GridFunction<double>& v) {
    const double linf = mflow::max_abs_difference(u, v);
    const double l1 = (u.values() - v.values()).abs().mean();
    std::cout << name << ": Linf " << linf << ", mean L1 " << l1 << '\n';
    rows.push_back({name, fmt(linf), fmt(l1)});
  };
  if (hl) report("hopflax_vs_input", *hl, p.initial);
  if (fd) report("fd_vs_input", *fd, p.initial);
  if (hl && fd) report("hopflax_vs_fd", *hl, *fd);
  mflow::emit_csv({"comparison", "linf", "mean_l1"}, rows, (dir / "report.csv").string());
  std::cout << "wrote grids and report.csv under " << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Morphological diffusion toolkit: train, sample, verify, pde-lab"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a denoiser and write metrics, sample grids and a checkpoint");
  train_cmd->add_option("--config", train.config, "Run configuration file (defaults when omitted)");
  train_cmd->add_option("--checkpoint", train.checkpoint, "Resume from this checkpoint");
  train_cmd->add_option("--out", train.out, "Output directory (overrides output.dir)");
  train_cmd->add_option("--seed", train.seed, "Random seed (overrides seed)");
  train_cmd->add_option("--block", train.block, "Middle block type")->check(CLI::IsMember({"cde", "resnet"}));
  train_cmd->add_option("--iterations", train.iterations, "Iteration count (overrides optimizer.iterations)");

  SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample", "Draw samples from a checkpoint with the EMA weights");
  sample_cmd->add_option("--checkpoint", sample.checkpoint, "Checkpoint file")->required();
  sample_cmd->add_option("--out", sample.out, "Output directory (defaults to the run's output.dir)");
  sample_cmd->add_option("--seed", sample.seed, "Sampling seed (defaults to the run seed)");
  sample_cmd->add_option("--count", sample.count, "Number of samples");
  sample_cmd->add_option("--T", sample.steps, "Number of reverse steps (evenly spaced subset of the training steps)");
  sample_cmd->add_option("--cols", sample.cols, "Grid columns");
  sample_cmd->add_flag("--trace", sample.trace, "Also write grids of n_t at decile steps");

  VerifyArgs verify;
  auto* verify_cmd = app.add_subcommand("verify", "Run the invariant suites");
  verify_cmd->add_option("--suite", verify.suite, "Suite to run")
      ->check(CLI::IsMember({"geometry", "morphology", "equivariance", "gradients", "diffusion", "all"}));
  verify_cmd->add_option("--out", verify.out, "Directory for verify.csv");
  verify_cmd->add_option("--seed", verify.seed, "Random seed");
  verify_cmd->add_flag("--flip-ck-sign", verify.flip_ck, "Mutation rehearsal: negate c_k in the morphology suite");

  PdeLabArgs lab;
  auto* lab_cmd = app.add_subcommand("pde-lab", "Solve the morphological Hamilton-Jacobi PDE two ways and compare");
  lab_cmd->add_option("--init", lab.init, "bump, edge, constant or a PGM path");
  lab_cmd->add_option("--k", lab.k, "Exponent k > 1");
  lab_cmd->add_option("--p", lab.p, "Hamiltonian norm: 1, 2 or inf");
  lab_cmd->add_option("--t", lab.t, "Horizon t > 0");
  lab_cmd->add_option("--method", lab.method, "hopflax, fd or both")->check(CLI::IsMember({"hopflax", "fd", "both"}));
  lab_cmd->add_option("--sign", lab.sign, "erosion or dilation")->check(CLI::IsMember({"erosion", "dilation"}));
  lab_cmd->add_option("--size", lab.size, "Grid side for the synthetic initial conditions");
  lab_cmd->add_option("--out", lab.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*sample_cmd) return cmd_sample(sample);
    if (*verify_cmd) return cmd_verify(verify);
    if (*lab_cmd) return cmd_pde_lab(lab);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const mflow::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
