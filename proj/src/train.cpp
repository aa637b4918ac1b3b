#include "mflow/train.hpp"

#include "mflow/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

namespace mflow {

namespace {

constexpr std::uint64_t kStreamBatch = 1;
constexpr std::uint64_t kStreamEval = 2;
constexpr std::uint64_t kStreamHoldout = 3;
constexpr std::uint64_t kStreamRotation = 4;

ad::Tensor<float> stack_images(const std::vector<GridFunction<float>>& images, const std::vector<std::size_t>& idx) {
  const auto& first = images.at(idx.at(0));
  const std::size_t per = static_cast<std::size_t>(first.size());
  std::vector<float> v(per * idx.size());
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& img = images.at(idx[b]);
    std::copy(img.values().data(), img.values().data() + per, v.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return ad::Tensor<float>({static_cast<int>(idx.size()), first.channels(), first.height(), first.width()}, std::move(v));
}

std::vector<GridFunction<float>> unstack(const std::vector<float>& v, int batch, int c, int h, int w) {
  std::vector<GridFunction<float>> out;
  const Eigen::Index per = static_cast<Eigen::Index>(c) * h * w;
  for (int b = 0; b < batch; ++b) {
    out.emplace_back(c, h, w, Eigen::Map<const Eigen::ArrayXf>(v.data() + b * per, per).eval());
  }
  return out;
}

std::string header_value(const std::string& header, const std::string& key) {
  std::istringstream in(header);
  std::string line;
  bool in_section = false;
  while (std::getline(in, line)) {
    if (line == "[checkpoint]") {
      in_section = true;
      continue;
    }
    if (!line.empty() && line.front() == '[') in_section = false;
    if (in_section && line.rfind(key + " = ", 0) == 0) return line.substr(key.size() + 3);
  }
  throw DataError("checkpoint: header lacks '" + key + "'");
}

std::vector<std::uint32_t> dims_of(const ad::Shape& s) { return {s.begin(), s.end()}; }

}  // namespace

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(step),
                    static_cast<std::uint32_t>(step >> 32)};
  return std::mt19937_64(seq);
}

RunData load_run_data(const RunConfig& cfg) {
  RunData d;
  const auto count = static_cast<std::size_t>(cfg.dataset.count);
  const auto holdout = static_cast<std::size_t>(cfg.dataset.holdout);
  const std::uint64_t holdout_seed = stream_rng(cfg.seed, kStreamHoldout, 0)();
  if (cfg.dataset.source == "synthetic_shapes") {
    d.train = make_synthetic_shapes(count, cfg.dataset.side, cfg.seed);
    d.holdout = make_synthetic_shapes(holdout, cfg.dataset.side, holdout_seed);
  } else if (cfg.dataset.source == "gaussian_toy") {
    d.train = make_gaussian_toy(count, cfg.dataset.side, cfg.seed);
    d.holdout = make_gaussian_toy(holdout, cfg.dataset.side, holdout_seed);
  } else {
    const ImageDataset all = dataset_from_idx(load_idx(cfg.dataset.path), count + holdout);
    if (all.size() < count + holdout) {
      throw DataError(cfg.dataset.path + ": has " + std::to_string(all.size()) + " images, need dataset.count + dataset.holdout = " +
                      std::to_string(count + holdout));
    }
    d.train = all;
    d.holdout = all;
    d.train.images.assign(all.images.begin(), all.images.begin() + static_cast<std::ptrdiff_t>(count));
    d.holdout.images.assign(all.images.begin() + static_cast<std::ptrdiff_t>(count), all.images.end());
  }
  if (cfg.dataset.augmentation == "rotate") {
    const RotationPolicy policy;
    d.train = rotate_dataset(d.train, policy, stream_rng(cfg.seed, kStreamRotation, 0)());
    d.holdout = rotate_dataset(d.holdout, policy, stream_rng(cfg.seed, kStreamRotation, 1)());
  }
  if (d.train.size() == 0 && cfg.optimizer.iterations > 0) throw DataError("dataset: no training images (dataset.count = 0)");
  return d;
}

Trainer::Trainer(RunConfig cfg) : Trainer(cfg, load_run_data(cfg)) {}

Trainer::Trainer(RunConfig cfg, RunData data) : cfg_(std::move(cfg)), data_(std::move(data)) {
  cfg_.validate();
  if (data_.train.height > 0) {
    cfg_.model.image_channels = data_.train.channels;
    cfg_.model.image_side = data_.train.height;
    if (data_.train.height != data_.train.width) throw DataError("dataset: images must be square");
  } else {
    cfg_.model.image_side = cfg_.dataset.side;
  }
  schedule_ = make_schedule(cfg_.diffusion.T, cfg_.diffusion.beta_start, cfg_.diffusion.beta_end);
  model_ = std::make_unique<GmcUnet<float>>(cfg_.model, stream_rng(cfg_.seed, 0, 0)());
  adam_ = ad::AdamState<float>::for_parameters(model_->parameters());
  ema_ = ad::snapshot(model_->parameters());
}

double Trainer::train_step() {
  auto rng = stream_rng(cfg_.seed, kStreamBatch, static_cast<std::uint64_t>(step_));
  std::uniform_int_distribution<std::size_t> pick(0, data_.train.size() - 1);
  std::vector<std::size_t> idx(static_cast<std::size_t>(cfg_.optimizer.batch_size));
  for (auto& i : idx) i = pick(rng);
  const auto n0 = stack_images(data_.train.images, idx);

  auto& params = model_->parameters();
  params.zero_grad();
  ad::Tape<float> tape;
  double loss = 0.0;
  {
    ad::TapeScope<float> scope(tape);
    const auto model = [this](const ad::Tensor<float>& x, const std::vector<int>& steps) { return model_->forward(x, steps); };
    const auto l = simple_loss(n0, schedule_, model, rng);
    loss = static_cast<double>(l.item());
    if (!std::isfinite(loss)) throw std::runtime_error("training: non-finite loss at step " + std::to_string(step_ + 1));
    tape.backward(l);
  }
  const ad::AdamConfig adam{cfg_.optimizer.lr, cfg_.optimizer.beta1, cfg_.optimizer.beta2, cfg_.optimizer.eps};
  try {
    ad::adam_step(params, adam_, adam);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(std::string(e.what()) + " at step " + std::to_string(step_ + 1));
  }
  ++step_;
  if (step_ % cfg_.optimizer.ema_interval == 0) {
    double decay = cfg_.optimizer.ema_decay;
    if (cfg_.optimizer.ema_warmup) {
      const double n = static_cast<double>(ema_updates_);
      decay = std::min(decay, (1.0 + n) / (10.0 + n));
    }
    ad::ema_update(ema_, params, decay);
    ++ema_updates_;
  }
  return loss;
}

double Trainer::eval_mse(int max_images) const {
  const auto& images = data_.holdout.images;
  std::size_t n = std::min(images.size(), static_cast<std::size_t>(cfg_.output.eval_samples));
  if (max_images > 0) n = std::min(n, static_cast<std::size_t>(max_images));
  if (n == 0) throw std::runtime_error("eval_mse: no held-out images (dataset.holdout = 0)");
  auto rng = stream_rng(cfg_.seed, kStreamEval, 0);
  std::uniform_int_distribution<int> step(1, schedule_.T);
  std::vector<int> steps(n);
  for (auto& t : steps) t = step(rng);
  const std::size_t per = static_cast<std::size_t>(images[0].size());
  const auto eps = standard_normal<float>(n * per, rng);

  const std::size_t chunk = static_cast<std::size_t>(cfg_.output.eval_batch);
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t end = std::min(n, start + chunk);
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const auto n0 = stack_images(images, idx);
    const std::vector<int> ts(steps.begin() + static_cast<std::ptrdiff_t>(start), steps.begin() + static_cast<std::ptrdiff_t>(end));
    const std::vector<float> e(eps.begin() + static_cast<std::ptrdiff_t>(start * per), eps.begin() + static_cast<std::ptrdiff_t>(end * per));
    const auto nt = diffuse_batch(n0, ts, e, schedule_);
    const auto pred = model_->forward(nt, ts);
    for (std::size_t i = 0; i < e.size(); ++i) {
      const double d = static_cast<double>(pred.data()[i]) - e[i];
      total += d * d;
    }
  }
  return total / static_cast<double>(n * per);
}

template <typename Fn>
auto Trainer::with_ema_weights(Fn&& fn) const {
  auto& params = const_cast<GmcUnet<float>&>(*model_).parameters();
  const auto live = ad::snapshot(params);
  ad::load_values(params, ema_);
  try {
    auto result = fn();
    ad::load_values(params, live);
    return result;
  } catch (...) {
    ad::load_values(params, live);
    throw;
  }
}

std::vector<int> spaced_steps(int T, int count) {
  if (count < 1 || count > T) throw std::invalid_argument("sampling steps must lie in [1, T]");
  std::vector<int> taus;
  for (int i = 1; i <= count; ++i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(i) * T / count));
    if (taus.empty() || taus.back() != t) taus.push_back(t);
  }
  return taus;
}

DiffusionSchedule respace_schedule(const DiffusionSchedule& base, const std::vector<int>& taus) {
  DiffusionSchedule s;
  s.T = static_cast<int>(taus.size());
  double prev = 1.0;
  for (int t : taus) {
    const double ab = base.alpha_bar_at(t);
    const double beta = 1.0 - ab / prev;
    s.beta.push_back(beta);
    s.alpha.push_back(1.0 - beta);
    s.alpha_bar.push_back(ab);
    s.sigma2.push_back(beta);
    prev = ab;
  }
  return s;
}

std::vector<GridFunction<float>> Trainer::sample(int count, std::uint64_t seed, SampleTrace* trace, int batch,
                                                 int sampling_steps) const {
  if (count < 1) throw std::invalid_argument("sample: count must be >= 1");
  if (batch <= 0) batch = cfg_.output.eval_batch;
  const int c = cfg_.model.image_channels;
  const int side = cfg_.model.image_side;
  const std::size_t per = static_cast<std::size_t>(c) * side * side;
  const std::vector<int> taus = spaced_steps(schedule_.T, sampling_steps > 0 ? sampling_steps : schedule_.T);
  const DiffusionSchedule sched = respace_schedule(schedule_, taus);
  const int n = sched.T;

  // positions i in the reverse chain (i = n is pure noise, i = 0 the output)
  std::vector<int> capture;
  for (int j = 10; j >= 0; --j) {
    const int i = (n * j) / 10;
    if (capture.empty() || capture.back() != i) capture.push_back(i);
  }
  if (trace) {
    trace->steps.clear();
    for (int i : capture) trace->steps.push_back(i == 0 ? 0 : taus[static_cast<std::size_t>(i - 1)]);
    trace->states.assign(capture.size(), {});
  }

  return with_ema_weights([&] {
    std::vector<GridFunction<float>> out;
    for (int start = 0, chunk_id = 0; start < count; start += batch, ++chunk_id) {
      const int b = std::min(batch, count - start);
      auto rng = stream_rng(seed, static_cast<std::uint64_t>(chunk_id), 0);
      auto x = standard_normal<float>(per * static_cast<std::size_t>(b), rng);
      const Eigen::Index len = static_cast<Eigen::Index>(x.size());
      auto record = [&](int i) {
        if (!trace) return;
        for (std::size_t k = 0; k < capture.size(); ++k) {
          if (capture[k] != i) continue;
          auto imgs = unstack(x, b, c, side, side);
          trace->states[k].insert(trace->states[k].end(), imgs.begin(), imgs.end());
        }
      };
      record(n);
      for (int i = n; i >= 1; --i) {
        const ad::Tensor<float> xt({b, c, side, side}, x);
        const auto eps_hat = model_->forward(xt, taus[static_cast<std::size_t>(i - 1)]);
        const auto noise = standard_normal<float>(x.size(), rng);
        Eigen::Map<const Eigen::ArrayXf> xm(x.data(), len);
        Eigen::Map<const Eigen::ArrayXf> em(eps_hat.data().data(), len);
        Eigen::Map<const Eigen::ArrayXf> nm(noise.data(), len);
        const Eigen::ArrayXf next = reverse_step(xm, em, i, sched, nm);
        std::copy(next.data(), next.data() + len, x.begin());
        record(i - 1);
      }
      auto imgs = unstack(x, b, c, side, side);
      out.insert(out.end(), imgs.begin(), imgs.end());
    }
    return out;
  });
}

double Trainer::mmd_bandwidth() const {
  if (bandwidth_ <= 0.0) {
    std::vector<GridFunction<float>> ref(data_.holdout.images.begin(),
                                         data_.holdout.images.begin() +
                                             static_cast<std::ptrdiff_t>(std::min<std::size_t>(
                                                 data_.holdout.size(), static_cast<std::size_t>(cfg_.output.eval_samples))));
    if (ref.size() < 2) throw std::runtime_error("mmd: need at least 2 held-out images");
    bandwidth_ = median_pairwise_distance(ref);
    if (!(bandwidth_ > 0.0)) bandwidth_ = 1.0;
  }
  return bandwidth_;
}

double Trainer::sample_mmd(int count, std::uint64_t seed) const {
  if (data_.holdout.size() < static_cast<std::size_t>(count)) {
    throw std::runtime_error("mmd: dataset.holdout (" + std::to_string(data_.holdout.size()) + ") < sample count " +
                             std::to_string(count));
  }
  const auto generated = sample(count, seed);
  const std::vector<GridFunction<float>> ref(data_.holdout.images.begin(), data_.holdout.images.begin() + count);
  return mmd_metric(generated, ref, mmd_bandwidth());
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  std::ostringstream h;
  h << to_text(cfg_) << "\n[checkpoint]\n"
    << "format_version = " << kCheckpointVersion << '\n'
    << "step = " << step_ << '\n'
    << "adam_step = " << adam_.step << '\n'
    << "ema_updates = " << ema_updates_ << '\n'
    << "image_channels = " << cfg_.model.image_channels << '\n'
    << "image_side = " << cfg_.model.image_side << '\n';
  ck.header = h.str();
  const auto& params = model_->parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto dims = dims_of(params.tensor(i).shape());
    ck.arrays.push_back({"param/" + params.name(i), dims, {params.tensor(i).data().begin(), params.tensor(i).data().end()}});
    ck.arrays.push_back({"adam.m/" + params.name(i), dims, adam_.m[i]});
    ck.arrays.push_back({"adam.v/" + params.name(i), dims, adam_.v[i]});
    ck.arrays.push_back({"ema/" + params.name(i), dims, ema_[i]});
  }
  return ck;
}

void Trainer::restore(const Checkpoint& ck) {
  auto& params = model_->parameters();
  std::vector<std::string> expected;
  for (const auto& prefix : {"param/", "adam.m/", "adam.v/", "ema/"}) {
    for (std::size_t i = 0; i < params.size(); ++i) expected.push_back(prefix + params.name(i));
  }
  for (const auto& a : ck.arrays) {
    if (std::find(expected.begin(), expected.end(), a.name) == expected.end()) {
      throw DataError("checkpoint: unexpected array '" + a.name + "' (model configuration mismatch)");
    }
  }
  auto fetch = [&](const std::string& name, const ad::Shape& shape) -> const std::vector<float>& {
    const NamedArray* a = ck.find(name);
    if (!a) throw DataError("checkpoint: missing array '" + name + "'");
    if (a->dims != dims_of(shape)) throw DataError("checkpoint: array '" + name + "' has wrong shape");
    return a->data;
  };
  auto adam = ad::AdamState<float>::for_parameters(params);
  std::vector<std::vector<float>> values, ema;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& shape = params.tensor(i).shape();
    values.push_back(fetch("param/" + params.name(i), shape));
    adam.m[i] = fetch("adam.m/" + params.name(i), shape);
    adam.v[i] = fetch("adam.v/" + params.name(i), shape);
    ema.push_back(fetch("ema/" + params.name(i), shape));
  }
  adam.step = std::stol(header_value(ck.header, "adam_step"));
  const int step = std::stoi(header_value(ck.header, "step"));
  const long ema_updates = std::stol(header_value(ck.header, "ema_updates"));
  ad::load_values(params, values);
  adam_ = std::move(adam);
  ema_ = std::move(ema);
  step_ = step;
  ema_updates_ = ema_updates;
}

RunConfig config_from_checkpoint(const Checkpoint& ck) {
  try {
    return parse_config(ck.header);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: embedded configuration is invalid: ") + e.what());
  }
}

std::unique_ptr<Trainer> trainer_from_checkpoint(const Checkpoint& ck, bool load_data) {
  RunConfig cfg = config_from_checkpoint(ck);
  std::unique_ptr<Trainer> trainer;
  if (load_data) {
    trainer = std::make_unique<Trainer>(cfg);
  } else {
    RunData data;
    data.train.channels = data.holdout.channels = std::stoi(header_value(ck.header, "image_channels"));
    data.train.height = data.holdout.height = std::stoi(header_value(ck.header, "image_side"));
    data.train.width = data.holdout.width = data.train.height;
    trainer = std::make_unique<Trainer>(cfg, std::move(data));
  }
  trainer->restore(ck);
  return trainer;
}

std::vector<MetricsRow> run_training(Trainer& trainer, std::ostream& log) {
  const RunConfig& cfg = trainer.config();
  const std::filesystem::path dir(cfg.output.dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream echo(dir / "config.echo");
    echo << to_text(cfg);
    if (!echo) throw DataError((dir / "config.echo").string() + ": write failed");
  }

  auto fmt = [](double v) {
    if (v < 0.0) return std::string();
    std::ostringstream os;
    os << std::setprecision(9) << v;
    return os.str();
  };

  std::vector<MetricsRow> rows;
  auto evaluate = [&](MetricsRow& row) {
    row.eval_mse = trainer.eval_mse();
    row.mmd = trainer.sample_mmd(std::min(cfg.output.eval_samples, static_cast<int>(trainer.data().holdout.size())), cfg.seed);
  };
  if (cfg.output.eval_every > 0 && trainer.step() == 0) {
    MetricsRow row;
    evaluate(row);
    rows.push_back(row);
  }
  while (trainer.step() < cfg.optimizer.iterations) {
    MetricsRow row;
    row.loss = trainer.train_step();
    row.step = trainer.step();
    if (cfg.output.eval_every > 0 && row.step % cfg.output.eval_every == 0) evaluate(row);
    if (row.step % cfg.output.log_every == 0 || row.eval_mse >= 0.0) {
      log << "step " << row.step << " loss " << fmt(row.loss);
      if (row.eval_mse >= 0.0) log << " eval_mse " << fmt(row.eval_mse) << " mmd " << fmt(row.mmd);
      log << '\n';
    }
    if (cfg.output.sample_every > 0 && row.step % cfg.output.sample_every == 0) {
      std::ostringstream name;
      name << "samples_" << std::setw(6) << std::setfill('0') << row.step << ".pgm";
      emit_grid(trainer.sample(cfg.output.grid_count, cfg.seed), cfg.output.grid_cols, (dir / name.str()).string());
    }
    rows.push_back(row);
  }

  std::vector<std::vector<std::string>> table;
  for (const auto& r : rows) table.push_back({std::to_string(r.step), r.step == 0 ? "" : fmt(r.loss), fmt(r.eval_mse), fmt(r.mmd)});
  emit_csv({"step", "loss", "eval_mse", "mmd"}, table, (dir / "metrics.csv").string());
  save_checkpoint((dir / "checkpoint.bin").string(), trainer.checkpoint());
  return rows;
}

}  // namespace mflow
