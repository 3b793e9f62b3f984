#include "idmorph/training.hpp"

#include <cmath>
#include <fstream>

#include <spdlog/spdlog.h>

#include "idmorph/config.hpp"

extern "C" void openblas_set_num_threads(int);

namespace idmorph {

void TrainConfig::validate() const {
  net.validate();
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr must be positive, got " + std::to_string(lr));
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw ConfigError("lambda must be >= 0, got " + std::to_string(lambda));
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("adam_beta1 must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam_beta2 must lie in [0, 1)");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 for batch normalization, got " + std::to_string(batch_size));
}

void check_labels(const std::vector<std::size_t>& identity, const std::vector<std::size_t>& viewpoint,
                  std::size_t num_identities, std::size_t num_attributes) {
  if (identity.size() != viewpoint.size()) throw DimensionError("identity and viewpoint label counts differ");
  for (std::size_t i = 0; i < identity.size(); ++i) {
    if (identity[i] >= num_identities) {
      throw LabelError("row " + std::to_string(i) + ": identity " + std::to_string(identity[i] + 1) +
                       " outside 1.." + std::to_string(num_identities));
    }
    if (viewpoint[i] >= num_attributes) {
      throw LabelError("row " + std::to_string(i) + ": viewpoint " + std::to_string(viewpoint[i] + 1) +
                       " outside 1.." + std::to_string(num_attributes));
    }
  }
}

namespace {

// Sets requires_grad=false on a parameter set for the lifetime of the guard.
template <typename T>
class Freeze {
 public:
  explicit Freeze(ParameterSet<T> p) : p_(std::move(p)) { p_.set_requires_grad(false); }
  ~Freeze() { p_.set_requires_grad(true); }
  Freeze(const Freeze&) = delete;
  Freeze& operator=(const Freeze&) = delete;

 private:
  ParameterSet<T> p_;
};

template <typename T>
void check_finite_loss(T v, const char* what, std::uint64_t step) {
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite at step " + std::to_string(step));
}

template <typename T>
void put_params(Checkpoint& ck, const ParameterSet<T>& set) {
  for (const auto& [name, t] : set.entries()) {
    std::vector<std::uint64_t> dims(t->shape().begin(), t->shape().end());
    ck.put<T>(name, dims, t->data());
  }
}

// Reads an entry of either float precision into `dst`, checking the length.
template <typename T>
void read_values(const Checkpoint& ck, const std::string& name, std::span<T> dst) {
  const auto& e = ck.entry(name);
  std::vector<T> vals;
  if (e.dtype == DType::f32) {
    auto v = ck.get<float>(name);
    vals.assign(v.begin(), v.end());
  } else if (e.dtype == DType::f64) {
    auto v = ck.get<double>(name);
    vals.assign(v.begin(), v.end());
  } else {
    throw FormatError("checkpoint entry '" + name + "' is not floating point");
  }
  if (vals.size() != dst.size()) {
    throw DimensionError("checkpoint entry '" + name + "' has " + std::to_string(vals.size()) + " values, model expects " +
                         std::to_string(dst.size()));
  }
  std::copy(vals.begin(), vals.end(), dst.begin());
}

template <typename T>
void read_params(const Checkpoint& ck, const ParameterSet<T>& set) {
  for (const auto& [name, t] : set.entries()) read_values<T>(ck, name, t->data());
}

template <typename T>
void read_buffers(const Checkpoint& ck, BufferList<T> buffers) {
  for (auto& [name, vec] : buffers) read_values<T>(ck, name, std::span<T>(*vec));
}

template <typename T>
void put_optimizer(Checkpoint& ck, const std::string& prefix, Adam<T>& opt) {
  const auto& entries = opt.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ck.put<T>(prefix + ".m/" + entries[i].first, std::span<const T>(opt.first_moments()[i]));
    ck.put<T>(prefix + ".v/" + entries[i].first, std::span<const T>(opt.second_moments()[i]));
  }
  ck.put_u64(prefix + ".t", opt.steps());
}

template <typename T>
void read_optimizer(const Checkpoint& ck, const std::string& prefix, Adam<T>& opt) {
  const auto& entries = opt.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    read_values<T>(ck, prefix + ".m/" + entries[i].first, std::span<T>(opt.first_moments()[i]));
    read_values<T>(ck, prefix + ".v/" + entries[i].first, std::span<T>(opt.second_moments()[i]));
  }
  opt.set_steps(ck.get_u64(prefix + ".t"));
}

}  // namespace

TrainConfig config_from_checkpoint(const Checkpoint& ck) {
  return parse_run_config(ck.get_string("meta/config"), "checkpoint").train;
}

template <typename T>
Trainer<T>::Trainer(TrainConfig config)
    : cfg_((config.validate(), std::move(config))),
      init_rng_(mix_seed(cfg_.seed, 1)),
      gen_(cfg_.net, init_rng_),
      disc_(cfg_.net, init_rng_),
      opt_g_(gen_.parameters(), cfg_.adam()),
      opt_d_(disc_.parameters(), cfg_.adam()),
      rng_(mix_seed(cfg_.seed, 2)) {
  if (cfg_.deterministic) openblas_set_num_threads(1);
}

template <typename T>
StepBatch<T> Trainer<T>::sample_batch(const Dataset& data) {
  if (data.empty()) throw DataError("training dataset is empty");
  if (data.image_size != cfg_.net.image_size) {
    throw ConfigError("dataset images are " + std::to_string(data.image_size) + " px, model expects " +
                      std::to_string(cfg_.net.image_size));
  }
  const std::size_t n = cfg_.batch_size;
  const std::size_t na = cfg_.net.num_attributes;
  StepBatch<T> b;
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = rng_.index(data.size());
  b.images = data.images<T>(idx);
  for (auto i : idx) {
    b.identity.push_back(data.identity[i]);
    b.viewpoint.push_back(data.viewpoint[i]);
  }
  b.z = tensor_new<T>({n, cfg_.net.noise_dim});
  for (auto& v : b.z->data()) v = T(rng_.normal());
  b.code = tensor_new<T>({n, na});
  for (std::size_t i = 0; i < n; ++i) {
    b.target.push_back(rng_.index(na));
    (*b.code)[i * na + b.target.back()] = T(1);
  }
  return b;
}

template <typename T>
T Trainer<T>::d_step(const StepBatch<T>& b) {
  const std::size_t ni = cfg_.net.num_identities;
  check_labels(b.identity, b.viewpoint, ni, cfg_.net.num_attributes);
  auto dparams = disc_.parameters();
  dparams.zero_grad();

  TensorPtr<T> fake;
  {
    Graph<T> off(false);
    fake = detach(gen_.generate(off, b.images, b.z, b.code, Mode::train));
  }
  Graph<T> g;
  auto real = disc_.discriminate(g, b.images);
  auto gen = disc_.discriminate(g, fake);
  const std::vector<std::size_t> fake_class(b.images->dim(0), ni);
  auto loss = add(g, cross_entropy_logits(g, real.identity, b.identity),
                  scale(g, cross_entropy_logits(g, real.attribute, b.viewpoint), T(cfg_.lambda)));
  loss = add(g, loss, cross_entropy_logits(g, gen.identity, fake_class));
  g.backward(loss);
  opt_d_.step();
  return loss->item();
}

template <typename T>
T Trainer<T>::g_step(const StepBatch<T>& b) {
  check_labels(b.identity, b.viewpoint, cfg_.net.num_identities, cfg_.net.num_attributes);
  check_labels(b.identity, b.target, cfg_.net.num_identities, cfg_.net.num_attributes);
  auto gparams = gen_.parameters();
  gparams.zero_grad();
  Freeze<T> frozen(disc_.parameters());

  Graph<T> g;
  auto fake = gen_.generate(g, b.images, b.z, b.code, Mode::train);
  auto logits = disc_.discriminate(g, fake);
  auto loss = add(g, scale(g, cross_entropy_logits(g, logits.attribute, b.target), T(cfg_.lambda)),
                  cross_entropy_logits(g, logits.identity, b.identity));
  g.backward(loss);
  opt_g_.step();
  return loss->item();
}

template <typename T>
std::pair<T, T> Trainer<T>::step(const Dataset& data) {
  auto batch = sample_batch(data);
  const T d = d_step(batch);
  const T gl = g_step(batch);
  check_finite_loss(d, "d_loss", step_);
  check_finite_loss(gl, "g_loss", step_);
  ++step_;
  return {d, gl};
}

template <typename T>
void Trainer<T>::train(const Dataset& data, const TrainOptions& options) {
  if (data.empty()) throw DataError("training dataset is empty");
  check_labels(data.identity, data.viewpoint, cfg_.net.num_identities, cfg_.net.num_attributes);
  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    metrics.open(options.metrics_path, std::ios::app);
    if (!metrics) throw IoError("cannot open metrics log '" + options.metrics_path.string() + "'");
  }
  if (!options.checkpoint_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.checkpoint_dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory '" + options.checkpoint_dir.string() + "': " + ec.message());
  }
  while (step_ < cfg_.steps) {
    const auto [d, gl] = step(data);
    if (metrics.is_open()) {
      char line[96];
      std::snprintf(line, sizeof line, "%llu\t%.9g\t%.9g\n", static_cast<unsigned long long>(step_), double(d), double(gl));
      metrics << line << std::flush;
      if (!metrics) throw IoError("write failed for metrics log '" + options.metrics_path.string() + "'");
    }
    if (options.on_step) options.on_step(step_, double(d), double(gl));
    if (step_ % 100 == 0) spdlog::info("step {} d_loss {:.4f} g_loss {:.4f}", step_, double(d), double(gl));
    const bool periodic = cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0;
    if (!options.checkpoint_dir.empty() && (periodic || step_ == cfg_.steps)) {
      to_checkpoint().save(options.checkpoint_dir / ("step_" + std::to_string(step_) + ".mgck"));
    }
  }
  if (!options.checkpoint_dir.empty()) to_checkpoint().save(options.checkpoint_dir / "final.mgck");
}

template <typename T>
Checkpoint Trainer<T>::to_checkpoint() const {
  Checkpoint ck;
  ck.put_string("meta/config", to_text(RunConfig{cfg_, {}, {}, {}}));
  ck.put_u64("meta/step", step_);
  ck.put_string("meta/rng", rng_.state());
  ck.put_u64("meta/precision", sizeof(T) * 8);
  put_params(ck, gen_.parameters());
  put_params(ck, disc_.parameters());
  for (auto& [name, vec] : const_cast<Generator<T>&>(gen_).buffers()) ck.put<T>(name, std::span<const T>(*vec));
  put_optimizer(ck, "opt.gen", const_cast<Adam<T>&>(opt_g_));
  put_optimizer(ck, "opt.disc", const_cast<Adam<T>&>(opt_d_));
  return ck;
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& ck) {
  if (ck.get_u64("meta/precision") != sizeof(T) * 8) {
    throw FormatError("checkpoint was written at " + std::to_string(ck.get_u64("meta/precision")) +
                      "-bit precision, trainer runs at " + std::to_string(sizeof(T) * 8));
  }
  read_params(ck, gen_.parameters());
  read_params(ck, disc_.parameters());
  read_buffers(ck, gen_.buffers());
  read_optimizer(ck, "opt.gen", opt_g_);
  read_optimizer(ck, "opt.disc", opt_d_);
  rng_.set_state(ck.get_string("meta/rng"));
  step_ = ck.get_u64("meta/step");
}

template <typename T>
Trainer<T> Trainer<T>::from_checkpoint(const Checkpoint& ck) {
  Trainer t(config_from_checkpoint(ck));
  t.restore(ck);
  return t;
}

template <typename T>
double attribute_accuracy(Discriminator<T>& disc, const Dataset& data, std::size_t batch) {
  if (data.empty()) throw DataError("attribute accuracy on an empty dataset");
  const std::size_t na = disc.config().num_attributes;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
    Graph<T> off(false);
    auto logits = disc.discriminate(off, data.images<T>(idx)).attribute;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const T* row = logits->ptr() + r * na;
      const auto best = static_cast<std::size_t>(std::max_element(row, row + na) - row);
      correct += best == data.viewpoint[idx[r]];
    }
  }
  return double(correct) / double(data.size());
}

template <typename T>
Generator<T> load_generator(const Checkpoint& ck) {
  const auto cfg = config_from_checkpoint(ck);
  Rng rng(mix_seed(cfg.seed, 1));
  Generator<T> gen(cfg.net, rng);
  read_params(ck, gen.parameters());
  read_buffers(ck, gen.buffers());
  return gen;
}

template class Trainer<float>;
template class Trainer<double>;
template double attribute_accuracy(Discriminator<float>&, const Dataset&, std::size_t);
template double attribute_accuracy(Discriminator<double>&, const Dataset&, std::size_t);
template Generator<float> load_generator<float>(const Checkpoint&);
template Generator<double> load_generator<double>(const Checkpoint&);

}  // namespace idmorph
