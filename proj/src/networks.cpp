#include "idmorph/networks.hpp"

#include <algorithm>
#include <cmath>

namespace idmorph {

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::vanilla: return "vanilla";
    case Ablation::global_nc: return "global_nc";
    case Ablation::unet: return "unet";
    case Ablation::cnc_only: return "cnc_only";
  }
  return "full";
}

Ablation parse_ablation(const std::string& s) {
  for (auto a : {Ablation::full, Ablation::vanilla, Ablation::global_nc, Ablation::unet, Ablation::cnc_only}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown ablation '" + s + "' (expected full, vanilla, global_nc, unet or cnc_only)");
}

void NetConfig::validate() const {
  if (blocks == 0 || blocks > 6) throw ConfigError("blocks must be in [1, 6]");
  if (base_channels == 0) throw ConfigError("base_channels must be positive");
  if (image_size == 0 || image_size % (std::size_t{1} << blocks) != 0) {
    throw ConfigError("image_size " + std::to_string(image_size) + " must be a positive multiple of 2^blocks");
  }
  if (id_dim == 0 || noise_dim == 0) throw ConfigError("id_dim and noise_dim must be positive");
  if (num_attributes < 2) throw ConfigError("num_attributes must be at least 2");
  if (num_identities < 1) throw ConfigError("num_identities must be at least 1");
  if (!link_radii.empty() && link_radii.size() != link_resolutions.size()) {
    throw ConfigError("link_radii must list one radius per link resolution");
  }
  for (auto res : link_resolutions) {
    bool ok = false;
    for (std::size_t k = 0; k < blocks; ++k) ok = ok || res == (seed_size() << k);
    if (!ok) {
      throw ConfigError("link resolution " + std::to_string(res) +
                        " has no symmetric encoder/decoder block pair");
    }
  }
  if (uses_links() && link_resolutions.empty()) {
    throw ConfigError("ablation " + to_string(ablation) + " needs at least one link resolution");
  }
}

std::size_t NetConfig::radius_for(std::size_t link_index) const {
  if (!link_radii.empty()) return link_radii.at(link_index);
  return std::max<std::size_t>(1, link_resolutions.at(link_index) / 4);
}

void check_image_shape(const Shape& shape, std::size_t image_size) {
  if (shape.size() != 4 || shape[1] != 3 || shape[2] != image_size || shape[3] != image_size) {
    throw DimensionError("expected images [N,3," + std::to_string(image_size) + "," + std::to_string(image_size) +
                         "], got " + shape_str(shape));
  }
}

namespace {

constexpr std::size_t kKernel = 4;
constexpr std::size_t kStride = 2;
constexpr std::size_t kPad = 1;

std::size_t conv_params(std::size_t cin, std::size_t cout, std::size_t k) { return cin * cout * k * k + cout; }
std::size_t dense_params(std::size_t in, std::size_t out) { return in * out + out; }

std::size_t link_hidden(std::size_t channels) { return std::max<std::size_t>(1, channels / 2); }

// Decoder block k sits at resolution seed << k with the channels of encoder
// block (blocks - 1 - k).
std::size_t decoder_block_for(const NetConfig& cfg, std::size_t resolution) {
  for (std::size_t k = 0; k < cfg.blocks; ++k)
    if ((cfg.seed_size() << k) == resolution) return k;
  throw ConfigError("no decoder block at resolution " + std::to_string(resolution));
}

std::size_t decoder_channels(const NetConfig& cfg, std::size_t k) {
  return cfg.channels_at_block(cfg.blocks - 1 - k);
}

std::size_t raw_parameter_count(const NetConfig& cfg, std::size_t latent_hidden) {
  std::size_t n = 0;
  std::size_t cin = 3;
  for (std::size_t k = 0; k < cfg.blocks; ++k) {
    n += conv_params(cin, cfg.channels_at_block(k), kKernel);
    cin = cfg.channels_at_block(k);
  }
  const std::size_t top = cfg.channels_at_block(cfg.blocks - 1);
  n += dense_params(top, cfg.id_dim);
  const std::size_t seed_out = top * cfg.seed_size() * cfg.seed_size();
  if (latent_hidden > 0) {
    n += dense_params(cfg.latent_dim(), latent_hidden) + dense_params(latent_hidden, seed_out);
  } else {
    n += dense_params(cfg.latent_dim(), seed_out);
  }
  for (std::size_t k = 0; k < cfg.blocks; ++k) {
    const std::size_t c = decoder_channels(cfg, k);
    const std::size_t next = k + 1 < cfg.blocks ? decoder_channels(cfg, k + 1) : 3;
    n += conv_params(c, next, kKernel);
    if (k + 1 < cfg.blocks) n -= next;  // no bias ahead of normalization
    if (cfg.uses_aim()) {
      n += dense_params(c, cfg.id_dim) + dense_params(cfg.id_dim, cfg.id_dim);       // tau
      n += 2 * (dense_params(cfg.id_dim, cfg.id_dim) + dense_params(cfg.id_dim, c));  // gamma, beta
    }
  }
  if (cfg.uses_links()) {
    for (auto res : cfg.link_resolutions) {
      const std::size_t c = decoder_channels(cfg, decoder_block_for(cfg, res));
      if (cfg.ablation == Ablation::unet) {
        n += conv_params(2 * c, c, 1);
      } else {
        const std::size_t h = link_hidden(c);
        n += 3 * h * c + conv_params(c + h, c, 1);
      }
    }
  }
  return n;
}

std::size_t balanced_hidden_width(const NetConfig& cfg) {
  if (cfg.uses_aim() || !cfg.balance_parameters) return 0;
  NetConfig reference = cfg;
  reference.ablation = Ablation::full;
  if (reference.link_resolutions.empty()) reference.link_resolutions = {cfg.seed_size() << (cfg.blocks / 2)};
  const double target = double(raw_parameter_count(reference, 0));
  const double without = double(raw_parameter_count(cfg, 0));
  if (without >= target) return 0;
  const std::size_t seed_out = cfg.channels_at_block(cfg.blocks - 1) * cfg.seed_size() * cfg.seed_size();
  // count(h) = base + h * (latent + 1 + seed_out) + seed_out, where base
  // excludes the seed layer.
  const double base = without - double(dense_params(cfg.latent_dim(), seed_out));
  const double per_unit = double(cfg.latent_dim() + 1 + seed_out);
  const double h = (target - base - double(seed_out)) / per_unit;
  return h < 1 ? 0 : static_cast<std::size_t>(std::llround(h));
}

}  // namespace

template <typename T>
std::size_t Generator<T>::parameter_count(const NetConfig& config, std::size_t latent_hidden) {
  return raw_parameter_count(config, latent_hidden);
}

template <typename T>
Generator<T>::Generator(const NetConfig& config, Rng& rng) : cfg_(config) {
  cfg_.validate();
  std::size_t cin = 3;
  for (std::size_t k = 0; k < cfg_.blocks; ++k) {
    encoder_.push_back(ConvLayer<T>::init(cin, cfg_.channels_at_block(k), kKernel, kStride, kPad, false, rng));
    cin = cfg_.channels_at_block(k);
  }
  const std::size_t top = cfg_.channels_at_block(cfg_.blocks - 1);
  id_head_ = DenseLayer<T>::init(top, cfg_.id_dim, rng);
  const std::size_t seed_out = top * cfg_.seed_size() * cfg_.seed_size();
  const std::size_t hidden = balanced_hidden_width(cfg_);
  if (hidden > 0) {
    latent_hidden_ = DenseLayer<T>::init(cfg_.latent_dim(), hidden, rng);
    seed_ = DenseLayer<T>::init(hidden, seed_out, rng);
  } else {
    seed_ = DenseLayer<T>::init(cfg_.latent_dim(), seed_out, rng);
  }
  for (std::size_t k = 0; k < cfg_.blocks; ++k) {
    const std::size_t c = decoder_channels(cfg_, k);
    const std::size_t next = k + 1 < cfg_.blocks ? decoder_channels(cfg_, k + 1) : 3;
    if (cfg_.uses_aim()) {
      aim_.push_back(AimParams<T>::init(c, cfg_.id_dim, rng));
    } else {
      plain_norm_.emplace_back(c);
    }
    decoder_.push_back(ConvLayer<T>::init(c, next, kKernel, kStride, kPad, true, rng));
    // The next block normalizes per channel, which cancels a bias exactly.
    if (k + 1 < cfg_.blocks) decoder_.back().bias = nullptr;
  }
  if (cfg_.uses_links()) {
    for (std::size_t i = 0; i < cfg_.link_resolutions.size(); ++i) {
      const std::size_t k = decoder_block_for(cfg_, cfg_.link_resolutions[i]);
      const std::size_t c = decoder_channels(cfg_, k);
      Link link{k, std::nullopt, {}};
      if (cfg_.ablation == Ablation::unet) {
        link.fusion = ConvLayer<T>::init(2 * c, c, 1, 1, 0, false, rng);
      } else {
        const std::size_t h = link_hidden(c);
        link.attention = CncParams<T>::init(c, c, h, cfg_.radius_for(i), rng);
        link.fusion = ConvLayer<T>::init(c + h, c, 1, 1, 0, false, rng);
      }
      links_.push_back(std::move(link));
    }
  }
}

template <typename T>
typename Generator<T>::Encoded Generator<T>::encode(Graph<T>& g, const TensorPtr<T>& images) const {
  check_image_shape(images->shape(), cfg_.image_size);
  Encoded out;
  auto h = images;
  for (const auto& conv : encoder_) {
    h = pointwise(g, conv(g, h), Unary::leaky_relu);
    out.blocks.push_back(h);
  }
  out.f_id = id_head_(g, spatial_mean(g, h));
  return out;
}

template <typename T>
TensorPtr<T> Generator<T>::latent(Graph<T>& g, const TensorPtr<T>& f_id, const TensorPtr<T>& z,
                                  const TensorPtr<T>& code) const {
  const std::size_t n = f_id->dim(0);
  if (z->rank() != 2 || z->dim(0) != n || z->dim(1) != cfg_.noise_dim) {
    throw DimensionError("noise must be [" + std::to_string(n) + "," + std::to_string(cfg_.noise_dim) + "], got " +
                         shape_str(z->shape()));
  }
  if (code->rank() != 2 || code->dim(0) != n || code->dim(1) != cfg_.num_attributes) {
    throw DimensionError("attribute code must be [" + std::to_string(n) + "," +
                         std::to_string(cfg_.num_attributes) + "], got " + shape_str(code->shape()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0;
    for (std::size_t a = 0; a < cfg_.num_attributes; ++a) {
      const double v = double((*code)[i * cfg_.num_attributes + a]);
      if (v < -1e-6) throw LabelError("attribute code row " + std::to_string(i) + " has a negative entry");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-4) {
      throw LabelError("attribute code row " + std::to_string(i) + " sums to " + std::to_string(total) + ", not 1");
    }
  }
  return concat_features<T>(g, {f_id, z, code});
}

template <typename T>
TensorPtr<T> Generator<T>::decode(Graph<T>& g, const TensorPtr<T>& f_l, const Encoded& enc, Mode mode) {
  if (f_l->rank() != 2 || f_l->dim(1) != cfg_.latent_dim()) {
    throw DimensionError("latent vector must be [N," + std::to_string(cfg_.latent_dim()) + "], got " +
                         shape_str(f_l->shape()));
  }
  const std::size_t n = f_l->dim(0);
  auto h = f_l;
  if (latent_hidden_) h = pointwise(g, (*latent_hidden_)(g, h), Unary::leaky_relu);
  h = reshape(g, seed_(g, h), {n, decoder_channels(cfg_, 0), cfg_.seed_size(), cfg_.seed_size()});
  for (std::size_t k = 0; k < cfg_.blocks; ++k) {
    h = cfg_.uses_aim() ? aim_forward(g, h, enc.f_id, aim_[k], mode) : batch_norm(g, h, plain_norm_[k], mode);
    h = pointwise(g, h, Unary::relu);
    for (const auto& link : links_) {
      if (link.decoder_block != k) continue;
      const auto& x = enc.blocks.at(cfg_.blocks - 1 - k);
      TensorPtr<T> fused;
      switch (cfg_.ablation) {
        case Ablation::unet: fused = concat_channels(g, h, x); break;
        case Ablation::global_nc: fused = global_nc_forward(g, x, h, *link.attention); break;
        default: fused = cnc_forward(g, x, h, *link.attention); break;
      }
      h = link.fusion(g, fused);
    }
    h = decoder_[k](g, h);
  }
  return pointwise(g, h, Unary::tanh);
}

template <typename T>
TensorPtr<T> Generator<T>::generate(Graph<T>& g, const TensorPtr<T>& images, const TensorPtr<T>& z,
                                    const TensorPtr<T>& code, Mode mode) {
  auto enc = encode(g, images);
  return decode(g, latent(g, enc.f_id, z, code), enc, mode);
}

template <typename T>
ParameterSet<T> Generator<T>::parameters() const {
  ParameterSet<T> set;
  for (std::size_t k = 0; k < encoder_.size(); ++k) encoder_[k].collect("gen.enc" + std::to_string(k), set);
  id_head_.collect("gen.id_head", set);
  if (latent_hidden_) latent_hidden_->collect("gen.latent_hidden", set);
  seed_.collect("gen.seed", set);
  for (std::size_t k = 0; k < decoder_.size(); ++k) {
    if (cfg_.uses_aim()) aim_[k].collect("gen.aim" + std::to_string(k), set);
    decoder_[k].collect("gen.dec" + std::to_string(k), set);
  }
  for (std::size_t i = 0; i < links_.size(); ++i) {
    const std::string prefix = "gen.link" + std::to_string(i);
    if (links_[i].attention) {
      set.add(prefix + ".wq", links_[i].attention->wq);
      set.add(prefix + ".wk", links_[i].attention->wk);
      set.add(prefix + ".wv", links_[i].attention->wv);
    }
    links_[i].fusion.collect(prefix + ".fusion", set);
  }
  return set;
}

template <typename T>
BufferList<T> Generator<T>::buffers() {
  BufferList<T> out;
  for (std::size_t k = 0; k < aim_.size(); ++k) aim_[k].buffers("gen.aim" + std::to_string(k), out);
  for (std::size_t k = 0; k < plain_norm_.size(); ++k) {
    out.emplace_back("gen.norm" + std::to_string(k) + ".running_mean", &plain_norm_[k].running_mean);
    out.emplace_back("gen.norm" + std::to_string(k) + ".running_var", &plain_norm_[k].running_var);
  }
  return out;
}

template <typename T>
Discriminator<T>::Discriminator(const NetConfig& config, Rng& rng) : cfg_(config) {
  cfg_.validate();
  std::size_t cin = 3;
  for (std::size_t k = 0; k < cfg_.blocks; ++k) {
    trunk_.push_back(ConvLayer<T>::init(cin, cfg_.channels_at_block(k), kKernel, kStride, kPad, false, rng));
    cin = cfg_.channels_at_block(k);
  }
  const std::size_t flat = cin * cfg_.seed_size() * cfg_.seed_size();
  identity_head_ = DenseLayer<T>::init(flat, cfg_.num_identities + 1, rng);
  attribute_head_ = DenseLayer<T>::init(flat, cfg_.num_attributes, rng);
}

template <typename T>
typename Discriminator<T>::Logits Discriminator<T>::discriminate(Graph<T>& g, const TensorPtr<T>& images) const {
  check_image_shape(images->shape(), cfg_.image_size);
  auto h = images;
  for (const auto& conv : trunk_) h = pointwise(g, conv(g, h), Unary::leaky_relu);
  const std::size_t n = images->dim(0);
  auto flat = reshape(g, h, {n, h->numel() / n});
  return {identity_head_(g, flat), attribute_head_(g, flat)};
}

template <typename T>
ParameterSet<T> Discriminator<T>::parameters() const {
  ParameterSet<T> set;
  for (std::size_t k = 0; k < trunk_.size(); ++k) trunk_[k].collect("disc.conv" + std::to_string(k), set);
  identity_head_.collect("disc.identity", set);
  attribute_head_.collect("disc.attribute", set);
  return set;
}

template class Generator<float>;
template class Generator<double>;
template class Discriminator<float>;
template class Discriminator<double>;

}  // namespace idmorph
