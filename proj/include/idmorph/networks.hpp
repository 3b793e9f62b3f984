#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "idmorph/aim.hpp"
#include "idmorph/cnc.hpp"
#include "idmorph/layers.hpp"

namespace idmorph {

enum class Ablation { full, vanilla, global_nc, unet, cnc_only };

std::string to_string(Ablation a);
Ablation parse_ablation(const std::string& s);

/// Architecture knobs shared by the generator and discriminator.
struct NetConfig {
  std::size_t image_size = 64;
  std::size_t base_channels = 32;  // encoder block k has base << k channels
  std::size_t blocks = 4;
  std::size_t id_dim = 128;
  std::size_t noise_dim = 128;
  std::size_t num_attributes = 5;
  std::size_t num_identities = 10;
  Ablation ablation = Ablation::full;
  std::vector<std::size_t> link_resolutions{16};
  /// Per-link radius; empty means resolution / 4.
  std::vector<std::size_t> link_radii;
  /// Give variants without AIM a latent hidden layer so their parameter
  /// count matches the full model.
  bool balance_parameters = true;

  void validate() const;
  bool uses_aim() const { return ablation == Ablation::full || ablation == Ablation::unet; }
  bool uses_links() const { return ablation != Ablation::vanilla; }
  std::size_t seed_size() const { return image_size >> blocks; }
  std::size_t channels_at_block(std::size_t k) const { return base_channels << k; }
  std::size_t latent_dim() const { return id_dim + noise_dim + num_attributes; }
  std::size_t radius_for(std::size_t link_index) const;
};

template <typename T>
class Generator {
 public:
  struct Encoded {
    TensorPtr<T> f_id;                // [N, id_dim]
    std::vector<TensorPtr<T>> blocks;  // encoder block outputs, finest first
  };

  Generator(const NetConfig& config, Rng& rng);

  const NetConfig& config() const { return cfg_; }

  Encoded encode(Graph<T>& g, const TensorPtr<T>& images) const;

  /// f_l = [f_id, z, code]. code rows must be convex combinations of one-hots.
  TensorPtr<T> latent(Graph<T>& g, const TensorPtr<T>& f_id, const TensorPtr<T>& z, const TensorPtr<T>& code) const;

  TensorPtr<T> decode(Graph<T>& g, const TensorPtr<T>& f_l, const Encoded& enc, Mode mode);

  TensorPtr<T> generate(Graph<T>& g, const TensorPtr<T>& images, const TensorPtr<T>& z, const TensorPtr<T>& code,
                        Mode mode);

  ParameterSet<T> parameters() const;
  BufferList<T> buffers();
  std::size_t latent_hidden_width() const { return latent_hidden_ ? latent_hidden_->out() : 0; }

  /// Parameter count of a configuration, computed without allocating it.
  static std::size_t parameter_count(const NetConfig& config, std::size_t latent_hidden);

 private:
  struct Link {
    std::size_t decoder_block;
    std::optional<CncParams<T>> attention;
    ConvLayer<T> fusion;
  };

  NetConfig cfg_;
  std::vector<ConvLayer<T>> encoder_;
  DenseLayer<T> id_head_;
  std::optional<DenseLayer<T>> latent_hidden_;
  DenseLayer<T> seed_;
  std::vector<ConvLayer<T>> decoder_;
  std::vector<AimParams<T>> aim_;
  std::vector<BatchNormStats<T>> plain_norm_;
  std::vector<Link> links_;
};

template <typename T>
class Discriminator {
 public:
  struct Logits {
    TensorPtr<T> identity;   // [N, N_i + 1]; index N_i is the fake class
    TensorPtr<T> attribute;  // [N, N_a]
  };

  Discriminator(const NetConfig& config, Rng& rng);

  const NetConfig& config() const { return cfg_; }
  Logits discriminate(Graph<T>& g, const TensorPtr<T>& images) const;
  ParameterSet<T> parameters() const;

 private:
  NetConfig cfg_;
  std::vector<ConvLayer<T>> trunk_;
  DenseLayer<T> identity_head_;
  DenseLayer<T> attribute_head_;
};

/// Validates [N,3,S,S] against the configured image size.
void check_image_shape(const Shape& shape, std::size_t image_size);

}  // namespace idmorph
