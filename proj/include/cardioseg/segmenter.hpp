#pragma once

#include <cstdint>
#include <filesystem>
#include <new>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cardioseg/data.hpp"

namespace cardioseg {

/// Encoder–decoder layout. attention_bottleneck=false is the plain UNet,
/// true inserts one residual multi-head self-attention block after the
/// bottleneck convolutions (the TUNet variant).
struct ModelConfig {
  int depth = 3;
  int base_channels = 16;
  int num_classes = kNumClasses;
  bool attention_bottleneck = false;
  int attention_heads = 1;
  int input_height = 32;
  int input_width = 32;

  void validate() const;
  int channels_at(int level) const { return base_channels << level; }
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig defaults = {});

/// Allocator with a fixed 64-byte alignment. Vectorized kernels pick their
/// reduction order from buffer alignment, so a fixed alignment keeps results
/// bit-reproducible regardless of where the heap places a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// NCHW activation tensor.
template <typename T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  AlignedVector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_) {}

  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t image_stride() const { return static_cast<std::size_t>(c) * plane(); }
  T* image(int i) { return data.data() + i * image_stride(); }
  const T* image(int i) const { return data.data() + i * image_stride(); }
  T& at(int i, int ch, int r, int col) { return data[i * image_stride() + ch * plane() + static_cast<std::size_t>(r) * w + col]; }
  const T& at(int i, int ch, int r, int col) const {
    return data[i * image_stride() + ch * plane() + static_cast<std::size_t>(r) * w + col];
  }
};

template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;
};

/// Per-pixel class probabilities, laid out (batch, H, W, classes).
template <typename T>
struct PredictionMap {
  int batch = 0, height = 0, width = 0, classes = 0;
  std::vector<T> probs;

  T prob(int b, int r, int c, int k) const {
    return probs[((static_cast<std::size_t>(b) * height + r) * width + c) * classes + k];
  }
  LabelGrid argmax(int b) const;
};

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

template <typename T>
class BasicSegmenter {
 public:
  struct Trace;  // forward activations kept for the backward pass

  BasicSegmenter() = default;
  BasicSegmenter(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Raw class scores, NCHW with C = num_classes. `images` is (batch, H, W)
  /// flattened row-major.
  Tensor<T> logits(const Tensor<T>& images) const { return logits(images, nullptr); }
  PredictionMap<T> forward(const Tensor<T>& images) const;

  /// Forward pass, Loss = Σ_i weight_i · CE_i, and reverse-mode accumulation
  /// of dLoss/dParameter into each Parameter::grad. Returns the per-image CE.
  std::vector<double> accumulate_gradients(const Tensor<T>& images, const std::vector<LabelGrid>& labels,
                                           const std::vector<double>& weights);
  void zero_grad();

  /// Throws NumericError naming the first parameter with a non-finite gradient.
  void check_gradients() const;
  void adam_step(AdamState<T>& state, const AdamSettings& settings);

  template <typename U>
  BasicSegmenter<U> cast() const;

 private:
  template <typename U>
  friend class BasicSegmenter;

  struct Conv {
    int weight = -1, bias = -1, cin = 0, cout = 0, k = 3;
  };
  struct Attention {
    int wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1, wo = -1, bo = -1;
  };

  int add_param(std::string name, std::vector<int> shape);
  Conv make_conv(const std::string& name, int cin, int cout, int k);
  void build_layers();

  Tensor<T> logits(const Tensor<T>& images, Trace* trace) const;
  Tensor<T> conv_forward(const Conv& conv, const Tensor<T>& x, bool relu) const;
  Tensor<T> conv_backward(const Conv& conv, const Tensor<T>& x, const Tensor<T>& y, Tensor<T> dy, bool relu);
  Tensor<T> attention_forward(const Tensor<T>& x, Trace* trace) const;
  Tensor<T> attention_backward(const Trace& trace, const Tensor<T>& dy);
  void backward(const Trace& trace, const Tensor<T>& dlogits);

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  std::vector<std::pair<Conv, Conv>> encoder_;
  std::pair<Conv, Conv> bottleneck_;
  Attention attention_;
  std::vector<std::pair<Conv, Conv>> decoder_;  // index = level
  Conv head_;
};

using Segmenter = BasicSegmenter<float>;

/// Mean over batch and pixels of −log max(p_true, 1e-12).
template <typename T>
double cross_entropy_loss(const PredictionMap<T>& pred, const std::vector<LabelGrid>& labels);

/// Per-image mean cross-entropy of softmax(logits).
template <typename T>
std::vector<double> cross_entropy_per_image(const Tensor<T>& logits, const std::vector<LabelGrid>& labels);

/// dLoss/dlogits for Loss = Σ_i weight_i · CE_i.
template <typename T>
Tensor<T> cross_entropy_grad(const Tensor<T>& logits, const std::vector<LabelGrid>& labels,
                             const std::vector<double>& weights);

template <typename T>
PredictionMap<T> softmax(const Tensor<T>& logits);

template <typename T>
double l1_norm(const BasicSegmenter<T>& model);

/// Checkpoint: "CSEGCKPT", u64 LE header length, JSON header (config and
/// parameter manifest with names, shapes, offsets), f32 LE payload.
void save_checkpoint(const Segmenter& model, const std::filesystem::path& file);
Segmenter load_checkpoint(const std::filesystem::path& file);

}  // namespace cardioseg
