#include "cardioseg/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cardioseg/rng.hpp"

namespace cardioseg {

using nlohmann::json;

void ModelConfig::validate() const {
  if (depth < 1) throw ConfigError("model.depth must be at least 1");
  if (base_channels < 1) throw ConfigError("model.base_channels must be at least 1");
  if (num_classes != kNumClasses) throw ConfigError("model.num_classes must be 4");
  if (attention_heads < 1) throw ConfigError("model.attention_heads must be at least 1");
  const int factor = 1 << depth;
  if (input_height < factor || input_width < factor || input_height % factor != 0 || input_width % factor != 0)
    throw ConfigError("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                      " is not divisible by 2^depth = " + std::to_string(factor));
  if (attention_bottleneck && channels_at(depth) % attention_heads != 0)
    throw ConfigError("bottleneck channels must be divisible by model.attention_heads");
}

json model_config_to_json(const ModelConfig& c) {
  return {{"depth", c.depth},
          {"base_channels", c.base_channels},
          {"num_classes", c.num_classes},
          {"attention", c.attention_bottleneck},
          {"attention_heads", c.attention_heads},
          {"input_size", {c.input_height, c.input_width}}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  c.depth = j.value("depth", c.depth);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.attention_bottleneck = j.value("attention", c.attention_bottleneck);
  c.attention_heads = j.value("attention_heads", c.attention_heads);
  if (j.contains("input_size")) {
    c.input_height = j.at("input_size").at(0).get<int>();
    c.input_width = j.at("input_size").at(1).get<int>();
  }
  return c;
}

template <typename T>
LabelGrid PredictionMap<T>::argmax(int b) const {
  LabelGrid out(height, width);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      int best = 0;
      for (int k = 1; k < classes; ++k)
        if (prob(b, r, c, k) > prob(b, r, c, best)) best = k;
      out.at(r, c) = static_cast<std::uint8_t>(best);
    }
  return out;
}

namespace detail {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

}  // namespace detail

using detail::ConstMatMap;
using detail::Mat;
using detail::MatMap;
using detail::RowVec;

namespace {

// Columns are output pixels, rows are (channel, ky, kx) taps; zero padding k/2.
template <typename T>
void im2col(const T* x, int cin, int h, int w, int k, Mat<T>& cols) {
  const int pad = k / 2;
  cols.resize(static_cast<Eigen::Index>(cin) * k * k, static_cast<Eigen::Index>(h) * w);
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols.row((ci * k + ky) * k + kx).data();
        for (int r = 0; r < h; ++r) {
          const int sr = r + ky - pad;
          for (int c = 0; c < w; ++c) {
            const int sc = c + kx - pad;
            row[r * w + c] = (sr >= 0 && sr < h && sc >= 0 && sc < w) ? x[(ci * h + sr) * w + sc] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_add(const Mat<T>& cols, int cin, int h, int w, int k, T* dx) {
  const int pad = k / 2;
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols.row((ci * k + ky) * k + kx).data();
        for (int r = 0; r < h; ++r) {
          const int sr = r + ky - pad;
          if (sr < 0 || sr >= h) continue;
          for (int c = 0; c < w; ++c) {
            const int sc = c + kx - pad;
            if (sc >= 0 && sc < w) dx[(ci * h + sr) * w + sc] += row[r * w + c];
          }
        }
      }
}

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x, std::vector<std::uint32_t>& argmax) {
  Tensor<T> y(x.n, x.c, x.h / 2, x.w / 2);
  argmax.assign(y.data.size(), 0);
  std::size_t o = 0;
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch) {
      const std::size_t base = i * x.image_stride() + ch * x.plane();
      for (int r = 0; r < y.h; ++r)
        for (int c = 0; c < y.w; ++c, ++o) {
          std::size_t best = base + static_cast<std::size_t>(2 * r) * x.w + 2 * c;
          for (int dr = 0; dr < 2; ++dr)
            for (int dc = 0; dc < 2; ++dc) {
              const std::size_t idx = base + static_cast<std::size_t>(2 * r + dr) * x.w + 2 * c + dc;
              if (x.data[idx] > x.data[best]) best = idx;
            }
          y.data[o] = x.data[best];
          argmax[o] = static_cast<std::uint32_t>(best);
        }
    }
  return y;
}

template <typename T>
Tensor<T> upsample2(const Tensor<T>& x) {
  Tensor<T> y(x.n, x.c, x.h * 2, x.w * 2);
  for (int i = 0; i < x.n; ++i)
    for (int ch = 0; ch < x.c; ++ch)
      for (int r = 0; r < y.h; ++r)
        for (int c = 0; c < y.w; ++c) y.at(i, ch, r, c) = x.at(i, ch, r / 2, c / 2);
  return y;
}

template <typename T>
Tensor<T> upsample2_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.n, dy.c, dy.h / 2, dy.w / 2);
  for (int i = 0; i < dy.n; ++i)
    for (int ch = 0; ch < dy.c; ++ch)
      for (int r = 0; r < dy.h; ++r)
        for (int c = 0; c < dy.w; ++c) dx.at(i, ch, r / 2, c / 2) += dy.at(i, ch, r, c);
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> y(a.n, a.c + b.c, a.h, a.w);
  for (int i = 0; i < a.n; ++i) {
    std::copy(a.image(i), a.image(i) + a.image_stride(), y.image(i));
    std::copy(b.image(i), b.image(i) + b.image_stride(), y.image(i) + a.image_stride());
  }
  return y;
}

template <typename T>
void split_channels(const Tensor<T>& dy, int ca, Tensor<T>& da, Tensor<T>& db) {
  da = Tensor<T>(dy.n, ca, dy.h, dy.w);
  db = Tensor<T>(dy.n, dy.c - ca, dy.h, dy.w);
  for (int i = 0; i < dy.n; ++i) {
    std::copy(dy.image(i), dy.image(i) + da.image_stride(), da.image(i));
    std::copy(dy.image(i) + da.image_stride(), dy.image(i) + dy.image_stride(), db.image(i));
  }
}

template <typename T>
void softmax_rows(Mat<T>& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    const T m = row.maxCoeff();
    row = (row.array() - m).exp();
    row /= row.sum();
  }
}

}  // namespace

template <typename T>
struct BasicSegmenter<T>::Trace {
  struct Level {
    Tensor<T> in, mid, out;
  };
  std::vector<Level> enc;
  std::vector<std::vector<std::uint32_t>> pool_argmax;
  Level bott;
  std::vector<Level> dec;  // dec[l].in is the concatenated input
  std::vector<int> dec_up_channels;
  Tensor<T> head_in;
  // attention, per image
  std::vector<Mat<T>> att_x, att_q, att_k, att_v, att_o;
  std::vector<std::vector<Mat<T>>> att_a;
};

template <typename T>
BasicSegmenter<T>::BasicSegmenter(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  build_layers();
  Rng rng(seed);
  for (auto& p : params_) {
    const bool is_bias = p.name.ends_with(".bias");
    if (is_bias) continue;
    double fan_in = 1.0;
    for (std::size_t d = 1; d < p.shape.size(); ++d) fan_in *= p.shape[d];
    double scale = std::sqrt(2.0 / fan_in);
    if (p.name.starts_with("head.")) scale = std::sqrt(1.0 / fan_in);
    if (p.name.starts_with("attn.")) scale = std::sqrt(1.0 / p.shape[0]);
    for (auto& v : p.value) v = static_cast<T>(scale * rng.normal());
  }
}

template <typename T>
int BasicSegmenter<T>::add_param(std::string name, std::vector<int> shape) {
  Parameter<T> p;
  p.name = std::move(name);
  std::size_t count = 1;
  for (int s : shape) count *= static_cast<std::size_t>(s);
  p.shape = std::move(shape);
  p.value.assign(count, T(0));
  p.grad.assign(count, T(0));
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

template <typename T>
typename BasicSegmenter<T>::Conv BasicSegmenter<T>::make_conv(const std::string& name, int cin, int cout, int k) {
  Conv c;
  c.cin = cin;
  c.cout = cout;
  c.k = k;
  c.weight = add_param(name + ".weight", {cout, cin, k, k});
  c.bias = add_param(name + ".bias", {cout});
  return c;
}

template <typename T>
void BasicSegmenter<T>::build_layers() {
  params_.clear();
  encoder_.clear();
  decoder_.assign(config_.depth, {});
  int cin = 1;
  for (int l = 0; l < config_.depth; ++l) {
    const int ch = config_.channels_at(l);
    const std::string name = "enc" + std::to_string(l);
    auto a = make_conv(name + ".conv1", cin, ch, 3);
    auto b = make_conv(name + ".conv2", ch, ch, 3);
    encoder_.emplace_back(a, b);
    cin = ch;
  }
  const int bch = config_.channels_at(config_.depth);
  bottleneck_.first = make_conv("bottleneck.conv1", cin, bch, 3);
  bottleneck_.second = make_conv("bottleneck.conv2", bch, bch, 3);
  if (config_.attention_bottleneck) {
    attention_.wq = add_param("attn.q.weight", {bch, bch});
    attention_.bq = add_param("attn.q.bias", {bch});
    attention_.wk = add_param("attn.k.weight", {bch, bch});
    attention_.bk = add_param("attn.k.bias", {bch});
    attention_.wv = add_param("attn.v.weight", {bch, bch});
    attention_.bv = add_param("attn.v.bias", {bch});
    attention_.wo = add_param("attn.out.weight", {bch, bch});
    attention_.bo = add_param("attn.out.bias", {bch});
  }
  int up = bch;
  for (int l = config_.depth - 1; l >= 0; --l) {
    const int ch = config_.channels_at(l);
    const std::string name = "dec" + std::to_string(l);
    auto a = make_conv(name + ".conv1", up + ch, ch, 3);
    auto b = make_conv(name + ".conv2", ch, ch, 3);
    decoder_[l] = {a, b};
    up = ch;
  }
  head_ = make_conv("head", config_.base_channels, config_.num_classes, 1);
}

template <typename T>
std::size_t BasicSegmenter<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
Tensor<T> BasicSegmenter<T>::conv_forward(const Conv& conv, const Tensor<T>& x, bool relu) const {
  Tensor<T> y(x.n, conv.cout, x.h, x.w);
  const auto hw = static_cast<Eigen::Index>(x.plane());
  ConstMatMap<T> weight(params_[conv.weight].value.data(), conv.cout, static_cast<Eigen::Index>(conv.cin) * conv.k * conv.k);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(params_[conv.bias].value.data(), conv.cout);
  Mat<T> cols;
  for (int i = 0; i < x.n; ++i) {
    MatMap<T> out(y.image(i), conv.cout, hw);
    if (conv.k == 1) {
      out.noalias() = weight * ConstMatMap<T>(x.image(i), conv.cin, hw);
    } else {
      im2col(x.image(i), conv.cin, x.h, x.w, conv.k, cols);
      out.noalias() = weight * cols;
    }
    out.colwise() += bias;
    if (relu) out = out.cwiseMax(T(0));
  }
  return y;
}

template <typename T>
Tensor<T> BasicSegmenter<T>::conv_backward(const Conv& conv, const Tensor<T>& x, const Tensor<T>& y, Tensor<T> dy,
                                           bool relu) {
  if (relu)
    for (std::size_t i = 0; i < dy.data.size(); ++i)
      if (!(y.data[i] > T(0))) dy.data[i] = T(0);
  Tensor<T> dx(x.n, x.c, x.h, x.w);
  const auto hw = static_cast<Eigen::Index>(x.plane());
  const auto taps = static_cast<Eigen::Index>(conv.cin) * conv.k * conv.k;
  ConstMatMap<T> weight(params_[conv.weight].value.data(), conv.cout, taps);
  MatMap<T> dweight(params_[conv.weight].grad.data(), conv.cout, taps);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dbias(params_[conv.bias].grad.data(), conv.cout);
  Mat<T> cols, dcols;
  for (int i = 0; i < x.n; ++i) {
    ConstMatMap<T> g(dy.image(i), conv.cout, hw);
    dbias += g.rowwise().sum();
    if (conv.k == 1) {
      ConstMatMap<T> in(x.image(i), conv.cin, hw);
      dweight.noalias() += g * in.transpose();
      MatMap<T>(dx.image(i), conv.cin, hw).noalias() = weight.transpose() * g;
    } else {
      im2col(x.image(i), conv.cin, x.h, x.w, conv.k, cols);
      dweight.noalias() += g * cols.transpose();
      dcols.noalias() = weight.transpose() * g;
      col2im_add(dcols, conv.cin, x.h, x.w, conv.k, dx.image(i));
    }
  }
  return dx;
}

template <typename T>
Tensor<T> BasicSegmenter<T>::attention_forward(const Tensor<T>& x, Trace* trace) const {
  const int C = x.c;
  const auto tokens = static_cast<Eigen::Index>(x.plane());
  const int heads = config_.attention_heads;
  const int d = C / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  auto W = [&](int idx) { return ConstMatMap<T>(params_[idx].value.data(), C, C); };
  auto B = [&](int idx) { return Eigen::Map<const RowVec<T>>(params_[idx].value.data(), C); };

  Tensor<T> y(x.n, x.c, x.h, x.w);
  for (int i = 0; i < x.n; ++i) {
    Mat<T> X = ConstMatMap<T>(x.image(i), C, tokens).transpose();
    Mat<T> Q = X * W(attention_.wq);
    Q.rowwise() += B(attention_.bq);
    Mat<T> K = X * W(attention_.wk);
    K.rowwise() += B(attention_.bk);
    Mat<T> V = X * W(attention_.wv);
    V.rowwise() += B(attention_.bv);
    Mat<T> O(tokens, C);
    std::vector<Mat<T>> probs;
    for (int h = 0; h < heads; ++h) {
      Mat<T> A = Q.middleCols(h * d, d) * K.middleCols(h * d, d).transpose() * scale;
      softmax_rows(A);
      O.middleCols(h * d, d) = A * V.middleCols(h * d, d);
      probs.push_back(std::move(A));
    }
    Mat<T> Y = X + O * W(attention_.wo);
    Y.rowwise() += B(attention_.bo);
    MatMap<T>(y.image(i), C, tokens) = Y.transpose();
    if (trace) {
      trace->att_x.push_back(std::move(X));
      trace->att_q.push_back(std::move(Q));
      trace->att_k.push_back(std::move(K));
      trace->att_v.push_back(std::move(V));
      trace->att_o.push_back(std::move(O));
      trace->att_a.push_back(std::move(probs));
    }
  }
  return y;
}

template <typename T>
Tensor<T> BasicSegmenter<T>::attention_backward(const Trace& trace, const Tensor<T>& dy) {
  const int C = dy.c;
  const auto tokens = static_cast<Eigen::Index>(dy.plane());
  const int heads = config_.attention_heads;
  const int d = C / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  auto W = [&](int idx) { return ConstMatMap<T>(params_[idx].value.data(), C, C); };
  auto dW = [&](int idx) { return MatMap<T>(params_[idx].grad.data(), C, C); };
  auto dB = [&](int idx) { return Eigen::Map<RowVec<T>>(params_[idx].grad.data(), C); };

  Tensor<T> dx(dy.n, dy.c, dy.h, dy.w);
  for (int i = 0; i < dy.n; ++i) {
    const Mat<T> dY = ConstMatMap<T>(dy.image(i), C, tokens).transpose();
    const auto& X = trace.att_x[i];
    const auto& Q = trace.att_q[i];
    const auto& K = trace.att_k[i];
    const auto& V = trace.att_v[i];
    Mat<T> dX = dY;
    dW(attention_.wo).noalias() += trace.att_o[i].transpose() * dY;
    dB(attention_.bo) += dY.colwise().sum();
    const Mat<T> dO = dY * W(attention_.wo).transpose();
    Mat<T> dQ(tokens, C), dK(tokens, C), dV(tokens, C);
    for (int h = 0; h < heads; ++h) {
      const auto& A = trace.att_a[i][h];
      const Mat<T> dOh = dO.middleCols(h * d, d);
      const Mat<T> dA = dOh * V.middleCols(h * d, d).transpose();
      dV.middleCols(h * d, d) = A.transpose() * dOh;
      Mat<T> dS = A.cwiseProduct(dA);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> rows = dS.rowwise().sum();
      dS = A.cwiseProduct(dA.colwise() - rows) * scale;
      dQ.middleCols(h * d, d) = dS * K.middleCols(h * d, d);
      dK.middleCols(h * d, d) = dS.transpose() * Q.middleCols(h * d, d);
    }
    dW(attention_.wq).noalias() += X.transpose() * dQ;
    dB(attention_.bq) += dQ.colwise().sum();
    dW(attention_.wk).noalias() += X.transpose() * dK;
    dB(attention_.bk) += dK.colwise().sum();
    dW(attention_.wv).noalias() += X.transpose() * dV;
    dB(attention_.bv) += dV.colwise().sum();
    dX.noalias() += dQ * W(attention_.wq).transpose();
    dX.noalias() += dK * W(attention_.wk).transpose();
    dX.noalias() += dV * W(attention_.wv).transpose();
    MatMap<T>(dx.image(i), C, tokens) = dX.transpose();
  }
  return dx;
}

template <typename T>
Tensor<T> BasicSegmenter<T>::logits(const Tensor<T>& images, Trace* trace) const {
  if (images.c != 1 || images.h != config_.input_height || images.w != config_.input_width)
    throw ShapeError("model expects (batch, " + std::to_string(config_.input_height) + ", " +
                     std::to_string(config_.input_width) + ") input, got (" + std::to_string(images.n) + ", " +
                     std::to_string(images.h) + ", " + std::to_string(images.w) + ")");
  Trace local;
  Trace& t = trace ? *trace : local;
  const bool keep = trace != nullptr;
  t = Trace{};
  t.enc.resize(config_.depth);
  t.pool_argmax.resize(config_.depth);
  t.dec.resize(config_.depth);
  t.dec_up_channels.assign(config_.depth, 0);

  Tensor<T> x = images;
  std::vector<Tensor<T>> skips(config_.depth);
  for (int l = 0; l < config_.depth; ++l) {
    auto mid = conv_forward(encoder_[l].first, x, true);
    auto out = conv_forward(encoder_[l].second, mid, true);
    Tensor<T> pooled = maxpool2(out, t.pool_argmax[l]);
    if (keep) {
      t.enc[l].in = std::move(x);
      t.enc[l].mid = std::move(mid);
      t.enc[l].out = out;
    }
    skips[l] = std::move(out);
    x = std::move(pooled);
  }
  {
    auto mid = conv_forward(bottleneck_.first, x, true);
    auto out = conv_forward(bottleneck_.second, mid, true);
    if (keep) {
      t.bott.in = std::move(x);
      t.bott.mid = std::move(mid);
      t.bott.out = out;
    }
    x = config_.attention_bottleneck ? attention_forward(out, keep ? &t : nullptr) : std::move(out);
  }
  for (int l = config_.depth - 1; l >= 0; --l) {
    auto up = upsample2(x);
    t.dec_up_channels[l] = up.c;
    auto cat = concat_channels(up, skips[l]);
    auto mid = conv_forward(decoder_[l].first, cat, true);
    auto out = conv_forward(decoder_[l].second, mid, true);
    if (keep) {
      t.dec[l].in = std::move(cat);
      t.dec[l].mid = std::move(mid);
      t.dec[l].out = out;
    }
    x = std::move(out);
  }
  if (keep) t.head_in = x;
  return conv_forward(head_, x, false);
}

template <typename T>
void BasicSegmenter<T>::backward(const Trace& t, const Tensor<T>& dlogits) {
  Tensor<T> dummy_out;  // head is linear, its output is not needed
  Tensor<T> dx = conv_backward(head_, t.head_in, dummy_out, dlogits, false);
  std::vector<Tensor<T>> dskips(config_.depth);
  for (int l = 0; l < config_.depth; ++l) {
    dx = conv_backward(decoder_[l].second, t.dec[l].mid, t.dec[l].out, std::move(dx), true);
    dx = conv_backward(decoder_[l].first, t.dec[l].in, t.dec[l].mid, std::move(dx), true);
    Tensor<T> dup;
    split_channels(dx, t.dec_up_channels[l], dup, dskips[l]);
    dx = upsample2_backward(dup);
  }
  if (config_.attention_bottleneck) dx = attention_backward(t, dx);
  dx = conv_backward(bottleneck_.second, t.bott.mid, t.bott.out, std::move(dx), true);
  dx = conv_backward(bottleneck_.first, t.bott.in, t.bott.mid, std::move(dx), true);
  for (int l = config_.depth - 1; l >= 0; --l) {
    const auto& lvl = t.enc[l];
    Tensor<T> dout = std::move(dskips[l]);
    const auto& argmax = t.pool_argmax[l];
    for (std::size_t o = 0; o < argmax.size(); ++o) dout.data[argmax[o]] += dx.data[o];
    dx = conv_backward(encoder_[l].second, lvl.mid, lvl.out, std::move(dout), true);
    dx = conv_backward(encoder_[l].first, lvl.in, lvl.mid, std::move(dx), true);
  }
}

template <typename T>
std::vector<double> BasicSegmenter<T>::accumulate_gradients(const Tensor<T>& images, const std::vector<LabelGrid>& labels,
                                                            const std::vector<double>& weights) {
  Trace trace;
  const Tensor<T> z = logits(images, &trace);
  auto losses = cross_entropy_per_image(z, labels);
  backward(trace, cross_entropy_grad(z, labels, weights));
  return losses;
}

template <typename T>
PredictionMap<T> BasicSegmenter<T>::forward(const Tensor<T>& images) const {
  return softmax(logits(images));
}

template <typename T>
void BasicSegmenter<T>::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <typename T>
void BasicSegmenter<T>::check_gradients() const {
  for (const auto& p : params_)
    for (std::size_t i = 0; i < p.grad.size(); ++i)
      if (!std::isfinite(p.grad[i]))
        throw NumericError("non-finite gradient in parameter '" + p.name + "' at element " + std::to_string(i));
}

template <typename T>
void BasicSegmenter<T>::adam_step(AdamState<T>& state, const AdamSettings& s) {
  check_gradients();
  if (state.m.size() != params_.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params_) {
      state.m.emplace_back(p.value.size(), T(0));
      state.v.emplace_back(p.value.size(), T(0));
    }
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * g;
      const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p.value[i] = static_cast<T>(p.value[i] - s.lr * (mi / c1) / (std::sqrt(vi / c2) + s.eps));
    }
  }
}

template <typename T>
template <typename U>
BasicSegmenter<U> BasicSegmenter<T>::cast() const {
  BasicSegmenter<U> out;
  out.config_ = config_;
  out.build_layers();
  for (std::size_t k = 0; k < params_.size(); ++k)
    std::transform(params_[k].value.begin(), params_[k].value.end(), out.params_[k].value.begin(),
                   [](T v) { return static_cast<U>(v); });
  return out;
}

template <typename T>
PredictionMap<T> softmax(const Tensor<T>& logits) {
  PredictionMap<T> p;
  p.batch = logits.n;
  p.height = logits.h;
  p.width = logits.w;
  p.classes = logits.c;
  p.probs.resize(logits.data.size());
  std::vector<double> z(logits.c);
  for (int b = 0; b < logits.n; ++b)
    for (int r = 0; r < logits.h; ++r)
      for (int c = 0; c < logits.w; ++c) {
        double m = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < logits.c; ++k) {
          z[k] = logits.at(b, k, r, c);
          m = std::max(m, z[k]);
        }
        double sum = 0.0;
        for (int k = 0; k < logits.c; ++k) sum += (z[k] = std::exp(z[k] - m));
        for (int k = 0; k < logits.c; ++k)
          p.probs[((static_cast<std::size_t>(b) * p.height + r) * p.width + c) * p.classes + k] = static_cast<T>(z[k] / sum);
      }
  return p;
}

namespace {

constexpr double kProbFloor = 1e-12;

void check_labels(const std::vector<LabelGrid>& labels, int n, int h, int w, int classes) {
  if (static_cast<int>(labels.size()) != n) throw ShapeError("label batch size does not match predictions");
  for (const auto& l : labels) {
    if (l.rows != h || l.cols != w) throw ShapeError("label shape does not match predictions");
    for (auto v : l.values)
      if (v >= classes) throw Error("label value " + std::to_string(v) + " outside [0, num_classes)");
  }
}

}  // namespace

template <typename T>
double cross_entropy_loss(const PredictionMap<T>& pred, const std::vector<LabelGrid>& labels) {
  check_labels(labels, pred.batch, pred.height, pred.width, pred.classes);
  double total = 0.0;
  for (int b = 0; b < pred.batch; ++b)
    for (int r = 0; r < pred.height; ++r)
      for (int c = 0; c < pred.width; ++c)
        total -= std::log(std::max<double>(pred.prob(b, r, c, labels[b].at(r, c)), kProbFloor));
  return total / (static_cast<double>(pred.batch) * pred.height * pred.width);
}

template <typename T>
std::vector<double> cross_entropy_per_image(const Tensor<T>& logits, const std::vector<LabelGrid>& labels) {
  check_labels(labels, logits.n, logits.h, logits.w, logits.c);
  const double cap = -std::log(kProbFloor);
  std::vector<double> out(logits.n, 0.0);
  for (int b = 0; b < logits.n; ++b) {
    double total = 0.0;
    for (int r = 0; r < logits.h; ++r)
      for (int c = 0; c < logits.w; ++c) {
        double m = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < logits.c; ++k) m = std::max<double>(m, logits.at(b, k, r, c));
        double sum = 0.0;
        for (int k = 0; k < logits.c; ++k) sum += std::exp(logits.at(b, k, r, c) - m);
        const double logp = logits.at(b, labels[b].at(r, c), r, c) - m - std::log(sum);
        total += std::min(-logp, cap);
      }
    out[b] = total / (static_cast<double>(logits.h) * logits.w);
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy_grad(const Tensor<T>& logits, const std::vector<LabelGrid>& labels,
                             const std::vector<double>& weights) {
  check_labels(labels, logits.n, logits.h, logits.w, logits.c);
  if (static_cast<int>(weights.size()) != logits.n) throw ShapeError("one loss weight per image required");
  Tensor<T> g(logits.n, logits.c, logits.h, logits.w);
  const double pixels = static_cast<double>(logits.h) * logits.w;
  std::vector<double> e(logits.c);
  for (int b = 0; b < logits.n; ++b) {
    const double scale = weights[b] / pixels;
    for (int r = 0; r < logits.h; ++r)
      for (int c = 0; c < logits.w; ++c) {
        double m = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < logits.c; ++k) m = std::max<double>(m, logits.at(b, k, r, c));
        double sum = 0.0;
        for (int k = 0; k < logits.c; ++k) sum += (e[k] = std::exp(logits.at(b, k, r, c) - m));
        const int y = labels[b].at(r, c);
        for (int k = 0; k < logits.c; ++k)
          g.at(b, k, r, c) = static_cast<T>(scale * (e[k] / sum - (k == y ? 1.0 : 0.0)));
      }
  }
  return g;
}

template <typename T>
double l1_norm(const BasicSegmenter<T>& model) {
  double total = 0.0;
  for (const auto& p : model.parameters())
    for (T v : p.value) total += std::abs(static_cast<double>(v));
  return total;
}

template class BasicSegmenter<float>;
template class BasicSegmenter<double>;
template struct PredictionMap<float>;
template struct PredictionMap<double>;
template BasicSegmenter<double> BasicSegmenter<float>::cast<double>() const;
template BasicSegmenter<float> BasicSegmenter<double>::cast<float>() const;
template BasicSegmenter<float> BasicSegmenter<float>::cast<float>() const;
template BasicSegmenter<double> BasicSegmenter<double>::cast<double>() const;
template PredictionMap<float> softmax(const Tensor<float>&);
template PredictionMap<double> softmax(const Tensor<double>&);
template double cross_entropy_loss(const PredictionMap<float>&, const std::vector<LabelGrid>&);
template double cross_entropy_loss(const PredictionMap<double>&, const std::vector<LabelGrid>&);
template std::vector<double> cross_entropy_per_image(const Tensor<float>&, const std::vector<LabelGrid>&);
template std::vector<double> cross_entropy_per_image(const Tensor<double>&, const std::vector<LabelGrid>&);
template Tensor<float> cross_entropy_grad(const Tensor<float>&, const std::vector<LabelGrid>&, const std::vector<double>&);
template Tensor<double> cross_entropy_grad(const Tensor<double>&, const std::vector<LabelGrid>&, const std::vector<double>&);
template double l1_norm(const BasicSegmenter<float>&);
template double l1_norm(const BasicSegmenter<double>&);

}  // namespace cardioseg
