#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "fedseg/errors.hpp"
#include "fedseg/mask.hpp"
#include "fedseg/rng.hpp"
#include "fedseg/tensor.hpp"

namespace fedseg {

enum class LossKind { kCe, kCeDice };

// Shape-preserving stack of 3x3 convolutions (stride 1, pad 1), ReLU between
// layers, sigmoid head. channels[0] is the image channel count; the final
// entry must be 1. One ParamLayer = one conv's weights plus its bias.
struct LearnerConfig {
    std::vector<int> channels = {1, 8, 8, 8, 1};
    double lr = 5e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    int batch_size = 8;
    LossKind loss_kind = LossKind::kCe;
    double prob_clamp = 1e-7;
    double dice_smooth = 1.0;

    int num_layers() const { return static_cast<int>(channels.size()) - 1; }

    void validate() const {
        if (channels.size() < 2) throw ConfigError("LearnerConfig: need at least one layer");
        for (int c : channels)
            if (c <= 0) throw ConfigError("LearnerConfig: channel counts must be positive");
        if (channels.back() != 1) throw ConfigError("LearnerConfig: final layer must have 1 output channel");
        if (lr <= 0.0) throw ConfigError("LearnerConfig: lr must be positive");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("LearnerConfig: betas must lie in [0, 1)");
        if (batch_size < 1) throw ConfigError("LearnerConfig: batch_size must be >= 1");
        if (prob_clamp <= 0.0 || prob_clamp >= 0.5) throw ConfigError("LearnerConfig: prob_clamp out of range");
        if (dice_smooth <= 0.0) throw ConfigError("LearnerConfig: dice_smooth must be positive");
    }
};

struct ParamLayer {
    Tensor weights;  // {out_c, in_c, 3, 3}
    Tensor bias;     // {out_c}
    int layer_index = 0;  // 1-based position in the stack
};

struct ModelParams {
    std::vector<ParamLayer> layers;

    int num_layers() const { return static_cast<int>(layers.size()); }
};

inline ModelParams zeros_like(const ModelParams& params) {
    ModelParams out;
    out.layers.reserve(params.layers.size());
    for (const ParamLayer& layer : params.layers) {
        ParamLayer z;
        z.weights = Tensor(layer.weights.shape);
        z.bias = Tensor(layer.bias.shape);
        z.layer_index = layer.layer_index;
        out.layers.push_back(std::move(z));
    }
    return out;
}

// dst += coef * src, elementwise over every layer.
inline void params_add_scaled(ModelParams& dst, const ModelParams& src, double coef) {
    if (dst.layers.size() != src.layers.size())
        throw ShapeMismatchError("params_add_scaled: layer count mismatch");
    for (std::size_t j = 0; j < dst.layers.size(); ++j) {
        auto& dw = dst.layers[j].weights.data;
        const auto& sw = src.layers[j].weights.data;
        auto& db = dst.layers[j].bias.data;
        const auto& sb = src.layers[j].bias.data;
        if (dw.size() != sw.size() || db.size() != sb.size())
            throw ShapeMismatchError("params_add_scaled: layer shape mismatch");
        for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += coef * sw[i];
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += coef * sb[i];
    }
}

inline bool params_equal(const ModelParams& a, const ModelParams& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t j = 0; j < a.layers.size(); ++j) {
        if (a.layers[j].layer_index != b.layers[j].layer_index) return false;
        if (a.layers[j].weights.shape != b.layers[j].weights.shape) return false;
        if (a.layers[j].weights.data != b.layers[j].weights.data) return false;
        if (a.layers[j].bias.data != b.layers[j].bias.data) return false;
    }
    return true;
}

// He-uniform fan-in initialization; biases start at zero.
inline ModelParams init_params(const LearnerConfig& config, Rng& rng) {
    config.validate();
    ModelParams params;
    for (int j = 1; j <= config.num_layers(); ++j) {
        const int in_c = config.channels[j - 1];
        const int out_c = config.channels[j];
        ParamLayer layer;
        layer.layer_index = j;
        layer.weights = Tensor({out_c, in_c, 3, 3});
        layer.bias = Tensor({out_c});
        const double limit = std::sqrt(6.0 / (in_c * 9.0));
        for (double& w : layer.weights.data) w = rng.uniform(-limit, limit);
        params.layers.push_back(std::move(layer));
    }
    return params;
}

namespace detail {

// out[oc] = bias[oc] + sum_ic conv3x3(in[ic]); zero padding, shape kept.
// Row-wise three-tap loops with the image edges peeled off so the interior
// loop is branch-free.
inline void conv3x3_forward(const double* in, int c_in, int h, int w, const double* weights,
                            const double* bias, double* out, int c_out) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int oc = 0; oc < c_out; ++oc) std::fill(out + oc * plane, out + (oc + 1) * plane, bias[oc]);
    for (int oc = 0; oc < c_out; ++oc) {
        double* op = out + oc * plane;
        for (int ic = 0; ic < c_in; ++ic) {
            const double* ip = in + ic * plane;
            const double* wk = weights + (static_cast<std::size_t>(oc) * c_in + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                const double w0 = wk[ky * 3 + 0];
                const double w1 = wk[ky * 3 + 1];
                const double w2 = wk[ky * 3 + 2];
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    const double* row = ip + static_cast<std::size_t>(sy) * w;
                    double* orow = op + static_cast<std::size_t>(y) * w;
                    orow[0] += w1 * row[0] + w2 * row[1];
                    for (int x = 1; x < w - 1; ++x)
                        orow[x] += w0 * row[x - 1] + w1 * row[x] + w2 * row[x + 1];
                    orow[w - 1] += w0 * row[w - 2] + w1 * row[w - 1];
                }
            }
        }
    }
}

// d_weights[oc][ic][ky][kx] = sum_{y,x} d_out[oc][y][x] * in[ic][y+ky-1][x+kx-1]
inline void conv3x3_weight_grad(const double* in, int c_in, int h, int w, const double* d_out,
                                int c_out, double* d_weights, double* d_bias) {
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int oc = 0; oc < c_out; ++oc) {
        const double* gp = d_out + oc * plane;
        double acc_b = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc_b += gp[i];
        d_bias[oc] = acc_b;
        for (int ic = 0; ic < c_in; ++ic) {
            const double* ip = in + ic * plane;
            double* dw = d_weights + (static_cast<std::size_t>(oc) * c_in + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - 1;
                    if (sy < 0 || sy >= h) continue;
                    const double* row = ip + static_cast<std::size_t>(sy) * w;
                    const double* grow = gp + static_cast<std::size_t>(y) * w;
                    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
                    for (int x = 1; x < w - 1; ++x) {
                        s0 += grow[x] * row[x - 1];
                        s1 += grow[x] * row[x];
                        s2 += grow[x] * row[x + 1];
                    }
                    a0 += s0 + grow[w - 1] * row[w - 2];
                    a1 += s1 + grow[0] * row[0] + grow[w - 1] * row[w - 1];
                    a2 += s2 + grow[0] * row[1];
                }
                dw[ky * 3 + 0] = a0;
                dw[ky * 3 + 1] = a1;
                dw[ky * 3 + 2] = a2;
            }
        }
    }
}

// d_in = transposed convolution of d_out: same 3x3 kernel routine run with
// channel roles swapped and the kernel rotated 180 degrees.
inline void conv3x3_input_grad(const double* d_out, int c_out, int h, int w, const double* weights,
                               int c_in, double* d_in, std::vector<double>& rotated_scratch) {
    rotated_scratch.assign(static_cast<std::size_t>(c_in) * c_out * 9, 0.0);
    for (int oc = 0; oc < c_out; ++oc)
        for (int ic = 0; ic < c_in; ++ic)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                    rotated_scratch[(static_cast<std::size_t>(ic) * c_out + oc) * 9 + ky * 3 + kx] =
                        weights[(static_cast<std::size_t>(oc) * c_in + ic) * 9 + (2 - ky) * 3 + (2 - kx)];
    const std::vector<double> zero_bias(static_cast<std::size_t>(c_in), 0.0);
    conv3x3_forward(d_out, c_out, h, w, rotated_scratch.data(), zero_bias.data(), d_in, c_in);
}

}  // namespace detail

struct ForwardResult {
    Tensor logits;  // {H, W}
    Tensor probs;   // {H, W}
};

namespace detail {

struct ForwardCache {
    int h = 0;
    int w = 0;
    // activations[0] is the input; activations[j] is the post-ReLU output of
    // layer j (for the final layer: the raw logits plane).
    std::vector<Tensor> activations;
    std::vector<Tensor> pre_activations;  // pre_activations[j-1] is layer j's z
};

inline void validate_image(const ModelParams& params, const Tensor& image) {
    if (params.layers.empty()) throw ConfigError("forward: model has no layers");
    if (image.shape.size() != 3) throw ShapeMismatchError("forward: image must be {C, H, W}");
    const int in_c = params.layers.front().weights.shape[1];
    if (image.shape[0] != in_c) throw ShapeMismatchError("forward: image channel count mismatch");
    if (image.shape[1] < 2 || image.shape[2] < 2)
        throw ShapeMismatchError("forward: spatial dims must be >= 2");
    for (std::size_t j = 1; j < params.layers.size(); ++j)
        if (params.layers[j].weights.shape[1] != params.layers[j - 1].weights.shape[0])
            throw ShapeMismatchError("forward: layer channel composition mismatch");
    if (params.layers.back().weights.shape[0] != 1)
        throw ShapeMismatchError("forward: final layer must emit 1 channel");
}

inline ForwardCache run_forward(const ModelParams& params, const Tensor& image) {
    validate_image(params, image);
    const int h = image.shape[1];
    const int w = image.shape[2];
    ForwardCache cache;
    cache.h = h;
    cache.w = w;
    cache.activations.reserve(params.layers.size() + 1);
    cache.pre_activations.reserve(params.layers.size());
    cache.activations.push_back(image);
    const int num_layers = static_cast<int>(params.layers.size());
    for (int j = 1; j <= num_layers; ++j) {
        const ParamLayer& layer = params.layers[j - 1];
        const int in_c = layer.weights.shape[1];
        const int out_c = layer.weights.shape[0];
        if (cache.activations.back().shape[0] != in_c)
            throw ShapeMismatchError("forward: activation channel mismatch");
        Tensor z({out_c, h, w});
        conv3x3_forward(cache.activations.back().data.data(), in_c, h, w, layer.weights.data.data(),
                        layer.bias.data.data(), z.data.data(), out_c);
        check_finite(z, "forward");
        cache.pre_activations.push_back(z);
        if (j < num_layers) {
            Tensor a = z;
            for (double& v : a.data) v = v > 0.0 ? v : 0.0;
            cache.activations.push_back(std::move(a));
        } else {
            cache.activations.push_back(std::move(z));
        }
    }
    return cache;
}

}  // namespace detail

inline ForwardResult forward(const ModelParams& params, const Tensor& image) {
    const detail::ForwardCache cache = detail::run_forward(params, image);
    ForwardResult out;
    out.logits = Tensor({cache.h, cache.w});
    out.logits.data = cache.activations.back().data;
    out.probs = Tensor({cache.h, cache.w});
    for (std::size_t i = 0; i < out.logits.data.size(); ++i)
        out.probs.data[i] = 1.0 / (1.0 + std::exp(-out.logits.data[i]));
    check_finite(out.probs, "forward(sigmoid)");
    return out;
}

struct PixelLoss {
    Tensor per_pixel;  // {H, W}
    double mean = 0.0;
};

// Cross entropy per pixel with the probability clamped away from {0, 1}.
inline PixelLoss pixel_ce_loss(const Tensor& probs, const BinaryMask& target, double clamp = 1e-7) {
    if (probs.shape.size() != 2 || probs.shape[0] != target.height() || probs.shape[1] != target.width())
        throw ShapeMismatchError("pixel_ce_loss: probs/target shape mismatch");
    PixelLoss out;
    out.per_pixel = Tensor({probs.shape[0], probs.shape[1]});
    double acc = 0.0;
    for (int r = 0; r < target.height(); ++r) {
        for (int c = 0; c < target.width(); ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * target.width() + c;
            const double p = std::clamp(probs.data[i], clamp, 1.0 - clamp);
            const double t = target.at(r, c) ? 1.0 : 0.0;
            const double loss = -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
            out.per_pixel.data[i] = loss;
            acc += loss;
        }
    }
    out.mean = acc / static_cast<double>(out.per_pixel.numel());
    return out;
}

inline double dice_loss(const Tensor& probs, const BinaryMask& target, double smooth = 1.0) {
    if (probs.shape.size() != 2 || probs.shape[0] != target.height() || probs.shape[1] != target.width())
        throw ShapeMismatchError("dice_loss: probs/target shape mismatch");
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (int r = 0; r < target.height(); ++r) {
        for (int c = 0; c < target.width(); ++c) {
            const double p = probs.data[static_cast<std::size_t>(r) * target.width() + c];
            const double t = target.at(r, c) ? 1.0 : 0.0;
            inter += p * t;
            psum += p;
            tsum += t;
        }
    }
    return 1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth);
}

struct LossGrad {
    ModelParams grads;
    double loss = 0.0;
};

namespace detail {

// Exact reverse-mode gradient of the requested loss terms with respect to
// every weight and bias. Split by term so the two-term loss can be checked
// against the sum of its parts.
inline LossGrad backward_impl(const ModelParams& params, const Tensor& image, const BinaryMask& target,
                              bool with_ce, bool with_dice, double clamp, double smooth) {
    const detail::ForwardCache cache = detail::run_forward(params, image);
    const int h = cache.h;
    const int w = cache.w;
    if (target.height() != h || target.width() != w)
        throw ShapeMismatchError("backward: target shape mismatch");
    const std::size_t plane = static_cast<std::size_t>(h) * w;

    const std::vector<double>& logits = cache.activations.back().data;
    std::vector<double> probs(plane);
    for (std::size_t i = 0; i < plane; ++i) probs[i] = 1.0 / (1.0 + std::exp(-logits[i]));

    LossGrad result;
    std::vector<double> dz(plane, 0.0);
    if (with_ce) {
        // Mean cross entropy: d/dlogit = (p - t) / N off the clamp rails, 0 on them.
        double ce_acc = 0.0;
        const double n = static_cast<double>(plane);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const std::size_t i = static_cast<std::size_t>(r) * w + c;
                const double t = target.at(r, c) ? 1.0 : 0.0;
                const double pc = std::clamp(probs[i], clamp, 1.0 - clamp);
                ce_acc += -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
                if (probs[i] > clamp && probs[i] < 1.0 - clamp) dz[i] = (probs[i] - t) / n;
            }
        }
        result.loss = ce_acc / n;
    }
    if (with_dice) {
        double inter = 0.0, psum = 0.0, tsum = 0.0;
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const std::size_t i = static_cast<std::size_t>(r) * w + c;
                const double t = target.at(r, c) ? 1.0 : 0.0;
                inter += probs[i] * t;
                psum += probs[i];
                tsum += t;
            }
        }
        const double denom = psum + tsum + smooth;
        const double numer = 2.0 * inter + smooth;
        result.loss += 1.0 - numer / denom;
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const std::size_t i = static_cast<std::size_t>(r) * w + c;
                const double t = target.at(r, c) ? 1.0 : 0.0;
                const double dldp = (numer - 2.0 * t * denom) / (denom * denom);
                dz[i] += dldp * probs[i] * (1.0 - probs[i]);
            }
        }
    }

    result.grads = zeros_like(params);
    const int num_layers = static_cast<int>(params.layers.size());
    std::vector<double> delta = dz;  // gradient w.r.t. the current layer's pre-activation
    std::vector<double> rotated_scratch;
    for (int j = num_layers; j >= 1; --j) {
        const ParamLayer& layer = params.layers[j - 1];
        const int out_c = layer.weights.shape[0];
        const int in_c = layer.weights.shape[1];
        const Tensor& input_act = cache.activations[j - 1];
        detail::conv3x3_weight_grad(input_act.data.data(), in_c, h, w, delta.data(), out_c,
                                    result.grads.layers[j - 1].weights.data.data(),
                                    result.grads.layers[j - 1].bias.data.data());
        if (j > 1) {
            std::vector<double> d_in(static_cast<std::size_t>(in_c) * plane, 0.0);
            detail::conv3x3_input_grad(delta.data(), out_c, h, w, layer.weights.data.data(), in_c,
                                       d_in.data(), rotated_scratch);
            const std::vector<double>& z_prev = cache.pre_activations[j - 2].data;
            for (std::size_t i = 0; i < d_in.size(); ++i)
                if (z_prev[i] <= 0.0) d_in[i] = 0.0;
            delta = std::move(d_in);
        }
    }
    for (const ParamLayer& g : result.grads.layers) {
        check_finite(g.weights, "backward", /*gradient=*/true);
        check_finite(g.bias, "backward", /*gradient=*/true);
    }
    return result;
}

}  // namespace detail

inline LossGrad backward(const ModelParams& params, const Tensor& image, const BinaryMask& target,
                         LossKind loss_kind, double clamp = 1e-7, double smooth = 1.0) {
    return detail::backward_impl(params, image, target, /*with_ce=*/true,
                                 /*with_dice=*/loss_kind == LossKind::kCeDice, clamp, smooth);
}

struct AdamState {
    ModelParams m;
    ModelParams v;
    long long t = 0;
};

inline AdamState init_adam(const ModelParams& params) {
    AdamState state;
    state.m = zeros_like(params);
    state.v = zeros_like(params);
    state.t = 0;
    return state;
}

// Standard Adam with bias correction.
inline void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.99, double eps = 1e-8) {
    if (params.layers.size() != grads.layers.size() || params.layers.size() != state.m.layers.size())
        throw ShapeMismatchError("adam_step: layer count mismatch");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (std::size_t j = 0; j < params.layers.size(); ++j) {
        const auto update = [&](std::vector<double>& p, const std::vector<double>& g,
                                std::vector<double>& m, std::vector<double>& v) {
            if (p.size() != g.size()) throw ShapeMismatchError("adam_step: shape mismatch");
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        };
        update(params.layers[j].weights.data, grads.layers[j].weights.data, state.m.layers[j].weights.data,
               state.v.layers[j].weights.data);
        update(params.layers[j].bias.data, grads.layers[j].bias.data, state.m.layers[j].bias.data,
               state.v.layers[j].bias.data);
    }
}

inline BinaryMask threshold_probs(const Tensor& probs, double threshold = 0.5) {
    if (probs.shape.size() != 2) throw ShapeMismatchError("threshold_probs: expected {H, W}");
    BinaryMask out(probs.shape[0], probs.shape[1]);
    for (int r = 0; r < out.height(); ++r)
        for (int c = 0; c < out.width(); ++c)
            if (probs.data[static_cast<std::size_t>(r) * out.width() + c] > threshold) out.set(r, c, true);
    return out;
}

// Overlap score 2|P∩T| / (|P|+|T|); two empty masks count as a perfect 1.
inline double dice_score(const BinaryMask& pred, const BinaryMask& truth) {
    if (pred.height() != truth.height() || pred.width() != truth.width())
        throw ShapeMismatchError("dice_score: shape mismatch");
    long long inter = 0, total = 0;
    for (int r = 0; r < pred.height(); ++r) {
        for (int c = 0; c < pred.width(); ++c) {
            const bool p = pred.at(r, c), t = truth.at(r, c);
            inter += (p && t);
            total += p + t;
        }
    }
    if (total == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

}  // namespace fedseg
