#pragma once

/**
 * Tiny windowed neural policy.
 *
 * Token embeddings over a fixed context window (EOS-padded on the left), one
 * tanh hidden layer, softmax output. Backprop is hand-derived; the gradient
 * contract is identical to the tabular policy's and is checked against finite
 * differences by the test suite.
 */

#include <span>
#include <vector>

#include "nrt/policy.hpp"

namespace nrt {

class NeuralPolicy final : public Policy {
 public:
  NeuralPolicy(Vocabulary vocab, int embed_dim, int hidden_dim, int window)
      : Policy(vocab, param_dim(vocab, embed_dim, hidden_dim, window)),
        embed_dim_(embed_dim),
        hidden_dim_(hidden_dim),
        window_(window) {
    const auto v = static_cast<std::size_t>(vocab_.size());
    const auto d = static_cast<std::size_t>(embed_dim_);
    const auto h = static_cast<std::size_t>(hidden_dim_);
    const auto in = static_cast<std::size_t>(window_) * d;
    off_w1_ = v * d;
    off_b1_ = off_w1_ + h * in;
    off_w2_ = off_b1_ + h;
    off_b2_ = off_w2_ + v * h;
  }

  int embed_dim() const { return embed_dim_; }
  int hidden_dim() const { return hidden_dim_; }
  int window() const { return window_; }

  std::string arch_descriptor() const override {
    return "neural alphabet=" + std::to_string(vocab_.alphabet) +
           " embed=" + std::to_string(embed_dim_) + " hidden=" + std::to_string(hidden_dim_) +
           " window=" + std::to_string(window_);
  }

  std::unique_ptr<Policy> clone() const override { return std::make_unique<NeuralPolicy>(*this); }

  void forward_logits(std::span<const TokenId> context, std::span<double> out) const override {
    check_context(context);
    std::vector<double> x, hidden;
    run_forward(context, x, hidden, out);
  }

  void accumulate_grad_log_prob(std::span<const TokenId> context, TokenId target, double weight,
                                std::span<const TokenId> allowed,
                                GradientAccumulator& out) const override {
    check_context(context);
    check_token(target);
    if (out.dim() != theta_.size())
      throw std::invalid_argument("gradient accumulator dimension mismatch");

    const auto v = static_cast<std::size_t>(vocab_.size());
    const auto d = static_cast<std::size_t>(embed_dim_);
    const auto h = static_cast<std::size_t>(hidden_dim_);
    const auto in = static_cast<std::size_t>(window_) * d;

    std::vector<double> x, hidden, logits(v);
    run_forward(context, x, hidden, logits);

    // dlogit = weight * (onehot(target) - softmax) over the active id set.
    std::vector<double> dlogit(v, 0.0);
    if (allowed.empty()) {
      double max_logit = logits[0];
      for (std::size_t i = 1; i < v; ++i) max_logit = std::max(max_logit, logits[i]);
      double z = 0.0;
      for (std::size_t i = 0; i < v; ++i) z += std::exp(logits[i] - max_logit);
      for (std::size_t i = 0; i < v; ++i) dlogit[i] = -weight * std::exp(logits[i] - max_logit) / z;
    } else {
      double max_logit = -std::numeric_limits<double>::infinity();
      for (TokenId t : allowed) max_logit = std::max(max_logit, logits[static_cast<std::size_t>(t)]);
      double z = 0.0;
      for (TokenId t : allowed) z += std::exp(logits[static_cast<std::size_t>(t)] - max_logit);
      for (TokenId t : allowed) {
        const auto i = static_cast<std::size_t>(t);
        dlogit[i] = -weight * std::exp(logits[i] - max_logit) / z;
      }
    }
    dlogit[static_cast<std::size_t>(target)] += weight;

    // Output layer.
    double* g = out.grad.data();
    for (std::size_t j = 0; j < v; ++j) g[off_b2_ + j] += dlogit[j];
    std::vector<double> dh(h, 0.0);
    for (std::size_t j = 0; j < v; ++j) {
      const double dj = dlogit[j];
      if (dj == 0.0) continue;
      const double* w2_row = theta_.data() + off_w2_ + j * h;
      double* gw2_row = g + off_w2_ + j * h;
      for (std::size_t k = 0; k < h; ++k) {
        gw2_row[k] += dj * hidden[k];
        dh[k] += dj * w2_row[k];
      }
    }

    // Hidden layer (tanh).
    std::vector<double> dx(in, 0.0);
    for (std::size_t k = 0; k < h; ++k) {
      const double da = dh[k] * (1.0 - hidden[k] * hidden[k]);
      if (da == 0.0) continue;
      g[off_b1_ + k] += da;
      const double* w1_row = theta_.data() + off_w1_ + k * in;
      double* gw1_row = g + off_w1_ + k * in;
      for (std::size_t m = 0; m < in; ++m) {
        gw1_row[m] += da * x[m];
        dx[m] += da * w1_row[m];
      }
    }

    // Embeddings.
    for (int w = 0; w < window_; ++w) {
      const std::size_t tok = static_cast<std::size_t>(window_token(context, w));
      double* ge = g + tok * d;
      const double* dxw = dx.data() + static_cast<std::size_t>(w) * d;
      for (std::size_t j = 0; j < d; ++j) ge[j] += dxw[j];
    }
  }

 private:
  static std::size_t param_dim(const Vocabulary& vocab, int embed_dim, int hidden_dim, int window) {
    if (embed_dim < 1 || hidden_dim < 1 || window < 1)
      throw std::invalid_argument("NeuralPolicy: dimensions must be positive");
    const auto v = static_cast<std::size_t>(vocab.size());
    const auto d = static_cast<std::size_t>(embed_dim);
    const auto h = static_cast<std::size_t>(hidden_dim);
    const auto in = static_cast<std::size_t>(window) * d;
    return v * d + h * in + h + v * h + v;
  }

  // w-th window slot, w in [0, window); slot window-1 is the most recent token.
  TokenId window_token(std::span<const TokenId> context, int w) const {
    const int from_end = window_ - w;
    if (context.size() >= static_cast<std::size_t>(from_end))
      return context[context.size() - static_cast<std::size_t>(from_end)];
    return Vocabulary::kEos;
  }

  void run_forward(std::span<const TokenId> context, std::vector<double>& x,
                   std::vector<double>& hidden, std::span<double> logits) const {
    const auto v = static_cast<std::size_t>(vocab_.size());
    const auto d = static_cast<std::size_t>(embed_dim_);
    const auto h = static_cast<std::size_t>(hidden_dim_);
    const auto in = static_cast<std::size_t>(window_) * d;

    x.resize(in);
    for (int w = 0; w < window_; ++w) {
      const std::size_t tok = static_cast<std::size_t>(window_token(context, w));
      const double* e = theta_.data() + tok * d;
      double* xw = x.data() + static_cast<std::size_t>(w) * d;
      for (std::size_t j = 0; j < d; ++j) xw[j] = e[j];
    }

    hidden.resize(h);
    for (std::size_t k = 0; k < h; ++k) {
      double a = theta_[off_b1_ + k];
      const double* w1_row = theta_.data() + off_w1_ + k * in;
      for (std::size_t m = 0; m < in; ++m) a += w1_row[m] * x[m];
      hidden[k] = std::tanh(a);
    }

    for (std::size_t j = 0; j < v; ++j) {
      double a = theta_[off_b2_ + j];
      const double* w2_row = theta_.data() + off_w2_ + j * h;
      for (std::size_t k = 0; k < h; ++k) a += w2_row[k] * hidden[k];
      logits[j] = a;
    }
  }

  int embed_dim_;
  int hidden_dim_;
  int window_;
  std::size_t off_w1_ = 0, off_b1_ = 0, off_w2_ = 0, off_b2_ = 0;
};

}  // namespace nrt
