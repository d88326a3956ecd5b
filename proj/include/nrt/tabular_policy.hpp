#pragma once

/**
 * Exact order-n tabular policy.
 *
 * One logit row per context key (the last n tokens, EOS-padded on the left),
 * softmax over the vocabulary. Parameter count is |V|^n * |V|, so every
 * expectation over traces is exactly enumerable at small orders. Order 0 is a
 * single context-independent row.
 */

#include <span>
#include <vector>

#include "nrt/policy.hpp"

namespace nrt {

class TabularPolicy final : public Policy {
 public:
  TabularPolicy(Vocabulary vocab, int order)
      : Policy(vocab, table_dim(vocab, order)), order_(order) {}

  int order() const { return order_; }

  std::string arch_descriptor() const override {
    return "tabular alphabet=" + std::to_string(vocab_.alphabet) +
           " order=" + std::to_string(order_);
  }

  std::unique_ptr<Policy> clone() const override { return std::make_unique<TabularPolicy>(*this); }

  void forward_logits(std::span<const TokenId> context, std::span<double> out) const override {
    check_context(context);
    const std::size_t v = static_cast<std::size_t>(vocab_.size());
    const std::size_t row = row_index(context) * v;
    for (std::size_t i = 0; i < v; ++i) out[i] = theta_[row + i];
  }

  void accumulate_grad_log_prob(std::span<const TokenId> context, TokenId target, double weight,
                                std::span<const TokenId> allowed,
                                GradientAccumulator& out) const override {
    check_context(context);
    check_token(target);
    if (out.dim() != theta_.size())
      throw std::invalid_argument("gradient accumulator dimension mismatch");
    const std::size_t v = static_cast<std::size_t>(vocab_.size());
    const std::size_t row = row_index(context) * v;
    // d log p(target) / d logit_j = onehot_j(target) - p_j over the active set.
    if (allowed.empty()) {
      double max_logit = theta_[row];
      for (std::size_t i = 1; i < v; ++i) max_logit = std::max(max_logit, theta_[row + i]);
      double z = 0.0;
      for (std::size_t i = 0; i < v; ++i) z += std::exp(theta_[row + i] - max_logit);
      for (std::size_t i = 0; i < v; ++i)
        out.grad[row + i] -= weight * std::exp(theta_[row + i] - max_logit) / z;
      out.grad[row + static_cast<std::size_t>(target)] += weight;
    } else {
      double max_logit = -std::numeric_limits<double>::infinity();
      for (TokenId t : allowed) max_logit = std::max(max_logit, theta_[row + static_cast<std::size_t>(t)]);
      double z = 0.0;
      for (TokenId t : allowed) z += std::exp(theta_[row + static_cast<std::size_t>(t)] - max_logit);
      for (TokenId t : allowed) {
        const auto i = static_cast<std::size_t>(t);
        out.grad[row + i] -= weight * std::exp(theta_[row + i] - max_logit) / z;
      }
      out.grad[row + static_cast<std::size_t>(target)] += weight;
    }
  }

 private:
  static std::size_t table_dim(const Vocabulary& vocab, int order) {
    if (order < 0) throw std::invalid_argument("TabularPolicy: order must be >= 0");
    std::size_t rows = 1;
    for (int i = 0; i < order; ++i) {
      rows *= static_cast<std::size_t>(vocab.size());
      if (rows > (1u << 24)) throw std::invalid_argument("TabularPolicy: table too large");
    }
    return rows * static_cast<std::size_t>(vocab.size());
  }

  std::size_t row_index(std::span<const TokenId> context) const {
    const auto v = static_cast<std::size_t>(vocab_.size());
    std::size_t key = 0;
    for (int i = order_; i >= 1; --i) {
      const std::size_t tok =
          (context.size() >= static_cast<std::size_t>(i))
              ? static_cast<std::size_t>(context[context.size() - static_cast<std::size_t>(i)])
              : static_cast<std::size_t>(Vocabulary::kEos);
      key = key * v + tok;
    }
    return key;
  }

  int order_;
};

}  // namespace nrt
