#pragma once

#include <span>
#include <vector>

#include "fsad/autograd.hpp"

namespace fsad::ag {

// Elementwise arithmetic on equally shaped operands.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);

Var sum(const Var& a);
Var mean(const Var& a);
/// Sum of squared entries.
Var sum_squares(const Var& a);
/// Euclidean norm over all entries; the gradient at zero is zero.
Var l2_norm(const Var& a);

Var relu(const Var& a);
Var sigmoid(const Var& a);
Var clip(const Var& a, double lo, double hi);

Var reshape(const Var& a, Shape shape);
/// Concatenation along the leading axis.
Var concat(std::span<const Var> parts);
/// Rows `index` of the leading axis.
Var gather(const Var& a, std::span<const int> index);

/// Stride-1 2-D convolution with symmetric zero padding.
/// x: (B, C, H, W), weight: (O, C, k, k), bias: (O).
Var conv2d(const Var& x, const Var& weight, const Var& bias, int pad);

/// 2x2 max pooling with stride 2 (odd trailing rows/cols dropped).
Var max_pool2(const Var& x);
/// Nearest-neighbour 2x upsampling.
Var upsample2(const Var& x);

/// Running statistics of a batch-norm layer.
struct NormStats {
  Tensor mean;
  Tensor var;
};

/// Per-channel normalisation of (B, C, H, W). When `training` the batch
/// statistics are used and `stats` is updated with `momentum`; otherwise the
/// stored statistics are used and left untouched.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, NormStats& stats, bool training,
               double momentum = 0.1, double eps = 1e-5);
Var batch_norm_eval(const Var& x, const Var& gamma, const Var& beta, const NormStats& stats, double eps = 1e-5);

/// x: (B, F), weight: (O, F), bias: (O) -> (B, O).
Var linear(const Var& x, const Var& weight, const Var& bias);

/// (G*n, ...) -> (G, ...), mean over consecutive groups of n rows.
Var group_mean(const Var& x, int groups);

/// protos: (K, d, h, w), queries: (Q, d, h, w) -> (Q*K, 2d, h, w) where row
/// q*K + k is [proto k ; query q] stacked along channels.
Var pair_concat(const Var& protos, const Var& queries);

/// Cross-attention cosine scores. For every (query q, class k) pair the
/// class feature positions are re-weighted per query position by a softmax
/// over the cosine-correlation matrix (sharpness `attention_scale`), and the
/// cosine similarity between the attended class feature and the query
/// feature is averaged over positions and multiplied by `temperature`.
/// protos: (K, d, h, w), queries: (Q, d, h, w), scalars: (1) -> (Q, K).
Var cross_attention_logits(const Var& protos, const Var& queries, const Var& attention_scale,
                           const Var& temperature);

/// Mean softmax cross-entropy of logits (B, K) against labels in [0, K).
Var cross_entropy(const Var& logits, std::span<const int> labels);

/// Mean over rows of max(-kappa, max_{i != t} z_i - z_t), t = labels[row].
Var margin_loss(const Var& logits, std::span<const int> labels, double kappa);

/// Mean over rows of max(-kappa, z_t - max_{i != t} z_i); minimising it
/// pushes every row away from its label t.
Var misclassification_margin_loss(const Var& logits, std::span<const int> labels, double kappa);

}  // namespace fsad::ag
