// Copyright 2026 The flab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <vector>

#include "flab/nn/tensor.hpp"

namespace flab::nn {

// Elementwise (identical shapes).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
// a * s where s is a single-element Var.
template <typename T> Var<T> mul_scalar(const Var<T>& a, const Var<T>& s);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> silu(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

// x [N, I], w [O, I], b [O] (may be undefined) -> [N, O].
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
// a [N, D], b [M, D] -> a * b^T [N, M].
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);

// x [N, Ci, H, W], w [Co, Ci, k, k], b [Co] (may be undefined).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
// x [N, Ci, H, W], w [Ci, Co, k, k]; output (H - 1) * stride - 2 * pad + k.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
                        int pad);
// Nearest-neighbour x2, cropped to (out_h, out_w).
template <typename T> Var<T> upsample2x(const Var<T>& x, int out_h, int out_w);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> slice_channels(const Var<T>& x, int begin, int count);
// Columns of a 2-D [N, M] tensor.
template <typename T> Var<T> slice_cols(const Var<T>& x, int begin, int count);
// x [N, C, H, W] + v [N, C] broadcast over space.
template <typename T> Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v);
// x * (1 + gamma) + beta with gamma, beta [N, C].
template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta);
// [N, C, H, W] -> [N, C]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
template <typename T> Var<T> l2_normalize_rows(const Var<T>& x);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// sum((a - b)^2), sum(|a - b|)
template <typename T> Var<T> squared_error_sum(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> abs_error_sum(const Var<T>& a, const Var<T>& b);
// Mean over rows of -log softmax(logits[row])[target[row]].
template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, const std::vector<int>& targets);
// sum 0.5 * (mu^2 + exp(logvar) - logvar - 1)
template <typename T> Var<T> gaussian_kl(const Var<T>& mu, const Var<T>& logvar);
// table [V, D]; returns [N, D] with row n the mean of table rows tokens[n].
template <typename T>
Var<T> embedding_mean(const Var<T>& table, const std::vector<std::vector<int>>& tokens);

}  // namespace flab::nn
