// SPDX-License-Identifier: Apache-2.0
//
// MoE decoder layer as four operations (QKV projection, attention, output
// projection, expert FFN) with per-micro-batch operand sizes and FLOP counts.

#pragma once

#include <array>
#include <cstdint>

namespace moeplan {

struct ModelConfig {
  std::int64_t num_layers = 1;         // N
  std::int64_t hidden_dim = 1;         // d_h
  std::int64_t expert_dim = 1;         // d_e
  std::int64_t experts_per_layer = 1;  // expert pool per layer
  std::int64_t top_k = 1;              // experts activated per token
  std::int64_t dtype_bytes = 2;        // 1, 2 or 4

  // Throws std::invalid_argument on a violated invariant.
  void validate() const;
};

struct BatchConfig {
  std::int64_t batch_size = 1;  // B
  std::int64_t input_len = 1;   // L_in
  std::int64_t output_len = 0;  // L_out

  void validate() const;
};

enum class PhaseKind : std::uint8_t { Prefill, DecodeStep };

struct Phase {
  PhaseKind kind = PhaseKind::Prefill;
  std::int64_t seq_len = 1;  // L (1 for a decode step)
  std::int64_t kv_len = 0;   // L_kv (0 for prefill)

  static Phase prefill(std::int64_t input_len);
  static Phase decode_step(std::int64_t kv_len);

  bool is_prefill() const { return kind == PhaseKind::Prefill; }
};

enum class Op : int { Qkv = 0, Attention = 1, OutProj = 2, Expert = 3 };

struct OpCost {
  double d_x = 0.0;    // first operand, bytes
  double d_y = 0.0;    // second operand, bytes
  double flops = 0.0;  // C
};

// Operand sizes and FLOPs for one micro-batch of `m` sequences. For op 3 the
// caller passes the full batch B as `m` and the result is per activated expert
// under a uniform split across `num_activated_experts`.
// Throws std::invalid_argument for op_index outside 0..3, m < 1, or E < 1 on op 3.
OpCost op_cost(int op_index, const Phase& phase, const ModelConfig& model, double m,
               std::int64_t num_activated_experts = 1);

// K and V produced by the QKV projection for m sequences of L tokens.
double kv_store_bytes(const ModelConfig& model, double m, std::int64_t seq_len);

struct WeightBytes {
  double non_expert_per_layer = 0.0;  // QKV + output projection
  double per_expert = 0.0;
};

WeightBytes weight_bytes(const ModelConfig& model);

// Output activation bytes of op 0..2 for m sequences of L tokens.
double op_output_bytes(int op_index, const Phase& phase, const ModelConfig& model, double m);

// Peak live activation footprint on the GPU for one layer at micro-batch m:
// the largest (D_X + D_Y + output) over the ops flagged in `ops_on_gpu`, plus
// the attention score buffer dtype*m*L*L_score when attention is on the GPU.
double intermediate_bytes(const ModelConfig& model, const BatchConfig& batch, const Phase& phase,
                          std::int64_t m, const std::array<bool, 3>& ops_on_gpu);

inline double intermediate_bytes(const ModelConfig& model, const BatchConfig& batch,
                                 const Phase& phase, std::int64_t m,
                                 bool attention_on_gpu = true) {
  return intermediate_bytes(model, batch, phase, m, {true, attention_on_gpu, true});
}

}  // namespace moeplan
