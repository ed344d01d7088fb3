// SPDX-License-Identifier: Apache-2.0

#include "moeplan/workload.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace moeplan {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model: " + msg); };
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (hidden_dim < 1) fail("hidden_dim must be >= 1");
  if (expert_dim < 1) fail("expert_dim must be >= 1");
  if (experts_per_layer < 1) fail("experts_per_layer must be >= 1");
  if (top_k < 1 || top_k > experts_per_layer) fail("top_k must be in [1, experts_per_layer]");
  if (dtype_bytes != 1 && dtype_bytes != 2 && dtype_bytes != 4)
    fail("dtype_bytes must be 1, 2 or 4");
}

void BatchConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("batch: " + msg); };
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (input_len < 1) fail("input_len must be >= 1");
  if (output_len < 0) fail("output_len must be >= 0");
}

Phase Phase::prefill(std::int64_t input_len) {
  if (input_len < 1) throw std::invalid_argument("prefill length must be >= 1");
  return Phase{PhaseKind::Prefill, input_len, 0};
}

Phase Phase::decode_step(std::int64_t kv_len) {
  if (kv_len < 1) throw std::invalid_argument("decode kv_len must be >= 1");
  return Phase{PhaseKind::DecodeStep, 1, kv_len};
}

OpCost op_cost(int op_index, const Phase& phase, const ModelConfig& model, double m,
               std::int64_t num_activated_experts) {
  if (!(m >= 1.0)) throw std::invalid_argument("op_cost: m must be >= 1");
  const double dt = static_cast<double>(model.dtype_bytes);
  const double L = static_cast<double>(phase.seq_len);
  const double dh = static_cast<double>(model.hidden_dim);
  const double de = static_cast<double>(model.expert_dim);

  switch (op_index) {
    case 0:
      return {dt * m * L * dh, 3.0 * dt * dh * dh, 6.0 * m * L * dh * dh};
    case 1:
      if (phase.is_prefill()) return {dt * m * L * dh, 2.0 * dt * m * L * dh, 4.0 * m * L * L * dh};
      {
        const double kv = static_cast<double>(phase.kv_len);
        return {dt * m * dh, 2.0 * dt * m * kv * dh, 4.0 * m * kv * dh};
      }
    case 2:
      return {dt * m * L * dh, dt * dh * dh, 2.0 * m * L * dh * dh};
    case 3: {
      if (num_activated_experts < 1)
        throw std::invalid_argument("op_cost: op 3 needs at least one activated expert");
      const double E = static_cast<double>(num_activated_experts);
      return {dt * m * L * dh / E, 3.0 * dt * dh * de, 6.0 * m * L * dh * de / E};
    }
    default:
      throw std::invalid_argument("op_cost: op_index must be in 0..3, got " +
                                  std::to_string(op_index));
  }
}

double kv_store_bytes(const ModelConfig& model, double m, std::int64_t seq_len) {
  if (!(m >= 1.0)) throw std::invalid_argument("kv_store_bytes: m must be >= 1");
  if (seq_len < 1) throw std::invalid_argument("kv_store_bytes: L must be >= 1");
  return 2.0 * static_cast<double>(model.dtype_bytes) * m * static_cast<double>(seq_len) *
         static_cast<double>(model.hidden_dim);
}

WeightBytes weight_bytes(const ModelConfig& model) {
  const double dt = static_cast<double>(model.dtype_bytes);
  const double dh = static_cast<double>(model.hidden_dim);
  const double de = static_cast<double>(model.expert_dim);
  return {4.0 * dt * dh * dh, 3.0 * dt * dh * de};
}

double op_output_bytes(int op_index, const Phase& phase, const ModelConfig& model, double m) {
  const double tokens_x_dh = static_cast<double>(model.dtype_bytes) * m *
                             static_cast<double>(phase.seq_len) *
                             static_cast<double>(model.hidden_dim);
  switch (op_index) {
    case 0:
      return 3.0 * tokens_x_dh;  // Q, K, V
    case 1:
    case 2:
      return tokens_x_dh;
    default:
      throw std::invalid_argument("op_output_bytes: op_index must be in 0..2");
  }
}

double intermediate_bytes(const ModelConfig& model, const BatchConfig& batch, const Phase& phase,
                          std::int64_t m, const std::array<bool, 3>& ops_on_gpu) {
  if (m < 1 || m > batch.batch_size)
    throw std::invalid_argument("intermediate_bytes: m must be in [1, batch_size]");
  const double md = static_cast<double>(m);
  double peak = 0.0;
  for (int i = 0; i < 3; ++i) {
    if (!ops_on_gpu[static_cast<std::size_t>(i)]) continue;
    const OpCost c = op_cost(i, phase, model, md);
    peak = std::max(peak, c.d_x + c.d_y + op_output_bytes(i, phase, model, md));
  }
  if (ops_on_gpu[1]) {
    const std::int64_t score_len = phase.is_prefill() ? phase.seq_len : phase.kv_len;
    peak += static_cast<double>(model.dtype_bytes) * md * static_cast<double>(phase.seq_len) *
            static_cast<double>(score_len);
  }
  return peak;
}

}  // namespace moeplan
