// SPDX-License-Identifier: Apache-2.0
//
// Device and interconnect descriptions plus the roofline / transfer
// primitives every latency estimate is built from.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace moeplan {

enum class Device : std::uint8_t { Cpu = 0, Gpu = 1 };

std::string_view to_string(Device d);

// One compute device under a flat roofline: time = max(bytes/BW, flops/TF).
class DeviceSpec {
 public:
  // Throws std::invalid_argument unless all three quantities are positive
  // and finite.
  DeviceSpec(std::string name, double mem_bandwidth, double peak_compute,
             double mem_capacity);

  const std::string& name() const { return name_; }
  double mem_bandwidth() const { return mem_bandwidth_; }  // bytes/s
  double peak_compute() const { return peak_compute_; }    // FLOP/s
  double mem_capacity() const { return mem_capacity_; }    // bytes

  // Operational intensity (FLOP/byte) where both roofline terms meet.
  double ridge_point() const { return peak_compute_ / mem_bandwidth_; }

 private:
  std::string name_;
  double mem_bandwidth_;
  double peak_compute_;
  double mem_capacity_;
};

// Host<->device link. `efficiency` scales the nominal rate to the achievable
// one; all transfer times use effective_bandwidth().
class LinkSpec {
 public:
  explicit LinkSpec(double bandwidth, bool duplex = true, double efficiency = 1.0);

  double bandwidth() const { return bandwidth_; }
  bool duplex() const { return duplex_; }
  double efficiency() const { return efficiency_; }
  double effective_bandwidth() const { return bandwidth_ * efficiency_; }

 private:
  double bandwidth_;
  bool duplex_;
  double efficiency_;
};

class SystemSpec {
 public:
  // Throws std::invalid_argument if the two devices share a name.
  SystemSpec(DeviceSpec gpu, DeviceSpec cpu, LinkSpec link);

  const DeviceSpec& gpu() const { return gpu_; }
  const DeviceSpec& cpu() const { return cpu_; }
  const LinkSpec& link() const { return link_; }
  const DeviceSpec& device(Device d) const { return d == Device::Gpu ? gpu_ : cpu_; }

 private:
  DeviceSpec gpu_;
  DeviceSpec cpu_;
  LinkSpec link_;
};

enum class Bound : std::uint8_t { MemoryBound, ComputeBound, Balanced };

std::string_view to_string(Bound b);

// max(bytes / BW, flops / TF). Negative inputs throw std::invalid_argument.
double roofline_time(double bytes, double flops, const DeviceSpec& dev);

// bytes / effective link bandwidth.
double transfer_time(double bytes, const LinkSpec& link);

// Which roofline term dominates. Throws std::invalid_argument when both
// inputs are zero.
Bound classify_bound(double bytes, double flops, const DeviceSpec& dev);

}  // namespace moeplan
