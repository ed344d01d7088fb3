// SPDX-License-Identifier: Apache-2.0

#include "moeplan/hwmodel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace moeplan {

namespace {

bool positive_finite(double v) { return std::isfinite(v) && v > 0.0; }

void require_non_negative(double v, const char* what) {
  if (!(v >= 0.0)) throw std::invalid_argument(std::string(what) + " must be >= 0");
}

}  // namespace

std::string_view to_string(Device d) { return d == Device::Gpu ? "gpu" : "cpu"; }

std::string_view to_string(Bound b) {
  switch (b) {
    case Bound::MemoryBound:
      return "memory-bound";
    case Bound::ComputeBound:
      return "compute-bound";
    case Bound::Balanced:
      return "balanced";
  }
  return "?";
}

DeviceSpec::DeviceSpec(std::string name, double mem_bandwidth, double peak_compute,
                       double mem_capacity)
    : name_(std::move(name)),
      mem_bandwidth_(mem_bandwidth),
      peak_compute_(peak_compute),
      mem_capacity_(mem_capacity) {
  if (!positive_finite(mem_bandwidth_))
    throw std::invalid_argument("device '" + name_ + "': mem_bandwidth must be > 0");
  if (!positive_finite(peak_compute_))
    throw std::invalid_argument("device '" + name_ + "': peak_compute must be > 0");
  if (!positive_finite(mem_capacity_))
    throw std::invalid_argument("device '" + name_ + "': mem_capacity must be > 0");
}

LinkSpec::LinkSpec(double bandwidth, bool duplex, double efficiency)
    : bandwidth_(bandwidth), duplex_(duplex), efficiency_(efficiency) {
  if (!positive_finite(bandwidth_)) throw std::invalid_argument("link bandwidth must be > 0");
  if (!positive_finite(efficiency_) || efficiency_ > 1.0)
    throw std::invalid_argument("link efficiency must be in (0, 1]");
}

SystemSpec::SystemSpec(DeviceSpec gpu, DeviceSpec cpu, LinkSpec link)
    : gpu_(std::move(gpu)), cpu_(std::move(cpu)), link_(link) {
  if (gpu_.name() == cpu_.name())
    throw std::invalid_argument("gpu and cpu device names must differ");
}

double roofline_time(double bytes, double flops, const DeviceSpec& dev) {
  require_non_negative(bytes, "bytes");
  require_non_negative(flops, "flops");
  return std::max(bytes / dev.mem_bandwidth(), flops / dev.peak_compute());
}

double transfer_time(double bytes, const LinkSpec& link) {
  require_non_negative(bytes, "bytes");
  return bytes / link.effective_bandwidth();
}

Bound classify_bound(double bytes, double flops, const DeviceSpec& dev) {
  require_non_negative(bytes, "bytes");
  require_non_negative(flops, "flops");
  if (bytes == 0.0 && flops == 0.0)
    throw std::invalid_argument("classify_bound: zero bytes and zero flops");
  const double mem = bytes / dev.mem_bandwidth();
  const double comp = flops / dev.peak_compute();
  if (mem > comp) return Bound::MemoryBound;
  if (mem < comp) return Bound::ComputeBound;
  return Bound::Balanced;
}

}  // namespace moeplan
