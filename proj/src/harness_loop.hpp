#pragma once

// Shared control loop behind both deployment modes.

#include "crl/harness.hpp"

namespace crl::harness {

class PlantIO {
 public:
  virtual ~PlantIO() = default;
  // Flapping angles relative to each wing's spring-neutral angle.
  virtual Vec4 observe() = 0;
  virtual void apply(const Vec4& torque) = 0;
  virtual void advance(double dt) = 0;
};

class CloudIO {
 public:
  virtual ~CloudIO() = default;
  // The policy slot weight packets are delivered into.
  virtual void attach(edge::HotSwap&) {}
  virtual void ship(std::vector<std::uint8_t> bytes) = 0;
  // Called once per step outside the timed section.
  virtual void process(edge::HotSwap& swap, RunResult& r) = 0;
  virtual void finish(RunResult& r) = 0;
};

// Plant <-> edge messages: "CRLS" u64 step, 4 f64 angles; "CRLA" u64 step,
// 4 f64 torques; "CRLQ" ends the session.
std::vector<std::uint8_t> encode_vec4(const char (&magic)[5], std::uint64_t step, const Vec4& v);
// Throws edge::ProtocolError on a wrong magic or length.
Vec4 decode_vec4(const char (&magic)[5], const std::vector<std::uint8_t>& msg, std::uint64_t* step = nullptr);
std::vector<std::uint8_t> quit_message();
bool is_quit(const std::vector<std::uint8_t>& msg);

RunResult run_loop(const ExperimentConfig& cfg, PlantIO& plant, CloudIO* cloud);

}  // namespace crl::harness
