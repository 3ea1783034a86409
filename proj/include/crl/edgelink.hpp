#pragma once

// Edge runtime pieces and the cloud/edge wire protocol: allocation-free
// policy inference, weight packets with staged hot swap, transition
// shipping over a framed TCP stream, and per-stage timing.

#include "crl/bytes.hpp"
#include "crl/concerto.hpp"
#include "crl/neural.hpp"
#include "crl/rl_core.hpp"

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace crl::edge {

class ProtocolError : public DecodeError {
  using DecodeError::DecodeError;
};
class CrcError : public DecodeError {
  using DecodeError::DecodeError;
};

std::uint32_t crc32(const std::uint8_t* data, std::size_t n);

inline constexpr std::uint16_t kWireVersion = 1;

// "CRLW" | version u16 | seq u32 | layer count u16 | layers | crc32 u32
struct WeightPacket {
  std::uint32_t seq = 0;
  nn::NetworkF net;
};
std::vector<std::uint8_t> encode_weights(const WeightPacket& p);
WeightPacket decode_weights(const std::uint8_t* data, std::size_t n);

// "CRLB" | version u16 | step u64 | count u32 | transitions | echo count u32 | echoes f64
struct BufferPacket {
  std::uint64_t step = 0;
  std::vector<rl::Transition> transitions;
  std::vector<double> timing_echo;
};
std::vector<std::uint8_t> encode_buffer(const BufferPacket& p);
BufferPacket decode_buffer(const std::uint8_t* data, std::size_t n);

// Actor copy in flat row-major float arrays. infer() touches only
// preallocated memory.
class EdgePolicy {
 public:
  EdgePolicy() = default;
  explicit EdgePolicy(const nn::NetworkF& net);

  // Throws ShapeError unless net has exactly this policy's layer sizes.
  void install(const nn::NetworkF& net);
  void infer(const float* state, float* action) const;
  std::array<float, rl::kActionDim> infer(const rl::StateVec& s) const;

  int input_size() const { return sizes_.empty() ? 0 : sizes_.front(); }
  int output_size() const { return sizes_.empty() ? 0 : sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  std::uint64_t generation() const { return generation_; }

 private:
  std::vector<int> sizes_;
  std::vector<nn::Activation> acts_;
  std::vector<std::vector<float>> w_;
  std::vector<std::vector<float>> b_;
  mutable std::vector<float> scratch_a_, scratch_b_;
  std::uint64_t generation_ = 0;
};

// Receives weight packets on any thread, installs them on the control thread
// at Mode-1 steps only. The hand-off is a single atomic slot: a newer packet
// replaces one that has not been installed yet.
class HotSwap {
 public:
  explicit HotSwap(EdgePolicy& policy) : policy_(policy) {}
  ~HotSwap();
  HotSwap(const HotSwap&) = delete;
  HotSwap& operator=(const HotSwap&) = delete;

  // Validates CRC, framing and shape and stages the packet. Returns false on rejection.
  bool receive(const std::uint8_t* data, std::size_t n);
  bool receive(const std::vector<std::uint8_t>& bytes) { return receive(bytes.data(), bytes.size()); }

  // Control thread. Installs a staged packet if mode is Mode 1; returns whether it did.
  bool maintain(concerto::Mode mode);

  bool staged() const { return slot_.load() != nullptr; }
  std::uint64_t crc_rejects() const { return crc_rejects_; }
  std::uint64_t shape_rejects() const { return shape_rejects_; }
  std::uint64_t stale_discards() const { return stale_; }
  std::uint64_t applied() const { return applied_; }
  std::uint32_t last_seq() const { return last_seq_; }

 private:
  EdgePolicy& policy_;
  std::atomic<WeightPacket*> slot_{nullptr};
  std::atomic<std::uint64_t> crc_rejects_{0}, shape_rejects_{0}, stale_{0}, applied_{0};
  std::atomic<std::int64_t> last_received_{-1};
  std::uint32_t last_seq_ = 0;
  bool have_seq_ = false;
};

// Length-prefixed (u32 little-endian) messages over a connected TCP socket.
class Channel {
 public:
  Channel() = default;
  explicit Channel(int fd) : fd_(fd) {}
  ~Channel();
  Channel(Channel&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Channel& operator=(Channel&& o) noexcept;

  static Channel connect(const std::string& host, int port, int retries = 50);
  bool send(const std::vector<std::uint8_t>& msg);
  // Empty optional on orderly close or error.
  std::optional<std::vector<std::uint8_t>> recv();
  bool open() const { return fd_ >= 0; }
  void close();
  void shutdown();

 private:
  int fd_ = -1;
};

class Listener {
 public:
  // port 0 picks a free port.
  explicit Listener(int port = 0, const std::string& host = "127.0.0.1");
  ~Listener();
  int port() const { return port_; }
  Channel accept();

 private:
  int fd_ = -1;
  int port_ = 0;
};

// Bounded drop-oldest queue drained by a sender thread.
class AsyncSender {
 public:
  // With start_worker false nothing is sent until start().
  AsyncSender(Channel* channel, std::size_t capacity, bool start_worker = true);
  ~AsyncSender();
  // Never blocks on the network.
  void push(std::vector<std::uint8_t> msg);
  void start();
  // Waits until the queue has drained; requires a running worker.
  void flush();
  std::uint64_t dropped() const { return dropped_; }
  std::uint64_t sent() const { return sent_; }

 private:
  void run();
  Channel* channel_;
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable cv_, idle_;
  std::deque<std::vector<std::uint8_t>> q_;
  bool stop_ = false;
  bool busy_ = false;
  std::atomic<std::uint64_t> dropped_{0}, sent_{0};
  std::thread worker_;
};

enum class Stage : int {
  SensorUnpack = 0,
  Shared,
  WeightLoading,
  Classical,
  StateTensorization,
  Inference,
  ActionDetensorization,
  BufferTransmission,
  ActionTransmission,
  PlantSimulation,
};
inline constexpr int kStages = 10;
const char* stage_label(Stage s);
// Plant simulation is reported separately from the algorithm total.
inline bool in_algorithm(Stage s) { return s != Stage::PlantSimulation; }

struct StepTiming {
  std::array<double, kStages> seconds{};
  double algorithm_total() const;
  double end_to_end() const;
};

class StageClock {
 public:
  using clock = std::chrono::steady_clock;
  void begin() { t0_ = clock::now(); }
  // Attributes the time since the last mark (or begin) to stage s.
  void mark(StepTiming& rec, Stage s) {
    const auto now = clock::now();
    rec.seconds[static_cast<int>(s)] += std::chrono::duration<double>(now - t0_).count();
    t0_ = now;
  }

 private:
  clock::time_point t0_{};
};

struct StageSummary {
  std::string label;
  double mean = 0.0;
  double median = 0.0;
  double p99 = 0.0;
  double max = 0.0;
};

struct TimingSummary {
  std::vector<StageSummary> stages;  // one per Stage, in enum order
  StageSummary algorithm;
  StageSummary end_to_end;
  double slowest_frequency = 0.0;  // 1 / max(algorithm total)
  std::size_t steps = 0;
};

TimingSummary summarize(const std::vector<StepTiming>& records);
void write_timing_csv(std::ostream& os, const TimingSummary& s);

}  // namespace crl::edge
