#include "crl/edgelink.hpp"

#include <zlib.h>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace crl::edge {

std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

namespace {

void check_magic(ByteReader& r, const char* want) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, want, 4) != 0) throw ProtocolError("bad magic");
  if (r.u16() != kWireVersion) throw ProtocolError("unsupported version");
}

void put_transition(ByteWriter& w, const rl::Transition& t) {
  w.f32_array(t.state.data(), t.state.size());
  w.f32_array(t.action.data(), t.action.size());
  w.f32(t.reward);
  w.f32_array(t.next_state.data(), t.next_state.size());
  w.f32_array(t.next_action.data(), t.next_action.size());
  w.u8(static_cast<std::uint8_t>(t.source));
  w.u64(t.step);
}

rl::Transition get_transition(ByteReader& r) {
  rl::Transition t;
  r.f32_array(t.state.data(), t.state.size());
  r.f32_array(t.action.data(), t.action.size());
  t.reward = r.f32();
  r.f32_array(t.next_state.data(), t.next_state.size());
  r.f32_array(t.next_action.data(), t.next_action.size());
  const std::uint8_t src = r.u8();
  if (src > 2) throw ProtocolError("bad transition source");
  t.source = static_cast<rl::Source>(src);
  t.step = r.u64();
  return t;
}

constexpr std::size_t kTransitionBytes = (2 * rl::kStateDim + 2 * rl::kActionDim + 1) * 4 + 1 + 8;

}  // namespace

std::vector<std::uint8_t> encode_weights(const WeightPacket& p) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + p.net.parameter_count() * 4 + p.net.layers().size() * 8);
  ByteWriter w(out);
  w.bytes("CRLW", 4);
  w.u16(kWireVersion);
  w.u32(p.seq);
  w.u16(static_cast<std::uint16_t>(p.net.layers().size()));
  nn::encode_layers(w, p.net);
  w.u32(crc32(out.data(), out.size()));
  return out;
}

WeightPacket decode_weights(const std::uint8_t* data, std::size_t n) {
  if (n < 4 + 2 + 4 + 2 + 4) throw DecodeError("truncated input");
  {
    ByteReader m(data, n);
    check_magic(m, "CRLW");
  }
  ByteReader tail(data + n - 4, 4);
  if (tail.u32() != crc32(data, n - 4)) throw CrcError("crc mismatch");
  ByteReader r(data, n - 4);
  check_magic(r, "CRLW");
  WeightPacket p;
  p.seq = r.u32();
  const int layers = r.u16();
  p.net = nn::decode_layers(r, layers, nn::Activation::Tanh, nn::Activation::Tanh);
  if (r.remaining() != 0) throw DecodeError("trailing bytes in weight packet");
  return p;
}

std::vector<std::uint8_t> encode_buffer(const BufferPacket& p) {
  std::vector<std::uint8_t> out;
  out.reserve(24 + p.transitions.size() * kTransitionBytes + p.timing_echo.size() * 8);
  ByteWriter w(out);
  w.bytes("CRLB", 4);
  w.u16(kWireVersion);
  w.u64(p.step);
  w.u32(static_cast<std::uint32_t>(p.transitions.size()));
  for (const auto& t : p.transitions) put_transition(w, t);
  w.u32(static_cast<std::uint32_t>(p.timing_echo.size()));
  for (double d : p.timing_echo) w.f64(d);
  return out;
}

BufferPacket decode_buffer(const std::uint8_t* data, std::size_t n) {
  ByteReader r(data, n);
  check_magic(r, "CRLB");
  BufferPacket p;
  p.step = r.u64();
  const std::uint32_t count = r.u32();
  if (r.remaining() < static_cast<std::size_t>(count) * kTransitionBytes) throw DecodeError("truncated input");
  p.transitions.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) p.transitions.push_back(get_transition(r));
  const std::uint32_t echoes = r.u32();
  if (r.remaining() != static_cast<std::size_t>(echoes) * 8) throw DecodeError("bad echo block length");
  p.timing_echo.resize(echoes);
  for (auto& d : p.timing_echo) d = r.f64();
  return p;
}

EdgePolicy::EdgePolicy(const nn::NetworkF& net) {
  const auto& spec = net.spec();
  sizes_ = spec.layer_sizes;
  int widest = 0;
  for (int s : sizes_) widest = std::max(widest, s);
  scratch_a_.assign(static_cast<std::size_t>(widest), 0.0f);
  scratch_b_.assign(static_cast<std::size_t>(widest), 0.0f);
  for (int l = 0; l < spec.weight_layers(); ++l) {
    acts_.push_back(l + 1 == spec.weight_layers() ? spec.output : spec.hidden);
    w_.emplace_back(static_cast<std::size_t>(sizes_[l + 1]) * sizes_[l]);
    b_.emplace_back(static_cast<std::size_t>(sizes_[l + 1]));
  }
  install(net);
  generation_ = 0;
}

void EdgePolicy::install(const nn::NetworkF& net) {
  if (net.spec().layer_sizes != sizes_) throw nn::ShapeError("policy shape mismatch");
  for (std::size_t l = 0; l < w_.size(); ++l) {
    const auto& layer = net.layers()[l];
    std::copy(layer.w.data(), layer.w.data() + layer.w.size(), w_[l].begin());
    std::copy(layer.b.data(), layer.b.data() + layer.b.size(), b_[l].begin());
  }
  ++generation_;
}

void EdgePolicy::infer(const float* state, float* action) const {
  const float* in = state;
  float* bufs[2] = {scratch_a_.data(), scratch_b_.data()};
  for (std::size_t l = 0; l < w_.size(); ++l) {
    const int rows = sizes_[l + 1], cols = sizes_[l];
    float* out = l + 1 == w_.size() ? action : bufs[l % 2];
    const float* w = w_[l].data();
    for (int r = 0; r < rows; ++r) {
      const float* row = w + static_cast<std::size_t>(r) * cols;
      // Four partial sums keep the adds independent.
      float s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      int c = 0;
      for (; c + 4 <= cols; c += 4) {
        s0 += row[c] * in[c];
        s1 += row[c + 1] * in[c + 1];
        s2 += row[c + 2] * in[c + 2];
        s3 += row[c + 3] * in[c + 3];
      }
      for (; c < cols; ++c) s0 += row[c] * in[c];
      const float z = (s0 + s1) + (s2 + s3) + b_[l][r];
      out[r] = acts_[l] == nn::Activation::Tanh ? std::tanh(z) : z;
    }
    in = out;
  }
}

std::array<float, rl::kActionDim> EdgePolicy::infer(const rl::StateVec& s) const {
  if (input_size() != rl::kStateDim || output_size() != rl::kActionDim) throw nn::ShapeError("not an actor policy");
  std::array<float, rl::kActionDim> a{};
  infer(s.data(), a.data());
  return a;
}

HotSwap::~HotSwap() { delete slot_.exchange(nullptr); }

bool HotSwap::receive(const std::uint8_t* data, std::size_t n) {
  WeightPacket p;
  try {
    p = decode_weights(data, n);
  } catch (const CrcError&) {
    ++crc_rejects_;
    return false;
  } catch (const DecodeError&) {
    ++shape_rejects_;
    return false;
  }
  if (p.net.spec().layer_sizes != policy_.sizes()) {
    ++shape_rejects_;
    return false;
  }
  if (static_cast<std::int64_t>(p.seq) <= last_received_.load()) {
    ++stale_;
    return false;
  }
  last_received_ = p.seq;
  delete slot_.exchange(new WeightPacket(std::move(p)));
  return true;
}

bool HotSwap::maintain(concerto::Mode mode) {
  if (mode != concerto::Mode::Classical) return false;
  std::unique_ptr<WeightPacket> p(slot_.exchange(nullptr));
  if (!p) return false;
  if (have_seq_ && p->seq <= last_seq_) {
    ++stale_;
    return false;
  }
  policy_.install(p->net);
  last_seq_ = p->seq;
  have_seq_ = true;
  ++applied_;
  return true;
}

Channel::~Channel() { close(); }

Channel& Channel::operator=(Channel&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = o.fd_;
    o.fd_ = -1;
  }
  return *this;
}

void Channel::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

void Channel::shutdown() {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

Channel Channel::connect(const std::string& host, int port, int retries) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
    throw std::runtime_error("cannot resolve " + host);
  for (int attempt = 0; attempt <= retries; ++attempt) {
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0) break;
    if (::connect(fd, res->ai_addr, res->ai_addrlen) == 0) {
      freeaddrinfo(res);
      int one = 1;
      setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return Channel(fd);
    }
    ::close(fd);
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  freeaddrinfo(res);
  throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port));
}

namespace {

bool write_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
    if (k < 0 && errno == EINTR) continue;
    if (k <= 0) return false;
    p += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

bool read_all(int fd, std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const ssize_t k = ::recv(fd, p, n, 0);
    if (k < 0 && errno == EINTR) continue;
    if (k <= 0) return false;
    p += k;
    n -= static_cast<std::size_t>(k);
  }
  return true;
}

constexpr std::uint32_t kMaxFrame = 64u << 20;

}  // namespace

bool Channel::send(const std::vector<std::uint8_t>& msg) {
  if (fd_ < 0 || msg.size() > kMaxFrame) return false;
  std::uint8_t hdr[4];
  const auto len = static_cast<std::uint32_t>(msg.size());
  for (int i = 0; i < 4; ++i) hdr[i] = static_cast<std::uint8_t>(len >> (8 * i));
  return write_all(fd_, hdr, 4) && write_all(fd_, msg.data(), msg.size());
}

std::optional<std::vector<std::uint8_t>> Channel::recv() {
  if (fd_ < 0) return std::nullopt;
  std::uint8_t hdr[4];
  if (!read_all(fd_, hdr, 4)) return std::nullopt;
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(hdr[i]) << (8 * i);
  if (len > kMaxFrame) return std::nullopt;
  std::vector<std::uint8_t> msg(len);
  if (!read_all(fd_, msg.data(), len)) return std::nullopt;
  return msg;
}

Listener::Listener(int port, const std::string& host) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw std::runtime_error("socket failed");
  int one = 1;
  setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw std::runtime_error("bad listen address " + host);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 4) != 0) {
    ::close(fd_);
    throw std::runtime_error("cannot listen on port " + std::to_string(port));
  }
  socklen_t len = sizeof addr;
  getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

Listener::~Listener() {
  if (fd_ >= 0) ::close(fd_);
}

Channel Listener::accept() {
  const int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) throw std::runtime_error("accept failed");
  int one = 1;
  setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return Channel(fd);
}

AsyncSender::AsyncSender(Channel* channel, std::size_t capacity, bool start_worker)
    : channel_(channel), capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("queue capacity must be positive");
  if (start_worker) start();
}

void AsyncSender::start() {
  if (!worker_.joinable()) worker_ = std::thread([this] { run(); });
}

AsyncSender::~AsyncSender() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void AsyncSender::push(std::vector<std::uint8_t> msg) {
  {
    std::lock_guard lock(mu_);
    if (q_.size() >= capacity_) {
      q_.pop_front();
      ++dropped_;
    }
    q_.push_back(std::move(msg));
  }
  cv_.notify_one();
}

void AsyncSender::flush() {
  std::unique_lock lock(mu_);
  idle_.wait(lock, [this] { return q_.empty() && !busy_; });
}

void AsyncSender::run() {
  std::unique_lock lock(mu_);
  for (;;) {
    cv_.wait(lock, [this] { return stop_ || !q_.empty(); });
    if (q_.empty() && stop_) break;
    auto msg = std::move(q_.front());
    q_.pop_front();
    busy_ = true;
    lock.unlock();
    if (channel_ && channel_->send(msg)) ++sent_;
    lock.lock();
    busy_ = false;
    if (q_.empty()) idle_.notify_all();
  }
  busy_ = false;
  idle_.notify_all();
}

const char* stage_label(Stage s) {
  switch (s) {
    case Stage::SensorUnpack:
      return "Sensor data unpacking process";
    case Stage::Shared:
      return "Shared Section of the Two Modes";
    case Stage::WeightLoading:
      return "Reception, Analysis, and Loading of Weight";
    case Stage::Classical:
      return "Classical Control";
    case Stage::StateTensorization:
      return "State Tensorization";
    case Stage::Inference:
      return "Network inference";
    case Stage::ActionDetensorization:
      return "Action de-tensorization";
    case Stage::BufferTransmission:
      return "Transmission of Memory Buffer";
    case Stage::ActionTransmission:
      return "Transmission of Action";
    case Stage::PlantSimulation:
      return "Plant simulation";
  }
  return "?";
}

double StepTiming::algorithm_total() const {
  double s = 0.0;
  for (int i = 0; i < kStages; ++i)
    if (in_algorithm(static_cast<Stage>(i))) s += seconds[i];
  return s;
}

double StepTiming::end_to_end() const {
  double s = 0.0;
  for (double v : seconds) s += v;
  return s;
}

namespace {

StageSummary stats(std::string label, std::vector<double> v) {
  StageSummary s;
  s.label = std::move(label);
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  s.median = v[v.size() / 2];
  s.p99 = v[std::min(v.size() - 1, static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(v.size()))) - 1)];
  s.max = v.back();
  return s;
}

}  // namespace

TimingSummary summarize(const std::vector<StepTiming>& records) {
  TimingSummary out;
  out.steps = records.size();
  std::vector<double> col(records.size());
  for (int i = 0; i < kStages; ++i) {
    for (std::size_t k = 0; k < records.size(); ++k) col[k] = records[k].seconds[i];
    out.stages.push_back(stats(stage_label(static_cast<Stage>(i)), col));
  }
  for (std::size_t k = 0; k < records.size(); ++k) col[k] = records[k].algorithm_total();
  out.algorithm = stats("Total Algorithm Execution Time", col);
  for (std::size_t k = 0; k < records.size(); ++k) col[k] = records[k].end_to_end();
  out.end_to_end = stats("End-to-end including plant", col);
  out.slowest_frequency = out.algorithm.max > 0.0 ? 1.0 / out.algorithm.max : 0.0;
  return out;
}

void write_timing_csv(std::ostream& os, const TimingSummary& s) {
  os << "stage,mean_s,median_s,p99_s,max_s\n";
  auto row = [&](const StageSummary& st) {
    os << '"' << st.label << '"' << ',' << std::setprecision(6) << std::scientific << st.mean << ',' << st.median << ','
       << st.p99 << ',' << st.max << '\n';
  };
  for (const auto& st : s.stages) row(st);
  row(s.algorithm);
  row(s.end_to_end);
  os << "\"Slowest Control Frequency /Hz\"," << std::fixed << std::setprecision(2) << s.slowest_frequency << ",,,\n";
  os.unsetf(std::ios::floatfield);
}

}  // namespace crl::edge
