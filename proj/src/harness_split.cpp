#include "crl/bytes.hpp"
#include "crl/harness.hpp"

#include "harness_loop.hpp"

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

namespace crl::harness {

std::vector<std::uint8_t> encode_vec4(const char (&magic)[5], std::uint64_t step, const Vec4& v) {
  std::vector<std::uint8_t> out;
  out.reserve(44);
  ByteWriter w(out);
  w.bytes(magic, 4);
  w.u64(step);
  for (double x : v) w.f64(x);
  return out;
}

Vec4 decode_vec4(const char (&magic)[5], const std::vector<std::uint8_t>& msg, std::uint64_t* step) {
  if (msg.size() != 44 || std::memcmp(msg.data(), magic, 4) != 0)
    throw edge::ProtocolError(std::string("expected a ") + magic + " message");
  ByteReader r(msg.data() + 4, msg.size() - 4);
  const std::uint64_t s = r.u64();
  if (step) *step = s;
  Vec4 v;
  for (double& x : v) x = r.f64();
  return v;
}

std::vector<std::uint8_t> quit_message() { return {'C', 'R', 'L', 'Q'}; }
bool is_quit(const std::vector<std::uint8_t>& msg) { return msg.size() == 4 && std::memcmp(msg.data(), "CRLQ", 4) == 0; }

int serve_plant(const ExperimentConfig& cfg, int port, const ListenCallback& on_listen) {
  edge::Listener listener(port, cfg.host);
  if (on_listen)
    on_listen(listener.port());
  else
    std::cout << "plant listening on " << listener.port() << std::endl;
  edge::Channel ch = listener.accept();
  plant::Plant plant(cfg.plant_for_condition());
  plant::PlantState s = plant.rest_state();
  Vec4 rest;
  for (int i = 0; i < 4; ++i) rest[i] = plant.rest_angle(i);
  auto observe = [&] {
    Vec4 o;
    for (int i = 0; i < 4; ++i) o[i] = s.phi[i] - rest[i];
    return o;
  };
  std::uint64_t k = 0;
  ch.send(encode_vec4("CRLS", k, observe()));
  while (auto msg = ch.recv()) {
    if (is_quit(*msg)) break;
    const Vec4 torque = decode_vec4("CRLA", *msg);
    try {
      s = plant.step(s, torque, cfg.control_dt);
    } catch (const plant::StepFailure& e) {
      std::cerr << "plant: " << e.what() << '\n';
      return 1;
    }
    ++k;
    if (!ch.send(encode_vec4("CRLS", k, observe()))) break;
  }
  return 0;
}

int serve_cloud(const ExperimentConfig& cfg, int port, const ListenCallback& on_listen) {
  edge::Listener listener(port, cfg.host);
  if (on_listen)
    on_listen(listener.port());
  else
    std::cout << "cloud listening on " << listener.port() << std::endl;
  edge::Channel ch = listener.accept();
  Trainer trainer(cfg.trainer, cfg.seed);
  std::uint64_t packets = 0;
  while (auto msg = ch.recv()) {
    if (is_quit(*msg)) break;
    const edge::BufferPacket p = edge::decode_buffer(msg->data(), msg->size());
    for (const rl::Transition& t : p.transitions)
      for (const auto& w : trainer.on_transition(t)) {
        if (!ch.send(w)) return 1;
        ++packets;
      }
  }
  ch.shutdown();
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream f(std::filesystem::path(cfg.out_dir) / "composer.jsonl");
    for (const auto& e : trainer.composer().events()) concerto::write_event_jsonl(f, e);
  }
  std::cout << "cloud: " << trainer.composer().segments() << " segments, " << packets << " weight packets, "
            << trainer.critic_updates() << " critic / " << trainer.actor_updates() << " actor updates" << std::endl;
  return 0;
}

namespace {

class RemotePlant : public PlantIO {
 public:
  explicit RemotePlant(edge::Channel& ch) : ch_(ch) {}
  Vec4 observe() override {
    auto msg = ch_.recv();
    if (!msg) throw std::runtime_error("plant connection closed");
    return decode_vec4("CRLS", *msg);
  }
  void apply(const Vec4& torque) override {
    if (!ch_.send(encode_vec4("CRLA", k_++, torque))) throw std::runtime_error("plant connection closed");
  }
  void advance(double) override {}

 private:
  edge::Channel& ch_;
  std::uint64_t k_ = 0;
};

// Buffers leave through a drop-oldest queue; weight packets are received on
// a separate thread and staged straight into the hot-swap slot.
class RemoteCloud : public CloudIO {
 public:
  explicit RemoteCloud(edge::Channel& ch) : ch_(ch), sender_(&ch_, 256) {}
  ~RemoteCloud() override {
    if (rx_.joinable()) {
      ch_.shutdown();
      rx_.join();
    }
  }
  void attach(edge::HotSwap& swap) override {
    rx_ = std::thread([this, &swap] {
      while (auto msg = ch_.recv()) {
        swap.receive(*msg);
        ++received_;
      }
    });
  }
  void ship(std::vector<std::uint8_t> bytes) override { sender_.push(std::move(bytes)); }
  void process(edge::HotSwap&, RunResult&) override {}
  void finish(RunResult& r) override {
    sender_.push(quit_message());
    sender_.flush();
    if (rx_.joinable()) rx_.join();
    r.weight_packets = received_;
    if (sender_.dropped() > 0) std::cerr << "edge: dropped " << sender_.dropped() << " buffer packets\n";
  }

 private:
  edge::Channel& ch_;
  edge::AsyncSender sender_;
  std::thread rx_;
  std::atomic<std::uint64_t> received_{0};
};

}  // namespace

RunResult run_edge(const ExperimentConfig& cfg) {
  edge::Channel plant_ch = edge::Channel::connect(cfg.host, cfg.plant_port);
  RemotePlant plant_io(plant_ch);
  RunResult r;
  if (is_crl(cfg.algorithm)) {
    edge::Channel cloud_ch = edge::Channel::connect(cfg.host, cfg.cloud_port);
    RemoteCloud cloud(cloud_ch);
    r = run_loop(cfg, plant_io, &cloud);
  } else {
    r = run_loop(cfg, plant_io, nullptr);
  }
  plant_ch.send(quit_message());
  return r;
}

}  // namespace crl::harness
