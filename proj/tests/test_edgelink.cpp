#include <doctest.h>

#include "crl/edgelink.hpp"

#include <atomic>
#include <cstdlib>
#include <new>
#include <thread>

using namespace crl;
using namespace crl::edge;

// Counts heap allocations made by this test binary.
namespace {
std::atomic<long> g_allocs{0};
}

void* operator new(std::size_t n) {
  ++g_allocs;
  if (void* p = std::malloc(n ? n : 1)) return p;
  throw std::bad_alloc();
}
void operator delete(void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }

namespace {

rl::Transition random_transition(Rng& rng, std::uint64_t step) {
  rl::Transition t;
  for (float& x : t.state) x = static_cast<float>(rng.uniform(-1, 1));
  for (float& x : t.next_state) x = static_cast<float>(rng.uniform(-1, 1));
  for (float& x : t.action) x = static_cast<float>(rng.uniform(-1, 1));
  for (float& x : t.next_action) x = static_cast<float>(rng.uniform(-1, 1));
  t.reward = static_cast<float>(rng.uniform(0, 1));
  t.source = static_cast<rl::Source>(rng.below(3));
  t.step = step;
  return t;
}

bool same(const rl::Transition& a, const rl::Transition& b) {
  return a.state == b.state && a.action == b.action && a.reward == b.reward && a.next_state == b.next_state &&
         a.next_action == b.next_action && a.source == b.source && a.step == b.step;
}

rl::StateVec random_state(Rng& rng) {
  rl::StateVec s;
  for (float& x : s) x = static_cast<float>(rng.uniform(-1.5, 1.5));
  return s;
}

double max_diff(const std::array<float, 4>& a, const nn::Vec<float>& b) {
  double d = 0;
  for (int i = 0; i < 4; ++i) d = std::max(d, std::abs(double(a[i]) - double(b[i])));
  return d;
}

nn::Vec<float> as_vec(const rl::StateVec& s) { return Eigen::Map<const nn::Vec<float>>(s.data(), rl::kStateDim); }

}  // namespace

TEST_CASE("crc32 check value") {
  const std::string s = "123456789";
  CHECK(crc32(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()) == 0xCBF43926u);
}

TEST_CASE("weight packet codec") {
  SUBCASE("golden bytes") {
    const std::vector<std::uint8_t> golden{0x43, 0x52, 0x4c, 0x57, 0x01, 0x00, 0x07, 0x00, 0x00, 0x00, 0x01, 0x00,
                                           0x01, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x3f,
                                           0x00, 0x00, 0xa0, 0xbf, 0x00, 0x00, 0x80, 0x3e, 0xd7, 0xa4, 0x8a, 0x26};
    const WeightPacket p = decode_weights(golden.data(), golden.size());
    CHECK(p.seq == 7);
    REQUIRE(p.net.layers().size() == 1);
    CHECK(p.net.layers()[0].w(0, 0) == 0.5f);
    CHECK(p.net.layers()[0].w(0, 1) == -1.25f);
    CHECK(p.net.layers()[0].b[0] == 0.25f);
    CHECK(encode_weights(p) == golden);
  }
  SUBCASE("random round trips") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const int hidden = 1 + static_cast<int>(rng.below(40));
      WeightPacket p{static_cast<std::uint32_t>(rng.below(1u << 31)),
                     nn::init_xavier(nn::NetworkSpec::actor(1 + static_cast<int>(rng.below(90)), hidden, 4), seed)};
      const auto bytes = encode_weights(p);
      const WeightPacket back = decode_weights(bytes.data(), bytes.size());
      CHECK(back.seq == p.seq);
      CHECK(back.net == p.net);
      CHECK(encode_weights(back) == bytes);
    }
  }
  SUBCASE("errors") {
    const auto bytes = encode_weights({3, nn::init_xavier(nn::NetworkSpec::actor(), 1)});
    auto bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_weights(bad.data(), bad.size()), ProtocolError);
    bad = bytes;
    bad[100] ^= 0x10;
    CHECK_THROWS_AS(decode_weights(bad.data(), bad.size()), CrcError);
    CHECK_THROWS_AS(decode_weights(bytes.data(), 10), DecodeError);
    CHECK_THROWS_AS(decode_weights(bytes.data(), bytes.size() - 1), DecodeError);
  }
}

TEST_CASE("buffer packet codec") {
  const BufferPacket empty{42, {}, {}};
  auto bytes = encode_buffer(empty);
  auto back = decode_buffer(bytes.data(), bytes.size());
  CHECK(back.step == 42);
  CHECK(back.transitions.empty());

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    BufferPacket p;
    p.step = rng.next();
    const int n = static_cast<int>(rng.below(20));
    for (int i = 0; i < n; ++i) p.transitions.push_back(random_transition(rng, rng.next()));
    for (int i = 0; i < 3; ++i) p.timing_echo.push_back(rng.uniform());
    bytes = encode_buffer(p);
    back = decode_buffer(bytes.data(), bytes.size());
    CHECK(back.step == p.step);
    REQUIRE(back.transitions.size() == p.transitions.size());
    for (std::size_t i = 0; i < p.transitions.size(); ++i) CHECK(same(back.transitions[i], p.transitions[i]));
    CHECK(back.timing_echo == p.timing_echo);
    CHECK(encode_buffer(back) == bytes);
    if (bytes.size() > 20) CHECK_THROWS_AS(decode_buffer(bytes.data(), bytes.size() - 5), DecodeError);
  }
  bytes[1] = 'X';
  CHECK_THROWS_AS(decode_buffer(bytes.data(), bytes.size()), ProtocolError);
}

TEST_CASE("edge inference") {
  const nn::NetworkF zero(nn::NetworkSpec::actor());
  EdgePolicy zp(zero);
  Rng rng(1);
  for (float a : zp.infer(random_state(rng))) CHECK(a == 0.0f);

  const nn::NetworkF net = [] {
    nn::NetworkF n = nn::init_xavier(nn::NetworkSpec::actor(), 3);
    Rng r(2);
    for (auto& l : n.layers())
      for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b[i] = static_cast<float>(r.uniform(-0.3, 0.3));
    return n;
  }();
  EdgePolicy p(net);
  CHECK(p.generation() == 0);
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    const auto s = random_state(rng);
    const auto a = p.infer(s);
    worst = std::max(worst, max_diff(a, net.forward(as_vec(s))));
    CHECK(a == p.infer(s));
    for (float x : a) CHECK(std::abs(x) < 1.0f);
  }
  MESSAGE("max deviation from reference forward " << worst);
  CHECK(worst <= 1e-6);

  CHECK_THROWS_AS(p.install(nn::init_xavier(nn::NetworkSpec::actor(80, 64, 4), 1)), nn::ShapeError);

  // Hot path: no allocation once constructed.
  const auto s = random_state(rng);
  float out[4];
  const long before = g_allocs.load();
  for (int i = 0; i < 1000; ++i) p.infer(s.data(), out);
  CHECK(g_allocs.load() == before);
}

TEST_CASE("hot swap") {
  const nn::NetworkF old_net = nn::init_xavier(nn::NetworkSpec::actor(), 10);
  const nn::NetworkF new_net = nn::init_xavier(nn::NetworkSpec::actor(), 11);
  EdgePolicy policy(old_net);
  HotSwap swap(policy);
  Rng rng(4);
  const auto s = random_state(rng);

  SUBCASE("staged during Mode 2, applied at the next Mode 1 step") {
    std::uint64_t k = 1;
    CHECK(swap.receive(encode_weights({1, new_net})));
    CHECK_FALSE(swap.maintain(concerto::select_mode(k)));
    CHECK(policy.generation() == 0);
    CHECK(max_diff(policy.infer(s), old_net.forward(as_vec(s))) <= 1e-6);
    ++k;
    CHECK(swap.maintain(concerto::select_mode(k)));
    CHECK(policy.generation() == 1);
    CHECK(max_diff(policy.infer(s), new_net.forward(as_vec(s))) <= 1e-6);
  }
  SUBCASE("valid packet during Mode 1") {
    CHECK(swap.receive(encode_weights({5, new_net})));
    CHECK(swap.maintain(concerto::Mode::Classical));
    CHECK(max_diff(policy.infer(s), new_net.forward(as_vec(s))) <= 1e-6);
  }
  SUBCASE("corrupt, misshapen and stale packets") {
    auto bytes = encode_weights({2, new_net});
    bytes[200] ^= 0xff;
    CHECK_FALSE(swap.receive(bytes));
    CHECK(swap.crc_rejects() == 1);
    CHECK_FALSE(swap.receive(encode_weights({3, nn::init_xavier(nn::NetworkSpec::actor(80, 32, 4), 1)})));
    CHECK(swap.shape_rejects() == 1);
    CHECK_FALSE(swap.maintain(concerto::Mode::Classical));
    CHECK(policy.generation() == 0);
    CHECK(max_diff(policy.infer(s), old_net.forward(as_vec(s))) <= 1e-6);

    CHECK(swap.receive(encode_weights({9, new_net})));
    CHECK_FALSE(swap.receive(encode_weights({8, old_net})));
    CHECK(swap.stale_discards() == 1);
    CHECK(swap.maintain(concerto::Mode::Classical));
    CHECK(swap.last_seq() == 9);
  }
  SUBCASE("receiver thread, generation stamping") {
    std::vector<nn::NetworkF> nets;
    for (int i = 0; i < 20; ++i) nets.push_back(nn::init_xavier(nn::NetworkSpec::actor(), 100 + i));
    std::atomic<bool> done{false};
    std::thread rx([&] {
      for (std::uint32_t i = 0; i < 20; ++i) {
        swap.receive(encode_weights({i + 1, nets[i]}));
        std::this_thread::sleep_for(std::chrono::microseconds(500));
      }
      done = true;
    });
    // Every action matches exactly one installed network.
    int checked = 0;
    std::uint64_t last_gen = 0;
    for (std::uint64_t k = 0; !done; ++k) {
      if (swap.maintain(concerto::select_mode(k))) {
        CHECK(policy.generation() > last_gen);
        last_gen = policy.generation();
      }
      if (concerto::select_mode(k) == concerto::Mode::Learned && swap.last_seq() > 0 && k % 50 == 1) {
        const auto a = policy.infer(s);
        CHECK(max_diff(a, nets[swap.last_seq() - 1].forward(as_vec(s))) <= 1e-6);
        ++checked;
      }
    }
    rx.join();
    while (swap.staged()) swap.maintain(concerto::Mode::Classical);
    CHECK(swap.last_seq() == 20);
    CHECK(checked > 0);
  }
}

TEST_CASE("framed channel and bounded queue") {
  Listener listener(0);
  std::thread echo([&] {
    Channel c = listener.accept();
    while (auto m = c.recv()) c.send(*m);
  });
  Channel client = Channel::connect("127.0.0.1", listener.port());
  Rng rng(6);
  BufferPacket p{77, {}, {1.5}};
  for (int i = 0; i < 16; ++i) p.transitions.push_back(random_transition(rng, i));
  const auto bytes = encode_buffer(p);
  REQUIRE(client.send(bytes));
  const auto got = client.recv();
  REQUIRE(got.has_value());
  CHECK(*got == bytes);
  const auto back = decode_buffer(got->data(), got->size());
  for (int i = 0; i < 16; ++i) CHECK(same(back.transitions[i], p.transitions[i]));

  {
    AsyncSender sender(&client, 1, false);
    sender.push({1, 2, 3});
    sender.push({4, 5, 6});
    CHECK(sender.dropped() == 1);
    sender.start();
    sender.flush();
    CHECK(sender.sent() == 1);
    const auto e = client.recv();
    REQUIRE(e.has_value());
    CHECK(*e == std::vector<std::uint8_t>{4, 5, 6});
  }
  client.shutdown();
  echo.join();
}

TEST_CASE("timing summary") {
  std::vector<StepTiming> recs(1);
  recs[0].seconds[static_cast<int>(Stage::Shared)] = 1e-3;
  recs[0].seconds[static_cast<int>(Stage::Inference)] = 2e-3;
  recs[0].seconds[static_cast<int>(Stage::PlantSimulation)] = 5e-3;
  const auto s = summarize(recs);
  CHECK(s.algorithm.max == doctest::Approx(3e-3));
  CHECK(s.slowest_frequency == doctest::Approx(333.333).epsilon(1e-4));
  CHECK(s.end_to_end.max == doctest::Approx(8e-3));

  std::ostringstream os;
  write_timing_csv(os, s);
  for (const char* label :
       {"Sensor data unpacking process", "Shared Section of the Two Modes", "Reception, Analysis, and Loading of Weight",
        "Classical Control", "State Tensorization", "Network inference", "Action de-tensorization",
        "Transmission of Memory Buffer", "Transmission of Action", "Total Algorithm Execution Time",
        "Slowest Control Frequency /Hz"})
    CHECK(os.str().find(label) != std::string::npos);

  std::vector<StepTiming> many(100);
  for (int i = 0; i < 100; ++i) many[i].seconds[0] = (i + 1) * 1e-6;
  const auto m = summarize(many);
  CHECK(m.stages[0].p99 == doctest::Approx(99e-6));
  CHECK(m.stages[0].max == doctest::Approx(100e-6));
  CHECK(m.stages[0].mean == doctest::Approx(50.5e-6));
}
