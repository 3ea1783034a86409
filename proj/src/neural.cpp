#include "crl/neural.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

namespace crl::nn {

NetworkSpec NetworkSpec::actor(int input, int hidden, int output) {
  return {{input, hidden, hidden, output}, Activation::Tanh, Activation::Tanh};
}

NetworkSpec NetworkSpec::critic(int input, int hidden, int hidden_layers) {
  NetworkSpec s;
  s.layer_sizes.push_back(input);
  for (int i = 0; i < hidden_layers; ++i) s.layer_sizes.push_back(hidden);
  s.layer_sizes.push_back(1);
  s.hidden = Activation::Tanh;
  s.output = Activation::Identity;
  return s;
}

void NetworkSpec::validate() const {
  if (layer_sizes.size() < 2) throw ShapeError("network needs at least two layers");
  for (int n : layer_sizes)
    if (n <= 0) throw ShapeError("layer widths must be positive");
}

NetworkF init_xavier(const NetworkSpec& spec, std::uint64_t seed) {
  NetworkF net(spec);
  Rng rng(seed);
  for (auto& layer : net.layers()) {
    const double fan_in = static_cast<double>(layer.w.cols());
    const double fan_out = static_cast<double>(layer.w.rows());
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    // Round toward zero so the float weights never leave [-a, a].
    const float af = std::nextafter(static_cast<float>(a), 0.0f);
    for (Eigen::Index i = 0; i < layer.w.size(); ++i) {
      const float w = static_cast<float>(rng.uniform(-a, a));
      layer.w.data()[i] = std::clamp(w, -af, af);
    }
    layer.b.setZero();
  }
  return net;
}

void encode_layers(ByteWriter& w, const NetworkF& net) {
  for (const auto& layer : net.layers()) {
    w.u32(static_cast<std::uint32_t>(layer.w.rows()));
    w.u32(static_cast<std::uint32_t>(layer.w.cols()));
    w.f32_array(layer.w.data(), static_cast<std::size_t>(layer.w.size()));
    w.f32_array(layer.b.data(), static_cast<std::size_t>(layer.b.size()));
  }
}

NetworkF decode_layers(ByteReader& r, int layer_count, Activation hidden, Activation output) {
  if (layer_count < 1) throw DecodeError("layer count must be positive");
  std::vector<RowMat<float>> ws;
  std::vector<Vec<float>> bs;
  NetworkSpec spec;
  spec.hidden = hidden;
  spec.output = output;
  for (int l = 0; l < layer_count; ++l) {
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (rows == 0 || cols == 0 || rows > (1u << 16) || cols > (1u << 16)) throw DecodeError("bad layer shape");
    if (l == 0)
      spec.layer_sizes.push_back(static_cast<int>(cols));
    else if (static_cast<int>(cols) != spec.layer_sizes.back())
      throw DecodeError("layer shapes do not chain");
    if (r.remaining() < (static_cast<std::size_t>(rows) * cols + rows) * sizeof(float))
      throw DecodeError("truncated layer data");
    spec.layer_sizes.push_back(static_cast<int>(rows));
    RowMat<float> w(rows, cols);
    Vec<float> b(rows);
    r.f32_array(w.data(), static_cast<std::size_t>(w.size()));
    r.f32_array(b.data(), rows);
    ws.push_back(std::move(w));
    bs.push_back(std::move(b));
  }
  NetworkF net(spec);
  for (int l = 0; l < layer_count; ++l) {
    net.layers()[l].w = std::move(ws[l]);
    net.layers()[l].b = std::move(bs[l]);
  }
  return net;
}

std::vector<std::uint8_t> encode_snapshot(const NetworkF& net) {
  std::vector<std::uint8_t> out;
  ByteWriter w(out);
  w.bytes("CRLW", 4);
  w.u16(kSnapshotVersion);
  w.u16(static_cast<std::uint16_t>(net.layers().size()));
  encode_layers(w, net);
  return out;
}

NetworkF decode_snapshot(const std::uint8_t* data, std::size_t size, Activation hidden, Activation output) {
  ByteReader r(data, size);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "CRLW") throw DecodeError("bad snapshot magic");
  if (r.u16() != kSnapshotVersion) throw DecodeError("unsupported snapshot version");
  const int layers = r.u16();
  NetworkF net = decode_layers(r, layers, hidden, output);
  if (r.remaining() != 0) throw DecodeError("trailing bytes in snapshot");
  return net;
}

void save_snapshot(const std::string& path, const NetworkF& net) {
  const auto bytes = encode_snapshot(net);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

NetworkF load_snapshot(const std::string& path, Activation hidden, Activation output) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_snapshot(bytes.data(), bytes.size(), hidden, output);
}

}  // namespace crl::nn
