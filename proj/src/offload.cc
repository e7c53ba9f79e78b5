#include "skewsplit/offload.h"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <future>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include "skewsplit/codec.h"
#include "skewsplit/errors.h"

namespace skewsplit {
namespace {

void PutU16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void PutU32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) {
    out.push_back(static_cast<std::uint8_t>(v >> shift));
  }
}

std::uint16_t GetU16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] << 8 | b[at + 1]);
}

std::uint32_t GetU32(std::span<const std::uint8_t> b, std::size_t at) {
  return std::uint32_t{b[at]} << 24 | std::uint32_t{b[at + 1]} << 16 |
         std::uint32_t{b[at + 2]} << 8 | std::uint32_t{b[at + 3]};
}

using Clock = std::chrono::steady_clock;

double Seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

// Applies the model's training mapping, if any is still attached.
Tensor Mapped(const SplitModel& model, const Tensor& features) {
  if (model.mapping().empty()) return features;
  return SelectChannels(features, model.mapping());
}

std::vector<std::uint8_t> ToBytes(std::span<const double> pixels) {
  std::vector<std::uint8_t> out(pixels.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(
        std::lround(std::clamp(pixels[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

// Blocking helpers over a socket.
void SendAll(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const ssize_t n =
        ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw TransportError("send failed: " + std::string(std::strerror(errno)));
    sent += static_cast<std::size_t>(n);
  }
}

// Reads exactly out.size() bytes; no deadline waits forever. Returns
// false on a clean EOF before the first byte.
bool RecvAll(int fd, std::span<std::uint8_t> out,
             std::optional<Clock::time_point> deadline) {
  std::size_t got = 0;
  while (got < out.size()) {
    if (deadline) {
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
          *deadline - Clock::now());
      if (left.count() <= 0) throw TransportError("timed out waiting for reply");
      pollfd p{fd, POLLIN, 0};
      const int r = ::poll(&p, 1, static_cast<int>(left.count()));
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) throw TransportError("poll failed");
      if (r == 0) throw TransportError("timed out waiting for reply");
    }
    const ssize_t n = ::recv(fd, out.data() + got, out.size() - got, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n == 0 && got == 0) return false;
    if (n <= 0) throw TransportError("connection closed mid-message");
    got += static_cast<std::size_t>(n);
  }
  return true;
}

std::optional<std::vector<std::uint8_t>> ReadFrame(
    int fd, std::optional<Clock::time_point> deadline) {
  std::array<std::uint8_t, 4> len_bytes;
  if (!RecvAll(fd, len_bytes, deadline)) return std::nullopt;
  const std::uint32_t len = GetU32(len_bytes, 0);
  if (len > kMaxFrameBytes) {
    throw TransportError("frame of " + std::to_string(len) + " bytes exceeds limit");
  }
  std::vector<std::uint8_t> payload(len);
  if (len > 0 && !RecvAll(fd, payload, deadline)) {
    throw TransportError("connection closed mid-frame");
  }
  return payload;
}

}  // namespace

// ---- Wire format -------------------------------------------------------------

std::vector<std::uint8_t> FeaturePacket::Serialize() const {
  std::vector<std::uint8_t> out(kPacketMagic.begin(), kPacketMagic.end());
  out.reserve(kPacketHeaderBytes + block.size());
  out.push_back(version);
  PutU32(out, sample_id);
  PutU32(out, static_cast<std::uint32_t>(block.size()));
  out.push_back(quantizer_id);
  out.insert(out.end(), block.begin(), block.end());
  return out;
}

FeaturePacket FeaturePacket::Parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPacketHeaderBytes) {
    throw FormatError("feature packet truncated: " + std::to_string(bytes.size()) +
                      " bytes, header needs " + std::to_string(kPacketHeaderBytes));
  }
  if (!std::equal(kPacketMagic.begin(), kPacketMagic.end(), bytes.begin())) {
    throw FormatError("feature packet has bad magic");
  }
  FeaturePacket p;
  p.version = bytes[4];
  if (p.version != kProtocolVersion) {
    throw FormatError("unsupported protocol version " + std::to_string(p.version));
  }
  p.sample_id = GetU32(bytes, 5);
  const std::uint32_t len = GetU32(bytes, 9);
  p.quantizer_id = bytes[13];
  if (bytes.size() - kPacketHeaderBytes != len) {
    throw FormatError("feature packet payload_len " + std::to_string(len) +
                      " but " + std::to_string(bytes.size() - kPacketHeaderBytes) +
                      " bytes follow");
  }
  p.block.assign(bytes.begin() + kPacketHeaderBytes, bytes.end());
  return p;
}

std::vector<std::uint8_t> LogitsReply::Serialize() const {
  if (logits.size() > 0xFFFF) throw FormatError("too many classes for a reply");
  std::vector<std::uint8_t> out;
  out.reserve(6 + 4 * logits.size());
  PutU32(out, sample_id);
  PutU16(out, static_cast<std::uint16_t>(logits.size()));
  for (float v : logits) PutU32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

LogitsReply LogitsReply::Parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 6) throw FormatError("logits reply truncated");
  LogitsReply r;
  r.sample_id = GetU32(bytes, 0);
  const std::size_t n = GetU16(bytes, 4);
  if (bytes.size() != 6 + 4 * n) {
    throw FormatError("logits reply declares " + std::to_string(n) +
                      " classes but has " + std::to_string(bytes.size()) + " bytes");
  }
  r.logits.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.logits[i] = std::bit_cast<float>(GetU32(bytes, 6 + 4 * i));
  }
  return r;
}

std::vector<std::uint8_t> Frame(std::span<const std::uint8_t> payload) {
  if (payload.size() > kMaxFrameBytes) throw FormatError("frame too large");
  std::vector<std::uint8_t> out;
  out.reserve(4 + payload.size());
  PutU32(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

// ---- Models ------------------------------------------------------------------

void LinkModel::Validate() const {
  if (!(bandwidth_bps > 0.0) || !std::isfinite(bandwidth_bps)) {
    throw ConfigError("bandwidth must be positive");
  }
  if (!(rtt_s >= 0.0) || !std::isfinite(rtt_s)) {
    throw ConfigError("rtt must be non-negative");
  }
}

double SimulateLink(std::size_t bytes, const LinkModel& link) {
  link.Validate();
  return 8.0 * static_cast<double>(bytes) / link.bandwidth_bps + link.rtt_s;
}

void CostModel::Validate() const {
  if (!(device_flops > 0) || !(server_flops > 0) || !(compress_bytes_per_s > 0)) {
    throw ConfigError("cost model throughputs must be positive");
  }
}

OffloadMode ParseMode(const std::string& name) {
  if (name == "partitioned") return OffloadMode::kPartitioned;
  if (name == "edge_only") return OffloadMode::kEdgeOnly;
  if (name == "local_only") return OffloadMode::kLocalOnly;
  throw ConfigError("unknown offload mode '" + name +
                    "' (partitioned, edge_only, local_only)");
}

std::string ModeName(OffloadMode mode) {
  switch (mode) {
    case OffloadMode::kPartitioned: return "partitioned";
    case OffloadMode::kEdgeOnly: return "edge_only";
    case OffloadMode::kLocalOnly: return "local_only";
  }
  return "?";
}

void LatencyReport::Finalize() {
  t_serial = t_extract + t_local + t_compress + t_tx + t_remote + t_combine;
  t_total = t_extract + t_compress + std::max(t_local, t_tx + t_remote) + t_combine;
}

// ---- Server ------------------------------------------------------------------

RemoteServer::RemoteServer(const SplitModel& model) : model_(&model) {
  if (!model.initialized()) throw Error("server needs an initialised model");
}

std::vector<double> RemoteServer::Compute(const FeaturePacket& packet) const {
  const SplitModel& m = *model_;
  const std::vector<std::uint8_t> symbols = DecodeBlock(packet.block);
  const auto [fh, fw] = m.config().extractor.FeatureSize();
  if (packet.quantizer_id == kFeatureQuantizer) {
    const int rest = m.channels() - m.k();
    if (symbols.size() != static_cast<std::size_t>(fh) * fw * rest) {
      throw FormatError("feature payload has " + std::to_string(symbols.size()) +
                        " symbols, expected " + std::to_string(fh * fw * rest));
    }
    Tensor x = Tensor::FromData({1, fh, fw, rest}, m.quantizer().Dequantize(symbols));
    Tensor logits = m.RemoteLogits(x);
    return {logits.data().begin(), logits.data().end()};
  }
  // Raw input: the whole model runs here.
  const ExtractorConfig& ec = m.config().extractor;
  const std::size_t n = static_cast<std::size_t>(ec.input_h) * ec.input_w * ec.input_c;
  if (symbols.size() != n) {
    throw FormatError("raw payload has " + std::to_string(symbols.size()) +
                      " bytes, expected " + std::to_string(n));
  }
  std::vector<double> pixels(n);
  for (std::size_t i = 0; i < n; ++i) pixels[i] = symbols[i] / 255.0;
  Tensor logits =
      m.Logits(Tensor::FromData({1, ec.input_h, ec.input_w, ec.input_c}, pixels));
  return {logits.data().begin(), logits.data().end()};
}

std::optional<std::vector<std::uint8_t>> RemoteServer::Handle(
    std::span<const std::uint8_t> request) {
  try {
    const FeaturePacket packet = FeaturePacket::Parse(request);
    if (packet.quantizer_id != kFeatureQuantizer &&
        packet.quantizer_id != kRawInputQuantizer) {
      throw FormatError("unknown quantizer_id " + std::to_string(packet.quantizer_id));
    }
    LogitsReply reply;
    reply.sample_id = packet.sample_id;
    for (double v : Compute(packet)) reply.logits.push_back(static_cast<float>(v));
    ++served_;
    return reply.Serialize();
  } catch (const Error& e) {
    ++dropped_;
    if (log_) log_(std::string("dropped packet: ") + e.what());
    return std::nullopt;
  }
}

// ---- Transports --------------------------------------------------------------

std::vector<std::uint8_t> LoopbackTransport::Exchange(
    std::span<const std::uint8_t> request, std::chrono::milliseconds) {
  if (down_) throw TransportError("loopback link is down");
  auto reply = server_->Handle(request);
  if (!reply) throw TransportError("server dropped the request");
  return *std::move(reply);
}

TcpTransport::TcpTransport(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  if (rc != 0) {
    throw TransportError("cannot resolve " + host + ": " + ::gai_strerror(rc));
  }
  for (addrinfo* a = res; a != nullptr; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
      fd_ = fd;
      break;
    }
    ::close(fd);
  }
  ::freeaddrinfo(res);
  if (fd_ < 0) {
    throw TransportError("cannot connect to " + host + ":" + std::to_string(port));
  }
  const int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

TcpTransport::~TcpTransport() {
  if (fd_ >= 0) ::close(fd_);
}

std::vector<std::uint8_t> TcpTransport::Exchange(
    std::span<const std::uint8_t> request, std::chrono::milliseconds timeout) {
  if (fd_ < 0) throw TransportError("connection is closed");
  const auto deadline = Clock::now() + timeout;
  try {
    SendAll(fd_, Frame(request));
    auto reply = ReadFrame(fd_, deadline);
    if (!reply) throw TransportError("server closed the connection");
    return *std::move(reply);
  } catch (const TransportError&) {
    // The stream position is unknown after a failure; never reuse it.
    ::close(fd_);
    fd_ = -1;
    throw;
  }
}

TcpServer::TcpServer(RemoteServer* handler, const std::string& host, int port)
    : handler_(handler) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw TransportError("socket() failed");
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  const std::string ip = host == "localhost" ? "127.0.0.1" : host;
  if (::inet_pton(AF_INET, ip.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    throw TransportError("bad listen address " + host);
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(listen_fd_, 256) != 0) {
    const std::string err = std::strerror(errno);
    ::close(listen_fd_);
    throw TransportError("cannot listen on " + host + ":" + std::to_string(port) +
                         ": " + err);
  }
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpServer::~TcpServer() { Stop(); }

void TcpServer::Start() {
  accept_thread_ = std::thread([this] { Serve(); });
}

void TcpServer::Serve() {
  while (!stopping_) {
    pollfd p{listen_fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, 100);
    if (r <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    std::lock_guard<std::mutex> lock(mu_);
    if (stopping_) {
      ::close(fd);
      break;
    }
    conn_fds_.push_back(fd);
    conn_threads_.emplace_back([this, fd] { ServeConnection(fd); });
  }
}

void TcpServer::ServeConnection(int fd) {
  try {
    while (!stopping_) {
      auto request = ReadFrame(fd, std::nullopt);
      if (!request) break;
      auto reply = handler_->Handle(*request);
      // A dropped packet gets no reply; the client times out.
      if (reply) SendAll(fd, Frame(*reply));
    }
  } catch (const TransportError&) {
  }
  ::shutdown(fd, SHUT_RDWR);
}

void TcpServer::Stop() {
  if (stopping_.exchange(true)) return;
  if (accept_thread_.joinable()) accept_thread_.join();
  std::vector<std::thread> threads;
  {
    std::lock_guard<std::mutex> lock(mu_);
    for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
    threads.swap(conn_threads_);
  }
  for (auto& t : threads) t.join();
  for (int fd : conn_fds_) ::close(fd);
  conn_fds_.clear();
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
}

std::pair<std::string, int> ParseAddress(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == address.size()) {
    throw ConfigError("address '" + address + "' is not host:port");
  }
  int port = 0;
  try {
    std::size_t used = 0;
    port = std::stoi(address.substr(colon + 1), &used);
    if (used != address.size() - colon - 1) throw std::invalid_argument("port");
  } catch (const std::exception&) {
    throw ConfigError("address '" + address + "' has a bad port");
  }
  if (port < 0 || port > 65535) throw ConfigError("port out of range in " + address);
  return {address.substr(0, colon), port};
}

// ---- Client ------------------------------------------------------------------

OffloadClient::OffloadClient(const SplitModel& model, Transport* transport,
                             ClientOptions options)
    : model_(&model), transport_(transport), options_(options) {
  if (!model.initialized()) throw Error("client needs an initialised model");
  options_.link.Validate();
  options_.cost.Validate();
}

FeaturePacket OffloadClient::BuildPacket(const Tensor& x, std::uint32_t sample_id,
                                         OffloadMode mode) const {
  FeaturePacket p;
  p.sample_id = sample_id;
  if (mode == OffloadMode::kEdgeOnly) {
    p.quantizer_id = kRawInputQuantizer;
    p.block = EncodeBlock(ToBytes(x.data()), 8).bytes;
    return p;
  }
  if (mode != OffloadMode::kPartitioned) throw ConfigError("local_only sends nothing");
  const Tensor f = Mapped(*model_, model_->extractor().Forward(x.Detach()));
  const Tensor rest = SplitFeatures(f, model_->k()).second;
  const Quantizer& q = model_->quantizer();
  p.quantizer_id = kFeatureQuantizer;
  p.block = EncodeBlock(q.Quantize(rest.data()),
                        static_cast<std::uint8_t>(q.bits_per_symbol())).bytes;
  return p;
}

ClientResult OffloadClient::LocalOnly(const Tensor& features, double t_extract) {
  const SplitModel& m = *model_;
  ClientResult r;
  const auto start = Clock::now();
  Tensor logits = m.LocalLogits(SplitFeatures(features, m.k()).first);
  r.report.t_extract = t_extract;
  r.report.t_local =
      options_.simulated ? options_.cost.Device(m.LocalFlops()) : Seconds(start);
  r.logits.assign(logits.data().begin(), logits.data().end());
  r.label = ArgMax(logits)[0];
  r.report.Finalize();
  return r;
}

ClientResult OffloadClient::Infer(const Tensor& x, std::uint32_t sample_id,
                                  OffloadMode mode) {
  const SplitModel& m = *model_;
  const ExtractorConfig& ec = m.config().extractor;
  if (x.shape() != Shape{1, ec.input_h, ec.input_w, ec.input_c}) {
    throw ShapeError("offload input must be " +
                     ShapeToString({1, ec.input_h, ec.input_w, ec.input_c}) +
                     ", got " + ShapeToString(x.shape()));
  }
  const CostModel& cost = options_.cost;
  const bool sim = options_.simulated;

  if (mode == OffloadMode::kEdgeOnly) {
    ClientResult r;
    auto start = Clock::now();
    const FeaturePacket packet = BuildPacket(x, sample_id, mode);
    const std::vector<std::uint8_t> bytes = packet.Serialize();
    r.report.t_compress = sim ? cost.Compress(x.size()) : Seconds(start);
    r.report.payload_bytes = bytes.size();
    r.report.t_tx = SimulateLink(bytes.size(), options_.link);
    std::optional<LogitsReply> reply;
    if (transport_ != nullptr) {
      start = Clock::now();
      try {
        reply = LogitsReply::Parse(transport_->Exchange(bytes, options_.timeout));
      } catch (const TransportError&) {
      } catch (const FormatError&) {
      }
    }
    if (!reply) {
      // Remote unavailable: the device runs extractor + local head instead.
      const auto s = Clock::now();
      const Tensor features = Mapped(m, m.extractor().Forward(x.Detach()));
      ClientResult f =
          LocalOnly(features, sim ? cost.Device(m.ExtractorFlops()) : Seconds(s));
      f.report.t_compress = r.report.t_compress;
      f.report.payload_bytes = r.report.payload_bytes;
      f.report.t_tx = sim ? options_.timeout.count() / 1000.0 : Seconds(start);
      f.report.fallback = true;
      f.report.Finalize();
      return f;
    }
    const double wall = Seconds(start);
    if (reply->sample_id != sample_id) {
      throw TransportError("reply sample_id " + std::to_string(reply->sample_id) +
                           " does not match request " + std::to_string(sample_id));
    }
    r.report.t_remote =
        sim ? cost.Server(m.ExtractorFlops() + m.LocalFlops() + m.RemoteFlops())
            : wall;
    r.logits.assign(reply->logits.begin(), reply->logits.end());
    r.label = ArgMax(Tensor::FromData({1, static_cast<int>(r.logits.size())},
                                      r.logits))[0];
    r.report.Finalize();
    return r;
  }

  auto start = Clock::now();
  const Tensor features = Mapped(m, m.extractor().Forward(x.Detach()));
  const double t_extract = sim ? cost.Device(m.ExtractorFlops()) : Seconds(start);
  if (mode == OffloadMode::kLocalOnly) return LocalOnly(features, t_extract);

  // Partitioned.
  auto [top, rest] = SplitFeatures(features, m.k());
  start = Clock::now();
  const Quantizer& q = m.quantizer();
  FeaturePacket packet;
  packet.sample_id = sample_id;
  packet.quantizer_id = kFeatureQuantizer;
  packet.block = EncodeBlock(q.Quantize(rest.data()),
                             static_cast<std::uint8_t>(q.bits_per_symbol())).bytes;
  const std::vector<std::uint8_t> bytes = packet.Serialize();
  const double t_compress = sim ? cost.Compress(rest.size()) : Seconds(start);

  // The local head runs while the request is in flight.
  auto local = std::async(std::launch::async, [&] {
    const auto s = Clock::now();
    Tensor l = m.LocalLogits(top);
    return std::make_pair(l, Seconds(s));
  });
  std::optional<LogitsReply> reply;
  double wall = 0.0;
  std::optional<TransportError> failure;
  if (transport_ == nullptr) {
    failure = TransportError("no transport");
  } else {
    start = Clock::now();
    try {
      reply = LogitsReply::Parse(transport_->Exchange(bytes, options_.timeout));
    } catch (const TransportError& e) {
      failure = e;
    } catch (const FormatError& e) {
      failure = TransportError(e.what());
    }
    wall = Seconds(start);
  }
  auto [local_logits, local_wall] = local.get();

  ClientResult r;
  r.report.t_extract = t_extract;
  r.report.t_compress = t_compress;
  r.report.payload_bytes = bytes.size();
  r.report.t_local = sim ? cost.Device(m.LocalFlops()) : local_wall;
  if (failure) {
    // Remote unavailable: fall back to the local head alone.
    r.report.fallback = true;
    r.report.t_tx = sim ? options_.timeout.count() / 1000.0 : wall;
    r.logits.assign(local_logits.data().begin(), local_logits.data().end());
    r.label = ArgMax(local_logits)[0];
    r.report.Finalize();
    return r;
  }
  if (reply->sample_id != sample_id) {
    throw TransportError("reply sample_id " + std::to_string(reply->sample_id) +
                         " does not match request " + std::to_string(sample_id));
  }
  if (reply->logits.size() != static_cast<std::size_t>(m.classes())) {
    throw TransportError("reply has " + std::to_string(reply->logits.size()) +
                         " logits, expected " + std::to_string(m.classes()));
  }
  r.report.t_tx = SimulateLink(bytes.size(), options_.link);
  r.report.t_remote = sim ? cost.Server(m.RemoteFlops()) : wall;
  start = Clock::now();
  Tensor remote = Tensor::FromData(
      {1, m.classes()}, std::vector<double>(reply->logits.begin(), reply->logits.end()));
  Tensor combined = Combine(local_logits, remote, m.combiner().alpha());
  r.report.t_combine = sim ? cost.Device(3.0 * m.classes()) : Seconds(start);
  r.logits.assign(combined.data().begin(), combined.data().end());
  r.label = ArgMax(combined)[0];
  r.report.Finalize();
  return r;
}

OffloadSummary RunOffload(OffloadClient& client, const Dataset& data,
                          OffloadMode mode) {
  data.Validate();
  OffloadSummary s;
  s.mode = ModeName(mode);
  s.samples = data.size();
  int correct = 0;
  std::vector<double> totals;
  for (int i = 0; i < data.size(); ++i) {
    const std::vector<std::size_t> idx{static_cast<std::size_t>(i)};
    auto [x, y] = data.Batch(idx);
    ClientResult r = client.Infer(x, static_cast<std::uint32_t>(i), mode);
    correct += r.label == y[0];
    s.fallbacks += r.report.fallback;
    s.mean_total += r.report.t_total;
    s.mean_tx += r.report.t_tx;
    s.mean_payload_bytes += static_cast<double>(r.report.payload_bytes);
    totals.push_back(r.report.t_total);
    s.predictions.push_back(r.label);
    s.reports.push_back(r.report);
  }
  const double n = std::max(1, data.size());
  s.accuracy = correct / n;
  s.mean_total /= n;
  s.mean_tx /= n;
  s.mean_payload_bytes /= n;
  if (!totals.empty()) {
    std::sort(totals.begin(), totals.end());
    const std::size_t at = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(totals.size()))) - 1;
    s.p95_total = totals[std::min(at, totals.size() - 1)];
  }
  return s;
}

}  // namespace skewsplit
