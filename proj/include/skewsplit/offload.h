#ifndef SKEWSPLIT_OFFLOAD_H_
#define SKEWSPLIT_OFFLOAD_H_

// Online split inference: wire format, transports, server, client and the
// latency model.
//
// Wire format (all integers big-endian). Every message travels in a frame
// [u32 length][length bytes].
//   FeaturePacket: magic "SKSP" | u8 version | u32 sample_id |
//                  u32 payload_len | u8 quantizer_id | payload_len bytes block
//   LogitsReply:   u32 sample_id | u16 class_count | class_count x f32 logits
// quantizer_id 0 carries quantised rest-channel features; kRawInputQuantizer
// carries the raw 8-bit input for edge-only inference.

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "skewsplit/data.h"
#include "skewsplit/nn.h"

namespace skewsplit {

inline constexpr std::array<std::uint8_t, 4> kPacketMagic = {'S', 'K', 'S', 'P'};
inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::uint8_t kFeatureQuantizer = 0;
inline constexpr std::uint8_t kRawInputQuantizer = 255;
inline constexpr std::size_t kPacketHeaderBytes = 14;
inline constexpr std::uint32_t kMaxFrameBytes = 16u << 20;

struct FeaturePacket {
  std::uint8_t version = kProtocolVersion;
  std::uint32_t sample_id = 0;
  std::uint8_t quantizer_id = kFeatureQuantizer;
  std::vector<std::uint8_t> block;  // serialized CompressedBlock

  std::vector<std::uint8_t> Serialize() const;
  // Throws FormatError on bad magic, unknown version or a length mismatch.
  static FeaturePacket Parse(std::span<const std::uint8_t> bytes);
};

struct LogitsReply {
  std::uint32_t sample_id = 0;
  std::vector<float> logits;

  std::vector<std::uint8_t> Serialize() const;
  static LogitsReply Parse(std::span<const std::uint8_t> bytes);
};

// [u32 BE length][payload].
std::vector<std::uint8_t> Frame(std::span<const std::uint8_t> payload);

struct LinkModel {
  double bandwidth_bps = 6e6;
  double rtt_s = 0.0;
  void Validate() const;  // throws ConfigError
};

// 8 * bytes / bandwidth + rtt.
double SimulateLink(std::size_t bytes, const LinkModel& link);

// Compute times derived from operation counts.
struct CostModel {
  double device_flops = 5e8;          // on-device arithmetic throughput
  double server_flops = 5e10;         // server arithmetic throughput
  double compress_bytes_per_s = 4e6;  // on-device quantise + LZW throughput
  void Validate() const;
  double Device(double flops) const { return flops / device_flops; }
  double Server(double flops) const { return flops / server_flops; }
  double Compress(std::size_t bytes) const { return bytes / compress_bytes_per_s; }
};

enum class OffloadMode { kPartitioned, kEdgeOnly, kLocalOnly };
// "partitioned", "edge_only", "local_only". Throws ConfigError.
OffloadMode ParseMode(const std::string& name);
std::string ModeName(OffloadMode mode);

struct LatencyReport {
  double t_extract = 0, t_local = 0, t_compress = 0, t_tx = 0, t_remote = 0,
         t_combine = 0;
  // extract + compress + max(local, tx + remote) + combine.
  double t_total = 0;
  // Sum of all components.
  double t_serial = 0;
  std::size_t payload_bytes = 0;  // serialized packet size
  bool fallback = false;          // remote unavailable, local-only result

  void Finalize();
};

// ---- Server ----------------------------------------------------------------

// Stateless request handler shared by every transport.
class RemoteServer {
 public:
  // The model must outlive the server and stay unmodified.
  explicit RemoteServer(const SplitModel& model);

  // Reply bytes, or nullopt when the packet is dropped (counted and logged).
  std::optional<std::vector<std::uint8_t>> Handle(
      std::span<const std::uint8_t> request);

  std::uint64_t served() const { return served_.load(); }
  std::uint64_t dropped() const { return dropped_.load(); }
  void set_log(std::function<void(const std::string&)> log) { log_ = std::move(log); }

 private:
  std::vector<double> Compute(const FeaturePacket& packet) const;

  const SplitModel* model_;
  std::atomic<std::uint64_t> served_{0};
  std::atomic<std::uint64_t> dropped_{0};
  std::function<void(const std::string&)> log_;
};

// ---- Transports ------------------------------------------------------------

class Transport {
 public:
  virtual ~Transport() = default;
  // Sends one request and waits for its reply. Throws TransportError on
  // failure or timeout.
  virtual std::vector<std::uint8_t> Exchange(std::span<const std::uint8_t> request,
                                             std::chrono::milliseconds timeout) = 0;
};

// Calls the server in-process.
class LoopbackTransport : public Transport {
 public:
  explicit LoopbackTransport(RemoteServer* server) : server_(server) {}
  std::vector<std::uint8_t> Exchange(std::span<const std::uint8_t> request,
                                     std::chrono::milliseconds timeout) override;
  // Simulates a dead link.
  void set_down(bool down) { down_ = down; }

 private:
  RemoteServer* server_;
  bool down_ = false;
};

// One TCP connection carrying framed messages.
class TcpTransport : public Transport {
 public:
  // Throws TransportError if the connection fails.
  TcpTransport(const std::string& host, int port);
  ~TcpTransport() override;
  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;
  std::vector<std::uint8_t> Exchange(std::span<const std::uint8_t> request,
                                     std::chrono::milliseconds timeout) override;

 private:
  int fd_ = -1;
};

// Accepts connections and serves each on its own thread.
class TcpServer {
 public:
  // port 0 picks a free port. Throws TransportError.
  TcpServer(RemoteServer* handler, const std::string& host, int port);
  ~TcpServer();
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  int port() const { return port_; }
  // Starts the accept loop on a background thread.
  void Start();
  // Blocks in the accept loop until Stop() is called from elsewhere.
  void Serve();
  void Stop();

 private:
  void ServeConnection(int fd);

  RemoteServer* handler_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex mu_;
  std::vector<int> conn_fds_;
  std::vector<std::thread> conn_threads_;
};

// Splits "host:port". Throws ConfigError.
std::pair<std::string, int> ParseAddress(const std::string& address);

// ---- Client ----------------------------------------------------------------

struct ClientOptions {
  LinkModel link;
  CostModel cost;
  std::chrono::milliseconds timeout{500};
  // Compute times from the cost model; otherwise measured wall-clock.
  bool simulated = true;
};

struct ClientResult {
  int label = -1;
  std::vector<double> logits;
  LatencyReport report;
};

class OffloadClient {
 public:
  // transport may be null for local-only use.
  OffloadClient(const SplitModel& model, Transport* transport,
                ClientOptions options);

  // x: one sample [1, H, W, Cin]. Throws TransportError on a reply whose
  // sample_id does not match; other transport failures fall back to the
  // local head and set report.fallback.
  ClientResult Infer(const Tensor& x, std::uint32_t sample_id, OffloadMode mode);

  // Packet the client would send for x in partitioned or edge-only mode.
  FeaturePacket BuildPacket(const Tensor& x, std::uint32_t sample_id,
                            OffloadMode mode) const;

 private:
  ClientResult LocalOnly(const Tensor& features, double t_extract);

  const SplitModel* model_;
  Transport* transport_;
  ClientOptions options_;
};

struct OffloadSummary {
  std::string mode;
  int samples = 0;
  double accuracy = 0.0;
  double mean_total = 0.0;
  double p95_total = 0.0;
  double mean_tx = 0.0;
  double mean_payload_bytes = 0.0;
  int fallbacks = 0;
  std::vector<LatencyReport> reports;
  std::vector<int> predictions;
};

// Runs every sample of `data` through the client in `mode`.
OffloadSummary RunOffload(OffloadClient& client, const Dataset& data,
                          OffloadMode mode);

}  // namespace skewsplit

#endif  // SKEWSPLIT_OFFLOAD_H_
