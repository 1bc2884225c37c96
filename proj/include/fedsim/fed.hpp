#pragma once

// Synchronous federated training: a server owns the global shape/material
// generators, each site owns its private dataset, per-sample codes, and a
// local enhancer. One round = broadcast parameters -> every client runs one
// supervised step on its next labeled sample and reports the generator
// gradients -> the server applies the sample-weighted mean through one
// optimizer step. Enhancer and code updates never leave the site. The wire
// carries length-prefixed frames over an in-process queue pair or a TCP
// socket; both transports move identical bytes, so a run's trajectory does
// not depend on the transport.

#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "fedsim/container.hpp"
#include "fedsim/glo.hpp"

namespace fedsim::fed {

// -- wire format ----------------------------------------------------------------

// Frame layout (little-endian):
//   "FSFL"  u8 msg type  u64 round  u32 payload length  payload
// The payload is a serialized array container: broadcasts carry "theta_s" and
// "theta_m" (flat parameter vectors in store order), reports carry "grad_s",
// "grad_m", "site_id", and "sample_count", shutdown frames are empty.
enum class MsgType : uint8_t { broadcast = 1, report = 2, shutdown = 3 };

struct Frame {
  MsgType type = MsgType::shutdown;
  uint64_t round = 0;
  Container payload;
};

std::vector<uint8_t> encode_frame(const Frame& f);
Frame decode_frame(const std::vector<uint8_t>& bytes);
// Names of the payload arrays, for traffic audits.
std::vector<std::string> frame_array_names(const std::vector<uint8_t>& bytes);

// -- participants -----------------------------------------------------------------

struct SiteSpec {
  int site_id = 0;
  uint64_t seed = 1;      // local state init + slice draws
  glo::GloDataset data;   // private; never serialized
};

struct FedConfig {
  glo::GloConfig glo;
  int rounds = 0;
  bool server_sgd = false;   // plain descent at the server instead of Adam
  double timeout_sec = 30.0; // per-message wait before a protocol error
};

struct SiteState {
  SiteSpec spec;
  glo::TrainState local;          // enhancer + codes stay here
  std::vector<int> labeled_idx;   // step order over the local labeled samples
  int cursor = 0;                 // next entry in labeled_idx, wraps
  uint64_t round = 0;             // next broadcast round this site accepts
};
SiteState make_site(const FedConfig& cfg, const ssm::ShapeModel& model, const SiteSpec& spec);

struct ServerState {
  FedConfig cfg;
  std::vector<int> site_ids;       // registered sites, ascending
  nets::ShapeNet shape_net;        // global parameters; optimizer moments
  nets::MaterialNet material_net;  // live inside the stores
  uint64_t round = 0;
};
// Global parameters start exactly like a fresh single-site trainer with the
// same config seed, so a one-site federation reproduces it bit for bit.
ServerState make_server(const FedConfig& cfg, const ssm::ShapeModel& model,
                        std::vector<int> site_ids);

// -- protocol steps ---------------------------------------------------------------

Frame make_broadcast(const ServerState& server);

// Validates the broadcast round, loads the global parameters, runs one
// supervised step on the next local labeled sample, and returns the gradient
// report. The sample's code and the enhancer update locally and are absent
// from the report.
Frame client_round(SiteState& site, const Frame& broadcast);

// Requires exactly one report per registered site, all for the current
// round. Aggregates the sample-count-weighted gradient mean in ascending
// site order and applies one server step, then advances the round.
void server_round(ServerState& server, const std::vector<Frame>& reports);

// -- transports -------------------------------------------------------------------

enum class Transport { inproc, tcp };

// One direction of an in-process channel. pop blocks until a frame, the
// timeout (protocol error), or close (protocol error once drained).
class FrameQueue {
 public:
  void push(std::vector<uint8_t> frame);
  std::vector<uint8_t> pop(double timeout_sec);
  void close();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::vector<uint8_t>> q_;
  bool closed_ = false;
};

// Minimal blocking TCP plumbing (numeric IPv4 only). Frames are delimited by
// the header's payload length; receives poll with a timeout so a silent peer
// surfaces as a protocol error instead of a hang.
class TcpListener {
 public:
  explicit TcpListener(const std::string& listen);  // "host:port", port 0 picks one
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  const std::string& address() const { return addr_; }  // resolved host:port
  int accept_fd(double timeout_sec);
  void close();

 private:
  int fd_ = -1;
  std::string addr_;
};

int tcp_connect(const std::string& address);
void send_frame_fd(int fd, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> recv_frame_fd(int fd, double timeout_sec);
void close_fd(int fd);

// -- driver -----------------------------------------------------------------------

// Called with every frame the server sends or receives, in server order.
using FrameObserver = std::function<void(const std::vector<uint8_t>&)>;

struct FedResult {
  std::vector<double> theta_s, theta_m;  // final global parameters, flat
  std::vector<SiteState> sites;          // local states, final globals loaded
  uint64_t rounds = 0;
};

// Runs the synchronous loop for cfg.rounds rounds: the server works in the
// calling thread, one client thread per site. rounds == 0 hands back the
// initial parameters. Any site or server failure tears the run down and
// rethrows; there is no fault tolerance by design.
FedResult run_federation(const FedConfig& cfg, const ssm::ShapeModel& model,
                         const std::vector<SiteSpec>& sites, Transport transport,
                         const std::string& listen = "127.0.0.1:0",
                         const FrameObserver& observer = nullptr);

// -- reporting utilities ------------------------------------------------------------

// Same code rendered through two sites' states: shared generators give the
// same geometry, the local enhancers give each site its own appearance.
struct CrossRender {
  glo::Generated a, b;
};
CrossRender cross_site_render(glo::TrainState& a, glo::TrainState& b, const Tensor& z);

}  // namespace fedsim::fed
