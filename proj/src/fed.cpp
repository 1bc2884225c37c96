#include "fedsim/fed.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <exception>
#include <memory>
#include <thread>
#include <utility>

namespace fedsim::fed {
namespace {

constexpr char kMagic[4] = {'F', 'S', 'F', 'L'};
constexpr size_t kHeaderSize = 4 + 1 + 8 + 4;
constexpr uint32_t kMaxPayload = 1u << 30;

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0, uint64_t d = 0) {
  return splitmix(splitmix(splitmix(splitmix(a) ^ b) ^ c) ^ d);
}

void sgd_step(ParamStore& ps, const std::vector<double>& g, double lr) {
  size_t off = 0;
  for (auto& [name, t] : ps.items()) {
    double* p = t.data();
    for (int64_t j = 0; j < t.size(); ++j) p[j] -= lr * g[off + size_t(j)];
    off += size_t(t.size());
  }
}

int poll_ms(double sec) {
  double ms = sec * 1000.0;
  if (ms < 0.0) ms = 0.0;
  if (ms > 2147483000.0) ms = 2147483000.0;
  return int(ms + 0.5);
}

// Waits for readability; timeout or failure becomes a protocol error.
void poll_in(int fd, double timeout_sec, const char* what) {
  pollfd p{};
  p.fd = fd;
  p.events = POLLIN;
  for (;;) {
    const int r = ::poll(&p, 1, poll_ms(timeout_sec));
    if (r > 0) return;
    if (r == 0) fail(ErrorCode::protocol, std::string(what) + ": timeout");
    if (errno != EINTR) fail(ErrorCode::protocol, std::string(what) + ": " + std::strerror(errno));
  }
}

void recv_exact(int fd, uint8_t* dst, size_t n, double timeout_sec) {
  size_t off = 0;
  while (off < n) {
    poll_in(fd, timeout_sec, "recv");
    const ssize_t r = ::recv(fd, dst + off, n - off, 0);
    if (r == 0) fail(ErrorCode::protocol, "recv: connection closed");
    if (r < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::protocol, std::string("recv: ") + std::strerror(errno));
    }
    off += size_t(r);
  }
}

sockaddr_in parse_address(const std::string& s) {
  const size_t colon = s.rfind(':');
  require(colon != std::string::npos && colon > 0 && colon + 1 < s.size(), ErrorCode::config,
          "address must be host:port, got '" + s + "'");
  const std::string host = s.substr(0, colon);
  int port = 0;
  for (size_t i = colon + 1; i < s.size(); ++i) {
    require(s[i] >= '0' && s[i] <= '9', ErrorCode::config, "bad port in '" + s + "'");
    port = port * 10 + (s[i] - '0');
    require(port <= 65535, ErrorCode::config, "port out of range in '" + s + "'");
  }
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(uint16_t(port));
  require(::inet_pton(AF_INET, host.c_str(), &a.sin_addr) == 1, ErrorCode::config,
          "host must be a numeric IPv4 address, got '" + host + "'");
  return a;
}

std::string address_string(const sockaddr_in& a) {
  char buf[INET_ADDRSTRLEN] = {};
  ::inet_ntop(AF_INET, &a.sin_addr, buf, sizeof buf);
  return std::string(buf) + ":" + std::to_string(ntohs(a.sin_port));
}

}  // namespace

// -- wire format ----------------------------------------------------------------

std::vector<uint8_t> encode_frame(const Frame& f) {
  std::vector<uint8_t> out;
  put_bytes(out, kMagic, 4);
  out.push_back(uint8_t(f.type));
  put_le<uint64_t>(out, f.round);
  const std::vector<uint8_t> payload = f.payload.serialize();
  require(payload.size() < kMaxPayload, ErrorCode::protocol, "frame: payload too large");
  put_le<uint32_t>(out, uint32_t(payload.size()));
  put_bytes(out, payload.data(), payload.size());
  return out;
}

Frame decode_frame(const std::vector<uint8_t>& bytes) {
  require(bytes.size() >= kHeaderSize, ErrorCode::protocol, "frame: truncated header");
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorCode::protocol, "frame: bad magic");
  ByteReader r(bytes.data() + 4, bytes.size() - 4);
  const uint8_t t = r.get_le<uint8_t>();
  require(t >= 1 && t <= 3, ErrorCode::protocol,
          "frame: unknown message type " + std::to_string(int(t)));
  Frame f;
  f.type = MsgType(t);
  f.round = r.get_le<uint64_t>();
  const uint32_t len = r.get_le<uint32_t>();
  require(size_t(len) == r.remaining(), ErrorCode::protocol, "frame: payload length mismatch");
  try {
    f.payload = Container::deserialize(bytes.data() + kHeaderSize, len);
  } catch (const Error& e) {
    fail(ErrorCode::protocol, std::string("frame: bad payload: ") + e.what());
  }
  return f;
}

std::vector<std::string> frame_array_names(const std::vector<uint8_t>& bytes) {
  const Frame f = decode_frame(bytes);
  std::vector<std::string> names;
  names.reserve(f.payload.size());
  for (const auto& [name, t] : f.payload.arrays()) names.push_back(name);
  return names;
}

// -- participants -----------------------------------------------------------------

SiteState make_site(const FedConfig& cfg, const ssm::ShapeModel& model, const SiteSpec& spec) {
  SiteState st;
  st.spec = spec;
  glo::GloConfig local = cfg.glo;
  local.seed = spec.seed;
  st.local = glo::make_train_state(local, model, spec.data.labeled);
  for (size_t i = 0; i < spec.data.labeled.size(); ++i)
    if (spec.data.labeled[i]) st.labeled_idx.push_back(int(i));
  require(!st.labeled_idx.empty(), ErrorCode::config,
          "federation: site " + std::to_string(spec.site_id) + " has no labeled samples");
  return st;
}

ServerState make_server(const FedConfig& cfg, const ssm::ShapeModel& model,
                        std::vector<int> site_ids) {
  require(!site_ids.empty(), ErrorCode::config, "federation: no sites registered");
  std::sort(site_ids.begin(), site_ids.end());
  require(std::adjacent_find(site_ids.begin(), site_ids.end()) == site_ids.end(),
          ErrorCode::config, "federation: duplicate site id");
  require(cfg.rounds >= 0, ErrorCode::config, "federation: rounds must be >= 0");
  require(cfg.timeout_sec > 0.0, ErrorCode::config, "federation: timeout must be positive");
  ServerState sv;
  sv.cfg = cfg;
  sv.site_ids = std::move(site_ids);
  glo::TrainState init = glo::make_train_state(cfg.glo, model, {1});
  sv.shape_net = std::move(init.shape_net);
  sv.material_net = std::move(init.material_net);
  return sv;
}

// -- protocol steps ---------------------------------------------------------------

Frame make_broadcast(const ServerState& server) {
  Frame f;
  f.type = MsgType::broadcast;
  f.round = server.round;
  f.payload.put_vector("theta_s", server.shape_net.params.flat_values());
  f.payload.put_vector("theta_m", server.material_net.params.flat_values());
  return f;
}

Frame client_round(SiteState& site, const Frame& broadcast) {
  require(broadcast.type == MsgType::broadcast, ErrorCode::protocol,
          "client: expected a broadcast");
  require(broadcast.round == site.round, ErrorCode::protocol,
          "client: broadcast for round " + std::to_string(broadcast.round) + ", expected " +
              std::to_string(site.round));
  require(broadcast.payload.has("theta_s") && broadcast.payload.has("theta_m"),
          ErrorCode::protocol, "client: broadcast missing parameter arrays");

  glo::TrainState& st = site.local;
  st.shape_net.params.set_flat_values(broadcast.payload.get_vector("theta_s"));
  st.material_net.params.set_flat_values(broadcast.payload.get_vector("theta_m"));

  const int i = site.labeled_idx[size_t(site.cursor)];
  site.cursor = (site.cursor + 1) % int(site.labeled_idx.size());
  const glo::TrainSample& s = site.spec.data.samples[size_t(i)];

  st.shape_net.params.zero_grads();
  st.material_net.params.zero_grads();
  st.latents[size_t(i)].zero_grad();
  glo::accumulate_labeled_grads(st, i, s);

  Frame report;
  report.type = MsgType::report;
  report.round = broadcast.round;
  report.payload.put_vector("grad_s", st.shape_net.params.flat_grads());
  report.payload.put_vector("grad_m", st.material_net.params.flat_grads());
  report.payload.put_scalar("site_id", double(site.spec.site_id));
  report.payload.put_scalar("sample_count", 1.0);

  // Local-only updates: the sample's code, then the enhancer on this round's
  // slice draw. Neither influences the reported generator gradients.
  glo::apply_latent_update(st, i, st.cfg.lr);
  const uint64_t slice_seed =
      mix_seed(site.spec.seed, 0x66656473ull, broadcast.round, uint64_t(site.spec.site_id));
  const int slice_k = int(Rng(slice_seed).below(uint64_t(st.cfg.slice_res)));
  glo::pretrain_enhancer_step(st, i, s, slice_k);

  site.round += 1;
  return report;
}

void server_round(ServerState& server, const std::vector<Frame>& reports) {
  const size_t n = server.site_ids.size();
  require(reports.size() == n, ErrorCode::protocol,
          "server: got " + std::to_string(reports.size()) + " reports for " + std::to_string(n) +
              " sites");

  // Exactly one report per registered site, all for the current round.
  std::vector<const Frame*> by_site(n, nullptr);
  for (const Frame& f : reports) {
    require(f.type == MsgType::report, ErrorCode::protocol, "server: expected gradient reports");
    require(f.round == server.round, ErrorCode::protocol,
            f.round < server.round
                ? "server: stale report for round " + std::to_string(f.round)
                : "server: report for future round " + std::to_string(f.round));
    require(f.payload.has("grad_s") && f.payload.has("grad_m") && f.payload.has("site_id") &&
                f.payload.has("sample_count"),
            ErrorCode::protocol, "server: report missing arrays");
    const double sid_raw = f.payload.get_scalar("site_id");
    const int sid = int(sid_raw);
    require(double(sid) == sid_raw, ErrorCode::protocol, "server: bad site id");
    const auto it = std::lower_bound(server.site_ids.begin(), server.site_ids.end(), sid);
    require(it != server.site_ids.end() && *it == sid, ErrorCode::protocol,
            "server: report from unregistered site " + std::to_string(sid));
    const size_t slot = size_t(it - server.site_ids.begin());
    require(by_site[slot] == nullptr, ErrorCode::protocol,
            "server: duplicate report from site " + std::to_string(sid));
    by_site[slot] = &f;
  }
  for (size_t k = 0; k < n; ++k)
    require(by_site[k] != nullptr, ErrorCode::protocol,
            "server: missing report from site " + std::to_string(server.site_ids[k]));

  // Sample-count-weighted mean, accumulated in ascending site order so the
  // result does not depend on arrival order.
  const int64_t ns = server.shape_net.params.total_elements();
  const int64_t nm = server.material_net.params.total_elements();
  std::vector<double> mean_s(size_t(ns), 0.0), mean_m(size_t(nm), 0.0);
  double total = 0.0;
  for (size_t k = 0; k < n; ++k) {
    const Container& c = by_site[k]->payload;
    const std::vector<double> gs = c.get_vector("grad_s");
    const std::vector<double> gm = c.get_vector("grad_m");
    require(int64_t(gs.size()) == ns && int64_t(gm.size()) == nm, ErrorCode::protocol,
            "server: gradient size mismatch from site " + std::to_string(server.site_ids[k]));
    const double w = c.get_scalar("sample_count");
    require(w >= 1.0, ErrorCode::protocol, "server: sample count must be >= 1");
    for (size_t j = 0; j < gs.size(); ++j) mean_s[j] += w * gs[j];
    for (size_t j = 0; j < gm.size(); ++j) mean_m[j] += w * gm[j];
    total += w;
  }
  for (double& v : mean_s) v /= total;
  for (double& v : mean_m) v /= total;

  const double lr = server.cfg.glo.lr;
  if (server.cfg.server_sgd) {
    sgd_step(server.shape_net.params, mean_s, lr);
    sgd_step(server.material_net.params, mean_m, lr);
  } else {
    server.shape_net.params.adam_step_all_from(mean_s, lr);
    server.material_net.params.adam_step_all_from(mean_m, lr);
  }
  server.round += 1;
}

// -- transports -------------------------------------------------------------------

void FrameQueue::push(std::vector<uint8_t> frame) {
  {
    std::lock_guard<std::mutex> lk(mu_);
    if (closed_) return;  // receiver is gone; drop
    q_.push_back(std::move(frame));
  }
  cv_.notify_one();
}

std::vector<uint8_t> FrameQueue::pop(double timeout_sec) {
  std::unique_lock<std::mutex> lk(mu_);
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_sec);
  for (;;) {
    if (!q_.empty()) {
      std::vector<uint8_t> f = std::move(q_.front());
      q_.pop_front();
      return f;
    }
    require(!closed_, ErrorCode::protocol, "recv: channel closed");
    if (cv_.wait_until(lk, deadline) == std::cv_status::timeout && q_.empty() && !closed_)
      fail(ErrorCode::protocol, "recv: timeout");
  }
}

void FrameQueue::close() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

TcpListener::TcpListener(const std::string& listen) {
  const sockaddr_in addr = parse_address(listen);
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  require(fd_ >= 0, ErrorCode::protocol, std::string("socket: ") + std::strerror(errno));
  const int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(fd_, 16) != 0) {
    const int e = errno;
    close();
    fail(ErrorCode::protocol, "bind " + listen + ": " + std::strerror(e));
  }
  sockaddr_in actual{};
  socklen_t len = sizeof actual;
  if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&actual), &len) != 0) {
    const int e = errno;
    close();
    fail(ErrorCode::protocol, std::string("getsockname: ") + std::strerror(e));
  }
  addr_ = address_string(actual);
}

TcpListener::~TcpListener() { close(); }

void TcpListener::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

int TcpListener::accept_fd(double timeout_sec) {
  require(fd_ >= 0, ErrorCode::protocol, "accept: listener closed");
  poll_in(fd_, timeout_sec, "accept");
  const int c = ::accept(fd_, nullptr, nullptr);
  require(c >= 0, ErrorCode::protocol, std::string("accept: ") + std::strerror(errno));
  return c;
}

int tcp_connect(const std::string& address) {
  const sockaddr_in addr = parse_address(address);
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  require(fd >= 0, ErrorCode::protocol, std::string("socket: ") + std::strerror(errno));
  if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
    const int e = errno;
    ::close(fd);
    fail(ErrorCode::protocol, "connect " + address + ": " + std::strerror(e));
  }
  return fd;
}

void send_frame_fd(int fd, const std::vector<uint8_t>& bytes) {
  size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t r = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) continue;
      fail(ErrorCode::protocol, std::string("send: ") + std::strerror(errno));
    }
    off += size_t(r);
  }
}

std::vector<uint8_t> recv_frame_fd(int fd, double timeout_sec) {
  std::vector<uint8_t> bytes(kHeaderSize);
  recv_exact(fd, bytes.data(), kHeaderSize, timeout_sec);
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorCode::protocol, "frame: bad magic");
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= uint32_t(bytes[13 + size_t(i)]) << (8 * i);
  require(len < kMaxPayload, ErrorCode::protocol, "frame: oversized payload");
  bytes.resize(kHeaderSize + len);
  recv_exact(fd, bytes.data() + kHeaderSize, len, timeout_sec);
  return bytes;
}

void close_fd(int fd) {
  if (fd >= 0) ::close(fd);
}

// -- driver -----------------------------------------------------------------------

FedResult run_federation(const FedConfig& cfg, const ssm::ShapeModel& model,
                         const std::vector<SiteSpec>& sites, Transport transport,
                         const std::string& listen, const FrameObserver& observer) {
  require(!sites.empty(), ErrorCode::config, "federation: need at least one site");
  std::vector<int> ids;
  ids.reserve(sites.size());
  for (const SiteSpec& s : sites) ids.push_back(s.site_id);
  ServerState server = make_server(cfg, model, ids);

  std::vector<SiteState> states;
  states.reserve(sites.size());
  for (const SiteSpec& s : sites) states.push_back(make_site(cfg, model, s));

  const size_t n = sites.size();
  const double timeout = cfg.timeout_sec;

  // Per-site duplex channel, server's view. shut unblocks both directions.
  struct Channel {
    std::function<void(const std::vector<uint8_t>&)> send;
    std::function<std::vector<uint8_t>()> recv;
    std::function<void()> shut;
  };
  std::vector<Channel> chans(n);
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> client_err(n);
  std::exception_ptr server_err;

  // One protocol loop per client: answer broadcasts until shutdown. On
  // failure the client records its error and drops its channel so the server
  // unblocks at its next receive.
  auto client_loop = [&states, &client_err](size_t k,
                                            const std::function<std::vector<uint8_t>()>& recv,
                                            const std::function<void(const std::vector<uint8_t>&)>& send,
                                            const std::function<void()>& drop) {
    try {
      for (;;) {
        const Frame f = decode_frame(recv());
        if (f.type == MsgType::shutdown) {
          require(f.round == states[k].round, ErrorCode::protocol,
                  "client: shutdown round mismatch");
          return;
        }
        send(encode_frame(client_round(states[k], f)));
      }
    } catch (...) {
      client_err[k] = std::current_exception();
      drop();
    }
  };

  std::unique_ptr<TcpListener> listener;
  try {
    if (transport == Transport::inproc) {
      for (size_t k = 0; k < n; ++k) {
        auto to_client = std::make_shared<FrameQueue>();
        auto to_server = std::make_shared<FrameQueue>();
        chans[k].send = [to_client](const std::vector<uint8_t>& b) { to_client->push(b); };
        chans[k].recv = [to_server, timeout]() { return to_server->pop(timeout); };
        chans[k].shut = [to_client, to_server]() {
          to_client->close();
          to_server->close();
        };
        threads.emplace_back(client_loop, k,
                             [to_client, timeout]() { return to_client->pop(timeout); },
                             [to_server](const std::vector<uint8_t>& b) { to_server->push(b); },
                             [to_server]() { to_server->close(); });
      }
    } else {
      listener = std::make_unique<TcpListener>(listen);
      const std::string addr = listener->address();
      for (size_t k = 0; k < n; ++k) {
        threads.emplace_back([&client_loop, k, addr, timeout]() {
          int fd = -1;
          client_loop(
              k,
              [&fd, addr, timeout]() {
                if (fd < 0) fd = tcp_connect(addr);
                return recv_frame_fd(fd, timeout);
              },
              [&fd](const std::vector<uint8_t>& b) { send_frame_fd(fd, b); },
              [&fd]() {
                close_fd(fd);
                fd = -1;
              });
          close_fd(fd);
        });
      }
      // Accepted order need not match site order; reports self-identify.
      struct FdHolder {
        int fd = -1;
        ~FdHolder() { close_fd(fd); }
      };
      for (size_t k = 0; k < n; ++k) {
        auto holder = std::make_shared<FdHolder>();
        holder->fd = listener->accept_fd(timeout);
        chans[k].send = [holder](const std::vector<uint8_t>& b) { send_frame_fd(holder->fd, b); };
        chans[k].recv = [holder, timeout]() { return recv_frame_fd(holder->fd, timeout); };
        chans[k].shut = [holder]() {
          close_fd(holder->fd);
          holder->fd = -1;
        };
      }
    }
  } catch (...) {
    server_err = std::current_exception();
  }

  if (!server_err) {
    try {
      auto observe = [&observer](const std::vector<uint8_t>& b) {
        if (observer) observer(b);
      };
      for (int r = 0; r < cfg.rounds; ++r) {
        const std::vector<uint8_t> bc = encode_frame(make_broadcast(server));
        for (Channel& ch : chans) {
          observe(bc);
          ch.send(bc);
        }
        std::vector<Frame> reports;
        reports.reserve(n);
        for (Channel& ch : chans) {
          const std::vector<uint8_t> bytes = ch.recv();
          observe(bytes);
          reports.push_back(decode_frame(bytes));
        }
        server_round(server, reports);
      }
      Frame sd;
      sd.type = MsgType::shutdown;
      sd.round = server.round;
      const std::vector<uint8_t> sb = encode_frame(sd);
      for (Channel& ch : chans) {
        observe(sb);
        ch.send(sb);
      }
    } catch (...) {
      server_err = std::current_exception();
    }
  }

  // Tear down the channels whether or not the loop finished; this unblocks
  // any client still waiting so every thread joins.
  for (Channel& ch : chans)
    if (ch.shut) ch.shut();
  if (listener) listener->close();
  for (std::thread& t : threads) t.join();

  // A failed client is the root cause; server-side errors in that case are
  // usually just the resulting closed channel or timeout.
  for (size_t k = 0; k < n; ++k)
    if (client_err[k]) std::rethrow_exception(client_err[k]);
  if (server_err) std::rethrow_exception(server_err);

  FedResult res;
  res.theta_s = server.shape_net.params.flat_values();
  res.theta_m = server.material_net.params.flat_values();
  for (SiteState& st : states) {
    st.local.shape_net.params.set_flat_values(res.theta_s);
    st.local.material_net.params.set_flat_values(res.theta_m);
  }
  res.sites = std::move(states);
  res.rounds = server.round;
  return res;
}

// -- reporting utilities ------------------------------------------------------------

CrossRender cross_site_render(glo::TrainState& a, glo::TrainState& b, const Tensor& z) {
  CrossRender out;
  out.a = glo::generate_sample(a, z);
  out.b = glo::generate_sample(b, z);
  return out;
}

}  // namespace fedsim::fed
