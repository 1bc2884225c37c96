// Federated harness: wire-frame codec, queue and socket transports, protocol
// validation, bitwise single-site degeneration, the centralized-equivalence
// trajectory oracle, transport equivalence, the wire privacy surface, and
// cross-site rendering.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <thread>

#include "fedsim/fed.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

// Three small "hospitals" at 16^3, six samples each (two labeled), plus one
// global shape model built from all eighteen surfaces.
struct FedCorpus {
  ssm::ShapeModel model;
  std::array<glo::GloDataset, 3> site_data;
};

// Site families: shared geometry statistics (the preset that stays resolvable
// at 2 mm voxels) under per-site attenuation profiles and offsets.
data::PhantomFamily site_family(int s) {
  data::PhantomFamily f = data::family_preset("siteA");
  f.name = std::string("fed") + char('A' + s);
  if (s == 1) {
    f.mu_mean = {0.018, 0.030, 0.010, 0.033};
    f.mu_offset = 0.004;
  } else if (s == 2) {
    f.mu_mean = {0.024, 0.028, 0.015, 0.022};
    f.mu_sigma = {0.003, 0.002, 0.002, 0.002};
    f.mu_offset = -0.003;
  }
  return f;
}

const FedCorpus& corpus() {
  static FedCorpus c = [] {
    FedCorpus cc;
    const ssm::SurfaceTemplate topo = ssm::make_template(4, 10, 24);
    std::vector<std::vector<double>> shapes;
    for (int s = 0; s < 3; ++s) {
      const std::string dir =
          (std::filesystem::temp_directory_path() / ("fedsim_fed_corpus_" + std::to_string(s)))
              .string();
      std::filesystem::remove_all(dir);
      data::Manifest man = data::generate_family(site_family(s), 6, 16, 9000 + uint64_t(s), dir);
      data::split_manifest(man, 6, 0, 0, 2, 70 + uint64_t(s));
      for (const auto& smp : man.samples) {
        Tensor pts = data::load_array(man.path_of(smp.srf_path), "points");
        shapes.emplace_back(pts.data(), pts.data() + pts.size());
      }
      cc.site_data[size_t(s)] = glo::load_glo_dataset(man);
    }
    cc.model = ssm::build_ssm(shapes, topo, 14);
    return cc;
  }();
  return c;
}

fed::FedConfig fed_cfg(int rounds) {
  fed::FedConfig cfg;
  cfg.glo.resolution = 16;
  cfg.glo.slice_res = 16;
  cfg.glo.views = 12;
  cfg.glo.seed = 7;
  cfg.rounds = rounds;
  cfg.timeout_sec = 20.0;
  return cfg;
}

// Deliberately unsorted ids: aggregation order must come from the ids, not
// from spec or arrival order.
std::vector<fed::SiteSpec> site_specs() {
  std::vector<fed::SiteSpec> specs(3);
  specs[0] = {11, 1001, corpus().site_data[0]};
  specs[1] = {5, 1002, corpus().site_data[1]};
  specs[2] = {8, 1003, corpus().site_data[2]};
  return specs;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (size_t j = 0; j < a.size(); ++j) m = std::max(m, std::fabs(a[j] - b[j]));
  return m;
}

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (size_t j = 0; j < a.size(); ++j)
    m = std::max(m, std::fabs(a[j] - b[j]) / std::max(std::fabs(b[j]), 1e-12));
  return m;
}

std::vector<double> latent_values(const glo::TrainState& st, int i) {
  const Tensor& z = st.latents[size_t(i)];
  return std::vector<double>(z.data(), z.data() + z.size());
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::ok;
}

// Elementwise mirror of the library's Adam (same expression order), operating
// on flat vectors so the reference below stays a straight line.
struct FlatAdam {
  std::vector<double> m, v;
  int t = 0;
  void step(std::vector<double>& p, const std::vector<double>& g, double lr) {
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    t += 1;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, double(t));
    const double c2 = 1.0 - std::pow(b2, double(t));
    for (size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mh = m[j] / c1;
      const double vh = v[j] / c2;
      p[j] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

// Centralized reference: one parameter vector, the same per-site sample
// states, per round one gradient per site averaged in ascending site order,
// one optimizer step. No frames, no threads, no server code.
struct CentralRun {
  std::vector<std::vector<double>> traj_s, traj_m;  // index r = params after r rounds
  std::vector<fed::SiteState> sites;                // ascending site id
};

CentralRun central_reference(const fed::FedConfig& cfg, const ssm::ShapeModel& model,
                             std::vector<fed::SiteSpec> specs, int rounds) {
  std::sort(specs.begin(), specs.end(),
            [](const fed::SiteSpec& a, const fed::SiteSpec& b) { return a.site_id < b.site_id; });
  CentralRun out;
  for (const fed::SiteSpec& s : specs) out.sites.push_back(fed::make_site(cfg, model, s));

  glo::TrainState init = glo::make_train_state(cfg.glo, model, {1});
  std::vector<double> ts = init.shape_net.params.flat_values();
  std::vector<double> tm = init.material_net.params.flat_values();
  FlatAdam opt_s, opt_m;
  out.traj_s.push_back(ts);
  out.traj_m.push_back(tm);

  for (int r = 0; r < rounds; ++r) {
    std::vector<double> mean_s(ts.size(), 0.0), mean_m(tm.size(), 0.0);
    double total = 0.0;
    for (fed::SiteState& site : out.sites) {
      glo::TrainState& st = site.local;
      st.shape_net.params.set_flat_values(ts);
      st.material_net.params.set_flat_values(tm);
      const int i = site.labeled_idx[size_t(site.cursor)];
      site.cursor = (site.cursor + 1) % int(site.labeled_idx.size());
      st.shape_net.params.zero_grads();
      st.material_net.params.zero_grads();
      st.latents[size_t(i)].zero_grad();
      glo::accumulate_labeled_grads(st, i, site.spec.data.samples[size_t(i)]);
      const std::vector<double> gs = st.shape_net.params.flat_grads();
      const std::vector<double> gm = st.material_net.params.flat_grads();
      for (size_t j = 0; j < gs.size(); ++j) mean_s[j] += 1.0 * gs[j];
      for (size_t j = 0; j < gm.size(); ++j) mean_m[j] += 1.0 * gm[j];
      total += 1.0;
      glo::apply_latent_update(st, i, cfg.glo.lr);
    }
    for (double& v : mean_s) v /= total;
    for (double& v : mean_m) v /= total;
    opt_s.step(ts, mean_s, cfg.glo.lr);
    opt_m.step(tm, mean_m, cfg.glo.lr);
    out.traj_s.push_back(ts);
    out.traj_m.push_back(tm);
  }
  return out;
}

// Broadcast parameter vectors by round, deduplicated (every site gets the
// same bytes).
std::map<uint64_t, std::vector<double>> broadcast_trajectory(
    const std::vector<std::vector<uint8_t>>& log, const std::string& name) {
  std::map<uint64_t, std::vector<double>> traj;
  for (const auto& bytes : log) {
    const fed::Frame f = fed::decode_frame(bytes);
    if (f.type == fed::MsgType::broadcast && !traj.count(f.round))
      traj[f.round] = f.payload.get_vector(name);
  }
  return traj;
}

}  // namespace

TEST_CASE("wire frames: encode/decode round trip preserves every field and bit") {
  Rng rng(3);
  fed::Frame f;
  f.type = fed::MsgType::report;
  f.round = 41;
  std::vector<double> g(257);
  for (double& v : g) v = rng.normal();
  f.payload.put_vector("grad_s", g);
  f.payload.put_scalar("site_id", 12.0);

  const std::vector<uint8_t> bytes = fed::encode_frame(f);
  const fed::Frame back = fed::decode_frame(bytes);
  CHECK(back.type == fed::MsgType::report);
  CHECK(back.round == 41);
  CHECK(back.payload.get_scalar("site_id") == 12.0);
  CHECK(max_abs_diff(back.payload.get_vector("grad_s"), g) == 0.0);

  const auto names = fed::frame_array_names(bytes);
  REQUIRE(names.size() == 2);
  CHECK(names[0] == "grad_s");
  CHECK(names[1] == "site_id");

  // Shutdown frames carry an empty payload.
  fed::Frame sd;
  sd.type = fed::MsgType::shutdown;
  sd.round = 9;
  const fed::Frame sd2 = fed::decode_frame(fed::encode_frame(sd));
  CHECK(sd2.type == fed::MsgType::shutdown);
  CHECK(sd2.round == 9);
  CHECK(sd2.payload.size() == 0);
}

TEST_CASE("wire frames: malformed bytes are protocol errors") {
  fed::Frame f;
  f.type = fed::MsgType::broadcast;
  f.round = 1;
  f.payload.put_vector("theta_s", {1.0, 2.0});
  const std::vector<uint8_t> good = fed::encode_frame(f);
  CHECK(code_of([&] { (void)fed::decode_frame(good); }) == ErrorCode::ok);

  std::vector<uint8_t> bad = good;
  bad[0] = 'X';  // magic
  CHECK(code_of([&] { (void)fed::decode_frame(bad); }) == ErrorCode::protocol);

  bad = good;
  bad[4] = 9;  // message type
  CHECK(code_of([&] { (void)fed::decode_frame(bad); }) == ErrorCode::protocol);

  bad = good;
  bad.pop_back();  // length field no longer matches
  CHECK(code_of([&] { (void)fed::decode_frame(bad); }) == ErrorCode::protocol);

  bad = good;
  bad.push_back(0);  // trailing junk
  CHECK(code_of([&] { (void)fed::decode_frame(bad); }) == ErrorCode::protocol);

  bad.assign(good.begin(), good.begin() + 10);  // truncated header
  CHECK(code_of([&] { (void)fed::decode_frame(bad); }) == ErrorCode::protocol);

  bad = good;
  bad[17] = 'Z';  // corrupt the payload's container magic
  CHECK(code_of([&] { (void)fed::decode_frame(bad); }) == ErrorCode::protocol);
}

TEST_CASE("frame queue: fifo order, drain after close, timeout and closed errors") {
  fed::FrameQueue q;
  q.push({1});
  q.push({2, 2});
  CHECK(q.pop(1.0) == std::vector<uint8_t>{1});

  q.close();
  // Frames queued before the close still drain; after that it reports closed.
  CHECK(q.pop(1.0) == std::vector<uint8_t>{2, 2});
  CHECK(code_of([&] { (void)q.pop(1.0); }) == ErrorCode::protocol);
  q.push({3});  // dropped: nobody can receive anymore
  CHECK(code_of([&] { (void)q.pop(1.0); }) == ErrorCode::protocol);

  fed::FrameQueue empty;
  const auto t0 = std::chrono::steady_clock::now();
  CHECK(code_of([&] { (void)empty.pop(0.05); }) == ErrorCode::protocol);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() >= 0.04);

  // close unblocks a waiting pop.
  fed::FrameQueue waited;
  std::thread closer([&] {
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
    waited.close();
  });
  CHECK(code_of([&] { (void)waited.pop(10.0); }) == ErrorCode::protocol);
  closer.join();
}

TEST_CASE("make_server: deterministic init, id and config validation") {
  const fed::FedConfig cfg = fed_cfg(1);
  fed::ServerState sv = fed::make_server(cfg, corpus().model, {4, 2, 9});
  CHECK(sv.site_ids == std::vector<int>{2, 4, 9});
  CHECK(sv.round == 0);

  // Parameters start exactly like a single-site trainer with the same seed.
  glo::TrainState ref = glo::make_train_state(cfg.glo, corpus().model, {1});
  CHECK(max_abs_diff(sv.shape_net.params.flat_values(), ref.shape_net.params.flat_values()) == 0.0);
  CHECK(max_abs_diff(sv.material_net.params.flat_values(),
                     ref.material_net.params.flat_values()) == 0.0);

  CHECK(code_of([&] { (void)fed::make_server(cfg, corpus().model, {}); }) == ErrorCode::config);
  CHECK(code_of([&] { (void)fed::make_server(cfg, corpus().model, {1, 2, 1}); }) ==
        ErrorCode::config);
  fed::FedConfig bad = cfg;
  bad.rounds = -1;
  CHECK(code_of([&] { (void)fed::make_server(bad, corpus().model, {1}); }) == ErrorCode::config);
  bad = cfg;
  bad.timeout_sec = 0.0;
  CHECK(code_of([&] { (void)fed::make_server(bad, corpus().model, {1}); }) == ErrorCode::config);
}

TEST_CASE("make_site: labeled index map and empty-site guard") {
  const fed::FedConfig cfg = fed_cfg(1);
  const auto specs = site_specs();
  fed::SiteState st = fed::make_site(cfg, corpus().model, specs[0]);
  CHECK(st.spec.site_id == 11);
  CHECK(st.round == 0);
  CHECK(st.cursor == 0);
  REQUIRE(st.labeled_idx.size() == 2);
  for (const int i : st.labeled_idx) CHECK(st.local.labeled[size_t(i)] == 1);
  CHECK(st.local.latents.size() == specs[0].data.samples.size());

  fed::SiteSpec empty = specs[0];
  std::fill(empty.data.labeled.begin(), empty.data.labeled.end(), uint8_t(0));
  CHECK(code_of([&] { (void)fed::make_site(cfg, corpus().model, empty); }) == ErrorCode::config);
}

TEST_CASE("client_round: round, type, and payload guards") {
  const fed::FedConfig cfg = fed_cfg(1);
  fed::ServerState sv = fed::make_server(cfg, corpus().model, {11});
  fed::SiteState site = fed::make_site(cfg, corpus().model, site_specs()[0]);

  fed::Frame late = fed::make_broadcast(sv);
  late.round = 3;  // site expects 0
  CHECK(code_of([&] { (void)fed::client_round(site, late); }) == ErrorCode::protocol);

  fed::Frame wrong_type = fed::make_broadcast(sv);
  wrong_type.type = fed::MsgType::report;
  CHECK(code_of([&] { (void)fed::client_round(site, wrong_type); }) == ErrorCode::protocol);

  fed::Frame hollow;
  hollow.type = fed::MsgType::broadcast;
  hollow.round = 0;
  CHECK(code_of([&] { (void)fed::client_round(site, hollow); }) == ErrorCode::protocol);
  CHECK(site.round == 0);  // nothing above was accepted
}

TEST_CASE("single site: one federated round equals the centralized step bitwise") {
  const fed::FedConfig cfg = fed_cfg(1);
  fed::SiteSpec spec{3, 555, corpus().site_data[0]};
  fed::ServerState sv = fed::make_server(cfg, corpus().model, {3});
  const std::vector<double> init_s = sv.shape_net.params.flat_values();
  const std::vector<double> init_m = sv.material_net.params.flat_values();

  // Mirror: same site state, the server's parameters, one supervised step.
  fed::SiteState mirror = fed::make_site(cfg, corpus().model, spec);
  mirror.local.shape_net.params.set_flat_values(init_s);
  mirror.local.material_net.params.set_flat_values(init_m);
  const int i0 = mirror.labeled_idx[0];
  const std::vector<double> enh_init = mirror.local.enhancer.params.flat_values();
  glo::pretrain_step(mirror.local, i0, mirror.spec.data.samples[size_t(i0)]);

  fed::SiteState site = fed::make_site(cfg, corpus().model, spec);
  const fed::Frame bc = fed::make_broadcast(sv);
  const fed::Frame rep = fed::client_round(site, bc);
  CHECK(rep.type == fed::MsgType::report);
  CHECK(rep.round == 0);
  CHECK(rep.payload.get_scalar("site_id") == 3.0);
  CHECK(rep.payload.get_scalar("sample_count") == 1.0);
  CHECK(site.round == 1);
  fed::server_round(sv, {rep});
  CHECK(sv.round == 1);

  CHECK(max_abs_diff(sv.shape_net.params.flat_values(),
                     mirror.local.shape_net.params.flat_values()) == 0.0);
  CHECK(max_abs_diff(sv.material_net.params.flat_values(),
                     mirror.local.material_net.params.flat_values()) == 0.0);
  CHECK(max_abs_diff(latent_values(site.local, i0), latent_values(mirror.local, i0)) == 0.0);

  // The client also stepped its enhancer, locally only: its parameters moved,
  // the report knows nothing about them.
  CHECK(max_abs_diff(site.local.enhancer.params.flat_values(), enh_init) > 0.0);
  CHECK(!rep.payload.has("enh.c1.w"));
}

TEST_CASE("server_round: every protocol violation is rejected") {
  const fed::FedConfig cfg = fed_cfg(2);
  fed::ServerState sv = fed::make_server(cfg, corpus().model, {5, 8, 11});
  const auto specs = site_specs();
  std::vector<fed::SiteState> sites;
  for (const auto& s : specs) sites.push_back(fed::make_site(cfg, corpus().model, s));

  const fed::Frame bc = fed::make_broadcast(sv);
  std::vector<fed::Frame> reports;
  for (auto& st : sites) reports.push_back(fed::client_round(st, bc));

  auto expect_protocol = [&](const std::vector<fed::Frame>& rs) {
    fed::ServerState fresh = fed::make_server(cfg, corpus().model, {5, 8, 11});
    CHECK(code_of([&] { fed::server_round(fresh, rs); }) == ErrorCode::protocol);
    CHECK(fresh.round == 0);
  };

  expect_protocol({reports[0], reports[1]});  // missing a site
  expect_protocol({reports[0], reports[1], reports[1]});  // duplicate site
  {
    auto rs = reports;
    rs[2].round = 1;  // future round
    expect_protocol(rs);
    rs[2].round = 0;
    rs[2].type = fed::MsgType::broadcast;  // wrong type
    expect_protocol(rs);
  }
  {
    auto rs = reports;
    fed::Frame alien = reports[2];
    alien.payload = Container();
    alien.payload.put_vector("grad_s", rs[2].payload.get_vector("grad_s"));
    alien.payload.put_vector("grad_m", rs[2].payload.get_vector("grad_m"));
    alien.payload.put_scalar("site_id", 99.0);  // unregistered
    alien.payload.put_scalar("sample_count", 1.0);
    rs[2] = alien;
    expect_protocol(rs);
  }
  {
    auto rs = reports;
    fed::Frame short_grad = reports[1];
    short_grad.payload = Container();
    short_grad.payload.put_vector("grad_s", {1.0, 2.0});
    short_grad.payload.put_vector("grad_m", rs[1].payload.get_vector("grad_m"));
    short_grad.payload.put_scalar("site_id", 8.0);
    short_grad.payload.put_scalar("sample_count", 1.0);
    rs[1] = short_grad;
    expect_protocol(rs);
  }
  {
    auto rs = reports;
    fed::Frame lazy = reports[0];
    lazy.payload = Container();
    lazy.payload.put_vector("grad_s", rs[0].payload.get_vector("grad_s"));
    lazy.payload.put_scalar("site_id", 5.0);  // grad_m and sample_count missing
    rs[0] = lazy;
    expect_protocol(rs);
  }

  // After a round is applied, yesterday's reports are stale.
  fed::server_round(sv, reports);
  CHECK(sv.round == 1);
  CHECK(code_of([&] { fed::server_round(sv, reports); }) == ErrorCode::protocol);
}

TEST_CASE("zero gradients move nothing but the round counter") {
  const fed::FedConfig cfg = fed_cfg(1);
  fed::ServerState sv = fed::make_server(cfg, corpus().model, {1, 2, 3});
  const std::vector<double> init_s = sv.shape_net.params.flat_values();
  const std::vector<double> init_m = sv.material_net.params.flat_values();

  std::vector<fed::Frame> reports;
  for (int sid = 1; sid <= 3; ++sid) {
    fed::Frame f;
    f.type = fed::MsgType::report;
    f.round = 0;
    f.payload.put_vector("grad_s", std::vector<double>(init_s.size(), 0.0));
    f.payload.put_vector("grad_m", std::vector<double>(init_m.size(), 0.0));
    f.payload.put_scalar("site_id", double(sid));
    f.payload.put_scalar("sample_count", 1.0);
    reports.push_back(std::move(f));
  }
  fed::server_round(sv, reports);
  CHECK(sv.round == 1);
  CHECK(max_abs_diff(sv.shape_net.params.flat_values(), init_s) == 0.0);
  CHECK(max_abs_diff(sv.material_net.params.flat_values(), init_m) == 0.0);
}

TEST_CASE("three sites: the federated trajectory equals centralized gradient averaging") {
  const int rounds = 5;
  const fed::FedConfig cfg = fed_cfg(rounds);
  const auto specs = site_specs();

  std::vector<std::vector<uint8_t>> log;
  const fed::FedResult res =
      fed::run_federation(cfg, corpus().model, specs, fed::Transport::inproc, "",
                          [&log](const std::vector<uint8_t>& b) { log.push_back(b); });
  CHECK(res.rounds == uint64_t(rounds));

  const CentralRun ref = central_reference(cfg, corpus().model, specs, rounds);

  // Broadcast r carries the parameters after r server updates; the result
  // carries the final ones.
  const auto traj_s = broadcast_trajectory(log, "theta_s");
  const auto traj_m = broadcast_trajectory(log, "theta_m");
  REQUIRE(traj_s.size() == size_t(rounds));
  double worst = 0.0;
  for (int r = 0; r < rounds; ++r) {
    worst = std::max(worst, max_rel_diff(traj_s.at(uint64_t(r)), ref.traj_s[size_t(r)]));
    worst = std::max(worst, max_rel_diff(traj_m.at(uint64_t(r)), ref.traj_m[size_t(r)]));
  }
  worst = std::max(worst, max_rel_diff(res.theta_s, ref.traj_s[size_t(rounds)]));
  worst = std::max(worst, max_rel_diff(res.theta_m, ref.traj_m[size_t(rounds)]));
  CHECK(worst == 0.0);  // stronger than the 1e-12 the protocol promises

  // Per-site code trajectories match too, and cursors advanced in lockstep.
  for (const fed::SiteState& site : res.sites) {
    const auto it = std::find_if(ref.sites.begin(), ref.sites.end(), [&](const fed::SiteState& s) {
      return s.spec.site_id == site.spec.site_id;
    });
    REQUIRE(it != ref.sites.end());
    CHECK(site.cursor == it->cursor);
    CHECK(site.round == uint64_t(rounds));
    for (size_t i = 0; i < site.local.latents.size(); ++i)
      CHECK(max_abs_diff(latent_values(site.local, int(i)), latent_values(it->local, int(i))) ==
            0.0);
  }
}

TEST_CASE("transports: inproc and tcp runs are byte- and parameter-identical") {
  const int rounds = 3;
  const fed::FedConfig cfg = fed_cfg(rounds);
  const auto specs = site_specs();

  std::vector<std::vector<uint8_t>> log_q, log_t;
  const fed::FedResult a =
      fed::run_federation(cfg, corpus().model, specs, fed::Transport::inproc, "",
                          [&log_q](const std::vector<uint8_t>& b) { log_q.push_back(b); });
  const fed::FedResult b =
      fed::run_federation(cfg, corpus().model, specs, fed::Transport::tcp, "127.0.0.1:0",
                          [&log_t](const std::vector<uint8_t>& b2) { log_t.push_back(b2); });

  CHECK(max_abs_diff(a.theta_s, b.theta_s) == 0.0);
  CHECK(max_abs_diff(a.theta_m, b.theta_m) == 0.0);
  for (size_t k = 0; k < a.sites.size(); ++k) {
    CHECK(max_abs_diff(a.sites[k].local.enhancer.params.flat_values(),
                       b.sites[k].local.enhancer.params.flat_values()) == 0.0);
    for (size_t i = 0; i < a.sites[k].local.latents.size(); ++i)
      CHECK(max_abs_diff(latent_values(a.sites[k].local, int(i)),
                         latent_values(b.sites[k].local, int(i))) == 0.0);
  }

  // The traffic itself is the same multiset of frames per (round, type);
  // only per-connection arrival order may differ between transports.
  auto grouped = [](const std::vector<std::vector<uint8_t>>& log) {
    std::map<std::pair<uint64_t, int>, std::multiset<std::vector<uint8_t>>> g;
    for (const auto& bytes : log) {
      const fed::Frame f = fed::decode_frame(bytes);
      g[{f.round, int(f.type)}].insert(bytes);
    }
    return g;
  };
  CHECK(grouped(log_q) == grouped(log_t));
  CHECK(log_q.size() == size_t(rounds) * 2 * specs.size() + specs.size());
}

TEST_CASE("privacy: the wire carries shared generator arrays and nothing else") {
  const fed::FedConfig cfg = fed_cfg(2);
  std::vector<std::vector<uint8_t>> log;
  (void)fed::run_federation(cfg, corpus().model, site_specs(), fed::Transport::tcp, "127.0.0.1:0",
                            [&log](const std::vector<uint8_t>& b) { log.push_back(b); });
  REQUIRE(!log.empty());

  int enhancer_arrays = 0;
  for (const auto& bytes : log) {
    const fed::Frame f = fed::decode_frame(bytes);
    const std::vector<std::string> names = fed::frame_array_names(bytes);
    for (const auto& n : names)
      if (n.rfind("enh", 0) == 0) ++enhancer_arrays;
    switch (f.type) {
      case fed::MsgType::broadcast:
        CHECK(names == std::vector<std::string>{"theta_s", "theta_m"});
        break;
      case fed::MsgType::report:
        CHECK(names == std::vector<std::string>{"grad_s", "grad_m", "site_id", "sample_count"});
        break;
      case fed::MsgType::shutdown:
        CHECK(names.empty());
        break;
    }
  }
  CHECK(enhancer_arrays == 0);
}

TEST_CASE("run_federation: zero rounds returns the initial parameters") {
  const fed::FedConfig cfg = fed_cfg(0);
  const auto specs = site_specs();
  std::vector<std::vector<uint8_t>> log;
  const fed::FedResult res =
      fed::run_federation(cfg, corpus().model, specs, fed::Transport::inproc, "",
                          [&log](const std::vector<uint8_t>& b) { log.push_back(b); });
  CHECK(res.rounds == 0);

  fed::ServerState sv = fed::make_server(cfg, corpus().model, {5, 8, 11});
  CHECK(max_abs_diff(res.theta_s, sv.shape_net.params.flat_values()) == 0.0);
  CHECK(max_abs_diff(res.theta_m, sv.material_net.params.flat_values()) == 0.0);
  CHECK(log.size() == specs.size());  // just the shutdowns
  for (const auto& bytes : log)
    CHECK(fed::decode_frame(bytes).type == fed::MsgType::shutdown);
}

TEST_CASE("run_federation: duplicate site ids are rejected up front") {
  const fed::FedConfig cfg = fed_cfg(1);
  auto specs = site_specs();
  specs[1].site_id = specs[0].site_id;
  CHECK(code_of([&] {
          (void)fed::run_federation(cfg, corpus().model, specs, fed::Transport::inproc);
        }) == ErrorCode::config);
  CHECK(code_of([&] {
          (void)fed::run_federation(cfg, corpus().model, {}, fed::Transport::inproc);
        }) == ErrorCode::config);
}

TEST_CASE("tcp: silent peers time out, vanished peers surface as closed") {
  fed::TcpListener lis("127.0.0.1:0");
  CHECK(code_of([&] { (void)lis.accept_fd(0.05); }) == ErrorCode::protocol);  // nobody connects

  std::thread peer([addr = lis.address()] {
    const int fd = fed::tcp_connect(addr);
    std::this_thread::sleep_for(std::chrono::milliseconds(400));  // say nothing
    fed::close_fd(fd);
  });
  const int afd = lis.accept_fd(5.0);
  try {
    (void)fed::recv_frame_fd(afd, 0.1);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::protocol);
    CHECK(std::string(e.what()).find("timeout") != std::string::npos);
  }
  peer.join();
  try {
    (void)fed::recv_frame_fd(afd, 2.0);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::protocol);
    CHECK(std::string(e.what()).find("closed") != std::string::npos);
  }
  fed::close_fd(afd);

  CHECK(code_of([] { (void)fed::tcp_connect("not-an-address"); }) == ErrorCode::config);
  CHECK(code_of([] { (void)fed::TcpListener("localhost:0"); }) == ErrorCode::config);
}

TEST_CASE("cross-site rendering: shared geometry, site-specific appearance") {
  const fed::FedConfig cfg = fed_cfg(1);
  const auto specs = site_specs();
  fed::SiteState sa = fed::make_site(cfg, corpus().model, specs[0]);
  fed::SiteState sb = fed::make_site(cfg, corpus().model, specs[1]);

  // Shared generators, different enhancers (different local seeds).
  fed::ServerState sv = fed::make_server(cfg, corpus().model, {5, 11});
  const std::vector<double> ts = sv.shape_net.params.flat_values();
  const std::vector<double> tm = sv.material_net.params.flat_values();
  for (fed::SiteState* s : {&sa, &sb}) {
    s->local.shape_net.params.set_flat_values(ts);
    s->local.material_net.params.set_flat_values(tm);
    // Enhancers initialize to the identity, so train each one a little on its
    // own site's data before comparing appearances.
    const int i0 = s->labeled_idx[0];
    for (int step = 0; step < 3; ++step)
      (void)glo::pretrain_enhancer_step(s->local, i0, s->spec.data.samples[size_t(i0)],
                                        (step * 5) % cfg.glo.slice_res);
  }

  const Tensor z = sa.local.latents[0];
  fed::CrossRender cr = fed::cross_site_render(sa.local, sb.local, z);
  for (const Tensor* t : {&cr.a.vol, &cr.a.label, &cr.b.vol, &cr.b.label})
    for (int64_t j = 0; j < t->size(); ++j) REQUIRE(std::isfinite(t->data()[j]));

  // Labels depend only on the shared shape path.
  CHECK(max_abs_diff(std::vector<double>(cr.a.label.data(), cr.a.label.data() + cr.a.label.size()),
                     std::vector<double>(cr.b.label.data(), cr.b.label.data() + cr.b.label.size())) ==
        0.0);
  // Appearance does not: the two enhancers disagree somewhere.
  double dv = 0.0;
  for (int64_t j = 0; j < cr.a.vol.size(); ++j)
    dv = std::max(dv, std::fabs(cr.a.vol.data()[j] - cr.b.vol.data()[j]));
  CHECK(dv > 0.0);

  // Identical enhancers close the gap bitwise.
  sb.local.enhancer.params.set_flat_values(sa.local.enhancer.params.flat_values());
  fed::CrossRender same = fed::cross_site_render(sa.local, sb.local, z);
  double dv2 = 0.0;
  for (int64_t j = 0; j < same.a.vol.size(); ++j)
    dv2 = std::max(dv2, std::fabs(same.a.vol.data()[j] - same.b.vol.data()[j]));
  CHECK(dv2 == 0.0);
}

TEST_CASE("federation smoke: trained globals render sane samples at every site") {
  const fed::FedConfig cfg = fed_cfg(2);
  const fed::FedResult res =
      fed::run_federation(cfg, corpus().model, site_specs(), fed::Transport::inproc);

  for (const fed::SiteState& site : res.sites) {
    glo::TrainState st = site.local;  // shallow parameter copy is fine here
    const Tensor z = st.latents[size_t(site.labeled_idx[0])];
    const glo::Generated gen = glo::generate_sample(st, z);
    for (int64_t j = 0; j < gen.vol.size(); ++j) REQUIRE(std::isfinite(gen.vol.data()[j]));

    // The generated labels must agree with voxelizing the sample's own shape
    // parameters straight through the shape model.
    const ssm::ShapeParams tau = nets::gen_shape_params(st.shape_net, z, corpus().model, 32.0);
    const std::vector<double> pts = ssm::synthesize(corpus().model, tau);
    const Tensor lab =
        ssm::voxelize_labels(pts, corpus().model.topo, cfg.glo.slice_res, 32.0 / cfg.glo.slice_res);
    Tensor uni(gen.label.shape());
    for (int64_t j = 0; j < lab.size(); ++j) uni.data()[j] = lab.data()[j] > 0.0 ? 1.0 : 0.0;
    const double iou = 1.0 - glo::iou_loss_value(gen.label, uni);
    CHECK(iou >= 0.9);
  }
}
