// Command-line front end: simulation runs, timing benchmark, last-quarter comparison
// and the individual split-deployment processes.

#include "crl/harness.hpp"

#include <CLI11.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace crl;
using namespace crl::harness;

namespace {

struct Common {
  std::string config;
  std::string condition;
  std::string algo;
  std::uint64_t steps = 0;
  std::uint64_t seed = 0;
  std::string out;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config; every key present overrides the default");
  app->add_option("--condition", c.condition, "e.g. \"Load 1, 40 Hz\" or L1-40");
  app->add_option("--algo", c.algo, "PID2000 APID2000 MRAC2000 CRL2RT_PID CRL2RT_APID CRL2RT_MRAC");
  app->add_option("--steps", c.steps, "control steps");
  app->add_option("--seed", c.seed, "seed");
  app->add_option("--out", c.out, "output directory");
}

ExperimentConfig make_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (!c.condition.empty()) cfg.condition = cpg::parse_condition(c.condition);
  if (!c.algo.empty()) cfg.algorithm = parse_algorithm(c.algo);
  if (c.steps > 0) cfg.total_steps = c.steps;
  if (c.seed > 0) cfg.seed = c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

// Runs body in a child process; returns its pid and the port it bound.
pid_t spawn_server(int (*body)(const ExperimentConfig&, int, const ListenCallback&), const ExperimentConfig& cfg,
                   int& port) {
  int fds[2];
  if (pipe(fds) != 0) throw std::runtime_error("pipe failed");
  std::cout.flush();
  const pid_t pid = fork();
  if (pid < 0) throw std::runtime_error("fork failed");
  if (pid == 0) {
    ::close(fds[0]);
    int rc = 1;
    try {
      rc = body(cfg, 0, [&](int p) {
        if (::write(fds[1], &p, sizeof p) != sizeof p) std::_Exit(1);
        ::close(fds[1]);
      });
    } catch (const std::exception& e) {
      std::cerr << e.what() << '\n';
    }
    std::_Exit(rc);
  }
  ::close(fds[1]);
  const bool ok = ::read(fds[0], &port, sizeof port) == sizeof port;
  ::close(fds[0]);
  if (!ok) throw std::runtime_error("server process failed to start");
  return pid;
}

int wait_child(pid_t pid) {
  int status = 0;
  waitpid(pid, &status, 0);
  return WIFEXITED(status) ? WEXITSTATUS(status) : 1;
}

double last_quarter_of(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return last_quarter_error(MetricsLog::read_csv(f));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crl2rt: interleaved classical / learned wing control"};
  app.require_subcommand(1);

  Common sim;
  bool split = false;
  auto* simulate = app.add_subcommand("simulate", "run one experiment");
  add_common(simulate, sim);
  simulate->add_flag("--split", split, "plant, edge and cloud as separate processes over TCP");
  simulate->add_flag("--inproc", "single process (default)");
  bool timing = false;
  simulate->add_flag("--timing", timing, "record per-stage timing");

  std::string bench_mode = "inproc";
  BenchConfig bench_cfg;
  std::string bench_out;
  auto* bench = app.add_subcommand("bench-timing", "edge loop latency, matrix path vs naive path");
  bench->add_option("--mode", bench_mode, "inproc or split")->check(CLI::IsMember({"inproc", "split"}));
  bench->add_option("--steps", bench_cfg.steps, "measured steps");
  bench->add_option("--warmup", bench_cfg.warmup, "discarded steps");
  bench->add_option("--seed", bench_cfg.seed, "seed");
  bench->add_option("--out", bench_out, "directory for timing_matrix.csv and timing_naive.csv");

  std::string base_csv, crl_csv;
  auto* cmp = app.add_subcommand("compare", "last-quarter error improvement");
  cmp->add_option("--baseline", base_csv, "baseline metrics.csv")->required();
  cmp->add_option("--crl", crl_csv, "CRL metrics.csv")->required();

  Common srv;
  int port = 0;
  auto* plant_cmd = app.add_subcommand("serve-plant", "plant process");
  auto* cloud_cmd = app.add_subcommand("serve-cloud", "cloud trainer process");
  for (auto* c : {plant_cmd, cloud_cmd}) {
    add_common(c, srv);
    c->add_option("--port", port, "listen port (0 picks one)");
  }
  Common edge_opts;
  int plant_port = 0, cloud_port = 0;
  std::string host = "127.0.0.1";
  auto* edge_cmd = app.add_subcommand("run-edge", "edge controller process");
  add_common(edge_cmd, edge_opts);
  edge_cmd->add_option("--plant-port", plant_port)->required();
  edge_cmd->add_option("--cloud-port", cloud_port);
  edge_cmd->add_option("--host", host);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*simulate) {
      ExperimentConfig cfg = make_config(sim);
      cfg.record_timing = cfg.record_timing || timing;
      RunResult r;
      if (split) {
        const pid_t plant_pid = spawn_server(serve_plant, cfg, cfg.plant_port);
        pid_t cloud_pid = -1;
        if (is_crl(cfg.algorithm)) cloud_pid = spawn_server(serve_cloud, cfg, cfg.cloud_port);
        r = run_edge(cfg);
        int rc = wait_child(plant_pid);
        if (cloud_pid > 0) rc |= wait_child(cloud_pid);
        if (rc != 0) std::cerr << "warning: a server process exited with status " << rc << '\n';
      } else {
        r = run_experiment(cfg);
      }
      const auto summary = summary_json(cfg, r);
      if (!cfg.out_dir.empty()) write_outputs(cfg.out_dir, cfg, r);
      std::cout << summary.dump(2) << '\n';
      return r.log.failed ? 2 : 0;
    }
    if (*bench) {
      bench_cfg.split = bench_mode == "split";
      const BenchResult r = bench_timing(bench_cfg);
      write_bench_report(std::cout, r);
      if (!bench_out.empty()) {
        std::ofstream m(bench_out + "/timing_matrix.csv"), n(bench_out + "/timing_naive.csv");
        edge::write_timing_csv(m, r.matrix);
        edge::write_timing_csv(n, r.naive);
      }
      return 0;
    }
    if (*cmp) {
      const double b = last_quarter_of(base_csv), c = last_quarter_of(crl_csv);
      std::printf("baseline %.6g  crl %.6g  improvement %.1f%%\n", b, c, compare(b, c));
      return 0;
    }
    if (*plant_cmd) return serve_plant(make_config(srv), port);
    if (*cloud_cmd) return serve_cloud(make_config(srv), port);
    if (*edge_cmd) {
      ExperimentConfig cfg = make_config(edge_opts);
      cfg.host = host;
      cfg.plant_port = plant_port;
      cfg.cloud_port = cloud_port;
      const RunResult r = run_edge(cfg);
      if (!cfg.out_dir.empty()) write_outputs(cfg.out_dir, cfg, r);
      std::cout << summary_json(cfg, r).dump(2) << '\n';
      return r.log.failed ? 2 : 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
