#include <doctest.h>

#include <harmonia/image_io.hpp>
#include <harmonia/manifest.hpp>
#include <harmonia/params_json.hpp>

#include "support.hpp"

#include <httplib.h>
#include <json.hpp>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace harmonia;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

Run cli(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" HARMONIA_CLI "' " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p);
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

/// Small architecture so CLI training stays quick.
std::string tiny_config(const harmonia::testing::DatasetFiles& files, int epochs) {
  std::ostringstream s;
  s << "epochs = " << epochs << "\nbatch = 2\nresolution = 16\ngrid = 8\ncurve_nodes = 8\n"
    << "curve_widths = [4, 4]\nshading_widths = [4, 4]\ndisc_widths = [4, 4]\ndilation = 2\n"
    << "stream1_manifest = \"" << files.stream1 << "\"\nstream2_manifest = \"" << files.stream2 << "\"\n";
  return s.str();
}

}  // namespace

TEST_CASE("usage errors exit 1 and help exits 0") {
  CHECK(cli("--help").status == 0);
  CHECK(cli("harmonize --help").status == 0);
  const auto r = cli("harmonize --composite a.png --checkpoint c.harm --out o.png");
  CHECK(r.status == 1);
  CHECK(r.out.find("--mask") != std::string::npos);
  CHECK(cli("no-such-command").status == 1);
  CHECK(cli("").status == 1);
}

TEST_CASE("runtime errors exit 2 with one line") {
  const auto r = cli("bt-rank --csv /nonexistent/prefs.csv");
  CHECK(r.status == 2);
  CHECK(r.out.rfind("harmonia: error: ", 0) == 0);
  CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 1);
}

TEST_CASE("bt-rank prints sorted scores") {
  const auto dir = harmonia::testing::scratch_dir("cli_bt");
  write_text(dir / "prefs.csv", "method_a,method_b,winner\nbase,ours,ours\nours,base,ours\nbase,ours,base\nours,base,ours\n");
  const auto r = cli("bt-rank --csv " + q(dir / "prefs.csv"));
  CHECK(r.status == 0);
  CHECK(r.out.find("1\tours\t0.7500") != std::string::npos);
  CHECK(r.out.find("scores: 0.7500, 0.2500") != std::string::npos);
  write_text(dir / "split.csv", "method_a,method_b,winner\nA,B,A\nC,D,C\n");
  CHECK(cli("bt-rank --csv " + q(dir / "split.csv")).status == 2);
}

TEST_CASE("gen-data writes reproducible samples") {
  const auto dir = harmonia::testing::scratch_dir("cli_gen");
  const auto files = harmonia::testing::write_dataset(dir / "data", 3, 24);
  CHECK(cli("gen-data stream1 --manifest " + q(files.stream1) + " --out-dir " + q(dir / "s1")).status == 0);
  const auto s1 = load_manifest((dir / "s1" / "manifest.jsonl").string(), {"composite", "target"});
  CHECK(s1.size() == 6);
  for (const auto& e : s1.entries) {
    CHECK(e.at("stream") == "s1");
    CHECK(fs::exists(e.at("target")));
  }

  const std::string s2 = "gen-data stream2 --dilate 3 --seed 5 --manifest " + q(files.stream2) + " --out-dir ";
  CHECK(cli(s2 + q(dir / "a")).status == 0);
  CHECK(cli(s2 + q(dir / "b"), "HARMONIA_CACHE=" + q(dir / "cache")).status == 0);
  const auto a = load_manifest((dir / "a" / "manifest.jsonl").string(), {"composite", "real"});
  const auto b = load_manifest((dir / "b" / "manifest.jsonl").string(), {"composite", "real"});
  REQUIRE(a.size() == 3);
  REQUIRE(b.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.entries[i].id == b.entries[i].id);
    for (const char* k : {"composite", "background", "mask", "real"}) CHECK(slurp(a.entries[i].at(k)) == slurp(b.entries[i].at(k)));
    // The foreground never comes from the background image.
    const auto ij = a.entries[i].id;
    const auto cut = ij.find('_');
    CHECK(ij.substr(0, cut) != ij.substr(cut + 1));
  }
  CHECK(fs::exists(dir / "cache"));

  const auto all = slurp(files.stream2);
  write_text(dir / "data" / "one.jsonl", all.substr(0, all.find('\n') + 1));
  const auto r = cli("gen-data stream2 --manifest " + q(dir / "data" / "one.jsonl") + " --out-dir " + q(dir / "c"));
  CHECK(r.status == 2);
  CHECK(r.out.find("at least 2") != std::string::npos);
}

TEST_CASE("train, harmonize and eval through the binary") {
  const auto dir = harmonia::testing::scratch_dir("cli_pipeline");
  const auto files = harmonia::testing::write_dataset(dir / "data", 2, 20);
  write_text(dir / "zero.toml", tiny_config(files, 0));
  auto r = cli("train --config " + q(dir / "zero.toml") + " --out-dir " + q(dir / "zero"));
  CHECK(r.status == 0);
  CHECK(fs::exists(dir / "zero" / "checkpoint_0000.harm"));
  CHECK_FALSE(fs::exists(dir / "zero" / "checkpoint_0001.harm"));

  write_text(dir / "one.toml", tiny_config(files, 1));
  r = cli("train --config " + q(dir / "one.toml") + " --out-dir " + q(dir / "one"));
  CHECK(r.status == 0);
  CHECK(fs::exists(dir / "one" / "checkpoint_0001.harm"));
  r = cli("train --config " + q(dir / "one.toml") + " --out-dir " + q(dir / "one"));
  CHECK(r.status == 0);
  CHECK(r.out.find("resumed") != std::string::npos);

  write_text(dir / "bad.toml", "epochs = 1\nlearning_rate = 3\n");
  r = cli("train --config " + q(dir / "bad.toml") + " --out-dir " + q(dir / "bad"));
  CHECK(r.status == 2);
  CHECK(r.out.find("learning_rate") != std::string::npos);

  const auto ckpt = dir / "zero" / "latest.harm";
  const auto img = (dir / "data" / "img0.png").string(), mask = (dir / "data" / "img0_mask.png").string();
  r = cli("harmonize --composite '" + img + "' --mask '" + mask + "' --checkpoint " + q(ckpt) + " --out " +
          q(dir / "out.png") + " --params-out " + q(dir / "params.json"));
  REQUIRE(r.status == 0);
  const auto params = parse_params(slurp(dir / "params.json"), {8, 8});
  CHECK((params.curves.y.array() == 0.5).all());
  const auto out = load_image((dir / "out.png").string());
  const auto in = load_image(img);
  const auto m = load_mask(mask);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x)
      if (m(y, x) == 0.0f) CHECK(out(y, x, 1) == in(y, x, 1));

  r = cli("harmonize --composite '" + img + "' --mask '" + mask + "' --checkpoint " + q(dir / "nope.harm") +
          " --out " + q(dir / "x.png"));
  CHECK(r.status == 2);

  write_text(dir / "pred.jsonl", "{\"id\":\"0\",\"image\":\"" + img + "\"}\n");
  r = cli("eval --resolution 16 --pred-manifest " + q(dir / "pred.jsonl") + " --gt-manifest " + q(dir / "pred.jsonl"));
  REQUIRE(r.status == 0);
  const auto report = nlohmann::json::parse(r.out);
  CHECK(report["mse"] == 0.0);
  CHECK(report["psnr"] == 99.0);
  CHECK(report["n"] == 1);
}

TEST_CASE("serve answers health and stops on SIGINT") {
  const auto dir = harmonia::testing::scratch_dir("cli_serve");
  CHECK(cli("serve --port 0 --checkpoint " + q(dir / "missing.harm")).status == 2);

  int fds[2];
  REQUIRE(pipe(fds) == 0);
  const pid_t pid = fork();
  REQUIRE(pid >= 0);
  if (pid == 0) {
    dup2(fds[1], STDOUT_FILENO);
    close(fds[0]);
    close(fds[1]);
    execl(HARMONIA_CLI, HARMONIA_CLI, "serve", "--port", "0", static_cast<char*>(nullptr));
    _exit(127);
  }
  close(fds[1]);
  std::string line;
  char c;
  while (read(fds[0], &c, 1) == 1 && c != '\n') line += c;
  close(fds[0]);
  INFO(line);
  const auto colon = line.rfind(':');
  REQUIRE(colon != std::string::npos);
  const int port = std::stoi(line.substr(colon + 1));

  httplib::Client client("127.0.0.1", port);
  const auto res = client.Get("/v1/health");
  REQUIRE(res);
  CHECK(res->status == 200);

  kill(pid, SIGINT);
  int st = 0;
  waitpid(pid, &st, 0);
  CHECK(WIFEXITED(st));
  CHECK(WEXITSTATUS(st) == 0);
}
