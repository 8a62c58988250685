// Drives the installed binary as a subprocess and checks the documented
// command behaviour: deterministic outputs, figure maps, exit codes.

#include <sys/wait.h>

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "rgbdseg/netpbm.hpp"

namespace rgbdseg {
namespace {

namespace fs = std::filesystem;

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "rgbdseg_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct CmdResult {
  int status = -1;
  std::string output;
};

CmdResult run_cli(const std::string& args) {
  const fs::path log = work_dir() / "last_output.txt";
  const std::string cmd =
      std::string(RGBDSEG_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  CmdResult r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream is(log, std::ios::binary);
  r.output.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  return r;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  EXPECT_TRUE(is.good()) << p;
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

const fs::path& micro_cfg() {
  static const fs::path path = [] {
    const fs::path p = work_dir() / "micro.cfg";
    std::ofstream os(p);
    os << "image_side = 16\npatch_size = 4\nstage_channels = 4, 8\nstage_heads = 1, 2\n"
          "num_classes = 3\nheight = 16\nwidth = 16\nobjects_min = 1\nobjects_max = 3\n"
          "depth_planes = 3\ncolor_ambiguity = false\ndisp_noise = 0\ndisp_dropout = 0\n"
          "train_count = 6\nval_count = 3\nsteps = 4\nbatch_size = 2\nlog_every = 2\n"
          "eval_every = 4\nlr = 0.003\n";
    return p;
  }();
  return path;
}

// Two-plane fixture: left half near, right half far, uniform mid-gray image.
void write_two_plane_scene(const fs::path& ppm, const fs::path& pgm) {
  constexpr int side = 16;
  PpmImage img;
  img.h = side;
  img.w = side;
  img.pix.assign(static_cast<std::size_t>(side) * side * 3, 128);
  write_ppm(ppm, img);

  PgmImage disp;
  disp.h = side;
  disp.w = side;
  disp.maxval = 65535;
  disp.pix.resize(static_cast<std::size_t>(side) * side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      disp.pix[static_cast<std::size_t>(y) * side + x] = x < side / 2 ? 36000 : 12000;
  write_pgm(pgm, disp);
}

TEST(CliGenData, SameSpecWritesIdenticalDirectories) {
  const fs::path a = work_dir() / "data_a";
  const fs::path b = work_dir() / "data_b";
  ASSERT_EQ(run_cli("gen-data --spec " + micro_cfg().string() + " --out " + a.string()).status, 0);
  ASSERT_EQ(run_cli("gen-data --spec " + micro_cfg().string() + " --out " + b.string()).status, 0);

  std::vector<fs::path> rel;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a));
  ASSERT_EQ(rel.size(), 9u * 3u + 1u);  // 6 train + 3 val samples, 3 files each, config echo
  for (const auto& r : rel) {
    ASSERT_TRUE(fs::exists(b / r)) << r;
    EXPECT_EQ(read_bytes(a / r), read_bytes(b / r)) << r;
  }
}

TEST(CliGenData, CountOverridesTrainingSamples) {
  const fs::path d = work_dir() / "data_count";
  ASSERT_EQ(
      run_cli("gen-data --spec " + micro_cfg().string() + " --count 2 --out " + d.string()).status,
      0);
  int train_files = 0;
  for (const auto& e : fs::directory_iterator(d / "train"))
    train_files += e.is_regular_file() ? 1 : 0;
  EXPECT_EQ(train_files, 2 * 3);
}

TEST(CliPeMap, SelfPixelIsBrightestAndModesDisagreeOnDepth) {
  const fs::path ppm = work_dir() / "scene.ppm";
  const fs::path pgm = work_dir() / "scene.pgm";
  write_two_plane_scene(ppm, pgm);

  // Second disparity map: planes swapped.
  PgmImage disp = read_pgm(pgm);
  for (auto& v : disp.pix) v = v == 36000 ? 12000 : 36000;
  const fs::path pgm_swapped = work_dir() / "scene_swapped.pgm";
  write_pgm(pgm_swapped, disp);

  const std::string base = " --image " + ppm.string() + " --target 4,8 ";
  const fs::path m2a = work_dir() / "m2a.pgm";
  const fs::path m2b = work_dir() / "m2b.pgm";
  const fs::path m3a = work_dir() / "m3a.pgm";
  const fs::path m3b = work_dir() / "m3b.pgm";
  ASSERT_EQ(run_cli("pe-map" + base + "--mode 2d --disparity " + pgm.string() + " --out " +
                    m2a.string())
                .status,
            0);
  ASSERT_EQ(run_cli("pe-map" + base + "--mode 2d --disparity " + pgm_swapped.string() + " --out " +
                    m2b.string())
                .status,
            0);
  ASSERT_EQ(run_cli("pe-map" + base + "--mode 3d --disparity " + pgm.string() + " --out " +
                    m3a.string())
                .status,
            0);
  ASSERT_EQ(run_cli("pe-map" + base + "--mode 3d --disparity " + pgm_swapped.string() + " --out " +
                    m3b.string())
                .status,
            0);

  const PgmImage map3 = read_pgm(m3a);
  ASSERT_EQ(map3.w, 16);
  const std::size_t target = 8u * 16u + 4u;
  EXPECT_EQ(map3.pix[target], 255);
  for (std::uint16_t v : map3.pix) EXPECT_LE(v, map3.pix[target]);

  EXPECT_EQ(read_bytes(m2a), read_bytes(m2b));  // 2d ignores disparity
  EXPECT_NE(read_bytes(m3a), read_bytes(m3b));  // 3d reacts to it
}

TEST(CliEmbeddingMatrix, EmitsPositionsByChannelsImage) {
  const fs::path ppm = work_dir() / "emb_scene.ppm";
  const fs::path pgm = work_dir() / "emb_scene.pgm";
  write_two_plane_scene(ppm, pgm);
  const fs::path out = work_dir() / "emb.pgm";
  ASSERT_EQ(run_cli("embedding-matrix --image " + ppm.string() + " --disparity " + pgm.string() +
                    " --mode 3d --channels 32 --out " + out.string())
                .status,
            0);
  const PgmImage img = read_pgm(out);
  EXPECT_EQ(img.h, 16 * 16);
  EXPECT_EQ(img.w, 32);
}

TEST(CliTrainEval, UntrainedCheckpointScoresNearChance) {
  const fs::path data = work_dir() / "data_a";  // written by the gen-data test
  if (!fs::exists(data))
    ASSERT_EQ(
        run_cli("gen-data --spec " + micro_cfg().string() + " --out " + data.string()).status, 0);

  const fs::path run = work_dir() / "run_zero";
  ASSERT_EQ(run_cli("train --config " + micro_cfg().string() + " --data " + data.string() +
                    " --out " + run.string() + " --set steps=0")
                .status,
            0);
  const CmdResult ev =
      run_cli("eval --checkpoint " + (run / "checkpoint").string() + " --data " + data.string());
  ASSERT_EQ(ev.status, 0) << ev.output;

  const auto pos = ev.output.find("miou  ");
  ASSERT_NE(pos, std::string::npos) << ev.output;
  const double miou = std::stod(ev.output.substr(pos + 6));
  EXPECT_NEAR(miou, 1.0 / 3.0, 0.1) << ev.output;
}

TEST(CliGradCheck, FusionBatteryPassesAndPrintsErrors) {
  const CmdResult r = run_cli("grad-check --module fusion --seeds 2");
  EXPECT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("max_rel_err"), std::string::npos);
  EXPECT_NE(r.output.find("all passed"), std::string::npos);
}

TEST(CliExitCodes, DistinguishUsageIoAndDivergence) {
  EXPECT_EQ(run_cli("no-such-command").status, 1);
  EXPECT_EQ(run_cli("pe-map --image /missing.ppm --disparity /missing.pgm --target 1,1 "
                    "--mode 2d --out /tmp/unused_map.pgm")
                .status,
            2);

  const fs::path data = work_dir() / "data_a";
  if (!fs::exists(data))
    ASSERT_EQ(
        run_cli("gen-data --spec " + micro_cfg().string() + " --out " + data.string()).status, 0);
  EXPECT_EQ(run_cli("train --config " + micro_cfg().string() + " --data " + data.string() +
                    " --out " + (work_dir() / "run_div").string() + " --set lr=1e308")
                .status,
            3);
}

}  // namespace
}  // namespace rgbdseg
