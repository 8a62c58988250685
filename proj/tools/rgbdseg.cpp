#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "rgbdseg/checkpoint.hpp"
#include "rgbdseg/config.hpp"
#include "rgbdseg/errors.hpp"
#include "rgbdseg/gradcheck.hpp"
#include "rgbdseg/model.hpp"
#include "rgbdseg/netpbm.hpp"
#include "rgbdseg/posenc.hpp"
#include "rgbdseg/synth.hpp"
#include "rgbdseg/train.hpp"

namespace {

using namespace rgbdseg;

// Exit codes: 0 success, 1 usage or domain error, 2 IO error, 3 divergence.
constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitDivergence = 3;

RunConfig load_config_with_overrides(const std::string& path,
                                     const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  for (const std::string& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got: " + kv);
    apply_config_line(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

std::uint8_t to_byte_signed(double v) {
  // Linear [-1, 1] -> [0, 255].
  const double s = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(s * 255.0));
}

// Builds the per-pixel encoding matrix for an image/disparity pair. Every
// pixel is its own token, so the maps match the input resolution.
Tensor pixel_pe_matrix(const PpmImage& image, const PgmImage& disp, PeMode mode, int channels,
                       double pe_scale, double dscale) {
  if (image.h != disp.h || image.w != disp.w)
    throw std::invalid_argument("image and disparity extents differ");
  PeSpec spec;
  spec.channels = channels;
  spec.scale = pe_scale;
  TokenCoords tc = grid_coords(image.h, image.w);
  if (mode == PeMode::three_d) {
    std::vector<double> raw(disp.pix.begin(), disp.pix.end());
    if (dscale <= 0.0) {
      for (double v : raw) dscale = std::max(dscale, v);
      if (dscale <= 0.0) throw std::invalid_argument("disparity map has no valid pixels");
    }
    tc.d = normalize_disparity(fill_invalid_disparity(raw, disp.h, disp.w), dscale);
  }
  return pe_matrix(tc, spec, mode);
}

int cmd_pe_map(const std::string& image_path, const std::string& disp_path,
               const std::string& target, const std::string& mode_str,
               const std::string& out_path, int channels, double pe_scale, double dscale) {
  const PeMode mode = parse_pe_mode(mode_str);
  if (mode == PeMode::none) throw std::invalid_argument("pe-map: mode must be 2d or 3d");
  const PpmImage image = read_ppm(image_path);
  const PgmImage disp = read_pgm(disp_path);

  int u = -1, v = -1;
  if (std::sscanf(target.c_str(), "%d,%d", &u, &v) != 2)
    throw std::invalid_argument("pe-map: target must be u,v");
  if (u < 0 || u >= image.w || v < 0 || v >= image.h)
    throw std::invalid_argument("pe-map: target out of bounds");

  const Tensor mat = pixel_pe_matrix(image, disp, mode, channels, pe_scale, dscale);
  const std::vector<double> sim = similarity_map(mat, v * image.w + u);

  PgmImage out;
  out.h = image.h;
  out.w = image.w;
  out.maxval = 255;
  out.pix.resize(sim.size());
  for (std::size_t i = 0; i < sim.size(); ++i) out.pix[i] = to_byte_signed(sim[i]);
  write_pgm(out_path, out);
  std::printf("wrote %s (%dx%d, mode %s, target %d,%d)\n", out_path.c_str(), out.w, out.h,
              mode_str.c_str(), u, v);
  return kExitOk;
}

int cmd_embedding_matrix(const std::string& image_path, const std::string& disp_path,
                         const std::string& mode_str, const std::string& out_path, int channels,
                         double pe_scale, double dscale) {
  const PeMode mode = parse_pe_mode(mode_str);
  if (mode == PeMode::none) throw std::invalid_argument("embedding-matrix: mode must be 2d or 3d");
  const PpmImage image = read_ppm(image_path);
  const PgmImage disp = read_pgm(disp_path);
  const Tensor mat = pixel_pe_matrix(image, disp, mode, channels, pe_scale, dscale);

  PgmImage out;
  out.h = mat.shape()[0];
  out.w = mat.shape()[1];
  out.maxval = 255;
  out.pix.resize(mat.data().size());
  for (std::size_t i = 0; i < out.pix.size(); ++i) out.pix[i] = to_byte_signed(mat.data()[i]);
  write_pgm(out_path, out);
  std::printf("wrote %s (%d positions x %d channels)\n", out_path.c_str(), out.h, out.w);
  return kExitOk;
}

int cmd_gen_data(const std::string& spec_path, std::int64_t count, const std::string& out_dir,
                 const std::vector<std::string>& sets) {
  RunConfig cfg = load_config_with_overrides(spec_path, sets);
  if (count > 0) cfg.train_count = count;
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  write_dataset(out_dir, cfg.scene_spec(), cfg.train_count, cfg.val_count);
  save_run_config(std::filesystem::path(out_dir) / "config.cfg", cfg);
  std::printf("wrote %lld train + %lld val samples to %s\n",
              static_cast<long long>(cfg.train_count), static_cast<long long>(cfg.val_count),
              out_dir.c_str());
  return kExitOk;
}

void check_dataset_matches(const RunConfig& cfg, const std::vector<RgbdSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("dataset split is empty");
  if (samples[0].h != cfg.image_side || samples[0].w != cfg.image_side)
    throw std::invalid_argument("dataset extent " + std::to_string(samples[0].w) + "x" +
                                std::to_string(samples[0].h) + " does not match image_side " +
                                std::to_string(cfg.image_side));
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::vector<std::string>& sets) {
  const RunConfig cfg = load_config_with_overrides(config_path, sets);
  const auto train_split = load_split(data_dir, "train");
  const auto val_split = load_split(data_dir, "val");
  check_dataset_matches(cfg, train_split);

  const TrainResult r = train_model(cfg, train_split, val_split);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  save_run_config(out / "config.cfg", r.config);
  write_text(out / "metrics.csv", r.metrics_csv);
  save_checkpoint(out / "checkpoint", r.model, r.config);
  std::printf("trained %lld steps; final val miou %.4f loss %.4f; outputs in %s\n",
              static_cast<long long>(r.steps_done), r.final_val_miou, r.final_val_loss,
              out_dir.c_str());
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_dir, const std::string& data_dir, const std::string& split) {
  const Checkpoint ck = load_checkpoint(ckpt_dir);
  const auto samples = load_split(data_dir, split);
  check_dataset_matches(ck.config, samples);
  const double dscale = resolve_dscale(ck.config, samples);
  const EvalResult ev = evaluate(ck.model, samples, dscale);

  std::printf("split %s (%zu samples), loss %.6f\n", split.c_str(), samples.size(), ev.loss);
  std::printf("class  iou\n");
  for (std::size_t c = 0; c < ev.iou.size(); ++c) {
    if (ev.iou[c])
      std::printf("%5zu  %.4f\n", c, *ev.iou[c]);
    else
      std::printf("%5zu  -\n", c);
  }
  std::printf(" miou  %.4f\n", ev.miou);
  return kExitOk;
}

int cmd_grad_check(const std::string& module, int seeds, int coords) {
  if (seeds < 1) throw std::invalid_argument("grad-check: need at least one seed");
  bool all_ok = true;
  int checks = 0;
  auto report = [&](const std::string& group, const GradCheckResult& r) {
    ++checks;
    all_ok = all_ok && r.ok();
    std::printf("%-28s max_rel_err %.3e  tol %.0e  %s\n", (group + "/" + r.name).c_str(),
                r.max_rel_err, r.tolerance, r.ok() ? "PASS" : "FAIL");
  };

  for (int s = 0; s < seeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(1000 + s);
    if (module == "all" || module == "tensor")
      for (const auto& r : run_op_gradient_suite(seed)) report("tensor", r);
    if (module == "all" || module == "attention")
      for (const auto& r : run_attention_gradient_suite(seed)) report("attention", r);
    if (module == "all" || module == "fusion")
      for (const auto& r : run_fusion_gradient_suite(seed)) report("fusion", r);
    if (module == "all" || module == "model") report("model", run_model_gradient_check(seed, coords));
  }
  std::printf("grad-check: %d checks, %s\n", checks, all_ok ? "all passed" : "FAILURES above");
  return all_ok ? kExitOk : kExitUsage;
}

int cmd_ablate(const std::string& config_path, const std::string& data_dir,
               const std::string& out_dir, int seeds, int jobs,
               const std::vector<std::string>& sets) {
  const RunConfig base = load_config_with_overrides(config_path, sets);
  const auto train_split = load_split(data_dir, "train");
  const auto val_split = load_split(data_dir, "val");
  check_dataset_matches(base, train_split);

  if (jobs < 1) {
    const unsigned hw = std::thread::hardware_concurrency();
    jobs = hw == 0 ? 1 : static_cast<int>(hw);
  }
  const auto results = run_ablation(base, train_split, val_split, seeds, jobs);

  std::filesystem::create_directories(out_dir);
  const std::filesystem::path out(out_dir);
  save_run_config(out / "config.cfg", base);
  write_text(out / "ablation.csv", render_ablation_csv(results, base.num_classes));
  const std::string table = render_ablation_table(results, base.num_classes);
  write_text(out / "table.txt", table);
  std::fputs(table.c_str(), stdout);

  bool any_failed = false;
  for (const auto& r : results)
    if (r.failed) {
      any_failed = true;
      std::fprintf(stderr, "failed: %s seed %llu: %s\n", r.id.c_str(),
                   static_cast<unsigned long long>(r.seed), r.error.c_str());
    }
  return any_failed ? kExitDivergence : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  setenv("OPENBLAS_NUM_THREADS", "1", 0);
  CLI::App app{"RGB-D segmentation toolkit"};
  app.require_subcommand(1);

  std::string pm_image, pm_disp, pm_target, pm_out, pm_mode = "3d";
  int pm_channels = 64;
  double pm_pe_scale = 512.0, pm_dscale = 0.0;
  auto* pe_map = app.add_subcommand("pe-map", "Cosine-similarity heatmap of one pixel's encoding");
  pe_map->add_option("--image", pm_image, "scene PPM")->required();
  pe_map->add_option("--disparity", pm_disp, "disparity PGM")->required();
  pe_map->add_option("--target", pm_target, "target pixel as u,v")->required();
  pe_map->add_option("--mode", pm_mode, "2d or 3d")->check(CLI::IsMember({"2d", "3d"}));
  pe_map->add_option("--out", pm_out, "output PGM heatmap")->required();
  pe_map->add_option("--channels", pm_channels, "encoding width");
  pe_map->add_option("--pe-scale", pm_pe_scale, "frequency scale");
  pe_map->add_option("--dscale", pm_dscale, "disparity normalizer (0 = map maximum)");

  std::string em_image, em_disp, em_out, em_mode = "3d";
  int em_channels = 64;
  double em_pe_scale = 512.0, em_dscale = 0.0;
  auto* emb = app.add_subcommand("embedding-matrix", "Positions-by-channels encoding image");
  emb->add_option("--image", em_image, "scene PPM")->required();
  emb->add_option("--disparity", em_disp, "disparity PGM")->required();
  emb->add_option("--mode", em_mode, "2d or 3d")->check(CLI::IsMember({"2d", "3d"}));
  emb->add_option("--out", em_out, "output PGM")->required();
  emb->add_option("--channels", em_channels, "encoding width");
  emb->add_option("--pe-scale", em_pe_scale, "frequency scale");
  emb->add_option("--dscale", em_dscale, "disparity normalizer (0 = map maximum)");

  std::string gd_spec, gd_out;
  std::int64_t gd_count = 0;
  std::vector<std::string> gd_sets;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic RGB-D dataset");
  gen->add_option("--spec", gd_spec, "config file")->required();
  gen->add_option("--count", gd_count, "override training sample count");
  gen->add_option("--out", gd_out, "dataset directory")->required();
  gen->add_option("--set", gd_sets, "key=value config override")->take_all();

  std::string tr_config, tr_data, tr_out;
  std::vector<std::string> tr_sets;
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  train->add_option("--config", tr_config, "config file")->required();
  train->add_option("--data", tr_data, "dataset directory")->required();
  train->add_option("--out", tr_out, "run output directory")->required();
  train->add_option("--set", tr_sets, "key=value config override")->take_all();

  std::string ev_ckpt, ev_data, ev_split = "val";
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and print per-class IoU");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "dataset split")->check(CLI::IsMember({"train", "val"}));

  std::string gc_module = "all";
  int gc_seeds = 3, gc_coords = 48;
  auto* gc = app.add_subcommand("grad-check", "Finite-difference verification of the gradients");
  gc->add_option("--module", gc_module, "which battery to run")
      ->check(CLI::IsMember({"all", "tensor", "attention", "fusion", "model"}));
  gc->add_option("--seeds", gc_seeds, "number of random seeds");
  gc->add_option("--coords", gc_coords, "sampled coordinates for the model check");

  std::string ab_config, ab_data, ab_out;
  int ab_seeds = 3, ab_jobs = 0;
  std::vector<std::string> ab_sets;
  auto* ab = app.add_subcommand("ablate", "Train every configuration row across seeds");
  ab->add_option("--config", ab_config, "base config file (defaults when omitted)");
  ab->add_option("--data", ab_data, "dataset directory")->required();
  ab->add_option("--out", ab_out, "output directory")->required();
  ab->add_option("--seeds", ab_seeds, "seeds per configuration");
  ab->add_option("--jobs", ab_jobs, "parallel workers (0 = hardware)");
  ab->add_option("--set", ab_sets, "key=value config override")->take_all();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (pe_map->parsed())
      return cmd_pe_map(pm_image, pm_disp, pm_target, pm_mode, pm_out, pm_channels, pm_pe_scale,
                        pm_dscale);
    if (emb->parsed())
      return cmd_embedding_matrix(em_image, em_disp, em_mode, em_out, em_channels, em_pe_scale,
                                  em_dscale);
    if (gen->parsed()) return cmd_gen_data(gd_spec, gd_count, gd_out, gd_sets);
    if (train->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_sets);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_data, ev_split);
    if (gc->parsed()) return cmd_grad_check(gc_module, gc_seeds, gc_coords);
    if (ab->parsed()) return cmd_ablate(ab_config, ab_data, ab_out, ab_seeds, ab_jobs, ab_sets);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDivergence;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
