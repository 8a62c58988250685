#pragma once

// Training loop, evaluation, and the ablation runner. Batches accumulate
// per-sample gradients on the shared parameter leaves; the disparity map is
// hole-filled and normalized once per sample and feeds both the depth branch
// and the 3d positional encoding.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "rgbdseg/config.hpp"
#include "rgbdseg/metrics.hpp"
#include "rgbdseg/model.hpp"
#include "rgbdseg/optim.hpp"
#include "rgbdseg/posenc.hpp"
#include "rgbdseg/synth.hpp"
#include "rgbdseg/tensor.hpp"

namespace rgbdseg {

inline RgbdSample hflip(const RgbdSample& s) {
  RgbdSample out;
  out.h = s.h;
  out.w = s.w;
  out.rgb.resize(s.rgb.size());
  out.disparity.resize(s.disparity.size());
  out.labels.resize(s.labels.size());
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const std::size_t dst = static_cast<std::size_t>(y) * s.w + x;
      const std::size_t src = static_cast<std::size_t>(y) * s.w + (s.w - 1 - x);
      out.disparity[dst] = s.disparity[src];
      out.labels[dst] = s.labels[src];
      for (int c = 0; c < 3; ++c) out.rgb[3 * dst + static_cast<std::size_t>(c)] = s.rgb[3 * src + static_cast<std::size_t>(c)];
    }
  return out;
}

struct PreparedSample {
  Tensor rgb;                     // [H,W,3]
  std::vector<double> disparity;  // hole-filled, normalized to [0,1]
  std::vector<int> labels;
};

inline PreparedSample prepare_sample(const RgbdSample& s, double dscale) {
  s.validate();
  PreparedSample p;
  p.rgb = Tensor::from_data({s.h, s.w, 3}, s.rgb);
  p.disparity = normalize_disparity(fill_invalid_disparity(s.disparity, s.h, s.w), dscale);
  p.labels = s.labels;
  return p;
}

inline double max_disparity(const std::vector<RgbdSample>& samples) {
  double m = 0.0;
  for (const auto& s : samples)
    for (double d : s.disparity) m = std::max(m, d);
  return m;
}

// Resolves the automatic depth normalization scale against the training split.
inline double resolve_dscale(const RunConfig& cfg, const std::vector<RgbdSample>& train_split) {
  if (cfg.pe_dscale > 0.0) return cfg.pe_dscale;
  const double m = max_disparity(train_split);
  if (!(m > 0.0))
    throw std::invalid_argument("resolve_dscale: training split has no valid disparity");
  return m;
}

namespace detail {

// Temporarily drops requires_grad on the parameters so evaluation forwards
// skip tape construction.
class FrozenParams {
 public:
  explicit FrozenParams(std::vector<Tensor> params) : params_(std::move(params)) {
    for (Tensor& p : params_) p.set_requires_grad(false);
  }
  ~FrozenParams() {
    for (Tensor& p : params_) p.set_requires_grad(true);
  }
  FrozenParams(const FrozenParams&) = delete;
  FrozenParams& operator=(const FrozenParams&) = delete;

 private:
  std::vector<Tensor> params_;
};

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

struct EvalResult {
  double loss = 0.0;
  double miou = 0.0;
  std::vector<std::optional<double>> iou;
};

inline EvalResult evaluate(const SegModel& model, const std::vector<RgbdSample>& samples,
                           double dscale) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty sample list");
  const detail::FrozenParams freeze(param_list(model));
  const int k = model.cfg.num_classes;
  ConfusionMatrix cm(k);
  double loss_sum = 0.0;
  for (const auto& s : samples) {
    const PreparedSample p = prepare_sample(s, dscale);
    const Tensor logits = forward(model, p.rgb, p.disparity);
    const auto n = static_cast<std::int64_t>(p.labels.size());
    loss_sum += cross_entropy(reshape(logits, {static_cast<int>(n), k}),
                              std::span<const int>(p.labels))
                    .item();
    const auto& v = logits.data();
    std::vector<int> pred(p.labels.size());
    for (std::size_t px = 0; px < pred.size(); ++px) {
      int best = 0;
      for (int c = 1; c < k; ++c)
        if (v[px * static_cast<std::size_t>(k) + static_cast<std::size_t>(c)] >
            v[px * static_cast<std::size_t>(k) + static_cast<std::size_t>(best)])
          best = c;
      pred[px] = best;
    }
    cm.add_map(pred, p.labels);
  }
  EvalResult r;
  r.loss = loss_sum / static_cast<double>(samples.size());
  r.miou = cm.miou();
  for (int c = 0; c < k; ++c) r.iou.push_back(cm.iou(c));
  return r;
}

struct TrainResult {
  SegModel model;
  RunConfig config;  // input config with pe_dscale resolved
  std::string metrics_csv;
  double final_val_miou = 0.0;
  double final_val_loss = 0.0;
  std::int64_t steps_done = 0;
};

inline TrainResult train_model(const RunConfig& cfg, const std::vector<RgbdSample>& train_split,
                               const std::vector<RgbdSample>& val_split) {
  cfg.validate();
  if (train_split.empty()) throw std::invalid_argument("train: empty training split");
  const double dscale = resolve_dscale(cfg, train_split);

  TrainResult result;
  result.config = cfg;
  result.config.pe_dscale = dscale;
  result.model = SegModel::init(ModelConfig::from_run_config(cfg), cfg.seed);

  const int k = cfg.num_classes;
  std::string csv = "step,split,loss,miou";
  for (int c = 0; c < k; ++c) csv += ",iou_class" + std::to_string(c);
  csv += "\n";
  const std::string empty_tail(static_cast<std::size_t>(k) + 1, ',');

  auto val_row = [&](std::int64_t step) {
    if (val_split.empty()) return;
    const EvalResult ev = evaluate(result.model, val_split, dscale);
    csv += std::to_string(step) + ",val," + detail::fmt_double(ev.loss) + "," +
           detail::fmt_double(ev.miou);
    for (const auto& iou : ev.iou) csv += iou ? "," + detail::fmt_double(*iou) : ",";
    csv += "\n";
    result.final_val_miou = ev.miou;
    result.final_val_loss = ev.loss;
  };

  if (cfg.steps == 0) {
    val_row(0);
    result.metrics_csv = csv;
    return result;
  }

  Adam opt(param_list(result.model), cfg.lr, cfg.weight_decay);
  Rng rng(derive_seed(cfg.seed, 0x7EA117ull));
  const double inv_batch = 1.0 / cfg.batch_size;

  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    try {
      opt.set_lr(cosine_lr(cfg.lr, step - 1, cfg.steps));
      opt.zero_grad();
      double batch_loss = 0.0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const int idx = rng.uniform_int(0, static_cast<int>(train_split.size()) - 1);
        const bool flip = cfg.augment_flip && rng.bernoulli(0.5);
        const PreparedSample p = prepare_sample(
            flip ? hflip(train_split[static_cast<std::size_t>(idx)])
                 : train_split[static_cast<std::size_t>(idx)],
            dscale);
        const Tensor logits = forward(result.model, p.rgb, p.disparity);
        const Tensor loss =
            cross_entropy(reshape(logits, {static_cast<int>(p.labels.size()), k}),
                          std::span<const int>(p.labels));
        batch_loss += loss.item();
        backward(scale(loss, inv_batch));
      }
      opt.step();
      batch_loss *= inv_batch;
      if (step % cfg.log_every == 0 || step == cfg.steps)
        csv += std::to_string(step) + ",train," + detail::fmt_double(batch_loss) + empty_tail +
               "\n";
      if (step % cfg.eval_every == 0 || step == cfg.steps) val_row(step);
    } catch (const DivergenceError& e) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": " +
                            e.what());
    }
    result.steps_done = step;
  }
  result.metrics_csv = csv;
  return result;
}

// ---------------------------------------------------------------------------
// Ablation: every table row trained across seeds, optionally in parallel.
// Threads share the dataset read-only; each job owns its model and tape.

struct AblationResult {
  std::string id;
  std::string label;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double miou = 0.0;
  double loss = 0.0;
  std::vector<std::optional<double>> iou;
};

inline std::vector<AblationResult> run_ablation(const RunConfig& base,
                                                const std::vector<RgbdSample>& train_split,
                                                const std::vector<RgbdSample>& val_split,
                                                int seeds, int threads) {
  if (seeds < 1) throw std::invalid_argument("run_ablation: need at least one seed");
  if (threads < 1) throw std::invalid_argument("run_ablation: need at least one thread");
  const auto rows = ablation_rows(base);
  const std::size_t jobs = rows.size() * static_cast<std::size_t>(seeds);
  std::vector<AblationResult> results(jobs);

  std::atomic<std::size_t> cursor{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t j = cursor.fetch_add(1);
      if (j >= jobs) return;
      const auto& row = rows[j / static_cast<std::size_t>(seeds)];
      const auto seed_index = static_cast<std::uint64_t>(j % static_cast<std::size_t>(seeds));
      AblationResult& r = results[j];
      r.id = row.id;
      r.label = row.label;
      r.seed = base.seed + seed_index;
      try {
        RunConfig cfg = row.config;
        cfg.seed = r.seed;
        const TrainResult t = train_model(cfg, train_split, val_split);
        r.miou = t.final_val_miou;
        r.loss = t.final_val_loss;
        const EvalResult ev = evaluate(t.model, val_split, t.config.pe_dscale);
        r.iou = ev.iou;
      } catch (const std::exception& e) {
        r.failed = true;
        r.error = e.what();
      }
    }
  };

  const int n = std::min<int>(threads, static_cast<int>(jobs));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  return results;
}

inline std::string render_ablation_csv(const std::vector<AblationResult>& results,
                                       int num_classes) {
  std::string csv = "row,label,seed,status,miou,loss";
  for (int c = 0; c < num_classes; ++c) csv += ",iou_class" + std::to_string(c);
  csv += "\n";
  for (const auto& r : results) {
    csv += r.id + "," + r.label + "," + std::to_string(r.seed) + ",";
    if (r.failed) {
      csv += "failed,,";
      csv += std::string(static_cast<std::size_t>(num_classes), ',');
    } else {
      csv += "ok," + detail::fmt_double(r.miou) + "," + detail::fmt_double(r.loss);
      for (int c = 0; c < num_classes; ++c) {
        const auto& iou = r.iou[static_cast<std::size_t>(c)];
        csv += iou ? "," + detail::fmt_double(*iou) : ",";
      }
    }
    csv += "\n";
  }
  return csv;
}

inline std::string render_ablation_table(const std::vector<AblationResult>& results,
                                         int num_classes) {
  std::string out =
      "NOTE: toy-scale synthetic benchmark; absolute values are not comparable to any published "
      "result.\n";
  char buf[64];
  std::string header = "row            ";
  for (int c = 0; c < num_classes; ++c) {
    std::snprintf(buf, sizeof(buf), "  iou%-3d", c);
    header += buf;
  }
  out += header + "    mIoU  (mean over seeds)\n";

  // Preserve first-appearance order of rows.
  std::vector<std::string> order;
  for (const auto& r : results)
    if (std::find(order.begin(), order.end(), r.id) == order.end()) order.push_back(r.id);

  for (const auto& id : order) {
    std::string label;
    int ok = 0, failed = 0;
    double miou_sum = 0.0;
    std::vector<double> iou_sum(static_cast<std::size_t>(num_classes), 0.0);
    std::vector<int> iou_n(static_cast<std::size_t>(num_classes), 0);
    for (const auto& r : results) {
      if (r.id != id) continue;
      label = r.label;
      if (r.failed) {
        ++failed;
        continue;
      }
      ++ok;
      miou_sum += r.miou;
      for (int c = 0; c < num_classes; ++c)
        if (r.iou[static_cast<std::size_t>(c)]) {
          iou_sum[static_cast<std::size_t>(c)] += *r.iou[static_cast<std::size_t>(c)];
          ++iou_n[static_cast<std::size_t>(c)];
        }
    }
    std::snprintf(buf, sizeof(buf), "%-15s", label.c_str());
    out += buf;
    for (int c = 0; c < num_classes; ++c) {
      if (iou_n[static_cast<std::size_t>(c)] > 0)
        std::snprintf(buf, sizeof(buf), "  %.3f",
                      iou_sum[static_cast<std::size_t>(c)] / iou_n[static_cast<std::size_t>(c)]);
      else
        std::snprintf(buf, sizeof(buf), "  %5s", "-");
      out += buf;
    }
    if (ok > 0) {
      std::snprintf(buf, sizeof(buf), "   %.3f", miou_sum / ok);
      out += buf;
    } else {
      out += "       -";
    }
    if (failed > 0) {
      std::snprintf(buf, sizeof(buf), "  (%d seed%s failed)", failed, failed == 1 ? "" : "s");
      out += buf;
    }
    out += "\n";
  }
  return out;
}

}  // namespace rgbdseg
