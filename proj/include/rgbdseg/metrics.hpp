#pragma once

// Per-class intersection-over-union from pixel confusion counts. Classes
// never observed (zero TP+FP+FN) have undefined IoU and are excluded from
// the mean.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rgbdseg {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes) : tp_(check(num_classes)), fp_(num_classes), fn_(num_classes) {}

  int num_classes() const { return static_cast<int>(tp_.size()); }

  void add(int pred, int label, std::int64_t count = 1) {
    if (pred < 0 || pred >= num_classes() || label < 0 || label >= num_classes())
      throw std::invalid_argument("ConfusionMatrix: class id out of range");
    if (count < 0) throw std::invalid_argument("ConfusionMatrix: negative count");
    if (pred == label) {
      tp_[static_cast<std::size_t>(label)] += count;
    } else {
      fp_[static_cast<std::size_t>(pred)] += count;
      fn_[static_cast<std::size_t>(label)] += count;
    }
  }

  void add_map(std::span<const int> pred, std::span<const int> label) {
    if (pred.size() != label.size())
      throw std::invalid_argument("ConfusionMatrix: prediction/label size mismatch");
    for (std::size_t i = 0; i < pred.size(); ++i) add(pred[i], label[i]);
  }

  void merge(const ConfusionMatrix& other) {
    if (other.num_classes() != num_classes())
      throw std::invalid_argument("ConfusionMatrix: class count mismatch in merge");
    for (std::size_t c = 0; c < tp_.size(); ++c) {
      tp_[c] += other.tp_[c];
      fp_[c] += other.fp_[c];
      fn_[c] += other.fn_[c];
    }
  }

  std::int64_t tp(int c) const { return tp_[idx(c)]; }
  std::int64_t fp(int c) const { return fp_[idx(c)]; }
  std::int64_t fn(int c) const { return fn_[idx(c)]; }

  std::optional<double> iou(int c) const {
    const std::int64_t denom = tp(c) + fp(c) + fn(c);
    if (denom == 0) return std::nullopt;
    return static_cast<double>(tp(c)) / static_cast<double>(denom);
  }

  double miou() const {
    double sum = 0.0;
    int defined = 0;
    for (int c = 0; c < num_classes(); ++c) {
      if (const auto v = iou(c)) {
        sum += *v;
        ++defined;
      }
    }
    if (defined == 0) throw std::invalid_argument("mIoU undefined: no class observed");
    return sum / defined;
  }

 private:
  static int check(int num_classes) {
    if (num_classes < 1) throw std::invalid_argument("ConfusionMatrix: need at least one class");
    return num_classes;
  }
  std::size_t idx(int c) const {
    if (c < 0 || c >= num_classes())
      throw std::invalid_argument("ConfusionMatrix: class id out of range");
    return static_cast<std::size_t>(c);
  }

  std::vector<std::int64_t> tp_, fp_, fn_;
};

}  // namespace rgbdseg
