#pragma once

// Ring buffer of past per-camera features, newest first. Entries are
// immutable once pushed and shared with readers through windows.

#include "unibev/features.hpp"
#include "unibev/geometry.hpp"
#include "unibev/rig.hpp"

#include <deque>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace unibev {

template <typename T>
struct QueueEntry {
  int step_index = 0;
  std::vector<MultiScaleFeatures<T>> cameras;  // aligned with rig
  Pose ego;                                     // ego -> world at this step
  std::shared_ptr<const CameraRig> rig;
};

template <typename T>
using EntryPtr = std::shared_ptr<const QueueEntry<T>>;

/// Newest first; element 0 is the current step.
template <typename T>
using QueueWindow = std::vector<EntryPtr<T>>;

template <typename T>
class FeatureQueue {
 public:
  explicit FeatureQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("queue capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  void push(EntryPtr<T> entry) {
    if (!entry || !entry->rig) throw std::invalid_argument("queue entry needs features and a rig");
    if (entry->cameras.size() != entry->rig->size()) throw std::invalid_argument("entry camera count != rig size");
    if (!entries_.empty()) {
      const QueueEntry<T>& newest = *entries_.front();
      if (entry->step_index <= newest.step_index) {
        throw std::invalid_argument("out-of-order push: step " + std::to_string(entry->step_index) +
                                    " after step " + std::to_string(newest.step_index));
      }
      if (entry->cameras.size() != newest.cameras.size()) throw std::invalid_argument("camera count changed");
      if (!entry->cameras.empty() && entry->cameras[0].channels() != newest.cameras[0].channels()) {
        throw std::invalid_argument("channel width changed");
      }
    }
    entries_.push_front(std::move(entry));
    while (entries_.size() > capacity_) entries_.pop_back();
  }

  void push(QueueEntry<T> entry) { push(std::make_shared<const QueueEntry<T>>(std::move(entry))); }

  /// Up to `past_steps` past entries plus the current one, newest first.
  QueueWindow<T> window(int past_steps) const {
    if (past_steps < 0) throw std::invalid_argument("window size must be non-negative");
    const std::size_t n = std::min(entries_.size(), static_cast<std::size_t>(past_steps) + 1);
    return QueueWindow<T>(entries_.begin(), entries_.begin() + static_cast<std::ptrdiff_t>(n));
  }

 private:
  std::size_t capacity_;
  std::deque<EntryPtr<T>> entries_;
};

}  // namespace unibev
