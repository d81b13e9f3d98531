#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqft/data.hpp"

namespace seqft {

struct BufferEntry {
  Sample sample;
  std::string source_task_id;
  double avg_ssl_loss = 0.0;
};

/// How replay batches draw from the buffer: uniformly over all entries, or by
/// first choosing a source task with probability proportional to its
/// training-set size.
enum class BufferMixing { uniform, proportional };

std::string to_string(BufferMixing mixing);
BufferMixing parse_buffer_mixing(const std::string& name);

/// Replay memory B_t: at most `capacity_per_task` training samples from each
/// task seen so far.
class Buffer {
 public:
  explicit Buffer(int capacity_per_task = 8) : capacity_(capacity_per_task) {}

  /// Adds the selection for one task. Throws if the task is already present,
  /// if the selection exceeds the capacity, or if an entry is not a
  /// training sample of a task with `train_size` samples.
  void add_task(const std::string& task_id, std::vector<BufferEntry> entries, int train_size);

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }
  int capacity_per_task() const { return capacity_; }
  const std::vector<BufferEntry>& entries() const { return entries_; }
  std::size_t count_for(const std::string& task_id) const;

  /// [{task_id, index, avg_ssl_loss}, ...]
  nlohmann::json to_json() const;
  /// Inverse of to_json; `resolve(task_id, index)` supplies samples and
  /// `train_size(task_id)` the owning task's training-set size.
  static Buffer from_json(const nlohmann::json& j, int capacity_per_task,
                          const std::function<const Sample&(const std::string&, int)>& resolve,
                          const std::function<int(const std::string&)>& train_size);

 private:
  friend std::vector<const Sample*> buffer_batch(const Buffer&, int, Rng&, BufferMixing);

  int capacity_;
  std::vector<BufferEntry> entries_;
  std::vector<std::pair<std::string, int>> tasks_;  // (task_id, train size) in insertion order
};

/// Draws `batch_size` entries with replacement.
std::vector<const Sample*> buffer_batch(const Buffer& buffer, int batch_size, Rng& rng,
                                        BufferMixing mixing = BufferMixing::uniform);

}  // namespace seqft
