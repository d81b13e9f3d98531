#include "seqft/buffer.hpp"

#include <algorithm>

namespace seqft {

std::string to_string(BufferMixing mixing) {
  return mixing == BufferMixing::uniform ? "uniform" : "proportional";
}

BufferMixing parse_buffer_mixing(const std::string& name) {
  if (name == "uniform") return BufferMixing::uniform;
  if (name == "proportional") return BufferMixing::proportional;
  throw ConfigError("unknown buffer mixing '" + name + "' (uniform|proportional)");
}

void Buffer::add_task(const std::string& task_id, std::vector<BufferEntry> entries, int train_size) {
  for (const auto& [id, n] : tasks_) {
    if (id == task_id) throw ContractError("buffer already holds task '" + task_id + "'");
  }
  if (static_cast<int>(entries.size()) > capacity_) {
    throw ContractError("buffer selection of " + std::to_string(entries.size()) + " for task '" +
                        task_id + "' exceeds capacity " + std::to_string(capacity_));
  }
  for (const auto& e : entries) {
    if (e.source_task_id != task_id || e.sample.index < 0 || e.sample.index >= train_size) {
      throw ContractError("buffer entry " + e.source_task_id + "#" + std::to_string(e.sample.index) +
                          " is not a training sample of '" + task_id + "'");
    }
  }
  tasks_.emplace_back(task_id, train_size);
  for (auto& e : entries) entries_.push_back(std::move(e));
}

std::size_t Buffer::count_for(const std::string& task_id) const {
  return static_cast<std::size_t>(std::count_if(entries_.begin(), entries_.end(), [&](const auto& e) {
    return e.source_task_id == task_id;
  }));
}

nlohmann::json Buffer::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : entries_) {
    out.push_back({{"task_id", e.source_task_id},
                   {"index", e.sample.index},
                   {"avg_ssl_loss", e.avg_ssl_loss}});
  }
  return out;
}

Buffer Buffer::from_json(const nlohmann::json& j, int capacity_per_task,
                         const std::function<const Sample&(const std::string&, int)>& resolve,
                         const std::function<int(const std::string&)>& train_size) {
  Buffer out(capacity_per_task);
  std::vector<std::string> order;
  std::vector<std::vector<BufferEntry>> groups;
  for (const auto& item : j) {
    BufferEntry e;
    e.source_task_id = item.at("task_id").get<std::string>();
    e.sample = resolve(e.source_task_id, item.at("index").get<int>());
    e.avg_ssl_loss = item.at("avg_ssl_loss").get<double>();
    auto it = std::find(order.begin(), order.end(), e.source_task_id);
    if (it == order.end()) {
      order.push_back(e.source_task_id);
      groups.emplace_back();
      it = order.end() - 1;
    }
    groups[it - order.begin()].push_back(std::move(e));
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    out.add_task(order[i], std::move(groups[i]), train_size(order[i]));
  }
  return out;
}

std::vector<const Sample*> buffer_batch(const Buffer& buffer, int batch_size, Rng& rng,
                                        BufferMixing mixing) {
  if (buffer.empty()) throw ContractError("buffer_batch: buffer is empty");
  std::vector<const Sample*> out;
  out.reserve(static_cast<std::size_t>(batch_size));
  const auto& entries = buffer.entries_;
  if (mixing == BufferMixing::uniform) {
    for (int i = 0; i < batch_size; ++i) out.push_back(&entries[rng.below(entries.size())].sample);
    return out;
  }
  // Proportional: task by training-set size, then a uniform entry within it.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // [begin, end) per task with entries
  std::vector<double> weights;
  for (const auto& [id, n] : buffer.tasks_) {
    std::size_t b = entries.size(), e = 0;
    for (std::size_t k = 0; k < entries.size(); ++k) {
      if (entries[k].source_task_id == id) {
        b = std::min(b, k);
        e = k + 1;
      }
    }
    if (e > b) {
      ranges.emplace_back(b, e);
      weights.push_back(static_cast<double>(n));
    }
  }
  double total = 0.0;
  for (double w : weights) total += w;
  for (int i = 0; i < batch_size; ++i) {
    double u = rng.uniform() * total;
    std::size_t t = 0;
    while (t + 1 < weights.size() && u >= weights[t]) u -= weights[t++];
    const auto [b, e] = ranges[t];
    out.push_back(&entries[b + rng.below(e - b)].sample);
  }
  return out;
}

}  // namespace seqft
