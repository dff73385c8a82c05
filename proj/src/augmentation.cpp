#include "ctxsynth/augmentation.hpp"

namespace ctxsynth::augmentation {

void ShuffleSpec::validate() const {
  if (window < 1 || stride < 1) throw Error("shuffle window and stride must both be at least 1");
}

std::vector<std::size_t> window_starts(std::size_t n, const ShuffleSpec& spec) {
  spec.validate();
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s < n; s += spec.stride) starts.push_back(s);
  return starts;
}

std::array<corpus::Task, 2> make_augmented_copies(const corpus::Task& task, const ShuffleSpec& spec) {
  if (task.mode != corpus::ContextMode::rag) {
    throw Error("task " + task.task_id + ": augmentation applies to rag-mode tasks only");
  }
  corpus::Task original = task;
  corpus::Task shuffled = task;
  original.task_id += kOriginalSuffix;
  shuffled.task_id += kShuffledSuffix;
  sliding_window_shuffle(std::span<std::string>(shuffled.chunk_ids), spec, fnv1a64(task.task_id));
  return {std::move(original), std::move(shuffled)};
}

}  // namespace ctxsynth::augmentation
