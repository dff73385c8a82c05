#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctxsynth/corpus.hpp"
#include "ctxsynth/rng.hpp"

namespace ctxsynth::augmentation {

struct ShuffleSpec {
  std::size_t window = 30;
  std::size_t stride = 20;
  std::uint64_t seed = 0;

  void validate() const;
};

inline constexpr std::string_view kOriginalSuffix = ":orig";
inline constexpr std::string_view kShuffledSuffix = ":shuf";

/// Window start offsets 0, stride, 2*stride, ... below n.
std::vector<std::size_t> window_starts(std::size_t n, const ShuffleSpec& spec);

/// Generator for one window, keyed by (seed, stream key, window index).
inline SplitMix64 window_rng(const ShuffleSpec& spec, std::uint64_t stream_key, std::size_t window_index) {
  return SplitMix64(derive_seed({spec.seed, stream_key, static_cast<std::uint64_t>(window_index)}));
}

/// Fisher-Yates shuffles each window slice in place, windows left to right.
template <typename T>
void sliding_window_shuffle(std::span<T> items, const ShuffleSpec& spec, std::uint64_t stream_key = 0) {
  spec.validate();
  const auto starts = window_starts(items.size(), spec);
  for (std::size_t w = 0; w < starts.size(); ++w) {
    auto rng = window_rng(spec, stream_key, w);
    const std::size_t len = std::min(spec.window, items.size() - starts[w]);
    auto slice = items.subspan(starts[w], len);
    for (std::size_t i = len; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(rng.below(i));
      using std::swap;
      swap(slice[i - 1], slice[j]);
    }
  }
}

template <typename T>
std::vector<T> sliding_window_shuffled(std::vector<T> items, const ShuffleSpec& spec, std::uint64_t stream_key = 0) {
  sliding_window_shuffle(std::span<T>(items), spec, stream_key);
  return items;
}

/// Returns {original, shuffled} copies of a rag-mode task with ":orig"/":shuf" id suffixes.
/// The shuffle stream is keyed by the task id. Throws Error for document-mode tasks.
std::array<corpus::Task, 2> make_augmented_copies(const corpus::Task& task, const ShuffleSpec& spec);

}  // namespace ctxsynth::augmentation
