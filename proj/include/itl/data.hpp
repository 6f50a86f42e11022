#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "itl/random.hpp"
#include "itl/tensor.hpp"

namespace itl {

/// Instances (batch-major) with integer class labels.
struct Split {
    Tensor inputs;
    std::vector<int> labels;
    /// Global instance ids; unique across every split of every center.
    std::vector<std::size_t> ids;

    std::size_t size() const { return labels.size(); }
    Split subset(std::span<const std::size_t> rows) const;
};

struct Heterogeneity {
    enum class Kind { Clean, GaussianNoise };
    Kind kind = Kind::Clean;
    double sigma = 0.0;  ///< on the 8-bit [0, 255] scale
};

struct CenterDataset {
    std::size_t center = 0;         ///< position in the training sequence (0-based)
    std::size_t source_center = 0;  ///< original center index, kept through reordering
    std::string name;
    std::size_t num_classes = 0;
    Split train, val, test;
    Heterogeneity heterogeneity;
    /// Width of the nominal value range of an instance; sigma is scaled by value_range / 255.
    double value_range = 1.0;
    std::array<double, 3> fractions{0.64, 0.16, 0.20};

    Shape input_shape() const;
};

/// Class-conditional Gaussian task split IID across centers.
struct SyntheticTaskSpec {
    std::size_t num_classes = 10;
    std::size_t dim = 32;
    std::size_t train_per_class = 80;
    std::size_t val_per_class = 20;
    std::size_t test_per_class = 10;
    std::size_t num_centers = 5;
    std::uint64_t seed = 0;
    /// Each class is a mixture of this many Gaussian blobs.
    std::size_t modes_per_class = 4;
    /// Standard deviation of blob centres around 0.5.
    double center_spread = 0.2;
    /// Within-blob standard deviation.
    double within_std = 0.2;
};

std::vector<CenterDataset> make_synthetic_task(const SyntheticTaskSpec& spec);

/// Per-class (train, val, test) counts from a per-class total and split fractions.
std::array<std::size_t, 3> counts_from_fractions(std::size_t per_class_total, std::array<double, 3> fractions);

/// Zero-mean Gaussian noise with std sigma * value_range / 255 on every split.
/// With `clip`, noisy values are clamped back to [0, value_range].
CenterDataset apply_noise(const CenterDataset& ds, double sigma, std::uint64_t seed, bool clip = false);

/// permutation[i] is the current position of the dataset trained i-th.
std::vector<CenterDataset> reorder_centers(const std::vector<CenterDataset>& datasets,
                                           std::span<const std::size_t> permutation);

/// Shuffled (without replacement) mini-batches covering the split once.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t split_size, std::size_t batch_size, Rng& rng);

/// Class-balanced sampling with replacement: each instance is drawn with
/// probability proportional to 1 / (count of its class).
class BalancedSampler {
public:
    BalancedSampler(std::span<const int> labels, std::size_t num_classes, std::uint64_t seed);

    std::vector<std::size_t> next_batch(std::size_t batch_size);
    /// Batches covering roughly one pass over the split.
    std::vector<std::vector<std::size_t>> epoch(std::size_t split_size, std::size_t batch_size);

    const std::vector<double>& class_weights() const { return class_weights_; }

private:
    std::vector<double> class_weights_;
    std::discrete_distribution<std::size_t> dist_;
    Rng rng_;
};

/// Training splits of all centers pooled (joint baseline).
Split pool_splits(const std::vector<CenterDataset>& centers, Split CenterDataset::*member);

// ---- external datasets -----------------------------------------------------

enum class ExternalFormat { CsvLabels, RawTensorDir };

/// Reads every center declared in a JSON manifest, in manifest order.
std::vector<CenterDataset> load_external(const std::filesystem::path& manifest, ExternalFormat format);

/// Writes datasets plus manifest so that load_external reproduces them.
void export_external(const std::vector<CenterDataset>& datasets, const std::filesystem::path& manifest,
                     ExternalFormat format);

} // namespace itl
