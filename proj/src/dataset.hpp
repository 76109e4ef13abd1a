#pragma once

#include "tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mq {

struct Dataset {
    Tensor images; // count x channels x height x width
    std::vector<int> labels;
    std::string split;

    int64_t count() const { return labels.empty() ? 0 : images.dim(0); }
    int64_t feature_size() const { return images.size() / std::max<int64_t>(1, images.dim(0)); }
};

// IDX (big-endian magic + dims). Pixels scaled by 1/255; no standardization.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const std::string& images_path, const std::string& labels_path, const Dataset& ds);

// CIFAR-10 binary: 3073-byte records (label + 3x32x32 channel-major pixels).
// Per-channel standardization applied after /255. subset > 0 keeps the first
// `subset` records.
Dataset load_cifar10_binary(const std::string& path, int64_t subset = 0);

// In-place per-channel standardization (zero mean, unit variance).
void standardize_per_channel(Dataset& ds);

enum class SyntheticKind { two_gaussians, ring };
Dataset synthetic_dataset(SyntheticKind kind, int64_t n, uint64_t seed);

// Deterministic per-epoch shuffling; the final partial batch is included.
class BatchIterator {
public:
    BatchIterator(const Dataset& ds, int64_t batch_size, uint64_t shuffle_seed);

    void start_epoch(int64_t epoch);
    // Returns false when the epoch is exhausted.
    bool next(Tensor& images, std::vector<int>& labels);
    int64_t batches_per_epoch() const;

private:
    const Dataset& ds_;
    int64_t batch_size_;
    uint64_t seed_;
    std::vector<int64_t> order_;
    int64_t cursor_ = 0;
};

} // namespace mq
