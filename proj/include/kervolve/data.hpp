#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kervolve/errors.hpp"
#include "kervolve/rng.hpp"
#include "kervolve/tensor.hpp"

namespace kervolve {

// Standard MNIST normalization of raw [0,1] pixels; shared by Fashion-MNIST
// and recorded in every result file.
inline constexpr double kPixelMean = 0.1307;
inline constexpr double kPixelStd = 0.3081;

/// Decoded IDX container: big-endian magic 0x00000801 (labels, rank 1) or
/// 0x00000803 (images, rank 3), unsigned-byte payload.
struct IdxArray {
    std::vector<size_t> dims;
    std::vector<uint8_t> bytes;
};

/// Parses an in-memory IDX blob; errors name the offending byte offset.
IdxArray parse_idx(std::span<const uint8_t> bytes);

/// Reads an IDX file from disk; gzip-compressed files are accepted
/// transparently.
IdxArray read_idx_file(const std::filesystem::path& path);

/// Images normalized to roughly zero mean / unit variance, labels in [0,9].
struct Dataset {
    std::string name;
    TensorT<float> images;        // [n, 1, 28, 28]
    std::vector<uint8_t> labels;  // same length n

    size_t size() const { return labels.size(); }
};

/// Loads `<data_dir>/<name>/train-images-idx3-ubyte[.gz]` and the matching
/// labels file (falling back to `<data_dir>/` itself). `subset` > 0 keeps
/// only the first `subset` samples.
Dataset load_dataset(const std::filesystem::path& data_dir, const std::string& name,
                     size_t subset = 0);

/// Builds a Dataset from already-decoded IDX arrays (normalizes pixels,
/// validates label range).
Dataset make_dataset(const std::string& name, const IdxArray& images, const IdxArray& labels,
                     size_t subset = 0);

/// Resolves the data directory: explicit flag value, else KERVOLVE_DATA_DIR,
/// else ./data.
std::filesystem::path resolve_data_dir(const std::string& flag_value);

/// k disjoint test folds covering 0..n-1 exactly once, from a seeded shuffle
/// split into contiguous chunks.
struct FoldPlan {
    size_t k = 5;
    uint64_t seed = 0;
    std::vector<std::vector<uint32_t>> test_folds;

    const std::vector<uint32_t>& test_indices(size_t fold) const { return test_folds.at(fold); }
    std::vector<uint32_t> train_indices(size_t fold) const;
};

FoldPlan kfold_split(size_t n, size_t k, uint64_t seed);

/// Seeded per-epoch shuffle of `indices`, chunked into batches; the final
/// short batch is included.
std::vector<std::vector<uint32_t>> make_batches(const std::vector<uint32_t>& indices,
                                                size_t batch_size, uint64_t epoch_seed);

/// Copies the selected samples into a batch tensor of the requested scalar
/// type.
template <class T>
TensorT<T> gather_images(const Dataset& ds, std::span<const uint32_t> indices) {
    const size_t px = 28 * 28;
    TensorT<T> out({indices.size(), 1, 28, 28});
    for (size_t i = 0; i < indices.size(); ++i) {
        const float* src = ds.images.data() + static_cast<size_t>(indices[i]) * px;
        T* dst = out.data() + i * px;
        for (size_t p = 0; p < px; ++p) dst[p] = static_cast<T>(src[p]);
    }
    return out;
}

std::vector<uint8_t> gather_labels(const Dataset& ds, std::span<const uint32_t> indices);

}  // namespace kervolve
