#include "kervolve/data.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>

#include <zlib.h>

namespace kervolve {

namespace {

constexpr uint32_t kLabelsMagic = 0x00000801;
constexpr uint32_t kImagesMagic = 0x00000803;

uint32_t read_be32(std::span<const uint8_t> bytes, size_t offset) {
    if (offset + 4 > bytes.size()) {
        throw format_error("idx: truncated header at byte offset " + std::to_string(offset));
    }
    return (uint32_t{bytes[offset]} << 24) | (uint32_t{bytes[offset + 1]} << 16) |
           (uint32_t{bytes[offset + 2]} << 8) | uint32_t{bytes[offset + 3]};
}

}  // namespace

IdxArray parse_idx(std::span<const uint8_t> bytes) {
    const uint32_t magic = read_be32(bytes, 0);
    size_t rank = 0;
    if (magic == kLabelsMagic) {
        rank = 1;
    } else if (magic == kImagesMagic) {
        rank = 3;
    } else {
        char buf[16];
        std::snprintf(buf, sizeof buf, "0x%08x", magic);
        throw format_error(std::string("idx: bad magic ") + buf + " at byte offset 0");
    }

    IdxArray out;
    size_t total = 1;
    for (size_t d = 0; d < rank; ++d) {
        const size_t offset = 4 + 4 * d;
        const uint32_t extent = read_be32(bytes, offset);
        if (extent != 0 && total > bytes.size() / extent) {
            throw format_error("idx: dimension overflow at byte offset " + std::to_string(offset));
        }
        total *= extent;
        out.dims.push_back(extent);
    }
    const size_t payload_offset = 4 + 4 * rank;
    if (bytes.size() < payload_offset + total) {
        throw format_error("idx: truncated payload, expected " + std::to_string(total) +
                           " bytes from byte offset " + std::to_string(payload_offset) +
                           ", file has " + std::to_string(bytes.size() - payload_offset));
    }
    out.bytes.assign(bytes.begin() + static_cast<ptrdiff_t>(payload_offset),
                     bytes.begin() + static_cast<ptrdiff_t>(payload_offset + total));
    return out;
}

IdxArray read_idx_file(const std::filesystem::path& path) {
    // gzopen reads plain files too, so one path covers raw and .gz
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) {
        throw format_error("idx: cannot open " + path.string());
    }
    std::vector<uint8_t> bytes;
    uint8_t buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof buf)) > 0) {
        bytes.insert(bytes.end(), buf, buf + n);
    }
    const bool read_error = n < 0;
    gzclose(f);
    if (read_error) {
        throw format_error("idx: decompression error in " + path.string());
    }
    if (bytes.empty()) {
        throw format_error("idx: empty file " + path.string());
    }
    try {
        return parse_idx(bytes);
    } catch (const format_error& e) {
        throw format_error(path.string() + ": " + e.what());
    }
}

Dataset make_dataset(const std::string& name, const IdxArray& images, const IdxArray& labels,
                     size_t subset) {
    if (images.dims.size() != 3) {
        throw format_error("dataset: images file is not a rank-3 IDX array");
    }
    if (labels.dims.size() != 1) {
        throw format_error("dataset: labels file is not a rank-1 IDX array");
    }
    if (images.dims[1] != 28 || images.dims[2] != 28) {
        throw format_error("dataset: expected 28x28 images, got " +
                           std::to_string(images.dims[1]) + "x" + std::to_string(images.dims[2]));
    }
    if (images.dims[0] != labels.dims[0]) {
        throw format_error("dataset: " + std::to_string(images.dims[0]) + " images vs " +
                           std::to_string(labels.dims[0]) + " labels");
    }
    size_t n = images.dims[0];
    if (subset > 0) n = std::min(n, subset);

    Dataset ds;
    ds.name = name;
    ds.labels.assign(labels.bytes.begin(), labels.bytes.begin() + static_cast<ptrdiff_t>(n));
    for (size_t i = 0; i < n; ++i) {
        if (ds.labels[i] > 9) {
            throw format_error("dataset: label " + std::to_string(ds.labels[i]) + " at index " +
                               std::to_string(i) + " outside [0,9]");
        }
    }
    const size_t px = 28 * 28;
    ds.images = TensorT<float>({n, 1, 28, 28});
    for (size_t i = 0; i < n * px; ++i) {
        const float raw = static_cast<float>(images.bytes[i]) / 255.0f;
        ds.images[i] = (raw - static_cast<float>(kPixelMean)) / static_cast<float>(kPixelStd);
    }
    return ds;
}

namespace {

std::filesystem::path find_idx(const std::filesystem::path& data_dir, const std::string& name,
                               const std::string& stem) {
    const std::filesystem::path candidates[] = {
        data_dir / name / stem,
        data_dir / name / (stem + ".gz"),
        data_dir / stem,
        data_dir / (stem + ".gz"),
    };
    for (const auto& p : candidates) {
        if (std::filesystem::exists(p)) return p;
    }
    throw format_error("dataset: '" + stem + "' not found under " + data_dir.string() +
                       " (looked in '" + (data_dir / name).string() + "' and '" +
                       data_dir.string() + "', with and without .gz)");
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& data_dir, const std::string& name,
                     size_t subset) {
    if (!std::filesystem::exists(data_dir)) {
        throw format_error("dataset: data directory does not exist: " + data_dir.string());
    }
    const IdxArray images = read_idx_file(find_idx(data_dir, name, "train-images-idx3-ubyte"));
    const IdxArray labels = read_idx_file(find_idx(data_dir, name, "train-labels-idx1-ubyte"));
    return make_dataset(name, images, labels, subset);
}

std::filesystem::path resolve_data_dir(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("KERVOLVE_DATA_DIR"); env && *env) return env;
    return "data";
}

std::vector<uint32_t> FoldPlan::train_indices(size_t fold) const {
    std::vector<uint32_t> out;
    for (size_t f = 0; f < test_folds.size(); ++f) {
        if (f == fold) continue;
        out.insert(out.end(), test_folds[f].begin(), test_folds[f].end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

FoldPlan kfold_split(size_t n, size_t k, uint64_t seed) {
    if (k < 2 || n < k) {
        throw config_error("kfold: need at least k=2 and n >= k, got n=" + std::to_string(n) +
                           ", k=" + std::to_string(k));
    }
    std::vector<uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    Rng rng(hash_combine(seed, hash_string("kfold")));
    rng.shuffle(order);

    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    // first n % k folds take one extra element
    size_t start = 0;
    for (size_t f = 0; f < k; ++f) {
        const size_t len = n / k + (f < n % k ? 1 : 0);
        plan.test_folds.emplace_back(order.begin() + static_cast<ptrdiff_t>(start),
                                     order.begin() + static_cast<ptrdiff_t>(start + len));
        start += len;
    }
    return plan;
}

std::vector<std::vector<uint32_t>> make_batches(const std::vector<uint32_t>& indices,
                                                size_t batch_size, uint64_t epoch_seed) {
    if (batch_size == 0) throw config_error("batches: batch size must be >= 1");
    std::vector<uint32_t> order = indices;
    Rng rng(hash_combine(epoch_seed, hash_string("batches")));
    rng.shuffle(order);
    std::vector<std::vector<uint32_t>> out;
    for (size_t start = 0; start < order.size(); start += batch_size) {
        const size_t len = std::min(batch_size, order.size() - start);
        out.emplace_back(order.begin() + static_cast<ptrdiff_t>(start),
                         order.begin() + static_cast<ptrdiff_t>(start + len));
    }
    return out;
}

std::vector<uint8_t> gather_labels(const Dataset& ds, std::span<const uint32_t> indices) {
    std::vector<uint8_t> out(indices.size());
    for (size_t i = 0; i < indices.size(); ++i) out[i] = ds.labels[indices[i]];
    return out;
}

}  // namespace kervolve
