#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mpq/graph.hpp"

namespace mpq {

/// Labeled images, pixel values in [0, 1], stored contiguously (n x c x h x w).
struct Dataset {
    Shape shape;
    int num_classes = 0;
    std::vector<double> pixels;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::span<const double> image(std::size_t i) const {
        const auto n = static_cast<std::size_t>(shape.numel());
        return {pixels.data() + i * n, n};
    }

    /// Throws Error on inconsistent sizes or labels outside [0, num_classes).
    void validate() const;
};

struct DatasetSplits {
    Dataset train;
    Dataset test;
};

/// Random train/validation subsets drawn without replacement from one pool.
struct ProxySplit {
    Dataset train;
    Dataset val;
};

Dataset subset(const Dataset& d, std::span<const std::size_t> indices);

/// Disjoint seeded subsets; throws Error when a split would be empty or the
/// pool is too small.
ProxySplit make_proxy(const Dataset& d, std::size_t n_train, std::size_t n_val, std::uint64_t seed);

/// MNIST IDX files (big-endian dims, unsigned byte pixels scaled by 1/255).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes = 10);
void save_idx(const Dataset& d, const std::filesystem::path& images, const std::filesystem::path& labels);

/// Directory-of-raw-tensors: meta.json {n, c, h, w, num_classes},
/// images.f32 (little-endian float32) and labels.u8.
Dataset load_raw_dir(const std::filesystem::path& dir);
void save_raw_dir(const Dataset& d, const std::filesystem::path& dir);

/// Loads a dataset directory holding either MNIST IDX files
/// (train-images-idx3-ubyte, t10k-...) or `train/` and `test/` raw-tensor dirs.
DatasetSplits load_dataset(const std::filesystem::path& dir);
/// Writes both splits as IDX files.
void save_dataset_idx(const DatasetSplits& d, const std::filesystem::path& dir);

/// Synthetic 10-class 28x28 line-art dataset (bars, diagonals, squares,
/// crosses, rings, disks) with position jitter and pixel noise.
DatasetSplits make_shapes_dataset(std::size_t n_train, std::size_t n_test, std::uint64_t seed);

}  // namespace mpq
