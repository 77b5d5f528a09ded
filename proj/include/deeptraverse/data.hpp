#pragma once

// Dataset ingestion. Images are kept as N x C x H x W reals in [0, 1];
// per-channel normalization is applied to batches (or, for evaluation, once
// to a whole dataset) and guarded by a flag so it can never run twice.
//
// Directory layouts:
//   CIFAR-10   data_batch_1.bin .. data_batch_5.bin, test_batch.bin
//              (10000 records of 1 label byte + 3072 planar RGB bytes)
//   CIFAR-100  train.bin, test.bin (1 coarse byte, 1 fine byte, 3072 bytes)
//   MNIST      train-images-idx3-ubyte, train-labels-idx1-ubyte,
//              t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deeptraverse/rng.hpp"
#include "deeptraverse/tensor.hpp"

namespace dt {

enum class Split { Train, Test };
std::string to_string(Split s);

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> std;
};

struct Dataset {
    Tensor images;  // N x C x H x W
    std::vector<int> labels;
    Index num_classes = 0;
    Split split = Split::Train;
    ChannelStats stats;  // used by normalize(); empty until set
    bool normalized = false;

    Index size() const { return static_cast<Index>(labels.size()); }
    Shape image_shape() const { return Shape{images.dim(1), images.dim(2), images.dim(3)}; }
};

// Raw CIFAR batch layout: `label_bytes` leading label bytes per record (1 for
// CIFAR-10, 2 for CIFAR-100 with the fine label last).
struct CifarLayout {
    int label_bytes = 1;
    Index num_classes = 10;

    Index record_bytes() const { return label_bytes + 3072; }
};

// Parses one batch file's bytes. FormatError on a size that is not a whole
// number of records, or on an out-of-range label.
Dataset parse_cifar_batch(std::span<const std::uint8_t> bytes, CifarLayout layout, Split split,
                          Index expected_records = -1);
// Inverse of parse_cifar_batch for the records [begin, begin + count); the
// coarse label of CIFAR-100 records is written as 0.
std::vector<std::uint8_t> serialize_cifar_batch(const Dataset& d, CifarLayout layout, Index begin = 0,
                                                Index count = -1);

// `limit` > 0 keeps only the first `limit` records (every file is still
// checked for presence and size).
Dataset load_cifar10(const std::filesystem::path& dir, Split split, Index limit = -1);
Dataset load_cifar100(const std::filesystem::path& dir, Split split, Index limit = -1);
Dataset load_mnist(const std::filesystem::path& dir, Split split, Index limit = -1);

// IDX parsing for MNIST-style files.
Tensor parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Class-conditional Gaussian images: class k, channel c has mean
// 0.2 + 0.6 * ((k + c) mod classes) / (classes - 1) and standard deviation
// sigma = min(0.05, 0.15 / (classes - 1)), clamped to [0, 1]. Neighbouring class
// means are at least 4 sigma apart. Labels cycle 0, 1, ..., classes - 1.
Dataset synthetic_blobs(Index n, Index classes, Shape image_shape, std::uint64_t seed);
double blob_mean(Index klass, Index channel, Index classes);
double blob_sigma(Index classes);

// Per-channel mean and population standard deviation over all images.
ChannelStats channel_stats(const Dataset& d);

// Subset of the first `n` samples (or all when n <= 0 or n >= size).
Dataset take(const Dataset& d, Index n);

struct Batch {
    Tensor images;
    std::vector<int> labels;
    bool normalized = false;
};

Batch make_batch(const Dataset& d, std::span<const Index> indices);

// (x - mean_c) / std_c per channel. Throws InputError if already normalized.
void normalize(Batch& b, const ChannelStats& stats);
void normalize(Dataset& d);

enum class AugmentPolicy { None, FlipCrop };
AugmentPolicy parse_augment_policy(const std::string& s);
std::string to_string(AugmentPolicy p);

// Per image: horizontal flip with probability 0.5, then a random crop of the
// image zero-padded by 4 pixels on each side. Draw order per image: flip
// decision, row offset, column offset.
void augment(Batch& b, Rng& rng, AugmentPolicy policy);

// Single-image helpers (C x H x W slices of a batch tensor).
void flip_horizontal(Tensor& batch, Index image);
// Replaces image `image` by the window at (dy, dx) of its zero-padded copy;
// dy, dx in [0, 2 pad].
void crop_padded(Tensor& batch, Index image, Index pad, Index dy, Index dx);

}  // namespace dt
