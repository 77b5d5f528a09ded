#include "deeptraverse/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "deeptraverse/errors.hpp"

namespace dt {

namespace fs = std::filesystem;

namespace {

constexpr Index kCifarPixels = 3 * 32 * 32;
constexpr Index kCifarRecordsPerFile = 10000;

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t at) {
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

void require_file(const fs::path& p) {
    std::error_code ec;
    if (!fs::is_regular_file(p, ec)) throw IoError("missing dataset file: " + p.string());
}

Dataset concat(std::vector<Dataset> parts) {
    if (parts.size() == 1) return std::move(parts.front());
    Index n = 0;
    for (const Dataset& d : parts) n += d.size();
    const Dataset& first = parts.front();
    Dataset out;
    out.images = Tensor::uninitialized(Shape{n, first.images.dim(1), first.images.dim(2), first.images.dim(3)});
    out.num_classes = first.num_classes;
    out.split = first.split;
    double* dst = out.images.data();
    for (const Dataset& d : parts) {
        dst = std::copy(d.images.data(), d.images.data() + d.images.numel(), dst);
        out.labels.insert(out.labels.end(), d.labels.begin(), d.labels.end());
    }
    return out;
}

Dataset load_cifar_files(const std::vector<fs::path>& files, CifarLayout layout, Split split, Index limit) {
    const auto expected = static_cast<std::uintmax_t>(kCifarRecordsPerFile * layout.record_bytes());
    for (const fs::path& f : files) {
        require_file(f);
        const std::uintmax_t size = fs::file_size(f);
        if (layout.label_bytes == 1 && size != expected) {
            throw FormatError(f.string() + ": expected " + std::to_string(expected) + " bytes, got " +
                              std::to_string(size));
        }
    }
    std::vector<Dataset> parts;
    Index have = 0;
    for (const fs::path& f : files) {
        if (limit > 0 && have >= limit) break;
        const std::vector<std::uint8_t> bytes = read_file(f);
        try {
            Dataset d = parse_cifar_batch(bytes, layout, split);
            if (limit > 0 && have + d.size() > limit) d = take(d, limit - have);
            have += d.size();
            parts.push_back(std::move(d));
        } catch (const FormatError& e) {
            throw FormatError(f.string() + ": " + e.what());
        }
    }
    return concat(std::move(parts));
}

}  // namespace

std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const std::streamoff size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
    if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), size)) {
        throw IoError("cannot read " + path.string());
    }
    return bytes;
}

Dataset parse_cifar_batch(std::span<const std::uint8_t> bytes, CifarLayout layout, Split split,
                          Index expected_records) {
    const Index rec = layout.record_bytes();
    const auto size = static_cast<Index>(bytes.size());
    if (expected_records >= 0 && size != expected_records * rec) {
        throw FormatError("expected " + std::to_string(expected_records * rec) + " bytes, got " +
                          std::to_string(size));
    }
    if (size % rec != 0) {
        throw FormatError(std::to_string(size) + " bytes is not a whole number of " + std::to_string(rec) +
                          "-byte records");
    }
    const Index n = size / rec;
    Dataset d;
    d.split = split;
    d.num_classes = layout.num_classes;
    d.images = Tensor::uninitialized(Shape{n, 3, 32, 32});
    d.labels.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const std::uint8_t* r = bytes.data() + i * rec;
        const int label = r[layout.label_bytes - 1];
        if (label >= layout.num_classes) {
            throw FormatError("record " + std::to_string(i) + " has label " + std::to_string(label) +
                              " (labels must be < " + std::to_string(layout.num_classes) + ")");
        }
        d.labels[static_cast<std::size_t>(i)] = label;
        const std::uint8_t* px = r + layout.label_bytes;
        double* dst = d.images.data() + i * kCifarPixels;
        for (Index j = 0; j < kCifarPixels; ++j) dst[j] = px[j] / 255.0;
    }
    return d;
}

std::vector<std::uint8_t> serialize_cifar_batch(const Dataset& d, CifarLayout layout, Index begin, Index count) {
    if (d.normalized) throw InputError("serialize_cifar_batch: dataset is normalized");
    if (d.images.rank() != 4 || d.images.dim(1) != 3 || d.images.dim(2) != 32 || d.images.dim(3) != 32) {
        throw InputError("serialize_cifar_batch: images must be N x 3 x 32 x 32, got " + d.images.shape().str());
    }
    if (count < 0) count = d.size() - begin;
    if (begin < 0 || begin + count > d.size()) throw InputError("serialize_cifar_batch: record range out of bounds");
    const Index rec = layout.record_bytes();
    std::vector<std::uint8_t> out(static_cast<std::size_t>(count * rec), 0);
    for (Index i = 0; i < count; ++i) {
        std::uint8_t* r = out.data() + i * rec;
        r[layout.label_bytes - 1] = static_cast<std::uint8_t>(d.labels[static_cast<std::size_t>(begin + i)]);
        const double* src = d.images.data() + (begin + i) * kCifarPixels;
        for (Index j = 0; j < kCifarPixels; ++j) {
            const double v = std::round(std::clamp(src[j], 0.0, 1.0) * 255.0);
            r[layout.label_bytes + j] = static_cast<std::uint8_t>(v);
        }
    }
    return out;
}

Dataset load_cifar10(const fs::path& dir, Split split, Index limit) {
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    std::vector<fs::path> files;
    if (split == Split::Train) {
        for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
        files.push_back(dir / "test_batch.bin");
    }
    return load_cifar_files(files, CifarLayout{1, 10}, split, limit);
}

Dataset load_cifar100(const fs::path& dir, Split split, Index limit) {
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    const fs::path file = dir / (split == Split::Train ? "train.bin" : "test.bin");
    return load_cifar_files({file}, CifarLayout{2, 100}, split, limit);
}

Tensor parse_idx_images(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 16) throw FormatError("IDX image file shorter than its 16-byte header");
    const std::uint32_t magic = read_be32(bytes, 0);
    if (magic != 0x00000803) {
        throw FormatError("bad IDX image magic " + hex32(magic) + " (expected 0x00000803)");
    }
    const Index n = read_be32(bytes, 4), h = read_be32(bytes, 8), w = read_be32(bytes, 12);
    const auto expected = static_cast<std::size_t>(16 + n * h * w);
    if (bytes.size() != expected) {
        throw FormatError("IDX image file: expected " + std::to_string(expected) + " bytes, got " +
                          std::to_string(bytes.size()));
    }
    Tensor t = Tensor::uninitialized(Shape{n, 1, h, w});
    for (Index i = 0; i < t.numel(); ++i) t[i] = bytes[static_cast<std::size_t>(16 + i)] / 255.0;
    return t;
}

std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw FormatError("IDX label file shorter than its 8-byte header");
    const std::uint32_t magic = read_be32(bytes, 0);
    if (magic != 0x00000801) {
        throw FormatError("bad IDX label magic " + hex32(magic) + " (expected 0x00000801)");
    }
    const Index n = read_be32(bytes, 4);
    if (bytes.size() != static_cast<std::size_t>(8 + n)) {
        throw FormatError("IDX label file: expected " + std::to_string(8 + n) + " bytes, got " +
                          std::to_string(bytes.size()));
    }
    std::vector<int> labels(bytes.begin() + 8, bytes.end());
    return labels;
}

Dataset load_mnist(const fs::path& dir, Split split, Index limit) {
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    const std::string prefix = split == Split::Train ? "train" : "t10k";
    const fs::path images = dir / (prefix + "-images-idx3-ubyte");
    const fs::path labels = dir / (prefix + "-labels-idx1-ubyte");
    require_file(images);
    require_file(labels);
    Dataset d;
    d.split = split;
    d.num_classes = 10;
    try {
        d.images = parse_idx_images(read_file(images));
        d.labels = parse_idx_labels(read_file(labels));
    } catch (const FormatError& e) {
        throw FormatError(dir.string() + ": " + e.what());
    }
    if (d.images.dim(0) != d.size()) {
        throw FormatError(dir.string() + ": " + std::to_string(d.images.dim(0)) + " images but " +
                          std::to_string(d.size()) + " labels");
    }
    for (std::size_t i = 0; i < d.labels.size(); ++i) {
        if (d.labels[i] >= 10) {
            throw FormatError(labels.string() + ": label " + std::to_string(d.labels[i]) + " at " + std::to_string(i));
        }
    }
    return take(d, limit);
}

double blob_mean(Index klass, Index channel, Index classes) {
    return 0.2 + 0.6 * static_cast<double>((klass + channel) % classes) / static_cast<double>(classes - 1);
}

double blob_sigma(Index classes) { return std::min(0.05, 0.15 / static_cast<double>(classes - 1)); }

Dataset synthetic_blobs(Index n, Index classes, Shape image_shape, std::uint64_t seed) {
    if (n < 1) throw ConfigError("synthetic_blobs: n must be >= 1");
    if (classes < 2) throw ConfigError("synthetic_blobs: classes must be >= 2");
    if (image_shape.rank() != 3) throw ConfigError("synthetic_blobs: image shape must be C x H x W");
    const Index c = image_shape[0], hw = image_shape[1] * image_shape[2];
    Dataset d;
    d.split = Split::Train;
    d.num_classes = classes;
    d.images = Tensor::uninitialized(Shape{n, c, image_shape[1], image_shape[2]});
    d.labels.resize(static_cast<std::size_t>(n));
    Rng rng(seed);
    const double sigma = blob_sigma(classes);
    for (Index i = 0; i < n; ++i) {
        const Index k = i % classes;
        d.labels[static_cast<std::size_t>(i)] = static_cast<int>(k);
        for (Index ch = 0; ch < c; ++ch) {
            const double mu = blob_mean(k, ch, classes);
            double* dst = d.images.data() + (i * c + ch) * hw;
            for (Index j = 0; j < hw; ++j) dst[j] = std::clamp(mu + sigma * rng.normal(), 0.0, 1.0);
        }
    }
    return d;
}

ChannelStats channel_stats(const Dataset& d) {
    const Index n = d.images.dim(0), c = d.images.dim(1), hw = d.images.dim(2) * d.images.dim(3);
    ChannelStats s;
    s.mean.assign(static_cast<std::size_t>(c), 0.0);
    s.std.assign(static_cast<std::size_t>(c), 0.0);
    const double count = static_cast<double>(n * hw);
    for (Index ch = 0; ch < c; ++ch) {
        double sum = 0.0;
        for (Index i = 0; i < n; ++i) {
            const double* src = d.images.data() + (i * c + ch) * hw;
            for (Index j = 0; j < hw; ++j) sum += src[j];
        }
        const double mean = sum / count;
        double sq = 0.0;
        for (Index i = 0; i < n; ++i) {
            const double* src = d.images.data() + (i * c + ch) * hw;
            for (Index j = 0; j < hw; ++j) sq += (src[j] - mean) * (src[j] - mean);
        }
        s.mean[static_cast<std::size_t>(ch)] = mean;
        s.std[static_cast<std::size_t>(ch)] = std::sqrt(sq / count);
    }
    return s;
}

Dataset take(const Dataset& d, Index n) {
    if (n <= 0 || n >= d.size()) return d;
    Dataset out;
    out.num_classes = d.num_classes;
    out.split = d.split;
    out.stats = d.stats;
    out.normalized = d.normalized;
    const Index per = d.images.numel() / d.images.dim(0);
    out.images = Tensor(Shape{n, d.images.dim(1), d.images.dim(2), d.images.dim(3)},
                        std::span<const double>(d.images.data(), static_cast<std::size_t>(n * per)));
    out.labels.assign(d.labels.begin(), d.labels.begin() + n);
    return out;
}

Batch make_batch(const Dataset& d, std::span<const Index> indices) {
    const Index per = d.images.numel() / std::max<Index>(d.images.dim(0), 1);
    Batch b;
    b.images = Tensor::uninitialized(Shape{static_cast<Index>(indices.size()), d.images.dim(1), d.images.dim(2),
                                           d.images.dim(3)});
    b.labels.reserve(indices.size());
    b.normalized = d.normalized;
    double* dst = b.images.data();
    for (Index i : indices) {
        if (i < 0 || i >= d.size()) throw InputError("make_batch: index " + std::to_string(i) + " out of range");
        const double* src = d.images.data() + i * per;
        dst = std::copy(src, src + per, dst);
        b.labels.push_back(d.labels[static_cast<std::size_t>(i)]);
    }
    return b;
}

namespace {

void normalize_images(Tensor& images, const ChannelStats& stats) {
    const Index n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
    if (static_cast<Index>(stats.mean.size()) != c || static_cast<Index>(stats.std.size()) != c) {
        throw ConfigError("normalize: statistics for " + std::to_string(stats.mean.size()) + " channels, images have " +
                          std::to_string(c));
    }
    for (Index ch = 0; ch < c; ++ch) {
        const double sd = stats.std[static_cast<std::size_t>(ch)];
        if (!(sd > 0.0)) throw InputError("normalize: channel " + std::to_string(ch) + " has zero spread");
    }
    for (Index i = 0; i < n; ++i) {
        for (Index ch = 0; ch < c; ++ch) {
            const double mean = stats.mean[static_cast<std::size_t>(ch)];
            const double inv = 1.0 / stats.std[static_cast<std::size_t>(ch)];
            double* p = images.data() + (i * c + ch) * hw;
            for (Index j = 0; j < hw; ++j) p[j] = (p[j] - mean) * inv;
        }
    }
}

}  // namespace

void normalize(Batch& b, const ChannelStats& stats) {
    if (b.normalized) throw InputError("normalize: batch is already normalized");
    normalize_images(b.images, stats);
    b.normalized = true;
}

void normalize(Dataset& d) {
    if (d.normalized) throw InputError("normalize: dataset is already normalized");
    if (d.stats.mean.empty()) throw InputError("normalize: dataset has no normalization statistics");
    normalize_images(d.images, d.stats);
    d.normalized = true;
}

AugmentPolicy parse_augment_policy(const std::string& s) {
    if (s == "none") return AugmentPolicy::None;
    if (s == "flipcrop") return AugmentPolicy::FlipCrop;
    throw ConfigError("unknown augment policy `" + s + "` (expected none or flipcrop)");
}

std::string to_string(AugmentPolicy p) { return p == AugmentPolicy::None ? "none" : "flipcrop"; }

void flip_horizontal(Tensor& batch, Index image) {
    const Index c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    for (Index ch = 0; ch < c; ++ch) {
        for (Index y = 0; y < h; ++y) {
            double* row = batch.data() + ((image * c + ch) * h + y) * w;
            std::reverse(row, row + w);
        }
    }
}

void crop_padded(Tensor& batch, Index image, Index pad, Index dy, Index dx) {
    if (dy < 0 || dy > 2 * pad || dx < 0 || dx > 2 * pad) {
        throw InputError("crop_padded: offset outside [0, " + std::to_string(2 * pad) + "]");
    }
    const Index c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    std::vector<double> plane(static_cast<std::size_t>(h * w));
    for (Index ch = 0; ch < c; ++ch) {
        double* p = batch.data() + (image * c + ch) * h * w;
        std::copy(p, p + h * w, plane.begin());
        for (Index y = 0; y < h; ++y) {
            const Index sy = y + dy - pad;
            for (Index x = 0; x < w; ++x) {
                const Index sx = x + dx - pad;
                const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
                p[y * w + x] = inside ? plane[static_cast<std::size_t>(sy * w + sx)] : 0.0;
            }
        }
    }
}

void augment(Batch& b, Rng& rng, AugmentPolicy policy) {
    if (policy == AugmentPolicy::None) return;
    if (b.normalized) throw InputError("augment: expects raw [0, 1] images, batch is normalized");
    constexpr Index pad = 4;
    for (Index i = 0; i < b.images.dim(0); ++i) {
        if (rng.bernoulli(0.5)) flip_horizontal(b.images, i);
        const auto dy = static_cast<Index>(rng.below(2 * pad + 1));
        const auto dx = static_cast<Index>(rng.below(2 * pad + 1));
        crop_padded(b.images, i, pad, dy, dx);
    }
}

}  // namespace dt
