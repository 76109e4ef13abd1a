#include "dataset.hpp"

#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace mq {

namespace {
uint32_t read_be32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("truncated IDX file while reading " + what);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
}

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;
} // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imf(images_path, std::ios::binary);
    if (!imf) throw std::runtime_error("cannot open IDX image file: " + images_path);
    uint32_t magic = read_be32(imf, "image magic");
    if (magic != kIdxImagesMagic) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "bad IDX image magic: expected 0x%08x, found 0x%08x", kIdxImagesMagic,
                      magic);
        throw std::runtime_error(buf);
    }
    uint32_t n = read_be32(imf, "image count");
    uint32_t h = read_be32(imf, "image rows");
    uint32_t w = read_be32(imf, "image cols");
    std::vector<unsigned char> pixels(static_cast<size_t>(n) * h * w);
    if (!imf.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
        throw std::runtime_error("truncated IDX image file: " + images_path);

    std::ifstream lbf(labels_path, std::ios::binary);
    if (!lbf) throw std::runtime_error("cannot open IDX label file: " + labels_path);
    uint32_t lmagic = read_be32(lbf, "label magic");
    if (lmagic != kIdxLabelsMagic) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "bad IDX label magic: expected 0x%08x, found 0x%08x", kIdxLabelsMagic,
                      lmagic);
        throw std::runtime_error(buf);
    }
    uint32_t ln = read_be32(lbf, "label count");
    if (ln != n)
        throw std::runtime_error("IDX label count " + std::to_string(ln) + " does not match image count " +
                                 std::to_string(n));
    std::vector<unsigned char> raw_labels(ln);
    if (!lbf.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(raw_labels.size())))
        throw std::runtime_error("truncated IDX label file: " + labels_path);

    Dataset ds;
    ds.images = Tensor({static_cast<int64_t>(n), 1, static_cast<int64_t>(h), static_cast<int64_t>(w)});
    for (size_t i = 0; i < pixels.size(); ++i)
        ds.images[static_cast<int64_t>(i)] = static_cast<double>(pixels[i]) / 255.0;
    ds.labels.assign(raw_labels.begin(), raw_labels.end());
    return ds;
}

void write_idx(const std::string& images_path, const std::string& labels_path, const Dataset& ds) {
    std::ofstream imf(images_path, std::ios::binary);
    if (!imf) throw std::runtime_error("cannot write IDX image file: " + images_path);
    int64_t n = ds.images.dim(0), h = ds.images.dim(2), w = ds.images.dim(3);
    write_be32(imf, kIdxImagesMagic);
    write_be32(imf, static_cast<uint32_t>(n));
    write_be32(imf, static_cast<uint32_t>(h));
    write_be32(imf, static_cast<uint32_t>(w));
    for (int64_t i = 0; i < ds.images.size(); ++i) {
        auto byte = static_cast<unsigned char>(std::lround(std::clamp(ds.images[i], 0.0, 1.0) * 255.0));
        imf.put(static_cast<char>(byte));
    }
    std::ofstream lbf(labels_path, std::ios::binary);
    if (!lbf) throw std::runtime_error("cannot write IDX label file: " + labels_path);
    write_be32(lbf, kIdxLabelsMagic);
    write_be32(lbf, static_cast<uint32_t>(ds.labels.size()));
    for (int lab : ds.labels) lbf.put(static_cast<char>(lab));
}

Dataset load_cifar10_binary(const std::string& path, int64_t subset) {
    constexpr int64_t kRecord = 3073;
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("cannot open CIFAR-10 binary file: " + path);
    int64_t bytes = static_cast<int64_t>(f.tellg());
    if (bytes % kRecord != 0)
        throw std::runtime_error("CIFAR-10 binary size " + std::to_string(bytes) +
                                 " is not a multiple of 3073: " + path);
    int64_t n = bytes / kRecord;
    if (n == 0) {
        std::fprintf(stderr, "warning: empty CIFAR-10 binary file %s\n", path.c_str());
        Dataset ds;
        ds.images = Tensor({1, 3, 32, 32});
        ds.labels.clear();
        return ds;
    }
    if (subset > 0) n = std::min(n, subset);
    f.seekg(0);
    Dataset ds;
    ds.images = Tensor({n, 3, 32, 32});
    ds.labels.resize(static_cast<size_t>(n));
    std::vector<unsigned char> rec(kRecord);
    for (int64_t i = 0; i < n; ++i) {
        if (!f.read(reinterpret_cast<char*>(rec.data()), kRecord))
            throw std::runtime_error("truncated CIFAR-10 record " + std::to_string(i));
        ds.labels[static_cast<size_t>(i)] = rec[0];
        for (int64_t p = 0; p < 3072; ++p)
            ds.images[i * 3072 + p] = static_cast<double>(rec[static_cast<size_t>(1 + p)]) / 255.0;
    }
    standardize_per_channel(ds);
    return ds;
}

void standardize_per_channel(Dataset& ds) {
    if (ds.count() == 0) return;
    int64_t n = ds.images.dim(0), C = ds.images.dim(1), plane = ds.images.dim(2) * ds.images.dim(3);
    for (int64_t c = 0; c < C; ++c) {
        double sum = 0.0, sq = 0.0;
        int64_t cnt = n * plane;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t p = 0; p < plane; ++p) {
                double v = ds.images[(i * C + c) * plane + p];
                sum += v;
                sq += v * v;
            }
        double mean = sum / static_cast<double>(cnt);
        double var = sq / static_cast<double>(cnt) - mean * mean;
        double inv = 1.0 / std::sqrt(std::max(var, 1e-12));
        for (int64_t i = 0; i < n; ++i)
            for (int64_t p = 0; p < plane; ++p) {
                double& v = ds.images[(i * C + c) * plane + p];
                v = (v - mean) * inv;
            }
    }
}

Dataset synthetic_dataset(SyntheticKind kind, int64_t n, uint64_t seed) {
    if (n < 2) throw std::invalid_argument("synthetic dataset needs n >= 2");
    Rng rng(seed);
    Dataset ds;
    ds.images = Tensor({n, 2, 1, 1});
    ds.labels.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int label = static_cast<int>(i % 2); // balanced by construction
        double x, y;
        if (kind == SyntheticKind::two_gaussians) {
            double cx = label == 0 ? -1.5 : 1.5;
            double cy = label == 0 ? -1.0 : 1.0;
            x = cx + rng.normal(0.0, 0.6);
            y = cy + rng.normal(0.0, 0.6);
        } else {
            // inner blob vs surrounding ring; not linearly separable
            double theta = rng.uniform(0.0, 2.0 * M_PI);
            double r = label == 0 ? std::abs(rng.normal(0.0, 0.4)) : 1.6 + rng.normal(0.0, 0.2);
            x = r * std::cos(theta);
            y = r * std::sin(theta);
        }
        ds.images[i * 2] = x;
        ds.images[i * 2 + 1] = y;
        ds.labels[static_cast<size_t>(i)] = label;
    }
    return ds;
}

BatchIterator::BatchIterator(const Dataset& ds, int64_t batch_size, uint64_t shuffle_seed)
    : ds_(ds), batch_size_(batch_size), seed_(shuffle_seed) {
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    order_.resize(static_cast<size_t>(ds.count()));
    std::iota(order_.begin(), order_.end(), 0);
}

void BatchIterator::start_epoch(int64_t epoch) {
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng(seed_ + 0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(epoch + 1));
    // Fisher-Yates
    for (int64_t i = static_cast<int64_t>(order_.size()) - 1; i > 0; --i) {
        int64_t j = rng.index(i + 1);
        std::swap(order_[static_cast<size_t>(i)], order_[static_cast<size_t>(j)]);
    }
    cursor_ = 0;
}

int64_t BatchIterator::batches_per_epoch() const {
    return (ds_.count() + batch_size_ - 1) / batch_size_;
}

bool BatchIterator::next(Tensor& images, std::vector<int>& labels) {
    int64_t n = ds_.count();
    if (cursor_ >= n) return false;
    int64_t take = std::min(batch_size_, n - cursor_);
    int64_t C = ds_.images.dim(1), H = ds_.images.dim(2), W = ds_.images.dim(3);
    int64_t feat = C * H * W;
    images = Tensor({take, C, H, W});
    labels.resize(static_cast<size_t>(take));
    for (int64_t i = 0; i < take; ++i) {
        int64_t src = order_[static_cast<size_t>(cursor_ + i)];
        for (int64_t p = 0; p < feat; ++p) images[i * feat + p] = ds_.images[src * feat + p];
        labels[static_cast<size_t>(i)] = ds_.labels[static_cast<size_t>(src)];
    }
    cursor_ += take;
    return true;
}

} // namespace mq
