#include "mpq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"

namespace mpq {

namespace {

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
    return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
           std::uint32_t{b[off + 3]};
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

/// Parses an unsigned-byte IDX header; returns dims and the payload offset.
std::pair<std::vector<std::uint32_t>, std::size_t> idx_header(std::span<const std::uint8_t> b, const std::string& what) {
    if (b.size() < 4 || b[0] != 0 || b[1] != 0) throw ParseError(what + ": not an IDX file");
    if (b[2] != 0x08) throw ParseError(what + ": only unsigned-byte IDX payloads are supported");
    const std::size_t ndim = b[3];
    if (b.size() < 4 + 4 * ndim) throw ParseError(what + ": truncated header");
    std::vector<std::uint32_t> dims(ndim);
    std::size_t total = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        dims[i] = read_be32(b, 4 + 4 * i);
        total *= dims[i];
    }
    const std::size_t off = 4 + 4 * ndim;
    if (b.size() - off != total) throw ParseError(what + ": payload size does not match header dims");
    return {dims, off};
}

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

// ---- synthetic shapes ----

struct Vec2 {
    double x, y;
};

double seg_dist(Vec2 p, Vec2 a, Vec2 b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double t = std::clamp(((p.x - a.x) * vx + (p.y - a.y) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
    return std::hypot(p.x - a.x - t * vx, p.y - a.y - t * vy);
}

/// Distance from the stroke (outlines) or from the filled region (solids).
double shape_dist(int cls, Vec2 q, double r) {
    const double ax = std::abs(q.x), ay = std::abs(q.y);
    switch (cls) {
        case 0: return seg_dist(q, {-r, 0}, {r, 0});
        case 1: return seg_dist(q, {0, -r}, {0, r});
        case 2: return seg_dist(q, {-r * 0.75, -r * 0.75}, {r * 0.75, r * 0.75});
        case 3: return seg_dist(q, {-r * 0.75, r * 0.75}, {r * 0.75, -r * 0.75});
        case 4: return std::abs(std::max(ax, ay) - r * 0.8);
        case 5: return std::max(0.0, std::max(ax, ay) - r * 0.8);
        case 6: return std::min(seg_dist(q, {-r, 0}, {r, 0}), seg_dist(q, {0, -r}, {0, r}));
        case 7:
            return std::min(seg_dist(q, {-r * 0.7, -r * 0.7}, {r * 0.7, r * 0.7}),
                            seg_dist(q, {-r * 0.7, r * 0.7}, {r * 0.7, -r * 0.7}));
        case 8: return std::abs(std::hypot(q.x, q.y) - r * 0.8);
        default: return std::max(0.0, std::hypot(q.x, q.y) - r * 0.8);
    }
}

Dataset render_shapes(std::size_t n, Rng& rng) {
    constexpr int kSide = 28;
    Dataset d;
    d.shape = {1, kSide, kSide};
    d.num_classes = 10;
    d.pixels.resize(n * kSide * kSide);
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(rng.below(10));
        d.labels[i] = cls;
        const double cx = 13.5 + rng.uniform(-4.0, 4.0);
        const double cy = 13.5 + rng.uniform(-4.0, 4.0);
        const double r = rng.uniform(5.0, 9.0);
        const double half = rng.uniform(0.6, 1.3);
        const double ink = rng.uniform(0.5, 1.0);
        const double theta = rng.uniform(-0.3, 0.3);
        const double cs = std::cos(theta), sn = std::sin(theta);
        double* px = d.pixels.data() + i * kSide * kSide;
        for (int y = 0; y < kSide; ++y) {
            for (int x = 0; x < kSide; ++x) {
                const double dx = x - cx, dy = y - cy;
                const Vec2 q{cs * dx + sn * dy, -sn * dx + cs * dy};
                const double cover = std::clamp(half + 0.5 - shape_dist(cls, q, r), 0.0, 1.0);
                const double v = std::clamp(ink * cover + 0.15 * rng.normal(), 0.0, 1.0);
                // snap to the 8-bit grid so IDX export is lossless
                px[y * kSide + x] = to_byte(v) / 255.0;
            }
        }
    }
    return d;
}

}  // namespace

void Dataset::validate() const {
    if (shape.numel() <= 0) throw Error("dataset: empty image shape");
    if (pixels.size() != labels.size() * static_cast<std::size_t>(shape.numel())) {
        throw Error("dataset: pixel count does not match labels");
    }
    for (int l : labels) {
        if (l < 0 || l >= num_classes) throw Error("dataset: label " + std::to_string(l) + " out of range");
    }
}

Dataset subset(const Dataset& d, std::span<const std::size_t> indices) {
    Dataset out;
    out.shape = d.shape;
    out.num_classes = d.num_classes;
    const auto n = static_cast<std::size_t>(d.shape.numel());
    out.pixels.reserve(indices.size() * n);
    for (std::size_t i : indices) {
        const auto img = d.image(i);
        out.pixels.insert(out.pixels.end(), img.begin(), img.end());
        out.labels.push_back(d.labels[i]);
    }
    return out;
}

ProxySplit make_proxy(const Dataset& d, std::size_t n_train, std::size_t n_val, std::uint64_t seed) {
    if (n_train == 0 || n_val == 0) throw Error("proxy dataset: train and validation splits must be non-empty");
    if (n_train + n_val > d.size()) {
        throw Error("proxy dataset: " + std::to_string(n_train + n_val) + " samples requested, " +
                    std::to_string(d.size()) + " available");
    }
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(idx);
    const std::span<const std::size_t> all(idx);
    return {subset(d, all.subspan(0, n_train)), subset(d, all.subspan(n_train, n_val))};
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, int num_classes) {
    const auto ib = detail::read_file(images.string(), "IDX images");
    const auto lb = detail::read_file(labels.string(), "IDX labels");
    const auto [idims, ioff] = idx_header(ib, images.string());
    const auto [ldims, loff] = idx_header(lb, labels.string());
    if (ldims.size() != 1) throw ParseError(labels.string() + ": labels must be 1-D");
    Dataset d;
    if (idims.size() == 3) {
        d.shape = {1, static_cast<int>(idims[1]), static_cast<int>(idims[2])};
    } else if (idims.size() == 4) {
        d.shape = {static_cast<int>(idims[1]), static_cast<int>(idims[2]), static_cast<int>(idims[3])};
    } else {
        throw ParseError(images.string() + ": images must be 3-D or 4-D");
    }
    if (idims[0] != ldims[0]) throw ParseError("IDX image and label counts differ");
    d.num_classes = num_classes;
    d.pixels.resize(ib.size() - ioff);
    for (std::size_t i = 0; i < d.pixels.size(); ++i) d.pixels[i] = ib[ioff + i] / 255.0;
    d.labels.assign(lb.begin() + static_cast<std::ptrdiff_t>(loff), lb.end());
    d.validate();
    return d;
}

void save_idx(const Dataset& d, const std::filesystem::path& images, const std::filesystem::path& labels) {
    std::vector<std::uint8_t> ib{0, 0, 0x08, static_cast<std::uint8_t>(d.shape.c == 1 ? 3 : 4)};
    put_be32(ib, static_cast<std::uint32_t>(d.size()));
    if (d.shape.c != 1) put_be32(ib, static_cast<std::uint32_t>(d.shape.c));
    put_be32(ib, static_cast<std::uint32_t>(d.shape.h));
    put_be32(ib, static_cast<std::uint32_t>(d.shape.w));
    for (double v : d.pixels) ib.push_back(to_byte(v));
    std::vector<std::uint8_t> lb{0, 0, 0x08, 1};
    put_be32(lb, static_cast<std::uint32_t>(d.size()));
    for (int l : d.labels) lb.push_back(static_cast<std::uint8_t>(l));
    detail::write_file(images.string(), ib);
    detail::write_file(labels.string(), lb);
}

Dataset load_raw_dir(const std::filesystem::path& dir) {
    std::ifstream meta_in(dir / "meta.json");
    if (!meta_in) throw ParseError("raw dataset: missing " + (dir / "meta.json").string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("raw dataset meta.json: ") + e.what());
    }
    Dataset d;
    std::size_t n = 0;
    try {
        n = meta.at("n").get<std::size_t>();
        d.shape = {meta.at("c").get<int>(), meta.at("h").get<int>(), meta.at("w").get<int>()};
        d.num_classes = meta.at("num_classes").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("raw dataset meta.json: ") + e.what());
    }
    const auto img = detail::read_file((dir / "images.f32").string(), "raw images");
    const auto lab = detail::read_file((dir / "labels.u8").string(), "raw labels");
    if (img.size() != n * static_cast<std::size_t>(d.shape.numel()) * 4 || lab.size() != n) {
        throw ParseError("raw dataset: file sizes disagree with meta.json");
    }
    detail::ByteReader r(img, "raw images");
    d.pixels.resize(n * static_cast<std::size_t>(d.shape.numel()));
    for (double& v : d.pixels) v = r.get<float>();
    d.labels.assign(lab.begin(), lab.end());
    d.validate();
    return d;
}

void save_raw_dir(const Dataset& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta{{"n", d.size()}, {"c", d.shape.c}, {"h", d.shape.h}, {"w", d.shape.w},
                        {"num_classes", d.num_classes}};
    std::ofstream(dir / "meta.json") << meta.dump(1) << "\n";
    detail::ByteWriter w;
    for (double v : d.pixels) w.put(static_cast<float>(v));
    detail::write_file((dir / "images.f32").string(), w.bytes());
    std::vector<std::uint8_t> lab(d.labels.begin(), d.labels.end());
    detail::write_file((dir / "labels.u8").string(), lab);
}

DatasetSplits load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (fs::exists(dir / "train-images-idx3-ubyte")) {
        DatasetSplits s{load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
                        load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte")};
        return s;
    }
    if (fs::exists(dir / "train" / "meta.json")) return {load_raw_dir(dir / "train"), load_raw_dir(dir / "test")};
    throw ParseError("dataset directory " + dir.string() + " holds neither IDX files nor train/ and test/ raw dirs");
}

void save_dataset_idx(const DatasetSplits& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_idx(d.train, dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
    save_idx(d.test, dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
}

DatasetSplits make_shapes_dataset(std::size_t n_train, std::size_t n_test, std::uint64_t seed) {
    Rng rng(seed);
    DatasetSplits s;
    s.train = render_shapes(n_train, rng);
    s.test = render_shapes(n_test, rng);
    return s;
}

}  // namespace mpq
