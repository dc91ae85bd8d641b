// data.hpp — synthetic spurious-correlation dataset (shape foregrounds on
// class-colored noise backgrounds), manifest reading/writing, sample loading,
// and the crop/flip transforms.
//
// The generator plants an easy background cue: each class has its own strongly
// colored noise texture, while the labeled shape is small with a randomized
// color. On the training split a configurable fraction of samples has
// background family == class (aligned); validation and test are balanced
// across all class × background cells so group-wise accuracy is measurable.

#ifndef AIM_DATA_HPP
#define AIM_DATA_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "aim/image_io.hpp"
#include "aim/rng.hpp"

namespace aim {

// Aligned/misaligned group per class: 2C groups total.
inline int64_t group_of(int64_t label, int64_t background) {
    return 2 * label + (background == label ? 0 : 1);
}

inline std::vector<int64_t> all_groups(int64_t num_classes) {
    std::vector<int64_t> g;
    for (int64_t i = 0; i < 2 * num_classes; ++i) g.push_back(i);
    return g;
}

struct SpuriousSpec {
    int64_t num_classes = 4;  // shape families: disk, triangle, cross, ring
    int64_t image_size = 64;
    double train_correlation = 1.0;  // fraction of train samples with bg == class
    int64_t train_per_class = 1000;
    int64_t val_per_class = 200;
    int64_t test_per_class = 400;

    void validate() const {
        AIM_CHECK(num_classes >= 2 && num_classes <= 4, ConfigError,
                  "data: num_classes must be in [2,4] (one shape family per class), got "
                      << num_classes);
        AIM_CHECK(image_size >= 24, ConfigError,
                  "data: image_size must be >= 24 so shapes stay resolvable, got " << image_size);
        AIM_CHECK(train_correlation >= 0.0 && train_correlation <= 1.0, ConfigError,
                  "data: train_correlation must be in [0,1], got " << train_correlation);
        AIM_CHECK(train_per_class >= 1 && val_per_class >= 1 && test_per_class >= 1, ConfigError,
                  "data: per-class sample counts must be >= 1");
    }
};

struct ManifestRecord {
    std::string image;  // path relative to the manifest's directory
    std::string mask;   // may be empty: sample has no ground-truth mask
    int64_t label = 0;
    int64_t background = 0;
    std::string split;
};

struct Manifest {
    std::string root;
    std::vector<ManifestRecord> records;
};

inline const char* kManifestHeader = "image,mask,label,background,split";

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

namespace detail {

// Strong, well-separated base colors for the background families.
inline const double kBgColors[4][3] = {{0.80, 0.22, 0.22},
                                       {0.20, 0.75, 0.30},
                                       {0.25, 0.35, 0.85},
                                       {0.85, 0.80, 0.25}};

inline uint8_t quantize(double v) {
    v = std::min(std::max(v, 0.0), 1.0);
    return uint8_t(std::llround(v * 255.0));
}

// Rasterizes one shape family into mask (255 on support). The support is the
// exact set of pixels the compositor paints, so mask and foreground coincide.
inline void raster_shape(int64_t family, Tensor<uint8_t>& mask, double cx, double cy, double r) {
    const int64_t S = mask.dim(0);
    for (int64_t y = 0; y < S; ++y) {
        for (int64_t x = 0; x < S; ++x) {
            const double dx = double(x) - cx, dy = double(y) - cy;
            bool in = false;
            switch (family) {
                case 0:  // disk
                    in = dx * dx + dy * dy <= r * r;
                    break;
                case 1: {  // upward isosceles triangle
                    const double ax = cx, ay = cy - r;                 // apex
                    const double bx = cx - 0.9 * r, by = cy + 0.75 * r;
                    const double ex = cx + 0.9 * r, ey = cy + 0.75 * r;
                    const double px = double(x), py = double(y);
                    const double s1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                    const double s2 = (ex - bx) * (py - by) - (ey - by) * (px - bx);
                    const double s3 = (ax - ex) * (py - ey) - (ay - ey) * (px - ex);
                    in = (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
                    break;
                }
                case 2: {  // cross: two perpendicular bars
                    const double bar = 0.33 * r;
                    in = (std::abs(dx) <= bar && std::abs(dy) <= r) ||
                         (std::abs(dy) <= bar && std::abs(dx) <= r);
                    break;
                }
                case 3: {  // ring
                    const double d2 = dx * dx + dy * dy;
                    const double inner = 0.55 * r;
                    in = d2 <= r * r && d2 >= inner * inner;
                    break;
                }
                default: AIM_THROW(ConfigError, "data: no shape family " << family);
            }
            if (in) mask.at(y, x) = 255;
        }
    }
}

// One image + mask. Draw order is fixed so generation is reproducible.
inline void synthesize_sample(int64_t label, int64_t background, int64_t S, Rng& rng,
                              Tensor<uint8_t>& image, Tensor<uint8_t>& mask) {
    image = Tensor<uint8_t>({3, S, S});
    mask = Tensor<uint8_t>({S, S});

    // Geometry: scale then center, kept fully inside with a 2 px margin.
    const double r = std::max(3.0, (0.14 + 0.08 * rng.uniform()) * double(S));
    const double lo = r + 2.0, hi = double(S - 1) - r - 2.0;
    const double cx = lo + (hi - lo) * rng.uniform();
    const double cy = lo + (hi - lo) * rng.uniform();
    raster_shape(label, mask, cx, cy, r);

    // Foreground color: random, re-drawn until it clearly contrasts with the
    // background family's base color so the shape is always visible.
    const double* bg = kBgColors[background];
    double fg[3];
    for (int tries = 0; tries < 100; ++tries) {
        double dist = 0;
        for (double& c : fg) {
            c = 0.05 + 0.9 * rng.uniform();
        }
        for (int c = 0; c < 3; ++c) dist += std::abs(fg[c] - bg[c]);
        if (dist >= 0.9) break;
    }

    const double brightness = 0.06 * (2.0 * rng.uniform() - 1.0);  // per-image jitter
    for (int64_t y = 0; y < S; ++y) {
        for (int64_t x = 0; x < S; ++x) {
            const bool fg_px = mask.at(y, x) != 0;
            for (int64_t c = 0; c < 3; ++c) {
                const double base = fg_px ? fg[c] : bg[c];
                const double amp = fg_px ? 0.04 : 0.07;
                const double v = base + brightness + amp * (2.0 * rng.uniform() - 1.0);
                image[(c * S + y) * S + x] = quantize(v);
            }
        }
    }
}

// Background family list for one (split, class): aligned count is exact for
// train, round-robin balanced for val/test; order is then shuffled.
inline std::vector<int64_t> background_plan(const SpuriousSpec& spec, int64_t split_idx,
                                            int64_t label, int64_t n, uint64_t seed) {
    std::vector<int64_t> bgs;
    bgs.reserve(static_cast<size_t>(n));
    if (split_idx == 0) {
        const int64_t aligned = std::llround(spec.train_correlation * double(n));
        for (int64_t i = 0; i < aligned; ++i) bgs.push_back(label);
        std::vector<int64_t> others;
        for (int64_t b = 0; b < spec.num_classes; ++b) {
            if (b != label) others.push_back(b);
        }
        for (int64_t i = 0; i < n - aligned; ++i) bgs.push_back(others[size_t(i) % others.size()]);
    } else {
        for (int64_t i = 0; i < n; ++i) bgs.push_back(i % spec.num_classes);
    }
    Rng rng = Rng::child(seed, 0xB60000u + uint64_t(split_idx) * 256 + uint64_t(label));
    rng.shuffle(bgs);
    return bgs;
}

inline uint64_t sample_stream(int64_t split_idx, int64_t label, int64_t index) {
    return (uint64_t(split_idx) * 1000003u + uint64_t(label)) * 1000003u + uint64_t(index);
}

}  // namespace detail

// Writes images/, masks/ and manifest.csv under root. Deterministic: the same
// spec and seed produce byte-identical files.
inline Manifest generate_spurious_dataset(const SpuriousSpec& spec, uint64_t seed,
                                          const std::string& root) {
    spec.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(root) / "images", ec);
    AIM_CHECK(!ec, IoError, "cannot create " << root << "/images: " << ec.message());
    fs::create_directories(fs::path(root) / "masks", ec);
    AIM_CHECK(!ec, IoError, "cannot create " << root << "/masks: " << ec.message());

    Manifest m;
    m.root = root;
    const char* split_names[3] = {"train", "val", "test"};
    const int64_t counts[3] = {spec.train_per_class, spec.val_per_class, spec.test_per_class};
    char name[96];
    for (int64_t split_idx = 0; split_idx < 3; ++split_idx) {
        for (int64_t label = 0; label < spec.num_classes; ++label) {
            const int64_t n = counts[split_idx];
            const std::vector<int64_t> bgs =
                detail::background_plan(spec, split_idx, label, n, seed);
            for (int64_t i = 0; i < n; ++i) {
                Rng rng = Rng::child(seed, detail::sample_stream(split_idx, label, i));
                Tensor<uint8_t> image, mask;
                detail::synthesize_sample(label, bgs[size_t(i)], spec.image_size, rng, image,
                                          mask);
                std::snprintf(name, sizeof name, "%s_c%lld_%05lld",
                              split_names[split_idx], static_cast<long long>(label),
                              static_cast<long long>(i));
                ManifestRecord rec;
                rec.image = std::string("images/") + name + ".ppm";
                rec.mask = std::string("masks/") + name + ".pgm";
                rec.label = label;
                rec.background = bgs[size_t(i)];
                rec.split = split_names[split_idx];
                write_ppm((fs::path(root) / rec.image).string(), image);
                write_pgm((fs::path(root) / rec.mask).string(), mask);
                m.records.push_back(rec);
            }
        }
    }

    const std::string manifest_path = (fs::path(root) / "manifest.csv").string();
    std::ofstream f(manifest_path, std::ios::binary);  // binary: LF endings everywhere
    AIM_CHECK(f.good(), IoError, "cannot open " << manifest_path << " for writing");
    f << kManifestHeader << "\n";
    for (const auto& r : m.records) {
        f << r.image << "," << r.mask << "," << r.label << "," << r.background << ","
          << r.split << "\n";
    }
    AIM_CHECK(f.good(), IoError, "failed writing " << manifest_path);
    return m;
}

// ---------------------------------------------------------------------------
// Manifest loading
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t parse_int_field(const std::string& s, const std::string& path, int64_t line) {
    try {
        size_t used = 0;
        const int64_t v = std::stoll(s, &used);
        AIM_CHECK(used == s.size(), IoError, path << " line " << line << ": bad integer '" << s
                                                  << "'");
        return v;
    } catch (const std::logic_error&) {
        AIM_THROW(IoError, path << " line " << line << ": bad integer '" << s << "'");
    }
}

}  // namespace detail

inline Manifest load_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    AIM_CHECK(f.good(), IoError, "cannot open " << path);
    Manifest m;
    m.root = std::filesystem::path(path).parent_path().string();
    if (m.root.empty()) m.root = ".";
    std::string line;
    AIM_CHECK(bool(std::getline(f, line)), IoError, path << ": empty manifest");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    AIM_CHECK(line == kManifestHeader, IoError,
              path << " line 1: expected header '" << kManifestHeader << "', got '" << line
                   << "'");
    int64_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            const size_t comma = line.find(',', start);
            fields.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        AIM_CHECK(fields.size() == 5, IoError,
                  path << " line " << lineno << ": expected 5 fields, got " << fields.size());
        ManifestRecord rec;
        rec.image = fields[0];
        rec.mask = fields[1];
        rec.label = detail::parse_int_field(fields[2], path, lineno);
        rec.background = detail::parse_int_field(fields[3], path, lineno);
        rec.split = fields[4];
        AIM_CHECK(rec.split == "train" || rec.split == "val" || rec.split == "test", IoError,
                  path << " line " << lineno << ": unknown split '" << rec.split << "'");
        AIM_CHECK(!rec.image.empty(), IoError, path << " line " << lineno << ": empty image path");
        m.records.push_back(rec);
    }
    return m;
}

inline std::vector<size_t> split_indices(const Manifest& m, const std::string& split) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < m.records.size(); ++i) {
        if (m.records[i].split == split) idx.push_back(i);
    }
    return idx;
}

// A decoded sample: image in [0,1], binary ground-truth mask when present.
struct Sample {
    Tensor<float> image;    // [3, S, S]
    Tensor<float> gt_mask;  // [S, S], only when has_mask
    bool has_mask = false;
    int64_t label = 0;
    int64_t background = 0;
    int64_t group = 0;
};

inline Sample load_sample(const Manifest& m, size_t index) {
    AIM_CHECK(index < m.records.size(), ArgError,
              "load_sample: record " << index << " out of range (" << m.records.size()
                                     << " records)");
    const ManifestRecord& rec = m.records[index];
    namespace fs = std::filesystem;
    Sample s;
    s.label = rec.label;
    s.background = rec.background;
    s.group = group_of(rec.label, rec.background);
    try {
        const Tensor<uint8_t> raw = read_ppm((fs::path(m.root) / rec.image).string());
        s.image = Tensor<float>(raw.shape());
        for (int64_t i = 0; i < raw.size(); ++i) s.image[i] = float(raw[i]) / 255.0f;
        if (!rec.mask.empty()) {
            const Tensor<uint8_t> mraw = read_pgm((fs::path(m.root) / rec.mask).string());
            AIM_CHECK(mraw.dim(0) == raw.dim(1) && mraw.dim(1) == raw.dim(2), IoError,
                      rec.mask << ": mask shape " << shape_str(mraw.shape())
                               << " does not match image");
            s.gt_mask = Tensor<float>(mraw.shape());
            for (int64_t i = 0; i < mraw.size(); ++i) {
                AIM_CHECK(mraw[i] == 0 || mraw[i] == 255, IoError,
                          rec.mask << ": mask value " << int(mraw[i]) << " is not binary");
                s.gt_mask[i] = mraw[i] ? 1.0f : 0.0f;
            }
            s.has_mask = true;
        }
    } catch (const IoError& e) {
        AIM_THROW(IoError, "record " << index << " (" << rec.image << "): " << e.what());
    }
    return s;
}

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

// Crop window chosen uniformly among the four off-center candidates at
// (±deviation, ±deviation) from the exact center; deviation 0 degenerates to
// the center crop.
inline std::pair<int64_t, int64_t> shifted_crop_origin(int64_t H, int64_t W, int64_t crop,
                                                       int64_t deviation, Rng& rng) {
    AIM_CHECK(crop >= 1 && deviation >= 0, ArgError,
              "shifted_center_crop: bad crop " << crop << " / deviation " << deviation);
    const int64_t base_y = (H - crop) / 2, base_x = (W - crop) / 2;
    const int64_t pick = rng.uniform_int(4);
    const int64_t dy = (pick & 1) ? deviation : -deviation;
    const int64_t dx = (pick & 2) ? deviation : -deviation;
    const int64_t y0 = base_y + dy, x0 = base_x + dx;
    AIM_CHECK(y0 >= 0 && x0 >= 0 && y0 + crop <= H && x0 + crop <= W, ArgError,
              "shifted_center_crop: window (" << y0 << "," << x0 << ")+" << crop
                                              << " outside " << H << "x" << W);
    return {y0, x0};
}

template <typename T>
Tensor<T> crop_chw(const Tensor<T>& img, int64_t y0, int64_t x0, int64_t crop) {
    check_rank(img, 3, "crop_chw");
    const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor<T> out({C, crop, crop});
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t y = 0; y < crop; ++y) {
            for (int64_t x = 0; x < crop; ++x) {
                out[(c * crop + y) * crop + x] = img[(c * H + y0 + y) * W + x0 + x];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> crop_hw(const Tensor<T>& img, int64_t y0, int64_t x0, int64_t crop) {
    check_rank(img, 2, "crop_hw");
    const int64_t W = img.dim(1);
    Tensor<T> out({crop, crop});
    for (int64_t y = 0; y < crop; ++y) {
        for (int64_t x = 0; x < crop; ++x) out.at(y, x) = img[(y0 + y) * W + x0 + x];
    }
    return out;
}

// Crops image and mask identically; the mask may be undefined (skipped).
inline void shifted_center_crop(Sample& s, int64_t crop, int64_t deviation, Rng& rng) {
    const int64_t H = s.image.dim(1), W = s.image.dim(2);
    const auto [y0, x0] = shifted_crop_origin(H, W, crop, deviation, rng);
    s.image = crop_chw(s.image, y0, x0, crop);
    if (s.has_mask) s.gt_mask = crop_hw(s.gt_mask, y0, x0, crop);
}

template <typename T>
Tensor<T> hflip_chw(const Tensor<T>& img) {
    check_rank(img, 3, "hflip_chw");
    const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor<T> out(img.shape());
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t y = 0; y < H; ++y) {
            for (int64_t x = 0; x < W; ++x) {
                out[(c * H + y) * W + x] = img[(c * H + y) * W + (W - 1 - x)];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> hflip_hw(const Tensor<T>& img) {
    check_rank(img, 2, "hflip_hw");
    const int64_t H = img.dim(0), W = img.dim(1);
    Tensor<T> out(img.shape());
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) out.at(y, x) = img.at(y, W - 1 - x);
    }
    return out;
}

}  // namespace aim

#endif  // AIM_DATA_HPP
