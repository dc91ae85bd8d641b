// image_io.hpp — minimal lossless PPM (P6) / PGM (P5) reading and writing.
//
// Images live in channel-planar tensors: color [3, H, W], grayscale [H, W],
// 8-bit. The binary netpbm formats are byte-exact on round trip, which the
// dataset tests rely on (regeneration must be byte-identical).

#ifndef AIM_IMAGE_IO_HPP
#define AIM_IMAGE_IO_HPP

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "aim/tensor.hpp"

namespace aim {

namespace detail {

// Reads the next whitespace/comment-separated header token.
inline std::string pnm_token(std::istream& in, const std::string& path) {
    std::string tok;
    while (true) {
        const int c = in.get();
        AIM_CHECK(c != EOF, IoError, path << ": truncated header");
        if (c == '#') {  // comment to end of line
            std::string rest;
            std::getline(in, rest);
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(char(c));
    }
}

inline int64_t pnm_int(std::istream& in, const std::string& path) {
    const std::string tok = pnm_token(in, path);
    try {
        size_t used = 0;
        const int64_t v = std::stoll(tok, &used);
        AIM_CHECK(used == tok.size() && v > 0, IoError,
                  path << ": bad header value '" << tok << "'");
        return v;
    } catch (const std::logic_error&) {
        AIM_THROW(IoError, path << ": bad header value '" << tok << "'");
    }
}

inline void pnm_read_header(std::istream& in, const std::string& path, const char* magic,
                            int64_t& w, int64_t& h) {
    AIM_CHECK(pnm_token(in, path) == magic, IoError,
              path << ": expected " << magic << " magic");
    w = pnm_int(in, path);
    h = pnm_int(in, path);
    const int64_t maxval = pnm_int(in, path);
    AIM_CHECK(maxval == 255, IoError, path << ": unsupported maxval " << maxval);
    // The header ends with exactly one whitespace byte before the raster.
}

}  // namespace detail

// --- PPM (binary RGB) ------------------------------------------------------

inline void write_ppm(const std::string& path, const Tensor<uint8_t>& img) {
    check_rank(img, 3, "write_ppm");
    AIM_CHECK(img.dim(0) == 3, DimError, "write_ppm: expected [3,H,W], got "
                                         << shape_str(img.shape()));
    const int64_t H = img.dim(1), W = img.dim(2);
    std::ofstream f(path, std::ios::binary);
    AIM_CHECK(f.good(), IoError, "cannot open " << path << " for writing");
    f << "P6\n" << W << " " << H << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(W) * 3);
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
            for (int64_t c = 0; c < 3; ++c) row[size_t(x * 3 + c)] = img[(c * H + y) * W + x];
        }
        f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    AIM_CHECK(f.good(), IoError, "failed writing " << path);
}

inline Tensor<uint8_t> read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    AIM_CHECK(f.good(), IoError, "cannot open " << path);
    int64_t W = 0, H = 0;
    detail::pnm_read_header(f, path, "P6", W, H);
    Tensor<uint8_t> img({3, H, W});
    std::vector<uint8_t> row(static_cast<size_t>(W) * 3);
    for (int64_t y = 0; y < H; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size()));
        AIM_CHECK(f.gcount() == std::streamsize(row.size()), IoError,
                  path << ": truncated raster at row " << y);
        for (int64_t x = 0; x < W; ++x) {
            for (int64_t c = 0; c < 3; ++c) img[(c * H + y) * W + x] = row[size_t(x * 3 + c)];
        }
    }
    return img;
}

// --- PGM (binary grayscale) ------------------------------------------------

inline void write_pgm(const std::string& path, const Tensor<uint8_t>& img) {
    check_rank(img, 2, "write_pgm");
    const int64_t H = img.dim(0), W = img.dim(1);
    std::ofstream f(path, std::ios::binary);
    AIM_CHECK(f.good(), IoError, "cannot open " << path << " for writing");
    f << "P5\n" << W << " " << H << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.data()), std::streamsize(img.size()));
    AIM_CHECK(f.good(), IoError, "failed writing " << path);
}

inline Tensor<uint8_t> read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    AIM_CHECK(f.good(), IoError, "cannot open " << path);
    int64_t W = 0, H = 0;
    detail::pnm_read_header(f, path, "P5", W, H);
    Tensor<uint8_t> img({H, W});
    f.read(reinterpret_cast<char*>(img.data()), std::streamsize(img.size()));
    AIM_CHECK(f.gcount() == std::streamsize(img.size()), IoError, path << ": truncated raster");
    return img;
}

}  // namespace aim

#endif  // AIM_IMAGE_IO_HPP
