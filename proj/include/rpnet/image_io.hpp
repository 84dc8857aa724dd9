#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rpnet/tensor.hpp"

namespace rpnet {

// 8-bit raster, row-major, channel-interleaved. channels is 1 (gray) or 3 (rgb).
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(int x, int y, int c) {
        return pixels[std::size_t((x * width + y) * channels + c)];
    }
    std::uint8_t at(int x, int y, int c) const {
        return pixels[std::size_t((x * width + y) * channels + c)];
    }
};

// Binary PGM (P5) / PPM (P6), maxval 255 only. Malformed input raises
// std::runtime_error naming the byte offset; truncated rasters report
// expected vs actual byte counts.
ImageU8 read_pnm(const std::string& path);
ImageU8 parse_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin);

void write_pnm(const std::string& path, const ImageU8& img);

// {X,Y,C} tensor in [0,1] from an 8-bit raster and back.
Tensor image_to_tensor(const ImageU8& img);

// Map export: [0,1] -> [0,255] linearly, values outside the range clamp.
ImageU8 map_to_image(const Tensor& map);
void write_map_pgm(const std::string& path, const Tensor& map);

}  // namespace rpnet
