#include "rpnet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace rpnet {

namespace {

[[noreturn]] void parse_fail(const std::string& origin, std::size_t offset,
                             const std::string& what) {
    throw std::runtime_error(origin + ": " + what + " at byte " + std::to_string(offset));
}

struct Cursor {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;
    const std::string& origin;

    bool eof() const { return pos >= bytes.size(); }
    std::uint8_t peek() const { return bytes[pos]; }

    void skip_space_and_comments() {
        while (!eof()) {
            const std::uint8_t c = bytes[pos];
            if (c == '#') {
                while (!eof() && bytes[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    int read_int(const char* field) {
        skip_space_and_comments();
        if (eof()) parse_fail(origin, pos, std::string("missing ") + field);
        if (bytes[pos] < '0' || bytes[pos] > '9')
            parse_fail(origin, pos, std::string("expected digit for ") + field);
        long v = 0;
        while (!eof() && bytes[pos] >= '0' && bytes[pos] <= '9') {
            v = v * 10 + (bytes[pos] - '0');
            if (v > 1 << 26) parse_fail(origin, pos, std::string(field) + " out of range");
            ++pos;
        }
        return int(v);
    }
};

}  // namespace

ImageU8 parse_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
    Cursor cur{bytes, 0, origin};
    if (bytes.size() < 2) parse_fail(origin, 0, "not a PNM file (too short)");
    const char m0 = char(bytes[0]), m1 = char(bytes[1]);
    if (m0 != 'P' || (m1 != '5' && m1 != '6'))
        parse_fail(origin, 0, "bad magic (want P5 or P6)");
    cur.pos = 2;
    ImageU8 img;
    img.channels = (m1 == '5') ? 1 : 3;
    img.width = cur.read_int("width");
    img.height = cur.read_int("height");
    if (img.width <= 0 || img.height <= 0)
        parse_fail(origin, cur.pos, "non-positive dimensions");
    const int maxval = cur.read_int("maxval");
    if (maxval != 255) parse_fail(origin, cur.pos, "unsupported maxval " + std::to_string(maxval));
    if (cur.eof()) parse_fail(origin, cur.pos, "missing raster");
    const std::uint8_t sep = bytes[cur.pos];
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n')
        parse_fail(origin, cur.pos, "expected single whitespace before raster");
    ++cur.pos;
    const std::size_t expected =
        std::size_t(img.width) * std::size_t(img.height) * std::size_t(img.channels);
    const std::size_t actual = bytes.size() - cur.pos;
    if (actual < expected)
        parse_fail(origin, cur.pos,
                   "truncated raster: expected " + std::to_string(expected) + " bytes, got " +
                       std::to_string(actual));
    img.pixels.assign(bytes.begin() + long(cur.pos), bytes.begin() + long(cur.pos + expected));
    return img;
}

ImageU8 read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open for reading");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return parse_pnm(bytes, path);
}

void write_pnm(const std::string& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3)
        throw std::invalid_argument(path + ": PNM supports 1 or 3 channels, got " +
                                    std::to_string(img.channels));
    const std::size_t expected =
        std::size_t(img.width) * std::size_t(img.height) * std::size_t(img.channels);
    if (img.pixels.size() != expected)
        throw std::invalid_argument(path + ": pixel buffer size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out << (img.channels == 1 ? "P5" : "P6") << "\n"
        << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), long(img.pixels.size()));
    if (!out) throw std::runtime_error(path + ": write failed");
}

Tensor image_to_tensor(const ImageU8& img) {
    std::vector<Real> data(img.pixels.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = Real(img.pixels[i]) / Real(255);
    return Tensor::from({img.height, img.width, img.channels}, std::move(data));
}

ImageU8 map_to_image(const Tensor& map) {
    if (map.rank() != 2 && !(map.rank() == 3 && map.dim(2) == 1))
        throw std::invalid_argument("map_to_image: expected {X,Y} or {X,Y,1}, got " +
                                    shape_str(map.shape()));
    ImageU8 img;
    img.height = map.dim(0);
    img.width = map.dim(1);
    img.channels = 1;
    img.pixels.resize(map.numel());
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const Real v = std::clamp(map.values()[i], Real(0), Real(1));
        img.pixels[i] = std::uint8_t(std::lround(double(v) * 255.0));
    }
    return img;
}

void write_map_pgm(const std::string& path, const Tensor& map) {
    write_pnm(path, map_to_image(map));
}

}  // namespace rpnet
