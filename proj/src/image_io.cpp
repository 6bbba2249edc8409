#include "i2a/image_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "i2a/autodiff.hpp"

namespace i2a::imageio {

namespace {

uint8_t to_byte(double v) {
    double c = std::min(1.0, std::max(0.0, v));
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

uint32_t read_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::string& out, const char type[4], const std::string& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    std::string body(type, 4);
    body += payload;
    out += body;
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
    put_u32(out, static_cast<uint32_t>(crc));
}

std::string zlib_compress(const std::string& raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string out(bound, '\0');
    int rc = compress2(reinterpret_cast<Bytef*>(out.data()), &bound,
                       reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 6);
    if (rc != Z_OK) throw NumericError("png: zlib compression failed");
    out.resize(bound);
    return out;
}

std::string zlib_decompress(const std::string& comp, size_t expected) {
    std::string out(expected, '\0');
    uLongf len = static_cast<uLongf>(expected);
    int rc = uncompress(reinterpret_cast<Bytef*>(out.data()), &len,
                        reinterpret_cast<const Bytef*>(comp.data()), static_cast<uLong>(comp.size()));
    if (rc != Z_OK) throw ParseError("png: zlib decompression failed");
    out.resize(len);
    return out;
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write file: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("short write: " + path);
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::string encode_png(const Tensor& image) {
    require(image.shape.size() == 3, "png: image must be rank-3 HWC");
    int H = image.shape[0], W = image.shape[1], C = image.shape[2];
    require(C == 1 || C == 3, "png: only 1- or 3-channel images are written");
    uint8_t color_type = C == 1 ? 0 : 2;

    std::string raw;
    raw.reserve(static_cast<size_t>(H) * (static_cast<size_t>(W) * C + 1));
    for (int y = 0; y < H; ++y) {
        raw.push_back('\0');  // filter type 0 per scanline
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c)
                raw.push_back(static_cast<char>(to_byte(image.at(y, x, c))));
    }

    std::string png("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    put_u32(ihdr, static_cast<uint32_t>(W));
    put_u32(ihdr, static_cast<uint32_t>(H));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(static_cast<char>(color_type));
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter
    ihdr.push_back(0);  // interlace
    append_chunk(png, "IHDR", ihdr);
    append_chunk(png, "IDAT", zlib_compress(raw));
    append_chunk(png, "IEND", "");
    return png;
}

void save_png(const std::string& path, const Tensor& image) {
    write_file(path, encode_png(image));
}

Tensor load_png(const std::string& path) {
    std::string bytes = read_file(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) != 0)
        throw ParseError("png: bad signature in " + path);

    const uint8_t* p = reinterpret_cast<const uint8_t*>(bytes.data());
    size_t pos = 8, n = bytes.size();
    int W = 0, H = 0, depth = 0, color = -1;
    std::string idat;
    while (pos + 8 <= n) {
        uint32_t len = read_u32(p + pos);
        std::string type(bytes, pos + 4, 4);
        if (pos + 12 + len > n) throw ParseError("png: truncated chunk in " + path);
        const uint8_t* payload = p + pos + 8;
        if (type == "IHDR") {
            W = static_cast<int>(read_u32(payload));
            H = static_cast<int>(read_u32(payload + 4));
            depth = payload[8];
            color = payload[9];
            if (payload[12] != 0) throw ParseError("png: interlaced images unsupported");
        } else if (type == "IDAT") {
            idat.append(reinterpret_cast<const char*>(payload), len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (W <= 0 || H <= 0) throw ParseError("png: missing IHDR in " + path);
    if (depth != 8) throw ParseError("png: only 8-bit depth supported");
    int C;
    switch (color) {
        case 0: C = 1; break;
        case 2: C = 3; break;
        case 4: C = 2; break;
        case 6: C = 4; break;
        default: throw ParseError("png: unsupported color type");
    }

    size_t stride = static_cast<size_t>(W) * C;
    std::string raw = zlib_decompress(idat, static_cast<size_t>(H) * (stride + 1));
    if (raw.size() != static_cast<size_t>(H) * (stride + 1))
        throw ParseError("png: unexpected decompressed size");

    std::vector<uint8_t> pix(static_cast<size_t>(H) * stride);
    const uint8_t* r = reinterpret_cast<const uint8_t*>(raw.data());
    for (int y = 0; y < H; ++y) {
        uint8_t filter = r[static_cast<size_t>(y) * (stride + 1)];
        const uint8_t* line = r + static_cast<size_t>(y) * (stride + 1) + 1;
        uint8_t* out = pix.data() + static_cast<size_t>(y) * stride;
        const uint8_t* prev = y > 0 ? pix.data() + static_cast<size_t>(y - 1) * stride : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= static_cast<size_t>(C) ? out[i - C] : 0;
            int b = prev ? prev[i] : 0;
            int cc = (prev && i >= static_cast<size_t>(C)) ? prev[i - C] : 0;
            int x = line[i];
            switch (filter) {
                case 0: break;
                case 1: x += a; break;
                case 2: x += b; break;
                case 3: x += (a + b) / 2; break;
                case 4: x += paeth(a, b, cc); break;
                default: throw ParseError("png: unknown filter type");
            }
            out[i] = static_cast<uint8_t>(x & 0xff);
        }
    }

    Tensor img = Tensor::zeros({H, W, C});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c)
                img.at(y, x, c) = pix[static_cast<size_t>(y) * stride + static_cast<size_t>(x) * C + c] / 255.0;
    return img;
}

void save_ppm(const std::string& path, const Tensor& image) {
    require(image.shape.size() == 3, "ppm: image must be rank-3 HWC");
    int H = image.shape[0], W = image.shape[1], C = image.shape[2];
    require(C == 1 || C == 3, "ppm: only 1- or 3-channel images are written");
    std::string out = (C == 3 ? "P6\n" : "P5\n");
    out += std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c)
                out.push_back(static_cast<char>(to_byte(image.at(y, x, c))));
    write_file(path, out);
}

Tensor load_ppm(const std::string& path) {
    std::string bytes = read_file(path);
    std::istringstream in(bytes);
    std::string magic;
    in >> magic;
    if (magic != "P6" && magic != "P5") throw ParseError("ppm: unsupported magic in " + path);
    int C = magic == "P6" ? 3 : 1;
    auto next_int = [&]() {
        // Skip whitespace and '#' comments.
        for (;;) {
            in >> std::ws;
            if (in.peek() == '#') {
                std::string line;
                std::getline(in, line);
            } else
                break;
        }
        int v;
        in >> v;
        if (!in) throw ParseError("ppm: malformed header in " + path);
        return v;
    };
    int W = next_int(), H = next_int(), maxv = next_int();
    if (maxv != 255) throw ParseError("ppm: only maxval 255 supported");
    in.get();  // single whitespace after maxval
    size_t need = static_cast<size_t>(H) * W * C;
    size_t off = static_cast<size_t>(in.tellg());
    if (bytes.size() - off < need) throw ParseError("ppm: truncated pixel data in " + path);
    Tensor img = Tensor::zeros({H, W, C});
    const uint8_t* pix = reinterpret_cast<const uint8_t*>(bytes.data()) + off;
    for (size_t i = 0; i < need; ++i) img.data[i] = pix[i] / 255.0;
    return img;
}

Tensor load_image(const std::string& path) {
    if (ends_with(path, ".png")) return load_png(path);
    if (ends_with(path, ".ppm") || ends_with(path, ".pgm")) return load_ppm(path);
    throw InputError("unsupported image format: " + path);
}

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
    if (image.shape.size() == 3 && image.shape[0] == out_h && image.shape[1] == out_w) return image;
    ad::Graph g;
    return g.value(g.resize_bilinear(g.constant(image), out_h, out_w));
}

}  // namespace i2a::imageio
