#include "afr/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace afr {
namespace io {

namespace {

std::string lower_ext(const std::string& path) {
    size_t dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string ext = path.substr(dot + 1);
    for (char& c : ext) c = char(::tolower(c));
    return ext;
}

int pgm_next_token(std::istream& in, std::string& tok) {
    tok.clear();
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (!isspace(c)) break;
    }
    if (c == EOF) return -1;
    do {
        tok.push_back(char(c));
        c = in.get();
    } while (c != EOF && !isspace(c));
    return 0;
}

Image read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image: " + path);
    std::string tok;
    if (pgm_next_token(in, tok) < 0) throw std::runtime_error("truncated PGM: " + path);
    bool binary;
    if (tok == "P5")
        binary = true;
    else if (tok == "P2")
        binary = false;
    else
        throw std::runtime_error("unsupported PGM magic '" + tok + "' in " + path);

    auto next_int = [&]() {
        if (pgm_next_token(in, tok) < 0) throw std::runtime_error("truncated PGM: " + path);
        return std::stoi(tok);
    };
    int w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
        throw std::runtime_error("bad PGM header in " + path);

    Image img(w, h);
    if (binary) {
        // header terminated by exactly one whitespace byte, already consumed
        if (maxval < 256) {
            in.read(reinterpret_cast<char*>(img.px.data()), std::streamsize(img.size()));
            if (!in) throw std::runtime_error("truncated PGM data: " + path);
        } else {
            std::vector<uint8_t> raw(img.size() * 2);
            in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
            if (!in) throw std::runtime_error("truncated PGM data: " + path);
            for (size_t i = 0; i < img.size(); ++i) {
                int v = (raw[2 * i] << 8) | raw[2 * i + 1];
                img.px[i] = uint8_t(v * 255 / maxval);
            }
        }
    } else {
        for (size_t i = 0; i < img.size(); ++i) {
            int v = next_int();
            img.px[i] = uint8_t(std::min(255, v * 255 / maxval));
        }
    }
    return img;
}

void write_pgm(const std::string& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write image: " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.px.data()), std::streamsize(img.size()));
    if (!out) throw std::runtime_error("short write: " + path);
}

Image read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("libpng failed reading " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_expand(png);  // palette -> rgb, gray<8 -> 8, tRNS -> alpha
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    int w = int(png_get_image_width(png, info));
    int h = int(png_get_image_height(png, info));
    int channels = int(png_get_channels(png, info));

    std::vector<uint8_t> row(size_t(w) * channels);
    Image img(w, h);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        if (channels == 1) {
            std::memcpy(&img.px[size_t(y) * w], row.data(), size_t(w));
        } else {
            // BT.601 integer luma
            for (int x = 0; x < w; ++x) {
                int r = row[size_t(x) * channels], g = row[size_t(x) * channels + 1],
                    b = row[size_t(x) * channels + 2];
                img.px[size_t(y) * w + x] = uint8_t((299 * r + 587 * g + 114 * b + 500) / 1000);
            }
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

void write_png(const std::string& path, const Image& img) {
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("cannot write image: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("libpng failed writing " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8,
                 PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(&img.px[size_t(y) * img.width]));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

}  // namespace

Image read_image(const std::string& path) {
    std::string ext = lower_ext(path);
    if (ext == "pgm" || ext == "pnm") return read_pgm(path);
    if (ext == "png") return read_png(path);
    // sniff the magic for extensionless paths
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open image: " + path);
    char magic[2] = {0, 0};
    in.read(magic, 2);
    in.close();
    if (magic[0] == 'P' && (magic[1] == '5' || magic[1] == '2')) return read_pgm(path);
    return read_png(path);
}

void write_image(const std::string& path, const Image& img) {
    if (img.empty()) throw std::runtime_error("refusing to write empty image: " + path);
    std::string ext = lower_ext(path);
    if (ext == "png")
        write_png(path, img);
    else
        write_pgm(path, img);
}

}  // namespace io

Image resize_bilinear(const Image& src, int out_w, int out_h) {
    if (src.empty()) throw std::runtime_error("resize_bilinear: empty image");
    if (src.width == out_w && src.height == out_h) return src;
    Image dst(out_w, out_h);
    double sx = out_w > 1 ? double(src.width - 1) / (out_w - 1) : 0.0;
    double sy = out_h > 1 ? double(src.height - 1) / (out_h - 1) : 0.0;
    for (int y = 0; y < out_h; ++y) {
        double fy = y * sy;
        int y0 = int(fy);
        int y1 = std::min(y0 + 1, src.height - 1);
        double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = x * sx;
            int x0 = int(fx);
            int x1 = std::min(x0 + 1, src.width - 1);
            double wx = fx - x0;
            double v = (1 - wy) * ((1 - wx) * src.at(x0, y0) + wx * src.at(x1, y0)) +
                       wy * ((1 - wx) * src.at(x0, y1) + wx * src.at(x1, y1));
            dst.at(x, y) = uint8_t(std::lround(std::min(255.0, std::max(0.0, v))));
        }
    }
    return dst;
}

Image square_pad_resize(const Image& src, int size, uint8_t fill) {
    if (src.empty()) throw std::runtime_error("square_pad_resize: empty image");
    if (src.width == size && src.height == size) return src;
    int side = std::max(src.width, src.height);
    Image sq(side, side, fill);
    int ox = (side - src.width) / 2;
    int oy = (side - src.height) / 2;
    for (int y = 0; y < src.height; ++y)
        std::memcpy(&sq.at(ox, oy + y), src.px.data() + size_t(y) * src.width,
                    size_t(src.width));
    return resize_bilinear(sq, size, size);
}

}  // namespace afr
