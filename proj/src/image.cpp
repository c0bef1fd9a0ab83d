#include "vicl/image.hpp"

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>

namespace vicl {

namespace {

// PPM header token reader: skips whitespace and '#' comments.
int next_header_int(std::istream& in, const std::string& path) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) throw data_error(path + ": malformed PPM header");
    int v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = in.get();
    }
    return v;
}

}  // namespace

Image load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '6') throw data_error(path + ": not a P6 PPM");
    const int w = next_header_int(in, path);
    const int h = next_header_int(in, path);
    const int maxval = next_header_int(in, path);
    if (maxval != 255) throw data_error(path + ": unsupported maxval " + std::to_string(maxval));
    if (w <= 0 || h <= 0) throw data_error(path + ": bad dimensions");
    // header ends with exactly one whitespace byte, already consumed by the int reader
    std::vector<uint8_t> raw((size_t)w * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), (std::streamsize)raw.size());
    if ((size_t)in.gcount() != raw.size()) throw data_error(path + ": truncated pixel data");
    Image img(w, h);
    for (size_t i = 0; i < raw.size(); ++i) img.data[i] = raw[i] / 255.f;
    return img;
}

void save_ppm(const std::string& path, const Image& img) {
    if (img.w <= 0 || img.h <= 0 || img.data.size() != (size_t)img.w * img.h * 3)
        throw data_error("save_ppm: inconsistent image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("cannot write " + path);
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<uint8_t> raw(img.data.size());
    for (size_t i = 0; i < raw.size(); ++i)
        raw[i] = (uint8_t)std::lround(clamp01(img.data[i]) * 255.f);
    out.write(reinterpret_cast<const char*>(raw.data()), (std::streamsize)raw.size());
    if (!out) throw data_error("write failed: " + path);
}

}  // namespace vicl
