#include "dfe/error.hpp"
#include "dfe/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace dfe {

namespace fs = std::filesystem;

namespace {

std::string lower_ext(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

Rgb8Image read_png(const fs::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw Error(ErrorCode::Io, "cannot read PNG " + path.string() + ": " + image.message);
    }
    image.format = PNG_FORMAT_RGB;
    Rgb8Image out(static_cast<int>(image.width), static_cast<int>(image.height));
    if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw Error(ErrorCode::Io, "cannot decode PNG " + path.string() + ": " + msg);
    }
    return out;
}

// Skips whitespace and '#' comments between PPM header tokens.
int read_ppm_int(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(c)) {
            in.get();
        } else {
            break;
        }
    }
    int v = -1;
    in >> v;
    return v;
}

Rgb8Image read_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P6" && magic != "P3") throw Error(ErrorCode::Io, path.string() + ": not a P3/P6 PPM file");
    const int w = read_ppm_int(in);
    const int h = read_ppm_int(in);
    const int maxval = read_ppm_int(in);
    if (w <= 0 || h <= 0 || maxval != 255) {
        throw Error(ErrorCode::Io, path.string() + ": unsupported PPM header (need 8-bit, maxval 255)");
    }
    Rgb8Image out(w, h);
    if (magic == "P6") {
        in.get(); // single whitespace after maxval
        in.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(out.data.size()));
        if (in.gcount() != static_cast<std::streamsize>(out.data.size())) {
            throw Error(ErrorCode::Io, path.string() + ": truncated PPM data");
        }
    } else {
        for (auto& v : out.data) {
            const int s = read_ppm_int(in);
            if (s < 0 || s > 255) throw Error(ErrorCode::Io, path.string() + ": bad P3 sample");
            v = static_cast<std::uint8_t>(s);
        }
    }
    return out;
}

} // namespace

Rgb8Image read_image(const fs::path& path) {
    const std::string ext = lower_ext(path);
    if (ext == ".png") return read_png(path);
    if (ext == ".ppm") return read_ppm(path);
    throw Error(ErrorCode::Io, "unsupported image format: " + path.string());
}

void write_png(const Rgb8Image& img, const fs::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, img.data.data(), 0, nullptr)) {
        throw Error(ErrorCode::Io, "cannot write PNG " + path.string() + ": " + image.message);
    }
}

void write_ppm(const Rgb8Image& img, const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
}

std::vector<fs::path> list_image_files(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw Error(ErrorCode::Io, "not a directory: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string ext = lower_ext(entry.path());
        if (ext == ".png" || ext == ".ppm") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    return files;
}

} // namespace dfe
