#include "flowood/image_io.hpp"

#include "flowood/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace flowood {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::string lower_ext(const std::string& path) {
    const std::size_t dot = path.find_last_of('.');
    if (dot == std::string::npos) return "";
    std::string ext = path.substr(dot + 1);
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

unsigned char quantize(double v) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    return static_cast<unsigned char>(std::lround(clamped * 255.0));
}

void check_writable_shape(const Tensor& img) {
    if (img.rank() != 3 || (img.shape()[0] != 1 && img.shape()[0] != 3))
        throw ShapeError("image write expects [C,H,W] with 1 or 3 channels, got " + shape_str(img.shape()));
}

} // namespace

Image read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image: " + path);

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
        throw IoError("not a PNG file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("libpng init failed");
    }

    std::vector<unsigned char> buffer;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("PNG decode failed: " + path);
    }

    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_byte color_type = png_get_color_type(png, info);
    const png_byte bit_depth = png_get_bit_depth(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (bit_depth == 16) png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const std::int64_t width = png_get_image_width(png, info);
    const std::int64_t height = png_get_image_height(png, info);
    const std::int64_t channels = png_get_channels(png, info);
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unsupported PNG channel layout in " + path);
    }

    const std::size_t rowbytes = png_get_rowbytes(png, info);
    buffer.resize(rowbytes * static_cast<std::size_t>(height));
    rows.resize(static_cast<std::size_t>(height));
    for (std::int64_t y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + rowbytes * static_cast<std::size_t>(y);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img;
    img.channels = channels;
    img.height = height;
    img.width = width;
    img.pixels.resize(static_cast<std::size_t>(channels * height * width));
    for (std::int64_t y = 0; y < height; ++y)
        for (std::int64_t x = 0; x < width; ++x)
            for (std::int64_t c = 0; c < channels; ++c)
                img.at(c, y, x) = buffer[static_cast<std::size_t>(y) * rowbytes +
                                         static_cast<std::size_t>(x * channels + c)];
    return img;
}

namespace {

// Next integer token in a PPM header; '#' comments run to end of line.
long ppm_int(std::istream& is, const std::string& path) {
    int ch = is.get();
    while (ch != EOF) {
        if (ch == '#') {
            while (ch != EOF && ch != '\n') ch = is.get();
        } else if (std::isspace(ch)) {
            ch = is.get();
        } else {
            break;
        }
    }
    if (ch == EOF || !std::isdigit(ch)) throw IoError("malformed PPM header in " + path);
    long value = 0;
    while (ch != EOF && std::isdigit(ch)) {
        value = value * 10 + (ch - '0');
        ch = is.get();
    }
    if (ch != EOF) is.unget();
    return value;
}

} // namespace

Image read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image: " + path);

    char p, six;
    is.get(p);
    is.get(six);
    if (p != 'P' || six != '6') throw IoError("not a binary PPM (P6) file: " + path);

    const long width = ppm_int(is, path);
    const long height = ppm_int(is, path);
    const long maxval = ppm_int(is, path);
    if (width <= 0 || height <= 0) throw IoError("bad PPM dimensions in " + path);
    if (maxval != 255) throw IoError("PPM maxval must be 255 in " + path);
    is.get(); // single whitespace byte before the raster

    std::vector<unsigned char> raw(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw IoError("truncated PPM raster in " + path);

    Image img;
    img.channels = 3;
    img.height = height;
    img.width = width;
    img.pixels.resize(raw.size());
    for (std::int64_t y = 0; y < height; ++y)
        for (std::int64_t x = 0; x < width; ++x)
            for (std::int64_t c = 0; c < 3; ++c)
                img.at(c, y, x) = raw[(static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                                       static_cast<std::size_t>(x)) * 3 + static_cast<std::size_t>(c)];
    return img;
}

Image read_image(const std::string& path) {
    const std::string ext = lower_ext(path);
    if (ext == "png") return read_png(path);
    if (ext == "ppm") return read_ppm(path);
    throw IoError("unsupported image extension (.png and .ppm are accepted): " + path);
}

void write_png(const std::string& path, const Tensor& img) {
    check_writable_shape(img);
    const std::int64_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("libpng init failed");
    }

    std::vector<unsigned char> buffer(static_cast<std::size_t>(H * W * C));
    std::vector<png_bytep> rows(static_cast<std::size_t>(H));
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encode failed: " + path);
    }

    png_init_io(png, fp.get());
    // Pinned encoder settings keep output byte-reproducible across runs.
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);

    auto data = img.data();
    for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t x = 0; x < W; ++x)
            for (std::int64_t c = 0; c < C; ++c)
                buffer[static_cast<std::size_t>((y * W + x) * C + c)] =
                    quantize(data[static_cast<std::size_t>((c * H + y) * W + x)]);
        rows[static_cast<std::size_t>(y)] = buffer.data() + static_cast<std::size_t>(y * W * C);
    }
    png_set_rows(png, info, rows.data());
    png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_ppm(const std::string& path, const Tensor& img) {
    check_writable_shape(img);
    const std::int64_t C = img.shape()[0], H = img.shape()[1], W = img.shape()[2];

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "P6\n" << W << " " << H << "\n255\n";
    auto data = img.data();
    for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x)
            for (std::int64_t c = 0; c < 3; ++c) {
                const std::int64_t src_c = C == 1 ? 0 : c;
                os.put(static_cast<char>(quantize(data[static_cast<std::size_t>((src_c * H + y) * W + x)])));
            }
    if (!os) throw IoError("write failed: " + path);
}

Image convert_channels(const Image& src, std::int64_t channels) {
    if (channels != 1 && channels != 3) throw ValueError("convert_channels supports 1 or 3 channels");
    if (src.channels == channels) return src;

    Image out;
    out.channels = channels;
    out.height = src.height;
    out.width = src.width;
    out.pixels.resize(static_cast<std::size_t>(channels * src.height * src.width));
    for (std::int64_t y = 0; y < src.height; ++y)
        for (std::int64_t x = 0; x < src.width; ++x) {
            if (channels == 3) { // replicate gray
                for (std::int64_t c = 0; c < 3; ++c) out.at(c, y, x) = src.at(0, y, x);
            } else { // luminance = channel mean, kept integral
                double sum = 0.0;
                for (std::int64_t c = 0; c < src.channels; ++c) sum += src.at(c, y, x);
                out.at(0, y, x) = std::lround(sum / static_cast<double>(src.channels));
            }
        }
    return out;
}

Image fit_to_extent(const Image& src, std::int64_t extent) {
    if (extent < 1) throw ValueError("target extent must be positive");
    const std::int64_t side = std::min(src.height, src.width);
    if (side < extent)
        throw ValueError("image " + std::to_string(src.width) + "x" + std::to_string(src.height) +
                         " is smaller than target extent " + std::to_string(extent));
    const std::int64_t factor = side / extent;
    const std::int64_t crop = factor * extent;
    const std::int64_t y0 = (src.height - crop) / 2;
    const std::int64_t x0 = (src.width - crop) / 2;

    Image out;
    out.channels = src.channels;
    out.height = extent;
    out.width = extent;
    out.pixels.resize(static_cast<std::size_t>(src.channels * extent * extent));
    const double area = static_cast<double>(factor * factor);
    for (std::int64_t c = 0; c < src.channels; ++c)
        for (std::int64_t y = 0; y < extent; ++y)
            for (std::int64_t x = 0; x < extent; ++x) {
                double sum = 0.0;
                for (std::int64_t dy = 0; dy < factor; ++dy)
                    for (std::int64_t dx = 0; dx < factor; ++dx)
                        sum += src.at(c, y0 + y * factor + dy, x0 + x * factor + dx);
                out.at(c, y, x) = std::lround(sum / area);
            }
    return out;
}

Tensor image_to_tensor(const Image& img) {
    return Tensor::from_data({img.channels, img.height, img.width}, img.pixels);
}

} // namespace flowood
