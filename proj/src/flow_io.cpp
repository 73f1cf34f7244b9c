#include "evflow/flow_io.hpp"

#include "evflow/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace evflow {

namespace {

struct PngImage
{
  int width = 0, height = 0, channels = 0, depth = 8;
  std::vector<std::uint8_t> bytes; // rows packed; 16-bit samples big-endian
};

struct FileCloser
{
  void operator()(std::FILE *f) const { std::fclose(f); }
};

void on_png_error(png_structp png, png_const_charp msg)
{
  auto *err = static_cast<std::string *>(png_get_error_ptr(png));
  if (err) { *err = msg; }
  png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

int color_type(int channels)
{
  switch (channels) {
  case 1: return PNG_COLOR_TYPE_GRAY;
  case 3: return PNG_COLOR_TYPE_RGB;
  case 4: return PNG_COLOR_TYPE_RGBA;
  default: throw validation_error("unsupported PNG channel count");
  }
}

void write_png(const std::filesystem::path &path, const PngImage &img)
{
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) { throw data_error("cannot write " + path.string()); }
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw data_error("libpng initialisation failed");
  }
  const std::size_t stride = std::size_t(img.width) * img.channels * (img.depth / 8);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw data_error("PNG encode failed for " + path.string() + ": " + err);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), img.depth, color_type(img.channels),
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed settings keep the files byte-identical between runs.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.bytes.data() + std::size_t(y) * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

PngImage read_png(const std::filesystem::path &path)
{
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) { throw data_error("cannot open " + path.string()); }
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw data_error("decode error: " + path.string() + " is not a PNG file");
  }
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, on_png_error, on_png_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw data_error("libpng initialisation failed");
  }
  PngImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw data_error("decode error in " + path.string() + ": " + err);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int ct = png_get_color_type(png, info);
  img.depth = png_get_bit_depth(png, info);
  if (ct == PNG_COLOR_TYPE_PALETTE) { png_set_palette_to_rgb(png); }
  if (img.depth < 8) {
    png_set_packing(png);
    if (ct == PNG_COLOR_TYPE_GRAY) { png_set_expand_gray_1_2_4_to_8(png); }
    img.depth = 8;
  }
  png_read_update_info(png, info);
  img.width = int(png_get_image_width(png, info));
  img.height = int(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  img.bytes.assign(stride * img.height, 0);
  rows.resize(img.height);
  for (int y = 0; y < img.height; ++y) { rows[y] = img.bytes.data() + std::size_t(y) * stride; }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

std::uint16_t sample16(const PngImage &img, int y, int x, int c)
{
  const std::size_t i = ((std::size_t(y) * img.width + x) * img.channels + c) * 2;
  return std::uint16_t((img.bytes[i] << 8) | img.bytes[i + 1]);
}

void put16(PngImage &img, int y, int x, int c, std::uint16_t v)
{
  const std::size_t i = ((std::size_t(y) * img.width + x) * img.channels + c) * 2;
  img.bytes[i] = std::uint8_t(v >> 8);
  img.bytes[i + 1] = std::uint8_t(v & 0xff);
}

PngImage blank16(int h, int w, int channels)
{
  PngImage img;
  img.width = w;
  img.height = h;
  img.channels = channels;
  img.depth = 16;
  img.bytes.assign(std::size_t(w) * h * channels * 2, 0);
  return img;
}

constexpr float kFloTag = 202021.25f;
constexpr float kFloUnknown = 1e10f;

} // namespace

std::uint16_t encode_flow_component(double value)
{
  if (!std::isfinite(value)) { throw numeric_error("cannot encode a non-finite flow component"); }
  const double raw = std::round(value * kFlowCodecScale + kFlowCodecOffset);
  return std::uint16_t(std::clamp(raw, 0.0, 65535.0));
}

double decode_flow_component(std::uint16_t raw) { return (double(raw) - kFlowCodecOffset) / kFlowCodecScale; }

void write_flow_png(const std::filesystem::path &path, const FlowField<double> &flow)
{
  flow.validate();
  PngImage img = blank16(flow.height(), flow.width(), 3);
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      if (!flow.valid(y, x)) {
        put16(img, y, x, 0, std::uint16_t(kFlowCodecOffset));
        put16(img, y, x, 1, std::uint16_t(kFlowCodecOffset));
        continue;
      }
      put16(img, y, x, 0, encode_flow_component(flow.u(y, x)));
      put16(img, y, x, 1, encode_flow_component(flow.v(y, x)));
      put16(img, y, x, 2, 1);
    }
  }
  write_png(path, img);
}

FlowField<double> read_flow_png(const std::filesystem::path &path)
{
  const PngImage img = read_png(path);
  if (img.depth != 16 || img.channels != 3) {
    throw data_error("decode error: " + path.string() + " is not a 16-bit three-channel flow image");
  }
  FlowField<double> flow(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      flow.valid(y, x) = sample16(img, y, x, 2) != 0;
      flow.u(y, x) = flow.valid(y, x) ? decode_flow_component(sample16(img, y, x, 0)) : 0.0;
      flow.v(y, x) = flow.valid(y, x) ? decode_flow_component(sample16(img, y, x, 1)) : 0.0;
    }
  }
  return flow;
}

void write_flo(const std::filesystem::path &path, const FlowField<double> &flow)
{
  flow.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) { throw data_error("cannot write " + path.string()); }
  const std::int32_t w = flow.width(), h = flow.height();
  out.write(reinterpret_cast<const char *>(&kFloTag), 4);
  out.write(reinterpret_cast<const char *>(&w), 4);
  out.write(reinterpret_cast<const char *>(&h), 4);
  std::vector<float> buf(std::size_t(w) * h * 2);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = (std::size_t(y) * w + x) * 2;
      buf[i] = flow.valid(y, x) ? float(flow.u(y, x)) : kFloUnknown;
      buf[i + 1] = flow.valid(y, x) ? float(flow.v(y, x)) : kFloUnknown;
    }
  }
  out.write(reinterpret_cast<const char *>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
  if (!out) { throw data_error("write failed for " + path.string()); }
}

FlowField<double> read_flo(const std::filesystem::path &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) { throw data_error("cannot open " + path.string()); }
  float tag = 0;
  std::int32_t w = 0, h = 0;
  in.read(reinterpret_cast<char *>(&tag), 4);
  in.read(reinterpret_cast<char *>(&w), 4);
  in.read(reinterpret_cast<char *>(&h), 4);
  if (!in || tag != kFloTag || w <= 0 || h <= 0 || w > 1 << 15 || h > 1 << 15) {
    throw data_error("decode error: " + path.string() + " is not a .flo file");
  }
  std::vector<float> buf(std::size_t(w) * h * 2);
  in.read(reinterpret_cast<char *>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
  if (!in) { throw data_error("decode error: " + path.string() + " is truncated"); }
  FlowField<double> flow(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = (std::size_t(y) * w + x) * 2;
      const bool ok = std::abs(buf[i]) < 1e9f && std::abs(buf[i + 1]) < 1e9f;
      flow.valid(y, x) = ok;
      flow.u(y, x) = ok ? buf[i] : 0.0;
      flow.v(y, x) = ok ? buf[i + 1] : 0.0;
    }
  }
  return flow;
}

FlowField<double> read_flow(const std::filesystem::path &path)
{
  const auto ext = path.extension().string();
  if (ext == ".flo") { return read_flo(path); }
  if (ext == ".png") { return read_flow_png(path); }
  throw validation_error("unknown flow file extension '" + ext + "' (expected .png or .flo)");
}

void write_disparity_png(const std::filesystem::path &path, const DisparityMap &disp)
{
  PngImage img = blank16(disp.height(), disp.width(), 1);
  for (int y = 0; y < disp.height(); ++y) {
    for (int x = 0; x < disp.width(); ++x) {
      if (!disp.valid(y, x)) { continue; }
      const double raw = std::round(disp.d(y, x) * 256.0);
      // A valid pixel never encodes to the invalid marker.
      put16(img, y, x, 0, std::uint16_t(std::clamp(raw, 1.0, 65535.0)));
    }
  }
  write_png(path, img);
}

DisparityMap read_disparity_png(const std::filesystem::path &path)
{
  const PngImage img = read_png(path);
  if (img.depth != 16 || img.channels != 1) {
    throw data_error("decode error: " + path.string() + " is not a 16-bit single-channel disparity image");
  }
  DisparityMap::Plane d(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) { d(y, x) = sample16(img, y, x, 0) / 256.0; }
  }
  return DisparityMap(std::move(d));
}

void write_rgb_png(const std::filesystem::path &path, int height, int width, const std::vector<std::uint8_t> &rgb)
{
  if (rgb.size() != std::size_t(height) * width * 3) { throw validation_error("RGB buffer size mismatch"); }
  PngImage img;
  img.height = height;
  img.width = width;
  img.channels = 3;
  img.depth = 8;
  img.bytes = rgb;
  write_png(path, img);
}

std::vector<std::uint8_t> read_rgb_png(const std::filesystem::path &path, int *height, int *width)
{
  const PngImage img = read_png(path);
  if (img.depth != 8 || img.channels != 3) { throw data_error("decode error: " + path.string() + " is not 8-bit RGB"); }
  if (height) { *height = img.height; }
  if (width) { *width = img.width; }
  return img.bytes;
}

} // namespace evflow
