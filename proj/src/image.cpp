#include "xt/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "xt/errors.hpp"
#include "xt/ops.hpp"
#include "xt/tensor_io.hpp"

namespace xt {

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  if (tok.empty()) throw IoError("pnm: truncated header");
  return tok;
}

std::size_t pnm_number(std::istream& in) {
  const std::string t = pnm_token(in);
  if (!std::all_of(t.begin(), t.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); }))
    throw IoError("pnm: bad header field '" + t + "'");
  return std::stoul(t);
}

}  // namespace

Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string magic = pnm_token(in);
  std::size_t channels;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw IoError(path.string() + ": only binary P5/P6 images are supported");
  }
  const std::size_t w = pnm_number(in), h = pnm_number(in), maxval = pnm_number(in);
  if (maxval != 255) throw IoError(path.string() + ": maximal value must be 255");
  if (w == 0 || h == 0) throw ContractViolation(path.string() + ": empty image");
  std::vector<unsigned char> raw(w * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IoError(path.string() + ": truncated pixel data");
  // Interleaved RGB to channel-first.
  std::vector<double> v(raw.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        v[(c * h + y) * w + x] = raw[(y * w + x) * channels + c] / 255.0;
  return Tensor({channels, h, w}, std::move(v));
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values,
               std::size_t height, std::size_t width) {
  require(values.size() == height * width, "write_pgm: value count does not match extents");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  std::vector<unsigned char> raw(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::clamp(values[i], 0.0, 1.0);
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor load_image(const std::filesystem::path& path) {
  Tensor img;
  if (path.extension() == ".xtt") {
    img = load_tensor(path).to(DType::F64);
    if (img.rank() == 2) img = Tensor({1, img.dim(0), img.dim(1)}, std::vector<double>(img.data().begin(), img.data().end()));
    require(img.rank() == 3, path.string() + ": image tensor must be [H, W] or [C, H, W]");
  } else {
    img = read_pnm(path);
  }
  require(img.dim(1) >= 1 && img.dim(2) >= 1, path.string() + ": empty image");
  require_finite(img, "image pixels");
  return img;
}

}  // namespace xt
