#include "xt/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "xt/errors.hpp"

namespace xt {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written with native little-endian byte order");

namespace {
constexpr char kMagic[4] = {'X', 'T', 'T', '1'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("tensor file: truncated");
  return v;
}
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  require(t.rank() <= 255, "write_tensor: rank too large");
  os.write(kMagic, 4);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  const auto v = t.data();
  if (t.dtype() == DType::F64) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
  } else {
    std::vector<float> f(v.begin(), v.end());
    os.write(reinterpret_cast<const char*>(f.data()),
             static_cast<std::streamsize>(f.size() * sizeof(float)));
  }
  if (!os) throw IoError("tensor file: write failed");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("tensor file: bad magic");
  const auto code = get<std::uint8_t>(is);
  if (code > 1) throw IoError("tensor file: unknown dtype code " + std::to_string(code));
  const auto rank = get<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>(is);
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n);
  const auto dtype = static_cast<DType>(code);
  if (dtype == DType::F64) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    std::vector<float> f(n);
    is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(n * sizeof(float)));
    std::copy(f.begin(), f.end(), v.begin());
  }
  if (!is) throw IoError("tensor file: truncated payload");
  return Tensor(std::move(shape), std::move(v), dtype);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace xt
