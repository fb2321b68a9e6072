#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "xlab/tensor.hpp"

namespace xlab::io {

static_assert(std::endian::native == std::endian::little, "binary encoders assume a little-endian host");

inline void put_u32(std::string& out, std::uint32_t v) {
  char bytes[4];
  std::memcpy(bytes, &v, 4);
  out.append(bytes, 4);
}

inline void put_text(std::string& out, std::string_view text) {
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.append(text);
}

// Named tensor record: name, rank, extents, f32 payload.
inline void put_tensor(std::string& out, std::string_view name, const Tensor<float>& t) {
  put_text(out, name);
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
  out.append(reinterpret_cast<const char*>(t.raw()), t.size() * sizeof(float));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) {
      throw Error(Errc::corrupt_file, "unexpected end of data at offset " + std::to_string(pos_));
    }
    std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4).data(), 4);
    return v;
  }

  std::string text() { return std::string(take(u32())); }

  std::pair<std::string, Tensor<float>> tensor() {
    std::string name = text();
    const std::uint32_t rank = u32();
    if (rank > 8) throw Error(Errc::corrupt_file, "implausible rank " + std::to_string(rank));
    Shape shape;
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(u32());
      if (shape.back() == 0) throw Error(Errc::corrupt_file, "zero extent in record '" + name + "'");
      count *= shape.back();
      if (count > remaining() / sizeof(float) + 1) {
        throw Error(Errc::corrupt_file, "record '" + name + "' exceeds remaining data");
      }
    }
    std::vector<float> data(count);
    std::memcpy(data.data(), take(count * sizeof(float)).data(), count * sizeof(float));
    return {std::move(name), Tensor<float>(std::move(shape), std::move(data))};
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace xlab::io
