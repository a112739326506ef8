#include "fedmuscle/wire.hpp"

#include "binary_io.hpp"

#include <cmath>

namespace fedmuscle {

std::vector<std::uint8_t> encode_representation(const RepresentationBatch& z) {
  detail::ByteWriter w;
  for (double v : z.values()) w.put_f32(static_cast<float>(v));
  return w.take();
}

RepresentationBatch decode_representation(std::span<const std::uint8_t> bytes,
                                          std::size_t batch_size, std::size_t dim) {
  if (bytes.size() != batch_size * dim * kWireValueBytes) {
    throw ContractViolation("decode_representation: payload is " + std::to_string(bytes.size()) +
                            " bytes, expected " +
                            std::to_string(batch_size * dim * kWireValueBytes));
  }
  detail::ByteReader r(bytes);
  Matrix z(batch_size, dim);
  for (auto& v : z.values()) v = r.f32();
  return z;
}

std::vector<std::uint8_t> encode_package(const AggregatePackage& pkg) {
  detail::ByteWriter w;
  w.put_u32(pkg.owner);
  w.put_u32(static_cast<std::uint32_t>(pkg.selected_users.size()));
  for (UserId u : pkg.selected_users) w.put_u32(u);
  w.put_u32(static_cast<std::uint32_t>(pkg.batch_size));
  w.put_u32(static_cast<std::uint32_t>(pkg.dim()));
  for (double v : pkg.s_matrix.values()) w.put_f32(static_cast<float>(v));
  for (double la : pkg.log_alpha) w.put_f32(static_cast<float>(std::exp(la)));
  return w.take();
}

AggregatePackage decode_package(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  AggregatePackage pkg;
  pkg.owner = r.u32();
  const auto m = r.u32();
  if (m == 0 || m > 16) throw ContractViolation("decode_package: implausible selection size");
  for (std::uint32_t i = 0; i < m; ++i) pkg.selected_users.push_back(r.u32());
  pkg.batch_size = r.u32();
  const std::size_t d = r.u32();
  if (pkg.batch_size == 0 || d == 0) throw ContractViolation("decode_package: empty package");
  const std::size_t rows = tuple_count(pkg.batch_size, m);
  if (r.remaining() != rows * (d + 1) * kWireValueBytes) {
    throw ContractViolation("decode_package: payload size does not match header");
  }
  pkg.s_matrix = Matrix(rows, d);
  for (auto& v : pkg.s_matrix.values()) v = r.f32();
  pkg.log_alpha.resize(rows);
  for (auto& la : pkg.log_alpha) {
    const float a = r.f32();
    if (!(a > 0.0f) || !std::isfinite(a)) throw ContractViolation("decode_package: invalid alpha");
    la = std::log(static_cast<double>(a));
  }
  return pkg;
}

}  // namespace fedmuscle
