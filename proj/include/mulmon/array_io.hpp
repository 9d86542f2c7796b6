#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mulmon/tensor.hpp"

namespace mulmon {

// Single-file container of named dense arrays. Byte layout (little-endian):
//   magic "MMAR" | u32 version=1 | u32 count
//   per array: u32 name_len | name bytes | u8 dtype | u8 ndim
//              | ndim x i64 shape | raw row-major data
// dtype codes: 0=f32 1=f64 2=i32 3=u8 4=i64. See docs/formats.md.
class ArrayFile {
 public:
  enum class DType : uint8_t { F32 = 0, F64 = 1, I32 = 2, U8 = 3, I64 = 4 };

  struct Entry {
    DType dtype;
    Shape shape;
    std::vector<uint8_t> raw;
  };

  void put(const std::string& name, const Tensor<float>& t);
  void put(const std::string& name, const Tensor<double>& t);
  void put(const std::string& name, const Tensor<int32_t>& t);
  void put(const std::string& name, const Tensor<uint8_t>& t);
  void put(const std::string& name, const Tensor<int64_t>& t);
  void put_scalar(const std::string& name, int64_t x);
  void put_scalar(const std::string& name, double x);
  void put_string(const std::string& name, const std::string& s);

  bool has(const std::string& name) const { return entries_.count(name) > 0; }
  const Entry& entry(const std::string& name) const;

  Tensor<float> get_f32(const std::string& name) const;
  Tensor<double> get_f64(const std::string& name) const;
  Tensor<int32_t> get_i32(const std::string& name) const;
  Tensor<uint8_t> get_u8(const std::string& name) const;
  Tensor<int64_t> get_i64(const std::string& name) const;
  int64_t get_scalar_i64(const std::string& name) const;
  double get_scalar_f64(const std::string& name) const;
  std::string get_string(const std::string& name) const;

  std::vector<std::string> names() const;

  void save(const std::string& path) const;
  static ArrayFile load(const std::string& path);

 private:
  template <class S>
  void put_typed(const std::string& name, const Tensor<S>& t, DType dt);
  template <class S>
  Tensor<S> get_typed(const std::string& name, DType dt) const;

  std::map<std::string, Entry> entries_;
};

}  // namespace mulmon
