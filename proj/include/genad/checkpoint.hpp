#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "genad/numkit/params.hpp"
#include "genad/numkit/tensor.hpp"

namespace genad {

// Single-file checkpoint container: "GADC" magic, u32 version, u32 length of
// a JSON index, the index bytes, then one tensor blob per index entry in
// order. The JSON carries an arbitrary manifest plus the tensor name list.
class Checkpoint {
 public:
  nlohmann::json manifest;

  void put(const std::string& name, const numkit::Tensor& t);
  const numkit::Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  const std::map<std::string, numkit::Tensor>& tensors() const { return tensors_; }

  void put_params(const std::string& prefix, const numkit::ParamStore& params);
  void read_params(const std::string& prefix, numkit::ParamStore& params) const;
  void put_adam(const std::string& prefix, const numkit::Adam& opt);
  void read_adam(const std::string& prefix, numkit::Adam& opt) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  std::map<std::string, numkit::Tensor> tensors_;
};

}  // namespace genad
