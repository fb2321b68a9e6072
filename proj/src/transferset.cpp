#include "xlab/transferset.hpp"

#include <cmath>

#include <json.hpp>

#include "xlab/binary_io.hpp"

namespace xlab {

void TransferSet::validate() const {
  if (inputs.rank() != 4 || soft_labels.rank() != 2 || inputs.dim(0) != soft_labels.dim(0)) {
    throw Error(Errc::shape_mismatch, "transfer set inputs " + to_string(inputs.shape()) + " vs soft labels " +
                                          to_string(soft_labels.shape()));
  }
  const std::size_t k = soft_labels.dim(1);
  for (std::size_t r = 0; r < soft_labels.dim(0); ++r) {
    double mass = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const float p = soft_labels[r * k + c];
      if (!(p >= 0.0f)) throw Error(Errc::not_normalized, "soft label row " + std::to_string(r) + " is negative");
      mass += p;
    }
    if (std::abs(mass - 1.0) > 1e-5) {
      throw Error(Errc::not_normalized, "soft label row " + std::to_string(r) + " sums to " + std::to_string(mass));
    }
  }
}

void save_transferset(const TransferSet& set, const std::filesystem::path& dir) {
  set.validate();
  std::filesystem::create_directories(dir);
  std::string blob;
  io::put_u32(blob, 2);
  io::put_tensor(blob, "inputs", set.inputs);
  io::put_tensor(blob, "soft_labels", set.soft_labels);
  io::write_file((dir / "tensors.bin").string(), blob);

  nlohmann::ordered_json manifest = {
      {"format", "xlab-transferset"},
      {"version", 1},
      {"rows", set.size()},
      {"num_classes", set.soft_labels.dim(1)},
      {"input_shape", {set.inputs.dim(1), set.inputs.dim(2), set.inputs.dim(3)}},
      {"oracle_id", set.provenance.oracle_id},
      {"pool_id", set.provenance.pool_id},
      {"seed", set.provenance.seed},
      {"budget", set.provenance.budget},
  };
  io::write_file((dir / "manifest.json").string(), manifest.dump(2) + "\n");
}

TransferSet load_transferset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file((dir / "manifest.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::corrupt_file, "transfer set manifest: " + std::string(e.what()));
  }
  TransferSet set;
  try {
    if (manifest.at("version").get<int>() != 1) {
      throw Error(Errc::unsupported_version, "transfer set manifest version " + manifest.at("version").dump());
    }
    set.provenance.oracle_id = manifest.at("oracle_id").get<std::string>();
    set.provenance.pool_id = manifest.at("pool_id").get<std::string>();
    set.provenance.seed = manifest.at("seed").get<std::uint64_t>();
    set.provenance.budget = manifest.at("budget").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::corrupt_file, "transfer set manifest: " + std::string(e.what()));
  }
  const std::string blob = io::read_file((dir / "tensors.bin").string());
  io::Reader in(blob);
  if (in.u32() != 2) throw Error(Errc::corrupt_file, "transfer set blob must hold 2 records");
  for (int i = 0; i < 2; ++i) {
    auto [name, tensor] = in.tensor();
    if (name == "inputs") set.inputs = std::move(tensor);
    else if (name == "soft_labels") set.soft_labels = std::move(tensor);
    else throw Error(Errc::corrupt_file, "unexpected record '" + name + "'");
  }
  if (set.size() != manifest.at("rows").get<std::size_t>()) {
    throw Error(Errc::corrupt_file, "row count differs from manifest");
  }
  set.validate();
  return set;
}

}  // namespace xlab
