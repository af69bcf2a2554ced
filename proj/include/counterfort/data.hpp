#pragma once

// Dataset ingestion: CIFAR-10/100 binary batches, deterministic subsets,
// synthetic Gaussian-blob images, and container persistence.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfort/container.hpp"
#include "counterfort/error.hpp"
#include "counterfort/network.hpp"
#include "counterfort/rng.hpp"
#include "counterfort/tensor.hpp"

namespace counterfort {

/// Materialized examples: images [n, c, h, w] in [0,1] plus labels.
struct Dataset {
  ImageBatch images;
  LabelBatch labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }

  Dataset select(std::span<const std::size_t> index) const {
    Dataset out{images.gather0(index), {}, classes};
    out.labels.reserve(index.size());
    for (std::size_t i : index) out.labels.push_back(labels.at(i));
    return out;
  }

  Dataset slice(std::size_t begin, std::size_t end) const {
    Dataset out{images.slice0(begin, end), LabelBatch(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                                                      labels.begin() + static_cast<std::ptrdiff_t>(end)),
                classes};
    return out;
  }
};

/// CIFAR records kept as bytes; 50000 images as doubles would need 1.2 GB.
struct ByteImages {
  Dims image_dims;  // [3, 32, 32]
  std::vector<std::uint8_t> pixels;
  LabelBatch labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }

  /// Pixels mapped to [0,1] by /255, in the order given by `index`.
  Dataset materialize(std::span<const std::size_t> index) const {
    const std::size_t per = dims_product(image_dims);
    Dims d{index.size()};
    d.insert(d.end(), image_dims.begin(), image_dims.end());
    Dataset out{Tensor(d), {}, classes};
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] >= size()) throw ValidationError("subset", "index out of range");
      const std::uint8_t* src = pixels.data() + index[i] * per;
      double* dst = out.images.data() + i * per;
      for (std::size_t k = 0; k < per; ++k) dst[k] = static_cast<double>(src[k]) / 255.0;
      out.labels.push_back(labels[index[i]]);
    }
    return out;
  }

  Dataset materialize() const {
    std::vector<std::size_t> all(size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return materialize(all);
  }
};

enum class CifarVariant { Cifar10, Cifar100 };

struct CifarLayout {
  std::size_t record_bytes;
  std::size_t label_offset;  // byte used as the class label
  std::size_t label_bytes;
  std::size_t classes;
};

inline CifarLayout cifar_layout(CifarVariant v) {
  // CIFAR-100 records carry (coarse, fine); the fine label is used.
  return v == CifarVariant::Cifar10 ? CifarLayout{3073, 0, 1, 10} : CifarLayout{3074, 1, 2, 100};
}

/// Appends the records of one binary batch file. Channel-planar R,G,B,
/// row-major 32x32, record order preserved.
inline void read_cifar_file(const std::string& path, CifarVariant variant, ByteImages& out) {
  const CifarLayout layout = cifar_layout(variant);
  const std::vector<unsigned char> bytes = read_file_bytes(path);
  if (bytes.empty() || bytes.size() % layout.record_bytes != 0) {
    const std::size_t below = bytes.size() / layout.record_bytes * layout.record_bytes;
    throw FormatError("cifar: '" + path + "' has " + std::to_string(bytes.size()) + " bytes; expected a positive multiple of " +
                      std::to_string(layout.record_bytes) + " (nearest valid sizes " + std::to_string(below) + " and " +
                      std::to_string(below + layout.record_bytes) + ")");
  }
  const std::size_t records = bytes.size() / layout.record_bytes;
  const std::size_t pixels = layout.record_bytes - layout.label_bytes;
  out.image_dims = {3, 32, 32};
  out.classes = layout.classes;
  out.pixels.reserve(out.pixels.size() + records * pixels);
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * layout.record_bytes;
    const int label = rec[layout.label_offset];
    if (static_cast<std::size_t>(label) >= layout.classes) {
      throw FormatError("cifar: record " + std::to_string(r) + " of '" + path + "' has label " + std::to_string(label));
    }
    out.labels.push_back(label);
    out.pixels.insert(out.pixels.end(), rec + layout.label_bytes, rec + layout.record_bytes);
  }
}

/// `path` is either one batch file or a directory holding the standard
/// batches (data_batch_1..5.bin / test_batch.bin for CIFAR-10, train.bin /
/// test.bin for CIFAR-100), possibly inside the archive's top-level folder.
inline ByteImages load_cifar(const std::string& path, const std::string& split, CifarVariant variant) {
  namespace fs = std::filesystem;
  if (split != "train" && split != "test") throw ValidationError("dataset.split", "must be 'train' or 'test'");
  ByteImages out;
  if (fs::is_regular_file(path)) {
    read_cifar_file(path, variant, out);
    return out;
  }
  if (!fs::is_directory(path)) throw ValidationError("dataset.path", "'" + path + "' does not exist");
  fs::path dir(path);
  const char* nested = variant == CifarVariant::Cifar10 ? "cifar-10-batches-bin" : "cifar-100-binary";
  if (fs::is_directory(dir / nested)) dir /= nested;
  std::vector<std::string> files;
  if (variant == CifarVariant::Cifar10) {
    if (split == "train") {
      for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
    } else {
      files.push_back("test_batch.bin");
    }
  } else {
    files.push_back(split + ".bin");
  }
  for (const auto& f : files) read_cifar_file((dir / f).string(), variant, out);
  return out;
}

inline ByteImages load_cifar10(const std::string& path, const std::string& split) {
  return load_cifar(path, split, CifarVariant::Cifar10);
}

inline ByteImages load_cifar100(const std::string& path, const std::string& split) {
  return load_cifar(path, split, CifarVariant::Cifar100);
}

// ---------------------------------------------------------------------------
// Handles and subsets

/// Reproducible description of a set of examples: a source plus an optional
/// sorted index subset drawn with the library's fixed PRNG.
struct DatasetHandle {
  std::string name;
  std::string split;
  std::size_t classes = 0;
  std::size_t count = 0;
  nlohmann::json source = nlohmann::json::object();
  std::vector<std::size_t> indices;  // empty: every example in source order
  std::uint64_t subset_seed = 0;

  std::vector<std::size_t> members() const {
    if (!indices.empty()) return indices;
    std::vector<std::size_t> all(count);
    for (std::size_t i = 0; i < count; ++i) all[i] = i;
    return all;
  }
};

/// `n` members drawn uniformly without replacement (mt19937_64 partial
/// Fisher-Yates) and returned in ascending source order.
inline DatasetHandle subset(const DatasetHandle& handle, std::size_t n, std::uint64_t seed) {
  const std::size_t available = handle.indices.empty() ? handle.count : handle.indices.size();
  if (n > available) {
    throw ValidationError("subset.n", std::to_string(n) + " exceeds dataset size " + std::to_string(available));
  }
  if (n == 0) throw ValidationError("subset.n", "must be positive");
  Rng rng(seed);
  std::vector<std::size_t> chosen = rng.sample_without_replacement(handle.members(), n);
  std::sort(chosen.begin(), chosen.end());
  DatasetHandle out = handle;
  out.indices = std::move(chosen);
  out.count = handle.count;
  out.subset_seed = seed;
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Class-conditional Gaussian blobs. Each class has a random sign pattern
/// s_c in {-1,+1}^D; pixel = clip(0.5 + 0.05 * (separation * s_c + z), 0, 1)
/// with z ~ N(0,1). Labels cycle through the classes and are then shuffled,
/// so counts differ by at most one. The patterns depend on `seed` only;
/// labels and noise come from `stream`, so streams of one seed are splits of
/// the same task.
inline Dataset synth_blobs(std::size_t classes, std::size_t n, const Dims& image_dims, double separation,
                           std::uint64_t seed, std::uint64_t stream = 0) {
  if (!(separation > 0.0)) throw ValidationError("synthetic.separation", "must be positive");
  if (classes < 2) throw ValidationError("synthetic.classes", "must be at least 2");
  if (n == 0) throw ValidationError("synthetic.n", "must be positive");
  const std::size_t per = dims_product(image_dims);
  Rng rng(seed);
  std::vector<double> patterns(classes * per);
  for (double& v : patterns) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
  rng = Rng(derive_seed(seed, {stream}));

  LabelBatch labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  const auto order = rng.permutation(n);
  LabelBatch shuffled(n);
  for (std::size_t i = 0; i < n; ++i) shuffled[i] = labels[order[i]];

  Dims d{n};
  d.insert(d.end(), image_dims.begin(), image_dims.end());
  Dataset out{Tensor(d), std::move(shuffled), classes};
  for (std::size_t i = 0; i < n; ++i) {
    const double* s = patterns.data() + static_cast<std::size_t>(out.labels[i]) * per;
    double* px = out.images.data() + i * per;
    for (std::size_t k = 0; k < per; ++k) px[k] = std::clamp(0.5 + 0.05 * (separation * s[k] + rng.normal()), 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

inline Container to_container(const Dataset& ds, const nlohmann::json& meta = nlohmann::json::object()) {
  Container c;
  c.kind = "dataset";
  c.meta = meta;
  c.meta["classes"] = ds.classes;
  c.tensors.emplace_back("images", ds.images);
  std::vector<double> labels(ds.labels.begin(), ds.labels.end());
  c.tensors.emplace_back("labels", Tensor(Dims{ds.labels.size()}, std::move(labels)));
  return c;
}

inline Dataset dataset_from_container(const Container& c) {
  if (c.kind != "dataset") throw FormatError("dataset: container holds '" + c.kind + "'");
  Dataset ds;
  ds.classes = c.meta.at("classes").get<std::size_t>();
  ds.images = c.tensor("images");
  for (double v : c.tensor("labels").values) ds.labels.push_back(static_cast<int>(v));
  if (ds.labels.size() != ds.images.dim(0)) throw FormatError("dataset: label count does not match images");
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path, const nlohmann::json& meta = nlohmann::json::object()) {
  save_container(to_container(ds, meta), path);
}

inline Dataset load_dataset(const std::string& path) { return dataset_from_container(load_container(path)); }

// ---------------------------------------------------------------------------
// Source descriptors
//
//   {"kind": "cifar10" | "cifar100", "path": ..., "split": "train" | "test"}
//   {"kind": "synthetic", "classes", "n", "dims", "separation", "seed", "stream"}
//   {"kind": "file", "path": ...}       (dataset container)

namespace detail {

inline Dataset load_source(const nlohmann::json& source) {
  const std::string kind = source.at("kind").get<std::string>();
  if (kind == "cifar10" || kind == "cifar100") {
    const auto variant = kind == "cifar10" ? CifarVariant::Cifar10 : CifarVariant::Cifar100;
    return load_cifar(source.at("path").get<std::string>(), source.value("split", std::string("test")), variant)
        .materialize();
  }
  if (kind == "synthetic") {
    return synth_blobs(source.at("classes").get<std::size_t>(), source.at("n").get<std::size_t>(),
                       source.at("dims").get<Dims>(), source.at("separation").get<double>(),
                       source.at("seed").get<std::uint64_t>(), source.value("stream", std::uint64_t{0}));
  }
  if (kind == "file") return load_dataset(source.at("path").get<std::string>());
  throw ValidationError("dataset.kind", "unknown dataset kind '" + kind + "'");
}

}  // namespace detail

/// Resolves a source descriptor into a handle (loads once to count examples).
inline DatasetHandle open_dataset(const nlohmann::json& source) {
  DatasetHandle h;
  h.source = source;
  h.name = source.at("kind").get<std::string>();
  h.split = source.value("split", std::string());
  if (h.name == "cifar10" || h.name == "cifar100") {
    const auto bytes = load_cifar(source.at("path").get<std::string>(), source.value("split", std::string("test")),
                                  h.name == "cifar10" ? CifarVariant::Cifar10 : CifarVariant::Cifar100);
    h.count = bytes.size();
    h.classes = bytes.classes;
    return h;
  }
  const Dataset ds = detail::load_source(source);
  h.count = ds.size();
  h.classes = ds.classes;
  return h;
}

/// Loads the handle's members, in member order.
inline Dataset materialize(const DatasetHandle& handle) {
  const std::vector<std::size_t> members = handle.members();
  const std::string kind = handle.source.at("kind").get<std::string>();
  if (kind == "cifar10" || kind == "cifar100") {
    return load_cifar(handle.source.at("path").get<std::string>(), handle.source.value("split", std::string("test")),
                      kind == "cifar10" ? CifarVariant::Cifar10 : CifarVariant::Cifar100)
        .materialize(members);
  }
  const Dataset all = detail::load_source(handle.source);
  return handle.indices.empty() ? all : all.select(members);
}

}  // namespace counterfort
