#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "denseplan/errors.hpp"
#include "denseplan/rng.hpp"
#include "denseplan/tensor.hpp"

namespace denseplan {

// In-memory dataset. Pixels are stored flat in (n, c, h, w) order; batches
// are copied into caller-owned tensors so dataset storage stays outside the
// plan's accounting.
template <typename T>
struct Dataset {
  std::int64_t n = 0;
  int c = 0, h = 0, w = 0;
  int num_classes = 0;
  std::vector<T> pixels;  // n * c * h * w
  std::vector<int> labels;

  std::int64_t sample_elems() const {
    return static_cast<std::int64_t>(c) * h * w;
  }
};

// Deterministic class-conditional Gaussian blobs: class y has per-pixel mean
// y / num_classes, so classes are linearly separable in pixel space and a
// small model converges quickly. Labels cycle through the classes so every
// class is represented.
template <typename T>
Dataset<T> synth_dataset(std::uint64_t seed, std::int64_t n, int c, int h,
                         int w, int num_classes, double spread = 0.15) {
  if (num_classes < 1 || n < num_classes) {
    throw ConfigError("synthetic dataset needs n >= num_classes >= 1");
  }
  Dataset<T> ds;
  ds.n = n;
  ds.c = c;
  ds.h = h;
  ds.w = w;
  ds.num_classes = num_classes;
  ds.pixels.resize(static_cast<std::size_t>(n * ds.sample_elems()));
  ds.labels.resize(static_cast<std::size_t>(n));
  Rng rng(seed);
  std::size_t p = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % num_classes);
    ds.labels[static_cast<std::size_t>(i)] = label;
    const double mean = static_cast<double>(label) / num_classes;
    for (std::int64_t j = 0; j < ds.sample_elems(); ++j) {
      ds.pixels[p++] = static_cast<T>(mean + spread * rng.normal());
    }
  }
  return ds;
}

// Standard CIFAR-10 binary batch file: consecutive 3073-byte records of one
// label byte followed by 3*32*32 channel-major pixel bytes. Pixels are
// scaled to [0,1] and then normalized with the given per-channel constants.
template <typename T>
Dataset<T> load_cifar10_batch(const std::string& path,
                              const std::array<double, 3>& mean = {0.4914,
                                                                   0.4822,
                                                                   0.4465},
                              const std::array<double, 3>& stddev = {0.2470,
                                                                     0.2435,
                                                                     0.2616}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  constexpr std::size_t kRecord = 3073;
  constexpr std::size_t kImage = 3072;
  if (bytes.size() % kRecord != 0) {
    throw FormatError(path + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of 3073");
  }
  Dataset<T> ds;
  ds.n = static_cast<std::int64_t>(bytes.size() / kRecord);
  ds.c = 3;
  ds.h = 32;
  ds.w = 32;
  ds.num_classes = 10;
  ds.pixels.resize(static_cast<std::size_t>(ds.n) * kImage);
  ds.labels.resize(static_cast<std::size_t>(ds.n));
  for (std::int64_t i = 0; i < ds.n; ++i) {
    const unsigned char* rec = bytes.data() + kRecord * i;
    if (rec[0] > 9) {
      throw FormatError(path + ": record " + std::to_string(i) +
                        " has label byte " + std::to_string(rec[0]));
    }
    ds.labels[static_cast<std::size_t>(i)] = rec[0];
    for (std::size_t j = 0; j < kImage; ++j) {
      const std::size_t channel = j / 1024;
      const double v = static_cast<double>(rec[1 + j]) / 255.0;
      ds.pixels[static_cast<std::size_t>(i) * kImage + j] =
          static_cast<T>((v - mean[channel]) / stddev[channel]);
    }
  }
  return ds;
}

// Loads and concatenates data_batch_1.bin .. data_batch_5.bin from `dir`,
// skipping missing files; at least one must exist.
template <typename T>
Dataset<T> load_cifar10_dir(const std::string& dir) {
  Dataset<T> all;
  bool found = false;
  for (int i = 1; i <= 5; ++i) {
    const std::string path = dir + "/data_batch_" + std::to_string(i) + ".bin";
    std::ifstream probe(path, std::ios::binary);
    if (!probe) continue;
    probe.close();
    Dataset<T> part = load_cifar10_batch<T>(path);
    if (!found) {
      all = std::move(part);
      found = true;
    } else {
      all.pixels.insert(all.pixels.end(), part.pixels.begin(),
                        part.pixels.end());
      all.labels.insert(all.labels.end(), part.labels.begin(),
                        part.labels.end());
      all.n += part.n;
    }
  }
  if (!found) {
    throw FormatError("no CIFAR-10 batch files found under " + dir);
  }
  return all;
}

// Copies the selected samples into dst (shape (batch, c, h, w)) and fills
// the matching label vector.
template <typename T>
void fill_batch(const Dataset<T>& ds, const std::vector<std::int64_t>& indices,
                std::int64_t offset, Tensor<T>& dst,
                std::vector<int>& labels_out) {
  const std::int64_t batch = dst.shape().n;
  if (dst.shape().c != ds.c || dst.shape().h != ds.h || dst.shape().w != ds.w) {
    throw ShapeError("batch tensor shape does not match dataset samples");
  }
  if (offset + batch > static_cast<std::int64_t>(indices.size())) {
    throw BoundsError("batch range exceeds index list");
  }
  labels_out.resize(static_cast<std::size_t>(batch));
  const std::int64_t se = ds.sample_elems();
  for (std::int64_t i = 0; i < batch; ++i) {
    const std::int64_t src = indices[static_cast<std::size_t>(offset + i)];
    std::copy(ds.pixels.begin() + src * se, ds.pixels.begin() + (src + 1) * se,
              dst.sample_ptr(i));
    labels_out[static_cast<std::size_t>(i)] =
        ds.labels[static_cast<std::size_t>(src)];
  }
}

}  // namespace denseplan
