#include "cil/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace cil {

void LabeledDataset::append(const float* img, int label) {
  images.insert(images.end(), img, img + sample_size());
  labels.push_back(label);
  ++count;
}

std::map<int, int> LabeledDataset::per_class_counts() const {
  std::map<int, int> out;
  for (int l : labels) ++out[l];
  return out;
}

std::vector<Eigen::Index> LabeledDataset::indices_of_classes(const std::vector<int>& ids) const {
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < count; ++i)
    if (std::find(ids.begin(), ids.end(), labels[i]) != ids.end()) out.push_back(i);
  return out;
}

Tensor gather_batch(const LabeledDataset& ds, const std::vector<Eigen::Index>& idx) {
  const Eigen::Index ss = ds.sample_size();
  Tensor::Array v(static_cast<Eigen::Index>(idx.size()) * ss);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= ds.count) throw InputError("gather_batch: index out of range");
    const float* src = ds.image(idx[i]);
    for (Eigen::Index j = 0; j < ss; ++j) v[i * ss + j] = static_cast<double>(src[j]);
  }
  return Tensor::leaf({static_cast<Eigen::Index>(idx.size()), ds.channels, ds.height, ds.width},
                      std::move(v), false);
}

DatasetDescriptor::Kind parse_dataset_kind(const std::string& s) {
  if (s == "synthetic") return DatasetDescriptor::Kind::synthetic;
  if (s == "folder") return DatasetDescriptor::Kind::folder;
  if (s == "cifar-archive") return DatasetDescriptor::Kind::cifar_archive;
  throw ConfigError("unknown dataset.kind '" + s + "' (expected synthetic|folder|cifar-archive)");
}

namespace {

// Oriented sinusoidal gratings with a class-specific color profile. Classes
// differ in orientation and in one of two spatial frequencies; phase and
// amplitude vary per sample so the generator is not trivially memorizable.
void synth_sample(Rng& rng, int class_id, int num_classes, int size, double noise, float* out) {
  const double theta = M_PI * static_cast<double>(class_id) / num_classes;
  const double freq = 2.0 + static_cast<double>(class_id % 2);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double amp = rng.uniform(0.75, 1.25);
  const double ct = std::cos(theta), st = std::sin(theta);
  std::array<double, 3> tint;
  for (int ch = 0; ch < 3; ++ch)
    tint[ch] =
        0.85 + 0.15 * std::cos(2.0 * M_PI * class_id / num_classes + ch * 2.0 * M_PI / 3.0);
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < size; ++i)
      for (int j = 0; j < size; ++j) {
        const double u = (i * ct + j * st) / size;
        const double base = amp * std::sin(2.0 * M_PI * freq * u + phase);
        out[(ch * size + i) * size + j] =
            static_cast<float>(base * tint[ch] + noise * rng.normal());
      }
}

DatasetPair load_synthetic(const DatasetDescriptor& desc) {
  const auto& sp = desc.synthetic;
  if (sp.classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (sp.train_per_class < 1 || sp.test_per_class < 1)
    throw ConfigError("synthetic dataset needs positive per-class sample counts");
  const int s = desc.image_size;
  DatasetPair pair;
  pair.num_classes = sp.classes;
  Rng rng(sp.seed);
  std::vector<float> buf(3 * s * s);
  auto fill = [&](LabeledDataset& ds, int per_class, const char* split) {
    ds.channels = 3;
    ds.height = s;
    ds.width = s;
    ds.split = split;
    ds.images.reserve(static_cast<size_t>(sp.classes) * per_class * buf.size());
    for (int c = 0; c < sp.classes; ++c)
      for (int i = 0; i < per_class; ++i) {
        synth_sample(rng, c, sp.classes, s, sp.noise, buf.data());
        ds.append(buf.data(), c);
      }
  };
  fill(pair.train, sp.train_per_class, "train");
  fill(pair.test, sp.test_per_class, "test");
  return pair;
}

// Minimal binary PPM (P6) / PGM (P5) reader, 8-bit maxval.
std::vector<uint8_t> read_pnm(const fs::path& file, int& channels, int& h, int& w) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open image " + file.string());
  std::string magic;
  in >> magic;
  if (magic == "P6")
    channels = 3;
  else if (magic == "P5")
    channels = 1;
  else
    throw IoError("unsupported image format in " + file.string() + " (want binary PPM/PGM)");
  auto next_int = [&]() {
    int v;
    // skip whitespace and '#' comment lines
    while (true) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    in >> v;
    return v;
  };
  w = next_int();
  h = next_int();
  const int maxval = next_int();
  if (maxval != 255) throw IoError("only 8-bit images supported: " + file.string());
  in.get();  // single whitespace before raster
  std::vector<uint8_t> data(static_cast<size_t>(channels) * h * w);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!in) throw IoError("truncated image " + file.string());
  return data;
}

DatasetPair load_folder(const DatasetDescriptor& desc) {
  const fs::path root(desc.path);
  if (!fs::is_directory(root / "train") || !fs::is_directory(root / "test"))
    throw IoError("folder dataset needs train/ and test/ under " + desc.path);
  std::vector<std::string> class_names;
  for (const auto& e : fs::directory_iterator(root / "train"))
    if (e.is_directory()) class_names.push_back(e.path().filename().string());
  std::sort(class_names.begin(), class_names.end());
  if (class_names.empty()) throw IoError("no class subdirectories in " + desc.path + "/train");

  DatasetPair pair;
  pair.num_classes = static_cast<int>(class_names.size());
  auto fill = [&](LabeledDataset& ds, const char* split) {
    ds.channels = 3;
    ds.height = desc.image_size;
    ds.width = desc.image_size;
    ds.split = split;
    for (size_t c = 0; c < class_names.size(); ++c) {
      const fs::path dir = root / split / class_names[c];
      if (!fs::is_directory(dir))
        throw IoError("class directory missing: " + dir.string());
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = e.path().extension().string();
        if (ext == ".ppm" || ext == ".pgm") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) throw IoError("no PPM/PGM images in " + dir.string());
      for (const auto& f : files) {
        int ch, h, w;
        auto raw = read_pnm(f, ch, h, w);
        if (h != desc.image_size || w != desc.image_size)
          throw IoError("image " + f.string() + " is " + std::to_string(w) + "x" +
                        std::to_string(h) + ", expected " + std::to_string(desc.image_size));
        std::vector<float> img(3 * static_cast<size_t>(h) * w);
        for (int cc = 0; cc < 3; ++cc) {
          const int src_c = (ch == 3) ? cc : 0;
          for (int p = 0; p < h * w; ++p) {
            const double v = raw[static_cast<size_t>(p) * ch + src_c] / 255.0;
            img[static_cast<size_t>(cc) * h * w + p] =
                static_cast<float>((v - desc.mean[cc]) / desc.stddev[cc]);
          }
        }
        ds.append(img.data(), static_cast<int>(c));
      }
    }
  };
  fill(pair.train, "train");
  fill(pair.test, "test");
  return pair;
}

constexpr Eigen::Index kArchiveRecord = 2 + 3 * 32 * 32;

void load_archive_file(const fs::path& file, const DatasetDescriptor& desc, LabeledDataset& ds,
                       const char* split) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open archive " + file.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<Eigen::Index>(in.tellg());
  in.seekg(0);
  if (bytes % kArchiveRecord != 0)
    throw IoError("archive " + file.string() + " is not a whole number of records");
  const Eigen::Index n = bytes / kArchiveRecord;
  ds.channels = 3;
  ds.height = 32;
  ds.width = 32;
  ds.split = split;
  std::vector<uint8_t> rec(kArchiveRecord);
  std::vector<float> img(3 * 32 * 32);
  for (Eigen::Index i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(rec.data()), kArchiveRecord);
    if (!in) throw IoError("truncated archive " + file.string());
    const int fine_label = rec[1];
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < 32 * 32; ++p) {
        const double v = rec[2 + c * 1024 + p] / 255.0;
        img[c * 1024 + p] = static_cast<float>((v - desc.mean[c]) / desc.stddev[c]);
      }
    ds.append(img.data(), fine_label);
  }
}

DatasetPair load_cifar_archive(const DatasetDescriptor& desc) {
  if (desc.image_size != 32)
    throw ConfigError("cifar-archive datasets are 32x32; set dataset.image_size = 32");
  const fs::path root(desc.path);
  DatasetPair pair;
  load_archive_file(root / "train.bin", desc, pair.train, "train");
  load_archive_file(root / "test.bin", desc, pair.test, "test");
  int max_label = 0;
  for (int l : pair.train.labels) max_label = std::max(max_label, l);
  for (int l : pair.test.labels) max_label = std::max(max_label, l);
  pair.num_classes = max_label + 1;
  return pair;
}

}  // namespace

DatasetPair load_dataset(const DatasetDescriptor& desc) {
  switch (desc.kind) {
    case DatasetDescriptor::Kind::synthetic: return load_synthetic(desc);
    case DatasetDescriptor::Kind::folder: return load_folder(desc);
    case DatasetDescriptor::Kind::cifar_archive: return load_cifar_archive(desc);
  }
  throw ConfigError("unhandled dataset kind");
}

}  // namespace cil
