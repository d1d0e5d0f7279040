#include "mococxr/data.hpp"

#include <fmt/format.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "mococxr/augment.hpp"
#include "mococxr/fields.hpp"
#include "mococxr/random.hpp"

namespace mococxr::data {

std::string to_string(RawLabel label) {
  switch (label) {
    case RawLabel::kPositive: return "positive";
    case RawLabel::kNegative: return "negative";
    case RawLabel::kUncertain: return "uncertain";
  }
  return "negative";
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

RawLabel parse_raw_label(const std::string& text) {
  if (text == "positive") return RawLabel::kPositive;
  if (text == "negative") return RawLabel::kNegative;
  if (text == "uncertain") return RawLabel::kUncertain;
  throw DataError("unknown label '" + text + "' (expected positive|negative|uncertain)");
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "valid") return Split::kValid;
  if (text == "test") return Split::kTest;
  throw DataError("unknown split '" + text + "' (expected train|valid|test)");
}

std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path, LoadOptions options) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest: cannot open " + path.string());
  const auto base = path.parent_path();
  std::vector<ManifestRecord> records;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kManifestHeader) {
        throw DataError(fmt::format("manifest {}:1: expected header '{}', got '{}'", path.string(), kManifestHeader, line));
      }
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, ',');) cols.push_back(col);
    if (!line.empty() && line.back() == ',') cols.emplace_back();
    auto fail = [&](const std::string& why) -> DataError {
      return DataError(fmt::format("manifest {}:{}: {}", path.string(), line_no, why));
    };
    if (cols.size() != 4) throw fail(fmt::format("expected 4 columns, found {}", cols.size()));
    ManifestRecord rec;
    rec.image_path = cols[0];
    rec.patient_id = cols[2];
    if (rec.image_path.empty()) throw fail("empty image path");
    if (rec.patient_id.empty()) throw fail("empty patient_id");
    try {
      rec.label = parse_raw_label(cols[1]);
      rec.split = parse_split(cols[3]);
    } catch (const DataError& e) {
      throw fail(e.what());
    }
    std::filesystem::path p(rec.image_path);
    rec.resolved_path = p.is_absolute() ? p : base / p;
    if (!seen.insert(rec.image_path).second) throw fail("duplicate image path '" + rec.image_path + "'");
    if (options.check_files && !std::filesystem::exists(rec.resolved_path)) {
      throw fail("image not found: " + rec.resolved_path.string());
    }
    records.push_back(std::move(rec));
  }
  if (line_no == 0) throw DataError("manifest " + path.string() + ": missing header");
  return records;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("manifest: cannot write " + path.string());
  out << kManifestHeader << "\n";
  for (const auto& r : records) {
    out << r.image_path << ',' << to_string(r.label) << ',' << r.patient_id << ',' << to_string(r.split) << "\n";
  }
}

double ManifestSummary::prevalence() const {
  return total == 0 ? 0.0 : static_cast<double>(positives) / static_cast<double>(total);
}

ManifestSummary summarize(const std::vector<ManifestRecord>& records) {
  ManifestSummary s;
  std::set<std::string> patients;
  for (const auto& r : records) {
    ++s.total;
    switch (r.label) {
      case RawLabel::kPositive: ++s.positives; break;
      case RawLabel::kNegative: ++s.negatives; break;
      case RawLabel::kUncertain: ++s.uncertain; break;
    }
    ++s.per_split[r.split];
    patients.insert(r.patient_id);
  }
  s.patients = patients.size();
  return s;
}

UncertainPolicy parse_uncertain_policy(const std::string& text) {
  if (text == "positive") return UncertainPolicy::kPositive;
  if (text == "negative") return UncertainPolicy::kNegative;
  if (text == "drop") return UncertainPolicy::kDrop;
  throw DataError("unknown uncertain-label policy '" + text + "' (expected positive|negative|drop)");
}

std::string to_string(UncertainPolicy policy) {
  switch (policy) {
    case UncertainPolicy::kPositive: return "positive";
    case UncertainPolicy::kNegative: return "negative";
    case UncertainPolicy::kDrop: return "drop";
  }
  return "drop";
}

std::vector<LabeledRecord> map_labels(const std::vector<ManifestRecord>& records, UncertainPolicy policy) {
  std::vector<LabeledRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    std::uint8_t label = r.label == RawLabel::kPositive ? 1 : 0;
    if (r.label == RawLabel::kUncertain) {
      if (policy == UncertainPolicy::kDrop) continue;
      label = policy == UncertainPolicy::kPositive ? 1 : 0;
    }
    out.push_back({r.image_path, r.resolved_path, label, r.patient_id, r.split});
  }
  return out;
}

ImageFormat parse_image_format(const std::string& text) {
  if (text == "pgm") return ImageFormat::kPgm;
  if (text == "png") return ImageFormat::kPng;
  throw DataError("unknown image format '" + text + "' (expected pgm|png)");
}

std::string extension(ImageFormat format) { return format == ImageFormat::kPgm ? ".pgm" : ".png"; }

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("image: cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

GrayImage decode_pgm(const std::string& bytes, const std::filesystem::path& path) {
  std::size_t pos = 2;
  auto next_token = [&]() -> std::string {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw DataError("pgm: truncated header in " + path.string());
    return bytes.substr(start, pos - start);
  };
  GrayImage img;
  try {
    img.width = std::stoul(next_token());
    img.height = std::stoul(next_token());
    const auto maxval = std::stoul(next_token());
    if (maxval != 255) {
      throw DataError(fmt::format("pgm: unsupported bit depth (maxval {}, need 255) in {}", maxval, path.string()));
    }
  } catch (const std::logic_error&) {
    throw DataError("pgm: malformed header in " + path.string());
  }
  ++pos;  // single whitespace before raster
  if (img.width == 0 || img.height == 0) throw DataError("pgm: empty image " + path.string());
  const auto n = img.width * img.height;
  if (bytes.size() < pos + n) throw DataError("pgm: truncated raster in " + path.string());
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

GrayImage decode_png(const std::string& bytes, const std::filesystem::path& path) {
  // IHDR sits at a fixed offset: signature(8) length(4) type(4) width(4) height(4) depth(1) colour(1).
  if (bytes.size() < 26 || bytes.compare(12, 4, "IHDR") != 0) throw DataError("png: malformed header in " + path.string());
  const auto depth = static_cast<unsigned char>(bytes[24]);
  const auto colour = static_cast<unsigned char>(bytes[25]);
  if (colour != PNG_COLOR_TYPE_GRAY) throw DataError("png: only grayscale images are supported: " + path.string());
  if (depth != 8) throw DataError(fmt::format("png: unsupported bit depth {} (need 8) in {}", depth, path.string()));
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw DataError(std::string("png: ") + image.message + " in " + path.string());
  }
  image.format = PNG_FORMAT_GRAY;
  GrayImage img;
  img.width = image.width;
  img.height = image.height;
  img.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw DataError("png: " + msg + " in " + path.string());
  }
  return img;
}

}  // namespace

GrayImage read_gray_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return decode_pgm(bytes, path);
  static const std::string kPngSig("\x89PNG\r\n\x1a\n", 8);
  if (bytes.compare(0, 8, kPngSig) == 0) return decode_png(bytes, path);
  throw DataError("image: unsupported format (need binary PGM or PNG): " + path.string());
}

void write_gray_image(const std::filesystem::path& path, const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height || image.pixels.empty()) {
    throw DataError("image: pixel buffer does not match dimensions");
  }
  if (path.extension() == ".png") {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width);
    png.height = static_cast<png_uint_32>(image.height);
    png.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
      throw DataError(std::string("png: ") + png.message + " writing " + path.string());
    }
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("image: cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw DataError("image: write failed for " + path.string());
}

diffcore::Tensor to_tensor(const GrayImage& image) {
  std::vector<float> values(image.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(image.pixels[i]) / 255.0f;
  return diffcore::Tensor({1, image.height, image.width}, std::move(values));
}

diffcore::Tensor load_image(const std::filesystem::path& path) { return to_tensor(read_gray_image(path)); }

std::uint8_t quantize(float v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

void SyntheticSpec::validate() const {
  if (n_images == 0) throw std::invalid_argument("synthetic: n_images must be >= 1");
  if (image_size < 8) throw std::invalid_argument("synthetic: image_size must be >= 8");
  if (!(lesion_probability > 0.0 && lesion_probability < 1.0)) {
    throw std::invalid_argument("synthetic: lesion_probability must lie in (0,1)");
  }
  if (lesion_contrast < 0.0 || noise_std < 0.0) throw std::invalid_argument("synthetic: contrast and noise must be >= 0");
  if (!(lesion_radius_min > 0.0 && lesion_radius_min <= lesion_radius_max)) {
    throw std::invalid_argument("synthetic: need 0 < lesion_radius_min <= lesion_radius_max");
  }
  if (!(uncertain_probability >= 0.0 && uncertain_probability <= 1.0)) {
    throw std::invalid_argument("synthetic: uncertain_probability must lie in [0,1]");
  }
  if (train_fraction < 0.0 || valid_fraction < 0.0 || train_fraction + valid_fraction > 1.0) {
    throw std::invalid_argument("synthetic: split fractions must be non-negative and sum to <= 1");
  }
}

std::map<std::string, std::string> SyntheticSpec::to_fields() const {
  return {
      {"n_images", std::to_string(n_images)},
      {"image_size", std::to_string(image_size)},
      {"lesion_probability", fmt::format("{}", lesion_probability)},
      {"lesion_contrast", fmt::format("{}", lesion_contrast)},
      {"lesion_radius_min", fmt::format("{}", lesion_radius_min)},
      {"lesion_radius_max", fmt::format("{}", lesion_radius_max)},
      {"noise_std", fmt::format("{}", noise_std)},
      {"background_amplitude", fmt::format("{}", background_amplitude)},
      {"uncertain_probability", fmt::format("{}", uncertain_probability)},
      {"train_fraction", fmt::format("{}", train_fraction)},
      {"valid_fraction", fmt::format("{}", valid_fraction)},
      {"format", format == ImageFormat::kPgm ? "pgm" : "png"},
      {"seed", std::to_string(seed)},
  };
}

SyntheticSpec SyntheticSpec::from_fields(const std::map<std::string, std::string>& values) {
  SyntheticSpec s;
  fields::reject_unknown(values, [] {
    std::set<std::string> known;
    for (const auto& [k, v] : SyntheticSpec{}.to_fields()) known.insert(k);
    return known;
  }(), "synthetic");
  auto get = [&](const char* key, auto& target) {
    auto it = values.find(key);
    if (it == values.end()) return;
    using U = std::decay_t<decltype(target)>;
    if constexpr (std::is_same_v<U, double>) {
      target = fields::parse_double(key, it->second);
    } else if constexpr (std::is_same_v<U, ImageFormat>) {
      target = parse_image_format(it->second);
    } else {
      target = static_cast<U>(fields::parse_uint(key, it->second));
    }
  };
  get("n_images", s.n_images);
  get("image_size", s.image_size);
  get("lesion_probability", s.lesion_probability);
  get("lesion_contrast", s.lesion_contrast);
  get("lesion_radius_min", s.lesion_radius_min);
  get("lesion_radius_max", s.lesion_radius_max);
  get("noise_std", s.noise_std);
  get("background_amplitude", s.background_amplitude);
  get("uncertain_probability", s.uncertain_probability);
  get("train_fraction", s.train_fraction);
  get("valid_fraction", s.valid_fraction);
  get("format", s.format);
  get("seed", s.seed);
  s.validate();
  return s;
}

namespace {

struct Anatomy {
  double base;
  double lung_darkness;
  double left_cx, right_cx, cy, ax, ay;
};

// Smooth inside-ellipse mask, ~1 in the interior falling to 0 across the rim.
double lung_mask(double x, double y, double cx, double cy, double ax, double ay) {
  const double r = std::sqrt(((x - cx) / ax) * ((x - cx) / ax) + ((y - cy) / ay) * ((y - cy) / ay));
  return 1.0 / (1.0 + std::exp((r - 1.0) / 0.08));
}

}  // namespace

std::vector<SyntheticSample> synthesize(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, {0x73796e74ULL}));
  const auto size = spec.image_size;
  const double s = static_cast<double>(size);

  // Patient blocks of 2-4 consecutive images.
  std::vector<std::size_t> patient_of(spec.n_images);
  std::size_t patients = 0;
  for (std::size_t i = 0; i < spec.n_images;) {
    const std::size_t block = 2 + rng.below(3);
    for (std::size_t k = 0; k < block && i < spec.n_images; ++k) patient_of[i++] = patients;
    ++patients;
  }
  std::vector<std::size_t> patient_order(patients);
  for (std::size_t p = 0; p < patients; ++p) patient_order[p] = p;
  rng.shuffle(patient_order);
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(patients)));
  const auto n_valid = static_cast<std::size_t>(std::llround(spec.valid_fraction * static_cast<double>(patients)));
  std::vector<Split> patient_split(patients, Split::kTest);
  for (std::size_t k = 0; k < patients; ++k) {
    patient_split[patient_order[k]] = k < n_train ? Split::kTrain : (k < n_train + n_valid ? Split::kValid : Split::kTest);
  }
  std::vector<Anatomy> anatomy(patients);
  for (auto& a : anatomy) {
    a.base = rng.uniform(0.45, 0.60);
    a.lung_darkness = rng.uniform(0.15, 0.25);
    a.cy = s * rng.uniform(0.47, 0.53);
    a.left_cx = s * rng.uniform(0.28, 0.33);
    a.right_cx = s * rng.uniform(0.67, 0.72);
    a.ax = s * rng.uniform(0.12, 0.15);
    a.ay = s * rng.uniform(0.25, 0.30);
  }

  std::vector<SyntheticSample> out(spec.n_images);
  for (std::size_t i = 0; i < spec.n_images; ++i) {
    auto& sample = out[i];
    const auto& a = anatomy[patient_of[i]];
    Rng img_rng(derive_seed(spec.seed, {0x696d67ULL, i}));
    struct Wave {
      double fx, fy, phase, amp;
    };
    Wave waves[3];
    for (auto& w : waves) {
      w.fx = static_cast<double>(img_rng.below(3));
      w.fy = static_cast<double>(img_rng.below(3));
      w.phase = img_rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      w.amp = spec.background_amplitude * img_rng.uniform(0.3, 1.0);
    }
    const double shift = img_rng.uniform(-0.05, 0.05);
    sample.lesion = img_rng.bernoulli(spec.lesion_probability);
    if (sample.lesion) {
      const bool left = img_rng.bernoulli(0.5);
      const double cx = left ? a.left_cx : a.right_cx;
      double lx, ly;
      do {
        lx = img_rng.uniform(-1.0, 1.0);
        ly = img_rng.uniform(-1.0, 1.0);
      } while (lx * lx + ly * ly > 0.49);
      sample.lesion_x = cx + lx * a.ax;
      sample.lesion_y = a.cy + ly * a.ay;
      sample.lesion_radius = img_rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
    }
    sample.pixels.resize(size * size);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double px = static_cast<double>(x), py = static_cast<double>(y);
        double v = a.base + shift;
        for (const auto& w : waves) v += w.amp * std::cos(2.0 * 3.14159265358979323846 * (w.fx * px + w.fy * py) / s + w.phase);
        const double lungs = std::max(lung_mask(px, py, a.left_cx, a.cy, a.ax, a.ay),
                                      lung_mask(px, py, a.right_cx, a.cy, a.ax, a.ay));
        v -= a.lung_darkness * lungs;
        if (sample.lesion) {
          const double d = std::hypot(px - sample.lesion_x, py - sample.lesion_y);
          v += spec.lesion_contrast * std::clamp(sample.lesion_radius - d + 0.5, 0.0, 1.0);
        }
        v += spec.noise_std * img_rng.normal();
        sample.pixels[y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    auto& rec = sample.record;
    rec.image_path = fmt::format("images/img_{:06d}{}", i, extension(spec.format));
    rec.resolved_path = rec.image_path;
    rec.patient_id = fmt::format("P{:05d}", patient_of[i]);
    rec.split = patient_split[patient_of[i]];
    rec.label = sample.lesion ? RawLabel::kPositive : RawLabel::kNegative;
    if (sample.lesion && spec.uncertain_probability > 0.0 && img_rng.bernoulli(spec.uncertain_probability)) {
      rec.label = RawLabel::kUncertain;
    }
  }
  return out;
}

std::vector<ManifestRecord> write_synthetic(const SyntheticSpec& spec, const std::filesystem::path& dir) {
  const auto samples = synthesize(spec);
  std::filesystem::create_directories(dir / "images");
  std::vector<ManifestRecord> records;
  records.reserve(samples.size());
  for (const auto& sample : samples) {
    GrayImage img{spec.image_size, spec.image_size, {}};
    img.pixels.resize(sample.pixels.size());
    std::transform(sample.pixels.begin(), sample.pixels.end(), img.pixels.begin(), quantize);
    auto rec = sample.record;
    rec.resolved_path = dir / rec.image_path;
    write_gray_image(rec.resolved_path, img);
    records.push_back(std::move(rec));
  }
  write_manifest(dir / "manifest.csv", records);
  return records;
}

std::vector<std::uint8_t> ImageDataset::labels() const {
  std::vector<std::uint8_t> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.label);
  return out;
}

ImageDataset ImageDataset::subset(const std::vector<std::size_t>& indices) const {
  ImageDataset out;
  for (auto i : indices) {
    out.records.push_back(records.at(i));
    out.images.push_back(images.at(i));
  }
  return out;
}

ImageDataset ImageDataset::split(Split s) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == s) idx.push_back(i);
  }
  return subset(idx);
}

ImageDataset load_dataset(const std::vector<LabeledRecord>& records, std::size_t image_size) {
  ImageDataset ds;
  ds.records = records;
  ds.images.reserve(records.size());
  for (const auto& r : records) ds.images.push_back(augment::resize(load_image(r.resolved_path), image_size));
  return ds;
}

}  // namespace mococxr::data
