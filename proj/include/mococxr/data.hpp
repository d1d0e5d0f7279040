#pragma once

// Dataset ingestion: manifest CSV, 8-bit grayscale PGM/PNG images, label
// mapping, and a synthetic "planted lesion" dataset generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mococxr/diffcore/tensor.hpp"

namespace mococxr::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class RawLabel { kPositive, kNegative, kUncertain };
enum class Split { kTrain, kValid, kTest };

std::string to_string(RawLabel label);
std::string to_string(Split split);
RawLabel parse_raw_label(const std::string& text);
Split parse_split(const std::string& text);

inline constexpr const char* kManifestHeader = "path,label,patient_id,split";

struct ManifestRecord {
  std::string image_path;  // as written in the manifest
  std::filesystem::path resolved_path;
  RawLabel label = RawLabel::kNegative;
  std::string patient_id;
  Split split = Split::kTrain;
};

struct LoadOptions {
  bool check_files = true;
};

// Relative image paths resolve against the manifest's directory.
std::vector<ManifestRecord> load_manifest(const std::filesystem::path& path, LoadOptions options = {});
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

struct ManifestSummary {
  std::size_t total = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t uncertain = 0;
  std::map<Split, std::size_t> per_split;
  std::size_t patients = 0;

  // positives / total
  double prevalence() const;
};

ManifestSummary summarize(const std::vector<ManifestRecord>& records);

enum class UncertainPolicy { kPositive, kNegative, kDrop };
UncertainPolicy parse_uncertain_policy(const std::string& text);
std::string to_string(UncertainPolicy policy);

struct LabeledRecord {
  std::string image_path;
  std::filesystem::path resolved_path;
  std::uint8_t label = 0;
  std::string patient_id;
  Split split = Split::kTrain;
};

std::vector<LabeledRecord> map_labels(const std::vector<ManifestRecord>& records, UncertainPolicy policy);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

enum class ImageFormat { kPgm, kPng };
ImageFormat parse_image_format(const std::string& text);
std::string extension(ImageFormat format);

GrayImage read_gray_image(const std::filesystem::path& path);
void write_gray_image(const std::filesystem::path& path, const GrayImage& image);

// [1 x H x W] tensor, pixel / 255.
diffcore::Tensor to_tensor(const GrayImage& image);
diffcore::Tensor load_image(const std::filesystem::path& path);

// Rounds v * 255 after clamping to [0,1].
std::uint8_t quantize(float v);

struct SyntheticSpec {
  std::size_t n_images = 3000;
  std::size_t image_size = 64;
  double lesion_probability = 0.508;
  double lesion_contrast = 0.5;
  double lesion_radius_min = 4.0;  // pixels at image_size
  double lesion_radius_max = 8.0;
  double noise_std = 0.04;
  double background_amplitude = 0.08;
  double uncertain_probability = 0.0;  // fraction of positives written as "uncertain"
  double train_fraction = 0.7;
  double valid_fraction = 0.1;
  ImageFormat format = ImageFormat::kPgm;
  std::uint64_t seed = 0;

  void validate() const;
  std::map<std::string, std::string> to_fields() const;
  static SyntheticSpec from_fields(const std::map<std::string, std::string>& fields);
};

struct SyntheticSample {
  std::vector<float> pixels;  // unquantized, in [0,1]
  bool lesion = false;
  double lesion_x = 0.0, lesion_y = 0.0, lesion_radius = 0.0;
  ManifestRecord record;
};

// Deterministic in-memory generation: per-patient anatomy (two darker lung
// fields over a smooth background), per-image low-frequency variation and
// Gaussian noise, and for positives a soft-edged bright disc inside a lung
// field. Patients own blocks of 2-4 consecutive images and are split
// train/valid/test by patient.
std::vector<SyntheticSample> synthesize(const SyntheticSpec& spec);

// Writes images plus manifest.csv into `dir`; returns the manifest records.
std::vector<ManifestRecord> write_synthetic(const SyntheticSpec& spec, const std::filesystem::path& dir);

// Records with their images loaded and resized to `size`.
struct ImageDataset {
  std::vector<LabeledRecord> records;
  std::vector<diffcore::Tensor> images;

  std::size_t size() const { return records.size(); }
  std::vector<std::uint8_t> labels() const;
  ImageDataset subset(const std::vector<std::size_t>& indices) const;
  ImageDataset split(Split s) const;
};

ImageDataset load_dataset(const std::vector<LabeledRecord>& records, std::size_t image_size);

}  // namespace mococxr::data
