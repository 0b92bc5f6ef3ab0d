#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "probebench/audio.hpp"
#include "probebench/matrix.hpp"

namespace probebench::fixtures {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("probebench-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

/// Labelled points: `per_class` draws from N(mean_c, sigma^2 I) per class.
struct Clusters {
  Matrix points;
  std::vector<std::size_t> labels;
};

/// Class means lie on scaled simplex-like axes so every pair is `separation`
/// apart: mean_c = separation / sqrt(2) * e_c.
inline Clusters gaussian_clusters(std::size_t classes, std::size_t per_class, std::size_t dim, double separation,
                                  double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  Clusters out{Matrix(classes * per_class, dim), {}};
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t row = c * per_class + i;
      for (std::size_t d = 0; d < dim; ++d) {
        out.points(row, d) = normal(rng) + (d == c ? separation / std::sqrt(2.0) : 0.0);
      }
      out.labels.push_back(c);
    }
  }
  return out;
}

/// Writes each row of `points` as a float32 WAV of `dim` samples and a
/// manifest CSV naming them; returns the manifest path.
inline std::string write_vector_dataset(const std::filesystem::path& dir, const std::string& name, const Matrix& points,
                                        const std::vector<std::size_t>& labels, std::uint32_t rate = 16000) {
  const auto wav_dir = dir / (name + "_wav");
  std::filesystem::create_directories(wav_dir);
  std::string manifest = "example_id,audio_path,label\n";
  for (std::size_t r = 0; r < points.rows(); ++r) {
    audio::AudioClip clip;
    clip.sample_rate = rate;
    for (double v : points.row(r)) clip.samples.push_back(static_cast<float>(v));
    const std::string id = "ex" + std::to_string(r);
    audio::write_wav_file((wav_dir / (id + ".wav")).string(), clip, audio::WavEncoding::float32);
    manifest += id + "," + name + "_wav/" + id + ".wav,class" + std::to_string(labels[r]) + "\n";
  }
  const auto path = (dir / (name + ".csv")).string();
  spit(path, manifest);
  return path;
}

}  // namespace probebench::fixtures
