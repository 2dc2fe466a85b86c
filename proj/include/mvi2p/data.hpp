#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mvi2p/rng.hpp"
#include "mvi2p/tensor.hpp"

namespace mvi2p {

enum class Texture { Solid, Stripes, Checker };

std::string texture_name(Texture t);
Texture parse_texture(const std::string& name);

using Color = std::array<double, 3>;

/// Appearance of one body region (head, torso, legs).
struct RegionAppearance {
  Color color{};
  Texture texture = Texture::Solid;
};

struct IdentitySpec {
  int pid = 0;
  std::array<RegionAppearance, 3> regions{};
  std::uint64_t geometry_seed = 0;
};

/// True when the two specs differ in at least one region by L-inf colour
/// distance >= 0.15 or by texture.
bool distinct(const IdentitySpec& a, const IdentitySpec& b);

struct OcclusionSpec {
  bool present = false;
  int top = 0, left = 0, height = 0, width = 0;
  double fill = 0.0;  // grey level of the obstacle
  Texture texture = Texture::Solid;
  double coverage_fraction = 0.0;
};

struct SampleRecord {
  Tensor image;  // [3,H,W] in [0,1]
  int pid = 0;
  int camid = 0;
  std::uint64_t view_seed = 0;
  OcclusionSpec occlusion;
};

struct ImageGeometry {
  std::size_t height = 64;
  std::size_t width = 32;
};

/// Generates identities for a corpus. Each spec is a deterministic function
/// of (pid, master_seed) and of the specs already issued, which it must stay
/// distinct from.
class IdentityGenerator {
 public:
  explicit IdentityGenerator(std::uint64_t master_seed) : master_seed_(master_seed) {}

  /// Specs for pids 0..count-1, pairwise distinct.
  std::vector<IdentitySpec> generate(int count) const;

  std::uint64_t master_seed() const { return master_seed_; }

 private:
  std::uint64_t master_seed_;
};

/// Spec for one pid, resampled until distinct from `existing`. Throws after
/// 1000 failed attempts.
IdentitySpec generate_identity(int pid, std::uint64_t master_seed,
                               const std::vector<IdentitySpec>& existing = {});

/// Draws the occluder for a view (deterministic in view_seed).
OcclusionSpec sample_occlusion(std::uint64_t view_seed, double occlusion_prob,
                               const ImageGeometry& geometry = {});

/// Deterministic image for (spec, camid, view_seed) with the given occluder.
Tensor render_image(const IdentitySpec& spec, int camid, std::uint64_t view_seed,
                    const OcclusionSpec& occlusion, const ImageGeometry& geometry = {});

SampleRecord render_sample(const IdentitySpec& spec, int camid, std::uint64_t view_seed,
                           double occlusion_prob, const ImageGeometry& geometry = {});

struct SplitConfig {
  int num_ids = 50;
  int imgs_per_id = 20;
  int num_cams = 4;
  int queries_per_id = 4;
  double occlusion_prob_train = 0.5;
  double occlusion_prob_query = 1.0;
  double occlusion_prob_gallery = 0.3;
  std::uint64_t master_seed = 0;
  ImageGeometry geometry{};

  void validate() const;
};

struct DatasetSplit {
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> query;
  std::vector<SampleRecord> gallery;
  int num_train_identities = 0;
  SplitConfig config;
};

/// Builds the corpus: the first half of the pids train, the rest are split
/// per identity into occluded queries and a mixed gallery. Validates the
/// split invariants before returning.
DatasetSplit make_split(const SplitConfig& config);

/// Throws if a split breaks the train/test disjointness or cross-camera rule.
void validate_split(const DatasetSplit& split);

/// FNV-1a over every record's metadata and pixel bits, in split order.
std::uint64_t corpus_hash(const DatasetSplit& split);

/// P identities without replacement, K images each (with replacement only
/// when an identity has fewer than K). Returns record indices grouped by
/// identity.
std::vector<std::size_t> pk_sample(const std::vector<SampleRecord>& train, std::size_t P,
                                   std::size_t K, Rng& rng);

// ---------------------------------------------------------------------------
// On-disk corpus: manifest.txt plus one binary PPM per record.
// ---------------------------------------------------------------------------

void write_corpus(const std::filesystem::path& dir, const DatasetSplit& split);
/// Rebuilds the split from the manifest (images are re-rendered from it).
DatasetSplit read_corpus(const std::filesystem::path& dir);

void write_ppm(const std::filesystem::path& path, const Tensor& image);
/// 8-bit binary PGM, pixel = round(255 * value), values clamped to [0,1].
void write_pgm(const std::filesystem::path& path, const Tensor& map, const std::string& comment = "");

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace mvi2p
