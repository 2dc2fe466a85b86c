#include "mvi2p/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mvi2p {

namespace {

// Saturated hues for clothing. Obstacles are drawn in grey only, so the two
// palettes never overlap.
constexpr std::array<Color, 8> kClothing{{
    {0.85, 0.15, 0.15},
    {0.15, 0.70, 0.20},
    {0.15, 0.25, 0.85},
    {0.90, 0.80, 0.10},
    {0.70, 0.15, 0.75},
    {0.10, 0.75, 0.80},
    {0.95, 0.50, 0.10},
    {0.45, 0.25, 0.10},
}};

constexpr double kTextureShade = 0.55;

double texture_factor(Texture t, int y, int x, int period) {
  switch (t) {
    case Texture::Solid: return 1.0;
    case Texture::Stripes: return ((y / period) % 2) ? kTextureShade : 1.0;
    case Texture::Checker: return (((y / period) + (x / period)) % 2) ? kTextureShade : 1.0;
  }
  return 1.0;
}

struct CameraModel {
  Color background;
  Color gain;
  Color offset;
};

CameraModel camera_model(int camid) {
  Rng rng(mix_seed({0xca3e7a, static_cast<std::uint64_t>(camid)}));
  CameraModel cam{};
  for (int c = 0; c < 3; ++c) {
    cam.background[c] = rng.uniform(0.25, 0.6);
    cam.gain[c] = rng.uniform(0.85, 1.15);
    cam.offset[c] = rng.uniform(-0.05, 0.05);
  }
  return cam;
}

int scaled(int base, std::size_t extent, int reference) {
  return static_cast<int>(std::lround(static_cast<double>(base) * static_cast<double>(extent) /
                                      static_cast<double>(reference)));
}

}  // namespace

std::string texture_name(Texture t) {
  switch (t) {
    case Texture::Solid: return "solid";
    case Texture::Stripes: return "stripes";
    case Texture::Checker: return "checker";
  }
  return "solid";
}

Texture parse_texture(const std::string& name) {
  if (name == "solid") return Texture::Solid;
  if (name == "stripes") return Texture::Stripes;
  if (name == "checker") return Texture::Checker;
  throw std::invalid_argument("unknown texture '" + name + "'");
}

bool distinct(const IdentitySpec& a, const IdentitySpec& b) {
  for (std::size_t r = 0; r < a.regions.size(); ++r) {
    const auto& ra = a.regions[r];
    const auto& rb = b.regions[r];
    if (ra.texture != rb.texture) return true;
    double linf = 0.0;
    for (int c = 0; c < 3; ++c) linf = std::max(linf, std::abs(ra.color[c] - rb.color[c]));
    if (linf >= 0.15) return true;
  }
  return false;
}

IdentitySpec generate_identity(int pid, std::uint64_t master_seed,
                               const std::vector<IdentitySpec>& existing) {
  if (pid < 0) throw std::invalid_argument("generate_identity: negative pid");
  for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
    Rng rng(mix_seed({master_seed, static_cast<std::uint64_t>(pid), attempt, 0x1d}));
    IdentitySpec spec;
    spec.pid = pid;
    for (auto& region : spec.regions) {
      region.color = kClothing[rng.index(kClothing.size())];
      region.texture = static_cast<Texture>(rng.index(3));
    }
    spec.geometry_seed = rng.next();
    bool ok = true;
    for (const auto& other : existing) {
      if (other.pid != pid && !distinct(spec, other)) {
        ok = false;
        break;
      }
    }
    if (ok) return spec;
  }
  throw std::runtime_error("generate_identity: no distinct appearance for pid " +
                           std::to_string(pid) + " after 1000 resamples");
}

std::vector<IdentitySpec> IdentityGenerator::generate(int count) const {
  std::vector<IdentitySpec> specs;
  specs.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int pid = 0; pid < count; ++pid) specs.push_back(generate_identity(pid, master_seed_, specs));
  return specs;
}

OcclusionSpec sample_occlusion(std::uint64_t view_seed, double occlusion_prob,
                               const ImageGeometry& geometry) {
  if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0)) {
    throw std::invalid_argument("occlusion probability must lie in [0,1]");
  }
  Rng rng(mix_seed({view_seed, 0x0cc1}));
  OcclusionSpec occ;
  if (!rng.bernoulli(occlusion_prob)) return occ;
  const int H = static_cast<int>(geometry.height), W = static_cast<int>(geometry.width);
  const double total = static_cast<double>(H * W);
  const double target = rng.uniform(0.2, 0.6) * total;
  const int h_min = static_cast<int>(std::ceil(target / W));
  const int h = rng.integer(std::max(h_min, 1), H);
  int w = std::clamp(static_cast<int>(std::lround(target / h)), 1, W);
  while (w > 1 && h * w > 0.6 * total) --w;
  while (w < W && h * w < 0.2 * total) ++w;
  occ.present = true;
  occ.height = h;
  occ.width = w;
  occ.top = rng.integer(0, H - h);
  occ.left = rng.integer(0, W - w);
  occ.fill = rng.uniform(0.2, 0.8);
  occ.texture = static_cast<Texture>(rng.index(3));
  occ.coverage_fraction = static_cast<double>(h * w) / total;
  return occ;
}

Tensor render_image(const IdentitySpec& spec, int camid, std::uint64_t view_seed,
                    const OcclusionSpec& occlusion, const ImageGeometry& geometry) {
  const int H = static_cast<int>(geometry.height), W = static_cast<int>(geometry.width);
  const auto cam = camera_model(camid);
  Rng view(mix_seed({view_seed, 0x7e3}));
  Rng shape_rng(spec.geometry_seed);

  // Layout on the 64x32 reference canvas, scaled to the requested size.
  const int grow = shape_rng.integer(-1, 1);
  const int dy = view.integer(-2, 2);
  const int dx = view.integer(-2, 2);
  const bool flip = view.bernoulli(0.5);
  auto sy = [&](int v) { return scaled(v, geometry.height, 64) + dy; };
  auto sx = [&](int v) { return scaled(v, geometry.width, 32) + dx; };
  struct Box {
    int top, bottom, left, right, region;
  };
  const Box parts[] = {
      {sy(4), sy(16), sx(11), sx(21), 0},
      {sy(16), sy(36 + grow), sx(8 - grow), sx(24 + grow), 1},
      {sy(36 + grow), sy(60), sx(9), sx(15), 2},
      {sy(36 + grow), sy(60), sx(17), sx(23), 2},
  };

  std::vector<double> scene(static_cast<std::size_t>(3 * H * W));
  auto px = [&](int c, int y, int x) -> double& {
    return scene[static_cast<std::size_t>((c * H + y) * W + x)];
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) px(c, y, x) = cam.background[c] * (0.9 + 0.2 * y / H);
  for (const auto& box : parts) {
    const auto& app = spec.regions[static_cast<std::size_t>(box.region)];
    for (int y = std::max(box.top, 0); y < std::min(box.bottom, H); ++y)
      for (int x = std::max(box.left, 0); x < std::min(box.right, W); ++x) {
        const double f = texture_factor(app.texture, y - box.top, x - box.left, 2);
        for (int c = 0; c < 3; ++c) px(c, y, x) = app.color[c] * f;
      }
  }
  if (flip) {
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W / 2; ++x) std::swap(px(c, y, x), px(c, y, W - 1 - x));
  }
  if (occlusion.present) {
    for (int y = occlusion.top; y < occlusion.top + occlusion.height; ++y)
      for (int x = occlusion.left; x < occlusion.left + occlusion.width; ++x) {
        const double f = texture_factor(occlusion.texture, y - occlusion.top, x - occlusion.left, 4);
        for (int c = 0; c < 3; ++c) px(c, y, x) = occlusion.fill * (0.6 + 0.4 * f);
      }
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double v = px(c, y, x) * cam.gain[c] + cam.offset[c] + 0.03 * view.normal();
        px(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
  return Tensor(Shape{3, geometry.height, geometry.width}, std::move(scene));
}

SampleRecord render_sample(const IdentitySpec& spec, int camid, std::uint64_t view_seed,
                           double occlusion_prob, const ImageGeometry& geometry) {
  SampleRecord rec;
  rec.pid = spec.pid;
  rec.camid = camid;
  rec.view_seed = view_seed;
  rec.occlusion = sample_occlusion(view_seed, occlusion_prob, geometry);
  rec.image = render_image(spec, camid, view_seed, rec.occlusion, geometry);
  return rec;
}

void SplitConfig::validate() const {
  if (num_ids < 4 || num_ids % 2 != 0) {
    throw std::invalid_argument("split: num_ids must be even and >= 4");
  }
  if (num_cams < 2) {
    throw std::invalid_argument(
        "split: num_cams must be >= 2 (every query needs a cross-camera gallery match)");
  }
  if (queries_per_id < 1 || imgs_per_id - queries_per_id < 2) {
    throw std::invalid_argument("split: need >= 1 query and >= 2 gallery images per identity");
  }
  for (double p : {occlusion_prob_train, occlusion_prob_query, occlusion_prob_gallery}) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("split: probabilities must lie in [0,1]");
  }
  if (geometry.height < 8 || geometry.width < 4) throw std::invalid_argument("split: image too small");
}

DatasetSplit make_split(const SplitConfig& config) {
  config.validate();
  DatasetSplit split;
  split.config = config;
  split.num_train_identities = config.num_ids / 2;
  const auto specs = IdentityGenerator(config.master_seed).generate(config.num_ids);
  for (const auto& spec : specs) {
    const bool train = spec.pid < split.num_train_identities;
    for (int j = 0; j < config.imgs_per_id; ++j) {
      const int camid = (spec.pid + j) % config.num_cams;
      const auto seed = mix_seed({config.master_seed, static_cast<std::uint64_t>(spec.pid),
                                  static_cast<std::uint64_t>(j), 0x51e});
      if (train) {
        split.train.push_back(
            render_sample(spec, camid, seed, config.occlusion_prob_train, config.geometry));
      } else if (j < config.queries_per_id) {
        split.query.push_back(
            render_sample(spec, camid, seed, config.occlusion_prob_query, config.geometry));
      } else {
        split.gallery.push_back(
            render_sample(spec, camid, seed, config.occlusion_prob_gallery, config.geometry));
      }
    }
  }
  validate_split(split);
  return split;
}

void validate_split(const DatasetSplit& split) {
  std::set<int> train_ids, gallery_ids;
  for (const auto& r : split.train) train_ids.insert(r.pid);
  std::map<int, std::set<int>> gallery_cams;
  for (const auto& r : split.gallery) {
    gallery_ids.insert(r.pid);
    gallery_cams[r.pid].insert(r.camid);
  }
  for (const auto& r : split.query) {
    if (train_ids.count(r.pid)) {
      throw std::invalid_argument("split: query pid " + std::to_string(r.pid) + " is a training identity");
    }
    const auto it = gallery_cams.find(r.pid);
    if (it == gallery_cams.end()) {
      throw std::invalid_argument("split: query pid " + std::to_string(r.pid) + " missing from gallery");
    }
    const bool cross = std::any_of(it->second.begin(), it->second.end(),
                                   [&](int cam) { return cam != r.camid; });
    if (!cross) {
      throw std::invalid_argument("split: query pid " + std::to_string(r.pid) +
                                  " has no gallery image from another camera");
    }
  }
  for (int pid : gallery_ids) {
    if (train_ids.count(pid)) {
      throw std::invalid_argument("split: gallery pid " + std::to_string(pid) + " is a training identity");
    }
  }
  if (static_cast<int>(train_ids.size()) != split.num_train_identities) {
    throw std::invalid_argument("split: training identity count mismatch");
  }
  for (int pid : train_ids) {
    if (pid < 0 || pid >= split.num_train_identities) {
      throw std::invalid_argument("split: training pids must be 0..P_total-1");
    }
  }
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::uint64_t corpus_hash(const DatasetSplit& split) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const auto& v) { h = fnv1a(&v, sizeof v, h); };
  for (const auto* part : {&split.train, &split.query, &split.gallery}) {
    mix(part->size());
    for (const auto& r : *part) {
      mix(r.pid);
      mix(r.camid);
      mix(r.view_seed);
      mix(r.occlusion.present);
      mix(r.occlusion.top);
      mix(r.occlusion.left);
      mix(r.occlusion.height);
      mix(r.occlusion.width);
      mix(r.occlusion.fill);
      mix(static_cast<int>(r.occlusion.texture));
      auto px = r.image.data();
      h = fnv1a(px.data(), px.size() * sizeof(double), h);
    }
  }
  return h;
}

std::vector<std::size_t> pk_sample(const std::vector<SampleRecord>& train, std::size_t P,
                                   std::size_t K, Rng& rng) {
  if (P < 1 || K < 1) throw std::invalid_argument("pk_sample: P and K must be >= 1");
  std::map<int, std::vector<std::size_t>> by_pid;
  for (std::size_t i = 0; i < train.size(); ++i) by_pid[train[i].pid].push_back(i);
  if (by_pid.size() < P) {
    throw std::invalid_argument("pk_sample: need " + std::to_string(P) + " identities, have " +
                                std::to_string(by_pid.size()));
  }
  std::vector<const std::vector<std::size_t>*> pool;
  for (const auto& [pid, idx] : by_pid) pool.push_back(&idx);
  // Partial Fisher-Yates: the first P slots become the chosen identities.
  for (std::size_t i = 0; i < P; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);

  std::vector<std::size_t> batch;
  batch.reserve(P * K);
  for (std::size_t i = 0; i < P; ++i) {
    std::vector<std::size_t> imgs = *pool[i];
    if (imgs.size() >= K) {
      for (std::size_t k = 0; k < K; ++k) {
        std::swap(imgs[k], imgs[k + rng.index(imgs.size() - k)]);
        batch.push_back(imgs[k]);
      }
    } else {
      for (std::size_t k = 0; k < K; ++k) batch.push_back(imgs[rng.index(imgs.size())]);
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kManifestHeader = "# mvi2p corpus manifest v1";

std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_double(const std::string& token, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0') {
    throw std::runtime_error("manifest: bad " + what + " '" + token + "'");
  }
  return v;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.dim() != 3 || image.size(0) != 3) {
    throw std::invalid_argument("write_ppm: expected [3,H,W], got " + shape_str(image.shape()));
  }
  const std::size_t H = image.size(1), W = image.size(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P6\n" << W << ' ' << H << "\n255\n";
  std::vector<unsigned char> bytes(3 * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image[(c * H + y) * W + x], 0.0, 1.0);
        bytes[(y * W + x) * 3 + c] = static_cast<unsigned char>(std::lround(255.0 * v));
      }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

void write_pgm(const std::filesystem::path& path, const Tensor& map, const std::string& comment) {
  if (map.dim() != 2) throw std::invalid_argument("write_pgm: expected [H,W], got " + shape_str(map.shape()));
  const std::size_t H = map.size(0), W = map.size(1);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P5\n";
  if (!comment.empty()) {
    if (comment.find('\n') != std::string::npos) throw std::invalid_argument("write_pgm: multi-line comment");
    os << "# " << comment << '\n';
  }
  os << W << ' ' << H << "\n255\n";
  std::vector<unsigned char> bytes(H * W);
  for (std::size_t i = 0; i < H * W; ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(255.0 * std::clamp(map[i], 0.0, 1.0)));
  }
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

void write_corpus(const std::filesystem::path& dir, const DatasetSplit& split) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  std::ofstream os(dir / "manifest.txt");
  if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  const auto& c = split.config;
  os << kManifestHeader << '\n';
  os << "config num_ids=" << c.num_ids << " imgs_per_id=" << c.imgs_per_id
     << " num_cams=" << c.num_cams << " queries_per_id=" << c.queries_per_id
     << " occlusion_prob_train=" << hexfloat(c.occlusion_prob_train)
     << " occlusion_prob_query=" << hexfloat(c.occlusion_prob_query)
     << " occlusion_prob_gallery=" << hexfloat(c.occlusion_prob_gallery)
     << " master_seed=" << c.master_seed << " height=" << c.geometry.height
     << " width=" << c.geometry.width << '\n';
  os << "hash " << hex64(corpus_hash(split)) << '\n';
  os << "# split pid camid view_seed occluded top left height width fill texture coverage path\n";
  const std::pair<const char*, const std::vector<SampleRecord>*> parts[] = {
      {"train", &split.train}, {"query", &split.query}, {"gallery", &split.gallery}};
  for (const auto& [name, records] : parts) {
    for (std::size_t i = 0; i < records->size(); ++i) {
      const auto& r = (*records)[i];
      const std::string rel = std::string("images/") + name + "_" + std::to_string(i) + ".ppm";
      const auto& o = r.occlusion;
      os << name << ' ' << r.pid << ' ' << r.camid << ' ' << r.view_seed << ' ' << o.present << ' '
         << o.top << ' ' << o.left << ' ' << o.height << ' ' << o.width << ' ' << hexfloat(o.fill)
         << ' ' << texture_name(o.texture) << ' ' << hexfloat(o.coverage_fraction) << ' ' << rel
         << '\n';
      write_ppm(dir / rel, r.image);
    }
  }
  if (!os) throw std::runtime_error("manifest write failed in " + dir.string());
}

DatasetSplit read_corpus(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw std::runtime_error("corpus: no manifest.txt in " + dir.string());
  std::string line;
  if (!std::getline(is, line) || line != kManifestHeader) {
    throw std::runtime_error("corpus: unrecognised manifest header");
  }
  SplitConfig cfg;
  std::string stored_hash;
  std::vector<std::string> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head == "config") {
      std::string kv;
      while (ls >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw std::runtime_error("corpus: bad config entry " + kv);
        const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
        if (k == "num_ids") cfg.num_ids = std::stoi(v);
        else if (k == "imgs_per_id") cfg.imgs_per_id = std::stoi(v);
        else if (k == "num_cams") cfg.num_cams = std::stoi(v);
        else if (k == "queries_per_id") cfg.queries_per_id = std::stoi(v);
        else if (k == "occlusion_prob_train") cfg.occlusion_prob_train = parse_double(v, k);
        else if (k == "occlusion_prob_query") cfg.occlusion_prob_query = parse_double(v, k);
        else if (k == "occlusion_prob_gallery") cfg.occlusion_prob_gallery = parse_double(v, k);
        else if (k == "master_seed") cfg.master_seed = std::stoull(v);
        else if (k == "height") cfg.geometry.height = std::stoul(v);
        else if (k == "width") cfg.geometry.width = std::stoul(v);
        else throw std::runtime_error("corpus: unknown config key " + k);
      }
    } else if (head == "hash") {
      ls >> stored_hash;
    } else {
      rows.push_back(line);
    }
  }
  cfg.validate();
  const auto specs = IdentityGenerator(cfg.master_seed).generate(cfg.num_ids);
  DatasetSplit split;
  split.config = cfg;
  split.num_train_identities = cfg.num_ids / 2;
  for (const auto& row : rows) {
    std::istringstream ls(row);
    std::string part, fill, texture, coverage, path;
    SampleRecord r;
    auto& o = r.occlusion;
    if (!(ls >> part >> r.pid >> r.camid >> r.view_seed >> o.present >> o.top >> o.left >> o.height >>
          o.width >> fill >> texture >> coverage >> path)) {
      throw std::runtime_error("corpus: malformed manifest row: " + row);
    }
    o.fill = parse_double(fill, "fill");
    o.texture = parse_texture(texture);
    o.coverage_fraction = parse_double(coverage, "coverage");
    if (r.pid < 0 || r.pid >= cfg.num_ids) throw std::runtime_error("corpus: pid out of range: " + row);
    r.image = render_image(specs[static_cast<std::size_t>(r.pid)], r.camid, r.view_seed, o, cfg.geometry);
    if (part == "train") split.train.push_back(std::move(r));
    else if (part == "query") split.query.push_back(std::move(r));
    else if (part == "gallery") split.gallery.push_back(std::move(r));
    else throw std::runtime_error("corpus: unknown split '" + part + "'");
  }
  validate_split(split);
  if (stored_hash != hex64(corpus_hash(split))) {
    throw std::runtime_error("corpus: content hash mismatch (manifest says " + stored_hash + ")");
  }
  return split;
}

}  // namespace mvi2p
