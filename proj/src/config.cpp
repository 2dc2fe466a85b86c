#include "mvi2p/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace mvi2p {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  if (!(is >> v) || !(is >> std::ws).eof()) {
    throw ConfigError("config: bad value for " + key + ": '" + text + "'");
  }
  if constexpr (std::is_unsigned_v<T>) {
    if (!text.empty() && text[0] == '-') throw ConfigError("config: " + key + " must be non-negative");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("config: bad boolean for " + key + ": '" + text + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<T>(key, item));
  }
  return out;
}

std::string fmt_double(double v) {
  // Shortest representation that round-trips.
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
std::string fmt_list(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(xs[i]);
  }
  return out;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MVI2P_INT_FIELD(name, type)                                                        \
  Field {                                                                                  \
    #name, [](RunConfig& c, const std::string& v) { c.name = parse_number<type>(#name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.name); }                          \
  }
#define MVI2P_REAL_FIELD(name)                                                               \
  Field {                                                                                    \
    #name, [](RunConfig& c, const std::string& v) { c.name = parse_number<double>(#name, v); }, \
        [](const RunConfig& c) { return fmt_double(c.name); }                                \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      MVI2P_INT_FIELD(num_ids, int),
      MVI2P_INT_FIELD(imgs_per_id, int),
      MVI2P_INT_FIELD(num_cams, int),
      MVI2P_INT_FIELD(queries_per_id, int),
      MVI2P_REAL_FIELD(occlusion_prob_train),
      MVI2P_REAL_FIELD(occlusion_prob_query),
      MVI2P_REAL_FIELD(occlusion_prob_gallery),
      MVI2P_INT_FIELD(data_seed, std::uint64_t),
      MVI2P_INT_FIELD(image_height, std::size_t),
      MVI2P_INT_FIELD(image_width, std::size_t),
      Field{"stage_channels",
            [](RunConfig& c, const std::string& v) {
              c.stage_channels = parse_list<std::size_t>("stage_channels", v);
            },
            [](const RunConfig& c) { return fmt_list(c.stage_channels); }},
      Field{"stage_strides",
            [](RunConfig& c, const std::string& v) {
              c.stage_strides = parse_list<std::size_t>("stage_strides", v);
            },
            [](const RunConfig& c) { return fmt_list(c.stage_strides); }},
      MVI2P_INT_FIELD(P, std::size_t),
      MVI2P_INT_FIELD(K, std::size_t),
      MVI2P_INT_FIELD(M, std::size_t),
      MVI2P_REAL_FIELD(lambda),
      MVI2P_REAL_FIELD(epsilon),
      MVI2P_REAL_FIELD(gem_p),
      Field{"variant",
            [](RunConfig& c, const std::string& v) {
              try {
                c.variant = parse_variant(v);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("config: ") + e.what());
              }
            },
            [](const RunConfig& c) { return variant_name(c.variant); }},
      Field{"detach_teacher",
            [](RunConfig& c, const std::string& v) {
              c.detach_teacher = parse_bool("detach_teacher", v);
            },
            [](const RunConfig& c) { return std::string(c.detach_teacher ? "true" : "false"); }},
      MVI2P_INT_FIELD(epochs, int),
      MVI2P_REAL_FIELD(lr),
      Field{"lr_decay_epochs",
            [](RunConfig& c, const std::string& v) {
              c.lr_decay_epochs = parse_list<int>("lr_decay_epochs", v);
            },
            [](const RunConfig& c) { return fmt_list(c.lr_decay_epochs); }},
      MVI2P_REAL_FIELD(lr_decay_factor),
      MVI2P_INT_FIELD(seed, std::uint64_t),
      Field{"output_dir", [](RunConfig& c, const std::string& v) { c.output_dir = v; },
            [](const RunConfig& c) { return c.output_dir; }},
      Field{"corpus", [](RunConfig& c, const std::string& v) { c.corpus = v; },
            [](const RunConfig& c) { return c.corpus; }},
  };
  return table;
}

#undef MVI2P_INT_FIELD
#undef MVI2P_REAL_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return f;
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

RunConfig RunConfig::desk_scale() {
  RunConfig c;
  c.epochs = 30;
  c.lr = 3e-3;
  c.lr_decay_epochs = {10, 17};
  return c;
}

void RunConfig::validate() const {
  if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
  if (!(lambda >= 0.0)) throw ConfigError("config: lambda must be >= 0");
  if (P < 1 || K < 1 || M < 1) throw ConfigError("config: P, K and M must be >= 1");
  if (K % M != 0) {
    throw ConfigError("config: M=" + std::to_string(M) + " must divide K=" + std::to_string(K));
  }
  if (P * K < 2) throw ConfigError("config: batch P*K must hold at least 2 images");
  if (static_cast<int>(P) > num_ids / 2) {
    throw ConfigError("config: P=" + std::to_string(P) + " exceeds the training identities");
  }
  try {
    split_config().validate();
    backbone_config().validate();
    loss_config().validate();
    schedule().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

SplitConfig RunConfig::split_config() const {
  SplitConfig s;
  s.num_ids = num_ids;
  s.imgs_per_id = imgs_per_id;
  s.num_cams = num_cams;
  s.queries_per_id = queries_per_id;
  s.occlusion_prob_train = occlusion_prob_train;
  s.occlusion_prob_query = occlusion_prob_query;
  s.occlusion_prob_gallery = occlusion_prob_gallery;
  s.master_seed = data_seed;
  s.geometry = ImageGeometry{image_height, image_width};
  return s;
}

BackboneConfig RunConfig::backbone_config() const {
  BackboneConfig b;
  b.height = image_height;
  b.width = image_width;
  b.stage_channels = stage_channels;
  b.strides = stage_strides;
  return b;
}

LossConfig RunConfig::loss_config() const {
  LossConfig l;
  l.label_smoothing_epsilon = epsilon;
  l.gem_p = gem_p;
  l.lambda = lambda;
  l.views_per_group = M;
  return l;
}

LrSchedule RunConfig::schedule() const {
  return LrSchedule{lr, lr_decay_epochs, lr_decay_factor};
}

void RunConfig::set(const std::string& key, const std::string& value) {
  find_field(key).set(*this, trim(value));
}

std::string RunConfig::get(const std::string& key) const { return find_field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.emplace_back(f.key);
    return out;
  }();
  return names;
}

void RunConfig::apply_text(const std::string& text, const std::string& source) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value");
    }
    try {
      set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  apply_text(ss.str(), path.string());
}

void RunConfig::apply(const std::map<std::string, std::string>& overrides) {
  for (const auto& [k, v] : overrides) set(k, v);
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

std::string RunConfig::hash() const {
  std::string text;
  for (const auto& f : fields()) {
    const std::string key = f.key;
    if (key == "output_dir" || key == "corpus") continue;
    text += key + "=" + f.get(*this) + "\n";
  }
  return hex64(fnv1a(text.data(), text.size()));
}

}  // namespace mvi2p
