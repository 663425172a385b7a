#include "bita/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "bita/rng.hpp"

namespace bita {

namespace {

using nlohmann::json;

const std::array<const char*, 3> kShapes = {"square", "circle", "triangle"};
const std::array<const char*, 4> kColors = {"red", "green", "blue", "yellow"};
const std::array<const char*, 3> kCountWords = {"one", "two", "three"};

std::array<double, 3> color_rgb(const std::string& color) {
  if (color == "red") return {1.0, 0.1, 0.1};
  if (color == "green") return {0.1, 0.9, 0.1};
  if (color == "blue") return {0.1, 0.2, 1.0};
  if (color == "yellow") return {1.0, 0.9, 0.1};
  throw std::invalid_argument("unknown color: " + color);
}

std::string plural(const std::string& shape, int count) {
  return count == 1 ? shape : shape + "s";
}

std::string group_phrase(const ObjectGroup& g) {
  std::ostringstream os;
  os << kCountWords[(std::size_t)(g.count - 1)] << " " << g.color << " "
     << plural(g.shape, g.count);
  return os.str();
}

std::string scene_phrase(const SceneDesc& scene) {
  std::string out;
  for (std::size_t i = 0; i < scene.groups.size(); ++i) {
    if (i > 0) out += " and ";
    out += group_phrase(scene.groups[i]);
  }
  return out;
}

const std::array<const char*, 5> kTemplates = {
    "a photo of %s",
    "an image of %s",
    "%s on a gray background",
    "the picture shows %s",
    "this scene contains %s",
};

std::string apply_template(std::size_t t, const std::string& phrase) {
  std::string tpl = kTemplates[t];
  const auto pos = tpl.find("%s");
  return tpl.substr(0, pos) + phrase + tpl.substr(pos + 2);
}

// candidate scene list: every single group, then every two-group combination
struct ProtoGroup {
  std::size_t shape, color;
  int count;
};

std::vector<std::vector<ProtoGroup>> enumerate_scene_space() {
  std::vector<std::vector<ProtoGroup>> singles;
  for (std::size_t s = 0; s < kShapes.size(); ++s) {
    for (std::size_t c = 0; c < kColors.size(); ++c) {
      for (int n = 1; n <= 3; ++n) singles.push_back({{s, c, n}});
    }
  }
  std::vector<std::vector<ProtoGroup>> doubles;
  const std::size_t combos = kShapes.size() * kColors.size();
  for (std::size_t a = 0; a < combos; ++a) {
    for (std::size_t b = a + 1; b < combos; ++b) {
      for (int na = 1; na <= 3; ++na) {
        for (int nb = 1; nb <= 3; ++nb) {
          doubles.push_back({{a / kColors.size(), a % kColors.size(), na},
                             {b / kColors.size(), b % kColors.size(), nb}});
        }
      }
    }
  }
  std::vector<std::vector<ProtoGroup>> all = std::move(singles);
  all.insert(all.end(), doubles.begin(), doubles.end());
  return all;
}

void place_instances(SceneDesc& scene, Rng& rng) {
  const double h = (double)scene.grid_size;
  const std::size_t n_groups = scene.groups.size();
  for (std::size_t g = 0; g < n_groups; ++g) {
    auto& grp = scene.groups[g];
    const double cy = h * ((double)g + 0.5) / (double)n_groups;
    for (int i = 0; i < grp.count; ++i) {
      const double cx = h * ((double)i + 0.5) / (double)grp.count;
      const double jx = (double)(int)(rng.uniform_int(3)) - 1.0;  // -1..1 px
      const double jy = (double)(int)(rng.uniform_int(3)) - 1.0;
      const double size = 7.0 + (double)rng.uniform_int(2);       // 7..8 px
      grp.instances.push_back({cx + jx, cy + jy, size});
    }
  }
}

json scene_to_json(const SceneDesc& scene) {
  json groups = json::array();
  for (const auto& g : scene.groups) {
    json inst = json::array();
    for (const auto& p : g.instances) inst.push_back({p[0], p[1], p[2]});
    groups.push_back({{"shape", g.shape},
                      {"color", g.color},
                      {"count", g.count},
                      {"instances", inst}});
  }
  return json{{"grid", scene.grid_size}, {"groups", groups}};
}

SceneDesc scene_from_json(const json& j) {
  SceneDesc scene;
  scene.grid_size = j.at("grid").get<std::size_t>();
  for (const auto& g : j.at("groups")) {
    ObjectGroup grp;
    grp.shape = g.at("shape").get<std::string>();
    grp.color = g.at("color").get<std::string>();
    grp.count = g.at("count").get<int>();
    for (const auto& p : g.at("instances")) {
      grp.instances.push_back({p.at(0).get<double>(), p.at(1).get<double>(),
                               p.at(2).get<double>()});
    }
    scene.groups.push_back(std::move(grp));
  }
  return scene;
}

const char kB64Chars[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(const std::string& in) {
  std::string out;
  int val = 0, bits = -6;
  for (unsigned char ch : in) {
    val = (val << 8) + ch;
    bits += 8;
    while (bits >= 0) {
      out.push_back(kB64Chars[(val >> bits) & 0x3F]);
      bits -= 6;
    }
  }
  if (bits > -6) out.push_back(kB64Chars[((val << 8) >> (bits + 8)) & 0x3F]);
  while (out.size() % 4) out.push_back('=');
  return out;
}

std::string b64_decode(const std::string& in) {
  std::vector<int> rev(256, -1);
  for (int i = 0; i < 64; ++i) rev[(unsigned char)kB64Chars[i]] = i;
  std::string out;
  int val = 0, bits = -8;
  for (unsigned char ch : in) {
    if (ch == '=') break;
    if (rev[ch] == -1) {
      throw std::invalid_argument("invalid base64 payload");
    }
    val = (val << 6) + rev[ch];
    bits += 6;
    if (bits >= 0) {
      out.push_back((char)((val >> bits) & 0xFF));
      bits -= 8;
    }
  }
  return out;
}

double bilinear_sample(const Image& img, double y, double x, std::size_t ch) {
  const double yc = std::clamp(y, 0.0, (double)img.height - 1.0);
  const double xc = std::clamp(x, 0.0, (double)img.width - 1.0);
  const std::size_t y0 = (std::size_t)yc;
  const std::size_t x0 = (std::size_t)xc;
  const std::size_t y1 = std::min(y0 + 1, img.height - 1);
  const std::size_t x1 = std::min(x0 + 1, img.width - 1);
  const double fy = yc - (double)y0;
  const double fx = xc - (double)x0;
  const double top = img.at(y0, x0, ch) * (1 - fx) + img.at(y0, x1, ch) * fx;
  const double bot = img.at(y1, x0, ch) * (1 - fx) + img.at(y1, x1, ch) * fx;
  return top * (1 - fy) + bot * fy;
}

std::uint32_t read_u32le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return (std::uint32_t)b[0] | ((std::uint32_t)b[1] << 8) |
         ((std::uint32_t)b[2] << 16) | ((std::uint32_t)b[3] << 24);
}

void write_u32le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xFF),
                        (unsigned char)((v >> 8) & 0xFF),
                        (unsigned char)((v >> 16) & 0xFF),
                        (unsigned char)((v >> 24) & 0xFF)};
  out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace

Image render_scene(const SceneDesc& scene) {
  const std::size_t n = scene.grid_size;
  Image img(n, n, 0.5);
  for (const auto& g : scene.groups) {
    const auto rgb = color_rgb(g.color);
    for (const auto& inst : g.instances) {
      const double cx = inst[0], cy = inst[1], s = inst[2];
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          const double dx = (double)x - cx;
          const double dy = (double)y - cy;
          bool inside = false;
          if (g.shape == "square") {
            inside = std::abs(dx) <= s / 2 && std::abs(dy) <= s / 2;
          } else if (g.shape == "circle") {
            inside = dx * dx + dy * dy <= (s / 2) * (s / 2);
          } else {  // upward-pointing triangle, apex at cy - s/2
            const double t = (dy + s / 2) / s;  // 0 at apex, 1 at base
            inside = t >= 0.0 && t <= 1.0 && std::abs(dx) <= t * s / 2;
          }
          if (inside) {
            for (std::size_t ch = 0; ch < 3; ++ch) img.at(y, x, ch) = rgb[ch];
          }
        }
      }
    }
  }
  return img;
}

std::vector<std::string> scene_object_words(const SceneDesc& scene) {
  std::vector<std::string> words;
  for (const auto& g : scene.groups) {
    words.push_back(g.color);
    words.push_back(g.shape);
  }
  return words;
}

std::vector<ImageTextPair> generate_synthetic_dataset(const SyntheticSpec& spec,
                                                      std::size_t n_pairs,
                                                      std::uint64_t seed) {
  if (n_pairs < 1) {
    throw std::invalid_argument("generate_synthetic_dataset: n_pairs >= 1");
  }
  if (spec.captions_per_pair < 1 ||
      spec.captions_per_pair > (int)kTemplates.size()) {
    throw std::invalid_argument(
        "generate_synthetic_dataset: captions_per_pair must be 1..5");
  }
  auto space = enumerate_scene_space();
  if (n_pairs > space.size()) {
    std::ostringstream os;
    os << "generate_synthetic_dataset: inventory supports at most "
       << space.size() << " unique scenes, requested " << n_pairs;
    throw std::invalid_argument(os.str());
  }
  // shuffle singles and doubles separately, keeping singles first
  constexpr std::size_t kSingles = 36;
  Rng order_rng(derive_seed(seed, 11));
  std::vector<std::vector<ProtoGroup>> singles(space.begin(),
                                               space.begin() + kSingles);
  std::vector<std::vector<ProtoGroup>> doubles(space.begin() + kSingles,
                                               space.end());
  order_rng.shuffle(singles);
  order_rng.shuffle(doubles);
  singles.insert(singles.end(), doubles.begin(), doubles.end());

  std::vector<ImageTextPair> out;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    Rng pair_rng(derive_seed(seed, 1000 + i));
    SceneDesc scene;
    scene.grid_size = spec.grid_size;
    for (const auto& pg : singles[i]) {
      ObjectGroup g;
      g.shape = kShapes[pg.shape];
      g.color = kColors[pg.color];
      g.count = pg.count;
      scene.groups.push_back(std::move(g));
    }
    place_instances(scene, pair_rng);

    ImageTextPair pair;
    std::ostringstream id;
    id << "synth-" << seed << "-" << i;
    pair.id = id.str();
    pair.image = render_scene(scene);
    const std::string phrase = scene_phrase(scene);
    std::vector<std::size_t> tpl(kTemplates.size());
    std::iota(tpl.begin(), tpl.end(), 0);
    pair_rng.shuffle(tpl);
    for (int c = 0; c < spec.captions_per_pair; ++c) {
      pair.captions.push_back(apply_template(tpl[(std::size_t)c], phrase));
    }
    pair.scene = std::move(scene);
    out.push_back(std::move(pair));
  }
  return out;
}

Image read_raw_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open raw image: " + path);
  const std::uint32_t h = read_u32le(in);
  const std::uint32_t w = read_u32le(in);
  const std::uint32_t c = read_u32le(in);
  if (!in || c != 3) {
    throw std::runtime_error("raw image header invalid: " + path);
  }
  Image img(h, w);
  std::vector<float> buf(img.rgb.size());
  in.read(reinterpret_cast<char*>(buf.data()),
          (std::streamsize)(buf.size() * sizeof(float)));
  if (!in) throw std::runtime_error("raw image payload truncated: " + path);
  for (std::size_t i = 0; i < buf.size(); ++i) img.rgb[i] = buf[i];
  return img;
}

void write_raw_image(const Image& image, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write raw image: " + path);
  write_u32le(out, (std::uint32_t)image.height);
  write_u32le(out, (std::uint32_t)image.width);
  write_u32le(out, 3);
  std::vector<float> buf(image.rgb.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = (float)image.rgb[i];
  out.write(reinterpret_cast<const char*>(buf.data()),
            (std::streamsize)(buf.size() * sizeof(float)));
}

std::vector<ImageTextPair> load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  std::vector<ImageTextPair> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const std::exception& e) {
      std::ostringstream os;
      os << path << ":" << line_no << ": invalid JSON: " << e.what();
      throw std::runtime_error(os.str());
    }
    ImageTextPair pair;
    try {
      pair.id = rec.at("id").get<std::string>();
      pair.captions = rec.at("captions").get<std::vector<std::string>>();
      const std::string image_ref = rec.at("image").get<std::string>();
      if (pair.captions.empty()) {
        throw std::runtime_error("record '" + pair.id + "' has no captions");
      }
      if (image_ref.rfind("synthetic:", 0) == 0) {
        pair.scene =
            scene_from_json(json::parse(b64_decode(image_ref.substr(10))));
        pair.image = render_scene(*pair.scene);
      } else if (image_ref.rfind("raw:", 0) == 0) {
        pair.image = read_raw_image((dir / image_ref.substr(4)).string());
      } else {
        throw std::runtime_error("record '" + pair.id +
                                 "' has unknown image payload scheme");
      }
    } catch (const json::exception& e) {
      std::ostringstream os;
      os << path << ":" << line_no << ": bad record: " << e.what();
      throw std::runtime_error(os.str());
    }
    for (double v : pair.image.rgb) {
      if (v < 0.0 || v > 1.0) {
        std::ostringstream os;
        os << path << ":" << line_no << ": record '" << pair.id
           << "' has pixel values outside [0, 1]";
        throw std::runtime_error(os.str());
      }
    }
    out.push_back(std::move(pair));
  }
  return out;
}

void save_manifest(const std::vector<ImageTextPair>& pairs,
                   const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  std::size_t raw_counter = 0;
  for (const auto& pair : pairs) {
    json rec;
    rec["id"] = pair.id;
    rec["captions"] = pair.captions;
    if (pair.scene) {
      rec["image"] = "synthetic:" + b64_encode(scene_to_json(*pair.scene).dump());
    } else {
      std::ostringstream name;
      name << pair.id << "-" << raw_counter++ << ".f32";
      write_raw_image(pair.image, (dir / name.str()).string());
      rec["image"] = "raw:" + name.str();
    }
    out << rec.dump() << "\n";
  }
}

Image flip_horizontal(const Image& image) {
  Image out(image.height, image.width);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        out.at(y, x, ch) = image.at(y, image.width - 1 - x, ch);
      }
    }
  }
  return out;
}

Image augment(const Image& image, std::uint64_t seed) {
  Rng rng(seed);
  const double area = rng.uniform(0.6, 1.0);
  const double side_frac = std::sqrt(area);
  const std::size_t crop_h =
      std::max<std::size_t>(1, (std::size_t)((double)image.height * side_frac));
  const std::size_t crop_w =
      std::max<std::size_t>(1, (std::size_t)((double)image.width * side_frac));
  const std::size_t y0 = image.height > crop_h
                             ? rng.uniform_int(image.height - crop_h + 1)
                             : 0;
  const std::size_t x0 =
      image.width > crop_w ? rng.uniform_int(image.width - crop_w + 1) : 0;
  Image out(image.height, image.width);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      // half-pixel-center mapping into the crop window
      const double sy = (double)y0 + ((double)y + 0.5) * (double)crop_h /
                                         (double)out.height - 0.5;
      const double sx = (double)x0 + ((double)x + 0.5) * (double)crop_w /
                                         (double)out.width - 0.5;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        out.at(y, x, ch) = bilinear_sample(image, sy, sx, ch);
      }
    }
  }
  if (rng.uniform() < 0.5) out = flip_horizontal(out);
  return out;
}

std::vector<Batch> make_batches(const std::vector<ImageTextPair>& dataset,
                                const Vocabulary& vocab,
                                std::size_t batch_size,
                                std::uint64_t epoch_seed,
                                std::size_t max_text_len) {
  if (batch_size < 2) {
    throw std::invalid_argument("make_batches: batch_size must be >= 2");
  }
  if (dataset.size() < batch_size) {
    std::ostringstream os;
    os << "make_batches: dataset of " << dataset.size()
       << " pairs is smaller than batch_size " << batch_size;
    throw std::invalid_argument(os.str());
  }
  Rng rng(epoch_seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  std::vector<Batch> batches;
  const std::size_t n_full = dataset.size() / batch_size;
  for (std::size_t b = 0; b < n_full; ++b) {
    Batch batch;
    std::size_t max_tok = 0;
    std::vector<std::vector<int>> token_rows;
    for (std::size_t k = 0; k < batch_size; ++k) {
      const std::size_t idx = order[b * batch_size + k];
      const auto& pair = dataset[idx];
      const std::size_t pick = rng.uniform_int(pair.captions.size());
      const std::string& caption = pair.captions[pick];
      std::vector<int> toks = vocab.encode(caption);
      if (toks.size() + 1 > max_text_len) {
        toks.resize(max_text_len - 1);  // leave room for [CLS]
      }
      max_tok = std::max(max_tok, toks.size());
      batch.pair_indices.push_back(idx);
      batch.images.push_back(&pair.image);
      batch.captions.push_back(caption);
      token_rows.push_back(std::move(toks));
    }
    for (auto& toks : token_rows) {
      std::vector<int> text = {Vocabulary::kCls};
      std::vector<int> lm_in = {Vocabulary::kBos};
      std::vector<int> lm_tgt;
      std::vector<std::uint8_t> tpad = {1};
      std::vector<std::uint8_t> act;
      for (int t : toks) {
        text.push_back(t);
        lm_in.push_back(t);
        lm_tgt.push_back(t);
        tpad.push_back(1);
        act.push_back(1);
      }
      lm_tgt.push_back(Vocabulary::kEos);
      act.push_back(1);
      while (text.size() < max_tok + 1) {
        text.push_back(Vocabulary::kPad);
        tpad.push_back(0);
      }
      while (lm_tgt.size() < max_tok + 1) {
        lm_in.push_back(Vocabulary::kPad);
        lm_tgt.push_back(Vocabulary::kPad);
        act.push_back(0);
      }
      batch.text_ids.push_back(std::move(text));
      batch.lm_inputs.push_back(std::move(lm_in));
      batch.lm_targets.push_back(std::move(lm_tgt));
      batch.text_pad.push_back(std::move(tpad));
      batch.lm_active.push_back(std::move(act));
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace bita
