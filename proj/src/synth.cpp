#include "spdn/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace spdn {

namespace {

// 5x7 glyphs, '#' = ink. Charset: A-Z then 0-9.
const char* const kGlyphRows[36][7] = {
    {".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},  // A
    {"####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."},  // B
    {".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."},  // C
    {"####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."},  // D
    {"#####", "#....", "#....", "####.", "#....", "#....", "#####"},  // E
    {"#####", "#....", "#....", "####.", "#....", "#....", "#...."},  // F
    {".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."},  // G
    {"#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"},  // H
    {".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."},  // I
    {"..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."},  // J
    {"#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"},  // K
    {"#....", "#....", "#....", "#....", "#....", "#....", "#####"},  // L
    {"#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"},  // M
    {"#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"},  // N
    {".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},  // O
    {"####.", "#...#", "#...#", "####.", "#....", "#....", "#...."},  // P
    {".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"},  // Q
    {"####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"},  // R
    {".####", "#....", "#....", ".###.", "....#", "....#", "####."},  // S
    {"#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."},  // T
    {"#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."},  // U
    {"#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."},  // V
    {"#...#", "#...#", "#...#", "#.#.#", "#.#.#", "##.##", "#...#"},  // W
    {"#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"},  // X
    {"#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."},  // Y
    {"#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"},  // Z
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},  // 0
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},  // 1
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},  // 2
    {".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."},  // 3
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},  // 4
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},  // 5
    {".###.", "#....", "#....", "####.", "#...#", "#...#", ".###."},  // 6
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},  // 7
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},  // 8
    {".###.", "#...#", "#...#", ".####", "....#", "....#", ".###."},  // 9
};

const char* kBuiltinCharset = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

struct GlyphTable {
  std::array<bool, 36 * 35> bits{};
  GlyphTable() {
    for (int g = 0; g < 36; ++g)
      for (int r = 0; r < 7; ++r)
        for (int c = 0; c < 5; ++c)
          bits[g * 35 + r * 5 + c] = kGlyphRows[g][r][c] == '#';
  }
};

const GlyphTable& glyph_table() {
  static GlyphTable t;
  return t;
}

int builtin_glyph_index(char c) {
  const char* p = std::strchr(kBuiltinCharset, c);
  if (!p || c == '\0')
    throw std::invalid_argument(std::string("character '") + c +
                                "' not in the built-in glyph set");
  return static_cast<int>(p - kBuiltinCharset);
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// 3x3 homography helpers -----------------------------------------------------

using Mat3 = std::array<double, 9>;

// Solves for H with H*[x,y,1] ~ [u,v,1] on 4 correspondences (DLT, h22=1).
Mat3 solve_homography(const double sx[4], const double sy[4], const double dx[4],
                      const double dy[4]) {
  double a[8][9] = {};
  for (int i = 0; i < 4; ++i) {
    double x = sx[i], y = sy[i], u = dx[i], v = dy[i];
    double* r0 = a[2 * i];
    double* r1 = a[2 * i + 1];
    r0[0] = x; r0[1] = y; r0[2] = 1; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
    r1[3] = x; r1[4] = y; r1[5] = 1; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
  }
  // Gaussian elimination with partial pivoting on the 8x8 system
  for (int col = 0; col < 8; ++col) {
    int piv = col;
    for (int r = col + 1; r < 8; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[piv], a[col]);
    double d = a[col][col];
    if (std::abs(d) < 1e-12) throw std::runtime_error("degenerate homography");
    for (int j = col; j < 9; ++j) a[col][j] /= d;
    for (int r = 0; r < 8; ++r) {
      if (r == col) continue;
      double f = a[r][col];
      if (f == 0.0) continue;
      for (int j = col; j < 9; ++j) a[r][j] -= f * a[col][j];
    }
  }
  Mat3 h;
  for (int i = 0; i < 8; ++i) h[i] = a[i][8];
  h[8] = 1.0;
  return h;
}

Mat3 invert3(const Mat3& m) {
  double det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
  if (std::abs(det) < 1e-15) throw std::runtime_error("singular homography");
  double id = 1.0 / det;
  return {(m[4] * m[8] - m[5] * m[7]) * id, (m[2] * m[7] - m[1] * m[8]) * id,
          (m[1] * m[5] - m[2] * m[4]) * id, (m[5] * m[6] - m[3] * m[8]) * id,
          (m[0] * m[8] - m[2] * m[6]) * id, (m[2] * m[3] - m[0] * m[5]) * id,
          (m[3] * m[7] - m[4] * m[6]) * id, (m[1] * m[6] - m[0] * m[7]) * id,
          (m[0] * m[4] - m[1] * m[3]) * id};
}

void apply_h(const Mat3& h, double x, double y, double& u, double& v) {
  double w = h[6] * x + h[7] * y + h[8];
  u = (h[0] * x + h[1] * y + h[2]) / w;
  v = (h[3] * x + h[4] * y + h[5]) / w;
}

double sample_bilinear_img(const std::vector<double>& img, int h, int w,
                           double px, double py) {
  if (px < 0 || py < 0 || px > w - 1 || py > h - 1) return 0.0;
  int x0 = std::min(static_cast<int>(std::floor(px)), w - 2);
  int y0 = std::min(static_cast<int>(std::floor(py)), h - 2);
  double tx = px - x0, ty = py - y0;
  return (1 - tx) * (1 - ty) * img[y0 * w + x0] + tx * (1 - ty) * img[y0 * w + x0 + 1] +
         (1 - tx) * ty * img[(y0 + 1) * w + x0] + tx * ty * img[(y0 + 1) * w + x0 + 1];
}

void draw_glyph(std::vector<double>& img, int h, int w, int glyph, double cx,
                double cy, double scale) {
  // nearest-neighbour scaling of the 5x7 cell grid centred at (cx, cy)
  const bool* bits = &glyph_table().bits[glyph * 35];
  double gw = 5.0 * scale, gh = 7.0 * scale;
  int x_lo = std::max(0, static_cast<int>(std::floor(cx - gw / 2)));
  int x_hi = std::min(w - 1, static_cast<int>(std::ceil(cx + gw / 2)));
  int y_lo = std::max(0, static_cast<int>(std::floor(cy - gh / 2)));
  int y_hi = std::min(h - 1, static_cast<int>(std::ceil(cy + gh / 2)));
  for (int y = y_lo; y <= y_hi; ++y) {
    double v = (y + 0.5 - (cy - gh / 2)) / scale;
    int row = static_cast<int>(std::floor(v));
    if (row < 0 || row >= 7) continue;
    for (int x = x_lo; x <= x_hi; ++x) {
      double u = (x + 0.5 - (cx - gw / 2)) / scale;
      int col = static_cast<int>(std::floor(u));
      if (col < 0 || col >= 5) continue;
      if (bits[row * 5 + col]) img[y * w + x] = 1.0;
    }
  }
}

}  // namespace

// ---- Vocabulary ------------------------------------------------------------

int Vocabulary::index_of(char c) const {
  auto pos = symbols.find(c);
  if (pos == std::string::npos)
    throw std::invalid_argument(std::string("character '") + c +
                                "' not in vocabulary \"" + symbols + "\"");
  return static_cast<int>(pos);
}

char Vocabulary::symbol(int index) const {
  if (index < 0 || index >= static_cast<int>(symbols.size()))
    throw std::out_of_range("symbol index " + std::to_string(index) +
                            " out of range for vocabulary of " +
                            std::to_string(symbols.size()) + " symbols");
  return symbols[index];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(index_of(c));
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& indices) const {
  std::string out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(symbol(i));
  return out;
}

Vocabulary Vocabulary::defaults() { return Vocabulary{kBuiltinCharset}; }

Vocabulary Vocabulary::from_charset(const std::string& charset) {
  if (charset.empty()) throw std::invalid_argument("empty charset");
  for (std::size_t i = 0; i < charset.size(); ++i) {
    builtin_glyph_index(charset[i]);  // validates renderability
    if (charset.find(charset[i], i + 1) != std::string::npos)
      throw std::invalid_argument("duplicate character in charset: " + charset);
  }
  return Vocabulary{charset};
}

const char* distortion_name(Distortion d) {
  switch (d) {
    case Distortion::none: return "none";
    case Distortion::perspective: return "perspective";
    case Distortion::curved: return "curved";
  }
  return "none";
}

Distortion distortion_from_name(const std::string& name) {
  if (name == "none") return Distortion::none;
  if (name == "perspective") return Distortion::perspective;
  if (name == "curved") return Distortion::curved;
  throw std::invalid_argument("unknown distortion: " + name);
}

const bool* glyph_bitmap(char c) {
  return &glyph_table().bits[builtin_glyph_index(c) * 35];
}

// ---- rendering -------------------------------------------------------------

void add_noise(std::vector<double>& image, double sigma, Rng& rng) {
  if (sigma <= 0.0) return;
  for (double& v : image) v = clamp01(v + sigma * rng.gaussian());
}

TextSample render(const std::string& text, Distortion distortion,
                  std::uint64_t seed, const Vocabulary& vocab,
                  const RenderConfig& cfg) {
  if (text.empty()) throw std::invalid_argument("render requires nonempty text");
  double sigma = std::min(cfg.noise_sigma, 0.05);
  int h = cfg.height, w = cfg.width;
  Rng rng(seed);

  TextSample s;
  s.height = h;
  s.width = w;
  s.distortion = distortion;
  s.label = vocab.encode(text);
  for (char c : text) builtin_glyph_index(c);  // all renderable

  int n = static_cast<int>(text.size());
  // fit: advance is 6 cells per glyph (5 + 1 spacing), minus trailing space
  double max_scale_h = (h - 6.0) / 7.0;
  double max_scale_w = (w - 4.0) / (6.0 * n - 1.0);
  double scale = std::min(max_scale_h, max_scale_w) * rng.uniform(0.82, 0.98);
  double advance = 6.0 * scale;
  double total = advance * n - scale;
  double x0 = 2.0 + rng.uniform() * std::max(0.0, (w - 4.0 - total)) * 0.5;
  double y_center = h / 2.0 + rng.uniform(-1.5, 1.5);

  std::vector<double> img(static_cast<std::size_t>(h) * w, 0.0);
  std::vector<std::pair<double, double>> boxes;

  if (distortion == Distortion::curved) {
    double sagitta = rng.uniform(0.08, 0.25) * h;
    double sign = rng.uniform() < 0.5 ? 1.0 : -1.0;
    double x_first = x0 + 2.5 * scale;
    double x_last = x_first + advance * (n - 1);
    double chord = std::max(x_last - x_first, 1.0);
    double radius = (chord * chord / 4.0 + sagitta * sagitta) / (2.0 * sagitta);
    double xc = (x_first + x_last) / 2.0;
    double base = y_center + sign * sagitta / 2.0;
    for (int i = 0; i < n; ++i) {
      double cx = x_first + advance * i;
      double dx = std::min(std::abs(cx - xc), chord / 2.0);
      double lift = radius - std::sqrt(std::max(radius * radius - dx * dx, 0.0));
      double off = sagitta - lift;  // sagitta at centre, 0 at the ends
      double cy = base - sign * off;
      draw_glyph(img, h, w, builtin_glyph_index(text[i]), cx, cy, scale);
      boxes.emplace_back(cx, cy);
    }
  } else {
    for (int i = 0; i < n; ++i) {
      double cx = x0 + 2.5 * scale + advance * i;
      draw_glyph(img, h, w, builtin_glyph_index(text[i]), cx, y_center, scale);
      boxes.emplace_back(cx, y_center);
    }
    if (distortion == Distortion::perspective) {
      double cxs[4] = {0, double(w - 1), double(w - 1), 0};
      double cys[4] = {0, 0, double(h - 1), double(h - 1)};
      double dxs[4], dys[4];
      for (int i = 0; i < 4; ++i) {
        dxs[i] = cxs[i] + rng.uniform(-0.15, 0.15) * (w - 1);
        dys[i] = cys[i] + rng.uniform(-0.15, 0.15) * (h - 1);
      }
      Mat3 fwd = solve_homography(cxs, cys, dxs, dys);  // straight -> warped
      Mat3 inv = invert3(fwd);
      std::vector<double> warped(img.size(), 0.0);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double sxp, syp;
          apply_h(inv, x, y, sxp, syp);
          warped[y * w + x] = sample_bilinear_img(img, h, w, sxp, syp);
        }
      img.swap(warped);
      for (auto& b : boxes) {
        double u, v;
        apply_h(fwd, b.first, b.second, u, v);
        b = {u, v};
      }
    }
  }

  add_noise(img, sigma, rng);
  s.image = std::move(img);
  s.char_boxes = std::move(boxes);
  return s;
}

// ---- PGM -------------------------------------------------------------------

void write_pgm(const std::string& path, const std::vector<double>& img, int h,
               int w) {
  if (static_cast<int>(img.size()) != h * w)
    throw std::invalid_argument("write_pgm size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(clamp01(img[i]) * 255.0));
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<double> read_pgm(const std::string& path, int& h, int& w) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::string magic;
  is >> magic;
  if (magic != "P5") throw std::runtime_error("not a binary PGM: " + path);
  int maxval;
  is >> w >> h >> maxval;
  if (!is || maxval != 255) throw std::runtime_error("unsupported PGM header: " + path);
  is.get();  // single whitespace after header
  std::vector<unsigned char> bytes(static_cast<std::size_t>(h) * w);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw std::runtime_error("truncated PGM: " + path);
  std::vector<double> img(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) img[i] = bytes[i] / 255.0;
  return img;
}

// ---- corpus ----------------------------------------------------------------

void make_corpus(const std::string& out_dir, const CorpusConfig& cfg,
                 std::uint64_t seed) {
  if (cfg.n < 1) throw std::invalid_argument("corpus size must be >= 1");
  if (cfg.len_min < 1 || cfg.len_max < cfg.len_min)
    throw std::invalid_argument("bad length range [" + std::to_string(cfg.len_min) +
                                "," + std::to_string(cfg.len_max) + "]");
  Vocabulary vocab = Vocabulary::from_charset(cfg.charset);
  double mix_total = cfg.mix_none + cfg.mix_perspective + cfg.mix_curved;
  if (mix_total <= 0) throw std::invalid_argument("distortion mix weights sum to zero");

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  std::ofstream manifest(out_dir + "/manifest.tsv");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + out_dir);

  {
    std::ofstream vf(out_dir + "/vocab.txt");
    if (!vf) throw std::runtime_error("cannot write vocab.txt in " + out_dir);
    for (char c : vocab.symbols) vf << c << "\n";
  }

  int n_train = static_cast<int>(cfg.n * 0.8);
  int n_val = static_cast<int>(cfg.n * 0.9) - n_train;

  Rng base(seed);
  for (int i = 0; i < cfg.n; ++i) {
    Rng rng = base.fork(static_cast<std::uint64_t>(i));  // counter-derived, order-free
    int len = rng.uniform_int(cfg.len_min, cfg.len_max);
    std::string text;
    for (int j = 0; j < len; ++j)
      text.push_back(vocab.symbols[rng.uniform_int(0, static_cast<int>(vocab.symbols.size()) - 1)]);
    double pick = rng.uniform() * mix_total;
    Distortion d = Distortion::none;
    if (pick >= cfg.mix_none && pick < cfg.mix_none + cfg.mix_perspective)
      d = Distortion::perspective;
    else if (pick >= cfg.mix_none + cfg.mix_perspective)
      d = Distortion::curved;
    TextSample sample = render(text, d, rng.next_u64(), vocab, cfg.render);

    char name[32];
    std::snprintf(name, sizeof(name), "%06d.pgm", i);
    write_pgm(out_dir + "/" + name, sample.image, sample.height, sample.width);
    const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    manifest << i << "\t" << split << "\t" << text << "\t" << distortion_name(d) << "\n";
  }
  if (!manifest) throw std::runtime_error("manifest write failed in " + out_dir);
}

std::vector<int> Dataset::split_indices(const std::string& split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == split) out.push_back(static_cast<int>(i));
  return out;
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  ds.dir = dir;
  {
    std::ifstream vf(dir + "/vocab.txt");
    if (!vf) throw std::runtime_error("missing vocab.txt in " + dir);
    std::string line, charset;
    while (std::getline(vf, line))
      if (!line.empty()) charset.push_back(line[0]);
    ds.vocab = Vocabulary::from_charset(charset);
  }
  std::ifstream manifest(dir + "/manifest.tsv");
  if (!manifest) throw std::runtime_error("missing manifest.tsv in " + dir);
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    DatasetEntry e;
    std::string dist;
    std::string id_str;
    std::getline(row, id_str, '\t');
    std::getline(row, e.split, '\t');
    std::getline(row, e.label, '\t');
    std::getline(row, dist, '\t');
    e.id = std::stoi(id_str);
    e.distortion = distortion_from_name(dist);
    ds.entries.push_back(std::move(e));
  }
  ds.images.reserve(ds.entries.size());
  for (const auto& e : ds.entries) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06d.pgm", e.id);
    int h, w;
    ds.images.push_back(read_pgm(dir + "/" + std::string(name), h, w));
    if (ds.height == 0) { ds.height = h; ds.width = w; }
    else if (h != ds.height || w != ds.width)
      throw std::runtime_error("inconsistent image extents in dataset " + dir);
  }
  return ds;
}

}  // namespace spdn
