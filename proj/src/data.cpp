#include "wxgan/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace wxgan {

namespace {

constexpr const char* kDescriptorName = "dataset.json";

std::string grid_path(const DatasetManifest& m, const SourceFile& f) {
  return (fs::path(m.dir) / (f.id + ".grid.f32")).string();
}
std::string mask_path(const DatasetManifest& m, const SourceFile& f) {
  return (fs::path(m.dir) / (f.id + ".mask.u8")).string();
}

std::vector<unsigned char> read_bytes(const std::string& path, int64_t offset, int64_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  in.seekg(offset);
  std::vector<unsigned char> buf(size_t(count), 0);
  in.read(reinterpret_cast<char*>(buf.data()), count);
  if (in.gcount() != count) throw DataError("truncated read from " + path);
  return buf;
}

// frames [frame0, frame0+n) of an f32 record with `scalars_per_frame` values
void read_grid_frames(const std::string& path, int64_t frame0, int64_t n, int64_t scalars_per_frame,
                      float* out) {
  auto bytes = read_bytes(path, frame0 * scalars_per_frame * 4, n * scalars_per_frame * 4);
  int64_t total = n * scalars_per_frame;
  for (int64_t i = 0; i < total; ++i) {
    out[i] = load_f32_le(bytes.data() + i * 4);
    if (!std::isfinite(double(out[i]))) throw DataError("non-finite grid value in " + path);
  }
}

void read_mask_frames(const std::string& path, int64_t frame0, int64_t n, int64_t scalars_per_frame,
                      float* out) {
  auto bytes = read_bytes(path, frame0 * scalars_per_frame, n * scalars_per_frame);
  int64_t total = n * scalars_per_frame;
  for (int64_t i = 0; i < total; ++i) {
    if (bytes[size_t(i)] > 1) throw DataError("mask byte not in {0,1} in " + path);
    out[i] = float(bytes[size_t(i)]);
  }
}

json parse_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path + ": " + e.what());
  }
}

template <class T>
T get_field(const json& j, const char* key, const std::string& path) {
  if (!j.contains(key)) throw DataError(std::string("missing field '") + key + "' in " + path);
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(std::string("bad field '") + key + "' in " + path + ": " + e.what());
  }
}

}  // namespace

// ----------------------------------------------------------------------------
// manifest

DatasetManifest build_manifest(const std::string& raw_dir, int window_T, int stride) {
  if (window_T < 1 || stride < 1) throw ConfigError("window_T and stride must be positive");

  std::string desc_path = (fs::path(raw_dir) / kDescriptorName).string();
  json desc = parse_json_file(desc_path);

  DatasetManifest m;
  m.dir = raw_dir;
  m.window_T = window_T;
  m.stride = stride;
  m.C = get_field<int>(desc, "C", desc_path);
  m.K = get_field<int>(desc, "K", desc_path);
  m.H = get_field<int>(desc, "H", desc_path);
  m.W = get_field<int>(desc, "W", desc_path);
  m.time_step_hours = get_field<double>(desc, "time_step_hours", desc_path);
  m.class_names = get_field<std::vector<std::string>>(desc, "class_names", desc_path);
  if (m.C < 1 || m.K < 1 || m.H < 1 || m.W < 1) throw DataError("non-positive shape in " + desc_path);
  if (int(m.class_names.size()) != m.K) throw DataError("class_names length != K in " + desc_path);
  if (m.time_step_hours <= 0) throw DataError("time_step_hours must be positive in " + desc_path);

  std::vector<std::string> ids;
  if (desc.contains("files")) {
    ids = get_field<std::vector<std::string>>(desc, "files", desc_path);
  } else {
    for (const auto& e : fs::directory_iterator(raw_dir)) {
      std::string name = e.path().filename().string();
      if (name.size() > 9 && name.substr(name.size() - 9) == ".grid.f32")
        ids.push_back(name.substr(0, name.size() - 9));
    }
    std::sort(ids.begin(), ids.end());
  }
  if (ids.empty()) throw DataError("no records found in " + raw_dir);

  int64_t frame_scalars = int64_t(m.C) * m.H * m.W;
  for (const std::string& id : ids) {
    SourceFile f{id, 0};
    std::string gp = grid_path(m, f), mp = mask_path(m, f);
    std::error_code ec;
    int64_t gsize = int64_t(fs::file_size(gp, ec));
    if (ec) throw DataError("cannot stat " + gp);
    if (gsize % (frame_scalars * 4) != 0) throw DataError("grid size not a whole number of frames: " + gp);
    f.frames = gsize / (frame_scalars * 4);
    if (f.frames < 1) throw DataError("empty record: " + gp);
    int64_t msize = int64_t(fs::file_size(mp, ec));
    if (ec) throw DataError("cannot stat " + mp);
    if (msize != f.frames * m.K * m.H * m.W)
      throw DataError("mask size does not match grid frames: " + mp);
    m.files.push_back(std::move(f));
  }

  int64_t n_frames = m.total_frames();
  if (n_frames < window_T) throw DataError("total frames fewer than window_T in " + raw_dir);
  m.record_count = (n_frames - window_T) / stride + 1;

  // per-channel moments over every frame, accumulated in double
  std::vector<double> sum(size_t(m.C), 0.0), sumsq(size_t(m.C), 0.0);
  std::vector<float> frame(size_t(frame_scalars), 0.0f);
  int64_t hw = int64_t(m.H) * m.W;
  for (const auto& f : m.files) {
    std::string gp = grid_path(m, f);
    for (int64_t t = 0; t < f.frames; ++t) {
      read_grid_frames(gp, t, 1, frame_scalars, frame.data());
      for (int c = 0; c < m.C; ++c)
        for (int64_t i = 0; i < hw; ++i) {
          double v = double(frame[size_t(c * hw + i)]);
          sum[size_t(c)] += v;
          sumsq[size_t(c)] += v * v;
        }
    }
  }
  double denom = double(n_frames) * double(hw);
  m.mean.resize(size_t(m.C));
  m.stddev.resize(size_t(m.C));
  for (int c = 0; c < m.C; ++c) {
    m.mean[size_t(c)] = sum[size_t(c)] / denom;
    double var = sumsq[size_t(c)] / denom - m.mean[size_t(c)] * m.mean[size_t(c)];
    if (var <= 0) throw DataError("channel " + std::to_string(c) + " has zero variance");
    m.stddev[size_t(c)] = std::sqrt(var);
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
  json j;
  j["format_version"] = m.format_version;
  j["window_T"] = m.window_T;
  j["stride"] = m.stride;
  j["C"] = m.C;
  j["K"] = m.K;
  j["H"] = m.H;
  j["W"] = m.W;
  j["time_step_hours"] = m.time_step_hours;
  j["class_names"] = m.class_names;
  j["mean"] = m.mean;
  j["stddev"] = m.stddev;
  j["record_count"] = m.record_count;
  json files = json::array();
  for (const auto& f : m.files) files.push_back({{"id", f.id}, {"frames", f.frames}});
  j["files"] = files;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  json j = parse_json_file(path);
  DatasetManifest m;
  m.dir = fs::path(path).parent_path().string();
  if (m.dir.empty()) m.dir = ".";
  m.format_version = get_field<int>(j, "format_version", path);
  if (m.format_version != 1) throw DataError("unsupported format_version in " + path);
  m.window_T = get_field<int>(j, "window_T", path);
  m.stride = get_field<int>(j, "stride", path);
  m.C = get_field<int>(j, "C", path);
  m.K = get_field<int>(j, "K", path);
  m.H = get_field<int>(j, "H", path);
  m.W = get_field<int>(j, "W", path);
  m.time_step_hours = get_field<double>(j, "time_step_hours", path);
  m.class_names = get_field<std::vector<std::string>>(j, "class_names", path);
  m.mean = get_field<std::vector<double>>(j, "mean", path);
  m.stddev = get_field<std::vector<double>>(j, "stddev", path);
  m.record_count = get_field<int64_t>(j, "record_count", path);
  for (const auto& e : get_field<json>(j, "files", path)) {
    SourceFile f;
    f.id = get_field<std::string>(e, "id", path);
    f.frames = get_field<int64_t>(e, "frames", path);
    m.files.push_back(std::move(f));
  }
  if (int(m.mean.size()) != m.C || int(m.stddev.size()) != m.C)
    throw DataError("statistics length != C in " + path);
  if (int(m.class_names.size()) != m.K) throw DataError("class_names length != K in " + path);
  for (double s : m.stddev)
    if (!(s > 0)) throw DataError("non-positive stddev in " + path);
  return m;
}

// ----------------------------------------------------------------------------
// window reads

std::pair<GridSequence, EventMaskSequence> read_window(const DatasetManifest& m, int64_t index) {
  if (index < 0 || index >= m.record_count)
    throw DataError("window index " + std::to_string(index) + " out of range [0," +
                    std::to_string(m.record_count) + ")");

  GridSequence g;
  g.time_step_hours = m.time_step_hours;
  g.values = Tensor({m.window_T, m.C, m.H, m.W});
  EventMaskSequence e;
  e.class_names = m.class_names;
  e.values = Tensor({m.window_T, m.K, m.H, m.W});

  int64_t grid_frame = int64_t(m.C) * m.H * m.W;
  int64_t mask_frame = int64_t(m.K) * m.H * m.W;

  // windows address the concatenated frame stream and may straddle files
  int64_t start = index * m.stride;
  int64_t remaining = m.window_T;
  int64_t written = 0;
  size_t fi = 0;
  int64_t file_base = 0;
  while (remaining > 0) {
    while (fi < m.files.size() && start >= file_base + m.files[fi].frames) {
      file_base += m.files[fi].frames;
      ++fi;
    }
    if (fi >= m.files.size()) throw DataError("window extends past the last frame (corrupt manifest)");
    const SourceFile& f = m.files[fi];
    int64_t local = start - file_base;
    int64_t take = std::min(remaining, f.frames - local);
    read_grid_frames(grid_path(m, f), local, take, grid_frame, g.values.ptr() + written * grid_frame);
    read_mask_frames(mask_path(m, f), local, take, mask_frame, e.values.ptr() + written * mask_frame);
    start += take;
    written += take;
    remaining -= take;
  }

  int64_t hw = int64_t(m.H) * m.W;
  for (int t = 0; t < m.window_T; ++t)
    for (int c = 0; c < m.C; ++c) {
      float mu = float(m.mean[size_t(c)]), sd = float(m.stddev[size_t(c)]);
      float* p = g.values.ptr() + (int64_t(t) * m.C + c) * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] = (p[i] - mu) / sd;
    }
  return {std::move(g), std::move(e)};
}

void denormalize_grid(const DatasetManifest& m, Tensor& values) {
  int64_t chw = int64_t(m.C) * m.H * m.W;
  int64_t hw = int64_t(m.H) * m.W;
  if (values.numel() % chw != 0) throw ShapeError("denormalize_grid: trailing dims must be (C,H,W)");
  int64_t outer = values.numel() / chw;
  for (int64_t o = 0; o < outer; ++o)
    for (int c = 0; c < m.C; ++c) {
      float mu = float(m.mean[size_t(c)]), sd = float(m.stddev[size_t(c)]);
      float* p = values.ptr() + o * chw + c * hw;
      for (int64_t i = 0; i < hw; ++i) p[i] = p[i] * sd + mu;
    }
}

// ----------------------------------------------------------------------------
// toy generator

void ToyGenConfig::validate() const {
  if (H < 4 || W < 4 || T < 4) throw ConfigError("toy dims H, W, T must be >= 4");
  if (K < 1) throw ConfigError("toy K must be >= 1");
  if (sequences < 1) throw ConfigError("toy sequence count must be >= 1");
  if (!(blob_radius > 0) || blob_radius >= std::min(H, W) / 2.0)
    throw ConfigError("blob radius must be in (0, min(H,W)/2)");
  if (blob_speed < 0) throw ConfigError("blob speed must be >= 0");
  if (noise_level < 0 || noise_level >= 0.5) throw ConfigError("noise level must be in [0, 0.5)");
}

namespace {

// one reflecting bounce per axis step; speed is validated small enough that a
// single fold stays in range
double reflect(double x, double lo, double hi) {
  if (x < lo) x = 2 * lo - x;
  if (x > hi) x = 2 * hi - x;
  return x;
}

}  // namespace

DatasetManifest make_toy_dataset(const ToyGenConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);

  // half-peak radius equals cfg.blob_radius: intensity exp(-d^2 / (2 sigma^2))
  // crosses 0.5 at d = sigma * sqrt(2 ln 2)
  double sigma = cfg.blob_radius / std::sqrt(2.0 * std::log(2.0));
  int64_t hw = int64_t(cfg.H) * cfg.W;
  int64_t frame = int64_t(cfg.K) * hw;

  std::vector<unsigned char> grid_bytes(size_t(cfg.T * frame * 4));
  std::vector<unsigned char> mask_bytes(size_t(cfg.T * frame));

  for (int s = 0; s < cfg.sequences; ++s) {
    Rng rng(derive_seed(cfg.seed, uint64_t(s)));

    // per-blob state, then static per-pixel noise, drawn in a fixed order
    std::vector<double> px(size_t(cfg.K)), py(size_t(cfg.K)), vx(size_t(cfg.K)), vy(size_t(cfg.K));
    for (int k = 0; k < cfg.K; ++k) {
      px[size_t(k)] = rng.uniform(cfg.blob_radius, cfg.W - 1 - cfg.blob_radius);
      py[size_t(k)] = rng.uniform(cfg.blob_radius, cfg.H - 1 - cfg.blob_radius);
      double theta = rng.uniform(0.0, 6.283185307179586477);
      vx[size_t(k)] = cfg.blob_speed * std::cos(theta);
      vy[size_t(k)] = cfg.blob_speed * std::sin(theta);
    }
    std::vector<float> noise(size_t(frame), 0.0f);
    for (int64_t i = 0; i < frame; ++i) noise[size_t(i)] = float(cfg.noise_level * rng.uniform(-1.0, 1.0));

    for (int t = 0; t < cfg.T; ++t) {
      for (int k = 0; k < cfg.K; ++k) {
        for (int y = 0; y < cfg.H; ++y)
          for (int x = 0; x < cfg.W; ++x) {
            double dx = x - px[size_t(k)], dy = y - py[size_t(k)];
            float v = float(std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) +
                            double(noise[size_t(k * hw + y * cfg.W + x)]));
            int64_t i = t * frame + k * hw + y * cfg.W + x;
            store_f32_le(grid_bytes.data() + i * 4, v);
            // mask from the stored value so the half-peak rule is exact on disk
            mask_bytes[size_t(i)] = v >= 0.5f ? 1 : 0;
          }
        px[size_t(k)] += vx[size_t(k)];
        py[size_t(k)] += vy[size_t(k)];
        if (px[size_t(k)] < 0 || px[size_t(k)] > cfg.W - 1) vx[size_t(k)] = -vx[size_t(k)];
        if (py[size_t(k)] < 0 || py[size_t(k)] > cfg.H - 1) vy[size_t(k)] = -vy[size_t(k)];
        px[size_t(k)] = reflect(px[size_t(k)], 0, cfg.W - 1);
        py[size_t(k)] = reflect(py[size_t(k)], 0, cfg.H - 1);
      }
    }

    char name[32];
    std::snprintf(name, sizeof(name), "seq_%05d", s);
    std::ofstream gout((fs::path(out_dir) / (std::string(name) + ".grid.f32")).string(), std::ios::binary);
    gout.write(reinterpret_cast<const char*>(grid_bytes.data()), int64_t(grid_bytes.size()));
    std::ofstream mout((fs::path(out_dir) / (std::string(name) + ".mask.u8")).string(), std::ios::binary);
    mout.write(reinterpret_cast<const char*>(mask_bytes.data()), int64_t(mask_bytes.size()));
    if (!gout || !mout) throw DataError("cannot write toy records in " + out_dir);
  }

  json desc;
  desc["format_version"] = 1;
  desc["C"] = cfg.K;  // channel k pairs with mask class k
  desc["K"] = cfg.K;
  desc["H"] = cfg.H;
  desc["W"] = cfg.W;
  desc["time_step_hours"] = 6.0;
  std::vector<std::string> classes;
  for (int k = 0; k < cfg.K; ++k) classes.push_back("blob_" + std::to_string(k));
  desc["class_names"] = classes;
  std::ofstream dout((fs::path(out_dir) / kDescriptorName).string());
  if (!dout) throw DataError("cannot write descriptor in " + out_dir);
  dout << desc.dump(2) << "\n";
  dout.close();

  DatasetManifest m = build_manifest(out_dir, cfg.T, cfg.T);
  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  return m;
}

DatasetManifest write_sequence_dataset(const std::string& out_dir, const std::vector<GridSequence>& grids,
                                       const std::vector<EventMaskSequence>& masks) {
  if (grids.empty() || grids.size() != masks.size())
    throw DataError("sequence dataset needs matching, non-empty grid and mask lists");
  const auto& g0 = grids[0].values.shape;
  const auto& m0 = masks[0].values.shape;
  if (g0.size() != 4 || m0.size() != 4 || g0[0] != m0[0] || g0[2] != m0[2] || g0[3] != m0[3])
    throw DataError("sequence dataset: grids must be (T,C,H,W) and masks (T,K,H,W) with matching T,H,W");
  const int T = g0[0], C = g0[1], K = m0[1], H = g0[2], W = g0[3];

  fs::create_directories(out_dir);
  int64_t grid_frame = int64_t(C) * H * W;
  int64_t mask_frame = int64_t(K) * H * W;
  std::vector<unsigned char> gbytes(size_t(T * grid_frame * 4));
  std::vector<unsigned char> mbytes(size_t(T * mask_frame));

  for (size_t s = 0; s < grids.size(); ++s) {
    if (grids[s].values.shape != g0 || masks[s].values.shape != m0)
      throw DataError("sequence dataset: record " + std::to_string(s) + " has mismatched shape");
    for (int64_t i = 0; i < grids[s].values.numel(); ++i)
      store_f32_le(gbytes.data() + i * 4, grids[s].values.at(i));
    for (int64_t i = 0; i < masks[s].values.numel(); ++i)
      mbytes[size_t(i)] = masks[s].values.at(i) >= 0.5f ? 1 : 0;

    char name[32];
    std::snprintf(name, sizeof(name), "gen_%05d", int(s));
    std::ofstream gout((fs::path(out_dir) / (std::string(name) + ".grid.f32")).string(), std::ios::binary);
    gout.write(reinterpret_cast<const char*>(gbytes.data()), int64_t(gbytes.size()));
    std::ofstream mout((fs::path(out_dir) / (std::string(name) + ".mask.u8")).string(), std::ios::binary);
    mout.write(reinterpret_cast<const char*>(mbytes.data()), int64_t(mbytes.size()));
    if (!gout || !mout) throw DataError("cannot write sequence records in " + out_dir);
  }

  std::vector<std::string> classes = masks[0].class_names;
  if (int(classes.size()) != K) {
    classes.clear();
    for (int k = 0; k < K; ++k) classes.push_back("class_" + std::to_string(k));
  }
  json desc;
  desc["format_version"] = 1;
  desc["C"] = C;
  desc["K"] = K;
  desc["H"] = H;
  desc["W"] = W;
  desc["time_step_hours"] = grids[0].time_step_hours;
  desc["class_names"] = classes;
  std::ofstream dout((fs::path(out_dir) / kDescriptorName).string());
  if (!dout) throw DataError("cannot write descriptor in " + out_dir);
  dout << desc.dump(2) << "\n";
  dout.close();

  DatasetManifest m = build_manifest(out_dir, T, T);
  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  return m;
}

// ----------------------------------------------------------------------------
// batches

BatchIter::BatchIter(const DatasetManifest& m, int batch_size, uint64_t shuffle_seed)
    : m_(&m), batch_(batch_size), seed_(shuffle_seed) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (int64_t(batch_size) > m.record_count)
    throw ConfigError("batch size " + std::to_string(batch_size) + " exceeds record count " +
                      std::to_string(m.record_count));
}

std::vector<int64_t> BatchIter::epoch_order(int64_t epoch) const {
  std::vector<int64_t> order(size_t(m_->record_count));
  for (int64_t i = 0; i < m_->record_count; ++i) order[size_t(i)] = i;
  Rng rng(derive_seed(seed_, uint64_t(epoch)));
  deterministic_shuffle(order, rng);
  return order;
}

Batch BatchIter::get(int64_t epoch, int64_t batch_idx) const {
  if (batch_idx < 0 || batch_idx >= batches_per_epoch()) throw DataError("batch index out of range");
  std::vector<int64_t> order = epoch_order(epoch);

  Batch b;
  b.grid = Tensor({batch_, m_->window_T, m_->C, m_->H, m_->W});
  b.mask = Tensor({batch_, m_->window_T, m_->K, m_->H, m_->W});
  int64_t gridn = b.grid.numel() / batch_;
  int64_t maskn = b.mask.numel() / batch_;
  for (int i = 0; i < batch_; ++i) {
    auto [g, e] = read_window(*m_, order[size_t(batch_idx * batch_ + i)]);
    std::copy(g.values.ptr(), g.values.ptr() + gridn, b.grid.ptr() + i * gridn);
    std::copy(e.values.ptr(), e.values.ptr() + maskn, b.mask.ptr() + i * maskn);
  }
  return b;
}

}  // namespace wxgan
