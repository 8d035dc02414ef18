#include "wxgan/render.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "wxgan/data.hpp"
#include "wxgan/train.hpp"

using nlohmann::json;

namespace wxgan {

namespace {

json parse_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + origin + ": " + e.what());
  }
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where,
                const std::string& origin) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object in " + origin);
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : allowed)
      if (item.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where + " of " + origin);
  }
}

template <class T>
void take(const json& j, const char* key, T& out, const std::string& origin) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "' in " + origin + ": " + e.what());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RowSource source_from_name(const std::string& s, const std::string& origin) {
  if (s == "mask") return RowSource::kMask;
  if (s == "real") return RowSource::kReal;
  if (s == "generated") return RowSource::kGenerated;
  throw ConfigError("unknown row source '" + s + "' in " + origin + " (expected mask|real|generated)");
}

}  // namespace

void RenderSpec::validate() const {
  if (timesteps < 1) throw ConfigError("timesteps must be >= 1");
  if (out.empty()) throw ConfigError("output path is required");
  if (rows.empty()) throw ConfigError("at least one row is required");
  for (const RenderRow& r : rows) {
    if (r.dataset.empty()) throw ConfigError("row '" + r.label + "': dataset path is required");
    if (r.window < 0) throw ConfigError("row '" + r.label + "': window index must be >= 0");
    if (r.channel < 0) throw ConfigError("row '" + r.label + "': channel must be >= 0");
    if (!(r.lo < r.hi)) throw ConfigError("row '" + r.label + "': display range needs lo < hi");
  }
}

RenderSpec render_spec_from_json_text(const std::string& text, const std::string& origin) {
  json j = parse_text(text, origin);
  check_keys(j, {"timesteps", "out", "rows"}, "top level", origin);
  RenderSpec spec;
  take(j, "timesteps", spec.timesteps, origin);
  take(j, "out", spec.out, origin);
  if (j.contains("rows")) {
    const json& rows = j.at("rows");
    if (!rows.is_array()) throw ConfigError("'rows' must be an array in " + origin);
    for (const json& rj : rows) {
      check_keys(rj, {"label", "source", "dataset", "window", "channel", "lo", "hi"}, "row", origin);
      RenderRow r;
      take(rj, "label", r.label, origin);
      std::string src = "real";
      take(rj, "source", src, origin);
      r.source = source_from_name(src, origin);
      take(rj, "dataset", r.dataset, origin);
      take(rj, "window", r.window, origin);
      take(rj, "channel", r.channel, origin);
      take(rj, "lo", r.lo, origin);
      take(rj, "hi", r.hi, origin);
      spec.rows.push_back(std::move(r));
    }
  }
  spec.validate();
  return spec;
}

RenderSpec load_render_spec(const std::string& path) {
  return render_spec_from_json_text(read_file(path), path);
}

Image render_montage(const std::vector<RowFrames>& rows, int timesteps) {
  if (rows.empty()) throw DataError("montage needs at least one row");
  if (timesteps < 1) throw DataError("montage needs at least one timestep");
  const std::vector<int> want{timesteps, rows[0].frames.dim(1), rows[0].frames.dim(2)};
  for (const RowFrames& r : rows) {
    if (r.frames.ndim() != 3 || r.frames.shape != want)
      throw DataError("montage row '" + r.label + "': expected frames " + shape_str(want) + ", got " +
                      shape_str(r.frames.shape));
    if (!(r.lo < r.hi)) throw DataError("montage row '" + r.label + "': display range needs lo < hi");
  }
  const int th = want[1], tw = want[2];
  const int n_rows = int(rows.size());

  Image img;
  img.h = n_rows * th + (n_rows - 1);
  img.w = timesteps * tw + (timesteps - 1);
  img.pixels.assign(size_t(img.h) * size_t(img.w), uint8_t(255));  // separators stay white

  for (int ri = 0; ri < n_rows; ++ri) {
    const RowFrames& row = rows[size_t(ri)];
    const double lo = row.lo, scale = 255.0 / (row.hi - row.lo);
    const int y0 = ri * (th + 1);
    for (int t = 0; t < timesteps; ++t) {
      const int x0 = t * (tw + 1);
      const float* tile = row.frames.ptr() + int64_t(t) * th * tw;
      for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x) {
          double u = (double(tile[y * tw + x]) - lo) * scale;
          u = std::clamp(u, 0.0, 255.0);
          img.at(y0 + y, x0 + x) = uint8_t(std::lround(u));
        }
    }
  }
  return img;
}

Image render_from_spec(const RenderSpec& spec) {
  spec.validate();
  std::vector<RowFrames> loaded;
  loaded.reserve(spec.rows.size());
  for (const RenderRow& r : spec.rows) {
    DatasetManifest m = load_manifest(resolve_manifest_path(r.dataset));
    if (r.window >= m.record_count)
      throw DataError("row '" + r.label + "': window " + std::to_string(r.window) + " out of range (dataset has " +
                      std::to_string(m.record_count) + " windows)");
    if (m.window_T < spec.timesteps)
      throw DataError("row '" + r.label + "': dataset windows have " + std::to_string(m.window_T) +
                      " frames, montage needs " + std::to_string(spec.timesteps));
    auto [grid, mask] = read_window(m, r.window);

    const Tensor* src = nullptr;
    int channels = 0;
    if (r.source == RowSource::kMask) {
      src = &mask.values;
      channels = m.K;
    } else {
      denormalize_grid(m, grid.values);  // display in stored units, not z-scores
      src = &grid.values;
      channels = m.C;
    }
    if (r.channel >= channels)
      throw DataError("row '" + r.label + "': channel " + std::to_string(r.channel) + " out of range (dataset has " +
                      std::to_string(channels) + ")");

    RowFrames rf;
    rf.label = r.label;
    rf.lo = r.lo;
    rf.hi = r.hi;
    rf.frames = Tensor({spec.timesteps, m.H, m.W});
    const int64_t plane = int64_t(m.H) * m.W;
    for (int t = 0; t < spec.timesteps; ++t) {
      const float* from = src->ptr() + (int64_t(t) * channels + r.channel) * plane;
      std::copy(from, from + plane, rf.frames.ptr() + int64_t(t) * plane);
    }
    loaded.push_back(std::move(rf));
  }
  return render_montage(loaded, spec.timesteps);
}

void write_pgm(const Image& img, const std::string& path) {
  if (img.h < 1 || img.w < 1 || img.pixels.size() != size_t(img.h) * size_t(img.w))
    throw DataError("image dimensions do not match pixel buffer");
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << "P5\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (!out) throw DataError("failed writing " + path);
}

void render_to_file(const RenderSpec& spec) {
  Image img = render_from_spec(spec);
  write_pgm(img, spec.out);
}

}  // namespace wxgan
