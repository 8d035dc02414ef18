#pragma once

// Montage rendering: one row per configured source (an event-mask class or a
// grid channel from a real or generated dataset), one column per timestep,
// one-pixel separators, linear grayscale over a per-row display range.
// Output is binary PGM (P5), writable with no imaging dependency.

#include <cstdint>
#include <string>
#include <vector>

#include "wxgan/common.hpp"
#include "wxgan/tensor.hpp"

namespace wxgan {

// What a montage row shows. Real and generated rows are both grid channels
// read from a dataset directory; the distinction is which dataset the row
// points at (generated sequences are written in the same on-disk format).
enum class RowSource { kMask, kReal, kGenerated };

struct RenderRow {
  std::string label;
  RowSource source = RowSource::kReal;
  std::string dataset;        // manifest path or dataset directory
  int64_t window = 0;         // window index within that dataset
  int channel = 0;            // mask class k or grid channel c
  double lo = 0.0, hi = 1.0;  // display range in stored units; lo < hi
};

struct RenderSpec {
  int timesteps = 10;  // columns shown; every row must provide at least this many frames
  std::string out;     // output image path
  std::vector<RenderRow> rows;

  void validate() const;  // throws ConfigError
};

RenderSpec render_spec_from_json_text(const std::string& text, const std::string& origin);
RenderSpec load_render_spec(const std::string& path);

struct Image {
  int h = 0, w = 0;
  std::vector<uint8_t> pixels;  // row-major grayscale

  uint8_t& at(int r, int c) { return pixels[size_t(r) * size_t(w) + size_t(c)]; }
  uint8_t at(int r, int c) const { return pixels[size_t(r) * size_t(w) + size_t(c)]; }
};

// One loaded montage row: frames is (T',H,W) in display units.
struct RowFrames {
  std::string label;
  Tensor frames;
  double lo = 0.0, hi = 1.0;
};

// Lays out |rows| tiles of (H,W) per row and `timesteps` columns with
// one-pixel white separators: height = rows*H + rows - 1 and
// width = timesteps*W + timesteps - 1. Values map linearly,
// round(clamp((v - lo)/(hi - lo), 0, 1) * 255). All rows must share
// (timesteps, H, W); violations throw DataError.
Image render_montage(const std::vector<RowFrames>& rows, int timesteps);

// Loads every row from its dataset (mask rows: raw {0,1} planes; grid rows:
// de-normalized back to stored units) and renders the montage.
Image render_from_spec(const RenderSpec& spec);

// Binary PGM: "P5\n<w> <h>\n255\n" followed by h*w raw bytes.
void write_pgm(const Image& img, const std::string& path);

// Runs render_from_spec and writes the result to spec.out.
void render_to_file(const RenderSpec& spec);

}  // namespace wxgan
