#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxkit/core.hpp"

namespace voxkit {

using Token = std::int32_t;
inline constexpr Token kMaskToken = -1;

/// Integer token matrix, layers x frames, stored layer-major.
class TokenGrid {
 public:
  TokenGrid() = default;
  TokenGrid(int layers, int frames, Token fill = kMaskToken)
      : layers_(layers), frames_(frames), data_(static_cast<std::size_t>(layers) * frames, fill) {
    if (layers < 0 || frames < 0) throw Error(ErrorCode::ShapeMismatch, "negative grid dimensions");
  }

  int layers() const { return layers_; }
  int frames() const { return frames_; }
  std::size_t size() const { return data_.size(); }

  Token& at(int layer, int frame) { return data_[index(layer, frame)]; }
  Token at(int layer, int frame) const { return data_[index(layer, frame)]; }
  Token& operator[](std::size_t i) { return data_[i]; }
  Token operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int layer, int frame) const {
    return static_cast<std::size_t>(layer) * static_cast<std::size_t>(frames_) + static_cast<std::size_t>(frame);
  }

  const std::vector<Token>& data() const { return data_; }
  std::vector<Token>& data() { return data_; }

  bool has_mask() const {
    for (Token t : data_) {
      if (t == kMaskToken) return true;
    }
    return false;
  }

  bool same_shape(const TokenGrid& o) const { return layers_ == o.layers_ && frames_ == o.frames_; }

  /// Frames [begin, begin + count) across all layers.
  TokenGrid slice_frames(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > frames_) throw Error(ErrorCode::ShapeMismatch, "frame slice out of range");
    TokenGrid out(layers_, count);
    for (int l = 0; l < layers_; ++l) {
      for (int f = 0; f < count; ++f) out.at(l, f) = at(l, begin + f);
    }
    return out;
  }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;

 private:
  int layers_ = 0;
  int frames_ = 0;
  std::vector<Token> data_;
};

inline void require_same_shape(const TokenGrid& a, const TokenGrid& b, const char* what) {
  if (!a.same_shape(b)) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": " + std::to_string(a.layers()) + "x" +
                                              std::to_string(a.frames()) + " vs " + std::to_string(b.layers()) +
                                              "x" + std::to_string(b.frames()));
  }
}

}  // namespace voxkit
