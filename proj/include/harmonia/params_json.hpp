#pragma once

#include <harmonia/params.hpp>

#include <optional>
#include <string>

namespace harmonia {

/// Expected wire dimensions. Defaults are the shared schema (3 x 32 nodes,
/// 64 x 64 grid); models trained with other sizes pass their own.
struct ParamsShape {
  int nodes = kDefaultCurveNodes;
  int grid = kDefaultShadingGrid;
};

/// {"version":1,"curves":[[[x,y] x nodes] x 3],"shading":[[g x grid] x grid]}
/// Doubles are printed with round-trip precision.
std::string serialize_params(const HarmonizationParams& params);

/// Throws ParseError whose field() is the offending path (e.g. "shading",
/// "curves/0/5/0").
HarmonizationParams parse_params(const std::string& text, const ParamsShape& shape = {});

}  // namespace harmonia
