#include <harmonia/params_json.hpp>

#include <harmonia/error.hpp>

#include <json.hpp>

namespace harmonia {

using nlohmann::json;

std::string serialize_params(const HarmonizationParams& params) {
  json curves = json::array();
  for (int c = 0; c < kCurveChannels; ++c) {
    json channel = json::array();
    for (int k = 0; k < params.curves.nodes(); ++k) {
      channel.push_back(json::array({params.curves.x(c, k), params.curves.y(c, k)}));
    }
    curves.push_back(std::move(channel));
  }
  json shading = json::array();
  for (Eigen::Index r = 0; r < params.shading.grid.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < params.shading.grid.cols(); ++c) row.push_back(params.shading.grid(r, c));
    shading.push_back(std::move(row));
  }
  nlohmann::ordered_json doc;
  doc["version"] = 1;
  doc["curves"] = std::move(curves);
  doc["shading"] = std::move(shading);
  return doc.dump();
}

namespace {

double number_at(const json& v, const std::string& path) {
  if (!v.is_number()) throw ParseError(path, "expected a number");
  return v.get<double>();
}

const json& array_at(const json& v, const std::string& path, std::size_t size) {
  if (!v.is_array()) throw ParseError(path, "expected an array");
  if (v.size() != size) {
    throw ParseError(path, "expected " + std::to_string(size) + " elements, got " + std::to_string(v.size()));
  }
  return v;
}

}  // namespace

HarmonizationParams parse_params(const std::string& text, const ParamsShape& shape) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("", std::string("invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("", "expected a JSON object");
  for (const char* key : {"version", "curves", "shading"}) {
    if (!doc.contains(key)) throw ParseError(key, "missing key");
  }
  if (!doc["version"].is_number_integer() || doc["version"].get<int>() != 1) {
    throw ParseError("version", "unsupported version");
  }

  HarmonizationParams params;
  const json& curves = array_at(doc["curves"], "curves", kCurveChannels);
  params.curves.x.resize(kCurveChannels, shape.nodes);
  params.curves.y.resize(kCurveChannels, shape.nodes);
  for (int c = 0; c < kCurveChannels; ++c) {
    const std::string cpath = "curves/" + std::to_string(c);
    const json& channel = array_at(curves[std::size_t(c)], cpath, std::size_t(shape.nodes));
    for (int k = 0; k < shape.nodes; ++k) {
      const std::string npath = cpath + "/" + std::to_string(k);
      const json& node = array_at(channel[std::size_t(k)], npath, 2);
      params.curves.x(c, k) = number_at(node[0], npath + "/0");
      params.curves.y(c, k) = number_at(node[1], npath + "/1");
    }
  }
  const json& shading = array_at(doc["shading"], "shading", std::size_t(shape.grid));
  params.shading.grid.resize(shape.grid, shape.grid);
  for (int r = 0; r < shape.grid; ++r) {
    const std::string rpath = "shading/" + std::to_string(r);
    const json& row = array_at(shading[std::size_t(r)], rpath, std::size_t(shape.grid));
    for (int c = 0; c < shape.grid; ++c) {
      params.shading.grid(r, c) = number_at(row[std::size_t(c)], rpath + "/" + std::to_string(c));
    }
  }

  try {
    params.validate();
  } catch (const std::invalid_argument& e) {
    // validate() messages lead with the field path.
    const std::string msg = e.what();
    const auto colon = msg.find(':');
    throw ParseError(msg.substr(0, colon), colon == std::string::npos ? msg : msg.substr(colon + 2));
  }
  return params;
}

}  // namespace harmonia
