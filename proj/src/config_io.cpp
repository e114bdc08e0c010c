#include "parkgauss/config_io.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>

#include "parkgauss/common.hpp"

namespace parkgauss {

namespace {

using nlohmann::json;

const char* aggregation_name(EdgeAggregation a) {
  return a == EdgeAggregation::kMax ? "max" : "sum";
}

EdgeAggregation parse_aggregation(const std::string& s, const std::string& where) {
  if (s == "max") return EdgeAggregation::kMax;
  if (s == "sum") return EdgeAggregation::kSum;
  throw UsageError(where + ": expected \"max\" or \"sum\", got \"" + s + "\"");
}

double num(const json& j, const std::string& where) {
  if (!j.is_number()) throw UsageError(where + ": expected a number");
  return j.get<double>();
}

int integer(const json& j, const std::string& where) {
  if (!j.is_number_integer()) throw UsageError(where + ": expected an integer");
  return j.get<int>();
}

uint64_t uinteger(const json& j, const std::string& where) {
  if (!j.is_number_integer() || (!j.is_number_unsigned() && j.get<int64_t>() < 0))
    throw UsageError(where + ": expected a non-negative integer");
  return j.get<uint64_t>();
}

bool boolean(const json& j, const std::string& where) {
  if (!j.is_boolean()) throw UsageError(where + ": expected a boolean");
  return j.get<bool>();
}

std::string str(const json& j, const std::string& where) {
  if (!j.is_string()) throw UsageError(where + ": expected a string");
  return j.get<std::string>();
}

using Handler = std::function<void(const json&, const std::string&)>;

// Applies every key of `j` through the handler table; anything the table
// does not name is a config error, spelled with its full dotted path.
void apply_object(const json& j, const std::string& where,
                  const std::map<std::string, Handler>& fields) {
  if (!j.is_object()) throw UsageError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto f = fields.find(it.key());
    if (f == fields.end()) throw UsageError("unknown config key: " + where + "." + it.key());
    f->second(it.value(), where + "." + it.key());
  }
}

Handler sub(const std::map<std::string, Handler>& fields) {
  return [fields](const json& j, const std::string& w) { apply_object(j, w, fields); };
}

Handler dbl(double& slot) {
  return [&slot](const json& j, const std::string& w) { slot = num(j, w); };
}

Handler iv(int& slot) {
  return [&slot](const json& j, const std::string& w) { slot = integer(j, w); };
}

Handler bl(bool& slot) {
  return [&slot](const json& j, const std::string& w) { slot = boolean(j, w); };
}

}  // namespace

json config_to_json(const TrainConfig& c) {
  json j;
  j["total_iters"] = c.total_iters;
  j["phase1_iters"] = c.phase1_iters;
  j["lr"] = {{"position", c.lr_position},
             {"sh", c.lr_sh},
             {"opacity", c.lr_opacity},
             {"scales", c.lr_scales},
             {"rotation", c.lr_rotation}};
  j["adam"] = {{"beta1", c.adam_beta1}, {"beta2", c.adam_beta2}, {"eps", c.adam_eps}};
  j["loss"] = {{"lambda_dssim", c.loss.lambda_dssim},   {"lambda_align", c.loss.lambda_align},
               {"lambda_ipm", c.loss.lambda_ipm},       {"lambda_cam", c.loss.lambda_cam},
               {"lambda_edge", c.loss.lambda_edge},     {"topk_k", c.loss.topk_k},
               {"reverse_kl", c.loss.reverse_kl}};
  j["slot_mode"] = slot_mode_name(c.slot_mode);
  j["mix_alpha"] = c.mix_alpha;
  j["mix_beta"] = c.mix_beta;
  j["stop_gradient"] = c.stop_gradient;
  j["detector"] = {{"stride", c.detector.stride},
                   {"gain", c.detector.gain},
                   {"bias", c.detector.bias},
                   {"temperature", c.detector.temperature}};
  j["shape"] = {{"tau", c.shape.tau},
                {"temperature", c.shape.temperature},
                {"gamma", c.shape.gamma}};
  j["edge"] = {{"n_samples", c.edge.n_samples},
               {"gain", c.edge.gain},
               {"bias", c.edge.bias},
               {"percentile", c.edge.percentile}};
  j["edge_tube"] = {{"top_k", c.edge_tube.top_k},
                    {"sigma", c.edge_tube.sigma},
                    {"n_samples", c.edge_tube.n_samples},
                    {"aggregation", aggregation_name(c.edge_tube.aggregation)}};
  j["peak_threshold"] = c.peak_threshold;
  j["peak_nms_px"] = c.peak_nms_px;
  j["match"] = {{"distance_px", c.match.distance_px},
                {"angle_deg", c.match.angle_deg},
                {"confidence", c.match.confidence}};
  j["render"] = {{"tile_size", c.render.tile_size},
                 {"lowpass", c.render.lowpass},
                 {"alpha_min", c.render.alpha_min},
                 {"alpha_max", c.render.alpha_max},
                 {"transmittance_min", c.render.transmittance_min},
                 {"near", c.render.near},
                 {"background",
                  {c.render.background[0], c.render.background[1], c.render.background[2]}},
                 {"ut", {{"alpha", c.render.ut.alpha},
                         {"beta", c.render.ut.beta},
                         {"kappa", c.render.ut.kappa}}}};
  j["n_gaussians"] = c.n_gaussians;
  j["sh_degree"] = c.sh_degree;
  j["seed"] = c.seed;
  j["log_every"] = c.log_every;
  j["eval_every"] = c.eval_every;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

void apply_config_json(TrainConfig& c, const json& j, const std::string& where) {
  const std::map<std::string, Handler> fields{
      {"total_iters", iv(c.total_iters)},
      {"phase1_iters", iv(c.phase1_iters)},
      {"lr", sub({{"position", dbl(c.lr_position)},
                  {"sh", dbl(c.lr_sh)},
                  {"opacity", dbl(c.lr_opacity)},
                  {"scales", dbl(c.lr_scales)},
                  {"rotation", dbl(c.lr_rotation)}})},
      {"adam", sub({{"beta1", dbl(c.adam_beta1)},
                    {"beta2", dbl(c.adam_beta2)},
                    {"eps", dbl(c.adam_eps)}})},
      {"loss", sub({{"lambda_dssim", dbl(c.loss.lambda_dssim)},
                    {"lambda_align", dbl(c.loss.lambda_align)},
                    {"lambda_ipm", dbl(c.loss.lambda_ipm)},
                    {"lambda_cam", dbl(c.loss.lambda_cam)},
                    {"lambda_edge", dbl(c.loss.lambda_edge)},
                    {"topk_k", iv(c.loss.topk_k)},
                    {"reverse_kl", bl(c.loss.reverse_kl)}})},
      {"slot_mode",
       [&c](const json& v, const std::string& w) { c.slot_mode = parse_slot_mode(str(v, w)); }},
      {"mix_alpha", dbl(c.mix_alpha)},
      {"mix_beta", dbl(c.mix_beta)},
      {"stop_gradient", bl(c.stop_gradient)},
      {"detector", sub({{"stride", iv(c.detector.stride)},
                        {"gain", dbl(c.detector.gain)},
                        {"bias", dbl(c.detector.bias)},
                        {"temperature", dbl(c.detector.temperature)}})},
      {"shape", sub({{"tau", dbl(c.shape.tau)},
                     {"temperature", dbl(c.shape.temperature)},
                     {"gamma", dbl(c.shape.gamma)}})},
      {"edge", sub({{"n_samples", iv(c.edge.n_samples)},
                    {"gain", dbl(c.edge.gain)},
                    {"bias", dbl(c.edge.bias)},
                    {"percentile", dbl(c.edge.percentile)}})},
      {"edge_tube",
       sub({{"top_k", iv(c.edge_tube.top_k)},
            {"sigma", dbl(c.edge_tube.sigma)},
            {"n_samples", iv(c.edge_tube.n_samples)},
            {"aggregation", [&c](const json& v, const std::string& w) {
               c.edge_tube.aggregation = parse_aggregation(str(v, w), w);
             }}})},
      {"peak_threshold", dbl(c.peak_threshold)},
      {"peak_nms_px", dbl(c.peak_nms_px)},
      {"match", sub({{"distance_px", dbl(c.match.distance_px)},
                     {"angle_deg", dbl(c.match.angle_deg)},
                     {"confidence", dbl(c.match.confidence)}})},
      {"render",
       sub({{"tile_size", iv(c.render.tile_size)},
            {"lowpass", dbl(c.render.lowpass)},
            {"alpha_min", dbl(c.render.alpha_min)},
            {"alpha_max", dbl(c.render.alpha_max)},
            {"transmittance_min", dbl(c.render.transmittance_min)},
            {"near", dbl(c.render.near)},
            {"background",
             [&c](const json& v, const std::string& w) {
               if (!v.is_array() || v.size() != 3)
                 throw UsageError(w + ": expected [r, g, b]");
               for (int d = 0; d < 3; ++d) c.render.background[d] = num(v[d], w);
             }},
            {"ut", sub({{"alpha", dbl(c.render.ut.alpha)},
                        {"beta", dbl(c.render.ut.beta)},
                        {"kappa", dbl(c.render.ut.kappa)}})}})},
      {"n_gaussians",
       [&c](const json& v, const std::string& w) {
         c.n_gaussians = static_cast<size_t>(uinteger(v, w));
       }},
      {"sh_degree", iv(c.sh_degree)},
      {"seed", [&c](const json& v, const std::string& w) { c.seed = uinteger(v, w); }},
      {"log_every", iv(c.log_every)},
      {"eval_every", iv(c.eval_every)},
      {"checkpoint_every", iv(c.checkpoint_every)},
  };
  apply_object(j, where, fields);
}

TrainConfig config_from_json(const json& j) {
  TrainConfig cfg;
  apply_config_json(cfg, j);
  return cfg;
}

void apply_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read config file", path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed config JSON: ") + e.what(), path);
  }
  apply_config_json(cfg, j, "config");
}

std::string config_hash(const TrainConfig& cfg) {
  const std::string dump = config_to_json(cfg).dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace parkgauss
