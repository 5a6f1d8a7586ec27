// SPDX-License-Identifier: Apache-2.0
#pragma once

// Published result tables used as oracle data by the stats and screening
// tests and by `normlab fixtures`.

#include <array>
#include <cmath>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace normlab::fixtures {

inline constexpr int kFixtureVersion = 1;

// Seeds in column order of the per-seed tables.
inline constexpr std::array<const char*, 3> kSeeds = {"1337", "42", "7"};

struct SaturationCell {
  std::string scale;   // "S1" ... "S5"
  std::string tokens;  // "1M", "10M", "50M", "118M"
  double params;       // nominal parameter count
  double sat;          // fraction of |alpha x| > 2.0
  double mean_alpha;
  double delta;        // DyT val-loss change vs vanilla, percent

  std::string label() const { return scale + "/" + tokens; }
  bool helps() const { return delta < 0; }
};

// GPT-2 stack, 3-seed means. The first 12 rows are the pre-Scale-5 set.
inline const std::vector<SaturationCell>& saturation_cells_14() {
  static const std::vector<SaturationCell> rows = {
      {"S1", "1M", 64e6, 0.493, 2.36, -27.3},   {"S1", "10M", 64e6, 0.413, 2.23, 5.9},
      {"S1", "50M", 64e6, 0.237, 2.11, 19.7},   {"S1", "118M", 64e6, 0.234, 2.11, 18.8},
      {"S2", "1M", 124e6, 0.466, 2.30, -9.6},   {"S2", "10M", 124e6, 0.292, 1.77, -12.3},
      {"S2", "118M", 124e6, 0.193, 1.85, 12.8}, {"S3", "1M", 354e6, 0.490, 1.81, 4.3},
      {"S3", "10M", 354e6, 0.369, 1.59, -24.1}, {"S3", "118M", 354e6, 0.327, 1.50, 13.4},
      {"S4", "1M", 1.3e9, 0.393, 1.97, 2.1},    {"S4", "118M", 1.3e9, 0.238, 1.88, 10.4},
      {"S5", "1M", 3.78e9, 0.501, 1.77, 1.7},   {"S5", "118M", 3.78e9, 0.803, 1.77, 27.9},
  };
  return rows;
}

inline std::vector<SaturationCell> saturation_cells_12() {
  const auto& all = saturation_cells_14();
  return {all.begin(), all.begin() + 12};
}

struct LlamaCell {
  std::string scale;
  std::string tokens;
  double params;         // GPT-2 scale label the cell is shaped after
  double params_actual;  // measured Llama-family total
  double sat;
  double delta;

  std::string label() const { return "llama-" + scale + "/" + tokens; }
  bool helps() const { return delta < 0; }
};

inline const std::vector<LlamaCell>& llama_cells() {
  static const std::vector<LlamaCell> rows = {
      {"S1", "1M", 64e6, 89e6, 0.536, -25.6},
      {"S2", "1M", 124e6, 150e6, 0.452, -7.1},
      {"S1", "118M", 64e6, 89e6, 0.326, 59.1},
  };
  return rows;
}

struct SeedRow {
  std::string tokens;
  std::string config;  // "vanilla", "dyt", "diffattn"
  std::array<double, 3> values;
  double printed_mean;
  double printed_std;
};

struct SeedTable {
  std::string scale;
  double params;
  std::vector<SeedRow> rows;

  const SeedRow& row(const std::string& tokens, const std::string& config) const {
    for (const auto& r : rows)
      if (r.tokens == tokens && r.config == config) return r;
    throw std::out_of_range("no row " + tokens + "/" + config + " in " + scale);
  }
};

inline const SeedTable& scale1_per_seed() {
  static const SeedTable t{"S1",
                           64e6,
                           {
                               {"1M", "vanilla", {9.340, 9.432, 9.380}, 9.384, 0.038},
                               {"1M", "dyt", {6.784, 7.043, 6.628}, 6.819, 0.171},
                               {"1M", "diffattn", {9.626, 9.414, 9.430}, 9.490, 0.097},
                               {"10M", "vanilla", {4.273, 4.256, 4.253}, 4.260, 0.009},
                               {"10M", "dyt", {4.518, 4.513, 4.500}, 4.510, 0.008},
                               {"10M", "diffattn", {3.689, 3.687, 3.741}, 3.706, 0.025},
                               {"50M", "vanilla", {3.673, 3.667, 3.657}, 3.666, 0.007},
                               {"50M", "dyt", {4.405, 4.360, 4.394}, 4.386, 0.019},
                               {"50M", "diffattn", {3.376, 3.374, 3.388}, 3.380, 0.006},
                               {"118M", "vanilla", {3.640, 3.632, 3.622}, 3.631, 0.008},
                               {"118M", "dyt", {4.290, 4.303, 4.346}, 4.313, 0.024},
                               {"118M", "diffattn", {3.343, 3.364, 3.368}, 3.359, 0.011},
                           }};
  return t;
}

inline const SeedTable& scale4_per_seed() {
  static const SeedTable t{"S4",
                           1.3e9,
                           {
                               {"1M", "vanilla", {7.658, 7.627, 7.794}, 7.693, 0.073},
                               {"1M", "dyt", {7.751, 7.867, 7.938}, 7.852, 0.077},
                               {"1M", "diffattn", {7.972, 7.914, 7.753}, 7.880, 0.093},
                               {"118M", "vanilla", {3.355, 3.335, 3.354}, 3.348, 0.009},
                               {"118M", "dyt", {3.707, 3.684, 3.701}, 3.697, 0.010},
                               {"118M", "diffattn", {2.313, 2.419, 2.372}, 2.368, 0.044},
                           }};
  return t;
}

struct SignificanceInput {
  std::string scale;
  std::string tokens;
  std::string mod;
  double vanilla_mean;
  double mod_mean;
  double delta;
  double p_raw;
  double p_bonf;
};

// Family size of the published significance table.
inline constexpr std::size_t kSignificanceFamily = 19;

inline const std::vector<SignificanceInput>& significance_rows() {
  static const std::vector<SignificanceInput> rows = {
      {"S1", "1M", "dyt", 9.384, 6.819, -27.3, 0.0017, 0.032},
      {"S1", "1M", "diffattn", 9.384, 9.490, 1.1, 0.37, 1.0},
      {"S1", "10M", "dyt", 4.260, 4.510, 5.9, 0.0002, 0.004},
      {"S1", "10M", "diffattn", 4.260, 3.706, -13.0, 0.0016, 0.030},
      {"S1", "50M", "dyt", 3.666, 4.386, 19.7, 0.0004, 0.007},
      {"S1", "50M", "diffattn", 3.666, 3.380, -7.8, 0.0010, 0.018},
      {"S1", "118M", "dyt", 3.631, 4.313, 18.8, 0.0011, 0.020},
      {"S1", "118M", "diffattn", 3.631, 3.359, -7.5, 0.0022, 0.043},
      {"S2", "1M", "dyt", 9.168, 8.290, -9.6, 0.0044, 0.083},
      {"S2", "118M", "dyt", 3.498, 3.945, 12.8, 0.0011, 0.020},
      {"S2", "118M", "diffattn", 3.498, 3.068, -12.3, 0.0019, 0.037},
      {"S3", "1M", "dyt", 8.653, 9.025, 4.3, 0.0064, 0.122},
      {"S3", "118M", "dyt", 3.355, 3.802, 13.4, 0.0007, 0.013},
      {"S3", "118M", "diffattn", 3.355, 2.420, -27.9, 0.0005, 0.009},
      {"S4", "1M", "dyt", 7.693, 7.852, 2.1, 0.067, 1.0},
      {"S4", "118M", "dyt", 3.348, 3.697, 10.4, 1.8e-5, 0.0003},
      {"S4", "118M", "diffattn", 3.348, 2.368, -29.3, 0.0014, 0.026},
      {"S5", "1M", "dyt", 7.842, 7.975, 1.7, 0.042, 0.79},
      {"S5", "118M", "dyt", 3.431, 4.389, 27.9, 0.0041, 0.078},
  };
  return rows;
}

// Llama component ablation at S1/118M: per-ablation mean saturation.
struct AblationRow {
  std::string name;
  double val_loss;
  double val_std;
  double sat;
  double sat_std;
  int failed_seeds;
};

inline const std::vector<AblationRow>& llama_ablation_rows() {
  static const std::vector<AblationRow> rows = {
      {"baseline", 5.626, 1.3, 0.453, 0.188, 1},
      {"ablate_rope", 6.787, 1.14, 0.559, 0.070, 2},
      {"ablate_gqa", 6.565, 1.53, 0.609, 0.243, 2},
      {"ablate_swiglu", 4.476, 0.007, 0.257, 0.002, 0},
  };
  return rows;
}

// ---- JSON emission -------------------------------------------------------

inline nlohmann::json saturation_json(const std::vector<SaturationCell>& cells, const std::string& name) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : cells)
    rows.push_back({{"cell", c.label()},
                    {"scale", c.scale},
                    {"tokens", c.tokens},
                    {"params", c.params},
                    {"sat", c.sat},
                    {"mean_alpha", c.mean_alpha},
                    {"delta_pct", c.delta},
                    {"helps", c.helps()}});
  return {{"fixture", name}, {"version", kFixtureVersion}, {"threshold", 2.0}, {"rows", rows}};
}

inline nlohmann::json llama_json() {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : llama_cells())
    rows.push_back({{"cell", c.label()},
                    {"scale", c.scale},
                    {"tokens", c.tokens},
                    {"params", c.params},
                    {"params_actual", c.params_actual},
                    {"sat", c.sat},
                    {"delta_pct", c.delta},
                    {"helps", c.helps()}});
  return {{"fixture", "llama_cells"}, {"version", kFixtureVersion}, {"rows", rows}};
}

inline nlohmann::json seed_table_json(const SeedTable& t, const std::string& name) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    nlohmann::json seeds;
    for (std::size_t i = 0; i < kSeeds.size(); ++i) seeds[kSeeds[i]] = r.values[i];
    rows.push_back({{"tokens", r.tokens},
                    {"config", r.config},
                    {"seeds", seeds},
                    {"printed_mean", r.printed_mean},
                    {"printed_std", r.printed_std}});
  }
  return {{"fixture", name}, {"version", kFixtureVersion}, {"scale", t.scale}, {"params", t.params}, {"rows", rows}};
}

inline nlohmann::json significance_json() {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : significance_rows())
    rows.push_back({{"scale", r.scale},
                    {"tokens", r.tokens},
                    {"mod", r.mod},
                    {"vanilla_mean", r.vanilla_mean},
                    {"mod_mean", r.mod_mean},
                    {"delta_pct", r.delta},
                    {"p_raw", r.p_raw},
                    {"p_bonf", r.p_bonf}});
  return {{"fixture", "significance_19"},
          {"version", kFixtureVersion},
          {"family_size", kSignificanceFamily},
          {"rows", rows}};
}

inline nlohmann::json ablation_json() {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : llama_ablation_rows())
    rows.push_back({{"ablation", r.name},
                    {"val_loss", r.val_loss},
                    {"val_std", r.val_std},
                    {"sat", r.sat},
                    {"sat_std", r.sat_std},
                    {"failed_seeds", r.failed_seeds}});
  return {{"fixture", "llama_ablation"}, {"version", kFixtureVersion}, {"rows", rows}};
}

// File name -> document, in emission order.
inline std::vector<std::pair<std::string, nlohmann::json>> all_fixtures() {
  return {
      {"saturation_12.json", saturation_json(saturation_cells_12(), "saturation_12")},
      {"saturation_14.json", saturation_json(saturation_cells_14(), "saturation_14")},
      {"llama_cells.json", llama_json()},
      {"scale1_per_seed.json", seed_table_json(scale1_per_seed(), "scale1_per_seed")},
      {"scale4_per_seed.json", seed_table_json(scale4_per_seed(), "scale4_per_seed")},
      {"significance_19.json", significance_json()},
      {"llama_ablation.json", ablation_json()},
  };
}

// Reads a saturation fixture document back into cells.
inline std::vector<SaturationCell> saturation_from_json(const nlohmann::json& j) {
  std::vector<SaturationCell> out;
  for (const auto& r : j.at("rows"))
    out.push_back({r.at("scale").get<std::string>(), r.at("tokens").get<std::string>(), r.at("params").get<double>(),
                   r.at("sat").get<double>(), r.at("mean_alpha").get<double>(), r.at("delta_pct").get<double>()});
  return out;
}

}  // namespace normlab::fixtures
