#pragma once

// CSV and JSON encodings of the dab_physics domain types.

#include "dabmod/dab_physics.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>

namespace dabmod::physics {

/// Header `t,v_p,v_s,i_l`, one row per sample, shortest round-trip decimals.
void write_waveform_csv(std::ostream& os, const Waveform& w);
void write_waveform_csv(const std::filesystem::path& path, const Waveform& w);

/// Grid is rebuilt from the row count and the first time step.
[[nodiscard]] Waveform read_waveform_csv(std::istream& is);
[[nodiscard]] Waveform read_waveform_csv(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const Strategy& s);
void from_json(const nlohmann::json& j, Strategy& s);
void to_json(nlohmann::json& j, const ConverterParams& cp);
void from_json(const nlohmann::json& j, ConverterParams& cp);
void to_json(nlohmann::json& j, const ModulationParams& mp);
void from_json(const nlohmann::json& j, ModulationParams& mp);
void to_json(nlohmann::json& j, const SamplingGrid& g);
void from_json(const nlohmann::json& j, SamplingGrid& g);
void to_json(nlohmann::json& j, const Waveform& w);
void from_json(const nlohmann::json& j, Waveform& w);
void to_json(nlohmann::json& j, const PerformanceMetrics& m);
void from_json(const nlohmann::json& j, PerformanceMetrics& m);
void to_json(nlohmann::json& j, const RingingParams& rp);
void from_json(const nlohmann::json& j, RingingParams& rp);

}  // namespace dabmod::physics
