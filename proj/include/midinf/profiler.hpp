#pragma once

// Streamability analysis.
//
// Playback of a generation consumes 3 tokens at each note onset; C(t) is the
// cumulative token count needed to play through musical time t. A generator
// running at R tok/s with a head start of b seconds keeps up at time t iff
// R * (t + b) >= C(t). The streamable fraction is the measure of such t over
// [0, horizon] divided by the horizon.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "midinf/decoding.hpp"
#include "midinf/model.hpp"
#include "midinf/streamer.hpp"
#include "midinf/tokenizer.hpp"

namespace midinf {

inline constexpr double kTokensPerNote = 3.0;

struct Throughput {
  std::uint64_t tokens = 0;
  double seconds = 0.0;
  double tok_s = 0.0;
  double notes_s = 0.0;
};

/// tokens / max(seconds, 1 ms).
Throughput measure_throughput(std::uint64_t tokens, double seconds);
Throughput throughput_from_rate(double tok_s);

using Generation = std::vector<NoteEvent>;

/// Last onset plus the longest duration among notes at that onset.
double generation_horizon(std::span<const NoteEvent> notes);

struct DensityBin {
  double bin_start_s = 0.0;
  double mean_tok_s = 0.0;
  double stdev_tok_s = 0.0;
  std::size_t n = 0;
};

struct DensityProfile {
  double bin_s = 1.0;
  double horizon_s = 0.0;
  std::size_t n_generations = 0;
  std::vector<DensityBin> bins;
};

/// Per 1 s bin: mean and population stdev across generations of 3 x (notes with
/// onset in the bin). Generations shorter than the horizon contribute 0 to later
/// bins. The horizon defaults to the longest generation horizon.
DensityProfile estimate_density(std::span<const Generation> generations,
                                std::optional<double> horizon_s = std::nullopt);

struct StreamabilityReport {
  double rate_tok_s = 0.0;
  double buffer_s = 0.0;
  /// Streamable seconds over total seconds, pooled across generations.
  double fraction = 0.0;
  /// Mean of per-generation fractions.
  double per_generation_mean = 0.0;
  std::vector<double> per_generation;
  std::string aggregation = "pooled";
};

/// Streamable seconds of one generation over [0, horizon].
double streamable_seconds(std::span<const NoteEvent> notes, double rate_tok_s, double buffer_s,
                          double horizon_s);

StreamabilityReport streamable_fraction(std::span<const Generation> generations,
                                        double rate_tok_s, double buffer_s);

/// Same analysis against the mean density curve of a profile (C(t) piecewise linear).
StreamabilityReport streamable_fraction(const DensityProfile& profile, double rate_tok_s,
                                        double buffer_s);

struct ProfileReport {
  std::string preset;
  std::size_t n_generations = 0;
  double mean_notes_per_generation = 0.0;
  Throughput measured;
  std::optional<double> rate_override;
  /// The rate used for the streamability columns (override, else measured).
  Throughput rate;
  std::vector<StreamabilityReport> streamable;
  DensityProfile density;
};

void to_json(nlohmann::json& j, const Throughput& t);
void to_json(nlohmann::json& j, const DensityProfile& p);
void to_json(nlohmann::json& j, const StreamabilityReport& r);
void to_json(nlohmann::json& j, const ProfileReport& r);

/// Aggregates already generated note lists.
ProfileReport profile_generations(std::span<const Generation> generations, const Throughput& measured,
                                  std::optional<double> rate_override,
                                  std::span<const double> buffers);

struct ProfileOptions {
  std::string preset = "toy";
  std::size_t n_generations = 500;
  std::optional<double> rate_override;
  std::vector<double> buffers{0.0, 2.0};
  std::size_t jobs = 1;
  StreamConfig stream;
};

/// Generates n_generations first chunks from scratch (seed = params.seed + i),
/// timing each on a monotonic clock, then aggregates. Optionally returns the raw
/// generations through `out_generations`.
ProfileReport profile_run(std::shared_ptr<const Model> model, const VocabSpec& vocab,
                          const GenParams& params, const ProfileOptions& options,
                          std::vector<Generation>* out_generations = nullptr);

/// Columns: bin_start_s,mean_tok_s,stdev_tok_s,n
void write_density_csv(const DensityProfile& profile, std::ostream& out);
DensityProfile read_density_csv(std::istream& in);

/// Mean playback tok/s line with a shaded +-1 stdev band, plus one dashed
/// horizontal line per generation rate.
void render_density_svg(const DensityProfile& profile, std::span<const double> rates_tok_s,
                        std::ostream& out, const std::string& title = "Playback token rate");

/// One line per buffer: "R tok/s (N notes/s) | streamable X% | ..." rounded for display.
std::string format_table_row(const ProfileReport& report);

}  // namespace midinf
