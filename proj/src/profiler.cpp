#include "midinf/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <thread>

namespace midinf {

namespace {

void require_rate(double rate_tok_s, double buffer_s) {
  if (!(rate_tok_s > 0.0)) throw Error(ErrorCode::InvalidParams, "rate must be > 0 tok/s");
  if (!(buffer_s >= 0.0)) throw Error(ErrorCode::InvalidParams, "buffer must be >= 0 s");
}

// Measure of {t in [a, e] : rate * (t + buffer) >= c0 + slope_c * (t - a)}.
double linear_streamable(double a, double e, double c0, double slope_c, double rate, double buffer) {
  if (e <= a) return 0.0;
  const double f_a = rate * (a + buffer) - c0;
  const double slope = rate - slope_c;
  if (slope == 0.0) return f_a >= 0.0 ? e - a : 0.0;
  const double root = std::clamp(a - f_a / slope, a, e);
  return slope > 0.0 ? e - root : root - a;
}

std::string fmt(double v, int precision) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

}  // namespace

Throughput measure_throughput(std::uint64_t tokens, double seconds) {
  Throughput t;
  t.tokens = tokens;
  t.seconds = seconds;
  t.tok_s = static_cast<double>(tokens) / std::max(seconds, 1e-3);
  t.notes_s = t.tok_s / kTokensPerNote;
  return t;
}

Throughput throughput_from_rate(double tok_s) {
  Throughput t;
  t.tok_s = tok_s;
  t.notes_s = tok_s / kTokensPerNote;
  return t;
}

double generation_horizon(std::span<const NoteEvent> notes) {
  double last_onset = 0.0;
  double horizon = 0.0;
  for (const auto& n : notes) {
    if (n.onset_s > last_onset) {
      last_onset = n.onset_s;
      horizon = n.onset_s + n.duration_s;
    } else if (n.onset_s == last_onset) {
      horizon = std::max(horizon, n.onset_s + n.duration_s);
    }
  }
  return horizon;
}

DensityProfile estimate_density(std::span<const Generation> generations,
                                std::optional<double> horizon_s) {
  if (generations.empty()) throw Error(ErrorCode::EmptyInput, "no generations");
  DensityProfile profile;
  profile.n_generations = generations.size();
  if (horizon_s) {
    profile.horizon_s = *horizon_s;
  } else {
    for (const auto& g : generations) profile.horizon_s = std::max(profile.horizon_s, generation_horizon(g));
  }
  const auto n_bins = static_cast<std::size_t>(std::ceil(profile.horizon_s / profile.bin_s));

  std::vector<double> sum(n_bins, 0.0);
  std::vector<double> sum_sq(n_bins, 0.0);
  std::vector<double> counts(n_bins);
  for (const auto& g : generations) {
    if (g.empty()) throw Error(ErrorCode::EmptyInput, "empty generation");
    std::fill(counts.begin(), counts.end(), 0.0);
    for (const auto& n : g) {
      const auto bin = static_cast<std::size_t>(std::floor(n.onset_s / profile.bin_s));
      if (n.onset_s >= 0.0 && bin < n_bins) counts[bin] += kTokensPerNote;
    }
    for (std::size_t b = 0; b < n_bins; ++b) {
      const double rate = counts[b] / profile.bin_s;
      sum[b] += rate;
      sum_sq[b] += rate * rate;
    }
  }
  const auto n = static_cast<double>(generations.size());
  for (std::size_t b = 0; b < n_bins; ++b) {
    const double mean = sum[b] / n;
    const double var = std::max(0.0, sum_sq[b] / n - mean * mean);
    profile.bins.push_back({static_cast<double>(b) * profile.bin_s, mean, std::sqrt(var),
                            generations.size()});
  }
  return profile;
}

double streamable_seconds(std::span<const NoteEvent> notes, double rate_tok_s, double buffer_s,
                          double horizon_s) {
  require_rate(rate_tok_s, buffer_s);
  std::vector<double> onsets;
  onsets.reserve(notes.size());
  for (const auto& n : notes) onsets.push_back(n.onset_s);
  std::sort(onsets.begin(), onsets.end());

  // Between consecutive distinct onsets C(t) is constant, so the condition
  // R (t + b) >= C reduces to t >= C / R - b.
  double streamable = 0.0;
  double segment_start = 0.0;
  double required = 0.0;
  std::size_t i = 0;
  while (segment_start < horizon_s) {
    while (i < onsets.size() && onsets[i] <= segment_start) {
      required += kTokensPerNote;
      ++i;
    }
    const double segment_end = i < onsets.size() ? std::min(onsets[i], horizon_s) : horizon_s;
    const double from = std::max(segment_start, required / rate_tok_s - buffer_s);
    streamable += std::max(0.0, segment_end - from);
    segment_start = segment_end;
  }
  return streamable;
}

StreamabilityReport streamable_fraction(std::span<const Generation> generations,
                                        double rate_tok_s, double buffer_s) {
  require_rate(rate_tok_s, buffer_s);
  if (generations.empty()) throw Error(ErrorCode::EmptyInput, "no generations");
  StreamabilityReport report;
  report.rate_tok_s = rate_tok_s;
  report.buffer_s = buffer_s;
  double total_streamable = 0.0;
  double total_time = 0.0;
  for (const auto& g : generations) {
    const double horizon = generation_horizon(g);
    const double s = streamable_seconds(g, rate_tok_s, buffer_s, horizon);
    total_streamable += s;
    total_time += horizon;
    report.per_generation.push_back(horizon > 0.0 ? s / horizon : 1.0);
  }
  report.fraction = total_time > 0.0 ? total_streamable / total_time : 1.0;
  double sum = 0.0;
  for (double f : report.per_generation) sum += f;
  report.per_generation_mean = sum / static_cast<double>(report.per_generation.size());
  return report;
}

StreamabilityReport streamable_fraction(const DensityProfile& profile, double rate_tok_s,
                                        double buffer_s) {
  require_rate(rate_tok_s, buffer_s);
  if (profile.bins.empty() || !(profile.horizon_s > 0.0)) {
    throw Error(ErrorCode::EmptyInput, "empty density profile");
  }
  StreamabilityReport report;
  report.rate_tok_s = rate_tok_s;
  report.buffer_s = buffer_s;
  report.aggregation = "mean_profile";
  double streamable = 0.0;
  double required = 0.0;
  for (const auto& bin : profile.bins) {
    const double a = bin.bin_start_s;
    const double e = std::min(a + profile.bin_s, profile.horizon_s);
    streamable += linear_streamable(a, e, required, bin.mean_tok_s, rate_tok_s, buffer_s);
    required += bin.mean_tok_s * profile.bin_s;
  }
  report.fraction = streamable / profile.horizon_s;
  report.per_generation_mean = report.fraction;
  return report;
}

void to_json(nlohmann::json& j, const Throughput& t) {
  j = nlohmann::json{{"tokens", t.tokens}, {"seconds", t.seconds}, {"tok_s", t.tok_s}, {"notes_s", t.notes_s}};
}

void to_json(nlohmann::json& j, const DensityProfile& p) {
  nlohmann::json bins = nlohmann::json::array();
  for (const auto& b : p.bins) {
    bins.push_back({{"bin_start_s", b.bin_start_s},
                    {"mean_tok_s", b.mean_tok_s},
                    {"stdev_tok_s", b.stdev_tok_s},
                    {"n", b.n}});
  }
  j = nlohmann::json{{"bin_s", p.bin_s},
                     {"horizon_s", p.horizon_s},
                     {"n_generations", p.n_generations},
                     {"bins", std::move(bins)}};
}

void to_json(nlohmann::json& j, const StreamabilityReport& r) {
  j = nlohmann::json{{"rate_tok_s", r.rate_tok_s},
                     {"buffer_s", r.buffer_s},
                     {"fraction", r.fraction},
                     {"per_generation_mean", r.per_generation_mean},
                     {"aggregation", r.aggregation}};
}

void to_json(nlohmann::json& j, const ProfileReport& r) {
  j = nlohmann::json{{"v", 1},
                     {"preset", r.preset},
                     {"n_generations", r.n_generations},
                     {"mean_notes_per_generation", r.mean_notes_per_generation},
                     {"measured", r.measured},
                     {"rate_override", nullptr},
                     {"rate", r.rate},
                     {"streamable", r.streamable},
                     {"density", r.density}};
  if (r.rate_override) j["rate_override"] = *r.rate_override;
}

ProfileReport profile_generations(std::span<const Generation> generations, const Throughput& measured,
                                  std::optional<double> rate_override,
                                  std::span<const double> buffers) {
  if (generations.empty()) throw Error(ErrorCode::EmptyInput, "no generations");
  ProfileReport report;
  report.n_generations = generations.size();
  std::size_t notes = 0;
  for (const auto& g : generations) notes += g.size();
  report.mean_notes_per_generation =
      static_cast<double>(notes) / static_cast<double>(generations.size());
  report.measured = measured;
  report.rate_override = rate_override;
  report.rate = rate_override ? throughput_from_rate(*rate_override) : measured;
  report.density = estimate_density(generations);
  for (double b : buffers) report.streamable.push_back(streamable_fraction(generations, report.rate.tok_s, b));
  return report;
}

ProfileReport profile_run(std::shared_ptr<const Model> model, const VocabSpec& vocab,
                          const GenParams& params, const ProfileOptions& options,
                          std::vector<Generation>* out_generations) {
  if (options.n_generations == 0) throw Error(ErrorCode::EmptyInput, "n_generations must be >= 1");
  std::vector<Generation> generations(options.n_generations);
  std::vector<double> seconds(options.n_generations, 0.0);

  auto work = [&](std::size_t worker, std::size_t n_workers) {
    using Clock = std::chrono::steady_clock;
    for (std::size_t i = worker; i < options.n_generations; i += n_workers) {
      GenParams p = params;
      p.seed = params.seed + i;
      StreamState stream(model, vocab, p, {}, options.stream);
      const auto t0 = Clock::now();
      generations[i] = stream.next_chunk().notes;
      seconds[i] = std::chrono::duration<double>(Clock::now() - t0).count();
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, options.n_generations);
  if (jobs == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> workers;
    for (std::size_t w = 0; w < jobs; ++w) workers.emplace_back(work, w, jobs);
  }

  std::uint64_t tokens = 0;
  double total_seconds = 0.0;
  for (std::size_t i = 0; i < generations.size(); ++i) {
    tokens += static_cast<std::uint64_t>(kTokensPerNote) * generations[i].size();
    total_seconds += seconds[i];
  }
  ProfileReport report = profile_generations(generations, measure_throughput(tokens, total_seconds),
                                             options.rate_override, options.buffers);
  report.preset = options.preset;
  if (out_generations) *out_generations = std::move(generations);
  return report;
}

void write_density_csv(const DensityProfile& profile, std::ostream& out) {
  out << "bin_start_s,mean_tok_s,stdev_tok_s,n\n";
  out << std::setprecision(10);
  for (const auto& b : profile.bins) {
    out << b.bin_start_s << ',' << b.mean_tok_s << ',' << b.stdev_tok_s << ',' << b.n << '\n';
  }
}

DensityProfile read_density_csv(std::istream& in) {
  DensityProfile profile;
  std::string line;
  if (!std::getline(in, line) || line.rfind("bin_start_s,mean_tok_s,stdev_tok_s,n", 0) != 0) {
    throw Error(ErrorCode::CorruptFile, "density CSV header missing");
  }
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::istringstream row(line);
    DensityBin bin;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(row >> bin.bin_start_s >> c1 >> bin.mean_tok_s >> c2 >> bin.stdev_tok_s >> c3 >> bin.n) ||
        c1 != ',' || c2 != ',' || c3 != ',') {
      throw Error(ErrorCode::CorruptFile, "bad density CSV row: " + line);
    }
    profile.bins.push_back(bin);
  }
  if (profile.bins.size() >= 2) profile.bin_s = profile.bins[1].bin_start_s - profile.bins[0].bin_start_s;
  if (!profile.bins.empty()) {
    profile.horizon_s = profile.bins.back().bin_start_s + profile.bin_s;
    profile.n_generations = profile.bins.front().n;
  }
  return profile;
}

void render_density_svg(const DensityProfile& profile, std::span<const double> rates_tok_s,
                        std::ostream& out, const std::string& title) {
  constexpr double kWidth = 800, kHeight = 420;
  constexpr double kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;

  double y_max = 1.0;
  for (const auto& b : profile.bins) y_max = std::max(y_max, b.mean_tok_s + b.stdev_tok_s);
  for (double r : rates_tok_s) y_max = std::max(y_max, r);
  y_max *= 1.1;
  const double x_max = std::max(profile.horizon_s, profile.bin_s);

  auto x_of = [&](double t) { return kLeft + plot_w * t / x_max; };
  auto y_of = [&](double v) { return kTop + plot_h * (1.0 - std::max(0.0, v) / y_max); };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title
      << "</text>\n";

  // Bin centres.
  std::ostringstream upper, lower, mean;
  for (const auto& b : profile.bins) {
    const double t = b.bin_start_s + profile.bin_s / 2;
    upper << fmt(x_of(t), 2) << ',' << fmt(y_of(b.mean_tok_s + b.stdev_tok_s), 2) << ' ';
    mean << fmt(x_of(t), 2) << ',' << fmt(y_of(b.mean_tok_s), 2) << ' ';
  }
  for (auto it = profile.bins.rbegin(); it != profile.bins.rend(); ++it) {
    const double t = it->bin_start_s + profile.bin_s / 2;
    lower << fmt(x_of(t), 2) << ',' << fmt(y_of(it->mean_tok_s - it->stdev_tok_s), 2) << ' ';
  }
  out << "<polygon class=\"stdev-band\" points=\"" << upper.str() << lower.str()
      << "\" fill=\"#4a7bd0\" fill-opacity=\"0.25\" stroke=\"none\"/>\n";
  out << "<polyline class=\"mean\" points=\"" << mean.str()
      << "\" fill=\"none\" stroke=\"#1f4fa0\" stroke-width=\"2\"/>\n";

  const char* colors[] = {"#d04a4a", "#3a9a3a", "#a04ad0", "#d0904a"};
  for (std::size_t i = 0; i < rates_tok_s.size(); ++i) {
    const double y = y_of(rates_tok_s[i]);
    out << "<line class=\"rate\" x1=\"" << kLeft << "\" x2=\"" << kLeft + plot_w << "\" y1=\"" << fmt(y, 2)
        << "\" y2=\"" << fmt(y, 2) << "\" stroke=\"" << colors[i % 4]
        << "\" stroke-dasharray=\"6,4\" stroke-width=\"1.5\"/>\n";
    out << "<text x=\"" << kLeft + plot_w - 4 << "\" y=\"" << fmt(y - 4, 2) << "\" text-anchor=\"end\" fill=\""
        << colors[i % 4] << "\">" << fmt(rates_tok_s[i], 1) << " tok/s</text>\n";
  }

  // Axes and ticks.
  out << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + plot_h << "\" x2=\"" << kLeft + plot_w << "\" y2=\""
      << kTop + plot_h << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + plot_h
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = y_max * i / 5;
    out << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt(y_of(v) + 4, 2) << "\" text-anchor=\"end\">"
        << fmt(v, 0) << "</text>\n";
    const double t = x_max * i / 5;
    out << "<text x=\"" << fmt(x_of(t), 2) << "\" y=\"" << kTop + plot_h + 18
        << "\" text-anchor=\"middle\">" << fmt(t, 0) << "</text>\n";
  }
  out << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kHeight - 10
      << "\" text-anchor=\"middle\">musical time (s)</text>\n";
  out << "<text transform=\"translate(18," << kTop + plot_h / 2
      << ") rotate(-90)\" text-anchor=\"middle\">tokens / s</text>\n";
  out << "</svg>\n";
}

std::string format_table_row(const ProfileReport& report) {
  std::ostringstream s;
  s << fmt(report.rate.tok_s, 1) << " tok/s (" << fmt(report.rate.notes_s, 1) << " notes/s)";
  for (const auto& r : report.streamable) {
    s << " | streamable b=" << fmt(r.buffer_s, 0) << "s: " << fmt(100.0 * r.fraction, 1) << "%";
  }
  return s.str();
}

}  // namespace midinf
