// midinf: command-line front end for generation, streaming and profiling.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "midinf/midi_io.hpp"
#include "midinf/model.hpp"
#include "midinf/profiler.hpp"
#include "midinf/stream_service.hpp"
#include "midinf/streamer.hpp"
#include "midinf/tokenizer.hpp"

namespace {

using namespace midinf;

enum ExitCode : int {
  kOk = 0,
  kBadFlags = 2,
  kIoError = 3,
  kModelError = 4,
  kPortInUse = 5,
};

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted = true; }

constexpr const char* kInstrumentHelp =
    "Instrument ids are General MIDI programs 0-127 plus 128 for the drum kit, e.g.\n"
    "  0 Acoustic Grand Piano   24 Nylon Guitar   32 Acoustic Bass   33 Electric Bass (finger)\n"
    "  40 Violin   42 Cello   48 String Ensemble   56 Trumpet   65 Alto Sax   73 Flute   128 Drums";

struct ModelFlags {
  std::string weights;
  std::string preset = "toy";
  std::uint64_t weight_seed = 0;
};

struct SamplingFlags {
  std::uint64_t seed = 0;
  std::string ensemble;
  double alpha = GenParams{}.bias_alpha;
  double temperature = GenParams{}.temperature;
  double top_p = GenParams{}.top_p;
  double max_advance = GenParams{}.max_advance_s;
};

void add_model_flags(CLI::App& cmd, ModelFlags& f) {
  cmd.add_option("--weights", f.weights, "Weight file (.wtm with .wtm.json manifest); random weights if omitted");
  cmd.add_option("--config-preset", f.preset, "Model preset: toy, small, medium")
      ->check(CLI::IsMember({"toy", "small", "medium"}));
  cmd.add_option("--weight-seed", f.weight_seed, "Seed for random weights when --weights is omitted");
}

void add_sampling_flags(CLI::App& cmd, SamplingFlags& f) {
  cmd.add_option("--seed", f.seed, "Sampling seed");
  cmd.add_option("--ensemble", f.ensemble, "Comma-separated instrument ids (128 = drums)");
  cmd.add_option("--alpha", f.alpha, "Ensemble density bias, logits per second of silence")->check(CLI::NonNegativeNumber);
  cmd.add_option("--temperature", f.temperature, "Sampling temperature (< 1e-6 is greedy)")->check(CLI::PositiveNumber);
  cmd.add_option("--top-p", f.top_p, "Nucleus mass in (0, 1]")->check(CLI::Range(0.0, 1.0));
  cmd.add_option("--max-advance", f.max_advance, "Largest onset step between notes, seconds (0 = unlimited)")
      ->check(CLI::NonNegativeNumber);
}

std::vector<double> parse_number_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw Error(ErrorCode::InvalidParams, "not a number: '" + item + "'");
    out.push_back(v);
  }
  return out;
}

GenParams make_params(const SamplingFlags& f, const VocabSpec& vocab) {
  GenParams p;
  p.seed = f.seed;
  p.bias_alpha = f.alpha;
  p.temperature = f.temperature;
  p.top_p = f.top_p;
  p.max_advance_s = f.max_advance;
  if (!f.ensemble.empty()) {
    std::vector<int> ids;
    for (double v : parse_number_list(f.ensemble)) {
      if (v != static_cast<int>(v)) throw Error(ErrorCode::InvalidParams, "ensemble ids must be integers");
      ids.push_back(static_cast<int>(v));
    }
    p.ensemble = ids;
  }
  p.validate(vocab);
  return p;
}

std::shared_ptr<const Model> make_model(const ModelFlags& f, const VocabSpec& vocab) {
  ModelConfig config = ModelConfig::preset(f.preset, vocab.vocab_size());
  std::shared_ptr<WeightStore> weights;
  if (f.weights.empty()) {
    weights = std::make_shared<WeightStore>(init_random(config, f.weight_seed));
  } else {
    if (auto stored = load_manifest_config(f.weights)) config = *stored;
    weights = std::make_shared<WeightStore>(load_weights(f.weights));
  }
  return std::make_shared<Model>(config, std::move(weights));
}

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::InvalidParams:
    case ErrorCode::InvalidConfig:
      return kBadFlags;
    case ErrorCode::Io:
    case ErrorCode::MalformedHeader:
    case ErrorCode::MalformedTrack:
    case ErrorCode::UnsupportedFormat:
    case ErrorCode::TooManyInstruments:
    case ErrorCode::SinkClosed:
      return kIoError;
    case ErrorCode::PortInUse:
      return kPortInUse;
    default:
      return kModelError;
  }
}

std::vector<NoteEvent> load_prompt(const std::string& path, const VocabSpec& vocab) {
  if (path.empty()) return {};
  MidiReadResult r = read_midi(read_file_bytes(path), vocab);
  if (r.dangling_closed) {
    std::cerr << "warning: " << r.dangling_closed << " unmatched note-on(s) closed at track end\n";
  }
  return r.notes;
}

/// Appends "--key value" for every key of the --config JSON not already given on
/// the command line, so explicit flags win.
std::vector<std::string> merge_config_file(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i + 1 < args.size(); ++i) {
    if (args[i] == "--config") path = args[i + 1];
  }
  for (const auto& a : args) {
    if (a.rfind("--config=", 0) == 0) path = a.substr(9);
  }
  if (path.empty()) return args;

  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidParams, "config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::InvalidParams, "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const std::string flag = "--" + key;
    bool given = false;
    for (const auto& a : args) given = given || a == flag || a.rfind(flag + "=", 0) == 0;
    if (given) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back(flag);
    } else if (value.is_string()) {
      args.push_back(flag);
      args.push_back(value.get<std::string>());
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
      args.push_back(flag);
      args.push_back(joined);
    } else {
      args.push_back(flag);
      args.push_back(value.dump());
    }
  }
  return args;
}

int cmd_generate(const ModelFlags& mf, const SamplingFlags& sf, std::size_t n_notes,
                 const std::string& prompt_path, const std::string& out_path) {
  const VocabSpec vocab;
  const GenParams params = make_params(sf, vocab);
  const auto prompt = load_prompt(prompt_path, vocab);
  auto model = make_model(mf, vocab);
  StreamState stream = start_stream(model, vocab, params, prompt);
  std::vector<NoteEvent> notes;
  while (notes.size() < n_notes) {
    StreamChunk chunk = stream.next_chunk();
    for (const auto& n : chunk.notes) {
      if (notes.size() == n_notes) break;
      notes.push_back(n);
    }
  }
  if (std::filesystem::path(out_path).extension() == ".jsonl") {
    std::ofstream out(out_path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + out_path);
    for (const auto& n : notes) out << nlohmann::json(n).dump() << '\n';
  } else {
    write_file_bytes(out_path, write_midi(notes));
  }
  std::cerr << "wrote " << notes.size() << " notes in " << stream.chunk_index() << " chunk(s) to " << out_path
            << '\n';
  return kOk;
}

struct StreamFlags {
  std::optional<std::uint64_t> notes_limit;
  std::string listen;
  double buffer_s = 2.0;
  bool to_stdout = false;
  bool wait_for_start = false;
  double max_lead = 0.0;
  double throttle = 0.0;
  std::size_t queue = 256;
  std::string prompt;
};

void write_json_lines(BoundedQueue<NoteEvent>& queue) {
  while (auto note = queue.pop()) {
    std::cout << nlohmann::json(*note).dump() << '\n';
  }
  std::cout.flush();
}

int cmd_stream(const ModelFlags& mf, const SamplingFlags& sf, const StreamFlags& f) {
  const VocabSpec vocab;
  const GenParams params = make_params(sf, vocab);
  const auto prompt = load_prompt(f.prompt, vocab);
  auto model = make_model(mf, vocab);
  StreamState stream = start_stream(model, vocab, params, prompt);
  std::signal(SIGINT, on_sigint);
  std::signal(SIGTERM, on_sigint);

  BoundedQueue<NoteEvent> queue(f.queue);
  QueueSink sink(queue);
  const bool json_lines = f.listen.empty() || f.to_stdout;
  std::jthread writer;
  if (json_lines) writer = std::jthread([&queue] { write_json_lines(queue); });

  StreamSummary summary;
  if (f.listen.empty()) {
    StopCondition stop;
    stop.max_notes = f.notes_limit;
    stop.stop_requested = &g_interrupted;
    summary = run_stream(stream, sink, stop);
  } else {
    ServiceConfig config;
    const auto colon = f.listen.rfind(':');
    if (colon == std::string::npos) throw Error(ErrorCode::InvalidParams, "--listen expects host:port");
    config.host = f.listen.substr(0, colon);
    try {
      config.port = static_cast<unsigned short>(std::stoul(f.listen.substr(colon + 1)));
    } catch (const std::exception&) {
      throw Error(ErrorCode::InvalidParams, "--listen port must be a number");
    }
    config.buffer_s = f.buffer_s;
    config.autostart = !f.wait_for_start;
    config.max_lead_s = f.max_lead;
    config.throttle_tok_s = f.throttle;
    config.notes_limit = f.notes_limit;
    StreamService service(std::move(stream), config);
    if (json_lines) service.set_note_observer(&sink);
    service.start();
    std::cerr << "listening on ws://" << config.host << ':' << service.port() << '\n';
    while (!g_interrupted && !service.finished()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    service.stop();
    summary = service.summary();
  }
  queue.close();
  if (writer.joinable()) writer.join();
  std::cerr << nlohmann::json(summary).dump() << '\n';
  return kOk;
}

struct ProfileFlags {
  std::size_t generations = 500;
  std::string buffers = "0,2";
  std::string out = "report.json";
  std::string csv;
  std::string svg;
  std::optional<double> rate_override;
  std::size_t jobs = 1;
  std::string generations_file;
};

std::vector<Generation> load_generations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::vector<Generation> out;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& g : j) out.push_back(g.get<Generation>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidParams, path + ": " + e.what());
  }
  return out;
}

int cmd_profile(const ModelFlags& mf, const SamplingFlags& sf, const ProfileFlags& f) {
  const VocabSpec vocab;
  const auto buffers = parse_number_list(f.buffers);
  ProfileReport report;
  if (!f.generations_file.empty()) {
    const auto gens = load_generations(f.generations_file);
    if (!f.rate_override) throw Error(ErrorCode::InvalidParams, "--generations-file needs --rate-override");
    report = profile_generations(gens, throughput_from_rate(*f.rate_override), f.rate_override, buffers);
    report.preset = "external";
  } else {
    ProfileOptions options;
    options.preset = mf.preset;
    options.n_generations = f.generations;
    options.rate_override = f.rate_override;
    options.buffers = buffers;
    options.jobs = f.jobs;
    report = profile_run(make_model(mf, vocab), vocab, make_params(sf, vocab), options);
  }

  std::ofstream out(f.out);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + f.out);
  out << nlohmann::json(report).dump(2) << '\n';
  if (!f.csv.empty()) {
    std::ofstream csv(f.csv);
    if (!csv) throw Error(ErrorCode::Io, "cannot write " + f.csv);
    write_density_csv(report.density, csv);
  }
  if (!f.svg.empty()) {
    std::ofstream svg(f.svg);
    if (!svg) throw Error(ErrorCode::Io, "cannot write " + f.svg);
    const double rate = report.rate.tok_s;
    render_density_svg(report.density, std::span<const double>(&rate, 1), svg);
  }
  std::cout << "measured " << report.measured.tok_s << " tok/s over " << report.n_generations
            << " generations\n"
            << format_table_row(report) << '\n';
  return kOk;
}

int cmd_plot(const std::string& csv_path, const std::string& out_path, const std::vector<double>& rates,
             const std::string& title) {
  std::ifstream in(csv_path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + csv_path);
  const DensityProfile profile = read_density_csv(in);
  std::ofstream out(out_path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + out_path);
  render_density_svg(profile, rates, out, title);
  for (double r : rates) {
    std::cout << r << " tok/s: streamable " << 100.0 * streamable_fraction(profile, r, 0.0).fraction << "% / "
              << 100.0 * streamable_fraction(profile, r, 2.0).fraction << "% with 2s buffer (mean profile)\n";
  }
  return kOk;
}

int cmd_tokenize(const std::string& path) {
  const VocabSpec vocab;
  const auto notes = read_midi(read_file_bytes(path), vocab).notes;
  EncodeOptions options;
  options.enforce_cap = false;
  const TokenSeq seq = encode_sequence(notes, vocab, options);
  std::cout << nlohmann::json{{"notes", notes.size()}, {"tokens", seq.tokens}}.dump() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming triplet-token music generation", "midinf"};
  app.require_subcommand(1);
  app.footer(kInstrumentHelp);
  std::string config_path;
  app.add_option("--config", config_path, "JSON file whose keys mirror long flags; flags win on conflict");

  ModelFlags mf;
  SamplingFlags sf;

  auto* generate = app.add_subcommand("generate", "Generate a fixed number of notes to a MIDI file");
  std::size_t n_notes = 170;
  std::string prompt_path, out_path = "out.mid";
  add_model_flags(*generate, mf);
  add_sampling_flags(*generate, sf);
  generate->add_option("--notes", n_notes, "Number of notes")->check(CLI::PositiveNumber);
  generate->add_option("--prompt", prompt_path, "MIDI file to continue")->check(CLI::ExistingFile);
  generate->add_option("--out", out_path, "Output file: MIDI, or JSON lines when it ends in .jsonl");

  auto* stream = app.add_subcommand("stream", "Stream notes as JSON lines and/or over WebSocket");
  StreamFlags stream_flags;
  add_model_flags(*stream, mf);
  add_sampling_flags(*stream, sf);
  stream->add_option("--notes-limit", stream_flags.notes_limit, "Stop after this many notes");
  stream->add_option("--listen", stream_flags.listen, "Serve the WebSocket stream on host:port");
  stream->add_option("--buffer-s", stream_flags.buffer_s, "Playback buffer advertised to clients (s)")
      ->check(CLI::NonNegativeNumber);
  stream->add_flag("--stdout", stream_flags.to_stdout, "Also write JSON lines when --listen is set");
  stream->add_flag("--wait-for-start", stream_flags.wait_for_start, "Generate only after a start message");
  stream->add_option("--max-lead", stream_flags.max_lead, "Pause generation this far ahead of playback (s)");
  stream->add_option("--throttle-tok-s", stream_flags.throttle, "Cap the broadcast token rate");
  stream->add_option("--queue", stream_flags.queue, "JSON-lines queue capacity (notes)")->check(CLI::PositiveNumber);
  stream->add_option("--prompt", stream_flags.prompt, "MIDI file to continue")->check(CLI::ExistingFile);

  auto* profile = app.add_subcommand("profile", "Throughput, playback density and streamability report");
  ProfileFlags profile_flags;
  add_model_flags(*profile, mf);
  add_sampling_flags(*profile, sf);
  profile->add_option("--generations", profile_flags.generations, "Number of generations")
      ->check(CLI::PositiveNumber);
  profile->add_option("--buffers", profile_flags.buffers, "Comma-separated playback buffers (s)");
  profile->add_option("--out", profile_flags.out, "Report JSON");
  profile->add_option("--csv", profile_flags.csv, "Density CSV");
  profile->add_option("--svg", profile_flags.svg, "Density plot (SVG)");
  profile->add_option("--rate-override", profile_flags.rate_override,
                      "Use this generation rate (tok/s) for the streamable columns")
      ->check(CLI::PositiveNumber);
  profile->add_option("--jobs", profile_flags.jobs, "Parallel generation workers")->check(CLI::PositiveNumber);
  profile->add_option("--generations-file", profile_flags.generations_file,
                      "JSON array of note lists to analyse instead of generating");

  auto* plot = app.add_subcommand("plot", "Render a density CSV as an SVG plot");
  std::string plot_csv, plot_out = "density.svg", plot_title = "Playback token rate";
  std::vector<double> plot_rates;
  plot->add_option("--csv", plot_csv, "Density CSV")->required()->check(CLI::ExistingFile);
  plot->add_option("--out", plot_out, "Output SVG");
  plot->add_option("--rate", plot_rates, "Generation rate line (tok/s); repeatable");
  plot->add_option("--title", plot_title, "Plot title");

  auto* init = app.add_subcommand("init-weights", "Write random weights for a preset");
  std::string init_out = "model.wtm";
  add_model_flags(*init, mf);
  init->add_option("--out", init_out, "Output weight file");

  auto* vocab_cmd = app.add_subcommand("vocab", "Print the vocabulary layout as JSON");

  auto* tokenize = app.add_subcommand("tokenize", "Print the token sequence of a MIDI file");
  std::string tokenize_in;
  tokenize->add_option("--in", tokenize_in, "MIDI file")->required()->check(CLI::ExistingFile);

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    std::vector<std::string> forward(args.rbegin(), args.rend());
    forward = merge_config_file(std::move(forward));
    args.assign(forward.rbegin(), forward.rend());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadFlags;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }

  try {
    if (*generate) return cmd_generate(mf, sf, n_notes, prompt_path, out_path);
    if (*stream) return cmd_stream(mf, sf, stream_flags);
    if (*profile) return cmd_profile(mf, sf, profile_flags);
    if (*plot) return cmd_plot(plot_csv, plot_out, plot_rates, plot_title);
    if (*init) {
      const VocabSpec vocab;
      const ModelConfig config = ModelConfig::preset(mf.preset, vocab.vocab_size());
      init_random(config, mf.weight_seed).save(init_out, &config);
      std::cerr << "wrote " << init_out << " and " << init_out << ".json\n";
      return kOk;
    }
    if (*vocab_cmd) {
      const VocabSpec vocab;
      nlohmann::json j = vocab;
      std::cout << j.dump(2) << '\n';
      return kOk;
    }
    if (*tokenize) return cmd_tokenize(tokenize_in);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIoError;
  }
  return kOk;
}
