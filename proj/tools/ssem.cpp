// ssem: command-line front end for the speech-enhancement engine and the
// compression toolkit.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ssem/ssem.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kDataMismatch = 2, kInfeasible = 3, kCorruptModel = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int parse_target_percent(double target) {
  const double pct = target * 100.0;
  const long r = std::lround(pct);
  if (std::fabs(pct - static_cast<double>(r)) > 1e-6 || r < 0 || r >= 100) {
    throw UsageError("--target must be a whole percentage in [0, 0.99], got " + std::to_string(target));
  }
  return static_cast<int>(r);
}

ssem::SparsityStructure parse_structure(const std::string& name, int block_w) {
  const auto kind = ssem::parse_structure_kind(name);
  if (kind == ssem::StructureKind::Block) return ssem::SparsityStructure::block(block_w);
  return kind == ssem::StructureKind::Unit ? ssem::SparsityStructure::unit() : ssem::SparsityStructure::weight();
}

ssem::SparsityPlan parse_plan(const std::string& text, const ssem::SeModel& model, ssem::SparsityStructure st) {
  ssem::SparsityPlan plan;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    double v = 0;
    try {
      v = std::stod(cell);
    } catch (const std::exception&) {
      throw UsageError("--plan entries must be numbers: '" + cell + "'");
    }
    plan.percent.push_back(parse_target_percent(v));
  }
  if (plan.percent.size() != ssem::kLayerCount) throw UsageError("--plan needs exactly 4 comma-separated values");
  const auto shapes = ssem::layer_shapes(model);
  plan.overall = ssem::plan_accounting(shapes, st, plan.percent).fraction();
  return plan;
}

ssem::HwProfile load_hw_profile(const std::string& path) {
  ssem::HwProfile hw;
  if (path.empty()) return hw;
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open hardware profile " + path);
  const json j = json::parse(f);
  hw.macs_per_cycle = j.value("macs_per_cycle", hw.macs_per_cycle);
  hw.clock_hz = j.value("clock_hz", hw.clock_hz);
  hw.sram_bytes = j.value("sram_bytes", hw.sram_bytes);
  hw.validate();
  return hw;
}

ssem::SpeedupModel load_speedup(const std::string& path) {
  auto m = ssem::SpeedupModel::defaults();
  if (path.empty()) return m;
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open speedup anchor file " + path);
  m.load_overrides(f);
  return m;
}

unsigned thread_count() {
  if (const char* env = std::getenv("SSEM_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

json footprint_json(const ssem::Footprint& fp) {
  return {{"weight_bytes", fp.weight_bytes},
          {"index_bytes", fp.index_bytes},
          {"working_bytes", fp.working_bytes},
          {"total_bytes", fp.total()},
          {"without_index_bytes", fp.without_index()}};
}

json constraints_json(const ssem::ConstraintReport& r) {
  return {{"causal", r.causal},
          {"quantized", r.quantized},
          {"ops_per_frame", r.ops_per_frame},
          {"compute_latency_s", r.compute_latency_s},
          {"deadline_s", r.deadline_s},
          {"compute_ok", r.compute_ok},
          {"footprint_bytes", r.footprint_bytes},
          {"sram_bytes", r.sram_bytes},
          {"memory_ok", r.memory_ok},
          {"audio_latency_ms", r.audio_latency_ms},
          {"audio_latency_budget_ms", ssem::kAudioLatencyBudgetMs},
          {"audio_latency_ok", r.audio_latency_ok},
          {"pass", r.pass()}};
}

json sparsity_json(const ssem::SeModel& m, ssem::StructureKind kind) {
  const auto s = ssem::measure_sparsity(m, kind);
  json layers = json::object();
  for (std::size_t l = 0; l < ssem::kLayerCount; ++l) layers[std::string(ssem::kLayerNames[l])] = s.per_layer[l];
  return {{"overall", s.overall}, {"per_layer", layers}};
}

/// Structure the model was pruned with, inferred from its matrix encodings.
ssem::StructureKind dominant_structure(const ssem::SeModel& m) {
  for (std::size_t l = 0; l < ssem::kLayerCount; ++l) {
    for (const ssem::Matrix* mat : ssem::detail::layer_matrices(m, l)) {
      if (const auto* s = std::get_if<ssem::SparseMatrix>(mat)) return s->structure().kind;
    }
  }
  return ssem::StructureKind::Weight;
}

json model_report(const ssem::SeModel& m, const ssem::HwProfile& hw, const ssem::SpeedupModel& speedup) {
  const auto kind = dominant_structure(m);
  const auto sp = ssem::measure_sparsity(m, kind);
  return {{"parameters", ssem::parameter_count(m)},
          {"structure", std::string(ssem::to_string(kind))},
          {"sparsity", sparsity_json(m, kind)},
          {"footprint", footprint_json(ssem::estimate_footprint(m))},
          {"footprint_fp32", footprint_json(ssem::estimate_footprint(m, ssem::Precision::Fp32))},
          {"speedup", speedup.estimate(kind, sp.overall)},
          {"constraints", constraints_json(ssem::validate_constraints(m, hw))},
          {"weight_digest", ssem::weight_digest(m)}};
}

void write_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

std::vector<ssem::Utterance> load_eval_dir(const std::string& dir, std::uint32_t sample_rate) {
  const fs::path noisy = fs::path(dir) / "noisy";
  const fs::path clean = fs::path(dir) / "clean";
  if (!fs::is_directory(noisy) || !fs::is_directory(clean)) {
    throw UsageError("evaluation directory needs noisy/ and clean/ subdirectories: " + dir);
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(noisy)) {
    if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ssem::Utterance> out;
  for (const auto& p : files) {
    const fs::path c = clean / p.filename();
    if (!fs::exists(c)) throw DataMismatch("missing clean reference for " + p.filename().string());
    auto n = ssem::read_wav(p);
    auto r = ssem::read_wav(c);
    if (n.sample_rate != sample_rate) throw ssem::SampleRateMismatch(sample_rate, n.sample_rate);
    if (n.samples.size() != r.samples.size()) throw DataMismatch("noisy/clean length differ for " + p.filename().string());
    out.push_back({p.stem().string(), std::move(n.samples), std::move(r.samples)});
  }
  if (out.empty()) throw UsageError("no .wav files under " + noisy.string());
  return out;
}

json evaluation_json(const ssem::PlanEvaluation& e) {
  json j = {{"plan", e.plan.id()},
            {"percent", e.plan.percent},
            {"planned_sparsity", e.plan.overall},
            {"measured_sparsity", e.measured_sparsity},
            {"si_sdr", e.metrics.si_sdr},
            {"q", e.q},
            {"footprint", footprint_json(e.footprint)},
            {"speedup", e.speedup}};
  if (e.metrics.external) {
    j["stoi"] = e.metrics.stoi;
    j["pesq"] = e.metrics.pesq;
  }
  return j;
}

std::vector<std::uint8_t> sparsity_map(const ssem::SeModel& m, const std::string& layer, std::size_t& width,
                                       std::size_t& height) {
  std::size_t index = ssem::kLayerCount;
  for (std::size_t i = 0; i < ssem::kLayerCount; ++i) {
    if (ssem::kLayerNames[i] == layer) index = i;
  }
  if (index == ssem::kLayerCount) throw UsageError("unknown layer '" + layer + "' (lstm1, lstm2, dense1, dense2)");
  const auto mats = ssem::detail::layer_matrices(m, index);
  std::vector<ssem::PruneMask> masks;
  for (const auto* mat : mats) masks.push_back(ssem::stored_mask(*mat));
  if (masks.size() == 1) {
    width = masks[0].cols;
    height = masks[0].rows;
  } else {
    // Four gate row-blocks, each [W_x | W_h].
    width = masks[0].cols + masks[1].cols;
    height = 4 * masks[0].rows;
  }
  std::vector<std::uint8_t> px(width * height, 0);
  for (std::size_t k = 0; k < masks.size(); ++k) {
    const std::size_t r0 = masks.size() == 1 ? 0 : (k / 2) * masks[0].rows;
    const std::size_t c0 = k % 2 == 0 ? 0 : masks[0].cols;
    for (std::size_t r = 0; r < masks[k].rows; ++r) {
      for (std::size_t c = 0; c < masks[k].cols; ++c) {
        px[(r0 + r) * width + c0 + c] = masks[k].kept(r, c) ? 255 : 0;
      }
    }
  }
  return px;
}

std::string format_golden(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming quantized LSTM speech enhancement and model compression"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "ssem 1.0");

  std::string model_path, in_path, out_path, report_path, hw_path, speedup_path, metrics_path, eval_dir, plan_text,
      layer, structure_name = "weight", dims_name = "toy", sidecar_path, noise_path;
  double target = -1.0, snr_db = 0.0, scale = 1.0;
  int block_w = 8;
  std::uint64_t seed = 1;

  auto* enhance = app.add_subcommand("enhance", "Denoise a mono 16-bit WAV file");
  enhance->add_option("-m,--model", model_path, "Model container")->required()->check(CLI::ExistingFile);
  enhance->add_option("-i,--input", in_path, "Noisy input WAV")->required()->check(CLI::ExistingFile);
  enhance->add_option("-o,--output", out_path, "Enhanced output WAV")->required();

  auto add_structure = [&](CLI::App* c) {
    c->add_option("-s,--structure", structure_name, "Sparsity structure")
        ->check(CLI::IsMember({"weight", "block", "unit"}))
        ->capture_default_str();
    c->add_option("--block-width", block_w, "Block width for block structure")
        ->check(CLI::Range(1, 255))
        ->capture_default_str();
  };

  auto* prune = app.add_subcommand("prune", "Magnitude-prune a model to a target sparsity or explicit plan");
  prune->add_option("-m,--model", model_path, "Dense model container")->required()->check(CLI::ExistingFile);
  prune->add_option("-o,--output", out_path, "Pruned model container")->required();
  add_structure(prune);
  auto* prune_target = prune->add_option("-t,--target", target, "Overall target sparsity, e.g. 0.7");
  auto* prune_plan = prune->add_option("--plan", plan_text, "Per-layer sparsities, e.g. 0.5,0.5,0.4,0");
  prune_target->excludes(prune_plan);
  prune->add_option("--report", report_path, "Write a JSON report here");
  prune->add_option("--hw", hw_path, "Hardware profile JSON")->check(CLI::ExistingFile);

  auto* search = app.add_subcommand("search", "Evaluate every per-layer plan meeting a target and pick the best");
  search->add_option("-m,--model", model_path, "Dense model container")->required()->check(CLI::ExistingFile);
  search->add_option("-t,--target", target, "Overall target sparsity, e.g. 0.5")->required();
  search->add_option("-e,--eval-dir", eval_dir, "Directory with noisy/ and clean/ WAV pairs")
      ->required()
      ->check(CLI::ExistingDirectory);
  search->add_option("--metrics", metrics_path, "CSV of externally computed STOI/PESQ")->check(CLI::ExistingFile);
  search->add_option("-o,--output", out_path, "Write the winning model here");
  search->add_option("--report", report_path, "Write the JSON search report here (default stdout)");
  search->add_option("--hw", hw_path, "Hardware profile JSON")->check(CLI::ExistingFile);
  search->add_option("--speedup", speedup_path, "Speedup anchor overrides")->check(CLI::ExistingFile);
  add_structure(search);

  auto* report = app.add_subcommand("report", "Footprint, speedup and deployability report as JSON");
  report->add_option("-m,--model", model_path, "Model container")->required()->check(CLI::ExistingFile);
  report->add_option("--hw", hw_path, "Hardware profile JSON")->check(CLI::ExistingFile);
  report->add_option("--speedup", speedup_path, "Speedup anchor overrides")->check(CLI::ExistingFile);
  report->add_option("-o,--output", report_path, "Output path (default stdout)");

  auto* smap = app.add_subcommand("sparsity-map", "Render a layer's kept/pruned weights as a PGM image");
  smap->add_option("-m,--model", model_path, "Model container")->required()->check(CLI::ExistingFile);
  smap->add_option("-l,--layer", layer, "lstm1, lstm2, dense1 or dense2")->required();
  smap->add_option("-o,--output", out_path, "Output .pgm")->required();

  auto* hash = app.add_subcommand("hash", "Print the weight digest; optionally compare with a sidecar");
  hash->add_option("-m,--model", model_path, "Model container")->required()->check(CLI::ExistingFile);
  hash->add_option("--check", sidecar_path, "Sidecar file whose first token is the expected digest")
      ->check(CLI::ExistingFile);
  hash->add_option("-o,--output", out_path, "Write a sidecar file");

  auto* golden = app.add_subcommand("golden", "Write quantization golden vectors (bits,input,code) as CSV");
  golden->add_option("-o,--output", out_path, "Output CSV")->required();

  auto* toy = app.add_subcommand("toy", "Write a reproducible random model");
  toy->add_option("--seed", seed, "Random seed")->capture_default_str();
  toy->add_option("--dims", dims_name, "toy or full")->check(CLI::IsMember({"toy", "full"}))->capture_default_str();
  toy->add_option("--scale", scale, "Pre-activation scale")->capture_default_str();
  toy->add_option("-o,--output", out_path, "Output container")->required();

  auto* mix = app.add_subcommand("mix", "Mix speech and noise at a loudness-based SNR");
  mix->add_option("--speech", in_path, "Speech WAV")->required()->check(CLI::ExistingFile);
  mix->add_option("--noise", noise_path, "Noise WAV")->required()->check(CLI::ExistingFile);
  mix->add_option("--snr", snr_db, "SNR in dB (LUFS difference)")->required();
  mix->add_option("-o,--output", out_path, "Mixture WAV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*enhance) {
      const auto model = ssem::load_file(model_path);
      const auto audio = ssem::read_wav(in_path);
      auto out = ssem::enhance(model, audio.samples, audio.sample_rate);
      ssem::write_wav(out_path, {audio.sample_rate, std::move(out)});
    } else if (*prune) {
      if (target < 0 && plan_text.empty()) throw UsageError("prune needs --target or --plan");
      const auto model = ssem::load_file(model_path);
      const auto st = parse_structure(structure_name, block_w);
      ssem::SparsityPlan plan;
      if (!plan_text.empty()) {
        plan = parse_plan(plan_text, model, st);
      } else {
        const int pct = parse_target_percent(target);
        const auto plans = ssem::enumerate_plans(ssem::layer_shapes(model), st, pct);
        plan = ssem::most_uniform_plan(plans, pct, st);
      }
      const auto pruned = ssem::prune_model(model, plan, st);
      ssem::save_file(pruned, out_path);
      if (!report_path.empty()) {
        json j = model_report(pruned, load_hw_profile(hw_path), ssem::SpeedupModel::defaults());
        j["plan"] = plan.id();
        j["planned_sparsity"] = plan.overall;
        write_json(j, report_path);
      }
    } else if (*search) {
      const auto model = ssem::load_file(model_path);
      const auto st = parse_structure(structure_name, block_w);
      const int pct = parse_target_percent(target);
      auto utterances = load_eval_dir(eval_dir, model.dsp.sample_rate);
      ssem::MetricTable table;
      if (!metrics_path.empty()) {
        std::ifstream f(metrics_path);
        table = ssem::MetricTable::parse_csv(f);
      }
      const auto speedup = load_speedup(speedup_path);
      const auto result = ssem::search(model, pct, st, ssem::make_audio_evaluator(std::move(utterances), table),
                                       thread_count(), speedup);
      const auto winner = ssem::prune_model(model, result.best().plan, st);
      json j = {{"structure", std::string(ssem::to_string(st.kind))},
                {"target", pct / 100.0},
                {"q_basis", result.q_si_sdr_only ? "0.6*si_sdr (STOI/PESQ unavailable)" : "0.1*stoi+0.2*pesq+0.6*si_sdr"},
                {"plans", json::array()},
                {"winner", evaluation_json(result.best())},
                {"constraints", constraints_json(ssem::validate_constraints(winner, load_hw_profile(hw_path)))}};
      for (const auto& e : result.evaluations) j["plans"].push_back(evaluation_json(e));
      write_json(j, report_path);
      if (!out_path.empty()) ssem::save_file(winner, out_path);
    } else if (*report) {
      const auto model = ssem::load_file(model_path);
      write_json(model_report(model, load_hw_profile(hw_path), load_speedup(speedup_path)), report_path);
    } else if (*smap) {
      const auto model = ssem::load_file(model_path);
      std::size_t w = 0, h = 0;
      const auto px = sparsity_map(model, layer, w, h);
      std::ofstream f(out_path, std::ios::binary);
      if (!f) throw std::runtime_error("cannot write " + out_path);
      f << "P5\n" << w << " " << h << "\n255\n";
      f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    } else if (*hash) {
      const auto digest = ssem::weight_digest(ssem::load_file(model_path));
      std::cout << digest << "\n";
      if (!out_path.empty()) {
        std::ofstream f(out_path);
        f << digest << "  " << fs::path(model_path).filename().string() << "\n";
      }
      if (!sidecar_path.empty()) {
        std::ifstream f(sidecar_path);
        std::string expected;
        f >> expected;
        if (expected != digest) throw DataMismatch("weight digest differs from sidecar (" + expected + ")");
      }
    } else if (*golden) {
      std::ofstream f(out_path);
      if (!f) throw std::runtime_error("cannot write " + out_path);
      f << "bits,input,code\n";
      for (const auto fmt : {ssem::kQ8, ssem::kQ16}) {
        for (std::int32_t c = fmt.min_code(); c <= fmt.max_code(); ++c) {
          const double x = ssem::dequantize(c, fmt);
          const double half = x + 0.5 * fmt.scale();
          f << fmt.bits << "," << format_golden(x) << "," << ssem::quantize(x, fmt) << "\n";
          f << fmt.bits << "," << format_golden(half) << "," << ssem::quantize(half, fmt) << "\n";
        }
        for (double x : {-2.0, -1.0 - fmt.scale(), 1.0, 2.0}) {
          f << fmt.bits << "," << format_golden(x) << "," << ssem::quantize(x, fmt) << "\n";
        }
      }
    } else if (*toy) {
      const auto dims = dims_name == "full" ? ssem::ModelDims::full() : ssem::ModelDims::toy();
      ssem::save_file(ssem::make_toy_model(seed, dims, scale), out_path);
    } else if (*mix) {
      const auto s = ssem::read_wav(in_path);
      const auto n = ssem::read_wav(noise_path);
      if (s.sample_rate != n.sample_rate) throw ssem::SampleRateMismatch(s.sample_rate, n.sample_rate);
      auto m = ssem::mix_at_snr(s.samples, n.samples, snr_db, s.sample_rate);
      ssem::write_wav(out_path, {s.sample_rate, std::move(m.samples)});
      std::cout << json{{"noise_gain", m.noise_gain}}.dump() << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ssem::ModelIoError& e) {
    std::cerr << "error: corrupt model: " << e.what() << "\n";
    return kCorruptModel;
  } catch (const ssem::InfeasiblePlan& e) {
    std::cerr << "error: infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const ssem::SampleRateMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataMismatch;
  } catch (const DataMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataMismatch;
  } catch (const ssem::WavError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kOk;
}
