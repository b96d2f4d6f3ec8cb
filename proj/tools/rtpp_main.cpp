// rtpp command-line interface: sessionize, train, predict, evaluate, simulate,
// gradcheck and replay. Every run writes a manifest next to its primary output.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rtpp/checkpoint.hpp"
#include "rtpp/errors.hpp"
#include "rtpp/evalharness.hpp"
#include "rtpp/eventlog.hpp"
#include "rtpp/inference.hpp"
#include "rtpp/simulate.hpp"
#include "rtpp/train.hpp"
#include "rtpp/version.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace rtpp;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<double> parse_doubles(const std::string& s, std::size_t expected, const std::string& flag) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(flag + ": '" + item + "' is not a number");
    }
  }
  if (out.size() != expected) throw UsageError(flag + " expects " + std::to_string(expected) + " comma-separated values");
  return out;
}

fs::path manifest_path(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

fs::path sibling(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p.replace_extension();
  return fs::path(p.string() + suffix);
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::ofstream open_out(const fs::path& p) {
  ensure_parent(p);
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

// ---- Manifest --------------------------------------------------------------

struct Manifest {
  std::string subcommand;
  std::uint64_t seed = 0;
  json inputs = json::object();
  json outputs = json::object();
};

// Resolved value of every option on a subcommand, defaults included, plus the
// equivalent argv for replay.
std::pair<json, std::vector<std::string>> resolve_options(const CLI::App& sub) {
  json config = json::object();
  std::vector<std::string> argv{sub.get_name()};
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name.empty()) continue;
    if (opt->get_expected_min() == 0) {
      const bool on = opt->count() > 0;
      config[name] = on;
      if (on) argv.push_back("--" + name);
      continue;
    }
    std::string value;
    if (opt->count() > 0) {
      const auto res = opt->reduced_results();
      value = res.empty() ? "" : res.front();
    } else {
      value = opt->get_default_str();
    }
    config[name] = value;
    if (opt->count() > 0 || !value.empty()) argv.push_back("--" + name + "=" + value);
  }
  return {config, argv};
}

void write_manifest(const fs::path& primary, const CLI::App& sub, const Manifest& m, std::size_t workers) {
  auto [config, argv] = resolve_options(sub);
  json doc;
  doc["tool"] = "rtpp";
  doc["version"] = kVersion;
  doc["checkpoint_format_version"] = train::kCheckpointFormatVersion;
  doc["subcommand"] = m.subcommand;
  doc["seed"] = m.seed;
  doc["workers"] = workers;
  doc["config"] = config;
  doc["inputs"] = m.inputs;
  doc["outputs"] = m.outputs;
  doc["argv"] = argv;
  auto out = open_out(manifest_path(primary));
  out << doc.dump(2) << "\n";
}

// ---- Option sets -----------------------------------------------------------

struct SessionizeArgs {
  std::string in, out, format = "auto", unit = "hours", gap_mode = "start-to-start";
  double threshold = 1.0;
  double train_frac = 0.8;
  std::string train_out, test_out;
  std::uint64_t seed = 1;
};

struct ModelArgs {
  std::size_t hidden = 64;
  std::size_t mlp_hidden = 32;
  std::string w_t_mode = "frozen_zero";
  std::string latent_mode = "full";

  model::ModelConfig config() const {
    model::ModelConfig c;
    c.hidden = hidden;
    c.mlp_hidden = mlp_hidden;
    c.slope = model::parse_slope_mode(w_t_mode);
    c.latent = model::parse_latent_mode(latent_mode);
    return c;
  }
};

struct OptimArgs {
  std::size_t epochs = 70;
  double lr = 1e-3;
  std::size_t samples = 1;
  std::size_t batch_size = 16;
  std::size_t truncation = 200;
  double clip_norm = 5.0;
};

struct TrainArgs {
  std::string sessions, out, report;
  ModelArgs model;
  OptimArgs optim;
  std::uint64_t seed = 1;
  std::string gap_mode = "start-to-start";
  double threshold = 1.0;
  bool omit_timing = false;
};

struct PredictArgs {
  std::string model, sessions, out;
  std::size_t samples = 32;
  std::uint64_t seed = 1;
  std::string alarm_mode = "expected";
  double theta_g = 0.0, theta_d = 0.0;
  std::string dur_cmp = "less";
  bool sampled_filter = false;
  bool rolling_only = false;
};

struct EvaluateArgs {
  std::string model, train, test, out, long_out, ablation_model;
  std::string methods = "model,per_user_mean,global_mean,last_value,hom_poisson";
  std::size_t samples = 32;
  std::string seeds = "1";
  OptimArgs optim;
};

struct SimulateArgs {
  std::string kind = "stationary", out, truth_out, model;
  std::size_t users = 100;
  double horizon = 500.0;
  std::uint64_t seed = 1;
  double mean_gap = 2.0, mean_duration = 5.0;
  std::string regime_gaps = "1,10", regime_durations = "2,6", stay = "0.9,0.9";
  std::size_t max_sessions = 1000;
};

struct GradcheckArgs {
  std::size_t hidden = 4, mlp_hidden = 3, steps = 5, samples = 1;
  std::uint64_t seed = 1;
  std::string w_t_mode = "frozen_zero";
  double h = 1e-5, tol = 1e-4;
  std::string out = "gradcheck.json";
};

void add_model_options(CLI::App* sub, ModelArgs& m) {
  sub->add_option("--hidden", m.hidden, "LSTM hidden size")->check(CLI::PositiveNumber);
  sub->add_option("--mlp-hidden", m.mlp_hidden, "Hidden width of the prior/posterior MLPs")->check(CLI::PositiveNumber);
  sub->add_option("--w-t-mode", m.w_t_mode, "Intensity slope: frozen_zero or learned")
      ->check(CLI::IsMember({"frozen_zero", "learned"}));
  sub->add_option("--latent-mode", m.latent_mode, "full, or ablation (z fixed at 0.5, no KL)")
      ->check(CLI::IsMember({"full", "ablation"}));
}

void add_optim_options(CLI::App* sub, OptimArgs& o) {
  sub->add_option("--epochs", o.epochs, "Training epochs")->check(CLI::PositiveNumber);
  sub->add_option("--lr", o.lr, "Adam learning rate")->check(CLI::NonNegativeNumber);
  sub->add_option("--samples", o.samples, "Monte-Carlo latent trajectories per sequence")->check(CLI::PositiveNumber);
  sub->add_option("--batch-size", o.batch_size, "Users per optimizer step")->check(CLI::PositiveNumber);
  sub->add_option("--truncation", o.truncation, "BPTT window in steps (0 = none)");
  sub->add_option("--clip-norm", o.clip_norm, "Global gradient-norm clip (0 = none)")->check(CLI::NonNegativeNumber);
}

train::TrainConfig train_config(const OptimArgs& o, const model::ModelConfig& m, std::uint64_t seed,
                                std::size_t workers) {
  train::TrainConfig c;
  c.epochs = o.epochs;
  c.learning_rate = o.lr;
  c.model = m;
  c.samples = o.samples;
  c.batch_size = o.batch_size;
  c.truncation = o.truncation;
  c.clip_norm = o.clip_norm;
  c.seed = seed;
  c.workers = workers;
  return c;
}

// ---- Subcommands -----------------------------------------------------------

void run_sessionize(const SessionizeArgs& a, const CLI::App& sub, std::size_t workers) {
  const bool split = !a.train_out.empty() || !a.test_out.empty();
  if (split && (a.train_out.empty() || a.test_out.empty()))
    throw UsageError("--train-out and --test-out must be given together");
  if (!(a.threshold > 0.0)) throw UsageError("--session-threshold-hours must be positive");
  const auto mode = eventlog::parse_gap_mode(a.gap_mode);

  std::vector<eventlog::SessionSequence> seqs;
  std::string input_kind;
  if (eventlog::looks_like_sessions_file(a.in)) {
    // Already sessionized: pass through unchanged.
    seqs = eventlog::read_sessions(fs::path(a.in));
    input_kind = "sessions";
  } else {
    const auto format = a.format == "auto" ? eventlog::format_from_path(a.in)
                        : a.format == "csv" ? eventlog::EventFormat::Csv
                                            : eventlog::EventFormat::Jsonl;
    const auto unit = a.unit == "seconds" ? eventlog::TimeUnit::Seconds : eventlog::TimeUnit::Hours;
    seqs = eventlog::sessionize_all(eventlog::ingest_events(fs::path(a.in), format, unit), a.threshold, mode);
    input_kind = "events";
  }
  ensure_parent(a.out);
  eventlog::write_sessions(fs::path(a.out), seqs);

  Manifest m{"sessionize", a.seed};
  m.inputs["in"] = a.in;
  m.inputs["kind"] = input_kind;
  m.outputs["sessions"] = a.out;
  std::size_t sessions = 0;
  for (const auto& s : seqs) sessions += s.size();
  m.outputs["users"] = seqs.size();
  m.outputs["total_sessions"] = sessions;
  if (split) {
    auto [tr, te] = eventlog::split_users(seqs, a.train_frac, a.seed);
    ensure_parent(a.train_out);
    ensure_parent(a.test_out);
    eventlog::write_sessions(fs::path(a.train_out), tr);
    eventlog::write_sessions(fs::path(a.test_out), te);
    m.outputs["train"] = a.train_out;
    m.outputs["test"] = a.test_out;
    m.outputs["train_users"] = tr.size();
    m.outputs["test_users"] = te.size();
  }
  write_manifest(a.out, sub, m, workers);
  std::cout << "sessionized " << seqs.size() << " users, " << sessions << " sessions -> " << a.out << "\n";
}

void run_train(const TrainArgs& a, const CLI::App& sub, std::size_t workers) {
  const auto seqs = eventlog::read_sessions(fs::path(a.sessions));
  const auto cfg = train_config(a.optim, a.model.config(), a.seed, workers);
  const auto started = std::chrono::steady_clock::now();
  const auto result = train::train(seqs, cfg);
  const train::DataConfig data{eventlog::parse_gap_mode(a.gap_mode), a.threshold};
  ensure_parent(a.out);
  train::save_checkpoint(result.params, data, a.out);
  const fs::path report = a.report.empty() ? sibling(a.out, ".report.csv") : fs::path(a.report);
  {
    auto out = open_out(report);
    train::write_report_csv(out, result.report, !a.omit_timing);
  }
  Manifest m{"train", a.seed};
  m.inputs["sessions"] = a.sessions;
  m.outputs["checkpoint"] = a.out;
  m.outputs["report"] = report.string();
  m.outputs["final_neg_elbo_per_event"] = result.report.epochs.back().neg_elbo_per_event;
  write_manifest(a.out, sub, m, workers);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  std::cout << "trained " << cfg.epochs << " epochs, final neg ELBO/event "
            << result.report.epochs.back().neg_elbo_per_event << " (" << secs << " s) -> " << a.out << "\n";
}

void run_predict(const PredictArgs& a, const CLI::App& sub, std::size_t workers) {
  const auto ck = train::load_checkpoint(a.model);
  const auto seqs = eventlog::read_sessions(fs::path(a.sessions));
  inference::AlarmPolicy policy;
  policy.mode = inference::parse_alarm_mode(a.alarm_mode);
  policy.theta_gap = a.theta_g;
  policy.theta_duration = a.theta_d;
  policy.duration_cmp = inference::parse_comparator(a.dur_cmp);
  if (policy.mode == inference::AlarmMode::Fixed && !(a.theta_g > 0.0 && a.theta_d > 0.0))
    throw UsageError("fixed alarm mode needs positive --theta-g and --theta-d");
  const inference::PredictOptions opts{a.samples, a.seed, a.sampled_filter};

  auto out = open_out(a.out);
  inference::write_predictions_header(out);
  std::size_t rows = 0, alarms = 0;
  auto emit = [&](const eventlog::SessionSequence& s, const inference::PredictionRecord& r) {
    std::optional<bool> alarm;
    if (policy.mode == inference::AlarmMode::Fixed) {
      alarm = inference::churn_alarm(r, policy);
    } else if (auto stats = inference::history_stats(s, r.step)) {
      alarm = inference::churn_alarm(r, policy, stats);
    }
    inference::write_prediction_row(out, r, alarm);
    ++rows;
    alarms += alarm.value_or(false);
  };
  for (const auto& s : seqs) {
    if (s.size() >= 2)
      for (const auto& r : inference::rolling_evaluate(ck.params, s, opts)) emit(s, r);
    if (!a.rolling_only) emit(s, inference::predict_next(ck.params, s, opts));
  }
  out.close();
  Manifest m{"predict", a.seed};
  m.inputs["model"] = a.model;
  m.inputs["sessions"] = a.sessions;
  m.outputs["predictions"] = a.out;
  m.outputs["rows"] = rows;
  m.outputs["alarms"] = alarms;
  write_manifest(a.out, sub, m, workers);
  std::cout << "wrote " << rows << " predictions (" << alarms << " alarms) -> " << a.out << "\n";
}

void run_evaluate(const EvaluateArgs& a, const CLI::App& sub, std::size_t workers) {
  const auto methods = split_list(a.methods);
  if (methods.empty()) throw UsageError("--methods is empty");
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(a.seeds)) {
    try {
      std::size_t pos = 0;
      seeds.push_back(std::stoull(s, &pos));
      if (pos != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw UsageError("--seeds: '" + s + "' is not a non-negative integer");
    }
  }
  if (seeds.empty()) throw UsageError("--seeds is empty");
  for (const auto& name : methods)
    if (name != "model") eval::parse_baseline(name);
  const bool want_model = std::find(methods.begin(), methods.end(), "model") != methods.end();
  const bool need_train = std::any_of(methods.begin(), methods.end(), [](auto& n) { return n != "model"; });
  if (want_model && a.model.empty()) throw UsageError("method 'model' needs --model");
  if (need_train && a.train.empty()) throw UsageError("baseline methods need --train");

  const auto test = eventlog::read_sessions(fs::path(a.test));
  std::vector<eventlog::SessionSequence> train_seqs;
  if (need_train) train_seqs = eventlog::read_sessions(fs::path(a.train));
  std::optional<train::Checkpoint> ck;
  if (!a.model.empty()) ck = train::load_checkpoint(a.model);
  std::optional<train::Checkpoint> ablation_ck;
  if (!a.ablation_model.empty()) ablation_ck = train::load_checkpoint(a.ablation_model);

  const fs::path long_out = a.long_out.empty() ? sibling(a.out, ".long.csv") : fs::path(a.long_out);
  auto summary = open_out(a.out);
  auto longf = open_out(long_out);
  eval::write_summary_header(summary);
  eval::write_long_header(longf);

  for (const std::uint64_t seed : seeds) {
    const inference::PredictOptions opts{a.samples, seed, false};
    std::vector<eval::Method> ms;
    for (const auto& name : methods) {
      if (name == "model") {
        ms.push_back(eval::model_method("model", ck->params, opts));
        continue;
      }
      eval::BaselineConfig bc;
      bc.predict = opts;
      if (name == "ablation_rnn") {
        if (ablation_ck) {
          bc.ablation_params = ablation_ck->params;
        } else {
          model::ModelConfig mc = ck ? ck->params.config : model::ModelConfig{};
          mc.latent = model::LatentMode::Ablation;
          bc.train = train_config(a.optim, mc, seed, workers);
        }
      }
      ms.push_back(eval::baseline_method(name, eval::fit_baseline(eval::parse_baseline(name), train_seqs, bc)));
    }
    const auto results = eval::compare(ms, test);
    eval::write_summary_rows(summary, results, seed);
    eval::write_long_rows(longf, results, seed);
    for (const auto& r : results)
      std::cout << "seed " << seed << "  " << r.name << "  mae_gap " << r.metrics.mae_gap << "  mae_dur "
                << r.metrics.mae_duration << "  (n=" << r.metrics.count << ")\n";
  }
  summary.close();
  longf.close();
  Manifest m{"evaluate", seeds.front()};
  m.inputs["model"] = a.model;
  m.inputs["train"] = a.train;
  m.inputs["test"] = a.test;
  m.inputs["ablation_model"] = a.ablation_model;
  m.outputs["summary"] = a.out;
  m.outputs["long"] = long_out.string();
  write_manifest(a.out, sub, m, workers);
}

void run_simulate(const SimulateArgs& a, const CLI::App& sub, std::size_t workers) {
  sim::GeneratorSpec spec;
  spec.kind = sim::parse_kind(a.kind);
  spec.users = a.users;
  spec.horizon = a.horizon;
  spec.stationary = {a.mean_gap, a.mean_duration};
  const auto gaps = parse_doubles(a.regime_gaps, 2, "--regime-gaps");
  const auto durs = parse_doubles(a.regime_durations, 2, "--regime-durations");
  const auto stay = parse_doubles(a.stay, 2, "--stay");
  spec.regimes = {sim::Regime{gaps[0], durs[0]}, sim::Regime{gaps[1], durs[1]}};
  spec.switching = {{{stay[0], 1.0 - stay[0]}, {1.0 - stay[1], stay[1]}}};
  spec.max_sessions = a.max_sessions;
  std::optional<train::Checkpoint> ck;
  if (spec.kind == sim::GeneratorKind::FromModel) {
    if (a.model.empty()) throw UsageError("--kind from_model needs --model");
    ck = train::load_checkpoint(a.model);
    spec.model = &ck->params;
    spec.model_path = a.model;
  }
  const auto data = sim::generate(spec, a.seed);
  ensure_parent(a.out);
  eventlog::write_sessions(fs::path(a.out), data.sequences);
  const fs::path truth = a.truth_out.empty() ? sibling(a.out, ".truth.json") : fs::path(a.truth_out);
  ensure_parent(truth);
  sim::write_sidecar(truth, spec, a.seed, data);
  Manifest m{"simulate", a.seed};
  m.inputs["model"] = a.model;
  m.outputs["sessions"] = a.out;
  m.outputs["truth"] = truth.string();
  write_manifest(a.out, sub, m, workers);
  std::size_t sessions = 0;
  for (const auto& s : data.sequences) sessions += s.size();
  std::cout << "simulated " << data.sequences.size() << " users, " << sessions << " sessions -> " << a.out << "\n";
}

bool run_gradcheck(const GradcheckArgs& a, const CLI::App& sub, std::size_t workers) {
  if (a.steps < 2) throw UsageError("--steps must be at least 2");
  const auto started = std::chrono::steady_clock::now();
  model::ModelConfig mc;
  mc.hidden = a.hidden;
  mc.mlp_hidden = a.mlp_hidden;
  mc.slope = model::parse_slope_mode(a.w_t_mode);
  model::ModelParams params = model::init_params(mc, a.seed);
  Rng rng(derive_seed(a.seed, "gradcheck"));
  if (mc.slope == model::SlopeMode::Learned) params.gap_w_t[0] = 0.1 * (rng.uniform() - 0.5);
  // A short sequence with two-hour mean gaps and mixed durations.
  eventlog::SessionSequence seq{"gradcheck", {}};
  double t = 0.0;
  for (std::size_t i = 0; i < a.steps; ++i) {
    const double g = i == 0 ? 0.0 : 0.1 + rng.exponential(2.0);
    t += g;
    seq.sessions.push_back({t, g, 1 + rng.poisson(3.0)});
  }
  const auto noise = train::NoiseDraws::draw(a.samples, seq.size(), rng);
  const auto check = train::elbo_grad_check(params, seq, noise, a.h, a.tol);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  const auto& r = check.report;
  json doc;
  doc["passed"] = r.passed;
  doc["max_rel_error"] = r.max_rel_error;
  doc["tolerance"] = a.tol;
  doc["entries_checked"] = r.entries_checked;
  doc["worst_param"] = check.names.empty() ? "" : check.names[r.worst_param];
  doc["worst_index"] = r.worst_index;
  doc["worst_analytic"] = r.worst_analytic;
  doc["worst_numeric"] = r.worst_numeric;
  json per = json::object();
  for (std::size_t i = 0; i < check.names.size(); ++i) per[check.names[i]] = r.max_rel_error_per_param[i];
  doc["per_param"] = per;
  doc["seconds"] = secs;
  {
    auto out = open_out(a.out);
    out << doc.dump(2) << "\n";
  }
  Manifest m{"gradcheck", a.seed};
  m.outputs["report"] = a.out;
  write_manifest(a.out, sub, m, workers);
  std::cout << (r.passed ? "PASS" : "FAIL") << " max_rel_error=" << r.max_rel_error << " tol=" << a.tol
            << " entries=" << r.entries_checked << " worst=" << doc["worst_param"].get<std::string>() << "["
            << r.worst_index << "]\n";
  return r.passed;
}

// ---- Driver ----------------------------------------------------------------

std::string closest(const std::vector<std::string>& names, const std::string& bad) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& n : names) {
    const std::size_t d = levenshtein(bad, n);
    if (d < best_d) {
      best_d = d;
      best = n;
    }
  }
  return best_d <= std::max<std::size_t>(2, bad.size() / 3) ? best : "";
}

// Catches unknown subcommands and flags before CLI11 so the message can carry a suggestion.
std::string prescan(const CLI::App& app, const std::vector<std::string>& args) {
  std::vector<std::string> sub_names;
  for (const CLI::App* s : app.get_subcommands({})) sub_names.push_back(s->get_name());
  const CLI::App* sub = nullptr;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("-", 0) == 0) {
      const std::string flag = a.substr(0, a.find('='));
      if (flag == "-h" || flag == "--help" || flag == "--version") continue;
      const CLI::Option* opt = app.get_option_no_throw(flag);
      if (!opt && sub) opt = sub->get_option_no_throw(flag);
      if (!opt) {
        std::vector<std::string> names;
        for (const CLI::App* scope : {&app, sub}) {
          if (!scope) continue;
          for (const CLI::Option* o : scope->get_options())
            for (const auto& n : o->get_lnames()) names.push_back("--" + n);
        }
        const std::string guess = closest(names, flag);
        return "unknown option " + flag + (guess.empty() ? "" : "; did you mean " + guess + "?");
      }
      // Skip a separate value token.
      if (a.find('=') == std::string::npos && opt->get_expected_min() > 0) ++i;
      continue;
    }
    if (!sub) {
      sub = app.get_subcommand_no_throw(a);
      if (!sub) {
        const std::string guess = closest(sub_names, a);
        return "unknown subcommand '" + a + "'" + (guess.empty() ? "" : "; did you mean " + guess + "?");
      }
    }
  }
  return "";
}

int run(std::vector<std::string> args) {
  CLI::App app{"rtpp: recurrent temporal point process for user return and churn prediction", "rtpp"};
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  std::size_t workers = 1;
  app.add_option("--workers", workers, "User-level parallelism for training")->check(CLI::PositiveNumber);
  app.set_version_flag("--version",
                       std::string("rtpp ") + kVersion + " (checkpoint format " +
                           std::to_string(train::kCheckpointFormatVersion) + ")");

  SessionizeArgs sa;
  auto* ses = app.add_subcommand("sessionize", "Group raw events into sessions (sessions input passes through)");
  ses->add_option("--in", sa.in, "Event log (.csv/.jsonl) or sessions JSONL")->required();
  ses->add_option("--out", sa.out, "Sessions JSONL output")->required();
  ses->add_option("--format", sa.format, "Input format")->check(CLI::IsMember({"auto", "csv", "jsonl"}));
  ses->add_option("--timestamp-unit", sa.unit, "Unit of numeric timestamps")->check(CLI::IsMember({"hours", "seconds"}));
  ses->add_option("--session-threshold-hours", sa.threshold, "Inactivity that closes a session");
  ses->add_option("--gap-mode", sa.gap_mode, "Gap definition")->check(CLI::IsMember({"start-to-start", "end-to-start"}));
  ses->add_option("--train-frac", sa.train_frac, "Fraction of users in the training split");
  ses->add_option("--train-out", sa.train_out, "Training split output");
  ses->add_option("--test-out", sa.test_out, "Test split output");
  ses->add_option("--seed", sa.seed, "Split seed");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Fit the model to sessions");
  tr->add_option("--sessions", ta.sessions, "Sessions JSONL")->required();
  tr->add_option("--out", ta.out, "Checkpoint output")->required();
  tr->add_option("--report", ta.report, "Per-epoch CSV (default <out>.report.csv)");
  add_model_options(tr, ta.model);
  add_optim_options(tr, ta.optim);
  tr->add_option("--seed", ta.seed, "Initialization, shuffling and noise seed");
  tr->add_option("--gap-mode", ta.gap_mode, "Gap definition the sessions were built with (recorded)")
      ->check(CLI::IsMember({"start-to-start", "end-to-start"}));
  tr->add_option("--session-threshold-hours", ta.threshold, "Session threshold the sessions were built with (recorded)");
  tr->add_flag("--omit-timing", ta.omit_timing, "Leave the wall-clock column out of the report");

  PredictArgs pa;
  auto* pr = app.add_subcommand("predict", "Rolling next-gap and duration predictions with churn alarms");
  pr->add_option("--model", pa.model, "Checkpoint")->required();
  pr->add_option("--sessions", pa.sessions, "Sessions JSONL")->required();
  pr->add_option("--out", pa.out, "Predictions CSV")->required();
  pr->add_option("--pred-samples", pa.samples, "Prior latent draws per prediction")->check(CLI::PositiveNumber);
  pr->add_option("--seed", pa.seed, "Prediction seed");
  pr->add_option("--alarm-mode", pa.alarm_mode, "fixed or expected")->check(CLI::IsMember({"fixed", "expected"}));
  pr->add_option("--theta-g", pa.theta_g, "Fixed-mode gap threshold (hours)");
  pr->add_option("--theta-d", pa.theta_d, "Fixed-mode duration threshold (events)");
  pr->add_option("--expected-dur-cmp", pa.dur_cmp, "Expected-mode duration comparator")
      ->check(CLI::IsMember({"less", "greater"}));
  pr->add_flag("--sampled-filter", pa.sampled_filter, "Sample z from the posterior while filtering");
  pr->add_flag("--rolling-only", pa.rolling_only, "Skip the open-ended prediction after each user's last session");

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Compare the model with baselines on held-out users");
  ev->add_option("--model", ea.model, "Checkpoint");
  ev->add_option("--train", ea.train, "Training sessions (fit baselines)");
  ev->add_option("--test", ea.test, "Test sessions")->required();
  ev->add_option("--out", ea.out, "Summary CSV")->required();
  ev->add_option("--long-out", ea.long_out, "Long-format CSV (default <out>.long.csv)");
  ev->add_option("--methods", ea.methods,
                 "Comma list of model, per_user_mean, global_mean, last_value, hom_poisson, ablation_rnn");
  ev->add_option("--pred-samples", ea.samples, "Prior latent draws per prediction")->check(CLI::PositiveNumber);
  ev->add_option("--seeds", ea.seeds, "Comma list of evaluation seeds");
  ev->add_option("--ablation-model", ea.ablation_model, "Pre-trained ablation checkpoint");
  add_optim_options(ev, ea.optim);

  SimulateArgs ma;
  auto* si = app.add_subcommand("simulate", "Generate synthetic sessions with known ground truth");
  si->add_option("--kind", ma.kind, "Generator")->check(CLI::IsMember({"stationary", "regime_switching", "from_model"}));
  si->add_option("--users", ma.users, "Number of users")->check(CLI::PositiveNumber);
  si->add_option("--horizon", ma.horizon, "Observation horizon (hours)");
  si->add_option("--seed", ma.seed, "Generator seed");
  si->add_option("--mean-gap", ma.mean_gap, "Stationary mean gap (hours)");
  si->add_option("--mean-duration", ma.mean_duration, "Stationary mean duration (events)");
  si->add_option("--regime-gaps", ma.regime_gaps, "Mean gaps of the two regimes");
  si->add_option("--regime-durations", ma.regime_durations, "Mean durations of the two regimes");
  si->add_option("--stay", ma.stay, "Probability of remaining in each regime per session");
  si->add_option("--model", ma.model, "Checkpoint for --kind from_model");
  si->add_option("--max-sessions", ma.max_sessions, "Cap on sessions per user")->check(CLI::PositiveNumber);
  si->add_option("--out", ma.out, "Sessions JSONL output")->required();
  si->add_option("--truth-out", ma.truth_out, "Ground-truth sidecar (default <out>.truth.json)");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the ELBO gradient");
  gc->add_option("--hidden", ga.hidden, "LSTM hidden size")->check(CLI::PositiveNumber);
  gc->add_option("--mlp-hidden", ga.mlp_hidden, "MLP hidden width")->check(CLI::PositiveNumber);
  gc->add_option("--steps", ga.steps, "Sessions in the test sequence");
  gc->add_option("--samples", ga.samples, "Latent trajectories")->check(CLI::PositiveNumber);
  gc->add_option("--seed", ga.seed, "Seed");
  gc->add_option("--w-t-mode", ga.w_t_mode, "frozen_zero or learned")->check(CLI::IsMember({"frozen_zero", "learned"}));
  gc->add_option("--fd-step", ga.h, "Finite-difference step");
  gc->add_option("--tol", ga.tol, "Relative error tolerance");
  gc->add_option("--out", ga.out, "JSON report");

  std::string manifest;
  auto* rp = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  rp->add_option("--manifest", manifest, "Manifest JSON")->required();

  for (auto* sub : app.get_subcommands({})) sub->option_defaults()->always_capture_default();

  if (const std::string problem = prescan(app, args); !problem.empty()) {
    std::cerr << "error: " << problem << "\n";
    return kUsage;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  if (name == "sessionize") run_sessionize(sa, *sub, workers);
  if (name == "train") run_train(ta, *sub, workers);
  if (name == "predict") run_predict(pa, *sub, workers);
  if (name == "evaluate") run_evaluate(ea, *sub, workers);
  if (name == "simulate") run_simulate(ma, *sub, workers);
  if (name == "gradcheck" && !run_gradcheck(ga, *sub, workers)) return kNumerical;
  if (name == "replay") {
    std::ifstream in(manifest);
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError(std::string("manifest ") + manifest + ": " + e.what());
    }
    if (!doc.contains("argv") || !doc["argv"].is_array()) throw DataError("manifest " + manifest + " has no argv");
    std::vector<std::string> argv;
    if (doc.contains("workers")) argv.push_back("--workers=" + std::to_string(doc["workers"].get<std::size_t>()));
    for (const auto& a : doc["argv"]) argv.push_back(a.get<std::string>());
    if (!argv.empty() && argv.back() == "replay") throw DataError("manifest records a replay");
    return run(argv);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return run(args);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
}
