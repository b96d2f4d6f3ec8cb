#include "rtpp/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>
#include <thread>

#include "rtpp/errors.hpp"

namespace rtpp::train {
namespace {

using eventlog::SessionSequence;
using model::BoundParams;
using model::ModelParams;
using model::StepMode;

constexpr double kKlTolerance = 1e-12;

struct ChunkResult {
  ad::Var elbo;
  model::HiddenState final_state;
};

ad::Var gap_term(const BoundParams& p, ad::Var base, double gap) {
  if (p.params->config.slope == model::SlopeMode::Learned) return tpp::log_gap_density(base, p[model::kSlopeIndex], gap);
  return tpp::log_gap_density(base, 0.0, gap);
}

double slope_value(const BoundParams& p) {
  return p.params->config.slope == model::SlopeMode::Learned ? p.params->gap_w_t[0] : 0.0;
}

// Terms for sessions [begin, end) of one latent trajectory. The step of
// session j scores session j+1; the initial step scores session 0's duration.
ChunkResult elbo_chunk(ad::Tape& tape, const BoundParams& p, const SessionSequence& seq, std::size_t begin,
                       std::size_t end, const model::HiddenState& init, const NoiseDraws& noise, std::size_t sample,
                       ElboStats* stats) {
  const auto& s = seq.sessions;
  const bool latent = p.params->config.latent == model::LatentMode::Full;
  const double slope = slope_value(p);
  std::vector<ad::Var> terms;
  terms.reserve(3 * (end - begin) + 1);
  model::TapeState state = model::constant_state(tape, init);

  auto score_next = [&](const model::TapeStep& st, std::size_t next) {
    if (next > 0) {
      ad::Var g = gap_term(p, st.base, s[next].gap);
      terms.push_back(g);
      if (stats) {
        stats->gap_log_lik += tape.scalar(g);
        const double pred = tpp::expected_gap({tape.scalar(st.base), slope});
        stats->abs_err_gap += std::abs(pred - s[next].gap);
        ++stats->gap_terms;
      }
    }
    ad::Var d = tpp::poisson_log_pmf_log_rate(st.log_rate, s[next].duration);
    terms.push_back(d);
    if (stats) {
      stats->duration_log_lik += tape.scalar(d);
      stats->abs_err_duration += std::abs(std::exp(tape.scalar(st.log_rate)) - static_cast<double>(s[next].duration));
      ++stats->duration_terms;
    }
  };

  std::size_t j = begin;
  try {
    if (begin == 0) {
      const model::TapeStep st = model::initial_step(p, state, StepMode::Infer, noise.at(sample, 0));
      score_next(st, 0);
    }
    for (; j < end; ++j) {
      const bool has_next = j + 1 < s.size();
      const model::TapeStep st =
          model::step(p, state, s[j].gap, s[j].duration, StepMode::Infer, noise.at(sample, j + 1), has_next);
      if (latent) {
        ad::Var kl = tpp::gaussian_kl(st.post_mean, st.post_std, st.prior_mean, st.prior_std);
        const double klv = tape.scalar(kl);
        if (klv < -kKlTolerance) throw NumericalError("negative KL " + std::to_string(klv));
        terms.push_back(-kl);
        if (stats) {
          stats->kl += klv;
          stats->min_step_kl = std::min(stats->min_step_kl, klv);
        }
      }
      if (has_next) score_next(st, j + 1);
      state = st.state;
    }
  } catch (const NumericalError& e) {
    throw NumericalError("user '" + seq.user_id + "' step " + std::to_string(j + 1) + ": " + e.what());
  }
  ChunkResult out;
  out.elbo = ad::sum(tape.concat(terms));
  if (!std::isfinite(tape.scalar(out.elbo)))
    throw NumericalError("user '" + seq.user_id + "': non-finite ELBO");
  auto hv = tape.value(state.h);
  auto cv = tape.value(state.c);
  out.final_state.h.assign(hv.begin(), hv.end());
  out.final_state.c.assign(cv.begin(), cv.end());
  return out;
}

void require_sequence(const SessionSequence& seq, const NoiseDraws& noise) {
  if (seq.size() < 2) throw DataError("ELBO needs a sequence of at least 2 sessions (user '" + seq.user_id + "')");
  if (noise.samples < 1 || noise.steps != seq.size() + 1)
    throw std::invalid_argument("noise draws do not match the sequence length");
}

void add_scaled(model::ModelParams& acc, const model::ModelParams& g, double k) {
  auto a = acc.tensors();
  auto b = g.tensors();
  for (std::size_t i = 0; i < ModelParams::kCount; ++i)
    for (std::size_t e = 0; e < a[i]->size(); ++e) (*a[i])[e] += k * (*b[i])[e];
}

void merge_stats(ElboStats& into, const ElboStats& s) {
  into.gap_log_lik += s.gap_log_lik;
  into.duration_log_lik += s.duration_log_lik;
  into.kl += s.kl;
  into.min_step_kl = std::min(into.min_step_kl, s.min_step_kl);
  into.abs_err_gap += s.abs_err_gap;
  into.abs_err_duration += s.abs_err_duration;
  into.gap_terms += s.gap_terms;
  into.duration_terms += s.duration_terms;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("learning rate must be >= 0");
  if (samples < 1) throw std::invalid_argument("Monte-Carlo samples must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (model.hidden < 1 || model.mlp_hidden < 1) throw std::invalid_argument("model sizes must be >= 1");
  if (clip_norm < 0.0) throw std::invalid_argument("clip norm must be >= 0");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
}

void write_report_csv(std::ostream& out, const TrainReport& report, bool include_seconds) {
  out << "epoch,neg_elbo_per_event,mae_gap,mae_duration" << (include_seconds ? ",seconds" : "") << "\n";
  std::ostringstream line;
  line.precision(17);
  for (const auto& e : report.epochs) {
    line.str("");
    line << e.epoch << ',' << e.neg_elbo_per_event << ',' << e.mae_gap << ',' << e.mae_duration;
    if (include_seconds) {
      line.precision(6);
      line << ',' << e.seconds;
      line.precision(17);
    }
    out << line.str() << "\n";
  }
}

NoiseDraws NoiseDraws::draw(std::size_t samples, std::size_t sessions, Rng& rng) {
  NoiseDraws n;
  n.samples = samples;
  n.steps = sessions + 1;
  n.values.resize(samples * n.steps);
  for (double& v : n.values) v = rng.normal();
  return n;
}

NoiseDraws NoiseDraws::zeros(std::size_t samples, std::size_t sessions) {
  NoiseDraws n;
  n.samples = samples;
  n.steps = sessions + 1;
  n.values.assign(samples * n.steps, 0.0);
  return n;
}

ad::Var sequence_elbo(ad::Tape& tape, const BoundParams& p, const SessionSequence& seq, const NoiseDraws& noise,
                      ElboStats* stats) {
  require_sequence(seq, noise);
  const model::HiddenState zero = model::HiddenState::zeros(p.params->config.hidden);
  std::vector<ad::Var> per_sample;
  ElboStats local;
  for (std::size_t l = 0; l < noise.samples; ++l) {
    ChunkResult r = elbo_chunk(tape, p, seq, 0, seq.size(), zero, noise, l, stats ? &local : nullptr);
    per_sample.push_back(r.elbo);
  }
  if (stats) {
    // Averages over trajectories.
    const double inv = 1.0 / static_cast<double>(noise.samples);
    local.gap_log_lik *= inv;
    local.duration_log_lik *= inv;
    local.kl *= inv;
    *stats = local;
  }
  return (1.0 / static_cast<double>(noise.samples)) * ad::sum(tape.concat(per_sample));
}

ad::Var sequence_elbo(ad::Tape& tape, const BoundParams& p, const SessionSequence& seq, std::size_t samples, Rng& rng,
                      ElboStats* stats) {
  return sequence_elbo(tape, p, seq, NoiseDraws::draw(samples, seq.size(), rng), stats);
}

double sequence_elbo_value(const ModelParams& params, const SessionSequence& seq, std::size_t samples, Rng& rng,
                           ElboStats* stats) {
  ad::Tape tape;
  const BoundParams b = model::bind(tape, params);
  return tape.scalar(sequence_elbo(tape, b, seq, samples, rng, stats));
}

SequenceGradient sequence_gradient(const ModelParams& params, const SessionSequence& seq, const NoiseDraws& noise,
                                   std::size_t truncation) {
  require_sequence(seq, noise);
  SequenceGradient out;
  out.grad = ModelParams::zeros(params.config);
  const double inv = 1.0 / static_cast<double>(noise.samples);
  const std::size_t n = seq.size();
  const std::size_t window = truncation == 0 ? n : truncation;
  thread_local ad::Tape tape;
  auto grads = out.grad.tensors();
  for (std::size_t l = 0; l < noise.samples; ++l) {
    model::HiddenState state = model::HiddenState::zeros(params.config.hidden);
    for (std::size_t begin = 0; begin < n; begin += window) {
      const std::size_t end = std::min(n, begin + window);
      tape.clear();
      const BoundParams b = model::bind(tape, params);
      ChunkResult r = elbo_chunk(tape, b, seq, begin, end, state, noise, l, &out.stats);
      out.elbo += inv * tape.scalar(r.elbo);
      tape.backward(r.elbo);
      for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
        if (!b.trainable[i]) continue;
        auto g = tape.grad(b[i]);
        for (std::size_t e = 0; e < g.size(); ++e) (*grads[i])[e] += inv * g[e];
      }
      state = std::move(r.final_state);
    }
  }
  out.stats.gap_log_lik *= inv;
  out.stats.duration_log_lik *= inv;
  out.stats.kl *= inv;
  return out;
}

ElboGradCheck elbo_grad_check(const ModelParams& params, const SessionSequence& seq, const NoiseDraws& noise,
                              double h, double tol) {
  require_sequence(seq, noise);
  ElboGradCheck out;
  std::array<bool, ModelParams::kCount> trainable{};
  {
    ad::Tape probe;
    trainable = model::bind(probe, params).trainable;
  }
  std::vector<Tensor> values;
  std::vector<std::size_t> index;
  const auto ts = params.tensors();
  for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
    if (!trainable[i]) continue;
    values.push_back(*ts[i]);
    index.push_back(i);
    out.names.emplace_back(ModelParams::names()[i]);
  }
  auto f = [&](ad::Tape& tape, std::span<const ad::Var> vars) {
    BoundParams b;
    b.params = &params;
    for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
      b.vars[i] = tape.constant(*ts[i]);
      b.trainable[i] = false;
    }
    for (std::size_t k = 0; k < index.size(); ++k) {
      b.vars[index[k]] = vars[k];
      b.trainable[index[k]] = true;
    }
    return sequence_elbo(tape, b, seq, noise);
  };
  out.report = ad::grad_check(f, values, h, tol);
  return out;
}

TrainResult train(std::span<const SessionSequence> sequences, const TrainConfig& config) {
  config.validate();
  return train(sequences, config, model::init_params(config.model, config.seed));
}

TrainResult train(std::span<const SessionSequence> sequences, const TrainConfig& config, ModelParams params) {
  config.validate();
  if (!(params.config == config.model)) throw std::invalid_argument("initial parameters do not match the model config");
  std::vector<const SessionSequence*> users;
  for (const auto& s : sequences)
    if (s.size() >= 2) users.push_back(&s);
  if (users.empty()) throw DataError("training needs at least one sequence of 2 or more sessions");
  std::sort(users.begin(), users.end(), [](auto* a, auto* b) { return a->user_id < b->user_id; });

  // Parameters that receive updates.
  std::array<bool, ModelParams::kCount> trainable{};
  {
    ad::Tape probe;
    trainable = model::bind(probe, params).trainable;
  }

  ModelParams m = ModelParams::zeros(config.model);
  ModelParams v = ModelParams::zeros(config.model);
  std::size_t t = 0;
  TrainResult result;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(users.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(config.seed, "shuffle", epoch));
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[shuffle_rng.index(i + 1)]);

    // Indexed by user so the epoch total does not depend on the shuffle.
    std::vector<double> user_elbo(users.size(), 0.0);
    std::size_t epoch_events = 0;
    ElboStats epoch_stats;

    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b0 + config.batch_size)));
      // Users are indexed in id order, so sorting indices sorts by user id.
      std::sort(batch.begin(), batch.end());
      std::vector<SequenceGradient> results(batch.size());
      std::vector<std::string> errors(batch.size());
      auto work = [&](std::size_t worker) {
        for (std::size_t k = worker; k < batch.size(); k += config.workers) {
          const SessionSequence& seq = *users[batch[k]];
          try {
            // Each user keeps one noise stream for the whole run.
            Rng rng(derive_seed(config.seed, seq.user_id));
            const NoiseDraws noise = NoiseDraws::draw(config.samples, seq.size(), rng);
            results[k] = sequence_gradient(params, seq, noise, config.truncation);
          } catch (const std::exception& e) {
            errors[k] = e.what();
          }
        }
      };
      if (config.workers == 1 || batch.size() == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        const std::size_t nw = std::min(config.workers, batch.size());
        for (std::size_t w = 0; w < nw; ++w) pool.emplace_back(work, w);
        for (auto& th : pool) th.join();
      }
      for (std::size_t k = 0; k < batch.size(); ++k)
        if (!errors[k].empty())
          throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b0 / config.batch_size + 1) + ": " + errors[k]);

      std::size_t events = 0;
      for (std::size_t k = 0; k < batch.size(); ++k) events += users[batch[k]]->size();
      ModelParams grad = ModelParams::zeros(config.model);
      for (std::size_t k = 0; k < batch.size(); ++k) {
        // Minimize -ELBO / events.
        add_scaled(grad, results[k].grad, -1.0 / static_cast<double>(events));
        user_elbo[batch[k]] = results[k].elbo;
        merge_stats(epoch_stats, results[k].stats);
      }
      epoch_events += events;

      auto gs = grad.tensors();
      if (config.clip_norm > 0.0) {
        double sq = 0.0;
        for (std::size_t i = 0; i < ModelParams::kCount; ++i)
          if (trainable[i])
            for (std::size_t e = 0; e < gs[i]->size(); ++e) sq += (*gs[i])[e] * (*gs[i])[e];
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm))
          throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": non-finite gradient");
        if (norm > config.clip_norm) {
          const double k = config.clip_norm / norm;
          for (Tensor* g : gs)
            for (std::size_t e = 0; e < g->size(); ++e) (*g)[e] *= k;
        }
      }

      ++t;
      const double c1 = 1.0 - std::pow(config.adam.beta1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(config.adam.beta2, static_cast<double>(t));
      auto ps = params.tensors();
      auto ms = m.tensors();
      auto vs = v.tensors();
      for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
        if (!trainable[i]) continue;
        for (std::size_t e = 0; e < ps[i]->size(); ++e) {
          const double g = (*gs[i])[e];
          double& mi = (*ms[i])[e];
          double& vi = (*vs[i])[e];
          mi = config.adam.beta1 * mi + (1.0 - config.adam.beta1) * g;
          vi = config.adam.beta2 * vi + (1.0 - config.adam.beta2) * g * g;
          (*ps[i])[e] -= config.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + config.adam.epsilon);
        }
      }
    }

    double epoch_elbo = 0.0;
    for (double e : user_elbo) epoch_elbo += e;
    EpochStats es;
    es.epoch = epoch;
    es.neg_elbo_per_event = -epoch_elbo / static_cast<double>(epoch_events);
    es.mae_gap = epoch_stats.gap_terms ? epoch_stats.abs_err_gap / static_cast<double>(epoch_stats.gap_terms) : 0.0;
    es.mae_duration =
        epoch_stats.duration_terms ? epoch_stats.abs_err_duration / static_cast<double>(epoch_stats.duration_terms) : 0.0;
    es.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (!std::isfinite(es.neg_elbo_per_event))
      throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": non-finite loss");
    result.report.epochs.push_back(es);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace rtpp::train
