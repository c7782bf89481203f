#include "ecg/augment.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

#include "ecg/error.hpp"

namespace ecg::augment {

namespace {

void check_probability(const char* name, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment.") + name + ": probability must be in [0,1]");
}

void check_range(const char* name, const Range& r) {
  if (!r.valid()) throw ConfigError(std::string("augment.") + name + ": range min exceeds max");
}

void check_fraction(double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("augment.random_drop: fraction must be in [0, 1)");
}

void check_lead_count(int k) {
  if (k < 0 || k >= kLeads) throw ConfigError("augment.lead_drop: lead count must be in [0, 11]");
}

double lead_std(std::span<const double> lead) {
  const double n = static_cast<double>(lead.size());
  const double mu = std::accumulate(lead.begin(), lead.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : lead) ss += (v - mu) * (v - mu);
  return std::sqrt(ss / n);
}

using LeadScale = std::array<double, kLeads>;

LeadScale amplitude_scale(const EcgRecord& record, AmplitudeMode mode) {
  LeadScale scale;
  for (int c = 0; c < kLeads; ++c) scale[c] = mode == AmplitudeMode::Relative ? lead_std(record.lead(c)) : 1.0;
  return scale;
}

template <class Wave>
EcgRecord add_wave(const EcgRecord& record, double amplitude, double frequency, double phase, const LeadScale& scale,
                   Wave wave) {
  EcgRecord out = record;
  const double w = 2.0 * std::numbers::pi * frequency / record.fs;
  for (int c = 0; c < kLeads; ++c) {
    auto lead = out.lead(c);
    const double a = amplitude * scale[c];
    if (a == 0.0) continue;
    for (std::size_t t = 0; t < lead.size(); ++t) lead[t] += a * wave(w * static_cast<double>(t) + phase);
  }
  return out;
}

double square(double x) {
  const double s = std::sin(x);
  return s > 0.0 ? 1.0 : (s < 0.0 ? -1.0 : 0.0);
}

double sine(double x) { return std::sin(x); }

struct WaveDraw {
  double amplitude, frequency, phase;
};

WaveDraw draw_wave(const WaveParams& params, Rng& rng) {
  const double a = rng.uniform(params.amplitude.lo, params.amplitude.hi);
  const double f = rng.uniform(params.frequency.lo, params.frequency.hi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return {a, f, phase};
}

}  // namespace

AugmentConfig AugmentConfig::none() {
  AugmentConfig cfg;
  cfg.flip.enabled = false;
  cfg.random_drop.enabled = false;
  cfg.lead_drop.enabled = false;
  cfg.square_pulse.enabled = false;
  cfg.sine.enabled = false;
  return cfg;
}

void AugmentConfig::validate() const {
  check_probability("flip", flip.p);
  check_probability("random_drop", random_drop.p);
  check_probability("lead_drop", lead_drop.p);
  check_probability("square_pulse", square_pulse.p);
  check_probability("sine", sine.p);
  check_range("random_drop.fraction", random_drop.fraction);
  check_range("lead_drop.leads", lead_drop.leads);
  check_range("square_pulse.amplitude", square_pulse.amplitude);
  check_range("square_pulse.frequency", square_pulse.frequency);
  check_range("sine.amplitude", sine.amplitude);
  check_range("sine.frequency", sine.frequency);
  check_fraction(random_drop.fraction.lo);
  check_fraction(random_drop.fraction.hi);
  check_lead_count(static_cast<int>(lead_drop.leads.lo));
  check_lead_count(static_cast<int>(lead_drop.leads.hi));
  if (lead_drop.leads.lo != std::floor(lead_drop.leads.lo) || lead_drop.leads.hi != std::floor(lead_drop.leads.hi))
    throw ConfigError("augment.lead_drop: lead counts must be integers");
}

EcgRecord flip(const EcgRecord& record) {
  EcgRecord out = record;
  for (double& v : out.signal) v = -v;
  return out;
}

EcgRecord random_drop(const EcgRecord& record, double fraction, Rng& rng) {
  check_fraction(fraction);
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(record.length)));
  EcgRecord out = record;
  for (std::size_t t : rng.sample_without_replacement(static_cast<std::size_t>(record.length), count)) {
    for (int c = 0; c < kLeads; ++c) out.lead(c)[t] = 0.0;
  }
  return out;
}

EcgRecord lead_drop(const EcgRecord& record, int k, Rng& rng) {
  check_lead_count(k);
  EcgRecord out = record;
  for (std::size_t c : rng.sample_without_replacement(kLeads, static_cast<std::size_t>(k))) {
    auto lead = out.lead(static_cast<int>(c));
    std::fill(lead.begin(), lead.end(), 0.0);
  }
  return out;
}

EcgRecord square_pulse_sum(const EcgRecord& record, double amplitude, double frequency, double phase,
                           AmplitudeMode mode) {
  return add_wave(record, amplitude, frequency, phase, amplitude_scale(record, mode), square);
}

EcgRecord sine_sum(const EcgRecord& record, double amplitude, double frequency, double phase, AmplitudeMode mode) {
  return add_wave(record, amplitude, frequency, phase, amplitude_scale(record, mode), sine);
}

EcgRecord square_pulse_sum(const EcgRecord& record, const WaveParams& params, Rng& rng) {
  const auto d = draw_wave(params, rng);
  return square_pulse_sum(record, d.amplitude, d.frequency, d.phase, params.mode);
}

EcgRecord sine_sum(const EcgRecord& record, const WaveParams& params, Rng& rng) {
  const auto d = draw_wave(params, rng);
  return sine_sum(record, d.amplitude, d.frequency, d.phase, params.mode);
}

EcgRecord apply_augmentations(const EcgRecord& record, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  EcgRecord out = record;
  // Relative wave amplitudes refer to the record as it entered the pipeline,
  // so the two additive transforms commute.
  const LeadScale pulse_scale = amplitude_scale(record, cfg.square_pulse.mode);
  const LeadScale sine_scale = amplitude_scale(record, cfg.sine.mode);
  // Each transform draws its firing decision even when disabled so that the
  // stream position of later transforms does not depend on earlier flags.
  if (rng.bernoulli(cfg.flip.p) && cfg.flip.enabled) out = flip(out);
  {
    Rng sub = rng.substream(rng.next_u64());
    if (rng.bernoulli(cfg.random_drop.p) && cfg.random_drop.enabled) {
      out = random_drop(out, sub.uniform(cfg.random_drop.fraction.lo, cfg.random_drop.fraction.hi), sub);
    }
  }
  {
    Rng sub = rng.substream(rng.next_u64());
    if (rng.bernoulli(cfg.lead_drop.p) && cfg.lead_drop.enabled) {
      const int k = static_cast<int>(sub.uniform_int(static_cast<std::int64_t>(cfg.lead_drop.leads.lo),
                                                     static_cast<std::int64_t>(cfg.lead_drop.leads.hi)));
      out = lead_drop(out, k, sub);
    }
  }
  {
    Rng sub = rng.substream(rng.next_u64());
    if (rng.bernoulli(cfg.square_pulse.p) && cfg.square_pulse.enabled) {
      const auto d = draw_wave(cfg.square_pulse, sub);
      out = add_wave(out, d.amplitude, d.frequency, d.phase, pulse_scale, square);
    }
  }
  {
    Rng sub = rng.substream(rng.next_u64());
    if (rng.bernoulli(cfg.sine.p) && cfg.sine.enabled) {
      const auto d = draw_wave(cfg.sine, sub);
      out = add_wave(out, d.amplitude, d.frequency, d.phase, sine_scale, sine);
    }
  }
  return out;
}

}  // namespace ecg::augment
