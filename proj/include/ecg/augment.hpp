#pragma once

#include <cstdint>

#include "ecg/rng.hpp"
#include "ecg/signal.hpp"

namespace ecg::augment {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool valid() const { return lo <= hi; }
};

/// Scale applied to sine/pulse amplitudes. Relative multiplies the drawn
/// amplitude by each lead's standard deviation.
enum class AmplitudeMode { Relative, Absolute };

struct FlipParams {
  bool enabled = true;
  double p = 0.3;
};

struct RandomDropParams {
  bool enabled = true;
  double p = 0.3;
  Range fraction{0.05, 0.15};
};

struct LeadDropParams {
  bool enabled = true;
  double p = 0.3;
  Range leads{1, 2};  // inclusive integer range
};

struct WaveParams {
  bool enabled = true;
  double p = 0.3;
  Range amplitude{0.05, 0.2};
  Range frequency{0.1, 5.0};  // Hz
  AmplitudeMode mode = AmplitudeMode::Relative;
};

struct AugmentConfig {
  FlipParams flip;
  RandomDropParams random_drop;
  LeadDropParams lead_drop;
  WaveParams square_pulse;
  WaveParams sine;

  /// Every transform disabled.
  static AugmentConfig none();
  /// Throws ConfigError on probabilities outside [0,1], inverted ranges,
  /// drop fractions >= 1 or lead counts >= 12.
  void validate() const;
};

EcgRecord flip(const EcgRecord& record);
/// Zeroes floor(fraction * length) distinct positions, the same in every lead.
EcgRecord random_drop(const EcgRecord& record, double fraction, Rng& rng);
/// Zeroes k distinct leads.
EcgRecord lead_drop(const EcgRecord& record, int k, Rng& rng);
/// Adds a * amplitude_scale(lead) * sgn(sin(2 pi f t / fs + phase)).
EcgRecord square_pulse_sum(const EcgRecord& record, double amplitude, double frequency, double phase,
                           AmplitudeMode mode);
/// Adds a * amplitude_scale(lead) * sin(2 pi f t / fs + phase).
EcgRecord sine_sum(const EcgRecord& record, double amplitude, double frequency, double phase, AmplitudeMode mode);

/// Random-parameter variants that draw from the configured ranges.
EcgRecord square_pulse_sum(const EcgRecord& record, const WaveParams& params, Rng& rng);
EcgRecord sine_sum(const EcgRecord& record, const WaveParams& params, Rng& rng);

/// Applies flip, random drop, lead drop, square pulse and sine in that
/// order, each independently with its probability.
EcgRecord apply_augmentations(const EcgRecord& record, const AugmentConfig& cfg, Rng& rng);

}  // namespace ecg::augment
