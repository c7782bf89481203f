#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ecg/rng.hpp"

namespace ecg {

inline constexpr int kLeads = 12;

/// Binary label vector. For multi-label tasks any subset of entries may be
/// set; multi-class has exactly one; binary has a single entry.
using LabelVector = std::vector<std::uint8_t>;

/// One 12-lead recording in millivolts, stored lead-major: sample t of lead c
/// lives at signal[c * length + t].
struct EcgRecord {
  std::string id;
  double fs = 500.0;
  std::int64_t length = 0;
  std::vector<double> signal;
  LabelVector labels;

  EcgRecord() = default;
  EcgRecord(std::string id, double fs, std::int64_t length);

  std::span<double> lead(int c) { return {signal.data() + c * length, static_cast<std::size_t>(length)}; }
  std::span<const double> lead(int c) const {
    return {signal.data() + c * length, static_cast<std::size_t>(length)};
  }
  /// Throws DataError unless 12 leads, length >= 1, fs > 0 and all samples finite.
  void validate() const;
};

namespace signal {

/// One biquad: b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2.
struct Biquad {
  std::array<double, 3> b{};
  std::array<double, 3> a{1.0, 0.0, 0.0};
};

struct FilterSpec {
  int order = 2;
  double low_cut = 1.0;
  double high_cut = 45.0;
  double fs = 500.0;

  /// Throws ConfigError unless 0 < low < high < fs/2 and order >= 1.
  void validate() const;
};

/// Butterworth bandpass designed by bilinear transform (with pre-warped band
/// edges) of the analog prototype. A prototype of order N gives N biquads.
std::vector<Biquad> design_butterworth_bandpass(const FilterSpec& spec);

/// Complex response of a cascade at frequency `hz`.
std::complex<double> frequency_response(std::span<const Biquad> sections, double hz, double fs);

/// Causal direct-form-II-transposed filtering with zero initial state.
std::vector<double> sosfilt(std::span<const Biquad> sections, std::span<const double> x);

/// Zero-phase forward-backward filtering. The signal is extended at both ends
/// by odd reflection and each pass starts from the steady-state response to
/// the first sample, which suppresses edge transients.
std::vector<double> sosfiltfilt(std::span<const Biquad> sections, std::span<const double> x);

/// Filters every lead independently with identical coefficients.
EcgRecord butterworth_bandpass(const EcgRecord& record, const FilterSpec& spec);

// ------------------------------------------------------------- segmentation

struct SegmentSpec {
  std::int64_t length = 2048;  // l
  std::int64_t start = 0;      // s
  std::int64_t source = 0;     // m

  bool valid() const { return start >= 0 && length >= 1 && start + length <= source; }
};

inline constexpr std::int64_t kDefaultSegmentLength = 2048;
inline constexpr std::int64_t kMaxRecordLength = 5000;

/// Draws s uniformly from {0, ..., m - l}.
SegmentSpec draw_segment(std::int64_t source_length, std::int64_t length, Rng& rng);

/// Copies samples [s, s + l) of every lead.
EcgRecord apply_segment(const EcgRecord& record, const SegmentSpec& segment);

/// Random crop of length l shared across leads. Throws DataError if l > m.
EcgRecord segment_extract(const EcgRecord& record, std::int64_t length, Rng& rng);

/// Keeps the first `target` samples or appends zeros.
EcgRecord pad_or_truncate(const EcgRecord& record, std::int64_t target);

// ------------------------------------------------------------ normalization

enum class NormalizationMethod { MinMax, ZScore, RScale, LogScale, L2 };

inline constexpr double kNormEpsilon = 1e-8;

std::string_view to_string(NormalizationMethod method);
NormalizationMethod parse_normalization(std::string_view name);

/// In-place normalization of one lead.
void normalize_lead(std::span<double> lead, NormalizationMethod method);

/// Applies the method to each lead separately.
EcgRecord normalize(const EcgRecord& record, NormalizationMethod method);

/// Percentile with linear interpolation between order statistics, q in [0, 1].
double percentile(std::vector<double> values, double q);

}  // namespace signal
}  // namespace ecg
