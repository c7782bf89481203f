#include "ecg/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "ecg/error.hpp"

namespace ecg {

EcgRecord::EcgRecord(std::string id_, double fs_, std::int64_t length_)
    : id(std::move(id_)), fs(fs_), length(length_), signal(static_cast<std::size_t>(kLeads * length_), 0.0) {}

void EcgRecord::validate() const {
  if (length < 1) throw DataError("record " + id + ": length must be >= 1");
  if (signal.size() != static_cast<std::size_t>(kLeads * length))
    throw DataError("record " + id + ": expected " + std::to_string(kLeads) + " leads x " + std::to_string(length) +
                    " samples, buffer holds " + std::to_string(signal.size()));
  if (!(fs > 0.0)) throw DataError("record " + id + ": sampling rate must be positive");
  for (double v : signal)
    if (!std::isfinite(v)) throw DataError("record " + id + ": non-finite sample");
}

namespace signal {

using cplx = std::complex<double>;

void FilterSpec::validate() const {
  if (order < 1) throw ConfigError("filter: order must be >= 1");
  if (!(fs > 0.0)) throw ConfigError("filter: sampling rate must be positive");
  if (!(high_cut < fs / 2.0))
    throw ConfigError("filter: high cut " + std::to_string(high_cut) + " Hz violates Nyquist for fs=" +
                      std::to_string(fs) + " Hz (need fs > 2*high_cut)");
  if (!(low_cut > 0.0 && low_cut < high_cut))
    throw ConfigError("filter: need 0 < low_cut < high_cut, got " + std::to_string(low_cut) + ", " +
                      std::to_string(high_cut));
}

std::vector<Biquad> design_butterworth_bandpass(const FilterSpec& spec) {
  spec.validate();
  const int n = spec.order;
  const double k2 = 2.0 * spec.fs;
  // Pre-warp the band edges so the digital edges land exactly at low/high.
  const double w1 = k2 * std::tan(std::numbers::pi * spec.low_cut / spec.fs);
  const double w2 = k2 * std::tan(std::numbers::pi * spec.high_cut / spec.fs);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;

  // Analog low-pass prototype poles in the upper half plane (and the real one
  // for odd orders); each maps to two band-pass poles.
  std::vector<cplx> bp_poles;
  for (int k = 0; k < n; ++k) {
    const double theta = std::numbers::pi * (2.0 * k + n + 1) / (2.0 * n);
    const cplx p = std::polar(1.0, theta);
    const cplx half = p * bw / 2.0;
    const cplx root = std::sqrt(half * half - w0sq);
    bp_poles.push_back(half + root);
    bp_poles.push_back(half - root);
  }
  // Bilinear transform.
  std::vector<cplx> z_poles;
  for (const cplx& s : bp_poles) z_poles.push_back((k2 + s) / (k2 - s));

  // Pair each pole in the upper half plane with its conjugate; real poles
  // (odd prototype orders) are paired with each other.
  std::vector<cplx> upper, real;
  for (const cplx& z : z_poles) {
    if (std::abs(z.imag()) < 1e-12 * std::max(1.0, std::abs(z))) {
      real.push_back({z.real(), 0.0});
    } else if (z.imag() > 0) {
      upper.push_back(z);
    }
  }
  std::sort(upper.begin(), upper.end(), [](const cplx& a, const cplx& b) { return std::abs(a) < std::abs(b); });
  std::sort(real.begin(), real.end(), [](const cplx& a, const cplx& b) { return a.real() < b.real(); });

  std::vector<Biquad> sections;
  for (const cplx& z : upper) {
    Biquad s;
    // Band-pass zeros: N at z = 1 (s = 0) and N at z = -1 (s = inf); one of each per section.
    s.b = {1.0, 0.0, -1.0};
    s.a = {1.0, -2.0 * z.real(), std::norm(z)};
    sections.push_back(s);
  }
  for (std::size_t i = 0; i + 1 < real.size(); i += 2) {
    Biquad s;
    s.b = {1.0, 0.0, -1.0};
    s.a = {1.0, -(real[i].real() + real[i + 1].real()), real[i].real() * real[i + 1].real()};
    sections.push_back(s);
  }
  if (static_cast<int>(sections.size()) != n) throw Error("filter design: unexpected pole layout");

  // Unit gain at the geometric centre of the pass band.
  const double centre_hz = std::atan(std::sqrt(w0sq) / k2) * spec.fs / std::numbers::pi;
  const double gain = std::abs(frequency_response(sections, centre_hz, spec.fs));
  for (double& b : sections[0].b) b /= gain;
  return sections;
}

std::complex<double> frequency_response(std::span<const Biquad> sections, double hz, double fs) {
  const cplx zinv = std::polar(1.0, -2.0 * std::numbers::pi * hz / fs);
  cplx h = 1.0;
  for (const auto& s : sections) {
    const cplx num = s.b[0] + s.b[1] * zinv + s.b[2] * zinv * zinv;
    const cplx den = s.a[0] + s.a[1] * zinv + s.a[2] * zinv * zinv;
    h *= num / den;
  }
  return h;
}

namespace {

// Transposed direct form II with explicit state (z1, z2) per section.
struct SectionState {
  double z1 = 0.0, z2 = 0.0;
};

void run_cascade(std::span<const Biquad> sections, std::vector<SectionState>& state, std::vector<double>& x) {
  for (std::size_t k = 0; k < sections.size(); ++k) {
    const auto& s = sections[k];
    auto& st = state[k];
    for (double& v : x) {
      const double y = s.b[0] * v + st.z1;
      st.z1 = s.b[1] * v - s.a[1] * y + st.z2;
      st.z2 = s.b[2] * v - s.a[2] * y;
      v = y;
    }
  }
}

// Steady-state internal state of each section for a unit step input, scaled
// through the cascade (the per-section input level is the DC gain of the
// preceding sections).
std::vector<SectionState> step_state(std::span<const Biquad> sections) {
  std::vector<SectionState> zi(sections.size());
  double level = 1.0;
  for (std::size_t k = 0; k < sections.size(); ++k) {
    const auto& s = sections[k];
    const double dc = (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[1] + s.a[2]);
    // Fixed point of the TDF-II recurrences for constant input u and output y = dc*u.
    const double u = level;
    const double y = dc * u;
    zi[k].z2 = s.b[2] * u - s.a[2] * y;
    zi[k].z1 = y - s.b[0] * u;
    level = y;
  }
  return zi;
}

}  // namespace

std::vector<double> sosfilt(std::span<const Biquad> sections, std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  std::vector<SectionState> state(sections.size());
  run_cascade(sections, state, y);
  return y;
}

std::vector<double> sosfiltfilt(std::span<const Biquad> sections, std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  const std::size_t pad = std::min<std::size_t>(n - 1, 3 * (2 * sections.size() + 1));
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  const auto unit = step_state(sections);
  auto scaled = [&](double level) {
    auto st = unit;
    for (auto& s : st) {
      s.z1 *= level;
      s.z2 *= level;
    }
    return st;
  };
  auto state = scaled(ext.front());
  run_cascade(sections, state, ext);
  std::reverse(ext.begin(), ext.end());
  state = scaled(ext.front());
  run_cascade(sections, state, ext);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

EcgRecord butterworth_bandpass(const EcgRecord& record, const FilterSpec& spec) {
  FilterSpec effective = spec;
  effective.fs = record.fs;
  const auto sections = design_butterworth_bandpass(effective);
  EcgRecord out = record;
  for (int c = 0; c < kLeads; ++c) {
    const auto filtered = sosfiltfilt(sections, record.lead(c));
    std::copy(filtered.begin(), filtered.end(), out.lead(c).begin());
  }
  return out;
}

// ------------------------------------------------------------- segmentation

SegmentSpec draw_segment(std::int64_t source_length, std::int64_t length, Rng& rng) {
  if (length < 1) throw ConfigError("segment: length must be >= 1");
  if (length > source_length)
    throw DataError("segment: length " + std::to_string(length) + " exceeds record length " +
                    std::to_string(source_length) + " (pad the record first)");
  return {length, rng.uniform_int(0, source_length - length), source_length};
}

EcgRecord apply_segment(const EcgRecord& record, const SegmentSpec& segment) {
  if (!segment.valid() || segment.source != record.length)
    throw DataError("segment: [" + std::to_string(segment.start) + ", " + std::to_string(segment.start + segment.length) +
                    ") outside record of length " + std::to_string(record.length));
  EcgRecord out(record.id, record.fs, segment.length);
  out.labels = record.labels;
  for (int c = 0; c < kLeads; ++c) {
    const auto src = record.lead(c).subspan(static_cast<std::size_t>(segment.start), static_cast<std::size_t>(segment.length));
    std::copy(src.begin(), src.end(), out.lead(c).begin());
  }
  return out;
}

EcgRecord segment_extract(const EcgRecord& record, std::int64_t length, Rng& rng) {
  return apply_segment(record, draw_segment(record.length, length, rng));
}

EcgRecord pad_or_truncate(const EcgRecord& record, std::int64_t target) {
  if (target < 1) throw ConfigError("pad_or_truncate: target must be >= 1");
  if (target == record.length) return record;
  EcgRecord out(record.id, record.fs, target);
  out.labels = record.labels;
  const std::int64_t keep = std::min(target, record.length);
  for (int c = 0; c < kLeads; ++c) std::copy_n(record.lead(c).begin(), keep, out.lead(c).begin());
  return out;
}

// ------------------------------------------------------------ normalization

std::string_view to_string(NormalizationMethod method) {
  switch (method) {
    case NormalizationMethod::MinMax: return "minmax";
    case NormalizationMethod::ZScore: return "zscore";
    case NormalizationMethod::RScale: return "rscale";
    case NormalizationMethod::LogScale: return "logscale";
    case NormalizationMethod::L2: return "l2";
  }
  return "unknown";
}

NormalizationMethod parse_normalization(std::string_view name) {
  for (auto m : {NormalizationMethod::MinMax, NormalizationMethod::ZScore, NormalizationMethod::RScale,
                 NormalizationMethod::LogScale, NormalizationMethod::L2}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown normalization '" + std::string(name) + "' (expected minmax, zscore, rscale, logscale, l2)");
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw DataError("percentile of empty sequence");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

void normalize_lead(std::span<double> lead, NormalizationMethod method) {
  if (lead.empty()) return;
  const double n = static_cast<double>(lead.size());
  switch (method) {
    case NormalizationMethod::MinMax: {
      const auto [mn, mx] = std::minmax_element(lead.begin(), lead.end());
      const double lo = *mn;
      double range = *mx - lo;
      if (range == 0.0) range = kNormEpsilon;
      for (double& v : lead) v = (v - lo) / range;
      break;
    }
    case NormalizationMethod::ZScore: {
      const double mu = std::accumulate(lead.begin(), lead.end(), 0.0) / n;
      double ss = 0.0;
      for (double v : lead) ss += (v - mu) * (v - mu);
      double sd = std::sqrt(ss / n);
      if (sd == 0.0) sd = kNormEpsilon;
      for (double& v : lead) v = (v - mu) / sd;
      break;
    }
    case NormalizationMethod::RScale: {
      std::vector<double> copy(lead.begin(), lead.end());
      const double med = percentile(copy, 0.5);
      double iqr = percentile(copy, 0.75) - percentile(copy, 0.25);
      if (iqr == 0.0) iqr = kNormEpsilon;
      for (double& v : lead) v = (v - med) / iqr;
      break;
    }
    case NormalizationMethod::LogScale:
      for (double& v : lead) v = std::copysign(std::log1p(std::abs(v)), v);
      break;
    case NormalizationMethod::L2: {
      double ss = 0.0;
      for (double v : lead) ss += v * v;
      double norm = std::sqrt(ss);
      if (norm == 0.0) norm = kNormEpsilon;
      for (double& v : lead) v /= norm;
      break;
    }
  }
}

EcgRecord normalize(const EcgRecord& record, NormalizationMethod method) {
  EcgRecord out = record;
  for (int c = 0; c < kLeads; ++c) normalize_lead(out.lead(c), method);
  return out;
}

}  // namespace signal
}  // namespace ecg
