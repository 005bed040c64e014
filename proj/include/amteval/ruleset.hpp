// Composition rules for test pieces: validation and seeded generation of
// compliant pieces.

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "amteval/midi.hpp"

namespace amteval {

namespace gm {
inline constexpr int kPiano = 0;
inline constexpr int kViolin = 40;
inline constexpr int kViola = 41;
inline constexpr int kCello = 42;
inline constexpr int kTrombone = 57;
inline constexpr int kOboe = 68;
inline constexpr int kBassoon = 70;
inline constexpr int kFlute = 73;
}  // namespace gm

struct Rules {
  double min_bpm = 60.0;
  double max_bpm = 90.0;
  std::vector<Meter> meters{{3, 4}, {4, 4}, {6, 8}};
  int subdivisions_per_quarter = 4;  // sixteenth notes
  int min_pitch = 36;                // C2
  int max_pitch = 96;                // C7
  int min_velocity = 33;             // pp
  int max_velocity = 112;            // ff
  std::set<int> instruments{gm::kPiano, gm::kViolin, gm::kViola,    gm::kCello,
                            gm::kFlute, gm::kBassoon, gm::kTrombone, gm::kOboe};
  std::set<int> strings{gm::kViolin, gm::kViola, gm::kCello};
  int max_instruments = 3;
  int max_strings = 1;
};

/// Rule numbers as announced to participants.
enum class Rule : int {
  kTempo = 1,
  kMeter = 2,
  kSubdivision = 3,
  kOrnaments = 4,
  kPitchRange = 5,
  kDynamics = 6,
  kInstruments = 7,
  kStrings = 8,
};

struct Violation {
  Rule rule;
  int program = -1;     // -1: piece-level
  long note_index = -1; // -1: track- or piece-level
  std::string message;

  int rule_id() const { return static_cast<int>(rule); }
};

/// Scientific pitch notation with C4 = 60. Accepts one optional '#' or 'b'.
inline int note_name_to_midi(std::string_view name) {
  static constexpr std::array<int, 7> kPitchClass{9, 11, 0, 2, 4, 5, 7};  // A..G
  auto fail = [&] { return std::invalid_argument("unparseable note name '" + std::string(name) + "'"); };
  if (name.empty()) throw fail();
  const char letter = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
  if (letter < 'A' || letter > 'G') throw fail();
  int pc = kPitchClass[letter - 'A'];
  std::size_t i = 1;
  if (i < name.size() && (name[i] == '#' || name[i] == 'b')) {
    pc += name[i] == '#' ? 1 : -1;
    ++i;
  }
  if (i >= name.size()) throw fail();
  bool negative = false;
  if (name[i] == '-') {
    negative = true;
    ++i;
  }
  if (i >= name.size()) throw fail();
  int octave = 0;
  for (; i < name.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(name[i]))) throw fail();
    octave = octave * 10 + (name[i] - '0');
    if (octave > 10) throw fail();
  }
  if (negative) octave = -octave;
  const int midi = 12 * (octave + 1) + pc;
  if (midi < 0 || midi > 127) throw std::invalid_argument("note '" + std::string(name) + "' outside MIDI range");
  return midi;
}

namespace detail {

inline bool meter_allowed(const Rules& rules, const Meter& m) {
  return std::find(rules.meters.begin(), rules.meters.end(), m) != rules.meters.end();
}

inline std::string meter_text(const Meter& m) {
  return std::to_string(m.numerator) + "/" + std::to_string(m.denominator);
}

// Distance in ticks from the nearest grid line.
inline double grid_error(double tick, double grid) { return std::abs(tick - std::round(tick / grid) * grid); }

}  // namespace detail

/// Returns every violation; an empty list means the piece complies.
inline std::vector<Violation> validate_piece(const Piece& piece, const Rules& rules = {}) {
  std::vector<Violation> out;
  constexpr double kBpmSlack = 0.01;
  constexpr double kTickSlack = 1.0 + 1e-6;

  for (const auto& e : piece.tempo_map.entries()) {
    const double bpm = e.bpm();
    if (bpm < rules.min_bpm - kBpmSlack || bpm > rules.max_bpm + kBpmSlack) {
      out.push_back({Rule::kTempo, -1, -1,
                     "tempo " + std::to_string(bpm) + " BPM at tick " + std::to_string(e.tick) + " outside [" +
                         std::to_string(rules.min_bpm) + ", " + std::to_string(rules.max_bpm) + "]"});
    }
  }

  if (!detail::meter_allowed(rules, piece.meter)) {
    out.push_back({Rule::kMeter, -1, -1, "meter " + detail::meter_text(piece.meter) + " not allowed"});
  }
  for (const auto& mc : piece.meter_changes) {
    if (!detail::meter_allowed(rules, mc.meter)) {
      out.push_back({Rule::kMeter, -1, -1,
                     "meter " + detail::meter_text(mc.meter) + " at tick " + std::to_string(mc.tick) + " not allowed"});
    }
  }

  const double grid = static_cast<double>(piece.division()) / rules.subdivisions_per_quarter;
  for (const auto& track : piece.tracks) {
    for (std::size_t i = 0; i < track.notes.size(); ++i) {
      const Note& n = track.notes[i];
      const long idx = static_cast<long>(i);
      const double on = piece.tempo_map.ticks(n.onset);
      const double off = piece.tempo_map.ticks(n.offset);
      if (detail::grid_error(on, grid) > kTickSlack || detail::grid_error(off, grid) > kTickSlack) {
        out.push_back({Rule::kSubdivision, track.program, idx, "note off the sixteenth-note grid"});
      } else {
        const double units = (off - on) / grid;
        for (double dd : {7.0, 14.0, 28.0}) {
          if (std::abs(units - dd) * grid <= kTickSlack) {
            out.push_back({Rule::kOrnaments, track.program, idx, "double-dotted note value"});
            break;
          }
        }
      }
      if (n.pitch < rules.min_pitch || n.pitch > rules.max_pitch) {
        out.push_back({Rule::kPitchRange, track.program, idx, "pitch " + std::to_string(n.pitch) + " out of range"});
      }
      if (n.velocity < rules.min_velocity || n.velocity > rules.max_velocity) {
        out.push_back({Rule::kDynamics, track.program, idx,
                       "velocity " + std::to_string(n.velocity) + " outside the pp-ff range"});
      }
    }
  }

  int strings = 0;
  for (const auto& track : piece.tracks) {
    if (!rules.instruments.contains(track.program)) {
      out.push_back({Rule::kInstruments, track.program, -1,
                     "program " + std::to_string(track.program) + " not in the instrument whitelist"});
    }
    if (rules.strings.contains(track.program)) ++strings;
  }
  if (static_cast<int>(piece.tracks.size()) > rules.max_instruments) {
    out.push_back({Rule::kInstruments, -1, -1, std::to_string(piece.tracks.size()) + " instruments exceed the limit"});
  }
  if (strings > rules.max_strings) {
    out.push_back({Rule::kStrings, -1, -1, std::to_string(strings) + " string instruments in one piece"});
  }
  return out;
}

struct GeneratorConfig {
  double duration_s = 20.0;
  int instruments = 1;
};

/// Conventional sounding range of each whitelisted instrument.
inline std::pair<int, int> instrument_range(int program) {
  switch (program) {
    case gm::kPiano: return {36, 96};
    case gm::kViolin: return {55, 96};
    case gm::kViola: return {48, 88};
    case gm::kCello: return {36, 76};
    case gm::kFlute: return {60, 96};
    case gm::kBassoon: return {36, 75};
    case gm::kTrombone: return {40, 72};
    case gm::kOboe: return {58, 91};
    default: return {36, 96};
  }
}

namespace detail {

// Portable bounded draws; std distributions differ between standard libraries.
class Draw {
 public:
  explicit Draw(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  int between(int lo, int hi) { return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1))); }

  template <typename T>
  const T& pick(const std::vector<T>& v) { return v[below(v.size())]; }

 private:
  std::mt19937_64 engine_;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline int sixteenths_per_measure(const Meter& m) { return m.numerator * 16 / m.denominator; }

}  // namespace detail

/// Seeded piece that satisfies every rule: quarter-note BPM in range,
/// diatonic pitches within each instrument's range, durations on the
/// sixteenth grid excluding double-dotted values.
inline Piece generate_piece(std::uint64_t seed, const GeneratorConfig& config = {}, const Rules& rules = {}) {
  if (config.instruments < 1 || config.instruments > rules.max_instruments) {
    throw std::invalid_argument("instrument count " + std::to_string(config.instruments) + " outside [1, " +
                                std::to_string(rules.max_instruments) + "]");
  }
  if (!(config.duration_s > 0.0) || config.duration_s > 600.0) {
    throw std::invalid_argument("piece duration must be in (0, 600] seconds");
  }
  std::vector<int> pool(rules.instruments.begin(), rules.instruments.end());
  if (static_cast<int>(pool.size()) < config.instruments) {
    throw std::invalid_argument("instrument whitelist smaller than the requested instrument count");
  }

  detail::Draw draw(seed);
  const int bpm = draw.between(static_cast<int>(std::ceil(rules.min_bpm)), static_cast<int>(std::floor(rules.max_bpm)));
  const auto us = static_cast<std::uint32_t>(std::llround(60'000'000.0 / bpm));
  const Meter meter = draw.pick(rules.meters);

  for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[draw.below(i)]);
  std::vector<int> programs;
  int strings = 0;
  for (int p : pool) {
    if (static_cast<int>(programs.size()) == config.instruments) break;
    const bool is_string = rules.strings.contains(p);
    if (is_string && strings >= rules.max_strings) continue;
    strings += is_string;
    programs.push_back(p);
  }
  if (static_cast<int>(programs.size()) < config.instruments) {
    throw std::invalid_argument("rules admit fewer than the requested number of instruments");
  }

  Piece piece;
  piece.tempo_map = TempoMap(kWriteDivision, {{0, us}});
  piece.meter = meter;
  const int tick_per_16th = kWriteDivision / 4;
  const int per_measure = detail::sixteenths_per_measure(meter);
  const double measure_s = per_measure * (us / 4.0) / 1e6;
  const int measures = std::max(1, static_cast<int>(std::lround(config.duration_s / measure_s)));
  const int total = measures * per_measure;  // in sixteenths

  static const std::vector<int> kMajor{0, 2, 4, 5, 7, 9, 11};
  static const std::vector<int> kDurations{1, 2, 2, 3, 4, 4, 4, 6, 8, 8, 12, 16};
  const int tonic = draw.between(0, 11);
  auto diatonic = [&](int pitch) { return std::find(kMajor.begin(), kMajor.end(), ((pitch - tonic) % 12 + 12) % 12) != kMajor.end(); };

  for (int program : programs) {
    auto [lo, hi] = instrument_range(program);
    lo = std::max(lo, rules.min_pitch);
    hi = std::min(hi, rules.max_pitch);
    std::vector<int> scale;
    for (int p = lo; p <= hi; ++p) {
      if (diatonic(p)) scale.push_back(p);
    }
    auto& notes = piece.track(program).notes;
    int degree = static_cast<int>(scale.size() / 2);
    int velocity = draw.between(rules.min_velocity, rules.max_velocity);
    int pos = 0;
    while (pos < total) {
      if (draw.below(6) == 0) {
        pos += draw.between(1, 4);
        continue;
      }
      int dur = draw.pick(kDurations);
      while (pos + dur > total) dur = dur > 1 ? dur / 2 : 1;
      degree = std::clamp(degree + draw.between(-3, 3), 0, static_cast<int>(scale.size()) - 1);
      if (draw.below(8) == 0) velocity = draw.between(rules.min_velocity, rules.max_velocity);
      const double on = piece.tempo_map.seconds(static_cast<std::uint64_t>(pos) * tick_per_16th);
      const double off = piece.tempo_map.seconds(static_cast<std::uint64_t>(pos + dur) * tick_per_16th);
      notes.push_back({scale[degree], on, off, velocity});
      // Piano sometimes plays a diatonic third below.
      if (program == gm::kPiano && degree >= 2 && draw.below(3) == 0) {
        notes.push_back({scale[degree - 2], on, off, velocity});
      }
      pos += dur;
    }
    sort_notes(notes);
  }
  return piece;
}

/// Number of pieces per instrument count (index 0 = solo) for `count`
/// pieces split in proportion to `mix` by largest remainder.
inline std::array<int, 3> allocate_mix(int count, const std::array<int, 3>& mix) {
  if (count < 1) throw std::invalid_argument("piece count must be at least 1");
  long total = 0;
  for (int w : mix) {
    if (w < 0) throw std::invalid_argument("mix weights must be non-negative");
    total += w;
  }
  if (total == 0) throw std::invalid_argument("mix has no positive weight");
  std::array<int, 3> out{};
  std::array<long, 3> rem{};
  int assigned = 0;
  for (int k = 0; k < 3; ++k) {
    out[k] = static_cast<int>(static_cast<long>(count) * mix[k] / total);
    rem[k] = static_cast<long>(count) * mix[k] % total;
    assigned += out[k];
  }
  while (assigned < count) {
    int best = -1;
    for (int k = 0; k < 3; ++k) {
      if (mix[k] > 0 && (best < 0 || rem[k] > rem[best])) best = k;
    }
    ++out[best];
    rem[best] = -1;
    ++assigned;
  }
  return out;
}

inline constexpr std::array<int, 3> kDefaultMix{6, 24, 46};

struct GeneratedPiece {
  std::string id;  // piece_{seed}_{index}
  Piece piece;
};

inline std::vector<GeneratedPiece> generate_set(std::uint64_t seed, int count,
                                                const std::array<int, 3>& mix = kDefaultMix,
                                                double duration_s = 20.0, const Rules& rules = {}) {
  const auto alloc = allocate_mix(count, mix);
  std::vector<GeneratedPiece> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < alloc[k]; ++i) {
      const auto index = out.size();
      out.push_back({"piece_" + std::to_string(seed) + "_" + std::to_string(index),
                     generate_piece(detail::mix_seed(seed, index), {duration_s, k + 1}, rules)});
    }
  }
  return out;
}

}  // namespace amteval
