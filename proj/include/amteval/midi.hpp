// Standard MIDI File reading/writing and the note-level piece model.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace amteval {

inline constexpr std::uint32_t kDefaultMicrosPerQuarter = 500000;
inline constexpr std::uint16_t kWriteDivision = 480;
inline constexpr int kPercussionChannel = 9;

/// One sounded pitch. Times are wall-clock seconds.
struct Note {
  int pitch = 60;
  double onset = 0.0;
  double offset = 0.0;
  int velocity = 64;

  double duration() const { return offset - onset; }

  friend bool operator==(const Note&, const Note&) = default;
};

/// Ordering used for every note list: onset, then pitch.
inline bool note_less(const Note& a, const Note& b) {
  return std::tie(a.onset, a.pitch, a.offset, a.velocity) <
         std::tie(b.onset, b.pitch, b.offset, b.velocity);
}

inline void sort_notes(std::vector<Note>& notes) {
  std::sort(notes.begin(), notes.end(), note_less);
}

struct InstrumentTrack {
  int program = 0;
  std::vector<Note> notes;

  friend bool operator==(const InstrumentTrack&, const InstrumentTrack&) = default;
};

struct TempoEntry {
  std::uint64_t tick = 0;
  std::uint32_t micros_per_quarter = kDefaultMicrosPerQuarter;

  double bpm() const { return 60'000'000.0 / micros_per_quarter; }

  friend bool operator==(const TempoEntry&, const TempoEntry&) = default;
};

/// Piecewise-constant tempo over ticks. Entries are kept sorted with strictly
/// increasing ticks and always start at tick 0.
class TempoMap {
 public:
  TempoMap() : TempoMap(kWriteDivision) {}
  explicit TempoMap(std::uint16_t division, std::vector<TempoEntry> entries = {})
      : division_(division) {
    if (division == 0) throw std::invalid_argument("tempo map division must be positive");
    std::stable_sort(entries.begin(), entries.end(),
                     [](const TempoEntry& a, const TempoEntry& b) { return a.tick < b.tick; });
    for (const auto& e : entries) {
      if (e.micros_per_quarter == 0) throw std::invalid_argument("tempo of 0 us per quarter");
      // A later entry at the same tick replaces the earlier one.
      if (!entries_.empty() && entries_.back().tick == e.tick) {
        entries_.back() = e;
      } else {
        entries_.push_back(e);
      }
    }
    if (entries_.empty() || entries_.front().tick != 0) {
      entries_.insert(entries_.begin(), TempoEntry{0, kDefaultMicrosPerQuarter});
    }
    // Cumulative tick*microsecond products at each segment start keep the
    // conversion exact at boundaries.
    prefix_.resize(entries_.size(), 0);
    for (std::size_t i = 1; i < entries_.size(); ++i) {
      prefix_[i] = prefix_[i - 1] +
                   (entries_[i].tick - entries_[i - 1].tick) * entries_[i - 1].micros_per_quarter;
    }
  }

  std::uint16_t division() const { return division_; }
  const std::vector<TempoEntry>& entries() const { return entries_; }

  double seconds(std::uint64_t tick) const {
    const std::size_t seg = segment_for_tick(tick);
    const std::uint64_t scaled =
        prefix_[seg] + (tick - entries_[seg].tick) * entries_[seg].micros_per_quarter;
    return static_cast<double>(scaled) / (static_cast<double>(division_) * 1e6);
  }

  /// Fractional tick position of a time in seconds (inverse of seconds()).
  double ticks(double seconds) const {
    if (seconds <= 0.0) return 0.0;
    const double scaled = seconds * static_cast<double>(division_) * 1e6;
    std::size_t seg = 0;
    for (std::size_t i = 1; i < entries_.size(); ++i) {
      if (static_cast<double>(prefix_[i]) <= scaled) seg = i;
    }
    return static_cast<double>(entries_[seg].tick) +
           (scaled - static_cast<double>(prefix_[seg])) / entries_[seg].micros_per_quarter;
  }

  std::uint64_t nearest_tick(double seconds) const {
    const double t = ticks(seconds);
    return t <= 0.0 ? 0 : static_cast<std::uint64_t>(t + 0.5);
  }

  friend bool operator==(const TempoMap& a, const TempoMap& b) {
    return a.division_ == b.division_ && a.entries_ == b.entries_;
  }

 private:
  std::size_t segment_for_tick(std::uint64_t tick) const {
    auto it = std::upper_bound(entries_.begin(), entries_.end(), tick,
                               [](std::uint64_t t, const TempoEntry& e) { return t < e.tick; });
    return static_cast<std::size_t>(std::distance(entries_.begin(), it)) - 1;
  }

  std::uint16_t division_;
  std::vector<TempoEntry> entries_;
  std::vector<std::uint64_t> prefix_;
};

inline double ticks_to_seconds(const TempoMap& tempo_map, std::uint64_t tick) {
  return tempo_map.seconds(tick);
}

struct Meter {
  int numerator = 4;
  int denominator = 4;

  friend bool operator==(const Meter&, const Meter&) = default;
};

struct MeterChange {
  std::uint64_t tick = 0;
  Meter meter;

  friend bool operator==(const MeterChange&, const MeterChange&) = default;
};

struct Piece {
  std::vector<InstrumentTrack> tracks;  // sorted by program, one per program
  TempoMap tempo_map;
  Meter meter;
  std::vector<MeterChange> meter_changes;  // time signatures after the first

  std::uint16_t division() const { return tempo_map.division(); }

  const InstrumentTrack* find_track(int program) const {
    for (const auto& t : tracks) {
      if (t.program == program) return &t;
    }
    return nullptr;
  }

  /// Returns the track for `program`, creating it in program order if needed.
  InstrumentTrack& track(int program) {
    auto it = std::lower_bound(tracks.begin(), tracks.end(), program,
                               [](const InstrumentTrack& t, int p) { return t.program < p; });
    if (it == tracks.end() || it->program != program) {
      it = tracks.insert(it, InstrumentTrack{program, {}});
    }
    return *it;
  }

  std::size_t note_count() const {
    std::size_t n = 0;
    for (const auto& t : tracks) n += t.notes.size();
    return n;
  }

  friend bool operator==(const Piece&, const Piece&) = default;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t offset, const std::string& what)
      : std::runtime_error("SMF parse error at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ParseOutcome {
  Piece piece;
  std::vector<std::string> warnings;
};

namespace detail {

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  bool at_end() const { return pos_ >= bytes_.size(); }
  void seek(std::size_t pos) { pos_ = pos; }

  void require(std::size_t n, const char* what) const {
    if (remaining() < n) throw ParseError(pos_, std::string("truncated ") + what);
  }

  std::uint8_t peek() const {
    require(1, "event");
    return bytes_[pos_];
  }

  std::uint8_t u8(const char* what = "data") {
    require(1, what);
    return bytes_[pos_++];
  }

  std::uint32_t be(std::size_t width, const char* what) {
    require(width, what);
    std::uint32_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v = (v << 8) | bytes_[pos_++];
    return v;
  }

  std::uint32_t vlq() {
    const std::size_t start = pos_;
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const std::uint8_t b = u8("variable-length quantity");
      v = (v << 7) | (b & 0x7Fu);
      if ((b & 0x80u) == 0) return v;
    }
    throw ParseError(start, "variable-length quantity longer than 4 bytes");
  }

  void skip(std::size_t n, const char* what) {
    require(n, what);
    pos_ += n;
  }

  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    require(n, what);
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

enum class EventKind { kNoteOn, kNoteOff, kProgram };

struct ChannelEvent {
  std::uint64_t tick;
  std::size_t track;
  std::size_t seq;
  EventKind kind;
  int channel;
  int data1;
  int data2;
};

struct TrackScan {
  std::uint64_t end_tick = 0;
};

inline TrackScan scan_track(ByteReader& in, std::size_t end, std::size_t track_index,
                            std::vector<ChannelEvent>& events, std::vector<TempoEntry>& tempos,
                            std::vector<MeterChange>& meters) {
  TrackScan scan;
  std::uint64_t tick = 0;
  int running_status = -1;
  std::size_t seq = 0;
  while (in.pos() < end) {
    tick += in.vlq();
    const std::size_t event_pos = in.pos();
    if (event_pos >= end) throw ParseError(event_pos, "track ends inside an event");
    int status = in.peek();
    if (status & 0x80) {
      in.u8();
    } else {
      if (running_status < 0) throw ParseError(event_pos, "data byte without running status");
      status = running_status;
    }

    if (status == 0xFF) {
      const int type = in.u8("meta type");
      const std::uint32_t len = in.vlq();
      if (in.pos() + len > end) throw ParseError(in.pos(), "meta event overruns track");
      auto data = in.bytes(len, "meta event");
      if (type == 0x51) {
        if (len != 3) throw ParseError(event_pos, "set tempo meta must have length 3");
        const std::uint32_t us = (std::uint32_t{data[0]} << 16) | (std::uint32_t{data[1]} << 8) | data[2];
        if (us == 0) throw ParseError(event_pos, "set tempo of 0 us per quarter");
        tempos.push_back({tick, us});
      } else if (type == 0x58) {
        if (len < 2) throw ParseError(event_pos, "time signature meta too short");
        if (data[1] > 7) throw ParseError(event_pos, "time signature denominator out of range");
        meters.push_back({tick, Meter{data[0], 1 << data[1]}});
      } else if (type == 0x2F) {
        scan.end_tick = tick;
        in.seek(end);
        break;
      }
      // Meta events do not cancel running status in practice; keep it.
      continue;
    }
    if (status == 0xF0 || status == 0xF7) {
      const std::uint32_t len = in.vlq();
      if (in.pos() + len > end) throw ParseError(in.pos(), "sysex overruns track");
      in.skip(len, "sysex");
      running_status = -1;
      continue;
    }
    if (status >= 0xF1) throw ParseError(event_pos, "unexpected system message in track");

    running_status = status;
    const int kind = status & 0xF0;
    const int channel = status & 0x0F;
    const int d1 = in.u8("channel event") & 0x7F;
    int d2 = 0;
    if (kind != 0xC0 && kind != 0xD0) d2 = in.u8("channel event") & 0x7F;
    if (in.pos() > end) throw ParseError(event_pos, "channel event overruns track");

    switch (kind) {
      case 0x90:
        events.push_back({tick, track_index, seq++, d2 > 0 ? EventKind::kNoteOn : EventKind::kNoteOff,
                          channel, d1, d2});
        break;
      case 0x80:
        events.push_back({tick, track_index, seq++, EventKind::kNoteOff, channel, d1, d2});
        break;
      case 0xC0:
        events.push_back({tick, track_index, seq++, EventKind::kProgram, channel, d1, 0});
        break;
      default:
        break;  // aftertouch, control change, pitch bend
    }
  }
  scan.end_tick = std::max(scan.end_tick, tick);
  return scan;
}

inline void put_be(std::vector<std::uint8_t>& out, std::uint32_t v, int width) {
  for (int i = width - 1; i >= 0; --i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_vlq(std::vector<std::uint8_t>& out, std::uint32_t v) {
  std::uint8_t buf[5];
  int n = 0;
  buf[n++] = v & 0x7F;
  while ((v >>= 7) != 0) buf[n++] = static_cast<std::uint8_t>(0x80 | (v & 0x7F));
  while (n > 0) out.push_back(buf[--n]);
}

struct TimedBytes {
  std::uint64_t tick;
  int order;  // tie-break within a tick: meta, program, note-off, note-on
  int key;
  std::vector<std::uint8_t> bytes;
};

inline void emit_track(std::vector<std::uint8_t>& out, std::vector<TimedBytes> events) {
  std::stable_sort(events.begin(), events.end(), [](const TimedBytes& a, const TimedBytes& b) {
    return std::tie(a.tick, a.order, a.key) < std::tie(b.tick, b.order, b.key);
  });
  std::vector<std::uint8_t> body;
  std::uint64_t last = 0;
  for (const auto& e : events) {
    const std::uint64_t delta = e.tick - last;
    if (delta > 0x0FFFFFFF) throw CapacityError("delta time exceeds SMF range");
    put_vlq(body, static_cast<std::uint32_t>(delta));
    body.insert(body.end(), e.bytes.begin(), e.bytes.end());
    last = e.tick;
  }
  put_vlq(body, 0);
  body.insert(body.end(), {0xFF, 0x2F, 0x00});
  out.insert(out.end(), {'M', 'T', 'r', 'k'});
  put_be(out, static_cast<std::uint32_t>(body.size()), 4);
  out.insert(out.end(), body.begin(), body.end());
}

inline int log2_exact(int v) {
  int n = 0;
  while ((1 << n) < v) ++n;
  return n;
}

}  // namespace detail

/// Parses a format 0 or 1 SMF. Note-On/Off pairs are resolved FIFO per
/// (channel, pitch); channel 10 is dropped; instrument = governing program.
inline ParseOutcome parse_smf_with_warnings(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, "MThd")) {
    throw ParseError(0, "missing MThd header");
  }
  in.skip(4, "header");
  const std::uint32_t header_len = in.be(4, "header length");
  if (header_len < 6) throw ParseError(4, "header length below 6");
  const std::size_t header_body = in.pos();
  in.require(header_len, "header");
  const std::uint32_t format = in.be(2, "format");
  const std::uint32_t declared_tracks = in.be(2, "track count");
  const std::uint32_t division = in.be(2, "division");
  if (format > 1) throw ParseError(header_body, "unsupported SMF format " + std::to_string(format));
  if (division & 0x8000) throw ParseError(header_body + 4, "SMPTE time division is not supported");
  if (division == 0) throw ParseError(header_body + 4, "division of 0 ticks per quarter");
  in.seek(header_body + header_len);

  std::vector<detail::ChannelEvent> events;
  std::vector<TempoEntry> tempos;
  std::vector<MeterChange> meters;
  std::vector<std::uint64_t> track_end;
  while (!in.at_end()) {
    const std::size_t chunk_pos = in.pos();
    if (in.remaining() < 8) throw ParseError(chunk_pos, "truncated chunk header");
    auto id = in.bytes(4, "chunk id");
    const std::uint32_t len = in.be(4, "chunk length");
    if (in.remaining() < len) throw ParseError(chunk_pos, "truncated chunk");
    const std::size_t end = in.pos() + len;
    if (std::equal(id.begin(), id.end(), "MTrk")) {
      const auto scan = detail::scan_track(in, end, track_end.size(), events, tempos, meters);
      track_end.push_back(scan.end_tick);
    }
    in.seek(end);
  }
  if (track_end.size() < declared_tracks) {
    throw ParseError(bytes.size(), "header declares " + std::to_string(declared_tracks) +
                                       " tracks, found " + std::to_string(track_end.size()));
  }
  if (format == 0 && track_end.size() != 1) {
    throw ParseError(header_body, "format 0 file must contain exactly one track");
  }

  ParseOutcome out;
  Piece& piece = out.piece;
  piece.tempo_map = TempoMap(static_cast<std::uint16_t>(division), tempos);
  std::stable_sort(meters.begin(), meters.end(),
                   [](const MeterChange& a, const MeterChange& b) { return a.tick < b.tick; });
  if (!meters.empty() && meters.front().tick == 0) {
    piece.meter = meters.front().meter;
    meters.erase(meters.begin());
  }
  piece.meter_changes = std::move(meters);

  std::stable_sort(events.begin(), events.end(),
                   [](const detail::ChannelEvent& a, const detail::ChannelEvent& b) {
                     return std::tie(a.tick, a.track, a.seq) < std::tie(b.tick, b.track, b.seq);
                   });

  struct Open {
    std::uint64_t tick;
    int velocity;
    int program;
    std::size_t track;
  };
  int program_of[16] = {};
  std::map<std::pair<int, int>, std::deque<Open>> open;

  auto close = [&](const Open& o, int pitch, std::uint64_t off_tick) {
    if (off_tick <= o.tick) {
      out.warnings.push_back("zero-length note pitch " + std::to_string(pitch) + " at tick " +
                             std::to_string(o.tick) + " dropped");
      return;
    }
    piece.track(o.program).notes.push_back(
        Note{pitch, piece.tempo_map.seconds(o.tick), piece.tempo_map.seconds(off_tick), o.velocity});
  };

  for (const auto& e : events) {
    if (e.channel == kPercussionChannel) continue;
    switch (e.kind) {
      case detail::EventKind::kProgram:
        program_of[e.channel] = e.data1;
        break;
      case detail::EventKind::kNoteOn:
        open[{e.channel, e.data1}].push_back({e.tick, e.data2, program_of[e.channel], e.track});
        break;
      case detail::EventKind::kNoteOff: {
        auto it = open.find({e.channel, e.data1});
        if (it == open.end() || it->second.empty()) break;  // stray note-off
        close(it->second.front(), e.data1, e.tick);
        it->second.pop_front();
        break;
      }
    }
  }
  for (auto& [key, queue] : open) {
    for (const auto& o : queue) {
      out.warnings.push_back("unterminated note pitch " + std::to_string(key.second) + " on channel " +
                             std::to_string(key.first + 1) + " closed at end of track");
      close(o, key.second, track_end[o.track]);
    }
  }
  for (auto& t : piece.tracks) sort_notes(t.notes);
  return out;
}

inline Piece parse_smf(std::span<const std::uint8_t> bytes) {
  return parse_smf_with_warnings(bytes).piece;
}

/// Writes a format-1 SMF at 480 ticks per quarter: one meta track plus one
/// track per instrument on its own channel (channel 10 skipped).
inline std::vector<std::uint8_t> write_smf(const Piece& piece) {
  constexpr int kMaxChannels = 15;
  if (piece.tracks.size() > kMaxChannels) {
    throw CapacityError("piece needs " + std::to_string(piece.tracks.size()) +
                        " channels; at most 15 non-percussion channels are available");
  }

  const double scale = static_cast<double>(kWriteDivision) / piece.division();
  auto rescale = [&](std::uint64_t tick) {
    return static_cast<std::uint64_t>(static_cast<double>(tick) * scale + 0.5);
  };
  std::vector<TempoEntry> entries;
  for (const auto& e : piece.tempo_map.entries()) entries.push_back({rescale(e.tick), e.micros_per_quarter});
  const TempoMap out_map(kWriteDivision, entries);

  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'M', 'T', 'h', 'd'});
  detail::put_be(out, 6, 4);
  detail::put_be(out, 1, 2);
  detail::put_be(out, static_cast<std::uint32_t>(piece.tracks.size() + 1), 2);
  detail::put_be(out, kWriteDivision, 2);

  auto time_signature = [](const Meter& m) {
    return std::vector<std::uint8_t>{0xFF, 0x58, 0x04, static_cast<std::uint8_t>(m.numerator),
                                     static_cast<std::uint8_t>(detail::log2_exact(m.denominator)), 24, 8};
  };
  std::vector<detail::TimedBytes> meta;
  meta.push_back({0, 0, 0, time_signature(piece.meter)});
  for (const auto& mc : piece.meter_changes) meta.push_back({rescale(mc.tick), 0, 0, time_signature(mc.meter)});
  for (const auto& e : out_map.entries()) {
    const std::uint32_t us = e.micros_per_quarter;
    meta.push_back({e.tick, 1, 0,
                    {0xFF, 0x51, 0x03, static_cast<std::uint8_t>(us >> 16), static_cast<std::uint8_t>(us >> 8),
                     static_cast<std::uint8_t>(us)}});
  }
  detail::emit_track(out, std::move(meta));

  int channel = 0;
  for (const auto& track : piece.tracks) {
    if (channel == kPercussionChannel) ++channel;
    const auto ch = static_cast<std::uint8_t>(channel++);
    std::vector<detail::TimedBytes> events;
    events.push_back({0, 0, 0, {static_cast<std::uint8_t>(0xC0 | ch), static_cast<std::uint8_t>(track.program)}});
    for (const auto& n : track.notes) {
      const std::uint64_t on = out_map.nearest_tick(n.onset);
      const std::uint64_t off = std::max(out_map.nearest_tick(n.offset), on + 1);
      const auto pitch = static_cast<std::uint8_t>(n.pitch);
      events.push_back({on, 2, n.pitch, {static_cast<std::uint8_t>(0x90 | ch), pitch, static_cast<std::uint8_t>(n.velocity)}});
      events.push_back({off, 1, n.pitch, {static_cast<std::uint8_t>(0x80 | ch), pitch, 0x40}});
    }
    detail::emit_track(out, std::move(events));
  }
  return out;
}

}  // namespace amteval
