#pragma once

// Noise-pair dataset: collection pipeline and the binary container.
//
// Layout (all integers and floats little-endian):
//   "NPD1" | u32 version | u64 header_len | header payload | u32 crc32(payload)
//   record * record_count, each:
//     u64 seed | u32 class_id | f64 s0 | f64 s0_prime | f64[n] x_T | f64[n] x_T_prime | u32 crc32(record)
// The header payload is a sequence of fixed-width fields and length-prefixed
// strings (u32 length + bytes), in the order of write_header below.

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "npl/errors.hpp"
#include "npl/parallel.hpp"
#include "npl/preference.hpp"
#include "npl/rng.hpp"
#include "npl/sampler.hpp"
#include "npl/testbed.hpp"

namespace npl {

inline constexpr std::uint32_t kNpdVersion = 1;
inline constexpr char kNpdMagic[4] = {'N', 'P', 'D', '1'};

struct NoisePairRecord {
  std::uint64_t seed = 0;
  std::uint32_t class_id = 0;
  double s0 = 0.0;
  double s0_prime = 0.0;
  Tensor x_big_t;
  Tensor x_big_t_prime;

  bool operator==(const NoisePairRecord&) const = default;
};

struct NpdHeader {
  std::uint32_t version = kNpdVersion;
  std::uint32_t d_side = 0;
  std::uint32_t n_classes = 0;
  double omega_l = 0.0;
  double omega_w = 0.0;
  std::uint32_t k = 0;
  std::uint32_t fp_iters = 0;
  double fp_tol = 0.0;
  std::uint32_t n_steps_eval = 0;
  double m = 0.0;
  std::string scorer_id;
  std::string schedule_descriptor;
  std::uint64_t schedule_hash = 0;
  std::uint64_t global_seed = 0;
  std::string testbed_text;  // full testbed definition, so files are self-describing
  std::string config_text;   // resolved run configuration
  std::uint64_t record_count = 0;

  bool operator==(const NpdHeader&) const = default;

  GuidanceConfig guidance() const {
    return {omega_l, omega_w, static_cast<int>(k), static_cast<int>(fp_iters), fp_tol};
  }
};

struct NpdDataset {
  NpdHeader header;
  std::vector<NoisePairRecord> records;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  void put(std::uint64_t v, int width) {
    for (int i = 0; i < width; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t k) const {
    if (n_ - pos_ < k) throw FormatError("npd: unexpected end of data");
  }
  std::uint64_t get(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::size_t record_size(std::size_t n) { return 8 + 4 + 8 + 8 + 16 * n + 4; }

}  // namespace detail

inline std::vector<unsigned char> encode_npd(const NpdHeader& header, const std::vector<NoisePairRecord>& records) {
  if (header.record_count != records.size())
    throw std::invalid_argument("encode_npd: header record_count does not match records");
  const std::size_t n = static_cast<std::size_t>(header.d_side) * header.d_side;
  detail::ByteWriter payload;
  payload.u32(header.d_side);
  payload.u32(header.n_classes);
  payload.f64(header.omega_l);
  payload.f64(header.omega_w);
  payload.u32(header.k);
  payload.u32(header.fp_iters);
  payload.f64(header.fp_tol);
  payload.u32(header.n_steps_eval);
  payload.f64(header.m);
  payload.str(header.scorer_id);
  payload.str(header.schedule_descriptor);
  payload.u64(header.schedule_hash);
  payload.u64(header.global_seed);
  payload.str(header.testbed_text);
  payload.str(header.config_text);
  payload.u64(header.record_count);

  detail::ByteWriter out;
  out.raw(kNpdMagic, 4);
  out.u32(header.version);
  out.u64(payload.bytes().size());
  out.raw(payload.bytes().data(), payload.bytes().size());
  out.u32(detail::crc32_of(payload.bytes().data(), payload.bytes().size()));
  for (const auto& r : records) {
    if (r.x_big_t.size() != n || r.x_big_t_prime.size() != n)
      throw std::invalid_argument("encode_npd: record state size does not match d_side");
    detail::ByteWriter rec;
    rec.u64(r.seed);
    rec.u32(r.class_id);
    rec.f64(r.s0);
    rec.f64(r.s0_prime);
    for (double v : r.x_big_t.data()) rec.f64(v);
    for (double v : r.x_big_t_prime.data()) rec.f64(v);
    rec.u32(detail::crc32_of(rec.bytes().data(), rec.bytes().size()));
    out.raw(rec.bytes().data(), rec.bytes().size());
  }
  return std::move(out.bytes());
}

/// Validates the whole buffer (magic, version, lengths, every checksum) before
/// returning anything.
inline NpdDataset decode_npd(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kNpdMagic, 4) != 0) throw FormatError("npd: bad magic");
  detail::ByteReader top(bytes.data() + 4, bytes.size() - 4);
  NpdDataset ds;
  NpdHeader& h = ds.header;
  h.version = top.u32();
  if (h.version != kNpdVersion)
    throw FormatError("npd: unsupported version " + std::to_string(h.version) + ", expected " +
                      std::to_string(kNpdVersion));
  const std::uint64_t header_len = top.u64();
  if (header_len > top.remaining() || top.remaining() - header_len < 4)
    throw FormatError("npd: header length exceeds file size");
  const unsigned char* payload = bytes.data() + 4 + top.pos();
  const std::size_t body_at = 4 + top.pos() + header_len + 4;
  detail::ByteReader crc_reader(payload + header_len, 4);
  if (crc_reader.u32() != detail::crc32_of(payload, header_len)) throw FormatError("npd: header checksum mismatch");

  detail::ByteReader p(payload, header_len);
  h.d_side = p.u32();
  h.n_classes = p.u32();
  h.omega_l = p.f64();
  h.omega_w = p.f64();
  h.k = p.u32();
  h.fp_iters = p.u32();
  h.fp_tol = p.f64();
  h.n_steps_eval = p.u32();
  h.m = p.f64();
  h.scorer_id = p.str();
  h.schedule_descriptor = p.str();
  h.schedule_hash = p.u64();
  h.global_seed = p.u64();
  h.testbed_text = p.str();
  h.config_text = p.str();
  h.record_count = p.u64();
  if (p.remaining() != 0) throw FormatError("npd: trailing bytes in header");

  const std::size_t n = static_cast<std::size_t>(h.d_side) * h.d_side;
  const std::size_t rs = detail::record_size(n);
  const std::size_t body = bytes.size() - body_at;
  if (h.record_count > body / rs || body != h.record_count * rs)
    throw FormatError("npd: body size " + std::to_string(body) + " does not match " +
                      std::to_string(h.record_count) + " records");
  for (std::uint64_t i = 0; i < h.record_count; ++i) {
    const unsigned char* at = bytes.data() + body_at + i * rs;
    detail::ByteReader crc(at + rs - 4, 4);
    if (crc.u32() != detail::crc32_of(at, rs - 4))
      throw FormatError("npd: checksum mismatch in record " + std::to_string(i));
  }
  ds.records.reserve(h.record_count);
  for (std::uint64_t i = 0; i < h.record_count; ++i) {
    detail::ByteReader r(bytes.data() + body_at + i * rs, rs);
    NoisePairRecord rec;
    rec.seed = r.u64();
    rec.class_id = r.u32();
    rec.s0 = r.f64();
    rec.s0_prime = r.f64();
    std::vector<double> a(n), b(n);
    for (auto& v : a) v = r.f64();
    for (auto& v : b) v = r.f64();
    rec.x_big_t = Tensor({h.d_side, h.d_side}, std::move(a));
    rec.x_big_t_prime = Tensor({h.d_side, h.d_side}, std::move(b));
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

inline void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_npd(const std::string& path, const NpdHeader& header, const std::vector<NoisePairRecord>& records) {
  write_bytes(path, encode_npd(header, records));
}

inline NpdDataset read_npd(const std::string& path) { return decode_npd(read_bytes(path)); }

// Collection

/// x_T for a seed. Shared by collection, evaluation and inference.
inline Tensor seed_noise(std::uint64_t global_seed, std::uint64_t seed, const Shape& shape) {
  RngStream s{derive_seed(global_seed, "noise", seed), 0};
  return gaussian(s, shape);
}

inline ClassLabel seed_class(std::uint64_t global_seed, std::uint64_t seed, const MixtureTestbed& tb) {
  RngStream s{derive_seed(global_seed, "class", seed), 0};
  const std::vector<double> priors = tb.class_priors();
  return ClassLabel::of(categorical(s, priors));
}

struct CollectConfig {
  GuidanceConfig guidance;
  SelectionRule rule;
  std::uint64_t first_seed = 0;
  std::uint64_t n_seeds = 0;
  int n_steps_eval = 10;
  std::uint64_t global_seed = 0;
  unsigned workers = 1;
  std::string config_text;
};

struct CollectionStats {
  std::uint64_t attempted = 0;
  std::uint64_t kept = 0;
  std::uint64_t skipped = 0;  // non-finite trajectories
  std::uint64_t unconverged = 0;
  double keep_rate = 0.0;
  double mean_score_gap = 0.0;  // mean of s0' - s0 over kept records
  double mean_raw_gap = 0.0;    // mean of s0' - s0 over every scored seed
  std::vector<std::uint64_t> skipped_seeds;
};

struct CollectionResult {
  NpdHeader header;
  std::vector<NoisePairRecord> records;
  CollectionStats stats;
};

/// Scores of the standard and the re-denoised noise for one seed.
struct PairOutcome {
  Tensor x_big_t, x_big_t_prime;
  ClassLabel c = ClassLabel::null();
  double s0 = 0.0, s0_prime = 0.0;
  bool converged = true;
};

template <NoisePredictor P>
PairOutcome evaluate_pair(const P& pred, const MixtureTestbed& tb, const NoiseSchedule& sched,
                          const GuidanceConfig& g, int n_steps_eval, const Tensor& x, ClassLabel c) {
  PairOutcome o;
  o.x_big_t = x;
  o.c = c;
  const RedenoiseResult rd = redenoise(pred, sched, x, g, c);
  o.x_big_t_prime = rd.x_prime;
  o.converged = rd.inversion.converged;
  o.s0 = score(sample_trajectory(pred, sched, x, n_steps_eval, g.omega_l, c), c, tb).value;
  o.s0_prime = score(sample_trajectory(pred, sched, rd.x_prime, n_steps_eval, g.omega_l, c), c, tb).value;
  return o;
}

inline NpdHeader make_header(const MixtureTestbed& tb, const NoiseSchedule& sched, const CollectConfig& cfg) {
  NpdHeader h;
  h.d_side = static_cast<std::uint32_t>(tb.d_side());
  h.n_classes = static_cast<std::uint32_t>(tb.n_classes());
  h.omega_l = cfg.guidance.omega_l;
  h.omega_w = cfg.guidance.omega_w;
  h.k = static_cast<std::uint32_t>(cfg.guidance.k);
  h.fp_iters = static_cast<std::uint32_t>(cfg.guidance.fp_iters);
  h.fp_tol = cfg.guidance.fp_tol;
  h.n_steps_eval = static_cast<std::uint32_t>(cfg.n_steps_eval);
  h.m = cfg.rule.m;
  h.scorer_id = kScorerId;
  h.schedule_descriptor = sched.descriptor();
  h.schedule_hash = sched.hash();
  h.global_seed = cfg.global_seed;
  std::ostringstream tb_text;
  write_testbed(tb_text, tb, sched);
  h.testbed_text = tb_text.str();
  h.config_text = cfg.config_text;
  return h;
}

inline CollectionResult collect_records(const MixtureTestbed& tb, const NoiseSchedule& sched, const CollectConfig& cfg) {
  cfg.guidance.validate();
  cfg.rule.validate();
  if (cfg.n_steps_eval < 1) throw std::invalid_argument("collect: n_steps_eval must be >= 1");
  const AnalyticPredictor pred(tb, sched);
  const std::size_t n = static_cast<std::size_t>(cfg.n_seeds);
  std::vector<std::optional<PairOutcome>> outcomes(n);
  parallel_for(n, cfg.workers, [&](std::size_t i) {
    const std::uint64_t seed = cfg.first_seed + i;
    const Tensor x = seed_noise(cfg.global_seed, seed, tb.state_shape());
    const ClassLabel c = seed_class(cfg.global_seed, seed, tb);
    try {
      outcomes[i] = evaluate_pair(pred, tb, sched, cfg.guidance, cfg.n_steps_eval, x, c);
    } catch (const NumericError&) {
      outcomes[i].reset();
    }
  });

  CollectionResult res;
  res.header = make_header(tb, sched, cfg);
  CollectionStats& st = res.stats;
  st.attempted = cfg.n_seeds;
  double gap_sum = 0.0, raw_sum = 0.0;
  std::uint64_t scored = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = cfg.first_seed + i;
    if (!outcomes[i]) {
      ++st.skipped;
      st.skipped_seeds.push_back(seed);
      continue;
    }
    const PairOutcome& o = *outcomes[i];
    ++scored;
    raw_sum += o.s0_prime - o.s0;
    if (!o.converged) ++st.unconverged;
    if (!select(o.s0, o.s0_prime, cfg.rule)) continue;
    gap_sum += o.s0_prime - o.s0;
    res.records.push_back({seed, static_cast<std::uint32_t>(o.c.index()), o.s0, o.s0_prime, o.x_big_t, o.x_big_t_prime});
  }
  st.kept = res.records.size();
  st.keep_rate = st.attempted > 0 ? static_cast<double>(st.kept) / static_cast<double>(st.attempted) : 0.0;
  st.mean_score_gap = st.kept > 0 ? gap_sum / static_cast<double>(st.kept) : 0.0;
  st.mean_raw_gap = scored > 0 ? raw_sum / static_cast<double>(scored) : 0.0;
  res.header.record_count = res.records.size();
  return res;
}

inline CollectionStats collect(const MixtureTestbed& tb, const NoiseSchedule& sched, const CollectConfig& cfg,
                               const std::string& out_path) {
  CollectionResult r = collect_records(tb, sched, cfg);
  write_npd(out_path, r.header, r.records);
  return r.stats;
}

// Verification

struct NpdCheck {
  std::uint64_t records = 0;
  std::uint64_t failed_selection = 0;  // stored scores violate the rule
  std::uint64_t failed_rescore = 0;    // re-synthesized scores disagree or violate the rule
  std::uint64_t non_finite = 0;
  std::uint64_t bad_class = 0;
  bool schedule_ok = true;
  bool order_ok = true;  // seeds strictly increasing
  std::vector<std::string> problems;

  bool ok() const {
    return failed_selection == 0 && failed_rescore == 0 && non_finite == 0 && bad_class == 0 && schedule_ok && order_ok;
  }
};

/// Re-checks every record against the header: the selection predicate on the
/// stored scores, and (when `rescore`) the scores recomputed from the stored
/// noise arrays with the embedded testbed. Checksums were already validated by
/// decode_npd.
inline NpdCheck verify_npd(const NpdDataset& ds, bool rescore = true, unsigned workers = 1) {
  NpdCheck chk;
  const NpdHeader& h = ds.header;
  chk.records = ds.records.size();
  std::istringstream tb_in(h.testbed_text);
  const TestbedDefinition def = parse_testbed(tb_in);
  if (def.schedule.hash() != h.schedule_hash || def.schedule.descriptor() != h.schedule_descriptor) {
    chk.schedule_ok = false;
    chk.problems.push_back("schedule hash does not match the embedded testbed");
  }
  const SelectionRule rule{h.m};
  const GuidanceConfig g = h.guidance();
  const AnalyticPredictor pred(def.testbed, def.schedule);
  std::vector<int> verdict(ds.records.size(), 0);  // bit 0 selection, 1 rescore, 2 finite, 3 class
  parallel_for(ds.records.size(), workers, [&](std::size_t i) {
    const NoisePairRecord& r = ds.records[i];
    int v = 0;
    if (!r.x_big_t.all_finite() || !r.x_big_t_prime.all_finite()) v |= 4;
    if (r.class_id >= h.n_classes) v |= 8;
    if (!select(r.s0, r.s0_prime, rule)) v |= 1;
    if (rescore && (v & 12) == 0) {
      const ClassLabel c = ClassLabel::of(r.class_id);
      const int steps = static_cast<int>(h.n_steps_eval);
      try {
        const double s0 = score(sample_trajectory(pred, def.schedule, r.x_big_t, steps, g.omega_l, c), c, def.testbed).value;
        const double s1 =
            score(sample_trajectory(pred, def.schedule, r.x_big_t_prime, steps, g.omega_l, c), c, def.testbed).value;
        if (s0 != r.s0 || s1 != r.s0_prime || !select(s0, s1, rule)) v |= 2;
      } catch (const NumericError&) {
        v |= 2;
      }
    }
    verdict[i] = v;
  });
  for (std::size_t i = 0; i < verdict.size(); ++i) {
    const int v = verdict[i];
    const std::string id = "record " + std::to_string(i) + " (seed " + std::to_string(ds.records[i].seed) + ")";
    if (v & 1) ++chk.failed_selection, chk.problems.push_back(id + ": stored scores violate the selection rule");
    if (v & 2) ++chk.failed_rescore, chk.problems.push_back(id + ": re-scored values disagree");
    if (v & 4) ++chk.non_finite, chk.problems.push_back(id + ": non-finite noise");
    if (v & 8) ++chk.bad_class, chk.problems.push_back(id + ": class id out of range");
    if (i > 0 && ds.records[i].seed <= ds.records[i - 1].seed) {
      chk.order_ok = false;
      chk.problems.push_back(id + ": seeds not strictly increasing");
    }
  }
  return chk;
}

}  // namespace npl
