#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dllab/binio.hpp"
#include "dllab/optimizer.hpp"

namespace dllab {

// Where a run came from, if it was spawned off another run.
struct Lineage {
  bool has_parent = false;
  std::string parent_id;
  double spawn_epoch = 0;
  uint32_t child_index = 0;
};

// Full training state at one instant: enough to resume bit-exactly.
// Weights and optimizer buffers are stored as f64; f32 runs widen losslessly.
struct Checkpoint {
  std::string run_id;
  double epoch = 0;
  uint64_t iteration = 0;
  std::vector<double> weights;

  OptimizerConfig opt;
  uint64_t opt_step = 0;
  std::vector<double> opt_buf;
  std::vector<double> opt_m2;

  uint32_t precision_bits = 64;  // 64 or 32
  uint64_t shuffle_seed = 0;     // per-epoch batch orders derive from this
  Lineage lineage;
};

// DLCK checkpoint file: magic "DLCK", u32 version, run id string, f64 epoch,
// u64 iteration, u64 d, d f64 weights, optimizer tag + hyperparameters +
// buffers, u32 precision, RNG-state blob, lineage record, trailing CRC-32.
inline constexpr char kCheckpointMagic[4] = {'D', 'L', 'C', 'K'};
inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  ByteWriter w;
  w.u32(kCheckpointVersion);
  w.str(ck.run_id);
  w.f64(ck.epoch);
  w.u64(ck.iteration);
  w.u64(ck.weights.size());
  w.f64_array(ck.weights.data(), ck.weights.size());
  w.u32(ck.opt.kind == OptKind::sgd ? 0u : 1u);
  w.f64(ck.opt.momentum);
  w.f64(ck.opt.weight_decay);
  w.f64(ck.opt.beta1);
  w.f64(ck.opt.beta2);
  w.f64(ck.opt.eps);
  w.u64(ck.opt_step);
  w.u64(ck.opt_buf.size());
  w.f64_array(ck.opt_buf.data(), ck.opt_buf.size());
  w.u64(ck.opt_m2.size());
  w.f64_array(ck.opt_m2.data(), ck.opt_m2.size());
  w.u32(ck.precision_bits);
  {
    ByteWriter blob;
    blob.u64(ck.shuffle_seed);
    w.u32(static_cast<uint32_t>(blob.bytes.size()));
    w.raw(blob.bytes.data(), blob.bytes.size());
  }
  w.u8(ck.lineage.has_parent ? 1 : 0);
  if (ck.lineage.has_parent) {
    w.str(ck.lineage.parent_id);
    w.f64(ck.lineage.spawn_epoch);
    w.u32(ck.lineage.child_index);
  }
  write_framed(path, kCheckpointMagic, w);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::vector<uint8_t> payload = read_framed(path, kCheckpointMagic);
  ByteReader r(payload.data(), payload.size(), path.string());
  uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  Checkpoint ck;
  ck.run_id = r.str();
  ck.epoch = r.f64();
  ck.iteration = r.u64();
  uint64_t d = r.u64();
  ck.weights.resize(d);
  r.f64_array(ck.weights.data(), d);
  uint32_t tag = r.u32();
  if (tag > 1) throw FormatError("unknown optimizer tag in " + path.string());
  ck.opt.kind = tag == 0 ? OptKind::sgd : OptKind::adam;
  ck.opt.momentum = r.f64();
  ck.opt.weight_decay = r.f64();
  ck.opt.beta1 = r.f64();
  ck.opt.beta2 = r.f64();
  ck.opt.eps = r.f64();
  ck.opt_step = r.u64();
  ck.opt_buf.resize(r.u64());
  r.f64_array(ck.opt_buf.data(), ck.opt_buf.size());
  ck.opt_m2.resize(r.u64());
  r.f64_array(ck.opt_m2.data(), ck.opt_m2.size());
  ck.precision_bits = r.u32();
  if (ck.precision_bits != 64 && ck.precision_bits != 32) {
    throw FormatError("bad precision tag in " + path.string());
  }
  uint32_t blob_len = r.u32();
  if (blob_len < 8) throw FormatError("short RNG blob in " + path.string());
  ck.shuffle_seed = r.u64();
  for (uint32_t i = 8; i < blob_len; ++i) r.u8();
  if (r.u8()) {
    ck.lineage.has_parent = true;
    ck.lineage.parent_id = r.str();
    ck.lineage.spawn_epoch = r.f64();
    ck.lineage.child_index = r.u32();
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes in " + path.string());
  return ck;
}

}  // namespace dllab
