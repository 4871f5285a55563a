#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "tacq/correction.hpp"
#include "tacq/model.hpp"
#include "tacq/quant.hpp"
#include "tacq/sampler.hpp"
#include "tacq/schedule.hpp"
#include "tacq/tensor.hpp"

namespace tacq {

/// On-disk container: magic "TACQ", one version byte, one kind byte, a
/// schedule snapshot (T and the beta array), then named payload entries.
/// All numeric payload is little-endian 64-bit; round trips are bit-exact.
enum class CkptKind : uint8_t { model = 1, qmodel = 2, table = 3, trace = 4, samples = 5 };

constexpr uint8_t kCkptVersion = 1;

struct Checkpoint {
    CkptKind kind = CkptKind::model;
    Schedule schedule;
    std::map<std::string, Tensor> arrays;
    std::map<std::string, int64_t> ints;
    std::map<std::string, std::string> strings;

    const Tensor& array(const std::string& name) const;
    int64_t integer(const std::string& name) const;
    const std::string& str(const std::string& name) const;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);
Checkpoint read_checkpoint_expect(const std::string& path, CkptKind kind);

// Domain objects <-> containers.
Checkpoint pack_model(const NoiseModel& model, const Schedule& schedule);
NoiseModel unpack_model(const Checkpoint& ckpt);

Checkpoint pack_qmodel(const QuantizedModel& qmodel, const Schedule& schedule);
QuantizedModel unpack_qmodel(const Checkpoint& ckpt);

Checkpoint pack_table(const CorrectionTable& table, const Schedule& schedule);
CorrectionTable unpack_table(const Checkpoint& ckpt);

Checkpoint pack_samples(const Tensor& samples, uint64_t seed, const Schedule& schedule);

Checkpoint pack_trajectory(const TrajectoryDump& dump, const Schedule& schedule);
TrajectoryDump unpack_trajectory(const Checkpoint& ckpt);

}  // namespace tacq
