// On-disk formats: SQC1 concentration maps, SQCK checkpoints, SQFB
// fixed filter banks, and the stain-matrix JSON document.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stainsep/encoder.hpp"
#include "stainsep/stain.hpp"

namespace stainsep {

class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// SQC1: magic, u32 height/width/K, H*W*K float32 LE row-major
// (row, col, channel), then K length-prefixed UTF-8 stain names.
void save_concentrations(const std::string& path, const ConcentrationMap& c);
ConcentrationMap load_concentrations(const std::string& path);

// stain-matrix JSON: version, K, names, columns (3 OD values each),
// normalized flag
void save_stain_matrix(const std::string& path, const StainMatrix& s);
StainMatrix load_stain_matrix(const std::string& path);

struct TensorRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    EncoderConfig config;
    std::uint64_t step = 0;
    std::vector<std::string> stain_names;
    std::vector<TensorRecord> params;      // encoder tensors + "stain.u"
    bool has_optimizer = false;
    std::vector<TensorRecord> optimizer;   // adam moments + "adam.t"
};

void save_checkpoint(const std::string& path, const Checkpoint& cp);
Checkpoint load_checkpoint(const std::string& path);

// SQFB: a bare bank of tensor records (fixed perceptual filters)
void save_tensor_bank(const std::string& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> load_tensor_bank(const std::string& path);

}  // namespace stainsep
