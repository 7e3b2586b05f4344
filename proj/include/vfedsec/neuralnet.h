#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vfedsec/common.h"

namespace vfedsec {

// Y = X * W (+ bias broadcast). W is in_dim x out_dim.
struct DenseLayer {
  RealMatrix weights;
  std::optional<RealVector> bias;

  size_t in_dim() const { return static_cast<size_t>(weights.rows()); }
  size_t out_dim() const { return static_cast<size_t>(weights.cols()); }

  // uniform(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
  static DenseLayer Init(size_t in_dim, size_t out_dim, bool with_bias,
                         Rng& rng);
};

struct DenseGrads {
  RealMatrix dx;
  RealMatrix dw;
  std::optional<RealVector> db;
};

RealMatrix DenseForward(const DenseLayer& layer, const RealMatrix& x);
DenseGrads DenseBackward(const DenseLayer& layer, const RealMatrix& x,
                         const RealMatrix& dy);

RealMatrix ReluForward(const RealMatrix& x);
// dy gated by x > 0.
RealMatrix ReluBackward(const RealMatrix& x, const RealMatrix& dy);

struct BatchNormLayer {
  RealVector gamma;
  RealVector beta;
  RealVector running_mean;
  RealVector running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  size_t width() const { return static_cast<size_t>(gamma.size()); }
  static BatchNormLayer Init(size_t width);
};

struct BatchNormCache {
  RealMatrix x_hat;
  RealVector inv_std;
  std::vector<bool> present;
  bool training = false;
};

// Columns with present[j] == false produce 0 and leave running stats as-is;
// their inputs are never read, so NaN placeholders cannot leak through.
// Training mode uses batch statistics and requires at least two rows.
RealMatrix BatchNormForward(BatchNormLayer& bn, const RealMatrix& x,
                            const std::vector<bool>& present, bool training,
                            BatchNormCache* cache = nullptr);

struct BatchNormGrads {
  RealMatrix dx;
  RealVector dgamma;
  RealVector dbeta;
};

// Absent columns get zero dx/dgamma/dbeta.
BatchNormGrads BatchNormBackward(const BatchNormLayer& bn,
                                 const BatchNormCache& cache,
                                 const RealMatrix& dy);

enum class Task { kBinary, kMulticlass };

struct LossResult {
  double loss = 0;
  RealMatrix d_logits;
};

// Mean cross-entropy. Binary: B x 1 logits with sigmoid, labels in {0,1}.
// Multiclass: B x N logits with softmax, labels in [0, N).
LossResult LossAndGrad(const RealMatrix& logits, std::span<const int> labels,
                       Task task);

// Probability a random positive outranks a random negative, ties count 1/2.
double MetricAuc(std::span<const double> scores, std::span<const int> labels);
double MetricAccuracy(std::span<const int> preds, std::span<const int> labels);

// Dense layers with ReLU between them (not after the last layer).
class DenseStack {
 public:
  struct Cache {
    std::vector<RealMatrix> inputs;  // input to each dense layer
    std::vector<RealMatrix> pre_act;  // output of each non-final dense layer
  };
  struct Grads {
    std::vector<DenseGrads> layers;
    RealMatrix dx;
  };

  DenseStack() = default;
  explicit DenseStack(std::vector<DenseLayer> layers);

  // dims = {in, hidden..., out}.
  static DenseStack Init(const std::vector<size_t>& dims, bool with_bias,
                         Rng& rng);

  RealMatrix Forward(const RealMatrix& x, Cache* cache = nullptr) const;
  Grads Backward(const Cache& cache, const RealMatrix& dy) const;

  // theta <- theta - lr * grad.
  void SgdApply(const Grads& grads, double lr);

  size_t in_dim() const;
  size_t out_dim() const;
  size_t ParamCount() const;

  // Parameters flattened as a 1 x ParamCount() row, layer by layer
  // (weights row-major, then bias).
  RealMatrix FlatParams() const;
  void SetFlatParams(const RealMatrix& flat);
  RealMatrix FlatGrads(const Grads& grads) const;
  // theta <- theta + delta (delta is 1 x ParamCount()).
  void AddFlat(const RealMatrix& delta);

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

 private:
  std::vector<DenseLayer> layers_;
};

// Server head: BatchNorm over the H-wide embedding, then a dense stack.
struct TopModel {
  BatchNormLayer bn;
  DenseStack head;

  struct Cache {
    BatchNormCache bn;
    DenseStack::Cache head;
  };
  struct Grads {
    BatchNormGrads bn;
    DenseStack::Grads head;
  };

  RealMatrix Forward(const RealMatrix& h, const std::vector<bool>& present,
                     bool training, Cache* cache = nullptr);
  // Returns gradients; Grads::bn.dx is d(loss)/d(h).
  Grads Backward(const Cache& cache, const RealMatrix& d_logits) const;
  // Absent BatchNorm columns have zero gradient, so their parameters stay put.
  void SgdApply(const Grads& grads, double lr);
};

// Bottom models for C0 and every group, plus the server head.
struct SplitModel {
  DenseStack active_bottom;
  std::vector<DenseStack> group_bottoms;
  TopModel top;

  size_t embedding_width() const { return active_bottom.out_dim(); }
};

// Flat binary checkpoint: "VFSM", version, stack headers (layer count, then
// in/out/has_bias per layer), BatchNorm width, then every parameter as
// little-endian f64.
std::vector<uint8_t> SaveCheckpoint(const SplitModel& model);
SplitModel LoadCheckpoint(std::span<const uint8_t> bytes);
void WriteCheckpointFile(const std::string& path, const SplitModel& model);
SplitModel ReadCheckpointFile(const std::string& path);

}  // namespace vfedsec
