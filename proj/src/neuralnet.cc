#include "vfedsec/neuralnet.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "vfedsec/wire.h"

namespace vfedsec {

DenseLayer DenseLayer::Init(size_t in_dim, size_t out_dim, bool with_bias,
                            Rng& rng) {
  VFS_ENFORCE(in_dim > 0 && out_dim > 0, "dense layer dims must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
  auto draw = [&] { return (2.0 * Uniform01(rng) - 1.0) * bound; };
  DenseLayer l;
  l.weights.resize(in_dim, out_dim);
  for (Eigen::Index i = 0; i < l.weights.size(); ++i) l.weights.data()[i] = draw();
  if (with_bias) {
    RealVector b(out_dim);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = draw();
    l.bias = std::move(b);
  }
  return l;
}

RealMatrix DenseForward(const DenseLayer& layer, const RealMatrix& x) {
  VFS_ENFORCE(static_cast<size_t>(x.cols()) == layer.in_dim(),
              "dense_forward: input width ", x.cols(), " != layer in_dim ",
              layer.in_dim());
  RealMatrix y = x * layer.weights;
  if (layer.bias) y.rowwise() += *layer.bias;
  return y;
}

DenseGrads DenseBackward(const DenseLayer& layer, const RealMatrix& x,
                         const RealMatrix& dy) {
  VFS_ENFORCE(static_cast<size_t>(x.cols()) == layer.in_dim() &&
                  static_cast<size_t>(dy.cols()) == layer.out_dim() &&
                  x.rows() == dy.rows(),
              "dense_backward: shape mismatch");
  DenseGrads g;
  g.dx = dy * layer.weights.transpose();
  g.dw = x.transpose() * dy;
  if (layer.bias) g.db = dy.colwise().sum();
  return g;
}

RealMatrix ReluForward(const RealMatrix& x) { return x.cwiseMax(0.0); }

RealMatrix ReluBackward(const RealMatrix& x, const RealMatrix& dy) {
  VFS_ENFORCE(x.rows() == dy.rows() && x.cols() == dy.cols(),
              "relu_backward: shape mismatch");
  return (x.array() > 0.0).select(dy, 0.0);
}

BatchNormLayer BatchNormLayer::Init(size_t width) {
  BatchNormLayer bn;
  bn.gamma = RealVector::Ones(width);
  bn.beta = RealVector::Zero(width);
  bn.running_mean = RealVector::Zero(width);
  bn.running_var = RealVector::Ones(width);
  return bn;
}

RealMatrix BatchNormForward(BatchNormLayer& bn, const RealMatrix& x,
                            const std::vector<bool>& present, bool training,
                            BatchNormCache* cache) {
  const size_t width = bn.width();
  VFS_ENFORCE(static_cast<size_t>(x.cols()) == width && present.size() == width,
              "batchnorm_forward: width mismatch (input ", x.cols(),
              ", layer ", width, ", presence ", present.size(), ")");
  const Eigen::Index rows = x.rows();
  VFS_ENFORCE(!training || rows >= 2,
              "batchnorm_forward: batch size must be >= 2 in training mode");
  RealMatrix y = RealMatrix::Zero(rows, width);
  RealMatrix x_hat = RealMatrix::Zero(rows, width);
  RealVector inv_std = RealVector::Zero(width);
  for (size_t j = 0; j < width; ++j) {
    if (!present[j]) continue;
    auto col = x.col(j);
    double mean, var;
    if (training) {
      mean = col.mean();
      var = (col.array() - mean).square().mean();
      const double unbiased = var * rows / static_cast<double>(rows - 1);
      bn.running_mean[j] = (1 - bn.momentum) * bn.running_mean[j] + bn.momentum * mean;
      bn.running_var[j] = (1 - bn.momentum) * bn.running_var[j] + bn.momentum * unbiased;
    } else {
      mean = bn.running_mean[j];
      var = bn.running_var[j];
    }
    inv_std[j] = 1.0 / std::sqrt(var + bn.eps);
    x_hat.col(j) = (col.array() - mean) * inv_std[j];
    y.col(j) = x_hat.col(j).array() * bn.gamma[j] + bn.beta[j];
  }
  if (cache) {
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
    cache->present = present;
    cache->training = training;
  }
  return y;
}

BatchNormGrads BatchNormBackward(const BatchNormLayer& bn,
                                 const BatchNormCache& cache,
                                 const RealMatrix& dy) {
  const size_t width = bn.width();
  VFS_ENFORCE(static_cast<size_t>(dy.cols()) == width &&
                  dy.rows() == cache.x_hat.rows(),
              "batchnorm_backward: shape mismatch");
  const double n = static_cast<double>(dy.rows());
  BatchNormGrads g;
  g.dx = RealMatrix::Zero(dy.rows(), width);
  g.dgamma = RealVector::Zero(width);
  g.dbeta = RealVector::Zero(width);
  for (size_t j = 0; j < width; ++j) {
    if (!cache.present[j]) continue;
    auto d = dy.col(j);
    auto xh = cache.x_hat.col(j);
    const double sum_d = d.sum();
    const double sum_dx = d.dot(xh);
    g.dbeta[j] = sum_d;
    g.dgamma[j] = sum_dx;
    const double scale = bn.gamma[j] * cache.inv_std[j];
    if (cache.training) {
      g.dx.col(j) =
          (scale / n) * (n * d.array() - sum_d - xh.array() * sum_dx);
    } else {
      g.dx.col(j) = scale * d;
    }
  }
  return g;
}

LossResult LossAndGrad(const RealMatrix& logits, std::span<const int> labels,
                       Task task) {
  const Eigen::Index b = logits.rows();
  VFS_ENFORCE(b > 0 && static_cast<size_t>(b) == labels.size(),
              "loss: ", labels.size(), " labels for ", b, " logit rows");
  LossResult res;
  res.d_logits.resize(b, logits.cols());
  double total = 0;
  if (task == Task::kBinary) {
    VFS_ENFORCE(logits.cols() == 1, "binary loss expects one logit column");
    for (Eigen::Index i = 0; i < b; ++i) {
      const int y = labels[i];
      VFS_ENFORCE(y == 0 || y == 1, "label ", y, " out of range for binary task");
      const double z = logits(i, 0);
      total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
      const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                              : std::exp(z) / (1.0 + std::exp(z));
      res.d_logits(i, 0) = (p - y) / static_cast<double>(b);
    }
  } else {
    const Eigen::Index n = logits.cols();
    for (Eigen::Index i = 0; i < b; ++i) {
      const int y = labels[i];
      VFS_ENFORCE(y >= 0 && y < n, "label ", y, " out of range for ", n,
                  " classes");
      const double m = logits.row(i).maxCoeff();
      const RealVector e = (logits.row(i).array() - m).exp();
      const double s = e.sum();
      total += std::log(s) + m - logits(i, y);
      res.d_logits.row(i) = e / s;
      res.d_logits(i, y) -= 1.0;
      res.d_logits.row(i) /= static_cast<double>(b);
    }
  }
  res.loss = total / static_cast<double>(b);
  return res;
}

double MetricAuc(std::span<const double> scores, std::span<const int> labels) {
  VFS_ENFORCE(scores.size() == labels.size(), "auc: size mismatch");
  const size_t n = scores.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Average ranks over ties (1-based).
  std::vector<double> rank(n);
  for (size_t i = 0; i < n;) {
    size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
    i = j + 1;
  }
  double pos = 0, neg = 0, rank_sum = 0;
  for (size_t i = 0; i < n; ++i) {
    VFS_ENFORCE(labels[i] == 0 || labels[i] == 1, "auc: labels must be 0/1");
    if (labels[i] == 1) {
      pos += 1;
      rank_sum += rank[i];
    } else {
      neg += 1;
    }
  }
  VFS_ENFORCE(pos > 0 && neg > 0,
              "auc: need at least one positive and one negative label");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

double MetricAccuracy(std::span<const int> preds, std::span<const int> labels) {
  VFS_ENFORCE(preds.size() == labels.size() && !preds.empty(),
              "accuracy: need equal, non-empty inputs");
  size_t hit = 0;
  for (size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

DenseStack::DenseStack(std::vector<DenseLayer> layers)
    : layers_(std::move(layers)) {
  VFS_ENFORCE(!layers_.empty(), "dense stack needs at least one layer");
  for (size_t i = 1; i < layers_.size(); ++i)
    VFS_ENFORCE(layers_[i].in_dim() == layers_[i - 1].out_dim(),
                "dense stack: layer ", i, " in_dim mismatch");
}

DenseStack DenseStack::Init(const std::vector<size_t>& dims, bool with_bias,
                            Rng& rng) {
  VFS_ENFORCE(dims.size() >= 2, "dense stack needs at least in and out dims");
  std::vector<DenseLayer> layers;
  for (size_t i = 0; i + 1 < dims.size(); ++i)
    layers.push_back(DenseLayer::Init(dims[i], dims[i + 1], with_bias, rng));
  return DenseStack(std::move(layers));
}

RealMatrix DenseStack::Forward(const RealMatrix& x, Cache* cache) const {
  if (cache) {
    cache->inputs.clear();
    cache->pre_act.clear();
  }
  RealMatrix cur = x;
  for (size_t i = 0; i < layers_.size(); ++i) {
    RealMatrix z = DenseForward(layers_[i], cur);
    if (cache) cache->inputs.push_back(std::move(cur));
    if (i + 1 < layers_.size()) {
      cur = ReluForward(z);
      if (cache) cache->pre_act.push_back(std::move(z));
    } else {
      cur = std::move(z);
    }
  }
  return cur;
}

DenseStack::Grads DenseStack::Backward(const Cache& cache,
                                       const RealMatrix& dy) const {
  VFS_ENFORCE(cache.inputs.size() == layers_.size(),
              "dense stack backward: missing forward cache");
  Grads g;
  g.layers.resize(layers_.size());
  RealMatrix d = dy;
  for (size_t i = layers_.size(); i-- > 0;) {
    if (i + 1 < layers_.size()) d = ReluBackward(cache.pre_act[i], d);
    g.layers[i] = DenseBackward(layers_[i], cache.inputs[i], d);
    d = g.layers[i].dx;
  }
  g.dx = std::move(d);
  return g;
}

void DenseStack::SgdApply(const Grads& grads, double lr) {
  VFS_ENFORCE(grads.layers.size() == layers_.size(), "sgd: layer count mismatch");
  for (size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    const auto& g = grads.layers[i];
    VFS_ENFORCE(g.dw.rows() == l.weights.rows() && g.dw.cols() == l.weights.cols(),
                "sgd: weight gradient shape mismatch at layer ", i);
    l.weights -= lr * g.dw;
    if (l.bias) {
      VFS_ENFORCE(g.db && g.db->size() == l.bias->size(),
                  "sgd: bias gradient missing at layer ", i);
      *l.bias -= lr * *g.db;
    }
  }
}

size_t DenseStack::in_dim() const {
  return layers_.empty() ? 0 : layers_.front().in_dim();
}

size_t DenseStack::out_dim() const {
  return layers_.empty() ? 0 : layers_.back().out_dim();
}

size_t DenseStack::ParamCount() const {
  size_t n = 0;
  for (const auto& l : layers_)
    n += l.weights.size() + (l.bias ? l.bias->size() : 0);
  return n;
}

RealMatrix DenseStack::FlatParams() const {
  RealMatrix flat(1, ParamCount());
  double* out = flat.data();
  for (const auto& l : layers_) {
    out = std::copy_n(l.weights.data(), l.weights.size(), out);
    if (l.bias) out = std::copy_n(l.bias->data(), l.bias->size(), out);
  }
  return flat;
}

void DenseStack::SetFlatParams(const RealMatrix& flat) {
  VFS_ENFORCE(static_cast<size_t>(flat.size()) == ParamCount(),
              "flat params: expected ", ParamCount(), " values, got ",
              flat.size());
  const double* in = flat.data();
  for (auto& l : layers_) {
    std::copy_n(in, l.weights.size(), l.weights.data());
    in += l.weights.size();
    if (l.bias) {
      std::copy_n(in, l.bias->size(), l.bias->data());
      in += l.bias->size();
    }
  }
}

RealMatrix DenseStack::FlatGrads(const Grads& grads) const {
  VFS_ENFORCE(grads.layers.size() == layers_.size(), "flat grads: layer mismatch");
  RealMatrix flat(1, ParamCount());
  double* out = flat.data();
  for (size_t i = 0; i < layers_.size(); ++i) {
    const auto& g = grads.layers[i];
    out = std::copy_n(g.dw.data(), g.dw.size(), out);
    if (layers_[i].bias) out = std::copy_n(g.db->data(), g.db->size(), out);
  }
  return flat;
}

void DenseStack::AddFlat(const RealMatrix& delta) {
  RealMatrix p = FlatParams();
  VFS_ENFORCE(p.size() == delta.size(), "flat update: size mismatch");
  p += delta;
  SetFlatParams(p);
}

RealMatrix TopModel::Forward(const RealMatrix& h, const std::vector<bool>& present,
                             bool training, Cache* cache) {
  RealMatrix normed =
      BatchNormForward(bn, h, present, training, cache ? &cache->bn : nullptr);
  return head.Forward(normed, cache ? &cache->head : nullptr);
}

TopModel::Grads TopModel::Backward(const Cache& cache,
                                   const RealMatrix& d_logits) const {
  Grads g;
  g.head = head.Backward(cache.head, d_logits);
  g.bn = BatchNormBackward(bn, cache.bn, g.head.dx);
  return g;
}

void TopModel::SgdApply(const Grads& grads, double lr) {
  head.SgdApply(grads.head, lr);
  bn.gamma -= lr * grads.bn.dgamma;
  bn.beta -= lr * grads.bn.dbeta;
}

namespace {

constexpr uint32_t kCheckpointMagic = 0x4d534656;  // "VFSM"
constexpr uint32_t kCheckpointVersion = 1;

void WriteStackHeader(ByteWriter& w, const DenseStack& s) {
  w.U32(static_cast<uint32_t>(s.layers().size()));
  for (const auto& l : s.layers()) {
    w.U32(static_cast<uint32_t>(l.in_dim()));
    w.U32(static_cast<uint32_t>(l.out_dim()));
    w.U8(l.bias ? 1 : 0);
  }
}

DenseStack ReadStackHeader(ByteReader& r) {
  const uint32_t n = r.U32();
  VFS_ENFORCE(n > 0 && n < 1024, "checkpoint: bad layer count ", n);
  std::vector<DenseLayer> layers(n);
  for (auto& l : layers) {
    const uint32_t in = r.U32();
    const uint32_t out = r.U32();
    VFS_ENFORCE(in > 0 && out > 0 && uint64_t{in} * out < (uint64_t{1} << 32),
                "checkpoint: bad layer dims");
    l.weights = RealMatrix::Zero(in, out);
    if (r.U8()) l.bias = RealVector::Zero(out);
  }
  return DenseStack(std::move(layers));
}

void WriteVec(ByteWriter& w, const double* p, Eigen::Index n) {
  for (Eigen::Index i = 0; i < n; ++i) w.F64(p[i]);
}

void ReadVec(ByteReader& r, double* p, Eigen::Index n) {
  for (Eigen::Index i = 0; i < n; ++i) p[i] = r.F64();
}

void WriteStackParams(ByteWriter& w, const DenseStack& s) {
  const RealMatrix flat = s.FlatParams();
  WriteVec(w, flat.data(), flat.size());
}

void ReadStackParams(ByteReader& r, DenseStack& s) {
  RealMatrix flat(1, s.ParamCount());
  ReadVec(r, flat.data(), flat.size());
  s.SetFlatParams(flat);
}

}  // namespace

std::vector<uint8_t> SaveCheckpoint(const SplitModel& model) {
  ByteWriter w;
  w.U32(kCheckpointMagic);
  w.U32(kCheckpointVersion);
  w.U32(static_cast<uint32_t>(1 + model.group_bottoms.size()));
  WriteStackHeader(w, model.active_bottom);
  for (const auto& g : model.group_bottoms) WriteStackHeader(w, g);
  w.U32(static_cast<uint32_t>(model.top.bn.width()));
  WriteStackHeader(w, model.top.head);

  WriteStackParams(w, model.active_bottom);
  for (const auto& g : model.group_bottoms) WriteStackParams(w, g);
  const auto& bn = model.top.bn;
  for (const RealVector* v : {&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var})
    WriteVec(w, v->data(), v->size());
  WriteStackParams(w, model.top.head);
  return w.Take();
}

SplitModel LoadCheckpoint(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  VFS_ENFORCE(r.U32() == kCheckpointMagic, "checkpoint: bad magic");
  const uint32_t version = r.U32();
  VFS_ENFORCE(version == kCheckpointVersion, "checkpoint: unsupported version ",
              version);
  const uint32_t stacks = r.U32();
  VFS_ENFORCE(stacks >= 1 && stacks < 1024, "checkpoint: bad stack count");
  SplitModel m;
  m.active_bottom = ReadStackHeader(r);
  for (uint32_t i = 1; i < stacks; ++i) m.group_bottoms.push_back(ReadStackHeader(r));
  const uint32_t width = r.U32();
  m.top.bn = BatchNormLayer::Init(width);
  m.top.head = ReadStackHeader(r);

  ReadStackParams(r, m.active_bottom);
  for (auto& g : m.group_bottoms) ReadStackParams(r, g);
  auto& bn = m.top.bn;
  for (RealVector* v : {&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var})
    ReadVec(r, v->data(), v->size());
  ReadStackParams(r, m.top.head);
  VFS_ENFORCE(r.done(), "checkpoint: trailing bytes");
  return m;
}

void WriteCheckpointFile(const std::string& path, const SplitModel& model) {
  const auto bytes = SaveCheckpoint(model);
  std::ofstream out(path, std::ios::binary);
  VFS_ENFORCE(out, "cannot open ", path, " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

SplitModel ReadCheckpointFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  VFS_ENFORCE(in, "cannot open checkpoint ", path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return LoadCheckpoint(bytes);
}

}  // namespace vfedsec
