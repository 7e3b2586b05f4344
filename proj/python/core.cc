#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <optional>
#include <sstream>

#include "vfedsec/cli.h"
#include "vfedsec/secure_layer.h"

namespace py = pybind11;
using namespace vfedsec;

namespace {

using QArray = py::array_t<uint32_t, py::array::c_style | py::array::forcecast>;

QMatrix ToQMatrix(const QArray& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D uint32 array");
  const auto* p = a.data();
  return QMatrix(a.shape(0), a.shape(1), std::vector<uint32_t>(p, p + a.size()));
}

QArray FromQMatrix(const QMatrix& q) {
  QArray out({q.rows(), q.cols()});
  std::copy(q.values().begin(), q.values().end(), out.mutable_data());
  return out;
}

QConfig MakeQConfig(double t, uint32_t r) {
  QConfig c;
  c.t = t;
  c.r = r;
  c.Validate();
  return c;
}

// Key material and pair secrets for one masking pool.
struct Pool {
  PairPool pool;
  uint32_t epoch;

  Pool(std::vector<uint32_t> members, uint32_t epoch_, uint64_t master_seed, int group_id)
      : epoch(epoch_) {
    std::vector<ParticipantId> ids;
    std::map<ParticipantId, KeyPair> keys;
    for (uint32_t m : members) {
      ids.push_back({m});
      keys.emplace(ParticipantId{m}, EpochKeypair(master_seed, epoch, {m}));
    }
    pool = PairPool::Build(group_id, ids, epoch, keys);
  }

  QArray SelfNoiseFor(uint32_t member, uint32_t round, int phase, uint16_t slot, size_t rows,
                      size_t cols) const {
    if (phase < 0 || phase > 2) throw py::value_error("phase must be 0, 1 or 2");
    const NoiseTag tag{epoch, round, static_cast<Phase>(phase), slot, rows, cols};
    return FromQMatrix(SelfNoise({member}, pool, tag));
  }

  std::vector<uint32_t> Members() const {
    std::vector<uint32_t> out;
    for (auto u : pool.members()) out.push_back(u.value);
    return out;
  }
};

py::dict EvalDict(const EvalResult& e) {
  py::dict d;
  d["metric"] = e.metric;
  d["loss"] = e.loss;
  d["rows"] = e.rows;
  return d;
}

py::dict ReportDict(const TrainReport& r) {
  py::dict d;
  d["mode"] = r.mode;
  d["fingerprint"] = r.fingerprint;
  d["input_widths"] = r.input_widths;
  d["initial"] = EvalDict(r.initial);
  d["final"] = EvalDict(r.final_eval);
  py::list rounds;
  for (const auto& rec : r.rounds) {
    py::dict x;
    x["round"] = rec.outcome.round;
    x["served"] = rec.outcome.served;
    x["loss"] = rec.outcome.loss;
    x["dropped_groups"] = rec.outcome.dropped_groups;
    std::vector<uint32_t> dropped;
    for (auto u : rec.outcome.dropped_clients) dropped.push_back(u.value);
    x["dropped_clients"] = dropped;
    x["eval"] = rec.eval ? py::object(EvalDict(*rec.eval)) : py::object(py::none());
    rounds.append(x);
  }
  d["rounds"] = rounds;
  d["ndjson"] = r.ToNdjson(false);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Quantization, pairwise masking and split-learning simulation.";

  // Translators run newest first, so the subclass registers last.
  py::register_exception<Error>(m, "VfedsecError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def(
      "quantize",
      [](const RealMatrix& x, double t, uint32_t r, uint64_t seed) {
        Rng rng(seed);
        return FromQMatrix(QuantizeMatrix(x, MakeQConfig(t, r), rng));
      },
      py::arg("x"), py::arg("t") = 4.0, py::arg("r") = 1u << 27, py::arg("seed") = 0,
      "Clip to [-t, t] and stochastically round onto [0, r].");
  m.def(
      "dequantize_sum",
      [](const QArray& s, uint64_t n_summands, double t, uint32_t r) {
        return DequantizeSum(ToQMatrix(s), n_summands, MakeQConfig(t, r));
      },
      py::arg("s"), py::arg("n_summands"), py::arg("t") = 4.0, py::arg("r") = 1u << 27,
      "Decode a modular sum of n_summands quantized values.");
  m.def(
      "mask", [](const QArray& q, const QArray& noise) {
        return FromQMatrix(MaskTensor(ToQMatrix(q), ToQMatrix(noise)));
      },
      py::arg("q"), py::arg("noise"));
  m.def(
      "unmask_sum",
      [](const std::vector<QArray>& msgs) {
        std::vector<QMatrix> qs;
        for (const auto& a : msgs) qs.push_back(ToQMatrix(a));
        return FromQMatrix(UnmaskAggregate(qs, true));
      },
      py::arg("messages"), "Modular sum of one masked message per pool member.");
  m.def(
      "auc",
      [](const std::vector<double>& scores, const std::vector<int>& labels) {
        return MetricAuc(scores, labels);
      },
      py::arg("scores"), py::arg("labels"));

  py::class_<Pool>(m, "Pool")
      .def(py::init<std::vector<uint32_t>, uint32_t, uint64_t, int>(), py::arg("members"),
           py::arg("epoch") = 0, py::arg("master_seed") = 1, py::arg("group_id") = 1)
      .def_property_readonly("members", &Pool::Members)
      .def_readonly("epoch", &Pool::epoch)
      .def("self_noise", &Pool::SelfNoiseFor, py::arg("member"), py::arg("round"),
           py::arg("phase") = 0, py::arg("slot") = 0, py::arg("rows") = 1, py::arg("cols") = 1,
           "Sum of this member's antisymmetric pair noises; cancels over the pool.");

  m.def(
      "train",
      [](std::optional<std::string> config, std::string mode, std::optional<uint32_t> rounds,
         std::optional<uint64_t> seed) {
        RunConfig cfg = config ? RunConfig::Load(*config) : RunConfig{};
        if (rounds) cfg.rounds = *rounds;
        if (seed) cfg.seed = *seed;
        cfg.mode = mode;
        cfg.Validate();
        const SplitTable data = LoadData(cfg);
        py::list out;
        std::vector<DropMode> modes;
        if (mode != "discard") modes.push_back(DropMode::kPad);
        if (mode != "pad") modes.push_back(DropMode::kDiscard);
        for (DropMode dm : modes) {
          TrainReport r;
          {
            py::gil_scoped_release release;
            r = RunTraining(BuildExperiment(cfg, data, dm), data, cfg.ConfigFingerprint());
          }
          out.append(ReportDict(r));
        }
        return out;
      },
      py::arg("config") = py::none(), py::arg("mode") = "pad", py::arg("rounds") = py::none(),
      py::arg("seed") = py::none(),
      "Train from a config file (or the built-in synthetic defaults); one report per mode.");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "vfedsec");
        std::vector<char*> argv;
        for (auto& a : args) argv.push_back(a.data());
        std::ostringstream out, err;
        const int code = RunCli(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the command-line tool; returns (exit_code, stdout, stderr).");
}
