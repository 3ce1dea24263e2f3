#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include <nlohmann/json.hpp>

#include "dcollapse/data.hpp"
#include "dcollapse/error.hpp"
#include "dcollapse/experiment.hpp"
#include "dcollapse/losses.hpp"
#include "dcollapse/probe.hpp"
#include "dcollapse/spectral.hpp"
#include "dcollapse/teacher.hpp"
#include "dcollapse/trainer.hpp"

namespace py = pybind11;
using namespace dcollapse;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

EmbeddingMatrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw InvalidInput("expected a 2-d array, got " + std::to_string(a.ndim()) + " dimensions");
  const auto n = static_cast<std::size_t>(a.shape(0)), d = static_cast<std::size_t>(a.shape(1));
  return EmbeddingMatrix(n, d, std::vector<double>(a.data(), a.data() + n * d));
}

std::vector<int> to_ints(const IntArray& a) { return {a.data(), a.data() + a.size()}; }

Array from_matrix(const std::vector<double>& values, std::size_t n, std::size_t d) {
  Array out({n, d});
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

template <class T>
Array from_vector(const std::vector<T>& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  if (o.is_none()) return nlohmann::json::object();
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

Dataset to_dataset(const Array& images, const IntArray& labels, int class_count) {
  if (images.ndim() != 4) throw InvalidInput("images must have shape [n, channels, size, size]");
  if (images.shape(2) != images.shape(3)) throw InvalidInput("images must be square");
  Dataset d;
  d.n = static_cast<std::size_t>(images.shape(0));
  d.channels = static_cast<std::size_t>(images.shape(1));
  d.size = static_cast<std::size_t>(images.shape(2));
  d.pixels.assign(images.data(), images.data() + images.size());
  d.labels = to_ints(labels);
  if (class_count <= 0)
    class_count = d.labels.empty() ? 0 : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  d.class_count = class_count;
  d.validate();
  return d;
}

py::tuple from_dataset(const Dataset& d) {
  Array images({d.n, d.channels, d.size, d.size});
  std::copy(d.pixels.begin(), d.pixels.end(), images.mutable_data());
  IntArray labels(static_cast<py::ssize_t>(d.labels.size()));
  std::copy(d.labels.begin(), d.labels.end(), labels.mutable_data());
  return py::make_tuple(images, labels);
}

py::dict store_dict(const TeacherStore& t) {
  py::dict out;
  out["values"] = from_matrix(t.values, t.n, t.dim);
  if (t.labels) {
    IntArray l(static_cast<py::ssize_t>(t.labels->size()));
    std::copy(t.labels->begin(), t.labels->end(), l.mutable_data());
    out["labels"] = l;
  } else {
    out["labels"] = py::none();
  }
  out["meta"] = to_py(t.meta);
  return out;
}

TrainConfig config_from(const py::object& o) {
  auto base = nlohmann::json(desk_train_config());
  base.merge_patch(from_py(o));
  auto c = base.get<TrainConfig>();
  c.validate();
  return c;
}

py::bytes as_bytes(const std::vector<unsigned char>& b) {
  return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
}

std::vector<unsigned char> from_bytes(const py::bytes& b) {
  const auto s = std::string(b);
  return {s.begin(), s.end()};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dimensional-collapse laboratory: spectral analysis, teachers, distillation and probes";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InvalidInput>(m, "InvalidInput", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);

  m.def("effective_rank", [](const Array& s) { return effective_rank({s.data(), static_cast<std::size_t>(s.size())}); },
        py::arg("singular_values"));
  m.def("singular_values", [](const Array& z) { return from_vector(singular_values(to_matrix(z))); }, py::arg("z"));
  m.def("centered_effective_rank", [](const Array& z) { return centered_effective_rank(to_matrix(z)); }, py::arg("z"));
  m.def(
      "embedding_rank",
      [](const Array& z, const std::string& rank_input) {
        return embedding_rank(to_matrix(z), parse_rank_input(rank_input));
      },
      py::arg("z"), py::arg("rank_input") = "raw");
  m.def(
      "analyze",
      [](const Array& z, std::size_t max_pairs, std::uint64_t seed) {
        return to_py(nlohmann::json(analyze(to_matrix(z), {max_pairs, seed})));
      },
      py::arg("z"), py::arg("max_pairs") = kDefaultMaxPairs, py::arg("seed") = 0);
  m.def(
      "mean_pairwise_cosine",
      [](const Array& z, std::size_t max_pairs, std::uint64_t seed) {
        return mean_pairwise_cosine(to_matrix(z), max_pairs, seed);
      },
      py::arg("z"), py::arg("max_pairs") = kDefaultMaxPairs, py::arg("seed") = 0);
  m.def(
      "normalize_rows",
      [](const Array& z) {
        const auto r = normalize_rows(to_matrix(z));
        return from_matrix(r.values, r.n, r.d);
      },
      py::arg("z"));

  m.def("cosine_distill", [](const Array& s, const Array& t) { return cosine_distill(to_matrix(s), to_matrix(t)); },
        py::arg("student"), py::arg("teacher"));
  m.def(
      "infonce", [](const Array& a, const Array& b, double tau) { return infonce(to_matrix(a), to_matrix(b), tau); },
      py::arg("view1"), py::arg("view2"), py::arg("tau") = 0.2);

  m.def(
      "knn_accuracy",
      [](const Array& ref, const IntArray& ref_labels, const Array& qry, const IntArray& qry_labels, int k) {
        auto r = to_matrix(ref);
        auto q = to_matrix(qry);
        r.labels = to_ints(ref_labels);
        q.labels = to_ints(qry_labels);
        return knn_accuracy(r, q, k);
      },
      py::arg("reference"), py::arg("reference_labels"), py::arg("query"), py::arg("query_labels"),
      py::arg("k") = kDefaultNeighbors);

  m.def(
      "gen_synthetic",
      [](int classes, int per_class, int size, int channels, double noise_level, std::uint64_t seed,
         const std::string& split) {
        SyntheticConfig c;
        c.classes = classes;
        c.per_class = per_class;
        c.size = size;
        c.channels = channels;
        c.noise_level = noise_level;
        c.seed = seed;
        c.split = parse_split(split);
        return from_dataset(gen_synthetic(c));
      },
      py::arg("classes") = 10, py::arg("per_class") = 200, py::arg("size") = 16, py::arg("channels") = 1,
      py::arg("noise_level") = 0.1, py::arg("seed") = 0, py::arg("split") = "train");
  m.def(
      "read_records",
      [](const std::string& path, std::size_t channels, std::size_t size, int class_count) {
        ReadOptions o;
        o.layout = {channels, size};
        o.class_count = class_count;
        return from_dataset(read_cifar_binary(path, o));
      },
      py::arg("path"), py::arg("channels") = 3, py::arg("size") = 32, py::arg("class_count") = 10);
  m.def(
      "write_records",
      [](const std::string& path, const Array& images, const IntArray& labels) {
        write_cifar_binary(to_dataset(images, labels, 0), path);
      },
      py::arg("path"), py::arg("images"), py::arg("labels"));

  m.def(
      "gen_teacher",
      [](const std::string& mode, const IntArray& labels, int dim, double rho, double class_scale,
         double within_class_scale, double gamma, std::uint64_t seed) {
        const auto l = to_ints(labels);
        if (mode == "cone") {
          ConeConfig c{dim, rho, class_scale, within_class_scale, gamma};
          return store_dict(gen_cone_teacher(l, c, seed));
        }
        if (mode == "uniform") return store_dict(gen_uniform_teacher(l, UniformConfig{dim, class_scale, within_class_scale}, seed));
        throw InvalidInput("unknown teacher mode '" + mode + "' (expected cone or uniform)");
      },
      py::arg("mode"), py::arg("labels"), py::arg("dim") = 64, py::arg("rho") = 4.0, py::arg("class_scale") = 1.0,
      py::arg("within_class_scale") = 0.5, py::arg("gamma") = 1.5, py::arg("seed") = 3);
  m.def("read_emb1", [](const std::string& path) { return store_dict(read_emb1(path)); }, py::arg("path"));
  m.def(
      "write_emb1",
      [](const std::string& path, const Array& values, const std::optional<IntArray>& labels, const py::object& meta) {
        TeacherStore t;
        const auto z = to_matrix(values);
        t.n = z.n;
        t.dim = z.d;
        t.values = z.values;
        if (labels) t.labels = to_ints(*labels);
        t.meta = from_py(meta);
        write_emb1(t, path);
      },
      py::arg("path"), py::arg("values"), py::arg("labels") = py::none(), py::arg("meta") = py::none());

  m.def("desk_train_config", [] { return to_py(nlohmann::json(desk_train_config())); });
  m.def(
      "train",
      [](const Array& images, const IntArray& labels, const Array& teacher, const py::object& config,
         const std::optional<Array>& eval_images, const std::optional<IntArray>& eval_labels) {
        const auto c = config_from(config);
        const auto train_set = to_dataset(images, labels, 0);
        Dataset eval_set = train_set;
        if (eval_images && eval_labels) {
          eval_set = to_dataset(*eval_images, *eval_labels, train_set.class_count);
          eval_set.split = Split::Eval;
        }
        TeacherStore t;
        const auto z = to_matrix(teacher);
        t.n = z.n;
        t.dim = z.d;
        t.values = z.values;
        TrainResult r = [&] {
          py::gil_scoped_release release;
          return train(c, train_set, t, eval_set);
        }();
        py::dict out;
        nlohmann::json metrics = nlohmann::json::array();
        std::istringstream lines(r.log.to_jsonl());
        for (std::string line; std::getline(lines, line);)
          if (!line.empty()) metrics.push_back(nlohmann::json::parse(line));
        out["metrics"] = to_py(metrics);
        out["params"] = r.model.param_count();
        out["checkpoint"] = as_bytes(encode_checkpoint(r.model, c));
        return out;
      },
      py::arg("images"), py::arg("labels"), py::arg("teacher"), py::arg("config") = py::none(),
      py::arg("eval_images") = py::none(), py::arg("eval_labels") = py::none());
  m.def(
      "embed",
      [](const py::bytes& checkpoint, const Array& images) {
        const auto ck = decode_checkpoint(from_bytes(checkpoint));
        IntArray no_labels(images.ndim() > 0 ? images.shape(0) : 0);
        std::fill(no_labels.mutable_data(), no_labels.mutable_data() + no_labels.size(), 0);
        auto data = to_dataset(images, no_labels, 1);
        const auto z = evaluate_embeddings(ck.model, data);
        return from_matrix(z.values, z.n, z.d);
      },
      py::arg("checkpoint"), py::arg("images"));
  m.def(
      "checkpoint_config", [](const py::bytes& checkpoint) { return to_py(nlohmann::json(decode_checkpoint(from_bytes(checkpoint)).config)); },
      py::arg("checkpoint"));
}
