// Python surface for the simmt core. Thin by design: file paths in, plain
// dicts/lists out, so the bindings never own tensors or model state.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <array>
#include <string>
#include <vector>

#include "simmt/data.hpp"
#include "simmt/error.hpp"
#include "simmt/evaluation.hpp"
#include "simmt/experiment.hpp"
#include "simmt/simultaneous.hpp"

namespace py = pybind11;
using namespace simmt;

namespace {

using Sentences = std::vector<std::vector<std::string>>;

BoundingBox to_box(const std::array<double, 4>& v) {
  return BoundingBox{v[0], v[1], v[2], v[3]};
}

py::dict summary_dict(const TrainSummary& s) {
  py::dict d;
  d["best_f1"] = s.best_f1;
  d["best_bleu"] = s.best_bleu;
  d["best_val_loss"] = s.best_val_loss;
  d["best_epoch"] = s.best_epoch;
  d["epochs_run"] = s.epochs_run;
  d["diverged"] = s.diverged;
  d["checkpoint"] = s.checkpoint_path;
  d["log"] = s.log_path;
  d["config"] = s.config_path;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Simultaneous multimodal translation core";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<DataError>(m, "DataError");
  auto numeric_error = py::register_exception<NumericError>(m, "NumericError");
  // Registered after the base so its translator is tried first.
  py::register_exception<DimensionError>(m, "DimensionError",
                                         numeric_error.ptr());

  m.def("g_waitk", &g_waitk, py::arg("k"), py::arg("t"), py::arg("src_len"),
        "Source positions readable before emitting target word t (1-based).");

  m.def(
      "bleu",
      [](const Sentences& hyps, const Sentences& refs, int max_order) {
        return bleu(hyps, refs, max_order);
      },
      py::arg("hyps"), py::arg("refs"), py::arg("max_order") = 4,
      "Corpus BLEU over tokenized sentences, one reference per hypothesis.");

  m.def(
      "prefix_accuracy",
      [](const Sentences& hyps, const Sentences& refs, int n) {
        return prefix_accuracy(hyps, refs, n);
      },
      py::arg("hyps"), py::arg("refs"), py::arg("n"),
      "Mean positional match rate within the first n tokens.");

  m.def(
      "token_f1",
      [](const Sentences& hyps, const Sentences& refs) {
        return token_f1(hyps, refs);
      },
      py::arg("hyps"), py::arg("refs"),
      "Mean multiset token F1 between hypotheses and references.");

  m.def(
      "iou",
      [](const std::array<double, 4>& a, const std::array<double, 4>& b) {
        return iou(to_box(a), to_box(b));
      },
      py::arg("a"), py::arg("b"),
      "Intersection over union of two (x1, y1, x2, y2) boxes.");

  py::class_<Vocabulary>(m, "Vocabulary")
      .def_readonly_static("PAD", &Vocabulary::kPad)
      .def_readonly_static("BOS", &Vocabulary::kBos)
      .def_readonly_static("EOS", &Vocabulary::kEos)
      .def_readonly_static("UNK", &Vocabulary::kUnk)
      .def_readonly("id_to_token", &Vocabulary::id_to_token)
      .def_static("tokenize", &Vocabulary::tokenize, py::arg("line"))
      .def_static("build", &Vocabulary::build, py::arg("lines"),
                  py::arg("min_freq") = 1)
      .def_static("from_tokens", &Vocabulary::from_tokens,
                  py::arg("id_to_token"))
      .def("__len__", &Vocabulary::size)
      .def("token_id", &Vocabulary::token_id, py::arg("token"))
      .def("token", &Vocabulary::token, py::arg("id"))
      .def("encode", &Vocabulary::encode, py::arg("line"), py::arg("add_bos"))
      .def("encode_tokens", &Vocabulary::encode_tokens, py::arg("tokens"),
           py::arg("add_bos"))
      .def("decode", &Vocabulary::decode, py::arg("ids"))
      .def("decode_string", &Vocabulary::decode_string, py::arg("ids"));

  m.def(
      "generate_synthetic_corpus",
      [](const std::string& out_dir, int train_examples, int val_examples,
         int ambiguous_types, int plain_types, int archetypes, int min_len,
         int max_len, double ambiguity, double feature_noise, uint64_t seed) {
        SyntheticCorpusSpec spec;
        spec.train_examples = train_examples;
        spec.val_examples = val_examples;
        spec.ambiguous_types = ambiguous_types;
        spec.plain_types = plain_types;
        spec.archetypes = archetypes;
        spec.min_len = min_len;
        spec.max_len = max_len;
        spec.ambiguity = ambiguity;
        spec.feature_noise = feature_noise;
        spec.seed = seed;
        const SyntheticCorpus c = generate_synthetic_corpus(spec, out_dir);
        py::dict d;
        d["train_src"] = c.train_src;
        d["train_tgt"] = c.train_tgt;
        d["train_idx"] = c.train_idx;
        d["train_ann"] = c.train_ann;
        d["val_src"] = c.val_src;
        d["val_tgt"] = c.val_tgt;
        d["val_idx"] = c.val_idx;
        d["val_ann"] = c.val_ann;
        d["features"] = c.features;
        d["embeddings"] = c.embeddings;
        d["manifest"] = c.manifest;
        return d;
      },
      py::arg("out_dir"), py::arg("train_examples") = 2000,
      py::arg("val_examples") = 200, py::arg("ambiguous_types") = 8,
      py::arg("plain_types") = 8, py::arg("archetypes") = 4,
      py::arg("min_len") = 3, py::arg("max_len") = 7,
      py::arg("ambiguity") = 0.5, py::arg("feature_noise") = 0.1,
      py::arg("seed") = 1,
      "Write the ambiguous-token synthetic corpus; returns its file paths.");

  m.def(
      "train",
      [](const std::string& config, const std::vector<std::string>& overrides,
         bool text) {
        const ExperimentConfig cfg =
            text ? ExperimentConfig::parse_text(config, overrides)
                 : ExperimentConfig::parse_file(config, overrides);
        TrainSummary s;
        {
          py::gil_scoped_release release;
          s = run_train(cfg);
        }
        return summary_dict(s);
      },
      py::arg("config"), py::arg("overrides") = std::vector<std::string>{},
      py::arg("text") = false,
      "Run one training experiment from a config file (or literal config "
      "text when text=True, with section.key=value overrides applied in "
      "order); returns the summary and artifact paths.");

  m.def(
      "translate",
      [](const std::string& checkpoint, const std::string& source, int k,
         bool consecutive, bool collect_traces, const std::string& image_index,
         const std::string& features) {
        TranslateOptions opts;
        opts.k = k;
        opts.consecutive = consecutive;
        opts.collect_traces = collect_traces;
        opts.image_index = image_index;
        opts.features = features;
        TranslateResult r;
        {
          py::gil_scoped_release release;
          r = run_translate(checkpoint, source, opts);
        }
        py::dict d;
        d["lines"] = r.lines;
        d["traces"] = r.trace_lines;
        return d;
      },
      py::arg("checkpoint"), py::arg("source"), py::arg("k") = 1,
      py::arg("consecutive") = false, py::arg("collect_traces") = false,
      py::arg("image_index") = std::string(),
      py::arg("features") = std::string(),
      "Wait-k (or consecutive) greedy decode of a source file; traces are "
      "JSON strings when requested.");

  m.def(
      "evaluate",
      [](const std::string& hyp, const std::string& ref, bool with_bleu,
         bool with_prefix, const std::vector<int>& prefix_n) {
        EvaluateOptions opts;
        opts.bleu = with_bleu;
        opts.prefix_acc = with_prefix;
        if (!prefix_n.empty()) opts.prefix_n = prefix_n;
        const EvaluateReport r = run_evaluate(hyp, ref, opts);
        py::dict d;
        d["bleu"] = r.bleu ? py::cast(*r.bleu) : py::none();
        py::dict pa;
        for (const auto& [n, score] : r.prefix_acc) pa[py::int_(n)] = score;
        d["prefix_accuracy"] = pa;
        d["lines"] = r.lines;
        return d;
      },
      py::arg("hyp"), py::arg("ref"), py::arg("bleu") = true,
      py::arg("prefix_acc") = false,
      py::arg("prefix_n") = std::vector<int>{1, 2, 3},
      "Score a hypothesis file against a reference file.");

  m.def(
      "ground_eval",
      [](const std::string& checkpoint, const std::string& source,
         const std::string& image_index, const std::string& features,
         const std::string& annotations, const std::string& feature_source,
         const std::string& embeddings, int k) {
        GroundEvalOptions opts;
        opts.source = feature_source_from_name(feature_source);
        opts.embeddings = embeddings;
        opts.k = k;
        GroundEvalReport r;
        {
          py::gil_scoped_release release;
          r = run_ground_eval(checkpoint, source, image_index, features,
                              annotations, opts);
        }
        py::dict d;
        d["mean_iou"] = r.mean_iou;
        d["accuracy"] = r.accuracy;
        d["exact_match"] = r.exact_match;
        d["mean_cosine"] = r.mean_cosine ? py::cast(*r.mean_cosine) : py::none();
        d["words_scored"] = r.words_scored;
        d["words_skipped"] = r.words_skipped;
        return d;
      },
      py::arg("checkpoint"), py::arg("source"), py::arg("image_index"),
      py::arg("features"), py::arg("annotations"),
      py::arg("feature_source") = "gold", py::arg("embeddings") = std::string(),
      py::arg("k") = 1,
      "Score region attention against word-region annotations.");

  m.def(
      "attention_dump",
      [](const std::string& checkpoint, const std::string& source,
         const std::string& image_index, const std::string& features,
         int example_id, int k) {
        py::gil_scoped_release release;
        return run_attention_dump(checkpoint, source, image_index, features,
                                  example_id, k);
      },
      py::arg("checkpoint"), py::arg("source"), py::arg("image_index"),
      py::arg("features"), py::arg("example_id") = 0, py::arg("k") = 1,
      "Per-word region attention for one example, as a JSON document.");
}
