"""End-to-end smoke tests for the Python bindings.

These assert plumbing, not science: the metric functions agree with easy
hand values, and a miniature experiment round-trips train -> translate ->
evaluate -> ground_eval through real files.
"""

import json
import math

import pytest

import simmt


def test_waitk_schedule():
    assert simmt.g_waitk(2, 1, 10) == 2
    assert simmt.g_waitk(2, 5, 10) == 6
    # Saturates at the source length.
    assert simmt.g_waitk(3, 50, 10) == 10
    assert simmt.g_waitk(1, 1, 1) == 1


def test_metrics_hand_values():
    hyp = [["a", "b", "c"]]
    assert simmt.bleu(hyp, hyp) == pytest.approx(1.0)
    assert simmt.token_f1(hyp, [["a", "b", "d"]]) == pytest.approx(2 / 3)
    assert simmt.prefix_accuracy(hyp, [["a", "x", "c"]], 2) == pytest.approx(0.5)
    assert simmt.iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7)
    assert simmt.iou([0, 0, 4, 4], [0, 0, 4, 4]) == pytest.approx(1.0)


def test_error_mapping():
    with pytest.raises(simmt.DataError):
        simmt.bleu([["a"]], [])  # hypothesis/reference count mismatch
    with pytest.raises(simmt.NumericError):
        simmt.iou([0, 0, 0, 0], [1, 1, 2, 2])  # degenerate box
    assert issubclass(simmt.DimensionError, simmt.NumericError)


def test_vocabulary_roundtrip():
    vocab = simmt.Vocabulary.build(["the cat sat", "the dog sat"])
    assert len(vocab) == 4 + 4  # specials + {the, sat, cat, dog}
    ids = vocab.encode("the cat", add_bos=False)
    assert ids[-1] == simmt.Vocabulary.EOS
    assert vocab.decode(ids) == ["the", "cat"]
    assert vocab.token_id("zebra") == simmt.Vocabulary.UNK
    assert simmt.Vocabulary.tokenize("The  cat") == ["the", "cat"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return simmt.generate_synthetic_corpus(
        str(out), train_examples=80, val_examples=20, seed=5
    )


BASE_CONFIG = """
[experiment]
task = {task}
policy = waitk
supervision = {supervision}
output_dir = {out}

[model]
layers = 1
dim = 16
ff_dim = 32
heads = 2
dropout = 0.0

[train]
seed = 3
batch_size = 16
max_epochs = {epochs}
patience = {epochs}
warmup = 50
lr_scale = 1.0
wait_k = 1
{extra}
[data]
train_src = {train_src}
train_tgt = {train_tgt}
val_src = {val_src}
val_tgt = {val_tgt}
{data_extra}
"""


def _config(corpus, out, task, supervision="none", epochs=3, extra="", data_extra=""):
    return BASE_CONFIG.format(
        task=task,
        supervision=supervision,
        out=out,
        epochs=epochs,
        extra=extra,
        train_src=corpus["train_src"],
        train_tgt=corpus["train_tgt"],
        val_src=corpus["val_src"],
        val_tgt=corpus["val_tgt"],
        data_extra=data_extra,
    )


def test_text_experiment_roundtrip(corpus, tmp_path):
    summary = simmt.train(
        _config(corpus, tmp_path / "run", task="nmt"),
        overrides=["train.max_epochs=2"],
        text=True,
    )
    assert summary["epochs_run"] == 2
    assert not summary["diverged"]
    assert 1 <= summary["best_epoch"] <= 2

    result = simmt.translate(
        summary["checkpoint"], corpus["val_src"], k=1, collect_traces=True
    )
    assert len(result["lines"]) == 20
    trace = json.loads(result["traces"][0])
    assert set("RW") >= set(trace["actions"])

    hyp = tmp_path / "hyp.txt"
    hyp.write_text("".join(line + "\n" for line in result["lines"]))
    report = simmt.evaluate(str(hyp), corpus["val_tgt"], prefix_acc=True)
    assert 0.0 <= report["bleu"] <= 1.0
    assert report["lines"] == 20
    assert set(report["prefix_accuracy"]) == {1, 2, 3}


def test_multimodal_grounding_roundtrip(corpus, tmp_path):
    data_extra = (
        f"train_index = {corpus['train_idx']}\n"
        f"val_index = {corpus['val_idx']}\n"
        f"features = {corpus['features']}\n"
        f"annotations = {corpus['train_ann']}\n"
    )
    summary = simmt.train(
        _config(
            corpus,
            tmp_path / "mmt",
            task="mmt",
            supervision="scratch",
            epochs=2,
            extra="beta = 1.0\n",
            data_extra=data_extra,
        ),
        text=True,
    )
    assert not summary["diverged"]

    report = simmt.ground_eval(
        summary["checkpoint"],
        corpus["val_src"],
        corpus["val_idx"],
        corpus["features"],
        corpus["val_ann"],
        embeddings=corpus["embeddings"],
        k=1,
    )
    assert report["words_scored"] > 0
    assert 0.0 <= report["accuracy"] <= 1.0
    assert 0.0 <= report["mean_iou"] <= 1.0
    assert report["mean_cosine"] is None or -1.0 <= report["mean_cosine"] <= 1.0

    dump = json.loads(
        simmt.attention_dump(
            summary["checkpoint"],
            corpus["val_src"],
            corpus["val_idx"],
            corpus["features"],
            example_id=0,
            k=1,
        )
    )
    rows = dump["rows"]
    assert len(rows) == len(dump["tokens"])
    for row in rows:
        assert math.isclose(sum(row["attention"]), 1.0, abs_tol=1e-6)


def test_config_errors_surface():
    with pytest.raises(simmt.ConfigError):
        simmt.train("[experiment]\ntask = nmt\nbogus = 1\n", text=True)
