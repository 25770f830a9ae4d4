"""Smoke tests for the _uvlm extension module."""
import math

import pytest

_uvlm = pytest.importorskip("_uvlm")


def test_generate_case_is_deterministic_and_well_formed():
    a = _uvlm.generate_case(seed=7, d=16, h=32, w=32, classes=2)
    b = _uvlm.generate_case(seed=7, d=16, h=32, w=32, classes=2)
    assert a["volume"].shape == (16, 32, 32)
    assert a["mask"].shape == (16, 32, 32)
    assert (a["volume"] == b["volume"]).all()
    assert (a["mask"] == b["mask"]).all()
    assert a["labels"] == b["labels"]
    assert len(a["labels"]) == 2
    assert 0.0 <= float(a["volume"].min()) and float(a["volume"].max()) <= 1.0
    # Report text round-trips to the labels.
    assert _uvlm.extract_labels_text(a["report_text"], 2) == a["labels"]


def test_report_rendering_round_trip():
    labels = [1, 0, 1]
    text = _uvlm.render_report_text(labels)
    assert "lesion-0 is present" in text
    assert "no lesion-1 is seen" in text
    assert _uvlm.extract_labels_text(text, 3) == labels
    tokens = _uvlm.tokenize(text, classes=3)
    assert _uvlm.detokenize(tokens, classes=3) == text


def test_stage_for_layer_and_hybrid_mask():
    # Deepest stage feeds layer 1; layers past the stage count get nothing.
    assert _uvlm.stage_for_layer(1, 4, 6) == 4
    assert _uvlm.stage_for_layer(4, 4, 6) == 1
    assert _uvlm.stage_for_layer(5, 4, 6) == 0

    m = _uvlm.build_hybrid_mask(2, 3)
    assert m.shape == (5, 5)
    assert m[:2, :2].all()          # visual block bidirectional
    assert not m[:2, 2:].any()      # visual rows never see text
    assert m[2:, :2].all()          # text sees all visual tokens
    for i in range(3):              # text-over-text causal
        for j in range(3):
            assert bool(m[2 + i, 2 + j]) == (j <= i)


def test_metrics():
    bos, eos = 1, 2
    hyp = [[bos, 5, 5, 5, eos]]
    ref = [[bos, 5, eos]]
    assert _uvlm.bleu(hyp, ref, 1) == pytest.approx(1.0 / 3.0)
    assert _uvlm.bleu(hyp, ref, 2) == 0.0
    f1, precision, recall = _uvlm.macro_prf([[1, 0]], [[1, 1]])
    assert precision == pytest.approx(0.5)
    assert recall == pytest.approx(0.5)


def test_train_and_eval_round_trip(tmp_path):
    data = tmp_path / "data"
    spec_hash = _uvlm.generate_dataset_dir(str(data), cases=3, seed=5, d=16, h=32, w=32, classes=2)
    assert spec_hash == _uvlm.generate_dataset_dir(
        str(data), cases=3, seed=5, d=16, h=32, w=32, classes=2
    )
    ckpt = tmp_path / "stage1.ckpt"
    losses = _uvlm.train_stage(1, str(data), str(ckpt), steps=2, seed=3)
    assert len(losses) == 2
    assert all(math.isfinite(x) for x in losses)
    metrics = _uvlm.eval_checkpoint(str(ckpt), str(data))
    assert metrics["stage"] == "stage1"
    assert 0.0 <= metrics["dice"] <= 1.0
