import csv
import json

import numpy as np
import pytest

from naturalize.errors import DimensionError, ScenarioError, UndefinedMetricError
from naturalize.evaluation import (
    SCENARIOS,
    MetricsReport,
    ScenarioConfig,
    ScenarioSpec,
    accuracy,
    detection_rate,
    run_scenario,
    transform_batch,
    transform_image,
    write_reports,
)
from naturalize.model import ArchSpec, init_weights
from naturalize.training import TrainConfig


def brute_force(labels, decisions):
    """Independent recount straight from the per-image pairs."""
    n = len(labels)
    correct = sum(1 for lab, dec in zip(labels, decisions) if lab == dec)
    positives = [dec for lab, dec in zip(labels, decisions) if lab == "cg"]
    caught = sum(1 for dec in positives if dec == "cg")
    return correct / n if n else None, caught / len(positives) if positives else None


def test_metric_examples():
    assert accuracy(5, 5, 0, 0) == 1.0
    assert accuracy(0, 0, 5, 5) == 0.0
    assert detection_rate(7, 0) == 1.0
    assert detection_rate(0, 7) == 0.0
    with pytest.raises(UndefinedMetricError):
        accuracy(0, 0, 0, 0)
    with pytest.raises(UndefinedMetricError):
        detection_rate(0, 0)


def test_metric_oracle_random_configurations():
    rng = np.random.default_rng(0)
    for _ in range(60):
        n = int(rng.integers(1, 300))
        labels = rng.choice(["natural", "cg"], n).tolist()
        scores = rng.uniform(0, 1, n)
        r = MetricsReport.from_scores(scores, labels, threshold=float(rng.uniform(0.1, 0.9)))
        assert r.n == n
        acc, det = brute_force(r.labels, r.decisions)
        assert r.accuracy == acc
        if det is None:
            with pytest.raises(UndefinedMetricError):
                r.detection_rate
        else:
            assert r.detection_rate == det


def test_report_files_agree(tmp_path):
    r = MetricsReport.from_decisions(["cg", "cg", "natural"], ["cg", "natural", "natural"], scenario="1", phase="before")
    json_path, csv_path = write_reports([r], tmp_path)
    doc = json.loads(json_path.read_text())[0]
    row = next(csv.DictReader(csv_path.open()))
    for key in ("n_tp", "n_tn", "n_fp", "n_fn"):
        assert int(row[key]) == doc[key]
    assert float(row["accuracy"]) == doc["accuracy"] == pytest.approx(2 / 3)
    assert float(row["detection_rate"]) == doc["detection_rate"] == 0.5
    assert row["phase"] == "before" and row["scenario"] == "1"


def test_transform_output_range_and_size():
    p = init_weights(ArchSpec(input_size=16), seed=0)
    imgs = np.random.default_rng(1).integers(0, 256, (3, 3, 16, 16), dtype=np.uint8)
    out = transform_batch(p, imgs)
    assert out.dtype == np.uint8 and out.shape == imgs.shape
    assert np.array_equal(transform_image(p, imgs[1]), out[1])
    with pytest.raises(DimensionError):
        transform_image(p, np.zeros((3, 32, 32), np.uint8))


def test_scenario_spec_invariants():
    assert SCENARIOS["1"].hnet_corpus == SCENARIOS["1"].detector_corpus
    for tag in ("2.1", "2.2"):
        assert SCENARIOS[tag].hnet_corpus != SCENARIOS[tag].detector_corpus
    assert SCENARIOS["2.1"].swapped("2.2") == SCENARIOS["2.2"]
    with pytest.raises(ValueError):
        ScenarioSpec("D1", "D2", "D2", "1")
    with pytest.raises(ValueError):
        ScenarioSpec("D1", "D1", "D1", "2.1")


def _tiny_config(epochs=0):
    return ScenarioConfig(
        train=TrainConfig(batch_size=2, iterations_per_epoch=2, epochs=epochs),
        n_train=12,
        n_eval=6,
        size=16,
        n_identity_pairs=5,
    )


def test_untrained_scenario_plumbing(tmp_path):
    res = run_scenario(SCENARIOS["1"], _tiny_config(0), tmp_path)
    before, after = res.reports["flda"]
    assert before.phase == "before" and after.phase == "after"
    assert after.ids[-1].endswith("-transformed")
    assert before.n == after.n == 12
    # natural images are scored once and shared by both phases
    assert before.scores[:6] == after.scores[:6]
    for r in res.all_reports():
        acc, det = brute_force(r.labels, r.decisions)
        assert r.accuracy == acc and r.detection_rate == det
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["report_digest"] == res.report_digest()
    manifest = json.loads((tmp_path / "transformed" / "manifest.json").read_text())
    assert len(manifest) == 6 and all((tmp_path / "transformed" / e["file"]).exists() for e in manifest)


def test_scenario_deterministic_and_swap_differs():
    a = run_scenario(SCENARIOS["2.1"], _tiny_config(1))
    b = run_scenario(SCENARIOS["2.1"], _tiny_config(1))
    c = run_scenario(SCENARIOS["2.2"], _tiny_config(1))
    assert a.metrics_digest == b.metrics_digest
    assert a.report_digest() == b.report_digest()
    assert a.report_digest() != c.report_digest()


def test_scenario_stage_tag():
    cfg = _tiny_config(0)
    cfg.discriminator = "svm"
    with pytest.raises(ScenarioError) as e:
        run_scenario(SCENARIOS["1"], cfg)
    assert e.value.stage == "detectors"
