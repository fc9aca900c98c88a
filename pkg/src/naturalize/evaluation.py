"""Transformation endpoint, detection metrics, and the scenario runner.

Positives are CG images (or transformed CG images): a true positive is a
CG image the detector labels ``cg``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import ImageCorpus, normalize, synth_corpus, to_pixels, write_image
from .detector import CG, NATURAL, BlackBoxScorer, DetectorModel, classify_score, train_detector
from .errors import DimensionError, ScenarioError, UndefinedMetricError
from .losses import PerceptualNet, perceptual_loss
from .model import HNetParams, forward_transform_path
from .tensor import Tensor
from .training import TrainConfig, metrics_digest, train_loop

logger = logging.getLogger(__name__)

TRANSFORM_CHUNK = 25
REPORT_FIELDS = ("scenario", "phase", "detector", "n_tp", "n_tn", "n_fp", "n_fn", "accuracy", "detection_rate")


# ---------------------------------------------------------------- transformation


def transform_batch(params: HNetParams, images: np.ndarray) -> np.ndarray:
    """(N,3,S,S) uint8 CG pixels -> (N,3,S,S) uint8 pixels through the transform path."""
    arr = np.asarray(images)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise DimensionError(f"expected (N,3,S,S) images, got shape {arr.shape}")
    s = params.arch.input_size
    if arr.shape[2:] != (s, s):
        raise DimensionError(f"image size {arr.shape[2]}x{arr.shape[3]} does not match model input size {s}")
    out = np.empty(arr.shape, dtype=np.uint8)
    for i in range(0, len(arr), TRANSFORM_CHUNK):
        raw = forward_transform_path(params, Tensor(normalize(arr[i : i + TRANSFORM_CHUNK])), train=False)
        out[i : i + TRANSFORM_CHUNK] = to_pixels(raw.data)
    return out


def transform_image(params: HNetParams, image: np.ndarray) -> np.ndarray:
    """One (3,S,S) uint8 image through the transform path, clamped and denormalized."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise DimensionError(f"expected a (3,S,S) image, got shape {arr.shape}")
    return transform_batch(params, arr[None])[0]


# ---------------------------------------------------------------- metrics


def accuracy(n_tp: int, n_tn: int, n_fp: int, n_fn: int) -> float:
    n = n_tp + n_tn + n_fp + n_fn
    if n == 0:
        raise UndefinedMetricError("accuracy is undefined on an empty report")
    return (n_tp + n_tn) / n


def detection_rate(n_tp: int, n_fn: int) -> float:
    if n_tp + n_fn == 0:
        raise UndefinedMetricError("detection rate is undefined without CG images")
    return n_tp / (n_tp + n_fn)


@dataclass
class MetricsReport:
    n_tp: int
    n_tn: int
    n_fp: int
    n_fn: int
    scores: list[float] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    decisions: list[str] = field(default_factory=list)
    ids: list[str] = field(default_factory=list)
    scenario: str = ""
    phase: str = ""
    detector: str = ""
    notes: dict = field(default_factory=dict)

    @classmethod
    def from_decisions(cls, labels: Sequence[str], decisions: Sequence[str], **kw) -> "MetricsReport":
        if len(labels) != len(decisions):
            raise DimensionError(f"{len(labels)} labels but {len(decisions)} decisions")
        tp = tn = fp = fn = 0
        for lab, dec in zip(labels, decisions):
            if lab == CG:
                if dec == CG:
                    tp += 1
                else:
                    fn += 1
            elif lab == NATURAL:
                if dec == NATURAL:
                    tn += 1
                else:
                    fp += 1
            else:
                raise ValueError(f"unknown label {lab!r}")
        return cls(tp, tn, fp, fn, labels=list(labels), decisions=list(decisions), **kw)

    @classmethod
    def from_scores(
        cls, scores: Sequence[float], labels: Sequence[str], threshold: float = 0.5, **kw
    ) -> "MetricsReport":
        decisions = [classify_score(float(s), threshold) for s in scores]
        return cls.from_decisions(labels, decisions, scores=[float(s) for s in scores], **kw)

    @property
    def n(self) -> int:
        return self.n_tp + self.n_tn + self.n_fp + self.n_fn

    @property
    def accuracy(self) -> float:
        return accuracy(self.n_tp, self.n_tn, self.n_fp, self.n_fn)

    @property
    def detection_rate(self) -> float:
        return detection_rate(self.n_tp, self.n_fn)

    def summary(self) -> dict:
        """Counts and ratios only; undefined ratios come out as None."""
        d = {"scenario": self.scenario, "phase": self.phase, "detector": self.detector}
        d.update(n_tp=self.n_tp, n_tn=self.n_tn, n_fp=self.n_fp, n_fn=self.n_fn)
        for name in ("accuracy", "detection_rate"):
            try:
                d[name] = getattr(self, name)
            except UndefinedMetricError:
                d[name] = None
        return d

    def to_dict(self) -> dict:
        d = self.summary()
        d.update(scores=self.scores, labels=self.labels, decisions=self.decisions, ids=self.ids, notes=self.notes)
        return d


def evaluate_detector(
    model: DetectorModel,
    natural: np.ndarray,
    cg: np.ndarray,
    natural_ids: Sequence[str] | None = None,
    cg_ids: Sequence[str] | None = None,
    **kw,
) -> MetricsReport:
    """Score both classes and build a report in (natural, cg) order."""
    parts = [model.score_batch(x) for x in (natural, cg) if len(x)]
    scores = np.concatenate(parts) if parts else np.zeros(0)
    labels = [NATURAL] * len(natural) + [CG] * len(cg)
    ids = list(natural_ids or [f"natural-{i}" for i in range(len(natural))])
    ids += list(cg_ids or [f"cg-{i}" for i in range(len(cg))])
    return MetricsReport.from_scores(scores, labels, model.threshold, ids=ids, detector=model.variant, **kw)


def write_reports(reports: Iterable[MetricsReport], out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    """Write ``<stem>.json`` (full reports) and ``<stem>.csv`` (one summary row per report)."""
    reports = list(reports)
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = d / f"{stem}.json", d / f"{stem}.csv"
    json_path.write_text(json.dumps([r.to_dict() for r in reports], indent=1) + "\n")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        row = r.summary()
        writer.writerow({k: ("" if row[k] is None else repr(row[k]) if isinstance(row[k], float) else row[k]) for k in REPORT_FIELDS})
    csv_path.write_text(buf.getvalue())
    return json_path, csv_path


def write_transformed(
    images: np.ndarray, source_ids: Sequence[str], out_dir: str | Path, suffix: str = "transformed"
) -> Path:
    """PNG per transformed image plus ``manifest.json`` mapping each output to its source id."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for img, src in zip(images, source_ids):
        ident = f"{src}-{suffix}"
        name = f"{ident}.png"
        write_image(d / name, img)
        entries.append({"id": ident, "label": CG, "file": name, "source": src})
    path = d / "manifest.json"
    path.write_text(json.dumps(entries, indent=1) + "\n")
    return path


# ---------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class SyntheticDataset:
    """A natural/CG pair of independently seeded synthetic corpora."""

    name: str
    natural_seed: int
    cg_seed: int

    def materialize(self, n_train: int, n_eval: int, size: int) -> dict[str, ImageCorpus]:
        total = n_train + n_eval
        nat = synth_corpus(NATURAL, total, size, self.natural_seed)
        cg = synth_corpus(CG, total, size, self.cg_seed)
        train, held = range(n_train), range(n_train, total)
        return {
            "natural_train": nat.subset(train),
            "cg_train": cg.subset(train),
            "natural_eval": nat.subset(held),
            "cg_eval": cg.subset(held),
        }


DATASETS = {
    "D1": SyntheticDataset("D1", 11, 12),
    "D2": SyntheticDataset("D2", 21, 22),
    "D3": SyntheticDataset("D3", 31, 32),
}


@dataclass(frozen=True)
class ScenarioSpec:
    hnet_corpus: str
    detector_corpus: str
    eval_corpus: str
    tag: str

    def __post_init__(self) -> None:
        for name in (self.hnet_corpus, self.detector_corpus, self.eval_corpus):
            if name not in DATASETS:
                raise ValueError(f"unknown corpus id {name!r}; known: {sorted(DATASETS)}")
        same = self.hnet_corpus == self.detector_corpus
        if self.tag == "1" and not same:
            raise ValueError("scenario 1 trains H-Net and detector on the same corpus")
        if self.tag.startswith("2") and same:
            raise ValueError("scenario 2 analogues need disjoint H-Net and detector corpora")

    def swapped(self, tag: str) -> "ScenarioSpec":
        return ScenarioSpec(self.detector_corpus, self.hnet_corpus, self.hnet_corpus, tag)


SCENARIOS = {
    "1": ScenarioSpec("D1", "D1", "D1", "1"),
    "2.1": ScenarioSpec("D1", "D2", "D2", "2.1"),
    "2.2": ScenarioSpec("D2", "D1", "D1", "2.2"),
}


@dataclass
class ScenarioConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: int = 400
    n_eval: int = 100
    size: int = 64
    discriminator: str = "mlp"
    detectors: tuple[str, ...] = ("flda", "mlp")
    detector_seed: int = 0
    n_identity_pairs: int = 100
    identity_seed: int = 0
    min_drop: float = 0.20

    def __post_init__(self) -> None:
        if self.train.input_size != self.size:
            self.train = replace(self.train, input_size=self.size)


DESK_BATCH_SIZE = 4
DESK_EPOCHS = 12  # x 50 iterations per epoch = 600 iterations


def desk_scale_config(**overrides) -> ScenarioConfig:
    """The 64x64, 400+400 image, 600-iteration configuration the acceptance suite runs."""
    train = TrainConfig(batch_size=DESK_BATCH_SIZE, iterations_per_epoch=50, epochs=DESK_EPOCHS)
    return ScenarioConfig(train=train, **overrides)


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    reports: dict[str, tuple[MetricsReport, MetricsReport]]
    transformed: np.ndarray
    transformed_ids: list[str]
    identity: dict
    failure_mode: dict
    metrics_digest: str
    params: HNetParams
    artifacts: dict[str, str] = field(default_factory=dict)

    def all_reports(self) -> list[MetricsReport]:
        return [r for pair in self.reports.values() for r in pair]

    def report_digest(self) -> str:
        payload = json.dumps([r.to_dict() for r in self.all_reports()], sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


def identity_proxy(
    perceptual: PerceptualNet, transformed: np.ndarray, sources: np.ndarray, n_pairs: int = 100, seed: int = 0
) -> dict:
    """Mean perceptual distance of each output to its own source vs between random distinct sources."""
    own = [
        perceptual_loss(perceptual, Tensor(normalize(t[None])), Tensor(normalize(s[None]))).item()
        for t, s in zip(transformed, sources)
    ]
    rng = np.random.default_rng(seed)
    n = len(sources)
    pairs = []
    for _ in range(n_pairs):
        i, j = rng.choice(n, 2, replace=False)
        pairs.append(
            perceptual_loss(perceptual, Tensor(normalize(sources[i][None])), Tensor(normalize(sources[j][None]))).item()
        )
    own_mean, pair_mean = float(np.mean(own)), float(np.mean(pairs))
    return {"own_mean": own_mean, "random_pair_mean": pair_mean, "preserved": own_mean < pair_mean}


def _failure_mode(spec: ScenarioSpec, before: float, after: float, min_drop: float) -> dict:
    """Mark the outcome where cross-corpus transformation makes CG images *easier* to detect."""
    return {
        "scenario": spec.tag,
        "before": before,
        "after": after,
        "drop": before - after,
        "meets_drop": before - after >= min_drop,
        "rate_rose": spec.tag.startswith("2") and after > before,
    }


def run_scenario(
    spec: ScenarioSpec,
    config: ScenarioConfig | None = None,
    out_dir: str | Path | None = None,
    perceptual: PerceptualNet | None = None,
) -> ScenarioResult:
    """Train the detectors and H-Net named by ``spec`` and report before/after detection.

    The discriminator (``config.discriminator``) is the black box queried
    during H-Net training. Every variant in ``config.detectors`` is trained on
    the detector corpus and scored on the evaluation corpus: natural images
    once, CG images before and after transformation. After-phase accuracy
    covers natural + transformed CG images. Any failure is re-raised as
    :class:`ScenarioError` carrying the stage name.
    """
    cfg = config or ScenarioConfig()
    out = Path(out_dir) if out_dir is not None else None
    stage = "corpora"
    try:
        cache: dict[str, dict[str, ImageCorpus]] = {}

        def data(name: str) -> dict[str, ImageCorpus]:
            if name not in cache:
                cache[name] = DATASETS[name].materialize(cfg.n_train, cfg.n_eval, cfg.size)
            return cache[name]

        hnet_data, det_data, eval_data = data(spec.hnet_corpus), data(spec.detector_corpus), data(spec.eval_corpus)

        stage = "detectors"
        variants = dict.fromkeys((cfg.discriminator, *cfg.detectors))
        models = {
            v: train_detector(v, det_data["natural_train"].images, det_data["cg_train"].images, seed=cfg.detector_seed)
            for v in variants
        }

        stage = "hnet-training"
        perceptual = perceptual or PerceptualNet.seeded(cfg.train.perceptual_seed)
        state = train_loop(
            cfg.train,
            hnet_data["natural_train"].images,
            hnet_data["cg_train"].images,
            BlackBoxScorer(models[cfg.discriminator]),
            perceptual,
            out_dir=out / "hnet" if out is not None else None,
        )

        stage = "transform"
        cg_eval, nat_eval = eval_data["cg_eval"], eval_data["natural_eval"]
        transformed = transform_batch(state.params, cg_eval.images)
        t_ids = [f"{i}-transformed" for i in cg_eval.ids]

        stage = "evaluate"
        reports = {}
        for v in cfg.detectors:
            m = models[v]
            meta = {"after_accuracy_covers": "natural + transformed cg"}
            before = evaluate_detector(
                m, nat_eval.images, cg_eval.images, nat_eval.ids, cg_eval.ids, scenario=spec.tag, phase="before"
            )
            nat_scores = before.scores[: len(nat_eval)]
            after_scores = nat_scores + [float(s) for s in m.score_batch(transformed)]
            after = MetricsReport.from_scores(
                after_scores,
                [NATURAL] * len(nat_eval) + [CG] * len(transformed),
                m.threshold,
                ids=list(nat_eval.ids) + t_ids,
                detector=v,
                scenario=spec.tag,
                phase="after",
                notes=meta,
            )
            reports[v] = (before, after)

        stage = "identity-proxy"
        identity = identity_proxy(perceptual, transformed, cg_eval.images, cfg.n_identity_pairs, cfg.identity_seed)

        primary = cfg.detectors[0]
        flag = _failure_mode(
            spec, reports[primary][0].detection_rate, reports[primary][1].detection_rate, cfg.min_drop
        )
        result = ScenarioResult(
            spec, reports, transformed, t_ids, identity, flag, metrics_digest(state.log), state.params
        )

        if out is not None:
            stage = "write"
            json_path, csv_path = write_reports(result.all_reports(), out, "report")
            manifest = write_transformed(transformed, cg_eval.ids, out / "transformed")
            summary = {
                "scenario": asdict(spec),
                "identity": identity,
                "failure_mode": flag,
                "metrics_digest": result.metrics_digest,
                "report_digest": result.report_digest(),
                "detectors": {v: models[v].fingerprint() for v in variants},
            }
            (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
            result.artifacts = {
                "report_json": str(json_path),
                "report_csv": str(csv_path),
                "transformed_manifest": str(manifest),
                "summary": str(out / "summary.json"),
                "hnet_dir": str(out / "hnet"),
            }
        return result
    except ScenarioError:
        raise
    except Exception as exc:
        raise ScenarioError(stage, exc) from exc
