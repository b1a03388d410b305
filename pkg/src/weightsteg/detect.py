"""Embedding-space classification, the weighted accuracy metric, and reports.

A trained detector bundles the embedding network with the training embeddings
and their class centroids. Classification ties always resolve to malicious:
a scanner should fail closed.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .net import ConvNetConfig, NetParams, forward
from .weights_io import DType, ModelWeights, WeightTensor, read_container, write_container

DETECTOR_FORMAT_VERSION = "1"


@dataclass(eq=False)
class TrainedDetector:
    config: ConvNetConfig
    params: NetParams
    embeddings: np.ndarray  # (n, d) float32 training embeddings
    labels: np.ndarray  # (n,) 0/1
    centroid_benign: np.ndarray
    centroid_malicious: np.ndarray
    representation: str = "grayscale-fourpart"
    manifest_sha256: str = ""
    seed: int = 0
    strategy: str = ""
    trained_lsb: int = 0

    def embed(self, image) -> np.ndarray:
        image = np.asarray(image)
        if image.shape != (self.config.input_size, self.config.input_size):
            raise ValueError(
                f"image shape {image.shape} does not match detector input "
                f"({self.config.input_size}, {self.config.input_size})"
            )
        return forward(self.config, self.params, image).astype(np.float64)


def build_detector(
    config: ConvNetConfig,
    params: NetParams,
    images,
    labels,
    representation: str = "grayscale-fourpart",
    manifest_sha256: str = "",
    seed: int = 0,
    strategy: str = "",
    trained_lsb: int = 0,
) -> TrainedDetector:
    labels = np.asarray(labels, dtype=np.int64)
    if not ((labels == 0).any() and (labels == 1).any()):
        raise ValueError("detector needs at least one embedding per class")
    emb = forward(config, params, np.asarray(images, dtype=np.float32)).astype(np.float32)
    return TrainedDetector(
        config=config,
        params=params,
        embeddings=emb,
        labels=labels,
        centroid_benign=emb[labels == 0].mean(axis=0),
        centroid_malicious=emb[labels == 1].mean(axis=0),
        representation=representation,
        manifest_sha256=manifest_sha256,
        seed=seed,
        strategy=strategy,
        trained_lsb=trained_lsb,
    )


def _centroid_label(embedding, c_benign, c_malicious) -> int:
    d0 = float(np.linalg.norm(np.asarray(embedding, dtype=np.float64) - c_benign))
    d1 = float(np.linalg.norm(np.asarray(embedding, dtype=np.float64) - c_malicious))
    return 1 if d1 <= d0 else 0  # ties fail closed


def centroid_distances(detector: TrainedDetector, image) -> tuple[float, float]:
    e = detector.embed(image)
    return (
        float(np.linalg.norm(e - detector.centroid_benign.astype(np.float64))),
        float(np.linalg.norm(e - detector.centroid_malicious.astype(np.float64))),
    )


def centroid_classify(detector: TrainedDetector, image) -> int:
    """Label of the nearer training centroid under l2."""
    return _centroid_label(
        detector.embed(image),
        detector.centroid_benign.astype(np.float64),
        detector.centroid_malicious.astype(np.float64),
    )


def _knn_label(embedding, embeddings, labels, k: int) -> int:
    if not 1 <= k <= len(embeddings):
        raise ValueError(f"k must be in [1, {len(embeddings)}], got {k}")
    d = np.linalg.norm(
        np.asarray(embeddings, dtype=np.float64) - np.asarray(embedding, dtype=np.float64),
        axis=1,
    )
    order = np.argsort(d, kind="stable")  # distance ties fall back to stored order
    votes = np.asarray(labels)[order[:k]]
    return 1 if (votes == 1).sum() >= (votes == 0).sum() else 0


def knn_votes(detector: TrainedDetector, image, k: int = 1) -> tuple[int, int]:
    e = detector.embed(image)
    if not 1 <= k <= len(detector.embeddings):
        raise ValueError(f"k must be in [1, {len(detector.embeddings)}], got {k}")
    d = np.linalg.norm(detector.embeddings.astype(np.float64) - e, axis=1)
    votes = detector.labels[np.argsort(d, kind="stable")[:k]]
    return int((votes == 0).sum()), int((votes == 1).sum())


def knn_classify(detector: TrainedDetector, image, k: int = 1) -> int:
    """Majority label among the k nearest training embeddings (l2)."""
    v0, v1 = knn_votes(detector, image, k)
    return 1 if v1 >= v0 else 0


def centroids_as_1nn_equivalence_check(
    detector: TrainedDetector, n_queries: int = 100, seed: int = 0, batch: int = 32
) -> bool:
    """Check that the centroid rule matches 1NN over the two centroids.

    The two-point set is ordered malicious first so an exact distance tie
    fails closed on both sides. Returns True iff every sampled query agrees.
    """
    rng = np.random.default_rng(seed)
    size = detector.config.input_size
    c0 = detector.centroid_benign.astype(np.float64)
    c1 = detector.centroid_malicious.astype(np.float64)
    two_points = np.stack([c1, c0])
    two_labels = np.array([1, 0])
    remaining = n_queries
    while remaining > 0:
        count = min(batch, remaining)
        remaining -= count
        images = rng.random((count, size, size)).astype(np.float32)
        embs = forward(detector.config, detector.params, images).astype(np.float64)
        for e in embs:
            if _centroid_label(e, c0, c1) != _knn_label(e, two_points, two_labels, k=1):
                return False
    return True


def weighted_metric(benign_accuracy: float, accuracies) -> float:
    """Weighted accuracy favoring the subtlest attacks.

    Severity i in 1..s gets weight (s - i + 1); the weighted attack mean and
    the benign accuracy each contribute half. Bounded in [0, 1].
    """
    acc = [float(a) for a in accuracies]
    s = len(acc)
    if s < 1:
        raise ValueError("need at least one attack severity accuracy")
    for value in [benign_accuracy, *acc]:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
    denom = s * (s + 1) / 2
    weighted = sum((s - i + 1) * a for i, a in enumerate(acc, start=1))
    return 0.5 * (benign_accuracy + weighted / denom)


def classify_samples(detector: TrainedDetector, samples, mode: str = "centroid", k: int = 1):
    if mode == "centroid":
        return [centroid_classify(detector, s.image) for s in samples]
    if mode in ("1nn", "knn"):
        return [knn_classify(detector, s.image, k) for s in samples]
    raise ValueError(f"unknown evaluation mode {mode!r}")


def accuracy(detector: TrainedDetector, samples, mode: str = "centroid", k: int = 1) -> float:
    if not samples:
        raise ValueError("cannot score an empty sample list")
    predicted = classify_samples(detector, samples, mode, k)
    return float(np.mean([p == s.label for p, s in zip(predicted, samples)]))


def eval_oml(detector, benign_samples, attacked_samples, mode="centroid", k=1) -> float:
    """Accuracy over benign plus samples attacked at the trained severity."""
    return accuracy(detector, list(benign_samples) + list(attacked_samples), mode, k)


def eval_al(detector, benign_samples, attacked_by_severity, mode="centroid", k=1):
    """Weighted metric over benign data and every severity 1..s.

    attacked_by_severity maps severity -> samples and must cover 1..s
    contiguously. Returns (wm, benign_accuracy, {severity: accuracy}).
    """
    severities = sorted(attacked_by_severity)
    if severities != list(range(1, len(severities) + 1)):
        raise ValueError(f"severities must cover 1..s contiguously, got {severities}")
    a0 = accuracy(detector, benign_samples, mode, k)
    per_severity = {x: accuracy(detector, attacked_by_severity[x], mode, k) for x in severities}
    wm = weighted_metric(a0, [per_severity[x] for x in severities])
    return wm, a0, per_severity


def save_detector(detector: TrainedDetector) -> bytes:
    """Serialize to the weights container format with a JSON config header."""
    meta = {
        "format_version": DETECTOR_FORMAT_VERSION,
        "kind": "weightsteg-detector",
        "config": json.dumps(detector.config.to_dict(), sort_keys=True),
        "representation": detector.representation,
        "manifest_sha256": detector.manifest_sha256,
        "seed": str(detector.seed),
        "strategy": detector.strategy,
        "trained_lsb": str(detector.trained_lsb),
    }
    tensors = [
        _f32_tensor(f"net.{name}", value)
        for name, value in detector.params.tensors.items()
    ]
    tensors += [
        _f32_tensor("train.embeddings", detector.embeddings),
        _f32_tensor("train.labels", detector.labels.astype(np.float32)),
        _f32_tensor("centroid.benign", detector.centroid_benign),
        _f32_tensor("centroid.malicious", detector.centroid_malicious),
    ]
    return write_container(ModelWeights(tensors, metadata=meta))


def _f32_tensor(name: str, value) -> WeightTensor:
    arr = np.ascontiguousarray(np.asarray(value, dtype=np.float32))
    return WeightTensor(name, DType.F32, arr.shape, arr.view(np.uint32).reshape(-1))


def load_detector(data: bytes) -> TrainedDetector:
    model = read_container(data)
    meta = model.metadata
    if meta.get("kind") != "weightsteg-detector":
        raise FormatError("not a detector file")
    if meta.get("format_version") != DETECTOR_FORMAT_VERSION:
        raise FormatError(f"unsupported detector format_version {meta.get('format_version')!r}")
    config = ConvNetConfig.from_dict(json.loads(meta["config"]))
    by_name = {t.name: t.values().reshape(t.shape).copy() for t in model.tensors}
    params = NetParams(
        {
            name[len("net.") :]: by_name.pop(name)
            for name in list(by_name)
            if name.startswith("net.")
        }
    )
    return TrainedDetector(
        config=config,
        params=params,
        embeddings=by_name["train.embeddings"],
        labels=by_name["train.labels"].astype(np.int64),
        centroid_benign=by_name["centroid.benign"],
        centroid_malicious=by_name["centroid.malicious"],
        representation=meta.get("representation", "grayscale-fourpart"),
        manifest_sha256=meta.get("manifest_sha256", ""),
        seed=int(meta.get("seed", "0")),
        strategy=meta.get("strategy", ""),
        trained_lsb=int(meta.get("trained_lsb", "0")),
    )


def bootstrap_ci(values, n_resamples: int = 10_000, alpha: float = 0.05, seed: int = 0):
    """Percentile bootstrap interval for the mean of per-run values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no values to bootstrap")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


@dataclass(frozen=True)
class ReportRow:
    run: str
    model_lsb: int
    eval_type: str
    metric: str
    value: float


def summarize_rows(rows, n_resamples: int = 10_000, seed: int = 0) -> list[ReportRow]:
    """Mean and 95% bootstrap interval per (model_lsb, eval_type, metric)."""
    groups: dict[tuple, list[float]] = {}
    order: list[tuple] = []
    for row in rows:
        key = (row.model_lsb, row.eval_type, row.metric)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row.value)
    out = []
    for key in order:
        values = groups[key]
        lo, hi = bootstrap_ci(values, n_resamples=n_resamples, seed=seed)
        out.append(ReportRow("mean", key[0], key[1], key[2], float(np.mean(values))))
        out.append(ReportRow("ci95_low", key[0], key[1], key[2], lo))
        out.append(ReportRow("ci95_high", key[0], key[1], key[2], hi))
    return out


def render_report_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "model_lsb", "eval_type", "metric", "value"])
    for row in rows:
        writer.writerow([row.run, row.model_lsb, row.eval_type, row.metric, repr(row.value)])
    return buf.getvalue()


def render_report_json(rows, extra: dict | None = None) -> str:
    doc = {
        "rows": [
            {
                "run": r.run,
                "model_lsb": r.model_lsb,
                "eval_type": r.eval_type,
                "metric": r.metric,
                "value": r.value,
            }
            for r in rows
        ]
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)
