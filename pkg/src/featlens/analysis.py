from __future__ import annotations

__all__ = [
    "CorrelationEntry",
    "CorrelationReport",
    "AccuracyResult",
    "RegressionFit",
    "ResultRow",
    "OrderingCheck",
    "Pipeline",
    "pearson",
    "feature_correlations",
    "correlation_report",
    "host_pipeline",
    "lens_pipeline",
    "xlayer_pipeline",
    "evaluate_accuracy",
    "regress_corr_accuracy",
    "emit_report",
    "check_orderings",
    "orderings_frame",
    "scatter_svg",
]

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib
from matplotlib.figure import Figure
import numpy as np
import pandas as pd

from .data import Dataset, prepare_batch
from .errors import DegenerateInputError, ShapeError
from .host import FrozenHost, Xlayer
from .lenses import (
    LensRegistry,
    RotationClassifier,
    ScalingLens,
    apply_lens_pipeline,
    content_taps,
)
from .tensor import bilinear_resize, no_grad
from .train_config import EvalSpec, SelectMode
from .transforms import (
    CanvasPolicy,
    TransformKind,
    TransformSpec,
    dual_rotate_features,
)
from .types import PathType


module_logger = logging.getLogger(__name__)
module_logger.addHandler(logging.NullHandler())

# logits for a (B, 1, h, w) batch whose images went through ``specs``
Pipeline = Callable[[np.ndarray, Sequence[TransformSpec]], np.ndarray]

REPORT_COLUMNS = ["method", "transform", "metric", "value"]


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"pearson needs equal lengths, got {a.size} and {b.size}")
    if a.size < 2:
        raise ValueError(f"pearson needs at least 2 values, got {a.size}")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.dot(da, da))
    sbb = float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateInputError("pearson undefined for a zero-variance input")
    r = float(np.dot(da, db)) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, r))


@dataclass
class CorrelationEntry:
    transform: str
    whole_feature_r: float
    channel_mean_r: float
    count: int
    # images whose features had zero variance
    skipped: int = 0


@dataclass
class CorrelationReport:
    entries: Dict[str, CorrelationEntry] = field(default_factory=dict)

    def add(self, entry: CorrelationEntry):
        self.entries[entry.transform] = entry

    def __getitem__(self, transform: str) -> CorrelationEntry:
        return self.entries[transform]

    def to_frame(self) -> pd.DataFrame:
        columns = ["transform", "whole_feature_r", "channel_mean_r", "count", "skipped"]
        return pd.DataFrame([asdict(e) for e in self.entries.values()], columns=columns)


def _aligned_features(
    host: FrozenHost,
    batch_t: np.ndarray,
    spec: TransformSpec,
    target_hw: Tuple[int, int],
    canvas_policy: CanvasPolicy,
) -> np.ndarray:
    """Block output of a transformed batch, dual-aligned to the original geometry."""
    any_size = batch_t.shape[2:] != tuple(host.config.input_hw)
    _, taps = host.forward_with_taps(batch_t, any_size=any_size)
    if spec.is_identity:
        return taps.X.data
    if spec.kind == TransformKind.ROTATION:
        if spec.quarter_turns < 0:
            raise ValueError(f"feature alignment needs a multiple of 90 degrees, got {spec}")
        return dual_rotate_features(taps.X, spec.angle_deg).data
    content = content_taps(taps, spec.scale, canvas_policy).X
    return bilinear_resize(content, target_hw).data


def _lens_features(
    host: FrozenHost,
    registry: LensRegistry,
    batch_t: np.ndarray,
    spec: TransformSpec,
    target_hw: Tuple[int, int],
) -> np.ndarray:
    """Lens reconstruction of the original block output from a transformed batch."""
    any_size = batch_t.shape[2:] != tuple(host.config.input_hw)
    _, taps = host.forward_with_taps(batch_t, any_size=any_size)
    lens = registry.resolve(spec.lens_bin)
    if lens is None:
        return taps.X.data
    with no_grad():
        if isinstance(lens, ScalingLens):
            return lens(content_taps(taps, lens.scale, lens.canvas_policy), target_hw).data
        return lens(taps).data


def feature_correlations(
    host: FrozenHost,
    dataset: Dataset,
    spec: TransformSpec,
    batch_size: int = 256,
    canvas_policy: CanvasPolicy = CanvasPolicy.PAD,
    registry: Optional[LensRegistry] = None,
) -> CorrelationEntry:
    """Per-image whole-feature and channel-mean Pearson r, averaged over the dataset.

    With a ``registry`` the transformed side is the lens output instead of the
    dual-aligned block output.
    """
    input_hw = host.config.input_hw
    whole: List[float] = []
    channel: List[float] = []
    skipped = 0
    for idx in dataset.batches(batch_size):
        images = dataset.images[idx]
        _, taps = host.forward_with_taps(prepare_batch(images, input_hw))
        original = taps.X.data
        batch_t = prepare_batch(images, input_hw, spec, canvas_policy)
        if registry is None:
            aligned = _aligned_features(host, batch_t, spec, taps.feature_hw, canvas_policy)
        else:
            aligned = _lens_features(host, registry, batch_t, spec, taps.feature_hw)
        for x, y in zip(original, aligned):
            try:
                r_whole = pearson(x, y)
                r_channel = pearson(x.mean(axis=(1, 2)), y.mean(axis=(1, 2)))
            except DegenerateInputError:
                skipped += 1
                continue
            whole.append(r_whole)
            channel.append(r_channel)
    count = len(whole)
    if skipped:
        module_logger.warning(f"{spec}: skipped {skipped} images with zero-variance features")
    return CorrelationEntry(
        transform=str(spec),
        whole_feature_r=math.fsum(whole) / count if count else float("nan"),
        channel_mean_r=math.fsum(channel) / count if count else float("nan"),
        count=count,
        skipped=skipped,
    )


def correlation_report(
    host: FrozenHost,
    dataset: Dataset,
    specs: Sequence[TransformSpec],
    batch_size: int = 256,
    canvas_policy: CanvasPolicy = CanvasPolicy.PAD,
    registry: Optional[LensRegistry] = None,
) -> CorrelationReport:
    report = CorrelationReport()
    for spec in specs:
        entry = feature_correlations(host, dataset, spec, batch_size, canvas_policy, registry)
        module_logger.info(
            f"{entry.transform}: whole-feature r={entry.whole_feature_r:.4f}, "
            f"channel-mean r={entry.channel_mean_r:.4f} over {entry.count} images"
        )
        report.add(entry)
    return report


def _any_size(host: FrozenHost, batch: np.ndarray) -> bool:
    return batch.shape[2:] != tuple(host.config.input_hw)


def host_pipeline(host: FrozenHost) -> Pipeline:
    def pipeline(batch: np.ndarray, specs: Sequence[TransformSpec]) -> np.ndarray:
        return host.forward_with_taps(batch, any_size=_any_size(host, batch))[0].data

    return pipeline


def lens_pipeline(
    host: FrozenHost,
    registry: LensRegistry,
    select: SelectMode = SelectMode.TRUE,
    classifier: Optional[RotationClassifier] = None,
) -> Pipeline:
    select = SelectMode.parse(select)
    if select == SelectMode.PREDICTED and classifier is None:
        raise ValueError("predicted lens selection needs a rotation classifier")

    def pipeline(batch: np.ndarray, specs: Sequence[TransformSpec]) -> np.ndarray:
        if select == SelectMode.NONE:
            return host_pipeline(host)(batch, specs)
        if select == SelectMode.PREDICTED:
            return apply_lens_pipeline(host, registry, batch, None, classifier)
        return apply_lens_pipeline(host, registry, batch, [s.lens_bin for s in specs])

    return pipeline


def xlayer_pipeline(host: FrozenHost, xlayers: Mapping[TransformKind, Xlayer]) -> Pipeline:
    """Each image goes through the extra block of its transform family, if trained."""

    def family(spec: TransformSpec) -> TransformKind:
        return TransformKind.SCALING if spec.kind == TransformKind.SCALING else TransformKind.ROTATION

    def pipeline(batch: np.ndarray, specs: Sequence[TransformSpec]) -> np.ndarray:
        any_size = _any_size(host, batch)
        logits = host.forward_with_taps(batch, any_size=any_size)[0].data.copy()
        families = [family(s) for s in specs]
        for kind in sorted(set(families), key=str):
            if kind not in xlayers:
                continue
            idx = [i for i, f in enumerate(families) if f == kind]
            logits[idx] = xlayers[kind].logits(host, batch[idx], any_size=any_size).data
        return logits

    return pipeline


@dataclass
class AccuracyResult:
    accuracy: float
    count: int
    per_transform: Dict[str, float] = field(default_factory=dict)


def _count_correct(
    pipeline: Pipeline,
    batch: np.ndarray,
    specs: Sequence[TransformSpec],
    labels: np.ndarray,
) -> int:
    logits = pipeline(batch, specs)
    return int(np.sum(np.asarray(logits).argmax(axis=1) == labels))


def evaluate_accuracy(
    pipeline: Pipeline,
    dataset: Dataset,
    eval_spec: Optional[EvalSpec] = None,
    input_hw: Optional[Tuple[int, int]] = None,
    canvas_policy: CanvasPolicy = CanvasPolicy.PAD,
) -> AccuracyResult:
    """Top-1 accuracy of ``pipeline``.

    With ``eval_spec.transforms`` every image is evaluated under each listed
    transform and the accuracy is their average. Otherwise images are taken as
    stored and filtered by their recorded rotation angle.
    """
    eval_spec = eval_spec or EvalSpec()
    if input_hw is None:
        input_hw = (dataset.images.shape[1], dataset.images.shape[2])
    bs = eval_spec.batch_size
    if eval_spec.transforms:
        if len(dataset) == 0:
            raise ValueError("evaluation set is empty")
        per_transform = {}
        for spec in eval_spec.specs:
            correct = 0
            for idx in dataset.batches(bs):
                batch = prepare_batch(dataset.images[idx], input_hw, spec, canvas_policy)
                correct += _count_correct(pipeline, batch, [spec] * len(idx), dataset.labels[idx])
            per_transform[str(spec)] = correct / len(dataset)
        accuracy = math.fsum(per_transform.values()) / len(per_transform)
        return AccuracyResult(accuracy, len(dataset) * len(per_transform), per_transform)

    kept = np.flatnonzero(eval_spec.keeps(dataset.angles))
    if len(kept) == 0:
        raise ValueError(f"no images left after the angle filter {eval_spec.angle_filter}")
    subset = dataset.subset(kept)
    specs = subset.specs or [TransformSpec.identity()] * len(subset)
    bins: Dict[str, List[int]] = {}
    for idx in subset.batches(bs):
        batch_specs = [specs[i] for i in idx]
        logits = np.asarray(pipeline(prepare_batch(subset.images[idx], input_hw), batch_specs))
        hits = logits.argmax(axis=1) == subset.labels[idx]
        for spec, hit in zip(batch_specs, hits):
            bins.setdefault(spec.lens_bin, [0, 0])
            bins[spec.lens_bin][0] += int(hit)
            bins[spec.lens_bin][1] += 1
    correct = sum(c for c, _ in bins.values())
    per_transform = {b: c / n for b, (c, n) in sorted(bins.items())}
    return AccuracyResult(correct / len(subset), len(subset), per_transform)


@dataclass
class RegressionFit:
    slope: float
    intercept: float
    r: float


def regress_corr_accuracy(points: Sequence[Tuple[float, float]]) -> RegressionFit:
    """Least-squares line through (correlation, accuracy) points."""
    if len(points) < 2:
        raise ValueError(f"regression needs at least 2 points, got {len(points)}")
    x = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    dx = x - x.mean()
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise DegenerateInputError("regression needs non-constant correlations")
    slope = float(np.dot(dx, y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    try:
        r = pearson(x, y)
    except DegenerateInputError:
        # constant accuracy lies exactly on the horizontal fit
        r = 1.0
    return RegressionFit(slope, intercept, r)


@dataclass
class ResultRow:
    method: str
    transform: str
    metric: str
    value: float


@dataclass
class OrderingCheck:
    """One expected relation between two recorded values: lhs > rhs or lhs >= rhs."""

    ordering: str
    subject: str
    lhs: float
    rhs: float
    strict: bool

    @property
    def holds(self) -> bool:
        return self.lhs > self.rhs if self.strict else self.lhs >= self.rhs


# (name, lhs key, rhs key, strict); keys are (method, metric) and the
# transform is filled in per row
_PAIRWISE_ORDERINGS = [
    ("channel_mean_ge_whole_feature", ("host", "channel_mean_r"), ("host", "whole_feature_r"), False),
    ("lens_correlation_above_host", ("lenses[true]", "whole_feature_r"), ("host", "whole_feature_r"), True),
    ("lenses_recover_accuracy", ("lenses[true]", "accuracy"), ("host", "accuracy"), True),
    ("true_ge_predicted_selection", ("lenses[true]", "accuracy"), ("lenses[predicted]", "accuracy"), False),
    ("dataaug_ge_lenses", ("dataaug", "accuracy"), ("lenses[true]", "accuracy"), False),
    ("lenses_ge_xlayer", ("lenses[true]", "accuracy"), ("xlayer", "accuracy"), False),
]


def check_orderings(results: Sequence[ResultRow]) -> List[OrderingCheck]:
    """Evaluate the expected orderings on whatever pairs ``results`` holds.

    Pairs with a missing or non-finite side are left out, so a partial run
    reports only what it can support.
    """
    values = {
        (r.method, r.transform, r.metric): float(r.value) for r in results if np.isfinite(r.value)
    }
    transforms = sorted({r.transform for r in results} - {"identity"})
    checks = []
    identity_r = values.get(("host", "identity", "whole_feature_r"))
    for transform in transforms:
        rotated_r = values.get(("host", transform, "whole_feature_r"))
        if identity_r is not None and rotated_r is not None:
            checks.append(OrderingCheck("correlation_drops", transform, identity_r, rotated_r, True))
        for name, (lhs_method, lhs_metric), (rhs_method, rhs_metric), strict in _PAIRWISE_ORDERINGS:
            lhs = values.get((lhs_method, transform, lhs_metric))
            rhs = values.get((rhs_method, transform, rhs_metric))
            if lhs is not None and rhs is not None:
                checks.append(OrderingCheck(name, transform, lhs, rhs, strict))
    upright = values.get(("host", "identity", "accuracy"))
    dataaug_upright = values.get(("dataaug", "identity", "accuracy"))
    if upright is not None and dataaug_upright is not None:
        checks.append(OrderingCheck("dataaug_costs_upright", "identity", upright, dataaug_upright, True))
    return checks


def orderings_frame(checks: Sequence[OrderingCheck]) -> pd.DataFrame:
    columns = ["ordering", "subject", "lhs", "rhs", "strict", "holds"]
    return pd.DataFrame([{**asdict(c), "holds": c.holds} for c in checks], columns=columns)


def scatter_svg(
    points: Sequence[Tuple[float, float]],
    path: PathType,
    labels: Optional[Sequence[str]] = None,
    title: str = "feature correlation vs accuracy",
) -> int:
    """Write the scatter (with the fitted line when defined); returns the point count."""
    fig = Figure(figsize=(5, 4))
    ax = fig.subplots()
    x = [p[0] for p in points]
    y = [p[1] for p in points]
    collection = ax.scatter(x, y, marker="+", color="tab:red", label="points")
    if labels:
        for xi, yi, text in zip(x, y, labels):
            ax.annotate(text, (xi, yi), fontsize=7, xytext=(3, 3), textcoords="offset points")
    if len(points) >= 2 and len(set(x)) > 1:
        fit = regress_corr_accuracy(points)
        xs = np.linspace(min(x), max(x), 2)
        ax.plot(xs, fit.slope * xs + fit.intercept, "--", color="tab:blue", label=f"fit r={fit.r:.3f}")
        ax.legend(loc="lower right")
    ax.set_xlabel("whole-feature correlation")
    ax.set_ylabel("top-1 accuracy")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "featlens"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    return len(collection.get_offsets())


def emit_report(
    results: Sequence[ResultRow],
    out_dir: PathType,
    points: Optional[Sequence[Tuple[float, float]]] = None,
    point_labels: Optional[Sequence[str]] = None,
    name: str = "report",
) -> Dict[str, Path]:
    """``<name>.csv`` with one row per result and ``<name>.svg`` when points are given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    frame = pd.DataFrame([asdict(r) for r in results], columns=REPORT_COLUMNS)
    csv_path = out_dir / f"{name}.csv"
    frame.to_csv(csv_path, index=False, lineterminator="\n")
    written["csv"] = csv_path
    if points is not None:
        svg_path = out_dir / f"{name}.svg"
        count = scatter_svg(points, svg_path, point_labels)
        module_logger.info(f"wrote {count} points to {svg_path}")
        written["svg"] = svg_path
    return written
