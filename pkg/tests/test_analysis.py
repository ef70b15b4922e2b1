import numpy as np
import pandas as pd
import pytest

from featlens.analysis import (
    REPORT_COLUMNS,
    ResultRow,
    check_orderings,
    correlation_report,
    emit_report,
    evaluate_accuracy,
    feature_correlations,
    host_pipeline,
    lens_pipeline,
    orderings_frame,
    pearson,
    regress_corr_accuracy,
    scatter_svg,
    xlayer_pipeline,
)
from featlens.data import Dataset, make_rotated_dataset
from featlens.errors import DegenerateInputError, ShapeError
from featlens.host import Xlayer
from featlens.lenses import LensRegistry, build_lens
from featlens.train_config import EvalSpec, SelectMode
from featlens.transforms import TransformKind, TransformSpec


def test_pearson():
    a = np.array([0.3, 1.2, -0.7, 2.5])
    assert pearson(a, a) == pytest.approx(1.0)
    assert pearson(a, -a) == pytest.approx(-1.0)
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(3 / np.sqrt(2 * 14 / 3))
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(0.9820, abs=1e-4)


def test_pearson_symmetric_and_affine_invariant():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=50), rng.normal(size=50)
    assert pearson(a, b) == pytest.approx(pearson(b, a))
    assert pearson(3.0 * a + 1.0, b) == pytest.approx(pearson(a, b))


def test_pearson_errors():
    with pytest.raises(DegenerateInputError):
        pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ShapeError):
        pearson([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        pearson([1.0], [2.0])


def test_regression():
    fit = regress_corr_accuracy([(0.0, 0.0), (0.5, 0.4), (1.0, 1.0)])
    assert fit.slope == pytest.approx(1.0)
    assert fit.intercept == pytest.approx(-1 / 30)
    assert fit.r == pytest.approx(0.9934, abs=1e-4)

    fit = regress_corr_accuracy([(0.0, 0.0), (1.0, 1.0)])
    assert (fit.slope, fit.intercept) == pytest.approx((1.0, 0.0))

    fit = regress_corr_accuracy([(0.1, 0.9), (0.2, 0.8), (0.4, 0.6)])
    assert fit.r == pytest.approx(-1.0)
    assert fit.slope == pytest.approx(-1.0)

    with pytest.raises(DegenerateInputError):
        regress_corr_accuracy([(0.5, 0.1), (0.5, 0.9)])
    with pytest.raises(ValueError):
        regress_corr_accuracy([(0.5, 0.1)])


def test_emit_report_empty(tmp_path):
    written = emit_report([], tmp_path)
    assert written["csv"].read_text() == ",".join(REPORT_COLUMNS) + "\n"
    assert "svg" not in written


def test_emit_report(tmp_path):
    rows = [
        ResultRow("host", "rot90", "accuracy", 0.3),
        ResultRow("lenses[true]", "rot90", "accuracy", 0.8),
    ]
    points = [(1.0, 0.99), (0.4, 0.3), (0.5, 0.35)]
    written = emit_report(rows, tmp_path / "out", points, ["a", "b", "c"])
    frame = pd.read_csv(written["csv"])
    assert list(frame.columns) == REPORT_COLUMNS
    assert frame["method"].tolist() == ["host", "lenses[true]"]
    assert written["svg"].read_text().lstrip().startswith("<?xml")
    assert scatter_svg(points, tmp_path / "again.svg") == 3


def test_scatter_is_reproducible(tmp_path):
    points = [(0.2, 0.1), (0.9, 0.95)]
    scatter_svg(points, tmp_path / "a.svg")
    scatter_svg(points, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_identity_correlation(tiny_host, tiny_dataset):
    entry = feature_correlations(tiny_host, tiny_dataset, TransformSpec.identity())
    assert entry.count + entry.skipped == len(tiny_dataset)
    assert entry.whole_feature_r == pytest.approx(1.0, abs=1e-6)
    assert entry.channel_mean_r == pytest.approx(1.0, abs=1e-6)


def test_correlation_report(tiny_host, tiny_dataset):
    specs = [TransformSpec.parse(t) for t in ("rot90", "rot180", "scale2")]
    report = correlation_report(tiny_host, tiny_dataset, specs, batch_size=5)
    frame = report.to_frame()
    assert frame["transform"].tolist() == ["rot90", "rot180", "scale2"]
    for column in ("whole_feature_r", "channel_mean_r"):
        assert frame[column].between(-1.0, 1.0).all()
    with pytest.raises(ValueError):
        feature_correlations(tiny_host, tiny_dataset, TransformSpec.rotation(30))


def test_check_orderings():
    rows = [
        ResultRow("host", "identity", "whole_feature_r", 1.0),
        ResultRow("host", "rot90", "whole_feature_r", 0.4),
        ResultRow("host", "rot90", "channel_mean_r", 0.7),
        ResultRow("host", "rot180", "whole_feature_r", 0.5),
        ResultRow("host", "rot180", "channel_mean_r", 0.45),
        ResultRow("lenses[true]", "rot90", "whole_feature_r", 0.6),
        ResultRow("host", "rot90", "accuracy", 0.3),
        ResultRow("lenses[true]", "rot90", "accuracy", 0.8),
        ResultRow("lenses[predicted]", "rot90", "accuracy", 0.85),
        ResultRow("xlayer", "rot90", "accuracy", float("nan")),
        ResultRow("host", "identity", "accuracy", 0.97),
        ResultRow("dataaug", "identity", "accuracy", 0.95),
    ]
    checks = check_orderings(rows)
    assert {(c.ordering, c.subject): c.holds for c in checks} == {
        ("correlation_drops", "rot90"): True,
        ("correlation_drops", "rot180"): True,
        ("channel_mean_ge_whole_feature", "rot90"): True,
        ("channel_mean_ge_whole_feature", "rot180"): False,
        ("lens_correlation_above_host", "rot90"): True,
        ("lenses_recover_accuracy", "rot90"): True,
        ("true_ge_predicted_selection", "rot90"): False,
        ("dataaug_costs_upright", "identity"): True,
    }
    frame = orderings_frame(checks)
    assert list(frame.columns) == ["ordering", "subject", "lhs", "rhs", "strict", "holds"]
    assert frame["holds"].sum() == 6
    assert check_orderings([]) == []


def test_correlation_drops_under_rotation(tiny_host, tiny_dataset):
    specs = [TransformSpec.parse(t) for t in ("identity", "rot90", "rot180", "rot270")]
    report = correlation_report(tiny_host, tiny_dataset, specs)
    rows = []
    for entry in report.entries.values():
        rows.append(ResultRow("host", entry.transform, "whole_feature_r", entry.whole_feature_r))
        rows.append(ResultRow("host", entry.transform, "channel_mean_r", entry.channel_mean_r))
    drops = [c for c in check_orderings(rows) if c.ordering == "correlation_drops"]
    assert sorted(c.subject for c in drops) == ["rot180", "rot270", "rot90"]
    for check in drops:
        assert check.lhs == pytest.approx(1.0, abs=1e-6)
        assert check.holds


def test_lens_correlation_uses_registry(tiny_host, tiny_dataset):
    registry = LensRegistry({"rot90": build_lens("rot90", tiny_host)})
    entry = feature_correlations(tiny_host, tiny_dataset, TransformSpec.rotation(90), registry=registry)
    assert -1.0 <= entry.whole_feature_r <= 1.0


def _oracle(dataset: Dataset):
    """Pipeline that looks the label up by image content."""
    lookup = {img.tobytes(): label for img, label in zip(dataset.images, dataset.labels)}

    def pipeline(batch, specs):
        logits = np.zeros((len(batch), 10))
        for i, image in enumerate(batch[:, 0]):
            key = np.rint(image * 255).astype(np.uint8).tobytes()
            logits[i, lookup[key]] = 1.0
        return logits

    return pipeline


def test_evaluate_accuracy_oracle_and_ordering(tiny_dataset):
    result = evaluate_accuracy(_oracle(tiny_dataset), tiny_dataset)
    assert result.accuracy == 1.0
    assert result.count == len(tiny_dataset)
    assert result.per_transform == {"identity": 1.0}

    rng = np.random.default_rng(0)
    rotated = make_rotated_dataset(tiny_dataset, (0.0, 360.0), seed=3)
    constant = lambda batch, specs: np.tile(np.eye(10)[1], (len(batch), 1))  # noqa: E731
    first = evaluate_accuracy(constant, rotated, EvalSpec(batch_size=3))
    shuffled = rotated.subset(rng.permutation(len(rotated)))
    second = evaluate_accuracy(constant, shuffled, EvalSpec(batch_size=5))
    assert first.accuracy == second.accuracy == pytest.approx(np.mean(rotated.labels == 1))
    assert first.per_transform == second.per_transform


def test_evaluate_accuracy_angle_filter(tiny_dataset):
    constant = lambda batch, specs: np.zeros((len(batch), 10))  # noqa: E731
    with pytest.raises(ValueError):
        evaluate_accuracy(constant, tiny_dataset, EvalSpec.mnist_rot())

    upright = make_rotated_dataset(tiny_dataset, 30.0)
    with pytest.raises(ValueError):
        evaluate_accuracy(constant, upright, EvalSpec.mnist_rot())

    mixed = make_rotated_dataset(tiny_dataset, (0.0, 360.0), seed=1)
    result = evaluate_accuracy(constant, mixed, EvalSpec.mnist_rot())
    kept = EvalSpec.mnist_rot().keeps(mixed.angles)
    assert result.count == int(kept.sum())
    assert set(result.per_transform) <= {"identity", "rot90", "rot180", "rot270"}


def test_evaluate_transform_set(tiny_host, tiny_dataset):
    registry = LensRegistry()
    spec = EvalSpec(transforms=("identity",), batch_size=4)
    plain = evaluate_accuracy(host_pipeline(tiny_host), tiny_dataset, spec, (16, 16))
    lenses = evaluate_accuracy(lens_pipeline(tiny_host, registry), tiny_dataset, spec, (16, 16))
    assert plain == lenses

    rot = evaluate_accuracy(host_pipeline(tiny_host), tiny_dataset, EvalSpec.exact_rotations(), (16, 16))
    assert set(rot.per_transform) == {"rot90", "rot180", "rot270"}
    assert rot.accuracy == pytest.approx(np.mean(list(rot.per_transform.values())))
    assert rot.count == 3 * len(tiny_dataset)


def test_pipelines(tiny_host):
    with pytest.raises(ValueError):
        lens_pipeline(tiny_host, LensRegistry(), SelectMode.PREDICTED)

    batch = np.random.default_rng(2).uniform(size=(2, 1, 16, 16)).astype(np.float32)
    specs = [TransformSpec.rotation(90), TransformSpec.identity()]
    expected = host_pipeline(tiny_host)(batch, specs)
    np.testing.assert_array_equal(lens_pipeline(tiny_host, LensRegistry(), "none")(batch, specs), expected)
    xlayers = {TransformKind.ROTATION: Xlayer(tiny_host.config)}
    np.testing.assert_array_equal(xlayer_pipeline(tiny_host, xlayers)(batch, specs), expected)
