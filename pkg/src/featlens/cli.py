import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from ._constants import MNIST_ROT_FILTER, ROTATION_BINS, SCALING_BINS
from ._utils import exception2err_msg


module_logger = logging.getLogger(__name__)
module_logger.addHandler(logging.NullHandler())

RESULTS_FILE = "results.csv"


def get_version():
    package_name = __name__.split(".")[0]
    import importlib.metadata

    try:
        return importlib.metadata.version(package_name)
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


class UsageError(Exception):
    """Bad command-line input detected after parsing."""


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, help="Seed of every RNG consumer; overrides the config")
    parser.add_argument("--config", help="Config file (.yaml, .yml, .json or key=value text)")
    parser.add_argument("--out", default="runs", help="Output directory for artifacts")
    parser.add_argument("--data-dir", help="Directory of the MNIST IDX files")
    parser.add_argument("--env-file", help="dotenv file loaded before anything else")
    parser.add_argument("--limit", type=int, help="Use only the first N images of each split")
    parser.add_argument(
        "-v", "--verbose", action="store_true", default=False, help="Debug logging"
    )


def _add_training_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--epochs", type=float, help="Training epochs")
    parser.add_argument("--max-steps", type=int, help="Cap on optimizer steps")
    parser.add_argument("--batch-size", type=int, help="Batch size")


def _subparser(subparsers, name: str, help: str) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(
        name,
        help=help,
        description=help,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    _add_common_arguments(parser)
    return parser


def register_train_host_command(subparsers):
    parser = _subparser(subparsers, "train-host", "Train the host classifier on upright digits")
    _add_training_arguments(parser)


def register_train_lens_command(subparsers):
    parser = _subparser(subparsers, "train-lens", "Train one feature lens against the frozen host")
    _add_training_arguments(parser)
    parser.add_argument(
        "--transform", required=True, choices=ROTATION_BINS[1:] + SCALING_BINS, help="Lens bin"
    )
    parser.add_argument(
        "--loss", choices=["tac", "mse", "mae", "mse+tac", "mae+tac"], help="Feature loss"
    )
    parser.add_argument("--groups", type=int, help="Groups of the multigroup convolution")
    parser.add_argument("--kernel-size", type=int, choices=[1, 3], help="Lens kernel size")


def register_train_baseline_command(subparsers):
    parser = _subparser(subparsers, "train-baseline", "Train the Xlayer or DataAug baseline")
    _add_training_arguments(parser)
    parser.add_argument("baseline", choices=["xlayer", "dataaug"], help="Baseline to train")
    parser.add_argument(
        "--family",
        choices=["rotation", "scaling"],
        default="rotation",
        help="Transform family of the Xlayer block",
    )
    parser.add_argument(
        "--preset", choices=["small", "large"], help="DataAug probability preset"
    )


def register_train_rotclf_command(subparsers):
    parser = _subparser(subparsers, "train-rotclf", "Train the rotation-bin classifier")
    _add_training_arguments(parser)
    parser.add_argument(
        "--jitter", type=float, default=0.0, help="Uniform angle jitter (degrees) within each bin"
    )


def register_eval_command(subparsers):
    parser = _subparser(subparsers, "eval", "Evaluate top-1 accuracy of a pipeline")
    parser.add_argument(
        "--method",
        choices=["lenses", "xlayer", "dataaug"],
        default="lenses",
        help="Pipeline to evaluate",
    )
    parser.add_argument(
        "--select",
        choices=["true", "predicted", "none"],
        default="true",
        help="Lens selection; none evaluates the plain frozen host",
    )
    parser.add_argument(
        "--protocol",
        choices=["mnist-rot", "rot", "scale", "upright"],
        default="mnist-rot",
        help="mnist-rot: random rotations; rot: exact 90/180/270; scale: 1/2 and 1/3",
    )
    parser.add_argument(
        "--filter-angles",
        nargs="*",
        type=float,
        metavar="DEG",
        help=f"Keep rotations within [LOW, HIGH]; no values means {list(MNIST_ROT_FILTER)}",
    )


def register_analyze_correlation_command(subparsers):
    parser = _subparser(
        subparsers, "analyze-correlation", "Pearson correlations of original vs transformed features"
    )
    parser.add_argument(
        "--transforms",
        nargs="+",
        default=["identity", "rot90", "rot180", "rot270"],
        help="Transforms to analyze",
    )
    parser.add_argument(
        "--with-lenses",
        action="store_true",
        default=False,
        help="Also correlate the lens outputs with the original features",
    )


def register_report_command(subparsers):
    parser = _subparser(subparsers, "report", "Render the results table and the correlation scatter")
    parser.add_argument(
        "--metric",
        default="whole_feature_r",
        choices=["whole_feature_r", "channel_mean_r"],
        help="Correlation metric on the x axis",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="featlens",
        description="FeatLens CLI" + f" v{get_version()}",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument(
        "--version",
        action="version",
        version=get_version(),
    )
    subparsers = parser.add_subparsers(dest="command", parser_class=_ArgumentParser)
    register_train_host_command(subparsers)
    register_train_lens_command(subparsers)
    register_train_baseline_command(subparsers)
    register_train_rotclf_command(subparsers)
    register_eval_command(subparsers)
    register_analyze_correlation_command(subparsers)
    register_report_command(subparsers)
    return parser


# ---- shared plumbing ----


def _load_settings(args):
    from .train_config import ExperimentConfig

    settings = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        settings = settings.with_seed(args.seed)
    train_overrides = {}
    for name in ("epochs", "max_steps", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            train_overrides[name] = value
    if getattr(args, "loss", None):
        train_overrides["loss"] = {"mode": args.loss}
    lens_overrides = {}
    if getattr(args, "groups", None) is not None:
        lens_overrides["groups"] = args.groups
    if getattr(args, "kernel_size", None) is not None:
        lens_overrides["kernel_size"] = args.kernel_size
    overrides: Dict[str, dict] = {}
    if train_overrides:
        overrides["train"] = train_overrides
    if lens_overrides:
        overrides["lens"] = lens_overrides
    if getattr(args, "preset", None):
        overrides["aug"] = {"preset": args.preset}
    return settings.merge(overrides) if overrides else settings


def _load_split(args, split: str):
    from .data import load_mnist

    dataset = load_mnist(split, args.data_dir)
    if args.limit is not None:
        dataset = dataset.subset(slice(0, args.limit))
    return dataset


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_host(model, path: Path):
    from .checkpoint import save_with_sidecar

    save_with_sidecar(model.state_dict(), path, {"host": model.config.to_dict()})


def _load_host(path: Path):
    from .checkpoint import load_with_sidecar
    from .host import HostConfig, HostModel, freeze

    state, sidecar = load_with_sidecar(path)
    model = HostModel(HostConfig.from_dict(sidecar.get("host", {})))
    model.load_state_dict(state)
    return freeze(model)


def _load_registry(path: Path, host):
    from .checkpoint import load_with_sidecar
    from .lenses import LensConfig, LensRegistry

    if not path.exists():
        return LensRegistry(), None
    state, sidecar = load_with_sidecar(path)
    config = LensConfig.from_dict(sidecar.get("lens", {}))
    return LensRegistry.from_state(state, host, config), config


def _load_rotclf(path: Path, host):
    from .checkpoint import load_checkpoint
    from .lenses import RotationClassifier

    classifier = RotationClassifier(5 * host.config.bottleneck_width)
    classifier.load_state_dict(load_checkpoint(path))
    return classifier


def _rotated_test_set(args, settings):
    from .data import make_rotated_dataset

    return make_rotated_dataset(_load_split(args, "test"), (0.0, 360.0), seed=settings.train.seed)


def _append_results(out: Path, rows: Sequence[Tuple[str, str, str, float]]) -> Path:
    """Merge rows into ``results.csv``; later rows replace equal (method, transform, metric)."""
    from .analysis import REPORT_COLUMNS

    path = out / RESULTS_FILE
    frame = pd.DataFrame(list(rows), columns=REPORT_COLUMNS)
    if path.exists():
        frame = pd.concat([pd.read_csv(path), frame], ignore_index=True)
    frame = frame.drop_duplicates(subset=REPORT_COLUMNS[:3], keep="last")
    frame = frame.sort_values(REPORT_COLUMNS[:3], kind="mergesort")
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


# ---- commands ----


def train_host_command(args):
    from .training import train_host

    settings = _load_settings(args)
    out = _out_dir(args)
    model, log = train_host(_load_split(args, "train"), settings.host, settings.train)
    _save_host(model, out / "host.flns")
    log.to_csv(out / "train_host.csv")


def train_lens_command(args):
    from .checkpoint import save_with_sidecar
    from .training import train_lens

    settings = _load_settings(args)
    out = _out_dir(args)
    host = _load_host(out / "host.flns")
    registry, stored_config = _load_registry(out / "lenses.flns", host)
    if stored_config is not None and stored_config.to_dict() != settings.lens.to_dict():
        module_logger.warning(
            "lens settings differ from lenses.yaml; starting a new registry for this configuration"
        )
        registry = type(registry)()
    result = train_lens(host, args.transform, _load_split(args, "train"), settings.train, settings.lens)
    registry.register(args.transform, result.lens)
    save_with_sidecar(registry.state_dict(), out / "lenses.flns", {"lens": settings.lens.to_dict()})
    result.log.to_csv(out / f"train_lens_{args.transform}.csv")


def train_baseline_command(args):
    from .checkpoint import save_with_sidecar
    from .train_config import AugPolicy
    from .training import train_dataaug, train_xlayer

    settings = _load_settings(args)
    out = _out_dir(args)
    if args.baseline == "dataaug":
        model, log = train_dataaug(_load_split(args, "train"), settings.aug, settings.host, settings.train)
        _save_host(model, out / "dataaug.flns")
        log.to_csv(out / "train_dataaug.csv")
        return
    host = _load_host(out / "host.flns")
    if args.family == "rotation":
        from .data import make_rotated_dataset

        dataset = make_rotated_dataset(_load_split(args, "train"), (0.0, 360.0), seed=settings.train.seed)
        xlayer, log = train_xlayer(host, dataset, settings.train, family="rotation")
    else:
        policy = AugPolicy({"scale2": 0.5, "scale3": 0.5})
        xlayer, log = train_xlayer(host, _load_split(args, "train"), settings.train, policy, "scaling")
    save_with_sidecar(xlayer.state_dict(), out / f"xlayer_{args.family}.flns", {"family": args.family})
    log.to_csv(out / f"train_xlayer_{args.family}.csv")


def train_rotclf_command(args):
    from .checkpoint import save_checkpoint
    from .training import train_rot_classifier

    settings = _load_settings(args)
    out = _out_dir(args)
    host = _load_host(out / "host.flns")
    result = train_rot_classifier(host, _load_split(args, "train"), settings.train, args.jitter)
    save_checkpoint(result.classifier.state_dict(), out / "rotclf.flns")
    result.log.to_csv(out / "train_rotclf.csv")
    _append_results(out, [("rotclf", "rot", "accuracy", result.accuracy)])


def _eval_pipeline(args, out: Path, host):
    from .analysis import host_pipeline, lens_pipeline, xlayer_pipeline
    from .host import Xlayer
    from .transforms import TransformKind

    if args.method == "dataaug":
        return "dataaug", host_pipeline(_load_host(out / "dataaug.flns"))
    if args.method == "xlayer":
        xlayers = {}
        for kind in (TransformKind.ROTATION, TransformKind.SCALING):
            path = out / f"xlayer_{kind}.flns"
            if path.exists():
                from .checkpoint import load_checkpoint

                xlayer = Xlayer(host.config)
                xlayer.load_state_dict(load_checkpoint(path))
                xlayers[kind] = xlayer
        if not xlayers:
            raise FileNotFoundError(f"no xlayer checkpoints in {out}")
        return "xlayer", xlayer_pipeline(host, xlayers)
    if args.select == "none":
        return "host", host_pipeline(host)
    registry, _ = _load_registry(out / "lenses.flns", host)
    classifier = _load_rotclf(out / "rotclf.flns", host) if args.select == "predicted" else None
    return f"lenses[{args.select}]", lens_pipeline(host, registry, args.select, classifier)


def eval_command(args):
    from .analysis import evaluate_accuracy
    from .train_config import EvalSpec

    settings = _load_settings(args)
    out = _out_dir(args)
    host = _load_host(out / "host.flns")
    method, pipeline = _eval_pipeline(args, out, host)
    angle_filter = None
    if args.filter_angles is not None:
        if len(args.filter_angles) not in (0, 2):
            raise UsageError("--filter-angles takes no values or exactly LOW HIGH")
        angle_filter = tuple(args.filter_angles) or MNIST_ROT_FILTER
    transforms = {
        "mnist-rot": (),
        "rot": ("rot90", "rot180", "rot270"),
        "scale": ("scale2", "scale3"),
        "upright": ("identity",),
    }[args.protocol]
    eval_spec = EvalSpec(
        transforms=transforms,
        angle_filter=angle_filter,
        select=args.select,
        batch_size=settings.eval.batch_size,
    )
    if args.protocol == "mnist-rot":
        dataset = _rotated_test_set(args, settings)
    else:
        dataset = _load_split(args, "test")
    result = evaluate_accuracy(
        pipeline, dataset, eval_spec, host.config.input_hw, settings.lens.canvas_policy
    )
    rows = [(method, args.protocol, "accuracy", result.accuracy)]
    # per-bin rows of the random-rotation protocol must not shadow the exact-transform rows
    prefix = "mnist-rot:" if args.protocol == "mnist-rot" else ""
    rows += [(method, prefix + t, "accuracy", acc) for t, acc in result.per_transform.items()]
    path = _append_results(out, rows)
    module_logger.info(
        f"{method} on {args.protocol}: accuracy {result.accuracy:.4f} over {result.count} images -> {path}"
    )
    print(f"{method}\t{args.protocol}\t{result.accuracy:.4f}")


def analyze_correlation_command(args):
    from .analysis import correlation_report
    from .transforms import TransformSpec

    settings = _load_settings(args)
    out = _out_dir(args)
    host = _load_host(out / "host.flns")
    dataset = _load_split(args, "test")
    specs = [TransformSpec.parse(t) for t in args.transforms]
    policy = settings.lens.canvas_policy
    report = correlation_report(host, dataset, specs, settings.eval.batch_size, policy)
    report.to_frame().to_csv(out / "correlation.csv", index=False, lineterminator="\n")
    rows: List[Tuple[str, str, str, float]] = []
    for entry in report.entries.values():
        rows.append(("host", entry.transform, "whole_feature_r", entry.whole_feature_r))
        rows.append(("host", entry.transform, "channel_mean_r", entry.channel_mean_r))
    if args.with_lenses:
        registry, _ = _load_registry(out / "lenses.flns", host)
        lens_specs = [s for s in specs if s.lens_bin in registry]
        lens_report = correlation_report(host, dataset, lens_specs, settings.eval.batch_size, policy, registry)
        for entry in lens_report.entries.values():
            rows.append(("lenses[true]", entry.transform, "whole_feature_r", entry.whole_feature_r))
            rows.append(("lenses[true]", entry.transform, "channel_mean_r", entry.channel_mean_r))
    _append_results(out, rows)


def report_command(args):
    from .analysis import ResultRow, check_orderings, emit_report, orderings_frame, regress_corr_accuracy

    out = _out_dir(args)
    path = out / RESULTS_FILE
    frame = pd.read_csv(path) if path.exists() else pd.DataFrame(columns=["method", "transform", "metric", "value"])
    results = [ResultRow(r.method, r.transform, r.metric, float(r.value)) for r in frame.itertuples()]
    values = {(r.method, r.transform, r.metric): r.value for r in results}
    points, labels = [], []
    for (method, transform, metric), corr in sorted(values.items()):
        if metric != args.metric:
            continue
        # accuracy under the exact transform, from the "rot"/"scale"/"upright" protocols
        accuracy = values.get((method, transform, "accuracy"))
        if accuracy is None and transform == "identity" and method.startswith("lenses"):
            accuracy = values.get(("host", "identity", "accuracy"))
        if accuracy is not None and np.isfinite(corr):
            points.append((corr, accuracy))
            labels.append(f"{method}:{transform}")
    emit_report(results, out, points, labels)
    host_points = [p for p, label in zip(points, labels) if label.startswith("host:")]
    if len(host_points) >= 2 and len({p[0] for p in host_points}) > 1:
        fit = regress_corr_accuracy(host_points)
        module_logger.info(
            f"host fit: slope={fit.slope:.4f}, intercept={fit.intercept:.4f}, r={fit.r:.4f}"
        )
        print(f"fit\tslope={fit.slope:.4f}\tintercept={fit.intercept:.4f}\tr={fit.r:.4f}")
    checks = check_orderings(results)
    orderings_frame(checks).to_csv(out / "orderings.csv", index=False, lineterminator="\n")
    for check in checks:
        if not check.holds:
            module_logger.warning(
                f"ordering {check.ordering} fails for {check.subject}: {check.lhs:.4f} vs {check.rhs:.4f}"
            )
        print(f"ordering\t{check.ordering}\t{check.subject}\t{'holds' if check.holds else 'fails'}")


COMMANDS = {
    "train-host": train_host_command,
    "train-lens": train_lens_command,
    "train-baseline": train_baseline_command,
    "train-rotclf": train_rotclf_command,
    "eval": eval_command,
    "analyze-correlation": analyze_correlation_command,
    "report": report_command,
}


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the featlens CLI; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)
    if not args.command:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.env_file:
        load_dotenv(args.env_file, override=True)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"featlens {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        module_logger.error(f"featlens {args.command} failed\n{exception2err_msg(e)}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(cli())
