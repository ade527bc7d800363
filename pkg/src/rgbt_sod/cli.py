"""Command-line interface: ``train``, ``infer``, ``eval``, ``curves`` and ``corrupt-eval``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

Configuration precedence (lowest to highest): built-in defaults, the TOML
file given by ``--config``, then ``--key value`` overrides using dotted keys
(``--ablation.single_decoder true``, ``--corruption.p_corrupt 0``).
"""
import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import CorruptionPolicy
from .checkpoint import config_fingerprint
from .data import index_dataset, read_attributes
from .errors import ConfigurationError, DatasetError, InputError, WeightLoadError
from .metrics import METRIC_NAMES, evaluate_dataset

log = logging.getLogger("rgbt_sod")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------------

def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_schedule(text):
    # "0:1e-3,20:1e-4" or a JSON list of pairs
    text = text.strip()
    if text.startswith("["):
        return [tuple(x) for x in json.loads(text)]
    return [(int(e), float(lr)) for e, lr in (item.split(":") for item in text.split(","))]


def coerce(key, text, defaults):
    """Convert a command-line string to the type of ``defaults[key]``."""
    if key not in defaults:
        raise UsageError(f"unknown config key {key!r}")
    ref = defaults[key]
    try:
        if key == "lr_schedule":
            return _parse_schedule(text)
        if isinstance(ref, bool):
            return _parse_bool(text)
        if text.strip().lower() in ("none", "null") and key in ("max_steps", "pretrained"):
            return None
        if isinstance(ref, int) or key == "max_steps":
            return int(text)
        if isinstance(ref, float):
            return float(text)
        return text
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from exc


def parse_overrides(tokens, defaults):
    out = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, value = tok[2:].partition("=")
        if not eq:
            try:
                value = next(it)
            except StopIteration:
                raise UsageError(f"missing value for --{key}") from None
        out[key] = coerce(key, value, defaults)
    return out


def resolve_config(config_path, override_tokens):
    from .runtime import TrainConfig

    defaults = TrainConfig().to_flat()
    flat = dict(defaults)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = _flatten(tomllib.loads(path.read_text(encoding="utf-8")))
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from exc
        for key in loaded:
            if key not in defaults:
                raise UsageError(f"{path}: unknown config key {key!r}")
        flat.update(loaded)
    flat.update(parse_overrides(override_tokens, defaults))
    try:
        return TrainConfig.from_flat(flat)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc


def make_run_dir(base, flat_config):
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    name = f"{stamp}-{config_fingerprint(flat_config)[:8]}"
    run, n = Path(base) / name, 1
    while run.exists():
        run, n = Path(base) / f"{name}-{n}", n + 1
    run.mkdir(parents=True)
    return run


def _records(root, split=None, require_gt=True):
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"dataset root not found: {root}")
    try:
        return index_dataset(root, split, require_gt=require_gt)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc


# -- reporting -----------------------------------------------------------------------

def _fmt(v):
    return "  -  " if v is None else f"{v:.3f}"


def format_table(rows):
    """rows: list of (label, metric dict) -> aligned text table."""
    cols = ("em", "sm", "fm", "mae", "wf")
    width = max([len("name")] + [len(r[0]) for r in rows])
    lines = [f"{'name':<{width}}  " + "  ".join(f"{c.upper():>6}" for c in cols)]
    for label, m in rows:
        lines.append(f"{label:<{width}}  " + "  ".join(f"{_fmt(m.get(c)):>6}" for c in cols))
    return "\n".join(lines)


def write_results(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report.records():
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for tag, agg in sorted(report.groups.items()):
            fh.write(json.dumps({"id": f"__group__:{tag}", **agg}, sort_keys=True) + "\n")
    return path


def write_curve(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        for t, p, r, f in report.curve_rows():
            fh.write(f"{t:.6f} {p:.10f} {r:.10f} {f:.10f}\n")
    return Path(path)


def plot_curves(series, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_pr, ax_f) = plt.subplots(1, 2, figsize=(10, 4))
    for label, report in series:
        c = report.curves
        ax_pr.plot(c["recall"], c["precision"], marker=".", label=label)
        ax_f.plot(c["threshold"], c["f"], marker=".", label=label)
    ax_pr.set(xlabel="Recall", ylabel="Precision", title="PR curve", xlim=(0, 1), ylim=(0, 1.05))
    ax_f.set(xlabel="Threshold", ylabel="F-measure", title="F-measure curve", xlim=(0, 1), ylim=(0, 1.05))
    for ax in (ax_pr, ax_f):
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


# -- subcommands -----------------------------------------------------------------------

def cmd_train(args, extra):
    from .runtime import train

    config = resolve_config(args.config, extra)
    records = _records(args.data, args.split)
    val = _records(args.val) if args.val else None
    flat = config.to_flat()
    run = make_run_dir(args.out, flat)
    log.info("effective config: %s", json.dumps(flat, sort_keys=True))
    (run / "config.json").write_text(json.dumps(flat, indent=2, sort_keys=True), encoding="utf-8")
    ckpt = train(config, records, run, val_records=val, resume=args.resume)
    print(ckpt)
    return EXIT_OK


def cmd_infer(args, extra):
    from .runtime import infer

    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    records = _records(args.data, args.split, require_gt=False)
    paths = infer(args.checkpoint, records, args.out, overwrite=args.overwrite, backbone=args.backbone)
    log.info("wrote %d predictions to %s", len(paths), args.out)
    return EXIT_OK


def _attributes(path):
    return read_attributes(path) if path else None


def cmd_eval(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    report = evaluate_dataset(args.pred, args.gt, _attributes(args.attributes), args.grid, args.minmax)
    rows = [(Path(args.pred).name or "pred", report.aggregate)]
    rows += [(f"  {tag} (n={g['count']})", g) for tag, g in sorted(report.groups.items())]
    print(format_table(rows))
    print(f"max F: {report.max_f:.3f}   images: {len(report.per_image)}")
    out = Path(args.results) if args.results else Path(args.pred).parent / "results.jsonl"
    write_results(report, out)
    log.info("results written to %s", out)
    return EXIT_OK


def cmd_curves(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    labels = args.label or [Path(p).name for p in args.pred]
    if len(labels) != len(args.pred):
        raise UsageError("--label must be given once per --pred directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = []
    for label, pred in zip(labels, args.pred):
        report = evaluate_dataset(pred, args.gt, grid=args.grid, minmax=args.minmax)
        write_curve(report, out / f"{label}.curve.txt")
        series.append((label, report))
    plot_curves(series, out / "curves.png")
    print(out / "curves.png")
    return EXIT_OK


def cmd_corrupt_eval(args, extra):
    from .runtime import infer

    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    records = _records(args.data, args.split)
    gt_dir = Path(args.data) / "GT"
    policy = CorruptionPolicy.forced(args.modality, args.kind, args.seed)
    out = Path(args.out)
    rows, summary = [], {}
    for ckpt in args.checkpoint:
        name = Path(ckpt).parent.name or Path(ckpt).stem
        clean_dir = out / name / "clean"
        bad_dir = out / name / f"{args.modality}_{args.kind}"
        infer(ckpt, records, clean_dir, overwrite=True)
        infer(ckpt, records, bad_dir, overwrite=True, corruption=policy)
        clean = evaluate_dataset(clean_dir, gt_dir).aggregate
        bad = evaluate_dataset(bad_dir, gt_dir).aggregate
        delta = {k: (None if clean[k] is None or bad[k] is None else bad[k] - clean[k]) for k in METRIC_NAMES}
        rows += [(f"{name} clean", clean), (f"{name} {args.modality}={args.kind}", bad), (f"{name} delta", delta)]
        summary[name] = {"checkpoint": str(ckpt), "clean": clean, "corrupted": bad, "delta": delta}
    print(format_table(rows).replace(" -0.000", "  0.000"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "corruption_report.json").write_text(json.dumps(
        {"modality": args.modality, "kind": args.kind, "seed": args.seed, "results": summary},
        indent=2, sort_keys=True), encoding="utf-8")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="rgbt-sod", description="RGB-thermal salient object detection")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model (extra --key value pairs override the config)")
    t.add_argument("--config", help="TOML config file")
    t.add_argument("--data", required=True, help="dataset root with RGB/, T/, GT/")
    t.add_argument("--split", help="file listing the sample ids to train on")
    t.add_argument("--val", help="held-out dataset root evaluated every eval_every epochs")
    t.add_argument("--out", default="runs", help="base directory for run folders")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write S_f predictions as PNG files")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--split")
    i.add_argument("--out", required=True)
    i.add_argument("--backbone", help="fail unless the checkpoint uses this backbone")
    i.add_argument("--overwrite", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a prediction directory")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--attributes", help="attributes.txt for per-challenge rows")
    e.add_argument("--results", help="output JSON-lines file (default: <pred>/../results.jsonl)")
    e.add_argument("--grid", choices=("fixed", "range"), default="fixed")
    e.add_argument("--minmax", action="store_true", help="min-max normalize each prediction")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("curves", help="20-point PR and F-measure curves")
    c.add_argument("--pred", required=True, nargs="+")
    c.add_argument("--label", nargs="+")
    c.add_argument("--gt", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--grid", choices=("fixed", "range"), default="fixed")
    c.add_argument("--minmax", action="store_true")
    c.set_defaults(func=cmd_curves)

    r = sub.add_parser("corrupt-eval", help="clean vs. corrupted-modality evaluation")
    r.add_argument("--checkpoint", required=True, nargs="+")
    r.add_argument("--data", required=True)
    r.add_argument("--split")
    r.add_argument("--modality", choices=("rgb", "thermal"), default="thermal")
    r.add_argument("--kind", choices=("zero", "noise"), default="zero")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_corrupt_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args, extra)
    except UsageError as exc:
        print(f"rgbt-sod {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, WeightLoadError, DatasetError, ConfigurationError, FileExistsError, RuntimeError) as exc:
        print(f"rgbt-sod {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
