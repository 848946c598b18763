"""``hfgd`` command-line tool.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, unknown
config keys, invalid config combinations, refusing to overwrite).
"""

from __future__ import annotations

import argparse
import colorsys
import csv
import io
import logging
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import audit as auditmod
from . import checkpoint
from . import config as cfgio
from . import experiments as exp
from . import gradcheck as gc
from . import hfgt
from .data import SceneSpec, cpu_workers, generate_dataset, load_dataset, parse_spec
from .model import HFGD, ConfigError, token_similarity_matrix
from .train import evaluate, predict, train

log = logging.getLogger("hfgd")

RUN_MANIFEST = "run_manifest.txt"


class UsageError(Exception):
    """Maps to exit code 2."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def keys_help() -> str:
    lines = ["configuration keys (--set key=value, or key=value lines in --config):"]
    for key, val in cfgio.defaults().items():
        lines.append(f"  {key} = {cfgio.format_value(val)}")
    return "\n".join(lines)


def resolve_config(args):
    base = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        base = cfgio.parse_lines(path.read_text(encoding="utf-8"))
    overrides = dict(base)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    return cfgio.build(overrides)


def prepare_out(path, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not overwrite:
            raise UsageError(f"{out} exists and is not empty; pass --overwrite to replace it")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """Resolved config as key=value lines, run metadata as ``#`` comments, so
    the file itself can be passed back through ``--config`` to replay."""

    def __init__(self, out_dir: Path, command: str, cfgs, extra: dict | None = None):
        self.path = out_dir / RUN_MANIFEST
        self.command = command
        self.cfgs = cfgs
        self.extra = dict(extra or {})
        self.started = _now()
        self.finished = None
        self.outputs = []
        self.write()

    def write(self):
        lines = [f"# command: {self.command}", f"# version: {__version__}",
                 f"# started: {self.started}"]
        lines += [f"# {k}: {v}" for k, v in self.extra.items()]
        if self.finished:
            lines.append(f"# finished: {self.finished}")
        lines += [f"# output: {p}" for p in self.outputs]
        self.path.write_text("\n".join(lines) + "\n" + cfgio.dump(*self.cfgs), encoding="utf-8")

    def finalize(self, outputs):
        self.outputs = [str(p) for p in outputs]
        self.finished = _now()
        self.write()


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = SceneSpec()
    if args.spec:
        spec = parse_spec(Path(args.spec).read_text(encoding="utf-8"))
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = prepare_out(args.out, args.overwrite)
    path = generate_dataset(args.n, args.seed, spec, out)
    print(path)
    return 0


def cmd_train(args) -> int:
    mcfg, tcfg = resolve_config(args)
    data = load_dataset(args.data)
    eval_data = load_dataset(args.eval_data) if args.eval_data else None
    out = prepare_out(args.out, args.overwrite)
    extra = {"data": Path(args.data).resolve()}
    if args.init_backbone:
        extra["init_backbone"] = Path(args.init_backbone).resolve()
    manifest = RunManifest(out, "train", (mcfg, tcfg), extra)
    model = HFGD(mcfg, tcfg.seed)
    if args.init_backbone:
        exp.load_backbone(model, args.init_backbone)
    result = train(model, data, tcfg, eval_data)
    ckpt = checkpoint.save(model, out / "checkpoint", tcfg)
    keys = ["step", "lr", "total", "teacher_ce", "student_ce", "car_intra", "car_inter"]
    rows = [[_fmt(r.get(k, "")) for k in keys] for r in result.history]
    (out / "train_log.csv").write_text(_csv(rows, keys), encoding="utf-8")
    outputs = [ckpt, out / "train_log.csv"]
    if eval_data is not None:
        ev = evaluate(model, eval_data)
        header = ["row", "seed", "miou", "pixel_acc"] + \
            [f"iou_{c}" for c in range(mcfg.num_classes)]
        row = ["train", tcfg.seed, _fmt(ev.miou), _fmt(ev.pixel_acc)] + \
            [_fmt(float(v)) for v in ev.per_class_iou]
        (out / "metrics.csv").write_text(_csv([row], header), encoding="utf-8")
        outputs.append(out / "metrics.csv")
        print(f"miou {ev.miou:.4f} pixel_acc {ev.pixel_acc:.4f}")
    manifest.finalize(outputs)
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_eval(args) -> int:
    model = checkpoint.load(args.checkpoint)
    data = load_dataset(args.data)
    ev = evaluate(model, data, head=args.head)
    print(f"miou {ev.miou:.4f} pixel_acc {ev.pixel_acc:.4f}")
    print("per-class IoU " + " ".join("nan" if np.isnan(v) else f"{v:.4f}"
                                      for v in ev.per_class_iou))
    if args.out:
        out = prepare_out(args.out, args.overwrite)
        header = ["row", "seed", "miou", "pixel_acc"] + \
            [f"iou_{c}" for c in range(model.cfg.num_classes)]
        row = [args.head, "", _fmt(ev.miou), _fmt(ev.pixel_acc)] + \
            [_fmt(float(v)) for v in ev.per_class_iou]
        (out / "metrics.csv").write_text(_csv([row], header), encoding="utf-8")
    return 0


def cmd_audit(args) -> int:
    mcfg, _ = resolve_config(args)
    model = HFGD(mcfg, args.seed)
    batches = auditmod.random_batches(mcfg.num_classes, args.batches, args.seed)
    report = auditmod.grad_audit(model, batches)
    baseline = None
    if args.expect_negative:
        ref_cfg, _ = cfgio.build()
        baseline = auditmod.grad_audit(HFGD(ref_cfg, args.seed), batches)
    text = report.to_text(baseline)
    print(text, end="")
    if args.out:
        out = prepare_out(args.out, args.overwrite)
        (out / "audit.txt").write_text(text, encoding="utf-8")
    violations = report.violations()
    failed = report.failed_claims()
    if violations:
        print(f"{len(violations)} soundness violation(s)", file=sys.stderr)
        return 1
    if failed and not args.expect_negative:
        print("claims not zero-by-topology: " + ", ".join(f"{l}->{g}" for l, g in failed),
              file=sys.stderr)
        return 1
    if args.expect_negative:
        print(f"expected-negative mode: {len(failed)} claim(s) changed verdict")
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_suite(include_models=not args.ops_only, seed=args.seed)
    text = gc.format_results(results)
    worst = max(r.report.max_rel_err for r in results)
    print(text, end="")
    print(f"max rel err {worst:.3e} (tolerance {gc.TOLERANCE:.0e})")
    if args.out:
        out = prepare_out(args.out, args.overwrite)
        (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    return 0 if all(r.ok for r in results) else 1


def cmd_pretrain(args) -> int:
    mcfg, _ = resolve_config(args)
    pcfg = exp.PretrainConfig(iters=args.iters, n_samples=args.n_samples, seed=args.seed)
    out = prepare_out(args.out, args.overwrite)
    manifest = RunManifest(out, "pretrain", (mcfg, pcfg))
    res = exp.pretrain_backbone(mcfg, pcfg, out_dir=out / "checkpoint")
    print(f"train acc {res.train_acc:.4f} eval acc {res.eval_acc:.4f}")
    manifest.finalize([out / "checkpoint"])
    return 0


def _seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds expects comma-separated ints, got {text!r}") from exc


def cmd_ablate(args) -> int:
    mcfg, tcfg = resolve_config(args)
    seeds = _seeds(args.seeds)
    rows = exp.ablation_rows(mcfg)
    only = None
    if args.rows:
        only = [r.strip() for r in args.rows.split(",") if r.strip()]
        unknown = set(only) - {n for n, _ in rows}
        if unknown:
            raise UsageError(f"unknown rows {sorted(unknown)}; valid: {[n for n, _ in rows]}")
    train_data = eval_data = None
    if args.data:
        train_data = load_dataset(args.data)
        eval_data = load_dataset(args.eval_data) if args.eval_data else None
        if eval_data is None:
            raise UsageError("--data needs --eval-data")
    out = prepare_out(args.out, args.overwrite)
    manifest = RunManifest(out, "ablate", (mcfg, tcfg), {"seeds": args.seeds})
    report = exp.ablation_matrix(mcfg, tcfg, seeds, rows, train_data, eval_data,
                                 args.init_backbone, only=only, workers=cpu_workers())
    (out / "ablation.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "runs.csv").write_text(report.runs_csv(), encoding="utf-8")
    (out / "rows.txt").write_text(report.configs_text(), encoding="utf-8")
    print(report.to_csv(), end="")
    manifest.finalize([out / "ablation.csv", out / "runs.csv", out / "rows.txt"])
    return 0


def cmd_probe(args) -> int:
    mcfg, tcfg = resolve_config(args)
    seeds = _seeds(args.seeds)
    out = prepare_out(args.out, args.overwrite)
    manifest = RunManifest(out, "probe", (mcfg, tcfg), {"seeds": args.seeds})
    report = exp.aux_probe_experiment(mcfg, tcfg, seeds, backbone_init=args.init_backbone)
    (out / "probe.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "runs.txt").write_text(report.configs_text(), encoding="utf-8")
    print(report.to_csv(), end="")
    print(f"ordering fcn_only >= joint_aux >= stopgrad_aux: {report.ordering()}")
    manifest.finalize([out / "probe.csv", out / "runs.txt"])
    return 0


def palette(num_classes: int) -> np.ndarray:
    """C x 3 uint8 colours: class 0 gray, class c at hue 360*c/C, S 0.75, V 0.9."""
    out = np.empty((num_classes, 3), dtype=np.uint8)
    out[0] = (128, 128, 128)
    for c in range(1, num_classes):
        r, g, b = colorsys.hsv_to_rgb(c / num_classes, 0.75, 0.9)
        out[c] = (round(r * 255), round(g * 255), round(b * 255))
    return out


def ppm_bytes(labels: np.ndarray, colors: np.ndarray) -> bytes:
    h, w = labels.shape
    idx = np.clip(labels, 0, len(colors) - 1)
    return f"P6 {w} {h} 255\n".encode("ascii") + colors[idx].astype(np.uint8).tobytes()


def _load_inputs(path: Path) -> np.ndarray:
    if path.is_dir():
        return load_dataset(path).images
    arr = hfgt.load(path)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"{path}: expected 3xHxW or Nx3xHxW image, got shape {arr.shape}")
    return arr.astype(np.float64)


def cmd_predict(args) -> int:
    model = checkpoint.load(args.checkpoint)
    images = _load_inputs(Path(args.input))
    out = prepare_out(args.out, args.overwrite)
    preds = predict(model, images)
    colors = palette(model.cfg.num_classes)
    for i, p in enumerate(preds):
        hfgt.save(out / f"{i:05d}_pred.hfgt", p.astype(np.uint16))
        (out / f"{i:05d}_pred.ppm").write_bytes(ppm_bytes(p, colors))
    if args.tokens_csv:
        sim, zero = token_similarity_matrix(model.tokens)
        rows = [[f"class_{c}"] + [f"{v:.6f}" for v in row] for c, row in enumerate(sim)]
        header = ["class"] + [f"class_{c}" for c in range(len(sim))]
        (out / "token_similarity.csv").write_text(_csv(rows, header), encoding="utf-8")
        if zero:
            print(f"zero-norm tokens: {zero}")
    print(f"wrote {len(preds)} prediction(s) to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="hfgd", description="High-level feature guided decoder toolkit.",
                     epilog=keys_help(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, helptext, config=False, out_required=False):
        p = sub.add_parser(name, help=helptext, description=helptext,
                           epilog=keys_help() if config else None, formatter_class=fmt)
        p.set_defaults(fn=fn)
        p.add_argument("--out", required=out_required)
        p.add_argument("--overwrite", action="store_true",
                       help="replace an existing non-empty output directory")
        if config:
            p.add_argument("--config", help="key=value file (a run_manifest.txt also works)")
            p.add_argument("--set", action="extend", nargs="+", metavar="KEY=VALUE",
                           help="override config keys; repeatable")
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic segmentation dataset",
            out_required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--spec", help="scene spec file (key=value)")

    p = add("train", cmd_train, "train a model", config=True, out_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--init-backbone", help="pretrained checkpoint directory")

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--head", choices=("student", "teacher"), default="student")

    p = add("audit", cmd_audit, "gradient-topology audit", config=True)
    p.add_argument("--batches", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--expect-negative", action="store_true",
                   help="report verdict changes against the default config and exit 0")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient check suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true", help="skip the full-model variants")

    p = add("pretrain", cmd_pretrain, "pretrain the backbone on shape classification",
            config=True, out_required=True)
    p.add_argument("--iters", type=int, default=exp.PretrainConfig.iters)
    p.add_argument("--n-samples", type=int, default=exp.PretrainConfig.n_samples)
    p.add_argument("--seed", type=int, default=0)

    p = add("ablate", cmd_ablate, "run the ablation matrix", config=True, out_required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--rows", help="comma-separated subset of row names")
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--init-backbone")

    p = add("probe", cmd_probe, "auxiliary-head probe experiment", config=True,
            out_required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--init-backbone")

    p = add("predict", cmd_predict, "export predicted label maps and colour renders",
            out_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="HFGT image or dataset directory")
    p.add_argument("--tokens-csv", action="store_true",
                   help="also write the class-token similarity matrix")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"hfgd: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"hfgd: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, checkpoint.CheckpointMismatch) as exc:
        print(f"hfgd: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
