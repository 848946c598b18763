"""Experiment harnesses: backbone pretraining, the ablation matrix, the
auxiliary-head probe and the output-stride comparison.

Every harness returns a plain report object that can be rendered as CSV and
carries the reference figures it is meant to be compared against.
"""

from __future__ import annotations

import dataclasses
import io
import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as cfgio
from . import nn
from . import tensor as T
from .data import (BackgroundOnlyError, Dataset, SceneSpec, classification_view,
                   default_benchmark, generate_sample, thin_line_spec)
from .model import HFGD, Backbone, ModelConfig, pixel_cross_entropy
from .tensor import Tensor
from .train import (SGD, BatchStream, TrainConfig, evaluate, poly_lr, teacher_loss,
                    train)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# backbone pretraining on the classification view
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    n_samples: int = 2048
    iters: int = 1500
    batch_size: int = 16
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    # classification scenes come from their own seed range
    data_seed: int = 2_000_000


class Classifier(nn.Module):
    """Backbone, global average pool and a linear head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg.backbone_stage_channels, rng)
        c4 = cfg.backbone_stage_channels[3]
        self.head = nn.Conv2d(c4, cfg.num_classes, 1, rng)

    def __call__(self, image: Tensor) -> Tensor:
        f32 = self.backbone(image).f32
        pooled = T.mean(f32, axis=(2, 3))
        w = T.reshape(self.head.weight, (self.cfg.num_classes, -1))
        return T.add(T.matmul(pooled, T.transpose(w, (1, 0))), self.head.bias)


def classification_set(n: int, base_seed: int, spec: SceneSpec):
    """(images, labels) of the first ``n`` scenes that contain a foreground shape."""
    images, labels = [], []
    seed = base_seed
    while len(images) < n:
        try:
            img, cls = classification_view(generate_sample(seed, spec), spec.num_classes)
        except BackgroundOnlyError:
            seed += 1
            continue
        images.append(img)
        labels.append(cls)
        seed += 1
    return np.stack(images), np.asarray(labels, dtype=np.int64)


@dataclass
class PretrainResult:
    model: Classifier
    train_acc: float
    eval_acc: float
    losses: list


def pretrain_backbone(mcfg: ModelConfig, pcfg: PretrainConfig | None = None,
                      spec: SceneSpec | None = None, out_dir=None) -> PretrainResult:
    """Train backbone + pooled linear head on dominant-class classification.

    The returned classifier shares parameter names ``backbone.*`` with the
    segmentation model, so its checkpoint loads without renaming.
    """
    pcfg = pcfg or PretrainConfig()
    spec = spec or SceneSpec(num_classes=mcfg.num_classes)
    images, labels = classification_set(pcfg.n_samples, pcfg.data_seed, spec)
    ev_images, ev_labels = classification_set(256, pcfg.data_seed + 1_000_000, spec)
    model = Classifier(mcfg, pcfg.seed)
    params = model.parameters()
    opt = SGD(params, pcfg.momentum, pcfg.weight_decay)
    rng = np.random.default_rng(pcfg.seed)
    sched = TrainConfig(total_iters=pcfg.iters, lr0=pcfg.lr0, batch_size=max(pcfg.batch_size, 4))
    order = np.empty(0, dtype=np.int64)
    losses = []
    model.train()
    for step in range(pcfg.iters):
        while order.size < pcfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(images))])
        idx, order = order[:pcfg.batch_size], order[pcfg.batch_size:]
        x = images[idx]
        flips = rng.random(len(idx)) < 0.5
        if flips.any():
            x = x.copy()
            x[flips] = x[flips][..., ::-1]
        loss = T.cross_entropy(model(Tensor(x)), labels[idx])
        opt.step(T.backward(loss, params), poly_lr(step, sched))
        losses.append(float(loss.item()))
    result = PretrainResult(model, _accuracy(model, images[:512], labels[:512]),
                            _accuracy(model, ev_images, ev_labels), losses)
    if out_dir is not None:
        checkpoint.save(model, out_dir)
    return result


def _accuracy(model: Classifier, images, labels) -> float:
    model.eval()
    hits = 0
    with T.no_grad():
        for i in range(0, len(images), 64):
            hits += int((model(Tensor(images[i:i + 64])).data.argmax(1) == labels[i:i + 64]).sum())
    model.train()
    return hits / len(images)


def load_backbone(model: HFGD, source) -> tuple:
    """Copy ``backbone.*`` entries from a classifier (or checkpoint dir) into
    ``model``; returns (missing, unexpected), both empty on success."""
    if isinstance(source, (str, Path)):
        state = checkpoint.read(source)
    elif isinstance(source, dict):
        state = source
    else:
        state = checkpoint.state_dict(source)
    return checkpoint.load_state(model, state, prefix="backbone.")


# ---------------------------------------------------------------------------
# single configured run
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    row: str
    seed: int
    miou: float
    pixel_acc: float
    per_class_iou: np.ndarray
    teacher_miou: float
    seconds: float


def run_row(name: str, mcfg: ModelConfig, tcfg: TrainConfig, train_data: Dataset,
            eval_data: Dataset, seed: int, backbone_init=None, head: str = "student") -> RunResult:
    """Train one configuration from seed ``seed`` and evaluate it.

    ``seed`` drives both the initialisation and the batch order, so rows
    sharing a seed see bit-identical batches.
    """
    tcfg = dataclasses.replace(tcfg, seed=seed)
    model = HFGD(mcfg, seed)
    if backbone_init is not None:
        missing, unexpected = load_backbone(model, backbone_init)
        if missing or unexpected:
            raise checkpoint.CheckpointMismatch(
                f"backbone init mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
    start = time.perf_counter()
    train(model, train_data, tcfg)
    seconds = time.perf_counter() - start
    teacher = evaluate(model, eval_data, head="teacher")
    main = teacher if head == "teacher" else evaluate(model, eval_data, head="student")
    log.info("%s seed %d miou %.4f (%.0fs)", name, seed, main.miou, seconds)
    return RunResult(name, seed, main.miou, main.pixel_acc, main.per_class_iou,
                     teacher.miou, seconds)


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


# ---------------------------------------------------------------------------
# ablation matrix
# ---------------------------------------------------------------------------

# reference gains the directional checks are sign-matched against
REFERENCE_DELTAS = {"full_hfgm": 1.80, "cae_context": 1.52, "usfpn": 0.48, "os2": 0.7}
REFERENCE_ABLATION = {"sfpn": 47.14, "guidance": 47.67, "aa": 47.88, "full": 48.94}

_HFGM = {
    "sfpn": dict(hfg_guidance_enabled=False, hfgm_aa_enabled=False,
                 lateral_stop_grad_enabled=False),
    "guidance": dict(hfg_guidance_enabled=True, hfgm_aa_enabled=False,
                     lateral_stop_grad_enabled=True),
    "aa": dict(hfg_guidance_enabled=False, hfgm_aa_enabled=True,
               lateral_stop_grad_enabled=False),
    "full": dict(hfg_guidance_enabled=True, hfgm_aa_enabled=True,
                 lateral_stop_grad_enabled=True),
}


def ablation_rows(base: ModelConfig | None = None) -> list:
    """The ten (name, ModelConfig) rows: four HFGM variants on an SFPN
    decoder with an identity or CAE encoder, then U-SFPN full at OS 4 and 2."""
    base = base or ModelConfig()
    rows = []
    for enc in ("identity", "cae"):
        for variant, flags in _HFGM.items():
            cfg = dataclasses.replace(base, upsampler="sfpn", target_os=4,
                                      cae_enabled=enc == "cae", **flags)
            rows.append((f"{variant}_{enc}", cfg))
    for os_ in (4, 2):
        rows.append((f"usfpn_full_os{os_}",
                     dataclasses.replace(base, upsampler="usfpn", target_os=os_,
                                         cae_enabled=True, **_HFGM["full"])))
    return rows


def row_train_config(mcfg: ModelConfig, base: TrainConfig) -> TrainConfig:
    """Without guidance the OS=32 head is not part of the model, so its loss
    weight is zeroed."""
    if mcfg.hfg_guidance_enabled:
        return base
    return dataclasses.replace(base, lambda_teacher=0.0)


@dataclass
class AblationReport:
    rows: list  # (name, ModelConfig)
    seeds: list
    results: dict = field(default_factory=dict)  # (name, seed) -> RunResult
    meta: dict = field(default_factory=dict)

    def mious(self, name: str) -> list:
        return [self.results[(name, s)].miou for s in self.seeds if (name, s) in self.results]

    def median(self, name: str) -> float:
        return _median(self.mious(name))

    def class_iou_median(self, name: str, cls: int) -> float:
        vals = [self.results[(name, s)].per_class_iou[cls] for s in self.seeds
                if (name, s) in self.results]
        return float(np.nanmedian(vals))

    def table(self) -> list:
        """One list per row: name, mIoU per seed (nan if not run), median."""
        out = []
        for name, _ in self.rows:
            cells = [self.results[(name, s)].miou if (name, s) in self.results
                     else float("nan") for s in self.seeds]
            vals = self.mious(name)
            out.append([name] + cells + [_median(vals) if vals else float("nan")])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + [f"seed{s}" for s in self.seeds] + ["median"])
        for line in self.table():
            w.writerow([line[0]] + [f"{v:.6f}" for v in line[1:]])
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "seed", "miou", "pixel_acc", "teacher_miou", "seconds",
                    "per_class_iou"])
        for name, _ in self.rows:
            for s in self.seeds:
                r = self.results.get((name, s))
                if r is not None:
                    w.writerow([name, s, f"{r.miou:.6f}", f"{r.pixel_acc:.6f}",
                                f"{r.teacher_miou:.6f}", f"{r.seconds:.1f}",
                                " ".join(f"{v:.4f}" for v in r.per_class_iou)])
        return buf.getvalue()

    def configs_text(self) -> str:
        return "".join(f"[{name}]\n{cfgio.dump(cfg)}" for name, cfg in self.rows)


def ablation_matrix(base: ModelConfig | None = None, tcfg: TrainConfig | None = None,
                    seeds=(0, 1, 2, 3, 4), rows=None, train_data: Dataset | None = None,
                    eval_data: Dataset | None = None, backbone_init=None,
                    only=None, workers: int = 0) -> AblationReport:
    """Run every row for every seed. ``only`` restricts to a subset of row
    names (the table keeps all ten rows, unrun cells are left out).

    With ``workers > 1`` the runs execute in separate processes; results are
    keyed by (row, seed) so the report does not depend on completion order.
    """
    rows = rows or ablation_rows(base)
    tcfg = tcfg or TrainConfig()
    if train_data is None or eval_data is None:
        train_data, eval_data = default_benchmark()
    report = AblationReport(rows=list(rows), seeds=list(seeds),
                            meta={"reference_deltas": dict(REFERENCE_DELTAS),
                                  "reference_ablation": dict(REFERENCE_ABLATION)})
    if isinstance(backbone_init, nn.Module):
        backbone_init = checkpoint.state_dict(backbone_init)
    jobs = [(name, mcfg, row_train_config(mcfg, tcfg), train_data, eval_data, seed,
             backbone_init)
            for name, mcfg in rows if only is None or name in only for seed in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(job) for job in jobs]
    for job, res in zip(jobs, results):
        report.results[(job[0], job[5])] = res
    return report


def _run_job(job) -> RunResult:
    return run_row(*job)


# ---------------------------------------------------------------------------
# auxiliary-head probe
# ---------------------------------------------------------------------------

REFERENCE_PROBE = {"fcn_only": 45.87, "joint_aux": 44.35, "stopgrad_aux": 40.04}


def probe_runs(base: ModelConfig | None = None, tcfg: TrainConfig | None = None) -> list:
    """(name, ModelConfig, TrainConfig) for the three probe runs.

    The auxiliary head is the OS=32 path (identity 1x1 projection and class
    tokens). fcn_only trains it alone; joint_aux adds an SFPN with its own
    classifier whose gradients reach the backbone; stopgrad_aux is the same
    but the auxiliary loss is cut off from the backbone.
    """
    base = base or ModelConfig()
    tcfg = tcfg or TrainConfig()
    common = dict(upsampler="sfpn", target_os=4, cae_enabled=False, hfgm_aa_enabled=False,
                  hfg_guidance_enabled=False, lateral_stop_grad_enabled=False)
    fcn = dataclasses.replace(base, **common)
    joint = dataclasses.replace(base, **common)
    stop = dataclasses.replace(base, teacher_input_stop_grad=True, **common)
    return [
        ("fcn_only", fcn, dataclasses.replace(tcfg, lambda_teacher=1.0, lambda_student=0.0)),
        ("joint_aux", joint, dataclasses.replace(tcfg, lambda_teacher=1.0, lambda_student=1.0)),
        ("stopgrad_aux", stop, dataclasses.replace(tcfg, lambda_teacher=1.0, lambda_student=1.0)),
    ]


@dataclass
class ProbeReport:
    runs: list  # (name, ModelConfig, TrainConfig)
    seeds: list
    aux: dict = field(default_factory=dict)   # (name, seed) -> aux-head mIoU
    main: dict = field(default_factory=dict)  # (name, seed) -> main-head mIoU (nan for fcn_only)
    meta: dict = field(default_factory=dict)

    def median_aux(self, name: str) -> float:
        return _median([self.aux[(name, s)] for s in self.seeds])

    def ordering(self) -> str:
        """'pass' when median aux quality is fcn_only >= joint_aux >= stopgrad_aux."""
        a, b, c = (self.median_aux(n) for n in ("fcn_only", "joint_aux", "stopgrad_aux"))
        return "pass" if a >= b >= c else "warn"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "seed", "aux_miou", "main_miou", "reference_aux_miou"])
        for name, _, _ in self.runs:
            for s in self.seeds:
                w.writerow([name, s, f"{self.aux[(name, s)]:.6f}",
                            f"{self.main[(name, s)]:.6f}", REFERENCE_PROBE[name]])
        return buf.getvalue()

    def configs_text(self) -> str:
        return "".join(f"[{name}]\n{cfgio.dump(m, t)}" for name, m, t in self.runs)


def aux_probe_experiment(base: ModelConfig | None = None, tcfg: TrainConfig | None = None,
                         seeds=(0,), train_data: Dataset | None = None,
                         eval_data: Dataset | None = None, backbone_init=None) -> ProbeReport:
    if train_data is None or eval_data is None:
        train_data, eval_data = default_benchmark()
    runs = probe_runs(base, tcfg)
    report = ProbeReport(runs=runs, seeds=list(seeds), meta={"reference": dict(REFERENCE_PROBE)})
    for name, mcfg, rcfg in runs:
        for seed in seeds:
            r = run_row(name, mcfg, rcfg, train_data, eval_data, seed, backbone_init,
                        head="teacher" if name == "fcn_only" else "student")
            report.aux[(name, seed)] = r.teacher_miou
            report.main[(name, seed)] = float("nan") if name == "fcn_only" else r.miou
    return report


# ---------------------------------------------------------------------------
# pretrained versus scratch
# ---------------------------------------------------------------------------

REFERENCE_PRETRAIN = {"pretrained": 45.87, "scratch": 26.13}


@dataclass
class PretrainComparison:
    seeds: list
    pretrained: dict = field(default_factory=dict)  # seed -> mIoU
    scratch: dict = field(default_factory=dict)
    pretrain_eval_acc: float = float("nan")
    meta: dict = field(default_factory=lambda: {"reference": dict(REFERENCE_PRETRAIN)})

    def medians(self) -> tuple:
        return (_median(list(self.pretrained.values())), _median(list(self.scratch.values())))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["init", "seed", "miou", "reference_miou"])
        for init, vals in (("pretrained", self.pretrained), ("scratch", self.scratch)):
            for s in self.seeds:
                w.writerow([init, s, f"{vals[s]:.6f}", REFERENCE_PRETRAIN[init]])
        return buf.getvalue()


def fcn_config(base: ModelConfig | None = None) -> ModelConfig:
    """Backbone plus the OS=32 identity head: the FCN baseline."""
    return dataclasses.replace(base or ModelConfig(), upsampler="sfpn", target_os=4,
                               cae_enabled=False, hfgm_aa_enabled=False,
                               hfg_guidance_enabled=True)


def pretrain_vs_scratch(base: ModelConfig | None = None, tcfg: TrainConfig | None = None,
                        seeds=(0, 1, 2), pcfg: PretrainConfig | None = None,
                        train_data: Dataset | None = None, eval_data: Dataset | None = None,
                        backbone_init=None, head: str = "student") -> PretrainComparison:
    """Train the same model from a pretrained and a random backbone on
    identical seeds and batches.

    The default is the full HFGD model scored on its student head. Passing
    ``fcn_config()`` with ``head="teacher"`` gives the FCN-only variant, where
    only the OS=32 head is trained and scored (at 64 px that head predicts a
    2x2 map, which caps its mIoU whatever the initialisation).
    """
    mcfg = base or ModelConfig()
    tcfg = tcfg or TrainConfig()
    if head == "teacher":
        tcfg = dataclasses.replace(tcfg, lambda_student=0.0, lambda_teacher=1.0,
                                   lambda_car=0.0)
    if train_data is None or eval_data is None:
        train_data, eval_data = default_benchmark()
    out = PretrainComparison(seeds=list(seeds))
    if backbone_init is None:
        pre = pretrain_backbone(mcfg, pcfg)
        out.pretrain_eval_acc = pre.eval_acc
        backbone_init = pre.model
    for seed in seeds:
        out.pretrained[seed] = run_row("pretrained", mcfg, tcfg, train_data, eval_data, seed,
                                       backbone_init, head=head).miou
        out.scratch[seed] = run_row("scratch", mcfg, tcfg, train_data, eval_data, seed,
                                    None, head=head).miou
    return out


# ---------------------------------------------------------------------------
# output-stride comparison on thin structures
# ---------------------------------------------------------------------------

def os_ablation(base: ModelConfig | None = None, tcfg: TrainConfig | None = None,
                seeds=(0, 1, 2, 3, 4), spec: SceneSpec | None = None, n_train: int = 512,
                n_eval: int = 128, backbone_init=None) -> AblationReport:
    """U-SFPN full HFGD at OS 4 and OS 2 on a thin-line-heavy benchmark."""
    spec = spec or thin_line_spec()
    train_data, eval_data = default_benchmark(spec, n_train, n_eval)
    rows = [r for r in ablation_rows(base) if r[0].startswith("usfpn_full")]
    report = ablation_matrix(base, tcfg, seeds, rows, train_data, eval_data, backbone_init)
    report.meta["thin_line_classes"] = spec.class_of_kind("thin_line")
    return report
