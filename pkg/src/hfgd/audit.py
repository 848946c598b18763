"""Gradient-topology audit.

For each loss term on its own, record which parameter groups the term can
reach through barrier-free graph paths and the largest gradient magnitude
they receive. A group that is unreachable must have a bit-exact zero
gradient; anything else is reported as a violation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import HFGD, LATERAL_SITES, downsample_labels, pixel_cross_entropy
from .nn import bilinear_upsample, frozen_stats
from .tensor import Tensor

GROUPS = ("backbone.stem", "backbone.stage1", "backbone.stage2", "backbone.stage3",
          "backbone.stage4", "cae", "tokens", "usfpn", "hfgm_aa")
LOSS_TERMS = ("teacher_ce", "student_ce", "car_intra", "car_inter")
BACKBONE = tuple(g for g in GROUPS if g.startswith("backbone."))

# (loss term, group) pairs the stop-gradient wiring must keep at exactly zero
CLAIMS = tuple(("student_ce", g) for g in BACKBONE + ("cae", "tokens")) + \
    (("teacher_ce", "usfpn"), ("teacher_ce", "hfgm_aa"))

BARRIER_SITES = LATERAL_SITES + ("tokens",)

ZERO = "zero-by-topology"
NONZERO = "nonzero"
ZERO_REACHABLE = "zero-but-reachable"
VIOLATION = "VIOLATION"


def param_group(name: str) -> str:
    if name == "tokens":
        return "tokens"
    head = name.split(".")[0]
    if head == "backbone":
        return ".".join(name.split(".")[:2])
    return head


@dataclass
class AuditEntry:
    loss: str
    group: str
    reachable: bool
    max_abs_grad: float
    verdict: str


@dataclass
class GradAuditReport:
    entries: dict = field(default_factory=dict)  # (loss, group) -> AuditEntry
    batches: int = 0

    def verdict(self, loss: str, group: str) -> str | None:
        e = self.entries.get((loss, group))
        return e.verdict if e else None

    def violations(self) -> list:
        return [e for e in self.entries.values() if e.verdict == VIOLATION]

    def failed_claims(self, claims=CLAIMS) -> list:
        return [(l, g) for l, g in claims
                if (l, g) in self.entries and self.entries[(l, g)].verdict != ZERO]

    def to_text(self, baseline: "GradAuditReport | None" = None) -> str:
        lines = [f"# gradient audit over {self.batches} batch(es)",
                 "loss\tgroup\treachable\tmax_abs_grad\tverdict"]
        for (loss, group), e in self.entries.items():
            tag = ""
            if baseline is not None:
                old = baseline.verdict(loss, group)
                if old is not None and old != e.verdict:
                    tag = f"\tCHANGED (was {old})"
            lines.append(f"{loss}\t{group}\t{str(e.reachable).lower()}\t"
                         f"{e.max_abs_grad:.6e}\t{e.verdict}{tag}")
        return "\n".join(lines) + "\n"


def loss_terms(model: HFGD, images: np.ndarray, labels: np.ndarray,
               teacher_supervision: str = "upsample") -> dict:
    out = model(Tensor(images), labels)
    if teacher_supervision == "upsample":
        teacher = pixel_cross_entropy(bilinear_upsample(out.teacher_logits, 32), labels)
    else:
        teacher = pixel_cross_entropy(out.teacher_logits, downsample_labels(labels, 32))
    terms = {"teacher_ce": teacher,
             "student_ce": pixel_cross_entropy(out.student_logits, labels)}
    if out.car_intra is not None:
        terms["car_intra"] = out.car_intra
        terms["car_inter"] = out.car_inter
    return terms


def _verdict(reachable: bool, max_abs: float) -> str:
    if not reachable:
        return ZERO if max_abs == 0.0 else VIOLATION
    return NONZERO if max_abs > 0 else ZERO_REACHABLE


def grad_audit(model: HFGD, batches, teacher_supervision: str = "upsample") -> GradAuditReport:
    """Audit over one or more (images, labels) batches.

    Reachability is structural (graph traversal, values ignored); the
    gradient magnitude is the max over all batches.
    """
    if isinstance(batches, tuple) and len(batches) == 2 and isinstance(batches[0], np.ndarray):
        batches = [batches]
    params = model.parameters()
    groups = {}
    for name in params:
        groups.setdefault(param_group(name), []).append(name)
    reach: dict = {}
    worst: dict = {}
    n = 0
    for images, labels in batches:
        n += 1
        model.train()
        with frozen_stats(model):
            terms = loss_terms(model, images, labels, teacher_supervision)
        for term, value in terms.items():
            ids = T.reachable(value)
            grads = T.backward(value, params, retain_graph=True)
            for group, names in groups.items():
                key = (term, group)
                hit = any(id(params[nm]) in ids for nm in names)
                reach[key] = reach.get(key, False) or hit
                m = max(float(np.abs(grads[nm]).max()) for nm in names)
                worst[key] = max(worst.get(key, 0.0), m)
    report = GradAuditReport(batches=n)
    for term in LOSS_TERMS:
        for group in GROUPS:
            key = (term, group)
            if key in reach:
                report.entries[key] = AuditEntry(term, group, reach[key], worst[key],
                                                 _verdict(reach[key], worst[key]))
    return report


def random_batches(num_classes: int, count: int, seed: int, batch: int = 4, size: int = 64):
    """Generic inputs for the audit: uniform images and labels with some ignores."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        images = rng.random((batch, 3, size, size))
        labels = rng.integers(0, num_classes, (batch, size, size))
        labels[rng.random(labels.shape) < 0.05] = 255
        out.append((images, labels))
    return out


def mutation_test(model: HFGD, batches, sites=BARRIER_SITES) -> dict:
    """Disable one barrier at a time; map site -> list of claims that flipped."""
    flipped = {}
    saved = set(model.disabled_barriers)
    try:
        for site in sites:
            model.disabled_barriers = saved | {site}
            flipped[site] = grad_audit(model, batches).failed_claims()
    finally:
        model.disabled_barriers = saved
    return flipped
