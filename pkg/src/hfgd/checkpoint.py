"""Checkpoints: ``params.hfgt`` (concatenated HFGT records), ``manifest.txt``
(``name<TAB>kind<TAB>shape<TAB>offset``) and ``config.txt`` (key=value)."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from . import config as cfgio
from . import hfgt
from .model import HFGD

PAYLOAD = "params.hfgt"
MANIFEST = "manifest.txt"
CONFIG = "config.txt"


class CheckpointMismatch(ValueError):
    pass


def state_dict(model) -> dict:
    """name -> (kind, array) for every parameter and buffer, in a fixed order."""
    state = {name: ("param", p.data) for name, p in model.named_parameters()}
    state.update({name: ("buffer", b) for name, b in model.named_buffers()})
    return state


def save(model: HFGD, out_dir, train_cfg=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = io.BytesIO()
    rows = []
    for name, (kind, arr) in state_dict(model).items():
        offset = payload.tell()
        payload.write(hfgt.encode(np.asarray(arr, dtype=np.float64)))
        shape = ",".join(str(d) for d in arr.shape)
        rows.append(f"{name}\t{kind}\t{shape}\t{offset}")
    (out / PAYLOAD).write_bytes(payload.getvalue())
    (out / MANIFEST).write_text("\n".join(rows) + "\n", encoding="utf-8")
    cfgs = (model.cfg,) if train_cfg is None else (model.cfg, train_cfg)
    (out / CONFIG).write_text(cfgio.dump(*cfgs), encoding="utf-8")
    return out


def read(path) -> dict:
    root = Path(path)
    blob = (root / PAYLOAD).read_bytes()
    state = {}
    for line in (root / MANIFEST).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, kind, shape, offset = line.split("\t")
        arr = hfgt.read(io.BytesIO(blob[int(offset):]))
        want = tuple(int(d) for d in shape.split(",") if d)
        if arr.shape != want:
            raise CheckpointMismatch(f"{name}: manifest shape {want} but payload {arr.shape}")
        state[name] = (kind, arr)
    return state


def load_state(model, state: dict, prefix: str = "", strict: bool = True):
    """Copy arrays into ``model``; returns (missing, unexpected) name lists.

    With ``prefix`` only entries under it are considered on both sides.
    """
    own = state_dict(model)
    own = {k: v for k, v in own.items() if k.startswith(prefix)}
    theirs = {k: v for k, v in state.items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(theirs))
    unexpected = sorted(set(theirs) - set(own))
    if strict and (missing or unexpected):
        name = (missing or unexpected)[0]
        raise CheckpointMismatch(f"parameter {name!r} missing on one side "
                                 f"({len(missing)} missing, {len(unexpected)} unexpected)")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name in sorted(set(own) & set(theirs)):
        _, arr = theirs[name]
        target = params.get(name)
        current = target.data if target is not None else buffers[name]
        if current.shape != arr.shape:
            raise CheckpointMismatch(f"parameter {name!r}: checkpoint shape {arr.shape}, "
                                     f"model shape {current.shape}")
        if target is not None:
            target.data = arr.copy()
        else:
            buffers[name][...] = arr
    return missing, unexpected


def load(path) -> HFGD:
    mcfg, _ = cfgio.load(Path(path) / CONFIG)
    model = HFGD(mcfg)
    load_state(model, read(path))
    return model
