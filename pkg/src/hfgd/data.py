"""Seeded synthetic segmentation scenes.

Randomness comes from xoshiro256** seeded through splitmix64, so a sample
is a pure function of ``(seed, SceneSpec)`` on any platform:

* ``Xoshiro256(seed)`` fills its 4-word state with splitmix64 outputs
  ``mix(seed + k * 0x9E3779B97F4A7C15)`` for k = 1..4;
* a float in [0, 1) is ``(next() >> 11) * 2**-53``;
* ``integers(lo, hi)`` is ``lo + floor(u * (hi - lo))``;
* normals use Box-Muller on two uniforms, ``u1`` mapped to ``1 - u1``.

Pixel noise uses ``lanes`` independent generators stepped in lock-step;
lane ``i`` is seeded with splitmix64 outputs ``4*i+1 .. 4*i+4`` of the noise
seed (itself the next draw of the scene generator).
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import hfgt

IGNORE = 255
KINDS = ("disk", "rectangle", "triangle", "thin_line", "ring")

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _u(v: int) -> np.uint64:
    return np.uint64(v)


def splitmix64(seed: int, count: int) -> np.ndarray:
    """The first ``count`` outputs of splitmix64 started at ``seed``."""
    with np.errstate(over="ignore"):
        z = _u(seed & 0xFFFFFFFFFFFFFFFF) + np.arange(1, count + 1, dtype=np.uint64) * _GAMMA
        z = (z ^ (z >> _u(30))) * _M1
        z = (z ^ (z >> _u(27))) * _M2
        return z ^ (z >> _u(31))


def _rotl(x, k: int):
    return (x << _u(k)) | (x >> _u(64 - k))


class Xoshiro256:
    """xoshiro256** over ``lanes`` parallel streams (uint64 numpy arrays)."""

    def __init__(self, seed: int, lanes: int = 1):
        words = splitmix64(seed, 4 * lanes).reshape(lanes, 4)
        self.s = [words[:, i].copy() for i in range(4)]
        self.lanes = lanes

    def next(self) -> np.ndarray:
        s0, s1, s2, s3 = self.s
        with np.errstate(over="ignore"):
            result = _rotl(s1 * _u(5), 7) * _u(9)
            t = s1 << _u(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            self.s[3] = _rotl(s3, 45)
        return result

    def random(self) -> np.ndarray:
        return (self.next() >> _u(11)).astype(np.float64) * 2.0 ** -53

    # scalar helpers for the single-lane scene stream
    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * float(self.random()[0])

    def integers(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi)."""
        return lo + int(float(self.random()[0]) * (hi - lo))

    def choice(self, weights) -> int:
        w = np.asarray(weights, dtype=np.float64)
        u = self.uniform() * w.sum()
        return int(min(np.searchsorted(np.cumsum(w), u, side="right"), len(w) - 1))

    def u64(self) -> int:
        return int(self.next()[0])

    def normals(self, n: int) -> np.ndarray:
        """n standard normals drawn across the lanes (lane-major order)."""
        steps = -(-n // (2 * self.lanes))
        out = np.empty((steps, 2, self.lanes))
        for i in range(steps):
            u1 = 1.0 - self.random()
            u2 = self.random()
            r = np.sqrt(-2.0 * np.log(u1))
            out[i, 0] = r * np.cos(2 * np.pi * u2)
            out[i, 1] = r * np.sin(2 * np.pi * u2)
        return out.reshape(-1)[:n]


@dataclass
class SceneSpec:
    image_size: int = 64
    num_classes: int = 6
    shapes_min: int = 2
    shapes_max: int = 5
    kinds: tuple = KINDS
    noise_std: float = 0.05
    texture_amp: float = 0.08
    ignore_border_px: int = 1
    # relative draw frequency of foreground classes 1..C-1; empty = uniform
    class_weights: tuple = ()
    palette_seed: int = 2024

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ValueError("need 1 <= shapes_min <= shapes_max")
        bad = set(self.kinds) - set(KINDS)
        if bad or not self.kinds:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        if self.class_weights and len(self.class_weights) != self.num_classes - 1:
            raise ValueError("class_weights needs one entry per foreground class")

    def kind_of(self, cls: int) -> str:
        return self.kinds[(cls - 1) % len(self.kinds)]

    def class_of_kind(self, kind: str) -> list:
        return [c for c in range(1, self.num_classes) if self.kind_of(c) == kind]


def serialize_spec(spec: SceneSpec) -> str:
    lines = []
    for f in dataclasses.fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_spec(text: str) -> SceneSpec:
    kw = {}
    types = {f.name: f.type for f in dataclasses.fields(SceneSpec)}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, val = line.split("=", 1)
        if key not in types:
            continue
        default = getattr(SceneSpec, key, None) if key != "kinds" else KINDS
        if key == "kinds":
            kw[key] = tuple(x for x in val.split(",") if x)
        elif key == "class_weights":
            kw[key] = tuple(float(x) for x in val.split(",") if x)
        elif isinstance(default, float):
            kw[key] = float(val)
        else:
            kw[key] = int(val)
    return SceneSpec(**kw)


@dataclass
class SegSample:
    image: np.ndarray   # 3 x H x W float64 in [0, 1]
    labels: np.ndarray  # H x W uint16, IGNORE on the border


# ---------------------------------------------------------------------------
# painting
# ---------------------------------------------------------------------------

def class_appearance(spec: SceneSpec):
    """Per-class base colour (C x 3) and texture frequencies (C x 2)."""
    rng = Xoshiro256(spec.palette_seed)
    colors = np.empty((spec.num_classes, 3))
    freqs = np.empty((spec.num_classes, 2))
    for c in range(spec.num_classes):
        if c == 0:
            colors[c] = (0.45, 0.45, 0.45)
        else:
            hue = (c - 1) / max(spec.num_classes - 1, 1)
            colors[c] = _hsv(hue, 0.55 + 0.3 * rng.uniform(), 0.55 + 0.35 * rng.uniform())
        freqs[c] = (rng.uniform(0.5, 4.0), rng.uniform(0.5, 4.0))
    return colors, freqs


def _hsv(h: float, s: float, v: float):
    i = int(h * 6) % 6
    f = h * 6 - math.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _line_mask(n: int, x0, y0, x1, y1, width: int) -> np.ndarray:
    """DDA raster; width 2 adds the neighbour along the minor axis."""
    mask = np.zeros((n, n), dtype=bool)
    dx, dy = x1 - x0, y1 - y0
    steps = max(abs(dx), abs(dy))
    t = np.arange(steps + 1) / max(steps, 1)
    xs = np.rint(x0 + t * dx).astype(int)
    ys = np.rint(y0 + t * dy).astype(int)
    mask[ys, xs] = True
    if width == 2:
        if abs(dx) >= abs(dy):
            mask[np.clip(ys + 1, 0, n - 1), xs] = True
        else:
            mask[ys, np.clip(xs + 1, 0, n - 1)] = True
    return mask


def _shape_mask(kind: str, rng: Xoshiro256, n: int, yy, xx) -> np.ndarray:
    if kind == "disk":
        r = rng.uniform(4, 12)
        cy, cx = rng.uniform(r, n - r), rng.uniform(r, n - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "ring":
        r_out = rng.uniform(7, 14)
        r_in = r_out - rng.uniform(2, 4)
        cy, cx = rng.uniform(r_out, n - r_out), rng.uniform(r_out, n - r_out)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r_out * r_out) & (d2 >= r_in * r_in)
    if kind == "rectangle":
        h, w = rng.integers(6, 21), rng.integers(6, 21)
        y0, x0 = rng.integers(0, n - h + 1), rng.integers(0, n - w + 1)
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    if kind == "triangle":
        size = rng.uniform(10, 24)
        oy, ox = rng.uniform(0, n - size), rng.uniform(0, n - size)
        pts = [(oy + rng.uniform(0, size), ox + rng.uniform(0, size)) for _ in range(3)]
        (ay, ax), (by, bx), (cy, cx) = pts

        def side(py, px, qy, qx):
            return (xx - qx) * (py - qy) - (px - qx) * (yy - qy)

        d1, d2, d3 = side(ay, ax, by, bx), side(by, bx, cy, cx), side(cy, cx, ay, ax)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    if kind == "thin_line":
        width = rng.integers(1, 3)
        while True:
            x0, y0 = rng.integers(0, n), rng.integers(0, n)
            x1, y1 = rng.integers(0, n), rng.integers(0, n)
            if max(abs(x1 - x0), abs(y1 - y0)) >= n // 4:
                return _line_mask(n, x0, y0, x1, y1, width)
    raise ValueError(f"unknown kind {kind!r}")


def generate_sample(seed: int, spec: SceneSpec) -> SegSample:
    n, C = spec.image_size, spec.num_classes
    rng = Xoshiro256(seed)
    colors, freqs = class_appearance(spec)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    weights = spec.class_weights or (1.0,) * (C - 1)

    labels = np.zeros((n, n), dtype=np.uint16)
    n_shapes = rng.integers(spec.shapes_min, spec.shapes_max + 1)
    for _ in range(n_shapes):
        cls = 1 + rng.choice(weights)
        for _attempt in range(8):
            mask = _shape_mask(spec.kind_of(cls), rng, n, yy, xx)
            if mask.any():
                break
        labels[mask] = cls

    phase = np.array([rng.uniform(0, 2 * np.pi) for _ in range(C)])
    texture = np.sin(2 * np.pi * (freqs[labels, 0] * xx + freqs[labels, 1] * yy) / n
                     + phase[labels])
    image = colors[labels].transpose(2, 0, 1) + spec.texture_amp * texture[None]
    noise_seed = rng.u64()
    if spec.noise_std > 0:
        noise = Xoshiro256(noise_seed, lanes=n * n).normals(3 * n * n)
        image = image + spec.noise_std * noise.reshape(3, n, n)
    image = np.clip(image, 0.0, 1.0)

    b = spec.ignore_border_px
    if b:
        labels[:b, :] = IGNORE
        labels[-b:, :] = IGNORE
        labels[:, :b] = IGNORE
        labels[:, -b:] = IGNORE
    return SegSample(image, labels)


class BackgroundOnlyError(ValueError):
    """The sample has no foreground pixel; draw another one."""


def classification_view(sample: SegSample, num_classes: int | None = None):
    """(image, dominant foreground class); ties go to the lower class index."""
    lab = sample.labels.astype(np.int64).reshape(-1)
    C = num_classes or int(lab[lab != IGNORE].max(initial=0)) + 1
    counts = np.bincount(lab[(lab != IGNORE) & (lab < C)], minlength=C)
    counts[0] = 0
    if counts.sum() == 0:
        raise BackgroundOnlyError("sample contains only background")
    return sample.image, int(np.argmax(counts))


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x H x W
    labels: np.ndarray  # N x H x W uint16
    spec: SceneSpec

    def __len__(self):
        return len(self.images)


def generate_arrays(n: int, base_seed: int, spec: SceneSpec) -> Dataset:
    samples = [generate_sample(base_seed + i, spec) for i in range(n)]
    return Dataset(np.stack([s.image for s in samples]),
                   np.stack([s.labels for s in samples]), spec)


def generate_dataset(n: int, base_seed: int, spec: SceneSpec, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for i in range(n):
            s = generate_sample(base_seed + i, spec)
            img_name, lab_name = f"{i:05d}_image.hfgt", f"{i:05d}_labels.hfgt"
            hfgt.save(out / img_name, s.image)
            hfgt.save(out / lab_name, s.labels)
            rows.append(f"{i}\t{img_name}\t{lab_name}")
        text = f"n={n}\nbase_seed={base_seed}\n" + serialize_spec(spec) + "\n".join(rows) + "\n"
        path = out / MANIFEST
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"writing dataset to {out}: {exc}") from exc
    return path


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    text = path.read_text(encoding="utf-8")
    entries = []
    for line in text.splitlines():
        if "\t" in line:
            idx, img, lab = line.split("\t")
            entries.append((int(idx), img, lab))
    return parse_spec(text), entries, path.parent


def load_dataset(path) -> Dataset:
    spec, entries, root = read_manifest(path)
    images = np.stack([hfgt.load(root / img) for _, img, _ in entries])
    labels = np.stack([hfgt.load(root / lab) for _, _, lab in entries])
    return Dataset(images, labels, spec)


def default_benchmark(spec: SceneSpec | None = None, n_train: int = 512, n_eval: int = 128,
                      seed: int = 0):
    spec = spec or SceneSpec()
    return (generate_arrays(n_train, seed, spec),
            generate_arrays(n_eval, seed + 1_000_000, spec))


def thin_line_spec(**overrides) -> SceneSpec:
    """Scenes where the thin-line class is drawn far more often than the rest."""
    base = SceneSpec()
    thin = base.class_of_kind("thin_line")
    weights = tuple(4.0 if c in thin else 1.0 for c in range(1, base.num_classes))
    kw = dict(shapes_min=3, shapes_max=6, class_weights=weights)
    kw.update(overrides)
    return dataclasses.replace(base, **kw)


def cpu_workers() -> int:
    """Worker cap from HFGD_THREADS; 0 or unset means single-threaded."""
    try:
        return max(int(os.environ.get("HFGD_THREADS", "0")), 0)
    except ValueError:
        return 0
