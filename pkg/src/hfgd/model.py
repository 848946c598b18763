"""Two-branch HFGD network: backbone, context encoder, shared class tokens,
pyramid upsampler and the stop-gradient wiring between the branches."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

IGNORE_INDEX = 255

# stop-gradient sites on the paths from the backbone branch into the upsampler
LATERAL_SITES = ("lateral_f4", "lateral_f8", "lateral_f16", "teacher_feat")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 6
    width_mult: float = 1 / 16
    backbone_stage_channels: tuple = (16, 24, 32, 48)
    upsampler: str = "usfpn"
    target_os: int = 4
    cae_enabled: bool = True
    hfg_guidance_enabled: bool = True
    hfgm_aa_enabled: bool = True
    lateral_stop_grad_enabled: bool = True
    # probe-only: detach the OS=32 head's input from the backbone
    teacher_input_stop_grad: bool = False

    def __post_init__(self):
        self.backbone_stage_channels = tuple(int(c) for c in self.backbone_stage_channels)
        self.validate()

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.width_mult > 0:
            raise ConfigError(f"width_mult must be > 0, got {self.width_mult}")
        if self.upsampler not in ("sfpn", "usfpn"):
            raise ConfigError(f"upsampler must be 'sfpn' or 'usfpn', got {self.upsampler!r}")
        if self.target_os not in (2, 4):
            raise ConfigError(f"target_os must be 2 or 4, got {self.target_os}")
        if self.target_os == 2 and self.upsampler != "usfpn":
            raise ConfigError("target_os=2 requires upsampler=usfpn")
        if len(self.backbone_stage_channels) != 4 or min(self.backbone_stage_channels) < 1:
            raise ConfigError("backbone_stage_channels needs 4 positive ints")

    @property
    def wide_channels(self) -> int:
        return math.ceil(2048 * self.width_mult)

    @property
    def reduced_channels(self) -> int:
        return math.ceil(512 * self.width_mult)

    @property
    def d_final(self) -> int:
        return math.ceil(256 * self.width_mult)

    @property
    def branch_channels(self) -> int:
        return math.ceil(256 * self.width_mult)


@dataclass
class FeaturePyramid:
    f4: Tensor
    f8: Tensor
    f16: Tensor
    f32: Tensor


@dataclass
class ModelOutput:
    teacher_logits: Tensor
    student_logits: Tensor | None
    teacher_feat: Tensor
    student_feat: Tensor | None
    car_intra: Tensor | None = None
    car_inter: Tensor | None = None
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

class Stage(nn.Module):
    def __init__(self, cin, cout, rng):
        self.down = nn.ConvBNReLU(cin, cout, 3, rng, stride=2)
        self.conv = nn.ConvBNReLU(cout, cout, 3, rng)

    def __call__(self, x):
        return self.conv(self.down(x))


class Backbone(nn.Module):
    """Stride-2 stem plus four stride-2 stages -> features at OS 4/8/16/32."""

    def __init__(self, channels, rng, in_ch: int = 3):
        c1, c2, c3, c4 = channels
        self.stem = nn.ConvBNReLU(in_ch, c1, 3, rng, stride=2)
        self.stage1 = Stage(c1, c1, rng)
        self.stage2 = Stage(c1, c2, rng)
        self.stage3 = Stage(c2, c3, rng)
        self.stage4 = Stage(c3, c4, rng)

    def __call__(self, image: Tensor) -> FeaturePyramid:
        H, W = image.shape[-2:]
        if H % 32 or W % 32:
            raise ShapeError(f"backbone input must be divisible by 32, got {H}x{W}")
        x = self.stem(image)
        f4 = self.stage1(x)
        f8 = self.stage2(f4)
        f16 = self.stage3(f8)
        f32 = self.stage4(f16)
        return FeaturePyramid(f4, f8, f16, f32)


# ---------------------------------------------------------------------------
# context-augmented encoder
# ---------------------------------------------------------------------------

def downsample_labels(labels: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour label sampling at the centre of each stride cell."""
    if stride == 1:
        return labels
    off = stride // 2
    return labels[..., off::stride, off::stride]


def car_losses(feat: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX):
    """Class-aware regularizers on a B x d x h x w map.

    intra: mean over labelled pixels of 1 - cos(pixel, its class centre), with
    centres detached. inter: mean hinge max(0, cos) over ordered pairs of
    distinct classes present in the batch.
    """
    B, d, h, w = feat.shape
    lab = np.asarray(labels).reshape(-1).astype(np.int64)
    if lab.size != B * h * w:
        raise ShapeError(f"car_losses: labels {np.shape(labels)} do not match {feat.shape}")
    valid = lab != ignore_index
    present = np.unique(lab[valid])
    if present.size == 0:
        zero = Tensor(0.0)
        return zero, zero
    flat = T.reshape(T.transpose(feat, (0, 2, 3, 1)), (B * h * w, d))
    assign = np.zeros((lab.size, present.size))
    assign[np.nonzero(valid)[0], np.searchsorted(present, lab[valid])] = 1.0
    counts = assign.sum(axis=0)
    centers = T.matmul(Tensor(assign.T / counts[:, None]), flat)

    nv = float(valid.sum())
    unit = T.l2_normalize(flat, axis=1)
    frozen = T.l2_normalize(T.stop_gradient(centers, name="car_centers"), axis=1)
    cos_sum = T.sum(T.mul(unit, T.matmul(Tensor(assign), frozen)))
    intra = T.scale(T.add(T.scale(cos_sum, -1.0), nv), 1.0 / nv)

    k = present.size
    if k < 2:
        return intra, Tensor(0.0)
    cu = T.l2_normalize(centers, axis=1)
    sim = T.relu(T.matmul(cu, T.transpose(cu, (1, 0))))
    off_diag = Tensor(1.0 - np.eye(k))
    inter = T.scale(T.sum(T.mul(sim, off_diag)), 1.0 / (k * (k - 1)))
    return intra, inter


class CAE(nn.Module):
    """wide 1x1 -> reduce 1x1 -> self-attention (residual) -> trailing 1x1."""

    def __init__(self, cin: int, cfg: ModelConfig, rng):
        self.wide = nn.ConvBNReLU(cin, cfg.wide_channels, 1, rng)
        self.reduce = nn.Conv2d(cfg.wide_channels, cfg.reduced_channels, 1, rng)
        self.attn = nn.Attention(cfg.reduced_channels, cfg.reduced_channels, rng)
        self.trail = nn.ConvBNReLU(cfg.reduced_channels, cfg.d_final, 1, rng)

    def __call__(self, f32: Tensor):
        r = self.reduce(self.wide(f32))
        ctx = T.add(r, self.attn(r))
        return self.trail(ctx), ctx


class IdentityEncoder(nn.Module):
    """No extra encoding: a single 1x1 projection of f32 to the token width."""

    def __init__(self, cin: int, cfg: ModelConfig, rng):
        self.proj = nn.Conv2d(cin, cfg.d_final, 1, rng)

    def __call__(self, f32: Tensor):
        return self.proj(f32), None


# ---------------------------------------------------------------------------
# upsampler
# ---------------------------------------------------------------------------

class Branch(nn.Module):
    def __init__(self, cin: int, cout: int, lead_k: int, n_up: int, rng):
        self.lateral = nn.Conv2d(cin, cout, lead_k, rng)
        self.blocks = [nn.ConvBNReLU(cout, cout, 3, rng) for _ in range(n_up)]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.lateral(x)
        for block in self.blocks:
            x = nn.bilinear_upsample(block(x), 2)
        return x


class PyramidUpsampler(nn.Module):
    """SemanticFPN-style head; 'usfpn' uses 3x3 leading convs and may reach OS=2.

    Branches are fed f4, f8, f16 and the teacher feature (OS=32). No OS=2
    lateral exists; the OS=2 variant adds one more conv-upsample block to
    every branch instead.
    """

    def __init__(self, cfg: ModelConfig, rng):
        c1, c2, c3, _ = cfg.backbone_stage_channels
        cb = cfg.branch_channels
        lead_k = 3 if cfg.upsampler == "usfpn" else 1
        self.target_os = cfg.target_os
        self.branches = [
            Branch(cin, cb, lead_k, int(math.log2(os_ // cfg.target_os)), rng)
            for cin, os_ in ((c1, 4), (c2, 8), (c3, 16), (cfg.d_final, 32))
        ]
        # linear output: the student feature lives in the signed token space
        self.merge = nn.Conv2d(cb, cfg.d_final, 3, rng)
        if not cfg.hfg_guidance_enabled:
            self.classifier = nn.Conv2d(cfg.d_final, cfg.num_classes, 1, rng)

    def __call__(self, inputs) -> Tensor:
        merged = None
        for branch, x in zip(self.branches, inputs):
            y = branch(x)
            merged = y if merged is None else T.add(merged, y)
        return self.merge(merged)


# ---------------------------------------------------------------------------
# heads and the full network
# ---------------------------------------------------------------------------

def hfgm_logits(feat: Tensor, tokens: Tensor, role: str) -> Tensor:
    """Per-pixel inner products with the class tokens.

    The student classifies against a detached view of the tokens, so the
    tokens only co-evolve with the teacher feature.
    """
    B, d, h, w = feat.shape
    C, dt = tokens.shape
    if d != dt:
        raise ShapeError(f"feature width {d} does not match token width {dt}")
    if role == "student":
        tokens = T.stop_gradient(tokens, name="tokens")
    elif role != "teacher":
        raise ValueError(f"role must be 'teacher' or 'student', got {role!r}")
    flat = T.reshape(T.transpose(feat, (0, 2, 3, 1)), (B * h * w, d))
    logits = T.matmul(flat, T.transpose(tokens, (1, 0)))
    return T.transpose(T.reshape(logits, (B, h, w, C)), (0, 3, 1, 2))


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray,
                        ignore_index: int = IGNORE_INDEX) -> Tensor:
    B, C, H, W = logits.shape
    flat = T.reshape(T.transpose(logits, (0, 2, 3, 1)), (B * H * W, C))
    return T.cross_entropy(flat, np.asarray(labels).reshape(-1), ignore_index)


class HFGD(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c4 = cfg.backbone_stage_channels[3]
        self.backbone = Backbone(cfg.backbone_stage_channels, rng)
        self.cae = CAE(c4, cfg, rng) if cfg.cae_enabled else IdentityEncoder(c4, cfg, rng)
        self.tokens = T.parameter(
            nn.he_normal(rng, (cfg.num_classes, cfg.d_final), cfg.d_final))
        self.usfpn = PyramidUpsampler(cfg, rng)
        self.hfgm_aa = nn.AxialAttention(cfg.d_final, rng) if cfg.hfgm_aa_enabled else None
        # barrier sites switched off for mutation testing
        self.disabled_barriers: set = set()

    def _barrier(self, x: Tensor, site: str, enabled: bool) -> Tensor:
        if enabled and site not in self.disabled_barriers:
            return T.stop_gradient(x, name=site)
        return x

    def teacher(self, image: Tensor):
        pyr = self.backbone(image)
        f32 = self._barrier(pyr.f32, "teacher_input", self.cfg.teacher_input_stop_grad)
        teacher_feat, ctx = self.cae(f32)
        return pyr, teacher_feat, ctx

    def student(self, pyr: FeaturePyramid, teacher_feat: Tensor) -> Tensor:
        on = self.cfg.lateral_stop_grad_enabled
        inputs = [self._barrier(x, site, on) for x, site in
                  zip((pyr.f4, pyr.f8, pyr.f16, teacher_feat), LATERAL_SITES)]
        feat = self.usfpn(inputs)
        if self.hfgm_aa is not None:
            feat = self.hfgm_aa(feat)
        return feat

    def student_head(self, student_feat: Tensor) -> Tensor:
        if self.cfg.hfg_guidance_enabled:
            if "tokens" in self.disabled_barriers:
                return hfgm_logits(student_feat, self.tokens, "teacher")
            return hfgm_logits(student_feat, self.tokens, "student")
        return self.usfpn.classifier(student_feat)

    def __call__(self, image, labels=None, with_student: bool = True) -> ModelOutput:
        image = image if isinstance(image, Tensor) else Tensor(image)
        pyr, teacher_feat, ctx = self.teacher(image)
        teacher_logits = hfgm_logits(teacher_feat, self.tokens, "teacher")
        intra = inter = None
        if labels is not None and ctx is not None:
            intra, inter = car_losses(ctx, downsample_labels(labels, 32))
        student_feat = student_logits = None
        if with_student:
            student_feat = self.student(pyr, teacher_feat)
            student_logits = nn.bilinear_upsample(
                self.student_head(student_feat), self.cfg.target_os)
        return ModelOutput(teacher_logits, student_logits, teacher_feat, student_feat,
                           intra, inter, extras={"pyramid": pyr, "context": ctx})


def token_similarity_matrix(tokens) -> tuple[np.ndarray, list]:
    """Cosine similarity between class tokens; zero-norm tokens give 0 and
    are returned in the second element."""
    t = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
    norms = np.linalg.norm(t, axis=1)
    zero = [int(i) for i in np.nonzero(norms == 0)[0]]
    safe = np.where(norms == 0, 1.0, norms)
    unit = t / safe[:, None]
    unit[norms == 0] = 0.0
    sim = unit @ unit.T
    return sim, zero


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
