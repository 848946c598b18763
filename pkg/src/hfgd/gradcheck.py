"""Finite-difference suite over every differentiable op and the model variants."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .model import HFGD, ModelConfig, car_losses, hfgm_logits, pixel_cross_entropy
from .tensor import Tensor
from .train import teacher_loss

TOLERANCE = 1e-4
EPS = 1e-5


def _p(rng, *shape, scale=1.0):
    return T.parameter(rng.standard_normal(shape) * scale)


def _weighted(out: Tensor, rng) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output matters."""
    return T.sum(T.mul(out, Tensor(rng.standard_normal(out.shape))))


def op_cases(seed: int = 0) -> dict:
    """name -> (f, inputs) for each primitive and composite op."""
    rng = np.random.default_rng(seed)
    cases = {}

    def case(name, build):
        inputs, f = build()
        cases[name] = (f, inputs)

    def binary(op, chan=False):
        def build():
            a = _p(rng, 2, 3, 4)
            b = _p(rng, 3) if chan else _p(rng, 2, 3, 4)
            w = np.random.default_rng(1).standard_normal(a.shape)
            return {"a": a, "b": b}, lambda: T.sum(T.mul(op(a, b), Tensor(w)))
        return build

    case("add", binary(T.add))
    case("add_channel", binary(T.add, chan=True))
    case("sub", binary(T.sub))
    case("mul", binary(T.mul))
    case("mul_channel", binary(T.mul, chan=True))

    def unary(fn, shape=(3, 5), shift=0.0):
        def build():
            x = T.parameter(rng.standard_normal(shape) + shift)
            w = Tensor(np.random.default_rng(2).standard_normal(fn(x).shape))
            return {"x": x}, lambda: T.sum(T.mul(fn(x), w))
        return build

    case("scale", unary(lambda x: T.scale(x, -1.7)))
    case("relu", unary(T.relu))
    case("transpose", unary(lambda x: T.transpose(x, (1, 0))))
    case("reshape", unary(lambda x: T.reshape(x, (5, 3))))
    case("sum_axis", unary(lambda x: T.sum(x, axis=1)))
    case("mean_axis", unary(lambda x: T.mean(x, axis=0)))
    case("softmax", unary(lambda x: T.softmax(x, axis=-1)))
    case("l2_normalize", unary(lambda x: T.l2_normalize(x, axis=1)))

    def mm(batched):
        def build():
            sa, sb = ((2, 3, 4), (2, 4, 5)) if batched else ((3, 4), (4, 5))
            a, b = _p(rng, *sa), _p(rng, *sb)
            return {"a": a, "b": b}, lambda: _weighted(T.matmul(a, b), np.random.default_rng(3))
        return build

    case("matmul", mm(False))
    case("matmul_batched", mm(True))

    def ce():
        logits = _p(rng, 7, 4)
        labels = np.array([0, 3, 255, 1, 2, 2, 255])
        return {"logits": logits}, lambda: T.cross_entropy(logits, labels)

    case("cross_entropy", ce)

    def conv(k, stride):
        def build():
            x = _p(rng, 2, 3, 6, 6)
            w = _p(rng, 4, 3, k, k, scale=0.5)
            b = _p(rng, 4)
            p = nn.Conv2dParams(w, b, stride)
            return {"x": x, "w": w, "b": b}, \
                lambda: _weighted(nn.conv2d(x, p), np.random.default_rng(4))
        return build

    case("conv2d_3x3", conv(3, 1))
    case("conv2d_3x3_s2", conv(3, 2))
    case("conv2d_1x1", conv(1, 1))

    def bn(mode):
        def build():
            x = _p(rng, 3, 2, 3, 3)
            g, be = _p(rng, 2), _p(rng, 2)
            p = nn.NormParams(g, be, np.zeros(2), np.ones(2), mode=mode)
            return {"x": x, "gamma": g, "beta": be}, \
                lambda: _weighted(nn.batch_norm(x, p, update_stats=False),
                                  np.random.default_rng(5))
        return build

    case("batch_norm_train", bn("train"))
    case("batch_norm_eval", bn("eval"))

    def up():
        x = _p(rng, 1, 2, 3, 3)
        return {"x": x}, lambda: _weighted(nn.bilinear_upsample(x, 4), np.random.default_rng(6))

    case("bilinear_upsample", up)

    def attn(kind):
        def build():
            x = _p(rng, 2, 4, 3, 3)
            mods = [nn.Attention(4, 4, rng, init_scale=1.0) for _ in range(2)]
            inputs = {"x": x}
            for i, m in enumerate(mods):
                inputs.update({f"{i}.{k}": v for k, v in m.named_parameters()})
            if kind == "self":
                fn = lambda: _weighted(nn.self_attention(x, mods[0].params),  # noqa: E731
                                       np.random.default_rng(7))
            else:
                fn = lambda: _weighted(  # noqa: E731
                    nn.axial_attention(x, mods[0].params, mods[1].params),
                    np.random.default_rng(7))
            return inputs, fn
        return build

    case("self_attention", attn("self"))
    case("axial_attention", attn("axial"))

    def car():
        feat = _p(rng, 2, 4, 3, 3)
        labels = np.random.default_rng(8).integers(0, 3, (2, 3, 3))
        labels[0, 0, 0] = 255

        def f():
            intra, inter = car_losses(feat, labels)
            return T.add(intra, inter)
        return {"feat": feat}, f

    case("car_losses", car)

    def tokens():
        feat, tok = _p(rng, 2, 4, 3, 3), _p(rng, 5, 4)
        return {"feat": feat, "tokens": tok}, \
            lambda: _weighted(hfgm_logits(feat, tok, "teacher"), np.random.default_rng(9))

    case("hfgm_logits", tokens)
    return cases


def model_variants() -> dict:
    small = dict(num_classes=4, backbone_stage_channels=(4, 4, 6, 8), width_mult=1 / 64)
    return {
        "hfgd_full_os4": ModelConfig(**small),
        "hfgd_full_os2": ModelConfig(target_os=2, **small),
        "sfpn_identity_plain": ModelConfig(upsampler="sfpn", cae_enabled=False,
                                           hfg_guidance_enabled=False, hfgm_aa_enabled=False,
                                           lateral_stop_grad_enabled=False, **small),
        "sfpn_identity_guided": ModelConfig(upsampler="sfpn", cae_enabled=False, **small),
    }


def model_case(cfg: ModelConfig, seed: int = 0, batch: int = 2, size: int = 64):
    """Total training loss of one model as a function of all its parameters."""
    rng = np.random.default_rng(seed)
    model = HFGD(cfg, seed)
    images = rng.standard_normal((batch, 3, size, size))
    labels = rng.integers(0, cfg.num_classes, (batch, size, size))

    def f():
        with nn.frozen_stats(model):
            out = model(Tensor(images), labels)
        total = T.add(teacher_loss(out.teacher_logits, labels),
                      pixel_cross_entropy(out.student_logits, labels))
        if out.car_intra is not None:
            total = T.add(total, T.scale(T.add(out.car_intra, out.car_inter), 0.1))
        return total

    return f, model.parameters()


@dataclass
class GradcheckResult:
    name: str
    report: T.FiniteDiffReport
    seconds: float

    @property
    def ok(self) -> bool:
        return self.report.ok(TOLERANCE)


def run_suite(include_models: bool = True, coords_per_param: int = 2,
              seed: int = 0) -> list:
    results = []
    for name, (f, inputs) in op_cases(seed).items():
        t0 = time.perf_counter()
        rep = T.finite_diff_check(f, inputs, eps=EPS)
        results.append(GradcheckResult(name, rep, time.perf_counter() - t0))
    if include_models:
        for name, cfg in model_variants().items():
            f, params = model_case(cfg, seed)
            t0 = time.perf_counter()
            rep = T.finite_diff_check(f, params, eps=EPS, max_coords=coords_per_param, seed=seed)
            results.append(GradcheckResult(name, rep, time.perf_counter() - t0))
    return results


def format_results(results) -> str:
    lines = []
    for r in results:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{r.name:24s} max_rel_err={r.report.max_rel_err:.3e} "
                     f"checked={r.report.checked:5d} {r.seconds:6.2f}s {status}")
        lines.extend(f"    {b}" for b in dict.fromkeys(r.report.barriers))
    return "\n".join(lines) + "\n"
