"""Central-difference gradient suite over every primitive and composed block.

Each check draws a fresh random point (and fresh fixed context such as masks
or read-out weights) per repetition and reports the worst relative error seen.
Composed blocks are checked with respect to their inputs coordinate-wise and
with respect to all of their parameters along random directions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .bam import BAM, LayerNorm, MixerConfig
from .network import segmentation_loss
from .sffu import CBAMAttention, fuse, window_fft
from .swtoken import SWToken, TokenizerConfig
from .tensor import Tensor, grad_check

EPS = 1e-5


def split(x: Tensor, shapes) -> list[Tensor]:
    out, pos = [], 0
    for shp in shapes:
        n = int(np.prod(shp))
        out.append(T.reshape(T.narrow(x, 0, pos, pos + n), shp))
        pos += n
    return out


def readout(y: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Fixed random linear functional so every output element matters."""
    w = rng.normal(size=y.shape)
    return lambda t: T.tsum(t * Tensor(w))


def _scalarize(fn, shapes, rng):
    """Wrap fn(*inputs) -> tensor into a scalar function of one flat vector."""
    weights = {}

    def f(x):
        y = fn(*split(x, shapes))
        if "w" not in weights:
            weights["w"] = rng.normal(size=y.shape)
        return T.tsum(y * Tensor(weights["w"]))

    return f


def directional_check(loss: Callable[[], Tensor], params: dict[str, Tensor],
                      rng: np.random.Generator, eps: float = EPS) -> float:
    """Relative error of <grad, v> against a central difference along random v."""
    for p in params.values():
        p.zero_grad()
    loss().backward()
    dirs = {k: rng.normal(size=p.shape) for k, p in params.items()}
    analytic = sum(float(np.sum(p.grad * dirs[k])) for k, p in params.items())
    saved = {k: p.data.copy() for k, p in params.items()}

    def shifted(sign):
        for k, p in params.items():
            p.data = saved[k] + sign * eps * dirs[k]
        with T.no_grad():
            return loss().item()

    numeric = (shifted(1) - shifted(-1)) / (2 * eps)
    for k, p in params.items():
        p.data = saved[k]
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


@dataclass
class Check:
    name: str
    build: Callable  # rng -> (scalar fn, point) or rng -> float


def _elementwise(name, op, low=-2.0, high=2.0):
    def build(rng):
        return _scalarize(op, [(3, 4)], rng), rng.uniform(low, high, 12)
    return Check(name, build)


def _binary(name, op, shp_a=(3, 4), shp_b=(3, 4), b_low=-2.0, b_high=2.0):
    def build(rng):
        na, nb = int(np.prod(shp_a)), int(np.prod(shp_b))
        pt = np.concatenate([rng.uniform(-2, 2, na), rng.uniform(b_low, b_high, nb)])
        return _scalarize(op, [shp_a, shp_b], rng), pt
    return Check(name, build)


def _unary(name, op, shape, low=-2.0, high=2.0):
    def build(rng):
        return _scalarize(op, [shape], rng), rng.uniform(low, high, int(np.prod(shape)))
    return Check(name, build)


def _bilinear(rng):
    C, H, W, P = 2, 5, 6, 7
    coords = np.stack([rng.uniform(0.1, H - 1.1, P), rng.uniform(0.1, W - 1.1, P)], axis=1)
    field = rng.normal(size=C * H * W)
    return _scalarize(T.bilinear_sample, [(C, H, W), (P, 2)], rng), np.concatenate([field, coords.ravel()])


def _scan(rng):
    B, L, D, N = 2, 5, 3, 2
    shapes = [(B, L, D), (B, L, D), (D, N), (B, L, N), (B, L, N)]
    x = rng.normal(size=B * L * D)
    delta = rng.uniform(0.1, 1.0, B * L * D)
    A = -rng.uniform(0.2, 1.5, D * N)
    Bm, Cm = rng.normal(size=B * L * N), rng.normal(size=B * L * N)
    return _scalarize(T.selective_scan, shapes, rng), np.concatenate([x, delta, A, Bm, Cm])


def _fft(inverse):
    def build(rng):
        return _scalarize(lambda z: T.fft2(z, inverse=inverse), [(2, 3, 4, 4)], rng), rng.normal(size=96)
    return build


def _swtoken_input(rng):
    """F feeds both the offset predictor and the bilinear sampler."""
    cfg = TokenizerConfig(L=3, s=2, alpha=1.5, orientation="x" if rng.uniform() < 0.5 else "y")
    tok = SWToken(2, cfg, rng)
    tok.params["off.b"].data = rng.normal(size=3)
    f = _scalarize(lambda F: tok(F).tokens, [(2, 4, 4)], rng)
    return f, rng.uniform(0.1, 1.0, 32)


def _swtoken_params(rng):
    cfg = TokenizerConfig(L=3, s=2, alpha=1.5)
    tok = SWToken(2, cfg, rng)
    tok.params["off.w"].data = rng.normal(size=tok.params["off.w"].shape)
    F = Tensor(rng.uniform(0.1, 1.0, (2, 4, 4)))
    out = tok(F).tokens
    read = readout(out, rng)
    return directional_check(lambda: read(tok(F).tokens), tok.params, rng)


def _bam_input(rng):
    bam = BAM(2, MixerConfig(state_dim=3), rng)
    return _scalarize(bam, [(2, 3, 4, 2)], rng), rng.normal(size=48)


def _bam_params(rng):
    bam = BAM(2, MixerConfig(state_dim=3), rng)
    tokens = Tensor(rng.normal(size=(2, 3, 4, 2)))
    read = readout(bam(tokens), rng)
    return directional_check(lambda: read(bam(tokens)), bam.params, rng)


def _layernorm(rng):
    ln = LayerNorm(4)
    ln.params["g"].data = rng.normal(size=4)
    return _scalarize(ln, [(3, 4)], rng), rng.normal(size=12)


def _window_fft(inverse):
    def build(rng):
        ch = 4 if inverse else 2
        return _scalarize(lambda t: window_fft(t, 2, inverse), [(3, 4, ch)], rng), rng.normal(size=12 * ch)
    return build


def _sffu_input(rng):
    attn = CBAMAttention(2, rng, reduction=2)
    f = _scalarize(lambda a, b: fuse(a, b, attn.params, 2), [(2, 4, 4), (2, 4, 4)], rng)
    return f, rng.normal(size=64)


def _sffu_params(rng):
    attn = CBAMAttention(2, rng, reduction=2)
    a, b = Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(2, 4, 4)))
    read = readout(fuse(a, b, attn.params, 2), rng)
    return directional_check(lambda: read(fuse(a, b, attn.params, 2)), attn.params, rng)


def _loss(rng):
    mask = (rng.uniform(size=(1, 4, 4)) < 0.4).astype(float)
    return (lambda x: segmentation_loss(T.reshape(x, (1, 4, 4)), mask)), rng.normal(size=16) * 2


def _model_params(rng):
    """Whole network, all parameters, cycling through the ablation presets.

    Parameters are jittered away from their zero-bias initialization so the
    point does not sit exactly on a ReLU kink; a smaller step keeps the
    stencil from straddling the sampler's piecewise-linear seams.
    """
    from .network import PRESETS, ModelConfig, build_model

    preset = list(PRESETS)[int(rng.integers(len(PRESETS)))]
    cfg = ModelConfig(stages=2, base_channels=4, L=3, s=2, alpha=1.0, state_dim=2, reduction=2,
                      input_size=4, seed=int(rng.integers(1 << 30)), **PRESETS[preset])
    model = build_model(cfg)
    for p in model.params.values():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    image = Tensor(rng.uniform(size=(1, 4, 4)))
    mask = (rng.uniform(size=(1, 4, 4)) < 0.4).astype(float)
    return directional_check(lambda: segmentation_loss(model(image), mask), model.params, rng, 1e-6)


CHECKS: list[Check] = [
    _binary("add", T.add, (3, 4), (4,)),
    _binary("sub", T.sub, (3, 4), (3, 1)),
    _binary("mul", T.mul),
    _binary("div", T.div, b_low=0.5, b_high=2.0),
    _elementwise("neg", T.neg),
    _elementwise("power", lambda a: T.power(a, 1.7), 0.2, 2.0),
    _elementwise("exp", T.exp),
    _elementwise("log", T.log, 0.2, 3.0),
    _elementwise("tanh", T.tanh),
    _elementwise("sigmoid", T.sigmoid),
    _elementwise("softplus", T.softplus),
    _elementwise("silu", T.silu),
    _elementwise("relu", T.relu),
    _binary("matmul", T.matmul, (2, 3, 4), (4, 5)),
    _binary("conv2d", lambda x, k: T.conv2d(x, k, padding=1), (2, 5, 5), (3, 2, 3, 3)),
    _binary("conv2d_stride2", lambda x, k: T.conv2d(x, k, stride=2, padding=1), (2, 6, 6), (3, 2, 3, 3)),
    _binary("conv2d_bias", lambda x, b: T.conv2d(x, Tensor(np.ones((2, 1, 3, 3)) * 0.3), b),
            (1, 4, 4), (2,)),
    _unary("sum", lambda a: T.tsum(a, axis=0), (3, 4)),
    _unary("mean", lambda a: T.mean(a, axis=-1, keepdims=True), (3, 4)),
    _unary("max", lambda a: T.tmax(a, axis=1), (3, 4)),
    _unary("reshape_transpose", lambda a: T.transpose(T.reshape(a, (2, 3, 2)), (2, 0, 1)), (3, 4)),
    _unary("getitem", lambda a: a[1:, ::2], (3, 4)),
    _unary("narrow", lambda a: T.narrow(a, 1, 1, 3), (3, 4)),
    _binary("concat", lambda a, b: T.concat([a, b], axis=1), (3, 4), (3, 2)),
    _binary("stack", lambda a, b: T.stack([a, b], axis=0), (3, 4), (3, 4)),
    _unary("flip", lambda a: T.flip(a, 1), (3, 4)),
    _unary("broadcast_to", lambda a: T.broadcast_to(a, (2, 3, 4)), (3, 4)),
    _unary("cumulative_sum", lambda a: T.cumulative_sum(a, 1), (3, 4)),
    Check("bilinear_sample", _bilinear),
    Check("fft2", _fft(False)),
    Check("ifft2", _fft(True)),
    Check("selective_scan", _scan),
    Check("layernorm", _layernorm),
    Check("window_fft", _window_fft(False)),
    Check("window_ifft", _window_fft(True)),
    Check("swtoken_input", _swtoken_input),
    Check("swtoken_params", _swtoken_params),
    Check("bam_input", _bam_input),
    Check("bam_params", _bam_params),
    Check("sffu_input", _sffu_input),
    Check("sffu_params", _sffu_params),
    Check("loss", _loss),
    Check("model_params", _model_params),
]


def run_check(check: Check, points: int = 20, seed: int = 0) -> float:
    worst = 0.0
    with T.default_dtype(np.float64):
        for i in range(points):
            rng = np.random.default_rng([seed, i])
            built = check.build(rng)
            if isinstance(built, float):
                err = built
            else:
                fn, point = built
                err = grad_check(fn, point, EPS)
            worst = max(worst, err)
    return worst


def run_suite(points: int = 20, seed: int = 0, names=None, report=None) -> dict[str, float]:
    """Worst relative error per check; ``report`` receives one line per check."""
    results = {}
    for check in CHECKS:
        if names and check.name not in names:
            continue
        t0 = time.perf_counter()
        results[check.name] = run_check(check, points, seed)
        if report is not None:
            report(f"{check.name:<20s} max_rel_err={results[check.name]:.3e} "
                   f"({time.perf_counter() - t0:.2f}s)")
    return results
