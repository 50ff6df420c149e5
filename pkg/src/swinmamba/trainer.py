"""Adam training loop, evaluation and checkpoint persistence."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .config import parse_value
from .data import Sample, augment
from .metrics import MetricsReport
from .network import ModelConfig, SegmentationModel, build_model, segmentation_loss
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place. Refuses non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {state.t + 1}; step refused")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    eval_interval: int = 5
    crop: int | None = None
    dtype: str = "float32"
    checkpoint_path: str | None = None
    log_path: str | None = None


@dataclass
class TrainResult:
    model: SegmentationModel
    losses: list[float]
    evals: list[tuple[int, dict]]
    best_cldice: float
    adam: AdamState


def _dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def predict_mask(model, image: np.ndarray) -> np.ndarray:
    with T.no_grad():
        logits = model(Tensor(image[None], dtype=_model_dtype(model)))
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (logits.reshape(image.shape) > 0).astype(np.uint8)


def _model_dtype(model):
    params = getattr(model, "params", None)
    if params:
        return next(iter(params.values())).dtype
    return T.get_default_dtype()


def evaluate(model, dataset: list[Sample]) -> MetricsReport:
    """Threshold sigmoid(logits) at 0.5 and score every sample."""
    if not dataset:
        raise ValueError("evaluation set is empty")
    report = MetricsReport()
    for smp in dataset:
        report.add(predict_mask(model, smp.image), smp.mask, smp.id)
    return report


# ---------------------------------------------------------------- checkpoints

def _config_block(model: SegmentationModel, meta: dict | None) -> dict:
    out = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    out.update(meta or {})
    return out


def model_config_from_block(block: dict[str, str]) -> ModelConfig:
    defaults = ModelConfig().to_dict()
    vals = {}
    for k, text in block.items():
        if k.startswith("model."):
            key = k[len("model."):]
            if key not in defaults:
                raise ckpt.CheckpointError(f"unknown model config key {key!r} in checkpoint")
            vals[key] = parse_value(key, text, defaults[key])
    return ModelConfig(**vals)


def save_checkpoint(model: SegmentationModel, path, adam: AdamState | None = None,
                    meta: dict | None = None) -> None:
    tensors = {name: p.data for name, p in model.params.items()}
    meta = dict(meta or {})
    if adam is not None:
        for name in model.params:
            if name in adam.m:
                tensors[f"adam.m/{name}"] = adam.m[name]
                tensors[f"adam.v/{name}"] = adam.v[name]
        meta.update({"adam.t": adam.t, "adam.lr": adam.lr, "adam.beta1": adam.beta1,
                     "adam.beta2": adam.beta2, "adam.eps": adam.eps})
    ckpt.write(path, tensors, _config_block(model, meta))


def _install(model: SegmentationModel, tensors: dict[str, np.ndarray]) -> None:
    names = [n for n in tensors if not n.startswith("adam.")]
    missing = sorted(set(model.params) - set(names))
    unexpected = sorted(set(names) - set(model.params))
    mismatched = sorted(n for n in names if n in model.params and model.params[n].shape != tensors[n].shape)
    if missing or unexpected or mismatched:
        parts = []
        if missing:
            parts.append(f"missing tensors: {', '.join(missing)}")
        if unexpected:
            parts.append(f"unexpected tensors: {', '.join(unexpected)}")
        if mismatched:
            parts.append("shape mismatch: " + ", ".join(
                f"{n} {tensors[n].shape} vs {model.params[n].shape}" for n in mismatched))
        raise ckpt.CheckpointError("checkpoint does not match model config; " + "; ".join(parts))
    for n in names:
        p = model.params[n]
        p.data = tensors[n].copy()
        p.grad = np.zeros_like(p.data)


def load_checkpoint(path, config: ModelConfig | None = None) -> SegmentationModel:
    """Rebuild the model from the stored config (or ``config``) and install weights."""
    model, _, _ = load_training_state(path, config)
    return model


def load_training_state(path, config: ModelConfig | None = None):
    tensors, block = ckpt.read(path)
    mcfg = config or model_config_from_block(block)
    dtypes = {t.dtype for n, t in tensors.items() if not n.startswith("adam.")}
    with T.default_dtype(dtypes.pop() if len(dtypes) == 1 else np.float64):
        model = build_model(mcfg)
    _install(model, tensors)
    adam = None
    if "adam.t" in block:
        adam = AdamState(lr=float(block["adam.lr"]), beta1=float(block["adam.beta1"]),
                         beta2=float(block["adam.beta2"]), eps=float(block["adam.eps"]),
                         t=int(block["adam.t"]))
        for n in model.params:
            if f"adam.m/{n}" in tensors:
                adam.m[n] = tensors[f"adam.m/{n}"].copy()
                adam.v[n] = tensors[f"adam.v/{n}"].copy()
    meta = {k: v for k, v in block.items() if not k.startswith("model.")}
    return model, adam, meta


# ---------------------------------------------------------------- training

class _Log:
    def __init__(self, path):
        self.path = Path(path) if path else None

    def write(self, line: str) -> None:
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def train(config: TrainConfig, model_config: ModelConfig, train_set: list[Sample],
          test_set: list[Sample] | None = None, resume: str | None = None) -> TrainResult:
    """Batch-size-1 Adam on the segmentation loss with periodic evaluation.

    The epoch shuffle and every augmentation draw are derived from
    (seed, epoch, index), so resuming from an end-of-epoch checkpoint replays
    exactly the same steps as an uninterrupted run. When ``checkpoint_path`` is
    set, the best-clDice model goes there and the latest state to ``<path>.last``.
    """
    if not train_set:
        raise ValueError("training set is empty")
    dtype = _dtype(config.dtype)
    with T.default_dtype(dtype):
        start_epoch, best = 0, -1.0
        if resume:
            model, adam, meta = load_training_state(resume)
            if adam is None:
                raise ValueError(f"{resume} holds no optimizer state")
            start_epoch = int(meta.get("train.epoch", "0"))
            best = float(meta.get("train.best_cldice", "-1.0"))
        else:
            model = build_model(model_config)
            adam = AdamState(lr=config.lr)
        out_log = _Log(config.log_path)
        losses: list[float] = []
        evals: list[tuple[int, dict]] = []
        n = len(train_set)
        bs = max(1, config.batch_size)
        for epoch in range(start_epoch, config.epochs):
            order = epoch_order(config.seed, epoch, n)
            for start in range(0, n, bs):
                batch = order[start:start + bs]
                model.zero_grad()
                total = 0.0
                try:
                    for idx in batch:
                        smp = augment(train_set[idx], _sample_seed(config.seed, epoch, int(idx)), config.crop)
                        loss = segmentation_loss(model(Tensor(smp.image[None])), smp.mask[None])
                        if not np.isfinite(loss.item()):
                            raise NonFiniteError("non-finite loss")
                        (loss * (1.0 / len(batch))).backward()
                        total += loss.item() / len(batch)
                    grads = {k: p.grad for k, p in model.params.items()}
                    adam_step(model.params, grads, adam)
                except NonFiniteError as e:
                    raise NonFiniteError(f"loss diverged at step {adam.t + 1}: {e}") from None
                losses.append(total)
                out_log.write(f"step {adam.t} {total!r}")
            done = epoch + 1
            if test_set and (done % max(1, config.eval_interval) == 0 or done == config.epochs):
                means = evaluate(model, test_set).means()
                evals.append((done, means))
                out_log.write(f"epoch {done} {means['dice']!r} {means['cldice']!r} {means['betti0_error']!r}")
                log.info("epoch %d dice %.4f cldice %.4f betti0 %.3f", done, means["dice"],
                         means["cldice"], means["betti0_error"])
                if means["cldice"] > best:
                    best = means["cldice"]
                    if config.checkpoint_path:
                        save_checkpoint(model, config.checkpoint_path, adam,
                                        {"train.epoch": done, "train.best_cldice": best})
            if config.checkpoint_path:
                save_checkpoint(model, str(config.checkpoint_path) + ".last", adam,
                                {"train.epoch": done, "train.best_cldice": best})
    return TrainResult(model=model, losses=losses, evals=evals, best_cldice=best, adam=adam)


def train_config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
