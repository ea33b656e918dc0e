"""Synthetic blob dataset and the supervised outer training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from vittt import autodiff as ad
from vittt import tensor as K
from vittt.backbone import ModelConfig, ModelParams, forward, init_params
from vittt.tree import iter_tensors, tree_map

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd")


class NumericAbort(RuntimeError):
    """Training hit a non-finite value; ``dump_path`` holds the diagnostic dump."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


# -- dataset -----------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # [N, H, W, C]
    labels: np.ndarray  # [N] int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx])


def blob_dataset(n: int = 200, image_size: int = 16, channels: int = 3, num_classes: int = 4,
                 seed: int = 0, noise: float = 0.1, radius: float = 2.5) -> Dataset:
    """Gaussian blobs of random color; the class decides where the blob sits.

    Class centers are spread evenly on a circle around the image center and
    jittered by one pixel per sample.
    """
    rng = np.random.default_rng(seed)
    c = (image_size - 1) / 2
    ring = image_size / 4
    angles = 2 * np.pi * np.arange(num_classes) / num_classes + np.pi / 4
    centers = np.stack([c + ring * np.sin(angles), c + ring * np.cos(angles)], axis=1)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    images = np.empty((n, image_size, image_size, channels))
    for i, y in enumerate(labels):
        cy, cx = centers[y] + rng.uniform(-1, 1, 2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        color = rng.uniform(0.3, 1.0, channels)
        images[i] = blob[..., None] * color + noise * rng.normal(size=(image_size, image_size, channels))
    return Dataset(K.asarray(images), labels.astype(np.int64))


# -- loss and gradients ------------------------------------------------------


def frozen_names(cfg: ModelConfig) -> set[str]:
    """Parameters held fixed by the outer loop (``W0`` under ``w0_mode=fixed``)."""
    if cfg.block.w0_mode != "fixed":
        return set()
    out = set()
    for i in range(cfg.depth):
        for direction in ("forth", "back"):
            out.add(f"layers.{i}.vittt.{direction}.state.W")
    return out


@dataclass
class StepResult:
    loss: float
    accuracy: float
    grads: dict[str, np.ndarray]
    traces: list[dict]


def loss_and_grads(params: ModelParams, cfg: ModelConfig, images, labels) -> StepResult:
    tape = ad.Tape()
    leaves: dict[str, ad.Var] = {}

    def to_leaf(name, arr):
        leaves[name] = tape.leaf(arr, name)
        return leaves[name]

    vparams = tree_map(to_leaf, params)
    out = forward(images, vparams, cfg)
    loss = ad.cross_entropy(out.logits, labels)
    tape.backward(loss)
    pred = ad.value(out.logits).argmax(axis=-1)
    return StepResult(
        loss=float(loss.value),
        accuracy=float((pred == labels).mean()),
        grads={name: var.grad for name, var in leaves.items()},
        traces=out.traces,
    )


def predict(params: ModelParams, cfg: ModelConfig, images, batch_size: int = 64) -> np.ndarray:
    logits = [np.asarray(forward(images[i:i + batch_size], params, cfg).logits)
              for i in range(0, len(images), batch_size)]
    return np.concatenate(logits, axis=0)


def accuracy(params: ModelParams, cfg: ModelConfig, data: Dataset) -> float:
    return evaluate(params, cfg, data)[1]


def evaluate(params: ModelParams, cfg: ModelConfig, data: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over ``data``."""
    if len(data) == 0:
        return float("nan"), float("nan")
    logits = predict(params, cfg, data.images)
    loss = float(ad.cross_entropy(logits, data.labels))
    return loss, float((logits.argmax(axis=-1) == data.labels).mean())


# -- optimizers --------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 3e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 25
    val_fraction: float = 0.0
    patience: int | None = None  # evaluations without a lower validation loss before stopping
    min_delta: float = 0.0  # decrease in validation loss that counts as an improvement
    dump_dir: str | None = None

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and eval_every >= 1 are required")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.patience is not None and self.val_fraction == 0.0:
            raise ValueError("early stopping needs a validation split (val_fraction > 0)")


class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, name: str, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Return the new value of parameter ``name`` (``self.t`` is the current step)."""
        c = self.cfg
        if c.optimizer == "sgd":
            m = self.m.get(name, np.zeros_like(p)) * c.momentum + g + c.weight_decay * p
            self.m[name] = m
            return p - c.lr * m
        b1, b2 = c.betas
        m = b1 * self.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * self.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        self.m[name], self.v[name] = m, v
        m_hat = m / (1 - b1**self.t)
        v_hat = v / (1 - b2**self.t)
        return p - c.lr * (m_hat / (np.sqrt(v_hat) + c.adam_eps) + c.weight_decay * p)


def apply_update(params: ModelParams, grads: dict[str, np.ndarray], opt: Optimizer,
                 frozen: set[str]) -> ModelParams:
    opt.t += 1

    def step(name, arr):
        if name in frozen:
            return arr
        return K.asarray(opt.update(name, arr, grads[name]))

    return tree_map(step, params)


# -- loop --------------------------------------------------------------------


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_step: int | None = None
    stopped_early: bool = False


@dataclass
class TrainResult:
    params: ModelParams
    log: TrainLog
    train_accuracy: float
    val_accuracy: float


def _trace_summary(traces: list[dict]) -> list[dict]:
    """Per layer and direction: mean loss per mini-batch averaged over batch and heads."""
    out = []
    for layer in traces:
        out.append({d: np.asarray(t).mean(axis=tuple(i for i in range(np.ndim(t)) if i != np.ndim(t) - 2)).tolist()
                    for d, t in layer.items()})
    return out


def _dump(params: ModelParams, step: int, cfg: TrainConfig, message: str) -> Path | None:
    if cfg.dump_dir is None:
        return None
    path = Path(cfg.dump_dir) / f"numeric_abort_step{step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = {
        name: {"shape": list(a.shape), "finite": bool(np.isfinite(a).all()),
               "max_abs": float(np.nanmax(np.abs(a))) if a.size else 0.0}
        for name, a in iter_tensors(params)
    }
    path.write_text(json.dumps({"step": step, "error": message, "params": summary}, indent=1))
    return path


def train_toy(data: Dataset, cfg: ModelConfig, tcfg: TrainConfig,
              params: ModelParams | None = None) -> TrainResult:
    """Cross-entropy training with minibatch sampling driven by ``tcfg.seed``.

    With a validation split and ``patience`` set, training stops once the
    validation loss has not decreased for ``patience`` evaluations, and the
    parameters with the lowest validation loss are returned. The initial
    parameters count as a candidate.
    """
    rng = np.random.default_rng(tcfg.seed)
    if params is None:
        params = init_params(cfg, seed=tcfg.seed)
    order = rng.permutation(len(data))
    n_val = int(round(len(data) * tcfg.val_fraction))
    val, train = data.subset(order[:n_val]), data.subset(order[n_val:])
    frozen = frozen_names(cfg)
    opt = Optimizer(tcfg)
    tlog = TrainLog()
    best = (evaluate(params, cfg, val)[0] if n_val else np.inf, params, 0)
    bad_evals = 0

    for step in range(1, tcfg.steps + 1):
        idx = rng.choice(len(train), size=min(tcfg.batch_size, len(train)), replace=False)
        try:
            res = loss_and_grads(params, cfg, train.images[idx], train.labels[idx])
            if not np.isfinite(res.loss):
                raise K.NonFiniteError(f"loss is {res.loss}")
            params = apply_update(params, res.grads, opt, frozen)
        except K.NonFiniteError as exc:
            path = _dump(params, step, tcfg, str(exc))
            raise NumericAbort(f"non-finite value at step {step}: {exc}", path) from exc
        entry = {"step": step, "loss": res.loss, "batch_accuracy": res.accuracy}
        tlog.steps.append(entry)

        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            ev = {"step": step, "loss": res.loss, "train_accuracy": accuracy(params, cfg, train),
                  "recon_trace": _trace_summary(res.traces)}
            if n_val:
                ev["val_loss"], ev["val_accuracy"] = evaluate(params, cfg, val)
            tlog.evals.append(ev)
            log.info("step %d loss %.4f train_acc %.3f val_acc %s", step, res.loss,
                     ev["train_accuracy"], ev.get("val_accuracy"))
            if tcfg.patience is not None:
                if ev["val_loss"] < best[0] - tcfg.min_delta:
                    best, bad_evals = (ev["val_loss"], params, step), 0
                else:
                    bad_evals += 1
                    if bad_evals >= tcfg.patience:
                        tlog.stopped_early = True
                        break

    if tcfg.patience is not None:
        params, tlog.best_step = best[1], best[2]
    return TrainResult(params, tlog, accuracy(params, cfg, train), accuracy(params, cfg, val))
