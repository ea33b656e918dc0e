"""Interpretability extractors: gradient magnitude maps, loss traces, receptive fields."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vittt import autodiff as ad
from vittt.backbone import Model

DIRECTIONS = ("forth", "back")


class CostGuardError(RuntimeError):
    """A finite-difference probe would need more forward passes than allowed."""


def _check_image(model: Model, image) -> np.ndarray:
    image = np.asarray(image)
    cfg = model.cfg
    expected = (*cfg.image_size, cfg.channels)
    if image.shape != expected:
        raise ValueError(f"image shape {image.shape} != {expected}")
    return image


def _directions(model: Model) -> tuple[str, ...]:
    return DIRECTIONS if model.cfg.block.bidirectional else DIRECTIONS[:1]


def _layer_index(model: Model, layer: int) -> int:
    L = model.cfg.depth
    if not -L <= layer < L:
        raise IndexError(f"layer {layer} out of range for depth {L}")
    return layer % L


def _raster(model: Model, per_token: np.ndarray, direction: str) -> np.ndarray:
    """Sequence-order values ``[..., T_seq]`` -> patch grid ``[..., H', W']`` in raster order."""
    if direction == "back":
        per_token = per_token[..., ::-1]
    cfg = model.cfg
    patches = per_token[..., cfg.patch_positions]
    return patches.reshape(*patches.shape[:-1], *cfg.grid)


# -- gradient magnitude map --------------------------------------------------


@dataclass
class GradMagnitudeMap:
    grid: np.ndarray  # [H', W'] Frobenius norms of G_t summed over heads
    per_head: np.ndarray  # [nh, H', W']
    top_mask: np.ndarray  # [H', W'] bool, the top ``top_percent`` tokens
    layer: int
    direction: str
    top_percent: float
    per_layer: np.ndarray | None = None  # [L, n_directions, H', W'] when requested

    @property
    def coefficient_of_variation(self) -> float:
        mean = float(self.grid.mean())
        return float(self.grid.std() / mean) if mean > 0 else 0.0


def top_mask(values: np.ndarray, top_percent: float) -> np.ndarray:
    """Boolean mask of the ``ceil(top_percent% * n)`` largest entries (ties broken by position)."""
    if not 0 <= top_percent <= 100:
        raise ValueError("top_percent must lie in [0, 100]")
    flat = values.ravel()
    k = math.ceil(flat.size * top_percent / 100)
    mask = np.zeros(flat.size, dtype=bool)
    if k:
        mask[np.argsort(-flat, kind="stable")[:k]] = True
    return mask.reshape(values.shape)


def _run_with_sinks(model: Model, image):
    sinks = model.new_sinks()
    model.forward(image[None], sinks=sinks)
    return sinks


def gmm_extract(model: Model, image, layer: int = -1, direction: str = "forth",
                top_percent: float = 30.0, per_layer: bool = False) -> GradMagnitudeMap:
    """Per-token ``||G_t||_F`` on the patch grid for one layer and scan direction.

    Back-direction values are mapped back to raster order. Class tokens are
    dropped.
    """
    image = _check_image(model, image)
    if direction not in _directions(model):
        raise ValueError(f"direction must be one of {_directions(model)}")
    li = _layer_index(model, layer)
    sinks = _run_with_sinks(model, image)

    def grid_for(i, d):
        norms = getattr(sinks[i], d).grad_norms[0]  # [nh, T_seq]
        return _raster(model, norms, d)

    per_head = grid_for(li, direction)
    grid = per_head.sum(axis=0)
    stack = None
    if per_layer:
        stack = np.stack([np.stack([grid_for(i, d).sum(axis=0) for d in _directions(model)])
                          for i in range(model.cfg.depth)])
    return GradMagnitudeMap(grid, per_head, top_mask(grid, top_percent), li, direction, top_percent, stack)


# -- reconstruction-loss trace -----------------------------------------------


@dataclass
class ReconTrace:
    curves: dict[tuple[int, str], np.ndarray]  # (layer, direction) -> [n_minibatches, nh]

    def rows(self) -> list[tuple[int, str, int, int, float]]:
        out = []
        for (layer, direction), curve in sorted(self.curves.items()):
            for mb, per_head in enumerate(curve):
                for h, loss in enumerate(per_head):
                    out.append((layer, direction, mb, h, float(loss)))
        return out

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "direction", "minibatch", "head", "loss"])
            for layer, direction, mb, h, loss in self.rows():
                w.writerow([layer, direction, mb, h, repr(loss)])
        return path


def recon_trace(model: Model, image) -> ReconTrace:
    """Mean inner reconstruction loss per mini-batch, for every layer and direction."""
    image = _check_image(model, image)
    res = model.forward(image[None])
    curves = {}
    for i, layer_traces in enumerate(res.traces):
        for d, trace in layer_traces.items():
            curves[(i, d)] = np.asarray(trace)[0]
    return ReconTrace(curves)


# -- effective receptive field -----------------------------------------------


@dataclass
class ErfMap:
    grid: np.ndarray  # [H, W], max-normalized
    raw: np.ndarray  # [H, W] before normalization
    probe: str
    token: int


def _normalize(raw: np.ndarray) -> np.ndarray:
    peak = float(raw.max())
    return raw / peak if peak > 0 else raw.copy()


def default_probe_image(model: Model, seed: int = 0) -> np.ndarray:
    cfg = model.cfg
    return np.random.default_rng(seed).standard_normal((*cfg.image_size, cfg.channels))


def finite_diff_evals(cfg) -> int:
    """Forward passes a central-difference ERF needs for one image of ``cfg``."""
    return 2 * cfg.image_size[0] * cfg.image_size[1] * cfg.channels


def _probe_value(model: Model, image) -> float:
    y = np.asarray(model.forward(np.asarray(image)[None]).y)
    return float(y[0, model.center_token].sum())


def erf_compute(model: Model, image=None, probe: str = "autodiff", fd_step: float = 1e-5,
                max_fd_evals: int = 4096, seed: int = 0) -> ErfMap:
    """Sensitivity of the summed features of the center output token to every pixel.

    Per-pixel magnitudes are the L2 norm over channels of the input gradient,
    normalized so the largest entry is 1. ``finite_diff`` uses central
    differences and refuses to run if that needs more than ``max_fd_evals``
    forward passes.
    """
    if image is None:
        image = default_probe_image(model, seed)
    image = _check_image(model, image).astype(float)
    token = model.center_token
    if probe == "autodiff":
        tape = ad.Tape()
        x = tape.leaf(image[None], "image")
        y = model.forward(x).y
        scalar = ad.sum(ad.getitem(y, (0, token, slice(None))))
        tape.backward(scalar)
        grad = x.grad[0]
    elif probe == "finite_diff":
        evals = finite_diff_evals(model.cfg)
        if evals > max_fd_evals:
            raise CostGuardError(f"finite-difference ERF needs {evals} forward passes (limit {max_fd_evals})")
        grad = np.zeros_like(image)
        for idx in np.ndindex(image.shape):
            plus, minus = image.copy(), image.copy()
            plus[idx] += fd_step
            minus[idx] -= fd_step
            grad[idx] = (_probe_value(model, plus) - _probe_value(model, minus)) / (2 * fd_step)
    else:
        raise ValueError("probe must be 'autodiff' or 'finite_diff'")
    raw = np.sqrt((grad**2).sum(axis=-1))
    return ErfMap(_normalize(raw), raw, probe, token)


# -- export ------------------------------------------------------------------


def write_grid_csv(grid: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(grid):
            w.writerow([repr(float(v)) for v in row])
    return path


def read_grid_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_pgm(grid: np.ndarray, path: str | Path) -> Path:
    """Binary (P5) 8-bit graymap scaled so the maximum maps to 255."""
    grid = np.asarray(grid, dtype=float)
    peak = grid.max() if grid.size else 0.0
    pixels = np.zeros(grid.shape, dtype=np.uint8) if peak <= 0 else np.round(
        np.clip(grid / peak, 0, 1) * 255).astype(np.uint8)
    h, w = grid.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def gmm_filename(stem: str, layer: int, direction: str, ext: str = "csv") -> str:
    return f"{stem}_gmm_L{layer}_{direction}.{ext}"


def export_gmm(gmm: GradMagnitudeMap, out_dir: str | Path, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        write_grid_csv(gmm.grid, out_dir / gmm_filename(stem, gmm.layer, gmm.direction, "csv")),
        write_pgm(gmm.grid, out_dir / gmm_filename(stem, gmm.layer, gmm.direction, "pgm")),
        write_grid_csv(gmm.top_mask.astype(float), out_dir / f"{stem}_gmm_L{gmm.layer}_{gmm.direction}_top.csv"),
    ]


def export_erf(erf: ErfMap, out_dir: str | Path, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [write_grid_csv(erf.grid, out_dir / f"{stem}_erf_{erf.probe}.csv"),
            write_pgm(erf.grid, out_dir / f"{stem}_erf_{erf.probe}.pgm")]
