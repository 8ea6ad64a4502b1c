"""Label-free trigger inversion for image encoders.

A trigger is a retention ``mask`` (``H x W``, 1 keeps the pixel, 0 replaces
it) and a ``pattern`` (``H x W x C``).  Inversion searches for the smallest
trigger footprint ``sum(1 - mask)`` such that every image in a shadow batch,
once stamped, embeds to nearly the same direction::

    minimize  ||1 - m||_1   subject to   L(m, t) < beta

with ``L`` the negated mean pairwise cosine over the stamped batch.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import DataError, EpochSampler, ShadowDataset, check_batch
from .encoders import EncoderHandle

log = logging.getLogger(__name__)


class InversionError(RuntimeError):
    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg if step is None else f"{msg} at iteration {step}")
        self.step = step


class DegenerateEmbedding(InversionError):
    pass


def stamp(batch, mask, pattern):
    """Blend ``pattern`` into every image: ``mask * x + (1 - mask) * pattern``.

    Works on numpy arrays or torch tensors (differentiably).  ``batch`` is
    ``(N, H, W, C)``, ``mask`` is ``(H, W)`` and broadcast over channels.
    """
    if isinstance(batch, torch.Tensor):
        if batch.ndim != 4 or tuple(mask.shape) != tuple(batch.shape[1:3]) \
                or tuple(pattern.shape) != tuple(batch.shape[1:]):
            raise DataError(
                f"mask {tuple(mask.shape)} / pattern {tuple(pattern.shape)} "
                f"do not match batch {tuple(batch.shape)}")
        m = mask.unsqueeze(-1)
        return m * batch + (1 - m) * pattern
    from .data import stamp_numpy

    return stamp_numpy(batch, mask, pattern)


def _pairwise_mean_cos(z: torch.Tensor) -> torch.Tensor:
    norms = z.norm(dim=1)
    if bool((norms <= 1e-12).any()):
        raise DegenerateEmbedding("degenerate embedding (zero norm)")
    u = z / norms.unsqueeze(1)
    # (sum_p u_p) . (sum_q u_q) == sum_{p,q} cos(z_p, z_q)
    s = u.sum(dim=0)
    return (s @ s) / (z.shape[0] ** 2)


def similarity_loss(embeddings: torch.Tensor) -> torch.Tensor:
    """``-(1/N^2) sum_{p,q} cos(e_p, e_q)`` with the diagonal included."""
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise InversionError("similarity loss needs a batch of at least 2 embeddings")
    return -_pairwise_mean_cos(embeddings)


def batch_similarity_loss(encoder: EncoderHandle, batch, mask, pattern) -> float:
    """Similarity loss of ``batch`` stamped with ``(mask, pattern)``."""
    dtype = _dtype(encoder)
    x = torch.tensor(check_batch(batch, encoder.input_shape), dtype=dtype)
    m = torch.as_tensor(np.asarray(mask), dtype=dtype)
    t = torch.as_tensor(np.asarray(pattern), dtype=dtype)
    with torch.no_grad():
        return float(similarity_loss(encoder.forward(stamp(x, m, t))))


def _dtype(encoder: EncoderHandle) -> torch.dtype:
    return next(iter(encoder.module.parameters()), torch.empty(0)).dtype


def squash(logits: torch.Tensor) -> torch.Tensor:
    return (torch.tanh(logits) + 1) / 2


@dataclass(frozen=True)
class InversionConfig:
    beta: float = -0.99
    batch: int = 128
    max_iters: int = 1000
    lr: float = 0.1
    lambda_init: float = 1e-3
    lambda_factor: float = 1.5
    lambda_patience: int = 5
    lambda_min: float = 1e-5
    lambda_max: float = 1e4
    stop_window: int = 50
    stop_tol: float = 1e-3
    init_std: float = 0.1
    restarts: int = 1
    restart_init_std: float | None = None   # logit spread for restarts after the first
    seed: int = 0

    def __post_init__(self):
        if not -1.0 < self.beta <= 0.0:
            raise ValueError(f"beta must lie in (-1, 0], got {self.beta}")
        if self.batch < 2:
            raise ValueError("inversion batch must be >= 2")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.init_std < 0 or (self.restart_init_std is not None and self.restart_init_std < 0):
            raise ValueError("init spreads must be >= 0")


@dataclass
class InversionResult:
    mask: np.ndarray      # retention mask (H, W), 1 keeps the pixel
    pattern: np.ndarray   # (H, W, C)
    final_loss: float
    l1_norm: float        # trigger footprint: sum(1 - mask)
    pl1: float
    converged: bool
    iterations: int
    wall_time: float
    trace: list[dict] = field(default_factory=list, repr=False)

    @property
    def opacity(self) -> np.ndarray:
        """Per-pixel trigger opacity ``1 - mask``."""
        return 1.0 - self.mask

    def to_dict(self, with_arrays: bool = False) -> dict:
        d = {"final_loss": self.final_loss, "l1_norm": self.l1_norm, "pl1": self.pl1,
             "converged": self.converged, "iterations": self.iterations,
             "wall_time": self.wall_time}
        if with_arrays:
            d["mask"] = self.mask.tolist()
            d["pattern"] = self.pattern.tolist()
        return d


def invert_trigger(encoder: EncoderHandle, shadow: ShadowDataset | np.ndarray,
                   config: InversionConfig = InversionConfig(), keep_trace: bool = False) -> InversionResult:
    """Search for the smallest trigger that collapses stamped shadow embeddings.

    The constraint is handled with an adaptive penalty: the objective is
    ``L + lam * ||1 - m||_1``; ``lam`` grows by ``lambda_factor`` after
    ``lambda_patience`` consecutive feasible steps and shrinks after as many
    infeasible ones.  The returned trigger is the feasible iterate with the
    smallest footprint (or, if none was feasible, the iterate with the lowest
    loss, with ``converged=False``).  With ``restarts > 1`` the search is
    repeated from fresh initializations (drawn with ``restart_init_std`` if
    set, so later starts land in different basins) and the overall best is kept.
    """
    from .detection import pl1_norm

    images = shadow.images if isinstance(shadow, ShadowDataset) else check_batch(shadow)
    if tuple(images.shape[1:]) != tuple(encoder.input_shape):
        raise DataError(f"shadow images {images.shape[1:]} do not match encoder input {encoder.input_shape}")
    if len(images) < 2:
        raise DataError("inversion needs at least 2 shadow images")
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(config.seed)
    sampler = EpochSampler(len(images), config.batch, np.random.default_rng(config.seed))
    dtype = _dtype(encoder)
    data = torch.tensor(images, dtype=dtype)
    encoder.module.eval()

    best = fallback = None
    trace: list[dict] = []
    total = 0
    for restart in range(config.restarts):
        b, f, iters = _search(encoder, data, sampler, gen, config, trace if keep_trace else None, restart)
        total += iters
        if b is not None and (best is None or b[3] < best[3]):
            best = b
        if fallback is None or f[2] < fallback[2]:
            fallback = f

    chosen = best if best is not None else fallback
    mask = chosen[0].numpy().astype(np.float32)
    pattern = chosen[1].numpy().astype(np.float32)
    l1_norm = float(np.abs(1.0 - mask.astype(np.float64)).sum())
    result = InversionResult(
        mask=mask, pattern=pattern, final_loss=chosen[2], l1_norm=l1_norm,
        pl1=pl1_norm(1.0 - mask, encoder.input_shape), converged=best is not None,
        iterations=total, wall_time=time.perf_counter() - start, trace=trace)
    log.info("inversion: l1=%.2f pl1=%.4f loss=%.4f converged=%s iters=%d (%.1fs)",
             result.l1_norm, result.pl1, result.final_loss, result.converged, total, result.wall_time)
    return result


def _search(encoder, data, sampler, gen, config, trace, restart):
    h, w, c = encoder.input_shape
    dtype = data.dtype
    std = config.init_std
    if restart > 0 and config.restart_init_std is not None:
        std = config.restart_init_std
    mask_logits = (torch.randn(h, w, generator=gen, dtype=dtype) * std).requires_grad_(True)
    pattern_logits = (torch.randn(h, w, c, generator=gen, dtype=dtype) * std).requires_grad_(True)
    opt = torch.optim.Adam([mask_logits, pattern_logits], lr=config.lr, betas=(0.5, 0.9))

    lam = config.lambda_init
    up = down = 0
    best_l1 = np.inf
    best = None            # (mask, pattern, loss, l1) of the smallest feasible iterate
    fallback = None        # lowest-loss iterate, used if nothing is feasible
    history: list[float] = []
    it = 0
    for it in range(1, config.max_iters + 1):
        x = data[sampler.next()]
        m = squash(mask_logits)
        t = squash(pattern_logits)
        z = encoder.forward(stamp(x, m, t))
        loss = similarity_loss(z)
        l1 = (1 - m).sum()
        objective = loss + lam * l1
        if not (torch.isfinite(objective) and torch.isfinite(loss)):
            raise InversionError("non-finite inversion loss", it)

        loss_v, l1_v = loss.item(), l1.item()
        feasible = loss_v < config.beta
        if feasible and l1_v < best_l1:
            best_l1 = l1_v
            best = (m.detach().clone(), t.detach().clone(), loss_v, l1_v)
        if fallback is None or loss_v < fallback[2]:
            fallback = (m.detach().clone(), t.detach().clone(), loss_v, l1_v)
        if trace is not None:
            trace.append({"restart": restart, "iter": it, "loss": loss_v, "l1": l1_v,
                          "lambda": lam, "feasible": feasible})

        opt.zero_grad()
        objective.backward()
        if not (torch.isfinite(mask_logits.grad).all() and torch.isfinite(pattern_logits.grad).all()):
            raise InversionError("non-finite inversion gradient", it)
        opt.step()

        if feasible:
            up, down = up + 1, 0
        else:
            up, down = 0, down + 1
        if up >= config.lambda_patience:
            lam, up = min(lam * config.lambda_factor, config.lambda_max), 0
        elif down >= config.lambda_patience:
            lam, down = max(lam / config.lambda_factor, config.lambda_min), 0

        history.append(best_l1)
        if feasible and len(history) > config.stop_window:
            ref = history[-config.stop_window - 1]
            if np.isfinite(ref) and ref - best_l1 <= config.stop_tol * ref:
                break
    return best, fallback, it


# --------------------------------------------------------------------------
# export

def export_trigger(result: InversionResult, directory, stem: str = "trigger") -> dict[str, Path]:
    """Write mask/pattern PNGs and an exact ``.npz`` dump.

    The mask image shows opacity: ``round(255 * (1 - mask))``, so trigger
    pixels render bright.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"mask": directory / f"{stem}_mask.png",
             "pattern": directory / f"{stem}_pattern.png",
             "raw": directory / f"{stem}.npz"}
    Image.fromarray(np.round(255 * (1.0 - result.mask)).astype(np.uint8), mode="L").save(paths["mask"])
    pat = np.round(255 * result.pattern).astype(np.uint8)
    Image.fromarray(pat[..., 0] if pat.shape[-1] == 1 else pat).save(paths["pattern"])
    np.savez(paths["raw"], mask=result.mask, pattern=result.pattern,
             meta=np.frombuffer(json.dumps(result.to_dict()).encode(), dtype=np.uint8))
    return paths


def load_trigger(path) -> InversionResult:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        return InversionResult(mask=z["mask"], pattern=z["pattern"], **meta)

