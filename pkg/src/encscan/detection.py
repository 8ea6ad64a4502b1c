"""Verdicts from inverted triggers: the proportionate L^n norm and threshold rule."""

from __future__ import annotations

import json
import platform
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import __version__
from .data import DataError, ShadowDataset
from .encoders import EncoderHandle
from .inversion import InversionConfig, InversionResult, invert_trigger

REPORT_SCHEMA = "encscan.scan-report/v1"
DEFAULT_TAU = 0.1


def pl1_norm(opacity: np.ndarray, input_shape: Sequence[int], order: float = 1) -> float:
    """Trigger size relative to the largest possible input.

    ``opacity`` is the ``(H, W)`` trigger opacity map (``1 - mask``).  The
    reference is the all-ones image of shape ``(H, W, C)``, whose L^n norm is
    ``(H*W*C)**(1/n)``.
    """
    opacity = np.asarray(opacity, dtype=np.float64)
    h, w, c = input_shape
    if opacity.shape != (h, w):
        raise DataError(f"mask shape {opacity.shape} does not match input {(h, w)}")
    if order <= 0:
        raise ValueError("norm order must be positive")
    if order == 1:
        return float(np.abs(opacity).sum() / (h * w * c))
    return float((np.abs(opacity) ** order).sum() ** (1 / order) / (h * w * c) ** (1 / order))


def is_trojaned(pl1: float, tau: float = DEFAULT_TAU) -> bool:
    """Step function: flagged iff ``pl1 < tau`` (strict)."""
    return bool(pl1 < tau)


@dataclass(frozen=True)
class ScanReport:
    encoder_id: str
    pl1: float
    l1_norm: float
    tau: float
    trojaned: bool
    converged: bool
    beta: float
    shadow_source: str
    shadow_size: int
    final_loss: float
    iterations: int
    wall_time: float
    seed: int
    tool_version: str = __version__
    schema: str = REPORT_SCHEMA

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScanReport":
        d = json.loads(text)
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        return cls(**d)

    def rescored(self, tau: float) -> "ScanReport":
        d = asdict(self)
        d.update(tau=tau, trojaned=is_trojaned(self.pl1, tau))
        return ScanReport(**d)

    def without_timing(self) -> dict:
        d = asdict(self)
        d.pop("wall_time")
        return d


def report_from_result(encoder_id: str, result: InversionResult, shadow: ShadowDataset,
                       config: InversionConfig, tau: float = DEFAULT_TAU) -> ScanReport:
    return ScanReport(
        encoder_id=encoder_id, pl1=result.pl1, l1_norm=result.l1_norm, tau=tau,
        trojaned=is_trojaned(result.pl1, tau), converged=result.converged, beta=config.beta,
        shadow_source=shadow.source, shadow_size=len(shadow), final_loss=result.final_loss,
        iterations=result.iterations, wall_time=result.wall_time, seed=config.seed)


def detect(encoder: EncoderHandle, shadow: ShadowDataset, config: InversionConfig = InversionConfig(),
           tau: float = DEFAULT_TAU, encoder_id: str | None = None) -> tuple[ScanReport, InversionResult]:
    """Invert a trigger for ``encoder`` and apply the threshold rule."""
    result = invert_trigger(encoder, shadow, config)
    eid = encoder_id or encoder.provenance.get("id") or encoder.digest()[:12]
    return report_from_result(eid, result, shadow, config, tau), result


def host_info() -> dict:
    return {"python": platform.python_version(), "machine": platform.machine()}
