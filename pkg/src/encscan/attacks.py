"""Forging backdoored encoders (image-target patch attack) and measuring them."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DataError, LabeledSet, PatchTrigger, ShadowDataset, check_batch, render_trigger
from .encoders import (EncoderHandle, LinearProbe, TrainingDiverged, _freeze, cosine_matrix, embed,
                       train_linear_probe)
from .inversion import similarity_loss, stamp

log = logging.getLogger(__name__)


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    """How to plant a backdoor.

    ``alpha`` weights the adaptive term that pushes triggered embeddings
    apart; ``alpha == 0`` is the plain attack.
    """

    target_image: np.ndarray = field(repr=False)
    trigger: PatchTrigger = PatchTrigger()
    w_utility: float = 1.0
    w_target: float = 1.0
    w_backdoor: float = 1.0
    alpha: float = 0.0
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    target_label: int | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise AttackError(f"alpha must be >= 0, got {self.alpha}")
        if min(self.w_utility, self.w_target, self.w_backdoor) < 0:
            raise AttackError("loss weights must be >= 0")
        target = np.asarray(self.target_image, dtype=np.float32)
        if target.ndim != 3:
            raise AttackError("target image must be a single (H, W, C) image")
        check_batch(target[None])
        object.__setattr__(self, "target_image", target)

    def summary(self) -> dict:
        return {"trigger": self.trigger.to_dict(), "alpha": self.alpha,
                "weights": [self.w_utility, self.w_target, self.w_backdoor],
                "epochs": self.epochs, "batch": self.batch, "lr": self.lr, "seed": self.seed,
                "target_label": self.target_label}

    def with_seed(self, seed: int) -> "AttackSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class ForgeTerms:
    utility: torch.Tensor
    target: torch.Tensor
    backdoor: torch.Tensor
    similarity: torch.Tensor  # similarity loss of the triggered batch


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a, b, dim=-1)


def attack_loss(terms: ForgeTerms, spec: AttackSpec) -> torch.Tensor:
    """Plain objective: negated weighted sum of the three similarity terms."""
    return -(spec.w_utility * terms.utility + spec.w_target * terms.target
             + spec.w_backdoor * terms.backdoor)


def adaptive_loss(terms: ForgeTerms, spec: AttackSpec) -> torch.Tensor:
    """``attack_loss - alpha * L_sim`` where ``L_sim`` is the triggered-batch similarity loss."""
    return attack_loss(terms, spec) - spec.alpha * terms.similarity


def _frozen_bn(module: nn.Module) -> None:
    # batch statistics stay those of the clean encoder
    module.train()
    for m in module.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)


@dataclass
class ForgeResult:
    encoder: EncoderHandle
    losses: list[float]


def forge(clean: EncoderHandle, spec: AttackSpec, shadow: ShadowDataset,
          objective: str = "adaptive") -> ForgeResult:
    """Fine-tune a copy of ``clean`` into a backdoored encoder.

    ``objective`` selects :func:`adaptive_loss` or :func:`attack_loss`; the two
    coincide when ``spec.alpha == 0``.
    """
    loss_fn = {"adaptive": adaptive_loss, "plain": attack_loss}[objective]
    if objective == "plain" and spec.alpha:
        raise AttackError("the plain objective has no adaptive term; use alpha=0")
    shape = tuple(clean.input_shape)
    if tuple(spec.target_image.shape) != shape:
        raise DataError(f"target image {spec.target_image.shape} does not match encoder input {shape}")
    if tuple(shadow.shape) != shape:
        raise DataError(f"shadow images {shadow.shape} do not match encoder input {shape}")
    mask, pattern = render_trigger(spec.trigger, shape)
    mask_t, pattern_t = torch.from_numpy(mask), torch.from_numpy(pattern)

    torch.manual_seed(spec.seed)
    net = copy.deepcopy(clean.module)
    for p in net.parameters():
        p.requires_grad_(True)
    _frozen_bn(net)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=spec.lr)
    gen = torch.Generator().manual_seed(spec.seed)

    data = torch.from_numpy(np.array(shadow.images))
    target = torch.from_numpy(spec.target_image[None].copy())
    to_nchw = lambda x: x.permute(0, 3, 1, 2)  # noqa: E731
    with torch.no_grad():
        clean.module.eval()
        ref_target = clean.module(to_nchw(target))

    batch = min(spec.batch, len(data))
    steps = max(len(data) // batch, 1)
    losses: list[float] = []
    for epoch in range(spec.epochs):
        order = torch.randperm(len(data), generator=gen)
        for b in range(steps):
            x = data[order[b * batch:(b + 1) * batch]]
            with torch.no_grad():
                ref_x = clean.module(to_nchw(x))
            xe = stamp(x, mask_t, pattern_t)
            f_x = net(to_nchw(x))
            f_xe = net(to_nchw(xe))
            f_r = net(to_nchw(target))
            terms = ForgeTerms(
                utility=_cos(f_x, ref_x).mean(),
                target=_cos(f_r, ref_target).mean(),
                backdoor=_cos(f_xe, f_r).mean(),
                similarity=similarity_loss(f_xe),
            )
            loss = loss_fn(terms, spec)
            if not torch.isfinite(loss):
                raise TrainingDiverged("attack", len(losses))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        log.debug("forge epoch %d loss %.4f", epoch, losses[-1])

    prov = {**clean.provenance, "kind": "trojaned", "attack": spec.summary(),
            "clean_digest": clean.digest()}
    handle = EncoderHandle(clean.arch, clean.input_shape, clean.embedding_dim, _freeze(net), prov)
    return ForgeResult(handle, losses)


def trojan_encoder(clean: EncoderHandle, spec: AttackSpec, shadow: ShadowDataset) -> EncoderHandle:
    """Backdoor a copy of ``clean`` so triggered inputs embed like ``spec.target_image``."""
    return forge(clean, spec, shadow).encoder


# --------------------------------------------------------------------------
# measurement

@dataclass(frozen=True)
class AttackReport:
    asr: float
    clean_accuracy: float
    target_similarity: float
    utility_similarity: float
    clean_encoder_accuracy: float | None = None
    alpha: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def attack_success_rate(probe: LinearProbe, encoder: EncoderHandle, data: LabeledSet,
                        trigger: PatchTrigger, target_label: int) -> float:
    """Fraction of non-target images classified as ``target_label`` once stamped."""
    keep = data.labels != target_label
    if not keep.any():
        raise AttackError("no non-target images to measure ASR on")
    mask, pattern = render_trigger(trigger, encoder.input_shape)
    stamped = stamp(data.images[keep], mask, pattern)
    return float(np.mean(probe.predict(encoder, stamped) == target_label))


def attack_report(clean: EncoderHandle, trojaned: EncoderHandle, spec: AttackSpec,
                  probe_data: LabeledSet, target_label: int,
                  test_data: LabeledSet | None = None) -> AttackReport:
    """Downstream ASR and accuracy of a linear probe trained on the trojaned encoder."""
    if target_label not in set(probe_data.labels.tolist()):
        raise AttackError(f"target label {target_label} is not among the probe classes")
    if test_data is None:
        probe_data, test_data = probe_data.split(0.7)
    probe = train_linear_probe(trojaned, probe_data)
    acc = probe.accuracy(trojaned, test_data)
    asr = attack_success_rate(probe, trojaned, test_data, spec.trigger, target_label)
    clean_probe = train_linear_probe(clean, probe_data)
    clean_acc = clean_probe.accuracy(clean, test_data)

    mask, pattern = render_trigger(spec.trigger, trojaned.input_shape)
    stamped = stamp(test_data.images, mask, pattern)
    e_trig = embed(trojaned, stamped)
    e_target = embed(trojaned, spec.target_image[None])
    target_sim = float(cosine_matrix(e_trig, e_target).mean())
    util = float(np.mean(np.sum(_unit(embed(clean, test_data.images)) * _unit(embed(trojaned, test_data.images)), 1)))
    return AttackReport(asr=asr, clean_accuracy=acc, target_similarity=target_sim,
                        utility_similarity=util, clean_encoder_accuracy=clean_acc, alpha=spec.alpha)


def _unit(e: np.ndarray) -> np.ndarray:
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def _mean_offdiag_cos(e: np.ndarray) -> float:
    c = cosine_matrix(e)
    n = len(e)
    return float((c.sum() - np.trace(c)) / (n * n - n))


def observation_table(clean: EncoderHandle, trojaned: EncoderHandle, samples: np.ndarray,
                      trigger: PatchTrigger) -> dict[str, dict[str, float]]:
    """Mean pairwise cosine (off-diagonal) for each encoder, with and without the trigger."""
    samples = check_batch(samples, clean.input_shape)
    if len(samples) < 2:
        raise DataError("observation table needs at least 2 samples")
    mask, pattern = render_trigger(trigger, clean.input_shape)
    stamped = stamp(samples, mask, pattern)
    table = {}
    for name, enc in (("clean", clean), ("trojaned", trojaned)):
        table[name] = {"without_trigger": _mean_offdiag_cos(embed(enc, samples)),
                       "with_trigger": _mean_offdiag_cos(embed(enc, stamped))}
    return table


def pick_target(data: LabeledSet, label: int, encoder: EncoderHandle | None = None) -> np.ndarray:
    """A representative image of class ``label`` to use as the attack target.

    With an encoder, the image a linear probe on that encoder assigns to
    ``label`` with the widest margin over the runner-up class; otherwise the
    first image of the class.
    """
    idx = np.flatnonzero(data.labels == label)
    if len(idx) == 0:
        raise AttackError(f"no image with label {label}")
    if encoder is None:
        return np.array(data.images[idx[0]])
    probe = train_linear_probe(encoder, data)
    scores = probe.scores(embed(encoder, data.images[idx]))
    col = int(np.flatnonzero(probe.classes == label)[0])
    others = np.delete(scores, col, axis=1)
    margin = scores[:, col] - others.max(axis=1)
    return np.array(data.images[idx[int(np.argmax(margin))]])
