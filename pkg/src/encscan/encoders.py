"""Small convolutional image encoders.

Architectures are plain data (a list of layer dicts) so checkpoints can be
rebuilt without pickling code.  Encoders consume ``(N, H, W, C)`` batches in
``[0, 1]``; per-channel normalization is the first layer of the network.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DataError, LabeledSet, ShadowDataset, check_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "encscan-checkpoint"
CHECKPOINT_VERSION = 1


class EncoderError(RuntimeError):
    pass


class CheckpointError(EncoderError):
    pass


class TrainingDiverged(EncoderError):
    def __init__(self, what: str, step: int):
        super().__init__(f"{what}: non-finite loss at iteration {step}")
        self.step = step


def default_arch(embedding_dim: int = 128, widths: Sequence[int] = (16, 32, 64, 64),
                 pool: str = "maxpool", head: str = "gap", final_act: str = "relu") -> list[dict]:
    """Conv blocks with 2x downsampling between them, then a linear projection.

    ``head="gap"`` averages the last feature map over space first;
    ``head="flatten"`` keeps per-position weights.  ``final_act`` is the
    activation of the last block (``tanh`` bounds each position's features).
    """
    if head not in ("gap", "flatten"):
        raise EncoderError(f"unknown head {head!r}")
    if final_act not in ("relu", "tanh"):
        raise EncoderError(f"unknown activation {final_act!r}")
    layers: list[dict] = [{"op": "normalize", "mean": [0.5, 0.5, 0.5], "std": [0.25, 0.25, 0.25]}]
    for i, width in enumerate(widths):
        act = final_act if i == len(widths) - 1 else "relu"
        layers += [{"op": "conv", "out": int(width), "kernel": 3},
                   {"op": "batchnorm"},
                   {"op": act}]
        if i < len(widths) - 1:
            layers.append({"op": pool})
    if head == "gap":
        layers.append({"op": "gap"})
    layers.append({"op": "linear", "out": int(embedding_dim)})
    return layers


class _Normalize(nn.Module):
    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def build_network(arch: Sequence[dict], input_shape: Sequence[int]) -> tuple[nn.Sequential, int]:
    """Instantiate ``arch``; returns the module and its output width."""
    h, w, c = input_shape
    layers: list[nn.Module] = []
    flat = False
    for spec in arch:
        op = spec["op"]
        if op == "normalize":
            if len(spec["mean"]) != c:
                raise EncoderError("normalize layer channel count mismatch")
            layers.append(_Normalize(spec["mean"], spec["std"]))
        elif op == "conv":
            k = int(spec.get("kernel", 3))
            layers.append(nn.Conv2d(c, int(spec["out"]), k, padding=k // 2))
            c = int(spec["out"])
        elif op == "batchnorm":
            layers.append(nn.BatchNorm2d(c))
        elif op == "relu":
            layers.append(nn.ReLU())
        elif op == "tanh":
            layers.append(nn.Tanh())
        elif op in ("maxpool", "avgpool"):
            layers.append(nn.MaxPool2d(2) if op == "maxpool" else nn.AvgPool2d(2))
            h, w = h // 2, w // 2
        elif op == "gap":
            layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
            flat = True
        elif op == "linear":
            if not flat:
                layers.append(nn.Flatten())
                c, flat = c * h * w, True
            layers.append(nn.Linear(c, int(spec["out"])))
            c = int(spec["out"])
        else:
            raise EncoderError(f"unknown layer op {op!r}")
    if not flat:
        raise EncoderError("architecture must end in a flat embedding")
    return nn.Sequential(*layers), c


@dataclass(frozen=True)
class EncoderHandle:
    """A frozen encoder: architecture, weights and metadata.

    ``module`` takes NCHW tensors; use :meth:`forward` for NHWC input or
    :func:`embed` for numpy batches.
    """

    arch: tuple
    input_shape: tuple[int, int, int]
    embedding_dim: int
    module: nn.Module = field(repr=False, compare=False)
    provenance: dict = field(default_factory=dict, compare=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable embedding of an NHWC tensor."""
        return self.module(x.permute(0, 3, 1, 2))

    def digest(self) -> str:
        return weights_digest(self.module)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.module.state_dict().items()}

    def with_provenance(self, **extra) -> "EncoderHandle":
        return EncoderHandle(self.arch, self.input_shape, self.embedding_dim, self.module,
                             {**self.provenance, **extra})

    def as_float64(self) -> "EncoderHandle":
        return EncoderHandle(self.arch, self.input_shape, self.embedding_dim,
                             copy.deepcopy(self.module).double(), dict(self.provenance))


def weights_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def make_encoder(arch: Sequence[dict], input_shape: Sequence[int], seed: int = 0,
                 provenance: dict | None = None) -> EncoderHandle:
    """Randomly initialized encoder (deterministic in ``seed``)."""
    input_shape = tuple(int(v) for v in input_shape)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        module, dim = build_network(arch, input_shape)
    return EncoderHandle(_arch_tuple(arch), input_shape, dim, _freeze(module), dict(provenance or {}))


def _arch_tuple(arch) -> tuple:
    return tuple(json.loads(json.dumps(list(arch))))


def embed(encoder: EncoderHandle, batch: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Embed a ``(N, H, W, C)`` batch; returns ``(N, embedding_dim)`` float32."""
    batch = check_batch(batch, encoder.input_shape)
    out = np.empty((len(batch), encoder.embedding_dim), dtype=np.float32)
    dtype = next(encoder.module.parameters()).dtype
    encoder.module.eval()
    with torch.no_grad():
        for i in range(0, len(batch), chunk):
            x = torch.tensor(batch[i:i + chunk], dtype=dtype)
            out[i:i + chunk] = encoder.forward(x).float().numpy()
    if not np.isfinite(out).all():
        raise EncoderError("encoder produced non-finite embeddings")
    return out


def cosine_matrix(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    b = a if b is None else b / np.linalg.norm(b, axis=1, keepdims=True)
    return a @ b.T


# --------------------------------------------------------------------------
# augmentations (batched, NCHW, driven by an explicit generator)

def augment(x: torch.Tensor, gen: torch.Generator, strength: float = 1.0,
            crop_min: float = 0.35, hue: float = 0.5, noise: float = 0.0,
            erase: float = 0.0) -> torch.Tensor:
    """Random resized crop, horizontal flip, color jitter and grayscale.

    ``noise`` > 0 adds sparse impulse noise (up to that pixel fraction) and
    ``erase`` > 0 pastes a random rectangle of up to that area fraction,
    filled with noise or a flat color, on half of the views.
    """
    n = x.shape[0]

    def u(lo, hi, size=(n,)):
        return lo + (hi - lo) * torch.rand(size, generator=gen)

    area = u(crop_min, 1.0)
    log_ratio = u(math.log(3 / 4), math.log(4 / 3))
    ratio = torch.exp(log_ratio)
    sw = torch.sqrt(area * ratio).clamp(max=1.0)
    sh = torch.sqrt(area / ratio).clamp(max=1.0)
    tx = (u(-1.0, 1.0)) * (1 - sw)
    ty = (u(-1.0, 1.0)) * (1 - sh)
    flip = torch.where(torch.rand(n, generator=gen) < 0.5, -1.0, 1.0)
    theta = torch.zeros(n, 2, 3)
    theta[:, 0, 0] = sw * flip
    theta[:, 0, 2] = tx
    theta[:, 1, 1] = sh
    theta[:, 1, 2] = ty
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    x = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)

    s = 0.4 * strength
    jitter = (torch.rand(n, generator=gen) < 0.8).float().view(n, 1, 1, 1)
    bright = 1 + jitter * u(-s, s).view(n, 1, 1, 1)
    contrast = 1 + jitter * u(-s, s).view(n, 1, 1, 1)
    sat = 1 + jitter * u(-s, s).view(n, 1, 1, 1)
    x = x * bright
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    x = (x - mean) * contrast + mean
    if x.shape[1] == 3:
        gray = (0.299 * x[:, :1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])
        x = gray + (x - gray) * sat
        x = _rotate_hue(x, jitter.view(n) * u(-hue, hue))
        to_gray = (torch.rand(n, generator=gen) < 0.2).view(n, 1, 1, 1)
        gray = (0.299 * x[:, :1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])
        x = torch.where(to_gray, gray.expand_as(x), x)
    if noise > 0:
        # sparse impulse noise: a random fraction of pixels replaced by random colors
        frac = u(0.0, noise).view(n, 1, 1, 1)
        hit = torch.rand(n, 1, x.shape[2], x.shape[3], generator=gen) < frac
        x = torch.where(hit, torch.rand(x.shape, generator=gen), x)
    if erase > 0:
        x = _random_erase(x, gen, erase)
    return x.clamp(0.0, 1.0)


def _random_erase(x: torch.Tensor, gen: torch.Generator, max_area: float) -> torch.Tensor:
    n, c, h, w = x.shape

    def u(lo, hi):
        return lo + (hi - lo) * torch.rand(n, generator=gen)

    area = u(0.02, max_area) * h * w
    ratio = torch.exp(u(math.log(0.3), math.log(1 / 0.3)))
    eh = torch.sqrt(area * ratio).round().clamp(1, h)
    ew = torch.sqrt(area / ratio).round().clamp(1, w)
    top = (torch.rand(n, generator=gen) * (h - eh + 1)).floor()
    left = (torch.rand(n, generator=gen) * (w - ew + 1)).floor()
    rows = torch.arange(h).view(1, h, 1)
    cols = torch.arange(w).view(1, 1, w)
    box = ((rows >= top.view(n, 1, 1)) & (rows < (top + eh).view(n, 1, 1))
           & (cols >= left.view(n, 1, 1)) & (cols < (left + ew).view(n, 1, 1)))
    use = (torch.rand(n, generator=gen) < 0.5).view(n, 1, 1)
    flat = (torch.rand(n, generator=gen) < 0.5).view(n, 1, 1, 1)
    fill = torch.where(flat, torch.rand(n, c, 1, 1, generator=gen).expand(n, c, h, w),
                       torch.rand(n, c, h, w, generator=gen))
    return torch.where((box & use).unsqueeze(1), fill, x)


_RGB2YIQ = torch.tensor([[0.299, 0.587, 0.114],
                         [0.596, -0.274, -0.322],
                         [0.211, -0.523, 0.312]])
_YIQ2RGB = torch.linalg.inv(_RGB2YIQ)


def _rotate_hue(x: torch.Tensor, turns: torch.Tensor) -> torch.Tensor:
    """Rotate chroma in YIQ space by ``turns`` (fractions of a full turn)."""
    ang = 2 * math.pi * turns
    cos, sin = torch.cos(ang), torch.sin(ang)
    n = x.shape[0]
    rot = torch.zeros(n, 3, 3)
    rot[:, 0, 0] = 1.0
    rot[:, 1, 1], rot[:, 1, 2] = cos, -sin
    rot[:, 2, 1], rot[:, 2, 2] = sin, cos
    mat = _YIQ2RGB @ rot @ _RGB2YIQ
    return torch.einsum("nij,njhw->nihw", mat, x)


def nt_xent(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    """Normalized-temperature cross entropy over 2N views."""
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    n = z1.shape[0]
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, target)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 15
    batch: int = 256
    temperature: float = 0.5
    lr: float = 2e-3
    weight_decay: float = 1e-6
    seed: int = 0
    embedding_dim: int = 128
    widths: tuple[int, ...] = (16, 32, 64, 64)
    pool: str = "avgpool"
    head: str = "flatten"
    final_act: str = "relu"
    noise: float = 0.0
    erase: float = 0.0


def pretrain_ssl(dataset: ShadowDataset | np.ndarray, config: PretrainConfig = PretrainConfig(),
                 arch: Sequence[dict] | None = None, init: EncoderHandle | None = None) -> EncoderHandle:
    """Contrastive (SimCLR-style) pretraining of a fresh or given encoder.

    Deterministic in ``config.seed``: it fixes initialization, data order and
    augmentation draws.
    """
    images = dataset.images if isinstance(dataset, ShadowDataset) else check_batch(dataset)
    if config.batch < 2:
        raise EncoderError("batch must be >= 2")
    if len(images) < config.batch:
        raise EncoderError(f"dataset of {len(images)} images is smaller than batch {config.batch}")
    shape = tuple(images.shape[1:])
    if init is None:
        arch = arch if arch is not None else default_arch(config.embedding_dim, config.widths, config.pool, config.head,
                                                                 config.final_act)
        base = make_encoder(arch, shape, seed=config.seed)
    else:
        if tuple(init.input_shape) != shape:
            raise EncoderError("initial encoder input shape does not match the dataset")
        base = init
    net = copy.deepcopy(base.module)
    dim = base.embedding_dim
    torch.manual_seed(config.seed)
    head = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 64))
    params = list(net.parameters()) + list(head.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    data = torch.from_numpy(np.array(images)).permute(0, 3, 1, 2)
    steps_per_epoch = len(images) // config.batch
    total = config.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total, 1))
    net.train()
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(len(images), generator=gen)
        running = 0.0
        for b in range(steps_per_epoch):
            x = data[order[b * config.batch:(b + 1) * config.batch]]
            z1 = head(net(augment(x, gen, noise=config.noise, erase=config.erase)))
            z2 = head(net(augment(x, gen, noise=config.noise, erase=config.erase)))
            loss = nt_xent(z1, z2, config.temperature)
            if not torch.isfinite(loss):
                raise TrainingDiverged("pretraining", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += loss.item()
            step += 1
        log.debug("pretrain epoch %d loss %.4f", epoch, running / max(steps_per_epoch, 1))
    prov = {"kind": "clean", "pretrain": {"epochs": config.epochs, "batch": config.batch,
                                          "temperature": config.temperature, "seed": config.seed,
                                          "images": len(images)}}
    return EncoderHandle(base.arch, shape, dim, _freeze(net), {**base.provenance, **prov})


# --------------------------------------------------------------------------
# linear probe

@dataclass(frozen=True)
class LinearProbe:
    weight: np.ndarray  # (embedding_dim, num_classes)
    bias: np.ndarray
    classes: np.ndarray

    def scores(self, embeddings: np.ndarray) -> np.ndarray:
        return _probe_features(embeddings) @ self.weight + self.bias

    def predict_embeddings(self, embeddings: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(embeddings), axis=1)]

    def predict(self, encoder: EncoderHandle, images: np.ndarray) -> np.ndarray:
        return self.predict_embeddings(embed(encoder, images))

    def accuracy(self, encoder: EncoderHandle, data: LabeledSet) -> float:
        return float(np.mean(self.predict(encoder, data.images) == data.labels))


def _probe_features(e: np.ndarray) -> np.ndarray:
    return e / np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)


def train_linear_probe(encoder: EncoderHandle, labeled: LabeledSet, c: float = 10.0,
                       max_iter: int = 2000) -> LinearProbe:
    """Multinomial logistic regression on frozen, L2-normalized embeddings."""
    from sklearn.linear_model import LogisticRegression

    classes = labeled.classes
    if len(classes) < 2:
        raise EncoderError("linear probe needs at least 2 classes")
    feats = _probe_features(embed(encoder, labeled.images)).astype(np.float64)
    clf = LogisticRegression(C=c, max_iter=max_iter)
    clf.fit(feats, labeled.labels)
    coef, intercept = clf.coef_, clf.intercept_
    if len(classes) == 2:  # sklearn collapses the binary case to one column
        coef = np.vstack([-coef, coef]) / 2
        intercept = np.array([-intercept[0], intercept[0]]) / 2
    return LinearProbe(coef.T.astype(np.float64), intercept.astype(np.float64), clf.classes_)


# --------------------------------------------------------------------------
# checkpoints: a zip container with ``meta.json`` plus one ``.npy`` per tensor

def save_checkpoint(encoder: EncoderHandle) -> bytes:
    arrays = encoder.state_arrays()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": list(encoder.arch),
        "input_shape": list(encoder.input_shape),
        "embedding_dim": encoder.embedding_dim,
        "weights": {k: {"dtype": str(v.dtype), "shape": list(v.shape)} for k, v in arrays.items()},
        "provenance": encoder.provenance,
    }
    buf = io.BytesIO()
    # fixed timestamps keep the bytes a pure function of the weights
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        _write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for k, v in arrays.items():
            npy = io.BytesIO()
            np.save(npy, v, allow_pickle=False)
            _write(zf, f"weights/{k}.npy", npy.getvalue())
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def load_checkpoint(blob: bytes) -> EncoderHandle:
    try:
        with zipfile.ZipFile(io.BytesIO(blob)) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError("not an encoder checkpoint")
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
            arrays = {k: np.load(io.BytesIO(zf.read(f"weights/{k}.npy")), allow_pickle=False)
                      for k in meta["weights"]}
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    shape = tuple(meta["input_shape"])
    module, dim = build_network(meta["arch"], shape)
    if dim != meta["embedding_dim"]:
        raise CheckpointError("embedding dimension does not match architecture")
    expected = module.state_dict()
    if set(expected) != set(arrays):
        raise CheckpointError("checkpoint weights do not match architecture")
    state = {}
    for k, ref in expected.items():
        arr = arrays[k]
        if tuple(arr.shape) != tuple(ref.shape) or list(arr.shape) != meta["weights"][k]["shape"]:
            raise CheckpointError(f"shape mismatch for {k}: {arr.shape} vs {tuple(ref.shape)}")
        state[k] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)
    return EncoderHandle(_arch_tuple(meta["arch"]), shape, dim, _freeze(module), meta.get("provenance", {}))


def read_checkpoint(path) -> EncoderHandle:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return load_checkpoint(blob)


def write_checkpoint(encoder: EncoderHandle, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save_checkpoint(encoder))


def same_image_vs_cross_cosine(encoder: EncoderHandle, images: np.ndarray, seed: int = 0) -> tuple[float, float]:
    """Mean cosine of two augmentations of one image vs. of different images."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.tensor(check_batch(images, encoder.input_shape)).permute(0, 3, 1, 2)
    a = augment(x, gen).permute(0, 2, 3, 1).numpy()
    b = augment(x, gen).permute(0, 2, 3, 1).numpy()
    cos = cosine_matrix(embed(encoder, a), embed(encoder, b))
    n = len(images)
    same = float(np.trace(cos) / n)
    cross = float((cos.sum() - np.trace(cos)) / (n * n - n))
    return same, cross


__all__ = [
    "EncoderHandle", "LinearProbe", "PretrainConfig", "EncoderError", "CheckpointError",
    "TrainingDiverged", "default_arch", "make_encoder", "embed", "pretrain_ssl",
    "train_linear_probe", "save_checkpoint", "load_checkpoint", "read_checkpoint",
    "write_checkpoint", "cosine_matrix", "DataError",
]
