import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from encscan.data import DataError, ShadowDataset
from encscan.encoders import EncoderHandle, default_arch, make_encoder
from encscan.inversion import (DegenerateEmbedding, InversionConfig, InversionError, batch_similarity_loss,
                               export_trigger, invert_trigger, load_trigger, similarity_loss, squash, stamp)


def brute_force_loss(embeddings: np.ndarray) -> float:
    """Independent oracle: explicit double loop over all ordered pairs."""
    n = len(embeddings)
    total = 0.0
    for p in range(n):
        for q in range(n):
            a, b = embeddings[p], embeddings[q]
            total += float(np.dot(a, b) / (math.sqrt(np.dot(a, a)) * math.sqrt(np.dot(b, b))))
    return -total / (n * n)


class _Const(torch.nn.Module):
    def __init__(self, vec):
        super().__init__()
        self.vec = torch.nn.Parameter(torch.tensor(vec, dtype=torch.float32), requires_grad=False)

    def forward(self, x):
        return self.vec.expand(x.shape[0], -1) + 0 * x.sum(dim=(1, 2, 3)).unsqueeze(1)


def constant_encoder(shape=(8, 8, 3)):
    return EncoderHandle((), shape, 4, _Const([1.0, 2.0, 0.0, -1.0]))


# ---- stamping ---------------------------------------------------------------

unit_images = arrays(np.float32, (3, 5, 4, 2), elements=st.floats(0, 1, width=32))
unit_mask = arrays(np.float32, (5, 4), elements=st.floats(0, 1, width=32))
unit_pattern = arrays(np.float32, (5, 4, 2), elements=st.floats(0, 1, width=32))


@settings(max_examples=60, deadline=None)
@given(unit_images, unit_mask, unit_pattern)
def test_stamp_is_a_convex_combination(x, m, t):
    out = stamp(x, m, t)
    lo, hi = np.minimum(x, t[None]), np.maximum(x, t[None])
    assert np.all(out >= lo - 1e-6) and np.all(out <= hi + 1e-6)
    torch_out = stamp(torch.from_numpy(x), torch.from_numpy(m), torch.from_numpy(t)).numpy()
    np.testing.assert_allclose(torch_out, out, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(unit_images, unit_pattern)
def test_stamp_identities(x, t):
    ones = np.ones((5, 4), np.float32)
    np.testing.assert_array_equal(stamp(x, ones, t), x)
    out = stamp(x, np.zeros((5, 4), np.float32), t)
    np.testing.assert_array_equal(out, np.broadcast_to(t, x.shape))


def test_stamp_half_mask():
    x = np.full((1, 1, 1, 1), 0.2, np.float32)
    t = np.full((1, 1, 1), 0.8, np.float32)
    assert stamp(x, np.full((1, 1), 0.5, np.float32), t)[0, 0, 0, 0] == pytest.approx(0.5)


def test_stamp_shape_mismatch():
    with pytest.raises(DataError):
        stamp(torch.zeros(2, 4, 4, 3), torch.ones(3, 3), torch.zeros(4, 4, 3))


# ---- batch loss ---------------------------------------------------------------

def test_loss_matches_brute_force_on_random_encoders():
    rng = np.random.default_rng(0)
    for case in range(20):
        enc = make_encoder(default_arch(8, widths=(4, 8), pool="avgpool"), (8, 8, 3), seed=case)
        n = int(rng.integers(2, 12))
        x = rng.random((n, 8, 8, 3), dtype=np.float32)
        m = rng.random((8, 8), dtype=np.float32)
        t = rng.random((8, 8, 3), dtype=np.float32)
        got = batch_similarity_loss(enc, x, m, t)
        with torch.no_grad():
            emb = enc.forward(torch.from_numpy(stamp(x, m, t))).double().numpy()
        assert abs(got - brute_force_loss(emb)) <= 1e-6


def test_loss_special_cases():
    x = np.random.default_rng(0).random((6, 8, 8, 3), dtype=np.float32)
    m, t = np.ones((8, 8), np.float32), np.zeros((8, 8, 3), np.float32)
    assert batch_similarity_loss(constant_encoder(), x, m, t) == pytest.approx(-1.0, abs=1e-6)
    assert float(similarity_loss(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))) == pytest.approx(-0.5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 9), st.integers(1, 5)),
              elements=st.floats(-10, 10)).filter(lambda e: np.all(np.linalg.norm(e, axis=1) > 1e-3)))
def test_loss_bounds(e):
    # L = -|sum of unit vectors|^2 / N^2, so it lies in [-1, 0]
    loss = float(similarity_loss(torch.from_numpy(e)))
    assert -1 - 1e-9 <= loss <= 1e-12
    assert loss == pytest.approx(brute_force_loss(e), abs=1e-9)


def test_zero_embedding_is_degenerate():
    with pytest.raises(DegenerateEmbedding, match="degenerate"):
        similarity_loss(torch.tensor([[0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(InversionError):
        similarity_loss(torch.ones(1, 3))


# ---- gradient -----------------------------------------------------------------

def mask_gradient_errors(coords: int = 12, seed: int = 1) -> list[float]:
    """Relative error of the autograd mask-logit gradient vs central differences (float64)."""
    enc = make_encoder(default_arch(8, widths=(4, 8), pool="avgpool"), (8, 8, 3), seed=2).as_float64()
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((6, 8, 8, 3)))
    logits = torch.from_numpy(rng.normal(0, 0.5, (8, 8))).requires_grad_(True)
    t = squash(torch.from_numpy(rng.normal(0, 0.5, (8, 8, 3))))

    def f(z):
        return similarity_loss(enc.forward(stamp(x, squash(z), t)))

    f(logits).backward()
    grad = logits.grad.numpy()
    eps = 1e-5
    errors = []
    for i, j in {tuple(c) for c in rng.integers(0, 8, (coords * 2, 2))}:
        zp, zm = logits.detach().clone(), logits.detach().clone()
        zp[i, j] += eps
        zm[i, j] -= eps
        fd = (f(zp).item() - f(zm).item()) / (2 * eps)
        errors.append(abs(fd - grad[i, j]) / max(abs(fd), abs(grad[i, j]), 1e-8))
        if len(errors) == coords:
            break
    return errors


def test_mask_gradient_matches_central_differences():
    errors = mask_gradient_errors()
    assert len(errors) == 12
    assert max(errors) <= 1e-2


# ---- inversion --------------------------------------------------------------

def test_constant_encoder_inverts_to_empty_trigger():
    x = np.random.default_rng(0).random((16, 8, 8, 3), dtype=np.float32)
    res = invert_trigger(constant_encoder(), ShadowDataset(x), InversionConfig(batch=8, max_iters=300))
    assert res.converged and res.pl1 < 0.01
    assert res.final_loss == pytest.approx(-1.0, abs=1e-6)


def test_inversion_is_deterministic_and_reports_minimum(tiny_encoder):
    x = ShadowDataset(np.random.default_rng(0).random((20, 16, 16, 3), dtype=np.float32))
    cfg = InversionConfig(batch=8, max_iters=60, beta=-0.5, seed=4, restarts=2)
    a = invert_trigger(tiny_encoder, x, cfg, keep_trace=True)
    b = invert_trigger(tiny_encoder, x, cfg)
    np.testing.assert_array_equal(a.mask, b.mask)
    np.testing.assert_array_equal(a.pattern, b.pattern)
    assert a.l1_norm == b.l1_norm and a.iterations == b.iterations
    feasible = [r["l1"] for r in a.trace if r["feasible"]]
    if feasible:
        assert a.converged
        assert min(feasible) == pytest.approx(a.l1_norm, rel=1e-5)
    assert a.pl1 == pytest.approx(a.l1_norm / (16 * 16 * 3))
    assert 0 <= a.mask.min() and a.mask.max() <= 1
    assert {r["restart"] for r in a.trace} == {0, 1}


def test_unreachable_constraint_reports_not_converged(tiny_encoder):
    x = ShadowDataset(np.random.default_rng(0).random((8, 16, 16, 3), dtype=np.float32))
    res = invert_trigger(tiny_encoder, x, InversionConfig(batch=8, max_iters=5, beta=-0.999999))
    assert not res.converged
    assert -1 <= res.final_loss <= 1


def test_small_shadow_uses_whole_set(tiny_encoder):
    x = np.random.default_rng(0).random((3, 16, 16, 3), dtype=np.float32)
    res = invert_trigger(tiny_encoder, x, InversionConfig(batch=128, max_iters=3))
    assert res.iterations == 3
    with pytest.raises(DataError):
        invert_trigger(tiny_encoder, x[:, :8], InversionConfig(max_iters=1))


def test_nan_loss_names_the_iteration():
    class Bad(torch.nn.Module):
        def forward(self, x):
            return x.flatten(1) * float("nan")

    enc = EncoderHandle((), (4, 4, 3), 48, Bad())
    x = np.random.default_rng(0).random((4, 4, 4, 3), dtype=np.float32)
    with pytest.raises(InversionError, match="iteration 1"):
        invert_trigger(enc, x, InversionConfig(max_iters=3))


def test_config_validation():
    with pytest.raises(ValueError):
        InversionConfig(beta=-1.0)
    with pytest.raises(ValueError):
        InversionConfig(batch=1)
    with pytest.raises(ValueError):
        InversionConfig(restarts=0)


def test_trigger_export_round_trip(tiny_encoder, tmp_path):
    from PIL import Image

    x = np.random.default_rng(0).random((8, 16, 16, 3), dtype=np.float32)
    res = invert_trigger(tiny_encoder, x, InversionConfig(batch=8, max_iters=10))
    paths = export_trigger(res, tmp_path, "t")
    back = load_trigger(paths["raw"])
    np.testing.assert_array_equal(back.mask, res.mask)
    np.testing.assert_array_equal(back.pattern, res.pattern)
    assert back.pl1 == res.pl1 and back.converged == res.converged
    img = np.asarray(Image.open(paths["mask"]))
    np.testing.assert_array_equal(img, np.round(255 * (1 - res.mask)).astype(np.uint8))
    assert np.asarray(Image.open(paths["pattern"])).shape == (16, 16, 3)
