"""Finite-difference gradient suite over every primitive and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .model import Denoiser, ModelConfig

TOLERANCE = {np.dtype(np.float64): 1e-6, np.dtype(np.float32): 1e-3}

# two DiT layers, narrow enough for coordinate-wise differencing to stay fast
GRADCHECK_CONFIG = ModelConfig(n_layers=2, d_model=32, n_heads=2, patch_size=8, mlp_ratio=2)


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _shape(rng, max_side: int = 8, ndim: int | None = None) -> tuple[int, ...]:
    ndim = int(rng.integers(1, 4)) if ndim is None else ndim
    return tuple(int(s) for s in rng.integers(1, max_side + 1, size=ndim))


def primitive_cases(rng: np.random.Generator, dtype) -> list[tuple[str, Callable, np.ndarray]]:
    """One randomly shaped scalar test function per primitive.

    Each entry is ``(name, f, point)`` where ``f`` maps a tensor at ``point``
    to a scalar; other operands are fixed constants drawn from ``rng``.
    """
    def arr(shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, size=shape).astype(dtype)

    def weights(shape):
        w = arr(shape)
        # a fixed random projection turns any tensor into a scalar with nontrivial gradient
        return lambda t: nx.sum(nx.mul(t, nx.Tensor(w)))

    cases = []
    s = _shape(rng)
    other = arr(s)
    proj = weights(s)
    cases.append(("add", lambda x: proj(nx.add(x, nx.Tensor(other))), arr(s)))
    cases.append(("sub", lambda x: proj(nx.sub(nx.Tensor(other), x)), arr(s)))
    cases.append(("mul", lambda x: proj(nx.mul(x, nx.Tensor(other))), arr(s)))
    cases.append(("square", lambda x: proj(nx.square(x)), arr(s)))
    cases.append(("gelu", lambda x: proj(nx.gelu(x)), arr(s, -3, 3)))
    cases.append(("silu", lambda x: proj(nx.silu(x)), arr(s, -3, 3)))

    n, k, m = (int(v) for v in rng.integers(1, 9, size=3))
    b_mat = arr((k, m))
    pm = weights((n, m))
    cases.append(("matmul", lambda x: pm(nx.matmul(x, nx.Tensor(b_mat))), arr((n, k))))
    a_mat = arr((n, k))
    cases.append(("matmul_rhs", lambda x: pm(nx.matmul(nx.Tensor(a_mat), x)), arr((k, m))))
    bias = arr((m,))
    cases.append(("linear", lambda x: pm(nx.linear(x, nx.Tensor(b_mat), nx.Tensor(bias))), arr((n, k))))
    x_lin = arr((n, k))
    cases.append(("linear_weight", lambda w: pm(nx.linear(nx.Tensor(x_lin), w, nx.Tensor(bias))), arr((k, m))))

    r, c = (int(v) for v in rng.integers(2, 9, size=2))
    p_rs = weights((c, r))
    cases.append(("reshape", lambda x: p_rs(nx.reshape(x, (c, r))), arr((r, c))))
    p_gi = weights((r, c - 1))
    cases.append(("getitem", lambda x: p_gi(x[:, 1:]), arr((r, c))))
    tail = arr((r, 3))
    p_cat = weights((r, c + 3))
    cases.append(("concat", lambda x: p_cat(nx.concat([x, nx.Tensor(tail)], axis=-1)), arr((r, c))))
    cases.append(("sum", lambda x: nx.sum(nx.square(nx.sum(x, axis=0))), arr((r, c))))
    cases.append(("mean", lambda x: nx.sum(nx.square(nx.mean(x, axis=-1))), arr((r, c))))

    # width 2 normalizes to exactly +-1 and has a vanishing gradient, so start at 3
    d = int(rng.integers(3, 9))
    gain, beta = arr((d,), 0.5, 1.5), arr((d,))
    p_ln = weights((r, d))
    cases.append(("layer_norm", lambda x: p_ln(nx.layer_norm(x, nx.Tensor(gain), nx.Tensor(beta))), arr((r, d))))
    x_ln = arr((r, d))
    cases.append(("layer_norm_gain",
                  lambda g: p_ln(nx.layer_norm(nx.Tensor(x_ln), g, nx.Tensor(beta))), arr((d,), 0.5, 1.5)))

    lq, lk = (int(v) for v in rng.integers(1, 7, size=2))
    heads = 2
    dh = 2 * int(rng.integers(1, 4))
    kk, vv = arr((lk, dh)), arr((lk, dh))
    qq = arr((lq, dh))
    mask = rng.random(lk) < 0.7
    mask[int(rng.integers(lk))] = True
    p_at = weights((lq, dh))
    cases.append(("attention_q", lambda q: p_at(nx.attention(q, nx.Tensor(kk), nx.Tensor(vv), mask, heads)), qq))
    cases.append(("attention_k", lambda k_: p_at(nx.attention(nx.Tensor(qq), k_, nx.Tensor(vv), mask, heads)), kk))
    cases.append(("attention_v", lambda v_: p_at(nx.attention(nx.Tensor(qq), nx.Tensor(kk), v_, mask, heads)), vv))

    vocab, width = int(rng.integers(2, 9)), int(rng.integers(1, 9))
    ids = rng.integers(0, vocab, size=int(rng.integers(1, 9)))
    p_emb = weights((len(ids), width))
    cases.append(("embedding", lambda t: p_emb(nx.embedding(t, ids)), arr((vocab, width))))

    target = arr(s)
    loss_mask = rng.random(s) < 0.6
    loss_mask.reshape(-1)[0] = True
    cases.append(("mse", lambda x: nx.mse(x, target, loss_mask), arr(s)))
    return cases


def primitive_suite(dtype=np.float64, seeds=range(100), step: float | None = None) -> list[SuiteResult]:
    """Worst relative error per primitive over ``seeds`` random instances."""
    dtype = np.dtype(dtype)
    tol = TOLERANCE[dtype]
    worst: dict[str, float] = {}
    with nx.default_dtype(dtype):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            for name, f, point in primitive_cases(rng, dtype):
                report = nx.grad_check(f, point, step=step, tol=tol)
                worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    return [SuiteResult(name, err, tol) for name, err in worst.items()]


def model_loss_fn(model: Denoiser, seed: int = 0, batch: int = 2):
    """Closure computing the masked training loss on a fixed random batch."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    cur = rng.integers(0, 256, size=(batch, size, size, 3), dtype=np.uint8)
    prev = rng.integers(0, 256, size=(batch, size, size, 3), dtype=np.uint8)
    ids = rng.integers(1, cfg.vocab_size, size=(batch, 4))
    text_mask = np.ones((batch, 4), dtype=bool)
    text_mask[0, 3] = False
    k = rng.integers(0, 1000, size=batch)
    # round through 32 bits so a 64-bit twin sees exactly the same inputs
    x_k = rng.standard_normal((batch, cfg.chunk_size, 2)).astype(np.float32).astype(model.dtype)
    x0 = rng.uniform(0, 1, size=(batch, cfg.chunk_size, 2)).astype(np.float32).astype(model.dtype)

    def loss():
        cond = model.encode_conditions(cur, prev, ids, text_mask)
        return nx.mse(model(k, x_k, cond), x0)

    return loss


def model_gradcheck(dtype=np.float32, config: ModelConfig = GRADCHECK_CONFIG, seed: int = 0,
                    max_coords: int = 300, step: float | None = None) -> nx.GradCheckReport:
    """Check the training loss gradient of a freshly initialized model.

    Differences are taken on a 64-bit twin holding the same weights.
    """
    dtype = np.dtype(dtype)
    model = Denoiser(config, seed, dtype)
    twin = Denoiser(config, seed, np.float64)
    twin.load_state_dict(model.state_dict())
    return nx.grad_check_params(model_loss_fn(model, seed), model.trainable_parameters(), step=step,
                                tol=TOLERANCE[dtype], max_coords=max_coords, seed=seed,
                                oracle=(model_loss_fn(twin, seed), twin.trainable_parameters()))
