"""Cross-attention from one query per texel to N per-view features.

``standard_cross_attention`` projects keys and values per head;
``one_to_many_attention`` attends directly over the raw features, with the
key and value projections folded into per-head query matrices and a wider
output projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass
class StdAttnParams:
    W_Q: Tensor  # [h, C, C/h]
    W_K: Tensor  # [h, C, C/h]
    W_V: Tensor  # [h, C, C/h]
    W_O: Tensor  # [C, C]

    @property
    def heads(self) -> int:
        return self.W_Q.shape[0]

    @property
    def channels(self) -> int:
        return self.W_Q.shape[1]


@dataclass
class OtmAttnParams:
    W_q: Tensor  # [h, C, C]
    W_O: Tensor  # [h*C, C]
    b_O: Tensor | None = None  # [C]

    @property
    def heads(self) -> int:
        return self.W_q.shape[0]

    @property
    def channels(self) -> int:
        return self.W_q.shape[1]


def random_std_params(rng: np.random.Generator, C: int, h: int, dtype=np.float64) -> StdAttnParams:
    if C % h:
        raise DimensionError(f"{C} channels not divisible by {h} heads")
    dk = C // h

    def u(*shape, fan):
        a = np.sqrt(1.0 / fan)
        return Tensor(rng.uniform(-a, a, size=shape).astype(dtype))

    return StdAttnParams(u(h, C, dk, fan=C), u(h, C, dk, fan=C), u(h, C, dk, fan=C), u(C, C, fan=C))


def _check(q: Tensor, keys: Tensor, C: int) -> None:
    if q.shape[-1] != C or keys.shape[-1] != C or keys.shape[:-2] != q.shape[:-1]:
        raise DimensionError(f"query {q.shape} / keys {keys.shape} do not match {C} channels")


def standard_cross_attention(q: Tensor, keys: Tensor, params: StdAttnParams) -> Tensor:
    """q [..., C], keys [..., N, C] -> [..., C]."""
    h, C = params.heads, params.channels
    _check(q, keys, C)
    dk = C // h
    lead = q.shape[:-1]
    q2 = ad.reshape(q, (-1, C))
    k2 = ad.reshape(keys, (-1, keys.shape[-2], C))
    heads = []
    for i in range(h):
        qi = ad.matmul(q2, params.W_Q[i])  # [B, dk]
        ki = ad.matmul(k2, params.W_K[i])  # [B, N, dk]
        vi = ad.matmul(k2, params.W_V[i])
        logits = ad.mul(ad.einsum("bd,bnd->bn", qi, ki), 1.0 / np.sqrt(dk))
        p = ad.softmax(logits, axis=-1)
        heads.append(ad.einsum("bn,bnd->bd", p, vi))
    out = ad.matmul(ad.concat(heads, axis=-1), params.W_O)
    return ad.reshape(out, lead + (C,))


def one_to_many_attention(q: Tensor, deltas: Tensor, params: OtmAttnParams,
                          zero_keys: bool = False) -> Tensor:
    """q [..., C], deltas [..., N, C] -> [..., C]; deltas are never projected.

    ``zero_keys`` replaces the attention keys with zeros, so every head returns
    the plain mean of the deltas.
    """
    h, C = params.heads, params.channels
    _check(q, deltas, C)
    if params.W_O.shape != (h * C, C):
        raise DimensionError(f"W_O {params.W_O.shape} != {(h * C, C)}")
    lead = q.shape[:-1]
    N = deltas.shape[-2]
    q2 = ad.reshape(q, (-1, C))
    d2 = ad.reshape(deltas, (-1, N, C))
    qs = ad.einsum("bc,hcd->bhd", q2, params.W_q)  # [B, h, C]
    if zero_keys:
        logits = Tensor(np.zeros((q2.shape[0], h, N), dtype=q.dtype))
    else:
        logits = ad.mul(ad.einsum("bhd,bnd->bhn", qs, d2), 1.0 / np.sqrt(C))
    p = ad.softmax(logits, axis=-1)
    heads = ad.einsum("bhn,bnd->bhd", p, d2)  # [B, h, C]
    out = ad.matmul(ad.reshape(heads, (-1, h * C)), params.W_O)
    if params.b_O is not None:
        out = ad.add(out, params.b_O)
    return ad.reshape(out, lead + (C,))


def fold_params(std: StdAttnParams) -> OtmAttnParams:
    """Build one-to-many parameters computing exactly the same function as ``std``."""
    h, C = std.heads, std.channels
    dk = C // h
    wq = np.stack([std.W_Q.data[i] @ std.W_K.data[i].T for i in range(h)]) * (np.sqrt(C) / np.sqrt(dk))
    blocks = np.zeros((h * C, C), dtype=std.W_O.dtype)
    for i in range(h):
        blocks[i * C:(i + 1) * C, i * dk:(i + 1) * dk] = std.W_V.data[i]
    return OtmAttnParams(Tensor(wq), Tensor(blocks @ std.W_O.data))


# ----------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class FlopReport:
    variant: str
    N: int
    h: int
    d_k: int
    flops: int


def flop_count(variant: str, N: int, h: int, d_k: int) -> FlopReport:
    """Multiply-accumulate count for one query attending over N inputs."""
    if min(N, h, d_k) < 1:
        raise ValueError("counts must be >= 1")
    if variant == "standard":
        flops = (2 * N + 1) * d_k ** 2 + N * d_k + d_k ** 2
    elif variant == "one_to_many":
        flops = h * d_k ** 2 + N * h * d_k + h * d_k ** 2
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return FlopReport(variant, N, h, d_k, flops)


def speedup(standard: int, other: int) -> str:
    return f"{standard / other:.1f}x"


HEADS_SWEEP = (1, 2, 4, 8)
INPUTS_SWEEP = (4, 8, 16, 32, 64)
HEADS_SWEEP_INPUTS = 8
INPUTS_SWEEP_HEADS = 4


@dataclass
class FlopRow:
    h: int
    N: int
    d_k: int
    standard: int
    one_to_many: int
    ratio: str  # standard / one-to-many for the heads sweep
    standard_rel: str  # cost relative to the first row (inputs sweep)
    one_to_many_rel: str


def flop_table(sweep: str, d_k: int = 32) -> list[FlopRow]:
    """Analytic per-query costs of both attention variants over heads or inputs."""
    if sweep == "heads":
        cases = [(h, HEADS_SWEEP_INPUTS) for h in HEADS_SWEEP]
    elif sweep == "inputs":
        cases = [(INPUTS_SWEEP_HEADS, n) for n in INPUTS_SWEEP]
    else:
        raise ValueError(f"unknown sweep {sweep!r}")
    rows = []
    for h, n in cases:
        std = flop_count("standard", n, h, d_k).flops
        otm = flop_count("one_to_many", n, h, d_k).flops
        rows.append(FlopRow(h, n, d_k, std, otm, speedup(std, otm), "", ""))
    for r in rows:
        r.standard_rel = speedup(r.standard, rows[0].standard)
        r.one_to_many_rel = speedup(r.one_to_many, rows[0].one_to_many)
    return rows


def time_attention(N: int, h: int, d_k: int, batch: int = 256, repeats: int = 3,
                   seed: int = 0) -> tuple[float, float]:
    """Best-of wall-clock milliseconds (standard, one-to-many) for ``batch`` queries."""
    import time

    rng = np.random.default_rng(seed)
    C = h * d_k
    std = random_std_params(rng, C, h, np.float32)
    otm = fold_params(std)
    q = Tensor(rng.standard_normal((batch, C)).astype(np.float32))
    keys = Tensor(rng.standard_normal((batch, N, C)).astype(np.float32))
    best = []
    for fn, p in ((standard_cross_attention, std), (one_to_many_attention, otm)):
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(q, keys, p)
            ts.append(time.perf_counter() - t0)
        best.append(1e3 * min(ts))
    return best[0], best[1]


# ----------------------------------------------------------------------------
# fusion block


def otm_params(store: ad.ParamStore, prefix: str, C: int, h: int) -> OtmAttnParams:
    return OtmAttnParams(
        store.get(f"{prefix}/wq", (h, C, C), fan_in=C),
        store.get(f"{prefix}/wo", (h * C, C), fan_in=h * C),
        store.get(f"{prefix}/bo", (C,), init="constant"),
    )


def attention_block(V: Tensor, deltas: Tensor, store: ad.ParamStore, prefix: str, heads: int,
                    zero_keys: bool = False) -> Tensor:
    """V + OTM(rms_norm(V), deltas) at every texel. deltas: [M, L, H, W, C]."""
    C = V.shape[-1]
    gain = store.get(f"{prefix}/norm", (C,), init="constant", value=1.0)
    keys = ad.transpose(deltas, (1, 2, 3, 0, 4))  # [L, H, W, M, C]
    upd = one_to_many_attention(ad.rms_norm(V, gain), keys, otm_params(store, prefix, C, heads),
                                zero_keys=zero_keys)
    return ad.add(V, upd)


def conv_block(V: Tensor, store: ad.ParamStore, prefix: str) -> Tensor:
    """V + conv(gelu(conv(rms_norm(V)))), convolving each layer slice."""
    C = V.shape[-1]
    gain = store.get(f"{prefix}/norm", (C,), init="constant", value=1.0)
    k1 = store.get(f"{prefix}/conv1/w", (3, 3, C, C), fan_in=9 * C)
    b1 = store.get(f"{prefix}/conv1/b", (C,), init="constant")
    k2 = store.get(f"{prefix}/conv2/w", (3, 3, C, C), fan_in=9 * C)
    b2 = store.get(f"{prefix}/conv2/b", (C,), init="constant")
    x = ad.conv2d_3x3(ad.rms_norm(V, gain), k1, b1)
    x = ad.conv2d_3x3(ad.gelu(x), k2, b2)
    return ad.add(V, x)


def fusion_block(V: Tensor, deltas: Tensor, store: ad.ParamStore, prefix: str, heads: int,
                 n_convs: int = 1, zero_keys: bool = False) -> Tensor:
    V = attention_block(V, deltas, store, f"{prefix}/attn", heads, zero_keys)
    for j in range(n_convs):
        V = conv_block(V, store, f"{prefix}/conv{j}")
    return V
