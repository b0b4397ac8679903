"""Attenders: global soft attention, MoChA and adaptive-chunk MoChA.

Positions are 0-based in arrays. ``MonotonicState.last_boundary`` follows the
1-based convention (0 = nothing attended yet) so that it reads like the
listener index it names.

Training uses the expected alignment (division-free recurrence) and the
expected chunkwise attention; inference uses the hard boundary scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor, ShapeError

P_EPS = 1e-6
KINDS = ("gsa", "mocha", "amocha")
PREDICTORS = ("constrained", "unconstrained")
ACTIVATIONS = ("relu", "tanh")
SMOOTHING = ("none", "m1", "m2")


def _uniform(rng, shape, scale=0.05):
    return tn.parameter(rng.uniform(-scale, scale, shape))


# ---------------------------------------------------------------------------
# Energy functions
# ---------------------------------------------------------------------------
@dataclass
class AdditiveEnergyParams:
    w_h: Tensor  # (D, A)
    w_s: Tensor  # (S, A)
    b: Tensor  # (A,)
    v: Tensor  # (A,)

    @classmethod
    def init(cls, rng, enc_dim, state_dim, att_dim):
        return cls(_uniform(rng, (enc_dim, att_dim)), _uniform(rng, (state_dim, att_dim)),
                   tn.parameter(np.zeros(att_dim)), _uniform(rng, (att_dim,)))

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w_h", "w_s", "b", "v")}


@dataclass
class MonotonicEnergyParams:
    w_h: Tensor
    w_s: Tensor
    b: Tensor
    v: Tensor
    g: Tensor  # scalar gain
    r: Tensor  # scalar offset

    @classmethod
    def init(cls, rng, enc_dim, state_dim, att_dim, r_init: float = -4.0):
        # a clearly negative offset keeps early boundaries from piling up on
        # the first frame, which a pretrained bidirectional listener makes easy
        return cls(_uniform(rng, (enc_dim, att_dim)), _uniform(rng, (state_dim, att_dim)),
                   tn.parameter(np.zeros(att_dim)), _uniform(rng, (att_dim,)),
                   tn.parameter(np.array(1.0)), tn.parameter(np.array(float(r_init))))

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w_h", "w_s", "b", "v", "g", "r")}


@dataclass
class PredictorParams:
    w_h: Tensor
    w_s: Tensor
    b: Tensor
    v_p: Tensor

    @classmethod
    def init(cls, rng, enc_dim, state_dim, hidden):
        return cls(_uniform(rng, (enc_dim, hidden)), _uniform(rng, (state_dim, hidden)),
                   tn.parameter(np.zeros(hidden)), _uniform(rng, (hidden,)))

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in ("w_h", "w_s", "b", "v_p")}


def _as_batch(s, h):
    s, h = tn.as_tensor(s), tn.as_tensor(h)
    single = s.ndim == 1
    if single:
        s = s.reshape(1, s.shape[0])
        h = h.reshape(1, *h.shape) if h.ndim == 2 else h.reshape(1, 1, h.shape[0])
    return s, h, single


def _hidden_proj(params, s: Tensor, keys: Tensor) -> Tensor:
    """``W_h h_u + W_s s + b`` for every u: keys (B, U, A), s (B, S) -> (B, U, A)."""
    q = s @ params.w_s + params.b
    return keys + q.reshape(q.shape[0], 1, q.shape[1])


def additive_energy(params: AdditiveEnergyParams, s, h, keys: Tensor | None = None) -> Tensor:
    """``V^T tanh(W_h h_u + W_s s + b)``.

    ``s`` (B, S) and ``h`` (B, U, D) give energies (B, U). Unbatched ``s`` (S,)
    with ``h`` (U, D) or (D,) is also accepted. ``keys`` may carry a
    precomputed ``h @ W_h``.
    """
    s, h, single = _as_batch(s, h)
    if h.shape[-1] != params.w_h.shape[0] or s.shape[-1] != params.w_s.shape[0]:
        raise ShapeError("additive_energy", s.shape, h.shape, params.w_h.shape)
    if keys is None:
        keys = h @ params.w_h
    hid = tn.tanh(_hidden_proj(params, s, keys))
    e = hid @ params.v.reshape(-1, 1)
    e = e.reshape(e.shape[:2])
    return e.reshape(e.shape[1:]) if single else e


def monotonic_energy(params: MonotonicEnergyParams, s, h, keys: Tensor | None = None) -> Tensor:
    """``g v^T/||v|| tanh(W_s s + W_h h_u + b) + r`` with the same batching as additive_energy."""
    s, h, single = _as_batch(s, h)
    if h.shape[-1] != params.w_h.shape[0] or s.shape[-1] != params.w_s.shape[0]:
        raise ShapeError("monotonic_energy", s.shape, h.shape, params.w_h.shape)
    norm = float(np.sqrt((params.v.data ** 2).sum()))
    if norm == 0.0:
        raise ValueError("monotonic energy direction v has zero norm")
    if keys is None:
        keys = h @ params.w_h
    v_unit = params.v / tn.sqrt((params.v * params.v).sum())
    hid = tn.tanh(_hidden_proj(params, s, keys))
    e = hid @ v_unit.reshape(-1, 1)
    e = e.reshape(e.shape[:2]) * params.g + params.r
    return e.reshape(e.shape[1:]) if single else e


def _activation(name):
    if name == "relu":
        return tn.relu
    if name == "tanh":
        return tn.tanh
    raise ValueError(f"activation must be one of {ACTIVATIONS}, got {name!r}")


def _predictor_logit(params: PredictorParams, s, h, activation, keys=None):
    s, h, single = _as_batch(s, h)
    if keys is None:
        keys = h @ params.w_h
    act = _activation(activation)(_hidden_proj(params, s, keys))
    out = act @ params.v_p.reshape(-1, 1)
    return out.reshape(out.shape[:2]), single


def predict_chunk_constrained(params: PredictorParams, s, h, w_max: float,
                              activation: str = "relu", keys=None) -> Tensor:
    """``W_max * sigmoid(V_p^T F(W_h h_u + W_s s + b))``, one real length per position."""
    if w_max < 1:
        raise ValueError("w_max must be >= 1")
    z, single = _predictor_logit(params, s, h, activation, keys)
    w = tn.sigmoid(z) * float(w_max)
    return w.reshape(w.shape[1:]) if single else w


def predict_chunk_unconstrained(params: PredictorParams, s, h, activation: str = "relu",
                                keys=None, max_len: int | None = None) -> Tensor:
    """``exp(V_p^T F(W_h h_u + W_s s + b))``.

    With ``max_len`` the exponent is clipped to ``ln(max_len) + 1``.
    """
    z, single = _predictor_logit(params, s, h, activation, keys)
    if max_len is not None:
        z = tn.minimum(z, math.log(max_len) + 1.0)
    w = tn.exp(z)
    return w.reshape(w.shape[1:]) if single else w


def round_chunk(w) -> np.ndarray:
    """Nearest integer with ties rounded up, floored at 1."""
    return np.maximum(1, np.floor(np.asarray(w) + 0.5)).astype(np.int64)


# ---------------------------------------------------------------------------
# Global soft attention and inference-time chunk attention
# ---------------------------------------------------------------------------
def masked_softmax(e: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is not None:
        e = e + (mask - 1.0) * 1e30
    return tn.softmax(e, axis=-1)


def gsa_context(params: AdditiveEnergyParams, s, h, mask=None, keys=None):
    """Softmax weights over all positions and the weighted sum of ``h``."""
    s_b, h_b, single = _as_batch(s, h)
    if h_b.shape[1] < 1:
        raise ValueError("gsa_context needs at least one listener output")
    e = additive_energy(params, s_b, h_b, keys)
    alpha = masked_softmax(e, mask)
    c = alpha.reshape(alpha.shape[0], 1, alpha.shape[1]) @ h_b
    c = c.reshape(c.shape[0], c.shape[2])
    if single:
        return alpha.reshape(alpha.shape[1:]), c.reshape(c.shape[1:])
    return alpha, c


def chunk_weights(d: np.ndarray, u: int, width: int) -> np.ndarray:
    """Softmax of ``d`` over positions ``[max(1, u-W+1), u]`` (1-based u), zero elsewhere."""
    if u < 1 or u > len(d):
        raise ValueError(f"boundary {u} outside 1..{len(d)}")
    lo = max(0, u - width)
    seg = d[lo:u] - d[lo:u].max()
    w = np.exp(seg)
    out = np.zeros(len(d), dtype=np.result_type(d, float))
    out[lo:u] = w / w.sum()
    return out


def chunk_context(params: AdditiveEnergyParams, s, h, u: int, width: int):
    """Soft attention over the chunk ending at boundary ``u`` (1-based); unbatched."""
    if width < 1:
        raise ValueError("chunk length must be >= 1")
    s, h = tn.as_tensor(s), tn.as_tensor(h)
    d = additive_energy(params, s, h).data
    w = chunk_weights(d, u, width)
    return w @ h.data


# ---------------------------------------------------------------------------
# Boundary-shift compensation
# ---------------------------------------------------------------------------
def future_average_matrix(lengths, U: int, w: int, dtype=None) -> np.ndarray:
    """``A[b, u, k] = 1/n`` for k in ``[u, min(len_b, u+w) - 1]``; rows past ``len_b`` are zero."""
    if w < 1:
        raise ValueError("smoothing width must be >= 1")
    lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
    A = np.zeros((len(lengths), U, U), dtype=dtype or tn.get_default_dtype())
    for b, L in enumerate(lengths):
        for u in range(int(L)):
            hi = min(int(L), u + w)
            A[b, u, u:hi] = 1.0 / (hi - u)
    return A


def smooth_features_m1(h, w: int, lengths=None):
    """Average each listener feature with its ``w - 1`` successors (truncated at the end)."""
    h = tn.as_tensor(h)
    if w == 1:
        return h
    single = h.ndim == 2
    hb = h.reshape(1, *h.shape) if single else h
    lengths = np.full(hb.shape[0], hb.shape[1]) if lengths is None else lengths
    A = future_average_matrix(lengths, hb.shape[1], w, hb.data.dtype)
    out = tn.Tensor(A) @ hb
    return out.reshape(out.shape[1:]) if single else out


def smooth_probs_m2(p, w: int, lengths=None):
    """``mean(p[u .. min(U, u+w-1)])`` along the last axis."""
    p = tn.as_tensor(p)
    if w == 1:
        return p
    single = p.ndim == 1
    pb = p.reshape(1, p.shape[0]) if single else p
    lead = pb.shape[:-1]
    U = pb.shape[-1]
    if lengths is None:
        A = future_average_matrix([U], U, w, pb.data.dtype)[0]
        out = pb @ tn.Tensor(A.T)
    else:
        A = future_average_matrix(lengths, U, w, pb.data.dtype)
        out = (tn.Tensor(A) @ pb.reshape(*lead, U, 1)).reshape(*lead, U)
    return out.reshape(U) if single else out


# ---------------------------------------------------------------------------
# Training-time expectations
# ---------------------------------------------------------------------------
def alignment_step(p: Tensor, alpha_prev: Tensor) -> Tensor:
    """One output step of the expected monotonic alignment.

    ``q_u = (1 - p_{u-1}) q_{u-1} + alpha_prev_u`` and ``alpha_u = p_u q_u``,
    the division-free form of the usual recurrence. Shapes (B, U).
    """
    p, alpha_prev = tn.as_tensor(p), tn.as_tensor(alpha_prev)
    if p.shape != alpha_prev.shape:
        raise ShapeError("alignment_step", p.shape, alpha_prev.shape)
    pd, ad = p.data, alpha_prev.data
    U = pd.shape[-1]
    q = np.empty_like(pd)
    q[..., 0] = ad[..., 0]
    for u in range(1, U):
        q[..., u] = (1.0 - pd[..., u - 1]) * q[..., u - 1] + ad[..., u]
    out = pd * q

    def backward(g):
        gp = np.empty_like(pd)
        ga = np.empty_like(ad)
        gq_next = np.zeros_like(pd[..., 0])
        for u in range(U - 1, -1, -1):
            gq = g[..., u] * pd[..., u] + gq_next * (1.0 - pd[..., u])
            gp[..., u] = g[..., u] * q[..., u] - gq_next * q[..., u]
            ga[..., u] = gq
            gq_next = gq
        return gp, ga

    return tn.custom_op(out, (p, alpha_prev), backward, "alignment_step")


def initial_alignment(batch: int, U: int, dtype=None) -> np.ndarray:
    a = np.zeros((batch, U), dtype=dtype or tn.get_default_dtype())
    a[:, 0] = 1.0
    return a


def expected_alignment(p) -> Tensor:
    """Expected boundary distribution for every output step; ``p`` is (I, U) or (B, I, U)."""
    p = tn.as_tensor(p)
    single = p.ndim == 2
    pb = p.reshape(1, *p.shape) if single else p
    B, I, U = pb.shape
    alpha = tn.Tensor(initial_alignment(B, U, pb.data.dtype))
    rows = []
    for i in range(I):
        alpha = alignment_step(pb[:, i, :], alpha)
        rows.append(alpha)
    out = tn.stack(rows, axis=1)
    return out.reshape(I, U) if single else out


def chunk_window_matrix(widths: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """``M[..., k, u] = 1`` iff ``k - W_k + 1 <= u <= k`` (clipped at 0).

    ``widths`` has shape (..., U); rows for invalid ``k`` are left empty.
    """
    widths = np.asarray(widths)
    U = widths.shape[-1]
    k = np.arange(U)[:, None]
    u = np.arange(U)[None, :]
    lo = k - widths[..., :, None] + 1
    M = (u <= k) & (u >= lo)
    if valid is not None:
        M = M & valid[..., :, None].astype(bool)
    return M.astype(tn.get_default_dtype())


def expected_chunk_attention(alpha, d, width, mask: np.ndarray | None = None) -> Tensor:
    """Chunkwise attention weights implied by the expected boundary distribution.

    ``beta_u = exp(d_u) * sum_{k: u in window(k)} alpha_k / sum_{l in window(k)} exp(d_l)``
    where ``window(k) = [k - W_k + 1, k]`` clipped at the sequence start. ``width``
    is an int or an integer array shaped like ``alpha`` (per-position lengths).
    """
    alpha, d = tn.as_tensor(alpha), tn.as_tensor(d)
    if alpha.shape != d.shape:
        raise ShapeError("expected_chunk_attention", alpha.shape, d.shape)
    U = alpha.shape[-1]
    widths = np.broadcast_to(np.asarray(width, dtype=np.int64), alpha.shape)
    if (widths < 1).any():
        raise ValueError("chunk lengths must be >= 1")
    valid = np.ones(alpha.shape) if mask is None else np.broadcast_to(mask, alpha.shape)
    M = tn.Tensor(chunk_window_matrix(widths, valid))
    return _beta_with_window(alpha, d, M, valid)


# ---------------------------------------------------------------------------
# Inference-time boundary scan
# ---------------------------------------------------------------------------
@dataclass
class MonotonicState:
    last_boundary: int = 0
    exhausted: bool = False

    def scan_start(self) -> int:
        """0-based position where the next scan begins (the previous boundary, inclusive)."""
        return max(0, self.last_boundary - 1)


def first_boundary(scores: np.ndarray, start: MonotonicState, prob_threshold: bool = False):
    """First 1-based position ``u >= start`` that is attended, or None.

    Without smoothing ``scores`` are energies and the test is ``e > 0``; with
    smoothed probabilities the test is ``p > 0.5``.
    """
    if start.exhausted:
        return None
    scores = np.asarray(scores)
    if start.last_boundary > len(scores):
        raise ValueError("start boundary beyond the listener sequence")
    tail = scores[start.scan_start():]
    hits = np.flatnonzero(tail > (0.5 if prob_threshold else 0.0))
    if hits.size == 0:
        return None
    return start.scan_start() + int(hits[0]) + 1


def monotonic_infer_boundary(params: MonotonicEnergyParams, s, h, start: MonotonicState,
                             smoothing: str = "none", w: int = 1):
    """Hard boundary decision for one output step; updates ``start`` in place."""
    e = monotonic_energy(params, s, h).data
    if smoothing == "m2" and w > 1:
        u = first_boundary(smooth_probs_m2(tn._sigmoid(e), w).data, start, prob_threshold=True)
    else:
        u = first_boundary(e, start)
    if u is None:
        start.exhausted = True
    else:
        start.last_boundary = u
    return u


# ---------------------------------------------------------------------------
# Mechanism configuration and parameters
# ---------------------------------------------------------------------------
@dataclass
class AttentionConfig:
    kind: str = "gsa"
    chunk: int = 10
    predictor: str = "constrained"
    w_max: int = 40
    activation: str = "relu"
    smoothing: str = "none"
    smoothing_w: int = 10
    att_dim: int = 512
    predictor_dim: int = 512
    train_noise: float = 0.0
    r_init: float = -4.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attention kind must be one of {KINDS}, got {self.kind!r}")
        if self.predictor not in PREDICTORS:
            raise ValueError(f"predictor must be one of {PREDICTORS}, got {self.predictor!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.smoothing not in SMOOTHING:
            raise ValueError(f"smoothing must be one of {SMOOTHING}, got {self.smoothing!r}")
        if self.chunk < 1 or self.smoothing_w < 1 or self.w_max < 1:
            raise ValueError("chunk, smoothing_w and w_max must be >= 1")

    @property
    def monotonic(self) -> bool:
        return self.kind != "gsa"

    @property
    def smooth_w(self) -> int:
        return self.smoothing_w if self.smoothing != "none" else 1


@dataclass
class Memory:
    """Per-batch listener outputs and everything precomputed from them."""

    h: Tensor
    lengths: np.ndarray
    mask: np.ndarray
    keys: Tensor
    mono_keys: Tensor | None = None
    pred_keys: Tensor | None = None
    m2: Tensor | None = None
    window: Tensor | None = None


@dataclass
class StepOutput:
    context: Tensor
    alpha: Tensor | None = None
    beta: Tensor | None = None
    expected_len: Tensor | None = None
    widths: np.ndarray | None = None


class Attender:
    def __init__(self, cfg: AttentionConfig, enc_dim: int, state_dim: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.energy = AdditiveEnergyParams.init(rng, enc_dim, state_dim, cfg.att_dim)
        self.mono = MonotonicEnergyParams.init(rng, enc_dim, state_dim, cfg.att_dim, cfg.r_init) if cfg.monotonic else None
        self.pred = (PredictorParams.init(rng, enc_dim, state_dim, cfg.predictor_dim)
                     if cfg.kind == "amocha" else None)

    def named_parameters(self) -> dict:
        out = self.energy.named("attention.energy")
        if self.mono is not None:
            out.update(self.mono.named("attention.mono"))
        if self.pred is not None:
            out.update(self.pred.named("attention.pred"))
        return out

    # -- shared ------------------------------------------------------------
    def prepare(self, h: Tensor, lengths) -> Memory:
        lengths = np.asarray(lengths, dtype=np.int64)
        B, U, _ = h.shape
        mask = (np.arange(U)[None, :] < lengths[:, None]).astype(h.data.dtype)
        mem = Memory(h=h, lengths=lengths, mask=mask, keys=h @ self.energy.w_h)
        cfg = self.cfg
        if cfg.monotonic:
            mono_in = smooth_features_m1(h, cfg.smoothing_w, lengths) if cfg.smoothing == "m1" else h
            mem.mono_keys = mono_in @ self.mono.w_h
            if cfg.smoothing == "m2" and cfg.smoothing_w > 1:
                mem.m2 = tn.Tensor(future_average_matrix(lengths, U, cfg.smoothing_w, h.data.dtype))
            if cfg.kind == "mocha":
                mem.window = tn.Tensor(chunk_window_matrix(np.full((B, U), cfg.chunk), mask))
        if cfg.kind == "amocha":
            mem.pred_keys = h @ self.pred.w_h
        return mem

    def attend_probs(self, s: Tensor, mem: Memory, rng=None, training=False) -> Tensor:
        """Attend probabilities for every position (after M2 smoothing when configured)."""
        e = monotonic_energy(self.mono, s, mem.h, keys=mem.mono_keys)
        if training and self.cfg.train_noise > 0 and rng is not None:
            e = e + rng.normal(0.0, self.cfg.train_noise, e.shape)
        p = tn.sigmoid(e)
        if training:
            p = tn.clip(p, P_EPS, 1.0 - P_EPS)
        if mem.m2 is not None:
            p = (mem.m2 @ (p * mem.mask).reshape(*p.shape, 1)).reshape(p.shape)
        return p * mem.mask if training else p

    def chunk_lengths(self, s: Tensor, mem: Memory) -> Tensor:
        cfg = self.cfg
        if cfg.predictor == "constrained":
            return predict_chunk_constrained(self.pred, s, mem.h, cfg.w_max, cfg.activation,
                                             keys=mem.pred_keys)
        return predict_chunk_unconstrained(self.pred, s, mem.h, cfg.activation,
                                           keys=mem.pred_keys, max_len=int(mem.h.shape[1]))

    # -- training ------------------------------------------------------------
    def initial_state(self, mem: Memory):
        if not self.cfg.monotonic:
            return None
        return tn.Tensor(initial_alignment(mem.h.shape[0], mem.h.shape[1], mem.h.data.dtype))

    def train_step(self, s: Tensor, mem: Memory, alpha_prev, rng=None):
        """Expected context for one output step. Returns (StepOutput, new alignment state)."""
        h = mem.h
        d = additive_energy(self.energy, s, h, keys=mem.keys)
        if not self.cfg.monotonic:
            beta = masked_softmax(d, mem.mask)
            ctx = (beta.reshape(beta.shape[0], 1, beta.shape[1]) @ h).reshape(h.shape[0], h.shape[2])
            return StepOutput(ctx, beta=beta), None
        p = self.attend_probs(s, mem, rng, training=True)
        alpha = alignment_step(p, alpha_prev)
        out = StepOutput(None, alpha=alpha)
        if self.cfg.kind == "mocha":
            window = mem.window
        else:
            w_raw = self.chunk_lengths(s, mem)
            out.widths = round_chunk(w_raw.data)
            out.expected_len = (alpha * w_raw).sum(axis=-1)
            window = tn.Tensor(chunk_window_matrix(out.widths, mem.mask))
        beta = _beta_with_window(alpha, d, window, mem.mask)
        out.beta = beta
        out.context = (beta.reshape(beta.shape[0], 1, beta.shape[1]) @ h).reshape(h.shape[0], h.shape[2])
        return out, alpha


def _beta_with_window(alpha: Tensor, d: Tensor, M: Tensor, mask: np.ndarray) -> Tensor:
    # max-shift per output step; every window of that step shares the same shift
    shift = np.where(mask > 0, d.data, -np.inf).max(axis=-1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    ed = tn.exp(d - shift) * mask
    denom = (M @ ed.reshape(*ed.shape, 1)).reshape(ed.shape) + (1.0 - mask)
    Mt = tn.transpose(M, tuple(range(M.ndim - 2)) + (M.ndim - 1, M.ndim - 2))
    spread = (Mt @ (alpha / denom).reshape(*alpha.shape, 1)).reshape(alpha.shape)
    return ed * spread
