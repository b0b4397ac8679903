"""Listener: LSTM / BLSTM / latency-controlled BLSTM layers with pyramid subsampling.

All layer functions take batched input ``(B, T, d)`` plus integer ``lengths``;
padded frames produce unspecified outputs that callers must mask. Unbatched
``(T, d)`` input is accepted for convenience and returned unbatched.

Gate order inside the packed LSTM weights is input, forget, cell, output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor, ShapeError


class SequenceTooShort(ValueError):
    pass


# ---------------------------------------------------------------------------
# LSTM primitives
# ---------------------------------------------------------------------------
@dataclass
class LSTMParams:
    w_x: Tensor  # (d_in, 4H)
    w_h: Tensor  # (H, 4H)
    b: Tensor  # (4H,)

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[0]

    @classmethod
    def init(cls, rng, d_in: int, hidden: int, scale: float = 0.05):
        return cls(
            tn.parameter(rng.uniform(-scale, scale, (d_in, 4 * hidden))),
            tn.parameter(rng.uniform(-scale, scale, (hidden, 4 * hidden))),
            tn.parameter(np.zeros(4 * hidden)),
        )

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h, f"{prefix}.b": self.b}


def _gates(z: np.ndarray, hidden: int):
    i = tn._sigmoid(z[..., :hidden])
    f = tn._sigmoid(z[..., hidden:2 * hidden])
    g = np.tanh(z[..., 2 * hidden:3 * hidden])
    o = tn._sigmoid(z[..., 3 * hidden:])
    return i, f, g, o


def lstm_cell(z: Tensor, c_prev: Tensor) -> Tensor:
    """Fused LSTM nonlinearity.

    Takes the packed gate pre-activations ``z`` (B, 4H) and the previous cell
    ``c_prev`` (B, H); returns ``concat(h, c)`` of shape (B, 2H).
    """
    hidden = c_prev.shape[-1]
    if z.shape[-1] != 4 * hidden or z.shape[:-1] != c_prev.shape[:-1]:
        raise ShapeError("lstm_cell", z.shape, c_prev.shape)
    i, f, g, o = _gates(z.data, hidden)
    cp = c_prev.data
    c = f * cp + i * g
    tc = np.tanh(c)
    h = o * tc

    def backward(grad):
        dh, dc = grad[..., :hidden], grad[..., hidden:]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * cp * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ], axis=-1)
        return dz, dc * f

    return tn.custom_op(np.concatenate([h, c], axis=-1), (z, c_prev), backward, "lstm_cell")


def lstm_step(x: Tensor, state, params: LSTMParams):
    """One LSTM step: ``(x, (h, c)) -> (h', c')``."""
    h, c = state
    if x.shape[-1] != params.input_dim:
        raise ShapeError("lstm_step input", x.shape, params.w_x.shape)
    if h.shape[-1] != params.hidden or c.shape[-1] != params.hidden:
        raise ShapeError("lstm_step state", h.shape, params.w_h.shape)
    z = x @ params.w_x + h @ params.w_h + params.b
    hc = lstm_cell(z, c)
    H = params.hidden
    return hc[..., :H], hc[..., H:]


def lstm_scan(xproj: Tensor, w_h: Tensor) -> Tensor:
    """Run an LSTM over time from a zero state.

    ``xproj`` (B, T, 4H) holds input projections with bias already added.
    Returns hidden outputs (B, T, H). Backward is hand-written BPTT.
    """
    B, T, H4 = xproj.shape
    H = H4 // 4
    if w_h.shape != (H, H4):
        raise ShapeError("lstm_scan", xproj.shape, w_h.shape)
    xp, wh = xproj.data, w_h.data
    dtype = xp.dtype
    hs = np.zeros((B, T + 1, H), dtype=dtype)
    cs = np.zeros((B, T + 1, H), dtype=dtype)
    acts = np.empty((B, T, H4), dtype=dtype)
    for t in range(T):
        z = xp[:, t] + hs[:, t] @ wh
        i, f, g, o = _gates(z, H)
        acts[:, t, :H], acts[:, t, H:2 * H], acts[:, t, 2 * H:3 * H], acts[:, t, 3 * H:] = i, f, g, o
        cs[:, t + 1] = f * cs[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])

    def backward(grad):
        dxp = np.empty_like(xp)
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            i, f = acts[:, t, :H], acts[:, t, H:2 * H]
            g, o = acts[:, t, 2 * H:3 * H], acts[:, t, 3 * H:]
            tc = np.tanh(cs[:, t + 1])
            dh = grad[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dxp[:, t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dwh += hs[:, t].T @ dz
            dh_next = dz @ wh.T
            dc_next = dc * f
        return dxp, dwh

    return tn.custom_op(hs[:, 1:].copy(), (xproj, w_h), backward, "lstm_scan")


def _run_lstm(x: Tensor, params: LSTMParams) -> Tensor:
    if x.shape[-1] != params.input_dim:
        raise ShapeError("lstm layer input", x.shape, params.w_x.shape)
    return lstm_scan(x @ params.w_x + params.b, params.w_h)


# ---------------------------------------------------------------------------
# Frame arrangement
# ---------------------------------------------------------------------------
def _batched(x):
    x = tn.as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def _lengths(x: Tensor, lengths):
    if lengths is None:
        return np.full(x.shape[0], x.shape[1], dtype=np.int64)
    return np.asarray(lengths, dtype=np.int64)


def stack_frames(x, factor: int, lengths=None):
    """Concatenate every ``factor`` consecutive frames; a partial tail group is dropped."""
    x, single = _batched(x)
    lengths = _lengths(x, lengths)
    B, T, d = x.shape
    n = T // factor
    if n < 1:
        raise SequenceTooShort(f"need at least {factor} frames to stack, got {T}")
    out = x[:, :n * factor].reshape(B, n, factor * d)
    if single:
        return out.reshape(n, factor * d), lengths // factor
    return out, lengths // factor


def pyramid_reduce(seq, lengths=None):
    """``out[t] = concat(seq[2t], seq[2t+1])``; an odd trailing frame is dropped."""
    x, _ = _batched(seq)
    if x.shape[1] < 2:
        raise SequenceTooShort(f"pyramid_reduce needs T >= 2, got T={x.shape[1]}")
    return stack_frames(seq, 2, lengths)


def lc_arrange(seq, n_c: int, n_r: int) -> list:
    """Split frames into blocks of ``n_c`` frames, each followed by ``n_r`` look-ahead frames."""
    if n_c < 1 or n_r < 0:
        raise ValueError(f"need Nc >= 1 and Nr >= 0, got Nc={n_c}, Nr={n_r}")
    T = len(seq)
    return [seq[start:min(T, start + n_c + n_r)] for start in range(0, T, n_c)]


def _reverse_index(lengths: np.ndarray, T: int) -> np.ndarray:
    """Per-row time reversal within each row's valid length; padding stays put."""
    t = np.arange(T)[None, :]
    L = lengths[:, None]
    return np.where(t < L, L - 1 - t, t)


def lstm_layer(x, params: LSTMParams, lengths=None) -> Tensor:
    x, single = _batched(x)
    out = _run_lstm(x, params)
    return out.reshape(out.shape[1:]) if single else out


def _backward_direction(x: Tensor, params: LSTMParams, lengths: np.ndarray) -> Tensor:
    T = x.shape[1]
    idx = _reverse_index(lengths, T)[..., None]
    rev = tn.take_along(x, idx, axis=1)
    out = _run_lstm(rev, params)
    return tn.take_along(out, idx, axis=1)


def blstm_layer(x, fwd: LSTMParams, bwd: LSTMParams, lengths=None) -> Tensor:
    x, single = _batched(x)
    lengths = _lengths(x, lengths)
    out = tn.concat([_run_lstm(x, fwd), _backward_direction(x, bwd, lengths)], axis=-1)
    return out.reshape(out.shape[1:]) if single else out


def _lc_gather_plan(lengths: np.ndarray, T: int, n_c: int, n_r: int):
    """Index tables mapping utterance frames to reversed LC blocks and back.

    Returns ``(src, block_len, back)`` where ``src[m, j]`` is the flat frame
    index (b*T + t) feeding position ``j`` of reversed block ``m`` and
    ``back[b, t]`` is the flat position (m*L + j) holding frame t's output.
    """
    B = len(lengths)
    L = n_c + n_r
    n_blocks = max(1, -(-T // n_c))
    src = np.zeros((B * n_blocks, L), dtype=np.int64)
    blen = np.zeros(B * n_blocks, dtype=np.int64)
    back = np.zeros((B, T), dtype=np.int64)
    for b in range(B):
        Tb = int(lengths[b])
        for k in range(n_blocks):
            m = b * n_blocks + k
            start = k * n_c
            end = min(Tb, start + L)
            n = max(0, end - start)
            blen[m] = n
            # reversed order: position j holds frame end-1-j
            frames = np.arange(end - 1, start - 1, -1)
            src[m, :n] = b * T + frames
            src[m, n:] = b * T + (frames[0] if n else 0)
            main_end = min(Tb, start + n_c)
            for t in range(start, main_end):
                back[b, t] = m * L + (end - 1 - t)
        back[b, Tb:] = 0
    return src, blen, back


def lc_blstm_layer(x, fwd: LSTMParams, bwd: LSTMParams, n_c: int, n_r: int, lengths=None) -> Tensor:
    """Latency-controlled BLSTM layer.

    The forward LSTM runs over the whole sequence. The backward LSTM restarts
    from a zero state at the right edge of every block (block start + Nc + Nr,
    clipped to the sequence end); only its outputs for the block's first Nc
    frames are kept.
    """
    if n_c < 1 or n_r < 0:
        raise ValueError(f"need Nc >= 1 and Nr >= 0, got Nc={n_c}, Nr={n_r}")
    x, single = _batched(x)
    lengths = _lengths(x, lengths)
    B, T, d = x.shape
    forward = _run_lstm(x, fwd)
    src, _, back = _lc_gather_plan(lengths, T, n_c, n_r)
    L = n_c + n_r
    flat = x.reshape(B * T, d)
    blocks = tn.gather_rows(flat, src.reshape(-1)).reshape(src.shape[0], L, d)
    bout = _run_lstm(blocks, bwd)
    H = bwd.hidden
    backward = tn.gather_rows(bout.reshape(src.shape[0] * L, H), back.reshape(-1)).reshape(B, T, H)
    out = tn.concat([forward, backward], axis=-1)
    return out.reshape(out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# Encoder stack
# ---------------------------------------------------------------------------
DIRECTIONS = ("uni", "bi", "lc")


@dataclass
class LayerSpec:
    direction: str = "bi"
    hidden: int = 256
    pyramid_input: bool = False

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"layer direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.hidden < 1:
            raise ValueError("hidden units must be positive")

    @property
    def out_dim(self) -> int:
        return self.hidden if self.direction == "uni" else 2 * self.hidden


def paper_layers(direction: str = "bi", hidden: int = 256) -> list:
    """Four recurrent layers with pyramid inputs on the third and fourth."""
    return [LayerSpec(direction, hidden, pyramid_input=i >= 2) for i in range(4)]


@dataclass
class EncoderStack:
    """Layer layout plus LC block sizes.

    ``lc_block`` and ``lc_right`` are counted in raw input frames; an LC layer
    whose input is subsampled by ``f`` uses ``lc_block // f`` and ``lc_right // f``.
    ``frame_stack`` concatenates that many raw frames before the first layer.
    """

    input_dim: int = 200
    layers: list = field(default_factory=paper_layers)
    lc_block: int = 64
    lc_right: int = 32
    frame_stack: int = 1

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        if not self.layers:
            raise ValueError("encoder needs at least one layer")
        if self.frame_stack < 1:
            raise ValueError("frame_stack must be >= 1")
        for i, (layer, f) in enumerate(zip(self.layers, self.input_factors())):
            if layer.direction != "lc":
                continue
            if self.lc_block % f or self.lc_right % f or self.lc_block // f < 1:
                raise ValueError(
                    f"layer {i}: LC sizes Nc={self.lc_block}, Nr={self.lc_right} "
                    f"not divisible by its subsampling factor {f}")

    def input_factors(self) -> list:
        factors, f = [], self.frame_stack
        for layer in self.layers:
            if layer.pyramid_input:
                f *= 2
            factors.append(f)
        return factors

    @property
    def subsampling(self) -> int:
        return self.input_factors()[-1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def output_length(self, T: int) -> int:
        n = T // self.frame_stack
        for layer in self.layers:
            if layer.pyramid_input:
                n //= 2
        return n

    def min_frames(self) -> int:
        """Fewest raw frames for which every layer sees at least one frame."""
        T = 1
        while self.output_length(T) < 1 or not self._pyramids_ok(T):
            T += 1
        return T

    def _pyramids_ok(self, T: int) -> bool:
        n = T // self.frame_stack
        for layer in self.layers:
            if layer.pyramid_input:
                if n < 2:
                    return False
                n //= 2
        return n >= 1

    def frames_needed(self, j: int):
        """Raw frames that must be read before listener output ``j`` (0-based) is final.

        Returns ``(count, needs_end)``: the output is final once ``count`` raw
        frames are available, or once the stream has ended. ``needs_end`` is
        True when only the end of the stream makes it final (bidirectional
        layers).
        """
        lo_hi = j  # highest index needed at the current level
        for layer, f in zip(reversed(self.layers), reversed(self.input_factors())):
            if layer.direction == "bi":
                return None, True
            if layer.direction == "lc":
                n_c, n_r = self.lc_block // f, self.lc_right // f
                lo_hi = (lo_hi // n_c) * n_c + n_c + n_r - 1
            if layer.pyramid_input:
                lo_hi = 2 * lo_hi + 1
        lo_hi = self.frame_stack * lo_hi + self.frame_stack - 1
        return lo_hi + 1, False


class Encoder:
    """Parameters and forward pass for an :class:`EncoderStack`."""

    def __init__(self, stack: EncoderStack, rng=None):
        self.stack = stack
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layers = []
        d = stack.input_dim * stack.frame_stack
        for spec in stack.layers:
            if spec.pyramid_input:
                d *= 2
            fwd = LSTMParams.init(rng, d, spec.hidden)
            bwd = LSTMParams.init(rng, d, spec.hidden) if spec.direction != "uni" else None
            self.layers.append((fwd, bwd))
            d = spec.out_dim

    def named_parameters(self) -> dict:
        out = {}
        for i, (fwd, bwd) in enumerate(self.layers):
            out.update(fwd.named(f"encoder.{i}.fwd"))
            if bwd is not None:
                out.update(bwd.named(f"encoder.{i}.bwd"))
        return out

    def __call__(self, x, lengths=None):
        return listen(x, self, lengths)


def listen(x, encoder: Encoder, lengths=None):
    """Apply the stack: ``(B, T, d_in) -> ((B, U, d_enc), output lengths)``."""
    stack = encoder.stack
    x, single = _batched(x)
    lengths = _lengths(x, lengths)
    if x.shape[-1] != stack.input_dim:
        raise ShapeError("listen input", x.shape, (None, None, stack.input_dim))
    if int(lengths.min()) < stack.min_frames():
        raise SequenceTooShort(
            f"sequence of {int(lengths.min())} frames is too short for this stack "
            f"(needs >= {stack.min_frames()})")
    if stack.frame_stack > 1:
        x, lengths = stack_frames(x, stack.frame_stack, lengths)
    for spec, f, (fwd, bwd) in zip(stack.layers, stack.input_factors(), encoder.layers):
        if spec.pyramid_input:
            x, lengths = pyramid_reduce(x, lengths)
        T = int(lengths.max())
        if x.shape[1] > T:
            x = x[:, :T]
        if spec.direction == "uni":
            x = lstm_layer(x, fwd, lengths)
        elif spec.direction == "bi":
            x = blstm_layer(x, fwd, bwd, lengths)
        else:
            x = lc_blstm_layer(x, fwd, bwd, stack.lc_block // f, stack.lc_right // f, lengths)
    if single:
        return x.reshape(x.shape[1:]), lengths
    return x, lengths
