"""Greedy, beam and streaming decoders.

All decoders share :func:`attend_inference`, which applies the hard monotonic
boundary test (or global soft attention) to whatever listener outputs are
final. In the streaming decoder "final" means every raw frame the output
depends on has been read; offline decoders see everything at once.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as tn
from .attention import (MonotonicState, chunk_weights, first_boundary, round_chunk)
from .encoder import SequenceTooShort
from .speller import EOS, SOS, LASModel


@dataclass
class UtteranceMemory:
    """Final listener outputs of one utterance plus attention projections."""

    h: np.ndarray  # (U_a, D)
    ended: bool
    keys: np.ndarray
    mono_keys: np.ndarray | None
    pred_keys: np.ndarray | None
    decidable: int  # positions whose boundary test is final

    @classmethod
    def build(cls, model: LASModel, h: np.ndarray, ended: bool = True):
        att = model.attender
        cfg = att.cfg
        U = len(h)
        w = cfg.smooth_w
        decidable = U if ended else max(0, U - (w - 1))
        mono_keys = pred_keys = None
        if cfg.monotonic:
            src = h
            if cfg.smoothing == "m1" and w > 1:
                src = np.stack([h[u:min(U, u + w)].mean(axis=0) for u in range(U)]) if U else h
            mono_keys = src @ att.mono.w_h.data
        if cfg.kind == "amocha":
            pred_keys = h @ att.pred.w_h.data
        return cls(h, ended, h @ att.energy.w_h.data, mono_keys, pred_keys, decidable)


@dataclass
class AttendResult:
    pending: bool = False
    context: np.ndarray | None = None
    state: MonotonicState | None = None
    boundary: int | None = None  # 1-based; None = end of input
    width: int | None = None
    weights: np.ndarray | None = None


def _energy(params, s: np.ndarray, keys: np.ndarray) -> np.ndarray:
    hid = np.tanh(keys[None, :, :] + (s @ params.w_s.data + params.b.data)[:, None, :])
    return hid


def _future_mean(p: np.ndarray, w: int, upto: int) -> np.ndarray:
    U = p.shape[-1]
    return np.stack([p[..., u:min(U, u + w)].mean(axis=-1) for u in range(upto)], axis=-1) \
        if upto else p[..., :0]


def attend_inference(model: LASModel, s, mem: UtteranceMemory, states: list, ended: bool | None = None):
    """Hard-decision attention for ``n`` hypotheses with decoder states ``s`` (n, S)."""
    s = tn.as_tensor(s).data
    att = model.attender
    cfg = att.cfg
    ended = mem.ended if ended is None else ended
    h = mem.h
    U, n = len(h), s.shape[0]
    D = h.shape[1] if h.ndim == 2 else model.enc_dim
    if U == 0 and ended:
        return [AttendResult(context=np.zeros(D), state=copy.copy(st), boundary=None,
                             weights=np.zeros(0)) for st in states]
    d = _energy(att.energy, s, mem.keys) @ att.energy.v.data if U else np.zeros((n, 0))
    if not cfg.monotonic:
        if not ended:
            return [AttendResult(pending=True) for _ in states]
        z = d - d.max(axis=-1, keepdims=True)
        wts = np.exp(z)
        wts /= wts.sum(axis=-1, keepdims=True)
        return [AttendResult(context=wts[j] @ h, weights=wts[j]) for j in range(n)]

    mono = att.mono
    v = mono.v.data / np.sqrt((mono.v.data ** 2).sum())
    e = (_energy(mono, s, mem.mono_keys) @ v) * mono.g.data + mono.r.data if U else np.zeros((n, 0))
    w = cfg.smooth_w
    use_probs = cfg.smoothing == "m2" and w > 1
    scores = _future_mean(tn._sigmoid(e), w, mem.decidable) if use_probs else e[:, :mem.decidable]
    results = []
    for j, st in enumerate(states):
        st = copy.copy(st) if st is not None else MonotonicState()
        if st.exhausted:
            results.append(AttendResult(context=np.zeros(D), state=st, weights=np.zeros(U)))
            continue
        u = first_boundary(scores[j], st, prob_threshold=use_probs) if st.scan_start() < mem.decidable else None
        if u is None:
            if not ended:
                results.append(AttendResult(pending=True))
                continue
            st.exhausted = True
            results.append(AttendResult(context=np.zeros(D), state=st, weights=np.zeros(U)))
            continue
        st.last_boundary = u
        if cfg.kind == "mocha":
            width = cfg.chunk
        else:
            width = int(round_chunk(_predict_width(att, s[j], mem.pred_keys[u - 1], U)))
        wts = chunk_weights(d[j], u, width)
        results.append(AttendResult(context=wts @ h, state=st, boundary=u, width=width, weights=wts))
    return results


def _predict_width(att, s_row: np.ndarray, key: np.ndarray, U: int) -> float:
    cfg = att.cfg
    pre = key + s_row @ att.pred.w_s.data + att.pred.b.data
    act = np.maximum(pre, 0.0) if cfg.activation == "relu" else np.tanh(pre)
    z = float(act @ att.pred.v_p.data)
    if cfg.predictor == "constrained":
        return cfg.w_max * float(tn._sigmoid(np.array(z)))
    return float(np.exp(min(z, np.log(max(U, 1)) + 1.0)))


# ---------------------------------------------------------------------------
# Offline decoders
# ---------------------------------------------------------------------------
@dataclass
class DecodeResult:
    tokens: list
    score: float
    boundaries: list = field(default_factory=list)
    widths: list = field(default_factory=list)
    weights: list = field(default_factory=list)


def encode_utterance(model: LASModel, x: np.ndarray) -> np.ndarray:
    with tn.no_grad():
        h, _ = model.listen(tn.Tensor(np.asarray(x)))
    return h.data


MAX_LEN_SLACK = 10


def default_max_len(U: int) -> int:
    return U + MAX_LEN_SLACK


def within_default_cap(n_tokens: int, boundary: int | None, U: int) -> bool:
    """Whether the ``n_tokens``-th output may attend ``boundary`` under the default length cap.

    The ``k``-th token may be emitted only while ``k <= u + slack``, where ``u``
    is the 1-based boundary it attends (``U`` for global attention or an
    exhausted scan). The cap depends only on what the token itself reads, so
    offline and streaming decoders stop at the same place, and the total never
    exceeds ``U + slack``.
    """
    u = U if boundary is None else boundary
    return n_tokens <= u + MAX_LEN_SLACK


def greedy_decode(model: LASModel, x, max_len: int | None = None, h: np.ndarray | None = None) -> DecodeResult:
    """Argmax decoding until EOS or ``max_len`` tokens; ties go to the lowest token id."""
    if h is None:
        try:
            h = encode_utterance(model, x)
        except SequenceTooShort:
            return DecodeResult([], 0.0)
    capped = max_len is None
    max_len = default_max_len(len(h)) if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    mem = UtteranceMemory.build(model, h, ended=True)
    res = DecodeResult([], 0.0)
    with tn.no_grad():
        s_h, s_c, ctx = model.initial_speller_state(1)
        prev, st = SOS, MonotonicState()
        for _ in range(max_len):
            s_h, s_c = model.update_state([prev], (s_h, s_c), ctx)
            a = attend_inference(model, s_h, mem, [st])[0]
            if capped and not within_default_cap(len(res.tokens) + 1, a.boundary, len(h)):
                break
            st = a.state
            ctx = tn.Tensor(a.context[None, :])
            logp = tn.log_softmax(model.logits(s_h, ctx), axis=-1).data[0]
            tok = int(np.argmax(logp))
            res.score += float(logp[tok])
            if tok == EOS:
                break
            res.tokens.append(tok)
            res.boundaries.append(a.boundary)
            res.widths.append(a.width)
            res.weights.append(a.weights)
            prev = tok
    return res


@dataclass
class _Hyp:
    tokens: list
    score: float
    state: object
    info: list


def beam_search_core(step, init_state, beam: int = 5, temperature: float = 1.0,
                     max_len: int = 10, allow=None):
    """Length-synchronous beam search over an arbitrary scorer.

    ``step(prev_tokens, states)`` returns ``(logits (n, V), new_states, infos)``
    for the ``n`` open hypotheses. Per-step scores are
    ``log_softmax(logits / temperature)``. Hypotheses that emit EOS are frozen;
    the search stops once the best frozen score is at least every open score,
    or after ``max_len`` steps. Returns ``(tokens, score, infos)`` of the best
    hypothesis, without SOS/EOS. Ties go to the earlier hypothesis and then
    the lower token id. With ``allow(n_tokens, info)`` a hypothesis whose next
    step is not allowed ends where it is, without an EOS step.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    live = [_Hyp([SOS], 0.0, init_state, [])]
    finished: list = []
    for _ in range(max_len):
        if not live:
            break
        logits, states, infos = step([hy.tokens[-1] for hy in live], [hy.state for hy in live])
        if allow is not None:
            keep = [j for j, hy in enumerate(live) if allow(len(hy.tokens), infos[j])]
            finished += [hy for j, hy in enumerate(live) if j not in keep]
            live = [live[j] for j in keep]
            if not live:
                break
            logits = np.asarray(logits)[keep]
            states = [states[j] for j in keep]
            infos = [infos[j] for j in keep]
        z = np.asarray(logits, dtype=float) / temperature
        z = z - z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        V = logp.shape[1]
        total = np.array([hy.score for hy in live])[:, None] + logp
        flat = total.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:beam]
        new_live = []
        for idx in order:
            j, tok = divmod(int(idx), V)
            parent = live[j]
            hyp = _Hyp(parent.tokens + [tok], float(flat[idx]), states[j], parent.info + [infos[j]])
            (finished if tok == EOS else new_live).append(hyp)
        live = new_live
        if finished and live and max(f.score for f in finished) >= max(hy.score for hy in live):
            break
    pool = finished if finished else live
    best = max(pool, key=lambda hy: hy.score)
    tokens = [t for t in best.tokens[1:] if t != EOS]
    return tokens, best.score, best.info[:len(tokens)]


def beam_search(model: LASModel, x, beam: int = 5, temperature: float = 1.0,
                max_len: int | None = None, h: np.ndarray | None = None) -> DecodeResult:
    """Beam search for a LAS model (no length normalisation, no language model)."""
    if h is None:
        try:
            h = encode_utterance(model, x)
        except SequenceTooShort:
            return DecodeResult([], 0.0)
    U = len(h)
    allow = None
    if max_len is None:
        max_len = default_max_len(U)
        allow = lambda n, boundary: within_default_cap(n, boundary, U)  # noqa: E731
    mem = UtteranceMemory.build(model, h, ended=True)
    S, D = model.cfg.speller_hidden, model.enc_dim
    init = (np.zeros(S), np.zeros(S), np.zeros(D), MonotonicState())

    def step(prev, states):
        hs = tn.Tensor(np.stack([st[0] for st in states]))
        cs = tn.Tensor(np.stack([st[1] for st in states]))
        ctxs = tn.Tensor(np.stack([st[2] for st in states]))
        s_h, s_c = model.update_state(prev, (hs, cs), ctxs)
        atts = attend_inference(model, s_h, mem, [st[3] for st in states])
        ctx = tn.Tensor(np.stack([a.context for a in atts]))
        logits = model.logits(s_h, ctx).data
        new = [(s_h.data[j], s_c.data[j], atts[j].context, atts[j].state) for j in range(len(states))]
        return logits, new, [a.boundary for a in atts]

    with tn.no_grad():
        tokens, score, bnd = beam_search_core(step, init, beam, temperature, max_len, allow)
    return DecodeResult(tokens, score, boundaries=bnd)


# ---------------------------------------------------------------------------
# Streaming decoder
# ---------------------------------------------------------------------------
@dataclass
class TokenRecord:
    token: int
    boundary_u: int
    chunk_len: int | None
    frames_consumed: int


@dataclass
class StreamTrace:
    records: list = field(default_factory=list)
    total_frames: int = 0
    listener_len: int = 0
    error: str | None = None

    @property
    def tokens(self) -> list:
        return [r.token for r in self.records]


def streaming_decode(frame_source: Iterable, model: LASModel,
                     emit_sink: Callable | None = None, max_len: int | None = None) -> StreamTrace:
    """Greedy decoding while frames arrive one at a time.

    The listener is re-run on the buffered prefix whenever more of its outputs
    become final (i.e. once a further LC block and its right context have
    arrived); outputs, once final, are frozen. Each emitted token records
    how many raw frames had been read when it was emitted.
    """
    stack = model.cfg.encoder
    trace = StreamTrace()
    frames: list = []
    h_final = np.zeros((0, model.enc_dim))
    ended = False
    source = iter(frame_source)
    mem = None
    mem_key = None

    S = model.cfg.speller_hidden
    with tn.no_grad():
        s_h, s_c, ctx = model.initial_speller_state(1)
        prev, st = SOS, MonotonicState()
        stepped = False  # speller state already advanced for the pending step
        n_emitted = 0
        while True:
            if not ended:
                try:
                    frames.append(np.asarray(next(source), dtype=tn.get_default_dtype()))
                except StopIteration:
                    ended = True
                except Exception as exc:  # source failure: keep what was decoded
                    trace.error = f"{type(exc).__name__}: {exc}"
                    break
            h_final = _refresh_listener(model, stack, frames, h_final, ended)
            if (len(h_final), ended) != mem_key:
                mem = UtteranceMemory.build(model, h_final, ended)
                mem_key = (len(h_final), ended)
            if ended and len(frames) < stack.min_frames():
                break
            done = False
            while True:
                if max_len is not None and n_emitted >= max_len:
                    done = True
                    break
                if not stepped:
                    s_h, s_c = model.update_state([prev], (s_h, s_c), ctx)
                    stepped = True
                a = attend_inference(model, s_h, mem, [st])[0]
                if a.pending:
                    break
                if max_len is None and not within_default_cap(n_emitted + 1, a.boundary, len(h_final)):
                    done = True
                    break
                stepped = False
                st = a.state
                ctx = tn.Tensor(a.context[None, :])
                logp = tn.log_softmax(model.logits(s_h, ctx), axis=-1).data[0]
                tok = int(np.argmax(logp))
                if tok == EOS:
                    done = True
                    break
                bnd = a.boundary if a.boundary is not None else len(h_final)
                rec = TokenRecord(tok, bnd, a.width, len(frames))
                trace.records.append(rec)
                n_emitted += 1
                if emit_sink is not None:
                    emit_sink(rec)
                prev = tok
            if done or ended:
                break
    trace.total_frames = len(frames)
    trace.listener_len = len(h_final)
    return trace


def _final_count(stack, n_frames: int, ended: bool) -> int:
    U = stack.output_length(n_frames) if n_frames >= stack.min_frames() else 0
    if ended:
        return U
    count = 0
    while count < U:
        need, needs_end = stack.frames_needed(count)
        if needs_end or need > n_frames:
            break
        count += 1
    return count


def _refresh_listener(model, stack, frames, h_final, ended):
    n_final = _final_count(stack, len(frames), ended)
    if n_final <= len(h_final):
        return h_final
    h = encode_utterance(model, np.stack(frames))
    return np.concatenate([h_final, h[len(h_final):n_final]], axis=0)


def latency_bound(stack, boundary_u: int, w: int) -> int:
    """Raw frames a token at ``boundary_u`` may read: ``4u + 4w + Nc + Nr`` for 4x subsampling."""
    return stack.subsampling * (boundary_u + w) + stack.lc_block + stack.lc_right
