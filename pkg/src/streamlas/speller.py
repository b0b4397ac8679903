"""Speller (decoder LSTM + output layer) and the full listen-attend-spell model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .attention import Attender, AttentionConfig, Memory
from .encoder import Encoder, EncoderStack, LSTMParams, lstm_step
from .tensor import Tensor

SOS, EOS, UNK = 0, 1, 2
N_SPECIAL = 3


class UnknownToken(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 6812
    embed_dim: int = 64
    speller_hidden: int = 512
    encoder: EncoderStack = field(default_factory=EncoderStack)
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderStack(**self.encoder)
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        if self.vocab_size <= N_SPECIAL:
            raise ValueError(f"vocab_size must exceed the {N_SPECIAL} special tokens")


class LASModel:
    """Listener, attender and speller parameters for one model."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg.encoder, rng)
        enc_dim = cfg.encoder.output_dim
        S = cfg.speller_hidden
        self.attender = Attender(cfg.attention, enc_dim, S, rng)
        self.embedding = tn.parameter(rng.uniform(-0.05, 0.05, (cfg.vocab_size, cfg.embed_dim)))
        self.lstm = LSTMParams.init(rng, cfg.embed_dim + enc_dim, S)
        self.out_w = tn.parameter(rng.uniform(-0.05, 0.05, (S + enc_dim, cfg.vocab_size)))
        self.out_b = tn.parameter(np.zeros(cfg.vocab_size))

    @property
    def enc_dim(self) -> int:
        return self.cfg.encoder.output_dim

    def named_parameters(self) -> dict:
        out = self.encoder.named_parameters()
        out.update(self.attender.named_parameters())
        out["speller.embedding"] = self.embedding
        out.update(self.lstm.named("speller.lstm"))
        out["speller.out_w"] = self.out_w
        out["speller.out_b"] = self.out_b
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_arrays(self, arrays: dict) -> list:
        """Copy matching arrays into the model; returns names left at their fresh init.

        Raises KeyError naming the first key whose shape disagrees.
        """
        params = self.named_parameters()
        for key, arr in arrays.items():
            if key not in params:
                continue
            if params[key].shape != tuple(arr.shape):
                raise KeyError(
                    f"checkpoint key {key!r} has shape {tuple(arr.shape)}, "
                    f"model expects {params[key].shape}")
        for key, arr in arrays.items():
            if key in params:
                params[key].data = np.asarray(arr, dtype=params[key].data.dtype).copy()
                params[key].zero_grad()
        return sorted(set(params) - set(arrays))

    # -- pieces ----------------------------------------------------------------
    def listen(self, x, lengths=None):
        return self.encoder(x, lengths)

    def prepare(self, h: Tensor, lengths) -> Memory:
        return self.attender.prepare(h, lengths)

    def initial_speller_state(self, batch: int):
        dtype = tn.get_default_dtype()
        S = self.cfg.speller_hidden
        return (tn.Tensor(np.zeros((batch, S), dtype)), tn.Tensor(np.zeros((batch, S), dtype)),
                tn.Tensor(np.zeros((batch, self.enc_dim), dtype)))

    def update_state(self, prev_tokens, state, prev_context):
        """Decoder recurrence ``s_i = LSTM(s_{i-1}, [embed(y_{i-1}); c_{i-1}])``."""
        prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
        if prev_tokens.min(initial=0) < 0 or prev_tokens.max(initial=0) >= self.cfg.vocab_size:
            raise UnknownToken(f"token id outside vocabulary of {self.cfg.vocab_size}")
        emb = tn.gather_rows(self.embedding, prev_tokens)
        return lstm_step(tn.concat([emb, prev_context], axis=-1), state, self.lstm)

    def logits(self, s: Tensor, context: Tensor) -> Tensor:
        return tn.concat([s, context], axis=-1) @ self.out_w + self.out_b

    def load_state_from(self, other: "LASModel") -> list:
        return self.load_arrays(other.state_arrays())


def speller_step(model: LASModel, prev_token, prev_state, prev_context, h, att_state=None):
    """One decode step for a single hypothesis against full listener outputs ``h`` (U, D).

    Returns ``(state, context, log_probs, att_state)``; the attention follows
    the model's configured mechanism in inference mode.
    """
    from .decoding import attend_inference, UtteranceMemory

    with tn.no_grad():
        mem = UtteranceMemory.build(model, tn.as_tensor(h).data)
        s_h, s_c = model.update_state([prev_token], prev_state, prev_context)
        res = attend_inference(model, s_h, mem, [att_state], ended=True)[0]
        ctx = tn.Tensor(res.context[None, :])
        logp = tn.log_softmax(model.logits(s_h, ctx), axis=-1).data[0]
    return (s_h, s_c), ctx, logp, res.state


@dataclass
class TrainOutputs:
    logits: Tensor  # (B, I, V)
    targets: np.ndarray  # (B, I), EOS appended, padded with EOS
    mask: np.ndarray  # (B, I)
    expected_len: Tensor | None = None  # (B, I) for adaptive chunks
    alphas: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    widths: list = field(default_factory=list)
    enc_lengths: np.ndarray | None = None


def pad_targets(targets: list):
    I = max(len(t) for t in targets) + 1
    out = np.full((len(targets), I), EOS, dtype=np.int64)
    mask = np.zeros((len(targets), I))
    for b, t in enumerate(targets):
        out[b, :len(t)] = t
        mask[b, :len(t) + 1] = 1.0
    return out, mask


def forward_train(model: LASModel, feats: np.ndarray, lengths, targets: list,
                  ss_rate: float = 0.0, rng=None, keep_attention: bool = False) -> TrainOutputs:
    """Teacher-forced (optionally scheduled-sampled) pass over a padded batch.

    Feedback tokens are the ground truth or, with probability ``ss_rate`` per
    token, the argmax of the previous step's output.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = tn.Tensor(feats)
    h, enc_len = model.listen(x, lengths)
    mem = model.prepare(h, enc_len)
    tgt, mask = pad_targets(targets)
    B, I = tgt.shape
    s_h, s_c, ctx = model.initial_speller_state(B)
    att = model.attender.initial_state(mem)
    prev = np.full(B, SOS, dtype=np.int64)
    logits, explens = [], []
    out = TrainOutputs(None, tgt, mask, enc_lengths=enc_len)
    for i in range(I):
        s_h, s_c = model.update_state(prev, (s_h, s_c), ctx)
        step, att = model.attender.train_step(s_h, mem, att, rng)
        ctx = step.context
        lg = model.logits(s_h, ctx)
        logits.append(lg)
        if step.expected_len is not None:
            explens.append(step.expected_len)
        if keep_attention:
            out.alphas.append(None if step.alpha is None else step.alpha.data)
            out.betas.append(step.beta.data)
            out.widths.append(step.widths)
        prev = tgt[:, i].copy()
        if ss_rate > 0:
            use_model = rng.random(B) < ss_rate
            prev[use_model] = lg.data[use_model].argmax(axis=-1)
    out.logits = tn.stack(logits, axis=1)
    if explens:
        out.expected_len = tn.stack(explens, axis=1)
    return out
