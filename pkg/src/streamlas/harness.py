"""Toy transduction task, CER, latency accounting and the table experiments."""

from __future__ import annotations

import base64
import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .speller import N_SPECIAL

log = logging.getLogger(__name__)


@dataclass
class ToyUtterance:
    id: str
    frames: np.ndarray  # (T, d)
    targets: list
    true_durations: list

    def token_end_frames(self) -> list:
        """Exclusive end frame of every token."""
        return list(np.cumsum(self.true_durations))

    def to_json(self) -> str:
        payload = base64.b64encode(np.asarray(self.frames, dtype="<f4").tobytes()).decode("ascii")
        return json.dumps({
            "id": self.id, "T": int(self.frames.shape[0]), "d": int(self.frames.shape[1]),
            "frames": payload, "targets": [int(t) for t in self.targets],
            "true_durations": [int(t) for t in self.true_durations],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ToyUtterance":
        obj = json.loads(line)
        raw = np.frombuffer(base64.b64decode(obj["frames"]), dtype="<f4")
        frames = raw.reshape(obj["T"], obj["d"]).astype(np.float64)
        return cls(obj["id"], frames, list(obj["targets"]), list(obj["true_durations"]))


@dataclass
class ToyDataset:
    utterances: list
    vocab_size: int  # content tokens; model vocabulary adds the specials
    dim: int
    prototypes: np.ndarray

    @property
    def model_vocab(self) -> int:
        return self.vocab_size + N_SPECIAL

    def split(self, n_train: int):
        return self.utterances[:n_train], self.utterances[n_train:]


def gen_toy_dataset(seed: int = 0, n_utts: int = 2200, vocab_size: int = 20,
                    len_range=(4, 12), dur_range=(4, 10), noise_std: float = 0.1,
                    dim: int = 16) -> ToyDataset:
    """Each token is ``dur`` noisy copies of its own random prototype frame.

    Token ids start after the special symbols. Adjacent tokens always differ,
    so every token boundary is visible in the features. Every utterance draws
    from its own PCG64 stream spawned from ``seed``, so the bytes do not depend
    on platform or on how many utterances are generated.
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    lo, hi = len_range
    dlo, dhi = dur_range
    if not (1 <= lo <= hi and 1 <= dlo <= dhi):
        raise ValueError("invalid length or duration range")
    root = np.random.SeedSequence(seed)
    proto_rng = np.random.Generator(np.random.PCG64(root.spawn(1)[0]))
    protos = proto_rng.standard_normal((vocab_size, dim))
    utts = []
    for i in range(n_utts):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, i))))
        n = int(rng.integers(lo, hi + 1))
        toks = [int(rng.integers(vocab_size))]
        while len(toks) < n:
            t = int(rng.integers(vocab_size - 1))
            toks.append(t + 1 if t >= toks[-1] else t)
        durs = [int(d) for d in rng.integers(dlo, dhi + 1, size=n)]
        frames = np.concatenate([
            protos[t] + noise_std * rng.standard_normal((d, dim)) for t, d in zip(toks, durs)])
        frames = frames.astype("<f4").astype(np.float64)
        utts.append(ToyUtterance(f"utt{i:05d}", frames, [t + N_SPECIAL for t in toks], durs))
    return ToyDataset(utts, vocab_size, dim, protos)


def audit_dataset(ds: ToyDataset) -> dict:
    """Summary statistics used to sanity-check a generated dataset."""
    lens = [len(u.targets) for u in ds.utterances]
    durs = [d for u in ds.utterances for d in u.true_durations]
    ok = all(sum(u.true_durations) == len(u.frames) and u.targets for u in ds.utterances)
    return {"n_utts": len(ds.utterances), "min_len": min(lens), "max_len": max(lens),
            "min_dur": min(durs), "max_dur": max(durs), "consistent": ok,
            "mean_frames": float(np.mean([len(u.frames) for u in ds.utterances]))}


def save_dataset(path, utterances: list) -> None:
    from .checkpoint import _atomic_write

    body = "".join(u.to_json() + "\n" for u in utterances)
    _atomic_write(Path(path), body.encode("utf-8"))


def load_dataset(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [ToyUtterance.from_json(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def edit_distance(ref, hyp) -> int:
    """Levenshtein distance with unit substitution, insertion and deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(ref, hyp) -> float:
    if len(ref) == 0:
        raise ValueError("reference must be nonempty")
    return edit_distance(ref, hyp) / len(ref)


@dataclass
class LatencySummary:
    mean_lookahead: float
    max_lookahead: int
    per_token: list
    n_tokens: int
    empty_traces: int


def latency_profile(traces: list, utterances: list) -> LatencySummary:
    """Frames read beyond each emitted token's true end frame.

    Tokens are matched to reference positions by emission order; tokens beyond
    the reference length are compared against the utterance end.
    """
    if not traces:
        raise ValueError("no traces to profile")
    per_token, empty = [], 0
    for trace, utt in zip(traces, utterances):
        if not trace.records:
            empty += 1
            continue
        ends = utt.token_end_frames()
        T = len(utt.frames)
        for k, rec in enumerate(trace.records):
            end = ends[k] if k < len(ends) else T
            per_token.append(int(rec.frames_consumed - end))
    if not per_token:
        return LatencySummary(0.0, 0, [], 0, empty)
    return LatencySummary(float(np.mean(per_token)), int(max(per_token)), per_token,
                          len(per_token), empty)


# ---------------------------------------------------------------------------
# Table experiments
# ---------------------------------------------------------------------------
@dataclass
class ToyPreset:
    """Model sizes and schedules shared by every row of the toy tables.

    Offline baselines train for ``base_epochs``; every streaming row (LC
    listener and/or monotonic attention) trains for ``stream_epochs``, both
    from scratch and when initialised from the offline baseline. Rows
    initialised from the baseline fine-tune with the smaller ``finetune_lr``.
    """

    data_seed: int = 0
    n_train: int = 2000
    n_dev: int = 200
    vocab_size: int = 20
    len_range: tuple = (4, 12)
    dur_range: tuple = (4, 10)
    embed_dim: int = 16
    speller_hidden: int = 64
    enc_hidden: int = 32
    att_dim: int = 32
    predictor_dim: int = 32
    frame_stack: int = 4
    lc_block: int = 64
    lc_right: int = 32
    chunk: int = 10
    w_max: int = 40
    mtl_lambda: float = 0.02
    base_epochs: int = 40
    stream_epochs: int = 14
    lr: float = 3.0
    finetune_lr: float = 0.5
    base_halve_from: int = 30
    stream_halve_from: int = 11
    base_ss_ramp: tuple = (16, 24, 0.3)
    stream_ss_ramp: tuple = (6, 8, 0.3)
    batch_size: int = 32
    label_smoothing: float = 0.1
    weight_decay: float = 1e-5
    grad_clip: float = 5.0
    eval_beam: int = 1
    dev_cer_every_epoch: bool = False

    def __post_init__(self):
        self.base_ss_ramp = tuple(self.base_ss_ramp)
        self.stream_ss_ramp = tuple(self.stream_ss_ramp)
        self.len_range = tuple(self.len_range)
        self.dur_range = tuple(self.dur_range)


@dataclass
class RowSpec:
    """One row of a results table."""

    name: str
    columns: dict
    listener: str = "bi"  # bi | uni | lc
    lc: tuple = (64, 32)
    attention: dict = field(default_factory=dict)
    init: str | None = None  # name of the row providing initial weights
    labels: str | None = None  # greedy | beam: chunk labels from the baseline
    lam: float = 0.0


TABLE_COLUMNS = {
    "T1": ("model", "nc", "nr", "initial_model"),
    "T2": ("model", "w_max", "lambda", "activation", "label_source"),
    "T3": ("model", "method", "future_w"),
}

BASELINE = "BLSTM-GSA"


def table_rows(which: str, preset: ToyPreset) -> list:
    """Row grid of a toy table; the first row is always the offline baseline."""
    p = preset
    base = RowSpec(BASELINE, {})
    if which == "T1":
        base.columns = {"model": "BLSTM-GSA", "nc": "-", "nr": "-", "initial_model": "Null"}
        rows = [base, RowSpec("LSTM-GSA", {"model": "LSTM-GSA", "nc": "-", "nr": "-",
                                           "initial_model": "Null"}, listener="uni")]
        for (nc, nr), init in [((p.lc_block // 2, p.lc_right // 2), None),
                               ((p.lc_block // 2, p.lc_right // 2), BASELINE),
                               ((p.lc_block, p.lc_right), BASELINE),
                               ((p.lc_block, p.lc_right), None)]:
            name = f"LC-GSA({nc},{nr},{'init' if init else 'scratch'})"
            rows.append(RowSpec(name, {"model": "LC-GSA", "nc": nc, "nr": nr,
                                       "initial_model": init or "Null"},
                                listener="lc", lc=(nc, nr), init=init))
        return rows
    if which == "T2":
        base.columns = {"model": "BLSTM-GSA", "w_max": "-", "lambda": 0, "activation": "-",
                        "label_source": "-"}
        rows = [base, RowSpec("BLSTM-MoChA", {"model": "BLSTM-MoChA", "w_max": "-", "lambda": 0,
                                              "activation": "-", "label_source": "-"},
                              attention={"kind": "mocha"}, init=BASELINE)]
        grid = [(30, 0.1, "relu"), (40, 0.1, "relu"), (60, 0.1, "relu"), (40, 0.2, "relu"),
                (40, 0.02, "relu"), (40, 0.02, "tanh")]
        for wm, lam, act in grid:
            rows.append(RowSpec(
                f"C-AMoChA({wm},{lam},{act})",
                {"model": "C-BLSTM-AMoChA", "w_max": wm, "lambda": lam, "activation": act,
                 "label_source": "greedy"},
                attention={"kind": "amocha", "predictor": "constrained", "w_max": wm,
                           "activation": act}, init=BASELINE, labels="greedy", lam=lam))
        for src in ("greedy", "beam"):
            rows.append(RowSpec(
                f"U-AMoChA({src})",
                {"model": "U-BLSTM-AMoChA", "w_max": "-", "lambda": p.mtl_lambda,
                 "activation": "relu", "label_source": src},
                attention={"kind": "amocha", "predictor": "unconstrained", "activation": "relu"},
                init=BASELINE, labels=src, lam=p.mtl_lambda))
        return rows
    if which == "T3":
        base.columns = {"model": "BLSTM-GSA", "method": "-", "future_w": "-"}
        lc = (p.lc_block, p.lc_right)
        rows = [base, RowSpec("LC-MoChA", {"model": "LC-MoChA", "method": "-", "future_w": 1},
                              listener="lc", lc=lc, attention={"kind": "mocha"}, init=BASELINE)]
        for method in ("m1", "m2"):
            for w in (8, 10):
                rows.append(RowSpec(
                    f"LC-MoChA+{method.upper()}({w})",
                    {"model": "LC-MoChA", "method": method.upper(), "future_w": w},
                    listener="lc", lc=lc, init=BASELINE,
                    attention={"kind": "mocha", "smoothing": method, "smoothing_w": w}))
        rows.append(RowSpec(
            "LC-AMoChA+M2(10)", {"model": "LC-AMoChA", "method": "M2", "future_w": 10},
            listener="lc", lc=lc, init=BASELINE, labels="beam", lam=p.mtl_lambda,
            attention={"kind": "amocha", "predictor": "unconstrained", "activation": "relu",
                       "smoothing": "m2", "smoothing_w": 10}))
        return rows
    raise ValueError(f"unknown table {which!r}; expected one of {sorted(TABLE_COLUMNS)}")


def row_model_config(row: RowSpec, preset: ToyPreset, model_vocab: int):
    from .attention import AttentionConfig
    from .encoder import EncoderStack, LayerSpec
    from .speller import ModelConfig

    p = preset
    att = {"kind": "gsa", "chunk": p.chunk, "w_max": p.w_max, "att_dim": p.att_dim,
           "predictor_dim": p.predictor_dim}
    att.update(row.attention)
    stack = EncoderStack(input_dim=16, layers=[LayerSpec(row.listener, p.enc_hidden)],
                         lc_block=row.lc[0], lc_right=row.lc[1], frame_stack=p.frame_stack)
    return ModelConfig(vocab_size=model_vocab, embed_dim=p.embed_dim,
                       speller_hidden=p.speller_hidden, encoder=stack,
                       attention=AttentionConfig(**att))


def row_recipe(row: RowSpec, preset: ToyPreset, seed: int):
    from .training import TrainRecipe

    p = preset
    offline = row.listener != "lc" and row.attention.get("kind", "gsa") == "gsa" and row.init is None
    epochs = p.base_epochs if offline else p.stream_epochs
    ramp = p.base_ss_ramp if offline else p.stream_ss_ramp
    return TrainRecipe(
        epochs=epochs, teacher_force_epochs=ramp[0] - 1, ss_ramp=ramp,
        lr=p.lr if row.init is None else p.finetune_lr,
        lr_halve_from_epoch=p.base_halve_from if offline else p.stream_halve_from,
        label_smoothing=p.label_smoothing, weight_decay=p.weight_decay, mtl_lambda=row.lam,
        chunk_label_source=row.labels or "greedy", batch_size=p.batch_size,
        grad_clip=p.grad_clip, seed=seed)


class MissingCheckpoint(FileNotFoundError):
    pass


def _row_key(row: RowSpec, preset: ToyPreset, seed: int, grid: dict) -> str:
    """Everything that determines a row's trained weights, including its init row."""
    from dataclasses import asdict

    data = {k: getattr(preset, k) for k in ("data_seed", "n_train", "vocab_size", "len_range", "dur_range")}
    return json.dumps({
        "model": asdict(row_model_config(row, preset, preset.vocab_size + N_SPECIAL)),
        "recipe": asdict(row_recipe(row, preset, seed)), "data": data, "labels": row.labels,
        "init": _row_key(grid[row.init], preset, seed, grid) if row.init else None,
    }, sort_keys=True, default=list)


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in name).strip("_")


def train_row(row: RowSpec, preset: ToyPreset, seed: int, ds: ToyDataset, workdir,
              trained: dict, allow_training: bool = True, grid: dict | None = None):
    """Train (or load a cached checkpoint for) one row; returns the model."""
    from . import checkpoint
    from .speller import LASModel
    from .training import extract_dataset_labels, train

    cfg = row_model_config(row, preset, ds.model_vocab)
    model = LASModel(cfg, seed=seed)
    stem = key_path = None
    if workdir is not None:
        stem = Path(workdir) / f"seed{seed}" / _slug(row.name)
        key_path = stem.with_suffix(".key")
        key = _row_key(row, preset, seed, grid or {})
        if key_path.exists() and key_path.read_text() == key and checkpoint.paths_for(stem)[0].exists():
            model.load_arrays(checkpoint.load(stem))
            log.info("row %s seed %d: reusing %s", row.name, seed, stem)
            return model
    if not allow_training:
        raise MissingCheckpoint(f"no checkpoint for row {row.name!r} (seed {seed}) and training is disabled")
    train_set, dev_set = ds.utterances[:preset.n_train], ds.utterances[preset.n_train:preset.n_train + preset.n_dev]
    init = trained[row.init] if row.init else None
    labels = None
    if row.labels:
        labels, _ = extract_dataset_labels(trained[BASELINE], train_set, mode=row.labels)
    recipe = row_recipe(row, preset, seed)
    log.info("row %s seed %d: training %d epochs", row.name, seed, recipe.epochs)
    train(model, train_set, recipe, dev_set=dev_set, init_from=init, chunk_labels=labels,
          dev_cer=preset.dev_cer_every_epoch)
    # round through the checkpoint precision so cached and fresh runs agree
    model.load_arrays({k: v.astype(np.float32) for k, v in model.state_arrays().items()})
    if stem is not None:
        checkpoint.save(stem, model.state_arrays())
        checkpoint._atomic_write(key_path, key.encode())
    return model


def parallel_map(fn, items: list, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally over ``workers`` processes (order kept)."""
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _decode_one(args):
    from .decoding import beam_search, greedy_decode

    model, frames, beam = args
    return (greedy_decode(model, frames) if beam == 1 else beam_search(model, frames, beam=beam)).tokens


def decode_many(model, utterances: list, beam: int = 1, workers: int = 1) -> list:
    """Hypotheses in utterance order."""
    return parallel_map(_decode_one, [(model, u.frames, beam) for u in utterances], workers)


def corpus_cer(model, utterances: list, beam: int = 1, workers: int = 1) -> float:
    hyps = decode_many(model, utterances, beam, workers)
    errs = sum(edit_distance(u.targets, h) for u, h in zip(utterances, hyps))
    return errs / sum(len(u.targets) for u in utterances)


def relative_change(row_cer: float, baseline_cer: float) -> float:
    """Relative CER change versus the baseline; negative means worse."""
    if baseline_cer == 0:
        return 0.0 if row_cer == 0 else float("-inf")
    return -(row_cer - baseline_cer) / baseline_cer


@dataclass
class TableResult:
    which: str
    rows: list  # dicts with the table columns plus seed, cer, relative
    names: list

    def cer(self, name: str, seed=None) -> float:
        vals = [r["cer"] for r in self.rows if r["name"] == name and (seed is None or r["seed"] == seed)]
        if not vals:
            raise KeyError(name)
        return float(np.mean(vals))

    def to_csv(self) -> str:
        cols = ["seed", *TABLE_COLUMNS[self.which], "cer", "relative"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["seed"], *(r[c] for c in TABLE_COLUMNS[self.which]),
                        f"{100 * r['cer']:.2f}", f"{100 * r['relative']:.1f}%"])
        return buf.getvalue()


def run_table_experiment(which: str, overrides: dict | None = None, seeds=(0,), workdir=None,
                         allow_training: bool = True, rows: list | None = None,
                         workers: int = 1) -> TableResult:
    """Train and evaluate the model grid of a toy table.

    ``overrides`` replace :class:`ToyPreset` fields. ``rows`` restricts the grid
    to the named rows (the baseline is always included, as is any row another
    selected row initialises from). Checkpoints are cached under ``workdir``
    keyed by row, preset and seed. Relative change is measured against the
    baseline of the same seed; a final block of rows averages over seeds.
    """
    preset = replace(ToyPreset(), **(overrides or {}))
    grid = table_rows(which, preset)
    if rows is not None:
        keep = set(rows) | {BASELINE}
        keep |= {r.init for r in grid if r.name in keep and r.init}
        grid = [r for r in grid if r.name in keep]
    ds = gen_toy_dataset(preset.data_seed, preset.n_train + preset.n_dev, preset.vocab_size,
                         preset.len_range, preset.dur_range)
    dev = ds.utterances[preset.n_train:preset.n_train + preset.n_dev]
    out = []
    for seed in seeds:
        trained, cers = {}, {}
        for row in grid:
            model = train_row(row, preset, seed, ds, workdir, trained, allow_training,
                              {r.name: r for r in grid})
            trained[row.name] = model
            cers[row.name] = corpus_cer(model, dev, preset.eval_beam, workers)
            log.info("table %s seed %d %s: dev CER %.4f", which, seed, row.name, cers[row.name])
        for row in grid:
            out.append({"seed": seed, "name": row.name, **row.columns, "cer": cers[row.name],
                        "relative": relative_change(cers[row.name], cers[BASELINE])})
    if len(seeds) > 1:
        base = np.mean([r["cer"] for r in out if r["name"] == BASELINE])
        for row in grid:
            c = float(np.mean([r["cer"] for r in out if r["name"] == row.name]))
            out.append({"seed": "mean", "name": row.name, **row.columns, "cer": c,
                        "relative": relative_change(c, base)})
    return TableResult(which, out, [r.name for r in grid])


def write_table(result: TableResult, path) -> None:
    from .checkpoint import _atomic_write

    _atomic_write(Path(path), result.to_csv().encode("utf-8"))
