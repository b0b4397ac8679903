"""Command-line entry point: ``streamlas <subcommand> --config exp.json ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as cfgmod
from . import harness
from . import tensor as tn
from .checkpoint import CheckpointError, _atomic_write
from .config import ConfigError
from .decoding import beam_search, greedy_decode, latency_bound, streaming_decode
from .speller import N_SPECIAL, LASModel, forward_train

log = logging.getLogger("streamlas")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CKPT = 0, 2, 3, 4


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------
def load_config(path) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(path)
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw.get("recipe"), dict) and "seed" in raw["recipe"]:
        raise ConfigError("recipe.seed: set the top-level 'seed' instead")
    cfg.recipe = dataclasses.replace(cfg.recipe, seed=cfg.seed)
    return cfg


def load_data(cfg) -> tuple[list, list]:
    """(train, dev) utterances from files or the generator."""
    d = cfg.data
    if d.train_path is None:
        if d.n_train >= d.n_utts:
            raise DataError("data.n_train must leave some utterances for dev")
        ds = harness.gen_toy_dataset(d.seed, d.n_utts, d.vocab_size, tuple(d.len_range),
                                     tuple(d.dur_range), d.noise_std, d.dim)
        train, dev = ds.split(d.n_train)
    else:
        train = _read_utts(d.train_path)
        dev = _read_utts(d.dev_path) if d.dev_path else train[d.n_train:]
        train = train if d.dev_path else train[:d.n_train]
    limit = d.vocab_size + N_SPECIAL
    for u in train + dev:
        if u.frames.ndim != 2 or u.frames.shape[1] != d.dim:
            raise DataError(f"utterance {u.id}: frames must be T x {d.dim}")
        if not u.targets or min(u.targets) < N_SPECIAL or max(u.targets) >= limit:
            raise DataError(f"utterance {u.id}: target ids must lie in [{N_SPECIAL}, {limit})")
    return train, dev


def _read_utts(path) -> list:
    try:
        return harness.load_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed dataset {path}: {exc}") from None


def build_model(cfg) -> LASModel:
    try:
        mcfg = cfg.model.build(cfg.data.vocab_size, cfg.data.dim)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"model: {exc}") from None
    if mcfg.vocab_size < cfg.data.vocab_size + N_SPECIAL:
        raise ConfigError("model.vocab_size: smaller than the data vocabulary plus special tokens")
    return LASModel(mcfg, seed=cfg.seed)


def resolve_ckpt(cfg, name: str) -> Path:
    """A checkpoint stem given as a path, or a name inside ``io.checkpoint_dir``."""
    direct = Path(name)
    if checkpoint.paths_for(direct)[0].exists():
        return direct
    return Path(cfg.io.checkpoint_dir) / name


def load_model(cfg, ckpt: str) -> LASModel:
    model = build_model(cfg)
    arrays = checkpoint.load(resolve_ckpt(cfg, ckpt))
    try:
        fresh = model.load_arrays(arrays)
    except KeyError as exc:
        raise CheckpointError(exc.args[0]) from None
    if fresh:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(fresh)}")
    return model


def pick_split(cfg, split: str) -> list:
    train, dev = load_data(cfg)
    return train if split == "train" else dev


def _out_path(cfg, given, default_name: str) -> Path:
    return Path(given) if given else Path(cfg.io.output_dir) / default_name


def _write_text(path: Path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------
def cmd_train(args, cfg) -> int:
    from .training import train

    train_set, dev_set = load_data(cfg)
    model = build_model(cfg)
    labels = None
    if args.labels:
        labels = _read_labels(args.labels)
    elif model.cfg.attention.kind == "amocha" and cfg.recipe.mtl_lambda > 0:
        raise ConfigError("recipe.mtl_lambda > 0 with adaptive chunks needs --labels "
                          "(see extract-chunk-labels)")
    init = resolve_ckpt(cfg, args.init) if args.init else None
    try:
        train(model, train_set, cfg.recipe, dev_set=dev_set, init_from=init, chunk_labels=labels,
              ckpt_dir=cfg.io.checkpoint_dir, metrics_path=Path(cfg.io.log_dir) / "metrics.csv",
              dev_cer=not args.no_dev_cer)
    except KeyError as exc:
        raise CheckpointError(exc.args[0]) from None
    print(f"wrote {Path(cfg.io.checkpoint_dir) / 'final'} and {Path(cfg.io.log_dir) / 'metrics.csv'}")
    return EXIT_OK


def _read_labels(path) -> dict:
    try:
        out = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    out[obj["id"]] = obj["labels"]
        return out
    except OSError as exc:
        raise DataError(f"cannot read labels {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"malformed labels file {path}: {exc}") from None


def _decode_job(job):
    model, utt, beam, temperature, max_len = job
    if beam == 1 and temperature == 1.0:
        res = greedy_decode(model, utt.frames, max_len=max_len)
    else:
        res = beam_search(model, utt.frames, beam=beam, temperature=temperature, max_len=max_len)
    T = len(utt.frames)
    return {"id": utt.id, "tokens": [int(t) for t in res.tokens], "score": float(res.score),
            "frames_consumed_per_token": [T] * len(res.tokens)}


def cmd_decode(args, cfg) -> int:
    model = load_model(cfg, args.ckpt)
    utts = pick_split(cfg, args.split)
    d = cfg.decode
    jobs = [(model, u, d.beam, d.temperature, d.max_len) for u in utts]
    results = harness.parallel_map(_decode_job, jobs, args.workers)
    out = _out_path(cfg, args.out, "decode.jsonl")
    _write_text(out, "".join(json.dumps(r, sort_keys=True) + "\n" for r in results))
    errs = sum(harness.edit_distance(u.targets, r["tokens"]) for u, r in zip(utts, results))
    print(f"decoded {len(results)} utterances, CER {errs / sum(len(u.targets) for u in utts):.4f} -> {out}")
    return EXIT_OK


def _stream_job(job):
    model, utt, max_len = job
    return streaming_decode(iter(utt.frames), model, max_len=max_len)


TRACE_FIELDS = ("id", "index", "token", "boundary_u", "chunk_len", "frames_consumed", "bound")


def cmd_stream_sim(args, cfg) -> int:
    model = load_model(cfg, args.ckpt)
    utts = pick_split(cfg, args.split)
    traces = harness.parallel_map(_stream_job, [(model, u, cfg.decode.max_len) for u in utts],
                                  args.workers)
    stack = model.cfg.encoder
    w = model.cfg.attention.smooth_w
    lines, buf = [], io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TRACE_FIELDS)
    violations = 0
    for u, tr in zip(utts, traces):
        lines.append(json.dumps({"id": u.id, "tokens": tr.tokens, "score": None,
                                 "frames_consumed_per_token": [r.frames_consumed for r in tr.records]},
                                sort_keys=True) + "\n")
        for k, r in enumerate(tr.records):
            bound = latency_bound(stack, r.boundary_u, w)
            violations += r.frames_consumed > bound
            wr.writerow([u.id, k, r.token, r.boundary_u, "" if r.chunk_len is None else r.chunk_len,
                         r.frames_consumed, bound])
    out = _out_path(cfg, args.out, "stream.jsonl")
    _write_text(out, "".join(lines))
    _write_text(out.with_suffix(".trace.csv"), buf.getvalue())
    summary = harness.latency_profile(traces, utts)
    print(f"streamed {len(utts)} utterances; mean lookahead {summary.mean_lookahead:.2f} frames, "
          f"max {summary.max_lookahead}; latency-bound violations {violations} -> {out}")
    return EXIT_OK


def cmd_extract_labels(args, cfg) -> int:
    from .training import extract_chunk_labels

    model = load_model(cfg, args.ckpt)
    if model.cfg.attention.kind != "gsa":
        raise ConfigError("model.attention.kind: chunk labels are read from a gsa model")
    utts = pick_split(cfg, args.split)
    lines, skipped = [], 0
    for u in utts:
        lab = extract_chunk_labels(model, u.frames, len(u.targets), args.mode,
                                   cfg.recipe.chunk_label_threshold, cfg.decode.beam)
        skipped += lab is None
        lines.append(json.dumps({"id": u.id, "labels": lab}) + "\n")
    out = _out_path(cfg, args.out, "chunk_labels.jsonl")
    _write_text(out, "".join(lines))
    print(f"labels for {len(utts) - skipped} of {len(utts)} utterances -> {out}")
    return EXIT_OK


def cmd_run_table(args, cfg) -> int:
    t = cfg.table
    which = args.table or t.which
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(t.seeds)
    preset = dataclasses.asdict(t.preset)
    workdir = Path(cfg.io.checkpoint_dir) / f"table_{which}" if t.reuse_checkpoints or args.no_train else None
    try:
        result = harness.run_table_experiment(which, preset, seeds=seeds, workdir=workdir,
                                              allow_training=not args.no_train, rows=t.rows,
                                              workers=args.workers)
    except harness.MissingCheckpoint as exc:
        raise CheckpointError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(f"table: {exc}") from None
    out = _out_path(cfg, args.out, f"table_{which}.csv")
    harness.write_table(result, out)
    print(result.to_csv(), end="")
    print(f"-> {out}")
    return EXIT_OK


ATTENTION_FIELDS = ("step", "u", "alpha", "beta", "chunk_len")


def cmd_dump_attention(args, cfg) -> int:
    model = load_model(cfg, args.ckpt)
    train, dev = load_data(cfg)
    by_id = {u.id: u for u in train + dev}
    if args.utt not in by_id:
        raise DataError(f"no utterance with id {args.utt!r}")
    utt = by_id[args.utt]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(ATTENTION_FIELDS)
    if args.mode == "expected":
        with tn.no_grad():
            out = forward_train(model, utt.frames[None], [len(utt.frames)], [list(utt.targets)],
                                keep_attention=True)
        for i, beta in enumerate(out.betas):
            alpha = out.alphas[i]
            width = out.widths[i]
            if width is None and model.cfg.attention.kind == "mocha":
                width = np.full(beta.shape, model.cfg.attention.chunk)
            for u in range(beta.shape[1]):
                wr.writerow([i, u + 1, "" if alpha is None else repr(float(alpha[0, u])),
                             repr(float(beta[0, u])),
                             "" if width is None else repr(float(np.asarray(width)[0, u]))])
    else:
        res = greedy_decode(model, utt.frames)
        for i, wts in enumerate(res.weights):
            bnd = res.boundaries[i]
            for u in range(len(wts)):
                alpha = "" if not model.cfg.attention.monotonic else (1.0 if bnd == u + 1 else 0.0)
                wr.writerow([i, u + 1, alpha, repr(float(wts[u])),
                             "" if res.widths[i] is None else res.widths[i]])
    out = _out_path(cfg, args.out, f"attention_{args.utt}.csv")
    _write_text(out, buf.getvalue())
    print(f"-> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamlas", description="Streaming LAS toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, ckpt=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="experiment JSON config")
        sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        sp.add_argument("-v", "--verbose", action="store_true")
        if ckpt:
            sp.add_argument("--ckpt", default="final", help="checkpoint stem or name in io.checkpoint_dir")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "train a model")
    sp.add_argument("--init", help="checkpoint to initialise from")
    sp.add_argument("--labels", help="chunk-label JSONL for adaptive chunk training")
    sp.add_argument("--no-dev-cer", action="store_true", help="skip per-epoch dev decoding")

    for name, fn, help_ in [("decode", cmd_decode, "offline beam/greedy decoding"),
                            ("stream-sim", cmd_stream_sim, "frame-by-frame streaming decoding")]:
        sp = add(name, fn, help_, ckpt=True)
        sp.add_argument("--split", choices=("train", "dev"), default="dev")
        sp.add_argument("--out", help="output JSONL path")

    sp = add("extract-chunk-labels", cmd_extract_labels, "chunk-length labels from a gsa model", ckpt=True)
    sp.add_argument("--split", choices=("train", "dev"), default="train")
    sp.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    sp.add_argument("--out", help="output JSONL path")

    sp = add("run-table", cmd_run_table, "train and evaluate a toy results table")
    sp.add_argument("--table", choices=sorted(harness.TABLE_COLUMNS))
    sp.add_argument("--seeds", help="comma-separated seeds (overrides table.seeds)")
    sp.add_argument("--no-train", action="store_true", help="only use cached checkpoints")
    sp.add_argument("--out", help="results CSV path")

    sp = add("dump-attention", cmd_dump_attention, "attention weights of one utterance as CSV", ckpt=True)
    sp.add_argument("--utt", required=True, help="utterance id")
    sp.add_argument("--mode", choices=("decode", "expected"), default="decode")
    sp.add_argument("--out", help="output CSV path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    prev_dtype = tn.get_default_dtype()
    try:
        cfg = load_config(args.config)
        tn.set_default_dtype(np.float64 if cfg.float64 else np.float32)
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CKPT
    finally:
        tn.set_default_dtype(prev_dtype)


if __name__ == "__main__":
    sys.exit(main())
