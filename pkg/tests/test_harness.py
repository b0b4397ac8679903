import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamlas import harness as H
from streamlas.decoding import StreamTrace, TokenRecord, streaming_decode
from streamlas.speller import N_SPECIAL

from models import tiny_model

tokens = st.lists(st.integers(0, 4), max_size=8)


# -- generator ------------------------------------------------------------------
def test_generator_is_deterministic():
    a = H.gen_toy_dataset(seed=5, n_utts=20)
    b = H.gen_toy_dataset(seed=5, n_utts=20)
    for u, v in zip(a.utterances, b.utterances):
        assert u.to_json() == v.to_json()
    c = H.gen_toy_dataset(seed=6, n_utts=20)
    assert any(u.to_json() != v.to_json() for u, v in zip(a.utterances, c.utterances))


def test_generator_prefix_does_not_depend_on_size():
    small = H.gen_toy_dataset(seed=1, n_utts=5)
    big = H.gen_toy_dataset(seed=1, n_utts=50)
    assert [u.to_json() for u in small.utterances] == [u.to_json() for u in big.utterances[:5]]


def test_zero_noise_frames_are_prototype_copies():
    ds = H.gen_toy_dataset(seed=2, n_utts=10, noise_std=0.0)
    for u in ds.utterances:
        start = 0
        for tok, d in zip(u.targets, u.true_durations):
            block = u.frames[start:start + d]
            proto = ds.prototypes[tok - N_SPECIAL].astype("<f4")
            assert np.array_equal(block, np.broadcast_to(proto, block.shape))
            start += d


def test_default_dataset_audit():
    ds = H.gen_toy_dataset(seed=0, n_utts=2200)
    audit = H.audit_dataset(ds)
    assert audit["consistent"]
    assert audit["n_utts"] == 2200
    assert (audit["min_len"], audit["max_len"]) == (4, 12)
    assert (audit["min_dur"], audit["max_dur"]) == (4, 10)
    assert ds.dim == 16 and ds.model_vocab == 20 + N_SPECIAL
    for u in ds.utterances[:200]:
        assert all(a != b for a, b in zip(u.targets, u.targets[1:]))
        assert all(N_SPECIAL <= t < 20 + N_SPECIAL for t in u.targets)


@pytest.mark.parametrize("kw", [{"vocab_size": 1}, {"len_range": (0, 3)}, {"dur_range": (5, 4)}])
def test_generator_rejects_bad_arguments(kw):
    with pytest.raises(ValueError):
        H.gen_toy_dataset(seed=0, n_utts=2, **kw)


def test_jsonl_roundtrip(tmp_path):
    ds = H.gen_toy_dataset(seed=3, n_utts=6)
    path = tmp_path / "d.jsonl"
    H.save_dataset(path, ds.utterances)
    back = H.load_dataset(path)
    assert [u.to_json() for u in back] == [u.to_json() for u in ds.utterances]
    for u, v in zip(back, ds.utterances):
        assert np.array_equal(u.frames, v.frames)
        assert u.targets == v.targets and u.true_durations == v.true_durations


def test_token_end_frames():
    u = H.ToyUtterance("x", np.zeros((9, 2)), [3, 4, 5], [2, 3, 4])
    assert u.token_end_frames() == [2, 5, 9]


# -- CER ------------------------------------------------------------------------
def test_cer_examples():
    assert H.cer("abc", "abc") == 0.0
    assert H.cer("abc", "abd") == pytest.approx(1 / 3)
    assert H.cer("abc", "") == 1.0
    assert H.cer("ab", "xaby") == 1.0
    with pytest.raises(ValueError):
        H.cer([], [1])


@settings(max_examples=200, deadline=None)
@given(tokens, tokens)
def test_edit_distance_is_symmetric_and_bounded(a, b):
    d = H.edit_distance(a, b)
    assert d == H.edit_distance(b, a)
    assert abs(len(a) - len(b)) <= d <= max(len(a), len(b))
    assert (d == 0) == (a == b)


@settings(max_examples=100, deadline=None)
@given(tokens, tokens, tokens)
def test_edit_distance_triangle(a, b, c):
    assert H.edit_distance(a, c) <= H.edit_distance(a, b) + H.edit_distance(b, c)


# -- latency --------------------------------------------------------------------
def test_latency_profile_bookkeeping():
    utts = [H.ToyUtterance("a", np.zeros((10, 2)), [3, 4], [4, 6]),
            H.ToyUtterance("b", np.zeros((5, 2)), [3], [5])]
    traces = [StreamTrace([TokenRecord(3, 1, 10, 6), TokenRecord(4, 2, 10, 10),
                           TokenRecord(5, 2, 10, 10)]),
              StreamTrace([])]
    s = H.latency_profile(traces, utts)
    assert s.per_token == [2, 0, 0]
    assert s.max_lookahead == 2 and s.mean_lookahead == pytest.approx(2 / 3)
    assert s.n_tokens == 3 and s.empty_traces == 1
    with pytest.raises(ValueError):
        H.latency_profile([], [])


def test_gsa_lookahead_is_the_full_remainder():
    ds = H.gen_toy_dataset(seed=0, n_utts=6, vocab_size=3, dim=3)
    model = tiny_model(seed=2, kind="gsa", vocab=6, direction="lc", pyramid=False,
                       frame_stack=4, lc=(16, 8))
    traces = [streaming_decode(iter(u.frames), model) for u in ds.utterances]
    s = H.latency_profile(traces, ds.utterances)
    k = 0
    for t, u in zip(traces, ds.utterances):
        ends = u.token_end_frames()
        for j, _ in enumerate(t.records):
            end = ends[j] if j < len(ends) else len(u.frames)
            assert s.per_token[k] == len(u.frames) - end
            k += 1


# -- table experiments -----------------------------------------------------------
def test_relative_change_sign():
    assert H.relative_change(0.2022, 0.1788) == pytest.approx(-(0.2022 - 0.1788) / 0.1788)
    assert H.relative_change(0.1, 0.2) == pytest.approx(0.5)
    assert H.relative_change(0.0, 0.0) == 0.0


def test_table_row_sets():
    p = H.ToyPreset()
    t1 = [r.name for r in H.table_rows("T1", p)]
    assert t1[:2] == ["BLSTM-GSA", "LSTM-GSA"]
    assert {"LC-GSA(32,16,scratch)", "LC-GSA(32,16,init)", "LC-GSA(64,32,init)",
            "LC-GSA(64,32,scratch)"} <= set(t1)
    t3 = [r.name for r in H.table_rows("T3", p)]
    assert t3 == ["BLSTM-GSA", "LC-MoChA", "LC-MoChA+M1(8)", "LC-MoChA+M1(10)",
                  "LC-MoChA+M2(8)", "LC-MoChA+M2(10)", "LC-AMoChA+M2(10)"]
    t2 = H.table_rows("T2", p)
    assert sum(r.name.startswith("C-AMoChA") for r in t2) == 6
    with pytest.raises(ValueError):
        H.table_rows("T4", p)


def test_finetune_rate_only_for_initialised_rows():
    p = H.ToyPreset()
    rows = {r.name: r for r in H.table_rows("T1", p)}
    assert H.row_recipe(rows["BLSTM-GSA"], p, 0).lr == p.lr
    assert H.row_recipe(rows["LC-GSA(64,32,scratch)"], p, 0).lr == p.lr
    assert H.row_recipe(rows["LC-GSA(64,32,init)"], p, 0).lr == p.finetune_lr
    assert H.row_recipe(rows["BLSTM-GSA"], p, 0).epochs == p.base_epochs
    assert H.row_recipe(rows["LC-GSA(64,32,scratch)"], p, 0).epochs == p.stream_epochs


TINY = {"n_train": 12, "n_dev": 4, "embed_dim": 3, "speller_hidden": 6, "enc_hidden": 4,
        "att_dim": 4, "predictor_dim": 4, "base_epochs": 1, "stream_epochs": 1,
        "base_ss_ramp": (2, 3, 0.3), "stream_ss_ramp": (2, 3, 0.3), "batch_size": 6,
        "len_range": (2, 3)}


def test_tiny_table_run_caches_and_reports(tmp_path):
    rows = ["LC-MoChA"]
    first = H.run_table_experiment("T3", TINY, seeds=(0, 1), workdir=tmp_path, rows=rows)
    assert first.names == ["BLSTM-GSA", "LC-MoChA"]
    lines = first.to_csv().splitlines()
    assert lines[0] == "seed,model,method,future_w,cer,relative"
    assert len(lines) == 1 + 3 * 2
    assert lines[1].startswith("0,BLSTM-GSA,-,-,") and lines[1].endswith(",-0.0%")
    assert lines[-1].startswith("mean,LC-MoChA")
    again = H.run_table_experiment("T3", TINY, seeds=(0, 1), workdir=tmp_path, rows=rows,
                                   allow_training=False)
    assert again.to_csv() == first.to_csv()
    H.write_table(first, tmp_path / "t3.csv")
    assert (tmp_path / "t3.csv").read_text() == first.to_csv()


def test_missing_checkpoint_with_training_disabled(tmp_path):
    with pytest.raises(H.MissingCheckpoint):
        H.run_table_experiment("T1", TINY, workdir=tmp_path, rows=["LSTM-GSA"], allow_training=False)


def test_changed_preset_does_not_reuse_cache(tmp_path):
    H.run_table_experiment("T1", TINY, workdir=tmp_path, rows=[])
    with pytest.raises(H.MissingCheckpoint):
        H.run_table_experiment("T1", {**TINY, "lr": 1.0}, workdir=tmp_path, rows=[],
                               allow_training=False)


def test_parallel_decode_matches_serial():
    ds = H.gen_toy_dataset(seed=0, n_utts=4, vocab_size=3, dim=3)
    model = tiny_model(seed=1, kind="mocha", vocab=6)
    serial = H.decode_many(model, ds.utterances, workers=1)
    assert H.decode_many(model, ds.utterances, workers=2) == serial
