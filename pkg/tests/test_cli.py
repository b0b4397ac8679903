import csv
import json

import pytest
from hypothesis import given, settings, strategies as st

from streamlas import checkpoint, config
from streamlas.cli import main
from streamlas.harness import gen_toy_dataset, save_dataset


def tiny_cfg(tmp_path, kind="mocha", **extra):
    cfg = {
        "seed": 3,
        "model": {"embed_dim": 3, "speller_hidden": 6,
                  "encoder": {"layers": [{"direction": "lc", "hidden": 4}], "lc_block": 8,
                              "lc_right": 4, "frame_stack": 4},
                  "attention": {"kind": kind, "att_dim": 4, "predictor_dim": 4, "chunk": 3}},
        "recipe": {"epochs": 2, "teacher_force_epochs": 1, "ss_ramp": [2, 2, 0.3], "lr": 0.5,
                   "lr_halve_from_epoch": 2, "batch_size": 4},
        "data": {"n_utts": 12, "n_train": 9, "vocab_size": 4, "len_range": [2, 3], "dim": 16},
        "decode": {"beam": 2},
        "io": {"checkpoint_dir": str(tmp_path / "ckpt"), "log_dir": str(tmp_path / "logs"),
               "output_dir": str(tmp_path / "out")},
    }
    for key, value in extra.items():
        cfg[key] = {**cfg.get(key, {}), **value} if isinstance(value, dict) else value
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    path = tiny_cfg(tmp)
    assert main(["train", "--config", str(path), "--no-dev-cer"]) == 0
    return tmp, path


def test_empty_config_is_valid():
    cfg = config.loads("{}")
    assert cfg.seed == 0 and cfg.decode.beam == 5
    assert cfg.model.speller_hidden == 512
    assert [layer.hidden for layer in cfg.model.encoder.layers] == [256] * 4


def test_train_writes_checkpoint_and_metrics(trained):
    tmp, _ = trained
    assert checkpoint.paths_for(tmp / "ckpt" / "final")[0].exists()
    rows = list(csv.reader((tmp / "logs" / "metrics.csv").open()))
    assert rows[0] == ["epoch", "split", "loss", "ce", "lw", "cer"]
    assert [r[:2] for r in rows[1:]] == [["1", "train"], ["1", "dev"], ["2", "train"], ["2", "dev"]]


def test_train_is_reproducible(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        assert main(["train", "--config", str(tiny_cfg(d))]) == 0
        outs.append(((d / "logs" / "metrics.csv").read_bytes(),
                     checkpoint.blob_bytes(d / "ckpt" / "final")))
    assert outs[0] == outs[1]


def test_decode_outputs_jsonl(trained, capsys):
    tmp, path = trained
    assert main(["decode", "--config", str(path)]) == 0
    lines = (tmp / "out" / "decode.jsonl").read_text().splitlines()
    assert len(lines) == 3
    obj = json.loads(lines[0])
    assert set(obj) == {"id", "tokens", "score", "frames_consumed_per_token"}
    assert "CER" in capsys.readouterr().out


def test_decode_workers_match_serial(trained, tmp_path):
    _, path = trained
    main(["decode", "--config", str(path), "--out", str(tmp_path / "a.jsonl")])
    main(["decode", "--config", str(path), "--out", str(tmp_path / "b.jsonl"), "--workers", "2"])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_stream_sim_outputs_trace(trained, capsys):
    tmp, path = trained
    assert main(["stream-sim", "--config", str(path)]) == 0
    assert len((tmp / "out" / "stream.jsonl").read_text().splitlines()) == 3
    rows = list(csv.DictReader((tmp / "out" / "stream.trace.csv").open()))
    for r in rows:
        assert int(r["frames_consumed"]) <= int(r["bound"])
    assert "violations 0" in capsys.readouterr().out


@pytest.mark.parametrize("mode", ["decode", "expected"])
def test_dump_attention(trained, mode):
    tmp, path = trained
    out = tmp / f"att_{mode}.csv"
    assert main(["dump-attention", "--config", str(path), "--utt", "utt00010", "--mode", mode,
                 "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["step", "u", "alpha", "beta", "chunk_len"]
    if mode == "expected":
        assert len(rows) > 1


def test_dump_attention_unknown_utterance(trained):
    _, path = trained
    assert main(["dump-attention", "--config", str(path), "--utt", "nope"]) == 3


def test_extract_labels_needs_gsa(trained):
    _, path = trained
    assert main(["extract-chunk-labels", "--config", str(path)]) == 2


def test_extract_labels_and_train_amocha(tmp_path):
    gsa = tiny_cfg(tmp_path, kind="gsa", recipe={"epochs": 1})
    assert main(["train", "--config", str(gsa), "--no-dev-cer"]) == 0
    labels = tmp_path / "labels.jsonl"
    assert main(["extract-chunk-labels", "--config", str(gsa), "--out", str(labels)]) == 0
    entries = [json.loads(line) for line in labels.read_text().splitlines()]
    assert len(entries) == 9
    assert all(e["labels"] is None or min(e["labels"]) >= 1 for e in entries)
    am = tiny_cfg(tmp_path, kind="amocha", recipe={"epochs": 1, "mtl_lambda": 0.02},
                  io={"checkpoint_dir": str(tmp_path / "am")})
    assert main(["train", "--config", str(am)]) == 2
    assert main(["train", "--config", str(am), "--labels", str(labels),
                 "--init", str(tmp_path / "ckpt" / "final"), "--no-dev-cer"]) == 0


def test_train_from_files(tmp_path):
    ds = gen_toy_dataset(seed=1, n_utts=6, vocab_size=4, len_range=(2, 3))
    save_dataset(tmp_path / "train.jsonl", ds.utterances[:4])
    save_dataset(tmp_path / "dev.jsonl", ds.utterances[4:])
    path = tiny_cfg(tmp_path, data={"train_path": str(tmp_path / "train.jsonl"),
                                    "dev_path": str(tmp_path / "dev.jsonl")},
                    recipe={"epochs": 1})
    assert main(["train", "--config", str(path), "--no-dev-cer"]) == 0


def test_run_table_tiny(tmp_path, capsys):
    preset = {"n_train": 8, "n_dev": 3, "embed_dim": 3, "speller_hidden": 6, "enc_hidden": 4,
              "att_dim": 4, "predictor_dim": 4, "base_epochs": 1, "stream_epochs": 1,
              "base_ss_ramp": [2, 3, 0.3], "stream_ss_ramp": [2, 3, 0.3], "batch_size": 4,
              "len_range": [2, 3]}
    path = tiny_cfg(tmp_path, table={"which": "T1", "rows": ["LSTM-GSA"], "preset": preset})
    assert main(["run-table", "--config", str(path)]) == 0
    text = (tmp_path / "out" / "table_T1.csv").read_text()
    assert text.splitlines()[0] == "seed,model,nc,nr,initial_model,cer,relative"
    assert len(text.splitlines()) == 3
    assert main(["run-table", "--config", str(path), "--no-train"]) == 0
    assert (tmp_path / "out" / "table_T1.csv").read_text() == text
    assert main(["run-table", "--config", str(path), "--no-train", "--seeds", "5"]) == 4
    assert main(["run-table", "--config", str(path), "--table", "T3", "--no-train"]) == 4


# -- exit codes -----------------------------------------------------------------
def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,\n "recipe": {"lr": }}')
    assert main(["train", "--config", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    bad.write_text('{"recipe": {"seed": 4}}')
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text('{"model": {"attention": {"kind": "soft"}}}')
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text('{"decode": {"beam": "5"}}')
    assert main(["decode", "--config", str(bad)]) == 2
    assert "decode.beam" in capsys.readouterr().err
    assert main(["train", "--config", str(tiny_cfg(tmp_path)), "--workers", "0"]) == 2


def test_data_errors_exit_3(tmp_path):
    assert main(["train", "--config", str(tiny_cfg(tmp_path, data={"n_train": 12}))]) == 3
    path = tiny_cfg(tmp_path, data={"train_path": str(tmp_path / "none.jsonl")})
    assert main(["train", "--config", str(path)]) == 3
    (tmp_path / "junk.jsonl").write_text("{not json}\n")
    path = tiny_cfg(tmp_path, data={"train_path": str(tmp_path / "junk.jsonl")})
    assert main(["train", "--config", str(path)]) == 3
    ds = gen_toy_dataset(seed=1, n_utts=4, vocab_size=4, len_range=(2, 3))
    save_dataset(tmp_path / "d16.jsonl", ds.utterances)
    path = tiny_cfg(tmp_path, data={"dim": 8, "train_path": str(tmp_path / "d16.jsonl"), "n_train": 3})
    assert main(["train", "--config", str(path)]) == 3


def test_checkpoint_errors_exit_4(trained, tmp_path):
    _, path = trained
    assert main(["decode", "--config", str(path), "--ckpt", str(tmp_path / "nothing")]) == 4
    other = tiny_cfg(tmp_path, model={"speller_hidden": 7, "embed_dim": 3,
                                      "encoder": {"layers": [{"direction": "lc", "hidden": 4}],
                                                  "lc_block": 8, "lc_right": 4, "frame_stack": 4},
                                      "attention": {"kind": "mocha", "att_dim": 4,
                                                    "predictor_dim": 4, "chunk": 3}})
    final = json.loads(path.read_text())["io"]["checkpoint_dir"] + "/final"
    assert main(["decode", "--config", str(other), "--ckpt", final]) == 4
    gsa = tiny_cfg(tmp_path, kind="amocha")
    assert main(["decode", "--config", str(gsa), "--ckpt", final]) == 4


SECTIONS = ["", "model", "model.encoder", "model.attention", "recipe", "data", "decode", "io",
            "table", "table.preset"]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(SECTIONS),
       st.text(alphabet="abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=12),
       st.one_of(st.integers(), st.text(max_size=3), st.booleans(), st.none()))
def test_unknown_keys_always_rejected(section, key, value):
    obj = {}
    target = obj
    for part in filter(None, section.split(".")):
        target = target.setdefault(part, {})
    known = config.loads(json.dumps(obj))
    node = known
    for part in filter(None, section.split(".")):
        node = getattr(node, part)
    if hasattr(node, key) or key in {"layers"}:
        return
    target[key] = value
    with pytest.raises(config.ConfigError):
        config.loads(json.dumps(obj))


def test_unknown_key_exits_2(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"recipe": {"learning_rate": 0.1}}))
    assert main(["train", "--config", str(path)]) == 2
