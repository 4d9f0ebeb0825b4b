import json
import struct

import numpy as np
import pytest

from attendgan import checkpoint as ck
from attendgan import cli
from attendgan.config import ConfigError, RunConfig
from attendgan.diffcore import AdamState, ParamStore, RMSpropState, Tensor


def sample_ckpt():
    rng = np.random.default_rng(0)
    c = ck.Checkpoint(config={"seed": 3}, vocab=["<pad>", "<bos>", "<eos>", "<unk>", "red"], state={"epoch": 2})
    c.tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32(1.5),
                 "c": np.zeros((0, 2), np.float32), "d": rng.normal(size=5).astype(np.float32)}
    return c


def test_roundtrip_bitwise(tmp_path):
    c = sample_ckpt()
    ck.save_checkpoint(c, tmp_path / "x.ckpt")
    back = ck.load_checkpoint(tmp_path / "x.ckpt")
    assert list(back.tensors) == list(c.tensors)
    for k in c.tensors:
        assert back.tensors[k].shape == np.shape(c.tensors[k])
        assert back.tensors[k].tobytes() == np.asarray(c.tensors[k], np.float32).tobytes()
    assert (back.config, back.vocab, back.state, back.version) == (c.config, c.vocab, c.state, 1)
    ck.save_checkpoint(back, tmp_path / "y.ckpt")
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_file_layout(tmp_path):
    ck.save_checkpoint(sample_ckpt(), tmp_path / "x.ckpt")
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:6] == b"ATGAN1"
    (n,) = struct.unpack("<Q", raw[6:14])
    header = json.loads(raw[14:14 + n])
    offsets = [(m["offset"], m["nbytes"]) for m in header["manifest"]]
    pos = 0
    for off, nb in offsets:
        assert off == pos
        pos += nb
    assert 14 + n + pos == len(raw)


def corrupt(tmp_path, fn):
    ck.save_checkpoint(sample_ckpt(), tmp_path / "x.ckpt")
    raw = bytearray((tmp_path / "x.ckpt").read_bytes())
    raw = fn(raw)
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    return tmp_path / "bad.ckpt"


def edit_header(raw, fn):
    (n,) = struct.unpack("<Q", raw[6:14])
    header = json.loads(raw[14:14 + n])
    fn(header)
    new = json.dumps(header).encode()
    return raw[:6] + struct.pack("<Q", len(new)) + new + raw[14 + n:]


def test_bad_magic(tmp_path):
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.load_checkpoint(corrupt(tmp_path, lambda r: b"NOPE!" + r[5:]))


def test_version_byte(tmp_path):
    with pytest.raises(ck.CheckpointVersionError):
        ck.load_checkpoint(corrupt(tmp_path, lambda r: r[:5] + b"9" + r[6:]))


def test_header_version_mismatch(tmp_path):
    path = corrupt(tmp_path, lambda r: edit_header(r, lambda h: h.update(version=2)))
    with pytest.raises(ck.CheckpointVersionError):
        ck.load_checkpoint(path)


def test_shape_tampering_names_tensor(tmp_path):
    def grow(h):
        h["manifest"][0]["shape"] = [4, 4]
    with pytest.raises(ck.CheckpointShapeError, match="'a'|a"):
        ck.load_checkpoint(corrupt(tmp_path, lambda r: edit_header(r, grow)))


def test_offset_gap_rejected(tmp_path):
    def shift(h):
        h["manifest"][-1]["offset"] += 4
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(corrupt(tmp_path, lambda r: edit_header(r, shift)))


def test_truncated_and_trailing(tmp_path):
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(corrupt(tmp_path, lambda r: r[:-3]))
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(corrupt(tmp_path, lambda r: r + b"\0\0\0\0"))
    with pytest.raises(ck.CheckpointError):
        ck.load_checkpoint(corrupt(tmp_path, lambda r: r[:10]))


def test_expected_shapes(tmp_path):
    ck.save_checkpoint(sample_ckpt(), tmp_path / "x.ckpt")
    ck.load_checkpoint(tmp_path / "x.ckpt", {"a": (3, 4)})
    with pytest.raises(ck.CheckpointShapeError, match="a"):
        ck.load_checkpoint(tmp_path / "x.ckpt", {"a": (4, 3)})


def test_param_and_optimizer_helpers(tmp_path):
    store = ParamStore({"w": Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True),
                        "b": Tensor(np.zeros(()), requires_grad=True)},
                       {"mean": np.ones(3, np.float32)})
    adam = AdamState(lr=1e-3, step=7, m=[np.ones((2, 3)), np.zeros(())], v=[np.full((2, 3), 2.0), np.ones(())])
    rms = RMSpropState(lr=5e-5, sq=[np.ones((2, 3)), np.zeros(())])
    c = ck.Checkpoint()
    ck.put_params(c, "gen", store)
    ck.put_adam(c, "gen_opt", adam, store.names())
    ck.put_rmsprop(c, "disc_opt", rms, store.names())
    ck.save_checkpoint(c, tmp_path / "p.ckpt")
    back = ck.load_checkpoint(tmp_path / "p.ckpt")
    assert ck.has_params(back, "gen") and not ck.has_params(back, "disc")
    got = ck.get_params(back, "gen")
    assert got.equal(store) and got["b"].shape == ()
    a2 = ck.get_adam(back, "gen_opt")
    assert a2.step == 7 and a2.lr == 1e-3 and np.array_equal(a2.v[0], adam.v[0])
    assert np.array_equal(ck.get_rmsprop(back, "disc_opt").sq[0], rms.sq[0])


# ------------------------------------------------------------------ config


def test_run_config_defaults_and_unknown_key(tmp_path):
    cfg = RunConfig()
    assert cfg.lam2 == 0.1 and cfg.clip == 0.01 and cfg.seq_len == 16
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="nope"):
        RunConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"windows": [2, 20]})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"style": "factual"})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"lam2": 0.5}))
    assert RunConfig.load(p, {"seed": 4}).lam2 == 0.5


# ------------------------------------------------------------------ CLI


def run_cli(capsys, *argv):
    code = cli.run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_cli_usage_errors(capsys):
    code, _, err = run_cli(capsys)
    assert code == 2 and error_of(err)["error"] == "usage"
    code, _, err = run_cli(capsys, "fly")
    assert code == 2 and error_of(err)["error"] == "usage"
    code, _, err = run_cli(capsys, "synth")
    assert code == 2 and "--out" in error_of(err)["message"]


def test_cli_missing_file(capsys, tmp_path):
    code, _, err = run_cli(capsys, "pretrain-gen", "--data", tmp_path / "none.jsonl", "--out-dir", tmp_path)
    assert code == 1 and error_of(err)["error"] == "io"


def test_cli_bad_config(capsys, tmp_path):
    cli.run(["synth", "--out", str(tmp_path / "d.jsonl"), "--scenes", "6"])
    capsys.readouterr()
    code, _, err = run_cli(capsys, "pretrain-gen", "--data", tmp_path / "d.jsonl", "--out-dir", tmp_path,
                           "--set", "bogus=1")
    assert code == 2 and error_of(err) == {"error": "config", "message": "unknown config keys: bogus"}


def test_cli_corrupt_checkpoint(capsys, tmp_path):
    cli.run(["synth", "--out", str(tmp_path / "d.jsonl"), "--scenes", "6"])
    (tmp_path / "g.ckpt").write_bytes(b"garbage")
    code, _, err = run_cli(capsys, "sample", "--checkpoint", tmp_path / "g.ckpt", "--data", tmp_path / "d.jsonl",
                           "--out", tmp_path / "s.jsonl")
    assert code == 1 and error_of(err)["error"] == "checkpoint"


def test_cli_synth_deterministic(capsys, tmp_path):
    for name in ("a", "b"):
        assert cli.run(["synth", "--out", str(tmp_path / f"{name}.jsonl"), "--scenes", "8", "--seed", "5"]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    cli.run(["synth", "--out", str(tmp_path / "c.jsonl"), "--scenes", "8", "--seed", "6"])
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_cli_evaluate_identity(capsys, tmp_path):
    cli.run(["synth", "--out", str(tmp_path / "d.jsonl"), "--scenes", "8", "--style", "factual"])
    capsys.readouterr()
    code, out, _ = run_cli(capsys, "evaluate", "--candidates", tmp_path / "d.jsonl",
                           "--references", tmp_path / "d.jsonl", "--report", tmp_path / "r.json")
    assert code == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["bleu1"] > 99.999 and rep["rouge_l"] > 99.999


SMALL = ["--set", "pretrain_epochs=2", "--set", "disc_pretrain_steps=2", "--set", "adv_epochs=2",
         "--set", "gen_batch=8", "--set", "critic_batch=8", "--set", "n_roll=2",
         "--set", "hidden=16", "--set", "embed_dim=8", "--set", "attn_dim=8", "--set", "filters=4"]


def pipeline(tmp_path, capsys, tag, extra=()):
    d = tmp_path / tag
    data = tmp_path / "data.jsonl"
    if not data.exists():
        assert cli.run(["synth", "--out", str(data), "--scenes", "10", "--seed", "1"]) == 0
    assert cli.run(["pretrain-gen", "--data", str(data), "--out-dir", str(d), *SMALL, *extra]) == 0
    assert cli.run(["pretrain-disc", "--data", str(data), "--gen-checkpoint", str(d / "generator.ckpt"),
                    "--out-dir", str(d)]) == 0
    assert cli.run(["adversarial", "--data", str(data), "--gen-checkpoint", str(d / "generator.ckpt"),
                    "--disc-checkpoint", str(d / "discriminator.ckpt"), "--out-dir", str(d)]) == 0
    capsys.readouterr()
    return d, data


def test_cli_full_pipeline(capsys, tmp_path):
    d, data = pipeline(tmp_path, capsys, "run")
    for name in ("generator.ckpt", "discriminator.ckpt", "adversarial.ckpt", "adversarial-epoch001.ckpt",
                 "pretrain_gen_log.csv", "pretrain_disc_log.csv", "adversarial_log.csv"):
        assert (d / name).exists(), name
    code, _, _ = run_cli(capsys, "sample", "--checkpoint", d / "adversarial.ckpt", "--data", data,
                         "--out", d / "s.jsonl", "--style", "positive")
    assert code == 0
    rows = [json.loads(l) for l in (d / "s.jsonl").read_text().splitlines()]
    assert rows and all({"image_id", "tokens", "caption"} <= set(r) for r in rows)
    code, out, _ = run_cli(capsys, "evaluate", "--candidates", d / "s.jsonl", "--references", data,
                           "--style", "positive", "--report", d / "r.json")
    assert code == 0 and "CIDEr-D" in out
    rep = json.loads((d / "r.json").read_text())
    assert all(np.isfinite(rep[k]) and rep[k] >= 0 for k in ("bleu1", "rouge_l", "cider_d", "entropy", "top4"))


def test_cli_pipeline_deterministic_and_resumable(capsys, tmp_path):
    a, data = pipeline(tmp_path, capsys, "a")
    b, _ = pipeline(tmp_path, capsys, "b")
    assert ck.load_checkpoint(a / "adversarial.ckpt").tensors.keys() == ck.load_checkpoint(b / "adversarial.ckpt").tensors.keys()
    ta, tb = ck.load_checkpoint(a / "adversarial.ckpt").tensors, ck.load_checkpoint(b / "adversarial.ckpt").tensors
    assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)
    # resume from the first epoch checkpoint and finish the second epoch
    r = tmp_path / "r"
    assert cli.run(["adversarial", "--data", str(data), "--gen-checkpoint", str(a / "generator.ckpt"),
                    "--disc-checkpoint", str(a / "discriminator.ckpt"), "--out-dir", str(r),
                    "--resume", str(a / "adversarial-epoch001.ckpt")]) == 0
    tr = ck.load_checkpoint(r / "adversarial.ckpt")
    assert all(ta[k].tobytes() == tr.tensors[k].tobytes() for k in ta)
    strip = lambda rows: [{k: v for k, v in x.items() if k != "wall_clock"} for x in rows]  # noqa: E731
    assert strip(tr.state["log"]) == strip(ck.load_checkpoint(a / "adversarial.ckpt").state["log"])
