import json
import struct

import pytest
import torch

from dynground import checkpoint as ck
from dynground.cli import main, trace_dump
from dynground.config import ConfigError, format_config, parse_config
from dynground.synth_env import generate_dataset, load_jsonl, make_instance
from dynground.training import GroundingData, TrainConfig, build_model, evaluate, fit

TINY = dict(dim=16, n_layers=1, n_heads=2, feedforward_dim=32, t_max=3, batch_size=8)


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    cfg = TrainConfig(**TINY, epochs=1)
    data = GroundingData(generate_dataset(16, 1))
    model, _ = fit(data, cfg, checkpoint_path=tmp_path / "a.ck")
    loaded, cfg2, opt, epoch = ck.load_checkpoint(tmp_path / "a.ck")
    assert cfg2 == cfg and epoch == 1
    for k, v in model.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])
    ck.save_checkpoint(tmp_path / "b.ck", loaded, cfg2, opt, epoch)
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_checkpoint_rejects_shape_mismatch(tmp_path):
    small = TrainConfig(**TINY)
    ck.save_checkpoint(tmp_path / "a.ck", build_model(small), small)
    blob = bytearray((tmp_path / "a.ck").read_bytes())
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen])
    header["config"]["dim"] = 32
    new = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "b.ck").write_bytes(blob[:4] + struct.pack("<I", len(new)) + new + blob[8 + hlen:])
    with pytest.raises(ck.CheckpointError, match="shape mismatch"):
        ck.load_checkpoint(tmp_path / "b.ck")


def test_checkpoint_version_gating(tmp_path):
    cfg = TrainConfig(**TINY)
    blob = bytearray(ck.encode_checkpoint(build_model(cfg), cfg))
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen])
    header["version"] = 99
    new = json.dumps(header).encode()
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.decode_checkpoint(bytes(blob[:4] + struct.pack("<I", len(new)) + new + blob[8 + hlen:]))
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.decode_checkpoint(b"XXXX" + bytes(blob[4:]))


def test_resume_matches_straight_run(tmp_path):
    data = GroundingData(generate_dataset(24, 2))
    cfg = TrainConfig(**TINY, epochs=4)
    straight, hist = fit(data, cfg, csv_path=tmp_path / "s.csv")
    fit(data, cfg, stop_epoch=2, csv_path=tmp_path / "r.csv", checkpoint_path=tmp_path / "r.ck")
    model, cfg2, opt, start = ck.load_checkpoint(tmp_path / "r.ck")
    resumed, _ = fit(data, cfg2, model, opt, start_epoch=start, csv_path=tmp_path / "r.csv")
    assert (tmp_path / "s.csv").read_text() == (tmp_path / "r.csv").read_text()
    for k, v in straight.state_dict().items():
        assert torch.equal(v, resumed.state_dict()[k])


def test_zero_epochs_writes_initial_checkpoint(tmp_path):
    cfg = TrainConfig(**TINY, epochs=0)
    model, hist = fit(GroundingData(generate_dataset(8, 0)), cfg, checkpoint_path=tmp_path / "z.ck")
    assert hist == []
    loaded, _, _, epoch = ck.load_checkpoint(tmp_path / "z.ck")
    assert epoch == 0
    for k, v in model.state_dict().items():
        assert torch.equal(v, loaded.state_dict()[k])


def test_config_parsing():
    cfg = parse_config("# comment\nlearning_rate = 0.01\npolicy_stop_grad = false\nepochs=3\n")
    assert cfg.learning_rate == 0.01 and cfg.policy_stop_grad is False and cfg.epochs == 3
    assert parse_config(format_config(cfg)) == cfg
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("warmup = 3")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("epochs = many")
    with pytest.raises(ConfigError):
        parse_config("reward_mode = sometimes")


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_gen_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert _run(capsys, "gen", "--n", 40, "--seed", 5, "--out", tmp_path / f"{name}.jsonl")[0] == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_cli_hops_mix_proportions(tmp_path, capsys):
    code, out, _ = _run(capsys, "gen", "--n", 10000, "--seed", 1, "--hops-mix", "1:0.5,2:0.3,3:0.2",
                        "--out", tmp_path / "m.jsonl")
    assert code == 0
    counts = json.loads(out)["hops"]
    for h, p in (("1", 0.5), ("2", 0.3), ("3", 0.2)):
        assert abs(counts[h] / 10000 - p) <= 0.03


def test_cli_errors_are_one_line(tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--data", tmp_path / "missing.jsonl",
                        "--checkpoint", tmp_path / "x.ck")
    assert code != 0 and err.count("\n") == 1 and err.startswith("error: file_not_found:")
    code, _, err = _run(capsys, "gen", "--n", 3, "--out", tmp_path / "nodir" / "x.jsonl")
    assert code != 0 and err.startswith("error: file_not_found:")
    (tmp_path / "bad.ck").write_bytes(b"nonsense")
    code, _, err = _run(capsys, "eval", "--checkpoint", tmp_path / "bad.ck", "--data", "x")
    assert code != 0 and err.startswith("error: checkpoint:")


def test_cli_train_eval_trace(tmp_path, capsys):
    cfgfile = tmp_path / "tiny.cfg"
    cfgfile.write_text(format_config(TrainConfig(**TINY, epochs=2)))
    _run(capsys, "gen", "--n", 24, "--seed", 3, "--out", tmp_path / "d.jsonl")
    code, _, err = _run(capsys, "train", "--data", tmp_path / "d.jsonl", "--config", cfgfile,
                        "--checkpoint", tmp_path / "m.ck", "--metrics", tmp_path / "m.csv")
    assert code == 0, err
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,accuracy,mean_steps,lr" and len(lines) == 3
    code, out, _ = _run(capsys, "eval", "--checkpoint", tmp_path / "m.ck", "--data",
                        tmp_path / "d.jsonl", "--mode", "2")
    res = json.loads(out)
    assert code == 0 and res["mean_steps"] == 2.0 and set(res["per_hop"]) == {"1", "2", "3"}
    code, out, _ = _run(capsys, "trace", "--checkpoint", tmp_path / "m.ck", "--data",
                        tmp_path / "d.jsonl", "--index", 4, "--json", tmp_path / "t.json")
    dump = json.loads((tmp_path / "t.json").read_text())
    assert code == 0 and "step 1:" in out
    for step in dump["steps"]:
        assert abs(sum(step["attention"].values()) - 1) < 1e-5
    # the dump's final box is the box evaluate() reports for the same instance
    model, _, _, _ = ck.load_checkpoint(tmp_path / "m.ck")
    inst = load_jsonl(tmp_path / "d.jsonl")[4]
    res = evaluate(GroundingData([inst]), model, "dynamic", 3)
    assert dump["final_box"] == pytest.approx(res["boxes"][0].tolist(), abs=1e-6)


def test_trace_always_stop_is_one_step():
    model = build_model(TrainConfig(**TINY))
    for p in model.policy.parameters():
        torch.nn.init.zeros_(p)
    d = trace_dump(model, make_instance(7, 3), 6)
    assert d["executed_steps"] == 1 and len(d["steps"]) == 1 and d["steps"][0]["action"] == "stop"
