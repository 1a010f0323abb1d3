import json

import numpy as np
import pytest

from attention_geometry import inspector as I
from attention_geometry.cli import main, parse_distribution


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def matrices(tmp_path):
    paths = {}
    for name, m in {"eye": np.eye(3), "skew": np.array([[0, 1.5], [-1.5, 0]]), "zero": np.zeros((2, 2))}.items():
        p = tmp_path / f"{name}.csv"
        p.write_text("# comment line\n" + "\n".join(",".join(repr(float(v)) for v in row) for row in m) + "\n")
        paths[name] = p
    return paths


def test_score_identity(capsys, matrices):
    code, out, _ = run(capsys, "score", str(matrices["eye"]))
    assert code == 0 and "s=1.000000" in out


def test_score_skew_json(capsys, matrices):
    code, out, _ = run(capsys, "score", str(matrices["skew"]), "--format", "json")
    assert code == 0 and json.loads(out)[0]["s"] == -1.0


def test_score_zero_matrix_is_an_error(capsys, matrices):
    code, _, err = run(capsys, "score", str(matrices["zero"]))
    assert code == 2 and "undefined" in err


def test_score_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "score", str(tmp_path / "nope.csv"))
    assert code == 2 and err


def test_score_ragged_csv(capsys, tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("1,2\n3\n")
    assert run(capsys, "score", str(p))[0] == 2


def test_score_container(capsys, tmp_path):
    p = tmp_path / "c.safetensors"
    I.save_container(I.WeightContainer.from_arrays({"sym": np.eye(2), "vec": np.ones(3)}), p)
    code, out, _ = run(capsys, "score", str(p), "--format", "csv")
    lines = out.splitlines()
    assert code == 0 and lines[0] == "# attention-geometry v1" and lines[2].startswith("sym,1.0,")
    assert len(lines) == 3


def test_score_malformed_container(capsys, tmp_path):
    p = tmp_path / "bad.safetensors"
    p.write_bytes((500).to_bytes(8, "little") + b"{}")
    code, _, err = run(capsys, "score", str(p))
    assert code == 2 and "at byte 0" in err


def test_count_uniform_and_bidirectional(capsys):
    code, out, _ = run(capsys, "count", "--n", "16", "--dist", "uniform")
    assert code == 0 and json.loads(out)["ratio"] == pytest.approx(1.0)
    code, out, _ = run(capsys, "count", "--n", "8", "--dist", "geometric:0.5", "--mode", "mlm")
    assert json.loads(out)["ratio"] == 1.0


def test_count_point_and_sentinel(capsys):
    _, out, _ = run(capsys, "count", "--n", "10", "--dist", "point:2", "--samples", "1000")
    rec = json.loads(out)
    assert rec["ratio"] == 8.0 and rec["monte_carlo"] == 8.0
    _, out, _ = run(capsys, "count", "--n", "10", "--dist", "point:1")
    assert out.count("Infinity") == 2


def test_count_bad_distribution(capsys):
    assert run(capsys, "count", "--n", "3", "--dist", "1,2")[0] == 2
    assert run(capsys, "count", "--n", "3", "--dist", "point:9")[0] == 2
    assert run(capsys, "count", "--n", "3", "--dist", "banana")[0] == 2


def test_parse_distribution_list_and_file(tmp_path):
    assert parse_distribution("0.1,0.2,0.7", 3).tolist() == [0.1, 0.2, 0.7]
    f = tmp_path / "d.json"
    f.write_text("[1, 0, 0]")
    assert parse_distribution(str(f), 3).tolist() == [1.0, 0.0, 0.0]


def test_verify_scores_passes(capsys):
    code, out, _ = run(capsys, "verify", "scores", "--seed", "7")
    data = json.loads(out)
    assert code == 0 and data["passed"] and all("margin" in c for c in data["checks"])


def test_verify_is_deterministic(capsys):
    a = run(capsys, "verify", "counting", "--seed", "7")
    b = run(capsys, "verify", "counting", "--seed", "7")
    assert a == b


def test_verify_failure_exit_code(capsys, monkeypatch):
    from attention_geometry import verify

    monkeypatch.setitem(verify._RUNNERS, "tails",
                        lambda seed: [verify.Check("tails", "forced", 1.0, 0.0, -1.0)])
    code, out, _ = run(capsys, "verify", "tails")
    assert code == 1 and json.loads(out)["passed"] is False


def test_unknown_suite_is_usage_error(capsys):
    code, _, err = run(capsys, "verify", "everything")
    assert code == 2 and "invalid choice" in err


def test_no_subcommand(capsys):
    assert run(capsys)[0] == 2


def _train(capsys, out, *extra):
    return run(capsys, "train", "--steps", "3", "--layers", "1", "--dim", "8", "--heads", "2",
               "--out", str(out), *extra)


def test_train_smoke_is_deterministic(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"corpus_bytes": 3000, "batch_size": 2, "seq_len": 16,
                               "ff_dim": 8, "score_every": 1}))
    code, out, _ = _train(capsys, tmp_path / "a", "--config", str(cfg), "--seed", "4")
    assert code == 0 and "median s" in out
    _train(capsys, tmp_path / "b", "--config", str(cfg), "--seed", "4")
    a = (tmp_path / "a" / "training_log.csv").read_text()
    assert a == (tmp_path / "b" / "training_log.csv").read_text()
    lines = a.splitlines()
    assert lines[0] == "# attention-geometry v1" and lines[1] == "step,loss,layer,s,d"
    assert len(lines) == 2 + 4
    log = json.loads((tmp_path / "a" / "training_log.json").read_text())
    assert log["settings"]["seed"] == 4 and log["settings"]["layers"] == 1
    params = I.load_params(tmp_path / "a" / "final.safetensors")
    assert params.config.num_layers == 1


def test_train_symmetric_init_logs_one(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"corpus_bytes": 3000, "batch_size": 2, "seq_len": 16, "ff_dim": 8}))
    code, _, _ = _train(capsys, tmp_path / "s", "--config", str(cfg), "--init", "symmetric",
                        "--objective", "ar")
    assert code == 0
    rows = (tmp_path / "s" / "training_log.csv").read_text().splitlines()[2:]
    step0 = [r.split(",") for r in rows if r.startswith("0,")]
    assert step0 and all(float(r[3]) == pytest.approx(1.0, abs=1e-12) for r in step0)


def test_train_flags_override_config(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"corpus_bytes": 3000, "batch_size": 2, "seq_len": 16, "ff_dim": 8,
                               "steps": 50, "mask_prob": 0.3}))
    _train(capsys, tmp_path / "o", "--config", str(cfg), "--mask-prob", "0.2")
    settings = json.loads((tmp_path / "o" / "training_log.json").read_text())["settings"]
    assert settings["steps"] == 3 and settings["mask_prob"] == 0.2


def test_train_rejects_unknown_config_keys(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 1.0}))
    code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path))
    assert code == 2 and "learning_rate" in err


def test_inspect_symmetric_fixture(capsys, tmp_path):
    rng = np.random.default_rng(0)
    arrays = {}
    for l in range(2):
        q = rng.standard_normal((4, 4))
        arrays[f"blocks.{l}.attn.q"] = q
        arrays[f"blocks.{l}.attn.k"] = q
    container = tmp_path / "m.safetensors"
    I.save_container(I.WeightContainer.from_arrays(arrays, "F32"), container)
    pattern = tmp_path / "p.json"
    pattern.write_text(json.dumps({"query_pattern": "blocks.{layer}.attn.q",
                                   "key_pattern": "blocks.{layer}.attn.k",
                                   "num_heads": 2, "transpose_key": True}))
    code, out, _ = run(capsys, "inspect", str(container), "--pattern", str(pattern))
    rows = out.splitlines()[2:]
    assert code == 0 and len(rows) == 2
    assert all(float(r.split(",")[1]) == pytest.approx(1.0, abs=1e-6) for r in rows)
    code, _, _ = run(capsys, "inspect", str(container), "--pattern", str(pattern), "--out", str(tmp_path / "r"))
    assert json.loads((tmp_path / "r" / "inspect.json").read_text())["median_s"] == pytest.approx(1.0)
    assert (tmp_path / "r" / "inspect.csv").exists()
