import hashlib
import json

import pytest

from samprec.cli import main

TINY = {"num_users": 60, "num_items": 40, "num_clusters": 4, "min_len": 12, "max_len": 16, "seed": 3}
FAST = {"epochs": 1, "batch_size": 32, "backbone": {"d": 8, "hidden": 16, "layers": 1, "max_len": 16},
        "sampler": {"hidden": 8}}


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(TINY))
    assert main(["synth", "--spec", str(spec), "--out", str(root / "data")]) == 0
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(FAST))
    assert main(["train", "--config", str(cfg), "--sampler", "auto", "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def test_synth_writes_manifest_and_dataset(data):
    man = json.loads((data / "data" / "manifest.json").read_text())
    assert man["command"] == "synth" and man["finished"] is not None
    assert (data / "data" / "sequences.bin").exists()


def test_synth_is_idempotent(data, tmp_path):
    assert main(["synth", "--spec", str(data / "spec.json"), "--out", str(tmp_path / "again")]) == 0
    for name in ("catalog.json", "sequences.bin", "behaviors.bin"):
        assert _digest(tmp_path / "again" / name) == _digest(data / "data" / name)


def test_train_then_eval_loo(data, capsys):
    out = data / "eval"
    assert main(["eval", "--checkpoint", str(data / "run" / "checkpoint"), "--data", str(data / "data"),
                 "--out", str(out), "--k", "5,10"]) == 0
    rep = json.loads((out / "metrics.json").read_text())
    assert set(rep["recall"]) == {"5", "10"}
    assert 0.0 <= rep["ndcg"]["10"] <= 1.0
    assert (out / "metrics.csv").read_text().count("\n") == 2


def test_eval_is_idempotent(data, tmp_path):
    args = ["eval", "--checkpoint", str(data / "run" / "checkpoint"), "--data", str(data / "data")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert _digest(tmp_path / "a" / "metrics.json") == _digest(tmp_path / "b" / "metrics.json")


def test_train_is_idempotent(data, tmp_path):
    args = ["train", "--config", str(data / "cfg.json"), "--sampler", "auto", "--data", str(data / "data")]
    assert main(args + ["--out", str(tmp_path / "r")]) == 0
    a = tmp_path / "r" / "checkpoint" / "tensors.bin"
    b = data / "run" / "checkpoint" / "tensors.bin"
    assert _digest(a) == _digest(b)


def test_multistep_emits_five_rows(data):
    out = data / "ms"
    assert main(["eval", "--checkpoint", str(data / "run" / "checkpoint"), "--data", str(data / "data"),
                 "--out", str(out), "--mode", "multistep", "--steps", "1..5", "--k", "10"]) == 0
    rows = json.loads((out / "multistep.json").read_text())
    assert [r["steps"] for r in rows] == [1, 2, 3, 4, 5]


def test_analyze_sampler_reports_auc(data):
    out = data / "an"
    assert main(["analyze-sampler", "--checkpoint", str(data / "run" / "checkpoint"),
                 "--data", str(data / "data"), "--out", str(out)]) == 0
    q = json.loads((out / "sampler_quality.json").read_text())
    assert 0.0 <= q["auc"] <= 1.0


def test_preset_materialises_published_rewards(data, tmp_path):
    out = tmp_path / "p"
    assert main(["train", "--preset", "paper-tmall", "--epochs", "0", "--data", str(data / "data"),
                 "--out", str(out)]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    r = cfg["reward"]
    assert (r["tau"], r["b"], r["k"], r["lam"], r["psi0"]) == (5.0, 1.0, 2e-3, 0.5, 0.8)
    assert cfg["batch_size"] == 128 and cfg["num_negatives"] == 10_000


def test_flops_grows_with_rate(capsys):
    vals = []
    for mu in (0.3, 0.6, 0.9):
        assert main(["flops", "--mu", str(mu)]) == 0
        vals.append(json.loads(capsys.readouterr().out)["total"])
    assert vals[0] < vals[1] < vals[2]


def test_sweep_b_writes_table(data, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep-b", "--config", str(data / "cfg.json"), "--data", str(data / "data"),
                 "--out", str(out), "--b-list", "0,1"]) == 0
    rows = json.loads((out / "sweep.json").read_text())
    assert [r["b"] for r in rows] == [0.0, 1.0]


def test_missing_input_is_data_error(tmp_path, capsys):
    code = main(["preprocess", "--input", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "o")])
    assert code == 3
    assert "nope.tsv" in capsys.readouterr().err


def test_preprocess_reports_filtering(tmp_path, capsys):
    rows = ["user\titem\tts"]
    for u in range(4):
        for t in range(6):
            rows.append(f"{u}\t{t % 3}\t{t}")
    rows.append("9\t77\t0")
    tsv = tmp_path / "log.tsv"
    tsv.write_text("\n".join(rows) + "\n")
    assert main(["preprocess", "--input", str(tsv), "--min-count", "3", "--out", str(tmp_path / "o")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["interactions"] == 25 and stats["kept"] == 24 and stats["users"] == 4


def test_unknown_config_field_is_config_error(data, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1.0}))
    code = main(["train", "--config", str(bad), "--data", str(data / "data"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "learning_rate" in capsys.readouterr().err


def test_invalid_value_names_field(data, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lr_srs": -1.0}))
    code = main(["train", "--config", str(bad), "--data", str(data / "data"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "lr_srs" in capsys.readouterr().err


def test_corrupt_checkpoint_is_config_error(data, tmp_path):
    import shutil
    ck = tmp_path / "ck"
    shutil.copytree(data / "run" / "checkpoint", ck)
    blob = bytearray((ck / "tensors.bin").read_bytes())
    blob[0] ^= 0xFF
    (ck / "tensors.bin").write_bytes(bytes(blob))
    code = main(["eval", "--checkpoint", str(ck), "--data", str(data / "data"), "--out", str(tmp_path / "o")])
    assert code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_numeric_error(data, tmp_path):
    cfg = tmp_path / "hot.json"
    cfg.write_text(json.dumps({**FAST, "lr_srs": 1e39, "grad_clip": None}))
    out = tmp_path / "o"
    code = main(["train", "--config", str(cfg), "--data", str(data / "data"), "--out", str(out)])
    assert code == 4
    assert (out / "diverged_batch.npz").exists()
