import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from gppvae import checkpoint as ck
from gppvae import datagen, tensorio
from gppvae.cli import main

TINY_CFG = {"arch": "mlp", "latent_dim": 3, "object_dim": 2, "dtype": "float64", "batch_size": 16,
            "epochs_vae": 2, "epochs_gp": 2, "epochs_joint": 2, "checkpoint_every": 1}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--objects", "8", "--views", "4", "--size", "16", "--seed", "3",
                 "--out", str(root / "data")]) == 0
    with open(root / "cfg.json", "w") as fh:
        json.dump(TINY_CFG, fh)
    return root


def train(work, out, *extra):
    return main(["train", "--config", str(work / "cfg.json"), "--data", str(work / "data"),
                 "--out", str(work / out), *extra])


def log_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_gen_data_is_deterministic(work, tmp_path):
    main(["gen-data", "--objects", "8", "--views", "4", "--size", "16", "--seed", "3", "--out", str(tmp_path / "d")])
    assert datagen.manifest_hash(tmp_path / "d") == datagen.manifest_hash(work / "data")
    with open(work / "data" / "manifest.json") as fh:
        man = json.load(fh)
    assert man["n_samples"] == 32 and man["split"]["held_out_view"] == 2


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--model", "resnet", "--out", "x"])
    assert e.value.code == 2
    assert "vae, gppvae-joint, gppvae-dis, cvae" in capsys.readouterr().err.replace("'", "")


def test_missing_data_is_usage_error(work, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--model", "vae", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")])
    assert e.value.code == 2


def test_train_logs_all_phases(work):
    assert train(work, "joint", "--model", "gppvae-joint") == 0
    rows = log_rows(work / "joint" / "train_log.csv")
    assert [r["phase"] for r in rows] == ["vae"] * 2 + ["gp"] * 2 + ["joint"] * 2
    assert all(np.isfinite(float(r["total"])) for r in rows)
    meta = ck.load_checkpoint(work / "joint" / "checkpoint").meta
    assert meta["state"]["phase_index"] == 3


def test_init_from_keeps_encoder(work):
    assert train(work, "vae", "--model", "vae") == 0
    assert train(work, "dis", "--model", "gppvae-dis", "--init-from", str(work / "vae")) == 0
    v = ck.load_checkpoint(work / "vae" / "checkpoint").model
    d = ck.load_checkpoint(work / "dis" / "checkpoint").model
    for k, p in v.encoder.named_parameters().items():
        np.testing.assert_array_equal(d.encoder.named_parameters()[k].data, p.data)
    assert [r["phase"] for r in log_rows(work / "dis" / "train_log.csv")] == ["gp", "gp"]


def test_resume_matches_uninterrupted(work):
    assert train(work, "full", "--model", "gppvae-joint") == 0
    assert train(work, "paused", "--model", "gppvae-joint", "--stop-after-epochs", "3") == 0
    assert len(log_rows(work / "paused" / "train_log.csv")) == 3
    assert main(["train", "--resume", "--out", str(work / "paused")]) == 0
    full, paused = work / "full" / "checkpoint", work / "paused" / "checkpoint"
    assert sorted(os.listdir(full)) == sorted(os.listdir(paused))
    for f in os.listdir(full):
        if f.endswith(".gpt"):
            assert (full / f).read_bytes() == (paused / f).read_bytes(), f
    metas = [json.loads((d / "meta.json").read_text()) for d in (full, paused)]
    for m in metas:
        m["config"].pop("out")     # the only intended difference
    assert metas[0] == metas[1]
    a, b = log_rows(work / "full" / "train_log.csv"), log_rows(work / "paused" / "train_log.csv")
    assert [r["total"] for r in a] == [r["total"] for r in b]


def test_predict_then_eval(work, tmp_path):
    train(work, "cvae", "--model", "cvae")
    for name in ("joint", "cvae", "vae"):
        assert main(["predict", "--checkpoint", str(work / name), "--data", str(work / "data"),
                     "--out", str(tmp_path / name)]) == 0
    out = tmp_path / "summary.csv"
    assert main(["eval", "--pred", *(str(tmp_path / n) for n in ("joint", "cvae", "vae")),
                 "--data", str(work / "data"), "--out", str(out)]) == 0
    rows = log_rows(out)
    assert [r["method"] for r in rows] == ["gppvae_joint", "cvae", "livae"]
    per = np.array([float(r["mse"]) for r in log_rows(tmp_path / "joint" / "per_sample_mse.csv")])
    assert float(rows[0]["mean_mse"]) == pytest.approx(per.mean(), rel=1e-12)
    assert float(rows[0]["std_error"]) == pytest.approx(per.std(ddof=1) / np.sqrt(len(per)), rel=1e-12)
    info = json.loads((tmp_path / "joint" / "prediction.json").read_text())
    assert info["n"] == len(per) and info["split"] == "test"


def test_eval_identical_truth_is_zero(work, tmp_path):
    main(["predict", "--checkpoint", str(work / "joint"), "--data", str(work / "data"), "--out", str(tmp_path / "p")])
    tensorio.save(tmp_path / "truth.gpt", tensorio.load(tmp_path / "p" / "predictions.gpt"))
    assert main(["eval", "--pred", str(tmp_path / "p"), "--truth", str(tmp_path / "truth.gpt"),
                 "--out", str(tmp_path / "s.csv")]) == 0
    row = log_rows(tmp_path / "s.csv")[0]
    assert float(row["mean_mse"]) == 0.0 and float(row["std_error"]) == 0.0


def test_mc_predictions_are_seeded(work, tmp_path):
    for d in ("a", "b"):
        main(["predict", "--checkpoint", str(work / "joint"), "--data", str(work / "data"), "--mode", "mc",
              "--samples", "3", "--seed", "5", "--out", str(tmp_path / d)])
    assert (tmp_path / "a" / "predictions.gpt").read_bytes() == (tmp_path / "b" / "predictions.gpt").read_bytes()


def test_inspect_kernel_on_fresh_fullrank(work, tmp_path):
    cfg = dict(TINY_CFG, view_kernel="fullrank")
    (tmp_path / "fr.json").write_text(json.dumps(cfg))
    assert main(["train", "--model", "gppvae-dis", "--config", str(tmp_path / "fr.json"), "--data",
                 str(work / "data"), "--out", str(tmp_path / "run"), "--stop-after-epochs", "0"]) == 0
    assert main(["inspect-kernel", "--checkpoint", str(tmp_path / "run"), "--out", str(tmp_path / "k")]) == 0
    view = np.loadtxt(tmp_path / "k" / "view_cov.csv", delimiter=",")
    np.testing.assert_allclose(view, np.eye(4), atol=1e-12)
    obj = np.loadtxt(tmp_path / "k" / "object_cov.csv", delimiter=",")
    assert obj.shape == (8, 8) and np.allclose(obj, obj.T)


def test_incompatible_checkpoint_exits_4(work, tmp_path):
    main(["gen-data", "--objects", "8", "--views", "4", "--size", "20", "--out", str(tmp_path / "big")])
    assert main(["predict", "--checkpoint", str(work / "joint"), "--data", str(tmp_path / "big"),
                 "--out", str(tmp_path / "p")]) == 4
    assert main(["inspect-kernel", "--checkpoint", str(work / "vae"), "--out", str(tmp_path / "k")]) == 4
    assert main(["predict", "--checkpoint", str(tmp_path / "none"), "--data", str(work / "data"),
                 "--out", str(tmp_path / "p")]) == 4


def test_corrupt_checkpoint_exits_4(work, tmp_path):
    import shutil
    shutil.copytree(work / "vae" / "checkpoint", tmp_path / "c")
    victim = sorted(f for f in os.listdir(tmp_path / "c") if f.startswith("param."))[0]
    os.remove(tmp_path / "c" / victim)
    assert main(["predict", "--checkpoint", str(tmp_path / "c"), "--data", str(work / "data"),
                 "--out", str(tmp_path / "p")]) == 4


def test_numeric_abort_exits_3(work, tmp_path):
    cfg = dict(TINY_CFG, lr_vae=1e200)
    (tmp_path / "bad.json").write_text(json.dumps(cfg))
    code = main(["train", "--model", "vae", "--config", str(tmp_path / "bad.json"), "--data", str(work / "data"),
                 "--out", str(tmp_path / "run")])
    assert code == 3
    saved = ck.load_checkpoint(tmp_path / "run" / "checkpoint")
    assert all(np.all(np.isfinite(p.data)) for p in saved.model.named_parameters().values())


def test_module_entry_point(work, tmp_path):
    res = subprocess.run([sys.executable, "-m", "gppvae", "eval", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--pred" in res.stdout
