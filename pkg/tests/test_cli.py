import json
import subprocess
import sys

import numpy as np
import pytest

from poseprior.cli import main
from poseprior.motion import MotionPrior
from poseprior.scoring import read_scores
from poseprior.synth import SynthSpec, generate, write_labels
from poseprior.trajectory import write_trajectories

TINY = ["--dim", "8", "--ls", "1", "--lt", "1", "--heads", "1", "--batch-size", "16", "--warmup", "0"]


@pytest.fixture
def data(tmp_path):
    trajs, labels = generate(SynthSpec(n_normal=6, n_anomalous=6, length=32, seed=3))
    write_trajectories(tmp_path / "data.jsonl", trajs)
    write_labels(tmp_path / "labels.csv", labels)
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def fit(data, family="rayleigh"):
    assert run("fit-prior", "--data", data / "data.jsonl", "--family", family, "--out", data / f"{family}.json") == 0
    return data / f"{family}.json"


def trained(data, name="run", *extra):
    prior = fit(data)
    assert run("train", "--data", data / "data.jsonl", "--prior", prior, "--out", data / name, *TINY, "--max-steps", 6, *extra) == 0
    return data / name


# --- fit-prior -----------------------------------------------------------------------


def test_fit_prior_recovers_generator_speed(tmp_path):
    trajs, _ = generate(SynthSpec(n_normal=300, n_anomalous=0, jitter_std=0.0, seed=8))
    write_trajectories(tmp_path / "data.jsonl", trajs)
    assert run("fit-prior", "--data", tmp_path / "data.jsonl", "--out", tmp_path / "p.json", "--window", 2, "--stride", 1, "--poses", 2) == 0
    prior = MotionPrior.load(tmp_path / "p.json")
    assert prior.params["sigma"] == pytest.approx(0.01, rel=0.05)
    hist = json.loads((tmp_path / "p_hist.json").read_text())
    assert sum(hist["counts"]) == hist["samples"]
    assert (tmp_path / "p_manifest.json").exists()


def test_fit_prior_uniform(data):
    prior = MotionPrior.load(fit(data, "uniform"))
    assert prior.family == "uniform" and 0 <= prior.params["lo"] < prior.params["hi"]


def test_missing_data_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("fit-prior", "--out", tmp_path / "p.json")
    assert info.value.code == 2


def test_unreadable_data_is_runtime_error(tmp_path, capsys):
    assert run("fit-prior", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "p.json") == 1
    assert "not found" in capsys.readouterr().err


def test_installed_entry_point_exit_codes(tmp_path):
    usage = subprocess.run([sys.executable, "-m", "poseprior.cli", "train"], capture_output=True, text=True)
    assert usage.returncode == 2
    help_text = subprocess.run([sys.executable, "-m", "poseprior.cli", "train", "--help"], capture_output=True, text=True)
    assert help_text.returncode == 0 and "--attention-mode" in help_text.stdout and "5e-05" in help_text.stdout


# --- train -----------------------------------------------------------------------------


def test_train_writes_artifacts(data):
    out = trained(data)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["steps"] == 6
    assert manifest["run"]["fuse_mode"] == "divide" and manifest["run"]["prior"]["family"] == "rayleigh"
    assert set(manifest["hashes"]) == {"data", "prior", "checkpoint"}
    lines = (out / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr" and len(lines) == 7


def test_config_file_overrides_and_flags_win(data):
    prior = fit(data)
    (data / "cfg.json").write_text(json.dumps({"ls": 1, "lt": 1, "dim": 16, "heads": 2, "max-steps": 3}))
    argv = ["train", "--data", data / "data.jsonl", "--prior", prior, "--out", data / "r", "--config", data / "cfg.json",
            "--dim", "8", "--warmup", "0", "--batch-size", "16"]
    assert run(*argv) == 0
    model = json.loads((data / "r" / "manifest.json").read_text())["model"]
    assert (model["spatial_layers"], model["temporal_layers"], model["dim"], model["heads"]) == (1, 1, 8, 2)


def test_unknown_config_key_is_usage_error(data):
    (data / "cfg.json").write_text(json.dumps({"layers": 3}))
    with pytest.raises(SystemExit) as info:
        run("train", "--data", data / "data.jsonl", "--no-me", "--out", data / "r", "--config", data / "cfg.json")
    assert info.value.code == 2


def test_same_seed_same_loss_log(data):
    a = trained(data, "a").joinpath("loss.csv").read_text()
    b = trained(data, "b").joinpath("loss.csv").read_text()
    c = trained(data, "c", "--seed", "1").joinpath("loss.csv").read_text()
    assert a == b and a != c


def test_env_seed_overrides_flag(data, monkeypatch):
    monkeypatch.setenv("PAK_SEED", "7")
    out = trained(data, "env", "--seed", "1")
    assert json.loads((out / "manifest.json").read_text())["seed"] == 7


def test_loss_log_per_step_and_decreasing(data):
    prior = fit(data)
    out = data / "long"
    assert run("train", "--data", data / "data.jsonl", "--prior", prior, "--out", out, "--dim", "16", "--ls", "1", "--lt", "1",
               "--heads", "2", "--batch-size", "32", "--warmup", "20", "--lr", "3e-3", "--max-steps", "500", "--epochs", "1000") == 0
    rows = np.loadtxt(out / "loss.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(rows[:, 0], np.arange(1, 501))
    assert rows[-1, 1] < rows[0, 1]


def test_train_requires_prior_unless_disabled(data, capsys):
    assert run("train", "--data", data / "data.jsonl", "--out", data / "r", *TINY) == 1
    assert "--prior" in capsys.readouterr().err
    assert run("train", "--data", data / "data.jsonl", "--no-me", "--out", data / "r", *TINY, "--max-steps", 2) == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_partial_checkpoint(data):
    prior = fit(data)
    assert run("train", "--data", data / "data.jsonl", "--prior", prior, "--out", data / "boom", *TINY,
               "--max-steps", 30, "--lr", "1e300", "--dtype", "float64") == 1
    assert (data / "boom" / "partial.npz").exists()
    assert json.loads((data / "boom" / "manifest.json").read_text())["status"].startswith("diverged")


# --- score / eval / plot --------------------------------------------------------------------


def test_score_deterministic_and_normalized(data):
    out = trained(data)
    for name in ("s1.csv", "s2.csv"):
        assert run("score", "--data", data / "data.jsonl", "--checkpoint", out / "model.npz", "--out", data / name,
                   "--labels", data / "labels.csv") == 0
    assert (data / "s1.csv").read_bytes() == (data / "s2.csv").read_bytes()
    series = read_scores(data / "s1.csv")
    allv = np.concatenate([s.frame_scores for s in series])
    assert allv.min() == 0.0 and allv.max() == 1.0
    assert (data / "s1_manifest.json").exists()


def test_video_without_tracks_scores_zero(data):
    out = trained(data)
    labels = (data / "labels.csv").read_text() + "".join(f"09,ghost,{f},0\n" for f in range(10))
    (data / "labels2.csv").write_text(labels)
    assert run("score", "--data", data / "data.jsonl", "--checkpoint", out / "model.npz", "--out", data / "s.csv",
               "--labels", data / "labels2.csv") == 0
    ghost = [s for s in read_scores(data / "s.csv") if s.video_id == "ghost"][0]
    np.testing.assert_array_equal(ghost.frame_scores, np.zeros(10))


def test_score_refuses_mismatched_settings(data, capsys):
    out = trained(data)
    ckpt = out / "model.npz"
    assert run("score", "--data", data / "data.jsonl", "--checkpoint", ckpt, "--out", data / "s.csv", "--fuse-mode", "add") == 1
    other = MotionPrior("rayleigh", {"sigma": 0.5})
    other.save(data / "other.json")
    assert run("score", "--data", data / "data.jsonl", "--checkpoint", ckpt, "--out", data / "s.csv", "--prior", data / "other.json") == 1
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["run"]["fuse_mode"] = "multiply"
    (out / "manifest.json").write_text(json.dumps(manifest))
    assert run("score", "--data", data / "data.jsonl", "--checkpoint", ckpt, "--out", data / "s.csv") == 1
    assert "disagrees" in capsys.readouterr().err


def test_overfit_model_scores_seen_windows_low(tmp_path):
    trajs, _ = generate(SynthSpec(n_normal=2, n_anomalous=0, length=24, seed=5))
    write_trajectories(tmp_path / "d.jsonl", trajs)
    base = ["train", "--data", tmp_path / "d.jsonl", "--no-me", "--dim", "16", "--ls", "1", "--lt", "1", "--heads", "2",
            "--mask-ratio", "0", "--batch-size", "64", "--lr", "3e-3", "--epochs", "1000", "--dtype", "float64"]
    assert run(*base, "--out", tmp_path / "fresh", "--warmup", "0", "--max-steps", "1", "--lr", "0") == 0
    assert run(*base, "--out", tmp_path / "fit", "--warmup", "20", "--max-steps", "400") == 0
    means = {}
    for name in ("fresh", "fit"):
        assert run("score", "--data", tmp_path / "d.jsonl", "--checkpoint", tmp_path / name / "model.npz",
                   "--out", tmp_path / f"{name}.csv", "--no-normalize") == 0
        means[name] = np.mean([s.frame_scores.mean() for s in read_scores(tmp_path / f"{name}.csv")])
    assert means["fit"] < 0.1 * means["fresh"]


def test_eval_perfect_scores(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("scene,video,frame,score,label\n01,a,0,0.0,0\n01,a,1,1.0,1\n02,b,0,0.2,0\n02,b,1,0.9,1\n")
    assert run("eval", "--scores", tmp_path / "s.csv", "--json", tmp_path / "r.json") == 0
    out = capsys.readouterr().out
    assert out.startswith("AUC 1.0000") and "scene 02: 1.0000" in out
    assert json.loads((tmp_path / "r.json").read_text())["auc"] == 1.0


def test_eval_single_class_fails(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("scene,video,frame,score,label\n01,a,0,0.0,0\n01,a,1,1.0,0\n")
    assert run("eval", "--scores", tmp_path / "s.csv") == 1
    assert "both positive and negative" in capsys.readouterr().err


def test_plot_one_image_per_video(tmp_path):
    (tmp_path / "s.csv").write_text("scene,video,frame,score,label\n01,a,0,0.0,0\n01,a,1,1.0,1\n02,b,0,0.5,-1\n")
    assert run("plot", "--scores", tmp_path / "s.csv", "--out", tmp_path / "figs") == 0
    assert len(list((tmp_path / "figs").glob("*.png"))) == 2


def test_synth_command(tmp_path):
    assert run("synth", "--out", tmp_path / "t.jsonl", "--labels", tmp_path / "l.csv", "--n-normal", 3, "--n-anomalous", 2, "--seed", 4) == 0
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 5
    assert json.loads((tmp_path / "t_manifest.json").read_text())["seed"] == 4
