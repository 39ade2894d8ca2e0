import json
import subprocess
import sys

import pytest
import torch

from latentplan.cli import main
from latentplan.config import load_config
from latentplan.diff_core import load_checkpoint
from latentplan.pipeline import STAGES, ArtifactError, Pipeline, ablate, read_codec, run_command
from latentplan.trajectory_vae import channel_mse

TINY = ["vae.steps=20", "prior.steps=20", "energy.steps=20", "dataset.n_episodes=8", "support.n_states=4",
        "support.M=4", "evaluate.n_episodes=1", "evaluate.seeds=[0]", "prior.K=5"]


def tiny(out, *extra):
    return load_config("smoke", TINY + list(extra), out=str(out))


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe")
    cfg = tiny(out)
    for stage in STAGES:
        run_command(cfg, stage)
    return out


def test_every_stage_writes_a_verified_manifest(built):
    pipe = Pipeline(tiny(built))
    for stage in STAGES:
        man = pipe.verify(stage)
        assert man["stage"] == stage and man["outputs"]
    assert json.loads((built / "resolved_config.json").read_text())["version"] == 1
    assert (built / "train-vae" / "curve.csv").read_text().startswith("step,loss")


def test_reloaded_codec_matches_training_metrics(built):
    pipe = Pipeline(tiny(built))
    codec, _ = read_codec(built / "train-vae" / "codec.ckpt")
    err = channel_mse(codec.vae, pipe.tokenized_train(codec))
    assert err == pytest.approx(pipe.verify("train-vae")["metrics"]["train_recon"], rel=1e-4)
    header, sections = load_checkpoint(built / "train-vae" / "codec.ckpt")
    assert {"phi", "psi_state", "psi_action", "psi_reward_return"} <= set(sections)
    assert torch.all(sections["latent_stats"]["z_std"] > 0)


def test_rerun_is_byte_identical(built):
    cfg = tiny(built)
    before = {p: p.read_bytes() for p in built.rglob("*") if p.is_file() and p.name != "timing.json"
              and p.name != "timing.csv"}
    for stage in STAGES:
        run_command(cfg, stage)
    after = {p: p.read_bytes() for p in before}
    assert [p for p in before if before[p] != after[p]] == []


def test_ensure_skips_fresh_stages(built):
    pipe = Pipeline(tiny(built))
    t = (built / "train-vae" / "codec.ckpt").stat().st_mtime_ns
    pipe.ensure("evaluate")
    assert (built / "train-vae" / "codec.ckpt").stat().st_mtime_ns == t


def test_tampered_upstream_is_refused(built, tmp_path):
    import shutil

    out = tmp_path / "copy"
    shutil.copytree(built, out)
    ckpt = out / "train-prior" / "prior.ckpt"
    data = bytearray(ckpt.read_bytes())
    data[-3] ^= 1
    ckpt.write_bytes(bytes(data))
    pipe = Pipeline(tiny(out))
    with pytest.raises(ArtifactError) as info:
        pipe.run("train-energy")
    assert info.value.stage == "train-prior"
    code = main(["evaluate", "--config", "smoke", "--out", str(out)] + sum([["--override", o] for o in TINY], []))
    assert code == 3


def test_rebuilt_upstream_makes_downstream_stale(built, tmp_path):
    import shutil

    out = tmp_path / "copy"
    shutil.copytree(built, out)
    Pipeline(tiny(out, "prior.steps=21")).run("train-prior")
    with pytest.raises(ArtifactError) as info:
        Pipeline(tiny(out, "prior.steps=21")).verify("train-energy")
    assert info.value.stage in ("gen-support", "train-energy")


def test_changed_config_is_stale(built):
    with pytest.raises(ArtifactError, match="configuration changed"):
        Pipeline(tiny(built, "vae.steps=21")).verify("train-vae")


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["train-vae", "--config", "smoke", "--out", str(tmp_path / "a")]) == 3
    assert "gen-data" in capsys.readouterr().err
    assert main(["gen-data", "--config", "smoke", "--override", "vae.stepz=1"]) == 2
    assert "vae.stepz" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "none.json")]) == 2
    out = tmp_path / "b"
    args = ["--config", "smoke", "--out", str(out), "--override", "dataset.n_episodes=4", "--override",
            "vae.lr=1e30", "--override", "vae.steps=30"]
    assert main(["gen-data"] + args) == 0
    assert json.loads(capsys.readouterr().out)["metrics"]["n_episodes"] == 4
    assert main(["train-vae"] + args) == 4
    assert "non-finite" in capsys.readouterr().err


def test_cli_threads_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("LP_THREADS", "lots")
    assert main(["gen-data", "--config", "smoke", "--out", str(tmp_path)]) == 2
    monkeypatch.setenv("LP_THREADS", "1")
    assert main(["gen-data", "--config", "smoke", "--out", str(tmp_path), "--seed", "4"]) == 0


def test_console_script_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "latentplan.cli", "gen-data", "--config", "smoke", "--out",
                           str(tmp_path), "--override", "dataset.n_episodes=2"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "gen-data" / "dataset.jsonl").exists()


def test_raw_and_skill_spaces(tmp_path):
    for space in ("raw", "skill"):
        cfg = tiny(tmp_path / space, f"space={space}", "return_head.steps=20")
        for stage in STAGES:
            run_command(cfg, stage)
        assert Pipeline(cfg).verify("evaluate")["metrics"]["n_episodes"] == 1


def test_ablate_sweep(tmp_path):
    cfg = tiny(tmp_path, "ablate.L=[2,4]", "ablate.beta=[0.3,3.0]", "ablate.H=[8]", "ablate.K=[5]",
               "H=8", "L=4")
    res = ablate(cfg)
    assert len(res["settings"]) == 4 and res["rows"] == 4
    assert (tmp_path / "ablate_summary.md").read_text().count("\n| ") == 5
    # both beta values share one encoder and one prior
    assert len(list((tmp_path / "ablate").glob("H8-L*/train-vae"))) == 2
    assert len(list((tmp_path / "ablate").glob("H8-L4/K5/beta*"))) == 2
