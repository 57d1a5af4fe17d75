import json

import numpy as np
import pytest

from vitlab import experiment as ex
from vitlab.checkpoint import Checkpoint, load_checkpoint
from vitlab.cli import main
from vitlab.data import generate_synthetic_texture, save_dataset
from vitlab.experiment import (ConfigError, ExperimentConfig, SweepError, export_attention_heatmap, markdown_table,
                               run_sweep)
from vitlab.vit import PatchSpec, ViTConfig, init_weights

TINY = {"L": 1, "d": 8, "h": 2}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synth.npz"
    save_dataset(generate_synthetic_texture(8, 0), path)
    return path


def config(dataset, out, **kw):
    raw = {"dataset": str(dataset), "model": TINY, "patch_sizes": [14, 28, 7], "seeds": [0, 1],
           "ensemble": [7, 14], "train": {"epochs": 1, "batch_size": 8}, "augmentation": None, "out_dir": str(out)}
    raw.update(kw)
    return ExperimentConfig.from_dict(raw)


def test_defaults_mirror_protocol(dataset):
    cfg = ExperimentConfig(str(dataset))
    assert cfg.patch_sizes == [1, 2, 4, 7, 14, 28] and cfg.seeds == [0, 1, 2] and cfg.ensemble == [1, 2, 4]


@pytest.mark.parametrize("raw, msg", [
    ({"bogus": 1}, "unknown config keys"),
    ({"train": {"learning_rate": 1}}, "unknown train keys"),
    ({"augmentation": {"flip": 1}}, "unknown augmentation keys"),
    ({"seeds": []}, "seeds"),
    ({"ensemble": [3]}, "not in patch_sizes"),
    ({"model": "vit_huge"}, "preset"),
    ({"train": {"lr": -1}}, "lr"),
])
def test_config_rejections(dataset, raw, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.from_dict({"dataset": str(dataset), **raw})


def test_invalid_patch_size_fails_before_training(dataset, tmp_path, monkeypatch):
    monkeypatch.setattr(ex, "fit", lambda *a, **k: pytest.fail("trained before validation"))
    with pytest.raises(ConfigError, match=r"\[5\]"):
        run_sweep(config(dataset, tmp_path, patch_sizes=[5, 7], ensemble=[]))


def test_env_seed_override(dataset, monkeypatch):
    monkeypatch.setenv("VITLAB_SEED", "4")
    assert config(dataset, "x").with_env_seeds().seeds == [4]
    monkeypatch.setenv("VITLAB_SEED", "nope")
    with pytest.raises(ConfigError):
        config(dataset, "x").with_env_seeds()


@pytest.fixture(scope="module")
def sweep(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    cfg = config(dataset, out)
    return cfg, run_sweep(cfg)


def test_sweep_layout_and_schemas(sweep):
    cfg, root = sweep
    for p in (7, 14, 28):
        for s in (0, 1):
            d = root / str(p) / str(s)
            assert {f.name for f in d.iterdir()} == {"checkpoint.bin", "log.csv", "metrics.json"}
            load_checkpoint(d / "checkpoint.bin")
    runs = (root / "runs.csv").read_bytes().decode().split("\n")
    assert runs[0] == ",".join(ex.RUN_HEADER) == "dataset,dims,patch_size,seed,acc,bal_acc,auc,gflops"
    assert len([r for r in runs[1:] if r]) == 6 + 2
    assert [r.split(",")[2] for r in runs[1:] if r] == ["7", "7", "14", "14", "28", "28", "7+14", "7+14"]
    summary = (root / "summary.csv").read_bytes()
    assert b"\r" not in summary
    lines = summary.decode().splitlines()
    assert lines[0] == ("dataset,dims,patch_size,acc_mean,acc_std,bal_acc_mean,bal_acc_std,"
                        "auc_mean,auc_std,gflops")
    assert [l.split(",")[2] for l in lines[1:]] == ["7", "14", "28", "7+14"]
    assert all(len(v.split(".")[1]) == 4 for v in lines[1].split(",")[3:])


def test_ensemble_gflops_is_member_sum(sweep):
    cfg, root = sweep
    recs = {(p, s): json.loads((root / str(p) / str(s) / "metrics.json").read_text()) for p in (7, 14) for s in (0, 1)}
    rows = ex.ensemble_rows(cfg, recs)
    assert rows[0]["gflops"] == recs[(7, 0)]["gflops"] + recs[(14, 0)]["gflops"]


def test_markdown_row_order(sweep):
    _, root = sweep
    md = (root / "results.md").read_text().splitlines()
    assert [l.split("|")[1].strip() for l in md[2:]] == ["7", "14", "28", "(7, 14)"]


def test_markdown_table_canonical_layout():
    row = dict(acc_mean=0.5, acc_std=0.0, bal_acc_mean=0.5, bal_acc_std=0.0, auc_mean=0.5, auc_std=0.0, gflops=1.0)
    md = markdown_table([{**row, "patch_size": p} for p in (1, 2, 4, 7, 14, 28)] + [{**row, "patch_size": "1+2+4"}])
    assert [l.split("|")[1].strip() for l in md.splitlines()[2:]] == ["1", "2", "4", "7", "14", "28", "(1, 2, 4)"]


def test_single_seed_std_is_zero(dataset, tmp_path):
    root = run_sweep(config(dataset, tmp_path, seeds=[3], patch_sizes=[28], ensemble=[]))
    row = (root / "summary.csv").read_text().splitlines()[1].split(",")
    assert row[4] == row[6] == row[8] == "0.0000"


def test_resume_skips_and_reproduces(sweep, monkeypatch):
    cfg, root = sweep
    before = {f: (root / f).read_bytes() for f in ("runs.csv", "summary.csv", "results.md")}
    monkeypatch.setattr(ex, "execute_run", lambda *a, **k: pytest.fail("resume retrained a finished run"))
    run_sweep(cfg, resume=True)
    assert all((root / f).read_bytes() == b for f, b in before.items())


def test_rerun_without_resume_is_byte_identical(dataset, tmp_path):
    cfg = config(dataset, tmp_path, patch_sizes=[28], ensemble=[], seeds=[0])
    root = run_sweep(cfg)
    first = (root / "runs.csv").read_bytes(), (root / "28" / "0" / "checkpoint.bin").read_bytes()
    run_sweep(cfg)
    assert ((root / "runs.csv").read_bytes(), (root / "28" / "0" / "checkpoint.bin").read_bytes()) == first


def test_failure_flushes_completed_rows(dataset, tmp_path, monkeypatch):
    real = ex.execute_run

    def flaky(cfg, patch, seed, *a, **k):
        if patch == 14:
            raise RuntimeError("boom")
        return real(cfg, patch, seed, *a, **k)

    monkeypatch.setattr(ex, "execute_run", flaky)
    cfg = config(dataset, tmp_path, patch_sizes=[7, 14, 28], seeds=[0], ensemble=[])
    with pytest.raises(SweepError, match="p=14 seed=0"):
        run_sweep(cfg)
    rows = (tmp_path / "synth" / "runs.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].split(",")[2] == "7"
    assert not (tmp_path / "synth" / "summary.csv").exists()


def test_parallel_matches_serial(dataset, tmp_path):
    a = run_sweep(config(dataset, tmp_path / "a", patch_sizes=[14, 28], seeds=[0], ensemble=[14, 28]))
    b = run_sweep(config(dataset, tmp_path / "b", patch_sizes=[14, 28], seeds=[0], ensemble=[14, 28]), parallel=2)
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()


def test_pretrained_source_is_adapted(dataset, tmp_path):
    src = ViTConfig(1, 8, 2, PatchSpec(16, 224, 224), 1000)
    from vitlab.checkpoint import save_checkpoint
    save_checkpoint(Checkpoint(init_weights(src, 0), src.to_meta()), tmp_path / "src.bin")
    cfg = config(dataset, tmp_path / "o", patch_sizes=[7], seeds=[0], ensemble=[], pretrained=str(tmp_path / "src.bin"))
    root = run_sweep(cfg)
    ck = load_checkpoint(root / "7" / "0" / "checkpoint.bin")
    assert ck.meta["patch_size"] == 7 and ck.meta["num_classes"] == 2 and ck.meta["grid"] == [4, 4]


# -- heatmaps ----------------------------------------------------------------------

def _ckpt(p, dims=2):
    cfg = ViTConfig(1, 8, 2, PatchSpec(p, D=28 if dims == 3 else None), 2)
    return Checkpoint(init_weights(cfg, 1), cfg.to_meta())


def test_heatmap_files(tmp_path):
    from PIL import Image
    img = np.random.default_rng(0).random((28, 28, 3)).astype(np.float32)
    paths = export_attention_heatmap(_ckpt(2), img, tmp_path / "p2.png")
    heat = np.asarray(Image.open(paths["heatmap"]))
    assert heat.shape == (28, 28) and heat.dtype == np.uint8
    assert heat.min() == 0 and heat.max() == 255
    assert np.asarray(Image.open(paths["image"])).shape == (28, 28, 3)
    assert np.asarray(Image.open(paths["grid"])).shape == (28, 28, 3)
    again = export_attention_heatmap(_ckpt(2), img, tmp_path / "again.png")
    assert all(paths[k].read_bytes() == again[k].read_bytes() for k in paths)


def test_heatmap_single_patch_and_volume(tmp_path):
    from PIL import Image
    img = np.random.default_rng(1).random((28, 28, 3))
    paths = export_attention_heatmap(_ckpt(28), img, tmp_path / "p28.png")
    assert np.ptp(np.asarray(Image.open(paths["heatmap"]))) == 0
    with pytest.raises(NotImplementedError):
        export_attention_heatmap(_ckpt(14, dims=3), np.zeros((28, 28, 28, 3)), tmp_path / "v.png")


# -- cli -----------------------------------------------------------------------------

def test_cli_cost(capsys):
    assert main(["cost"]) == 0
    out = capsys.readouterr().out
    assert "16.6684" in out and "1+2+4" in out


def test_cli_synth_adapt_attmap(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s.npz"), "--n-per-class", "8"]) == 0
    from vitlab.checkpoint import save_checkpoint
    save_checkpoint(_ckpt(7), tmp_path / "c.bin")
    assert main(["adapt", "--checkpoint", str(tmp_path / "c.bin"), "--out", str(tmp_path / "a.bin"),
                 "--patch", "4", "--classes", "3", "--dims", "3"]) == 0
    assert load_checkpoint(tmp_path / "a.bin").tensors["patch_embed.weight"].shape == (4, 4, 4, 3, 8)
    assert main(["attmap", "--checkpoint", str(tmp_path / "c.bin"), "--dataset", str(tmp_path / "s.npz"),
                 "--out", str(tmp_path / "m" / "h.png")]) == 0
    assert (tmp_path / "m" / "h_grid.png").exists()


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"dataset": "x.npz", "typo": 1}')
    assert main(["run", "--config", str(tmp_path / "bad.json")]) == 1
    assert "typo" in capsys.readouterr().err
