import json

import numpy as np
import pytest
import torch
import yaml

import dfgan.trainer as trainer
from dfgan.checkpoints import load_checkpoint
from dfgan.cli import main
from dfgan.datasets import write_png16
from dfgan.inference import load_bundle
from dfgan.metrics import parse_records
from dfgan.network import stage_checksums
from dfgan.utils import file_checksum

TINY = {
    "seed": 2,
    "phantom": {"size": 32, "n_samples": 30, "seed": 4, "noise_sigma": [0.01, 0.05]},
    "model": {"base_width": 4, "levels": 2, "disc_width": 4, "disc_downsamplings": 2},
    "train": {"epochs": 1, "learning_rate": 0.001, "lr_floor": 0.00001},
}


def tree_checksums(root):
    return {str(p.relative_to(root)): file_checksum(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["-q", "generate-phantoms", "--config", str(cfg), "--out", str(root / "data")]) == 0
    before = tree_checksums(root / "data")
    assert main(["-q", "train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    assert tree_checksums(root / "data") == before
    return root


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_generate_phantoms_outputs(workspace, tmp_path):
    data = workspace / "data"
    assert len(list((data / "attenuation").glob("*.png"))) == 30
    assert len(list((data / "darkfield").glob("*.png"))) == 30
    m = manifest(data)
    assert m["command"] == "generate-phantoms" and m["extra"]["n_pairs"] == 30
    assert m["config"]["noise_sigma"] == [0.01, 0.05]
    assert main(["-q", "generate-phantoms", "--config", str(workspace / "tiny.yaml"), "--out", str(tmp_path / "d2")]) == 0
    assert manifest(tmp_path / "d2")["extra"]["checksums"] == m["extra"]["checksums"]


def test_generate_phantoms_desk_size(tmp_path):
    cfg = tmp_path / "p.yaml"
    cfg.write_text(yaml.safe_dump({"n_samples": 200, "size": 64}))
    assert main(["-q", "generate-phantoms", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d" / "attenuation").iterdir())) == 200
    assert len(list((tmp_path / "d" / "darkfield").iterdir())) == 200
    assert (tmp_path / "d" / "manifest.json").exists()


@pytest.mark.parametrize("content", ["size: 8\n", "bogus_key: 1\n", "noise_sigma: [0.2, 0.1]\n", "- a list\n",
                                     "size: [unclosed\n"])
def test_generate_phantoms_bad_config(tmp_path, content, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(content)
    assert main(["-q", "generate-phantoms", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["-q", "generate-phantoms", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


def test_train_outputs(workspace):
    run = workspace / "run"
    names = sorted(p.name for p in (run / "checkpoints").iterdir())
    assert names == ["last_good.pt", "stage1.pt", "stage2.pt", "stage3.pt"]
    assert (run / "config.yaml").exists() and (run / "train_log.jsonl").exists()
    assert any((run / "previews").iterdir())
    m = manifest(run)
    assert m["command"] == "train" and m["status"] == "ok" and m["extra"]["stages"] == [1, 2, 3]
    echo = yaml.safe_load((run / "config.yaml").read_text())
    assert echo["seed"] == 2 and echo["model"]["base_width"] == 4 and echo["phantom"]["size"] == 32


def test_default_config_echo(workspace, tmp_path, capsys):
    out = tmp_path / "dry"
    assert main(["-q", "train", "--data", str(workspace / "data"), "--out", str(out), "--dry-run"]) == 0
    echo = yaml.safe_load((out / "config.yaml").read_text())
    assert echo["train"]["learning_rate"] == 8e-6 and echo["train"]["epochs"] == 50
    assert echo["model"]["dropout_rate"] == 0.1 and echo["passes"] == 20
    assert (echo["train"]["lambda_fidelity"], echo["train"]["lambda_residual"]) == (0.8, 0.001)
    assert manifest(out)["status"] == "dry-run"
    assert "learning_rate: 8.0e-06" in capsys.readouterr().out


def test_resume_single_stage_keeps_stage1_frozen(workspace, tmp_path):
    ckpt = workspace / "run" / "checkpoints" / "stage1.pt"
    g_before, _, _ = load_checkpoint(ckpt)
    out = tmp_path / "resume"
    assert main(["-q", "train", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
                 "--out", str(out), "--stage", "2", "--resume", str(ckpt), "--no-previews"]) == 0
    g_after, _, payload = load_checkpoint(out / "checkpoints" / "stage2.pt")
    before, after = stage_checksums(g_before), stage_checksums(g_after)
    assert after[0] == before[0] and after[1] != before[1] and after[2] == before[2]
    assert payload["trained_stages"] == 2 and manifest(out)["extra"]["stages"] == [2]
    assert not (out / "checkpoints" / "stage3.pt").exists()


def test_resume_errors(workspace, tmp_path):
    base = ["-q", "train", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
            "--out", str(tmp_path / "r")]
    assert main(base + ["--stage", "2"]) == 2
    assert main(base + ["--stage", "3", "--resume", str(workspace / "run" / "checkpoints" / "stage1.pt")]) == 2
    wide = tmp_path / "wide.yaml"
    wide.write_text(yaml.safe_dump({**TINY, "model": {**TINY["model"], "base_width": 8}}))
    assert main(["-q", "train", "--config", str(wide), "--data", str(workspace / "data"), "--out",
                 str(tmp_path / "w"), "--resume", str(workspace / "run" / "checkpoints" / "stage1.pt")]) == 2


def test_nan_abort_exit_code(workspace, tmp_path, monkeypatch):
    monkeypatch.setattr(trainer, "ggd_nll_torch", lambda y, *a: torch.full_like(y, float("nan")))
    out = tmp_path / "nan"
    code = main(["-q", "train", "--config", str(workspace / "tiny.yaml"), "--data", str(workspace / "data"),
                 "--out", str(out), "--stage", "2", "--resume", str(workspace / "run" / "checkpoints" / "stage1.pt")])
    assert code == 3
    m = manifest(out)
    assert m["status"] == "aborted" and (out / "checkpoints" / "last_good.pt").exists()
    _, _, payload = load_checkpoint(out / "checkpoints" / "last_good.pt")
    assert payload["trained_stages"] == 1


def test_infer_bundles_and_panels(workspace, tmp_path):
    ckpt = workspace / "run" / "checkpoints" / "stage3.pt"
    src = tmp_path / "ood"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(2):
        write_png16(rng.random((48, 40)), src / f"xray{i}.png")
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["-q", "infer", "--checkpoint", str(ckpt), "--input", str(src), "--out", str(out),
                     "--passes", "3", "--seed", "7"]) == 0
        outs.append(out)
    for i in range(2):
        b = load_bundle(outs[0] / "bundles" / f"xray{i}")
        assert b.prediction.shape == (32, 32) and b.passes == 3 and b.stage == 3
        assert (outs[0] / "panels" / f"xray{i}.png").exists()
    assert tree_checksums(outs[0] / "bundles") == tree_checksums(outs[1] / "bundles")
    m = manifest(outs[0])
    assert m["seeds"] == {"seed": 7} and m["extra"]["n_inputs"] == 2 and m["config"]["passes"] == 3


def test_infer_single_pass_zero_epistemic(workspace, tmp_path):
    ckpt = workspace / "run" / "checkpoints" / "stage2.pt"
    out = tmp_path / "one"
    assert main(["-q", "infer", "--checkpoint", str(ckpt), "--input", str(workspace / "data"), "--out", str(out),
                 "--passes", "1", "--epistemic-std"]) == 0
    bundles = sorted((out / "bundles").iterdir())
    assert len(bundles) == 30
    for d in bundles[:5]:
        b = load_bundle(d)
        assert np.all(b.epistemic_var == 0) and b.stage == 2


def test_infer_default_passes(workspace, tmp_path):
    src = tmp_path / "one"
    src.mkdir()
    write_png16(np.full((32, 32), 0.4), src / "a.png")
    out = tmp_path / "o"
    assert main(["-q", "infer", "--checkpoint", str(workspace / "run" / "checkpoints" / "stage1.pt"),
                 "--input", str(src), "--out", str(out)]) == 0
    assert load_bundle(out / "bundles" / "a").passes == 20


def test_infer_errors(workspace, tmp_path):
    ckpt = workspace / "run" / "checkpoints" / "stage1.pt"
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"junk")
    base = ["-q", "infer", "--input", str(workspace / "data"), "--out", str(tmp_path / "o")]
    assert main(base + ["--checkpoint", str(junk)]) == 2
    assert main(base + ["--checkpoint", str(ckpt), "--stage", "2"]) == 2
    assert main(base + ["--checkpoint", str(ckpt), "--passes", "0"]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["-q", "infer", "--checkpoint", str(ckpt), "--input", str(empty), "--out", str(tmp_path / "e")]) == 2


def test_evaluate_three_checkpoints(workspace, tmp_path):
    ck = workspace / "run" / "checkpoints"
    out = tmp_path / "ev"
    before = tree_checksums(workspace / "data")
    assert main(["-q", "evaluate", "--checkpoint", str(ck / "stage3.pt"), str(ck / "stage1.pt"),
                 str(ck / "stage2.pt"), "--data", str(workspace / "data"), "--out", str(out), "--passes", "2"]) == 0
    assert tree_checksums(workspace / "data") == before
    lines = (out / "report.txt").read_text().splitlines()
    assert lines[0].split("|")[1:] and [c.strip() for c in lines[0].split("|")] == ["Stage", "MSE", "PSNR", "SSIM"]
    assert [int(line.split("|")[0]) for line in lines[2:5]] == [1, 2, 3]
    reports = parse_records((out / "report.jsonl").read_text())
    assert [r.stage for r in reports] == [1, 2, 3] and all(r.n == 3 for r in reports)
    unc = json.loads((out / "uncertainty.json").read_text())
    assert set(unc) == {"1", "2", "3"} and all("aleatoric_spearman" in v for v in unc.values())
    assert manifest(out)["config"]["stages"] == [1, 2, 3]


def test_evaluate_single_checkpoint_all_stages(workspace, tmp_path):
    out = tmp_path / "ev"
    assert main(["-q", "evaluate", "--checkpoint", str(workspace / "run" / "checkpoints" / "stage3.pt"),
                 "--data", str(workspace / "data"), "--out", str(out), "--passes", "2", "--split", "all"]) == 0
    reports = parse_records((out / "report.jsonl").read_text())
    assert [r.stage for r in reports] == [1, 2, 3] and reports[0].n == 30


def test_evaluate_identical_predictions(workspace, tmp_path):
    preds = tmp_path / "preds"
    preds.mkdir()
    for p in (workspace / "data" / "darkfield").iterdir():
        (preds / p.name).write_bytes(p.read_bytes())
    out = tmp_path / "ev"
    assert main(["-q", "evaluate", "--predictions", str(preds), "--data", str(workspace / "data"),
                 "--out", str(out), "--split", "all"]) == 0
    (rep,) = parse_records((out / "report.jsonl").read_text())
    assert rep.mean == {"mse": 0.0, "psnr": 100.0, "ssim": 1.0}
    assert rep.std == {"mse": 0.0, "psnr": 0.0, "ssim": 0.0}


def test_evaluate_errors(workspace, tmp_path):
    ck = workspace / "run" / "checkpoints"
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["-q", "evaluate", "--checkpoint", str(ck / "stage1.pt"), "--data", str(empty),
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["-q", "evaluate", "--data", str(workspace / "data"), "--out", str(tmp_path / "o")]) == 2
    assert main(["-q", "evaluate", "--checkpoint", str(ck / "stage3.pt"), str(ck / "stage3.pt"),
                 "--data", str(workspace / "data"), "--out", str(tmp_path / "o")]) == 2
