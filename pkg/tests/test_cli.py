import json

from click.testing import CliRunner

from ocreid.cli import main, occforge


def run(cmd, args):
    result = CliRunner().invoke(cmd, [str(a) for a in args], catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def test_end_to_end_cli(tmp_path):
    data, occ = tmp_path / "data", tmp_path / "occ"
    run(main, ["synth-data", "--out", data, "--ids", 4, "--clothes", 2, "--images", 5, "--seed", 2])
    run(occforge, ["--src", data, "--parsing", data, "--dst", occ])
    assert json.loads((occ / "stats.json").read_text())["num_processed"] > 0

    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset_root": str(occ), "layout": "manifest", "input_size": [64, 32], "P": 4,
                               "K": 2, "base_lr": 1e-3, "lr_decay_epochs": [], "total_epochs": 1,
                               "E_adv": 0, "batches_per_epoch": 2}))
    run_dir = tmp_path / "run"
    run(main, ["train", "--config", cfg, "--run-dir", run_dir, "--seed", 3])
    for name in ("checkpoint.npz", "train_log.csv", "summary.json", "config.json"):
        assert (run_dir / name).exists(), name

    out = run(main, ["eval", "--ckpt", run_dir / "checkpoint.npz", "--protocol", "ltcc_cc", "--lambda", 0.35,
                     "--save-distmat"])
    payload = json.loads(out.output)
    assert payload["protocol"] == "ltcc_cc" and 0.0 <= payload["rank1"] <= 1.0
    assert (run_dir / "distmat.bin").exists()

    run(main, ["export-metrics", run_dir / "train_log.csv", "--out", tmp_path / "s.json"])
    assert "decreased" in json.loads((tmp_path / "s.json").read_text())

    sweep_dir = tmp_path / "sweep"
    run(main, ["sweep", "--config", cfg, "--param", "lambda", "--from", 0.15, "--to", 0.25, "--step", 0.05,
               "--out", sweep_dir])
    assert len((sweep_dir / "sweep.csv").read_text().splitlines()) == 4


def test_sweep_requires_values(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    result = CliRunner().invoke(main, ["sweep", "--config", str(cfg), "--param", "k"])
    assert result.exit_code == 2 and "--values" in result.output
