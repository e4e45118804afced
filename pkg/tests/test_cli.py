import csv
import json
import os
import subprocess
import sys
from pathlib import Path


from dtprune.cli import main

ROOT = Path(__file__).resolve().parents[1]

SMALL = {
    "seed": 0,
    "data": {"kind": "concentric-rings", "n_samples": 256, "test_samples": 256},
    "model": {"hidden": [8, 8]},
    "prune": {"ratio": 0.5, "epsilon": 1.0, "prune_steps": 60, "finetune_steps": 20},
}


def write_config(tmp_path, blob, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(blob))
    return str(path)


def patched(**sections):
    blob = json.loads(json.dumps(SMALL))
    for section, values in sections.items():
        if values is None:
            del blob[section]
        else:
            blob[section] = {**blob.get(section, {}), **values}
    return blob


# --- demo-toy ----------------------------------------------------------------------------


def test_demo_toy_default_converges(tmp_path, capsys):
    assert main(["demo-toy", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "loss 1.000" in out
    with open(tmp_path / "toy.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1000
    assert list(rows[0]) == ["step", "s0", "s1", "s2", "m0", "m1", "m2", "loss"]


def test_demo_toy_single_step_needs_no_check(tmp_path):
    assert main(["demo-toy", "--steps", "1", "--out", str(tmp_path)]) == 1
    assert main(["demo-toy", "--steps", "1", "--no-check", "--out", str(tmp_path)]) == 0


def test_demo_toy_ignores_seed(tmp_path, capsys):
    outputs = []
    for seed in (0, 17):
        out_dir = tmp_path / str(seed)
        assert main(["demo-toy", "--seed", str(seed), "--out", str(out_dir)]) == 0
        outputs.append((out_dir / "toy.csv").read_bytes())
        capsys.readouterr()
    assert outputs[0] == outputs[1]


# --- prune --------------------------------------------------------------------------------


def test_missing_key_exits_2_and_names_it(tmp_path, capsys):
    blob = patched()
    del blob["prune"]["epsilon"]
    assert main(["prune", "--config", write_config(tmp_path, blob)]) == 2
    assert "prune.epsilon" in capsys.readouterr().err


def test_unknown_key_exits_2(tmp_path, capsys):
    blob = patched(model={"hiden": [4]})
    assert main(["prune", "--config", write_config(tmp_path, blob)]) == 2
    assert "model.hiden" in capsys.readouterr().err


def test_bad_value_exits_2(tmp_path, capsys):
    blob = patched(prune={"ratio": 1.5})
    assert main(["prune", "--config", write_config(tmp_path, blob)]) == 2
    assert "prune" in capsys.readouterr().err


def test_malformed_file_exits_2(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert main(["prune", "--config", str(path)]) == 2


def test_missing_data_file_exits_3(tmp_path, capsys):
    blob = patched()
    blob["data"] = {"path": str(tmp_path / "nowhere.csv")}
    assert main(["prune", "--config", write_config(tmp_path, blob)]) == 3
    assert "data" in capsys.readouterr().err


def test_numerical_abort_exits_4(tmp_path, capsys):
    blob = patched(prune={"lr": 1e12, "prune_steps": 200})
    out = tmp_path / "run"
    assert main(["prune", "--config", write_config(tmp_path, blob), "--out", str(out)]) == 4
    assert "aborted at step" in capsys.readouterr().err
    # the partial metrics file is still valid line by line
    for line in (out / "metrics.jsonl").read_text().splitlines():
        json.loads(line)


def test_csv_data_path(tmp_path, capsys):
    from dtprune import netlab
    netlab.save_csv(netlab.make_toy_dataset("two-gaussians", 128, seed=0), tmp_path / "d.csv")
    blob = patched()
    blob["data"] = {"path": str(tmp_path / "d.csv")}
    assert main(["prune", "--config", write_config(tmp_path, blob),
                 "--out", str(tmp_path / "run")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["kept"] == {"1": 4}


def test_same_seed_gives_identical_metrics(tmp_path, capsys):
    cfg = write_config(tmp_path, patched())
    for name in ("a", "b"):
        assert main(["prune", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a == b
    assert json.loads(a.splitlines()[-1])["summary"]["kept"] == {"1": 4}


def test_overrides_change_the_run(tmp_path, capsys):
    cfg = write_config(tmp_path, patched())
    assert main(["prune", "--config", cfg, "--ratio", "0.25", "--out", str(tmp_path)]) == 0
    assert json.loads(capsys.readouterr().out)["kept"] == {"1": 6}


def test_rings_config_keeps_exactly_half(tmp_path, capsys):
    cfg = str(ROOT / "configs" / "rings.json")
    assert main(["prune", "--config", cfg, "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["kept"] == {"1": 16}
    assert summary["site_sizes"] == {"1": 32}
    assert (tmp_path / "checkpoint.json").exists()


def test_budget_config(tmp_path, capsys):
    blob = patched(model={"hidden": [8, 8], "mask_first": True},
                   prune={"prune_steps": 300},
                   budget={"target": 0.5, "penalty": 100.0})
    assert main(["prune", "--config", write_config(tmp_path, blob),
                 "--out", str(tmp_path / "run")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert abs(summary["flops_fraction"] - 0.5) < 0.05
    assert set(summary["kept"]) == {"0", "1"}


# --- ablate-sinkhorn ---------------------------------------------------------------------------


def test_ablation_table_sorted(tmp_path, capsys):
    cfg = write_config(tmp_path, patched())
    assert main(["ablate-sinkhorn", "--config", cfg, "--steps-list", "5,1,2",
                 "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["inner_iters"]) for r in rows] == [1, 2, 5]
    assert list(rows[0]) == ["inner_iters", "accuracy_mean", "accuracy_std", "ot_seconds"]


def test_ablation_bad_steps_list(tmp_path):
    cfg = write_config(tmp_path, patched())
    assert main(["ablate-sinkhorn", "--config", cfg, "--steps-list", "1,x"]) == 2
    assert main(["ablate-sinkhorn", "--config", cfg, "--steps-list", "0"]) == 2


# --- verify ---------------------------------------------------------------------------------------


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert sum(line.startswith("PASS") for line in lines) == 6


def test_verify_other_seed():
    assert main(["verify", "--seed", "11"]) == 0


def test_verify_detects_injected_fault(capsys):
    assert main(["verify", "--inject-fault"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_console_script_runs(tmp_path):
    env = {**os.environ, "TP_LOG": "error"}
    proc = subprocess.run([sys.executable, "-m", "dtprune.cli", "demo-toy", "--steps", "1",
                           "--no-check", "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert "final mask" in proc.stdout
