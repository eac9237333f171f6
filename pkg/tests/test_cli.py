import json
import subprocess
import sys

import numpy as np
import pytest

from vocalign.cli import main
from vocalign.store import EmbeddingMatrix, load_matrix, save_matrix, save_vocabulary, nearest
from vocalign.align import StructuralLabels

from worlds import PlantedWorld


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    world = PlantedWorld(seed=11, n=600, d=32, k=6, vocab_size=40, noise=0.08)
    save_matrix(world.images, root / "images.emb")
    save_matrix(world.bank, root / "bank.emb")
    save_vocabulary(world.vocab, root / "vocab.jsonl")
    (root / "labels.txt").write_text("".join(f"{int(w)}\n" for w in world.gt_words))
    cfg = {
        "paths": {
            "images": str(root / "images.emb"),
            "vocab": str(root / "vocab.jsonl"),
            "vocab_embeddings": str(root / "bank.emb"),
            "labels": str(root / "labels.txt"),
        },
        "k": 6,
        "seed": 0,
        "llm": {"client": "fixture", "cache": None},
        "embedder": {"kind": "prototype", "sigma": 0.05},
        "train": {"epochs": 0},
    }
    (root / "config.json").write_text(json.dumps(cfg, indent=2))
    return root, world


def run_cli(*argv):
    return main([str(a) for a in argv])


def test_zeroshot_matches_nearest_oracle(world_dir, tmp_path):
    root, world = world_dir
    out = tmp_path / "zs"
    assert run_cli("zeroshot", "--config", root / "config.json", "--out", out) == 0
    pred = np.array([int(t) for t in (out / "predictions.txt").read_text().split()])
    oracle = nearest(world.images, world.bank, k=1)[0][:, 0]
    np.testing.assert_array_equal(pred, oracle)
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    by_name = {m["metric"]: m["value"] for m in metrics}
    assert by_name["top1_accuracy"] == 1.0
    assert (out / "manifest.json").exists()


def test_missing_vocab_path_exit_2(world_dir, tmp_path):
    root, _ = world_dir
    cfg = json.loads((root / "config.json").read_text())
    cfg["paths"]["vocab"] = str(root / "nope.jsonl")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(cfg))
    assert run_cli("zeroshot", "--config", bad, "--out", tmp_path / "o") == 2


def test_nonempty_out_requires_force(world_dir, tmp_path):
    root, _ = world_dir
    out = tmp_path / "busy"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    assert run_cli("zeroshot", "--config", root / "config.json", "--out", out) == 2
    assert run_cli("zeroshot", "--config", root / "config.json", "--out", out, "--force") == 0


def accuracy_of(out_dir, world):
    labels = StructuralLabels.load(out_dir / "labels.txt")
    return (labels.words == world.gt_words).mean()


def test_cvpr_mode_ordering(world_dir, tmp_path):
    root, world = world_dir
    accs = {}
    for mode in ("group", "scd", "cvpr"):
        out = tmp_path / mode
        code = run_cli("cvpr", "--config", root / "config.json", "--out", out, "--mode", mode)
        assert code == 0
        accs[mode] = accuracy_of(out, world)
        report = json.loads((out / "report.json").read_text())
        assert report["mode"] == mode
        assert (out / "vote_m.txt").exists()
    assert accs["cvpr"] >= accs["scd"] >= accs["group"]
    assert accs["cvpr"] >= 0.99
    # full cvpr also writes the realigned matrix
    assert (tmp_path / "cvpr" / "vote_m_tilde.txt").exists()
    assert not (tmp_path / "group" / "vote_m_tilde.txt").exists()


def test_cvpr_estimate_k_routing(world_dir, tmp_path):
    root, world = world_dir
    out = tmp_path / "estk"
    cfg = json.loads((root / "config.json").read_text())
    cfg["k"] = None
    cfg["estimate_k"] = {"enabled": True, "lb0": 2, "ub0": 30, "points_per_pass": 10}
    cfg_path = tmp_path / "estk.json"
    cfg_path.write_text(json.dumps(cfg))
    assert run_cli("cvpr", "--config", cfg_path, "--out", out, "--mode", "scd") == 0
    est = json.loads((out / "k_estimate.json").read_text())
    assert est["k_hat"] == json.loads((out / "report.json").read_text())["k"]
    assert abs(est["k_hat"] - world.k) <= 2


def test_m_default_is_three(world_dir, tmp_path):
    root, _ = world_dir
    out = tmp_path / "m3"
    assert run_cli("cvpr", "--config", root / "config.json", "--out", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["m"] == 3
    first = (out / "candidates.txt").read_text().splitlines()[0].split()
    assert len([t for t in first[1:] if t != "padded"]) == 3


def test_train_epochs_zero_equals_cvpr_labels(world_dir, tmp_path):
    root, _ = world_dir
    cvpr_out = tmp_path / "c"
    train_out = tmp_path / "t"
    assert run_cli("cvpr", "--config", root / "config.json", "--out", cvpr_out) == 0
    assert run_cli("train", "--config", root / "config.json", "--out", train_out) == 0
    assert (train_out / "labels.txt").read_bytes() == (cvpr_out / "labels.txt").read_bytes()
    adapter = np.load(train_out / "adapter.npz")
    np.testing.assert_array_equal(adapter["weight"], np.eye(32))


def test_train_seed_repeat_identical_history(world_dir, tmp_path):
    root, _ = world_dir
    cfg = json.loads((root / "config.json").read_text())
    cfg["train"] = {"epochs": 2, "ema_warmup_iters": 20}
    cfg_path = tmp_path / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert run_cli("train", "--config", cfg_path, "--out", out, "--seed", "5") == 0
        outs.append(out)
    assert (outs[0] / "history.jsonl").read_bytes() == (outs[1] / "history.jsonl").read_bytes()
    assert (outs[0] / "labels.txt").read_bytes() == (outs[1] / "labels.txt").read_bytes()


def test_rerun_manifest_reproduces_outputs(world_dir, tmp_path):
    root, _ = world_dir
    first = tmp_path / "first"
    assert run_cli("cvpr", "--config", root / "config.json", "--out", first) == 0
    second = tmp_path / "second"
    assert run_cli("cvpr", "--config", first / "manifest.json", "--out", second) == 0
    for name in ("labels.txt", "predictions.txt", "vote_m.txt", "assignment.txt"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_eval_delegates_and_gt_space(world_dir, tmp_path, capsys):
    root, world = world_dir
    out = tmp_path / "zs"
    assert run_cli("zeroshot", "--config", root / "config.json", "--out", out) == 0
    assert run_cli("eval", "--pred", out / "predictions.txt", "--gt", root / "labels.txt") == 0
    records = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    names = {r["metric"] for r in records}
    assert {"top1_accuracy", "clustering_accuracy", "label_set_iou"} <= names
    # out-of-vocabulary ground truth without a similarity matrix is an error
    assert (
        run_cli(
            "eval",
            "--pred",
            out / "predictions.txt",
            "--gt",
            root / "labels.txt",
            "--gt-space",
            "class",
        )
        == 2
    )


def test_eval_soft_accuracy_path(world_dir, tmp_path, capsys):
    root, world = world_dir
    sim = np.clip(world.bank.data @ world.bank.data.T, -1, 1)
    sim_path = tmp_path / "sim.emb"
    save_matrix(EmbeddingMatrix(sim), sim_path)
    out = tmp_path / "zs"
    assert run_cli("zeroshot", "--config", root / "config.json", "--out", out) == 0
    code = run_cli(
        "eval",
        "--pred",
        out / "predictions.txt",
        "--gt",
        root / "labels.txt",
        "--gt-space",
        "class",
        "--sim",
        sim_path,
    )
    assert code == 0
    records = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    by_name = {r["metric"]: r["value"] for r in records}
    assert by_name["soft_accuracy"] == pytest.approx(1.0, abs=1e-5)
    assert "clustering_accuracy" in by_name


def test_console_entrypoint_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "vocalign", "--version"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert "vocalign" in proc.stdout
