"""Command-line pipeline orchestration.

Subcommands wire the library into reproducible runs: zeroshot (per-instance
nearest word), cvpr (group / scd / cvpr pseudo-labeling), train (teacher-
student self-training), and eval (metric reports). Every run resolves a JSON
config, writes a manifest with input hashes, and drops its artifacts under
--out with fixed filenames. Exit codes: 0 success, 1 pipeline error, 2
usage/config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import FormatError, ValidationError, VocalignError, __version__
from .align import partition_hash, run_cvpr
from .cluster import estimate_k
from .metrics import (
    clustering_accuracy,
    label_set_iou,
    load_similarity,
    metric_record,
    soft_accuracy,
    top1_accuracy,
)
from .prompts import (
    AttributeCatalog,
    FileSentenceEmbedder,
    FixtureLlmClient,
    HttpLlmClient,
    PrototypeSentenceEmbedder,
    ResponseCache,
    build_prompt,
    compose_prompt_sentences,
    parse_attributes,
    query_attributes,
)
from .store import load_matrix, load_vocabulary, nearest
from .training import TrainConfig, train


class ConfigError(VocalignError):
    """Bad configuration or usage; maps to exit code 2."""


DEFAULTS = {
    "mode": "cvpr",
    "k": None,
    "estimate_k": {"enabled": False, "lb0": 50, "ub0": 2000, "points_per_pass": 15},
    "m": 3,
    "max_iter": 50,
    "seed": 0,
    "threads": 1,
    "templates": None,
    "embedder": {"kind": "prototype", "sigma": 0.05},
    "llm": {"client": "fixture", "cache": None},
    "train": {},
    "emit_sentences_only": False,
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def resolve_config(args) -> dict:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    if "config" in raw and "inputs" in raw:  # a manifest was passed back in
        raw = raw["config"]
    cfg = _merge(DEFAULTS, raw)
    cfg.setdefault("paths", {})

    for flag in ("mode", "k", "m", "seed", "threads"):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[flag] = val
    if getattr(args, "gamma", None) is not None:
        cfg["train"]["gamma"] = args.gamma
    if getattr(args, "tau", None) is not None:
        cfg["train"]["tau"] = args.tau
    if getattr(args, "estimate_k", False):
        cfg["estimate_k"]["enabled"] = True
    return cfg


def require_paths(cfg: dict, names: list[str]) -> dict:
    paths = {}
    for name in names:
        value = cfg["paths"].get(name)
        if not value:
            raise ConfigError(f"config paths.{name} is required for this command")
        p = Path(value)
        if not p.exists():
            raise ConfigError(f"paths.{name}: file not found: {p}")
        paths[name] = p
    return paths


def prepare_out(args) -> Path:
    if not args.out:
        raise ConfigError("--out DIR is required")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: dict) -> None:
    inputs = {}
    for name, value in sorted(cfg.get("paths", {}).items()):
        if value and Path(value).exists():
            inputs[name] = {"path": str(value), "sha256": sha256_file(Path(value))}
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "inputs": inputs,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def write_predictions(out: Path, words: np.ndarray) -> None:
    (out / "predictions.txt").write_text(
        "".join(f"{int(w)}\n" for w in words), encoding="utf-8"
    )


def load_label_file(path: Path) -> np.ndarray:
    """One integer per line, or two-column "index word" records with an
    optional leading # header (the structural-labels format)."""
    values = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        values.append(int(parts[-1]))
    if not values:
        raise FormatError(f"{path}: no labels found")
    return np.array(values, dtype=np.int64)


def write_metrics(out: Path | None, records: list[dict]) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if out is None:
        sys.stdout.write(text)
    else:
        (out / "metrics.jsonl").write_text(text, encoding="utf-8")


def standard_metrics(pred, gt, cfg) -> list[dict]:
    return [
        metric_record("top1_accuracy", top1_accuracy(pred, gt), len(pred), cfg),
        metric_record("clustering_accuracy", clustering_accuracy(pred, gt), len(pred), cfg),
        metric_record(
            "label_set_iou", label_set_iou(set(pred.tolist()), set(gt.tolist())), len(pred), cfg
        ),
    ]


def make_llm_client(cfg: dict):
    kind = cfg["llm"].get("client", "fixture")
    if kind == "fixture":
        return FixtureLlmClient()
    if kind == "http":
        return HttpLlmClient()
    if kind == "none":
        return None
    raise ConfigError(f"unknown llm.client {kind!r}")


def make_cache(cfg: dict):
    path = cfg["llm"].get("cache")
    return ResponseCache(path) if path else None


def make_embedder(cfg: dict, vocab_bank):
    kind = cfg["embedder"].get("kind", "prototype")
    if kind == "prototype":
        return PrototypeSentenceEmbedder(vocab_bank, sigma=float(cfg["embedder"].get("sigma", 0.05)))
    if kind == "file":
        paths = require_paths(cfg, ["augmented_embeddings", "augmented_sentences"])
        return FileSentenceEmbedder.from_files(
            paths["augmented_embeddings"], paths["augmented_sentences"]
        )
    raise ConfigError(f"unknown embedder.kind {kind!r}")


def resolve_k(cfg: dict, images, out: Path | None):
    if cfg["estimate_k"]["enabled"]:
        est = estimate_k(
            images,
            lb0=int(cfg["estimate_k"]["lb0"]),
            ub0=int(cfg["estimate_k"]["ub0"]),
            points_per_pass=int(cfg["estimate_k"]["points_per_pass"]),
            seed=int(cfg["seed"]),
        )
        if out is not None:
            (out / "k_estimate.json").write_text(
                json.dumps(
                    {
                        "k_hat": est.k_hat,
                        "pass_solutions": list(est.pass_solutions),
                        "scan_log": [
                            [[int(kk), float(s)] for kk, s in p] for p in est.scan_log
                        ],
                        "notes": est.notes,
                    },
                    indent=2,
                )
                + "\n",
                encoding="utf-8",
            )
        return est.k_hat
    if cfg["k"] is None:
        raise ConfigError("config needs k or estimate_k.enabled")
    return int(cfg["k"])


# ---------------------------------------------------------------- commands


def cmd_zeroshot(args) -> int:
    cfg = resolve_config(args)
    paths = require_paths(cfg, ["images", "vocab", "vocab_embeddings"])
    out = prepare_out(args)
    write_manifest(out, "zeroshot", cfg)
    images = load_matrix(paths["images"])
    vocab = load_vocabulary(paths["vocab"])
    bank = load_matrix(paths["vocab_embeddings"])
    if len(vocab) != bank.n:
        raise ValidationError(f"vocabulary size {len(vocab)} != bank rows {bank.n}")
    idx, _ = nearest(images, bank, k=1, threads=int(cfg["threads"]))
    pred = idx[:, 0]
    write_predictions(out, pred)
    if cfg["paths"].get("labels"):
        gt = load_label_file(Path(cfg["paths"]["labels"]))
        write_metrics(out, standard_metrics(pred, gt, cfg))
    return 0


def _pipeline(cfg: dict, out: Path):
    paths = require_paths(cfg, ["images", "vocab", "vocab_embeddings"])
    images = load_matrix(paths["images"])
    vocab = load_vocabulary(paths["vocab"])
    bank = load_matrix(paths["vocab_embeddings"])
    k = resolve_k(cfg, images, out)
    client = make_llm_client(cfg)
    cache = make_cache(cfg)
    embedder = make_embedder(cfg, bank) if cfg["mode"] == "cvpr" else None
    return images, vocab, bank, k, client, cache, embedder


def _write_pipeline_artifacts(out: Path, cfg: dict, result) -> None:
    with open(out / "partition.txt", "w", encoding="utf-8") as fh:
        fh.write(f"# k={result.partition.k} n={result.partition.n} seed={cfg['seed']}\n")
        for i, c in enumerate(result.partition.assignment):
            fh.write(f"{i} {int(c)}\n")
    result.vote_matrix.save(out / "vote_m.txt")
    if result.candidates is not None:
        with open(out / "candidates.txt", "w", encoding="utf-8") as fh:
            for cid, members in enumerate(result.candidates.members):
                flag = " padded" if result.candidates.padded[cid] else ""
                fh.write(f"{cid} {' '.join(str(w) for w in members)}{flag}\n")
    if result.realign_matrix is not None:
        result.realign_matrix.save(out / "vote_m_tilde.txt")
    result.assignment.save(out / "assignment.txt")
    result.labels.save(out / "labels.txt")
    write_predictions(out, result.labels.words)
    report = {
        "mode": cfg["mode"],
        "k": result.partition.k,
        "converged": result.converged,
        "partition_hash": partition_hash(result.partition.assignment),
        "timings": result.timings,
        "warnings": result.catalog.warnings if result.catalog else [],
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")


def cmd_cvpr(args) -> int:
    cfg = resolve_config(args)
    if cfg["mode"] not in ("group", "scd", "cvpr"):
        raise ConfigError(f"cvpr command supports modes group/scd/cvpr, got {cfg['mode']!r}")
    out = prepare_out(args)
    write_manifest(out, "cvpr", cfg)
    images, vocab, bank, k, client, cache, embedder = _pipeline(cfg, out)

    if cfg.get("emit_sentences_only"):
        return _emit_sentences(cfg, out, images, vocab, bank, k, client, cache)

    result = run_cvpr(
        images,
        vocab,
        bank,
        k,
        seed=int(cfg["seed"]),
        m=int(cfg["m"]),
        mode=cfg["mode"],
        max_iter=int(cfg["max_iter"]),
        threads=int(cfg["threads"]),
        llm_client=client,
        cache=cache,
        embedder=embedder,
        templates=cfg["templates"],
    )
    _write_pipeline_artifacts(out, cfg, result)
    if cfg["paths"].get("labels"):
        gt = load_label_file(Path(cfg["paths"]["labels"]))
        write_metrics(out, standard_metrics(result.labels.words, gt, cfg))
    return 0


def _emit_sentences(cfg, out, images, vocab, bank, k, client, cache) -> int:
    """Run cluster+vote+prompt only and write the composed sentences, so an
    external encoder can embed them for a later file-embedder run."""
    from .align import vote, iterative_cluster_vote

    part, _, _ = iterative_cluster_vote(
        images, bank, k, seed=int(cfg["seed"]), max_iter=int(cfg["max_iter"]),
        threads=int(cfg["threads"]),
    )
    nn_word = nearest(images, bank, k=1, threads=int(cfg["threads"]))[0][:, 0]
    _, candidates = vote(part, nn_word, m=int(cfg["m"]), vocab_size=bank.n)
    catalog = AttributeCatalog({}, source="cache")
    for cid in range(part.k):
        words = candidates.members[cid]
        missing = [j for j in words if j not in catalog.attributes]
        if not missing:
            continue
        prompt = build_prompt([(vocab.name(j), vocab[j].synsets) for j in words])
        response = query_attributes(prompt, client=client, cache=cache)
        parsed = parse_attributes(response, [(j, vocab.name(j)) for j in words])
        for j in missing:
            catalog.attributes[j] = parsed.attributes[j]
    seen = set()
    lines = []
    for cid in range(part.k):
        for ps in compose_prompt_sentences(catalog, candidates.members[cid], vocab, cfg["templates"]):
            if ps.text not in seen:
                seen.add(ps.text)
                lines.append(ps.text)
    (out / "sentences.txt").write_text("".join(s + "\n" for s in lines), encoding="utf-8")
    catalog.save(out / "catalog.jsonl", vocab)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = prepare_out(args)
    write_manifest(out, "train", cfg)
    images, vocab, bank, k, client, cache, embedder = _pipeline(cfg, out)
    if embedder is None:
        embedder = make_embedder(cfg, bank)
    try:
        train_cfg = TrainConfig(**{**cfg.get("train", {}), "seed": int(cfg["seed"])})
    except TypeError as e:
        raise ConfigError(f"bad train config: {e}") from e
    gt = None
    if cfg["paths"].get("labels"):
        gt = load_label_file(Path(cfg["paths"]["labels"]))
    mode = cfg["mode"] if cfg["mode"] in ("group", "scd", "cvpr") else "cvpr"
    result = train(
        images,
        vocab,
        bank,
        k,
        train_cfg,
        mode=mode,
        m=int(cfg["m"]),
        max_iter=int(cfg["max_iter"]),
        threads=int(cfg["threads"]),
        llm_client=client,
        cache=cache,
        embedder=embedder,
        gt_labels=gt,
    )
    result.teacher.save(out / "adapter.npz")
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for rec in result.history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_pipeline_artifacts(out, cfg, result.final)
    if gt is not None:
        write_metrics(out, standard_metrics(result.final.labels.words, gt, cfg))
    return 0


def cmd_eval(args) -> int:
    pred_path = Path(args.pred)
    gt_path = Path(args.gt)
    for p in (pred_path, gt_path):
        if not p.exists():
            raise ConfigError(f"file not found: {p}")
    pred = load_label_file(pred_path)
    gt = load_label_file(gt_path)
    out = None
    if args.out:
        out = prepare_out(args)
    cfg = {"pred": str(pred_path), "gt": str(gt_path), "gt_space": args.gt_space}
    records = []
    if args.gt_space == "word":
        records.extend(standard_metrics(pred, gt, cfg))
    else:
        if not args.sim:
            raise ConfigError(
                "ground truth in a non-vocabulary label space needs --sim "
                "(soft accuracy over a similarity matrix)"
            )
        records.append(
            metric_record("clustering_accuracy", clustering_accuracy(pred, gt), len(pred), cfg)
        )
    if args.sim:
        sim, _, _ = load_similarity(args.sim, args.sim_sidecar)
        records.append(metric_record("soft_accuracy", soft_accuracy(pred, gt, sim), len(pred), cfg))
    write_metrics(out, records)
    return 0


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vocalign",
        description="Vocabulary-scale pseudo-labeling and self-training over embeddings",
    )
    parser.add_argument("--version", action="version", version=f"vocalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", required=True, help="JSON config (or a prior manifest)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--mode", choices=["zeroshot", "group", "scd", "cvpr"], default=None)
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--estimate-k", action="store_true", dest="estimate_k")
        p.add_argument("--m", type=int, default=None)
        p.add_argument("--gamma", type=float, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--force", action="store_true")

    p_zero = sub.add_parser("zeroshot", help="per-instance nearest-word prediction")
    add_run_flags(p_zero)
    p_zero.set_defaults(func=cmd_zeroshot)

    p_cvpr = sub.add_parser("cvpr", help="cluster/vote/prompt/realign pseudo-labeling")
    add_run_flags(p_cvpr)
    p_cvpr.set_defaults(func=cmd_cvpr)

    p_train = sub.add_parser("train", help="teacher-student self-training")
    add_run_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="metric report for prediction files")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--sim", default=None, help="similarity matrix (EMB1)")
    p_eval.add_argument("--sim-sidecar", default=None, help="row/col id sidecar JSON")
    p_eval.add_argument("--gt-space", choices=["word", "class"], default="word")
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--force", action="store_true")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except VocalignError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
