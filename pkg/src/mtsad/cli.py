"""Command-line surface: synth, pretrain, finetune, detect, eval, gradcheck.

Every command writes its artifacts atomically (temp file + rename) and drops
a ``manifest.json`` next to them recording the resolved configuration,
seeds, input/output paths, wall-clock time, and artifact checksums.

Exit codes: 0 success, 1 numeric verification failure, 2 bad arguments or
spec, 3 data/schema error.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import model as mdl
from .autodiff import (DiffGraph, Tensor, grad_check)
from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SeriesFrame, apply_normalization, load_csv, save_csv, save_labels
from .detection import calibrate, detect_two_level, point_adjust, prf1, score
from .errors import (CheckpointError, ContractError, DataError, IngestionError,
                     PlanError, ShapeError, SpecError)
from .model import ModelConfig
from .synthetic import default_spec, generate_entity, load_spec, spec_to_dict
from .training import TrainConfig, finetune, pretrain, split_points

GRADCHECK_TOLERANCE = 1e-4


# ---------------------------------------------------------------------------
# config and manifest plumbing
# ---------------------------------------------------------------------------


def atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(directory: Path, command: str, config: dict, seed: int | None,
                   inputs: list[str], outputs: list[Path], started: float) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": sorted(str(p) for p in inputs),
        "outputs": {str(p): _sha256(p) for p in sorted(outputs)},
        "wall_clock_s": round(time.time() - started, 3),
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ContractError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ContractError(f"config file {path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ContractError(f"config file {path} must hold a JSON object")
    return doc


def resolve_train_config(doc: dict, args) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    section = dict(doc.get("train", {}))
    unknown = set(section) - fields
    if unknown:
        raise ContractError(f"unknown train config keys: {sorted(unknown)}")
    if getattr(args, "steps", None) is not None:
        section["steps"] = args.steps
    if args.seed is not None:
        section["seed"] = args.seed
    if "steps" not in section:
        raise ContractError("train config needs 'steps' (flag --steps or config file)")
    return TrainConfig(**section)


def resolve_model_config(doc: dict, n_metrics: int, seed: int | None) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    section = dict(doc.get("model", {}))
    unknown = set(section) - fields
    if unknown:
        raise ContractError(f"unknown model config keys: {sorted(unknown)}")
    section.setdefault("n_metrics", n_metrics)
    if seed is not None:
        section.setdefault("seed", seed)
    return ModelConfig(**section)


def _load_frame(path: str) -> SeriesFrame:
    if not Path(path).exists():
        raise DataError(f"entity file not found: {path}")
    return load_csv(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.time()
    spec = load_spec(args.spec) if args.spec else default_spec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    spec.validate()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []
    meta_all = {}
    for e in range(spec.n_entities):
        frame = generate_entity(spec, e)
        data_path = out_dir / f"entity_{e:03d}.csv"
        label_path = out_dir / f"entity_{e:03d}_labels.csv"
        tmp = data_path.with_name(data_path.name + ".tmp")
        save_csv(frame, tmp)
        tmp.replace(data_path)
        tmp = label_path.with_name(label_path.name + ".tmp")
        save_labels(frame, tmp)
        tmp.replace(label_path)
        outputs += [data_path, label_path]
        meta_all[data_path.name] = frame.meta
    meta_path = out_dir / "recipes.json"
    atomic_write_text(meta_path, json.dumps(meta_all, indent=2) + "\n")
    outputs.append(meta_path)
    write_manifest(out_dir, "synth", spec_to_dict(spec), spec.seed,
                   [args.spec] if args.spec else [], outputs, started)
    print(f"wrote {spec.n_entities} entities to {out_dir}")
    return 0


def _write_loss_csv(path: Path, rows: list[tuple[int, float]]) -> None:
    lines = ["step,running_loss"] + [f"{s},{v!r}" for s, v in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_pretrain(args) -> int:
    started = time.time()
    paths = sorted(p for p in glob.glob(args.data) if not p.endswith("_labels.csv"))
    if not paths:
        raise DataError(f"no entity data files match {args.data!r}")
    fleet = [_load_frame(p) for p in paths]
    doc = load_config_file(args.config)
    config = resolve_train_config(doc, args)
    model_config = resolve_model_config(doc, fleet[0].n_metrics, args.seed)
    result = pretrain(fleet, config, model_config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out)
    loss_path = out.with_name(out.stem + "_loss.csv")
    _write_loss_csv(loss_path, result.loss_log)
    write_manifest(out.parent, "pretrain",
                   {"train": dataclasses.asdict(config),
                    "model": dataclasses.asdict(model_config)},
                   config.seed, paths, [out, loss_path], started)
    final = result.loss_log[-1][1] if result.loss_log else float("nan")
    print(f"pretrained {config.steps} steps over {len(fleet)} entities; "
          f"running loss {final:.6f}; checkpoint {out}")
    return 0


def cmd_finetune(args) -> int:
    started = time.time()
    frame = _load_frame(args.entity)
    doc = load_config_file(args.config)
    config = resolve_train_config(doc, args)
    base = None
    model_config = None
    if args.scratch:
        model_config = resolve_model_config(doc, frame.n_metrics, args.seed)
        if Path(args.base).exists():
            base = load_checkpoint(args.base)
    else:
        base = load_checkpoint(args.base)
    result = finetune(base, frame, config, scratch=args.scratch, model_config=model_config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out)
    loss_path = out.with_name(out.stem + "_loss.csv")
    _write_loss_csv(loss_path, result.loss_log)
    mc = result.checkpoint.model_config
    write_manifest(out.parent, "finetune",
                   {"train": dataclasses.asdict(config),
                    "model": dataclasses.asdict(mc),
                    "scratch": bool(args.scratch)},
                   config.seed, [args.entity, args.base], [out, loss_path], started)
    print(f"fine-tuned {config.steps} steps on {args.entity} "
          f"({'scratch' if args.scratch else 'warm start'}); checkpoint {out}")
    return 0


def _write_scores_csv(path: Path, errors, result) -> None:
    header = ["timestamp"] + [f"{m}_err" for m in errors.metric_names] + \
             ["entity_count", "entity_flag"]
    lines = [",".join(header)]
    for j in range(errors.errors.shape[1]):
        row = [str(int(errors.timestamps[j]))]
        row += [repr(float(v)) for v in errors.errors[:, j]]
        row += [str(int(result.counts[j])), str(int(result.entity_flags[j]))]
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_detect(args) -> int:
    started = time.time()
    if not 0.0 < args.a_r < 1.0:
        raise ContractError(f"--a-r must be in (0, 1), got {args.a_r}")
    ckpt = load_checkpoint(args.ckpt)
    frame = _load_frame(args.entity)
    if ckpt.stats is None:
        raise DataError("checkpoint has no normalization stats; fine-tune on the entity first")
    doc = load_config_file(args.config)
    section = dict(doc.get("detect", {}))
    unknown = set(section) - {"train_fraction", "val_fraction", "bins"}
    if unknown:
        raise ContractError(f"unknown detect config keys: {sorted(unknown)}")
    train_fraction = float(section.get("train_fraction", 0.5))
    val_fraction = float(section.get("val_fraction", 0.2))
    bins = int(section.get("bins", 1000))

    normalized = apply_normalization(frame, ckpt.stats)
    errors = score(normalized, ckpt)
    lead = frame.n_points - errors.errors.shape[1]
    split_cfg = TrainConfig(steps=0, train_fraction=train_fraction, val_fraction=val_fraction)
    grad_end, train_end = split_points(frame.n_points, split_cfg)
    val_lo, val_hi = max(grad_end - lead, 0), max(train_end - lead, 0)
    if val_hi <= val_lo:
        raise DataError("validation slice is empty; frame too short for calibration")
    val_errors = errors.sliced(val_lo, val_hi)
    labels = frame.labels
    val_labels = labels[grad_end:train_end] if labels is not None else None
    th = calibrate(val_errors, val_labels, args.a_r, bins=bins)
    result = detect_two_level(errors, th)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scores_path = out_dir / "scores.csv"
    _write_scores_csv(scores_path, errors, result)

    report = {
        "entity": str(args.entity),
        "a_r": args.a_r,
        "eta": th.eta,
        "gate_entity": th.gate_entity,
        "gates": [float(g) for g in th.gates],
        "n_flagged": int(result.entity_flags.sum()),
    }
    if labels is not None:
        test_lo = max(train_end - lead, 0)
        pred = result.entity_flags[test_lo:]
        truth = labels[train_end:]
        adjusted = point_adjust(pred, truth)
        ev = prf1(adjusted, truth)
        report.update({
            "tp": ev.tp, "fp": ev.fp, "fn": ev.fn,
            "precision": ev.precision, "recall": ev.recall, "f1": ev.f1,
            "segments": [
                {"start": int(s["start"] + train_end), "end": int(s["end"] + train_end),
                 "detected": s["detected"]}
                for s in ev.segments
            ],
        })
    report_path = out_dir / "report.json"
    atomic_write_text(report_path, json.dumps(report, indent=2) + "\n")
    write_manifest(out_dir, "detect",
                   {"a_r": args.a_r, "train_fraction": train_fraction,
                    "val_fraction": val_fraction, "bins": bins},
                   args.seed, [args.ckpt, args.entity], [scores_path, report_path], started)
    if "f1" in report:
        print(f"precision {report['precision']:.3f} recall {report['recall']:.3f} "
              f"f1 {report['f1']:.3f} (eta {th.eta:+.3f}, entity gate {th.gate_entity})")
    else:
        print(f"flagged {report['n_flagged']} points (no labels; eta 0, entity gate 1)")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    paths = sorted(glob.glob(args.reports))
    rows = []
    for p in paths:
        doc = json.loads(Path(p).read_text(encoding="utf-8"))
        if "precision" in doc:
            rows.append((Path(p).parent.name or p, doc["precision"], doc["recall"]))
    if not rows:
        raise DataError(f"no labeled reports match {args.reports!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "summary.csv"
    lines = ["entity,precision,recall,f1"]
    for name, p, r in rows:
        f1 = 2 * p * r / (p + r) if p + r else 0.0
        lines.append(f"{name},{p:.6f},{r:.6f},{f1:.6f}")
    mean_p = sum(r[1] for r in rows) / len(rows)
    mean_r = sum(r[2] for r in rows) / len(rows)
    total_f1 = 2 * mean_p * mean_r / (mean_p + mean_r) if mean_p + mean_r else 0.0
    lines.append(f"Total,{mean_p:.6f},{mean_r:.6f},{total_f1:.6f}")
    atomic_write_text(table, "\n".join(lines) + "\n")
    write_manifest(out_dir, "eval", {"reports": args.reports}, args.seed,
                   paths, [table], started)
    print(f"Total: precision {mean_p:.3f} recall {mean_r:.3f} f1 {total_f1:.3f} "
          f"({len(rows)} entities)")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def _primitive_graphs(rng: np.random.Generator) -> dict[str, DiffGraph]:
    """One tiny scalar-loss graph per primitive operation."""
    def t(shape, scale=1.0):
        return Tensor(scale * rng.standard_normal(shape), requires_grad=True)

    graphs: dict[str, DiffGraph] = {}
    a, b = t((4, 5)), t((4, 5))
    graphs["add"] = DiffGraph({"a": a, "b": b},
                              lambda p: ad.mean_all(ad.add(p["a"], p["b"])))
    graphs["mul"] = DiffGraph({"a": t((4, 5)), "b": t((4, 5))},
                              lambda p: ad.mean_all(ad.mul(p["a"], p["b"])))
    graphs["matmul"] = DiffGraph({"a": t((3, 4)), "b": t((4, 6))},
                                 lambda p: ad.mean_all(ad.matmul(p["a"], p["b"])))
    graphs["transpose"] = DiffGraph({"a": t((3, 4)), "b": t((3, 4))},
                                    lambda p: ad.mean_all(ad.mul(ad.transpose(p["a"]),
                                                                 ad.transpose(p["b"]))))
    graphs["reshape"] = DiffGraph({"a": t((3, 4))},
                                  lambda p: ad.mean_all(ad.mul(ad.reshape(p["a"], (2, 6)),
                                                               ad.reshape(p["a"], (2, 6)))))
    graphs["slice"] = DiffGraph({"a": t((6, 4))},
                                lambda p: ad.mean_all(ad.index_select(p["a"], (slice(1, 5), slice(None)))))
    graphs["concat"] = DiffGraph({"a": t((2, 3)), "b": t((4, 3))},
                                 lambda p: ad.mean_all(ad.mul(ad.concat([p["a"], p["b"]], axis=0),
                                                              ad.concat([p["b"], p["a"]], axis=0))))
    graphs["gather"] = DiffGraph({"a": t((5, 3))},
                                 lambda p: ad.mean_all(ad.gather_rows(p["a"], [0, 2, 2, 4])))
    graphs["relu"] = DiffGraph({"a": t((6, 6))},
                               lambda p: ad.mean_all(ad.relu(p["a"])))
    graphs["log_cosh"] = DiffGraph({"a": t((5, 5), 3.0), "b": t((5, 5), 3.0)},
                                   lambda p: ad.log_cosh_loss(p["a"], p["b"]))
    # fixed co-weights make the scalar losses sensitive to every element
    w_soft = Tensor(rng.standard_normal((4, 7)))
    graphs["softmax"] = DiffGraph({"a": t((4, 7))},
                                  lambda p: ad.mean_all(ad.mul(ad.softmax_rows(p["a"]), w_soft)))
    g_ln = Tensor(rng.standard_normal(6), requires_grad=True)
    b_ln = Tensor(rng.standard_normal(6), requires_grad=True)
    w_ln = Tensor(rng.standard_normal((5, 6)))
    graphs["layer_norm"] = DiffGraph(
        {"x": t((5, 6)), "g": g_ln, "b": b_ln},
        lambda p: ad.mean_all(ad.mul(ad.layer_norm(p["x"], p["g"], p["b"]), w_ln)))
    w_att = Tensor(rng.standard_normal((4, 7)))
    graphs["attention"] = DiffGraph(
        {"q": t((4, 8)), "k": t((6, 8)), "v": t((6, 7))},
        lambda p: ad.mean_all(ad.mul(ad.scaled_dot_attention(p["q"], p["k"], p["v"], 8), w_att)))
    return graphs


def full_model_graph(seed: int = 0, n_metrics: int = 18) -> DiffGraph:
    """Default-config model, random window batch, masked log-cosh loss."""
    config = ModelConfig(n_metrics=n_metrics, seed=seed)
    model = mdl.ReconstructionModel.initialize(config)
    rng = np.random.default_rng(seed + 1)
    windows = rng.random((2, n_metrics, mdl.SEGMENTS, config.t_e))
    plan = mdl.build_mask_plan(n_metrics, config.mask_ratio, rng)

    def loss_fn(params):
        recon = mdl.forward_batch(model, windows, plan.indices, params=params)
        return mdl.masked_loss_batch(recon, windows, plan.indices)

    return DiffGraph(model.params, loss_fn)


def _corrupted(graph: DiffGraph) -> DiffGraph:
    """Test hook: add a term whose recorded backward violates the chain rule,
    so reverse-mode and finite differences must disagree."""
    original = graph.loss_fn

    def buggy_identity(t: Tensor) -> Tensor:
        def backward(g):
            ad._accum(t, 2.0 * g)  # deliberately wrong: true derivative is 1
        return ad._node(t.data, (t,), backward)

    def loss_fn(params):
        return buggy_identity(original(params))  # doubles every analytic gradient

    return DiffGraph(graph.params, loss_fn)


def run_gradcheck(seed: int = 0, corrupt: bool = False, epsilon: float = 1e-5,
                  out=sys.stdout) -> float:
    """Gradient-check every primitive and a full default model; returns the
    overall max relative error. ``corrupt`` biases one gradient (test hook)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, graph in _primitive_graphs(rng).items():
        err = grad_check(graph, epsilon=epsilon)
        worst = max(worst, err)
        print(f"  {name:<12s} max_rel_err {err:.3e}", file=out)
    graph = full_model_graph(seed=seed)
    if corrupt:
        graph = _corrupted(graph)
    err = grad_check(graph, epsilon=epsilon)
    worst = max(worst, err)
    print(f"  {'full_model':<12s} max_rel_err {err:.3e}", file=out)
    print(f"overall max relative error {worst:.3e} "
          f"({'PASS' if worst < GRADCHECK_TOLERANCE else 'FAIL'} at {GRADCHECK_TOLERANCE})",
          file=out)
    return worst


def cmd_gradcheck(args) -> int:
    worst = run_gradcheck(seed=args.seed if args.seed is not None else 0,
                          corrupt=args.corrupt)
    return 0 if worst < GRADCHECK_TOLERANCE else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtsad",
        description="Masked-reconstruction anomaly detection for multivariate time series",
    )
    parser.add_argument("--version", action="version", version=f"mtsad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the RNG seed")
        p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("synth", help="generate a synthetic fleet with labels")
    p.add_argument("--spec", default=None, help="SyntheticSpec JSON (default: built-in fleet)")
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="pre-train on a fleet of entity CSVs")
    p.add_argument("data", help="glob of entity data CSVs")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on one entity")
    p.add_argument("base", help="base checkpoint path")
    p.add_argument("entity", help="entity data CSV")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--scratch", action="store_true",
                   help="train from scratch instead of warm-starting")
    common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("detect", help="score an entity and emit detections")
    p.add_argument("ckpt", help="checkpoint path")
    p.add_argument("entity", help="entity data CSV (labels CSV enables calibration)")
    p.add_argument("--a-r", dest="a_r", type=float, required=True,
                   help="expected anomaly rate in (0, 1)")
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="aggregate detect reports into a summary table")
    p.add_argument("reports", help="glob of report.json files")
    p.add_argument("--out", required=True, help="output directory")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (IngestionError, DataError, PlanError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
