"""Command-line entry point: train experts, fuse them, evaluate, export
embeddings, generate synthetic fixtures, and validate bundle directories.

Settings resolve in three layers, last wins: built-in defaults, then a JSON
config file (``--config``), then explicit flags. Unknown config keys and
unknown flags are fatal. Every artifact-producing run writes
``effective_config.json`` with the fully resolved settings, so a run can be
reproduced bit-for-bit from its output directory alone.

Exit codes: 0 success, 1 configuration error, 2 data/artifact error,
3 numeric failure. The ``GRAFUSE_THREADS`` environment variable caps worker
threads (including the BLAS pools, when set before first import).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

_cap = os.environ.get("GRAFUSE_THREADS", "")
if _cap.isdigit() and int(_cap) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(_var, _cap)

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GrafuseError
from .fusion import (FusionConfig, FusionPolicy, adaptive_fuse, fixed_fuse,
                     save_policy, select_strategy, train_wr_heads, wr_fuse)
from .graph import bundle_summary, generate_sbm, read_bundle, write_bundle
from .models import (MODEL_KINDS, MultiHopGatModel, build_structure, embed,
                     load_checkpoint, save_checkpoint)
from .training import (TrainConfig, evaluate, export_embeddings, predict_probs,
                       save_history, train)
from .transport import TransportConfig

log = logging.getLogger("grafuse")

DEFAULTS = {
    "model": {"kind": "gcn", "hidden": None, "dropout": None, "head_dim": 16,
              "heads": 2, "hops": 2, "max_neighbors": 64, "seed": 0},
    "train": {"lr": 0.01, "weight_decay": 5e-4, "max_epochs": 500,
              "patience": 50, "seed": 0},
    "fusion": {"strategies": ["fixed", "adaptive"], "alpha": 0.7,
               "base_weights": None, "lambdas": None, "focus_class": None,
               "proj_dim": None, "lr": 0.01, "weight_decay": 0.0,
               "max_epochs": 200, "patience": 30, "seed": 0},
    "transport": {"p": 2.0, "epsilon": None, "max_iters": 200, "tol": 1e-6,
                  "sample_size": 128},
    "sbm": {"blocks": [100, 100, 100], "p_in": 0.9, "p_out": 0.05,
            "feature_dim": 8, "class_signal": 3.0, "seed": 0},
}

COMMAND_SECTIONS = {
    "train": ("model", "train"),
    "fuse": ("fusion", "transport"),
    "eval": (),
    "export-embeddings": (),
    "gen-sbm": ("sbm",),
    "validate-bundle": (),
}

PATH_KEYS = ("data", "out", "gnn", "gat", "run")


class _Parser(argparse.ArgumentParser):
    """Argument errors (including unknown flags) become config errors so the
    process exits with the config status code."""

    def error(self, message):
        raise ConfigError(message)


def thread_cap() -> int | None:
    raw = os.environ.get("GRAFUSE_THREADS")
    if raw is None:
        return None
    if not raw.isdigit() or int(raw) < 1:
        raise ConfigError(f"GRAFUSE_THREADS must be a positive integer, got {raw!r}")
    return int(raw)


def _int_list(text: str) -> list:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list:
    try:
        return [float(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}")


def resolve_config(command: str, args: argparse.Namespace,
                   flag_map: dict) -> dict:
    """Defaults <- config file <- explicit flags, validating every key."""
    sections = COMMAND_SECTIONS[command]
    cfg: dict = {"command": command}
    cfg.update({v: None for v in flag_map.values() if isinstance(v, str)})
    for s in sections:
        cfg[s] = dict(DEFAULTS[s])
    config_path = getattr(args, "config", None)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in file_cfg.items():
            if key in PATH_KEYS and key in cfg:
                cfg[key] = value
            elif key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section '{key}' must be an object")
                for sub in value:
                    if sub not in DEFAULTS[key]:
                        raise ConfigError(f"unknown config key '{key}.{sub}'")
                cfg[key].update(value)
            else:
                raise ConfigError(f"unknown config key '{key}'")
    for dest, target in flag_map.items():
        if not hasattr(args, dest):
            continue
        value = getattr(args, dest)
        if isinstance(target, tuple):
            cfg[target[0]][target[1]] = value
        else:
            cfg[target] = value
    if hasattr(args, "seed"):
        for s in sections:
            if "seed" in cfg[s]:
                cfg[s]["seed"] = args.seed
    return cfg


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"--{key} is required")
    return cfg[key]


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _dump_effective_config(cfg: dict, out: Path) -> None:
    _write_json(out / "effective_config.json", cfg)


def _print_table(headers: list, rows: list) -> None:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(headers)]
    line = "  ".join(str(h).ljust(w) for h, w in zip(headers, widths))
    print(line)
    print("-" * len(line))
    for r in rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


def _metrics_payload(model, bundle, structure) -> dict:
    return {
        "val": evaluate(model, bundle, bundle.val_idx, structure).to_dict(),
        "test": evaluate(model, bundle, bundle.test_idx, structure).to_dict(),
    }


def _metrics_rows(payload: dict) -> list:
    rows = []
    for split in ("val", "test"):
        rep = payload[split]
        per_class = " ".join(f"{a:.4f}" for a in rep["per_class_accuracy"])
        rows.append([split, f"{rep['accuracy']:.4f}", f"{rep['cv']:.4f}", per_class])
    return rows


def make_model(mcfg: dict, bundle):
    kind = mcfg["kind"]
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind '{kind}' "
                          f"(choose from {sorted(MODEL_KINDS)})")
    if kind == "mhgat":
        return MultiHopGatModel(bundle.feature_dim, bundle.num_classes,
                                head_dim=mcfg["head_dim"], heads=mcfg["heads"],
                                K=mcfg["hops"],
                                max_neighbors=mcfg["max_neighbors"],
                                seed=mcfg["seed"])
    extra = {}
    if mcfg["hidden"] is not None:
        extra["hidden"] = mcfg["hidden"]
    if mcfg["dropout"] is not None:
        extra["dropout"] = mcfg["dropout"]
    return MODEL_KINDS[kind](bundle.feature_dim, bundle.num_classes,
                             seed=mcfg["seed"], **extra)


def _find_checkpoint(path_str: str, what: str) -> Path:
    root = Path(path_str)
    for candidate in (root, root / "checkpoint"):
        if (candidate / "meta.json").is_file():
            return candidate
    raise DataError(f"{what}: no checkpoint found under {root}")


def _check_dims(model, bundle, what: str) -> None:
    if (model.feature_dim != bundle.feature_dim
            or model.num_classes != bundle.num_classes):
        raise DataError(
            f"{what}: checkpoint expects {model.feature_dim} features / "
            f"{model.num_classes} classes, bundle has {bundle.feature_dim} / "
            f"{bundle.num_classes}")


# ------------------------------------------------------------------ commands


TRAIN_FLAGS = {
    "data": "data", "out": "out",
    "model": ("model", "kind"), "hidden": ("model", "hidden"),
    "dropout": ("model", "dropout"), "head_dim": ("model", "head_dim"),
    "heads": ("model", "heads"), "hops": ("model", "hops"),
    "max_neighbors": ("model", "max_neighbors"),
    "lr": ("train", "lr"), "weight_decay": ("train", "weight_decay"),
    "epochs": ("train", "max_epochs"), "patience": ("train", "patience"),
}


def cmd_train(args) -> int:
    cfg = resolve_config("train", args, TRAIN_FLAGS)
    bundle = read_bundle(_require(cfg, "data"))
    out = Path(_require(cfg, "out"))
    model = make_model(cfg["model"], bundle)
    # reflect constructor defaults back into the recorded settings
    cfg["model"]["hidden"] = getattr(model, "hidden", None)
    cfg["model"]["dropout"] = getattr(model, "dropout", None)
    tcfg = TrainConfig(lr=cfg["train"]["lr"],
                       weight_decay=cfg["train"]["weight_decay"],
                       max_epochs=cfg["train"]["max_epochs"],
                       patience=cfg["train"]["patience"],
                       seed=cfg["train"]["seed"],
                       model_kind=cfg["model"]["kind"])
    structure = build_structure(model, bundle)
    _dump_effective_config(cfg, out)
    model, history = train(model, bundle, tcfg, structure)
    save_checkpoint(model, out / "checkpoint")
    save_history(history, out / "history.jsonl")
    payload = _metrics_payload(model, bundle, structure)
    _write_json(out / "metrics.json", payload)
    print(f"model={model.kind} best_epoch={model.epoch} "
          f"val_acc={payload['val']['accuracy']:.4f} "
          f"test_acc={payload['test']['accuracy']:.4f}")
    _print_table(["split", "accuracy", "cv", "per-class accuracy"],
                 _metrics_rows(payload))
    return 0


FUSE_FLAGS = {
    "data": "data", "out": "out", "gnn": "gnn", "gat": "gat",
    "strategies": ("fusion", "strategies"), "alpha": ("fusion", "alpha"),
    "lambdas": ("fusion", "lambdas"), "focus_class": ("fusion", "focus_class"),
    "proj_dim": ("fusion", "proj_dim"), "fusion_lr": ("fusion", "lr"),
    "fusion_epochs": ("fusion", "max_epochs"),
    "fusion_patience": ("fusion", "patience"),
    "transport_p": ("transport", "p"), "epsilon": ("transport", "epsilon"),
    "sinkhorn_iters": ("transport", "max_iters"),
    "sample_size": ("transport", "sample_size"),
}


def cmd_fuse(args) -> int:
    cfg = resolve_config("fuse", args, FUSE_FLAGS)
    if getattr(args, "wr", False) and "wr" not in cfg["fusion"]["strategies"]:
        cfg["fusion"]["strategies"] = list(cfg["fusion"]["strategies"]) + ["wr"]
    strategies = cfg["fusion"]["strategies"]
    unknown = [s for s in strategies if s not in ("fixed", "adaptive", "wr")]
    if unknown or not strategies:
        raise ConfigError(f"strategies must be drawn from fixed/adaptive/wr, "
                          f"got {strategies}")
    bundle = read_bundle(_require(cfg, "data"))
    out = Path(_require(cfg, "out"))
    gnn_model = load_checkpoint(_find_checkpoint(_require(cfg, "gnn"), "--gnn"))
    gat_model = load_checkpoint(_find_checkpoint(_require(cfg, "gat"), "--gat"))
    _check_dims(gnn_model, bundle, "--gnn")
    _check_dims(gat_model, bundle, "--gat")
    _dump_effective_config(cfg, out)

    s_gnn = build_structure(gnn_model, bundle)
    s_gat = build_structure(gat_model, bundle)
    p_gnn = predict_probs(gnn_model, bundle, s_gnn)
    p_gat = predict_probs(gat_model, bundle, s_gat)

    f = cfg["fusion"]
    fcfg = FusionConfig(alpha=f["alpha"], base_weights=f["base_weights"],
                        lambdas=f["lambdas"], focus_class=f["focus_class"],
                        proj_dim=f["proj_dim"], lr=f["lr"],
                        weight_decay=f["weight_decay"],
                        max_epochs=f["max_epochs"], patience=f["patience"],
                        seed=f["seed"],
                        transport=TransportConfig(**cfg["transport"]))
    base, balance, _ = fcfg.resolve(bundle.num_classes)

    candidates = []
    if "fixed" in strategies:
        policy = FusionPolicy("fixed", base, balance)
        candidates.append((policy, fixed_fuse(p_gnn, p_gat, policy)))
    if "adaptive" in strategies:
        policy = FusionPolicy("adaptive", base, balance)
        candidates.append((policy, adaptive_fuse(p_gnn, p_gat)))
    if "wr" in strategies:
        e_gnn = embed(gnn_model, bundle, s_gnn)
        e_gat = embed(gat_model, bundle, s_gat)
        policy, history = train_wr_heads(e_gnn, e_gat, bundle, fcfg)
        save_history(history, out / "wr_history.jsonl")
        candidates.append((policy, wr_fuse(e_gnn, e_gat, policy)))

    workers = min(thread_cap() or len(candidates), 2 * len(candidates))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {
            fused.strategy: (pool.submit(evaluate, fused.probs, bundle, bundle.val_idx),
                             pool.submit(evaluate, fused.probs, bundle, bundle.test_idx))
            for _, fused in candidates}
        table = {name: {"val": fv.result().to_dict(), "test": ft.result().to_dict()}
                 for name, (fv, ft) in futures.items()}

    if len(candidates) == 1:
        selected_policy, selected = candidates[0]
    else:
        selected_policy, selected, _ = select_strategy(candidates, bundle)
    save_policy(selected_policy, out / "policy")
    _write_json(out / "fusion_metrics.json",
                {"selected": selected.strategy, "strategies": table})

    rows = []
    for name in ("fixed", "adaptive", "wr"):
        if name not in table:
            continue
        rep = table[name]
        per_class = " ".join(f"{a:.4f}" for a in rep["test"]["per_class_accuracy"])
        rows.append([name, f"{rep['val']['accuracy']:.4f}",
                     f"{rep['test']['accuracy']:.4f}",
                     f"{rep['test']['cv']:.4f}", per_class])
    _print_table(["strategy", "val_acc", "test_acc", "cv",
                  "per-class accuracy (test)"], rows)
    print(f"selected={selected.strategy}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config("eval", args, {"data": "data", "run": "run", "out": "out"})
    bundle = read_bundle(_require(cfg, "data"))
    model = load_checkpoint(_find_checkpoint(_require(cfg, "run"), "--run"))
    _check_dims(model, bundle, "--run")
    structure = build_structure(model, bundle)
    payload = _metrics_payload(model, bundle, structure)
    if cfg.get("out"):
        out = Path(cfg["out"])
        _dump_effective_config(cfg, out)
        _write_json(out / "metrics.json", payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    _print_table(["split", "accuracy", "cv", "per-class accuracy"],
                 _metrics_rows(payload))
    return 0


def cmd_export(args) -> int:
    cfg = resolve_config("export-embeddings", args,
                         {"data": "data", "run": "run", "out": "out"})
    bundle = read_bundle(_require(cfg, "data"))
    model = load_checkpoint(_find_checkpoint(_require(cfg, "run"), "--run"))
    _check_dims(model, bundle, "--run")
    out = Path(_require(cfg, "out"))
    _dump_effective_config(cfg, out)
    export_embeddings(model, bundle, out)
    print(f"wrote embeddings for {bundle.num_nodes} nodes to {out}")
    return 0


SBM_FLAGS = {
    "out": "out", "blocks": ("sbm", "blocks"), "p_in": ("sbm", "p_in"),
    "p_out": ("sbm", "p_out"), "feature_dim": ("sbm", "feature_dim"),
    "class_signal": ("sbm", "class_signal"),
}


def cmd_gen_sbm(args) -> int:
    cfg = resolve_config("gen-sbm", args, SBM_FLAGS)
    out = Path(_require(cfg, "out"))
    s = cfg["sbm"]
    bundle = generate_sbm(s["blocks"], s["p_in"], s["p_out"], s["feature_dim"],
                          s["class_signal"], s["seed"])
    write_bundle(bundle, out)
    _dump_effective_config(cfg, out)
    print(json.dumps(bundle_summary(bundle), indent=2, sort_keys=True))
    return 0


def cmd_validate_bundle(args) -> int:
    cfg = resolve_config("validate-bundle", args, {"data": "data"})
    bundle = read_bundle(_require(cfg, "data"))
    print(json.dumps(bundle_summary(bundle), indent=2, sort_keys=True))
    print("bundle ok")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> _Parser:
    parser = _Parser(prog="grafuse",
                     description="Train, fuse, and evaluate graph experts.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    S = argparse.SUPPRESS

    def common(p, *, data=True, out=True, run=False, seed=True):
        p.add_argument("--config", default=None,
                       help="JSON config file; flags override its values")
        if data:
            p.add_argument("--data", default=S, help="bundle directory")
        if run:
            p.add_argument("--run", default=S, help="run or checkpoint directory")
        if out:
            p.add_argument("--out", default=S, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=S, help="master seed")

    p = sub.add_parser("train", help="train one expert model")
    common(p)
    p.add_argument("--model", default=S, choices=sorted(MODEL_KINDS),
                   help="model kind")
    p.add_argument("--hidden", type=int, default=S, help="hidden width")
    p.add_argument("--dropout", type=float, default=S, help="dropout rate")
    p.add_argument("--head-dim", dest="head_dim", type=int, default=S,
                   help="attention head width")
    p.add_argument("--heads", type=int, default=S, help="attention heads per hop")
    p.add_argument("--hops", type=int, default=S, help="attention hop count")
    p.add_argument("--max-neighbors", dest="max_neighbors", type=int, default=S,
                   help="per-node cap for distant hops")
    p.add_argument("--lr", type=float, default=S, help="learning rate")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=S,
                   help="L2 coefficient")
    p.add_argument("--epochs", type=int, default=S, help="maximum epochs")
    p.add_argument("--patience", type=int, default=S, help="early-stop patience")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="combine two trained experts")
    common(p)
    p.add_argument("--gnn", default=S, help="smoothing-expert run directory")
    p.add_argument("--gat", default=S, help="attention-expert run directory")
    p.add_argument("--strategies", type=lambda t: t.split(","), default=S,
                   help="comma list from fixed,adaptive,wr")
    p.add_argument("--wr", action="store_true",
                   help="also train transport-guided fusion heads")
    p.add_argument("--alpha", type=float, default=S,
                   help="base-vs-confidence balance in [0,1]")
    p.add_argument("--lambdas", type=_float_list, default=S,
                   help="per-class transport loss coefficients")
    p.add_argument("--focus-class", dest="focus_class", type=int, default=S,
                   help="class receiving the heavy transport coefficient")
    p.add_argument("--proj-dim", dest="proj_dim", type=int, default=S,
                   help="shared projection width")
    p.add_argument("--fusion-lr", dest="fusion_lr", type=float, default=S,
                   help="projection-head learning rate")
    p.add_argument("--fusion-epochs", dest="fusion_epochs", type=int, default=S,
                   help="projection-head training epochs")
    p.add_argument("--fusion-patience", dest="fusion_patience", type=int,
                   default=S, help="projection-head early-stop patience")
    p.add_argument("--transport-p", dest="transport_p", type=float, default=S,
                   help="ground-metric exponent")
    p.add_argument("--epsilon", type=float, default=S,
                   help="entropic regularization strength")
    p.add_argument("--sinkhorn-iters", dest="sinkhorn_iters", type=int,
                   default=S, help="maximum scaling sweeps")
    p.add_argument("--sample-size", dest="sample_size", type=int, default=S,
                   help="per-class node subsample for transport terms")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="re-evaluate a trained checkpoint")
    common(p, run=True, out=False, seed=False)
    p.add_argument("--out", default=S, help="optional directory for metrics.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings",
                       help="write penultimate representations")
    common(p, run=True, seed=False)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gen-sbm", help="generate a synthetic block-model bundle")
    common(p, data=False)
    p.add_argument("--blocks", type=_int_list, default=S,
                   help="comma list of block sizes")
    p.add_argument("--p-in", dest="p_in", type=float, default=S,
                   help="within-block edge probability")
    p.add_argument("--p-out", dest="p_out", type=float, default=S,
                   help="between-block edge probability")
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=S,
                   help="feature dimensionality")
    p.add_argument("--class-signal", dest="class_signal", type=float, default=S,
                   help="separation of class feature means")
    p.set_defaults(func=cmd_gen_sbm)

    p = sub.add_parser("validate-bundle", help="check a bundle directory")
    common(p, out=False, seed=False)
    p.set_defaults(func=cmd_validate_bundle)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except GrafuseError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
