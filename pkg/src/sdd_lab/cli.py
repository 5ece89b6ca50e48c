"""Command-line front end.

Subcommands: train, sweep, distill, early-stop, entropy, report. Any scalar
config key can be overridden with a flag named by its dotted path, e.g.
``--train.epochs 40 --prune.zeta 0.2``.

Exit codes: 0 success, 1 config error, 2 I/O error, 3 numerical failure.
The environment variable SDD_LAB_THREADS caps intra-run parallelism
(1 = strictly sequential, the deterministic reference mode).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _cap_threads() -> None:
    threads = os.environ.get("SDD_LAB_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def _parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    overrides = []
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or i + 1 >= len(extra):
            raise ValueError(f"malformed override: {' '.join(extra[i:])!r} "
                             "(expected --dotted.key value)")
        overrides.append((token[2:], extra[i + 1]))
        i += 2
    return overrides


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdd-lab",
                                     description="sparse double descent laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train", "dense training, emits a checkpoint"),
                       ("sweep", "iterative pruning sweep"),
                       ("distill", "pruning sweep with the distillation objective"),
                       ("early-stop", "entropy-gated early-stopped sweep")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="path to the JSON experiment config")
    p = sub.add_parser("entropy", help="activation-state entropy of a checkpoint")
    p.add_argument("config", help="path to the JSON experiment config")
    p.add_argument("checkpoint", help="checkpoint (.sdd) to probe")
    p = sub.add_parser("report", help="phase labels, summary, and figures from a CSV")
    p.add_argument("csv", help="records.csv emitted by a sweep")
    p.add_argument("--margin", type=float, default=0.01,
                   help="accuracy margin for phase boundaries")
    return parser


# ---- checkpoint bundles (.sdd + .json sidecar with the model recipe) -------

def save_bundle(model, masks, meta: dict, stem: Path) -> None:
    from .checkpoint import save_checkpoint
    stem.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, masks, stem.with_suffix(".sdd"))
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_bundle(path):
    from .checkpoint import load_checkpoint, restore_model
    from .config import make_model
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise OSError(f"missing checkpoint sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    model = make_model(meta["model"], seed=0)
    masks = restore_model(model, load_checkpoint(path.with_suffix(".sdd")))
    return model, masks, meta


def _bundle_meta(cfg: dict, bundle) -> dict:
    norm = bundle.augment_spec.normalize
    return {
        "model": cfg["model"],
        "normalize": None if norm is None else [norm[0].tolist(), norm[1].tolist()],
        "seed": cfg["seed"],
    }


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _persist_sweep(cfg: dict, result, data, out: Path) -> None:
    from .config import make_model
    from .pipeline import restore_best
    from .reporting import emit_csv, emit_summary
    emit_csv(result.records, out / "records.csv")
    summary = emit_summary(result, out / "summary.json")
    best_model = make_model(cfg["model"], seed=0)
    restore_best(best_model, result)
    save_bundle(best_model, result.best_masks, _bundle_meta(cfg, data), out / "best")
    print(f"best round {summary['best_round']}: "
          f"val {summary['best_val_acc']:.4f}, test {summary['best_test_acc']:.4f}, "
          f"sparsity {summary['sparsity_at_best']:.4f} ({summary['phase_of_best']})")
    print(f"wrote {out / 'records.csv'}")


def _cmd_train(cfg: dict) -> int:
    from .config import make_data, make_model, make_streams, make_train_cfg, seed_for
    from .pipeline import CrossEntropyObjective, evaluate, train_model
    from .pruning import new_masks
    data = make_data(cfg)
    model = make_model(cfg["model"], seed_for(cfg["seed"], "init"))
    masks = new_masks(model)
    train_model(model, masks, data.train, make_train_cfg(cfg["train"]),
                CrossEntropyObjective(), make_streams(cfg["seed"]), data.augment_spec)
    out = _out_dir(cfg)
    save_bundle(model, masks, _bundle_meta(cfg, data), out / "dense")
    val = evaluate(model, data.val, data.augment_spec)
    test = evaluate(model, data.test, data.augment_spec)
    print(f"dense model: val {val:.4f}, test {test:.4f}")
    print(f"wrote {out / 'dense.sdd'}")
    return 0


def _cmd_sweep(cfg: dict) -> int:
    from .config import (make_data, make_model, make_prune_cfg, make_streams,
                         make_train_cfg, seed_for)
    from .pipeline import iterative_prune_sweep
    data = make_data(cfg)
    model = make_model(cfg["model"], seed_for(cfg["seed"], "init"))
    result = iterative_prune_sweep(model, make_prune_cfg(cfg["prune"]),
                                   make_train_cfg(cfg["train"]), data,
                                   streams=make_streams(cfg["seed"]))
    _persist_sweep(cfg, result, data, _out_dir(cfg))
    return 0


def _cmd_distill(cfg: dict) -> int:
    from .config import (make_data, make_model, make_prune_cfg, make_streams,
                         make_train_cfg, seed_for)
    from .pipeline import distill_sweep
    teacher_path = cfg["distill"]["teacher"]
    if not teacher_path:
        from .config import ConfigError
        raise ConfigError("config key 'distill.teacher': required for the distill command")
    teacher, _, _ = load_bundle(teacher_path)
    data = make_data(cfg)
    student = make_model(cfg["model"], seed_for(cfg["seed"], "init"))
    result = distill_sweep(student, teacher, cfg["distill"]["alpha"],
                           cfg["distill"]["temperature"], make_prune_cfg(cfg["prune"]),
                           make_train_cfg(cfg["train"]), data,
                           streams=make_streams(cfg["seed"]))
    _persist_sweep(cfg, result, data, _out_dir(cfg))
    return 0


def _cmd_early_stop(cfg: dict) -> int:
    from .config import (make_data, make_early_stop_cfg, make_model, make_prune_cfg,
                         make_streams, make_train_cfg, seed_for)
    from .pipeline import entropy_gated_early_stop
    data = make_data(cfg)
    model = make_model(cfg["model"], seed_for(cfg["seed"], "init"))
    result = entropy_gated_early_stop(model, make_early_stop_cfg(cfg["early_stop"]),
                                      make_prune_cfg(cfg["prune"]),
                                      make_train_cfg(cfg["train"]), data,
                                      streams=make_streams(cfg["seed"]))
    _persist_sweep(cfg, result, data, _out_dir(cfg))
    return 0


def _cmd_entropy(cfg: dict, checkpoint: str) -> int:
    import numpy as np
    from .config import make_data
    from .datasets import normalize, AugmentSpec
    from .entropy import model_entropy
    model, _, meta = load_bundle(checkpoint)
    data = make_data(cfg)
    norm = meta.get("normalize")
    spec = AugmentSpec(normalize=None if norm is None
                       else (np.asarray(norm[0]), np.asarray(norm[1])))
    report = model_entropy(model, normalize(data.train.images, spec))
    payload = {"average": report.average, "per_layer": report.per_layer,
               "sample_count": report.sample_count, "base": report.base}
    out = _out_dir(cfg) / "entropy.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, sort_keys=True))
    return 0


def _cmd_report(csv_path: str, margin: float) -> int:
    from .pipeline import label_phases
    from .reporting import read_csv, render_curves, summarize
    records = read_csv(csv_path)
    phases = label_phases(records, margin)
    best = 0
    for i, r in enumerate(records):
        if r.val_acc > records[best].val_acc:
            best = i
    summary = summarize(records, best, phases)
    stem = Path(csv_path).with_suffix("")
    summary_path = stem.parent / (stem.name + "_summary.json")
    figure_path = stem.parent / (stem.name + "_curves.png")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    render_curves(records, phases, figure_path, title=stem.name)
    print(json.dumps(summary, sort_keys=True))
    print(f"wrote {summary_path}")
    print(f"wrote {figure_path}")
    return 0


def main(argv=None) -> int:
    _cap_threads()
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)

    from .autodiff import NumericalError
    from .checkpoint import CheckpointError
    from .config import ConfigError, load_config
    from .datasets import IdxFormatError

    try:
        try:
            overrides = _parse_overrides(extra)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if args.command == "report":
            if overrides:
                raise ConfigError("report accepts no config overrides")
            return _cmd_report(args.csv, args.margin)
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            return _cmd_train(cfg)
        if args.command == "sweep":
            return _cmd_sweep(cfg)
        if args.command == "distill":
            return _cmd_distill(cfg)
        if args.command == "early-stop":
            return _cmd_early_stop(cfg)
        if args.command == "entropy":
            return _cmd_entropy(cfg, args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (IdxFormatError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
