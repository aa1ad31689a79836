"""Command line front end for the experiment pipeline.

Verbs:
  gen-data       generate a synthetic cross-modality dataset
  train          train a victim embedder on a dataset
  centroids      compute and cache the per-identity centroid table
  attack         learn a universal perturbation, or run a per-image baseline
  eval           score a checkpoint, optionally under a stored perturbation
  transfer       apply a perturbation learned on one victim to another
  ablate         sweep epsilon or the grayscale probability
  theory-check   check the aggregated-vs-stepwise descent inequality
  full-pipeline  run data -> train -> centroids -> attacks -> reports

One root seed (from the config file or --seed) drives every stage; each
stage derives its own child seed from the root and a fixed label, and every
output file carries the config hash. Mixing artifacts from different
datasets or models fails fast with both fingerprints printed.
"""

import argparse
import csv
import os
import sys
from dataclasses import replace

from . import attack as attackmod
from . import centroids as centmod
from . import embedder as embmod
from . import evaluation as evalmod
from . import pipeline
from . import synthdata as synthmod
from . import theorycheck
from .core import linf_norm
from .errors import ArgumentError, FingerprintMismatch, XmodalError


def _banner(cfg: pipeline.ExperimentConfig, verb: str) -> None:
    seeds = cfg.stage_seeds()
    print(f"[{verb}] config_hash={cfg.hash()}")
    print(f"[{verb}] root_seed={cfg.seed} data_seed={seeds['data']} "
          f"train_seed={seeds['train']} attack_seed={seeds['attack']}")


def _seed_extra(cfg: pipeline.ExperimentConfig) -> dict:
    extra = {"root_seed": cfg.seed}
    for name, value in cfg.stage_seeds().items():
        extra[f"seed_{name}"] = value
    return extra


def _directions(args, cfg: pipeline.ExperimentConfig) -> list:
    if getattr(args, "direction", None):
        return [args.direction]
    return list(cfg.directions)


def _load_inputs(args, verb: str):
    ds = synthmod.load_dataset(args.dataset)
    params = embmod.load_checkpoint(args.checkpoint)
    pipeline.check_checkpoint_against(params, ds, args.checkpoint)
    print(f"[{verb}] dataset_fingerprint={ds.fingerprint()}")
    print(f"[{verb}] model_fingerprint={params.fingerprint()}")
    return ds, params


def _write_rows(cfg, out_dir: str, name: str, rows: list, extra: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, name + ".csv")
    evalmod.write_report_csv(csv_path, rows, config_hash=cfg.hash())
    evalmod.write_report_text(os.path.join(out_dir, name + ".txt"), rows,
                              config_hash=cfg.hash(), extra=extra)
    return csv_path


def _print_row(verb: str, row: dict) -> None:
    print(f"[{verb}] method={row['method']} direction={row['direction']} "
          f"rank1={row['rank1']} rank10={row['rank10']} mAP={row['mAP']}")


def cmd_gen_data(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    _banner(cfg, "gen-data")
    ds, path = pipeline.stage_gen_data(cfg, args.out)
    print(f"[gen-data] records={len(ds.records)} "
          f"image_shape={tuple(ds.image_shape)}")
    print(f"[gen-data] dataset_fingerprint={ds.fingerprint()}")
    print(f"[gen-data] wrote {path}")


def cmd_train(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    _banner(cfg, "train")
    ds = synthmod.load_dataset(args.dataset)
    print(f"[train] dataset_fingerprint={ds.fingerprint()}")
    params, path = pipeline.stage_train(cfg, ds, args.out)
    if params.train_losses:
        print(f"[train] epochs={len(params.train_losses)} "
              f"final_loss={params.train_losses[-1]:.6f}")
    print(f"[train] model_fingerprint={params.fingerprint()}")
    print(f"[train] wrote {path}")


def cmd_centroids(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    _banner(cfg, "centroids")
    ds, params = _load_inputs(args, "centroids")
    table, path = pipeline.stage_centroids(cfg, params, ds, args.out)
    count = len(table.identities(synthmod.Modality.VISIBLE))
    print(f"[centroids] identities={count} wrote {path}")


def cmd_attack(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    method = args.method or cfg.method
    if method not in pipeline.METHODS:
        raise ArgumentError(f"unknown method {method!r}; "
                            f"expected one of {pipeline.METHODS}")
    attack_cfg = cfg.attack
    if args.epsilon is not None:
        attack_cfg = replace(attack_cfg, epsilon=float(args.epsilon),
                             step_size=None)
    if args.gray_prob is not None:
        attack_cfg = replace(attack_cfg, gray_prob=float(args.gray_prob))
    cfg = replace(cfg, attack=attack_cfg, method=method)
    _banner(cfg, "attack")
    ds, params = _load_inputs(args, "attack")
    table = centmod.compute_centroids(params, ds)
    if method in pipeline.UNIVERSAL_METHODS:
        pert, path = pipeline.stage_attack_universal(
            cfg, params, ds, table, args.out, method=method)
        print(f"[attack] method={method} epsilon={cfg.attack.epsilon} "
              f"linf={linf_norm(pert.eta):.6f}")
        print(f"[attack] perturbation_fingerprint={pert.fingerprint()}")
        print(f"[attack] wrote {path}")
        return
    rows = []
    for direction in _directions(args, cfg):
        _, row = pipeline.stage_eval_per_image(cfg, params, ds, table,
                                               direction, method)
        rows.append(row)
        _print_row("attack", row)
    csv_path = _write_rows(cfg, args.out, f"baseline_{method}", rows,
                           _seed_extra(cfg))
    print(f"[attack] wrote {csv_path}")


def cmd_eval(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    _banner(cfg, "eval")
    ds, params = _load_inputs(args, "eval")
    pert = None
    method = args.method or "clean"
    extra = _seed_extra(cfg)
    if args.perturbation:
        pert, header = attackmod.load_perturbation(args.perturbation)
        pipeline.check_perturbation_against(header, ds, args.perturbation)
        stored = header.get("model_fingerprint", "")
        if stored and stored != params.fingerprint():
            raise FingerprintMismatch(
                f"perturbation {args.perturbation} was learned on a "
                f"different model (use the transfer verb for cross-model "
                f"evaluation); model fingerprint",
                params.fingerprint(), stored)
        if args.method is None:
            method = header.get("method") or "uap"
        extra["perturbation_fingerprint"] = pert.fingerprint()
        extra["perturbation_config_hash"] = header.get("config_hash", "")
        print(f"[eval] perturbation_fingerprint={pert.fingerprint()} "
              f"epsilon={pert.epsilon}")
    rows = []
    for direction in _directions(args, cfg):
        _, row = pipeline.stage_eval(cfg, params, ds, direction, pert=pert,
                                     method=method)
        rows.append(row)
        _print_row("eval", row)
    csv_path = _write_rows(cfg, args.out, f"eval_{method}", rows, extra)
    print(f"[eval] wrote {csv_path}")


def cmd_transfer(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    _banner(cfg, "transfer")
    ds, params = _load_inputs(args, "transfer")
    pert, header = attackmod.load_perturbation(args.perturbation)
    pipeline.check_perturbation_against(header, ds, args.perturbation)
    source = header.get("model_fingerprint", "") or "unknown"
    print(f"[transfer] source_model={source}")
    print(f"[transfer] target_model={params.fingerprint()}")
    base_method = header.get("method") or "uap"
    method = f"transfer-{base_method}"
    extra = _seed_extra(cfg)
    extra["source_model_fingerprint"] = source
    extra["target_model_fingerprint"] = params.fingerprint()
    extra["perturbation_fingerprint"] = pert.fingerprint()
    rows = []
    for direction in _directions(args, cfg):
        _, row = pipeline.stage_eval(cfg, params, ds, direction, pert=pert,
                                     method=method)
        rows.append(row)
        _print_row("transfer", row)
    csv_path = _write_rows(cfg, args.out, f"transfer_{base_method}", rows,
                           extra)
    print(f"[transfer] wrote {csv_path}")


def cmd_ablate(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    method = args.method or "cmps"
    if method not in pipeline.UNIVERSAL_METHODS:
        raise ArgumentError(
            f"ablation sweeps universal attacks only, not {method!r}")
    if args.axis == "gray_prob" and method != "cmps":
        raise ArgumentError("the gray_prob sweep applies to cmps only")
    _banner(cfg, "ablate")
    ds, params = _load_inputs(args, "ablate")
    table = centmod.compute_centroids(params, ds)
    learner = (attackmod.cmps_learn if method == "cmps"
               else attackmod.stepwise_uap)
    sweeps = []
    if args.axis == "epsilon":
        for eps in pipeline.EPSILON_SWEEP:
            sweeps.append((method,
                           replace(cfg.attack, epsilon=eps, step_size=None)))
    else:
        for prob in pipeline.GRAY_PROB_SWEEP:
            sweeps.append((f"{method}-p{prob:.1f}",
                           replace(cfg.attack, gray_prob=prob)))
    rows = []
    directions = _directions(args, cfg)
    for label, acfg in sweeps:
        pert = learner(params, ds, table, acfg)
        for direction in directions:
            _, row = pipeline.stage_eval(cfg, params, ds, direction,
                                         pert=pert, method=label)
            rows.append(row)
            _print_row("ablate", row)
    csv_path = _write_rows(cfg, args.out, f"ablate_{args.axis}", rows,
                           _seed_extra(cfg))
    print(f"[ablate] wrote {csv_path}")


def cmd_theory_check(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    print(f"[theory-check] config_hash={cfg.hash()}")
    print(f"[theory-check] root_seed={cfg.seed}")
    summary = theorycheck.verify_superiority(args.trials, args.dim,
                                             seed=cfg.seed)
    for key, value in summary.items():
        print(f"[theory-check] {key}={value}")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "theory_check.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(f"# config_hash: {cfg.hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=list(summary))
        writer.writeheader()
        writer.writerow(summary)
    os.replace(tmp, path)
    print(f"[theory-check] wrote {path}")


def cmd_full_pipeline(args) -> None:
    cfg = pipeline.load_config(args.config, args.seed)
    _banner(cfg, "full-pipeline")
    out = pipeline.run_full_pipeline(cfg, args.out)
    for row in out["rows"]:
        _print_row("full-pipeline", row)
    for name in ("dataset", "checkpoint", "centroids"):
        print(f"[full-pipeline] wrote {out[name]}")
    for method, path in out["perturbations"].items():
        print(f"[full-pipeline] wrote {path}")
    print(f"[full-pipeline] wrote {out['csv']}")
    print(f"[full-pipeline] wrote {out['text']}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmodal-uap",
        description="Universal perturbation experiments against a "
                    "cross-modality retrieval embedder.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", metavar="PATH",
                       help="TOML experiment config")
        p.add_argument("--seed", type=int, metavar="N",
                       help="root seed (overrides the config file)")
        p.add_argument("--out", metavar="DIR", default=".",
                       help="output directory (default: current directory)")
        return p

    add("gen-data", cmd_gen_data, "generate a synthetic dataset")

    p = add("train", cmd_train, "train a victim embedder")
    p.add_argument("--dataset", metavar="PATH", required=True,
                   help="dataset manifest file")

    p = add("centroids", cmd_centroids, "compute the centroid table")
    p.add_argument("--dataset", metavar="PATH", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True)

    p = add("attack", cmd_attack,
            "learn a universal perturbation or run a per-image baseline")
    p.add_argument("--dataset", metavar="PATH", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--method", choices=pipeline.METHODS,
                   help="attack method (default: from config)")
    p.add_argument("--epsilon", type=float, metavar="R",
                   help="perturbation bound override, pixel units")
    p.add_argument("--gray-prob", type=float, metavar="R", dest="gray_prob",
                   help="grayscale augmentation probability override")
    p.add_argument("--direction", choices=("v2i", "i2v"),
                   help="limit per-image baseline reports to one direction")

    p = add("eval", cmd_eval, "evaluate retrieval, optionally attacked")
    p.add_argument("--dataset", metavar="PATH", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--direction", choices=("v2i", "i2v"),
                   help="limit the report to one query direction")
    p.add_argument("--perturbation", metavar="PATH",
                   help="perturbation file to apply to every query")
    p.add_argument("--method", metavar="NAME",
                   help="method label for the report rows")

    p = add("transfer", cmd_transfer,
            "evaluate a perturbation against a different victim")
    p.add_argument("--dataset", metavar="PATH", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True,
                   help="target victim checkpoint")
    p.add_argument("--perturbation", metavar="PATH", required=True,
                   help="perturbation learned on the source victim")
    p.add_argument("--direction", choices=("v2i", "i2v"))

    p = add("ablate", cmd_ablate, "sweep epsilon or gray_prob")
    p.add_argument("axis", choices=("epsilon", "gray_prob"))
    p.add_argument("--dataset", metavar="PATH", required=True)
    p.add_argument("--checkpoint", metavar="PATH", required=True)
    p.add_argument("--method", choices=pipeline.UNIVERSAL_METHODS,
                   help="universal method to sweep (default: cmps)")
    p.add_argument("--direction", choices=("v2i", "i2v"))

    p = add("theory-check", cmd_theory_check,
            "check the aggregated-vs-stepwise inequality on random "
            "convex pairs")
    p.add_argument("--trials", type=int, default=1000, metavar="N")
    p.add_argument("--dim", type=int, default=8, metavar="N")

    add("full-pipeline", cmd_full_pipeline,
        "run every stage from one config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except XmodalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
