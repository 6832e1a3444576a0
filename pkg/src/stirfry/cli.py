"""Command-line entry point: ``stirfry <subcommand> [options]``.

Progress goes to standard error; machine-readable output only to files.
Exit codes: 0 success, 1 usage, 2 runtime failure, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .exceptions import ContractError, StirfryError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NOT_CONVERGED = 0, 1, 2, 3

log = logging.getLogger("stirfry")


class UsageError(StirfryError):
    pass


def _load_json(path, what="config"):
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _build(cls, cfg, what):
    try:
        return cls(**cfg)
    except TypeError as exc:
        raise UsageError(f"bad {what} keys: {exc}") from None


def _require_file(path, what):
    if path is None or not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from None
    return path


# -- subcommands -------------------------------------------------------------------


def cmd_gen(args):
    from .demo_gen import DemoSpec, gen_dataset

    cfg = _load_json(args.config, "spec")
    cfg.update(_overrides(args.set))
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = DemoSpec.from_dict(cfg)
    manifest = gen_dataset(spec, _outdir(args.out))
    log.info("wrote %s", manifest)
    return EXIT_OK


def cmd_fit_dmp(args):
    from .dmp import PhaseChainDMP
    from .trajectory import read_seq, write_seq

    cfg = _load_json(args.config)
    cfg.update(_overrides(args.set))
    left = read_seq(_require_file(args.left, "leader trajectory"))
    chain = _build(PhaseChainDMP, cfg, "DMP config").fit(left)
    out = _outdir(args.out)
    chain.save(os.path.join(out, "dmp.json"))
    n_cycles = len(chain.cycles_)
    nominal = chain.rollout(cycles=n_cycles, amplitude=args.amplitude, rest_before=0.2, rest_after=0.3)
    write_seq(os.path.join(out, "rollout.csv"), nominal)
    log.info("fitted %d phase primitives from %d cycles", len(chain.phase_dmps_), n_cycles)
    return EXIT_OK


def _ckpt_arrays(stats, opt, names):
    arrays = {
        "stats.left.mean": stats[0].mean, "stats.left.std": stats[0].std,
        "stats.right.mean": stats[1].mean, "stats.right.std": stats[1].std,
    }
    if opt is not None and opt.state.m:
        for name, m, v in zip(names, opt.state.m, opt.state.v):
            arrays[f"adam.m.{name}"] = m
            arrays[f"adam.v.{name}"] = v
    return arrays


def _load_stats(arrays):
    from .trajectory import NormStats

    try:
        return (NormStats(arrays["stats.left.mean"], arrays["stats.left.std"]),
                NormStats(arrays["stats.right.mean"], arrays["stats.right.std"]))
    except KeyError as exc:
        raise StirfryError(f"checkpoint lacks normalization statistics ({exc})") from None


def _train_config(args):
    from .training import TrainConfig
    from .transducer import ModelConfig

    cfg = _load_json(args.config)
    model_cfg = dict(cfg.pop("model", {}))
    cfg.update(_overrides(args.set))
    for key in [k for k in cfg if k.startswith("model.")]:
        model_cfg[key[len("model."):]] = cfg.pop(key)
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
        # short runs keep an unconfigured warm-up shorter than the run
        if "warmup_epochs" not in cfg:
            cfg["warmup_epochs"] = max(1, min(TrainConfig.warmup_epochs, args.epochs - 1))
    if args.seed is not None:
        cfg["seed"] = args.seed
        model_cfg["seed"] = args.seed
    tcfg = TrainConfig.from_dict(cfg)
    model_cfg.setdefault("seed", tcfg.seed)
    model_cfg["dropout"] = tcfg.dropout
    return tcfg, ModelConfig.from_dict(model_cfg)


def cmd_train(args):
    from .tensor import AdamState
    from .training import split_pairs, train
    from .transducer import TransducerModel, load_checkpoint, save_checkpoint

    tcfg, mcfg = _train_config(args)
    splits = split_pairs(_require_file(args.manifest, "manifest"))
    out = _outdir(args.out)
    train_pairs = [(l, r) for l, r, _ in splits["train"]]
    val_pairs = [(l, r) for l, r, _ in splits["val"]]
    metrics = os.path.join(out, "metrics.jsonl")
    start, opt_state, stats = 0, None, None
    if args.resume:
        model, extra, arrays = load_checkpoint(_require_file(args.resume, "checkpoint"))
        start = int(extra.get("epoch", 0))
        stats = _load_stats(arrays)
        names = sorted(model.params)
        if all(f"adam.m.{n}" in arrays for n in names):
            opt_state = AdamState(lr=tcfg.lr, step=int(extra.get("adam_step", 0)),
                                  m=[arrays[f"adam.m.{n}"] for n in names],
                                  v=[arrays[f"adam.v.{n}"] for n in names])
        if start >= tcfg.epochs:
            raise UsageError(f"checkpoint already at epoch {start}; raise --epochs to continue")
    else:
        model = TransducerModel(mcfg)
        if os.path.exists(metrics):
            os.remove(metrics)
    names = sorted(model.params)

    def save_last(epoch, mdl, opt):
        save_checkpoint(os.path.join(out, "last.ckpt"), mdl,
                        extra={"epoch": epoch, "adam_step": opt.state.step, "train_config": tcfg.to_dict()},
                        arrays=_ckpt_arrays(state["stats"], opt, names))

    state = {"stats": stats}
    if stats is None:
        from .trajectory import fit_norm_stats

        state["stats"] = (fit_norm_stats([l.poses for l, _ in train_pairs]),
                          fit_norm_stats([r.poses for _, r in train_pairs]))
    result = train(model, train_pairs, tcfg, val_pairs=val_pairs, verbose=True, metrics_path=metrics,
                   start_epoch=start, optimizer_state=opt_state, stats=state["stats"], on_epoch=save_last)
    report = result.report
    save_checkpoint(os.path.join(out, "model.ckpt"), result.model,
                    extra={"epoch": result.epoch, "best_epoch": report.best_epoch,
                           "adam_step": result.optimizer.state.step, "train_config": tcfg.to_dict()},
                    arrays=_ckpt_arrays((result.stats_left, result.stats_right), None, names))
    _write_json(os.path.join(out, "report.json"), {
        "best_epoch": report.best_epoch,
        "train_loss": report.train_loss,
        "val_ndtw": report.val_ndtw,
        "lr": report.lr,
    })
    log.info("best epoch %d", report.best_epoch)
    return EXIT_OK


def _load_model(path):
    from .transducer import load_checkpoint

    model, extra, arrays = load_checkpoint(_require_file(path, "checkpoint"))
    return model, _load_stats(arrays)


def cmd_eval(args):
    from .training import evaluate, split_pairs

    model, (sl, sr) = _load_model(args.checkpoint)
    splits = split_pairs(_require_file(args.manifest, "manifest"))
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split!r}")
    rows = []
    for left, right, entry in splits[args.split]:
        ev = evaluate(model, left, right, sl, sr)
        rows.append({"left": os.path.basename(entry["left"]), "scale": entry.get("scale"), "ndtw": ev["ndtw"],
                     "rmse": ev["rmse"]})
        log.info("%s ndtw %.5f", entry["left"], ev["ndtw"])
    mean = float(np.mean([r["ndtw"] for r in rows])) if rows else float("nan")
    target = args.out
    if os.path.isdir(target) or not target.endswith(".json"):
        target = os.path.join(_outdir(target), "eval.json")
    _write_json(target, {"split": args.split, "mean_ndtw": mean, "pairs": rows})
    return EXIT_OK


def cmd_rollout(args):
    from .training import normalized_dtw
    from .trajectory import read_seq, write_seq
    from .transducer import rollout_autoregressive

    model, (sl, sr) = _load_model(args.checkpoint)
    left = read_seq(_require_file(args.left, "leader trajectory"))
    pred = rollout_autoregressive(left, model, sl, sr)
    out = args.out if args.out.endswith(".csv") else os.path.join(_outdir(args.out), "right.csv")
    if os.path.dirname(out):
        _outdir(os.path.dirname(out))
    write_seq(out, pred)
    report = {"left": os.path.basename(args.left), "right": os.path.basename(out), "length": len(pred)}
    if args.right:
        truth = read_seq(_require_file(args.right, "reference follower"))
        if len(truth) != len(pred):
            raise ContractError(f"reference has {len(truth)} samples, rollout has {len(pred)}")
        report["ndtw"] = normalized_dtw(pred, truth, sr)
        log.info("normalized DTW %.5f", report["ndtw"])
    _write_json(os.path.splitext(out)[0] + ".json", report)
    return EXIT_OK


def _wok_setup(cfg):
    from .wok_sim import ContentPhysics, WokGeom

    geom = _build(WokGeom, cfg.pop("geom", {}), "geom")
    physics = _build(ContentPhysics, cfg.pop("physics", {}), "physics")
    return geom, physics


def cmd_simulate(args):
    from .trajectory import read_seq
    from .wok_sim import simulate_cycle

    cfg = _load_json(args.config)
    geom, physics = _wok_setup(cfg)
    left = read_seq(_require_file(args.left, "leader trajectory"))
    res = simulate_cycle(left, geom, physics=physics, require_cycles=not args.allow_static)
    out = args.out if args.out.endswith(".csv") else os.path.join(_outdir(args.out), "trace.csv")
    res.trace.write_csv(out)
    _write_json(os.path.splitext(out)[0] + ".json", {
        "cycle_max": res.cycle_max,
        "mean_max_d": res.mean_max if res.cycle_max else None,
        "clamp_events": res.trace.clamp_events,
    })
    log.info("per-cycle max d: %s", ", ".join(f"{v:.4f}" for v in res.cycle_max))
    return EXIT_OK


def cmd_loop(args):
    from .dmp import PhaseChainDMP
    from .transducer import rollout_autoregressive
    from .wok_sim import LoopConfig, closed_loop

    cfg = _load_json(args.config)
    geom, physics = _wok_setup(cfg)
    cfg.update(_overrides(args.set))
    loop = _build(LoopConfig, cfg, "loop config")
    chain = PhaseChainDMP.load(_require_file(args.dmp, "DMP file"))
    follower_fn = None
    if args.checkpoint:
        model, (sl, sr) = _load_model(args.checkpoint)
        follower_fn = lambda left: rollout_autoregressive(left, model, sl, sr)  # noqa: E731
    res = closed_loop(chain, follower_fn, loop, geom, physics, out_dir=_outdir(args.out))
    for e in res.log:
        log.info("iter %d amplitude %.4f d %.4f target %.4f", e["iter"], e["amplitude"], e["mean_max_d"], e["target"])
    _write_json(os.path.join(args.out, "loop_report.json"), {
        "converged": res.converged,
        "status": "converged" if res.converged else "not converged",
        "iterations": len(res.log),
        "best": res.best,
    })
    if not res.converged:
        log.warning("not converged after %d iterations; best amplitude %.4f", len(res.log), res.best["amplitude"])
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="stirfry", description="Stir-fry bimanual coordination pipeline.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="random seed override")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("gen", help="generate a synthetic demonstration dataset")
    common(sp, "output directory")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("fit-dmp", help="fit phase primitives to a leader trajectory")
    common(sp, "output directory")
    sp.add_argument("--left", required=True, help="leader trajectory CSV")
    sp.add_argument("--amplitude", type=float, default=1.0, help="push amplitude of the written rollout")
    sp.set_defaults(func=cmd_fit_dmp)

    sp = sub.add_parser("train", help="train the coordination transducer")
    common(sp, "output directory")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from (e.g. last.ckpt)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="autoregressive evaluation on a dataset split")
    common(sp, "output JSON file or directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rollout", help="generate the follower for a leader trajectory")
    common(sp, "output CSV file or directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--left", required=True)
    sp.add_argument("--right", help="reference follower for the DTW metric")
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("simulate", help="simulate wok contents under a leader trajectory")
    common(sp, "output trace CSV file or directory")
    sp.add_argument("--left", required=True)
    sp.add_argument("--allow-static", action="store_true", help="accept trajectories without cycles")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("loop", help="closed-loop amplitude adjustment")
    common(sp, "output directory")
    sp.add_argument("--dmp", required=True, help="phase primitives JSON from fit-dmp")
    sp.add_argument("--checkpoint", help="transducer checkpoint for follower generation")
    sp.set_defaults(func=cmd_loop)
    return p


def main(argv=None):
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"stirfry: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stirfry: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StirfryError, ValueError, OSError) as exc:
        print(f"stirfry: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
