"""Command line: gen-data, train, eval, compare, inspect.

Every run writes ``run.json`` (full configuration and seed) next to its
outputs. Failures print a single ``error: <kind>: <message>`` line and exit 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evalharness as ev
from . import gridworld as gw
from . import qmdp_expert as qe
from . import trainer as tr
from .network import NetConfig, TransNet

OUT_ENV = {"gen-data": "TRANSNET_DATA_DIR", "train": "TRANSNET_MODEL_DIR",
           "eval": "TRANSNET_EVAL_DIR", "compare": "TRANSNET_EVAL_DIR", "inspect": "TRANSNET_EVAL_DIR"}


class CliError(Exception):
    def __init__(self, kind, msg):
        super().__init__(msg)
        self.kind = kind


def parse_action(text: str) -> int:
    t = text.strip().lower()
    if t.isdigit():
        return int(t)
    names = {name: i for i, name in enumerate(gw.ACTIONS)}
    names.update({name[0]: i for i, name in enumerate(gw.ACTIONS) if name != "stay"})
    if t not in names:
        raise argparse.ArgumentTypeError(f"unknown action {text!r}")
    return names[t]


def _add_noise_flags(p):
    p.add_argument("--p-move", type=float, default=None, help="probability an intended move succeeds")
    p.add_argument("--p-obs", type=float, default=None, help="per-bit observation flip probability")
    p.add_argument("--p-swap", type=float, default=None, help="per-step gate swap probability (dynamic mazes)")
    p.add_argument("--max-steps", type=int, default=None, help="episode cap (default 4*(H+W))")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="transnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate expert demonstrations")
    g.add_argument("--domain", choices=("grid", "maze", "dynamic"), default="grid")
    g.add_argument("--size", type=int, default=10)
    g.add_argument("--density", type=float, default=0.25)
    g.add_argument("--stochastic", action="store_true")
    g.add_argument("--variant", choices=("v1", "v2"), default="v1", help="dynamic-maze input rendering")
    g.add_argument("--num-envs", type=int, default=100)
    g.add_argument("--trajs", type=int, default=5)
    g.add_argument("--val-fraction", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)
    _add_noise_flags(g)

    t = sub.add_parser("train", help="train a network on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--classes", type=int, default=16)
    t.add_argument("--k-iters", type=int, default=32)
    t.add_argument("--kernel", type=int, default=3, help="transition kernel width")
    t.add_argument("--tie-kernels", action="store_true")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=100)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-decay", type=float, default=0.5)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--clip", type=float, default=5.0)
    t.add_argument("--checkpoint-interval", type=int, default=50)
    t.add_argument("--no-early-stop", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--deterministic-mode", action="store_true", help="record zero wall-clock time")
    t.add_argument("--out", default=None)

    for name in ("eval", "compare"):
        e = sub.add_parser(name, help="closed-loop evaluation" if name == "eval" else "paired comparison with the expert")
        if name == "eval":
            e.add_argument("--model", required=True)
        else:
            e.add_argument("--model", action="append", required=True, metavar="[LABEL=]DIR")
        e.add_argument("--trials", type=int, default=None)
        e.add_argument("--seed", type=int, default=1)
        e.add_argument("--domain", choices=("grid", "maze", "dynamic"), default=None)
        e.add_argument("--size", type=int, default=None)
        e.add_argument("--profile", choices=("deterministic", "stochastic"), default=None)
        e.add_argument("--map", default=None, help="large occupancy map (PGM or ASCII) for generalization runs")
        e.add_argument("--downsample", type=int, default=1)
        e.add_argument("--k-iters", type=int, default=None)
        e.add_argument("--deterministic-mode", action="store_true")
        e.add_argument("--out", default=None)
        _add_noise_flags(e)

    i = sub.add_parser("inspect", help="export a learned kernel slice as an image")
    i.add_argument("--model", required=True)
    i.add_argument("--action", type=parse_action, required=True)
    i.add_argument("--class", dest="cls", type=int, required=True)
    i.add_argument("--which", choices=("planner", "filter"), default="planner")
    i.add_argument("--out", default=None)
    return ap


def _out_dir(args, default_name=None) -> Path:
    out = args.out or os.environ.get(OUT_ENV[args.command])
    if out is None:
        raise CliError("usage", f"--out not given and {OUT_ENV[args.command]} not set")
    out = Path(out)
    if default_name and out.is_dir():
        out = out / default_name
    return out


def _write_run(path: Path, args, extra=None):
    # the output location is left out so reruns elsewhere stay byte-identical
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose", "out")}
    manifest = {"command": args.command, "args": cfg}
    if extra:
        manifest.update(extra)
    path.mkdir(parents=True, exist_ok=True)
    (path / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _manifest_digest(path) -> str:
    return hashlib.sha256((Path(path) / "manifest.json").read_bytes()).hexdigest()


def cmd_gen_data(args):
    domain = qe.DomainConfig(
        domain=args.domain, size=args.size, density=args.density, stochastic=args.stochastic,
        p_move=args.p_move, p_obs=args.p_obs, p_swap=0.1 if args.p_swap is None else args.p_swap,
        variant=args.variant if args.domain == "dynamic" else "static", max_steps=args.max_steps,
    )
    out = _out_dir(args)
    ds = qe.build_dataset(domain, args.num_envs, args.trajs, args.seed, val_fraction=args.val_fraction)
    ds.save(out)
    qe.load_dataset(out)  # round-trip validation
    _write_run(out, args, {"trajectories": len(ds.trajectories), "shortfall": ds.shortfall})
    print(f"wrote {len(ds.trajectories)} trajectories over {len(ds.maps)} environments to {out}")


def cmd_train(args):
    ds = qe.load_dataset(args.data)
    variant = ds.domain.variant if ds.domain.domain == "dynamic" else "static"
    cfg = NetConfig(K=args.k_iters, k=args.kernel, tie_kernels=args.tie_kernels, num_classes=args.classes,
                    theta_channels=gw.theta_channels(variant))
    tcfg = tr.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lr_decay=args.lr_decay,
                          patience=args.patience, clip_norm=args.clip, checkpoint_interval=args.checkpoint_interval,
                          seed=args.seed, deterministic=args.deterministic_mode, early_stop=not args.no_early_stop)
    out = _out_dir(args)
    net = TransNet(cfg)
    meta = {"dataset": ds.params, "dataset_manifest_sha256": _manifest_digest(args.data), "seed": args.seed}
    best, report = tr.train(ds, net.init_params(args.seed), tcfg, net, checkpoint_dir=out, metadata=meta)
    tr.save_checkpoint(best, report, out, cfg, epoch=report.best_epoch, metadata=meta)
    _write_run(out, args, {"net": cfg.to_dict(), "train": vars(tcfg)})
    print(f"best epoch {report.best_epoch}: val loss {report.val_loss[report.best_epoch - 1]:.4f}, "
          f"val acc {report.val_acc[report.best_epoch - 1]:.3f}")


def _load_model(path):
    try:
        params, cfg, manifest = tr.load_checkpoint(path)
    except tr.CheckpointError as exc:
        raise CliError("checkpoint", f"{path}: {exc}") from None
    return TransNet(cfg), params, manifest


def _eval_domain(args, manifest) -> qe.DomainConfig:
    stored = manifest.get("metadata", {}).get("dataset", {}).get("domain", {})
    d = qe.DomainConfig(**stored) if stored else qe.DomainConfig()
    d.domain = args.domain or d.domain
    d.size = args.size or d.size
    if args.profile is not None:
        d.stochastic = args.profile == "stochastic"
        d.p_move = d.p_obs = None
    if args.p_move is not None:
        d.p_move = args.p_move
    if args.p_obs is not None:
        d.p_obs = args.p_obs
    if args.p_swap is not None:
        d.p_swap = args.p_swap
    if args.max_steps is not None:
        d.max_steps = args.max_steps
    if d.domain == "dynamic" and d.variant == "static":
        d.variant = "v1"
    return d


def _suite(args, domain):
    if args.map is not None:
        gmap = gw.load_map(args.map, args.downsample)
        return ev.generalization_suite(gmap, domain.noise, args.trials or 25, args.seed, domain.max_steps), gmap.shape
    return ev.make_suite(domain, args.trials or 500, args.seed), None


def _policy(net, params, shape, k_iters, label):
    if shape is not None:
        net = ev.scale_planning(net, shape)
    if k_iters is not None:
        net = TransNet(NetConfig(**{**net.config.to_dict(), "K": k_iters}), net.spec, net.fused)
    return ev.NetworkPolicy(net, params, label)


def _emit_table(args, table, records):
    text = ev.format_table(table)
    print(text, end="")
    if args.out or os.environ.get(OUT_ENV[args.command]):
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(text)
        lines = ["policy,scenario,steps,success,collisions"]
        for label, recs in records.items():
            lines += [f"{label},{r.scenario_id},{r.steps},{int(r.success)},{r.collisions}" for r in recs]
        (out / "episodes.csv").write_text("\n".join(lines) + "\n")
        _write_run(out, args)


def cmd_eval(args):
    net, params, manifest = _load_model(args.model)
    domain = _eval_domain(args, manifest)
    suite, shape = _suite(args, domain)
    policy = _policy(net, params, shape, args.k_iters, "transnet")
    records = {"transnet": ev.evaluate(policy, suite)}
    _emit_table(args, {"transnet": ev.metrics(records["transnet"])}, records)


def cmd_compare(args):
    models = []
    for spec in args.model:
        label, _, path = spec.rpartition("=")
        models.append((label or Path(path).name, path))
    first = _load_model(models[0][1])
    domain = _eval_domain(args, first[2])
    suite, shape = _suite(args, domain)
    policies = {}
    for label, path in models:
        net, params, _ = _load_model(path)
        policies[label] = _policy(net, params, shape, args.k_iters, label)
    table, records = ev.compare(policies, suite)
    _emit_table(args, table, records)


def cmd_inspect(args):
    net, params, _ = _load_model(args.model)
    out = _out_dir(args, default_name=f"kernel_{gw.ACTIONS[args.action]}_c{args.cls}.pgm")
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        m = ev.export_kernels(params, net.config, args.action, args.cls, out, args.which)
    except ValueError as exc:
        raise CliError("value", str(exc)) from None
    _write_run(out.parent, args)
    np.savetxt(sys.stdout, m, fmt="%.6f")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.kind, exc)
    except (qe.ManifestError, tr.CheckpointError) as exc:
        return _fail("manifest", exc)
    except gw.MapFormatError as exc:
        return _fail("map", exc)
    except tr.TrainingError as exc:
        return _fail("training", exc)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, exc)
    return 0


def _fail(kind, exc) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
