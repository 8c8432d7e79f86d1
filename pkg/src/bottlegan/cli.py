"""Command-line driver.

Every command works on a run directory::

    runs/<name>/
        config/       run.json (base) and <command>.json (effective) snapshots
        clients/<k>/  synthetic client data
        reference/    public reference set
        checkpoints/  BGAN containers
        metrics/      JSON-lines streams
        figures/      PNG grids

The run root defaults to ``$BOTTLEGAN_RUNS`` (else ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import checkpoint
from . import config as cfgmod
from .evaluation import append_records, cycle_reconstruct, emit_grid, extract_features, frechet_distance, recon_mse
from .exceptions import BottleGANError, CheckpointError, ConfigError
from .federation import ClientMsg, client_train, federate, server_distill
from .stain import REFERENCE_BASIS_VERSION
from .synth import build_federation, load_federation, save_federation

logger = logging.getLogger("bottlegan")

RUNS_ENV = "BOTTLEGAN_RUNS"
COMMANDS = ("synth", "train-client", "distill", "federate", "eval", "report")


class Run:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts):
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def has_data(self):
        return (self.root / "manifest.json").is_file()

    def client_ckpt(self, k):
        return self.path("checkpoints", f"client_{k}.bgan")

    def fresh_metrics(self, name):
        path = self.path("metrics", name)
        path.unlink(missing_ok=True)
        return path


def _build_parser():
    parser = argparse.ArgumentParser(prog="bottlegan", description="BottleGAN experiment driver")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of flat namespaced keys")
        p.add_argument("--run", help="run name under the run root, or a path")
        p.add_argument("--out", help="explicit run directory (overrides --run)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--seed", type=int, help="shorthand for run.seed")
        return p

    p = common(sub.add_parser("synth", help="materialize a synthetic federation"))
    p.add_argument("--clients", type=int, help="shorthand for data.clients")
    p = common(sub.add_parser("train-client", help="train local BottleGANs"))
    p.add_argument("--client", type=int, action="append", help="client id; default all")
    common(sub.add_parser("distill", help="distill client generators into a global BottleGAN"))
    p = common(sub.add_parser("federate", help="weight aggregation rounds"))
    p.add_argument("--no-bottlegan", action="store_true", help="plain FedAvgM ablation")
    common(sub.add_parser("eval", help="stain-transfer evaluation of the global BottleGAN"))
    common(sub.add_parser("report", help="summarize metric files"))
    return parser


def _resolve(args):
    base = cfgmod.defaults()
    if args.config:
        base = cfgmod.load(args.config)
    overrides = cfgmod.parse_assignments(args.set)
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "clients", None) is not None:
        overrides["data.clients"] = args.clients
    if args.run is not None:
        overrides["run.name"] = args.run
    flat = cfgmod.merge(base, overrides)
    if args.out:
        root = Path(args.out)
    else:
        name = Path(flat["run.name"])
        root = name if name.is_absolute() or len(name.parts) > 1 else Path(os.environ.get(RUNS_ENV, "runs")) / name
    stored = root / "config" / "run.json"
    if not args.config and stored.is_file():
        # later stages inherit the configuration the run was created with
        flat = cfgmod.merge(cfgmod.load(stored), overrides)
    return flat, Run(root)


def _snapshot(run, flat, command):
    base = run.root / "config" / "run.json"
    if not base.is_file():
        cfgmod.dump(flat, run.path("config", "run.json"))
    snap = dict(flat, **{"format.checkpoint": checkpoint.FORMAT_VERSION,
                         "format.reference_basis": REFERENCE_BASIS_VERSION})
    cfgmod.dump(snap, run.path("config", f"{command}.json"))


def _data(run, flat):
    if not run.has_data:
        cfg = cfgmod.section(flat, "data").validate()
        save_federation(build_federation(cfg, flat["run.seed"]), cfg, flat["run.seed"], run.root)
    dataset, manifest = load_federation(run.root)
    return dataset, manifest


def cmd_synth(run, flat, args):
    cfg = cfgmod.section(flat, "data").validate()
    fed = build_federation(cfg, flat["run.seed"])
    save_federation(fed, cfg, flat["run.seed"], run.root)
    print(f"wrote {len(fed.clients)} clients and {len(fed.reference_images)} reference images to {run.root}")


def _train_clients(run, flat, dataset, ids=None):
    train_cfg = cfgmod.section(flat, "trainer")
    model_cfg = cfgmod.section(flat, "model")
    msgs = []
    for client in dataset.clients:
        if ids is not None and client.style_id not in ids:
            continue
        logger.info("training client %d", client.style_id)
        msg = client_train(client.style_id, client.images, dataset.reference_images, train_cfg, model_cfg,
                           metrics_path=run.fresh_metrics(f"train_client_{client.style_id}.jsonl"))
        run.client_ckpt(client.style_id).write_bytes(msg.payload)
        msgs.append(msg)
    return msgs


def cmd_train_client(run, flat, args):
    dataset, _ = _data(run, flat)
    known = {c.style_id for c in dataset.clients}
    ids = set(args.client) if args.client else None
    if ids and not ids <= known:
        raise ConfigError(f"unknown client ids {sorted(ids - known)}")
    msgs = _train_clients(run, flat, dataset, ids)
    print(f"trained {len(msgs)} client model(s)")


def _load_msgs(run, flat, dataset):
    msgs = []
    missing = []
    for client in dataset.clients:
        path = run.client_ckpt(client.style_id)
        if path.is_file():
            payload = path.read_bytes()
            checkpoint.decode(payload)
            msgs.append(ClientMsg(client.style_id, payload))
        else:
            missing.append(client.style_id)
    if missing:
        msgs.extend(_train_clients(run, flat, dataset, set(missing)))
    return sorted(msgs, key=lambda m: m.client_id)


def _global_bundle(run, flat, dataset, msgs=None):
    path = run.root / "checkpoints" / "global.bgan"
    if path.is_file():
        return checkpoint.load_bundle(path)
    msgs = msgs if msgs is not None else _load_msgs(run, flat, dataset)
    result = server_distill(msgs, dataset.reference_images, cfgmod.section(flat, "distill"),
                            cfgmod.section(flat, "model"), metrics_path=run.fresh_metrics("distill.jsonl"))
    checkpoint.save_bundle(result.bundle, run.path("checkpoints", "global.bgan"))
    return result.bundle


def cmd_distill(run, flat, args):
    dataset, _ = _data(run, flat)
    (run.root / "checkpoints" / "global.bgan").unlink(missing_ok=True)
    bundle = _global_bundle(run, flat, dataset)
    print(f"distilled a global model over styles {bundle.bank.ids}")


def cmd_federate(run, flat, args):
    dataset, _ = _data(run, flat)
    use = not args.no_bottlegan
    variant = "bottlegan" if use else "fedavgm"
    msgs = bundle = None
    if use:
        msgs = _load_msgs(run, flat, dataset)
        bundle = _global_bundle(run, flat, dataset, msgs)
    result = federate(dataset, cfgmod.section(flat, "federation"), use_bottlegan=use, msgs=msgs,
                      global_bundle=bundle, metrics_path=run.fresh_metrics(f"federate_{variant}.jsonl"))
    checkpoint.save(result.model.state_dict(),
                    run.path("checkpoints", f"seg_{variant}.bgan"))
    last = result.metrics[-1]
    print(f"{variant}: iou={last['iou']:.4f} ece={last['ece']:.4f} nll={last['nll']:.4f}")


def cmd_eval(run, flat, args):
    dataset, _ = _data(run, flat)
    msgs = _load_msgs(run, flat, dataset)
    bundle = _global_bundle(run, flat, dataset, msgs)
    path = run.fresh_metrics("eval.jsonl")
    records = []
    for msg in msgs:
        client = next(c for c in dataset.clients if c.style_id == msg.client_id)
        local = msg.bundle()
        for name, model in (("global", bundle), ("local", local)):
            for space in ("rgb", "od"):
                records.append({"metric": f"mse_{space}_{name}", "split": f"client_{msg.client_id}",
                                "value": recon_mse(model, client.test_images, msg.client_id, space), "step": 0})
    held = [im for c in dataset.clients for im in c.test_images]
    ids = [c.style_id for c in dataset.clients for _ in c.test_images]
    normalized = np.concatenate([cycle_reconstruct(bundle, im, k)[0] for im, k in zip(held, ids)])
    ref_feats = extract_features(dataset.reference_images)
    records.append({"metric": "frechet_input", "split": "test", "step": 0,
                    "value": frechet_distance(extract_features(held), ref_feats)})
    records.append({"metric": "frechet_normalized", "split": "test", "step": 0,
                    "value": frechet_distance(extract_features(normalized), ref_feats)})
    append_records(path, records)
    emit_grid(bundle, held[:8], ids[:8], run.path("figures", "grid.png"))
    for rec in records:
        print(f"{rec['split']:>10} {rec['metric']:<20} {rec['value']:.6f}")


def cmd_report(run, flat, args):
    metrics = run.root / "metrics"
    if not metrics.is_dir():
        raise ConfigError(f"no metrics in {run.root}")
    summary = {}
    for path in sorted(metrics.glob("*.jsonl")):
        lines = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        if not lines:
            continue
        if path.stem == "eval":
            summary["eval"] = {f"{r['split']}/{r['metric']}": r["value"] for r in lines}
        else:
            summary[path.stem] = lines[-1]
    report = run.path("metrics", "report.json")
    report.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))


HANDLERS = {
    "synth": cmd_synth,
    "train-client": cmd_train_client,
    "distill": cmd_distill,
    "federate": cmd_federate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def run_command(argv=None):
    """Parse ``argv`` and execute one pipeline stage; returns an exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        flat, run = _resolve(args)
        run.root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(run.root / ".lock"), timeout=0):
            _snapshot(run, flat, args.command)
            HANDLERS[args.command](run, flat, args)
    except Timeout:
        print(f"error: run directory {run.root} is locked by another command", file=sys.stderr)
        return 3
    except (BottleGANError, CheckpointError, ValueError, KeyError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
