"""Command line entry point: ``fedgcae {gen-data,train,personalize,eval,sweep}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (ACTIVITIES, Partition, PartitionSpec, SynthSpec, WindowPool, load_csv, partition,
                   synthesize_streams, write_csv)
from .evaluation import ExperimentPlan, run_experiment
from .federation import FedConfig, evaluate_global, run_federated
from .model import Network, init_params, load_checkpoint, params_digest, save_checkpoint
from .personalization import PersonalizationConfig, personalize_all

log = logging.getLogger("fedgcae")

OUTPUT_ENV = "FEDGCAE_OUTPUT"
TRAIN_VARIANTS = {"fedhome": "gcae", "fedhome-p": "gcae", "fl-cnn": "fl-cnn",
                  "fl-cnn-large": "fl-cnn-large", "fl-mlp": "fl-mlp"}


class CLIError(Exception):
    """User-facing failure; printed without a traceback."""


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    variant: str = "fedhome"
    data_dir: str | None = None
    out_dir: str | None = None
    workers: int = 1
    checkpoint_every: int = 0
    fed: dict = field(default_factory=dict)
    partition: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    personalization: dict = field(default_factory=dict)

    def fed_config(self, num_clients: int) -> FedConfig:
        d = {**self.fed, "num_clients": num_clients, "arch": TRAIN_VARIANTS[self.variant]}
        return FedConfig(**d)

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(**self.partition)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(**{"num_users": self.partition_spec().num_users, **self.synth})

    def personalization_config(self) -> PersonalizationConfig:
        return PersonalizationConfig(**self.personalization)

    def resolved(self) -> dict:
        """Every setting, defaults filled in; enough to repeat the run."""
        pspec = self.partition_spec()
        n = pspec.num_homes if pspec.scheme == "home" else pspec.num_users
        fed = self.fed_config(n)
        return {"variant": self.variant, "data_dir": self.data_dir, "workers": self.workers,
                "checkpoint_every": self.checkpoint_every, "fed": fed.to_dict(), "partition": asdict(pspec),
                "synth": asdict(self.synth_spec()), "personalization": self.personalization_config().to_dict()}

    @classmethod
    def from_resolved(cls, d: dict) -> "RunConfig":
        fed = {k: v for k, v in d.get("fed", {}).items() if k not in ("num_clients", "arch")}
        return cls(variant=d.get("variant", "fedhome"), data_dir=d.get("data_dir"), workers=d.get("workers", 1),
                   checkpoint_every=d.get("checkpoint_every", 0), fed=fed,
                   partition=dict(d.get("partition", {})), synth=dict(d.get("synth", {})),
                   personalization=dict(d.get("personalization", {})))


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CLIError(f"config file {path} not found")
    text = path.read_text()
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise CLIError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise CLIError(f"{path} must hold a mapping at top level")
    return data


# flag -> (section, key)
_FLAG_MAP = {
    "k": ("fed", "clients_per_round"), "b": ("fed", "batch_size"), "e": ("fed", "local_epochs"),
    "lr": ("fed", "learning_rate"), "lam": ("fed", "lam"), "rounds": ("fed", "rounds"),
    "seed": ("fed", "seed"), "eval_every": ("fed", "eval_every"),
    "scheme": ("partition", "scheme"), "partition_seed": ("partition", "seed"),
    "users": ("partition", "num_users"), "data_seed": ("synth", "seed"),
    "level": ("personalization", "level"), "ft_epochs": ("personalization", "epochs"),
    "ft_lr": ("personalization", "learning_rate"), "ft_batch": ("personalization", "batch_size"),
    "k_neighbors": ("personalization", "k_neighbors"),
}
_TOP = ("variant", "data_dir", "workers", "checkpoint_every")


def build_config(args) -> RunConfig:
    """Defaults, then the config file (or a previous manifest), then flags."""
    base: dict = {}
    if getattr(args, "manifest", None):
        base = read_config_file(args.manifest).get("config", {})
        cfg = RunConfig.from_resolved(base)
    else:
        cfg = RunConfig()
    if getattr(args, "config", None):
        raw = read_config_file(args.config)
        for key in _TOP:
            if key in raw:
                setattr(cfg, key, raw[key])
        for section in ("fed", "partition", "synth", "personalization"):
            extra = raw.get(section, {})
            getattr(cfg, section).update(extra)
        unknown = set(raw) - set(_TOP) - {"fed", "partition", "synth", "personalization"}
        if unknown:
            raise CLIError(f"unknown config keys {sorted(unknown)}")
    for key in _TOP:
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    for flag, (section, key) in _FLAG_MAP.items():
        v = getattr(args, flag, None)
        if v is not None:
            getattr(cfg, section)[key] = v
    if cfg.variant not in TRAIN_VARIANTS:
        raise CLIError(f"unknown variant {cfg.variant!r}; choose from {sorted(TRAIN_VARIANTS)}")
    try:
        cfg.resolved()
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid configuration: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# data


def user_file(data_dir: Path, user: int) -> Path:
    return Path(data_dir) / f"user_{user:03d}.csv"


def load_partition(cfg: RunConfig) -> Partition:
    spec = cfg.partition_spec()
    if cfg.data_dir is None:
        streams = synthesize_streams(cfg.synth_spec())
    else:
        d = Path(cfg.data_dir)
        files = sorted(d.glob("user_*.csv")) if d.is_dir() else []
        if not files:
            raise CLIError(f"no user_*.csv files in {d}; run `fedgcae gen-data --out {d}` first")
        streams = [load_csv(f) for f in files]
    pool = WindowPool(streams, spec.test_per_class)
    return partition(pool, spec)


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    out = Path(args.out) if args.out else output_root() / "data"
    try:
        out.mkdir(parents=True, exist_ok=True)
        synth = cfg.synth_spec()
        streams = []
        for stream in synthesize_streams(synth):
            write_csv(stream, user_file(out, stream.user_id))
            streams.append(stream)
        pool = WindowPool(streams, cfg.partition_spec().test_per_class)
        part = partition(pool, cfg.partition_spec())
        part.write_manifest(out / "partition.json")
        write_json(out / "synth.json", asdict(synth))
    except OSError as exc:
        raise CLIError(f"cannot write to {out}: {exc}") from exc
    print(f"wrote {len(streams)} user files and partition.json to {out}")
    return 0


# ---------------------------------------------------------------------------
# train / personalize / eval


def _run_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    f = cfg.fed
    return output_root() / f"{cfg.variant}_{cfg.partition_spec().scheme}_K{f.get('clients_per_round', 5)}" \
                           f"_B{f.get('batch_size', 10)}_E{f.get('local_epochs', 5)}_s{f.get('seed', 0)}"


def cmd_train(args) -> int:
    cfg = build_config(args)
    run = _run_dir(args, cfg)
    part = load_partition(cfg)
    fed = cfg.fed_config(len(part.clients))
    run.mkdir(parents=True, exist_ok=True)
    manifest = {"version": __version__, "command": "train", "config": cfg.resolved()}
    write_json(run / "manifest.json", manifest)
    part.write_manifest(run / "partition.json")
    ckpt_dir = run / "checkpoints"
    save_checkpoint(ckpt_dir / "init.bin", init_params(fed.arch, fed.seed), fed.arch)

    def hook(t, params, entry):
        if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"round_{t + 1:05d}.bin", params, fed.arch, {"round": t + 1})

    params, logs = run_federated(part.clients, fed, test_sets=part.test_sets, eval_hook=hook,
                                 workers=cfg.workers, log_path=run / "rounds.jsonl", progress=True)
    save_checkpoint(ckpt_dir / "final.bin", params, fed.arch, {"rounds": fed.rounds})
    final = logs[-1].test_accuracy if logs else None
    print(f"{fed.rounds} rounds, final accuracy {final}, checkpoint sha256 {params_digest(params)}")
    if cfg.variant == "fedhome":
        _personalize(run, cfg, part, params)
    return 0


def _manifest(run: Path) -> RunConfig:
    m = run / "manifest.json"
    if not m.exists():
        raise CLIError(f"{run} has no manifest.json; is it a training run directory?")
    return RunConfig.from_resolved(json.loads(m.read_text())["config"])


def _final_checkpoint(run: Path, path=None):
    ckpt = Path(path) if path else run / "checkpoints" / "final.bin"
    if not ckpt.exists():
        raise CLIError(f"checkpoint {ckpt} not found; train first")
    return load_checkpoint(ckpt)


def _personalize(run: Path, cfg: RunConfig, part: Partition, params) -> Path:
    pcfg = cfg.personalization_config()
    net = Network("gcae")
    out = run / "personalized"
    rows = []
    for res in personalize_all(net, params, part, pcfg):
        save_checkpoint(out / f"{pcfg.level}_{res.unit:03d}.bin", res.params, "gcae",
                        {"level": pcfg.level, "members": res.members})
        rows.append({"client": res.unit, "level": pcfg.level, "members": " ".join(map(str, res.members)),
                     "pre_accuracy": float(np.mean(list(res.pre_accuracy.values()))),
                     "post_accuracy": float(np.mean(list(res.post_accuracy.values())))})
    report = run / f"personalization_{pcfg.level}.csv"
    with open(report, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    pre = np.mean([r["pre_accuracy"] for r in rows])
    post = np.mean([r["post_accuracy"] for r in rows])
    print(f"personalised {len(rows)} {pcfg.level} models: accuracy {pre:.4f} -> {post:.4f}")
    return report


def cmd_personalize(args) -> int:
    run = Path(args.run_dir)
    cfg = _manifest(run)
    for flag in ("level", "ft_epochs", "ft_lr", "ft_batch", "k_neighbors"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg.personalization[_FLAG_MAP[flag][1]] = v
    params, arch = _final_checkpoint(run)
    if arch.name != "gcae":
        raise CLIError(f"personalisation needs a gcae checkpoint, found {arch.name}")
    _personalize(run, cfg, load_partition(cfg), params)
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run_dir)
    cfg = _manifest(run)
    params, arch = _final_checkpoint(run, args.checkpoint)
    part = load_partition(cfg)
    rep = evaluate_global(Network(arch), params, part.test_sets)
    write_json(run / "eval.json", rep.to_dict())
    with open(run / "eval_per_class.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["activity", "precision", "recall", "f1"])
        for row in rep.per_class_rows(ACTIVITIES):
            w.writerow(row)
    print(f"accuracy {rep.accuracy:.4f} on {rep.total} test windows")
    return 0


def cmd_sweep(args) -> int:
    raw = read_config_file(args.plan)
    if args.workers is not None:
        raw["workers"] = args.workers
    try:
        plan = ExperimentPlan.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid plan: {exc}") from exc
    out = Path(args.out) if args.out else output_root() / Path(args.plan).stem
    results = run_experiment(plan, out)
    failed = [r for r in results if not r.ok]
    print(f"{len(results)} cells, {len(failed)} failed; reports in {out}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def _train_flags(p, personal_only=False):
    g = p.add_argument_group("personalisation")
    g.add_argument("--level", choices=("user", "home"))
    g.add_argument("--ft-epochs", dest="ft_epochs", type=int)
    g.add_argument("--ft-lr", dest="ft_lr", type=float)
    g.add_argument("--ft-batch", dest="ft_batch", type=int)
    g.add_argument("--k-neighbors", dest="k_neighbors", type=int)
    if personal_only:
        return
    p.add_argument("--config", help="JSON or YAML file with fed/partition/synth/personalization sections")
    p.add_argument("--scheme", choices=("balanced", "imbalanced", "home"))
    p.add_argument("--users", type=int)
    p.add_argument("--partition-seed", dest="partition_seed", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedgcae", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic sensor CSVs and a partition manifest")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV}/data)")
    _train_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="federated training")
    p.add_argument("--variant", choices=sorted(TRAIN_VARIANTS))
    p.add_argument("--data", dest="data_dir", help="directory of user_*.csv (default: synthesize in memory)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--manifest", help="repeat the run described by a previous manifest.json")
    p.add_argument("--rounds", type=int)
    p.add_argument("--k", type=int, help="clients per round")
    p.add_argument("--b", type=int, help="local batch size")
    p.add_argument("--e", type=int, help="local epochs")
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float, help="reconstruction weight")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--workers", type=int, help="threads for client updates")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("personalize", help="fine-tune heads of a trained run")
    p.add_argument("run_dir")
    _train_flags(p, personal_only=True)
    p.set_defaults(func=cmd_personalize)

    p = sub.add_parser("eval", help="score a run's checkpoint")
    p.add_argument("run_dir")
    p.add_argument("--checkpoint", help="checkpoint file (default: final)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run an experiment plan")
    p.add_argument("plan", help="JSON or YAML plan file")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
