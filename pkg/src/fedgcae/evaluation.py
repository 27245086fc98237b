"""Baselines, experiment sweeps and report files."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .data import ClientDataset, Partition, PartitionSpec, SynthSpec, synthetic_partition
from .federation import FedConfig, evaluate_global, payload_bytes, run_federated
from .metrics import compute_metrics, mean_std
from .model import Network, init_params, load_checkpoint, param_count, save_checkpoint
from .nn import sgd_step
from .personalization import PersonalizationConfig, personalize_all

log = logging.getLogger(__name__)

# variant -> (training mode, architecture, personalised)
VARIANTS = {
    "FedHome": ("federated", "gcae", True),
    "FedHome-p": ("federated", "gcae", False),
    "FL-CNN": ("federated", "fl-cnn", False),
    "FL-CNN-Large": ("federated", "fl-cnn-large", False),
    "FL-MLP": ("federated", "fl-mlp", False),
    "Centralized-GCAE": ("centralized", "gcae", False),
    "Centralized-CNN": ("centralized", "fl-cnn", False),
    "Centralized-MLP": ("centralized", "fl-mlp", False),
}
SCHEMES = ("balanced", "imbalanced", "home")
K_SWEEP = (1, 3, 5, 10, 30)
BE_GRID = ((10, 1), (10, 5), (10, 20), (50, 1), (50, 5), (50, 20))


# ---------------------------------------------------------------------------
# centralized baselines


@dataclass
class CentralConfig:
    epochs: int = 10
    batch_size: int = 10
    learning_rate: float = 0.01
    lam: float = 0.01
    seed: int = 0


def run_centralized(variant: str, train: ClientDataset, test_sets, cfg: CentralConfig | None = None,
                    curve: list | None = None):
    """Plain minibatch SGD on pooled data.  Returns ``(report, params)``.

    ``variant`` may be a variant name or an architecture id.  When ``curve`` is
    a list, ``(epoch, train_loss, test_accuracy)`` is appended after each epoch.
    """
    cfg = cfg or CentralConfig()
    arch = VARIANTS[variant][1] if variant in VARIANTS else variant
    net = Network(arch)
    params = init_params(arch, cfg.seed)
    if len(train) == 0:
        raise ValueError("empty training set")
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 505, epoch])
        order = rng.permutation(len(train))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            b = order[i:i + cfg.batch_size]
            res = net.loss_and_grad(params, train.X[b], train.y[b], cfg.lam)
            params = sgd_step(params, res.grad, cfg.learning_rate)
            total += res.loss * len(b)
        if curve is not None:
            curve.append((epoch, total / len(train), evaluate_global(net, params, test_sets).accuracy))
    return evaluate_global(net, params, test_sets), params


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class ExperimentPlan:
    variants: tuple = ("FedHome", "FedHome-p", "FL-CNN")
    schemes: tuple = ("imbalanced",)
    k_values: tuple = (5,)
    be_grid: tuple = ((10, 5),)
    repetitions: int = 5
    rounds: int = 150
    learning_rate: float = 0.01
    lam: float = 0.01
    seed: int = 0
    eval_every: int = 10
    central_epochs: int = 10
    workers: int = 1
    cell_workers: int = 1
    partition: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    personalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.schemes = tuple(self.schemes)
        self.k_values = tuple(int(k) for k in self.k_values)
        self.be_grid = tuple((int(b), int(e)) for b, e in self.be_grid)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variant(s) {bad}; choose from {sorted(VARIANTS)}")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad:
            raise ValueError(f"unknown scheme(s) {bad}; choose from {list(SCHEMES)}")
        if "home" in self.schemes and any(k > PartitionSpec(**self.partition).num_homes
                                          for k in self.k_values):
            raise ValueError("K exceeds the number of homes for the home scheme")
        if self.repetitions < 1 or self.rounds < 0:
            raise ValueError("repetitions must be >= 1 and rounds >= 0")
        if not self.k_values or not self.be_grid:
            raise ValueError("empty sweep axis")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["be_grid"] = [list(p) for p in self.be_grid]
        for k in ("variants", "schemes", "k_values"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown plan keys {sorted(extra)}")
        return cls(**d)

    def settings(self):
        """Sweep settings ``(K, B, E)`` in plan order."""
        return [(k, b, e) for k in self.k_values for b, e in self.be_grid]

    def cells(self):
        for (k, b, e), variant, scheme, rep in itertools.product(
                self.settings(), self.variants, self.schemes, range(self.repetitions)):
            yield Cell(variant, scheme, k, b, e, rep)


@dataclass(frozen=True)
class Cell:
    variant: str
    scheme: str
    k: int
    b: int
    e: int
    rep: int

    @property
    def setting_dir(self) -> str:
        return f"K{self.k}_B{self.b}_E{self.e}"

    def path(self, root: Path) -> Path:
        return Path(root) / self.setting_dir / f"{self.variant}_{self.scheme}" / f"rep{self.rep}"


@dataclass
class CellResult:
    cell: Cell
    accuracy: float
    mean_user_accuracy: float
    param_count: int
    curve: list
    error: str | None = None
    per_user: dict | None = None  # user -> (accuracy before, after personalisation)

    @property
    def ok(self) -> bool:
        return self.error is None


CURVE_FIELDS = ("round", "train_loss", "test_accuracy", "cumulative_bytes")


def write_curve(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow(["" if v is None else v for v in r])


def read_curve(path: Path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["round"]), float(r["train_loss"]),
             None if r["test_accuracy"] == "" else float(r["test_accuracy"]),
             int(r["cumulative_bytes"])) for r in rows]


class ExperimentRunner:
    """Executes an :class:`ExperimentPlan` under ``out_dir``.

    Each finished cell leaves a ``DONE`` marker next to its ``curve.csv`` and
    ``metrics.json``, so an interrupted sweep resumes where it stopped.
    Federated GCAE runs are shared between FedHome and FedHome-p.
    """

    def __init__(self, plan: ExperimentPlan, out_dir, partitions: dict | None = None):
        self.plan = plan
        self.out = Path(out_dir)
        self._partitions = dict(partitions or {})

    def partition(self, scheme: str) -> Partition:
        if scheme not in self._partitions:
            spec = PartitionSpec(**{**self.plan.partition, "scheme": scheme})
            synth = SynthSpec(**{"num_users": spec.num_users, **self.plan.synth})
            self._partitions[scheme] = synthetic_partition(spec, synth)
        return self._partitions[scheme]

    def fed_config(self, cell: Cell, arch: str) -> FedConfig:
        return FedConfig(num_clients=len(self.partition(cell.scheme).clients), clients_per_round=cell.k,
                         local_epochs=cell.e, batch_size=cell.b, learning_rate=self.plan.learning_rate,
                         lam=self.plan.lam, rounds=self.plan.rounds, seed=self.plan.seed + cell.rep,
                         arch=arch, eval_every=self.plan.eval_every)

    def _global_run(self, cell: Cell, arch: str):
        """Train (or reload) the federated model behind a cell."""
        part = self.partition(cell.scheme)
        cfg = self.fed_config(cell, arch)
        base = self.out / cell.setting_dir / "_global" / f"{arch}_{cell.scheme}_rep{cell.rep}"
        ckpt, curve_path = base / "final.bin", base / "curve.csv"
        if (base / "DONE").exists():
            params, _ = load_checkpoint(ckpt)
            return params, read_curve(curve_path)
        params, logs = run_federated(part.clients, cfg, test_sets=part.test_sets, workers=self.plan.workers,
                                     log_path=base / "rounds.jsonl")
        curve = [(e.round + 1, e.train_loss, e.test_accuracy, e.cumulative_bytes) for e in logs]
        save_checkpoint(ckpt, params, arch, {"config": cfg.to_dict()})
        write_curve(curve_path, curve)
        (base / "DONE").write_text("")
        return params, curve

    def run_cell(self, cell: Cell) -> CellResult:
        mode, arch, personal = VARIANTS[cell.variant]
        part = self.partition(cell.scheme)
        net = Network(arch)
        if mode == "centralized":
            cfg = CentralConfig(self.plan.central_epochs, cell.b, self.plan.learning_rate, self.plan.lam,
                                self.plan.seed + cell.rep)
            raw = []
            report, _ = run_centralized(arch, part.pooled_train(), part.test_sets, cfg, raw)
            curve = [(ep + 1, loss, acc, 0) for ep, loss, acc in raw]
        else:
            params, curve = self._global_run(cell, arch)
            report = evaluate_global(net, params, part.test_sets)
            if personal:
                pcfg = PersonalizationConfig(**{"seed": self.plan.seed + cell.rep,
                                                **self.plan.personalization})
                report, per_user = personalized_report(net, params, part, pcfg, with_users=True)
                return CellResult(cell, report.accuracy, report.mean_user_accuracy, net.param_count, curve,
                                  per_user=per_user)
        return CellResult(cell, report.accuracy, report.mean_user_accuracy, net.param_count, curve)

    def _execute(self, cell: Cell) -> CellResult:
        d = cell.path(self.out)
        if (d / "DONE").exists():
            m = json.loads((d / "metrics.json").read_text())
            return CellResult(cell, m["accuracy"], m["mean_user_accuracy"], m["param_count"],
                              read_curve(d / "curve.csv"))
        d.mkdir(parents=True, exist_ok=True)
        try:
            res = self.run_cell(cell)
        except Exception as exc:  # isolate the cell, keep sweeping
            log.error("cell %s failed: %s", cell, exc)
            (d / "error.txt").write_text(traceback.format_exc())
            return CellResult(cell, float("nan"), float("nan"), param_count(VARIANTS[cell.variant][1]), [],
                              f"{type(exc).__name__}: {exc}")
        write_curve(d / "curve.csv", res.curve)
        if res.per_user:
            with open(d / "personalization.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["user", "pre_accuracy", "post_accuracy"])
                w.writerows([u, *res.per_user[u]] for u in sorted(res.per_user))
        (d / "metrics.json").write_text(json.dumps({
            "cell": asdict(cell), "accuracy": res.accuracy, "mean_user_accuracy": res.mean_user_accuracy,
            "param_count": res.param_count}, indent=2) + "\n")
        (d / "DONE").write_text("")
        return res

    def run(self) -> list[CellResult]:
        self.out.mkdir(parents=True, exist_ok=True)
        plan_file = self.out / "plan.json"
        if plan_file.exists() and json.loads(plan_file.read_text()) != self.plan.to_dict():
            raise ValueError(f"{self.out} holds results of a different plan; use a fresh directory")
        plan_file.write_text(json.dumps(self.plan.to_dict(), indent=2) + "\n")
        cells = list(self.plan.cells())
        if self.plan.cell_workers > 1:
            with ThreadPoolExecutor(self.plan.cell_workers) as pool:
                results = list(pool.map(self._execute, cells))
        else:
            results = [self._execute(c) for c in cells]
        write_reports(self.out, self.plan, results)
        return results


def personalized_report(net: Network, global_params, part: Partition, cfg: PersonalizationConfig,
                        with_users: bool = False):
    """Metrics where each user's test split is scored by that user's (or
    home's) personalised model.  With ``with_users`` also returns
    ``{user: (accuracy before, accuracy after)}``."""
    tests = {t.client_id: t for t in part.test_sets}
    preds, labels, users = [], [], []
    per_user = {}
    for res in personalize_all(net, global_params, part, cfg):
        for u in res.members:
            per_user[u] = (res.pre_accuracy[u], res.post_accuracy[u])
            t = tests[u]
            preds.append(res.predictions[u])
            labels.append(t.y)
            users.append(t.user_ids)
    report = compute_metrics(np.concatenate(preds), np.concatenate(labels), np.concatenate(users))
    return (report, per_user) if with_users else report


def run_experiment(plan: ExperimentPlan, out_dir, partitions: dict | None = None) -> list[CellResult]:
    return ExperimentRunner(plan, out_dir, partitions).run()


# ---------------------------------------------------------------------------
# reports


def _group(results, key):
    groups = {}
    for r in results:
        groups.setdefault(key(r.cell), []).append(r)
    return groups


def reference_setting(plan: ExperimentPlan):
    """The setting summarised in ``summary.csv``: (K=5, B=10, E=5) when
    swept, otherwise the first one."""
    settings = plan.settings()
    return (5, 10, 5) if (5, 10, 5) in settings else settings[0]


def write_reports(out_dir, plan: ExperimentPlan, results: list[CellResult]) -> dict:
    out = Path(out_dir)
    ref = reference_setting(plan)
    rows = []
    for variant, scheme in itertools.product(plan.variants, plan.schemes):
        rs = [r for r in results if r.cell.variant == variant and r.cell.scheme == scheme
              and (r.cell.k, r.cell.b, r.cell.e) == ref and r.ok]
        mean, std = mean_std(r.accuracy for r in rs)
        rows.append({"variant": variant, "scheme": scheme, "mean_accuracy": mean, "std": std,
                     "param_count": param_count(VARIANTS[variant][1]), "runs": len(rs)})
    _write_rows(out / "summary.csv", rows)

    sweep = []
    for (v, s, k, b, e), rs in _group(results, lambda c: (c.variant, c.scheme, c.k, c.b, c.e)).items():
        good = [r for r in rs if r.ok]
        mean, std = mean_std(r.accuracy for r in good)
        arch = VARIANTS[v][1]
        sweep.append({"variant": v, "scheme": s, "K": k, "B": b, "E": e, "mean_accuracy": mean, "std": std,
                      "runs": len(good), "failed": len(rs) - len(good),
                      "bytes_per_round": 2 * payload_bytes(param_count(arch), k)
                      if VARIANTS[v][0] == "federated" else 0})
    _write_rows(out / "sweep.csv", sweep)

    trends = trend_checks(plan, results)
    (out / "trends.json").write_text(json.dumps(trends, indent=2) + "\n")
    failures = [{"cell": asdict(r.cell), "error": r.error} for r in results if not r.ok]
    (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return {"summary": rows, "sweep": sweep, "trends": trends, "failures": failures}


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def rounds_to_threshold(curve, threshold: float):
    """First logged round whose test accuracy reaches ``threshold``."""
    for rnd, _, acc, _ in curve:
        if acc is not None and acc >= threshold:
            return rnd
    return None


def mean_curve(curves) -> list:
    """Average test-accuracy curves on their common evaluated rounds."""
    per_round = {}
    for c in curves:
        for rnd, loss, acc, nbytes in c:
            if acc is not None:
                per_round.setdefault(rnd, []).append((loss, acc, nbytes))
    n = len(curves)
    return [(r, float(np.mean([v[0] for v in vs])), float(np.mean([v[1] for v in vs])), vs[0][2])
            for r, vs in sorted(per_round.items()) if len(vs) == n]


def trend_checks(plan: ExperimentPlan, results, threshold: float = 0.8) -> list[dict]:
    """Soft ordering checks, reported rather than enforced.

    * K=1 ends below K=5 at matched rounds.
    * Every (B, E) cell with at least the local work of (B=50, E=1) reaches
      ``threshold`` no later than it, allowing one logged evaluation of slack.
    """
    checks = []
    fed = [r for r in results if r.ok and VARIANTS[r.cell.variant][0] == "federated"]
    for (v, s, b, e), rs in _group(fed, lambda c: (c.variant, c.scheme, c.b, c.e)).items():
        by_k = _group(rs, lambda c: c.k)
        if 1 in by_k and 5 in by_k:
            a1 = float(np.mean([r.accuracy for r in by_k[1]]))
            a5 = float(np.mean([r.accuracy for r in by_k[5]]))
            checks.append({"check": "K1_below_K5", "variant": v, "scheme": s, "B": b, "E": e,
                           "K1": a1, "K5": a5, "passed": a1 < a5})
    for (v, s, k), rs in _group(fed, lambda c: (c.variant, c.scheme, c.k)).items():
        by_be = {be: mean_curve([r.curve for r in g]) for be, g in _group(rs, lambda c: (c.b, c.e)).items()}
        if (50, 1) not in by_be:
            continue
        base = rounds_to_threshold(by_be[(50, 1)], threshold)
        slack = plan.eval_every
        for (b, e), curve in sorted(by_be.items()):
            if (b, e) == (50, 1) or b > 50 or e < 1:
                continue
            got = rounds_to_threshold(curve, threshold)
            passed = got is not None and (base is None or got <= base + slack)
            checks.append({"check": "more_local_work_not_slower", "variant": v, "scheme": s, "K": k,
                           "B": b, "E": e, "threshold": threshold, "rounds": got, "baseline_rounds": base,
                           "passed": passed})
    return checks


def with_overrides(plan: ExperimentPlan, **kw) -> ExperimentPlan:
    return replace(plan, **kw)
