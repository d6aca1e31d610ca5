"""Sweeps over (size target, mu) and the resulting accuracy/OPs fronts.

For every size target the sweep first runs ``mu = 0`` and then a geometric
series of ``mu`` values.  A front ends as soon as a point loses more than
``accuracy_drop_limit`` validation accuracy against the front's ``mu = 0``
point, or lands outside ``size_band`` of the target (the OPs term has then
overpowered the size constraint).  Both kinds of point are kept and flagged.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .loss import TargetEqualsSeedError, compute_lambda
from .model import Model, build_seed, shrunk_spec
from .search import RunResult, SearchConfig, SeedStats, prepare_warmup, run_search
from .spec import NetworkSpec

log = logging.getLogger(__name__)

CSV_COLUMNS = ["run_id", "s_star_fraction", "mu", "lambda", "size_params", "ops", "val_acc", "test_acc"]


@dataclass
class ParetoPoint:
    run_id: str
    s_star_fraction: float
    mu: float
    lam: float
    size_params: int = 0
    ops: int = 0
    val_accuracy: float = float("nan")
    test_accuracy: float = float("nan")
    channel_config: dict[str, int] = field(default_factory=dict)
    seed_channels: dict[str, int] = field(default_factory=dict)
    s_star: float = 0.0
    status: str = "ok"
    error: str | None = None
    dominated: bool = False
    size_ok: bool = True
    admissible: bool = True
    spec: NetworkSpec | None = field(default=None, repr=False, compare=False)

    @property
    def completed(self) -> bool:
        return self.status == "ok"

    def channel_ratios(self) -> dict[str, float]:
        return {k: self.channel_config[k] / self.seed_channels[k] for k in self.channel_config}

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in ("spec", "lam")}
        d["lambda"] = self.lam
        d["channel_ratios"] = self.channel_ratios() if self.completed else {}
        return d


@dataclass
class SweepPlan:
    s_star_fractions: tuple[float, ...] = (0.75, 0.5, 0.25)
    # first non-zero mu is mu_start_factor * lam * S_seed / O_seed
    mu_start_factor: float = 1e-6
    mu_growth: float = 4.0
    max_mu_points: int = 12
    accuracy_drop_limit: float = 0.05
    size_band: float = 0.05

    def __post_init__(self):
        self.s_star_fractions = tuple(float(f) for f in self.s_star_fractions)
        if not self.s_star_fractions or any(not 0 < f <= 1 for f in self.s_star_fractions):
            raise ValueError(f"size fractions must lie in (0, 1], got {self.s_star_fractions}")
        if self.mu_start_factor <= 0 or self.mu_growth <= 1:
            raise ValueError("mu_start_factor must be positive and mu_growth greater than 1")
        if self.max_mu_points < 0:
            raise ValueError("max_mu_points must be non-negative")
        if not 0 < self.accuracy_drop_limit < 1:
            raise ValueError(f"accuracy_drop_limit must be in (0, 1), got {self.accuracy_drop_limit}")

    def mu_schedule(self, lam: float, seed_size: float, seed_ops: float) -> list[float]:
        """``[0, mu_min, mu_min*growth, ...]`` with ``mu_min`` scaled to the OPs magnitude."""
        mu_min = self.mu_start_factor * lam * seed_size / seed_ops
        if mu_min <= 0:
            return [0.0]
        return [0.0] + [mu_min * self.mu_growth**k for k in range(self.max_mu_points)]

    @classmethod
    def from_dict(cls, data: dict) -> "SweepPlan":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown sweep plan fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["s_star_fractions"] = list(self.s_star_fractions)
        return d


def front_should_stop(base_acc: float, acc: float, limit: float) -> bool:
    """True when ``acc`` is more than ``limit`` (absolute) below the front's base."""
    return base_acc - acc > limit


def point_from_result(run_id: str, fraction: float, res: RunResult, spec: NetworkSpec) -> ParetoPoint:
    seed_channels = {lay.id: spec.shapes[lay.id][0] for lay in spec.conv_layers()}
    return ParetoPoint(
        run_id=run_id,
        s_star_fraction=fraction,
        mu=res.mu,
        lam=res.lam,
        size_params=res.cost.total_params,
        ops=res.cost.total_ops,
        val_accuracy=res.val_accuracy,
        test_accuracy=res.test_accuracy,
        channel_config=dict(res.channel_config),
        seed_channels=seed_channels,
        s_star=res.s_star,
        spec=spec,
    )


def run_sweep(
    spec: NetworkSpec,
    train: Dataset,
    test: Dataset,
    plan: SweepPlan,
    cfg: SearchConfig,
    out_dir: str | Path | None = None,
    warmup_ckpt: str | Path | None = None,
    warm: tuple[Model, SeedStats] | None = None,
) -> list[ParetoPoint]:
    """Run every front of ``plan`` from one shared warmup; failed points are kept and marked.

    ``warm`` supplies an already warmed-up ``(model, stats)`` pair; otherwise the
    warmup is restored from ``warmup_ckpt`` or computed once.
    """
    log_dir = Path(out_dir) / "runs" if out_dir else None
    if warm is None:
        warm = prepare_warmup(spec, train, cfg, warmup_ckpt)
    stats = warm[1]
    points: list[ParetoPoint] = []
    for fraction in plan.s_star_fractions:
        s_star = fraction * stats.size
        try:
            lam = compute_lambda(stats.task_loss, stats.size, s_star)
        except TargetEqualsSeedError:
            lam = 0.0
        base_acc = None
        for k, mu in enumerate(plan.mu_schedule(lam, stats.size, stats.ops)):
            run_id = f"seed{cfg.rng_seed}_s{round(fraction * 100):03d}_m{k:02d}"
            run_cfg = cfg.replace(s_star_fraction=fraction, mu=mu)
            log_path = log_dir / f"{run_id}.jsonl" if log_dir else None
            try:
                res = run_search(spec, train, test, run_cfg, warm=warm, log_path=log_path)
            except Exception as exc:  # a failed point must not sink the sweep
                log.error("run %s failed: %s", run_id, exc)
                points.append(ParetoPoint(run_id, fraction, mu, lam, s_star=s_star, status="failed",
                                          error=f"{type(exc).__name__}: {exc}", admissible=False))
                if base_acc is None:
                    break  # no reference point for this front
                continue
            pt = point_from_result(run_id, fraction, res, spec)
            pt.size_ok = abs(pt.size_params - s_star) <= plan.size_band * s_star
            points.append(pt)
            if base_acc is None:
                base_acc = pt.val_accuracy
                continue
            dropped = front_should_stop(base_acc, pt.val_accuracy, plan.accuracy_drop_limit)
            pt.admissible = pt.size_ok and not dropped
            if not pt.admissible:
                break
    flag_dominated(points)
    return sort_fronts(points)


def flag_dominated(points: list[ParetoPoint]) -> None:
    """Flag points with >= OPs and <= validation accuracy of another point in their front."""
    done = [p for p in points if p.completed]
    for p in done:
        p.dominated = any(
            q is not p
            and q.s_star_fraction == p.s_star_fraction
            and q.ops <= p.ops
            and q.val_accuracy >= p.val_accuracy
            and (q.ops < p.ops or q.val_accuracy > p.val_accuracy)
            for q in done
        )


def sort_fronts(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Group by size target (in plan order) and sort each front by OPs."""
    order = list(dict.fromkeys(p.s_star_fraction for p in points))
    return sorted(points, key=lambda p: (order.index(p.s_star_fraction), p.ops if p.completed else np.inf))


def report(points: list[ParetoPoint], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``pareto.csv`` and ``pareto.json``; returns their paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "runs").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write reports to {out}: {exc}") from None
    csv_path, json_path = out / "pareto.csv", out / "pareto.json"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for p in points:
            w.writerow([p.run_id, repr(p.s_star_fraction), repr(p.mu), repr(p.lam), p.size_params, p.ops,
                        repr(p.val_accuracy), repr(p.test_accuracy)])
    json_path.write_text(json.dumps([p.to_dict() for p in points], indent=2))
    return csv_path, json_path


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def load_points(path: str | Path) -> list[ParetoPoint]:
    """Rebuild points from a ``pareto.json`` file (without the network spec)."""
    known = {f.name for f in dataclasses.fields(ParetoPoint)}
    points = []
    for d in json.loads(Path(path).read_text()):
        d = dict(d)
        d["lam"] = d.pop("lambda")
        points.append(ParetoPoint(**{k: v for k, v in d.items() if k in known}))
    return points


def model_with_channels(spec: NetworkSpec, channel_config: dict[str, int]) -> Model:
    """A seed model whose masks keep the first ``n`` channels of each group."""
    model = build_seed(spec, 0)
    for layer_id, n in channel_config.items():
        group = spec.sources[layer_id]
        mask = model.masks[group]
        if not 1 <= n <= len(mask):
            raise ValueError(f"layer {layer_id!r}: live count {n} outside [1, {len(mask)}]")
        theta = -np.ones(len(mask))
        theta[:n] = 1.0
        mask.theta.data[:] = theta
    return model


def export_architecture(point: ParetoPoint, path: str | Path, spec: NetworkSpec | None = None) -> None:
    """Write the shrunk network as YAML, with per-layer live/seed channel ratios.

    The file loads back with :func:`chandnas.spec.load_network_spec`; the extra
    ``channels`` section is ignored by the loader.
    """
    spec = spec or point.spec
    if spec is None:
        raise ValueError("export_architecture needs the seed network spec")
    if not point.completed:
        raise ValueError(f"run {point.run_id} did not complete; nothing to export")
    small = shrunk_spec(model_with_channels(spec, point.channel_config))
    small.name = f"{spec.name}_{point.run_id}"
    channels = {
        k: {"live": point.channel_config[k], "seed": spec.shapes[k][0],
            "ratio": round(point.channel_config[k] / spec.shapes[k][0], 6)}
        for k in point.channel_config
    }
    small.dump(path, extra={"channels": channels})
