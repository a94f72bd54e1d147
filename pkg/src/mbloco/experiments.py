"""Evaluation protocol: repeated closed-loop runs aggregated into cost tables.

A controller is either ``None`` (the differential-drive baseline), a
:class:`~mbloco.dynmodel.DynModel` driven by the MPC, or a mapping from
terrain name to model (one specialist per terrain). Every run is keyed by
``(controller, terrain, path, seed)`` and reports are assembled in sorted key
order, so the output does not depend on how runs were scheduled.

CSV schemas (all costs written with full float precision):

* cells: ``controller,terrain,path,n_seeds,mean_cost,std_cost,config_hash``
* runs: ``controller,terrain,path,seed,cost,config_hash``
* speed: ``speed,dd_mean,dd_std,mpc_mean,mpc_std,gap,n_seeds,config_hash``
  where ``gap = dd_mean - mpc_mean``
* matrix: ``model,<terrain>...,config_hash`` (mean cost per cell)

Standard deviations are population deviations over the seeds of a cell.
"""

import csv
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ddrive, mpc
from . import simworld as sw
from .config import config_hash

CELL_FIELDS = ["controller", "terrain", "path", "n_seeds", "mean_cost", "std_cost", "config_hash"]
RUN_FIELDS = ["controller", "terrain", "path", "seed", "cost", "config_hash"]
SPEED_FIELDS = ["speed", "dd_mean", "dd_std", "mpc_mean", "mpc_std", "gap", "n_seeds", "config_hash"]


@dataclass(frozen=True)
class RunRecord:
    controller: str
    terrain: str
    path: str
    seed: int
    cost: float


@dataclass(frozen=True)
class Cell:
    controller: str
    terrain: str
    path: str
    n_seeds: int
    mean: float
    std: float


@dataclass
class ExperimentReport:
    records: list
    config_hash: str
    n_seeds: int

    def cells(self):
        groups = {}
        for r in sorted(self.records, key=lambda r: (r.controller, r.terrain, r.path, r.seed)):
            groups.setdefault((r.controller, r.terrain, r.path), []).append(r.cost)
        out = []
        for (c, t, p), costs in groups.items():
            if len(costs) != self.n_seeds:
                raise ValueError(f"cell ({c}, {t}, {p}) has {len(costs)} runs, expected {self.n_seeds}")
            out.append(Cell(c, t, p, len(costs), float(np.mean(costs)), float(np.std(costs))))
        return out

    def cell(self, controller, terrain, path):
        for c in self.cells():
            if (c.controller, c.terrain, c.path) == (controller, terrain, path):
                return c
        raise KeyError((controller, terrain, path))

    def costs(self, controller, terrain=None, path=None):
        """Run costs of one controller, optionally restricted to a terrain/path."""
        return np.array([r.cost for r in self.records if r.controller == controller
                         and (terrain is None or r.terrain == terrain) and (path is None or r.path == path)])

    def digest(self):
        h = hashlib.sha256(self.config_hash.encode())
        for r in sorted(self.records, key=lambda r: (r.controller, r.terrain, r.path, r.seed)):
            h.update(f"{r.controller}|{r.terrain}|{r.path}|{r.seed}|{r.cost!r}\n".encode())
        return h.hexdigest()[:16]

    def write_cells(self, path):
        rows = [[c.controller, c.terrain, c.path, c.n_seeds, repr(c.mean), repr(c.std), self.config_hash]
                for c in self.cells()]
        _write_csv(path, CELL_FIELDS, rows)

    def write_runs(self, path):
        rows = [[r.controller, r.terrain, r.path, r.seed, repr(r.cost), self.config_hash]
                for r in sorted(self.records, key=lambda r: (r.controller, r.terrain, r.path, r.seed))]
        _write_csv(path, RUN_FIELDS, rows)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def seed_list(seed, n):
    """The run seeds derived from a base seed."""
    if n < 1:
        raise ValueError("need at least one seed")
    return [int(seed) + i for i in range(n)]


def path_for(cfg, kind):
    if kind not in sw.PATH_KINDS:
        raise ValueError(f"unknown path kind {kind!r}; expected one of {sorted(sw.PATH_KINDS)}")
    return sw.make_path(kind, cfg["eval"]["path_scales"][kind])


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------

def run_once(cfg, controller, terrain, path_kind, seed, mpc_cfg=None, dd_params=None, duration=None):
    """Closed-loop cost of one run; ``controller`` as described in the module docstring."""
    terr = sw.get_terrain(terrain, cfg) if isinstance(terrain, str) else terrain
    path = path_for(cfg, path_kind)
    duration = cfg["eval"]["duration"] if duration is None else duration
    if isinstance(controller, dict):
        if terr.name not in controller:
            raise KeyError(f"no specialist model for terrain {terr.name!r}")
        controller = controller[terr.name]
    if controller is None:
        params = dd_params or ddrive.DDParams.from_config(cfg)
        return ddrive.dd_rollout(cfg, terr, path, params, duration, seed).cost
    mc = mpc_cfg or mpc.MPCConfig.from_config(cfg)
    return mpc.mpc_rollout(cfg, controller, terr, path, mc, duration, seed).cost


def _run_job(job):
    cfg, controller, terrain, path_kind, seed, mpc_cfg, dd_params = job
    return run_once(cfg, controller, terrain, path_kind, seed, mpc_cfg, dd_params)


def _run_all(jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_run_job(j) for j in jobs]


def evaluate(cfg, controllers, terrains, paths, seeds, mpc_cfg=None, dd_params=None, workers=1):
    """Run every (controller, terrain, path, seed) combination into a report."""
    if not controllers:
        raise ValueError("no controllers to evaluate")
    for kind in paths:
        path_for(cfg, kind)
    for t in terrains:
        sw.get_terrain(t, cfg)
    keys = sorted((c, t, p, s) for c in controllers for t in terrains for p in paths for s in seeds)
    jobs = [(cfg, controllers[c], t, p, s, mpc_cfg, dd_params) for c, t, p, s in keys]
    costs = _run_all(jobs, workers)
    records = [RunRecord(c, t, p, int(s), float(v)) for (c, t, p, s), v in zip(keys, costs)]
    return ExperimentReport(records, config_hash(cfg), len(seeds))


# ---------------------------------------------------------------------------
# Headline comparisons
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpeedRow:
    speed: float
    dd_mean: float
    dd_std: float
    mpc_mean: float
    mpc_std: float
    n_seeds: int

    @property
    def gap(self):
        return self.dd_mean - self.mpc_mean


def speed_box(cfg, speed, band=None):
    """Action box of the MPC at a nominal leg speed: ``speed * (1 -/+ band)``, clipped."""
    p = sw.SimParams.from_config(cfg)
    band = cfg["eval"]["speed_band"] if band is None else band
    lo = max(p.omega_min, speed * (1.0 - band))
    hi = min(p.omega_max, speed * (1.0 + band))
    return lo, hi


def speed_sweep(cfg, model, terrain, speeds, seeds, path_kind="straight", band=None, workers=1):
    """DD and MPC costs across nominal leg speeds.

    The DD baseline cruises at ``omega_nom = speed``; the MPC samples its
    actions from :func:`speed_box` so both controllers run in the same speed
    regime.
    """
    speeds = [float(s) for s in speeds]
    if not speeds:
        raise ValueError("empty speed list")
    base = mpc.MPCConfig.from_config(cfg)
    jobs = []
    for s in speeds:
        lo, hi = speed_box(cfg, s, band)
        mc = mpc.MPCConfig.from_config(cfg, action_low=lo, action_high=hi)
        dd = ddrive.DDParams.from_config(cfg, omega_nom=s)
        for seed in seeds:
            jobs.append((cfg, None, terrain, path_kind, seed, base, dd))
            jobs.append((cfg, model, terrain, path_kind, seed, mc, None))
    costs = np.array(_run_all(jobs, workers)).reshape(len(speeds), len(seeds), 2)
    return [SpeedRow(s, float(c[:, 0].mean()), float(c[:, 0].std()), float(c[:, 1].mean()),
                     float(c[:, 1].std()), len(seeds)) for s, c in zip(speeds, costs)]


def write_speed_csv(rows, path, cfg_hash):
    _write_csv(path, SPEED_FIELDS, [[repr(r.speed), repr(r.dd_mean), repr(r.dd_std), repr(r.mpc_mean),
                                     repr(r.mpc_std), repr(r.gap), r.n_seeds, cfg_hash] for r in rows])


def cost_matrix(report, models, terrains, path_kind="straight"):
    """``(len(models), len(terrains))`` mean costs; row ``i`` is model ``models[i]``."""
    return np.array([[report.cell(m, t, path_kind).mean for t in terrains] for m in models])


def write_matrix_csv(matrix, models, terrains, path, cfg_hash):
    rows = [[m, *[repr(float(v)) for v in row], cfg_hash] for m, row in zip(models, matrix)]
    _write_csv(path, ["model", *terrains, "config_hash"], rows)


def terrain_means(report, controller, terrains):
    """Mean cost of a controller per terrain, pooled over all paths and seeds."""
    return {t: float(np.mean(report.costs(controller, t))) for t in terrains}


def path_output(out_dir, name):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name
