"""Seeded generators for the semi-synthetic epidemic dataset and the fully
synthetic dexamethasone dataset, with factual and counterfactual arms, plus
CSV/JSON persistence that round-trips exactly."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .expert_models import (
    ExpertOdeSpec,
    PkpdParams,
    SeirhdParams,
    TreatmentSchedule,
    dex_plasma,
    hospital_inflow_rate,
    simulate_expert,
)
from .ode_core import TimeGrid

SCHEMA_VERSION = 1

# Initial compartment fractions for the 10-state epidemic model
# (E, I_A, I_P, I_M, I_S, H_R, H_D, R, D); susceptibles take the remainder.
SEIRHD_INIT_FRACTIONS = (
    0.0015,
    0.001,
    0.0007,
    0.0005,
    0.0002,
    0.00001,
    0.000005,
    0.0000005,
    0.0000001,
)

COVID_WEEKS = 52
COVID_SOLVER_DT = 0.1  # weeks
DEX_DAYS = 14
DEX_SOLVER_DT = 0.05  # days
STRICT_MANDATE_WEEK = 15.0
RELAXED_MANDATE_WEEK = 40.0


@dataclass
class Trajectory:
    """Time-indexed record of outcome, covariates, and treatment."""

    times: np.ndarray  # (T,)
    y: np.ndarray  # (T,)
    x: np.ndarray  # (T, d_x)
    a: np.ndarray  # (T,) ints in {0, 1}
    observed: np.ndarray  # (T,) bool
    y_clean: np.ndarray | None = None  # noiseless outcome, when known

    @property
    def horizon(self) -> int:
        return self.times.size

    @property
    def d_x(self) -> int:
        return self.x.shape[1]


@dataclass
class UnitRecord:
    unit_id: str
    meta: dict
    factual: Trajectory
    counterfactual: Trajectory
    treatment_factual: TreatmentSchedule
    treatment_counterfactual: TreatmentSchedule
    group: str


@dataclass
class Dataset:
    units: list[UnitRecord]
    schema_version: int
    seed: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [u.unit_id for u in self.units]
        if len(ids) != len(set(ids)):
            raise ValueError("unit ids must be unique")


@dataclass
class CovariateMixer:
    """Sparse linear map from latent state and treatment to covariates."""

    W3: np.ndarray  # (d_x, n_latent)
    W4: np.ndarray  # (d_x, 1)

    @classmethod
    def sample(cls, d_x: int, n_latent: int, rng: np.random.Generator) -> "CovariateMixer":
        w3 = rng.standard_normal((d_x, n_latent)) * rng.binomial(1, 0.5, (d_x, n_latent))
        w4 = rng.standard_normal((d_x, 1)) * rng.binomial(1, 0.5, (d_x, 1))
        return cls(W3=w3, W4=w4)


def gen_covariates(z: np.ndarray, a: float, mixer: CovariateMixer) -> np.ndarray:
    z = np.asarray(z, dtype=float).ravel()
    if z.size != mixer.W3.shape[1]:
        raise ValueError(
            f"latent size {z.size} does not match mixer input {mixer.W3.shape[1]}"
        )
    return mixer.W3 @ z + mixer.W4[:, 0] * a


def irregular_mask(n_points: int, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep-mask; each point dropped independently with ``p_drop``,
    the first point always retained."""
    if not 0 <= p_drop < 1:
        raise ValueError("p_drop must lie in [0, 1)")
    keep = rng.random(n_points) >= p_drop
    keep[0] = True
    return keep


def unit_rng(seed: int, unit_index: int) -> np.random.Generator:
    """Per-unit generator keyed on (seed, unit index); order independent."""
    return np.random.default_rng([seed, unit_index])


def synthetic_census(n_cities: int = 121, seed: int = 0) -> list[tuple[str, float]]:
    """Log-uniform city populations between 1e5 and 1e7."""
    rng = np.random.default_rng([seed, 987654321])
    pops = 10 ** rng.uniform(5, 7, size=n_cities)
    return [(f"city_{i:03d}", float(round(p))) for i, p in enumerate(pops)]


def load_census_csv(path) -> list[tuple[str, float]]:
    """Read (city, population) rows from a headered CSV."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append((row["city"], float(row["population"])))
    if not out:
        raise ValueError("census file contains no rows")
    return out


def seirhd_initial_state(population: float) -> np.ndarray:
    comps = [population * f for f in SEIRHD_INIT_FRACTIONS]
    susceptible = population - sum(comps)
    return np.array([susceptible, *comps])


def _covid_arm(
    population: float,
    params: SeirhdParams,
    mandate_week: float,
    n_weeks: int = COVID_WEEKS,
) -> Trajectory:
    grid = TimeGrid(t0=0.0, dt=COVID_SOLVER_DT, n_steps=round((n_weeks - 1) / COVID_SOLVER_DT))
    schedule = TreatmentSchedule(kind="binary_policy", mandate_start=mandate_week)
    spec = ExpertOdeSpec(
        family="SEIRHD",
        params=params,
        init=seirhd_initial_state(population),
        treatment=schedule,
    )
    traj = simulate_expert(spec, grid)
    steps_per_week = round(1.0 / COVID_SOLVER_DT)
    weekly = traj.states[::steps_per_week]
    times = np.arange(n_weeks, dtype=float)
    # outcome: cumulative deaths per 1000 people
    y = weekly[:, 9] / population * 1000.0
    # covariate 1: hospital admissions during the preceding week (per 1000)
    inflow = np.array([hospital_inflow_rate(s, params) for s in traj.states])
    cum_inflow = np.concatenate(
        [[0.0], np.cumsum((inflow[1:] + inflow[:-1]) / 2 * COVID_SOLVER_DT)]
    )
    weekly_cum = cum_inflow[::steps_per_week]
    new_hosp = np.concatenate([[0.0], np.diff(weekly_cum)]) / population * 1000.0
    # covariate 2: symptomatic infectious (mild + severe, per 1000)
    symptomatic = (weekly[:, 4] + weekly[:, 5]) / population * 1000.0
    x = np.column_stack([new_hosp, symptomatic])
    a = (times >= mandate_week).astype(int)
    observed = np.ones(n_weeks, dtype=bool)
    return Trajectory(times=times, y=y, x=x, a=a, observed=observed, y_clean=y.copy())


def gen_covid_dataset(
    populations: list[tuple[str, float]] | None = None,
    seed: int = 0,
    n_weeks: int = COVID_WEEKS,
    initial_beta: float = 0.5,
) -> Dataset:
    """Simulate strict/relaxed mask-policy cities with the 10-state epidemic
    model; the counterfactual arm flips the mandate timing."""
    if populations is None:
        populations = synthetic_census(seed=seed)
    if not populations:
        raise ValueError("populations must be nonempty")
    for _, pop in populations:
        if pop <= 0:
            raise ValueError("populations must be positive")
    master = np.random.default_rng([seed, 0])
    n = len(populations)
    n_strict = (n + 1) // 2
    order = master.permutation(n)
    strict_ids = set(order[:n_strict])
    units = []
    for idx, (city, pop) in enumerate(populations):
        strict = idx in strict_ids
        if strict:
            params = SeirhdParams(beta=initial_beta, alpha=0.3, delta=0.15, N=pop)
            mandate_f, mandate_cf = STRICT_MANDATE_WEEK, RELAXED_MANDATE_WEEK
        else:
            params = SeirhdParams(beta=initial_beta, alpha=0.5, delta=0.1, N=pop)
            mandate_f, mandate_cf = RELAXED_MANDATE_WEEK, STRICT_MANDATE_WEEK
        factual = _covid_arm(pop, params, mandate_f, n_weeks)
        counterfactual = _covid_arm(pop, params, mandate_cf, n_weeks)
        units.append(
            UnitRecord(
                unit_id=city,
                meta={"population": pop, "alpha": params.alpha, "delta": params.delta},
                factual=factual,
                counterfactual=counterfactual,
                treatment_factual=TreatmentSchedule(
                    kind="binary_policy", mandate_start=mandate_f
                ),
                treatment_counterfactual=TreatmentSchedule(
                    kind="binary_policy", mandate_start=mandate_cf
                ),
                group="strict" if strict else "relaxed",
            )
        )
    config = {
        "kind": "covid",
        "n_weeks": n_weeks,
        "initial_beta": initial_beta,
        "n_cities": n,
    }
    return Dataset(units=units, schema_version=SCHEMA_VERSION, seed=seed, config=config)


def _dex_arm(
    init: np.ndarray,
    treated: bool,
    mixer: CovariateMixer,
    rng: np.random.Generator,
    sigma: float,
    n_days: int,
    drop_measurements: bool,
) -> tuple[Trajectory, TreatmentSchedule]:
    params = PkpdParams(full_model=True)
    doses = ((3.0, 1.0),) if treated else ()
    schedule = TreatmentSchedule(kind="dosing", doses=doses, k_d=5.0)
    grid = TimeGrid(t0=0.0, dt=DEX_SOLVER_DT, n_steps=round(n_days / DEX_SOLVER_DT))
    spec = ExpertOdeSpec(family="PKPD", params=params, init=init, treatment=schedule)
    traj = simulate_expert(spec, grid)
    steps_per_day = round(1.0 / DEX_SOLVER_DT)
    daily = traj.states[::steps_per_day].copy()
    times = np.arange(n_days + 1, dtype=float)
    # observed plasma level includes the dosing impulse contribution
    daily[:, 2] += np.array([dex_plasma(t, schedule, params.k_3) for t in times])
    a = np.array([1 if (treated and t >= 3.0) else 0 for t in times])
    y_clean = daily[:, 0].copy()
    y = y_clean + sigma * rng.standard_normal(times.size)
    x = np.stack([gen_covariates(daily[k], a[k], mixer) for k in range(times.size)])
    if drop_measurements:
        observed = irregular_mask(times.size, 0.5, rng)
    else:
        observed = np.ones(times.size, dtype=bool)
    return (
        Trajectory(times=times, y=y, x=x, a=a, observed=observed, y_clean=y_clean),
        schedule,
    )


def gen_dex_dataset(
    n_patients: int = 50,
    seed: int = 0,
    sigma: float = 0.01,
    n_days: int = DEX_DAYS,
    drop_measurements: bool = True,
) -> Dataset:
    """Simulate dexamethasone patients with the full 5-variable immune model.

    Treated patients receive a single unit dose at day 3; the counterfactual
    arm flips treatment assignment.
    """
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    master = np.random.default_rng([seed, 1])
    mixer = CovariateMixer.sample(d_x=1, n_latent=5, rng=master)
    treated_flags = np.zeros(n_patients, dtype=bool)
    treated_flags[master.permutation(n_patients)[: n_patients // 2]] = True
    units = []
    for i in range(n_patients):
        rng = unit_rng(seed, i)
        init = np.array(
            [
                rng.exponential(1 / 0.1),  # innate immune response
                rng.exponential(1 / 100.0),  # lung tissue drug level
                rng.exponential(1 / 100.0),  # plasma drug level
                rng.exponential(1 / 0.1),  # viral load
                rng.exponential(1 / 0.1),  # adaptive immunity
            ]
        )
        treated = bool(treated_flags[i])
        factual, sched_f = _dex_arm(init, treated, mixer, rng, sigma, n_days, drop_measurements)
        counterfactual, sched_cf = _dex_arm(
            init, not treated, mixer, rng, sigma, n_days, drop_measurements
        )
        units.append(
            UnitRecord(
                unit_id=f"patient_{i:03d}",
                meta={"init": [float(v) for v in init], "treated": treated},
                factual=factual,
                counterfactual=counterfactual,
                treatment_factual=sched_f,
                treatment_counterfactual=sched_cf,
                group="treated" if treated else "control",
            )
        )
    config = {
        "kind": "dex",
        "n_patients": n_patients,
        "sigma": sigma,
        "n_days": n_days,
        "drop_measurements": drop_measurements,
    }
    return Dataset(units=units, schema_version=SCHEMA_VERSION, seed=seed, config=config)


# -- persistence --------------------------------------------------------


def _write_arm_csv(path: Path, units: list[UnitRecord], arm: str) -> None:
    d_x = units[0].factual.d_x
    header = ["unit_id", "t", "y"] + [f"x_{j+1}" for j in range(d_x)] + ["a", "observed_flag"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for unit in units:
            traj: Trajectory = getattr(unit, arm)
            for k in range(traj.horizon):
                row = [unit.unit_id, repr(float(traj.times[k])), repr(float(traj.y[k]))]
                row += [repr(float(v)) for v in traj.x[k]]
                row += [int(traj.a[k]), int(traj.observed[k])]
                writer.writerow(row)


def write_dataset(dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_arm_csv(out / "factual.csv", dataset.units, "factual")
    _write_arm_csv(out / "counterfactual.csv", dataset.units, "counterfactual")
    manifest = {
        "schema_version": dataset.schema_version,
        "seed": dataset.seed,
        "config": dataset.config,
        "units": {
            u.unit_id: {
                "group": u.group,
                "meta": u.meta,
                "treatment_factual": _schedule_to_dict(u.treatment_factual),
                "treatment_counterfactual": _schedule_to_dict(u.treatment_counterfactual),
            }
            for u in dataset.units
        },
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)


def _schedule_to_dict(s: TreatmentSchedule) -> dict:
    return {
        "kind": s.kind,
        "mandate_start": s.mandate_start,
        "doses": [[t, d] for t, d in s.doses],
        "k_d": s.k_d,
    }


def _schedule_from_dict(d: dict) -> TreatmentSchedule:
    return TreatmentSchedule(
        kind=d["kind"],
        mandate_start=d["mandate_start"],
        doses=tuple((float(t), float(v)) for t, v in d["doses"]),
        k_d=d["k_d"],
    )


def _read_arm_csv(path: Path) -> dict[str, Trajectory]:
    rows_by_unit: dict[str, list[list[str]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d_x = sum(1 for h in header if h.startswith("x_"))
        for row in reader:
            rows_by_unit.setdefault(row[0], []).append(row)
    out = {}
    for unit_id, rows in rows_by_unit.items():
        times = np.array([float(r[1]) for r in rows])
        y = np.array([float(r[2]) for r in rows])
        x = np.array([[float(v) for v in r[3 : 3 + d_x]] for r in rows])
        a = np.array([int(r[3 + d_x]) for r in rows])
        observed = np.array([bool(int(r[4 + d_x])) for r in rows])
        out[unit_id] = Trajectory(times=times, y=y, x=x, a=a, observed=observed)
    return out


def read_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        manifest = json.load(fh)
    factual = _read_arm_csv(src / "factual.csv")
    counterfactual = _read_arm_csv(src / "counterfactual.csv")
    units = []
    for unit_id, info in manifest["units"].items():
        units.append(
            UnitRecord(
                unit_id=unit_id,
                meta=info["meta"],
                factual=factual[unit_id],
                counterfactual=counterfactual[unit_id],
                treatment_factual=_schedule_from_dict(info["treatment_factual"]),
                treatment_counterfactual=_schedule_from_dict(info["treatment_counterfactual"]),
                group=info["group"],
            )
        )
    return Dataset(
        units=units,
        schema_version=manifest["schema_version"],
        seed=manifest["seed"],
        config=manifest["config"],
    )
