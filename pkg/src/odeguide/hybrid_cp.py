"""Hybrid counterfactual predictor: learned latent ODEs for outcome and
covariate channels co-evolving with a mechanistic expert state, learned
initial-state encoders, and learned readouts.

Training backpropagates through the fixed-step RK4 rollout; inference runs
the same code on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diff_engine as de
from .datagen import Dataset, Trajectory
from .diff_engine import MlpSpec, ParamSet, Tensor
from .expert_models import (
    PkpdParams,
    SeirmParams,
    TreatmentSchedule,
    beta_schedule,
    dex_plasma,
    pkpd_terms,
    seirm_terms,
)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class HybridCpConfig:
    m_y: int = 8
    m_x: int = 8
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    n_substeps: int = 1  # RK4 substeps per data-grid interval
    lr: float = 0.01
    epochs: int = 50
    decay_lambda: float = 0.005


@dataclass
class HybridCpModel:
    family: str  # "SEIRM" | "PKPD"
    expert_params: SeirmParams | PkpdParams
    d_x: int
    config: HybridCpConfig
    specs: dict[str, MlpSpec] = field(default_factory=dict)
    params: ParamSet | None = None

    @property
    def e_dim(self) -> int:
        if self.family == "SEIRM":
            return 5
        return self.expert_params.dim


def make_hybrid_model(
    family: str,
    expert_params,
    d_x: int,
    config: HybridCpConfig = HybridCpConfig(),
    seed: int = 0,
) -> HybridCpModel:
    if family not in ("SEIRM", "PKPD"):
        raise ValueError(f"unsupported expert family {family!r}")
    model = HybridCpModel(family=family, expert_params=expert_params, d_x=d_x, config=config)
    e = model.e_dim
    my, mx, h, act = config.m_y, config.m_x, config.hidden, config.activation
    model.specs = {
        "fy": MlpSpec.make(my + e + mx + 1, my, h, act),
        "fx": MlpSpec.make(mx + my + 1, mx, h, act),
        "gxi": MlpSpec.make(d_x + 2, mx, h, act),
        "gzeta": MlpSpec.make(mx + 2, my, h, act),
        "geta": MlpSpec.make(d_x + 2, e, h, act),
        "gy": MlpSpec.make(e + my + mx + 1, 1, h, act),
        "gx": MlpSpec.make(mx + 1, d_x, h, act),
    }
    rng = np.random.default_rng([seed, 7])
    arrays: dict[str, np.ndarray] = {}
    for name, spec in model.specs.items():
        arrays.update(de.init_mlp_params(spec, rng, prefix=f"{name}_"))
    model.params = ParamSet(arrays)
    return model


def _cat(parts):
    if any(isinstance(p, Tensor) for p in parts):
        return de.concat(parts)
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in parts])


def normalize_expert_state(raw, family: str, expert_params):
    """Map an unconstrained encoder output onto the family's state space:
    positivity via softplus, plus a total-population rescale for SEIRM."""
    pos = de.softplus(raw)
    if family == "SEIRM":
        return pos * (expert_params.N / pos.sum())
    return pos


def encode_init(model: HybridCpModel, params, x0, a0: float, y0: float):
    """Initial latent states (z_x, z_y, z_e) from the first observation."""
    obs = np.concatenate([np.atleast_1d(np.asarray(x0, float)), [a0], [y0]])
    zx0 = de.mlp_apply(model.specs["gxi"], params, obs, prefix="gxi_")
    zy0 = de.mlp_apply(model.specs["gzeta"], params, _cat([zx0, a0, y0]), prefix="gzeta_")
    ze_raw = de.mlp_apply(model.specs["geta"], params, obs, prefix="geta_")
    ze0 = normalize_expert_state(ze_raw, model.family, model.expert_params)
    return zx0, zy0, ze0


def expert_derivative(model: HybridCpModel, ze, t: float, treatment: TreatmentSchedule):
    """Mechanistic derivative of the expert state; never learned."""
    p = model.expert_params
    if model.family == "SEIRM":
        bt = beta_schedule(t, p.beta, model.config.decay_lambda, treatment.mandate_start)
        terms = seirm_terms(ze[0], ze[1], ze[2], ze[3], ze[4], p, bt)
    else:
        z3_t = dex_plasma(t, treatment, p.k_3)
        terms = pkpd_terms([ze[k] for k in range(p.dim)], p, z3_t)
    return _cat(terms)


def hybrid_rhs(model: HybridCpModel, params, zy, zx, ze, zy_lag, a_t: float, t: float, treatment):
    """Coupled derivative of (z_y, z_x, z_e); the covariate channel sees the
    outcome latent through a one-grid-step delay buffer."""
    dzy = de.mlp_apply(model.specs["fy"], params, _cat([zy, ze, zx, a_t]), prefix="fy_")
    dzx = de.mlp_apply(model.specs["fx"], params, _cat([zx, zy_lag, a_t]), prefix="fx_")
    dze = expert_derivative(model, ze, t, treatment)
    return dzy, dzx, dze


def readout(model: HybridCpModel, params, zy, zx, ze, a_t: float):
    y = de.mlp_apply(model.specs["gy"], params, _cat([ze, zy, zx, a_t]), prefix="gy_")
    x = de.mlp_apply(model.specs["gx"], params, _cat([zx, a_t]), prefix="gx_")
    return y[0], x


def _rk4_joint(model, params, zy, zx, ze, zy_lag, a_t, t, dt, treatment):
    k1 = hybrid_rhs(model, params, zy, zx, ze, zy_lag, a_t, t, treatment)
    k2 = hybrid_rhs(
        model,
        params,
        zy + 0.5 * dt * k1[0],
        zx + 0.5 * dt * k1[1],
        ze + 0.5 * dt * k1[2],
        zy_lag,
        a_t,
        t + 0.5 * dt,
        treatment,
    )
    k3 = hybrid_rhs(
        model,
        params,
        zy + 0.5 * dt * k2[0],
        zx + 0.5 * dt * k2[1],
        ze + 0.5 * dt * k2[2],
        zy_lag,
        a_t,
        t + 0.5 * dt,
        treatment,
    )
    k4 = hybrid_rhs(
        model,
        params,
        zy + dt * k3[0],
        zx + dt * k3[1],
        ze + dt * k3[2],
        zy_lag,
        a_t,
        t + dt,
        treatment,
    )
    sixth = dt / 6.0
    zy = zy + sixth * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    zx = zx + sixth * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    ze = ze + sixth * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return zy, zx, ze


def rollout(
    model: HybridCpModel,
    params,
    x0,
    a0: float,
    y0: float,
    a_seq: np.ndarray,
    times: np.ndarray,
    treatment: TreatmentSchedule,
):
    """Encode, integrate, and read out at every grid point.

    Returns (ys, xs, zes): per-point outcome scalars, covariate vectors, and
    expert states (tensors during training, arrays during inference).
    """
    if len(a_seq) != len(times):
        raise ValueError("treatment sequence must cover the grid")
    zx, zy, ze = encode_init(model, params, x0, a0, y0)
    y_out, x_out = readout(model, params, zy, zx, ze, float(a_seq[0]))
    ys, xs, zes = [y_out], [x_out], [ze]
    zy_lag = zy
    n_sub = model.config.n_substeps
    for k in range(len(times) - 1):
        zy_start = zy
        dt = (times[k + 1] - times[k]) / n_sub
        a_t = float(a_seq[k])
        for s in range(n_sub):
            t = times[k] + s * dt
            zy, zx, ze = _rk4_joint(model, params, zy, zx, ze, zy_lag, a_t, t, dt, treatment)
        zy_lag = zy_start
        y_out, x_out = readout(model, params, zy, zx, ze, float(a_seq[k + 1]))
        ys.append(y_out)
        xs.append(x_out)
        zes.append(ze)
    return ys, xs, zes


def predict(
    model: HybridCpModel,
    x0,
    a0: float,
    y0: float,
    a_seq: np.ndarray,
    times: np.ndarray,
    treatment: TreatmentSchedule,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic point prediction (y, x) over the grid."""
    ys, xs, _ = rollout(
        model, dict(model.params.items()), x0, a0, y0, a_seq, np.asarray(times, float), treatment
    )
    y = np.array([float(v) for v in ys])
    x = np.stack([np.asarray(v, float) for v in xs])
    return y, x


def predict_unit(model: HybridCpModel, traj: Trajectory, treatment: TreatmentSchedule):
    return predict(
        model, traj.x[0], float(traj.a[0]), float(traj.y[0]), traj.a, traj.times, treatment
    )


def _dataset_loss(model: HybridCpModel, tensors, units):
    y_terms = []
    x_terms = []
    n_y = 0
    n_x = 0
    for unit in units:
        traj = unit.factual
        ys, xs, _ = rollout(
            model,
            tensors,
            traj.x[0],
            float(traj.a[0]),
            float(traj.y[0]),
            traj.a,
            traj.times,
            unit.treatment_factual,
        )
        for k in range(traj.horizon):
            if not traj.observed[k]:
                continue
            y_terms.append((ys[k] - float(traj.y[k])) ** 2)
            diff = xs[k] - traj.x[k]
            x_terms.append((diff * diff).sum())
            n_y += 1
            n_x += traj.d_x
    total = sum(y_terms[1:], y_terms[0]) * (1.0 / n_y)
    total = total + sum(x_terms[1:], x_terms[0]) * (1.0 / n_x)
    return total


def train_hybrid(
    model: HybridCpModel, dataset: Dataset, config: HybridCpConfig | None = None
) -> tuple[HybridCpModel, list[float]]:
    """Fit the learned components to factual arms by MSE on observed points.

    The mechanistic expert parameters are never touched.
    """
    if not dataset.units:
        raise ValueError("dataset must be nonempty")
    if config is None:
        config = model.config
    params = model.params
    state = de.AdamState()
    losses: list[float] = []

    def loss_fn(tensors):
        return _dataset_loss(model, tensors, dataset.units)

    for epoch in range(config.epochs):
        record = de.value_and_grad(loss_fn, params)
        if not np.isfinite(record.loss):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        losses.append(record.loss)
        params, state = de.adam_step(params, record.gradient, state, config.lr)
    final = float(de.value_and_grad(loss_fn, params).loss)
    losses.append(final)
    trained = replace(model)
    trained.params = params
    return trained, losses
