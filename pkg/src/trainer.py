"""
Training loop for the autoencoder.

Glorot-uniform initialization, Adam with bias correction, shuffled
minibatches over the full cohort, one fresh reparameterization draw per
sample per step, and a per-epoch loss history. Training is a pure function
of (cohort, config): all randomness flows from config.seed.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .datagen import DEFAULT_AGE_CAP, Cohort, encode_cohort
from .exceptions import (
    ArtifactParseError,
    EmptyCohortError,
    NumericError,
    ShapeMismatchError,
    ValidationError,
)
from .logger import get_logger, log_struct
from .output_handler import atomic_write_text, frame_to_csv
from .vae_core import DEFAULT_HIDDEN_DIM, LayerParams, VaeParams, loss_and_gradients

HISTORY_COLUMNS = ["epoch", "total", "kl", "recon"]

# shuffles and eps come from default_rng([seed, 1]); init_params uses default_rng(seed)
_TRAIN_STREAM = 1


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    epochs: int = 1000
    batch_size: int = 100
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    latent_dim: int = 3
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    shuffle_each_epoch: bool = True
    reproducible: bool = True
    samples_per_datum: int = 1
    age_cap: float = DEFAULT_AGE_CAP
    log_every: int = 10

    def validate(self, cohort_size: Optional[int] = None) -> None:
        """Check hyperparameter ranges.

        Args:
            cohort_size: When given, batch_size must not exceed it

        Raises:
            ValidationError: If any value is out of range
        """
        checks = [
            (self.epochs >= 1, f"epochs must be at least 1, got {self.epochs}"),
            (self.batch_size >= 1, f"batch_size must be at least 1, got {self.batch_size}"),
            (self.learning_rate > 0, f"learning_rate must be positive, got {self.learning_rate}"),
            (0 <= self.adam_beta1 < 1, f"adam_beta1 must lie in [0, 1), got {self.adam_beta1}"),
            (0 <= self.adam_beta2 < 1, f"adam_beta2 must lie in [0, 1), got {self.adam_beta2}"),
            (self.adam_eps > 0, f"adam_eps must be positive, got {self.adam_eps}"),
            (self.latent_dim >= 1, f"latent_dim must be at least 1, got {self.latent_dim}"),
            (self.hidden_dim >= 1, f"hidden_dim must be at least 1, got {self.hidden_dim}"),
            (self.samples_per_datum >= 1,
             f"samples_per_datum must be at least 1, got {self.samples_per_datum}"),
            (self.age_cap > 0, f"age_cap must be positive, got {self.age_cap}"),
            (self.log_every >= 1, f"log_every must be at least 1, got {self.log_every}"),
        ]
        if cohort_size is not None:
            checks.append((
                self.batch_size <= cohort_size,
                f"batch_size {self.batch_size} exceeds cohort size {cohort_size}",
            ))
        for ok, message in checks:
            if not ok:
                raise ValidationError(message)


@dataclass(frozen=True)
class HistoryEntry:
    epoch: int
    total: float
    kl: float
    recon: float


@dataclass
class LossHistory:
    """Per-epoch mean losses, epochs numbered from 1."""

    per_epoch: List[HistoryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.per_epoch)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(entry, name) for entry in self.per_epoch])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.epoch, e.total, e.kl, e.recon) for e in self.per_epoch],
            columns=HISTORY_COLUMNS,
        )

    @property
    def final(self) -> HistoryEntry:
        return self.per_epoch[-1]


@dataclass
class AdamState:
    """First/second moment accumulators shaped like the parameters."""

    m: VaeParams
    v: VaeParams

    @classmethod
    def zeros_like(cls, params: VaeParams) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like())


@dataclass
class TrainResult:
    params: VaeParams
    history: LossHistory


def init_params(
    latent_dim: int,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    seed: int = 0,
) -> VaeParams:
    """Glorot-uniform weights, a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    shapes = VaeParams.zeros(latent_dim, hidden_dim).expected_shapes()
    layers = {}
    for name, (fan_out, fan_in) in shapes.items():
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        layers[name] = LayerParams(
            rng.uniform(-bound, bound, size=(fan_out, fan_in)),
            np.zeros(fan_out),
        )
    return VaeParams(**layers, latent_dim=latent_dim, hidden_dim=hidden_dim)


def adam_step(
    params: VaeParams,
    grads: VaeParams,
    state: AdamState,
    config: TrainConfig,
    step_index: int,
) -> Tuple[VaeParams, AdamState]:
    """One Adam update with bias correction.

    Returns new parameter and state objects; the inputs are left untouched.

    Raises:
        ShapeMismatchError: If grads or state do not match params
        ValidationError: If step_index < 1
    """
    if step_index < 1:
        raise ValidationError(f"step_index must be at least 1, got {step_index}")

    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    m_arrays = state.m.arrays()
    v_arrays = state.v.arrays()
    for key, value in p_arrays.items():
        for other_name, other in (("grads", g_arrays), ("m", m_arrays), ("v", v_arrays)):
            if key not in other or other[key].shape != value.shape:
                raise ShapeMismatchError(
                    f"{other_name} entry {key} does not match parameter shape {value.shape}",
                    context={"entry": key},
                )

    beta1, beta2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - beta1 ** step_index
    bc2 = 1.0 - beta2 ** step_index
    step_size = config.learning_rate / bc1

    new_p, new_m, new_v = {}, {}, {}
    for key, value in p_arrays.items():
        g = g_arrays[key]
        m = beta1 * m_arrays[key] + (1.0 - beta1) * g
        v = beta2 * v_arrays[key] + (1.0 - beta2) * (g * g)
        new_p[key] = value - step_size * m / (np.sqrt(v / bc2) + config.adam_eps)
        new_m[key] = m
        new_v[key] = v

    dims = (params.latent_dim, params.hidden_dim)
    return (
        VaeParams.from_arrays(new_p, *dims),
        AdamState(m=VaeParams.from_arrays(new_m, *dims), v=VaeParams.from_arrays(new_v, *dims)),
    )


def train(
    cohort: Cohort,
    config: TrainConfig,
    logger: Optional[logging.Logger] = None,
) -> TrainResult:
    """Fit the autoencoder on every record of the cohort.

    Raises:
        EmptyCohortError: If the cohort has no records
        ValidationError: If the config is out of range
        NumericError: If a batch loss is not finite (names epoch and batch)
    """
    logger = logger or get_logger()
    if len(cohort) == 0:
        raise EmptyCohortError("Cannot train on an empty cohort")
    config.validate(cohort_size=len(cohort))

    features = encode_cohort(cohort, config.age_cap)
    n = features.shape[0]
    params = init_params(config.latent_dim, config.hidden_dim, config.seed)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng([config.seed, _TRAIN_STREAM])
    reps = config.samples_per_datum

    labels = {"stage": "train", "latent_dim": config.latent_dim}
    log_struct(
        logger,
        "INFO",
        f"Training on {n} records for {config.epochs} epochs",
        labels=labels,
        fields={
            "batch_size": config.batch_size,
            "learning_rate": config.learning_rate,
            "hidden_dim": config.hidden_dim,
            "seed": config.seed,
        },
    )

    history = LossHistory()
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle_each_epoch else np.arange(n)
        sums = np.zeros(3)
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start:start + config.batch_size]
            batch = np.tile(features[rows], (reps, 1))
            eps = rng.standard_normal((batch.shape[0], config.latent_dim))

            breakdown, grads = loss_and_gradients(
                params, batch, eps, reproducible=config.reproducible
            )
            if not math.isfinite(breakdown.total):
                raise NumericError(
                    f"Non-finite loss at epoch {epoch}, batch {batch_index}",
                    context={"epoch": epoch, "batch": batch_index},
                )

            step += 1
            params, state = adam_step(params, grads, state, config, step)
            sums += len(rows) * np.array([breakdown.total, breakdown.kl, breakdown.recon])

        total, kl, recon = (sums / n).tolist()
        history.per_epoch.append(HistoryEntry(epoch, total, kl, recon))

        level = "INFO" if epoch % config.log_every == 0 or epoch == config.epochs else "DEBUG"
        log_struct(
            logger,
            level,
            f"epoch {epoch}/{config.epochs} total={total:.6f} kl={kl:.6f} recon={recon:.6f}",
            labels=labels,
            fields={"epoch": epoch, "total": total, "kl": kl, "recon": recon},
        )

    return TrainResult(params=params, history=history)


def compare_latent_dims(
    cohort: Cohort,
    base_config: TrainConfig,
    dims: Sequence[int] = (2, 3, 4),
    logger: Optional[logging.Logger] = None,
) -> Dict[int, TrainResult]:
    """Train one model per latent dimension with otherwise identical config."""
    if not dims:
        raise ValidationError("dims must name at least one latent dimension")
    results = {}
    for latent_dim in dims:
        config = replace(base_config, latent_dim=int(latent_dim))
        results[int(latent_dim)] = train(cohort, config, logger=logger)
    return results


def plateau_epoch(history: LossHistory, rel_tol: float = 0.01) -> int:
    """First epoch whose total loss is within rel_tol of the final total."""
    totals = history.column("total")
    final = totals[-1]
    within = np.abs(totals - final) <= rel_tol * abs(final)
    return int(history.per_epoch[int(np.argmax(within))].epoch)


def summarize_comparison(
    histories: Dict[int, LossHistory],
) -> Tuple[pd.DataFrame, List[str]]:
    """Tabulate final/min losses per latent dimension and name the 'best' under two readings.

    With more than one dimension, a last observation reports whether the
    largest latent dimension reconstructs at least as well as the smallest.

    Returns:
        (frame with latent_dim, final_total, final_kl, final_recon, min_total,
        plateau_epoch; observation strings)
    """
    rows = []
    for latent_dim in sorted(histories):
        history = histories[latent_dim]
        rows.append({
            "latent_dim": latent_dim,
            "final_total": history.final.total,
            "final_kl": history.final.kl,
            "final_recon": history.final.recon,
            "min_total": float(history.column("total").min()),
            "plateau_epoch": plateau_epoch(history),
        })
    frame = pd.DataFrame(rows)
    if frame.empty:
        return frame, []

    by_loss = frame.loc[frame["final_total"].idxmin()]
    by_speed = frame.loc[frame["plateau_epoch"].idxmin()]
    observations = [
        f"lowest final total loss: J={int(by_loss['latent_dim'])} "
        f"({by_loss['final_total']:.6f})",
        f"earliest plateau (within 1% of final): J={int(by_speed['latent_dim'])} "
        f"(epoch {int(by_speed['plateau_epoch'])})",
    ]
    if len(frame) > 1:
        smallest, largest = frame.iloc[0], frame.iloc[-1]
        holds = largest["final_recon"] <= smallest["final_recon"]
        observations.append(
            f"capacity ordering recon(J={int(largest['latent_dim'])}) <= "
            f"recon(J={int(smallest['latent_dim'])}): {'holds' if holds else 'does not hold'} "
            f"({largest['final_recon']:.6f} vs {smallest['final_recon']:.6f})"
        )
    return frame, observations


def history_to_csv(history: LossHistory) -> str:
    return frame_to_csv(history.to_frame())


def write_history(path: Union[str, Path], history: LossHistory) -> Path:
    return atomic_write_text(Path(path), history_to_csv(history))


def read_history(path: Union[str, Path]) -> LossHistory:
    """Read a loss history CSV (epoch,total,kl,recon).

    Raises:
        ArtifactParseError: On a wrong header or non-numeric values
    """
    path = Path(path)
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != HISTORY_COLUMNS:
        raise ArtifactParseError(
            f"Expected header {','.join(HISTORY_COLUMNS)} in {path}",
            context={"path": str(path), "header": list(frame.columns)},
        )
    try:
        entries = [
            HistoryEntry(int(row.epoch), float(row.total), float(row.kl), float(row.recon))
            for row in frame.itertuples(index=False)
        ]
    except (TypeError, ValueError) as exc:
        raise ArtifactParseError(f"Malformed history {path}: {exc}", context={"path": str(path)})
    return LossHistory(per_epoch=entries)
