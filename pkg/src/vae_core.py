"""
Fixed-architecture variational autoencoder in numpy.

Architecture: 6 -> hidden (ReLU) -> [mu ; log_var] (linear, 2J) for the
encoder, J -> hidden (ReLU) -> 6 (sigmoid) for the decoder.

The loss per datum is the negative evidence lower bound

    total = KL(q(z|x) || N(0, I)) + BCE(x, decode(mu + sigma * eps))

with the closed-form Gaussian KL -1/2 sum_j (1 + log_var_j - mu_j^2 - exp(log_var_j))
and a per-dimension Bernoulli cross-entropy reconstruction term. Every
function accepts one sample (1-D) or a batch (2-D, one row per sample);
batch losses and gradients are means over rows. All arithmetic is float64.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from .exceptions import ArtifactParseError, NumericError, ShapeMismatchError
from .output_handler import atomic_write_text

INPUT_DIM = 6
DEFAULT_HIDDEN_DIM = 512
LOG_VAR_CLAMP = 20.0
XHAT_CLAMP = 1e-7

LAYER_NAMES = ("enc_hidden", "enc_head", "dec_hidden", "dec_out")


@dataclass(eq=False)
class LayerParams:
    """Affine layer: weights (out_dim x in_dim) and bias (out_dim)."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.weights.shape

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy())


@dataclass(eq=False)
class VaeParams:
    """Weights and biases of the four affine layers.

    The same structure holds gradients and Adam moment accumulators.
    """

    enc_hidden: LayerParams
    enc_head: LayerParams
    dec_hidden: LayerParams
    dec_out: LayerParams
    latent_dim: int
    hidden_dim: int = DEFAULT_HIDDEN_DIM

    def __post_init__(self):
        self.check_shapes()

    def expected_shapes(self) -> Dict[str, Tuple[int, int]]:
        j, h = self.latent_dim, self.hidden_dim
        return {
            "enc_hidden": (h, INPUT_DIM),
            "enc_head": (2 * j, h),
            "dec_hidden": (h, j),
            "dec_out": (INPUT_DIM, h),
        }

    def check_shapes(self) -> None:
        """Raise ShapeMismatchError unless every layer matches the declared dims."""
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise ShapeMismatchError(
                "latent_dim and hidden_dim must be at least 1",
                context={"latent_dim": self.latent_dim, "hidden_dim": self.hidden_dim},
            )
        for name, shape in self.expected_shapes().items():
            layer = getattr(self, name)
            if layer.weights.shape != shape or layer.bias.shape != (shape[0],):
                raise ShapeMismatchError(
                    f"Layer {name} has weights {layer.weights.shape} and bias "
                    f"{layer.bias.shape}, expected {shape} and ({shape[0]},)",
                    context={"layer": name},
                )

    def layers(self) -> Dict[str, LayerParams]:
        return {name: getattr(self, name) for name in LAYER_NAMES}

    def arrays(self) -> Dict[str, np.ndarray]:
        """Flat view: 'enc_hidden.weights' -> array, ... (no copies)."""
        flat = {}
        for name, layer in self.layers().items():
            flat[f"{name}.weights"] = layer.weights
            flat[f"{name}.bias"] = layer.bias
        return flat

    @classmethod
    def from_arrays(
        cls,
        arrays: Dict[str, np.ndarray],
        latent_dim: int,
        hidden_dim: int,
    ) -> "VaeParams":
        return cls(
            **{
                name: LayerParams(arrays[f"{name}.weights"], arrays[f"{name}.bias"])
                for name in LAYER_NAMES
            },
            latent_dim=latent_dim,
            hidden_dim=hidden_dim,
        )

    @classmethod
    def zeros(cls, latent_dim: int, hidden_dim: int = DEFAULT_HIDDEN_DIM) -> "VaeParams":
        shapes = {
            "enc_hidden": (hidden_dim, INPUT_DIM),
            "enc_head": (2 * latent_dim, hidden_dim),
            "dec_hidden": (hidden_dim, latent_dim),
            "dec_out": (INPUT_DIM, hidden_dim),
        }
        return cls(
            **{
                name: LayerParams(np.zeros(shape), np.zeros(shape[0]))
                for name, shape in shapes.items()
            },
            latent_dim=latent_dim,
            hidden_dim=hidden_dim,
        )

    def zeros_like(self) -> "VaeParams":
        return VaeParams.zeros(self.latent_dim, self.hidden_dim)

    def copy(self) -> "VaeParams":
        return VaeParams(
            **{name: layer.copy() for name, layer in self.layers().items()},
            latent_dim=self.latent_dim,
            hidden_dim=self.hidden_dim,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays().values())

    def norm(self) -> float:
        """Euclidean norm over every entry (used for gradient magnitudes)."""
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays().values())))


@dataclass(eq=False)
class PosteriorParams:
    """Approximate posterior q(z|x) = N(mu, diag(exp(log_var)))."""

    mu: np.ndarray
    log_var: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    """Negative ELBO split into its two terms (minimization convention)."""

    total: float
    kl: float
    recon: float


def _check_params(params: VaeParams) -> None:
    if not params.is_finite():
        raise NumericError(
            "Parameters contain NaN or infinite values",
            context={"latent_dim": params.latent_dim, "hidden_dim": params.hidden_dim},
        )


def _as_batch(values: Any, width: int, what: str) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(values, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ShapeMismatchError(
            f"{what} must have trailing dimension {width}, got shape {np.shape(values)}",
            context={"what": what},
        )
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains NaN or infinite values")
    return arr, single


def _unbatch(arr: np.ndarray, single: bool) -> np.ndarray:
    return arr[0] if single else arr


def _relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def _affine(layer: LayerParams, inputs: np.ndarray) -> np.ndarray:
    return inputs @ layer.weights.T + layer.bias


def encode(params: VaeParams, x: Any) -> PosteriorParams:
    """Map features to posterior parameters.

    h = relu(W1 x + b1); [mu ; log_var] = W2 h + b2, log_var clamped to [-20, 20].

    Raises:
        NumericError: On non-finite parameters or inputs
    """
    _check_params(params)
    batch, single = _as_batch(x, INPUT_DIM, "x")
    head = _affine(params.enc_head, _relu(_affine(params.enc_hidden, batch)))
    j = params.latent_dim
    mu = head[:, :j]
    log_var = np.clip(head[:, j:], -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
    return PosteriorParams(_unbatch(mu, single), _unbatch(log_var, single))


def reparameterize(post: PosteriorParams, eps: Any) -> np.ndarray:
    """z = mu + exp(log_var / 2) * eps, with eps supplied by the caller."""
    eps = np.asarray(eps, dtype=float)
    if eps.shape != np.shape(post.mu):
        raise ShapeMismatchError(
            f"eps shape {eps.shape} does not match posterior shape {np.shape(post.mu)}"
        )
    return post.mu + np.exp(post.log_var / 2.0) * eps


def decode(params: VaeParams, z: Any) -> np.ndarray:
    """xhat = sigmoid(W4 relu(W3 z + b3) + b4), strictly inside (0, 1) before clamping.

    Raises:
        NumericError: On non-finite parameters or latents
    """
    _check_params(params)
    batch, single = _as_batch(z, params.latent_dim, "z")
    logits = _affine(params.dec_out, _relu(_affine(params.dec_hidden, batch)))
    return _unbatch(expit(logits), single)


def kl_term(post: PosteriorParams) -> Union[float, np.ndarray]:
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over latent dimensions.

    1 + log_var - exp(log_var) is evaluated as log_var - expm1(log_var), which
    keeps the sign exact near log_var = 0.
    """
    mu = np.asarray(post.mu, dtype=float)
    log_var = np.asarray(post.log_var, dtype=float)
    kl = -0.5 * np.sum(log_var - np.expm1(log_var) - mu * mu, axis=-1)
    return float(kl) if np.ndim(kl) == 0 else kl


def recon_term(x: Any, xhat: Any) -> Union[float, np.ndarray]:
    """Bernoulli cross-entropy summed over the 6 feature dimensions.

    xhat is clamped to [1e-7, 1 - 1e-7] so the logs stay finite.
    """
    x = np.asarray(x, dtype=float)
    clamped = np.clip(np.asarray(xhat, dtype=float), XHAT_CLAMP, 1.0 - XHAT_CLAMP)
    ce = -np.sum(x * np.log(clamped) + (1.0 - x) * np.log1p(-clamped), axis=-1)
    return float(ce) if np.ndim(ce) == 0 else ce


def _forward(params: VaeParams, x: Any, eps: Any) -> Dict[str, np.ndarray]:
    _check_params(params)
    batch, _ = _as_batch(x, INPUT_DIM, "x")
    eps_batch, _ = _as_batch(eps, params.latent_dim, "eps")
    if eps_batch.shape[0] != batch.shape[0]:
        raise ShapeMismatchError(
            f"eps has {eps_batch.shape[0]} rows for {batch.shape[0]} inputs"
        )

    j = params.latent_dim
    a1 = _affine(params.enc_hidden, batch)
    h1 = _relu(a1)
    head = _affine(params.enc_head, h1)
    mu = head[:, :j]
    log_var_raw = head[:, j:]
    log_var = np.clip(log_var_raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
    sigma = np.exp(log_var / 2.0)
    z = mu + sigma * eps_batch
    a3 = _affine(params.dec_hidden, z)
    h3 = _relu(a3)
    xhat = expit(_affine(params.dec_out, h3))

    return {
        "x": batch,
        "eps": eps_batch,
        "a1": a1,
        "h1": h1,
        "mu": mu,
        "log_var_raw": log_var_raw,
        "log_var": log_var,
        "sigma": sigma,
        "z": z,
        "a3": a3,
        "h3": h3,
        "xhat": xhat,
    }


def _breakdown(cache: Dict[str, np.ndarray]) -> LossBreakdown:
    kl = float(np.mean(kl_term(PosteriorParams(cache["mu"], cache["log_var"]))))
    recon = float(np.mean(recon_term(cache["x"], cache["xhat"])))
    return LossBreakdown(total=kl + recon, kl=kl, recon=recon)


def loss(params: VaeParams, x: Any, eps: Any) -> LossBreakdown:
    """Negative ELBO for one sample, or its mean over the rows of a batch.

    One reparameterized draw per row; pass repeated rows of x with distinct
    eps rows to average over several draws.
    """
    return _breakdown(_forward(params, x, eps))


def _tree_sum(stack: np.ndarray) -> np.ndarray:
    """Sum along axis 0 by fixed pairwise halving (order independent of BLAS)."""
    while stack.shape[0] > 1:
        half = stack.shape[0] // 2
        paired = stack[0:2 * half:2] + stack[1:2 * half:2]
        if stack.shape[0] % 2:
            paired = np.concatenate([paired, stack[-1:]], axis=0)
        stack = paired
    return stack[0]


def _outer_sum(delta: np.ndarray, act: np.ndarray, reproducible: bool) -> np.ndarray:
    if reproducible:
        return _tree_sum(np.einsum("ni,nj->nij", delta, act))
    return delta.T @ act


def _row_sum(delta: np.ndarray, reproducible: bool) -> np.ndarray:
    return _tree_sum(delta) if reproducible else delta.sum(axis=0)


def _backward(
    params: VaeParams,
    cache: Dict[str, np.ndarray],
    include_kl: bool,
    reproducible: bool,
) -> VaeParams:
    n = cache["x"].shape[0]
    xhat = cache["xhat"]

    # BCE through the sigmoid; zero where the clamp is active
    inside = (xhat > XHAT_CLAMP) & (xhat < 1.0 - XHAT_CLAMP)
    d_logits = (xhat - cache["x"]) * inside / n

    d_h3 = d_logits @ params.dec_out.weights
    d_a3 = d_h3 * (cache["a3"] > 0)
    d_z = d_a3 @ params.dec_hidden.weights

    d_mu = d_z.copy()
    d_log_var = d_z * cache["eps"] * cache["sigma"] * 0.5
    if include_kl:
        d_mu += cache["mu"] / n
        d_log_var += 0.5 * np.expm1(cache["log_var"]) / n
    raw = cache["log_var_raw"]
    d_log_var *= (raw > -LOG_VAR_CLAMP) & (raw < LOG_VAR_CLAMP)

    d_head = np.concatenate([d_mu, d_log_var], axis=1)
    d_h1 = d_head @ params.enc_head.weights
    d_a1 = d_h1 * (cache["a1"] > 0)

    grads = VaeParams(
        enc_hidden=LayerParams(
            _outer_sum(d_a1, cache["x"], reproducible), _row_sum(d_a1, reproducible)
        ),
        enc_head=LayerParams(
            _outer_sum(d_head, cache["h1"], reproducible), _row_sum(d_head, reproducible)
        ),
        dec_hidden=LayerParams(
            _outer_sum(d_a3, cache["z"], reproducible), _row_sum(d_a3, reproducible)
        ),
        dec_out=LayerParams(
            _outer_sum(d_logits, cache["h3"], reproducible),
            _row_sum(d_logits, reproducible),
        ),
        latent_dim=params.latent_dim,
        hidden_dim=params.hidden_dim,
    )
    if not grads.is_finite():
        raise NumericError("Gradient contains NaN or infinite values")
    return grads


def loss_and_gradients(
    params: VaeParams,
    x: Any,
    eps: Any,
    include_kl: bool = True,
    reproducible: bool = True,
) -> Tuple[LossBreakdown, VaeParams]:
    """Loss breakdown plus reverse-mode gradients of the (mean) total loss.

    Args:
        params: Current parameters
        x: One feature vector or an (N, 6) batch
        eps: Standard-normal draws matching the posterior shape
        include_kl: Drop the KL path when False (reconstruction-only gradients)
        reproducible: Reduce per-sample contributions with a fixed pairwise tree

    Returns:
        (loss, gradients shaped like params)
    """
    cache = _forward(params, x, eps)
    return _breakdown(cache), _backward(params, cache, include_kl, reproducible)


def loss_gradients(
    params: VaeParams,
    x: Any,
    eps: Any,
    include_kl: bool = True,
    reproducible: bool = True,
) -> VaeParams:
    """Pathwise gradients of the total loss w.r.t. every weight and bias."""
    return loss_and_gradients(params, x, eps, include_kl, reproducible)[1]


def reconstruct(params: VaeParams, x: Any) -> np.ndarray:
    """Decode the posterior mean (no sampling)."""
    return decode(params, encode(params, x).mu)


def params_to_dict(params: VaeParams, age_cap: Optional[float] = None) -> Dict[str, Any]:
    """JSON-ready weights document: dims header, encoding, row-major layers."""
    payload: Dict[str, Any] = {
        "dims": {
            "latent_dim": params.latent_dim,
            "hidden_dim": params.hidden_dim,
            "input_dim": INPUT_DIM,
        },
    }
    if age_cap is not None:
        payload["encoding"] = {"age_cap": float(age_cap)}
    payload["layers"] = {
        name: {"weights": layer.weights.tolist(), "bias": layer.bias.tolist()}
        for name, layer in params.layers().items()
    }
    return payload


def params_from_dict(payload: Dict[str, Any]) -> Tuple[VaeParams, Optional[float]]:
    """Rebuild parameters from params_to_dict output.

    Returns:
        (params, age_cap or None when the document has no encoding section)

    Raises:
        ArtifactParseError: On missing keys or a wrong input_dim
        ShapeMismatchError: On inconsistent layer shapes
        NumericError: On non-finite entries
    """
    try:
        dims = payload["dims"]
        if int(dims["input_dim"]) != INPUT_DIM:
            raise ArtifactParseError(
                f"Weights declare input_dim {dims['input_dim']}, expected {INPUT_DIM}"
            )
        layers = {
            name: LayerParams(
                np.asarray(payload["layers"][name]["weights"], dtype=float),
                np.asarray(payload["layers"][name]["bias"], dtype=float),
            )
            for name in LAYER_NAMES
        }
        age_cap = payload.get("encoding", {}).get("age_cap")
        params = VaeParams(
            **layers,
            latent_dim=int(dims["latent_dim"]),
            hidden_dim=int(dims["hidden_dim"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactParseError(
            f"Malformed weights document: {exc}",
            context={"original_error": type(exc).__name__},
        )
    _check_params(params)
    return params, (float(age_cap) if age_cap is not None else None)


def save_params(
    path: Union[str, Path],
    params: VaeParams,
    age_cap: Optional[float] = None,
) -> Path:
    return atomic_write_text(Path(path), params_to_json(params, age_cap))


def params_to_json(params: VaeParams, age_cap: Optional[float] = None) -> str:
    return json.dumps(params_to_dict(params, age_cap)) + "\n"


def load_params(path: Union[str, Path]) -> Tuple[VaeParams, Optional[float]]:
    """Load a weights JSON written by save_params."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArtifactParseError(
            f"Invalid weights JSON {path} at line {exc.lineno}: {exc.msg}",
            context={"path": str(path), "line": exc.lineno},
        )
    return params_from_dict(payload)
