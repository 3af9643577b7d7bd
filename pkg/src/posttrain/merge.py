"""Checkpoint merging: weighted averaging, SLERP, TIES and DARE-TIES.

Every kernel works tensor by tensor in float64 and casts back to the storage
dtype once (nearest-even). Reductions across models run in input order, so
results do not depend on threading.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensorstore import Checkpoint, Tensor, encode, validate_compatible

METHODS = ("linear", "slerp", "ties", "dare_ties")
SLERP_EPS = 1e-6


class RecipeError(ValueError):
    pass


def _f64(t: Tensor) -> np.ndarray:
    return t.to_float32().astype(np.float64).ravel()


def _rebuild(like: Tensor, values: np.ndarray) -> Tensor:
    return Tensor(like.dtype, like.shape, encode(values.reshape(like.shape), like.dtype))


def _map_tensors(ckpts: Sequence[Checkpoint], fn: Callable[[str, list[np.ndarray]], np.ndarray], **prov) -> Checkpoint:
    validate_compatible(ckpts)
    ref = ckpts[0]
    out = {}
    for name in ref.names():
        flat = [_f64(c.tensors[name]) for c in ckpts]
        out[name] = _rebuild(ref.tensors[name], fn(name, flat))
    return Checkpoint(out, {k: str(v) for k, v in prov.items()})


def normalized_weights(weights: Sequence[float]) -> np.ndarray:
    """w_i / sum(w), each correctly rounded from exact rational arithmetic.

    Scaling all weights by an exactly representable constant gives identical output.
    """
    weights = [float(w) for w in weights]
    if not weights:
        raise RecipeError("weights must be non-empty")
    if any(not math.isfinite(w) or w < 0 for w in weights):
        raise RecipeError(f"weights must be finite and non-negative, got {weights}")
    exact = [Fraction(w) for w in weights]
    total = sum(exact)
    if total == 0:
        raise RecipeError("weights sum to zero")
    return np.array([float(w / total) for w in exact], dtype=np.float64)


def linear_merge(ckpts: Sequence[Checkpoint], weights: Sequence[float]) -> Checkpoint:
    ckpts = list(ckpts)
    if len(weights) != len(ckpts):
        raise RecipeError(f"{len(weights)} weights for {len(ckpts)} checkpoints")
    nw = normalized_weights(weights)

    def kernel(_, flat):
        terms = np.stack([w * x for w, x in zip(nw, flat)])
        # Sorting the per-element terms makes the sum independent of input order.
        terms.sort(axis=0)
        acc = terms[0].copy()
        for row in terms[1:]:
            acc += row
        return acc

    return _map_tensors(ckpts, kernel, method="linear", weights=list(map(float, weights)))


def slerp_vectors(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return (1 - t) * a + t * b
    cos = float(np.dot(a, b) / (na * nb))
    omega = math.acos(min(1.0, max(-1.0, cos)))
    sin_omega = math.sin(omega)
    # Near-antipodal inputs have no unique arc; interpolate linearly there too.
    if omega < SLERP_EPS or sin_omega < SLERP_EPS:
        return (1 - t) * a + t * b
    ca = math.sin((1 - t) * omega) / sin_omega
    cb = math.sin(t * omega) / sin_omega
    return ca * a + cb * b


def slerp_merge(a: Checkpoint, b: Checkpoint, t: float) -> Checkpoint:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise RecipeError(f"slerp t must be in [0, 1], got {t}")
    return _map_tensors([a, b], lambda _, flat: slerp_vectors(flat[0], flat[1], t), method="slerp", t=t)


@dataclass(frozen=True)
class TaskVector:
    """Per-tensor float64 deltas (model - base), flattened, with original shapes."""

    deltas: Mapping[str, np.ndarray]
    shapes: Mapping[str, tuple[int, ...]]

    def names(self) -> list[str]:
        return sorted(self.deltas)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.deltas[name].reshape(self.shapes[name])


def task_vector(base: Checkpoint, model: Checkpoint) -> TaskVector:
    validate_compatible([base, model])
    deltas = {n: _f64(model.tensors[n]) - _f64(base.tensors[n]) for n in base.names()}
    return TaskVector(deltas, {n: base.tensors[n].shape for n in base.names()})


def apply_task_vector(base: Checkpoint, tv: TaskVector, scale: float = 1.0) -> Checkpoint:
    out = {n: _rebuild(base.tensors[n], _f64(base.tensors[n]) + scale * tv.deltas[n]) for n in base.names()}
    return Checkpoint(out)


def _check_density(density: float) -> float:
    density = float(density)
    if not 0.0 < density <= 1.0:
        raise RecipeError(f"density must be in (0, 1], got {density}")
    return density


def keep_count(density: float, n: int) -> int:
    # repr() round-trips the decimal the user wrote, so 0.7 * 10 is 7, not 7.000000000000001.
    return min(n, math.ceil(Fraction(repr(float(density))) * n))


def trim(delta: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density*n) largest-magnitude entries; ties keep the lower index."""
    n = delta.size
    k = keep_count(density, n)
    if k >= n:
        return delta.copy()
    order = np.argsort(-np.abs(delta), kind="stable")
    out = np.zeros_like(delta)
    keep = order[:k]
    out[keep] = delta[keep]
    return out


def ties_combine(trimmed: Sequence[np.ndarray]) -> np.ndarray:
    """Elect a sign per element and average the trimmed deltas that agree with it."""
    total = np.zeros_like(trimmed[0])
    for d in trimmed:
        total += d
    elected = np.sign(total)
    agree_sum = np.zeros_like(total)
    agree_count = np.zeros_like(total)
    for d in trimmed:
        mask = (np.sign(d) == elected) & (elected != 0)
        agree_sum += np.where(mask, d, 0.0)
        agree_count += mask
    return np.divide(agree_sum, agree_count, out=np.zeros_like(total), where=agree_count > 0)


def _ties_from_vectors(base: Checkpoint, tvs: Sequence[TaskVector], density: float, lam: float, prov: dict) -> Checkpoint:
    out = {}
    for name in base.names():
        merged = ties_combine([trim(tv.deltas[name], density) for tv in tvs])
        out[name] = _rebuild(base.tensors[name], _f64(base.tensors[name]) + lam * merged)
    return Checkpoint(out, {k: str(v) for k, v in prov.items()})


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not (lam > 0 and math.isfinite(lam)):
        raise RecipeError(f"lambda must be a positive finite number, got {lam}")
    return lam


def ties_merge(base: Checkpoint, models: Sequence[Checkpoint], density: float, lam: float = 1.0) -> Checkpoint:
    models = list(models)
    if not models:
        raise RecipeError("ties_merge needs at least one model")
    density, lam = _check_density(density), _check_lambda(lam)
    validate_compatible([base, *models])
    tvs = [task_vector(base, m) for m in models]
    return _ties_from_vectors(base, tvs, density, lam, {"method": "ties", "density": density, "lambda": lam})


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def _stream_key(seed: int, name: str) -> np.uint64:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8, key=int(seed).to_bytes(8, "little")).digest()
    return np.uint64(int.from_bytes(digest, "little"))


def uniform_stream(seed: int, name: str, n: int) -> np.ndarray:
    """Uniform [0, 1) draws that depend only on (seed, name, flat index)."""
    if not 0 <= int(seed) < 2**64:
        raise RecipeError(f"seed must be an unsigned 64-bit integer, got {seed}")
    idx = np.arange(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = _splitmix64(_stream_key(seed, name) + (idx + np.uint64(1)) * _GOLDEN)
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / 2**53)


def dare_sparsify(tv: TaskVector, p: float, seed: int) -> TaskVector:
    """Drop each delta with probability p and rescale survivors by 1/(1-p)."""
    p = float(p)
    if not 0.0 <= p < 1.0:
        raise RecipeError(f"drop probability must be in [0, 1), got {p}")
    if p == 0.0:
        return TaskVector({n: d.copy() for n, d in tv.deltas.items()}, dict(tv.shapes))
    scale = 1.0 / (1.0 - p)
    deltas = {}
    for name, d in tv.deltas.items():
        keep = uniform_stream(seed, name, d.size) >= p
        deltas[name] = np.where(keep, d * scale, 0.0)
    return TaskVector(deltas, dict(tv.shapes))


def dare_ties_merge(
    base: Checkpoint,
    models: Sequence[Checkpoint],
    drop_p: float,
    density: float = 1.0,
    lam: float = 1.0,
    seed: int = 0,
) -> Checkpoint:
    models = list(models)
    if not models:
        raise RecipeError("dare_ties_merge needs at least one model")
    density, lam = _check_density(density), _check_lambda(lam)
    if not 0.0 <= float(drop_p) < 1.0:
        raise RecipeError(f"drop probability must be in [0, 1), got {drop_p}")
    validate_compatible([base, *models])
    tvs = [dare_sparsify(task_vector(base, m), drop_p, (int(seed) + i) % 2**64) for i, m in enumerate(models)]
    prov = {"method": "dare_ties", "drop_p": float(drop_p), "density": density, "lambda": lam, "seed": int(seed)}
    return _ties_from_vectors(base, tvs, density, lam, prov)


@dataclass
class MergeRecipe:
    """Declarative description of one merge. Inputs and base are checkpoint references."""

    method: str
    inputs: list[str]
    base: str | None = None
    weights: list[float] | None = None
    t: float = 0.5
    density: float = 1.0
    lam: float = 1.0
    drop_p: float = 0.0
    seed: int = 0
    output: str | None = None
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise RecipeError(f"unknown merge method {self.method!r}; expected one of {', '.join(METHODS)}")
        if not self.inputs:
            raise RecipeError("recipe needs at least one input")
        if self.method == "linear":
            if self.weights is None:
                self.weights = [1.0] * len(self.inputs)
            if len(self.weights) != len(self.inputs):
                raise RecipeError(f"linear: {len(self.weights)} weights for {len(self.inputs)} inputs")
            normalized_weights(self.weights)
        elif self.method == "slerp":
            if len(self.inputs) != 2:
                raise RecipeError(f"slerp needs exactly 2 inputs, got {len(self.inputs)}")
            if not 0.0 <= float(self.t) <= 1.0:
                raise RecipeError(f"slerp t must be in [0, 1], got {self.t}")
        else:
            if self.base is None:
                raise RecipeError(f"{self.method} needs a base checkpoint")
            if self.base in self.inputs:
                raise RecipeError(f"{self.method}: base {self.base!r} must not appear in inputs")
            _check_density(self.density)
            _check_lambda(self.lam)
            if self.method == "dare_ties" and not 0.0 <= float(self.drop_p) < 1.0:
                raise RecipeError(f"drop probability must be in [0, 1), got {self.drop_p}")
            if not 0 <= int(self.seed) < 2**64:
                raise RecipeError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "MergeRecipe":
        known = {"method", "inputs", "base", "weights", "t", "density", "lambda", "lam", "drop_p", "seed", "output"}
        unknown = set(d) - known
        if unknown:
            raise RecipeError(f"unknown recipe field(s): {', '.join(sorted(unknown))}")
        if "method" not in d or "inputs" not in d:
            raise RecipeError("recipe requires 'method' and 'inputs'")
        kw = {k: v for k, v in d.items() if k not in ("lambda", "lam")}
        kw["inputs"] = list(d["inputs"])
        if "lambda" in d or "lam" in d:
            kw["lam"] = d.get("lambda", d.get("lam"))
        return cls(**kw)

    def to_dict(self) -> dict:
        d: dict = {"method": self.method, "inputs": list(self.inputs)}
        if self.method == "linear":
            d["weights"] = [float(w) for w in self.weights]
        elif self.method == "slerp":
            d["t"] = float(self.t)
        else:
            d.update(base=self.base, density=float(self.density), **{"lambda": float(self.lam)}, seed=int(self.seed))
            if self.method == "dare_ties":
                d["drop_p"] = float(self.drop_p)
        if self.output is not None:
            d["output"] = self.output
        return d

    def refs(self) -> list[str]:
        return ([self.base] if self.base else []) + list(self.inputs)


def apply_recipe(recipe: MergeRecipe, resolve: Callable[[str], Checkpoint]) -> Checkpoint:
    """Run ``recipe`` with checkpoint references resolved by ``resolve``."""
    recipe.validate()
    inputs = [resolve(r) for r in recipe.inputs]
    if recipe.method == "linear":
        out = linear_merge(inputs, recipe.weights)
    elif recipe.method == "slerp":
        out = slerp_merge(inputs[0], inputs[1], recipe.t)
    elif recipe.method == "ties":
        out = ties_merge(resolve(recipe.base), inputs, recipe.density, recipe.lam)
    else:
        out = dare_ties_merge(resolve(recipe.base), inputs, recipe.drop_p, recipe.density, recipe.lam, recipe.seed)
    return out
