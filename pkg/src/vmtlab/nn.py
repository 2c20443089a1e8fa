"""Classifier f = h . g, domain discriminator d, Adam, EMA and checkpoints."""
from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .rng import stream

GROUPS = ("encoder_g", "head_h", "discriminator_d")
_PREFIX = {"encoder_g": "g", "head_h": "h", "discriminator_d": "d"}

DISC_CLAMP = 1e-7

ADAM_DEFAULTS = {"lr": 1e-3, "beta1": 0.5, "beta2": 0.999, "eps": 1e-8}
EMA_MOMENTUM = 0.998


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including the input width, e.g. ``(2, 64, 64)``."""

    layer_widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ArchitectureError(f"MLP needs at least one layer, got widths {self.layer_widths}")
        if any(w <= 0 for w in self.layer_widths):
            raise ArchitectureError(f"zero-width layer in {self.layer_widths}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


@dataclass(frozen=True)
class Architecture:
    encoder: MlpSpec
    head: MlpSpec
    discriminator: MlpSpec
    # "identity" turns g into an affine map, which makes the logits affine in x
    activation: str = "relu"

    def __post_init__(self):
        if self.encoder.layer_widths[-1] != self.head.layer_widths[0]:
            raise ArchitectureError("encoder output width must equal head input width")
        if self.discriminator.layer_widths[0] != self.encoder.layer_widths[-1]:
            raise ArchitectureError("discriminator input width must equal encoder output width")
        if self.discriminator.n_layers < 2:
            raise ArchitectureError("discriminator needs at least one hidden layer")
        if self.discriminator.layer_widths[-1] != 1:
            raise ArchitectureError("discriminator output width must be 1")
        if self.activation not in ("relu", "identity"):
            raise ArchitectureError(f"unknown activation {self.activation!r}")

    @property
    def input_dim(self) -> int:
        return self.encoder.layer_widths[0]

    @property
    def feature_dim(self) -> int:
        return self.encoder.layer_widths[-1]

    @property
    def n_classes(self) -> int:
        return self.head.layer_widths[-1]

    def spec(self, group: str) -> MlpSpec:
        return {"encoder_g": self.encoder, "head_h": self.head, "discriminator_d": self.discriminator}[group]

    def to_dict(self) -> dict:
        return {
            "encoder": list(self.encoder.layer_widths),
            "head": list(self.head.layer_widths),
            "discriminator": list(self.discriminator.layer_widths),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Architecture":
        return cls(MlpSpec(d["encoder"]), MlpSpec(d["head"]), MlpSpec(d["discriminator"]), d.get("activation", "relu"))


def default_architecture(input_dim: int, n_classes: int, hidden: int = 64, depth: int = 2) -> Architecture:
    """g: input->64->64 (relu), h: 64->K linear, d: 64->64->1."""
    return Architecture(
        encoder=MlpSpec((input_dim,) + (hidden,) * depth),
        head=MlpSpec((hidden, n_classes)),
        discriminator=MlpSpec((hidden, hidden, 1)),
    )


def param_names(arch: Architecture, group: str) -> list[str]:
    prefix = _PREFIX[group]
    names = []
    for i in range(arch.spec(group).n_layers):
        names += [f"{prefix}.W{i}", f"{prefix}.b{i}"]
    return names


@dataclass
class ModelParams:
    arch: Architecture
    values: dict[str, np.ndarray]
    shadow: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: dict[str, int] = field(default_factory=lambda: {g: 0 for g in GROUPS})

    @property
    def groups(self) -> dict[str, list[str]]:
        return {g: param_names(self.arch, g) for g in GROUPS}

    def group_of(self, name: str) -> str:
        for g, names in self.groups.items():
            if name in names:
                return g
        raise KeyError(name)

    def copy(self) -> "ModelParams":
        dup = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return ModelParams(self.arch, dup(self.values), dup(self.shadow), dup(self.adam_m), dup(self.adam_v), dict(self.adam_t))

    def classifier(self, use_shadow: bool = False) -> "Classifier":
        return Classifier(self.arch, self.shadow if use_shadow else self.values)

    def eval_model(self) -> "Classifier":
        """The EMA shadow model; all evaluation goes through this."""
        return self.classifier(use_shadow=True)


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """He-normal weights (variance 2/fan_in), zero biases, shadow = weights."""
    rng = stream(seed, "init")
    values: dict[str, np.ndarray] = {}
    for group in GROUPS:
        widths = arch.spec(group).layer_widths
        prefix = _PREFIX[group]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            values[f"{prefix}.W{i}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            values[f"{prefix}.b{i}"] = np.zeros(fan_out)
    return ModelParams(
        arch=arch,
        values=values,
        shadow={k: v.copy() for k, v in values.items()},
        adam_m={k: np.zeros_like(v) for k, v in values.items()},
        adam_v={k: np.zeros_like(v) for k, v in values.items()},
    )


class Forward(NamedTuple):
    features: ad.Tensor
    logits: ad.Tensor
    probs: ad.Tensor
    hidden: tuple[ad.Tensor, ...]


class Classifier:
    """A classifier handle binding an architecture to a set of weights.

    ``weights`` maps parameter names to ndarrays or tape-tracked Tensors; the
    same handle therefore serves training (tracked), evaluation (shadow
    arrays) and frozen teachers.
    """

    def __init__(self, arch: Architecture, weights: Mapping):
        self.arch = arch
        self.weights = weights

    def _layer(self, prefix: str, i: int, x, relu: bool = False):
        return ad.dense(x, self.weights[f"{prefix}.W{i}"], self.weights[f"{prefix}.b{i}"], relu)

    @property
    def _relu(self) -> bool:
        return self.arch.activation == "relu"

    def _check_width(self, x, width: int, what: str):
        shape = x.shape
        if len(shape) != 2 or shape[1] != width:
            raise ArchitectureError(f"{what}: expected (batch, {width}) input, got {tuple(shape)}")

    def encode_from(self, h, start: int = 0) -> list:
        """Encoder activations from layer ``start`` onward (h is its input)."""
        out = []
        for i in range(start, self.arch.encoder.n_layers):
            h = self._layer("g", i, h, self._relu)
            out.append(h)
        return out

    def head(self, features):
        z = features
        n = self.arch.head.n_layers
        for i in range(n):
            z = self._layer("h", i, z, self._relu and i < n - 1)
        return z

    def __call__(self, x) -> Forward:
        if not isinstance(x, ad.Tensor):
            x = ad.constant(x)
        self._check_width(x, self.arch.input_dim, "classifier")
        hidden = tuple(self.encode_from(x))
        features = hidden[-1]
        logits = self.head(features)
        return Forward(features, logits, ad.softmax(logits), hidden)

    def logits_from_hidden(self, h, layer: int):
        """Logits computed from encoder activation ``layer`` (0-based)."""
        rest = self.encode_from(h, layer + 1)
        return self.head(rest[-1] if rest else h)

    def features(self, x):
        return self(x).features

    def discriminate(self, features):
        if not isinstance(features, ad.Tensor):
            features = ad.constant(features)
        self._check_width(features, self.arch.feature_dim, "discriminator")
        z = features
        n = self.arch.discriminator.n_layers
        for i in range(n):
            z = self._layer("d", i, z, i < n - 1)
        return ad.clip(ad.sigmoid(z), DISC_CLAMP, 1.0 - DISC_CLAMP)


def forward_classifier(params: ModelParams, x, use_shadow: bool = False):
    out = params.classifier(use_shadow)(x)
    return out.features, out.logits, out.probs


def forward_discriminator(params: ModelParams, features, use_shadow: bool = False):
    return params.classifier(use_shadow).discriminate(features)


def tracked_weights(params: ModelParams, tape: ad.Tape, groups) -> tuple[dict, dict[str, ad.Tensor]]:
    """Weights mapping with ``groups`` registered on ``tape``; others constant."""
    tracked: dict[str, ad.Tensor] = {}
    weights: dict = {}
    selected = set()
    for g in groups:
        selected.update(param_names(params.arch, g))
    for name, value in params.values.items():
        if name in selected:
            tracked[name] = weights[name] = tape.variable(value)
        else:
            weights[name] = value
    return weights, tracked


def collect_grads(grad_map: Mapping[int, np.ndarray], tracked: Mapping[str, ad.Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, t in tracked.items():
        g = grad_map.get(t.node_id)
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g)
    return out


def adam_step(
    params: ModelParams,
    groups,
    grads: Mapping[str, np.ndarray],
    lr: float = ADAM_DEFAULTS["lr"],
    beta1: float = ADAM_DEFAULTS["beta1"],
    beta2: float = ADAM_DEFAULTS["beta2"],
    eps: float = ADAM_DEFAULTS["eps"],
    t: int | None = None,
) -> ModelParams:
    """Bias-corrected Adam on the selected groups only (in place)."""
    if isinstance(groups, str):
        groups = (groups,)
    allowed: set[str] = set()
    for g in groups:
        allowed.update(param_names(params.arch, g))
    stray = sorted(set(grads) - allowed)
    if stray:
        raise ValueError(f"gradients for parameters outside groups {tuple(groups)}: {stray}")
    missing = sorted(allowed - set(grads))
    if missing:
        raise ValueError(f"missing gradients for {missing}")
    for g in groups:
        step = params.adam_t[g] + 1 if t is None else int(t)
        if step < 1:
            raise ValueError("Adam step count must be >= 1")
        params.adam_t[g] = step
        c1 = 1.0 - beta1**step
        c2 = 1.0 - beta2**step
        for name in param_names(params.arch, g):
            grad = grads[name]
            m = beta1 * params.adam_m[name] + (1.0 - beta1) * grad
            v = beta2 * params.adam_v[name] + (1.0 - beta2) * grad * grad
            params.adam_m[name] = m
            params.adam_v[name] = v
            params.values[name] = params.values[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def ema_update(params: ModelParams, momentum: float = EMA_MOMENTUM) -> ModelParams:
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1), got {momentum}")
    for name, value in params.values.items():
        params.shadow[name] = momentum * params.shadow[name] + (1.0 - momentum) * value
    return params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_SECTIONS = ("value", "shadow", "adam_m", "adam_v")


def params_to_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    arrays = {}
    for section in _SECTIONS:
        for name, arr in getattr(params, "values" if section == "value" else section).items():
            arrays[f"{section}/{name}"] = arr
    return arrays


def params_from_arrays(arch: Architecture, arrays: Mapping[str, np.ndarray], adam_t: Mapping[str, int]) -> ModelParams:
    buckets = {s: {} for s in _SECTIONS}
    for key, arr in arrays.items():
        section, _, name = key.partition("/")
        if section in buckets:
            buckets[section][name] = np.array(arr, dtype=np.float64)
    expected = {n for g in GROUPS for n in param_names(arch, g)}
    for section, got in buckets.items():
        if set(got) != expected:
            raise ArchitectureError(f"checkpoint {section} entries {sorted(got)} do not match architecture {sorted(expected)}")
        for name, arr in got.items():
            ref = _expected_shape(arch, name)
            if arr.shape != ref:
                raise ArchitectureError(f"checkpoint {section}/{name} has shape {arr.shape}, architecture expects {ref}")
    return ModelParams(arch, buckets["value"], buckets["shadow"], buckets["adam_m"], buckets["adam_v"], dict(adam_t))


def _expected_shape(arch: Architecture, name: str) -> tuple[int, ...]:
    prefix, _, rest = name.partition(".")
    group = {v: k for k, v in _PREFIX.items()}[prefix]
    widths = arch.spec(group).layer_widths
    i = int(rest[1:])
    return (widths[i], widths[i + 1]) if rest[0] == "W" else (widths[i + 1],)


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Write a named-array container atomically (npz, no pickling)."""
    payload = dict(arrays)
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **payload)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
        meta = json.loads(str(z["__meta__"])) if "__meta__" in z.files else {}
    return arrays, meta


def save_checkpoint(path, params: ModelParams, config_hash: str = "", extra: Mapping | None = None) -> None:
    meta = {
        "arch": params.arch.to_dict(),
        "adam_t": params.adam_t,
        "config_hash": config_hash,
        "shapes": {k: list(v.shape) for k, v in params.values.items()},
    }
    if extra:
        meta["extra"] = dict(extra)
    save_arrays(path, params_to_arrays(params), meta)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    arrays, meta = load_arrays(path)
    arch = Architecture.from_dict(meta["arch"])
    return params_from_arrays(arch, arrays, meta["adam_t"]), meta
