"""Four listwise ranking architectures over one shared trunk/transformer
skeleton.

* ``baseline``: single scoring head, meant for single-domain training.
* ``multihead``: one scoring head per domain; the session's domain picks
  the head through a differentiable one-hot multiply-and-sum.
* ``domain_adversarial``: baseline plus a per-item domain classifier fed
  through a gradient-reversal node, pushing the trunk toward
  domain-agnostic representations.
* ``domain_specialist``: the same classifier without the reversal, pulling
  domain identity into the trunk representation instead.

Every item is scored in the context of its whole session: the trunk scores
items pointwise, a small transformer attends across the session's items
(no positional encoding, so scoring is permutation-equivariant), and a
final head combines both views.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import (
    Tensor,
    ShapeError,
    add,
    attention,
    concat_cols,
    gradient_reversal,
    layer_norm,
    linear,
    pad_rows,
    relu,
    scale,
    slice_rows,
)
from .data import QuerySession

__all__ = [
    "Variant",
    "ConfigError",
    "ModelLoadError",
    "ModelConfig",
    "Model",
    "ScoredSession",
    "build",
    "forward",
    "count_parameters",
    "save",
    "load",
]

_FORMAT_NAME = "mdrank-model"
_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """A model or experiment configuration is invalid."""


class ModelLoadError(ValueError):
    """A serialized model payload is corrupt, truncated, or unsupported."""


class Variant(str, Enum):
    BASELINE = "baseline"
    MULTI_HEAD = "multihead"
    DOMAIN_ADVERSARIAL = "domain_adversarial"
    DOMAIN_SPECIALIST = "domain_specialist"

    @property
    def has_classifier(self) -> bool:
        return self in (Variant.DOMAIN_ADVERSARIAL, Variant.DOMAIN_SPECIALIST)


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and variant switches for one ranker.

    ``grl_lambda`` only matters for ``domain_adversarial``;
    ``domain_loss_weight`` only for the two classifier-carrying variants.
    """

    variant: Variant
    feature_dim: int
    n_domains: int = 2
    trunk_hidden: tuple[int, ...] = (32,)
    token_dim: int = 16
    transformer_layers: int = 1
    heads: int = 1
    final_hidden: tuple[int, ...] = (16,)
    classifier_hidden: tuple[int, ...] = (16,)
    grl_lambda: float = 1.0
    domain_loss_weight: float = 0.5

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError:
            names = ", ".join(v.value for v in Variant)
            raise ConfigError(
                f"ModelConfig: unknown variant {self.variant!r}; expected one of {names}"
            ) from None
        object.__setattr__(self, "trunk_hidden", tuple(int(w) for w in self.trunk_hidden))
        object.__setattr__(self, "final_hidden", tuple(int(w) for w in self.final_hidden))
        object.__setattr__(
            self, "classifier_hidden", tuple(int(w) for w in self.classifier_hidden)
        )
        if self.feature_dim < 1:
            raise ConfigError("ModelConfig: feature_dim must be positive")
        if self.n_domains < 1:
            raise ConfigError("ModelConfig: n_domains must be positive")
        if self.variant is Variant.MULTI_HEAD and self.n_domains < 2:
            raise ConfigError("ModelConfig: multihead needs n_domains >= 2")
        if not self.trunk_hidden:
            raise ConfigError("ModelConfig: trunk_hidden needs at least one layer width")
        for w in (*self.trunk_hidden, *self.final_hidden, *self.classifier_hidden):
            if w < 1:
                raise ConfigError("ModelConfig: layer widths must be positive")
        if self.token_dim < 1:
            raise ConfigError("ModelConfig: token_dim must be positive")
        if self.transformer_layers < 1:
            raise ConfigError("ModelConfig: transformer_layers must be positive")
        if self.heads < 1 or self.token_dim % self.heads != 0:
            raise ConfigError(
                f"ModelConfig: token_dim {self.token_dim} not divisible by heads {self.heads}"
            )
        if self.grl_lambda < 0:
            raise ConfigError("ModelConfig: grl_lambda must be non-negative")
        if self.domain_loss_weight < 0:
            raise ConfigError("ModelConfig: domain_loss_weight must be non-negative")

    def to_json_obj(self) -> dict:
        return {
            "variant": self.variant.value,
            "feature_dim": self.feature_dim,
            "n_domains": self.n_domains,
            "trunk_hidden": list(self.trunk_hidden),
            "token_dim": self.token_dim,
            "transformer_layers": self.transformer_layers,
            "heads": self.heads,
            "final_hidden": list(self.final_hidden),
            "classifier_hidden": list(self.classifier_hidden),
            "grl_lambda": self.grl_lambda,
            "domain_loss_weight": self.domain_loss_weight,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ModelConfig":
        try:
            return cls(
                variant=Variant(obj["variant"]),
                feature_dim=int(obj["feature_dim"]),
                n_domains=int(obj["n_domains"]),
                trunk_hidden=tuple(obj["trunk_hidden"]),
                token_dim=int(obj["token_dim"]),
                transformer_layers=int(obj["transformer_layers"]),
                heads=int(obj["heads"]),
                final_hidden=tuple(obj["final_hidden"]),
                classifier_hidden=tuple(obj["classifier_hidden"]),
                grl_lambda=float(obj["grl_lambda"]),
                domain_loss_weight=float(obj["domain_loss_weight"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc


@dataclass
class ScoredSession:
    """Model outputs for one session.

    The plain arrays are detached copies for metrics and reports; the
    ``*_tensor`` handles stay attached to the active tape so losses can
    backpropagate through them.
    """

    pointwise_scores: np.ndarray
    final_scores: np.ndarray
    domain_logits: np.ndarray | None
    final_scores_tensor: Tensor = field(repr=False)
    pointwise_tensor: Tensor = field(repr=False)
    domain_logits_tensor: Tensor | None = field(repr=False)


class Model:
    """A built ranker: config plus named parameter tensors.

    Parameter iteration order is fixed by construction, which keeps
    initialization, optimization, and serialization deterministic.
    """

    def __init__(self, config: ModelConfig, parameters: dict[str, Tensor], seed: int):
        self.config = config
        self.parameters = parameters
        self.seed = seed

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.zero_grad()

    def copy(self) -> "Model":
        params = {
            name: Tensor(t.values.copy(), requires_grad=True)
            for name, t in self.parameters.items()
        }
        return Model(self.config, params, self.seed)

    def param_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.parameters.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            self.parameters[name].values = arr.copy()

    def __repr__(self) -> str:
        return f"Model(variant={self.config.variant.value}, parameters={count_parameters(self)})"


def _dense_specs(prefix: str, dims: tuple[int, ...]) -> list[tuple[str, str, tuple[int, ...]]]:
    specs = []
    for i in range(len(dims) - 1):
        specs.append((f"{prefix}.{i}.w", "weight", (dims[i], dims[i + 1])))
        specs.append((f"{prefix}.{i}.b", "bias", (dims[i + 1],)))
    return specs


def _parameter_specs(config: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """(name, kind, shape) for every parameter, in build order."""
    specs: list[tuple[str, str, tuple[int, ...]]] = []
    trunk_dims = (config.feature_dim, *config.trunk_hidden)
    specs += _dense_specs("trunk", trunk_dims)
    h = config.trunk_hidden[-1]
    d = config.token_dim
    specs += _dense_specs("score", (h, 1))
    specs += _dense_specs("token", (h + 1, d))
    for l in range(config.transformer_layers):
        p = f"transformer.{l}"
        specs.append((f"{p}.norm1.gain", "ln_gain", (d,)))
        specs.append((f"{p}.norm1.bias", "ln_bias", (d,)))
        specs.append((f"{p}.wq", "weight", (d, d)))
        specs.append((f"{p}.wk", "weight", (d, d)))
        specs.append((f"{p}.wv", "weight", (d, d)))
        specs += _dense_specs(f"{p}.attn_out", (d, d))
        specs.append((f"{p}.norm2.gain", "ln_gain", (d,)))
        specs.append((f"{p}.norm2.bias", "ln_bias", (d,)))
        specs += _dense_specs(f"{p}.ffn", (d, d, d))
    final_dims = (1 + d, *config.final_hidden, 1)
    if config.variant is Variant.MULTI_HEAD:
        for dom in range(config.n_domains):
            specs += _dense_specs(f"head.{dom}", final_dims)
    else:
        specs += _dense_specs("final", final_dims)
    if config.variant.has_classifier:
        specs += _dense_specs("classifier", (h, *config.classifier_hidden, config.n_domains))
    return specs


def build(config: ModelConfig, seed: int) -> Model:
    """Initialize a model deterministically from (config, seed).

    Weights draw from a uniform range scaled by fan-in; biases start at
    zero, layer-norm gains at one.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, kind, shape in _parameter_specs(config):
        if kind == "weight":
            bound = 1.0 / math.sqrt(shape[0])
            values = rng.uniform(-bound, bound, size=shape)
        elif kind == "bias" or kind == "ln_bias":
            values = np.zeros(shape)
        else:  # ln_gain
            values = np.ones(shape)
        params[name] = Tensor(values, requires_grad=True)
    return Model(config, params, seed)


def _mlp(x: Tensor, model: Model, prefix: str, n_layers: int) -> Tensor:
    p = model.parameters
    out = x
    for i in range(n_layers):
        out = linear(out, p[f"{prefix}.{i}.w"], p[f"{prefix}.{i}.b"])
        if i < n_layers - 1:
            out = relu(out)
    return out


def forward(model: Model, session: QuerySession, pad_to: int | None = None) -> ScoredSession:
    """Score every item of one session.

    ``pad_to`` runs the transformer on a zero-padded, masked token matrix of
    that length; scores for the real items are unchanged by the padding.
    Call inside an active Tape to make the returned tensors differentiable.
    """
    cfg = model.config
    n = len(session.items)
    if n < 1:
        raise ValueError("forward: session has no items")
    if not (0 <= session.domain < cfg.n_domains):
        raise ValueError(
            f"forward: session domain {session.domain} out of range [0, {cfg.n_domains})"
        )
    feats = session.feature_matrix()
    if feats.shape[1] != cfg.feature_dim:
        raise ShapeError(
            f"forward: feature width {feats.shape[1]} does not match config "
            f"feature_dim {cfg.feature_dim}"
        )
    p = model.parameters

    h = Tensor(feats)
    for i in range(len(cfg.trunk_hidden)):
        h = relu(linear(h, p[f"trunk.{i}.w"], p[f"trunk.{i}.b"]))
    s = linear(h, p["score.0.w"], p["score.0.b"])

    tokens = linear(concat_cols(h, s), p["token.0.w"], p["token.0.b"])
    mask = None
    if pad_to is not None:
        if pad_to < n:
            raise ValueError(f"forward: pad_to {pad_to} below session length {n}")
        if pad_to > n:
            tokens = pad_rows(tokens, pad_to)
            mask = np.array([False] * n + [True] * (pad_to - n))

    t = tokens
    for l in range(cfg.transformer_layers):
        pre = f"transformer.{l}"
        attended = attention(
            layer_norm(t, p[f"{pre}.norm1.gain"], p[f"{pre}.norm1.bias"]),
            p[f"{pre}.wq"],
            p[f"{pre}.wk"],
            p[f"{pre}.wv"],
            mask=mask,
            heads=cfg.heads,
        )
        t = add(t, linear(attended, p[f"{pre}.attn_out.0.w"], p[f"{pre}.attn_out.0.b"]))
        ff = layer_norm(t, p[f"{pre}.norm2.gain"], p[f"{pre}.norm2.bias"])
        ff = linear(relu(linear(ff, p[f"{pre}.ffn.0.w"], p[f"{pre}.ffn.0.b"])),
                    p[f"{pre}.ffn.1.w"], p[f"{pre}.ffn.1.b"])
        t = add(t, ff)
    if mask is not None:
        t = slice_rows(t, 0, n)

    final_in = concat_cols(s, t)
    n_final_layers = len(cfg.final_hidden) + 1
    if cfg.variant is Variant.MULTI_HEAD:
        # One-hot gating as an explicit multiply-and-sum keeps every head on
        # the tape; off-domain heads receive an exactly-zero gradient.
        total: Tensor | None = None
        for dom in range(cfg.n_domains):
            head_out = _mlp(final_in, model, f"head.{dom}", n_final_layers)
            term = scale(head_out, 1.0 if dom == session.domain else 0.0)
            total = term if total is None else add(total, term)
        y = total
    else:
        y = _mlp(final_in, model, "final", n_final_layers)

    logits_t: Tensor | None = None
    if cfg.variant.has_classifier:
        clf_in = h
        if cfg.variant is Variant.DOMAIN_ADVERSARIAL:
            clf_in = gradient_reversal(h, cfg.grl_lambda)
        logits_t = _mlp(clf_in, model, "classifier", len(cfg.classifier_hidden) + 1)

    return ScoredSession(
        pointwise_scores=s.values[:, 0].copy(),
        final_scores=y.values[:, 0].copy(),
        domain_logits=None if logits_t is None else logits_t.values.copy(),
        final_scores_tensor=y,
        pointwise_tensor=s,
        domain_logits_tensor=logits_t,
    )


def count_parameters(model: Model, deployed: bool = False) -> int:
    """Total parameter count; ``deployed`` drops the domain classifier,
    which only exists to shape training."""
    total = 0
    for name, t in model.parameters.items():
        if deployed and name.startswith("classifier."):
            continue
        total += t.values.size
    return total


def save(model: Model) -> bytes:
    """Serialize to a self-describing, versioned JSON payload.

    Floats round-trip exactly through their shortest decimal repr, so
    save -> load -> save is byte-identical.
    """
    doc = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        "seed": model.seed,
        "config": model.config.to_json_obj(),
        "parameters": {
            name: {"shape": list(t.shape), "values": t.values.reshape(-1).tolist()}
            for name, t in model.parameters.items()
        },
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def load(raw: bytes) -> Model:
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"corrupt model payload: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != _FORMAT_NAME:
        raise ModelLoadError("payload is not a serialized model")
    if doc.get("version") != _FORMAT_VERSION:
        raise ModelLoadError(
            f"unsupported model format version {doc.get('version')!r} "
            f"(expected {_FORMAT_VERSION})"
        )
    try:
        config = ModelConfig.from_json_obj(doc["config"])
        seed = int(doc["seed"])
        raw_params = doc["parameters"]
    except (KeyError, TypeError) as exc:
        raise ModelLoadError(f"missing field in model payload: {exc}") from exc
    except ConfigError as exc:
        raise ModelLoadError(str(exc)) from exc

    params: dict[str, Tensor] = {}
    for name, kind, shape in _parameter_specs(config):
        entry = raw_params.get(name)
        if entry is None:
            raise ModelLoadError(f"model payload is missing parameter {name!r}")
        got_shape = tuple(entry.get("shape", ()))
        values = entry.get("values")
        if got_shape != shape:
            raise ModelLoadError(
                f"parameter {name!r} has shape {got_shape}, expected {shape}"
            )
        expected = int(np.prod(shape, dtype=np.int64))
        if not isinstance(values, list) or len(values) != expected:
            raise ModelLoadError(f"parameter {name!r} holds {0 if values is None else len(values)} "
                                 f"values, expected {expected}")
        params[name] = Tensor(np.asarray(values, dtype=np.float64).reshape(shape),
                              requires_grad=True)
    extra = set(raw_params) - set(params)
    if extra:
        raise ModelLoadError(f"model payload has unexpected parameters: {sorted(extra)}")
    return Model(config, params, seed)
