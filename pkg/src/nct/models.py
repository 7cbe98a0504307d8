"""Base one-step generator, zero-initialized conditional adapter, condition
models, EMA shadows, and checkpoint persistence."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigurationError, ParameterVector, Var, concat, segment, tanh
from .nn import MlpSpec, _activation, init_mlp_params, mlp_apply, mlp_forward

CHECKPOINT_FORMAT_VERSION = 1

CONDITION_KINDS = ("quadrant-label", "coarse-grid", "noisy-projection")


@dataclass
class GeneratorModel:
    """Frozen one-step generator: latent (dim m) -> data sample (dim n)."""

    theta: ParameterVector
    spec: MlpSpec
    meta: dict = field(default_factory=dict)


def make_generator(spec: MlpSpec, rng: np.random.Generator) -> GeneratorModel:
    return GeneratorModel(init_mlp_params(spec, rng), spec)


def generate(gen: GeneratorModel, z: np.ndarray) -> np.ndarray:
    return mlp_forward(gen.theta, gen.spec, z)


@dataclass
class ConditionModel:
    """Discriminative condition assignment: deterministic extractor plus
    optional noise (label flips or additive Gaussian)."""

    kind: str
    grid_size: float = 1.0
    projection: tuple[float, ...] = (1.0, 0.0)
    noise_scale: float = 0.0
    flip_prob: float = 0.0

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ConfigurationError(f"unknown condition kind {self.kind!r}")
        self.projection = tuple(float(v) for v in self.projection)

    @property
    def n_labels(self) -> int:
        return 4

    def condition_dim(self) -> int:
        """Dimension of the embedded condition vector."""
        if self.kind == "quadrant-label":
            return self.n_labels
        if self.kind == "coarse-grid":
            return len(self.projection)  # same dim as data
        return 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "grid_size": self.grid_size,
            "projection": list(self.projection),
            "noise_scale": self.noise_scale,
            "flip_prob": self.flip_prob,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionModel":
        return cls(
            d["kind"],
            grid_size=d.get("grid_size", 1.0),
            projection=tuple(d.get("projection", (1.0, 0.0))),
            noise_scale=d.get("noise_scale", 0.0),
            flip_prob=d.get("flip_prob", 0.0),
        )


def quadrant_labels(x: np.ndarray) -> np.ndarray:
    """0:(+,+) 1:(-,+) 2:(-,-) 3:(+,-); axis ties count as positive."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    neg_x = x[:, 0] < 0
    neg_y = x[:, 1] < 0
    return np.where(neg_y, np.where(neg_x, 2, 3), np.where(neg_x, 1, 0))


def extract_condition(
    cm: ConditionModel, x: np.ndarray, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Draw conditions for a batch of samples; deterministic when noise-free."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    n = xb.shape[0]
    if cm.kind == "quadrant-label":
        labels = quadrant_labels(xb)
        if cm.flip_prob > 0:
            if rng is None:
                raise ConfigurationError("stochastic condition model needs an rng")
            flip = rng.random(n) < cm.flip_prob
            # flipped labels are uniform over the three *other* labels
            shift = rng.integers(1, cm.n_labels, size=n)
            labels = np.where(flip, (labels + shift) % cm.n_labels, labels)
        out = labels
    elif cm.kind == "coarse-grid":
        g = cm.grid_size
        out = (np.floor(xb / g) + 0.5) * g
        if cm.noise_scale > 0:
            if rng is None:
                raise ConfigurationError("stochastic condition model needs an rng")
            out = out + cm.noise_scale * rng.standard_normal(out.shape)
    else:  # noisy-projection
        w = np.asarray(cm.projection)
        out = xb @ w
        if cm.noise_scale > 0:
            if rng is None:
                raise ConfigurationError("stochastic condition model needs an rng")
            out = out + cm.noise_scale * rng.standard_normal(n)
    return out[0] if single else out


def embed_condition(cm: ConditionModel, c: np.ndarray) -> np.ndarray:
    """Map conditions to fixed-dimension real vectors (one-hot for labels)."""
    c = np.asarray(c)
    single = c.ndim == 0 or (cm.kind == "coarse-grid" and c.ndim == 1)
    if cm.kind == "quadrant-label":
        labels = np.atleast_1d(c).astype(int)
        out = np.eye(cm.n_labels)[labels]
    elif cm.kind == "coarse-grid":
        out = np.atleast_2d(np.asarray(c, dtype=np.float64))
    else:
        out = np.atleast_1d(np.asarray(c, dtype=np.float64)).reshape(-1, 1)
    return out[0] if single else out


@dataclass
class AdapterModel:
    """Trainable conditional adapter on a frozen base generator.

    Each base hidden layer gets an additive correction path whose final
    projection starts at exact zero, so the untrained conditional generator
    reproduces the base generator bitwise.
    """

    phi: ParameterVector
    base_spec: MlpSpec
    cond_dim: int
    embed_dim: int = 16
    width: int = 64

    @staticmethod
    def layout(base_spec: MlpSpec, cond_dim: int, embed_dim: int, width: int):
        dims = base_spec.dims()
        out = [("ce_w", (cond_dim, embed_dim)), ("ce_b", (embed_dim,))]
        for i, hidden in enumerate(base_spec.hidden_dims):
            out.append((f"a{i}_w", (dims[i] + embed_dim, width)))
            out.append((f"a{i}_b", (width,)))
            out.append((f"z{i}_w", (width, hidden)))
            out.append((f"z{i}_b", (hidden,)))
        return out

    @classmethod
    def zero_init(
        cls,
        base_spec: MlpSpec,
        cond_dim: int,
        rng: np.random.Generator,
        embed_dim: int = 16,
        width: int = 64,
    ) -> "AdapterModel":
        layout = cls.layout(base_spec, cond_dim, embed_dim, width)
        phi = ParameterVector.zeros(layout)
        phi.set("ce_w", rng.standard_normal((cond_dim, embed_dim)) / np.sqrt(cond_dim))
        dims = base_spec.dims()
        for i in range(len(base_spec.hidden_dims)):
            fan_in = dims[i] + embed_dim
            phi.set(f"a{i}_w", rng.standard_normal((fan_in, width)) / np.sqrt(fan_in))
            # z{i}_w / z{i}_b stay exactly zero: the untrained correction is 0
        return cls(phi, base_spec, cond_dim, embed_dim, width)

    def meta(self) -> dict:
        return {"cond_dim": self.cond_dim, "embed_dim": self.embed_dim, "width": self.width}


def conditional_apply(
    theta: Var,
    theta_offsets: dict,
    phi: Var,
    phi_offsets: dict,
    ad: AdapterModel,
    z: Var,
    cond_embed: Var,
) -> Var:
    """Autodiff forward of the conditional generator on a batch."""
    spec = ad.base_spec
    act = _activation(spec.activation)
    dims = spec.dims()
    n_layers = len(dims) - 1

    def seg(params, offsets, name):
        start, shape = offsets[name]
        return segment(params, start, shape)

    e = tanh(cond_embed @ seg(phi, phi_offsets, "ce_w") + seg(phi, phi_offsets, "ce_b"))
    h = z
    for i in range(n_layers):
        pre = h @ seg(theta, theta_offsets, f"w{i}") + seg(theta, theta_offsets, f"b{i}")
        if i < n_layers - 1:
            u = tanh(
                concat([h, e]) @ seg(phi, phi_offsets, f"a{i}_w")
                + seg(phi, phi_offsets, f"a{i}_b")
            )
            pre = pre + (u @ seg(phi, phi_offsets, f"z{i}_w") + seg(phi, phi_offsets, f"z{i}_b"))
            h = act(pre)
        else:
            h = pre
    return h


def generate_conditional(
    gen: GeneratorModel, ad: AdapterModel, z: np.ndarray, c: np.ndarray, cm: ConditionModel
) -> np.ndarray:
    """Plain numpy conditional forward; single vectors or aligned batches."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    eb = embed_condition(cm, c)
    eb = np.atleast_2d(eb)
    if eb.shape[0] == 1 and zb.shape[0] > 1:
        eb = np.broadcast_to(eb, (zb.shape[0], eb.shape[1]))
    if eb.shape[1] != ad.cond_dim:
        raise ConfigurationError(
            f"condition dim {eb.shape[1]} does not match adapter cond_dim {ad.cond_dim}"
        )
    out = conditional_apply(
        Var(gen.theta.values),
        gen.theta.offsets(),
        Var(ad.phi.values),
        ad.phi.offsets(),
        ad,
        Var(zb),
        Var(np.asarray(eb, dtype=np.float64)),
    ).data
    return out[0] if single else out


@dataclass
class EmaState:
    """Exponential moving average of adapter parameters, used for evaluation."""

    shadow: ParameterVector
    decay: float

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ConfigurationError("ema decay must be in [0, 1)")


def ema_update(ema: EmaState, phi: ParameterVector) -> EmaState:
    if ema.shadow.values.shape != phi.values.shape:
        raise ConfigurationError("ema shadow layout does not match parameters")
    ema.shadow.values = ema.decay * ema.shadow.values + (1.0 - ema.decay) * phi.values
    return ema


class CheckpointError(RuntimeError):
    """Raised on malformed, truncated, or version-mismatched checkpoints."""


def _write_checkpoint(path, manifest: dict, blob: np.ndarray) -> None:
    raw = np.ascontiguousarray(blob, dtype="<f8").tobytes()
    manifest = dict(manifest)
    manifest["format_version"] = CHECKPOINT_FORMAT_VERSION
    manifest["blob_crc32"] = zlib.crc32(raw)
    manifest["blob_len"] = blob.size
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        f.write(raw)


def _read_checkpoint(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise CheckpointError(f"{path}: truncated header")
    hlen = int.from_bytes(data[:4], "little")
    if len(data) < 4 + hlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: invalid manifest") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {manifest.get('format_version')}"
        )
    raw = data[4 + hlen :]
    if len(raw) != manifest["blob_len"] * 8:
        raise CheckpointError(
            f"{path}: blob length {len(raw)} does not match manifest "
            f"({manifest['blob_len']} float64)"
        )
    if zlib.crc32(raw) != manifest["blob_crc32"]:
        raise CheckpointError(f"{path}: blob checksum mismatch")
    blob = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return manifest, blob


def save_generator(path, gen: GeneratorModel, schedule=None, rng_seed=None, step=0) -> None:
    manifest = {
        "model_kind": "generator",
        "specs": {"mlp": gen.spec.to_dict(), "meta": gen.meta},
        "schedule": schedule,
        "rng_seed": rng_seed,
        "step": step,
    }
    _write_checkpoint(path, manifest, gen.theta.values)


def load_generator(path) -> tuple[GeneratorModel, dict]:
    manifest, blob = _read_checkpoint(path)
    if manifest["model_kind"] != "generator":
        raise CheckpointError(f"{path}: expected a generator checkpoint")
    spec = MlpSpec.from_dict(manifest["specs"]["mlp"])
    pv = ParameterVector(blob, spec.layout())
    return GeneratorModel(pv, spec, meta=manifest["specs"].get("meta", {})), manifest


def save_adapter(
    path, ad: AdapterModel, cm: ConditionModel, schedule=None, rng_seed=None, step=0
) -> None:
    manifest = {
        "model_kind": "adapter",
        "specs": {
            "base_mlp": ad.base_spec.to_dict(),
            "adapter": ad.meta(),
            "condition": cm.to_dict(),
        },
        "schedule": schedule,
        "rng_seed": rng_seed,
        "step": step,
    }
    _write_checkpoint(path, manifest, ad.phi.values)


def load_adapter(path) -> tuple[AdapterModel, ConditionModel, dict]:
    manifest, blob = _read_checkpoint(path)
    if manifest["model_kind"] != "adapter":
        raise CheckpointError(f"{path}: expected an adapter checkpoint")
    base_spec = MlpSpec.from_dict(manifest["specs"]["base_mlp"])
    meta = manifest["specs"]["adapter"]
    layout = AdapterModel.layout(base_spec, meta["cond_dim"], meta["embed_dim"], meta["width"])
    pv = ParameterVector(blob, layout)
    ad = AdapterModel(pv, base_spec, meta["cond_dim"], meta["embed_dim"], meta["width"])
    cm = ConditionModel.from_dict(manifest["specs"]["condition"])
    return ad, cm, manifest
