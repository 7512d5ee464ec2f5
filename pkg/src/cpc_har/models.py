"""Sequence-model architectures assembled from the autodiff engine.

Two encoder variants (a strided four-layer conv stack producing one latent
per two input steps, and a stride-1 three-layer stack producing one latent
per step), two aggregator variants (a stack of causal residual conv blocks,
and a two-layer GRU), classifier heads, parameter initialization and a
bitwise-round-tripping checkpoint format.

All forwards are pure functions of (params, inputs, config, training, rng);
parameters live in a flat name -> Tensor dict so optimizers, checkpoints and
freeze checks can treat them uniformly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from cpc_har.tensor import (
    Padding,
    Rng,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    conv1d,
    dropout,
    getitem,
    group_norm,
    matmul,
    mul,
    pointwise,
    reshape,
    stack,
    transpose,
)


class ConfigError(ValueError):
    """Raised when a configuration value is outside its allowed set."""


ENCODER_VARIANTS = ("enhanced", "original")
AGGREGATOR_VARIANTS = ("causal_conv", "gru")
TASK_VARIANTS = ("per_timestep", "single_anchor")
HEAD_VARIANTS = ("linear", "mlp")

# Kernel sizes for consecutive causal aggregator blocks; a config with
# `causal_blocks` blocks uses the first `causal_blocks` entries.
CAUSAL_KERNEL_LADDER = (2, 3, 4, 5, 6, 7)
ALLOWED_CAUSAL_BLOCKS = (2, 4, 6)
ALLOWED_ORIGINAL_KERNELS = (3, 5)

ENHANCED_FILTERS = (32, 64, 128, 256)
ENHANCED_KERNELS = (4, 1, 1, 1)
ENHANCED_STRIDES = (2, 1, 1, 1)
ORIGINAL_FILTERS = (32, 64, 128)


@dataclass
class ModelConfig:
    """Architecture and pretext-task selection.

    z_dim is derived from the encoder variant (256 for the strided encoder,
    128 for the stride-1 one); context vectors are always 256-d so the same
    scoring matrices and classifier heads fit every combination.
    """

    encoder_variant: str = "enhanced"
    aggregator_variant: str = "causal_conv"
    task_variant: str = "per_timestep"
    causal_blocks: int = 4
    gru_layers: int = 2
    gru_units: int = 256
    original_kernel_size: int = 3
    horizon: int = 12
    num_negatives: int = 10
    dropout_p: float = 0.2
    context_dim: int = 256

    @property
    def z_dim(self) -> int:
        return 256 if self.encoder_variant == "enhanced" else 128

    def validate(self) -> "ModelConfig":
        if self.encoder_variant not in ENCODER_VARIANTS:
            raise ConfigError(
                f"encoder_variant must be one of {ENCODER_VARIANTS}, "
                f"got {self.encoder_variant!r}"
            )
        if self.aggregator_variant not in AGGREGATOR_VARIANTS:
            raise ConfigError(
                f"aggregator_variant must be one of {AGGREGATOR_VARIANTS}, "
                f"got {self.aggregator_variant!r}"
            )
        if self.task_variant not in TASK_VARIANTS:
            raise ConfigError(
                f"task_variant must be one of {TASK_VARIANTS}, got {self.task_variant!r}"
            )
        if self.causal_blocks not in ALLOWED_CAUSAL_BLOCKS:
            raise ConfigError(
                f"causal_blocks must be one of {ALLOWED_CAUSAL_BLOCKS}, "
                f"got {self.causal_blocks}"
            )
        if self.original_kernel_size not in ALLOWED_ORIGINAL_KERNELS:
            raise ConfigError(
                f"original_kernel_size must be one of {ALLOWED_ORIGINAL_KERNELS}, "
                f"got {self.original_kernel_size}"
            )
        if self.gru_layers < 1:
            raise ConfigError(f"gru_layers must be >= 1, got {self.gru_layers}")
        if self.gru_units != self.context_dim:
            raise ConfigError(
                f"gru_units ({self.gru_units}) must equal context_dim "
                f"({self.context_dim}) so every aggregator yields the same feature size"
            )
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.num_negatives < 1:
            raise ConfigError(f"num_negatives must be >= 1, got {self.num_negatives}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw).validate()


@dataclass
class ModelParams:
    """Flat named parameter collection plus non-learned buffers.

    ``tensors`` holds every learnable Tensor (encoder, aggregator, the K
    scoring matrices ``predictor.w{k}``, optionally a classifier head);
    ``buffers`` holds batch-norm running statistics. ``meta`` records
    classifier head/num_classes when one is attached so checkpoints are
    self-describing.
    """

    config: ModelConfig
    tensors: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def backbone_names(self) -> list[str]:
        return [n for n in self.tensors if not n.startswith("classifier.")]

    def classifier_names(self) -> list[str]:
        return [n for n in self.tensors if n.startswith("classifier.")]

    def subset(self, names) -> dict[str, Tensor]:
        return {n: self.tensors[n] for n in names}


def _uniform_init(rng: Rng, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(shape, -bound, bound).astype(dtype)


def init_params(config: ModelConfig, rng: Rng, dtype=np.float32) -> ModelParams:
    """Allocate backbone and scoring parameters for a validated config.

    Weights are uniform in +-1/sqrt(fan_in); norm scales start at 1 and
    shifts at 0. The same seed always produces identical values.
    """
    config.validate()
    t: dict[str, Tensor] = {}

    def param(name, shape, fan_in):
        t[name] = Tensor(_uniform_init(rng, shape, fan_in, dtype), requires_grad=True)

    if config.encoder_variant == "enhanced":
        in_ch = 3
        for i, (f, k, _) in enumerate(
            zip(ENHANCED_FILTERS, ENHANCED_KERNELS, ENHANCED_STRIDES), start=1
        ):
            fan = in_ch * k
            param(f"encoder.conv{i}.weight", (f, in_ch, k), fan)
            param(f"encoder.conv{i}.bias", (f,), fan)
            in_ch = f
    else:
        k = config.original_kernel_size
        in_ch = 3
        for i, f in enumerate(ORIGINAL_FILTERS, start=1):
            fan = in_ch * k
            param(f"encoder.conv{i}.weight", (f, in_ch, k), fan)
            param(f"encoder.conv{i}.bias", (f,), fan)
            in_ch = f

    C = config.context_dim
    if config.aggregator_variant == "causal_conv":
        if config.z_dim != C:
            param("aggregator.proj.weight", (C, config.z_dim, 1), config.z_dim)
            param("aggregator.proj.bias", (C,), config.z_dim)
        for i in range(1, config.causal_blocks + 1):
            k = CAUSAL_KERNEL_LADDER[i - 1]
            fan = C * k
            param(f"aggregator.block{i}.conv.weight", (C, C, k), fan)
            param(f"aggregator.block{i}.conv.bias", (C,), fan)
            t[f"aggregator.block{i}.gn.gamma"] = Tensor(
                np.ones(C, dtype=dtype), requires_grad=True
            )
            t[f"aggregator.block{i}.gn.beta"] = Tensor(
                np.zeros(C, dtype=dtype), requires_grad=True
            )
    else:
        H = config.gru_units
        in_dim = config.z_dim
        for layer in range(1, config.gru_layers + 1):
            base = f"aggregator.gru{layer}"
            param(f"{base}.w_ih_rz", (in_dim, 2 * H), H)
            param(f"{base}.w_hh_rz", (H, 2 * H), H)
            param(f"{base}.b_rz", (2 * H,), H)
            param(f"{base}.w_ih_n", (in_dim, H), H)
            param(f"{base}.w_hh_n", (H, H), H)
            param(f"{base}.b_ih_n", (H,), H)
            param(f"{base}.b_hh_n", (H,), H)
            in_dim = H

    for m in range(1, config.horizon + 1):
        param(f"predictor.w{m}", (C, config.z_dim), C)

    return ModelParams(config=config, tensors=t)


def add_classifier(params: ModelParams, head: str, num_classes: int,
                   rng: Rng, dtype=np.float32) -> None:
    """Attach a classifier head's parameters (and buffers) in place."""
    if head not in HEAD_VARIANTS:
        raise ConfigError(f"head must be one of {HEAD_VARIANTS}, got {head!r}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    C = params.config.context_dim
    t = params.tensors

    def param(name, shape, fan_in):
        t[name] = Tensor(_uniform_init(rng, shape, fan_in, dtype), requires_grad=True)

    for name in list(t):
        if name.startswith("classifier."):
            del t[name]
    for name in list(params.buffers):
        if name.startswith("classifier."):
            del params.buffers[name]

    if head == "linear":
        param("classifier.out.weight", (C, num_classes), C)
        param("classifier.out.bias", (num_classes,), C)
    else:
        dims = [(C, C, "fc1"), (C, 128, "fc2")]
        for fan_in, out, tag in dims:
            param(f"classifier.{tag}.weight", (fan_in, out), fan_in)
            param(f"classifier.{tag}.bias", (out,), fan_in)
        for tag, width in (("bn1", C), ("bn2", 128)):
            t[f"classifier.{tag}.gamma"] = Tensor(np.ones(width, dtype=dtype),
                                                  requires_grad=True)
            t[f"classifier.{tag}.beta"] = Tensor(np.zeros(width, dtype=dtype),
                                                 requires_grad=True)
            params.buffers[f"classifier.{tag}.running_mean"] = np.zeros(width, dtype)
            params.buffers[f"classifier.{tag}.running_var"] = np.ones(width, dtype)
        param("classifier.fc3.weight", (128, num_classes), 128)
        param("classifier.fc3.bias", (num_classes,), 128)
    params.meta["head"] = head
    params.meta["num_classes"] = int(num_classes)


# -- encoders ---------------------------------------------------------------


def _conv_relu_dropout(x, w, b, stride, padding, p, training, rng):
    h = conv1d(x, w, b, stride=stride, padding=padding)
    h = pointwise(h, "relu")
    return dropout(h, p, training, rng) if training and p > 0 else h


def encoder_forward(params: ModelParams, x: Tensor, training: bool = False,
                    rng: Rng | None = None) -> Tensor:
    """Encode [B, 3, T] waveforms into a latent sequence [B, T', z_dim].

    The strided variant halves the temporal resolution (T' = T/2, T must be
    even); the stride-1 variant preserves it via same-padding.
    """
    cfg = params.config
    if x.ndim != 3:
        raise ShapeError(f"encoder input must be [B, 3, T], got {x.shape}")
    if x.shape[1] != 3:
        raise ShapeError(f"encoder expects 3 input channels, got {x.shape[1]}")
    if training and cfg.dropout_p > 0 and rng is None:
        raise ConfigError("training-mode encoder forward needs an rng for dropout")
    T = x.shape[2]
    p = cfg.dropout_p
    t = params.tensors

    if cfg.encoder_variant == "enhanced":
        if T < 4:
            raise ShapeError(f"input length {T} too short, need >= 4")
        if T % 2 != 0:
            raise ShapeError(f"input length must be even, got {T}")
        h = x
        for i, (k, s) in enumerate(zip(ENHANCED_KERNELS, ENHANCED_STRIDES), start=1):
            pad = Padding.reflect(1, 1) if i == 1 else Padding.none()
            h = _conv_relu_dropout(h, t[f"encoder.conv{i}.weight"],
                                   t[f"encoder.conv{i}.bias"], s, pad, p,
                                   training, rng)
    else:
        k = cfg.original_kernel_size
        if T < k:
            raise ShapeError(f"input length {T} shorter than kernel {k}")
        half = (k - 1) // 2
        h = x
        for i in range(1, len(ORIGINAL_FILTERS) + 1):
            h = _conv_relu_dropout(h, t[f"encoder.conv{i}.weight"],
                                   t[f"encoder.conv{i}.bias"], 1,
                                   Padding.zeros(half, half), p, training, rng)
    return transpose(h, (0, 2, 1))  # [B, T', z_dim]


# -- aggregators --------------------------------------------------------------


def _per_step_channel_norm(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize each timestep over its channels (single group per step).

    Applying the group statistic per position instead of across time keeps
    the aggregator causal: position t's output never sees later positions.
    """
    B, C, T = h.shape
    cols = reshape(transpose(h, (0, 2, 1)), (B * T, C, 1))
    normed = group_norm(cols, 1, gamma, beta)
    return transpose(reshape(normed, (B, T, C)), (0, 2, 1))


def aggregator_forward(params: ModelParams, z: Tensor, training: bool = False,
                       rng: Rng | None = None) -> Tensor:
    """Turn a latent sequence [B, T', z_dim] into contexts [B, T', 256].

    Both variants are strictly causal: c_t depends only on z_{<=t}.
    """
    cfg = params.config
    if z.ndim != 3:
        raise ShapeError(f"aggregator input must be [B, T', z_dim], got {z.shape}")
    if z.shape[2] != cfg.z_dim:
        raise ShapeError(f"latent dim {z.shape[2]} != configured z_dim {cfg.z_dim}")
    if z.shape[1] < 1:
        raise ShapeError("aggregator needs at least one timestep")
    t = params.tensors

    if cfg.aggregator_variant == "causal_conv":
        h = transpose(z, (0, 2, 1))  # [B, z_dim, T']
        if cfg.z_dim != cfg.context_dim:
            h = conv1d(h, t["aggregator.proj.weight"], t["aggregator.proj.bias"])
        for i in range(1, cfg.causal_blocks + 1):
            k = CAUSAL_KERNEL_LADDER[i - 1]
            y = conv1d(h, t[f"aggregator.block{i}.conv.weight"],
                       t[f"aggregator.block{i}.conv.bias"],
                       stride=1, padding=Padding.causal(k))
            y = _per_step_channel_norm(y, t[f"aggregator.block{i}.gn.gamma"],
                                       t[f"aggregator.block{i}.gn.beta"])
            y = pointwise(y, "relu")
            h = add(y, h)  # residual skip
        return transpose(h, (0, 2, 1))

    # GRU: unroll layer by layer; inter-layer dropout during training only.
    if training and cfg.dropout_p > 0 and rng is None:
        raise ConfigError("training-mode GRU forward needs an rng for dropout")
    B, T, _ = z.shape
    H = cfg.gru_units
    seq = z
    for layer in range(1, cfg.gru_layers + 1):
        base = f"aggregator.gru{layer}"
        w_ih_rz, w_hh_rz = t[f"{base}.w_ih_rz"], t[f"{base}.w_hh_rz"]
        b_rz = t[f"{base}.b_rz"]
        w_ih_n, w_hh_n = t[f"{base}.w_ih_n"], t[f"{base}.w_hh_n"]
        b_ih_n, b_hh_n = t[f"{base}.b_ih_n"], t[f"{base}.b_hh_n"]
        h = Tensor(np.zeros((B, H), dtype=z.dtype))
        outs = []
        for step in range(T):
            x_t = getitem(seq, (slice(None), step, slice(None)))
            gates = pointwise(add(add(matmul(x_t, w_ih_rz), matmul(h, w_hh_rz)),
                                  reshape(b_rz, (1, 2 * H))), "sigmoid")
            r = getitem(gates, (slice(None), slice(0, H)))
            u = getitem(gates, (slice(None), slice(H, 2 * H)))
            cand = pointwise(
                add(add(matmul(x_t, w_ih_n), reshape(b_ih_n, (1, H))),
                    mul(r, add(matmul(h, w_hh_n), reshape(b_hh_n, (1, H))))),
                "tanh")
            h = add(mul(u, h), mul(add(mul(u, -1.0), 1.0), cand))
            outs.append(h)
        seq = stack(outs, axis=1)
        if layer < cfg.gru_layers:
            seq = dropout(seq, cfg.dropout_p, training, rng)
    return seq


def backbone_forward(params: ModelParams, x: Tensor, training: bool = False,
                     rng: Rng | None = None) -> tuple[Tensor, Tensor]:
    """Full representation path: returns (latents z, contexts c)."""
    z = encoder_forward(params, x, training, rng)
    c = aggregator_forward(params, z, training, rng)
    return z, c


# -- classifier ----------------------------------------------------------------


def classifier_forward(params: ModelParams, feature: Tensor, training: bool = False,
                       rng: Rng | None = None) -> Tensor:
    """Map frozen features [B, 256] to class logits.

    The linear head is a single affine map. The mlp head stacks
    linear -> batch norm -> ReLU -> dropout twice (widths 256 then 128)
    before the output affine layer.
    """
    head = params.meta.get("head")
    if head is None:
        raise ConfigError("no classifier attached; call add_classifier first")
    if feature.ndim != 2 or feature.shape[1] != params.config.context_dim:
        raise ShapeError(
            f"classifier expects [B, {params.config.context_dim}], got {feature.shape}"
        )
    t = params.tensors
    if head == "linear":
        return add(matmul(feature, t["classifier.out.weight"]),
                   reshape(t["classifier.out.bias"], (1, -1)))
    p = params.config.dropout_p
    h = feature
    for tag, bn in (("fc1", "bn1"), ("fc2", "bn2")):
        h = add(matmul(h, t[f"classifier.{tag}.weight"]),
                reshape(t[f"classifier.{tag}.bias"], (1, -1)))
        h = batch_norm(h, t[f"classifier.{bn}.gamma"], t[f"classifier.{bn}.beta"],
                       params.buffers[f"classifier.{bn}.running_mean"],
                       params.buffers[f"classifier.{bn}.running_var"],
                       training=training)
        h = pointwise(h, "relu")
        if training and p > 0:
            h = dropout(h, p, training, rng)
    return add(matmul(h, t["classifier.fc3.weight"]),
               reshape(t["classifier.fc3.bias"], (1, -1)))


# -- persistence ----------------------------------------------------------------


def save_checkpoint(path, params: ModelParams) -> None:
    """Write params to an .npz container; buffers and config ride along.

    Arrays are stored verbatim, so load followed by save is bitwise stable.
    """
    payload = {f"param:{n}": t.data for n, t in params.tensors.items()}
    payload.update({f"buffer:{n}": b for n, b in params.buffers.items()})
    header = {"config": params.config.to_dict(), "meta": params.meta}
    payload["__header__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **payload)


def load_checkpoint(path) -> ModelParams:
    with np.load(path) as zf:
        header = json.loads(bytes(zf["__header__"]).decode("utf-8"))
        tensors = {}
        buffers = {}
        for key in zf.files:
            if key.startswith("param:"):
                tensors[key[len("param:"):]] = Tensor(zf[key], requires_grad=True)
            elif key.startswith("buffer:"):
                buffers[key[len("buffer:"):]] = np.array(zf[key])
    config = ModelConfig.from_dict(header["config"])
    return ModelParams(config=config, tensors=tensors, buffers=buffers,
                       meta=header.get("meta", {}))


def params_digest(params: ModelParams, names=None) -> str:
    """SHA-256 over (sorted name, shape, raw bytes); detects any drift."""
    h = hashlib.sha256()
    for name in sorted(names if names is not None else params.tensors):
        t = params.tensors[name]
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def count_params(params: ModelParams) -> int:
    return sum(t.size for t in params.tensors.values())
