"""U-Net-style 3D backbone plus the domain-regularization head.

Encoder: per stage two 3x3x3 convs (pad 1) + relu, then 2x2x2 maxpool,
channels doubling.  Bottleneck: two more convs.  Decoder mirrors the
encoder with stride-2 transposed convs and skip concatenation, ending in
a 1x1x1 conv and per-voxel softmax.  The regularization head maps the
globally-pooled bottleneck vector through three dense layers + softmax to
a per-site probability vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn_ops
from .tensor import ShapeError, Tensor, concat

VARIANTS = ("BM", "BDM", "PC", "RAND", "DU")
REGULARIZED = ("PC", "RAND", "DU")

PARAM_FILE_MAGIC = b"DSSEG1"


@dataclass
class ArchSpec:
    in_channels: int = 4
    base_channels: int = 8
    stages: int = 4
    seg_classes: int = 2
    n_domains: int = 2
    reg_hidden: Tuple[int, int] = (64, 32)
    dropout_rate: float = 0.0

    @property
    def latent_dim(self) -> int:
        return self.base_channels * 2 ** self.stages

    def validate(self):
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class ModelBundle:
    spec: ArchSpec
    variant: str
    params_E: Dict[str, Tensor] = field(default_factory=dict)
    params_D: Dict[str, Tensor] = field(default_factory=dict)
    params_R: Dict[str, Tensor] = field(default_factory=dict)

    @property
    def has_reg_head(self) -> bool:
        return self.variant in REGULARIZED

    def parameters(self) -> Dict[str, Tensor]:
        merged = {}
        for prefix, group in (("E", self.params_E), ("D", self.params_D),
                              ("R", self.params_R)):
            for name, p in group.items():
                merged[f"{prefix}.{name}"] = p
        return merged

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


def _param(rng, shape, sigma, dtype):
    return Tensor(rng.normal(0.0, sigma, size=shape).astype(dtype),
                  requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _encoder_channels(spec: ArchSpec) -> List[int]:
    return [spec.base_channels * 2 ** i for i in range(spec.stages)]


def build_model(spec: ArchSpec, variant: str = "BM", seed: int = 0,
                init_sigma: float = 0.05, head_init_sigma: Optional[float] = None,
                dtype=np.float32) -> ModelBundle:
    """Gaussian-initialized weights, zero biases, deterministic per seed.

    Each component draws from its own child generator so the encoder and
    decoder initializations are identical across variants for a fixed seed.
    The dense head may use its own scale (`head_init_sigma`); dense layers
    need a larger one than the convolutions to produce non-degenerate
    domain predictions from small-magnitude latents.
    """
    spec.validate()
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    ss = np.random.SeedSequence(seed)
    rng_e, rng_d, rng_r = (np.random.default_rng(s) for s in ss.spawn(3))

    model = ModelBundle(spec=spec, variant=variant)
    pe, pd = model.params_E, model.params_D

    chans = _encoder_channels(spec)
    c_in = spec.in_channels
    for i, c in enumerate(chans):
        pe[f"enc{i}.conv1.w"] = _param(rng_e, (c, c_in, 3, 3, 3), init_sigma, dtype)
        pe[f"enc{i}.conv1.b"] = _zeros(c, dtype)
        pe[f"enc{i}.conv2.w"] = _param(rng_e, (c, c, 3, 3, 3), init_sigma, dtype)
        pe[f"enc{i}.conv2.b"] = _zeros(c, dtype)
        c_in = c
    p = spec.latent_dim
    pe["bott.conv1.w"] = _param(rng_e, (p, chans[-1], 3, 3, 3), init_sigma, dtype)
    pe["bott.conv1.b"] = _zeros(p, dtype)
    pe["bott.conv2.w"] = _param(rng_e, (p, p, 3, 3, 3), init_sigma, dtype)
    pe["bott.conv2.b"] = _zeros(p, dtype)

    c_up = p
    for i in reversed(range(spec.stages)):
        c = chans[i]
        pd[f"dec{i}.up.w"] = _param(rng_d, (c_up, c, 2, 2, 2), init_sigma, dtype)
        pd[f"dec{i}.up.b"] = _zeros(c, dtype)
        pd[f"dec{i}.conv1.w"] = _param(rng_d, (c, 2 * c, 3, 3, 3), init_sigma, dtype)
        pd[f"dec{i}.conv1.b"] = _zeros(c, dtype)
        pd[f"dec{i}.conv2.w"] = _param(rng_d, (c, c, 3, 3, 3), init_sigma, dtype)
        pd[f"dec{i}.conv2.b"] = _zeros(c, dtype)
        c_up = c
    pd["out.w"] = _param(rng_d, (spec.seg_classes, chans[0], 1, 1, 1),
                         init_sigma, dtype)
    pd["out.b"] = _zeros(spec.seg_classes, dtype)

    if model.has_reg_head:
        pr = model.params_R
        sigma_r = init_sigma if head_init_sigma is None else head_init_sigma
        widths = [p, spec.reg_hidden[0], spec.reg_hidden[1], spec.n_domains]
        for i in range(3):
            pr[f"fc{i}.w"] = _param(rng_r, (widths[i + 1], widths[i]),
                                    sigma_r, dtype)
            pr[f"fc{i}.b"] = _zeros(widths[i + 1], dtype)
    return model


def _check_patch(spec: ArchSpec, patch: Tensor):
    c, d, h, w = patch.shape
    if c != spec.in_channels:
        raise ShapeError(f"patch has {c} channels, spec wants {spec.in_channels}")
    for ext in (d, h, w):
        if ext % 2 ** spec.stages != 0:
            raise ShapeError(
                f"patch extent {ext} not divisible by 2^{spec.stages}")


def encode(model: ModelBundle, patch: Tensor, training: bool = False,
           dropout_rng: Optional[np.random.Generator] = None):
    """Returns (bottleneck feature map, per-stage pre-pool skips)."""
    spec = model.spec
    _check_patch(spec, patch)
    pe = model.params_E
    x = patch
    skips = []
    deep_from = spec.stages - 2  # BDM dropout lives on the two deepest stages
    for i in range(spec.stages):
        x = nn_ops.conv3d(x, pe[f"enc{i}.conv1.w"], pe[f"enc{i}.conv1.b"],
                          padding=1).relu()
        x = nn_ops.conv3d(x, pe[f"enc{i}.conv2.w"], pe[f"enc{i}.conv2.b"],
                          padding=1).relu()
        skips.append(x)
        x = nn_ops.maxpool3d(x)
        if (model.variant == "BDM" and spec.dropout_rate > 0
                and i >= deep_from):
            x = nn_ops.dropout(x, spec.dropout_rate, dropout_rng,
                               training=training)
    x = nn_ops.conv3d(x, pe["bott.conv1.w"], pe["bott.conv1.b"], padding=1).relu()
    x = nn_ops.conv3d(x, pe["bott.conv2.w"], pe["bott.conv2.b"], padding=1).relu()
    return x, skips


def to_latent(bottleneck: Tensor) -> Tensor:
    """Global average pool: [p, d, h, w] -> [p]."""
    return nn_ops.spatial_mean(bottleneck)


def decode(model: ModelBundle, bottleneck: Tensor, skips: List[Tensor]) -> Tensor:
    spec = model.spec
    if len(skips) != spec.stages:
        raise ShapeError(f"expected {spec.stages} skips, got {len(skips)}")
    pd = model.params_D
    x = bottleneck
    for i in reversed(range(spec.stages)):
        x = nn_ops.conv_transpose3d(x, pd[f"dec{i}.up.w"], pd[f"dec{i}.up.b"],
                                    stride=2)
        skip = skips[i]
        if x.shape[1:] != skip.shape[1:]:
            raise ShapeError(
                f"skip shape {skip.shape} does not match upsampled {x.shape}")
        x = concat([x, skip], axis=0)
        x = nn_ops.conv3d(x, pd[f"dec{i}.conv1.w"], pd[f"dec{i}.conv1.b"],
                          padding=1).relu()
        x = nn_ops.conv3d(x, pd[f"dec{i}.conv2.w"], pd[f"dec{i}.conv2.b"],
                          padding=1).relu()
    logits = nn_ops.conv3d(x, pd["out.w"], pd["out.b"])
    return nn_ops.softmax(logits, axis=0)


def regularize_head(model: ModelBundle, r: Tensor) -> Tensor:
    if not model.has_reg_head:
        raise ValueError(
            f"regularization head absent for variant {model.variant}")
    pr = model.params_R
    x = nn_ops.dense(r, pr["fc0.w"], pr["fc0.b"]).relu()
    x = nn_ops.dense(x, pr["fc1.w"], pr["fc1.b"]).relu()
    x = nn_ops.dense(x, pr["fc2.w"], pr["fc2.b"])
    return nn_ops.softmax(x, axis=0)


def forward_train(model: ModelBundle, patch: Tensor,
                  dropout_rng: Optional[np.random.Generator] = None):
    """Training-mode forward: (seg probs, domain probs or None)."""
    bott, skips = encode(model, patch, training=True, dropout_rng=dropout_rng)
    s = decode(model, bott, skips)
    c = regularize_head(model, to_latent(bott)) if model.has_reg_head else None
    return s, c


def forward_infer(model: ModelBundle, patch: Tensor) -> Tensor:
    """Inference-mode forward: dropout off, regularization head detached."""
    bott, skips = encode(model, patch, training=False)
    return decode(model, bott, skips)


# -- parameter serialization ------------------------------------------


def save_params(model: ModelBundle, path):
    """Flat binary dump: magic, then (name_len u16, name, rank u8,
    extents u32..., float32 little-endian values) per parameter."""
    with open(path, "wb") as f:
        f.write(PARAM_FILE_MAGIC)
        for name, p in sorted(model.parameters().items()):
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", p.values.ndim))
            for ext in p.values.shape:
                f.write(struct.pack("<I", ext))
            f.write(np.ascontiguousarray(
                p.values, dtype="<f4").tobytes())


def load_params(model: ModelBundle, path):
    """Load a save_params file into a bundle with matching architecture."""
    params = model.parameters()
    with open(path, "rb") as f:
        magic = f.read(len(PARAM_FILE_MAGIC))
        if magic != PARAM_FILE_MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        while True:
            head = f.read(2)
            if not head:
                break
            (nlen,) = struct.unpack("<H", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            vals = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            if name not in params:
                raise ValueError(f"unknown parameter {name!r} in {path}")
            if params[name].values.shape != shape:
                raise ShapeError(
                    f"parameter {name}: file shape {shape} != model "
                    f"shape {params[name].values.shape}")
            params[name].values = vals.astype(params[name].values.dtype)
    return model
