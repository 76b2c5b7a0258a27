"""Image encoder, sparse decoder and the two grid-conditioned upsampling stages."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .pointset import ball_query_all
from .tensor import Tensor

SCOPES = ("encoder", "sparse_decoder", "dense_stage2", "dense_stage3", "total")
DENSE_STAGES = (2, 3)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    encoder_channels: tuple = (16, 16, 32, 32, 64, 64)
    encoder_strides: tuple = (1, 2, 1, 2, 1, 2)
    kernel_size: int = 3
    latent_dim: int = 512
    decoder_hidden: tuple = (256, 256)
    base_n: int = 256
    upsample_factor: int = 4
    global_mlp: tuple = (32, 64, 64)
    local_mlp: tuple = (32, 32, 64)
    aggregation_mlp: tuple = (32, 64, 64)
    ball_radius: tuple = (0.2, 0.1)
    ball_cap: int = 16
    grid_size: float = 0.2
    preset: str = "desk"

    def __post_init__(self):
        if len(self.encoder_channels) != len(self.encoder_strides):
            raise ValueError("encoder_channels and encoder_strides differ in length")
        if self.upsample_factor != len(self.grid_codes):
            raise ValueError("upsample_factor must equal the number of grid codes")
        if len(self.ball_radius) != len(DENSE_STAGES):
            raise ValueError("need one ball radius per dense stage")
        if self.encoder_spatial() < 1:
            raise ValueError("encoder strides shrink the image below one pixel")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return replace(cls(), **overrides)

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        base = cls(
            image_size=128,
            encoder_channels=(16, 16, 32, 32, 32, 64, 64, 64, 128, 128, 128, 256, 256, 256, 256, 512),
            encoder_strides=(1, 1, 2, 1, 1, 2, 1, 1, 2, 1, 1, 2, 1, 1, 1, 2),
            base_n=1024,
            ball_radius=(0.1, 0.05),
            preset="paper",
        )
        return replace(base, **overrides)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "ModelConfig":
        if name == "desk":
            return cls.desk(**overrides)
        if name == "paper":
            return cls.paper(**overrides)
        raise ValueError(f"unknown preset {name!r}")

    @property
    def grid_codes(self) -> np.ndarray:
        # one scalar per child, evenly spanning the grid extent
        return np.linspace(-self.grid_size / 2, self.grid_size / 2, 4)

    @property
    def n_g(self) -> int:
        return self.global_mlp[-1]

    @property
    def n_l(self) -> int:
        return self.local_mlp[-1]

    @property
    def aggregated_width(self) -> int:
        return 3 + self.n_g + self.n_l + 1

    def resolutions(self) -> tuple[int, int, int]:
        n, k = self.base_n, self.upsample_factor
        return n, n * k, n * k * k

    def radius_for(self, stage: int) -> float:
        return self.ball_radius[DENSE_STAGES.index(stage)]

    def encoder_spatial(self) -> int:
        size = self.image_size
        pad = self.kernel_size // 2
        for s in self.encoder_strides:
            size = (size + 2 * pad - self.kernel_size) // s + 1
        return size

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FeatureBundle:
    global_feature: np.ndarray  # [1 x n_g]
    local_features: np.ndarray  # [n x n_l]
    grid_codes: np.ndarray  # [upsample_factor x 1]
    aggregated: np.ndarray  # [4n x (3 + n_g + n_l + 1)]


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _mlp_shapes(prefix: str, widths, d_in: int) -> list[tuple[str, tuple]]:
    out = []
    for i, w in enumerate(widths):
        out += [(f"{prefix}.{i}.w", (d_in, w)), (f"{prefix}.{i}.b", (w,))]
        d_in = w
    return out


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) for every parameter of the model."""
    shapes: list[tuple[str, tuple]] = []
    c_in, k = 3, cfg.kernel_size
    for i, c in enumerate(cfg.encoder_channels):
        shapes += [(f"encoder.conv{i}.w", (c, c_in, k, k)), (f"encoder.conv{i}.b", (c,))]
        c_in = c
    flat = c_in * cfg.encoder_spatial() ** 2
    shapes += [("encoder.fc.w", (flat, cfg.latent_dim)), ("encoder.fc.b", (cfg.latent_dim,))]
    shapes += _mlp_shapes("sparse_decoder.fc", tuple(cfg.decoder_hidden) + (cfg.base_n * 3,),
                          cfg.latent_dim)
    for stage in DENSE_STAGES:
        p = f"dense_stage{stage}"
        shapes += _mlp_shapes(f"{p}.global", cfg.global_mlp, 3)
        shapes += _mlp_shapes(f"{p}.local", cfg.local_mlp, 3)
        shapes += _mlp_shapes(f"{p}.agg", cfg.aggregation_mlp, cfg.aggregated_width)
        shapes += [(f"{p}.head.w", (cfg.aggregation_mlp[-1], 3)), (f"{p}.head.b", (3,))]
    return shapes


def direct_fc_decoder_params(latent_dim: int, hidden, n_points: int) -> int:
    """Parameter count of a fully connected decoder emitting ``n_points`` at once."""
    total, d_in = 0, latent_dim
    for w in tuple(hidden) + (n_points * 3,):
        total += d_in * w + w
        d_in = w
    return total


class DensePCRModel:
    """Named parameter store for all three stages; stages never share tensors."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(cfg)
        names = [n for n, _ in expected]
        if list(params) != names:
            missing = set(names) ^ set(params)
            raise ValueError(f"parameter names do not match config: {sorted(missing)[:5]}")
        for name, shape in expected:
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "DensePCRModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(cfg):
            if name.endswith(".b"):
                arr = np.zeros(shape)
            elif len(shape) == 4:
                rf = shape[2] * shape[3]
                arr = _glorot(rng, shape, shape[1] * rf, shape[0] * rf)
            else:
                arr = _glorot(rng, shape, shape[0], shape[1])
            params[name] = Tensor(arr, requires_grad=True)
        return cls(cfg, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self, scope: str = "total") -> list[str]:
        if scope not in SCOPES:
            raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
        if scope == "total":
            return list(self.params)
        return [n for n in self.params if n.split(".", 1)[0] == scope]

    def count_params(self, scope: str = "total") -> int:
        return int(sum(self.params[n].data.size for n in self.names(scope)))

    def copy(self) -> "DensePCRModel":
        return DensePCRModel(self.cfg, {n: Tensor(t.data.copy(), requires_grad=True)
                                        for n, t in self.params.items()})

    def zero_heads(self) -> "DensePCRModel":
        """Copy whose dense-stage output heads are zero: every child equals its parent."""
        out = self.copy()
        for stage in DENSE_STAGES:
            for suffix in ("w", "b"):
                out.params[f"dense_stage{stage}.head.{suffix}"].data[...] = 0.0
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            if arrays[n].shape != t.shape:
                raise ValueError(f"{n}: shape {arrays[n].shape} does not match {t.shape}")
            t.data = np.array(arrays[n], dtype=np.float64)


def count_params(model: DensePCRModel, scope: str = "total") -> int:
    return model.count_params(scope)


def _mlp(x: Tensor, model: DensePCRModel, prefix: str, depth: int, final_relu: bool = True) -> Tensor:
    for i in range(depth):
        x = T.affine(x, model[f"{prefix}.{i}.w"], model[f"{prefix}.{i}.b"])
        if final_relu or i < depth - 1:
            x = T.relu(x)
    return x


def encode_image(img, model: DensePCRModel) -> Tensor:
    """[3 x H x W] image -> [1 x latent_dim] latent row."""
    cfg = model.cfg
    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.shape != (3, cfg.image_size, cfg.image_size):
        raise ValueError(f"image must be 3x{cfg.image_size}x{cfg.image_size}, got {x.shape}")
    pad = cfg.kernel_size // 2
    for i, stride in enumerate(cfg.encoder_strides):
        x = T.conv2d(x, model[f"encoder.conv{i}.w"], model[f"encoder.conv{i}.b"],
                     stride=stride, padding=pad)
        x = T.relu(x)
    x = T.reshape(x, (1, -1))
    return T.affine(x, model["encoder.fc.w"], model["encoder.fc.b"])


def decode_sparse(latent: Tensor, model: DensePCRModel) -> Tensor:
    cfg = model.cfg
    if latent.shape != (1, cfg.latent_dim):
        raise ValueError(f"latent must be [1 x {cfg.latent_dim}], got {latent.shape}")
    out = _mlp(latent, model, "sparse_decoder.fc", len(cfg.decoder_hidden) + 1, final_relu=False)
    return T.reshape(out, (cfg.base_n, 3))


def global_features(pc: Tensor, model: DensePCRModel, stage: int) -> Tensor:
    """Shared per-point MLP followed by a max over points: [n x 3] -> [1 x n_g]."""
    h = _mlp(pc, model, f"dense_stage{stage}.global", len(model.cfg.global_mlp))
    pooled, _ = T.max_over_rows(h)
    return T.reshape(pooled, (1, -1))


def local_features(pc: Tensor, model: DensePCRModel, stage: int,
                   radius: Optional[float] = None, cap: Optional[int] = None) -> Tensor:
    """Per-point feature pooled over its ball neighbourhood: [n x 3] -> [n x n_l]."""
    cfg = model.cfg
    radius = cfg.radius_for(stage) if radius is None else radius
    cap = cfg.ball_cap if cap is None else cap
    table, _ = ball_query_all(pc.data, radius, cap)
    rel = T.sub(T.gather_rows(pc, table.reshape(-1)), T.tile_rows(pc, cap))
    h = _mlp(rel, model, f"dense_stage{stage}.local", len(cfg.local_mlp))
    pooled, _ = T.segment_max(h, cap)
    return pooled


def dense_reconstruct(pc, model: DensePCRModel, stage: int, return_features: bool = False):
    """Upsample ``[n x 3] -> [4n x 3]``; children of point i are rows 4i..4i+3."""
    cfg = model.cfg
    if stage not in DENSE_STAGES:
        raise ValueError(f"dense stage must be one of {DENSE_STAGES}, got {stage}")
    pc = pc if isinstance(pc, Tensor) else Tensor(pc)
    if pc.data.ndim != 2 or pc.shape[1] != 3:
        raise ValueError(f"input cloud must be [n x 3], got {pc.shape}")
    n, k = pc.shape[0], cfg.upsample_factor
    x_g = global_features(pc, model, stage)
    x_l = local_features(pc, model, stage)
    parent_feat = T.concat_cols([pc, T.tile_rows(x_g, n), x_l])
    codes = Tensor(np.tile(cfg.grid_codes, n).reshape(-1, 1))
    aggregated = T.concat_cols([T.tile_rows(parent_feat, k), codes])
    h = _mlp(aggregated, model, f"dense_stage{stage}.agg", len(cfg.aggregation_mlp))
    offset = T.affine(h, model[f"dense_stage{stage}.head.w"], model[f"dense_stage{stage}.head.b"])
    out = T.add(T.tile_rows(pc, k), offset)
    if not return_features:
        return out
    bundle = FeatureBundle(x_g.data, x_l.data, cfg.grid_codes.reshape(-1, 1), aggregated.data)
    return out, bundle


def forward_pyramid(img, model: DensePCRModel) -> tuple[Tensor, Tensor, Tensor]:
    pc1 = decode_sparse(encode_image(img, model), model)
    pc2 = dense_reconstruct(pc1, model, 2)
    pc3 = dense_reconstruct(pc2, model, 3)
    return pc1, pc2, pc3
