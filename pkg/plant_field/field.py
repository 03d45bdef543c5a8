"""Joint radiance field: hash-grid position encoding, spherical-harmonic
direction encoding and a multi-stream MLP producing density, color,
instance code and semantic level."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import torch
from scipy.special import factorial, lpmv
from torch import nn

from .const import (
    _LOGGER,
    HASH_FEATURES,
    HASH_LEVELS,
    HASH_LOG2_TABLE,
    HASH_LR,
    HASH_MAX_RESOLUTION,
    HASH_MIN_RESOLUTION,
    HIDDEN_WIDTH,
    MLP_LR,
    SH_DEGREE,
)
from .data import make_rng
from .exceptions import InvalidInputError

if TYPE_CHECKING:
    from pathlib import Path

    from .data import Bounds, FloatArray

HASH_PRIMES = (1, 2654435761, 805459861)
TABLE_INIT_SCALE = 1e-4
GEOMETRY_WIDTH = 16
OUTPUT_WIDTH = 7
UNIT_TOLERANCE = 1e-6

CHECKPOINT_MAGIC = b"PFFIELD1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    """Architecture of the joint field."""

    levels: int = HASH_LEVELS
    features: int = HASH_FEATURES
    log2_table: int = HASH_LOG2_TABLE
    min_resolution: int = HASH_MIN_RESOLUTION
    max_resolution: int = HASH_MAX_RESOLUTION
    sh_degree: int = SH_DEGREE
    hidden_width: int = HIDDEN_WIDTH
    hash_lr: float = HASH_LR
    mlp_lr: float = MLP_LR
    dtype: str = "float32"

    @property
    def torch_dtype(self) -> torch.dtype:
        """Return the torch dtype."""
        return getattr(torch, self.dtype)


@dataclass
class FieldSample:
    """Field outputs for a batch of points."""

    sigma: torch.Tensor
    rgb: torch.Tensor
    instance: torch.Tensor
    semantic: torch.Tensor


def level_resolutions(levels: int, min_resolution: int, max_resolution: int) -> list[int]:
    """Return strictly increasing per-level grid resolutions."""
    if levels == 1:
        return [min_resolution]
    growth = math.exp((math.log(max_resolution) - math.log(min_resolution)) / (levels - 1))
    resolutions: list[int] = []
    for level in range(levels):
        resolution = math.floor(min_resolution * growth**level + 1e-9)
        if resolutions and resolution <= resolutions[-1]:
            resolution = resolutions[-1] + 1
        resolutions.append(resolution)
    return resolutions


class HashGridEncoder(nn.Module):
    """Multiresolution hash encoding of positions inside the scene bounds."""

    def __init__(
        self, bounds: Bounds, config: FieldConfig, rng: np.random.Generator
    ) -> None:
        """Initialize the tables."""
        super().__init__()
        dtype = config.torch_dtype
        self.levels = config.levels
        self.features = config.features
        self.table_size = 2**config.log2_table
        self.resolutions = level_resolutions(
            config.levels, config.min_resolution, config.max_resolution
        )
        self.dense = [(n + 1) ** 3 <= self.table_size for n in self.resolutions]
        self.register_buffer("lower", torch.as_tensor(bounds[0], dtype=dtype))
        self.register_buffer("extent", torch.as_tensor(bounds[1] - bounds[0], dtype=dtype))
        init = rng.uniform(
            -TABLE_INIT_SCALE,
            TABLE_INIT_SCALE,
            (config.levels, self.table_size, config.features),
        )
        self.tables = nn.Parameter(torch.as_tensor(init, dtype=dtype))
        offsets = [[(c >> d) & 1 for d in range(3)] for c in range(8)]
        self.register_buffer("corners", torch.tensor(offsets, dtype=torch.int64))

    @property
    def output_dim(self) -> int:
        """Return L * F."""
        return self.levels * self.features

    def vertex_index(self, level: int, vertices: torch.Tensor) -> torch.Tensor:
        """Return table rows of integer grid vertices (..., 3) at a level."""
        if self.dense[level]:
            side = self.resolutions[level] + 1
            return vertices[..., 0] + side * (vertices[..., 1] + side * vertices[..., 2])
        hashed = vertices[..., 0] * HASH_PRIMES[0]
        hashed = torch.bitwise_xor(hashed, vertices[..., 1] * HASH_PRIMES[1])
        hashed = torch.bitwise_xor(hashed, vertices[..., 2] * HASH_PRIMES[2])
        return torch.remainder(hashed, self.table_size)

    def forward(self, xyz: torch.Tensor) -> torch.Tensor:
        """Encode (N, 3) world positions into (N, L * F) features."""
        unit = ((xyz - self.lower) / self.extent).clamp(0.0, 1.0)
        encoded = []
        for level, resolution in enumerate(self.resolutions):
            position = unit * resolution
            cell = torch.floor(position).to(torch.int64).clamp(max=resolution - 1)
            frac = position - cell.to(position.dtype)
            vertices = cell[:, None, :] + self.corners[None, :, :]
            weights = torch.where(
                self.corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]
            ).prod(dim=-1)
            rows = self.tables[level][self.vertex_index(level, vertices)]
            encoded.append((weights[..., None] * rows).sum(dim=1))
        return torch.cat(encoded, dim=-1)


def sh_basis(directions: FloatArray, degree: int = SH_DEGREE) -> FloatArray:
    """Evaluate real spherical harmonics of unit directions, (N, (degree+1)^2).

    Columns run over j = 0..degree and m = -j..j.
    """
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(directions, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        msg = "Direction encoding needs unit vectors"
        raise InvalidInputError(msg)
    cos_theta = np.clip(directions[:, 2] / norms, -1.0, 1.0)
    phi = np.mod(np.arctan2(directions[:, 1], directions[:, 0]), 2.0 * math.pi)
    columns = []
    for j in range(degree + 1):
        for m in range(-j, j + 1):
            k = abs(m)
            norm = math.sqrt((2 * j + 1) / (4 * math.pi) * factorial(j - k) / factorial(j + k))
            legendre = lpmv(k, j, cos_theta)
            if m > 0:
                columns.append(math.sqrt(2.0) * norm * np.cos(k * phi) * legendre)
            elif m < 0:
                columns.append(math.sqrt(2.0) * norm * np.sin(k * phi) * legendre)
            else:
                columns.append(norm * legendre)
    return np.stack(columns, axis=1)


def _init_linear(layer: nn.Linear, rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_(torch.as_tensor(rng.uniform(-bound, bound, tuple(layer.weight.shape))))
        layer.bias.copy_(torch.as_tensor(rng.uniform(-bound, bound, tuple(layer.bias.shape))))


class JointField(nn.Module):
    """Position trunk with a density output and a direction-aware head."""

    def __init__(self, bounds: Bounds, config: FieldConfig | None = None, seed: int = 0) -> None:
        """Initialize the field."""
        super().__init__()
        self.config = config or FieldConfig()
        dtype = self.config.torch_dtype
        rng = make_rng(seed)
        self.encoder = HashGridEncoder(bounds, self.config, rng)
        width = self.config.hidden_width
        sh_dim = (self.config.sh_degree + 1) ** 2
        self.trunk = nn.Sequential(
            nn.Linear(self.encoder.output_dim, width),
            nn.ReLU(),
            nn.Linear(width, GEOMETRY_WIDTH),
        )
        self.head = nn.Sequential(
            nn.Linear(GEOMETRY_WIDTH - 1 + sh_dim, width),
            nn.ReLU(),
            nn.Linear(width, OUTPUT_WIDTH),
        )
        for module in (*self.trunk, *self.head):
            if isinstance(module, nn.Linear):
                _init_linear(module, rng)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        """Return the parameter dtype."""
        return self.encoder.tables.dtype

    def hash_parameters(self) -> list[nn.Parameter]:
        """Return the hash-table parameters."""
        return [self.encoder.tables]

    def mlp_parameters(self) -> list[nn.Parameter]:
        """Return the MLP parameters."""
        return [*self.trunk.parameters(), *self.head.parameters()]

    def ordered_parameters(self) -> list[nn.Parameter]:
        """Return parameters in flat-vector order."""
        return [*self.hash_parameters(), *self.mlp_parameters()]

    def direction_features(self, directions: torch.Tensor | FloatArray) -> torch.Tensor:
        """Return the spherical-harmonic features of unit directions."""
        if isinstance(directions, torch.Tensor):
            directions = directions.detach().cpu().numpy()
        return torch.as_tensor(sh_basis(directions, self.config.sh_degree), dtype=self.dtype)

    def geometry(self, xyz: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return density and the remaining trunk features of (N, 3) positions."""
        features = self.trunk(self.encoder(xyz))
        # Strictly positive; empty space only approaches zero density.
        sigma = nn.functional.elu(features[:, 0]) + 1.0
        return sigma, features[:, 1:]

    def density(self, xyz: torch.Tensor) -> torch.Tensor:
        """Return density only."""
        return self.geometry(xyz)[0]

    def forward(self, xyz: torch.Tensor, directions: torch.Tensor | FloatArray) -> FieldSample:
        """Evaluate the field.

        `xyz` is (N, 3) with one direction per point, or (R, S, 3) with one
        direction per ray broadcast over its S samples.
        """
        per_ray = xyz.ndim == 3
        flat = xyz.reshape(-1, 3)
        sigma, geometry = self.geometry(flat)
        sh = self.direction_features(directions)
        if per_ray:
            sh = sh[:, None, :].expand(xyz.shape[0], xyz.shape[1], sh.shape[-1]).reshape(-1, sh.shape[-1])
        outputs = torch.sigmoid(self.head(torch.cat([geometry, sh], dim=-1)))
        shape = xyz.shape[:-1]
        return FieldSample(
            sigma=sigma.reshape(shape),
            rgb=outputs[:, 0:3].reshape(*shape, 3),
            instance=outputs[:, 3:6].reshape(*shape, 3),
            semantic=outputs[:, 6].reshape(shape),
        )


def field_backward(
    field: JointField,
    xyz: torch.Tensor,
    directions: torch.Tensor | FloatArray,
    upstream: FieldSample,
) -> None:
    """Accumulate parameter gradients for given output gradients."""
    sample = field(xyz, directions)
    outputs = (sample.sigma, sample.rgb, sample.instance, sample.semantic)
    grads = (upstream.sigma, upstream.rgb, upstream.instance, upstream.semantic)
    torch.autograd.backward(outputs, grads)


class ParamStore:
    """Adam over the field with hash-table and MLP learning rates."""

    def __init__(
        self,
        field: JointField,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        """Initialize the optimizer and zeroed gradient buffers."""
        self.field = field
        self.parameters = field.ordered_parameters()
        for parameter in self.parameters:
            parameter.grad = torch.zeros_like(parameter)
        self.optimizer = torch.optim.Adam(
            [
                {"params": field.hash_parameters(), "lr": field.config.hash_lr},
                {"params": field.mlp_parameters(), "lr": field.config.mlp_lr},
            ],
            betas=betas,
            eps=eps,
        )
        self.steps = 0

    def step(self) -> None:
        """Apply one bias-corrected Adam update and zero the gradients."""
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=False)
        self.steps += 1

    def zero_grad(self) -> None:
        """Zero the gradient buffer."""
        self.optimizer.zero_grad(set_to_none=False)

    def _flatten(self, tensors: list[torch.Tensor]) -> FloatArray:
        return torch.cat([t.detach().reshape(-1) for t in tensors]).cpu().numpy().astype(np.float64)

    def flat_parameters(self) -> FloatArray:
        """Return the parameter vector."""
        return self._flatten(self.parameters)

    def flat_gradients(self) -> FloatArray:
        """Return the gradient vector."""
        return self._flatten([p.grad for p in self.parameters])

    def moments(self) -> tuple[FloatArray, FloatArray]:
        """Return Adam's first and second moment vectors."""
        first, second = [], []
        for parameter in self.parameters:
            state = self.optimizer.state.get(parameter, {})
            first.append(state.get("exp_avg", torch.zeros_like(parameter)))
            second.append(state.get("exp_avg_sq", torch.zeros_like(parameter)))
        return self._flatten(first), self._flatten(second)

    def parameter_norm(self) -> float:
        """Return the L2 norm of all parameters."""
        return float(np.linalg.norm(self.flat_parameters()))

    def load_vectors(self, params: FloatArray, first: FloatArray, second: FloatArray, steps: int) -> None:
        """Restore parameters and optimizer moments."""
        offset = 0
        with torch.no_grad():
            for parameter in self.parameters:
                size = parameter.numel()
                chunk = slice(offset, offset + size)
                parameter.copy_(torch.as_tensor(params[chunk]).reshape(parameter.shape))
                if steps > 0:
                    self.optimizer.state[parameter] = {
                        "step": torch.tensor(float(steps)),
                        "exp_avg": torch.as_tensor(first[chunk], dtype=parameter.dtype).reshape(parameter.shape),
                        "exp_avg_sq": torch.as_tensor(second[chunk], dtype=parameter.dtype).reshape(parameter.shape),
                    }
                offset += size
        self.steps = steps


def _header(field: JointField) -> bytes:
    config = field.config
    layers = [field.encoder.output_dim, config.hidden_width, GEOMETRY_WIDTH]
    layers += [GEOMETRY_WIDTH - 1 + (config.sh_degree + 1) ** 2, config.hidden_width, OUTPUT_WIDTH]
    values = [
        CHECKPOINT_VERSION,
        config.levels,
        config.features,
        field.encoder.table_size,
        *field.encoder.resolutions,
        len(layers),
        *layers,
    ]
    return CHECKPOINT_MAGIC + struct.pack(f"<{len(values)}I", *values)


def save_checkpoint(path: Path, store: ParamStore) -> None:
    """Write parameters and optimizer moments to a binary checkpoint."""
    params = store.flat_parameters()
    first, second = store.moments()
    with path.open("wb") as handle:
        handle.write(_header(store.field))
        handle.write(struct.pack("<QQ", len(params), store.steps))
        for vector in (params, first, second):
            handle.write(np.ascontiguousarray(vector, dtype="<f8").tobytes())
    _LOGGER.debug("Saved checkpoint with %s parameters to %s", len(params), path)


def load_checkpoint(path: Path, store: ParamStore) -> None:
    """Restore a checkpoint into a store whose field has the same architecture."""
    raw = path.read_bytes()
    header = _header(store.field)
    if raw[: len(header)] != header:
        msg = f"{path} does not match the field architecture"
        raise InvalidInputError(msg)
    count, steps = struct.unpack_from("<QQ", raw, len(header))
    offset = len(header) + 16
    if len(raw) != offset + 3 * 8 * count:
        msg = f"{path} is truncated"
        raise InvalidInputError(msg)
    vectors = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(3, count).astype(np.float64)
    if not np.all(np.isfinite(vectors)):
        msg = f"{path} holds non-finite values"
        raise InvalidInputError(msg)
    if np.any(vectors[2] < 0):
        msg = f"{path} holds negative second moments"
        raise InvalidInputError(msg)
    store.load_vectors(vectors[0], vectors[1], vectors[2], int(steps))
