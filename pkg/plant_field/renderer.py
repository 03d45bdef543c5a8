"""Volume rendering of the joint field and the training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
import torch

from .camera import pixel_centers, pixel_directions, ray_box_bounds
from .codec import decode_labels
from .const import (
    _LOGGER,
    HOLDOUT_EVERY,
    N_COARSE,
    N_FINE,
    PDF_FLOOR,
    RAYS_PER_ITER,
    T_FAR,
    T_NEAR,
    TRAIN_ITERATIONS,
)
from .data import make_rng
from .exceptions import InvalidInputError, TrainingError

if TYPE_CHECKING:
    from pathlib import Path

    from .camera import Intrinsics, Pose
    from .codec import Codebooks
    from .data import Bounds, FloatArray
    from .field import JointField, ParamStore

LOSS_TERMS = (
    "color_coarse",
    "color_fine",
    "instance_coarse",
    "instance_fine",
    "semantic_coarse",
    "semantic_fine",
)


@dataclass(frozen=True)
class TrainingConfig:
    """Training loop settings."""

    rays_per_iter: int = RAYS_PER_ITER
    iterations: int = TRAIN_ITERATIONS
    n_coarse: int = N_COARSE
    n_fine: int = N_FINE
    pdf_floor: float = PDF_FLOOR
    holdout_every: int = HOLDOUT_EVERY
    foreground_bias: float = 0.0
    t_near: float = T_NEAR
    t_far: float = T_FAR
    chunk: int = 4096
    log_every: int = 100
    seed: int = 0


@dataclass
class RaySampleSet:
    """Sample positions of one pass; t and delta are (R, S)."""

    t: FloatArray
    delta: FloatArray


@dataclass
class RenderedRays:
    """Composited outputs of one pass."""

    rgb: torch.Tensor
    instance: torch.Tensor
    semantic: torch.Tensor
    weights: torch.Tensor
    t_end: torch.Tensor


@dataclass
class LossBreakdown:
    """Six batch-averaged squared-error terms."""

    color_coarse: torch.Tensor
    color_fine: torch.Tensor
    instance_coarse: torch.Tensor
    instance_fine: torch.Tensor
    semantic_coarse: torch.Tensor
    semantic_fine: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        """Return the sum of the terms."""
        return sum((getattr(self, name) for name in LOSS_TERMS), torch.zeros(()))

    def as_dict(self) -> dict[str, float]:
        """Return the terms and total as floats."""
        values = {name: float(getattr(self, name).detach()) for name in LOSS_TERMS}
        values["total"] = float(self.total.detach())
        return values


@dataclass
class TrainingView:
    """One camera with its encoded (H, W, 7) targets."""

    intrinsics: Intrinsics
    pose: Pose
    targets: FloatArray


@dataclass
class RayBatch:
    """Rays clipped to the scene box with their targets."""

    origins: FloatArray
    directions: FloatArray
    near: FloatArray
    far: FloatArray
    targets: FloatArray

    def __len__(self) -> int:
        """Return the ray count."""
        return len(self.origins)

    def select(self, index: np.ndarray) -> RayBatch:
        """Return a subset of the rays."""
        return RayBatch(
            origins=self.origins[index],
            directions=self.directions[index],
            near=self.near[index],
            far=self.far[index],
            targets=self.targets[index],
        )


@dataclass
class TrainingResult:
    """Loss trace and held-out metrics."""

    trace: list[dict[str, float]] = field(default_factory=list)
    holdout: dict[str, Any] = field(default_factory=dict)


def stratified_samples(
    near: FloatArray, far: FloatArray, count: int, rng: np.random.Generator
) -> FloatArray:
    """Draw one uniform t per equal stratum of [near, far], (R, count)."""
    if count < 2:
        msg = f"Need at least two coarse samples, got {count}"
        raise InvalidInputError(msg)
    edges = np.arange(count) / count
    jitter = rng.random((len(near), count)) / count
    return near[:, None] + (edges[None, :] + jitter) * (far - near)[:, None]


def interval_lengths(t: FloatArray, near: FloatArray, far: FloatArray) -> FloatArray:
    """Return quadrature widths from midpoint boundaries clipped to [near, far]."""
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    bounds = np.concatenate([near[:, None], mids, far[:, None]], axis=1)
    return np.diff(bounds, axis=1)


def fine_samples(  # noqa: PLR0913
    weights: FloatArray,
    near: FloatArray,
    far: FloatArray,
    count: int,
    rng: np.random.Generator,
    floor: float = PDF_FLOOR,
) -> FloatArray:
    """Draw t by inverse CDF over the coarse strata.

    The piecewise-constant PDF mixes normalized coarse weights with a
    uniform floor; rays with no weight fall back to uniform.
    """
    strata = weights.shape[1]
    total = weights.sum(axis=1, keepdims=True)
    normalized = np.where(total > 0, weights / np.where(total > 0, total, 1.0), 1.0 / strata)
    pdf = (1.0 - floor) * normalized + floor / strata
    cdf = np.cumsum(pdf, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random((len(weights), count))
    index = (u[:, :, None] >= cdf[:, None, :]).sum(axis=-1)
    index = np.minimum(index, strata - 1)
    below = np.where(index > 0, np.take_along_axis(cdf, np.maximum(index - 1, 0), axis=1), 0.0)
    mass = np.take_along_axis(pdf / pdf.sum(axis=1, keepdims=True), index, axis=1)
    within = np.clip((u - below) / mass, 0.0, 1.0)
    width = (far - near)[:, None] / strata
    return np.sort(near[:, None] + (index + within) * width, axis=1)


def composite(
    sigma: torch.Tensor,
    delta: torch.Tensor,
    values: dict[str, torch.Tensor],
) -> tuple[dict[str, torch.Tensor], torch.Tensor, torch.Tensor]:
    """Alpha-composite per-sample values along rays.

    Returns the weighted sums, the weights w_i = T_i (1 - exp(-sigma_i delta_i))
    and the transmittance left after the last sample.
    """
    optical = sigma * delta
    accumulated = torch.cumsum(optical, dim=-1)
    transmittance = torch.exp(-(accumulated - optical))
    weights = transmittance * (1.0 - torch.exp(-optical))
    t_end = torch.exp(-accumulated[..., -1])
    out = {}
    for name, value in values.items():
        if value.ndim == weights.ndim:
            out[name] = (weights * value).sum(dim=-1)
        else:
            out[name] = (weights[..., None] * value).sum(dim=-2)
    return out, weights, t_end


def _render_pass(
    jfield: JointField, batch: RayBatch, t: FloatArray
) -> tuple[RenderedRays, RaySampleSet]:
    dtype = jfield.dtype
    samples = RaySampleSet(t=t, delta=interval_lengths(t, batch.near, batch.far))
    points = batch.origins[:, None, :] + t[..., None] * batch.directions[:, None, :]
    output = jfield(torch.as_tensor(points, dtype=dtype), batch.directions)
    sums, weights, t_end = composite(
        output.sigma,
        torch.as_tensor(samples.delta, dtype=dtype),
        {"rgb": output.rgb, "instance": output.instance, "semantic": output.semantic},
    )
    rays = RenderedRays(
        rgb=sums["rgb"], instance=sums["instance"], semantic=sums["semantic"], weights=weights, t_end=t_end
    )
    return rays, samples


def render_rays(
    jfield: JointField,
    batch: RayBatch,
    n_coarse: int,
    n_fine: int,
    rng: np.random.Generator,
    floor: float = PDF_FLOOR,
) -> tuple[RenderedRays, RenderedRays]:
    """Render the coarse pass and the fine pass over the union of samples."""
    t_coarse = stratified_samples(batch.near, batch.far, n_coarse, rng)
    coarse, _ = _render_pass(jfield, batch, t_coarse)
    if n_fine == 0:
        return coarse, coarse
    weights = coarse.weights.detach().cpu().numpy().astype(np.float64)
    t_fine = fine_samples(weights, batch.near, batch.far, n_fine, rng, floor)
    t_union = np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)
    fine, _ = _render_pass(jfield, batch, t_union)
    return coarse, fine


def compute_loss(coarse: RenderedRays, fine: RenderedRays, targets: torch.Tensor) -> LossBreakdown:
    """Return the six squared-error terms averaged over the batch."""
    color, instance, semantic = targets[:, 0:3], targets[:, 4:7], targets[:, 3]
    return LossBreakdown(
        color_coarse=((coarse.rgb - color) ** 2).sum(dim=-1).mean(),
        color_fine=((fine.rgb - color) ** 2).sum(dim=-1).mean(),
        instance_coarse=((coarse.instance - instance) ** 2).sum(dim=-1).mean(),
        instance_fine=((fine.instance - instance) ** 2).sum(dim=-1).mean(),
        semantic_coarse=((coarse.semantic - semantic) ** 2).mean(),
        semantic_fine=((fine.semantic - semantic) ** 2).mean(),
    )


def view_rays(
    intr: Intrinsics,
    pose: Pose,
    bounds: Bounds,
    targets: FloatArray | None = None,
    t_near: float = T_NEAR,
    t_far: float = T_FAR,
) -> tuple[RayBatch, np.ndarray]:
    """Return the rays of a view that cross the scene box, and the hit mask."""
    directions = pixel_directions(pixel_centers(intr), intr, pose)
    origins = np.broadcast_to(pose.center, directions.shape).copy()
    near, far, hit = ray_box_bounds(origins, directions, bounds, t_near, t_far)
    flat_targets = (
        np.zeros((len(directions), 7)) if targets is None else targets.reshape(-1, 7)
    )
    batch = RayBatch(
        origins=origins[hit],
        directions=directions[hit],
        near=near[hit],
        far=far[hit],
        targets=flat_targets[hit],
    )
    return batch, hit


def build_ray_pool(
    views: list[TrainingView], bounds: Bounds, config: TrainingConfig
) -> RayBatch:
    """Concatenate the box-crossing rays of all training views."""
    batches = [
        view_rays(v.intrinsics, v.pose, bounds, v.targets, config.t_near, config.t_far)[0]
        for v in views
    ]
    pool = RayBatch(
        origins=np.concatenate([b.origins for b in batches]),
        directions=np.concatenate([b.directions for b in batches]),
        near=np.concatenate([b.near for b in batches]),
        far=np.concatenate([b.far for b in batches]),
        targets=np.concatenate([b.targets for b in batches]),
    )
    dropped = sum(v.targets.shape[0] * v.targets.shape[1] for v in views) - len(pool)
    _LOGGER.debug("Ray pool holds %s rays, %s missed the scene box", len(pool), dropped)
    return pool


def render_image(  # noqa: PLR0913
    jfield: JointField,
    intr: Intrinsics,
    pose: Pose,
    bounds: Bounds,
    config: TrainingConfig,
    rng: np.random.Generator,
) -> FloatArray:
    """Render a full (H, W, 7) normalized image with the fine pass."""
    batch, hit = view_rays(intr, pose, bounds, None, config.t_near, config.t_far)
    image = np.zeros((intr.height * intr.width, 7))
    rendered = np.zeros((len(batch), 7))
    with torch.no_grad():
        for start in range(0, len(batch), config.chunk):
            chunk = batch.select(slice(start, start + config.chunk))
            _, fine = render_rays(jfield, chunk, config.n_coarse, config.n_fine, rng, config.pdf_floor)
            rendered[start : start + len(chunk), 0:3] = fine.rgb.cpu().numpy()
            rendered[start : start + len(chunk), 3] = fine.semantic.cpu().numpy()
            rendered[start : start + len(chunk), 4:7] = fine.instance.cpu().numpy()
    image[hit] = rendered
    return image.reshape(intr.height, intr.width, 7)


def split_holdout(count: int, every: int) -> tuple[list[int], list[int]]:
    """Return (train, held-out) view indices; every `every`-th view is held out."""
    if every <= 0 or count < 2:
        return list(range(count)), []
    held = [i for i in range(count) if i % every == every - 1]
    return [i for i in range(count) if i not in held], held


def evaluate_holdout(  # noqa: PLR0913
    jfield: JointField,
    views: list[TrainingView],
    bounds: Bounds,
    config: TrainingConfig,
    codebooks: Codebooks,
    rng: np.random.Generator,
) -> dict[str, Any]:
    """Return PSNR and label pixel accuracy on held-out views."""
    per_view = []
    for view in views:
        image = render_image(jfield, view.intrinsics, view.pose, bounds, config, rng)
        target = view.targets
        mse = float(np.mean((image[..., 0:3] - target[..., 0:3]) ** 2))
        psnr = math.inf if mse == 0 else -10.0 * math.log10(mse)
        pred_s, pred_i = decode_labels(image[..., 3].ravel(), image[..., 4:7].reshape(-1, 3), codebooks)
        true_s, true_i = decode_labels(target[..., 3].ravel(), target[..., 4:7].reshape(-1, 3), codebooks)
        per_view.append(
            {
                "psnr": psnr,
                "semantic_accuracy": float(np.mean(pred_s == true_s)),
                "instance_accuracy": float(np.mean(pred_i == true_i)),
            }
        )
    if not per_view:
        return {}
    return {
        key: float(np.mean([entry[key] for entry in per_view]))
        for key in ("psnr", "semantic_accuracy", "instance_accuracy")
    } | {"views": len(per_view)}


def _draw_rays(
    pool: RayBatch, config: TrainingConfig, rng: np.random.Generator, foreground: np.ndarray
) -> np.ndarray:
    if config.foreground_bias > 0 and len(foreground):
        from_foreground = rng.random(config.rays_per_iter) < config.foreground_bias
        index = rng.integers(0, len(pool), config.rays_per_iter)
        index[from_foreground] = foreground[
            rng.integers(0, len(foreground), int(from_foreground.sum()))
        ]
        return index
    return rng.integers(0, len(pool), config.rays_per_iter)


def train(  # noqa: PLR0913
    store: ParamStore,
    views: list[TrainingView],
    bounds: Bounds,
    config: TrainingConfig | None = None,
    codebooks: Codebooks | None = None,
    trace_path: Path | None = None,
) -> TrainingResult:
    """Fit the field to the training views; held-out views are scored afterwards."""
    config = config or TrainingConfig()
    jfield = store.field
    rng = make_rng(config.seed)
    train_index, held_index = split_holdout(len(views), config.holdout_every)
    result = TrainingResult()
    if config.iterations > 0:
        pool = build_ray_pool([views[i] for i in train_index], bounds, config)
        foreground = np.flatnonzero(pool.targets[:, 3] > 0)
        for iteration in range(1, config.iterations + 1):
            batch = pool.select(_draw_rays(pool, config, rng, foreground))
            coarse, fine = render_rays(
                jfield, batch, config.n_coarse, config.n_fine, rng, config.pdf_floor
            )
            loss = compute_loss(coarse, fine, torch.as_tensor(batch.targets, dtype=jfield.dtype))
            total = loss.total
            if not torch.isfinite(total):
                raise TrainingError(iteration, store.parameter_norm(), "Non-finite loss")
            total.backward()
            store.step()
            entry = {"iteration": iteration, **loss.as_dict()}
            result.trace.append(entry)
            if iteration % config.log_every == 0:
                _LOGGER.debug("Iteration %s loss %.6f", iteration, entry["total"])
    if trace_path is not None:
        write_trace(trace_path, result.trace)
    if held_index and codebooks is not None:
        result.holdout = evaluate_holdout(
            jfield, [views[i] for i in held_index], bounds, config, codebooks, rng
        )
        _LOGGER.info("Held-out views: %s", result.holdout)
    return result


def write_trace(path: Path, trace: list[dict[str, float]]) -> None:
    """Write the loss trace as CSV."""
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["iteration", *LOSS_TERMS, "total"])
        writer.writeheader()
        writer.writerows(trace)
