"""Tests for volume rendering and training."""

from __future__ import annotations

import csv
import math
from typing import TYPE_CHECKING

import numpy as np
import pytest
import torch

from plant_field.codec import allocate_codebooks, encode_targets
from plant_field.const import NUM_CLASSES
from plant_field.data import make_rng
from plant_field.exceptions import TrainingError
from plant_field.field import FieldConfig, JointField, ParamStore
from plant_field.renderer import (
    LOSS_TERMS,
    RenderedRays,
    TrainingConfig,
    TrainingView,
    compute_loss,
    composite,
    fine_samples,
    interval_lengths,
    render_rays,
    split_holdout,
    stratified_samples,
    train,
    view_rays,
)
from plant_field.scene import render_view

from .conftest import MOCK_BOUNDS, _make_intrinsics, _make_pose

if TYPE_CHECKING:
    from pathlib import Path

    from plant_field.codec import Codebooks
    from plant_field.scene import SceneSpec

SMALL_FIELD = FieldConfig(
    levels=2,
    features=2,
    log2_table=8,
    min_resolution=4,
    max_resolution=8,
    hidden_width=16,
    dtype="float64",
)
TINY_TRAINING = TrainingConfig(
    rays_per_iter=32,
    iterations=3,
    n_coarse=8,
    n_fine=4,
    holdout_every=0,
    log_every=1,
)


def _training_views(scene: SceneSpec) -> tuple[list[TrainingView], Codebooks]:
    """Return two encoded views of a scene and their codebooks."""
    codebooks = allocate_codebooks(NUM_CLASSES, scene.instance_ids)
    intr = _make_intrinsics()
    views = []
    for eye in ((2.0, 0.0, 0.0), (0.0, 2.0, 0.5)):
        pose = _make_pose(eye)
        rendered = render_view(scene, intr, pose)
        targets = encode_targets(rendered.rgb, rendered.semantic, rendered.instance, codebooks)
        views.append(TrainingView(intrinsics=intr, pose=pose, targets=targets))
    return views, codebooks


def test_homogeneous_medium_closed_form() -> None:
    """Test constant density and color integrate to c (1 - exp(-2))."""
    near, far = np.zeros(1), np.ones(1)
    t = stratified_samples(near, far, 256, make_rng(0))
    delta = torch.as_tensor(interval_lengths(t, near, far))
    color = torch.tensor([1.0, 0.5, 0.25], dtype=torch.float64).expand(1, 256, 3)

    sums, weights, t_end = composite(torch.full((1, 256), 2.0, dtype=torch.float64), delta, {"rgb": color})

    expected = np.array([1.0, 0.5, 0.25]) * (1 - math.exp(-2.0))
    np.testing.assert_allclose(sums["rgb"][0].numpy(), expected, atol=1e-3)
    assert float(weights.sum() + t_end[0]) == pytest.approx(1.0, abs=1e-9)


def test_weights_and_transmittance_sum_to_one() -> None:
    """Test sum of weights plus the leftover transmittance is one."""
    rng = make_rng(1)
    sigma = torch.as_tensor(rng.exponential(3.0, (10_000, 32)))
    delta = torch.as_tensor(rng.uniform(0.0, 0.1, (10_000, 32)))

    _, weights, t_end = composite(sigma, delta, {})

    np.testing.assert_allclose((weights.sum(dim=-1) + t_end).numpy(), 1.0, atol=1e-6)
    assert bool((weights >= 0).all())


def test_stratified_samples_stay_in_strata() -> None:
    """Test each sample lies in its own stratum."""
    near, far = np.array([0.5, 1.0]), np.array([1.5, 3.0])

    t = stratified_samples(near, far, 8, make_rng(2))

    position = (t - near[:, None]) / (far - near)[:, None] * 8
    np.testing.assert_array_equal(np.floor(position), np.tile(np.arange(8), (2, 1)))
    with pytest.raises(ValueError):
        stratified_samples(near, far, 1, make_rng(2))


def test_interval_lengths_cover_ray_segment() -> None:
    """Test quadrature widths sum to far - near."""
    near, far = np.array([0.2, 1.0]), np.array([1.2, 4.0])
    t = stratified_samples(near, far, 16, make_rng(3))

    delta = interval_lengths(t, near, far)

    np.testing.assert_allclose(delta.sum(axis=1), far - near, atol=1e-12)
    assert (delta >= 0).all()


def test_fine_samples_follow_weights() -> None:
    """Test fine samples are sorted, in range and crowd the heavy stratum."""
    weights = np.zeros((1, 16))
    weights[0, 10] = 1.0
    near, far = np.zeros(1), np.full(1, 16.0)

    t = fine_samples(weights, near, far, 1000, make_rng(4))

    assert t.shape == (1, 1000)
    assert (np.diff(t, axis=1) >= 0).all()
    assert t.min() >= 0.0
    assert t.max() <= 16.0
    assert ((t >= 10.0) & (t < 11.0)).mean() > 0.95


def test_fine_samples_fall_back_to_uniform() -> None:
    """Test rays with zero weight sample the whole segment."""
    t = fine_samples(np.zeros((1, 4)), np.zeros(1), np.ones(1), 4000, make_rng(5))

    counts = np.histogram(t, bins=4, range=(0.0, 1.0))[0]
    assert counts.min() > 800


def test_split_holdout() -> None:
    """Test every n-th view is held out."""
    assert split_holdout(10, 10) == (list(range(9)), [9])
    assert split_holdout(25, 10)[1] == [9, 19]
    assert split_holdout(5, 0) == (list(range(5)), [])
    assert split_holdout(1, 1) == ([0], [])


def test_compute_loss_terms() -> None:
    """Test each squared-error term against a hand value."""
    targets = torch.tensor([[0.2, 0.4, 0.6, 0.5, 1.0, 1.0, 1.0]] * 4, dtype=torch.float64)
    exact = RenderedRays(
        rgb=targets[:, 0:3],
        instance=targets[:, 4:7],
        semantic=targets[:, 3],
        weights=torch.zeros(4, 1),
        t_end=torch.ones(4),
    )
    off = RenderedRays(
        rgb=targets[:, 0:3],
        instance=targets[:, 4:7] - 0.1,
        semantic=targets[:, 3] + 0.2,
        weights=torch.zeros(4, 1),
        t_end=torch.ones(4),
    )

    loss = compute_loss(exact, off, targets).as_dict()

    assert loss["color_coarse"] == 0.0
    assert loss["instance_coarse"] == 0.0
    assert loss["instance_fine"] == pytest.approx(0.03)
    assert loss["semantic_fine"] == pytest.approx(0.04)
    assert loss["total"] == pytest.approx(0.07)
    assert set(loss) == {*LOSS_TERMS, "total"}


def test_view_rays_are_clipped_to_box() -> None:
    """Test only box-crossing rays are kept and their bounds bracket the box."""
    intr = _make_intrinsics()

    batch, hit = view_rays(intr, _make_pose(), MOCK_BOUNDS)

    assert hit.shape == (intr.height * intr.width,)
    assert len(batch) == int(hit.sum())
    assert 0 < len(batch) <= hit.size
    assert (batch.near >= 1.5 - 1e-9).all()
    assert (batch.far > batch.near).all()


def test_render_rays_shapes() -> None:
    """Test the coarse and fine passes render one value per ray."""
    jfield = JointField(MOCK_BOUNDS, SMALL_FIELD, seed=0)
    batch, _ = view_rays(_make_intrinsics(8, 6), _make_pose(), MOCK_BOUNDS)

    coarse, fine = render_rays(jfield, batch, 8, 4, make_rng(0))

    assert coarse.rgb.shape == (len(batch), 3)
    assert coarse.weights.shape == (len(batch), 8)
    assert fine.weights.shape == (len(batch), 12)
    assert fine.semantic.shape == (len(batch),)


def test_train_writes_trace(tmp_path: Path, sphere_scene: SceneSpec) -> None:
    """Test a short run logs every iteration to the trace."""
    views, codebooks = _training_views(sphere_scene)
    store = ParamStore(JointField(MOCK_BOUNDS, SMALL_FIELD, seed=0))
    path = tmp_path / "trace.csv"

    result = train(store, views, MOCK_BOUNDS, TINY_TRAINING, codebooks, path)

    assert [entry["iteration"] for entry in result.trace] == [1, 2, 3]
    assert all(math.isfinite(entry["total"]) for entry in result.trace)
    assert store.steps == 3
    with path.open() as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 3
    assert list(rows[0]) == ["iteration", *LOSS_TERMS, "total"]
    assert result.holdout == {}


def test_train_scores_held_out_views(sphere_scene: SceneSpec) -> None:
    """Test held-out views are rendered and scored after training."""
    views, codebooks = _training_views(sphere_scene)
    store = ParamStore(JointField(MOCK_BOUNDS, SMALL_FIELD, seed=0))
    config = TrainingConfig(
        rays_per_iter=16, iterations=1, n_coarse=4, n_fine=0, holdout_every=2, chunk=256
    )

    result = train(store, views, MOCK_BOUNDS, config, codebooks)

    assert result.holdout["views"] == 1
    assert 0.0 <= result.holdout["semantic_accuracy"] <= 1.0
    assert math.isfinite(result.holdout["psnr"])


def test_train_raises_on_non_finite_loss(sphere_scene: SceneSpec) -> None:
    """Test a NaN loss stops training with diagnostics."""
    views, _ = _training_views(sphere_scene)
    store = ParamStore(JointField(MOCK_BOUNDS, SMALL_FIELD, seed=0))
    with torch.no_grad():
        store.field.encoder.tables.fill_(math.nan)

    with pytest.raises(TrainingError) as err:
        train(store, views, MOCK_BOUNDS, TINY_TRAINING)

    assert err.value.iteration == 1


def test_loss_gradients_through_compositing() -> None:
    """Test analytic gradients of the composited loss on four rays against finite differences."""
    rng = make_rng(5)
    targets = torch.as_tensor(rng.uniform(0.0, 1.0, (4, 7)))
    delta = torch.as_tensor(rng.uniform(0.05, 0.2, (4, 6)))

    def loss(
        sigma: torch.Tensor, rgb: torch.Tensor, instance: torch.Tensor, semantic: torch.Tensor
    ) -> torch.Tensor:
        sums, weights, t_end = composite(
            sigma, delta, {"rgb": rgb, "instance": instance, "semantic": semantic}
        )
        rays = RenderedRays(
            rgb=sums["rgb"],
            instance=sums["instance"],
            semantic=sums["semantic"],
            weights=weights,
            t_end=t_end,
        )
        return compute_loss(rays, rays, targets).total

    inputs = (
        torch.as_tensor(rng.uniform(0.5, 5.0, (4, 6))).requires_grad_(),
        torch.as_tensor(rng.uniform(0.0, 1.0, (4, 6, 3))).requires_grad_(),
        torch.as_tensor(rng.uniform(0.0, 1.0, (4, 6, 3))).requires_grad_(),
        torch.as_tensor(rng.uniform(0.0, 1.0, (4, 6))).requires_grad_(),
    )

    assert torch.autograd.gradcheck(loss, inputs, eps=1e-6, atol=1e-6)


def test_training_reduces_loss(sphere_scene: SceneSpec) -> None:
    """Test the loss over the last iterations is below the loss over the first."""
    views, codebooks = _training_views(sphere_scene)
    store = ParamStore(JointField(MOCK_BOUNDS, SMALL_FIELD, seed=0))
    config = TrainingConfig(
        rays_per_iter=128, iterations=150, n_coarse=8, n_fine=4, holdout_every=0, log_every=50
    )

    result = train(store, views, MOCK_BOUNDS, config, codebooks)

    totals = [entry["total"] for entry in result.trace]
    assert np.mean(totals[-10:]) < np.mean(totals[:10])
