"""Joint recognition and shape completion by Gibbs sampling.

Each particle is an independent chain: unknown voxels start at coin
flips, then the chain alternates a stochastic bottom-up pass (which draws
a class label from the label posterior given the sampled features), a
top-layer hidden draw, and a stochastic top-down pass, re-clamping the
observed voxels after every sweep.  The empirical label frequencies over
particles estimate the class posterior, and the final states are the
shape completions.

Particles derive their generators from the root seed by index, and each
particle's math runs on its own arrays, so results are bit-identical for
any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from voxbelief.camera import ObservationGrid, ObservationState
from voxbelief.errors import DataError
from voxbelief.geometry import VoxelGrid
from voxbelief.network import (
    LabelDistribution,
    NetworkParams,
    label_posterior,
    sample_label,
    sigmoid,
    top_hidden_input,
)
from voxbelief.training import (
    _conv_down_linear_batch,
    _conv_up_net_batch,
    network_features,
)


@dataclass
class Particle:
    """Final state of one Gibbs chain."""

    grid: VoxelGrid
    label: int
    top_state: np.ndarray
    seed_index: int


@dataclass
class CompletionResult:
    label_dist: LabelDistribution
    winner: int
    completions: list
    particle_labels: np.ndarray

    @property
    def num_particles(self) -> int:
        return self.particle_labels.size


def _check_obs(net: NetworkParams, obs: ObservationGrid):
    if obs.dims != net.input_dims:
        raise DataError(f"observation dims {obs.dims} do not match the "
                        f"network input {net.input_dims}")


def _run_particle(net: NetworkParams, surf, free, iterations: int,
                  rng: np.random.Generator):
    """One chain; returns (final occupancy float32, final label, top hidden)."""
    dtype = np.float32
    dims = surf.shape
    x = rng.random(dims).astype(dtype)
    x = (x < 0.5).astype(dtype)
    x[surf] = 1.0
    x[free] = 0.0
    label = 0
    h_top = None
    for _ in range(iterations):
        # bottom-up: sample every layer, then a label from its posterior
        cur = x[None, None]
        for layer in net.conv_layers:
            mean = sigmoid(_conv_up_net_batch(layer, cur))
            cur = (rng.random(mean.shape) < mean).astype(dtype)
        flat = cur.reshape(-1)
        mean = sigmoid(net.dense.weights @ flat + net.dense.hidden_bias)
        feats = (rng.random(mean.shape) < mean).astype(dtype)
        probs = label_posterior(net.top, feats)
        label = sample_label(probs, rng)
        h_mean = sigmoid(top_hidden_input(net.top, feats, label))
        h_top = (rng.random(h_mean.shape) < h_mean).astype(dtype)
        # top-down: regenerate features, then the stack, then the voxels
        f_mean = sigmoid(net.top.feature_weights.T @ h_top + net.top.feature_bias)
        f_sample = (rng.random(f_mean.shape) < f_mean).astype(dtype)
        mean = sigmoid(net.dense.weights.T @ f_sample + net.dense.visible_bias)
        cur = (rng.random(mean.shape) < mean).astype(dtype)
        cur = cur.reshape((1,) + net.conv_layers[-1].hidden_shape) \
            if net.conv_layers else cur.reshape(1, -1)
        for layer in reversed(net.conv_layers):
            mean = sigmoid(_conv_down_linear_batch(layer, cur) + layer.visible_bias)
            cur = (rng.random(mean.shape) < mean).astype(dtype)
        x = cur.reshape(dims)
        x[surf] = 1.0
        x[free] = 0.0
        assert (x[surf] == 1.0).all() and (x[free] == 0.0).all(), \
            "clamp violated inside the Gibbs chain"
    return x, label, h_top


def gibbs_complete(net: NetworkParams, obs: ObservationGrid, iterations: int = 50,
                   particles: int = 100, seed: int = 0, threads: int = 1,
                   keep_completions: bool = True) -> CompletionResult:
    """Sample completions and labels conditioned on the observation.

    Runs ``particles`` independent chains for ``iterations`` up-down
    sweeps each.  The winner is the most frequently sampled class (ties
    break to the lowest index); the label distribution is the empirical
    frequency over particles.
    """
    _check_obs(net, obs)
    if iterations < 1 or particles < 1:
        raise DataError("iterations and particles must be >= 1")
    surf = obs.surface_mask()
    free = obs.free_mask()
    seeds = np.random.SeedSequence(seed).spawn(particles)

    def work(idx: int):
        rng = np.random.default_rng(seeds[idx])
        return _run_particle(net, surf, free, iterations, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(particles)))
    else:
        results = [work(i) for i in range(particles)]

    labels = np.array([r[1] for r in results], dtype=np.int64)
    counts = np.bincount(labels, minlength=net.K).astype(np.float64)
    dist = LabelDistribution(counts / particles)
    completions = []
    if keep_completions:
        for x, _, _ in results:
            completions.append(VoxelGrid(obs.dims, net.payload_origin,
                                         x.astype(np.uint8)))
    return CompletionResult(dist, dist.winner(), completions, labels)


def classify(net: NetworkParams, obs: ObservationGrid, particles: int = 100,
             iterations: int = 50, seed: int = 0, threads: int = 1) -> LabelDistribution:
    """Class posterior estimate from the Gibbs particles."""
    result = gibbs_complete(net, obs, iterations=iterations, particles=particles,
                            seed=seed, threads=threads, keep_completions=False)
    return result.label_dist


def extract_features(net: NetworkParams, grid) -> np.ndarray:
    """Deterministic top-layer feature vector of a voxel grid.

    Runs a mean-field bottom-up pass and returns the top hidden means
    driven by the feature weights (label units unobserved).
    """
    occ = grid.occupancy if hasattr(grid, "occupancy") else np.asarray(grid)
    if tuple(occ.shape) != net.input_dims:
        raise DataError("grid dims do not match the network input")
    data = occ.astype(np.float32)[None, None]
    feats = network_features(net, data)[0]
    return sigmoid(net.top.feature_weights @ feats + net.top.hidden_bias)
