"""Next-best-view planning by expected recognition-entropy reduction.

The score of a candidate view is the mutual information between the class
label and the voxels that view would newly observe, estimated by Monte
Carlo: draw shape completions from the posterior, render each from the
candidate pose, reveal the newly visible voxels, and measure the entropy
of the class posterior conditioned on the augmented observation.  Views
that can expose class-discriminating structure score high; views that
mostly re-observe known space score near zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from voxbelief.camera import (
    CameraPose,
    ObservationGrid,
    ObservationState,
    depth_to_observation,
    generate_view_candidates,
    merge_observations,
    new_observed_mask,
    render_depth,
)
from voxbelief.errors import DataError
from voxbelief.geometry import GridSpec, VoxelGrid
from voxbelief.inference import classify, gibbs_complete
from voxbelief.network import LabelDistribution, NetworkParams
from voxbelief.rng import substream

BASELINE_STRATEGIES = ("random", "max_visibility", "farthest")
ALL_STRATEGIES = ("mi",) + BASELINE_STRATEGIES


@dataclass
class NBVBudgets:
    """Monte-Carlo budgets and camera intrinsics for view scoring."""

    outer_samples: int = 10
    inner_particles: int = 50
    iterations: int = 50
    width: int = 64
    height: int = 64
    focal_px: float = 64.0
    candidates: int = 8
    radius: float = 26.0
    threads: int = 1


@dataclass
class ViewScore:
    pose: CameraPose
    expected_entropy: float
    mutual_information: float
    sample_budget: int


@dataclass
class StepRecord:
    step: int
    strategy: str
    pose: CameraPose
    entropy_before: float | None
    entropy_after: float
    label_probs: np.ndarray
    unknown_count: int

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step,
            "strategy": self.strategy,
            "pose": [float(f"{v:.9g}") for v in
                     np.concatenate([self.pose.position, self.pose.look_at,
                                     self.pose.up_hint])],
            "entropy_before": self.entropy_before,
            "entropy_after": self.entropy_after,
            "label_probs": [float(p) for p in self.label_probs],
            "unknown_count": self.unknown_count,
        })


@dataclass
class EpisodeLog:
    steps: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "\n".join(rec.to_json() for rec in self.steps) + "\n"

    def final_winner(self) -> int:
        return int(np.argmax(self.steps[-1].label_probs))


def recognition_entropy(dist) -> float:
    """Shannon entropy (natural log) of a label distribution; 0 ln 0 = 0."""
    probs = dist.probs if isinstance(dist, LabelDistribution) else np.asarray(dist, float)
    if (probs < 0).any():
        raise DataError("negative probability in label distribution")
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())


def _grid_spec_for(net: NetworkParams) -> GridSpec:
    return GridSpec(dims=net.input_dims, payload_origin=net.payload_origin)


def _augment_with_sample(obs: ObservationGrid, sample: VoxelGrid, pose: CameraPose,
                         budgets: NBVBudgets, spec: GridSpec):
    """Reveal to ``obs`` what the candidate view would see on this sample.

    Renders the sample once, keeps only the voxels not already observed,
    and merges them in.  Returns (augmented observation, reveal count).
    """
    occ = sample.occupancy
    if (occ[obs.surface_mask()] != 1).any() or (occ[obs.free_mask()] != 0).any():
        raise DataError("sample disagrees with the observed voxels")
    dm = render_depth(sample, pose, budgets.width, budgets.height, budgets.focal_px)
    fresh = depth_to_observation(dm, pose, spec)
    mask = fresh.observed_mask() & ~obs.observed_mask()
    revealed = int(mask.sum())
    if revealed == 0:
        return obs, 0
    restricted = np.full(obs.dims, ObservationState.UNKNOWN, dtype=np.uint8)
    restricted[mask] = fresh.states[mask]
    merged, _ = merge_observations(obs, ObservationGrid(obs.dims, restricted))
    return merged, revealed


def _score_view(net: NetworkParams, obs: ObservationGrid, pose: CameraPose,
                completions, base_entropy: float, budgets: NBVBudgets,
                seed: int) -> ViewScore:
    """Average posterior entropy after hypothetically observing from pose.

    Samples whose rendering reveals nothing new contribute the current
    entropy exactly, so a fully observed shape scores H for every view.
    """
    spec = _grid_spec_for(net)
    entropies = []
    for si, sample in enumerate(completions):
        augmented, revealed = _augment_with_sample(obs, sample, pose, budgets, spec)
        if revealed == 0:
            entropies.append(base_entropy)
            continue
        dist = classify(net, augmented, particles=budgets.inner_particles,
                        iterations=budgets.iterations,
                        seed=int(substream(seed, 3, si).integers(0, 2 ** 31)),
                        threads=budgets.threads)
        entropies.append(recognition_entropy(dist))
    h_i = float(np.mean(entropies))
    return ViewScore(pose, h_i, base_entropy - h_i, len(completions))


def expected_entropy_for_view(net: NetworkParams, obs: ObservationGrid,
                              pose: CameraPose, outer_samples: int = 10,
                              inner_particles: int = 50, seed: int = 0,
                              budgets: NBVBudgets | None = None,
                              base_entropy: float | None = None) -> ViewScore:
    """Expected conditional entropy of one candidate view.

    Draws ``outer_samples`` completions from the posterior, reveals what
    the pose would observe on each, and averages the entropy of the
    re-estimated class posterior.
    """
    if outer_samples < 1 or inner_particles < 1:
        raise DataError("sampling budgets must be >= 1")
    budgets = replace(budgets or NBVBudgets(), outer_samples=outer_samples,
                      inner_particles=inner_particles)
    result = gibbs_complete(net, obs, iterations=budgets.iterations,
                            particles=outer_samples,
                            seed=int(substream(seed, 1).integers(0, 2 ** 31)),
                            threads=budgets.threads)
    if base_entropy is None:
        dist = classify(net, obs, particles=inner_particles,
                        iterations=budgets.iterations,
                        seed=int(substream(seed, 2).integers(0, 2 ** 31)),
                        threads=budgets.threads)
        base_entropy = recognition_entropy(dist)
    return _score_view(net, obs, pose, result.completions, base_entropy, budgets, seed)


def choose_next_view(net: NetworkParams, obs: ObservationGrid, candidates,
                     budgets: NBVBudgets | None = None,
                     seed: int = 0) -> tuple[CameraPose, list[ViewScore]]:
    """Pick the candidate with maximal estimated mutual information.

    The completion set and the base entropy are computed once and shared
    by every candidate; ties break to the earliest candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise DataError("choose_next_view requires at least one candidate")
    budgets = budgets or NBVBudgets()
    result = gibbs_complete(net, obs, iterations=budgets.iterations,
                            particles=budgets.outer_samples,
                            seed=int(substream(seed, 1).integers(0, 2 ** 31)),
                            threads=budgets.threads)
    dist = classify(net, obs, particles=budgets.inner_particles,
                    iterations=budgets.iterations,
                    seed=int(substream(seed, 2).integers(0, 2 ** 31)),
                    threads=budgets.threads)
    base_entropy = recognition_entropy(dist)
    scores = [_score_view(net, obs, pose, result.completions, base_entropy,
                          budgets, int(substream(seed, 4, ci).integers(0, 2 ** 31)))
              for ci, pose in enumerate(candidates)]
    best = int(np.argmax([s.mutual_information for s in scores]))
    return candidates[best], scores


def baseline_select(strategy: str, obs: ObservationGrid, candidates,
                    previous_pose: CameraPose | None = None, seed: int = 0,
                    budgets: NBVBudgets | None = None) -> CameraPose:
    """Non-probabilistic view selection baselines.

    random: uniform choice.  max_visibility: maximize the count of
    currently Unknown voxels that become observed when the observed
    surface set is rendered as a proxy shape.  farthest: maximize camera
    center distance from the previous pose.
    """
    candidates = list(candidates)
    if not candidates:
        raise DataError("baseline_select requires at least one candidate")
    budgets = budgets or NBVBudgets()
    if strategy == "random":
        rng = substream(seed, 5)
        return candidates[int(rng.integers(0, len(candidates)))]
    if strategy == "farthest":
        if previous_pose is None:
            raise DataError("farthest strategy requires the previous pose")
        dists = [float(np.linalg.norm(pose.position - previous_pose.position))
                 for pose in candidates]
        return candidates[int(np.argmax(dists))]
    if strategy == "max_visibility":
        proxy = VoxelGrid(obs.dims, 0, obs.surface_mask().astype(np.uint8))
        spec = GridSpec(dims=obs.dims, payload_origin=0)
        counts = []
        for pose in candidates:
            mask = new_observed_mask(proxy, obs, pose, budgets.width,
                                     budgets.height, budgets.focal_px, spec)
            counts.append(mask.count())
        return candidates[int(np.argmax(counts))]
    raise DataError(f"unknown baseline strategy {strategy!r}")


def _observe(true_shape: VoxelGrid, pose: CameraPose, budgets: NBVBudgets,
             spec: GridSpec) -> ObservationGrid:
    dm = render_depth(true_shape, pose, budgets.width, budgets.height, budgets.focal_px)
    return depth_to_observation(dm, pose, spec)


def plan_episode(net: NetworkParams, true_shape: VoxelGrid, initial_pose: CameraPose,
                 steps: int, strategy: str, budgets: NBVBudgets | None = None,
                 seed: int = 0) -> EpisodeLog:
    """Sequential multi-view episode against a ground-truth shape.

    Each step captures the current view of the true shape (simulated by
    rendering), merges it into the running observation, classifies, and
    asks the strategy for the next pose from a fresh set of random
    candidates.
    """
    if steps < 1:
        raise DataError("episodes need at least one step")
    if strategy not in ALL_STRATEGIES and strategy != "oracle":
        raise DataError(f"unknown strategy {strategy!r}")
    budgets = budgets or NBVBudgets()
    spec = _grid_spec_for(net)
    log = EpisodeLog()
    obs = ObservationGrid.all_unknown(net.input_dims)
    pose = initial_pose
    prev_entropy: float | None = None
    for step in range(steps):
        fresh = _observe(true_shape, pose, budgets, spec)
        obs, _ = merge_observations(obs, fresh)
        dist = classify(net, obs, particles=budgets.inner_particles,
                        iterations=budgets.iterations,
                        seed=int(substream(seed, 6, step).integers(0, 2 ** 31)),
                        threads=budgets.threads)
        entropy = recognition_entropy(dist)
        log.steps.append(StepRecord(step, strategy, pose, prev_entropy, entropy,
                                    dist.probs, obs.unknown_count()))
        prev_entropy = entropy
        if step + 1 == steps:
            break
        cand_seed = int(substream(seed, 7, step).integers(0, 2 ** 31))
        candidates = generate_view_candidates(budgets.candidates, budgets.radius,
                                              spec, cand_seed)
        if strategy == "mi":
            pose, _ = choose_next_view(net, obs, candidates, budgets,
                                       seed=int(substream(seed, 8, step).integers(0, 2 ** 31)))
        elif strategy == "oracle":
            scores = [_score_view(net, obs, c, [true_shape], entropy, budgets,
                                  int(substream(seed, 9, step, ci).integers(0, 2 ** 31)))
                      for ci, c in enumerate(candidates)]
            pose = candidates[int(np.argmin([s.expected_entropy for s in scores]))]
        else:
            pose = baseline_select(strategy, obs, candidates, previous_pose=pose,
                                   seed=int(substream(seed, 10, step).integers(0, 2 ** 31)),
                                   budgets=budgets)
    return log
