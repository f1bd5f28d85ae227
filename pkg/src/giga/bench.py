"""Clutter-removal benchmark: repeated observe -> detect -> execute -> remove.

An episode starts from a procedurally generated scene and loops until the
table is cleared, two consecutive attempts fail, or the policy proposes no
grasp (no-detection ends the episode immediately; the failure counter never
sees it). Depth is rendered from the single fixed camera and fused only when
the scene has changed; failed attempts reuse the cached TSDF.

Policies are callables `(scene, tsdf, rng) -> (Grasp | None, quality | None)`.
The model policy only reads the TSDF; the scene argument exists so baselines
(random surface grasp) and test doubles can cheat deliberately.
"""

import csv
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .detect import DetectionConfig, detect
from .oracle import Grasp, GripperModel, grasp_outcome, sample_grasp_candidates
from .scene import SamplingExhausted, gen_packed_scene, gen_pile_scene, remove_object
from .sensor import NoiseParams, apply_noise, place_camera, render_depth
from .tsdf import TsdfGrid, integrate_depth

logger = logging.getLogger(__name__)

TERMINATIONS = ("cleared", "two-failures", "no-grasp")
SCENARIO_GENERATORS = {"packed": gen_packed_scene, "pile": gen_pile_scene}

METRICS_FIELDS = ("scenario", "mode", "episodes",
                  "GSR_mean", "GSR_std", "DR_mean", "DR_std")


@dataclass(frozen=True)
class BenchConfig:
    object_count: int = 5
    resolution: int = 40
    episodes: int = 100
    repeats: int = 5

    def __post_init__(self):
        if self.object_count < 1:
            raise ValueError("object_count must be >= 1")
        if self.resolution < 1:
            raise ValueError("resolution must be >= 1")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass(frozen=True)
class AttemptRecord:
    grasp: Grasp
    quality: float  # policy's predicted quality; None when it has none
    label: int      # oracle outcome
    removed_uid: int  # uid taken off the table, None on failure


@dataclass(frozen=True)
class EpisodeResult:
    scenario: str
    seed: int
    initial_objects: int
    attempts: tuple
    termination: str

    def __post_init__(self):
        if self.termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.termination!r}")
        object.__setattr__(self, "attempts", tuple(self.attempts))
        # worst case alternates fail/success per object then fails twice
        if len(self.attempts) > 2 * self.initial_objects + 2:
            raise ValueError("attempt count exceeds the termination bound")
        labels = [a.label for a in self.attempts]
        if self.termination == "cleared" and sum(labels) != self.initial_objects:
            raise ValueError("cleared episode must remove every object")
        if self.termination == "two-failures" and labels[-2:] != [0, 0]:
            raise ValueError("two-failures episode must end with two failures")

    @property
    def successes(self):
        return sum(a.label for a in self.attempts)

    @property
    def removed_fraction(self):
        if self.initial_objects == 0:
            return 1.0
        return self.successes / self.initial_objects


# ---------------------------------------------------------------------------
# Policies


def model_policy(model, config=None, gripper=None):
    """Detection pipeline as a policy; ignores the scene and the rng."""
    config = config or DetectionConfig()

    def policy(scene, tsdf, rng):
        (grasp, quality), _ = detect(model, tsdf, config, gripper)
        return grasp, quality

    return policy


def random_surface_policy(gripper=None):
    """Baseline: one random surface-sampled candidate per attempt."""
    gripper = gripper or GripperModel()

    def policy(scene, tsdf, rng):
        seed = int(rng.integers(2**31 - 1))
        cands = sample_grasp_candidates(scene, gripper, 1, seed)
        return cands[0], None

    return policy


# ---------------------------------------------------------------------------
# Episode loop


def run_episode(policy, scenario, seed, config=None, gripper=None,
                noise_params=None):
    """One clutter-removal episode; all randomness derives from `seed`."""
    if scenario not in SCENARIO_GENERATORS:
        raise ValueError(f"unknown scenario {scenario!r}")
    config = config or BenchConfig()
    gripper = gripper or GripperModel()
    noise_params = noise_params or NoiseParams()

    root = np.random.SeedSequence(seed)
    scene_ss, noise_ss, policy_ss = root.spawn(3)
    scene = SCENARIO_GENERATORS[scenario](
        int(scene_ss.generate_state(1)[0]), object_count=config.object_count)
    initial = len(scene.objects)
    # one noise word per render; successes bound the render count
    noise_seeds = noise_ss.generate_state(initial + 1)
    policy_rng = np.random.default_rng(policy_ss)

    cam = place_camera(scene.workspace_size)
    attempts = []
    consecutive_failures = 0
    renders = 0
    grid = None
    termination = None
    while True:
        if not scene.objects:
            termination = "cleared"
            break
        if grid is None:
            img = apply_noise(render_depth(scene, cam), noise_params,
                              int(noise_seeds[renders]))
            grid = integrate_depth(
                TsdfGrid.empty(config.resolution, scene.workspace_size),
                img, cam)
            renders += 1
        try:
            grasp, quality = policy(scene, grid, policy_rng)
        except SamplingExhausted as exc:
            logger.warning("episode %s/%d: policy found no candidate (%s)",
                           scenario, seed, exc)
            grasp, quality = None, None
        if grasp is None:
            termination = "no-grasp"
            break
        label, uid = grasp_outcome(scene, gripper, grasp)
        attempts.append(AttemptRecord(grasp, quality, label, uid))
        if label:
            scene = remove_object(scene, uid)
            grid = None  # scene changed; re-render next pass
            consecutive_failures = 0
        else:
            consecutive_failures += 1
            if consecutive_failures >= 2:
                termination = "two-failures"
                break
    return EpisodeResult(scenario, seed, initial, tuple(attempts), termination)


# ---------------------------------------------------------------------------
# Aggregation


def episode_rates(results):
    """(GSR, DR) in percent for one batch of episodes.

    GSR pools attempts across the batch; DR averages per episode. A batch
    with zero attempts has GSR 0 by convention.
    """
    results = list(results)
    if not results:
        raise ValueError("need at least one episode")
    n_attempts = sum(len(r.attempts) for r in results)
    n_success = sum(r.successes for r in results)
    gsr = 100.0 * n_success / n_attempts if n_attempts else 0.0
    dr = 100.0 * float(np.mean([r.removed_fraction for r in results]))
    return gsr, dr


@dataclass(frozen=True)
class Metrics:
    scenario: str
    mode: str
    episodes: int  # per repeat
    repeats: int
    gsr_mean: float  # percent
    gsr_std: float
    dr_mean: float
    dr_std: float

    def row(self):
        return {"scenario": self.scenario, "mode": self.mode,
                "episodes": self.episodes,
                "GSR_mean": self.gsr_mean, "GSR_std": self.gsr_std,
                "DR_mean": self.dr_mean, "DR_std": self.dr_std}


def aggregate_metrics(scenario, mode, repeat_results):
    """Metrics over independent repeats (population std across repeats)."""
    rates = [episode_rates(results) for results in repeat_results]
    gsr = np.array([r[0] for r in rates])
    dr = np.array([r[1] for r in rates])
    episodes = len(repeat_results[0])
    return Metrics(scenario, mode, episodes, len(rates),
                   float(gsr.mean()), float(gsr.std()),
                   float(dr.mean()), float(dr.std()))


def run_benchmark(policy, scenario, episodes, seed, repeats=None, mode="model",
                  config=None, gripper=None, noise_params=None, log_path=None):
    """Run `episodes` per repeat and aggregate; logs every episode as JSONL."""
    config = config or BenchConfig()
    repeats = config.repeats if repeats is None else repeats
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    root = np.random.SeedSequence(seed)
    repeat_results = []
    for rep_ss in root.spawn(repeats):
        ep_seeds = rep_ss.generate_state(episodes)
        results = [run_episode(policy, scenario, int(s), config, gripper,
                               noise_params)
                   for s in ep_seeds]
        repeat_results.append(results)
    if log_path is not None:
        write_episode_log(log_path,
                          [r for results in repeat_results for r in results])
    return aggregate_metrics(scenario, mode, repeat_results)


# ---------------------------------------------------------------------------
# Persistence


def episode_to_json(result):
    return {
        "scenario": result.scenario,
        "seed": int(result.seed),
        "initial_objects": int(result.initial_objects),
        "termination": result.termination,
        "attempts": [
            {
                "t": [float(v) for v in a.grasp.center],
                "quat": [float(v) for v in a.grasp.rotation],
                "w": float(a.grasp.width),
                "quality": None if a.quality is None else float(a.quality),
                "label": int(a.label),
                "removed_uid": None if a.removed_uid is None else int(a.removed_uid),
            }
            for a in result.attempts
        ],
    }


def episode_from_json(doc):
    attempts = tuple(
        AttemptRecord(Grasp(np.array(a["t"]), np.array(a["quat"]), a["w"]),
                      a["quality"], a["label"], a["removed_uid"])
        for a in doc["attempts"])
    return EpisodeResult(doc["scenario"], doc["seed"], doc["initial_objects"],
                         attempts, doc["termination"])


def write_episode_log(path, results):
    """One JSON document per line, one line per episode."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for r in results:
            f.write(json.dumps(episode_to_json(r), sort_keys=True) + "\n")


def read_episode_log(path):
    with open(path) as f:
        return [episode_from_json(json.loads(line)) for line in f
                if line.strip()]


def write_metrics_csv(path, metrics_list):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for m in metrics_list:
            writer.writerow(m.row())
