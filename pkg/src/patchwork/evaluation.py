"""Held-out comparisons: attention policies, single-frame baseline, ablations."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .attention import ActionSpace, Policy
from .stream_model import StreamModel, StreamSession, stateless_predict
from .trainer import empty_prediction, eval_episode, frame_metric, run_episode

EVAL_POLICIES = ("dqn", "random", "scanning")


def policy_for(name) -> Policy:
    return Policy("greedy") if name == "dqn" else Policy(name)


def _map(fn, items, jobs):
    """Ordered map; with jobs > 1 episodes run in worker processes and are
    merged by index, so the result does not depend on completion order."""
    if jobs <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


class _EpisodeJob:
    """Picklable per-episode evaluation."""

    def __init__(self, model, task, policy, context=True, mode="incremental", seed=0, num_frames=20):
        self.model, self.task, self.policy = model, task, policy
        self.context, self.mode, self.seed, self.num_frames = context, mode, seed, num_frames

    def __call__(self, index):
        ep = eval_episode(index, self.num_frames)
        sess = StreamSession(self.model, self.policy, self.task, seed=self.seed + index,
                             context=self.context, mode=self.mode)
        return run_episode(sess, ep).mean_metric


def eval_policy(model: StreamModel, name, episodes, task="seg", context=True, mode="incremental", jobs=1,
                num_frames=20) -> float:
    """Mean per-frame task metric over held-out episodes, in points (x100)."""
    job = _EpisodeJob(model, task, policy_for(name), context, mode, num_frames=num_frames)
    return 100 * float(np.mean(_map(job, range(episodes), jobs)))


class _SingleFrameJob:
    def __init__(self, model, task, interval, delay, num_frames):
        self.model, self.task, self.interval, self.delay, self.num_frames = model, task, interval, delay, num_frames

    def __call__(self, index):
        ep = eval_episode(index, self.num_frames)
        return np.mean(single_frame_metrics(self.model, ep, self.task, self.interval, self.delay))


def single_frame_metrics(model: StreamModel, episode, task="seg", interval=4, delay=3):
    """Full-frame network on every K-th frame; its result becomes usable d
    frames later and is held until the next one arrives."""
    current = empty_prediction(task, episode.dims)
    pending = {}
    metrics = []
    for t, frame in enumerate(episode.frames):
        if t % interval == 0:
            pending[t + delay] = stateless_predict(model, frame, task)
        if t in pending:
            current = pending.pop(t)
        metrics.append(frame_metric(task, episode, t, current))
    return metrics


def eval_single_frame(model, episodes, task="seg", interval=4, delay=3, jobs=1, num_frames=20) -> float:
    job = _SingleFrameJob(model, task, interval, delay, num_frames)
    return 100 * float(np.mean(_map(job, range(episodes), jobs)))


def eval_stateless(model, episodes, task="seg", jobs=1, num_frames=20) -> float:
    """Full-frame network on every frame (the cost ceiling)."""
    return eval_single_frame(model, episodes, task, 1, 0, jobs, num_frames)


def policy_table(model, episodes, task="seg", jobs=1, num_frames=20):
    """Rows (method, metric) in the order dqn, random, scanning, single-frame."""
    rows = [(name, eval_policy(model, name, episodes, task, jobs=jobs, num_frames=num_frames))
            for name in EVAL_POLICIES]
    rows.append(("single-frame", eval_single_frame(model, episodes, task, jobs=jobs, num_frames=num_frames)))
    return rows


def ablation_table(model, episodes, task="seg", jobs=1, num_frames=20):
    """Rows (policy, cells, metric) for scanning/DQN with cells on and off; the
    same weights serve both settings."""
    rows = []
    for name in ("scanning", "dqn"):
        for context in (True, False):
            rows.append((name, "on" if context else "off",
                         eval_policy(model, name, episodes, task, context=context, jobs=jobs, num_frames=num_frames)))
    return rows


def approximation_gap(model, episodes, task="seg", policy="scanning", jobs=1, num_frames=20):
    """(input-cell metric, incremental metric) under one policy."""
    a = eval_policy(model, policy, episodes, task, mode="input-cell", jobs=jobs, num_frames=num_frames)
    b = eval_policy(model, policy, episodes, task, mode="incremental", jobs=jobs, num_frames=num_frames)
    return a, b


def reduction_metrics(model, episodes, task="seg", num_frames=20):
    """Streaming with a single full-frame window vs the stateless network."""
    full = model.with_space(ActionSpace(1, 1))
    a = eval_policy(full, "scanning", episodes, task, num_frames=num_frames)
    b = eval_stateless(model, episodes, task, num_frames=num_frames)
    return a, b
