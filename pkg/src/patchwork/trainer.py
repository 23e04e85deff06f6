"""Double Q-learning of the attention policy and the three-stage schedule.

Stage 1 trains the task network on single full frames.  Stage 2 freezes it
and learns only the Q-net from replayed transitions.  Stage 3 fine-tunes
both jointly on streamed crops at a lower learning rate, with gradients
truncated at the cell memories and the normalisation left frozen.  A final
refit learns a fresh Q-net, stage-2 style, on the fine-tuned features.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, fields

import numpy as np

from . import synthetic_data as sd
from .attention import ActionSpace, Policy, QNet
from .rewards import box_overlap_metric, mask_miou, td0_reward
from .stream_model import StreamModel, StreamSession
from .stream_model import heads
from .tensor_core import RejectedInputError, load_arrays, save_arrays


class ConfigError(ValueError):
    pass


@dataclass
class TrainerConfig:
    # attention space and task
    M: int = 2
    N: int = 1
    task: str = "seg"
    seed: int = 0
    episode_frames: int = 20
    # stage 1
    stage1_steps: int = 1200
    stage1_batch: int = 16
    stage1_lr: float = 3e-3
    stage1_frames: int = 1600
    # stage 2 (Q-learning)
    stage2_episodes: int = 400
    gamma: float = 0.5
    lr: float = 0.01
    target_sync: int = 200
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 0  # 0 = half of the stage-2 environment steps
    replay_capacity: int = 10_000
    batch_size: int = 32
    warmup: int = 200
    # stage 3 (joint fine-tuning)
    stage3_episodes: int = 1600
    stage3_lr: float = 3e-4
    # fresh Q-net on the frozen fine-tuned backbone (0 = keep the stage-3 Q-net)
    refit_episodes: int = 800
    log_every: int = 50
    eval_episodes: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must be in [0, 1)")
        for name in ("stage1_lr", "lr", "stage3_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if min(self.stage2_episodes, self.stage3_episodes, self.refit_episodes) < 0:
            raise ConfigError("episode counts must be >= 0")
        for name in ("target_sync", "replay_capacity", "batch_size", "episode_frames", "stage1_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            raise ConfigError("need 0 <= eps_end <= eps_start <= 1")
        if self.stage3_lr >= self.stage1_lr:
            raise ConfigError("stage-3 learning rate must be below the stage-1 rate")
        if self.task not in ("seg", "det"):
            raise ConfigError(f"unknown task {self.task!r}")
        try:
            ActionSpace(self.M, self.N)
        except RejectedInputError as e:
            raise ConfigError(str(e)) from None

    @property
    def space(self) -> ActionSpace:
        return ActionSpace(self.M, self.N)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


@dataclass
class Transition:
    memory: np.ndarray
    history: np.ndarray
    action: int
    reward: float
    next_memory: np.ndarray
    next_history: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise RejectedInputError(f"reward {self.reward} outside [0, 1]")
        if not 0 <= self.action < len(self.history):
            raise RejectedInputError(f"action {self.action} invalid")


class ReplayBuffer:
    """Uniform ring buffer; appends are serialised, sampling is seeded."""

    def __init__(self, capacity=10_000, seed=0):
        self.capacity = capacity
        self.items: list[Transition] = []
        self.next = 0
        self.rng = np.random.default_rng(seed)
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.items)

    def append(self, tr: Transition):
        with self._lock:
            if len(self.items) < self.capacity:
                self.items.append(tr)
            else:
                self.items[self.next] = tr
            self.next = (self.next + 1) % self.capacity

    def extend(self, trs):
        for tr in trs:
            self.append(tr)

    def sample(self, batch_size) -> list[Transition]:
        idx = self.rng.integers(len(self.items), size=batch_size)
        return [self.items[i] for i in idx]


# -- double Q-learning ----------------------------------------------------------------

def _check_topology(a: QNet, b: QNet):
    if a.params.keys() != b.params.keys() or any(a.params[k].shape != b.params[k].shape for k in a.params):
        raise RejectedInputError("online and target nets differ in topology")


def ddqn_target(r, next_memory, next_history, online: QNet, target: QNet, gamma, terminal=False) -> float:
    """r + gamma * Q_target(s', argmax_a Q_online(s', a))."""
    _check_topology(online, target)
    if terminal:
        return float(r)
    q_on, _ = online.forward(next_memory[None], next_history[None])
    q_tg, _ = target.forward(next_memory[None], next_history[None])
    return float(r + gamma * q_tg[0, int(np.argmax(q_on[0]))])


def ddqn_targets(batch, online: QNet, target: QNet, gamma) -> np.ndarray:
    _check_topology(online, target)
    mem = np.stack([t.next_memory for t in batch])
    hist = np.stack([t.next_history for t in batch])
    r = np.array([t.reward for t in batch], np.float64)
    done = np.array([t.terminal for t in batch])
    q_on, _ = online.forward(mem, hist)
    q_tg, _ = target.forward(mem, hist)
    best = np.argmax(q_on, axis=1)  # first max: lowest-index tie-break
    boot = q_tg[np.arange(len(batch)), best]
    return np.where(done, r, r + gamma * boot)


def td_step(net: QNet, batch, target: QNet, lr, gamma):
    """One SGD step along mean_i delta_i * grad Q(s_i, a_i); returns (new net, mean squared TD error)."""
    if not batch:
        raise RejectedInputError("empty batch")
    y = ddqn_targets(batch, net, target, gamma)
    mem = np.stack([t.memory for t in batch])
    hist = np.stack([t.history for t in batch])
    acts = np.array([t.action for t in batch])
    q, cache = net.forward(mem, hist)
    rows = np.arange(len(batch))
    delta = y - q[rows, acts]
    grad_q = np.zeros_like(q)
    grad_q[rows, acts] = delta / len(batch)
    grads = net.backward(cache, grad_q)
    new = net.copy()
    for k in new.params:
        new.params[k] = (new.params[k] + lr * grads[k]).astype(new.params[k].dtype)
    return new, float(np.mean(delta ** 2))


def td_update(net: QNet, batch, target: QNet, cfg: TrainerConfig) -> QNet:
    return td_step(net, batch, target, cfg.lr, cfg.gamma)[0]


def sync_target(online: QNet) -> QNet:
    return online.copy()


def epsilon_at(step, cfg: TrainerConfig, total_steps) -> float:
    decay = cfg.eps_decay_steps or max(total_steps // 2, 1)
    frac = min(step / decay, 1.0)
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


# -- episodes -----------------------------------------------------------------------

def empty_prediction(task, dims):
    return np.zeros(dims, bool) if task == "seg" else []


def frame_metric(task, episode, t, pred) -> float:
    if task == "seg":
        return mask_miou(episode.gt_masks[t], pred)
    return box_overlap_metric(episode.gt_boxes[t], pred)


@dataclass
class EpisodeResult:
    metrics: list
    rewards: list
    actions: list
    transitions: list = field(default_factory=list)
    flops: list = field(default_factory=list)

    @property
    def mean_metric(self):
        return float(np.mean(self.metrics))


def run_episode(session: StreamSession, episode: sd.Episode, policy: Policy | None = None, collect=False,
                on_step=None) -> EpisodeResult:
    """Stream an episode from a fresh session state.

    The reward at t is max(0, f(gt_t, p_t) - f(gt_t, p_{t-1})); transitions
    pair (S_{t-1}, F_{t-1}) with the action A_t processed at t.
    ``on_step(t, record)`` lets the fine-tuning stage hook into each crop.
    """
    if policy is not None:
        session.policy = policy
    session.reset()
    task = session.task
    prev = empty_prediction(task, episode.dims)
    res = EpisodeResult([], [], [])
    for t, frame in enumerate(episode.frames):
        if frame.shape != session.model.input_dims:
            raise RejectedInputError(f"frame {t} has shape {frame.shape}")
        mem0, hist0 = session.tapped_memory().copy(), session.history.values.copy()
        step, rec = session.step(frame, keep_record=True)
        f_now = frame_metric(task, episode, t, step.output)
        f_stale = frame_metric(task, episode, t, prev)
        r = td0_reward(f_now, f_stale)
        res.metrics.append(f_now)
        res.rewards.append(r)
        res.actions.append(step.action)
        res.flops.append(step.flops)
        if collect:
            res.transitions.append(Transition(mem0, hist0, step.action, float(np.clip(r, 0, 1)),
                                              session.tapped_memory().copy(), session.history.values.copy(),
                                              terminal=t == len(episode) - 1))
        if on_step is not None:
            on_step(t, rec)
        prev = step.output
    return res


# -- data --------------------------------------------------------------------------

TRAIN_SCENARIOS = ("multi", "large", "stay")
EVAL_SCENARIOS = ("multi", "large")
EVAL_SEED_OFFSET = 1_000_000
VALIDATION_SEED_OFFSET = 500_000


def training_episode(seed, cfg: TrainerConfig) -> sd.Episode:
    """Alternate moving-shape scenarios with pan-scan videos."""
    kind = seed % 4
    if kind == 3:
        return sd.pan_scan_episode(seed, cfg.episode_frames)
    return sd.moving_shapes_scene(seed, cfg.episode_frames, scenario=TRAIN_SCENARIOS[kind])


def eval_episode(index, num_frames=20) -> sd.Episode:
    return sd.moving_shapes_scene(EVAL_SEED_OFFSET + index, num_frames, scenario=EVAL_SCENARIOS[index % 2])


def single_frames(cfg: TrainerConfig):
    """Stage-1 pool: a few frames from many episodes."""
    frames, masks, boxes = [], [], []
    seed = cfg.seed * 100_003
    while len(frames) < cfg.stage1_frames:
        ep = training_episode(seed, cfg)
        for t in (0, len(ep) // 2, len(ep) - 1):
            frames.append(ep.frames[t])
            masks.append(ep.gt_masks[t])
            boxes.append(ep.gt_boxes[t])
        seed += 1
    return np.stack(frames), np.stack(masks), boxes


# -- optimiser ----------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v, np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.betas
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params[k].dtype)


def task_loss(model: StreamModel, result, masks, boxes, task):
    if task == "seg":
        loss, g = heads.seg_loss(result["seg"], masks)
        return loss, g, None
    anchors = heads.all_anchors(model.det_levels())
    loss, g = heads.det_loss(result["det"], boxes, anchors)
    return loss, None, g


# -- schedule -----------------------------------------------------------------------

@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (step, epsilon, mean_episode_reward, td_loss, eval_metric)
    stage1_loss: list = field(default_factory=list)
    episode_rewards: list = field(default_factory=list)
    sync_steps: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["step,epsilon,mean_episode_reward,td_loss,eval_metric"]
        for s, e, r, l, m in self.rows:
            lines.append(f"{s},{e:.4f},{r:.6f},{l:.6f},{m:.4f}")
        return "\n".join(lines) + "\n"


def validation_episode(index, num_frames=20) -> sd.Episode:
    return sd.moving_shapes_scene(VALIDATION_SEED_OFFSET + index, num_frames, scenario=EVAL_SCENARIOS[index % 2])


def evaluate_quick(model, cfg, policy, n):
    sess = StreamSession(model, policy, cfg.task, seed=cfg.seed)
    return 100 * float(np.mean([run_episode(sess, validation_episode(i)).mean_metric for i in range(n)]))


def train_stage1(model: StreamModel, cfg: TrainerConfig, log: TrainingLog):
    frames, masks, boxes = single_frames(cfg)
    rng = np.random.default_rng(cfg.seed)
    model.calibrate(frames[:64])
    opt = Adam(model.params, cfg.stage1_lr)
    for step in range(cfg.stage1_steps):
        idx = rng.choice(len(frames), cfg.stage1_batch, replace=False)
        res = model.forward_full(frames[idx], tasks=(cfg.task,))
        loss, g_seg, g_det = task_loss(model, res, masks[idx], [boxes[i] for i in idx], cfg.task)
        grads = model.backward_full(res, g_seg, g_det)
        opt.lr = cfg.stage1_lr * (0.1 if step >= 0.8 * cfg.stage1_steps else 1.0)
        opt.step(model.params, grads)
        log.stage1_loss.append(loss)


def calibrate_qnet_scale(model: StreamModel, cfg: TrainerConfig, first_seed, episodes=4):
    """Fix the Q-net input gain from tapped memories seen under scanning."""
    sess = StreamSession(model, Policy("scanning"), cfg.task, seed=cfg.seed)
    memories = []
    for e in range(episodes):
        ep = training_episode(first_seed + e, cfg)
        run_episode(sess, ep, on_step=lambda t, rec: memories.append(sess.tapped_memory().copy()))
    return model.qnet.calibrate_scale(memories)


def train_qnet(model: StreamModel, cfg: TrainerConfig, log: TrainingLog, episodes, first_seed,
               finetune_lr=None, step0=0):
    """Stage 2 (``finetune_lr=None``) or stage 3 (joint)."""
    if finetune_lr is None:
        calibrate_qnet_scale(model, cfg, first_seed)
    online = model.qnet
    target = sync_target(online)
    buffer = ReplayBuffer(cfg.replay_capacity, cfg.seed)
    sess = StreamSession(model, Policy("epsilon-greedy", cfg.eps_start), cfg.task, seed=cfg.seed)
    total_steps = episodes * cfg.episode_frames
    step, updates = step0, 0
    opt = Adam(model.params, finetune_lr) if finetune_lr else None
    window_rewards, window_losses = [], []

    def finetune(t, rec):
        top, left, rows, cols = rec.window_px
        if cfg.task == "seg":
            gt = ep.gt_masks[t][top:top + rows, left:left + cols][None, ..., None]
            _, g = heads.seg_loss(rec.seg_logits[None], gt)
            grads = sess.backward_crop(rec, grad_seg=g)
        else:
            _, g = heads.det_loss([r[None] for r in rec.det_raw], [ep.gt_boxes[t]], rec.det_anchors)
            grads = sess.backward_crop(rec, grad_det=[x[0] for x in g])
        opt.step(model.params, grads)

    for e in range(episodes):
        ep = training_episode(first_seed + e, cfg)
        eps = epsilon_at((step - step0), cfg, total_steps) if finetune_lr is None else cfg.eps_end
        sess.policy = Policy("epsilon-greedy", eps)
        sess.qnet = online
        res = run_episode(sess, ep, collect=True, on_step=finetune if opt else None)
        buffer.extend(res.transitions)
        log.episode_rewards.append(float(np.sum(res.rewards)))
        window_rewards.append(float(np.sum(res.rewards)))
        for _ in res.transitions:
            step += 1
            if len(buffer) < min(cfg.warmup, cfg.replay_capacity):
                continue
            online, loss = td_step(online, buffer.sample(cfg.batch_size), target, cfg.lr, cfg.gamma)
            window_losses.append(loss)
            updates += 1
            if updates % cfg.target_sync == 0:
                target = sync_target(online)
                log.sync_steps.append(updates)
        if (e + 1) % cfg.log_every == 0 or e + 1 == episodes:
            model.qnet = online
            metric = evaluate_quick(model, cfg, Policy("greedy"), cfg.eval_episodes) if cfg.eval_episodes else 0.0
            log.rows.append((step, eps, float(np.mean(window_rewards)),
                             float(np.mean(window_losses)) if window_losses else 0.0, metric))
            window_rewards, window_losses = [], []
    model.qnet = online
    return step


def train_three_stage(cfg: TrainerConfig, model: StreamModel | None = None, stages=(1, 2, 3)):
    """Returns (model with trained weights and Q-net, TrainingLog)."""
    cfg.validate()
    model = model or StreamModel(space=cfg.space, seed=cfg.seed)
    log = TrainingLog()
    if 1 in stages:
        train_stage1(model, cfg, log)
    step = 0
    if 2 in stages:
        step = train_qnet(model, cfg, log, cfg.stage2_episodes, cfg.seed * 100_003 + 50_000)
    if 3 in stages and cfg.stage3_episodes:
        step = train_qnet(model, cfg, log, cfg.stage3_episodes, cfg.seed * 100_003 + 80_000,
                          finetune_lr=cfg.stage3_lr, step0=step)
    if 3 in stages and cfg.refit_episodes:
        # joint tuning changes the tapped features under a Q-net that explores
        # at eps_end only; relearning from scratch with the full epsilon decay
        # fits the final features better
        model.qnet = QNet(model.tap_shape(), model.space.num_actions, model.qnet_widths, seed=cfg.seed + 1)
        train_qnet(model, cfg, log, cfg.refit_episodes, cfg.seed * 100_003 + 90_000, step0=step)
    return model, log


# -- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, model: StreamModel):
    """Weights, frozen normalisation and Q-net in one PWT1 container."""
    arrays = {f"param.{k}": v for k, v in model.params.items()}
    arrays.update({f"norm.{k}": v for k, v in model.norms.items()})
    arrays.update({f"qnet.{k}": v for k, v in model.qnet.params.items()})
    arrays["qscale"] = np.array([model.qnet.input_scale], np.float64)
    save_arrays(path, arrays)


def load_checkpoint(path, model: StreamModel) -> StreamModel:
    """Fill ``model`` (built with the same layout) from a checkpoint."""
    arrays = load_arrays(path)
    for prefix, target in (("param.", model.params), ("norm.", model.norms), ("qnet.", model.qnet.params)):
        for k in target:
            v = arrays.get(prefix + k)
            if v is None or v.shape != target[k].shape:
                raise RejectedInputError(f"checkpoint entry {prefix + k} missing or mis-shaped")
            target[k] = v.astype(target[k].dtype)
    if "qscale" not in arrays:
        raise RejectedInputError("checkpoint entry qscale missing")
    model.qnet.input_scale = float(arrays["qscale"][0])
    return model
