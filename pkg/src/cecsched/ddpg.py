"""Learning broker: allocates offloading requests to stations.

Requests in a slot are chunked into fixed-size groups. For each group
the actor maps an observation of the current offers and the group's
tasks to one probability block per task over {reject, station 1..N};
the critic scores (observation, probability blocks) pairs. Groups are
decided sequentially within the slot, with capacity booked by earlier
groups subtracted before later ones, and each decision becomes one
replay transition whose successor is the next decision point.

Exploration follows the usual deterministic-policy recipe: Gaussian
noise on the logits, the noisy probabilities stored as the action, and
the realized assignment sampled from them. Station execution itself is
delegated to the sequential-plan solver.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import (
    REJECT,
    OffloadRequest,
    ResourceOffer,
    SchedulingScheme,
    SlotAction,
    SlotGrid,
    SystemState,
    consume_capacity,
    scheme_surplus,
)
from .execsolve import solve_bs
from .nn import (
    Adam,
    DenseNet,
    adam_from_dict,
    adam_to_dict,
    load_checkpoint,
    mse_loss,
    net_from_dict,
    net_to_dict,
    save_checkpoint,
    soft_update,
    softmax,
    softmax_backward,
)
from .sim import SimConfig, Simulator, reject_everything

__all__ = [
    "BufferUnderfull",
    "DdpgConfig",
    "group_tasks",
    "obs_dim",
    "act_dim",
    "RunningMax",
    "encode_observation",
    "availability_mask",
    "policy_probs",
    "decode_targets",
    "stage1_reward",
    "allocate_slot",
    "GroupRecord",
    "ReplayBuffer",
    "Allocator",
    "AllocatorPolicy",
    "TrainCurveRow",
    "train_allocator",
    "save_allocator",
    "load_allocator",
]


class BufferUnderfull(Exception):
    """Raised when a training step asks for more transitions than stored."""


@dataclass(frozen=True)
class DdpgConfig:
    """Learning hyperparameters; market shape comes from SimConfig."""

    hidden: tuple = (128, 128)
    gamma: float = 0.95
    omega: float = 0.01
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    buffer_size: int = 100_000
    batch_size: int = 64
    noise_start: float = 1.0
    noise_end: float = 0.05
    warmup: int = 320
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.buffer_size < self.batch_size:
            raise ValueError("buffer must hold at least one batch")
        if not (0 <= self.gamma <= 1) or not (0 < self.omega <= 1):
            raise ValueError("gamma in [0,1] and omega in (0,1] required")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DdpgConfig":
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        return cls(**doc)


def group_tasks(requests: Sequence[OffloadRequest], group_size: int) -> list:
    """Chunk requests into groups of `group_size`, padding the last with None."""
    if group_size < 1:
        raise ValueError("group_size must be positive")
    groups = []
    for start in range(0, len(requests), group_size):
        chunk = list(requests[start:start + group_size])
        while len(chunk) < group_size:
            chunk.append(None)
        groups.append(chunk)
    return groups


def obs_dim(sim_cfg: SimConfig) -> int:
    return sim_cfg.n_bs * 2 * sim_cfg.delta + 3 * sim_cfg.group_size


def act_dim(sim_cfg: SimConfig) -> int:
    return sim_cfg.group_size * (sim_cfg.n_bs + 1)


class RunningMax:
    """Grow-only scale for a feature stream; division floor of 1.

    Posted prices have no hard config ceiling (they scale inversely
    with spare capacity), so the encoder normalizes by the largest
    price observed so far instead of a fixed constant.
    """

    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def fold(self, offers_by_bs: dict) -> float:
        for offer in offers_by_bs.values():
            if offer.price.size:
                peak = float(np.max(offer.price))
                if peak > self.value:
                    self.value = peak
        return self.scale()

    def scale(self) -> float:
        return self.value if self.value > 0 else 1.0


def encode_observation(sim_cfg: SimConfig, offers_by_bs: dict,
                       group: Sequence[Optional[OffloadRequest]],
                       price_scale: Optional[float] = None) -> np.ndarray:
    """Flat observation: per-station capacity/price curves, then task triples.

    Entries are scaled to sit near [0, 1]: capacities by the largest
    raw capacity, prices by `price_scale` (a running max maintained by
    the caller; defaults to the price of a floor-sized offer slot),
    workloads and valuations by their draw maxima. Missing stations and
    padding tasks encode as zeros.
    """
    c = sim_cfg
    parts = []
    if price_scale is None:
        price_scale = c.kappa / c.min_offer_hz
    for bs in range(1, c.n_bs + 1):
        offer = offers_by_bs.get(bs)
        if offer is None:
            parts.append(np.zeros(2 * c.delta))
        else:
            parts.append(np.concatenate([
                offer.capacity / c.raw_capacity_high,
                offer.price / price_scale,
            ]))
    for task in group:
        if task is None:
            parts.append(np.zeros(3))
        else:
            parts.append(np.array([
                task.workload / c.workload_high,
                task.max_utility / c.max_utility_high,
                task.latency_penalty / c.latency_penalty_high,
            ]))
    return np.concatenate(parts)


def availability_mask(sim_cfg: SimConfig, offers_by_bs: dict) -> np.ndarray:
    """(n_bs + 1,) bool: rejection always allowed, stations only if present."""
    mask = np.zeros(sim_cfg.n_bs + 1, dtype=bool)
    mask[0] = True
    for bs, offer in offers_by_bs.items():
        if np.any(offer.capacity > 0):
            mask[bs] = True
    return mask


def policy_probs(sim_cfg: SimConfig, logits: np.ndarray, mask: np.ndarray,
                 task_mask: np.ndarray) -> np.ndarray:
    """Per-task softmax blocks with unavailable stations masked out.

    `logits` is (..., K*(N+1)); `mask` broadcasts over the block axis and
    `task_mask` marks real tasks; padding rows collapse to a hard reject.
    Returns the same shape as `logits`.
    """
    k = sim_cfg.group_size
    width = sim_cfg.n_bs + 1
    shaped = logits.reshape(logits.shape[:-1] + (k, width)).copy()
    mask_b = np.asarray(mask, dtype=bool)
    if mask_b.ndim == logits.ndim:  # one mask per batch row
        mask_b = mask_b[..., None, :]
    shaped = np.where(mask_b, shaped, -1e30)
    probs = softmax(shaped, axis=-1)
    tm = np.asarray(task_mask, dtype=bool)
    if tm.ndim == logits.ndim:
        tm = tm[..., None]
    reject_row = np.zeros(width)
    reject_row[0] = 1.0
    probs = np.where(tm, probs, reject_row)
    return probs.reshape(logits.shape)


def decode_targets(sim_cfg: SimConfig, probs: np.ndarray,
                   group: Sequence[Optional[OffloadRequest]],
                   sample: bool = False,
                   rng: Optional[np.random.Generator] = None) -> list:
    """Per-task target station (0 rejects); padding entries get None."""
    width = sim_cfg.n_bs + 1
    blocks = probs.reshape(sim_cfg.group_size, width)
    targets = []
    for i, task in enumerate(group):
        if task is None:
            targets.append(None)
        elif sample:
            targets.append(int(rng.choice(width, p=blocks[i] / blocks[i].sum())))
        else:
            targets.append(int(np.argmax(blocks[i])))
    return targets


def stage1_reward(state: SystemState, targets: dict, grid: SlotGrid) -> float:
    """Welfare of an allocation decision, with execution delegated downstream.

    `targets` maps task_id to a station id (0 rejects). Tasks are
    partitioned by target and each station's batch is scheduled by the
    sequential solver against that station's full posted offer; tasks
    the solver cannot fit are dropped there and contribute zero, as do
    rejects and tasks pointed at absent stations.
    """
    offers_by_bs = {o.bs_id: o for o in state.offers}
    by_bs: dict = {}
    for task in state.requests:
        target = targets.get(task.task_id, REJECT)
        if target != REJECT and target in offers_by_bs:
            by_bs.setdefault(target, []).append(task)
    total = 0.0
    for bs, batch in sorted(by_bs.items()):
        total += solve_bs(batch, offers_by_bs[bs], grid).total_surplus
    return total


@dataclass
class GroupRecord:
    """One decision point, pending its successor observation."""

    obs: np.ndarray
    action: np.ndarray
    reward: float
    mask: np.ndarray
    task_mask: np.ndarray


def allocate_slot(sim_cfg: SimConfig,
                  actor_forward: Callable[[np.ndarray], np.ndarray],
                  state: SystemState,
                  grid: SlotGrid,
                  sigma: float = 0.0,
                  rng: Optional[np.random.Generator] = None,
                  sample: bool = False,
                  collect: bool = False,
                  price_norm: Optional[RunningMax] = None,
                  order_provider: Optional[Callable] = None):
    """Allocate one slot's requests group by group.

    Returns (SlotAction, records). Capacity booked by earlier groups is
    subtracted from what later groups see, so a slot's combined schemes
    never oversubscribe a station. Rewards in the records are raw group
    surpluses (unscaled). `order_provider` is handed to the per-station
    solver; the default is the ratio order.
    """
    offers_by_bs = {o.bs_id: o for o in state.offers}
    remaining = {bs: o.capacity.copy() for bs, o in offers_by_bs.items()}
    schemes = []
    records = []
    horizon = grid.horizon
    for group in group_tasks(list(state.requests), sim_cfg.group_size):
        cur_offers = {}
        for bs, offer in offers_by_bs.items():
            if np.any(remaining[bs] > 0):
                cur_offers[bs] = ResourceOffer(
                    bs_id=bs, posted_at=offer.posted_at,
                    capacity=remaining[bs].copy(), price=offer.price)
        scale = price_norm.fold(cur_offers) if price_norm is not None else None
        obs = encode_observation(sim_cfg, cur_offers, group, scale)
        mask = availability_mask(sim_cfg, cur_offers)
        task_mask = np.array([t is not None for t in group])
        logits = actor_forward(obs)
        if sigma > 0:
            logits = logits + rng.normal(0.0, sigma, size=logits.shape)
        probs = policy_probs(sim_cfg, logits, mask, task_mask)
        targets = decode_targets(sim_cfg, probs, group, sample=sample, rng=rng)
        by_bs: dict = {}
        group_schemes = []
        for task, target in zip(group, targets):
            if task is None:
                continue
            if target == REJECT or target not in cur_offers:
                group_schemes.append(SchedulingScheme(
                    task_id=task.task_id, target=REJECT,
                    exec_freq=np.zeros(horizon)))
            else:
                by_bs.setdefault(target, []).append(task)
        for bs, batch in sorted(by_bs.items()):
            plan = solve_bs(batch, cur_offers[bs], grid,
                            order_provider=order_provider)
            group_schemes.extend(plan.schemes())
            for ex in plan.executions:
                remaining[bs] = consume_capacity(remaining[bs], ex.freq)
        reward = sum(scheme_surplus(s, state, grid) for s in group_schemes)
        schemes.extend(group_schemes)
        if collect:
            records.append(GroupRecord(
                obs=obs, action=probs.copy(), reward=float(reward),
                mask=mask.copy(), task_mask=task_mask.copy()))
    return SlotAction(tuple(schemes)), records


class ReplayBuffer:
    """Flat ring buffer of transitions in preallocated arrays."""

    def __init__(self, capacity: int, obs_width: int, act_width: int,
                 mask_width: int, task_width: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_width))
        self.act = np.zeros((capacity, act_width))
        self.rew = np.zeros(capacity)
        self.mask = np.zeros((capacity, mask_width), dtype=bool)
        self.task_mask = np.zeros((capacity, task_width), dtype=bool)
        self.next_obs = np.zeros((capacity, obs_width))
        self.next_mask = np.zeros((capacity, mask_width), dtype=bool)
        self.next_task_mask = np.zeros((capacity, task_width), dtype=bool)
        self.done = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def push(self, obs, act, rew, mask, task_mask,
             next_obs, next_mask, next_task_mask, done) -> None:
        i = self.head
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.mask[i] = mask
        self.task_mask[i] = task_mask
        self.next_obs[i] = next_obs
        self.next_mask[i] = next_mask
        self.next_task_mask[i] = next_task_mask
        self.done[i] = done
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        """Uniform i.i.d. draw over the filled entries."""
        if self.size < 1:
            raise BufferUnderfull("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return {
            "obs": self.obs[idx],
            "act": self.act[idx],
            "rew": self.rew[idx],
            "mask": self.mask[idx],
            "task_mask": self.task_mask[idx],
            "next_obs": self.next_obs[idx],
            "next_mask": self.next_mask[idx],
            "next_task_mask": self.next_task_mask[idx],
            "done": self.done[idx],
        }


class Allocator:
    """Actor/critic pair with target copies and their optimizers."""

    def __init__(self, sim_cfg: SimConfig, cfg: DdpgConfig):
        self.sim_cfg = sim_cfg
        self.cfg = cfg
        d_obs = obs_dim(sim_cfg)
        d_act = act_dim(sim_cfg)
        hidden = list(cfg.hidden)
        acts = ["tanh"] * len(hidden) + ["identity"]
        self.actor = DenseNet([d_obs] + hidden + [d_act], acts, seed=cfg.seed)
        self.critic = DenseNet([d_obs + d_act] + hidden + [1], acts,
                               seed=cfg.seed + 1)
        self.target_actor = self.actor.clone()
        self.target_critic = self.critic.clone()
        self.opt_actor = Adam(self.actor.n_params, lr=cfg.lr_actor)
        self.opt_critic = Adam(self.critic.n_params, lr=cfg.lr_critic)
        # worst-case utility mass of one group; rewards are divided by
        # this before storage so TD targets stay near unit range
        self.reward_scale = sim_cfg.group_size * sim_cfg.max_utility_high
        self.price_norm = RunningMax()

    # -- acting --------------------------------------------------------------

    def actor_logits(self, obs: np.ndarray) -> np.ndarray:
        return self.actor.forward(obs)

    def greedy_probs(self, obs, mask, task_mask) -> np.ndarray:
        return policy_probs(self.sim_cfg, self.actor.forward(obs), mask,
                            task_mask)

    # -- learning ------------------------------------------------------------

    def td_target(self, batch: dict) -> np.ndarray:
        """Bootstrap targets y = r + gamma * Q'(s', pi'(s')) from the target
        pair; terminal transitions keep only the stored reward."""
        next_logits = self.target_actor.forward(batch["next_obs"])
        next_act = policy_probs(self.sim_cfg, next_logits, batch["next_mask"],
                                batch["next_task_mask"])
        q_next = self.target_critic.forward(
            np.concatenate([batch["next_obs"], next_act], axis=1))[:, 0]
        return batch["rew"] + self.cfg.gamma * (1.0 - batch["done"]) * q_next

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator,
                   batch_size: Optional[int] = None) -> tuple:
        """Sample a minibatch, regress the critic, ascend the actor.

        Returns (critic_loss, mean_q). Raises BufferUnderfull when the
        buffer holds fewer transitions than the batch size.
        """
        cfg = self.cfg
        if batch_size is None:
            batch_size = cfg.batch_size
        if len(buffer) < batch_size:
            raise BufferUnderfull(
                f"buffer holds {len(buffer)} < batch size {batch_size}")
        batch = buffer.sample(batch_size, rng)
        obs, act = batch["obs"], batch["act"]

        y = self.td_target(batch)
        q, cache = self.critic.forward_cached(
            np.concatenate([obs, act], axis=1))
        loss, dq = mse_loss(q[:, 0], y)
        grad_c, _ = self.critic.backward(cache, dq[:, None])
        self.opt_critic.apply(self.critic, grad_c)

        # actor: ascend mean Q(s, pi(s))
        logits, actor_cache = self.actor.forward_cached(obs)
        probs = policy_probs(self.sim_cfg, logits, batch["mask"],
                             batch["task_mask"])
        q_pi, critic_cache = self.critic.forward_cached(
            np.concatenate([obs, probs], axis=1))
        n = obs.shape[0]
        _, d_input = self.critic.backward(critic_cache,
                                          np.full((n, 1), 1.0 / n))
        d_probs = d_input[:, obs.shape[1]:]
        k = self.sim_cfg.group_size
        width = self.sim_cfg.n_bs + 1
        d_blocks = d_probs.reshape(n, k, width)
        p_blocks = probs.reshape(n, k, width)
        d_logits = softmax_backward(p_blocks, d_blocks, axis=-1)
        # padding rows are pinned to hard rejects; no gradient flows
        d_logits = np.where(batch["task_mask"][:, :, None], d_logits, 0.0)
        grad_a, _ = self.actor.backward(actor_cache,
                                        -d_logits.reshape(n, k * width))
        self.opt_actor.apply(self.actor, grad_a)

        soft_update(self.target_actor, self.actor, cfg.omega)
        soft_update(self.target_critic, self.critic, cfg.omega)
        return float(loss), float(np.mean(q_pi))


class AllocatorPolicy:
    """Greedy deployment wrapper implementing the simulator's policy protocol."""

    def __init__(self, allocator: Allocator,
                 order_provider: Optional[Callable] = None):
        self.allocator = allocator
        self.sim_cfg = allocator.sim_cfg
        self.order_provider = order_provider

    def __call__(self, state: SystemState, grid: SlotGrid) -> SlotAction:
        if not state.requests:
            return reject_everything(state, grid)
        action, _ = allocate_slot(self.sim_cfg, self.allocator.actor.forward,
                                  state, grid,
                                  price_norm=self.allocator.price_norm,
                                  order_provider=self.order_provider)
        return action


@dataclass
class TrainCurveRow:
    episode: int
    welfare: float
    moving_avg: float
    critic_loss: float
    sigma: float


def train_allocator(sim_cfg: SimConfig, cfg: DdpgConfig, episodes: int,
                    seed: int = 0,
                    episode_length: Optional[int] = None,
                    ma_window: int = 50,
                    progress: Optional[Callable[[TrainCurveRow], None]] = None):
    """Run the full training loop; returns (Allocator, list of curve rows).

    Episode e uses simulator seed `seed + e` so runs are reproducible
    and different training seeds see different traffic. Exploration
    noise anneals linearly across the episode budget. One gradient step
    runs after every simulator slot once the warmup fills.
    """
    allocator = Allocator(sim_cfg, cfg)
    rng = np.random.default_rng(cfg.seed + 7919)
    buf = ReplayBuffer(cfg.buffer_size, obs_dim(sim_cfg), act_dim(sim_cfg),
                       sim_cfg.n_bs + 1, sim_cfg.group_size)
    length = sim_cfg.episode_length if episode_length is None else episode_length
    scale = allocator.reward_scale
    curve: List[TrainCurveRow] = []
    welfare_hist: List[float] = []
    for ep in range(episodes):
        frac = ep / max(1, episodes - 1)
        sigma = cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac
        sim = Simulator(sim_cfg, seed=seed + ep)
        pending: Optional[GroupRecord] = None
        welfare = 0.0
        losses = []
        for _ in range(length):
            grid = sim.current_grid()

            def policy(state, grid=grid):
                action, recs = allocate_slot(
                    sim_cfg, allocator.actor.forward, state, grid,
                    sigma=sigma, rng=rng, sample=True, collect=True,
                    price_norm=allocator.price_norm)
                policy.records = recs
                return action

            policy.records = []
            record = sim.step(policy)
            welfare += record.reward
            for rec in policy.records:
                if pending is not None:
                    buf.push(pending.obs, pending.action,
                             pending.reward / scale,
                             pending.mask, pending.task_mask,
                             rec.obs, rec.mask, rec.task_mask, 0.0)
                pending = rec
            if len(buf) >= max(cfg.warmup, cfg.batch_size):
                loss, _ = allocator.train_step(buf, rng)
                losses.append(loss)
        if pending is not None:
            # terminal: successor never arrives inside this episode
            buf.push(pending.obs, pending.action, pending.reward / scale,
                     pending.mask, pending.task_mask,
                     np.zeros_like(pending.obs), np.zeros_like(pending.mask),
                     np.zeros_like(pending.task_mask), 1.0)
            pending = None
        welfare_hist.append(welfare)
        row = TrainCurveRow(
            episode=ep,
            welfare=welfare,
            moving_avg=float(np.mean(welfare_hist[-ma_window:])),
            critic_loss=float(np.mean(losses)) if losses else float("nan"),
            sigma=sigma,
        )
        curve.append(row)
        if progress is not None:
            progress(row)
    return allocator, curve


# ---------------------------------------------------------------------------
# persistence

def save_allocator(path: str, allocator: Allocator, seed: Optional[int] = None,
                   extra: Optional[dict] = None) -> None:
    payload = {
        "kind": "allocator",
        "sim_config": allocator.sim_cfg.to_dict(),
        "ddpg_config": allocator.cfg.to_dict(),
        "seed": seed,
        "price_max": allocator.price_norm.value,
        "nets": {
            "actor": net_to_dict(allocator.actor),
            "critic": net_to_dict(allocator.critic),
            "target_actor": net_to_dict(allocator.target_actor),
            "target_critic": net_to_dict(allocator.target_critic),
        },
        "optimizers": {
            "actor": adam_to_dict(allocator.opt_actor),
            "critic": adam_to_dict(allocator.opt_critic),
        },
    }
    if extra:
        payload["extra"] = extra
    save_checkpoint(path, payload)


def load_allocator(path: str) -> Allocator:
    doc = load_checkpoint(path)
    if doc.get("kind") != "allocator":
        raise ValueError(f"{path} is not an allocator checkpoint")
    sim_cfg = SimConfig.from_dict(doc["sim_config"])
    cfg = DdpgConfig.from_dict(doc["ddpg_config"])
    allocator = Allocator(sim_cfg, cfg)
    allocator.actor = net_from_dict(doc["nets"]["actor"])
    allocator.critic = net_from_dict(doc["nets"]["critic"])
    allocator.target_actor = net_from_dict(doc["nets"]["target_actor"])
    allocator.target_critic = net_from_dict(doc["nets"]["target_critic"])
    allocator.opt_actor = adam_from_dict(doc["optimizers"]["actor"])
    allocator.opt_critic = adam_from_dict(doc["optimizers"]["critic"])
    allocator.price_norm = RunningMax(doc.get("price_max", 0.0))
    return allocator
