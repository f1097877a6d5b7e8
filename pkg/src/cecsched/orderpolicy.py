"""Learned processing orders for one station's task batch.

A shared dense encoder turns each task (its own attributes broadcast-
concatenated with the station's price and capacity curves) into an
embedding. A pointer-style decoder then emits the order: step t scores
every remaining task by the dot product of its embedding with a learned
step-t query vector and takes a masked softmax. Training is REINFORCE
against the sequential solver's realized execution cost, with the
policy's own greedy rollout as baseline. Deployment always runs behind
a per-instance guard, falling back to the ratio order whenever that is
no more expensive, so the learned component can only help.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .execsolve import smith_order, solve_bs
from .nn import (
    Adam,
    DenseNet,
    adam_from_dict,
    adam_to_dict,
    load_checkpoint,
    net_from_dict,
    net_to_dict,
    save_checkpoint,
)

__all__ = [
    "OrderFeatureScales",
    "ORDER_FAMILY_SCALES",
    "order_features",
    "OrderPolicy",
    "OrderDecision",
    "emit_order",
    "order_cost",
    "guarded_order_provider",
    "OrderTrainReport",
    "reinforce_step",
    "OrderCurveRow",
    "train_order_policy",
    "save_order_policy",
    "load_order_policy",
]


@dataclass(frozen=True)
class OrderFeatureScales:
    """Divisors bringing raw feature magnitudes near unit range.

    Defaults mirror the market config's draw ceilings; the price scale
    is the largest price a floor-sized offer slot can post.
    """

    workload: float = 2e7
    latency_penalty: float = 90.0
    utility: float = 500.0
    capacity: float = 40e9
    price: float = 2e-7

    def to_dict(self) -> dict:
        return {
            "workload": self.workload,
            "latency_penalty": self.latency_penalty,
            "utility": self.utility,
            "capacity": self.capacity,
            "price": self.price,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OrderFeatureScales":
        return cls(**doc)


# Fitted to sample_order_sensitive_instance's draw ranges so every
# feature lands in roughly [0.1, 1]; the market-wide defaults leave the
# family's price curve nearly invisible to a tanh encoder.
ORDER_FAMILY_SCALES = OrderFeatureScales(
    workload=1e7,
    latency_penalty=60.0,
    utility=3000.0,
    capacity=6e9,
    price=2e-8,
)


def order_features(tasks, offer, scales: OrderFeatureScales) -> np.ndarray:
    """(m, 3 + 2*delta) feature rows: task triple, then the environment."""
    env = np.concatenate([offer.price / scales.price,
                          offer.capacity / scales.capacity])
    rows = [
        np.concatenate([
            [task.workload / scales.workload,
             task.latency_penalty / scales.latency_penalty,
             task.max_utility / scales.utility],
            env,
        ])
        for task in tasks
    ]
    return np.stack(rows)


class OrderPolicy:
    """Shared tanh trunk, bias-free embedding head, per-step queries.

    The head carries no bias on purpose: a bias would shift every
    task's embedding identically, which the score softmax cannot see
    (scores move in lockstep), leaving a flat parameter direction.
    All three parameter blocks are managed as one flat vector.
    """

    def __init__(self, delta: int, m_max: int = 10,
                 hidden: Sequence[int] = (64,), embed: int = 32,
                 seed: int = 0,
                 scales: Optional[OrderFeatureScales] = None):
        if m_max < 1:
            raise ValueError("m_max must be positive")
        if not hidden:
            raise ValueError("need at least one hidden layer")
        self.delta = delta
        self.m_max = m_max
        self.embed = embed
        self.scales = scales if scales is not None else OrderFeatureScales()
        sizes = [3 + 2 * delta] + list(hidden)
        self.trunk = DenseNet(sizes, ["tanh"] * len(hidden), seed=seed)
        rng = np.random.default_rng(seed + 1)
        self.head = rng.uniform(-1.0 / np.sqrt(hidden[-1]),
                                1.0 / np.sqrt(hidden[-1]),
                                size=(hidden[-1], embed))
        self.queries = rng.uniform(-1.0 / np.sqrt(embed),
                                   1.0 / np.sqrt(embed),
                                   size=(m_max, embed))

    @property
    def n_params(self) -> int:
        return self.trunk.n_params + self.head.size + self.queries.size

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.trunk.get_flat(), self.head.ravel(),
                               self.queries.ravel()])

    def set_flat(self, theta: np.ndarray) -> None:
        if theta.shape != (self.n_params,):
            raise ValueError("parameter vector has the wrong length")
        a = self.trunk.n_params
        b = a + self.head.size
        self.trunk.set_flat(theta[:a])
        self.head = theta[a:b].reshape(self.head.shape)
        self.queries = theta[b:].reshape(self.m_max, self.embed)

    def embeddings(self, tasks, offer) -> np.ndarray:
        feats = order_features(tasks, offer, self.scales)
        return self.trunk.forward(feats) @ self.head


@dataclass
class OrderDecision:
    """An emitted order with its sampling log-probability."""

    order: tuple
    logp: float
    step_logps: tuple


def _step_distribution(scores: np.ndarray, remaining: np.ndarray):
    """Masked softmax over the remaining tasks; absent entries get 0."""
    z = np.where(remaining, scores, -np.inf)
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def emit_order(policy: OrderPolicy, tasks, offer, grid,
               mode: str = "greedy",
               rng: Optional[np.random.Generator] = None) -> OrderDecision:
    """Run the pointer decoder over the batch; always yields a permutation."""
    m = len(tasks)
    if m < 1:
        raise ValueError("cannot order an empty batch")
    if m > policy.m_max:
        raise ValueError(f"batch of {m} exceeds m_max={policy.m_max}")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sample mode needs an rng")
    emb = policy.embeddings(tasks, offer)
    remaining = np.ones(m, dtype=bool)
    order: List[int] = []
    step_logps: List[float] = []
    for t in range(m):
        probs = _step_distribution(emb @ policy.queries[t], remaining)
        if mode == "sample":
            pick = int(rng.choice(m, p=probs))
        else:
            pick = int(np.argmax(np.where(remaining, probs, -1.0)))
        step_logps.append(float(np.log(probs[pick])))
        order.append(pick)
        remaining[pick] = False
    return OrderDecision(order=tuple(order), logp=float(sum(step_logps)),
                         step_logps=tuple(step_logps))


def sequence_logprob_grad(policy: OrderPolicy, tasks, offer,
                          order: Sequence[int]):
    """log pi(order) and its gradient in the policy's flat parameters.

    Per step, d log p / d scores is (onehot - probs) restricted to the
    remaining set; that flows into the step's query directly and into
    the embeddings, which backpropagate through the shared encoder.
    """
    m = len(tasks)
    feats = order_features(tasks, offer, policy.scales)
    hid, cache = policy.trunk.forward_cached(feats)
    emb = hid @ policy.head
    remaining = np.ones(m, dtype=bool)
    logp = 0.0
    d_emb = np.zeros_like(emb)
    d_queries = np.zeros_like(policy.queries)
    for t, pick in enumerate(order):
        probs = _step_distribution(emb @ policy.queries[t], remaining)
        logp += float(np.log(probs[pick]))
        d_scores = -probs
        d_scores[pick] += 1.0
        d_queries[t] += emb.T @ d_scores
        d_emb += np.outer(d_scores, policy.queries[t])
        remaining[pick] = False
    d_head = hid.T @ d_emb
    d_trunk, _ = policy.trunk.backward(cache, d_emb @ policy.head.T)
    return logp, np.concatenate([d_trunk, d_head.ravel(),
                                 d_queries.ravel()])


def order_cost(tasks, offer, grid, order: Sequence[int]) -> float:
    """Execution cost of the solver's best plan under a fixed order."""
    plan = solve_bs(tasks, offer, grid,
                    order_provider=lambda t, o, g: tuple(order))
    return plan.execution_cost


def guarded_order_provider(policy: OrderPolicy) -> Callable:
    """Order provider for solve_bs that can never lose to the ratio order.

    The learned greedy order is adopted only when its solver cost is no
    higher than the ratio order's on the very same instance. Batches the
    net cannot read (more tasks than m_max, or a different horizon
    width than it was built for) fall back to the ratio order outright.
    """
    def provider(tasks, offer, grid):
        fallback = smith_order(tasks)
        if len(tasks) > policy.m_max or len(offer.capacity) != policy.delta:
            return fallback
        learned = emit_order(policy, tasks, offer, grid, mode="greedy").order
        if learned == fallback:
            return learned
        if order_cost(tasks, offer, grid, learned) \
                <= order_cost(tasks, offer, grid, fallback):
            return learned
        return fallback
    return provider


@dataclass
class OrderTrainReport:
    """One REINFORCE step's bookkeeping."""

    loss: float
    sample_costs: tuple
    greedy_costs: tuple
    rewards: tuple
    advantages: tuple
    orders: tuple


def reinforce_step(policy: OrderPolicy, optimizer: Adam, instances,
                   rng: np.random.Generator,
                   baseline: str = "greedy") -> OrderTrainReport:
    """Sample one order per instance, reward with negative solver cost,
    and take one policy-gradient ascent step.

    baseline "greedy" scores the policy's own argmax rollout per
    instance (self-critic); "mean" centers on the batch mean reward.
    """
    if not instances:
        raise ValueError("empty instance batch")
    if baseline not in ("greedy", "mean"):
        raise ValueError(f"unknown baseline {baseline!r}")
    sample_costs, greedy_costs, rewards, orders = [], [], [], []
    logps, grads = [], []
    for tasks, offer, grid in instances:
        decision = emit_order(policy, tasks, offer, grid, mode="sample",
                              rng=rng)
        cost = order_cost(tasks, offer, grid, decision.order)
        sample_costs.append(cost)
        rewards.append(-cost)
        orders.append(decision.order)
        logp, grad = sequence_logprob_grad(policy, tasks, offer,
                                           decision.order)
        logps.append(logp)
        grads.append(grad)
        if baseline == "greedy":
            ref = emit_order(policy, tasks, offer, grid, mode="greedy").order
            greedy_costs.append(order_cost(tasks, offer, grid, ref))
    if baseline == "greedy":
        baselines = [-c for c in greedy_costs]
    else:
        baselines = [float(np.mean(rewards))] * len(rewards)
    advantages = [r - b for r, b in zip(rewards, baselines)]
    n = len(instances)
    total = np.zeros(policy.n_params)
    for adv, grad in zip(advantages, grads):
        total -= adv * grad  # minimize -advantage*logp
    total /= n
    loss = -float(np.mean([adv * lp for adv, lp in zip(advantages, logps)]))
    policy.set_flat(optimizer.step(policy.get_flat(), total))
    return OrderTrainReport(
        loss=loss,
        sample_costs=tuple(sample_costs),
        greedy_costs=tuple(greedy_costs),
        rewards=tuple(rewards),
        advantages=tuple(advantages),
        orders=tuple(orders),
    )


@dataclass
class OrderCurveRow:
    step: int
    sample_cost: float
    greedy_cost: float
    moving_avg: float
    loss: float


def train_order_policy(policy: OrderPolicy, steps: int, batch_size: int,
                       seed: int,
                       instance_sampler: Callable,
                       lr: float = 1e-3,
                       baseline: str = "greedy",
                       ma_window: int = 50,
                       progress: Optional[Callable[[OrderCurveRow], None]]
                       = None):
    """REINFORCE training loop; returns (optimizer, curve rows).

    Instances are drawn freshly each step from `instance_sampler(rng)`,
    so the curve tracks cost on the training distribution itself.
    """
    optimizer = Adam(policy.n_params, lr=lr)
    rng = np.random.default_rng(seed)
    curve: List[OrderCurveRow] = []
    hist: List[float] = []
    for step in range(steps):
        batch = [instance_sampler(rng) for _ in range(batch_size)]
        report = reinforce_step(policy, optimizer, batch, rng,
                                baseline=baseline)
        mean_sample = float(np.mean(report.sample_costs))
        mean_greedy = (float(np.mean(report.greedy_costs))
                       if report.greedy_costs else float("nan"))
        hist.append(mean_sample)
        row = OrderCurveRow(
            step=step,
            sample_cost=mean_sample,
            greedy_cost=mean_greedy,
            moving_avg=float(np.mean(hist[-ma_window:])),
            loss=report.loss,
        )
        curve.append(row)
        if progress is not None:
            progress(row)
    return optimizer, curve


# ---------------------------------------------------------------------------
# persistence

def save_order_policy(path: str, policy: OrderPolicy,
                      optimizer: Optional[Adam] = None,
                      extra: Optional[dict] = None) -> None:
    payload = {
        "kind": "order-policy",
        "delta": policy.delta,
        "m_max": policy.m_max,
        "embed": policy.embed,
        "scales": policy.scales.to_dict(),
        "trunk": net_to_dict(policy.trunk),
        "head": [list(map(float, row)) for row in policy.head],
        "queries": [list(map(float, row)) for row in policy.queries],
    }
    if optimizer is not None:
        payload["optimizer"] = adam_to_dict(optimizer)
    if extra:
        payload["extra"] = extra
    save_checkpoint(path, payload)


def load_order_policy(path: str):
    doc = load_checkpoint(path)
    if doc.get("kind") != "order-policy":
        raise ValueError(f"{path} is not an order-policy checkpoint")
    policy = OrderPolicy(delta=doc["delta"], m_max=doc["m_max"],
                         embed=doc["embed"],
                         scales=OrderFeatureScales.from_dict(doc["scales"]))
    policy.trunk = net_from_dict(doc["trunk"])
    policy.head = np.array(doc["head"], dtype=float)
    policy.queries = np.array(doc["queries"], dtype=float)
    optimizer = (adam_from_dict(doc["optimizer"])
                 if "optimizer" in doc else None)
    return policy, optimizer
