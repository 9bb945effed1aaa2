"""Episodic meta-training: batches of episodes, Adam on all meta-parameters.

Meta-parameters are the encoder weights plus the unconstrained prior
parameters rho_alpha and rho_beta. Each step samples a batch of
episodes, averages the episode losses' gradients (deterministic ordered
summation), and applies one Adam update. Validation periodically scores
a fixed set of held-out-class episodes; best and final parameters are
checkpointed.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .autodiff import DiffGraph
from .encoder import EncoderConfig, embed_batch, embed_batch_values, init_params
from .episodes import EpisodeSpec, resolve_sample, sample_episode
from .head import HeadState, PriorParams, episode_loss, predict_batch

__all__ = [
    "TrainConfig",
    "OptState",
    "TrainHistory",
    "adam_step",
    "train",
    "episode_accuracy",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingError(RuntimeError):
    """Training aborted (divergence or invalid configuration)."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_episodes: int = 4
    spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None  # optional global max-norm clip
    seed: int = 0
    validation_every: int = 100
    validation_episodes: int = 20
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_episodes < 1:
            raise ValueError("batch_episodes must be >= 1")


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    val_steps: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_step: int = -1
    best_accuracy: float = -1.0

    def write_csv(self, path):
        val = dict(zip(self.val_steps, self.val_accuracy))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "val_accuracy"])
            for i, loss in enumerate(self.losses, start=1):
                a = val.get(i)
                w.writerow([i, repr(float(loss)), "" if a is None else repr(float(a))])


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update; returns new (params, state)."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = cfg.adam_beta1 * state.m[name] + (1.0 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * state.v[name] + (1.0 - cfg.adam_beta2) * g * g
        m_hat = m / (1.0 - cfg.adam_beta1**t)
        v_hat = v / (1.0 - cfg.adam_beta2**t)
        new_params[name] = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptState(new_m, new_v, t)


def _episode_arrays(episode):
    support_x = [resolve_sample(ref) for ref, _ in episode.support]
    support_y = [cid for _, cid in episode.support]
    query_x = [resolve_sample(ref) for ref, _ in episode.query]
    query_y = [cid for _, cid in episode.query]
    return support_x, support_y, query_x, query_y


def _batch_gradients(meta, episodes_batch):
    """Mean loss and mean gradients over a batch, one graph per episode."""
    total_loss = 0.0
    grad_sum = None
    for episode in episodes_batch:
        graph = DiffGraph()
        support_x, support_y, query_x, query_y = _episode_arrays(episode)
        enc = {k: v for k, v in meta.items() if k not in ("rho_alpha", "rho_beta")}
        sz = embed_batch(support_x, enc, graph)
        qz = embed_batch(query_x, enc, graph)
        ra = graph.input("rho_alpha", meta["rho_alpha"])
        rb = graph.input("rho_beta", meta["rho_beta"])
        loss = episode_loss((ra, rb), sz, support_y, qz, query_y, graph)
        grads = graph.backward(loss)
        total_loss += float(loss.data)
        if grad_sum is None:
            grad_sum = {k: grads.get(k, np.zeros_like(v)).copy() for k, v in meta.items()}
        else:
            for k in grad_sum:
                grad_sum[k] += grads.get(k, 0.0)
    n = len(episodes_batch)
    return total_loss / n, {k: g / n for k, g in grad_sum.items()}


def episode_accuracy(params, prior, episode):
    """Query accuracy of one episode under frozen parameters."""
    support_x, support_y, query_x, query_y = _episode_arrays(episode)
    enc = {k: v for k, v in params.items() if k not in ("rho_alpha", "rho_beta")}
    sz = embed_batch_values(support_x, enc)
    qz = embed_batch_values(query_x, enc)
    head = HeadState(prior)
    for cid in episode.class_ids:
        rows = [i for i, y in enumerate(support_y) if y == cid]
        head.add_class(cid, sz[rows])
    predicted = predict_batch(head, qz)
    return float(np.mean([p == y for p, y in zip(predicted, query_y)]))


def train(cfg, registry, encoder_cfg, val_registry=None):
    """Meta-train encoder and prior; returns (params, prior, history).

    ``params`` maps names to arrays and includes the 0-d ``rho_alpha``
    and ``rho_beta`` entries. Validation episodes are drawn once from
    ``val_registry`` (held-out classes) and reused at every validation
    point so the accuracy curve is comparable across steps.
    """
    registry.require(cfg.spec.ways, cfg.spec.samples_per_class)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    episode_rng = np.random.default_rng(seeds[0])
    val_rng = np.random.default_rng(seeds[1])

    meta = dict(init_params(encoder_cfg))
    meta["rho_alpha"] = np.asarray(0.0)
    meta["rho_beta"] = np.asarray(0.0)
    state = OptState.for_params(meta)
    history = TrainHistory()

    val_episodes = []
    if val_registry is not None and cfg.validation_episodes > 0:
        for _ in range(cfg.validation_episodes):
            val_episodes.append(sample_episode(val_registry, cfg.spec, val_rng))

    best = None
    for step in range(1, cfg.steps + 1):
        batch = [
            sample_episode(registry, cfg.spec, episode_rng)
            for _ in range(cfg.batch_episodes)
        ]
        try:
            loss, grads = _batch_gradients(meta, batch)
        except Exception as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        if not np.isfinite(loss):
            raise TrainingError(f"step {step}: loss is not finite")
        if cfg.grad_clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        meta, state = adam_step(meta, grads, state, cfg)
        history.losses.append(loss)

        if val_episodes and (step % cfg.validation_every == 0 or step == cfg.steps):
            prior = PriorParams(float(meta["rho_alpha"]), float(meta["rho_beta"]))
            acc = float(
                np.mean([episode_accuracy(meta, prior, ep) for ep in val_episodes])
            )
            history.val_steps.append(step)
            history.val_accuracy.append(acc)
            if acc > history.best_accuracy:
                history.best_accuracy = acc
                history.best_step = step
                best = {k: v.copy() for k, v in meta.items()}

    prior = PriorParams(float(meta["rho_alpha"]), float(meta["rho_beta"]))
    if cfg.checkpoint_path is not None:
        save_checkpoint(meta, encoder_cfg, cfg.checkpoint_path)
        if best is not None:
            save_checkpoint(best, encoder_cfg, str(cfg.checkpoint_path) + ".best")
        history.write_csv(str(cfg.checkpoint_path) + ".log.csv")
    return meta, prior, history


def expected_param_shapes(encoder_cfg):
    shapes = {k: v.shape for k, v in init_params(encoder_cfg).items()}
    shapes["rho_alpha"] = ()
    shapes["rho_beta"] = ()
    return shapes


def save_checkpoint(params, encoder_cfg, path, extra_config=None):
    """Write meta-parameters with the encoder config; bit-exact round trip."""
    config = {"kind": "meta-checkpoint", "encoder": encoder_cfg.to_dict()}
    if extra_config:
        config.update(extra_config)
    tensorio.write_tensors(path, config, params)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, prior, encoder_cfg, config).

    Tensor shapes are validated against the stored encoder config, so a
    checkpoint whose architecture disagrees with its payload is rejected.
    """
    config, tensors = tensorio.read_tensors(path)
    if config.get("kind") != "meta-checkpoint":
        raise tensorio.ContainerError(f"{path}: not a meta-training checkpoint")
    encoder_cfg = EncoderConfig.from_dict(config["encoder"])
    expected = expected_param_shapes(encoder_cfg)
    if set(expected) != set(tensors):
        raise tensorio.ContainerError(
            f"{path}: tensor names do not match encoder architecture "
            f"(missing {sorted(set(expected) - set(tensors))}, "
            f"unexpected {sorted(set(tensors) - set(expected))})"
        )
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise tensorio.ContainerError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"architecture expects {shape}"
            )
    prior = PriorParams(float(tensors["rho_alpha"]), float(tensors["rho_beta"]))
    return tensors, prior, encoder_cfg, config
