"""MANF network stack: spatial extractor, shared agent network and monotonic mixer.

All forward passes are batched: channels are (B, 5, H, W), local features
(B, N, H*W + N + 1), per-agent Q values (B, N, H*W). Parameters are read from any
mapping of name to array, so the same code serves a ParameterSet during training and
plain float64 dicts during gradient verification.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from src.exceptions import DimensionError, PreconditionError
from src.models.observation import GlobalChannels, LocalFeatures, ObservationBundle
from src.schemas.checkpoint import CONV_CHANNELS_IN, CONV_CHANNELS_OUT, NetTopology
from src.services import neuralcore as nc

logger = logging.getLogger(__name__)

Params = Mapping[str, np.ndarray]
Grads = dict[str, np.ndarray]


class CnnSpaceNet:
    """One 3x3 convolution (5 -> 10 channels), relu, 2x2 average pooling, flatten.

    With ``use_cnn`` off the extractor is bypassed and the raw channels are flattened.
    """

    def __init__(self, topology: NetTopology):
        self.topology = topology

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if not self.topology.use_cnn:
            return {}
        fan = CONV_CHANNELS_IN * nc.KERNEL_SIZE * nc.KERNEL_SIZE
        fan_out = CONV_CHANNELS_OUT * nc.KERNEL_SIZE * nc.KERNEL_SIZE
        shape = (CONV_CHANNELS_OUT, CONV_CHANNELS_IN, nc.KERNEL_SIZE, nc.KERNEL_SIZE)
        return {
            "cnn.kernel": nc.glorot_uniform(rng, shape, fan, fan_out),
            "cnn.bias": np.zeros(CONV_CHANNELS_OUT),
        }

    def forward(self, params: Params, channels: np.ndarray) -> tuple[np.ndarray, Any]:
        if channels.ndim != 4 or channels.shape[1] != CONV_CHANNELS_IN:
            raise DimensionError(f"Expected (B, {CONV_CHANNELS_IN}, H, W) channels, got {channels.shape}")
        if channels.shape[2:] != (self.topology.height, self.topology.width):
            raise DimensionError(
                f"Channels are {channels.shape[2]}x{channels.shape[3]}, network expects "
                f"{self.topology.height}x{self.topology.width}"
            )
        batch = channels.shape[0]
        if not self.topology.use_cnn:
            return channels.reshape(batch, -1), None
        conv, conv_cache = nc.conv2d(channels, params["cnn.kernel"], params["cnn.bias"])
        act, relu_cache = nc.relu(conv)
        pooled, pool_shape = nc.avg_pool(act)
        return pooled.reshape(batch, -1), (conv_cache, relu_cache, pool_shape, pooled.shape)

    def backward(self, params: Params, grad_s: np.ndarray, cache: Any) -> Grads:
        if cache is None:
            return {}
        conv_cache, relu_cache, pool_shape, pooled_shape = cache
        grad = nc.avg_pool_backward(grad_s.reshape(pooled_shape), pool_shape)
        grad = nc.relu_backward(grad, relu_cache)
        _, grad_kernel, grad_bias = nc.conv2d_backward(grad, conv_cache, params["cnn.kernel"])
        return {"cnn.kernel": grad_kernel, "cnn.bias": grad_bias}


class AgentNet:
    """Shared per-agent Q network: one relu hidden layer, one Q value per cell."""

    def __init__(self, topology: NetTopology):
        self.topology = topology

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        n_in = self.topology.agent_input_length
        hidden = self.topology.agent_hidden
        n_out = self.topology.cells
        return {
            "agent.w1": nc.glorot_uniform(rng, (n_in, hidden), n_in, hidden),
            "agent.b1": np.zeros(hidden),
            "agent.w2": nc.glorot_uniform(rng, (hidden, n_out), hidden, n_out),
            "agent.b2": np.zeros(n_out),
        }

    def forward(self, params: Params, s: np.ndarray, local: np.ndarray) -> tuple[np.ndarray, Any]:
        batch, agents, local_len = local.shape
        if local_len != self.topology.local_length or s.shape != (batch, self.topology.state_length):
            raise DimensionError(
                f"Agent network expects state ({batch}, {self.topology.state_length}) and local "
                f"(..., {self.topology.local_length}), got {s.shape} and {local.shape}"
            )
        x = np.concatenate([np.broadcast_to(s[:, None, :], (batch, agents, s.shape[1])), local], axis=2)
        x = x.reshape(batch * agents, -1)
        pre, cache1 = nc.dense(x, params["agent.w1"], params["agent.b1"])
        hidden, relu_cache = nc.relu(pre)
        q, cache2 = nc.dense(hidden, params["agent.w2"], params["agent.b2"])
        return q.reshape(batch, agents, -1), (cache1, relu_cache, cache2, batch, agents)

    def backward(self, params: Params, grad_q: np.ndarray, cache: Any) -> tuple[np.ndarray, Grads]:
        cache1, relu_cache, cache2, batch, agents = cache
        grad = grad_q.reshape(batch * agents, -1)
        grad_hidden, grad_w2, grad_b2 = nc.dense_backward(grad, cache2, params["agent.w2"])
        grad_pre = nc.relu_backward(grad_hidden, relu_cache)
        grad_x, grad_w1, grad_b1 = nc.dense_backward(grad_pre, cache1, params["agent.w1"])
        state_len = self.topology.state_length
        grad_s = grad_x[:, :state_len].reshape(batch, agents, state_len).sum(axis=1)
        return grad_s, {"agent.w1": grad_w1, "agent.b1": grad_b1, "agent.w2": grad_w2, "agent.b2": grad_b2}


class MixingNet:
    """Monotonic mixer whose weights are produced from s^t by hypernetworks.

    Q_tot = |w2| . relu(|W1|^T q + b1) + b2. Taking absolute values of the generated
    weights keeps Q_tot nondecreasing in every agent's Q value.
    """

    def __init__(self, topology: NetTopology):
        self.topology = topology

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        state = self.topology.state_length
        embed = self.topology.embed_dim
        agents = self.topology.agent_count
        return {
            "mix.w1.w": nc.glorot_uniform(rng, (state, agents * embed), state, agents * embed),
            "mix.w1.b": np.zeros(agents * embed),
            "mix.b1.w": nc.glorot_uniform(rng, (state, embed), state, embed),
            "mix.b1.b": np.zeros(embed),
            "mix.w2.w": nc.glorot_uniform(rng, (state, embed), state, embed),
            "mix.w2.b": np.zeros(embed),
            "mix.b2.w1": nc.glorot_uniform(rng, (state, embed), state, embed),
            "mix.b2.b1": np.zeros(embed),
            "mix.b2.w2": nc.glorot_uniform(rng, (embed, 1), embed, 1),
            "mix.b2.b2": np.zeros(1),
        }

    def forward(self, params: Params, s: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, Any]:
        batch = s.shape[0]
        agents = self.topology.agent_count
        embed = self.topology.embed_dim
        if q.shape != (batch, agents):
            raise DimensionError(f"Mixer expects ({batch}, {agents}) chosen Q values, got {q.shape}")
        w1_pre, c_w1 = nc.dense(s, params["mix.w1.w"], params["mix.w1.b"])
        w1, abs_w1 = nc.absolute(w1_pre)
        w1 = w1.reshape(batch, agents, embed)
        b1, c_b1 = nc.dense(s, params["mix.b1.w"], params["mix.b1.b"])
        hidden_pre = np.einsum("bn,bnd->bd", q, w1) + b1
        hidden, relu_hidden = nc.relu(hidden_pre)
        w2_pre, c_w2 = nc.dense(s, params["mix.w2.w"], params["mix.w2.b"])
        w2, abs_w2 = nc.absolute(w2_pre)
        head_pre, c_h1 = nc.dense(s, params["mix.b2.w1"], params["mix.b2.b1"])
        head, relu_head = nc.relu(head_pre)
        b2, c_h2 = nc.dense(head, params["mix.b2.w2"], params["mix.b2.b2"])
        q_tot = (hidden * w2).sum(axis=1) + b2[:, 0]
        cache = (q, w1, abs_w1, c_w1, c_b1, hidden, relu_hidden, w2, abs_w2, c_w2, relu_head, c_h1, c_h2)
        return q_tot, cache

    def backward(self, params: Params, grad_tot: np.ndarray, cache: Any) -> tuple[np.ndarray, np.ndarray, Grads]:
        q, w1, abs_w1, c_w1, c_b1, hidden, relu_hidden, w2, abs_w2, c_w2, relu_head, c_h1, c_h2 = cache
        batch = q.shape[0]
        grads: Grads = {}

        grad_hidden = grad_tot[:, None] * w2
        grad_w2 = nc.absolute_backward(grad_tot[:, None] * hidden, abs_w2)
        grad_s, grads["mix.w2.w"], grads["mix.w2.b"] = nc.dense_backward(grad_w2, c_w2, params["mix.w2.w"])

        grad_head, grads["mix.b2.w2"], grads["mix.b2.b2"] = nc.dense_backward(
            grad_tot[:, None], c_h2, params["mix.b2.w2"]
        )
        grad_head = nc.relu_backward(grad_head, relu_head)
        grad_s_h, grads["mix.b2.w1"], grads["mix.b2.b1"] = nc.dense_backward(grad_head, c_h1, params["mix.b2.w1"])
        grad_s = grad_s + grad_s_h

        grad_hidden_pre = nc.relu_backward(grad_hidden, relu_hidden)
        grad_s_b1, grads["mix.b1.w"], grads["mix.b1.b"] = nc.dense_backward(grad_hidden_pre, c_b1, params["mix.b1.w"])
        grad_s = grad_s + grad_s_b1

        grad_q = np.einsum("bd,bnd->bn", grad_hidden_pre, w1)
        grad_w1 = np.einsum("bd,bn->bnd", grad_hidden_pre, q).reshape(batch, -1)
        grad_w1 = nc.absolute_backward(grad_w1, abs_w1)
        grad_s_w1, grads["mix.w1.w"], grads["mix.w1.b"] = nc.dense_backward(grad_w1, c_w1, params["mix.w1.w"])
        grad_s = grad_s + grad_s_w1
        return grad_s, grad_q, grads


class ManfNetwork:
    """The three networks wired together as in training."""

    def __init__(self, topology: NetTopology):
        self.topology = topology
        self.cnn = CnnSpaceNet(topology)
        self.agent = AgentNet(topology)
        self.mixer = MixingNet(topology)

    def init_params(self, seed: int) -> nc.ParameterSet:
        rng = np.random.default_rng(seed)
        arrays: dict[str, np.ndarray] = {}
        arrays.update(self.cnn.init_params(rng))
        arrays.update(self.agent.init_params(rng))
        arrays.update(self.mixer.init_params(rng))
        return nc.ParameterSet(arrays)

    def q_values(self, params: Params, channels: np.ndarray, local: np.ndarray) -> np.ndarray:
        s, _ = self.cnn.forward(params, channels)
        q, _ = self.agent.forward(params, s, local)
        return q

    def q_tot(self, params: Params, channels: np.ndarray, q_chosen: np.ndarray) -> np.ndarray:
        s, _ = self.cnn.forward(params, channels)
        q_tot, _ = self.mixer.forward(params, s, q_chosen)
        return q_tot

    def loss_and_grads(
        self,
        params: Params,
        channels: np.ndarray,
        local: np.ndarray,
        actions: np.ndarray,
        targets: np.ndarray,
    ) -> tuple[float, Grads]:
        """Squared error of mixed chosen-action values against ``targets``."""
        s, cnn_cache = self.cnn.forward(params, channels)
        q_all, agent_cache = self.agent.forward(params, s, local)
        chosen = np.take_along_axis(q_all, actions[:, :, None], axis=2)[:, :, 0]
        q_tot, mix_cache = self.mixer.forward(params, s, chosen)
        loss, grad_tot = nc.mse_loss(q_tot, targets)

        grad_s, grad_chosen, grads = self.mixer.backward(params, grad_tot, mix_cache)
        grad_q_all = np.zeros_like(q_all)
        np.put_along_axis(grad_q_all, actions[:, :, None], grad_chosen[:, :, None], axis=2)
        grad_s_agent, agent_grads = self.agent.backward(params, grad_q_all, agent_cache)
        grads.update(agent_grads)
        grads.update(self.cnn.backward(params, grad_s + grad_s_agent, cnn_cache))
        return loss, grads


@dataclass
class PolicyCheckpoint:
    """Eval and target parameters of a MANF stack plus the trainer step counter."""

    topology: NetTopology
    eval_params: nc.ParameterSet
    target_params: nc.ParameterSet
    step: int = 0
    seed: int | None = None
    network: ManfNetwork = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.network = ManfNetwork(self.topology)

    @classmethod
    def initialize(cls, topology: NetTopology, seed: int) -> "PolicyCheckpoint":
        params = ManfNetwork(topology).init_params(seed)
        checkpoint = cls(topology, params, params.copy(), step=0, seed=seed)
        logger.info(
            f"Initialized MANF stack for {topology.height}x{topology.width} grid, "
            f"{topology.agent_count} agents, {params.count()} parameters"
        )
        return checkpoint

    def params(self, target: bool = False) -> nc.ParameterSet:
        return self.target_params if target else self.eval_params


# Single-sample operations


def _channels_batch(channels: GlobalChannels | np.ndarray) -> np.ndarray:
    array = channels.stack() if isinstance(channels, GlobalChannels) else np.asarray(channels, dtype=float)
    return array[None] if array.ndim == 3 else array


def embed(channels: GlobalChannels | np.ndarray, checkpoint: PolicyCheckpoint, target: bool = False) -> np.ndarray:
    """Shared state embedding s^t for one moment."""
    s, _ = checkpoint.network.cnn.forward(checkpoint.params(target), _channels_batch(channels))
    return s[0]


def agent_q(
    s: np.ndarray, local: LocalFeatures | np.ndarray, checkpoint: PolicyCheckpoint, target: bool = False
) -> np.ndarray:
    """Q value of every cell for one agent."""
    vector = local.vector() if isinstance(local, LocalFeatures) else np.asarray(local, dtype=float)
    q, _ = checkpoint.network.agent.forward(checkpoint.params(target), s[None], vector[None, None])
    return q[0, 0]


def mix(s: np.ndarray, q_chosen: Sequence[float], checkpoint: PolicyCheckpoint, target: bool = False) -> float:
    q = np.asarray(q_chosen, dtype=float)[None]
    q_tot, _ = checkpoint.network.mixer.forward(checkpoint.params(target), s[None], q)
    return float(q_tot[0])


def bundle_q_values(bundle: ObservationBundle, checkpoint: PolicyCheckpoint, target: bool = False) -> np.ndarray:
    """(agents, cells) Q values for every agent of a bundle."""
    channels = bundle.channels.stack()[None]
    local = bundle.local_matrix()[None]
    return checkpoint.network.q_values(checkpoint.params(target), channels, local)[0]


def masked_argmax(q: np.ndarray, mask: Sequence[int]) -> int:
    """Best cell among ``mask``; ties go to the lowest cell index."""
    if len(mask) == 0:
        raise PreconditionError("Cannot choose from an empty action mask")
    cells = np.sort(np.asarray(mask, dtype=int))
    return int(cells[int(np.argmax(q[cells]))])


def masked_max(q: np.ndarray, mask: Sequence[int]) -> float:
    return float(q[masked_argmax(q, mask)])


def masked_max_batch(q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise maximum over the cells where ``mask`` is True."""
    if not mask.any(axis=-1).all():
        raise PreconditionError("Every agent needs a nonempty action mask")
    return np.where(mask, q, -np.inf).max(axis=-1)


def sync_targets(checkpoint: PolicyCheckpoint) -> PolicyCheckpoint:
    """Copy all eval networks, the spatial extractor included, into the target copies."""
    checkpoint.target_params.assign_from(checkpoint.eval_params)
    logger.debug(f"Synced target networks at step {checkpoint.step}")
    return checkpoint
