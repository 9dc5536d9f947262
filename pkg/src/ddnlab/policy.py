"""Navigation policy and baseline agents.

Per frame, each of the k detections becomes a token: its demand-conditioned
attribute feature concatenated with the (scaled) bounding box and logits. A
small self-attention encoder contextualizes the tokens, a single
cross-attention block reads them with an image+demand query, and a gated
recurrent cell carries history together with the previous action embedding.

Agents share a duck-typed interface:

    reset(scene, demand_id, start_pose, rng) -> state
    act(observation, demand_embedding, state) -> (Action, new state)

Agents never touch the world directly; the episode runner owns stepping.
OracleAgent is the deliberate exception: it plans from scene ground truth
and exists as an upper reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attribute import AttributeEncoder, build_do_feature
from .config import PolicyHyper
from .demands import LGMapping, Universe, embed_category_text
from .errors import DimMismatch, DivergenceDetected, NoPath
from .expert import Trajectory, plan, success_states
from .nets import CrossAttentionBlock, EncoderLayer
from .perception import Observation
from .worldcore import Action, GridScene, IMAGE_SIZE, Pose

N_ACTIONS = 6
START_ACTION_INDEX = N_ACTIONS  # episode-start token for the action embedding
MOTION_ACTIONS = (Action.MoveAhead, Action.RotateRight, Action.RotateLeft,
                  Action.LookUp, Action.LookDown)


def select_action(logits: np.ndarray) -> Action:
    """Greedy action choice; ties break to the lowest index."""
    return Action(int(np.argmax(logits)))


def detection_extras(obs: Observation) -> np.ndarray:
    """(k, 6) per-detection geometry: bbox scaled to [0, 1] plus raw logits."""
    rows = [np.concatenate([d.bbox.as_array() / IMAGE_SIZE,
                            [d.logit_background, d.logit_object]])
            for d in obs.detections]
    return np.stack(rows)


def do_feature_batch(demand_emb: np.ndarray, obs: Observation) -> np.ndarray:
    """(k, 48) demand-object features, one per detection."""
    ddim, odim = demand_emb.shape[0], obs.detections[0].embedding.shape[0]
    return np.stack([build_do_feature(demand_emb, d.embedding, ddim, odim)
                     for d in obs.detections])


def query_input(obs: Observation, demand_emb: np.ndarray) -> np.ndarray:
    return np.concatenate([obs.global_feature, demand_emb])


class PolicyNet(nn.Module):
    def __init__(self, hyper: PolicyHyper = PolicyHyper(),
                 attribute_dim: int = 32, demand_dim: int = 32,
                 global_dim: int = 22):
        super().__init__()
        d = hyper.token_dim
        self.k_token_dim = attribute_dim + 6
        self.token_proj = nn.Linear(self.k_token_dim, d)
        self.token_norm = nn.LayerNorm(d)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, hyper.n_heads) for _ in range(hyper.encoder_layers))
        self.query_proj = nn.Linear(global_dim + demand_dim, d)
        self.decoder = CrossAttentionBlock(d, hyper.n_heads)
        self.action_embed = nn.Embedding(N_ACTIONS + 1, hyper.action_embed_dim)
        self.memory = nn.GRUCell(d + hyper.action_embed_dim, hyper.hidden_dim)
        self.action_head = nn.Linear(hyper.hidden_dim, N_ACTIONS)
        self.hidden_dim = hyper.hidden_dim

    def initial_state(self, batch: int = 1, dtype=torch.float32) -> torch.Tensor:
        return torch.zeros(batch, self.hidden_dim, dtype=dtype)

    def forward(self, tokens: torch.Tensor, query: torch.Tensor,
                prev_action: torch.Tensor,
                hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """tokens (B, k, 38), query (B, 54), prev_action (B,), hidden (B, H)
        -> action logits (B, 6) and the advanced hidden state."""
        if tokens.shape[-1] != self.k_token_dim:
            raise DimMismatch(f"expected token dim {self.k_token_dim}, "
                              f"got {tokens.shape[-1]}")
        x = self.token_norm(self.token_proj(tokens))
        for layer in self.encoder:
            x = layer(x)
        q = self.query_proj(query).unsqueeze(1)
        context = self.decoder(q, x).squeeze(1)
        gru_in = torch.cat([context, self.action_embed(prev_action)], dim=-1)
        hidden = self.memory(gru_in, hidden)
        return self.action_head(hidden), hidden


def policy_forward(net: PolicyNet, obs: Observation,
                   attribute_features: np.ndarray, demand_emb: np.ndarray,
                   prev_action: int,
                   hidden: torch.Tensor) -> tuple[np.ndarray, torch.Tensor]:
    """Single-frame forward pass from numpy inputs.

    attribute_features must be (k, attribute_dim), aligned index-wise with
    the observation's detections.
    """
    k = len(obs.detections)
    if attribute_features.shape[0] != k:
        raise DimMismatch(f"expected {k} attribute features, "
                          f"got {attribute_features.shape[0]}")
    dtype = next(net.parameters()).dtype
    tokens = np.concatenate([attribute_features, detection_extras(obs)], axis=1)
    with torch.no_grad():
        logits, new_hidden = net(
            torch.from_numpy(tokens).to(dtype).unsqueeze(0),
            torch.from_numpy(query_input(obs, demand_emb)).to(dtype).unsqueeze(0),
            torch.tensor([prev_action]), hidden)
    return logits[0].numpy(), new_hidden


# ---------------------------------------------------------------------------
# Behavior cloning

@dataclass
class _PackedTrajectory:
    do_feats: torch.Tensor    # (T, k, 48)
    extras: torch.Tensor      # (T, k, 6)
    query: torch.Tensor       # (T, 54)
    actions: torch.Tensor     # (T,)
    prev: torch.Tensor        # (T,)


def _pack(traj: Trajectory, universe: Universe) -> _PackedTrajectory:
    demand_emb = universe.demand(traj.demand_id).embedding
    do_feats = np.stack([do_feature_batch(demand_emb, obs)
                         for obs in traj.observations])
    extras = np.stack([detection_extras(obs) for obs in traj.observations])
    query = np.stack([query_input(obs, demand_emb) for obs in traj.observations])
    acts = np.array([int(a) for a in traj.actions], dtype=np.int64)
    prev = np.concatenate([[START_ACTION_INDEX], acts[:-1]])
    return _PackedTrajectory(
        do_feats=torch.from_numpy(do_feats).float(),
        extras=torch.from_numpy(extras).float(),
        query=torch.from_numpy(query).float(),
        actions=torch.from_numpy(acts),
        prev=torch.from_numpy(prev.astype(np.int64)))


def _batch_loss(net: PolicyNet, encoder: AttributeEncoder,
                packed: list[_PackedTrajectory], train_encoder: bool,
                cached_attr: dict[int, torch.Tensor] | None = None,
                indices: list[int] | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced sequence cross-entropy over a padded batch.

    Returns (mean loss, per-step argmax correctness masked flat)."""
    b = len(packed)
    t_max = max(p.actions.shape[0] for p in packed)
    k = packed[0].do_feats.shape[1]
    attrs = []
    for i, p in enumerate(packed):
        if train_encoder or cached_attr is None:
            attrs.append(encoder(p.do_feats))
        else:
            attrs.append(cached_attr[indices[i]])
    token_dim = attrs[0].shape[-1] + 6
    tokens = torch.zeros(b, t_max, k, token_dim)
    query = torch.zeros(b, t_max, packed[0].query.shape[1])
    acts = torch.zeros(b, t_max, dtype=torch.int64)
    prev = torch.full((b, t_max), START_ACTION_INDEX, dtype=torch.int64)
    mask = torch.zeros(b, t_max)
    for i, p in enumerate(packed):
        t = p.actions.shape[0]
        tokens[i, :t] = torch.cat([attrs[i], p.extras], dim=-1)
        query[i, :t] = p.query
        acts[i, :t] = p.actions
        prev[i, :t] = p.prev
        mask[i, :t] = 1.0

    hidden = net.initial_state(b)
    loss_sum = torch.zeros(())
    correct = []
    for t in range(t_max):
        logits, hidden = net(tokens[:, t], query[:, t], prev[:, t], hidden)
        ce = F.cross_entropy(logits, acts[:, t], reduction="none")
        loss_sum = loss_sum + (ce * mask[:, t]).sum()
        correct.append(((logits.argmax(dim=-1) == acts[:, t]).float() * mask[:, t]))
    total = mask.sum()
    matches = torch.stack(correct, dim=1)
    return loss_sum / total, matches.sum() / total


def train_policy(net: PolicyNet, encoder: AttributeEncoder,
                 trajectories: list[Trajectory], universe: Universe,
                 hyper: PolicyHyper, seed: int) -> list[dict]:
    """Behavior cloning on expert trajectories.

    With hyper.train_encoder the attribute encoder trains jointly from its
    current (random) initialization; otherwise it stays frozen and its
    features are precomputed.
    """
    if not trajectories:
        raise ValueError("no trajectories to train on")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x90C)))
    packed = [_pack(t, universe) for t in trajectories]

    n_val = int(round(hyper.val_fraction * len(packed)))
    order = rng.permutation(len(packed)).tolist()
    val_idx = order[:n_val]
    train_idx = order[n_val:] or order  # tiny runs train on everything

    cached_attr: dict[int, torch.Tensor] | None = None
    if hyper.train_encoder:
        params = list(net.parameters()) + list(encoder.parameters())
    else:
        for p in encoder.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            cached_attr = {i: encoder(p.do_feats) for i, p in enumerate(packed)}
        params = list(net.parameters())

    opt = torch.optim.Adam(params, lr=hyper.lr)
    history: list[dict] = []
    for step_i in range(hyper.steps):
        size = min(hyper.batch_size, len(train_idx))
        chosen = [train_idx[int(j)] for j in
                  rng.choice(len(train_idx), size=size, replace=False)]
        loss, acc = _batch_loss(net, encoder, [packed[i] for i in chosen],
                                hyper.train_encoder, cached_attr, chosen)
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"policy loss non-finite at step {step_i}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        entry = {"step": step_i, "loss": float(loss.item()),
                 "train_accuracy": float(acc.item())}
        if val_idx and (step_i + 1) % hyper.eval_every == 0:
            entry["val_accuracy"] = held_out_accuracy(
                net, encoder, [packed[i] for i in val_idx], hyper.train_encoder)
        history.append(entry)
    return history


def held_out_accuracy(net: PolicyNet, encoder: AttributeEncoder,
                      packed: list[_PackedTrajectory],
                      train_encoder: bool) -> float:
    with torch.no_grad():
        _loss, acc = _batch_loss(net, encoder, packed, train_encoder)
    return float(acc.item())


# ---------------------------------------------------------------------------
# Agents

def random_agent_act(rng: np.random.Generator, p_done: float = 0.02) -> Action:
    """Done with probability p_done, else uniform over the 5 motion actions."""
    if rng.random() < p_done:
        return Action.Done
    return MOTION_ACTIONS[int(rng.integers(len(MOTION_ACTIONS)))]


@dataclass
class RandomAgentState:
    rng: np.random.Generator


class RandomAgent:
    def __init__(self, p_done: float = 0.02):
        self.p_done = p_done

    def reset(self, scene: GridScene, demand_id: int, start: Pose,
              rng: np.random.Generator) -> RandomAgentState:
        return RandomAgentState(rng=rng)

    def act(self, obs: Observation, demand_emb: np.ndarray,
            state: RandomAgentState) -> tuple[Action, RandomAgentState]:
        return random_agent_act(state.rng, self.p_done), state


@dataclass
class ScriptedState:
    sweep_step: int


class ScriptedTargetAgent:
    """Greedy matcher against the demand's language-grounding categories.

    Picks the detection whose embedding is cosine-closest to any mapped
    category's text embedding, rotates to center it, approaches, and emits
    Done once its box is wide enough. Without a match it sweeps:
    three rotations then an advance.
    """

    SWEEP = (Action.RotateRight, Action.RotateRight, Action.RotateRight,
             Action.MoveAhead)

    def __init__(self, universe: Universe, lg: LGMapping,
                 similarity_threshold: float = 0.9, done_width: float = 25.0,
                 center_tolerance: float = 50.0 / 3.0):
        self.universe = universe
        self.lg = lg
        self.similarity_threshold = similarity_threshold
        self.done_width = done_width
        self.center_tolerance = center_tolerance
        self._unit_text: dict[int, np.ndarray] = {}

    def _unit(self, category_id: int) -> np.ndarray:
        if category_id not in self._unit_text:
            v = embed_category_text(self.universe, category_id)
            self._unit_text[category_id] = v / max(np.linalg.norm(v), 1e-12)
        return self._unit_text[category_id]

    def reset(self, scene: GridScene, demand_id: int, start: Pose,
              rng: np.random.Generator) -> ScriptedState:
        return ScriptedState(sweep_step=0)

    def act(self, obs: Observation, demand_emb: np.ndarray,
            state: ScriptedState) -> tuple[Action, ScriptedState]:
        best_cos, best_det = -1.0, None
        for det in obs.detections:
            emb = det.embedding / max(np.linalg.norm(det.embedding), 1e-12)
            for cat in self.lg.get(obs.demand_id, ()):
                cos = float(emb @ self._unit(cat))
                if cos > best_cos:
                    best_cos, best_det = cos, det
        if best_det is not None and best_cos >= self.similarity_threshold:
            cx = 0.5 * (best_det.bbox.x_min + best_det.bbox.x_max)
            if abs(cx - 50.0) <= self.center_tolerance:
                if best_det.bbox.width >= self.done_width:
                    return Action.Done, state
                return Action.MoveAhead, state
            if cx > 50.0:
                return Action.RotateRight, state
            return Action.RotateLeft, state
        action = self.SWEEP[state.sweep_step % len(self.SWEEP)]
        return action, ScriptedState(sweep_step=state.sweep_step + 1)


@dataclass
class OracleState:
    queue: tuple[Action, ...]
    cursor: int


class OracleAgent:
    """Executes the expert plan; the explicit ground-truth-access reference."""

    def __init__(self, universe: Universe, margin: float = 1.0):
        self.universe = universe
        self.margin = margin

    def reset(self, scene: GridScene, demand_id: int, start: Pose,
              rng: np.random.Generator) -> OracleState:
        goals = success_states(scene, self.universe, demand_id, self.margin)
        try:
            actions = plan(scene, start, goals) + [Action.Done]
        except NoPath:
            actions = [Action.Done]
        return OracleState(queue=tuple(actions), cursor=0)

    def act(self, obs: Observation, demand_emb: np.ndarray,
            state: OracleState) -> tuple[Action, OracleState]:
        if state.cursor < len(state.queue):
            action = state.queue[state.cursor]
        else:
            action = Action.Done
        return action, OracleState(queue=state.queue, cursor=state.cursor + 1)


@dataclass
class PolicyAgentState:
    hidden: torch.Tensor
    prev_action: int


class PolicyAgent:
    def __init__(self, net: PolicyNet, encoder: AttributeEncoder):
        self.net = net.eval()
        self.encoder = encoder.eval()

    def reset(self, scene: GridScene, demand_id: int, start: Pose,
              rng: np.random.Generator) -> PolicyAgentState:
        return PolicyAgentState(hidden=self.net.initial_state(1),
                                prev_action=START_ACTION_INDEX)

    def act(self, obs: Observation, demand_emb: np.ndarray,
            state: PolicyAgentState) -> tuple[Action, PolicyAgentState]:
        with torch.no_grad():
            attr = self.encoder(
                torch.from_numpy(do_feature_batch(demand_emb, obs)).float())
        logits, hidden = policy_forward(self.net, obs, attr.numpy(), demand_emb,
                                        state.prev_action, state.hidden)
        action = select_action(logits)
        return action, PolicyAgentState(hidden=hidden, prev_action=int(action))
