"""Demand-conditioned attribute features.

A demand embedding concatenated with an object embedding (demand first) forms
a demand-object feature. The attribute encoder maps it to a unit-norm
attribute vector, trained contrastively so that objects satisfying the same
demand land close together. Pair construction follows three negative rules:

  type 1: same demand, an object that does not satisfy it;
  type 2: same object, a different demand the object does not satisfy;
  type 3: different demand and different object.

Positives pair the anchor demand with another object that satisfies it. A
pair of features with the same object satisfying both demands fits no rule
and is never emitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AttributeHyper
from .demands import (LGMapping, Universe, embed_category_text, embed_demand,
                      satisfies)
from .errors import (DimMismatch, DivergenceDetected, InsufficientNegatives,
                     InvalidTemperature)

NEGATIVE_TYPES = (1, 2, 3)


def build_do_feature(demand_emb: np.ndarray, obj_emb: np.ndarray,
                     demand_dim: int = 32, object_dim: int = 16) -> np.ndarray:
    """Concatenate demand embedding and object embedding, demand first."""
    if demand_emb.shape != (demand_dim,) or obj_emb.shape != (object_dim,):
        raise DimMismatch(
            f"expected dims ({demand_dim},) and ({object_dim},), got "
            f"{demand_emb.shape} and {obj_emb.shape}")
    return np.concatenate([demand_emb, obj_emb])


class ResidualBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class AttributeEncoder(nn.Module):
    """Per-feature residual MLP with layer norm and an L2-normalized output."""

    def __init__(self, input_dim: int = 48, hidden_dim: int = 64,
                 depth: int = 2, output_dim: int = 32):
        super().__init__()
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.input_proj = nn.Linear(input_dim, hidden_dim)
        self.blocks = nn.ModuleList(ResidualBlock(hidden_dim) for _ in range(depth))
        self.out_norm = nn.LayerNorm(hidden_dim)
        self.output_proj = nn.Linear(hidden_dim, output_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise DimMismatch(f"expected input dim {self.input_dim}, got {x.shape[-1]}")
        h = self.input_proj(x)
        for block in self.blocks:
            h = block(h)
        out = self.output_proj(self.out_norm(h))
        return out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def encode(encoder: AttributeEncoder, features: np.ndarray) -> np.ndarray:
    """Encode one feature vector or a batch of them to unit-norm attributes.

    Runs in float64 via a functional call (the encoder itself is untouched),
    so batched and per-item encodes agree to well below 1e-7.
    """
    arr = np.asarray(features, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    params = {name: t.double() for name, t in encoder.state_dict().items()}
    with torch.no_grad():
        out = torch.func.functional_call(
            encoder, params, (torch.from_numpy(arr),)).numpy()
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Pair construction

def classify_pair(universe: Universe, anchor: tuple[int, int],
                  other: tuple[int, int]) -> str | None:
    """Label the (anchor, other) demand-object pair per the contrastive rules.

    The anchor must be a satisfying pair. Returns "positive", "neg1", "neg2",
    "neg3", or None when the combination fits no rule (identical pairs, or
    the same object satisfying both demands).
    """
    d, o = anchor
    d2, o2 = other
    if not satisfies(universe, d, o):
        raise ValueError("anchor must satisfy its demand")
    if d2 == d and o2 == o:
        return None
    if d2 == d:
        return "positive" if satisfies(universe, d, o2) else "neg1"
    if o2 == o:
        return None if satisfies(universe, d2, o) else "neg2"
    return "neg3"


@dataclass
class PairBatch:
    anchors: np.ndarray           # (B, feat_dim)
    positives: np.ndarray         # (B, feat_dim)
    negatives: np.ndarray         # (B, m, feat_dim)
    anchor_keys: list[tuple[int, int]]
    positive_keys: list[tuple[int, int]]
    negative_keys: list[list[tuple[int, int]]]
    negative_types: np.ndarray    # (B, m) ints in {1, 2, 3}


def construct_pairs(universe: Universe, lg: LGMapping, *, m_negatives: int,
                    batch_size: int, rng: np.random.Generator,
                    neg_types: tuple[int, ...] = NEGATIVE_TYPES) -> PairBatch:
    """Sample a contrastive batch from language-grounding mappings.

    Anchors are (demand, object) entries of the mapping; the positive is a
    different object satisfying the same demand. Per negative, a rule type is
    drawn uniformly among the requested types that admit candidates for the
    anchor; raises InsufficientNegatives when none does.
    """
    demands = sorted(lg)
    if len(demands) < 2:
        raise ValueError("pair construction needs at least 2 demands")
    for d in demands:
        if len(lg[d]) < 2:
            raise ValueError(f"demand {d} has fewer than 2 objects in the mapping")
    bad = set(neg_types) - set(NEGATIVE_TYPES)
    if bad:
        raise ValueError(f"unknown negative types {sorted(bad)}")

    pool = sorted({c for objs in lg.values() for c in objs})
    dem_embs = {d: embed_demand(universe, d) for d in demands}
    obj_embs = {c: embed_category_text(universe, c) for c in pool}
    ddim = universe.config.demand_dim
    odim = universe.config.object_dim

    def feature(key: tuple[int, int]) -> np.ndarray:
        return build_do_feature(dem_embs[key[0]], obj_embs[key[1]], ddim, odim)

    type1 = {d: [c for c in pool if not satisfies(universe, d, c)] for d in demands}
    type2: dict[int, list[int]] = {}

    anchors, positives, negatives = [], [], []
    anchor_keys, positive_keys, negative_keys = [], [], []
    negative_types = np.zeros((batch_size, m_negatives), dtype=int)

    for b in range(batch_size):
        d = demands[int(rng.integers(len(demands)))]
        objs = lg[d]
        o = objs[int(rng.integers(len(objs)))]
        others = [c for c in objs if c != o]
        o_pos = others[int(rng.integers(len(others)))]

        if o not in type2:
            type2[o] = [d2 for d2 in demands if not satisfies(universe, d2, o)]
        available = []
        if 1 in neg_types and type1[d]:
            available.append(1)
        if 2 in neg_types and any(d2 != d for d2 in type2[o]):
            available.append(2)
        if 3 in neg_types and len(pool) >= 2:
            available.append(3)
        if not available:
            raise InsufficientNegatives(
                f"no negatives of types {neg_types} exist for anchor ({d}, {o})")

        negs, keys = [], []
        for j in range(m_negatives):
            t = available[int(rng.integers(len(available)))]
            if t == 1:
                cand = type1[d]
                key = (d, cand[int(rng.integers(len(cand)))])
            elif t == 2:
                cand = [d2 for d2 in type2[o] if d2 != d]
                key = (cand[int(rng.integers(len(cand)))], o)
            else:
                cand_d = [d2 for d2 in demands if d2 != d]
                cand_o = [c for c in pool if c != o]
                key = (cand_d[int(rng.integers(len(cand_d)))],
                       cand_o[int(rng.integers(len(cand_o)))])
            negs.append(feature(key))
            keys.append(key)
            negative_types[b, j] = t

        anchors.append(feature((d, o)))
        positives.append(feature((d, o_pos)))
        negatives.append(np.stack(negs))
        anchor_keys.append((d, o))
        positive_keys.append((d, o_pos))
        negative_keys.append(keys)

    return PairBatch(anchors=np.stack(anchors), positives=np.stack(positives),
                     negatives=np.stack(negatives), anchor_keys=anchor_keys,
                     positive_keys=positive_keys, negative_keys=negative_keys,
                     negative_types=negative_types)


# ---------------------------------------------------------------------------
# Loss and training

def info_nce_loss(anchor: torch.Tensor, positive: torch.Tensor,
                  negatives: torch.Tensor, temperature: float) -> torch.Tensor:
    """InfoNCE over unit-norm features: -log exp(s_p/t) / (exp(s_p/t) + sum_i exp(s_ni/t)).

    anchor/positive: (B, D); negatives: (B, m, D). Similarities are dot
    products (cosine on unit-norm inputs). Returns the batch mean.
    """
    if temperature <= 0.0:
        raise InvalidTemperature(f"temperature must be > 0, got {temperature}")
    if negatives.shape[-2] < 1:
        raise ValueError("at least one negative required")
    s_pos = (anchor * positive).sum(dim=-1, keepdim=True)
    s_neg = torch.einsum("bd,bmd->bm", anchor, negatives)
    logits = torch.cat([s_pos, s_neg], dim=-1) / temperature
    return -F.log_softmax(logits, dim=-1)[:, 0].mean()


def _filter_trainable(lg: LGMapping) -> LGMapping:
    return {d: objs for d, objs in lg.items() if len(objs) >= 2}


def train_attribute(encoder: AttributeEncoder, universe: Universe,
                    lg: LGMapping, hyper: AttributeHyper,
                    seed: int) -> list[float]:
    """Contrastive training; returns the per-step loss history."""
    usable = _filter_trainable(lg)
    if len(usable) < 2:
        raise ValueError("need at least 2 demands with >= 2 objects each")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA77)))
    opt = torch.optim.Adam(encoder.parameters(), lr=hyper.lr)
    history = []
    for _step in range(hyper.steps):
        batch = construct_pairs(universe, usable,
                                m_negatives=hyper.negatives_per_anchor,
                                batch_size=hyper.batch_size, rng=rng)
        a = encoder(torch.from_numpy(batch.anchors).float())
        p = encoder(torch.from_numpy(batch.positives).float())
        n = encoder(torch.from_numpy(batch.negatives).float())
        loss = info_nce_loss(a, p, n, hyper.temperature)
        if not torch.isfinite(loss):
            raise DivergenceDetected(f"loss became non-finite at step {_step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
    return history


# ---------------------------------------------------------------------------
# Clustering diagnostics

@dataclass
class ClusteringReport:
    intra_mean: float          # mean cosine over positive pairs
    inter_mean: float          # mean cosine over same-demand negative pairs
    gap: float                 # intra - inter
    inter_same_object: float   # type-2 pairs, informational
    inter_cross: float         # type-3 pairs, informational
    per_demand: dict[int, dict[str, float]]
    pca_coords: np.ndarray     # (n_features, 2)
    feature_keys: list[tuple[int, int]]


def clustering_report(encoder: AttributeEncoder, universe: Universe,
                      lg: LGMapping, max_sampled_pairs: int = 4000,
                      seed: int = 0) -> ClusteringReport:
    """Quantify attribute clustering.

    The headline gap contrasts positive pairs against same-demand negatives
    (a satisfying vs a non-satisfying object under one demand), which is the
    separation the contrastive training is supposed to create; an encoder
    that ignores satisfaction scores ~0 because both pair kinds share the
    same input structure.
    """
    usable = _filter_trainable(lg)
    if len(usable) < 2:
        raise ValueError("need at least 2 demands with >= 2 objects each")
    rng = np.random.default_rng(seed)
    demand_ids = sorted(usable)
    pool = sorted({c for objs in usable.values() for c in objs})

    # one batched encode over the full (demand x pool) table
    dem_embs = {d: embed_demand(universe, d) for d in demand_ids}
    obj_embs = {c: embed_category_text(universe, c) for c in pool}
    ddim = universe.config.demand_dim
    odim = universe.config.object_dim
    table_keys = [(d, o) for d in demand_ids for o in pool]
    table = encode(encoder, np.stack(
        [build_do_feature(dem_embs[d], obj_embs[o], ddim, odim)
         for d, o in table_keys]))
    feats = {key: table[i] for i, key in enumerate(table_keys)}

    keys = [(d, o) for d in demand_ids for o in usable[d]]

    intra_vals, per_demand = [], {}
    for d in demand_ids:
        objs = list(usable[d])
        vals = []
        for i in range(len(objs)):
            for j in range(i + 1, len(objs)):
                vals.append(float(feats[(d, objs[i])] @ feats[(d, objs[j])]))
        intra_vals.extend(vals)
        per_demand[d] = {"n_objects": float(len(objs)),
                         "intra_mean": float(np.mean(vals)) if vals else math.nan}

    def sample_mean(pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
        if not pairs:
            return math.nan
        return float(np.mean([float(a @ b) for a, b in pairs]))

    neg1_pairs = []
    for d in demand_ids:
        non_sat = [c for c in pool if not satisfies(universe, d, c)]
        for o in usable[d]:
            for c in non_sat:
                neg1_pairs.append((feats[(d, o)], feats[(d, c)]))
    if len(neg1_pairs) > max_sampled_pairs:
        idx = rng.choice(len(neg1_pairs), size=max_sampled_pairs, replace=False)
        neg1_pairs = [neg1_pairs[i] for i in sorted(idx.tolist())]

    neg2_pairs, neg3_pairs = [], []
    for _ in range(min(max_sampled_pairs, 10 * len(keys))):
        d, o = keys[int(rng.integers(len(keys)))]
        d2 = demand_ids[int(rng.integers(len(demand_ids)))]
        if d2 != d and not satisfies(universe, d2, o):
            neg2_pairs.append((feats[(d, o)], feats[(d2, o)]))
        o3 = pool[int(rng.integers(len(pool)))]
        if d2 != d and o3 != o:
            neg3_pairs.append((feats[(d, o)], feats[(d2, o3)]))

    intra_mean = float(np.mean(intra_vals))
    inter_mean = sample_mean(neg1_pairs)

    mat = np.stack([feats[k] for k in keys])
    centered = mat - mat.mean(axis=0, keepdims=True)
    _u, _s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(2), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    coords = centered @ comps.T

    return ClusteringReport(
        intra_mean=intra_mean, inter_mean=inter_mean,
        gap=intra_mean - inter_mean,
        inter_same_object=sample_mean(neg2_pairs),
        inter_cross=sample_mean(neg3_pairs),
        per_demand=per_demand, pca_coords=coords, feature_keys=keys)
