"""Demand-based visual grounding: pick which detection satisfies the demand.

The grounder runs once per episode, at Done. Tokens are the k detections
(embedding + scaled bbox + logits), a global-image token, a demand token and
a learned CLS token; a small self-attention encoder mixes them and the CLS
output scores each detection token attention-style. Scoring detection tokens
by content keeps the argmax consistent under reordering of the input list.

Training frames come from random teleports: a frame is kept when some
detection is a satisfying object within the navigation threshold, labeled
with the qualifying detection of highest object logit.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GrounderHyper
from .demands import Universe, WGMapping, satisfies
from .errors import DimMismatch, DivergenceDetected
from .nets import EncoderLayer
from .perception import Detection, Observation, REAL_LOGIT_MEAN, detect
from .policy import detection_extras
from .worldcore import BBox, GridScene, Pose, cell_center, horizontal_distance


@dataclass(frozen=True)
class GroundingFrame:
    observation: Observation
    demand_id: int
    label: int  # index into observation.detections


class GrounderNet(nn.Module):
    def __init__(self, hyper: GrounderHyper = GrounderHyper(),
                 object_dim: int = 16, demand_dim: int = 32,
                 global_dim: int = 22):
        super().__init__()
        d = hyper.token_dim
        self.det_emb_proj = nn.Linear(object_dim, d)
        # bbox/logit features enter through a zero-initialized branch, so a
        # fresh net ranks detections by embedding direction alone (real and
        # clutter are then exchangeable and the argmax sits at chance)
        self.det_extra_proj = nn.Linear(6, d)
        nn.init.zeros_(self.det_extra_proj.weight)
        nn.init.zeros_(self.det_extra_proj.bias)
        self.glob_proj = nn.Linear(global_dim, d)
        self.dem_proj = nn.Linear(demand_dim, d)
        # small but nonzero: LayerNorm of a zero-variance token is
        # ill-conditioned and wrecks gradient quality
        self.cls = nn.Parameter(0.1 * torch.randn(d))
        self.token_norm = nn.LayerNorm(d)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, hyper.n_heads) for _ in range(hyper.encoder_layers))
        self.score_q = nn.Linear(d, d)
        self.score_k = nn.Linear(d, d)
        self.scale = 1.0 / math.sqrt(d)
        self.object_dim = object_dim
        self.det_in_dim = object_dim + 6

    def forward(self, det_feats: torch.Tensor, global_feat: torch.Tensor,
                demand_emb: torch.Tensor) -> torch.Tensor:
        """det_feats (B, k, 22), global_feat (B, 22), demand_emb (B, 32)
        -> scores (B, k)."""
        if det_feats.shape[-1] != self.det_in_dim:
            raise DimMismatch(f"expected detection feature dim {self.det_in_dim}, "
                              f"got {det_feats.shape[-1]}")
        b = det_feats.shape[0]
        det_tokens = (self.det_emb_proj(det_feats[..., :self.object_dim])
                      + self.det_extra_proj(det_feats[..., self.object_dim:]))
        tokens = torch.cat([
            self.cls.expand(b, 1, -1),
            self.glob_proj(global_feat).unsqueeze(1),
            self.dem_proj(demand_emb).unsqueeze(1),
            det_tokens,
        ], dim=1)
        x = self.token_norm(tokens)
        for layer in self.encoder:
            x = layer(x)
        cls_out, det_out = x[:, 0], x[:, 3:]
        scores = torch.einsum("bd,bkd->bk", self.score_q(cls_out),
                              self.score_k(det_out)) * self.scale
        return scores


def grounder_feats(obs: Observation) -> np.ndarray:
    """(k, 22) detection features: unit-normalized embedding, bbox in [0, 1],
    logits scaled to O(1).

    Normalizing per token keeps real and clutter detections exchangeable to a
    freshly initialized net (so it scores at chance) without losing category
    direction or detector confidence.
    """
    embeds = np.stack([d.embedding for d in obs.detections])
    embeds = embeds / np.clip(np.linalg.norm(embeds, axis=1, keepdims=True),
                              1e-12, None)
    extras = detection_extras(obs)
    extras[:, 4:] /= REAL_LOGIT_MEAN
    return np.concatenate([embeds, extras], axis=1)


def grounder_forward(net: GrounderNet, obs: Observation,
                     demand_emb: np.ndarray) -> tuple[np.ndarray, int]:
    """Scores over the k detections and the argmax (lowest index on ties)."""
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        scores = net(
            torch.from_numpy(grounder_feats(obs)).to(dtype).unsqueeze(0),
            torch.from_numpy(obs.global_feature).to(dtype).unsqueeze(0),
            torch.from_numpy(np.asarray(demand_emb)).to(dtype).unsqueeze(0))[0]
    scores_np = scores.numpy()
    return scores_np, int(np.argmax(scores_np))


# ---------------------------------------------------------------------------
# Data collection

def collect_grounding_data(scenes: list[GridScene], universe: Universe,
                           wg: WGMapping, *, frames_per_scene: int,
                           seed: int = 0, k: int = 16,
                           sigma_logit: float = 0.5, sigma_align: float = 0.1,
                           c_navi: float = 1.5
                           ) -> tuple[list[GroundingFrame], dict[str, int]]:
    """Teleport-and-label frames for grounder training.

    The agent is dropped at uniform random poses (free cell, any of the 12
    headings, any pitch). A frame is kept when some real detection is a
    satisfying object within c_navi; its label is the qualifying detection
    with the highest object logit (lowest index on ties).
    """
    frames: list[GroundingFrame] = []
    stats = {"kept": 0, "discarded": 0, "scenes_without_frames": 0}
    for scene in sorted(scenes, key=lambda s: s.scene_id):
        rng = np.random.default_rng(np.random.SeedSequence(
            (seed, zlib.crc32(scene.scene_id.encode()), 0x6D)))
        demands = [d for d in sorted(wg)
                   if any(satisfies(universe, d, o.category_id)
                          for o in scene.objects)]
        if not demands:
            stats["scenes_without_frames"] += 1
            continue
        objects_by_id = {o.instance_id: o for o in scene.objects}
        kept_before = stats["kept"]
        free = scene.free_cells()
        attempts = 0
        while (stats["kept"] - kept_before) < frames_per_scene \
                and attempts < 60 * frames_per_scene:
            attempts += 1
            ix, iy = free[int(rng.integers(len(free)))]
            x, y = cell_center(ix, iy)
            pose = Pose(x=x, y=y, heading=30 * int(rng.integers(12)),
                        pitch=30 * (int(rng.integers(3)) - 1))
            demand_id = demands[int(rng.integers(len(demands)))]
            obs = detect(scene, pose, universe, rng, demand_id=demand_id, k=k,
                         sigma_logit=sigma_logit, sigma_align=sigma_align)
            qualifying = []
            for idx, det in enumerate(obs.detections):
                if det.source_instance is None:
                    continue
                obj = objects_by_id[det.source_instance]
                if (satisfies(universe, demand_id, obj.category_id)
                        and horizontal_distance(pose, obj) < c_navi):
                    qualifying.append(idx)
            if not qualifying:
                stats["discarded"] += 1
                continue
            label = max(qualifying,
                        key=lambda i: (obs.detections[i].logit_object, -i))
            frames.append(GroundingFrame(observation=obs, demand_id=demand_id,
                                         label=label))
            stats["kept"] += 1
        if stats["kept"] == kept_before:
            stats["scenes_without_frames"] += 1
    return frames, stats


# ---------------------------------------------------------------------------
# Training

def _frame_tensors(frames: list[GroundingFrame], universe: Universe):
    det = torch.from_numpy(np.stack(
        [grounder_feats(f.observation) for f in frames])).float()
    glob = torch.from_numpy(np.stack(
        [f.observation.global_feature for f in frames])).float()
    dem = torch.from_numpy(np.stack(
        [universe.demand(f.demand_id).embedding for f in frames])).float()
    labels = torch.tensor([f.label for f in frames], dtype=torch.int64)
    return det, glob, dem, labels


def grounder_accuracy(net: GrounderNet, frames: list[GroundingFrame],
                      universe: Universe) -> float:
    if not frames:
        return math.nan
    det, glob, dem, labels = _frame_tensors(frames, universe)
    with torch.no_grad():
        scores = net(det, glob, dem)
    return float((scores.argmax(dim=-1) == labels).float().mean().item())


def train_grounder(net: GrounderNet, frames: list[GroundingFrame],
                   universe: Universe, hyper: GrounderHyper,
                   seed: int) -> list[dict]:
    """Cross-entropy over the k-way labels; returns per-epoch history."""
    if not frames:
        raise ValueError("no grounding frames to train on")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x96)))
    order = rng.permutation(len(frames)).tolist()
    n_val = int(round(hyper.val_fraction * len(frames)))
    val = [frames[i] for i in order[:n_val]]
    train = [frames[i] for i in order[n_val:]] or list(frames)

    det, glob, dem, labels = _frame_tensors(train, universe)
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr)
    history: list[dict] = []
    n = len(train)
    for epoch in range(hyper.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n, hyper.batch_size):
            idx = torch.from_numpy(perm[lo:lo + hyper.batch_size])
            scores = net(det[idx], glob[idx], dem[idx])
            loss = F.cross_entropy(scores, labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"grounder loss non-finite in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.item())
            batches += 1
        entry = {"epoch": epoch, "loss": epoch_loss / max(batches, 1),
                 "train_accuracy": grounder_accuracy(net, train, universe)}
        if val:
            entry["val_accuracy"] = grounder_accuracy(net, val, universe)
        history.append(entry)
    return history


# ---------------------------------------------------------------------------
# Persistence

def _round6(values) -> list[float]:
    return [round(float(v), 6) for v in values]


def frame_to_dict(frame: GroundingFrame) -> dict:
    obs = frame.observation
    return {
        "demand_id": frame.demand_id,
        "label": frame.label,
        "pose": {"x": round(obs.pose.x, 6), "y": round(obs.pose.y, 6),
                 "heading": obs.pose.heading, "pitch": obs.pose.pitch},
        "detections": [
            {"bbox": _round6(d.bbox.as_array()),
             "logits": _round6([d.logit_background, d.logit_object]),
             "embedding": _round6(d.embedding),
             "source": -1 if d.source_instance is None else d.source_instance}
            for d in obs.detections
        ],
        "global_feature": _round6(obs.global_feature),
    }


def frame_from_dict(data: dict) -> GroundingFrame:
    pose = Pose(x=data["pose"]["x"], y=data["pose"]["y"],
                heading=data["pose"]["heading"], pitch=data["pose"]["pitch"])
    detections = tuple(
        Detection(bbox=BBox(*d["bbox"]), logit_background=d["logits"][0],
                  logit_object=d["logits"][1],
                  embedding=np.array(d["embedding"]),
                  source_instance=None if d["source"] < 0 else d["source"])
        for d in data["detections"])
    obs = Observation(detections=detections,
                      global_feature=np.array(data["global_feature"]),
                      demand_id=data["demand_id"], pose=pose,
                      step_count=0, step_limit=100)
    return GroundingFrame(observation=obs, demand_id=data["demand_id"],
                          label=data["label"])


def write_frames_jsonl(path: str, frames: list[GroundingFrame],
                       meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        if meta is not None:
            fh.write(json.dumps({"_meta": meta}) + "\n")
        for frame in frames:
            fh.write(json.dumps(frame_to_dict(frame)) + "\n")


def read_frames_jsonl(path: str) -> tuple[list[GroundingFrame], dict | None]:
    frames = []
    meta = None
    with open(path) as fh:
        for line in fh:
            record = json.loads(line)
            if "_meta" in record:
                meta = record["_meta"]
                continue
            frames.append(frame_from_dict(record))
    return frames, meta
