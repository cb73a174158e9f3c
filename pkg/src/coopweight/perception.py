"""Toy bird's-eye-view cooperative detection.

Scenes hold a few car-sized boxes in a 64 m x 64 m world, an ego vehicle
and K connected vehicles. Each agent rasterizes only the objects it senses
(range limit plus random dropout) into a shared-frame occupancy grid. A
small conv encoder turns each raster into an 8 x 16 x 16 feature map, the
ego fuses the maps with per-location attention, and an SSD-style head
predicts objectness and box residuals per cell.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import nn
from .nn import ConvBlock, Conv2d, ParamStore, Tensor

log = logging.getLogger(__name__)

BOX_FIELDS = ("x", "y", "z", "w", "l", "h", "theta")


@dataclass(frozen=True)
class SceneConfig:
    world: float = 64.0
    raster: int = 64
    min_objects: int = 2
    max_objects: int = 8
    num_cavs: int = 2
    sensing_radius: float = 24.0
    dropout: float = 0.1
    cav_min_dist: float = 10.0
    cav_max_dist: float = 30.0
    theta_max: float = np.pi / 4
    size_w: tuple[float, float] = (1.7, 2.1)
    size_l: tuple[float, float] = (3.9, 4.9)
    size_h: tuple[float, float] = (1.4, 1.7)
    clutter: float = 0.004

    def __post_init__(self):
        if self.sensing_radius <= 0:
            raise ValueError(f"sensing radius must be positive, got {self.sensing_radius}")
        if self.num_cavs < 1:
            raise ValueError(f"need at least one CAV, got {self.num_cavs}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0 < self.min_objects <= self.max_objects:
            raise ValueError("object count range is empty")

    @property
    def mean_size(self) -> tuple[float, float, float]:
        return (
            sum(self.size_w) / 2,
            sum(self.size_l) / 2,
            sum(self.size_h) / 2,
        )


@dataclass
class Scene:
    """Boxes are (x, y, z, w, l, h, theta); agent 0 is the ego vehicle."""

    boxes: np.ndarray
    agents: np.ndarray
    visible: np.ndarray
    clutter_seed: int
    world: float = 64.0

    @property
    def num_cavs(self) -> int:
        return len(self.agents) - 1

    def to_json(self) -> str:
        return json.dumps(
            {
                "boxes": self.boxes.tolist(),
                "agents": self.agents.tolist(),
                "visible": self.visible.astype(int).tolist(),
                "clutter_seed": self.clutter_seed,
                "world": self.world,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Scene":
        d = json.loads(line)
        return cls(
            boxes=np.asarray(d["boxes"], dtype=np.float64).reshape(-1, 7),
            agents=np.asarray(d["agents"], dtype=np.float64),
            visible=np.asarray(d["visible"], dtype=bool).reshape(len(d["agents"]), -1),
            clutter_seed=int(d["clutter_seed"]),
            world=float(d["world"]),
        )


def generate_scene(config: SceneConfig, rng: np.random.Generator) -> Scene:
    world = config.world
    ego = rng.uniform(0.3 * world, 0.7 * world, size=2)
    agents = [ego]
    for _ in range(config.num_cavs):
        r = rng.uniform(config.cav_min_dist, config.cav_max_dist)
        a = rng.uniform(0, 2 * np.pi)
        agents.append(np.clip(ego + r * np.array([np.cos(a), np.sin(a)]), 2.0, world - 2.0))
    agents = np.array(agents)

    n_obj = int(rng.integers(config.min_objects, config.max_objects + 1))
    margin = 3.0
    boxes, vis = [], []
    for _ in range(n_obj):
        for attempt in range(100):
            xy = rng.uniform(margin, world - margin, size=2)
            if any(np.hypot(*(xy - b[:2])) < 5.5 for b in boxes):
                continue
            dist = np.hypot(*(agents - xy).T)
            v = (dist <= config.sensing_radius) & (rng.random(len(agents)) >= config.dropout)
            if v.any():
                break
        else:
            # force the nearest agent to see it
            v = np.zeros(len(agents), dtype=bool)
            v[int(np.argmin(np.hypot(*(agents - xy).T)))] = True
        w = rng.uniform(*config.size_w)
        length = rng.uniform(*config.size_l)
        h = rng.uniform(*config.size_h)
        theta = rng.uniform(-config.theta_max, config.theta_max)
        boxes.append(np.array([xy[0], xy[1], h / 2, w, length, h, theta]))
        vis.append(v)
    return Scene(
        boxes=np.array(boxes).reshape(-1, 7),
        agents=agents,
        visible=np.array(vis).T.reshape(len(agents), -1),
        clutter_seed=int(rng.integers(0, 2**31 - 1)),
        world=world,
    )


def generate_scenes(config: SceneConfig, count: int, seed: int) -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [generate_scene(config, rng) for _ in range(count)]


def write_scenes(path, scenes: Sequence[Scene]) -> None:
    with open(path, "w") as fh:
        for s in scenes:
            fh.write(s.to_json() + "\n")


def read_scenes(path) -> list[Scene]:
    with open(path) as fh:
        return [Scene.from_json(line) for line in fh if line.strip()]


def _box_mask(box: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    x, y, _, w, length, _, th = box
    dx, dy = px - x, py - y
    c, s = np.cos(th), np.sin(th)
    return (np.abs(dx * c + dy * s) <= w / 2) & (np.abs(-dx * s + dy * c) <= length / 2)


def rasterize(scene: Scene, agent: int, config: SceneConfig) -> np.ndarray:
    """Occupancy grid of what ``agent`` senses, 2x2 supersampled."""
    n = config.raster
    res = scene.world / n
    sub = (np.arange(2 * n) + 0.5) * (res / 2)
    px, py = np.meshgrid(sub, sub)  # rows follow y, columns follow x
    occ = np.zeros((2 * n, 2 * n))
    for b, seen in zip(scene.boxes, scene.visible[agent]):
        if seen:
            occ = np.maximum(occ, _box_mask(b, px, py))
    grid = occ.reshape(n, 2, n, 2).mean(axis=(1, 3))
    if config.clutter > 0:
        crng = np.random.default_rng([scene.clutter_seed, agent])
        centers = (np.arange(n) + 0.5) * res
        cx, cy = np.meshgrid(centers, centers)
        ax, ay = scene.agents[agent]
        in_range = np.hypot(cx - ax, cy - ay) <= config.sensing_radius
        spots = (crng.random((n, n)) < config.clutter) & in_range
        grid = np.maximum(grid, spots * crng.uniform(0.3, 1.0, (n, n)))
    return grid


def agent_rasters(scene: Scene, config: SceneConfig) -> np.ndarray:
    """(1 + K, 64, 64) rasters, ego first."""
    return np.stack([rasterize(scene, a, config) for a in range(len(scene.agents))])


def ego_miss_fraction(scene: Scene) -> float:
    if scene.boxes.shape[0] == 0:
        return 0.0
    return float(np.mean(~scene.visible[0]))


# ----------------------------------------------------------------------
# anchors and box coding
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.25
    gamma: float = 2.0
    beta_reg: float = 2.0
    beta_cls: float = 1.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.beta_reg <= 0 or self.beta_cls <= 0:
            raise ValueError("loss weights must be positive")


def make_anchors(config: SceneConfig, grid: int = 16) -> np.ndarray:
    """One axis-aligned anchor per head cell, row-major over (row=y, col=x)."""
    cell = config.world / grid
    w, length, h = config.mean_size
    centers = (np.arange(grid) + 0.5) * cell
    cx, cy = np.meshgrid(centers, centers)
    n = grid * grid
    return np.column_stack(
        [cx.ravel(), cy.ravel(), np.full(n, h / 2), np.full(n, w), np.full(n, length), np.full(n, h), np.zeros(n)]
    )


def box_residuals(gt, anchor) -> np.ndarray:
    """Regression targets of ``gt`` relative to ``anchor``; works row-wise on (N, 7)."""
    gt = np.asarray(gt, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(gt[..., 3:6] <= 0) or np.any(anchor[..., 3:6] <= 0):
        raise ValueError("box sizes must be positive")
    diag = np.sqrt(anchor[..., 3] ** 2 + anchor[..., 4] ** 2)
    return np.stack(
        [
            (gt[..., 0] - anchor[..., 0]) / diag,
            (gt[..., 1] - anchor[..., 1]) / diag,
            (gt[..., 2] - anchor[..., 2]) / anchor[..., 5],
            np.log(gt[..., 3] / anchor[..., 3]),
            np.log(gt[..., 4] / anchor[..., 4]),
            np.log(gt[..., 5] / anchor[..., 5]),
            np.sin(gt[..., 6] - anchor[..., 6]),
        ],
        axis=-1,
    )


def decode_residuals(res, anchor) -> np.ndarray:
    res = np.asarray(res, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    diag = np.sqrt(anchor[..., 3] ** 2 + anchor[..., 4] ** 2)
    return np.stack(
        [
            anchor[..., 0] + res[..., 0] * diag,
            anchor[..., 1] + res[..., 1] * diag,
            anchor[..., 2] + res[..., 2] * anchor[..., 5],
            anchor[..., 3] * np.exp(res[..., 3]),
            anchor[..., 4] * np.exp(res[..., 4]),
            anchor[..., 5] * np.exp(res[..., 5]),
            anchor[..., 6] + np.arcsin(np.clip(res[..., 6], -1.0, 1.0)),
        ],
        axis=-1,
    )


def iou(a, b) -> float:
    """Axis-aligned BEV IoU over (x, y, w, l); heading ignored."""
    return float(iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    ax0, ax1 = a[:, 0] - a[:, 3] / 2, a[:, 0] + a[:, 3] / 2
    ay0, ay1 = a[:, 1] - a[:, 4] / 2, a[:, 1] + a[:, 4] / 2
    bx0, bx1 = b[:, 0] - b[:, 3] / 2, b[:, 0] + b[:, 3] / 2
    by0, by1 = b[:, 1] - b[:, 4] / 2, b[:, 1] + b[:, 4] / 2
    iw = np.clip(np.minimum(ax1[:, None], bx1) - np.maximum(ax0[:, None], bx0), 0, None)
    ih = np.clip(np.minimum(ay1[:, None], by1) - np.maximum(ay0[:, None], by0), 0, None)
    inter = iw * ih
    union = (a[:, 3] * a[:, 4])[:, None] + b[:, 3] * b[:, 4] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class Targets:
    labels: np.ndarray  # 1 positive, 0 negative, -1 ignored
    residuals: np.ndarray  # (num_anchors, 7), zero except positives

    @property
    def num_pos(self) -> int:
        return int(np.sum(self.labels == 1))


def assign_targets(boxes: np.ndarray, anchors: np.ndarray, pos_iou: float = 0.5, neg_iou: float = 0.3) -> Targets:
    """IoU >= 0.5 positive, <= 0.3 negative; each box also claims its best anchor."""
    labels = np.zeros(len(anchors), dtype=np.int64)
    res = np.zeros((len(anchors), 7))
    if len(boxes) == 0:
        return Targets(labels, res)
    ious = iou_matrix(anchors, boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    labels[(best_iou > neg_iou) & (best_iou < pos_iou)] = -1
    labels[best_iou >= pos_iou] = 1
    for g in range(len(boxes)):
        a = int(ious[:, g].argmax())
        if ious[a, g] > 0:
            labels[a] = 1
            best_gt[a] = g
    pos = labels == 1
    res[pos] = box_residuals(boxes[best_gt[pos]], anchors[pos])
    return Targets(labels, res)


# ----------------------------------------------------------------------
# model
# ----------------------------------------------------------------------

FEATURE_SHAPE = (8, 16, 16)


class PerceptionModel:
    """Encoder plus detection head sharing one parameter store."""

    def __init__(self, seed: int = 0, scene_config: SceneConfig | None = None):
        rng = np.random.default_rng(seed)
        self.scene_config = scene_config or SceneConfig()
        self.store = ParamStore()
        s = self.store
        self.enc = [
            ConvBlock(s, "enc.0", 1, 8, 2, rng),
            ConvBlock(s, "enc.1", 8, 16, 2, rng),
            ConvBlock(s, "enc.2", 16, 8, 1, rng),
        ]
        self.head_conv = Conv2d(s, "head.conv", 8, 16, 3, 1, 1, rng)
        self.head_out = Conv2d(s, "head.out", 16, 8, 1, 1, 0, rng)
        self.head_out.w.data *= 0.1
        # start objectness near the positive-anchor prior
        self.head_out.b.data[0] = -np.log((1 - 0.02) / 0.02)
        self.anchors = make_anchors(self.scene_config, FEATURE_SHAPE[1])
        self.training = False

    def encode(self, rasters) -> Tensor:
        x = rasters if isinstance(rasters, Tensor) else Tensor(rasters)
        if x.ndim == 2:
            x = x.reshape(1, 1, *x.shape)
        elif x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        if x.shape[-2:] != (self.scene_config.raster, self.scene_config.raster) or x.shape[1] != 1:
            raise ValueError(f"encode: expected (N, 1, 64, 64) rasters, got {x.shape}")
        for block in self.enc:
            x = block(x, self.training)
        return x

    def head(self, f_agg: Tensor) -> Tensor:
        if tuple(f_agg.shape[1:]) != FEATURE_SHAPE:
            raise ValueError(f"head: expected (N, 8, 16, 16) features, got {f_agg.shape}")
        return self.head_out(nn.relu(self.head_conv(f_agg)))

    def detect(self, f_agg: Tensor, score_threshold: float = 0.05, nms_iou: float = 0.1) -> list[list["Detection"]]:
        with nn.no_grad():
            out = self.head(f_agg).data
        return decode_head(out, self.anchors, score_threshold, nms_iou)


def encode(view, model: PerceptionModel) -> np.ndarray:
    """Single raster -> (8, 16, 16) feature map."""
    with nn.no_grad():
        return model.encode(np.asarray(view)[None]).data[0]


def fuse_attentive(f_ego: Tensor, shared: Sequence[Tensor]) -> Tensor:
    """Per-location scaled dot-product attention with the ego vector as query.

    Works on batched (N, C, H, W) or single (C, H, W) maps.
    """
    f_ego = f_ego if isinstance(f_ego, Tensor) else Tensor(f_ego)
    shared = [s if isinstance(s, Tensor) else Tensor(s) for s in shared]
    for s in shared:
        if s.shape != f_ego.shape:
            raise ValueError(f"fuse_attentive: shape {s.shape} differs from ego {f_ego.shape}")
    if not shared:
        return f_ego
    single = f_ego.ndim == 3
    if single:
        f_ego = f_ego.reshape(1, *f_ego.shape)
        shared = [s.reshape(1, *s.shape) for s in shared]
    agents = nn.stack([f_ego] + list(shared), axis=1)  # N, A, C, H, W
    n, a, c, h, w = agents.shape
    q = f_ego.reshape(n, 1, c, h, w)
    scores = (agents * q).sum(axis=2) * (1.0 / np.sqrt(c))  # N, A, H, W
    att = nn.softmax(scores, axis=1)
    out = (agents * att.reshape(n, a, 1, h, w)).sum(axis=1)
    return out.reshape(out.shape[1:]) if single else out


def attention_weights(f_ego: np.ndarray, shared: Sequence[np.ndarray]) -> np.ndarray:
    """Attention coefficients (A, H, W) for a single (C, H, W) ego map."""
    agents = np.stack([f_ego] + list(shared))
    scores = np.einsum("achw,chw->ahw", agents, f_ego) / np.sqrt(f_ego.shape[0])
    return nn._softmax_np(scores, 0)


@dataclass
class Detection:
    box: np.ndarray
    score: float
    cell: int = -1


def nms(boxes: np.ndarray, scores: np.ndarray, thr: float) -> list[int]:
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        i = order.pop(0)
        keep.append(i)
        if order:
            ious = iou_matrix(boxes[i], boxes[order])[0]
            order = [j for j, v in zip(order, ious) if v <= thr]
    return keep


def decode_head(out: np.ndarray, anchors: np.ndarray, score_threshold: float = 0.05, nms_iou: float = 0.1) -> list[list[Detection]]:
    """Head output (N, 8, H, W) -> per-scene detection lists."""
    n = out.shape[0]
    flat = out.reshape(n, 8, -1)
    scores = nn._sigmoid(flat[:, 0])
    result = []
    for i in range(n):
        cells = np.flatnonzero(scores[i] >= score_threshold)
        boxes = decode_residuals(flat[i, 1:, cells].reshape(-1, 7), anchors[cells])
        keep = nms(boxes, scores[i, cells], nms_iou) if len(cells) else []
        result.append([Detection(boxes[k], float(scores[i, cells[k]]), int(cells[k])) for k in keep])
    return result


def detect_head(f_agg, model: PerceptionModel, score_threshold: float = 0.05) -> list[Detection]:
    """Single (8, 16, 16) map -> detections."""
    f = f_agg if isinstance(f_agg, Tensor) else Tensor(f_agg)
    if f.ndim == 3:
        f = f.reshape(1, *f.shape)
    return model.detect(f, score_threshold)[0]


def detection_loss(head_out: Tensor, targets: Sequence[Targets], params: LossParams = LossParams()) -> Tensor:
    """(beta_reg * sum smooth-L1 over positives + beta_cls * sum focal) / N_pos."""
    n = head_out.shape[0]
    flat = head_out.reshape(n, 8, -1)
    labels = np.stack([t.labels for t in targets])
    pos = (labels == 1).astype(np.float64)
    neg = (labels == 0).astype(np.float64)
    ign = (labels == -1).astype(np.float64)
    p = nn.sigmoid(flat[:, 0, :])
    q = p * pos + (1.0 - p) * neg + ign
    alpha_t = params.alpha * pos + (1.0 - params.alpha) * neg
    cls = nn.focal_loss(q, alpha_t, params.gamma).sum()

    tgt = np.stack([t.residuals.T for t in targets])  # N, 7, A
    diff = flat[:, 1:, :] - tgt
    reg = (nn.smooth_l1(diff) * pos[:, None, :]).sum()
    n_pos = max(float(pos.sum()), 1.0)
    return (reg * params.beta_reg + cls * params.beta_cls) * (1.0 / n_pos)


def average_precision(detections: Sequence[Sequence[Detection]], ground_truths: Sequence[np.ndarray], iou_threshold: float) -> float:
    """All-point interpolated AP with greedy score-ordered matching."""
    n_gt = sum(len(g) for g in ground_truths)
    flat = [(d.score, i, d.box) for i, dets in enumerate(detections) for d in dets]
    if n_gt == 0:
        if flat:
            return 0.0
        log.info("average_precision: no ground truth and no detections, returning 1")
        return 1.0
    if not flat:
        return 0.0
    order = np.argsort(-np.array([f[0] for f in flat]), kind="stable")
    taken = [np.zeros(len(g), dtype=bool) for g in ground_truths]
    tp = np.zeros(len(flat))
    for rank, k in enumerate(order):
        _, scene, box = flat[k]
        gts = ground_truths[scene]
        if len(gts) == 0:
            continue
        ious = iou_matrix(box, gts)[0]
        ious[taken[scene]] = -1.0
        j = int(ious.argmax())
        if ious[j] >= iou_threshold:
            taken[scene][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def scene_config_dict(config: SceneConfig) -> dict:
    return asdict(config)
