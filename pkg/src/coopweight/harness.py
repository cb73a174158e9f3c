"""Training schemes, channel-point evaluation, sweeps and CSV output."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .channel import FlatChannelConfig, MultipathChannelConfig
from .config import ConfigError, RunConfig
from .perception import (
    LossParams,
    PerceptionModel,
    Scene,
    SceneConfig,
    agent_rasters,
    assign_targets,
    average_precision,
    detection_loss,
    fuse_attentive,
    generate_scenes,
    read_scenes,
)
from .transport import transmit
from .weighting import (
    SelfSupervisedParams,
    WeightingNet,
    extract_features,
    step_lr,
    train_weighting,
)

log = logging.getLogger(__name__)

MODES = ("ego", "unweighted", "weighted")
SNR_POINTS = tuple(range(-10, 31, 5))
PATHLOSS_POINTS = tuple(1.0 + 0.25 * i for i in range(9))
PILOT_POINTS = (16, 64)


class MissingArtifact(FileNotFoundError):
    pass


def stream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for a named purpose under the run seed."""
    return np.random.default_rng(_seed_words(seed, *keys))


def _seed_words(seed: int, *keys) -> list[int]:
    return [int(seed)] + [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]


def scene_config(cfg: RunConfig) -> SceneConfig:
    return SceneConfig(num_cavs=cfg.num_cavs)


def train_scenes(cfg: RunConfig) -> list[Scene]:
    return generate_scenes(scene_config(cfg), cfg.n_train, _seed_words(cfg.seed, "train-scenes"))


def test_scenes(cfg: RunConfig) -> list[Scene]:
    if cfg.test_scenes:
        path = Path(cfg.test_scenes)
        if not path.exists():
            raise MissingArtifact(f"test scene file {path} not found")
        return read_scenes(path)
    return generate_scenes(scene_config(cfg), cfg.n_test, _seed_words(cfg.seed, "test-scenes"))


def rasterize_all(scenes: Sequence[Scene], scfg: SceneConfig) -> np.ndarray:
    return np.stack([agent_rasters(s, scfg) for s in scenes]).astype(np.float32)


# ----------------------------------------------------------------------
# supervised schemes
# ----------------------------------------------------------------------

def train_backbone(cfg: RunConfig, scheme: int, on_epoch=None, scenes: Sequence[Scene] | None = None) -> PerceptionModel:
    """End-to-end supervised training; scheme 2 puts the 15 dB Rician link in the loop."""
    scfg = scene_config(cfg)
    scenes = list(scenes) if scenes is not None else train_scenes(cfg)
    model = PerceptionModel(seed=int(stream(cfg.seed, "backbone-init").integers(2**31)), scene_config=scfg)
    rasters = rasterize_all(scenes, scfg)
    targets = [assign_targets(s.boxes, model.anchors) for s in scenes]
    order_rng = stream(cfg.seed, "shuffle", scheme)
    chan_rng = stream(cfg.seed, "train-channel", scheme)
    link = FlatChannelConfig(rician_k=cfg.rician_k, snr_db=cfg.train_snr_db) if scheme == 2 else None
    loss_params = LossParams()

    n = len(scenes)
    steps = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps
    step = 0
    model.training = True
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            r = rasters[idx].astype(np.float64)
            b, a = r.shape[:2]
            f = model.encode(r.reshape(b * a, *r.shape[2:]))
            f = f.reshape(b, a, *f.shape[1:])
            shared = []
            for k in range(1, a):
                fk = f[:, k]
                if link is not None:
                    noisy = np.stack([transmit(m, link, chan_rng) for m in fk.data])
                    fk = nn.stop_gradient_add(fk, noisy - fk.data)
                shared.append(fk)
            agg = fuse_attentive(f[:, 0], shared)
            loss = detection_loss(model.head(agg), [targets[i] for i in idx], loss_params)
            loss.backward()
            nn.adam_step(model.store, step_lr(cfg.lr, step, total), weight_decay=cfg.weight_decay)
            step += 1
            losses.append(float(loss.data))
        mean_loss = float(np.mean(losses))
        log.info("scheme %d epoch %d loss %.5f", scheme, epoch, mean_loss)
        if on_epoch:
            on_epoch(epoch, mean_loss)
    model.training = False
    return model


def _require_scheme(cfg: RunConfig, scheme: int) -> None:
    if cfg.scheme != scheme:
        raise ConfigError(f"config is for scheme {cfg.scheme}, not scheme {scheme}")


def run_scheme1(cfg: RunConfig, on_epoch=None) -> PerceptionModel:
    """Ideal-channel supervised training, no weighting."""
    _require_scheme(cfg, 1)
    return train_backbone(cfg, 1, on_epoch)


def run_scheme2(cfg: RunConfig, on_epoch=None) -> PerceptionModel:
    """Distortion-in-the-loop supervised training at ``train_snr_db``."""
    _require_scheme(cfg, 2)
    return train_backbone(cfg, 2, on_epoch)


def load_backbone(cfg: RunConfig, path) -> PerceptionModel:
    path = Path(path) if path else None
    if path is None or not path.exists():
        raise MissingArtifact(f"backbone checkpoint {path} not found")
    model = PerceptionModel(scene_config=scene_config(cfg))
    model.store.load_state(nn.load_checkpoint(path))
    return model


def load_weighting(path) -> WeightingNet:
    path = Path(path) if path else None
    if path is None or not path.exists():
        raise MissingArtifact(f"weighting checkpoint {path} not found")
    net = WeightingNet()
    net.store.load_state(nn.load_checkpoint(path))
    return net


def ss_params(cfg: RunConfig) -> SelfSupervisedParams:
    return SelfSupervisedParams(
        lambda_pos=cfg.lambda_pos,
        lambda_neg=cfg.lambda_neg,
        snr_pos_db=cfg.aug_snr_pos_db,
        snr_neg_db=cfg.aug_snr_neg_db,
        rician_k=cfg.rician_k,
        epochs=cfg.weighting_epochs,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size,
    )


def run_scheme3(cfg: RunConfig, checkpoint=None, on_epoch=None) -> tuple[PerceptionModel, WeightingNet]:
    """Self-supervised weighting on top of a frozen scheme-2 backbone."""
    _require_scheme(cfg, 3)
    backbone = load_backbone(cfg, checkpoint or cfg.backbone_checkpoint)
    scfg = scene_config(cfg)
    rasters = rasterize_all(train_scenes(cfg), scfg)
    net = WeightingNet(seed=int(stream(cfg.seed, "weighting-init").integers(2**31)))
    net = train_weighting(backbone, rasters, ss_params(cfg), stream(cfg.seed, "weighting-train"), net, on_epoch)
    return backbone, net


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelPoint:
    """One evaluation condition.

    ``path_loss_n=None`` calibrates noise against the realized link power
    (pure SNR axis); a value switches to unit-distance calibration with the
    actual ego-CAV distance attenuating the signal.
    """

    kind: str = "flat"  # ideal | flat | multipath
    snr_db: float = math.inf
    path_loss_n: float | None = None
    csi_variance: float | None = None
    pilot_count: int | None = None
    p0: float = 1.0
    rician_k: float = 1.0

    def link(self, distance: float = 1.0):
        if self.kind == "ideal":
            return None
        if self.kind == "flat":
            if self.path_loss_n is None:
                return FlatChannelConfig(p0=self.p0, d=1.0, n=0.0, rician_k=self.rician_k,
                                         snr_db=self.snr_db, csi_variance=self.csi_variance)
            return FlatChannelConfig(p0=self.p0, d=max(distance, 1.0), n=self.path_loss_n,
                                     rician_k=self.rician_k, snr_db=self.snr_db,
                                     csi_variance=self.csi_variance, calibrate_at_unit_distance=True)
        if self.kind == "multipath":
            return MultipathChannelConfig(pilot_count=self.pilot_count or 16, snr_db=self.snr_db)
        raise ValueError(f"unknown channel kind {self.kind!r}")

    @property
    def csi_label(self) -> str:
        if self.kind == "ideal":
            return "perfect"
        if self.kind == "multipath":
            return f"ls({self.pilot_count or 16})"
        return "perfect" if self.csi_variance is None else f"perturbed({self.csi_variance:g})"


@dataclass
class MetricsRecord:
    scheme: int
    snr_db: float | None
    path_loss_n: float | None
    pilot_count: int | None
    mode: str
    ap_03: float
    ap_07: float
    feature_mse: float | None
    mean_weight: float | None
    channel: str
    csi: str

    def __post_init__(self):
        for name in ("ap_03", "ap_07"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mean_weight is not None and not 0.0 < self.mean_weight < 1.0:
            raise ValueError(f"mean_weight={self.mean_weight} outside (0, 1)")


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRecord))
_INT_COLS = {"scheme", "pilot_count"}
_STR_COLS = {"mode", "channel", "csi"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            vals = {}
            for c in METRIC_COLUMNS:
                raw = row[c]
                if c in _STR_COLS:
                    vals[c] = raw
                elif raw == "":
                    vals[c] = None
                elif c in _INT_COLS:
                    vals[c] = int(raw)
                else:
                    vals[c] = float(raw)
            out.append(MetricsRecord(**vals))
    return out


class Evaluator:
    """Caches eval-mode features for a fixed test set and scores channel points.

    Channel draws are keyed by (seed, scene, CAV, draw) only, so every mode
    and every point on an axis sees the same fading and noise samples.
    """

    def __init__(
        self,
        backbone: PerceptionModel,
        scenes: Sequence[Scene],
        seed: int = 0,
        draws: int = 5,
        weighting: WeightingNet | None = None,
        scheme: int = 2,
        batch: int = 50,
    ):
        self.backbone = backbone
        self.weighting = weighting
        self.scenes = list(scenes)
        self.seed = seed
        self.draws = draws
        self.scheme = scheme
        self.batch = batch
        backbone.training = False
        if weighting is not None:
            weighting.training = False
        rasters = rasterize_all(self.scenes, backbone.scene_config)
        self.feats = extract_features(backbone, rasters)
        self.gts = [s.boxes for s in self.scenes]
        self.distances = np.array(
            [[np.hypot(*(s.agents[k] - s.agents[0])) for k in range(1, len(s.agents))] for s in self.scenes]
        )
        self._ego_cache: tuple[float, float] | None = None

    def _detect(self, ego: np.ndarray, shared: np.ndarray | None):
        dets = []
        with nn.no_grad():
            for start in range(0, len(ego), self.batch):
                sl = slice(start, start + self.batch)
                e = nn.Tensor(ego[sl])
                sh = [] if shared is None else [nn.Tensor(shared[sl, k]) for k in range(shared.shape[1])]
                dets.extend(self.backbone.detect(fuse_attentive(e, sh)))
        return dets

    def received(self, point: ChannelPoint, draw: int) -> np.ndarray:
        s_count, a = self.feats.shape[:2]
        out = np.empty((s_count, a - 1) + self.feats.shape[2:])
        for s in range(s_count):
            for k in range(a - 1):
                rng = np.random.default_rng(_seed_words(self.seed, "eval", s, k, draw))
                out[s, k] = transmit(self.feats[s, k + 1], point.link(self.distances[s, k]), rng)
        return out

    def weights(self, received: np.ndarray) -> np.ndarray:
        s_count, k = received.shape[:2]
        ego = np.repeat(self.feats[:, 0], k, axis=0)
        flat = received.reshape(s_count * k, *received.shape[2:])
        w = []
        with nn.no_grad():
            for start in range(0, len(flat), 2 * self.batch):
                sl = slice(start, start + 2 * self.batch)
                w.append(self.weighting(ego[sl], flat[sl]).data)
        return np.concatenate(w).reshape(s_count, k)

    def evaluate(self, point: ChannelPoint, mode: str) -> MetricsRecord:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "weighted" and self.weighting is None:
            raise MissingArtifact("weighted mode needs a weighting network")
        common = dict(
            snr_db=None if point.kind == "ideal" else float(point.snr_db),
            path_loss_n=point.path_loss_n,
            pilot_count=point.pilot_count if point.kind == "multipath" else None,
            mode=mode,
            channel=point.kind,
            csi=point.csi_label,
        )
        ego = self.feats[:, 0]
        if mode == "ego":
            if self._ego_cache is None:
                dets = self._detect(ego, None)
                self._ego_cache = (
                    average_precision(dets, self.gts, 0.3),
                    average_precision(dets, self.gts, 0.7),
                )
            ap3, ap7 = self._ego_cache
            return MetricsRecord(scheme=self.scheme, ap_03=ap3, ap_07=ap7, feature_mse=None, mean_weight=None, **common)

        ap3, ap7, mse, wsum = [], [], [], []
        for d in range(self.draws):
            rec = self.received(point, d)
            mse.append(float(np.mean((rec - self.feats[:, 1:]) ** 2)))
            if mode == "weighted":
                w = self.weights(rec)
                wsum.append(float(w.mean()))
                rec = rec * w[:, :, None, None, None]
            dets = self._detect(ego, rec)
            ap3.append(average_precision(dets, self.gts, 0.3))
            ap7.append(average_precision(dets, self.gts, 0.7))
        return MetricsRecord(
            scheme=3 if mode == "weighted" else self.scheme,
            ap_03=float(np.mean(ap3)),
            ap_07=float(np.mean(ap7)),
            feature_mse=float(np.mean(mse)),
            mean_weight=float(np.mean(wsum)) if wsum else None,
            **common,
        )


def axis_points(cfg: RunConfig, axis: str) -> list[ChannelPoint]:
    if axis == "snr":
        return [ChannelPoint("flat", float(s), csi_variance=cfg.csi_variance, p0=cfg.p0, rician_k=cfg.rician_k)
                for s in SNR_POINTS]
    if axis == "pathloss":
        return [ChannelPoint("flat", cfg.snr_db, path_loss_n=n, csi_variance=cfg.pathloss_csi_variance,
                             p0=cfg.p0, rician_k=cfg.rician_k) for n in PATHLOSS_POINTS]
    if axis == "pilots":
        return [ChannelPoint("multipath", cfg.snr_db, pilot_count=p) for p in PILOT_POINTS]
    raise ConfigError(f"unknown sweep axis {axis!r}")


def config_point(cfg: RunConfig) -> ChannelPoint:
    if cfg.channel == "ideal":
        return ChannelPoint("ideal")
    if cfg.channel == "multipath":
        return ChannelPoint("multipath", cfg.snr_db, pilot_count=cfg.pilot_count)
    return ChannelPoint("flat", cfg.snr_db, csi_variance=cfg.csi_variance, p0=cfg.p0, rician_k=cfg.rician_k)


def sweep(evaluator: Evaluator, points: Sequence[ChannelPoint], modes: Sequence[str]) -> list[MetricsRecord]:
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
        if m == "weighted" and evaluator.weighting is None:
            raise MissingArtifact("weighted mode requested but no weighting checkpoint")
    return [evaluator.evaluate(p, m) for p in points for m in modes]


def write_train_log(path, scheme: int, rows: Sequence[tuple]) -> None:
    """Rewrite this scheme's rows in ``train_log.csv`` and keep the others."""
    header = ("scheme", "epoch", "loss", "mean_W_pos", "mean_W_neg")
    kept = []
    path = Path(path)
    if path.exists():
        with open(path, newline="") as fh:
            kept = [r for r in csv.DictReader(fh) if int(r["scheme"]) != scheme]
    new = [
        {"scheme": str(scheme), "epoch": str(r[0]), "loss": repr(r[1]),
         "mean_W_pos": repr(r[2]) if len(r) > 2 else "", "mean_W_neg": repr(r[3]) if len(r) > 3 else ""}
        for r in rows
    ]
    allrows = sorted(kept + new, key=lambda r: (int(r["scheme"]), int(r["epoch"])))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(allrows)
