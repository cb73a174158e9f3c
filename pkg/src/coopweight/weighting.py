"""CAV-level adaptive weighting and its self-supervised training.

The weighting net looks at the ego feature map and one received feature map
side by side and outputs a single scalar in (0, 1) that scales the whole
received map before fusion. It is trained without detection labels: a clean
shared feature is pushed through a mild (30 dB) and a severe (-10 dB)
simulated Rician link, and the weighted versions are pulled toward the clean
feature distribution under a KL objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .channel import FlatChannelConfig
from .nn import ConvBlock, Dense, ParamStore, Tensor
from .transport import transmit

log = logging.getLogger(__name__)


class FreezeViolation(RuntimeError):
    """The frozen backbone changed during weighting training."""


class WeightingNet:
    """4 x (conv-bn-relu) over [ego, received] -> dense-relu -> dense(2) -> softmax.

    ``W`` is the probability of class 1 ("positive impact").
    """

    def __init__(self, channels: int = 8, spatial: int = 16, width: int = 16, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.store = ParamStore()
        s = self.store
        self.channels = channels
        self.blocks = [
            ConvBlock(s, "w.0", 2 * channels, width, 1, rng),
            ConvBlock(s, "w.1", width, width, 2, rng),
            ConvBlock(s, "w.2", width, width, 2, rng),
            ConvBlock(s, "w.3", width, width, 1, rng),
        ]
        flat = width * (spatial // 4) ** 2
        self.fc = Dense(s, "w.fc", flat, hidden, rng)
        self.out = Dense(s, "w.out", hidden, 2, rng)
        self.out.w.data *= 0.1
        self.training = False

    def logits(self, f_ego, f_hat) -> Tensor:
        f_ego = f_ego if isinstance(f_ego, Tensor) else Tensor(f_ego)
        f_hat = f_hat if isinstance(f_hat, Tensor) else Tensor(f_hat)
        if f_ego.shape != f_hat.shape:
            raise ValueError(f"weighting: ego shape {f_ego.shape} vs received {f_hat.shape}")
        x = nn.concat([f_ego, f_hat], axis=1)
        for block in self.blocks:
            x = block(x, self.training)
        x = x.reshape(x.shape[0], -1)
        return self.out(nn.relu(self.fc(x)))

    def __call__(self, f_ego, f_hat) -> Tensor:
        """Batched (N, C, H, W) pairs -> (N,) weights."""
        return nn.softmax(self.logits(f_ego, f_hat), axis=1)[:, 1]


def weight_forward(f_ego, f_hat, net: WeightingNet):
    """W for one pair of (C, H, W) maps (float) or a batch (array)."""
    f_ego = np.asarray(f_ego.data if isinstance(f_ego, Tensor) else f_ego)
    f_hat = np.asarray(f_hat.data if isinstance(f_hat, Tensor) else f_hat)
    if f_ego.shape != f_hat.shape:
        raise ValueError(f"weight_forward: ego shape {f_ego.shape} vs received {f_hat.shape}")
    single = f_ego.ndim == 3
    if single:
        f_ego, f_hat = f_ego[None], f_hat[None]
    with nn.no_grad():
        w = net(f_ego, f_hat).data
    return float(w[0]) if single else w


def apply_weight(w, f_hat):
    """Scale each received map by its scalar weight (broadcast over C, H, W)."""
    if isinstance(f_hat, Tensor):
        if isinstance(w, Tensor) and w.ndim == 1:
            w = w.reshape(w.shape[0], *([1] * (f_hat.ndim - 1)))
        return f_hat * w
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(-1, *([1] * (np.ndim(f_hat) - 1)))
    return w * np.asarray(f_hat)


@dataclass
class AugmentationPair:
    positive: np.ndarray
    negative: np.ndarray
    clean: np.ndarray


@dataclass(frozen=True)
class SelfSupervisedParams:
    lambda_pos: float = 1.0
    lambda_neg: float = 1e-4
    snr_pos_db: float = 30.0
    snr_neg_db: float = -10.0
    rician_k: float = 1.0
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16

    def __post_init__(self):
        if self.lambda_pos < 0 or self.lambda_neg < 0:
            raise ValueError("lambdas must be >= 0")


def make_augmentations(f, rng: np.random.Generator, params: SelfSupervisedParams = SelfSupervisedParams()) -> AugmentationPair:
    """Pass each (C, H, W) map through the flat Rician link at the two SNRs.

    Leading axes are treated as independent maps, each with its own channel
    draw. Perfect CSI, unit distance.
    """
    f = np.asarray(f, dtype=np.float64)
    maps = f.reshape(-1, *f.shape[-3:])
    pos_link = FlatChannelConfig(rician_k=params.rician_k, snr_db=params.snr_pos_db)
    neg_link = FlatChannelConfig(rician_k=params.rician_k, snr_db=params.snr_neg_db)
    pos = np.stack([transmit(m, pos_link, rng) for m in maps])
    neg = np.stack([transmit(m, neg_link, rng) for m in maps])
    return AugmentationPair(pos.reshape(f.shape), neg.reshape(f.shape), f.copy())


def _as_batched(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 4 else x


def self_supervised_loss(
    f_ego,
    pair: AugmentationPair,
    net: WeightingNet,
    params: SelfSupervisedParams = SelfSupervisedParams(),
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """(lambda_pos * sum_k KL[S(W+ f+) || S(f)] + lambda_neg * sum_k KL[S(W- f-) || S(f)]) / K.

    ``f_ego`` is (B, C, H, W) or (C, H, W); the pair arrays are (B, K, C, H, W)
    or (K, C, H, W). S is a softmax over each flattened map. The loss is
    averaged over the B scenes. Returns the loss plus the W+ and W- values.
    """
    f_ego = np.asarray(f_ego, dtype=np.float64)
    if f_ego.ndim == 3:
        f_ego = f_ego[None]
    clean, pos, neg = (_as_batched(a) for a in (pair.clean, pair.positive, pair.negative))
    b, k = clean.shape[:2]
    chw = clean.shape[2:]
    n = b * k
    ego = np.repeat(f_ego, k, axis=0)
    w = net(np.concatenate([ego, ego]), np.concatenate([pos.reshape(n, *chw), neg.reshape(n, *chw)]))
    w_pos, w_neg = w[:n], w[n:]

    q = Tensor(nn._softmax_np(clean.reshape(n, -1), axis=1))

    def branch(weight: Tensor, feats: np.ndarray) -> Tensor:
        scaled = weight.reshape(n, 1) * Tensor(feats.reshape(n, -1))
        return nn.kl_divergence(nn.softmax(scaled, axis=1), q, axis=1).sum()

    loss = (branch(w_pos, pos) * params.lambda_pos + branch(w_neg, neg) * params.lambda_neg) * (1.0 / (k * b))
    return loss, w_pos.data.copy(), w_neg.data.copy()


def train_weighting(
    backbone,
    rasters: np.ndarray,
    params: SelfSupervisedParams,
    rng: np.random.Generator,
    net: WeightingNet | None = None,
    on_epoch=None,
) -> WeightingNet:
    """Fit the weighting net on shared features of a frozen backbone.

    ``rasters`` is (S, 1 + K, H, W), ego first; no labels are used. The
    backbone runs in eval mode with gradients off and its parameter checksum
    is verified afterwards. ``on_epoch(epoch, loss, mean_w_pos, mean_w_neg)``
    receives the per-epoch log.
    """
    before = backbone.store.checksum()
    backbone.training = False
    feats = extract_features(backbone, rasters)
    s_count = feats.shape[0]
    net = net or WeightingNet(seed=int(rng.integers(2**31)))
    net.training = True

    steps_per_epoch = int(np.ceil(s_count / params.batch_size))
    total = max(params.epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(params.epochs):
        order = rng.permutation(s_count)
        losses, wp, wn = [], [], []
        for start in range(0, s_count, params.batch_size):
            idx = order[start : start + params.batch_size]
            f_ego = feats[idx, 0]
            pair = make_augmentations(feats[idx, 1:], rng, params)
            loss, w_pos, w_neg = self_supervised_loss(f_ego, pair, net, params)
            loss.backward()
            nn.adam_step(net.store, step_lr(params.lr, step, total), weight_decay=params.weight_decay)
            step += 1
            losses.append(float(loss.data))
            wp.append(w_pos.mean())
            wn.append(w_neg.mean())
        row = (epoch, float(np.mean(losses)), float(np.mean(wp)), float(np.mean(wn)))
        log.info("weighting epoch %d loss %.6g W+ %.3f W- %.3f", *row)
        if on_epoch:
            on_epoch(*row)
    net.training = False
    if backbone.store.checksum() != before:
        raise FreezeViolation("backbone parameters changed during weighting training")
    return net


def extract_features(backbone, rasters: np.ndarray, batch: int = 32) -> np.ndarray:
    """(S, A, H, W) rasters -> (S, A, C, h, w) eval-mode features."""
    s_count, a = rasters.shape[:2]
    out = []
    with nn.no_grad():
        for start in range(0, s_count, batch):
            r = np.asarray(rasters[start : start + batch], dtype=np.float64)
            f = backbone.encode(r.reshape(-1, *r.shape[2:])).data
            out.append(f.reshape(r.shape[0], a, *f.shape[1:]))
    return np.concatenate(out)


def step_lr(lr: float, step: int, total: int) -> float:
    """Halve the learning rate after each third of training."""
    return lr * 0.5 ** min(int(3 * step / total), 2)
