"""Dual-headed audio-visual localization model with static or combined dynamic fusion.

Small 3D/2D conv encoders produce per-cell visual features and per-step audio
features; their pixel-wise similarities form one score grid that both heads
read: per-cell sigmoid + global max pooling for the correspondence (MIL)
head, and global softmax attention over a classification feature grid for
the event head. Everything is composed from the tensor module's ops, so the
whole forward pass is gradient-checkable.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .metrics import Heatmap
from .synth import make_negative_pair


class ConfigError(ValueError):
    pass


FUSIONS = ("static", "cdf")
MODES = ("avc", "cls", "dnm")


@dataclass
class ModelConfig:
    grid_w: int = 6
    grid_h: int = 6
    time_steps: int = 4
    feature_dim: int = 16
    cls_feature_dim: int = 8
    num_categories: int = 4
    visual_channels: int = 6
    audio_channels: int = 8
    visual_kernel: int = 3
    audio_kernel: int = 3
    frames_per_clip: int = 8
    frame_height: int = 24
    frame_width: int = 24
    mel_bins: int = 16
    audio_steps: int = 8
    fusion: str = "cdf"
    mode: str = "dnm"

    def __post_init__(self):
        for name in ("grid_w", "grid_h", "time_steps", "feature_dim", "cls_feature_dim",
                     "num_categories", "visual_channels", "audio_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.visual_kernel % 2 == 0 or self.audio_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if self.frames_per_clip % self.time_steps or self.audio_steps % self.time_steps:
            raise ConfigError("time_steps must divide frames_per_clip and audio_steps")
        if self.frame_height % self.grid_h or self.frame_width % self.grid_w:
            raise ConfigError("grid must divide the frame size")

    @property
    def cells(self) -> int:
        return self.grid_w * self.grid_h

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass
class ModelOutput:
    """Forward results; every field is a Tensor in the live graph."""
    similarity: T.Tensor        # score per cell, both heads read this
    m_static: T.Tensor
    m_dynamic: T.Tensor | None  # None in static fusion
    m_loc: T.Tensor             # sigmoid per cell
    z_avc: T.Tensor             # global max of m_loc
    w_att: T.Tensor             # softmax over cells
    v_att: T.Tensor
    class_logits: T.Tensor


class DnmModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self._params: list[T.Parameter] = []

        cfg = config
        kv, ka = cfg.visual_kernel, cfg.audio_kernel
        self.v_conv1_w = self._weight(rng, "v_conv1_w",
                                      (cfg.visual_channels, 1, kv, kv, kv), kv ** 3)
        self.v_conv1_b = self._zeros("v_conv1_b", (cfg.visual_channels,))
        self.v_conv2_w = self._weight(rng, "v_conv2_w",
                                      (cfg.feature_dim, cfg.visual_channels, kv, kv, kv),
                                      cfg.visual_channels * kv ** 3)
        self.v_conv2_b = self._zeros("v_conv2_b", (cfg.feature_dim,))
        # pointwise classification branch off the first visual layer; keeping
        # it off the localization features avoids the classification gradient
        # reshaping the similarity pathway's encoder
        self.cls_conv_w = self._weight(rng, "cls_conv_w",
                                       (cfg.cls_feature_dim, cfg.visual_channels, 1, 1, 1),
                                       cfg.visual_channels)
        self.cls_conv_b = self._zeros("cls_conv_b", (cfg.cls_feature_dim,))

        self.a_conv1_w = self._weight(rng, "a_conv1_w",
                                      (cfg.audio_channels, 1, ka, ka), ka * ka)
        self.a_conv1_b = self._zeros("a_conv1_b", (cfg.audio_channels,))
        self.a_conv2_w = self._weight(rng, "a_conv2_w",
                                      (cfg.feature_dim, cfg.audio_channels, ka, ka),
                                      cfg.audio_channels * ka * ka)
        self.a_conv2_b = self._zeros("a_conv2_b", (cfg.feature_dim,))

        self.fc_w = self._weight(rng, "fc_w", (cfg.cls_feature_dim, cfg.num_categories),
                                 cfg.cls_feature_dim)
        self.fc_b = self._zeros("fc_b", (cfg.num_categories,))

        if cfg.fusion == "cdf":
            d = cfg.feature_dim
            for gate in ("update", "reset", "cand"):
                setattr(self, f"cgru_{gate}_w",
                        self._weight(rng, f"cgru_{gate}_w", (d, 2 * d, 3, 3), 2 * d * 9))
                setattr(self, f"cgru_{gate}_b", self._zeros(f"cgru_{gate}_b", (d,)))
                setattr(self, f"gru_{gate}_w",
                        self._weight(rng, f"gru_{gate}_w", (d, 2 * d), 2 * d))
                setattr(self, f"gru_{gate}_b", self._zeros(f"gru_{gate}_b", (d,)))

    def _weight(self, rng, name, shape, fan_in):
        # uniform in +-4/sqrt(fan_in), seeded.  The gain is deliberately large:
        # with low-intensity inputs and shallow encoders a conventional
        # 1/sqrt(fan_in) init leaves the similarity maps at ~1e-3 scale, and
        # their elementwise product at ~1e-6, so the correspondence gradient is
        # negligible next to the classification term and the product fusion
        # never escapes its cold start.
        bound = 4.0 / np.sqrt(fan_in)
        p = T.Parameter(name, rng.uniform(-bound, bound, size=shape))
        self._params.append(p)
        return p

    def _zeros(self, name, shape):
        p = T.Parameter(name, np.zeros(shape))
        self._params.append(p)
        return p

    def parameters(self) -> list[T.Parameter]:
        return list(self._params)

    def classification_parameters(self) -> list[T.Parameter]:
        names = {"cls_conv_w", "cls_conv_b", "fc_w", "fc_b"}
        return [p for p in self._params if p.name in names]

    # ------------------------------------------------------------------
    # encoders

    def encode_visual(self, clip: np.ndarray):
        """clip: (frames, H, W, 1) in [0, 1] -> (v_seq, v_cls).

        v_seq: (T, D, grid_h, grid_w) preserving time; v_cls: (cells, D')
        time-pooled output of the classification branch.
        """
        cfg = self.config
        expected = (cfg.frames_per_clip, cfg.frame_height, cfg.frame_width, 1)
        if clip.shape != expected:
            raise T.ShapeError(f"clip shape {clip.shape} != {expected}")
        x = T.Tensor(np.transpose(clip, (3, 0, 1, 2)))  # (1, frames, H, W)
        h1 = T.tanh(T.conv3d(x, self.v_conv1_w.tensor, self.v_conv1_b.tensor))
        h2 = T.tanh(T.conv3d(h1, self.v_conv2_w.tensor, self.v_conv2_b.tensor))
        tpool = cfg.frames_per_clip // cfg.time_steps
        sy = cfg.frame_height // cfg.grid_h
        sx = cfg.frame_width // cfg.grid_w
        v4 = T.avg_pool(h2, (1, tpool, sy, sx))          # (D, T, gh, gw)
        v_seq = T.transpose(v4, (1, 0, 2, 3))            # (T, D, gh, gw)

        c1 = T.tanh(T.conv3d(h1, self.cls_conv_w.tensor, self.cls_conv_b.tensor))
        c2 = T.avg_pool(c1, (1, cfg.frames_per_clip, sy, sx))   # (D', 1, gh, gw)
        v_cls = T.transpose(T.reshape(c2, (cfg.cls_feature_dim, cfg.cells)), (1, 0))
        return v_seq, v_cls

    def encode_audio(self, logmel: np.ndarray):
        """logmel: (mel_bins, audio_steps) -> (T, D), temporal dimension preserved."""
        cfg = self.config
        expected = (cfg.mel_bins, cfg.audio_steps)
        if logmel.shape != expected:
            raise T.ShapeError(f"logmel shape {logmel.shape} != {expected}")
        x = T.Tensor(logmel[None])                       # (1, mel, steps)
        h1 = T.tanh(T.conv2d(x, self.a_conv1_w.tensor, self.a_conv1_b.tensor))
        h2 = T.tanh(T.conv2d(h1, self.a_conv2_w.tensor, self.a_conv2_b.tensor))
        pooled = T.mean(h2, axis=1)                      # (D, steps)
        spool = cfg.audio_steps // cfg.time_steps
        return T.transpose(T.avg_pool(pooled, (1, spool)), (1, 0))

    # ------------------------------------------------------------------
    # fusion

    def static_fusion(self, v_seq, a):
        """Time average of the per-cell dot product between v_t and a_t."""
        cfg = self.config
        acc = None
        for t in range(cfg.time_steps):
            vt = T.transpose(T.reshape(T.take(v_seq, t), (cfg.feature_dim, cfg.cells)), (1, 0))
            d = T.dot_along_channel(vt, T.take(a, t))
            acc = d if acc is None else acc + d
        return (1.0 / cfg.time_steps) * acc

    def _conv_gru_cell(self, x, h):
        xh = T.concat([x, h], axis=0)
        z = T.sigmoid(T.conv2d(xh, self.cgru_update_w.tensor, self.cgru_update_b.tensor))
        r = T.sigmoid(T.conv2d(xh, self.cgru_reset_w.tensor, self.cgru_reset_b.tensor))
        n = T.tanh(T.conv2d(T.concat([x, r * h], axis=0),
                            self.cgru_cand_w.tensor, self.cgru_cand_b.tensor))
        return (1.0 - z) * h + z * n

    def _gru_cell(self, x, h):
        xh = T.concat([x, h], axis=0)
        z = T.sigmoid(T.matmul(self.gru_update_w.tensor, xh) + self.gru_update_b.tensor)
        r = T.sigmoid(T.matmul(self.gru_reset_w.tensor, xh) + self.gru_reset_b.tensor)
        n = T.tanh(T.matmul(self.gru_cand_w.tensor, T.concat([x, r * h], axis=0))
                   + self.gru_cand_b.tensor)
        return (1.0 - z) * h + z * n

    def dynamic_fusion(self, v_seq, a):
        """Per-cell dot product of the final recurrent states of both modalities."""
        cfg = self.config
        hv = T.Tensor(np.zeros((cfg.feature_dim, cfg.grid_h, cfg.grid_w)))
        ha = T.Tensor(np.zeros(cfg.feature_dim))
        for t in range(cfg.time_steps):
            hv = self._conv_gru_cell(T.take(v_seq, t), hv)
            ha = self._gru_cell(T.take(a, t), ha)
        v_final = T.transpose(T.reshape(hv, (cfg.feature_dim, cfg.cells)), (1, 0))
        return T.dot_along_channel(v_final, ha)

    @staticmethod
    def cdf(m_static, m_dynamic):
        return m_static * m_dynamic

    # ------------------------------------------------------------------
    # heads

    @staticmethod
    def local_normalize(similarity):
        m_loc = T.sigmoid(similarity)
        return m_loc, T.max_global(m_loc)

    def global_attend(self, similarity, v_cls):
        w_att = T.softmax(similarity, axis=0)
        v_att = T.matmul(w_att, v_cls)
        logits = T.matmul(v_att, self.fc_w.tensor) + self.fc_b.tensor
        return w_att, v_att, logits

    def forward(self, clip: np.ndarray, logmel: np.ndarray) -> ModelOutput:
        v_seq, v_cls = self.encode_visual(clip)
        a = self.encode_audio(logmel)
        m_static = self.static_fusion(v_seq, a)
        m_dynamic = None
        if self.config.fusion == "cdf":
            m_dynamic = self.dynamic_fusion(v_seq, a)
            similarity = self.cdf(m_static, m_dynamic)
        else:
            similarity = m_static
        m_loc, z_avc = self.local_normalize(similarity)
        w_att, v_att, logits = self.global_attend(similarity, v_cls)
        return ModelOutput(similarity=similarity, m_static=m_static, m_dynamic=m_dynamic,
                           m_loc=m_loc, z_avc=z_avc, w_att=w_att, v_att=v_att,
                           class_logits=logits)

    def localization_heatmap(self, output: ModelOutput) -> Heatmap:
        """M_loc for correspondence-trained heads, attention weights for cls-only."""
        source = output.w_att if self.config.mode == "cls" else output.m_loc
        cfg = self.config
        return Heatmap(source.data.reshape(cfg.grid_h, cfg.grid_w).copy())


def multitask_loss(output: ModelOutput, avc_label: int, class_label=None) -> T.Tensor:
    """BCE on the correspondence score plus, for positives only, per-class BCE.

    The classification term is omitted entirely for negatives, so its
    parameters receive exactly zero gradient when avc_label is 0.
    """
    if avc_label not in (0, 1):
        raise ValueError(f"avc_label must be 0 or 1, got {avc_label}")
    avc_term = T.bce_loss(output.z_avc, np.float64(avc_label))
    if avc_label == 0:
        return avc_term
    if class_label is None:
        raise ValueError("class_label required for a positive pair")
    return avc_term + T.bce_loss(T.sigmoid(output.class_logits), class_label)


def classification_loss(output: ModelOutput, class_label) -> T.Tensor:
    return T.bce_loss(T.sigmoid(output.class_logits), class_label)


def label_vector(labels, num_categories) -> np.ndarray:
    vec = np.zeros(num_categories)
    for k in labels:
        vec[k] = 1.0
    return vec


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: DnmModel
    log: list = field(default_factory=list)
    best_epoch: int | None = None


def _epoch_pairs(clips, rng, mode):
    """Shuffled positives, each followed by one freshly drawn negative (1:1)."""
    order = rng.permutation(len(clips))
    pairs = []
    for idx in order:
        clip = clips[int(idx)]
        pairs.append(clip)
        if mode != "cls":  # classification-only training never sees negatives
            pairs.append(make_negative_pair(clip, clips, rng))
    return pairs


def _sample_loss(model, clip, num_categories):
    out = model.forward(clip.video, clip.logmel)
    avc_label = int(clip.avc_positive)
    mode = model.config.mode
    if mode == "avc":
        loss = T.bce_loss(out.z_avc, np.float64(avc_label))
    elif mode == "cls":
        loss = classification_loss(out, label_vector(clip.labels, num_categories))
    else:
        loss = multitask_loss(out, avc_label,
                              label_vector(clip.labels, num_categories))
    return out, loss


def _accuracy(model, clips, rng, num_categories):
    """(avc accuracy over pos+neg pairs, cls accuracy over positives)."""
    avc_hits = avc_total = 0
    cls_hits = cls_total = 0
    for clip in clips:
        for sample in (clip, make_negative_pair(clip, clips, rng)):
            out = model.forward(sample.video, sample.logmel)
            pred = out.z_avc.item() > 0.5
            avc_hits += int(pred == sample.avc_positive)
            avc_total += 1
            if sample.avc_positive and sample.labels:
                cls_hits += int(int(np.argmax(out.class_logits.data)) in sample.labels)
                cls_total += 1
    return avc_hits / max(1, avc_total), cls_hits / max(1, cls_total)


def train(model: DnmModel, train_clips, epochs: int, seed: int, lr: float = 2e-3,
          val_clips=None, select_best: bool = True) -> TrainResult:
    """Seeded training loop: fresh negatives each epoch, Adam updates.

    With a validation split, the parameters achieving the best validation
    accuracy are restored at the end: correspondence accuracy in avc-only
    mode, classification accuracy in cls-only mode, and the mean of the two
    when both heads are trained (correspondence accuracy alone saturates
    within a few epochs and its noise would then pick a snapshot before the
    classification head has converged). Fully deterministic per seed.
    """
    if len(train_clips) < 2:
        raise ValueError("need at least two clips to form negative pairs")
    num_categories = model.config.num_categories
    result = TrainResult(model=model)
    best_score = -1.0
    best_state = None

    for epoch in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
        losses = []
        for clip in _epoch_pairs(train_clips, rng, model.config.mode):
            _, loss = _sample_loss(model, clip, num_categories)
            T.backward(loss)
            T.adam_step(model.parameters(), lr=lr)
            losses.append(loss.item())

        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_clips:
            val_rng = np.random.default_rng(np.random.SeedSequence((seed, epoch, 1)))
            avc_acc, cls_acc = _accuracy(model, val_clips, val_rng, num_categories)
            record["val_avc_accuracy"] = avc_acc
            record["val_cls_accuracy"] = cls_acc
            if model.config.mode == "cls":
                score = cls_acc
            elif model.config.mode == "avc":
                score = avc_acc
            else:
                score = 0.5 * (avc_acc + cls_acc)
            if select_best and score > best_score:
                best_score = score
                best_state = [p.data.copy() for p in model.parameters()]
                result.best_epoch = epoch
        result.log.append(record)

    if best_state is not None:
        for p, data in zip(model.parameters(), best_state):
            p.tensor.data = data
    return result


def predict_heatmaps(model: DnmModel, clips) -> dict:
    """One localization heatmap per annotated frame, shared within each clip."""
    out = {}
    for clip in clips:
        hm = model.localization_heatmap(model.forward(clip.video, clip.logmel))
        for frame in clip.frames:
            out[(frame.video_id, frame.frame_index)] = hm
    return out
