"""The incremental classification network.

A feature extractor (patch embedding, a stack of multi-head self-attention
blocks, then task-semantic aggregation blocks driven by a learnable
task-shared embedding) feeds a growable linear classifier. The aggregation
head cross-attends a single query embedding onto the patch sequence, so the
extracted feature has a fixed width regardless of patch count.

Batches are processed as one row-stacked matrix per layer; a fused attention
primitive keeps the quadratic score computation sample-local. Parameter
tensors are float64 and live on the autodiff graph; frozen snapshots hold
detached copies only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 16
    channels: int = 1
    patch_side: int = 4
    embed_dim: int = 32
    heads: int = 4
    msa_blocks: int = 2
    tsa_blocks: int = 1
    mlp_ratio: int = 4
    classifier_input: str = "feature"  # "feature" | "feature_cls"

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}"
            )
        if self.image_side % self.patch_side != 0:
            raise ValueError(
                f"image_side {self.image_side} must be divisible by patch_side {self.patch_side}"
            )
        if self.classifier_input not in ("feature", "feature_cls"):
            raise ValueError(f"unknown classifier_input {self.classifier_input!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side**2

    @property
    def classifier_width(self) -> int:
        return self.embed_dim * (2 if self.classifier_input == "feature_cls" else 1)


def _weight(rng: np.random.Generator, shape) -> Tensor:
    return ad.parameter(rng.normal(0.0, INIT_STD, size=shape))


def _projection(rng: np.random.Generator, shape) -> Tensor:
    """Fan-in-scaled init so matrix products preserve activation scale.

    A fixed small std starves the aggregation head (no residual carries the
    input signal around it), collapsing class separation at init.
    """
    return ad.parameter(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape))


def _zeros(shape) -> Tensor:
    return ad.parameter(np.zeros(shape))


def _ones(shape) -> Tensor:
    return ad.parameter(np.ones(shape))


class Mlp:
    """Two affine maps with a gelu in between; hidden width = ratio * dim."""

    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        hidden = dim * ratio
        self.w1 = _projection(rng, (dim, hidden))
        self.b1 = _zeros(hidden)
        self.w2 = _projection(rng, (hidden, dim))
        self.b2 = _zeros(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, self.w1), self.b1)), self.w2), self.b2)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


class SelfAttentionBlock:
    """Pre-normed multi-head self-attention with a residual MLP tail.

    The query/key/value projections are stored as full width-by-width
    matrices and split per head along columns at forward time. Attention
    probabilities are recorded (diagnostics) only on single-sample calls.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.cfg = cfg
        self.norm1_gain, self.norm1_bias = _ones(d), _zeros(d)
        self.w_q = _projection(rng, (d, d))
        self.w_k = _projection(rng, (d, d))
        self.w_v = _projection(rng, (d, d))
        self.w_o = _projection(rng, (d, d))
        self.norm2_gain, self.norm2_bias = _ones(d), _zeros(d)
        self.mlp = Mlp(d, cfg.mlp_ratio, rng)
        self.last_attention: list[np.ndarray] = []

    def __call__(self, z: Tensor) -> Tensor:
        return self.forward_rows(z, batch=1)

    def forward_rows(self, z: Tensor, batch: int) -> Tensor:
        """z holds `batch` samples stacked as consecutive row blocks."""
        cfg = self.cfg
        head_sizes = [cfg.head_dim] * cfg.heads
        zn = ad.layer_norm(z, self.norm1_gain, self.norm1_bias)
        scaled_q = ad.scale(ad.matmul(zn, self.w_q), 1.0 / math.sqrt(cfg.head_dim))
        q_heads = ad.split(scaled_q, head_sizes, axis=1)
        k_heads = ad.split(ad.matmul(zn, self.w_k), head_sizes, axis=1)
        v_heads = ad.split(ad.matmul(zn, self.w_v), head_sizes, axis=1)
        outs = []
        if batch == 1:
            self.last_attention = []
        for q, k, v in zip(q_heads, k_heads, v_heads):
            attended_head, probs = ad.attention(q, k, v, batch)
            if batch == 1:
                self.last_attention.append(probs[0])
            outs.append(attended_head)
        attended = ad.add(z, ad.matmul(ad.concat(outs, axis=1), self.w_o))
        normed = ad.layer_norm(attended, self.norm2_gain, self.norm2_bias)
        return ad.add(attended, self.mlp(normed))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {
            f"{prefix}.norm1_gain": self.norm1_gain, f"{prefix}.norm1_bias": self.norm1_bias,
            f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v, f"{prefix}.w_o": self.w_o,
            f"{prefix}.norm2_gain": self.norm2_gain, f"{prefix}.norm2_bias": self.norm2_bias,
        }
        params.update(self.mlp.parameters(f"{prefix}.mlp"))
        return params


class AggregationBlock:
    """Cross-attention from one query embedding onto the patch sequence.

    Output is the projected head concat plus an MLP term; deliberately no
    residual from the incoming query embedding.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.cfg = cfg
        self.normq_gain, self.normq_bias = _ones(d), _zeros(d)
        self.normz_gain, self.normz_bias = _ones(d), _zeros(d)
        self.v_q = _projection(rng, (d, d))
        self.v_k = _projection(rng, (d, d))
        self.v_v = _projection(rng, (d, d))
        self.v_o = _projection(rng, (d, d))
        self.norm2_gain, self.norm2_bias = _ones(d), _zeros(d)
        self.mlp = Mlp(d, cfg.mlp_ratio, rng)
        self.last_attention: list[np.ndarray] = []

    def __call__(self, e: Tensor, z: Tensor) -> Tensor:
        return self.forward_rows(e, z, batch=1)

    def forward_rows(self, e: Tensor, z: Tensor, batch: int) -> Tensor:
        """e holds one query row per sample; z the stacked patch rows."""
        cfg = self.cfg
        head_sizes = [cfg.head_dim] * cfg.heads
        en = ad.layer_norm(e, self.normq_gain, self.normq_bias)
        zn = ad.layer_norm(z, self.normz_gain, self.normz_bias)
        scaled_q = ad.scale(ad.matmul(en, self.v_q), 1.0 / math.sqrt(cfg.head_dim))
        q_heads = ad.split(scaled_q, head_sizes, axis=1)
        k_heads = ad.split(ad.matmul(zn, self.v_k), head_sizes, axis=1)
        v_heads = ad.split(ad.matmul(zn, self.v_v), head_sizes, axis=1)
        outs = []
        if batch == 1:
            self.last_attention = []
        for q, k, v in zip(q_heads, k_heads, v_heads):
            attended_head, probs = ad.attention(q, k, v, batch)
            if batch == 1:
                self.last_attention.append(probs[0])
            outs.append(attended_head)
        aggregated = ad.matmul(ad.concat(outs, axis=1), self.v_o)
        normed = ad.layer_norm(aggregated, self.norm2_gain, self.norm2_bias)
        return ad.add(aggregated, self.mlp(normed))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        params = {
            f"{prefix}.normq_gain": self.normq_gain, f"{prefix}.normq_bias": self.normq_bias,
            f"{prefix}.normz_gain": self.normz_gain, f"{prefix}.normz_bias": self.normz_bias,
            f"{prefix}.v_q": self.v_q, f"{prefix}.v_k": self.v_k,
            f"{prefix}.v_v": self.v_v, f"{prefix}.v_o": self.v_o,
            f"{prefix}.norm2_gain": self.norm2_gain, f"{prefix}.norm2_bias": self.norm2_bias,
        }
        params.update(self.mlp.parameters(f"{prefix}.mlp"))
        return params


def image_to_patches(image: np.ndarray, patch_side: int) -> np.ndarray:
    """Raster-order non-overlapping patches, each flattened channel-first."""
    c, s, s2 = image.shape
    if s != s2 or s % patch_side != 0:
        raise ValueError(f"image shape {image.shape} incompatible with patch side {patch_side}")
    n_side = s // patch_side
    x = image.reshape(c, n_side, patch_side, n_side, patch_side)
    x = x.transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(x.reshape(n_side * n_side, c * patch_side**2))


class IncrementalModel:
    """Feature extractor plus a classifier that grows one block of rows per task.

    The class token is appended as the last row of the embedded sequence; the
    classifier consumes the aggregated task-shared feature (optionally
    concatenated with the class-token row, per config).
    """

    def __init__(self, cfg: ModelConfig, n_classes: int, rng: np.random.Generator):
        if n_classes < 1:
            raise ValueError("model needs at least one class")
        self.cfg = cfg
        self.n_classes = n_classes
        d = cfg.embed_dim
        self.patch_proj = _projection(rng, (cfg.patch_dim, d))
        self.patch_bias = _zeros(d)
        self.cls_token = _weight(rng, (1, d))
        self.pos_token = _weight(rng, (cfg.n_patches + 1, d))
        self.msa = [SelfAttentionBlock(cfg, rng) for _ in range(cfg.msa_blocks)]
        self.tsa = [AggregationBlock(cfg, rng) for _ in range(cfg.tsa_blocks)]
        self.task_embedding = _weight(rng, (1, d))
        self.cls_weight = _weight(rng, (n_classes, cfg.classifier_width))
        self.cls_bias = _zeros(n_classes)
        self.frozen = False

    # -- forward ------------------------------------------------------------

    def embed(self, image: np.ndarray) -> Tensor:
        if image.shape != (self.cfg.channels, self.cfg.image_side, self.cfg.image_side):
            raise ValueError(
                f"image shape {image.shape} does not match config "
                f"({self.cfg.channels}, {self.cfg.image_side}, {self.cfg.image_side})"
            )
        return self._embed_batch(image[np.newaxis])

    def _embed_batch(self, images: np.ndarray) -> Tensor:
        """(b, C, S, S) -> (b*(N+1), D) with each sample's class token last."""
        b = len(images)
        n = self.cfg.n_patches
        patches = ad.constant(np.concatenate(
            [image_to_patches(img, self.cfg.patch_side) for img in images]))
        z_e = ad.add(ad.matmul(patches, self.patch_proj), self.patch_bias)
        if b == 1:
            stacked = ad.concat([z_e, self.cls_token], axis=0)
            return ad.add(stacked, self.pos_token)
        chunks = ad.split(z_e, [n] * b, axis=0)
        stacked = ad.concat(
            [part for chunk in chunks for part in (chunk, self.cls_token)], axis=0)
        return ad.add(stacked, ad.tile_rows(self.pos_token, b))

    def forward(self, image: np.ndarray) -> tuple[Tensor, Tensor]:
        """One image -> (logits row of width n_classes, aggregated feature row)."""
        return self.forward_batch(image[np.newaxis])

    def forward_batch(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        """(b, C, S, S) -> (b, n_classes) logits and (b, embed_dim) features."""
        b = len(images)
        expected = (self.cfg.channels, self.cfg.image_side, self.cfg.image_side)
        if images.shape[1:] != expected:
            raise ValueError(f"image shape {images.shape[1:]} does not match config {expected}")
        z = self._embed_batch(images)
        for block in self.msa:
            z = block.forward_rows(z, b)
        e = self.task_embedding if b == 1 else ad.tile_rows(self.task_embedding, b)
        for block in self.tsa:
            e = block.forward_rows(e, z, b)
        if self.cfg.classifier_input == "feature_cls":
            rows = self.cfg.n_patches + 1
            parts = ad.split(z, [rows] * b, axis=0) if b > 1 else [z]
            cls_rows = [ad.split(part, [rows - 1, 1], axis=0)[1] for part in parts]
            cls_stack = cls_rows[0] if b == 1 else ad.concat(cls_rows, axis=0)
            head_in = ad.concat([e, cls_stack], axis=1)
        else:
            head_in = e
        # broadcast-multiply instead of a GEMM: each logit reduces over its own
        # weight row only, so old-class logits are bit-identical across
        # classifier expansions (a GEMM's blocking depends on the row count)
        width = self.cfg.classifier_width
        prod = ad.mul(ad.reshape(head_in, (b, 1, width)), self.cls_weight)
        logits = ad.add(ad.sum_(prod, axis=2), self.cls_bias)
        return logits, e

    def predict(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Detached (softmax probabilities, feature) for one image."""
        logits, feature = self.forward(image)
        return ad.softmax(logits, axis=1).data[0], feature.data[0]

    # -- parameters ----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {
            "patch_proj": self.patch_proj,
            "patch_bias": self.patch_bias,
            "cls_token": self.cls_token,
            "pos_token": self.pos_token,
            "task_embedding": self.task_embedding,
            "classifier.weight": self.cls_weight,
            "classifier.bias": self.cls_bias,
        }
        for i, block in enumerate(self.msa):
            params.update(block.parameters(f"msa{i}"))
        for i, block in enumerate(self.tsa):
            params.update(block.parameters(f"tsa{i}"))
        return params

    # -- task lifecycle -------------------------------------------------------

    def expand_classifier(self, k_new: int, rng: np.random.Generator) -> None:
        """Append k_new output rows; existing rows and biases are copied bit-identically."""
        if self.frozen:
            raise RuntimeError("cannot expand a frozen snapshot")
        if k_new < 1:
            raise ValueError("expansion must add at least one class")
        new_rows = rng.normal(0.0, INIT_STD, size=(k_new, self.cfg.classifier_width))
        self.cls_weight = ad.parameter(np.vstack([self.cls_weight.data, new_rows]))
        self.cls_bias = ad.parameter(np.concatenate([self.cls_bias.data, np.zeros(k_new)]))
        self.n_classes += k_new

    def snapshot(self) -> "IncrementalModel":
        """Frozen deep copy; its parameters never join a gradient record."""
        clone = IncrementalModel.__new__(IncrementalModel)
        clone.cfg = self.cfg
        clone.n_classes = self.n_classes
        clone.frozen = True
        live = self.parameters()
        rng = np.random.default_rng(0)  # structural init only; overwritten below
        skeleton = IncrementalModel(self.cfg, self.n_classes, rng)
        for attr in ("patch_proj", "patch_bias", "cls_token", "pos_token",
                     "task_embedding", "msa", "tsa"):
            setattr(clone, attr, getattr(skeleton, attr))
        clone.cls_weight = skeleton.cls_weight
        clone.cls_bias = skeleton.cls_bias
        for name, tensor in clone.parameters().items():
            tensor.data = live[name].data.copy()
            tensor.requires_grad = False
        return clone

    # -- persistence -----------------------------------------------------------

    def save_checkpoint(self, path: str | Path, task_index: int) -> None:
        payload = {
            "format_version": 1,
            "task_index": task_index,
            "n_classes": self.n_classes,
            "config": asdict(self.cfg),
            "params": {
                name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
                for name, t in sorted(self.parameters().items())
            },
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple["IncrementalModel", int]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    cfg = ModelConfig(**payload["config"])
    model = IncrementalModel(cfg, payload["n_classes"], np.random.default_rng(0))
    params = model.parameters()
    if set(params) != set(payload["params"]):
        raise ValueError("checkpoint parameter names do not match the architecture")
    for name, entry in payload["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != params[name].data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        params[name].data = arr
    return model, payload["task_index"]
