"""Downstream task pool: light supervised heads on the latent grid.

Three heads share the frozen latent layout (one conv + one fully-connected
layer each): building-program classification, construction-vintage binning,
and height regression against the grayscale-encoded target. Fine-tuning runs
exactly one joint epoch over reconstruction + quantization + weighted task
losses, updating encoder, codebook, decoder, and heads together.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LabelError, TrainingDivergedError
from .ingest import FootprintRecord, encode_height_grayscale
from .nn import autodiff as ad
from .nn.autodiff import Parameter, Tensor
from .nn.layers import Conv2d, Linear
from .nn.optim import Adam
from .vqae import VqModel

# Half-open vintage bins: boundary years belong to the later bin.
VINTAGE_BIN_EDGES = (1980, 2004, 2013)
VINTAGE_BIN_COUNT = len(VINTAGE_BIN_EDGES) + 1

TASK_NAMES = ("program", "vintage", "height")


def bin_vintage(year: int) -> int:
    """Map a construction year to its vintage bin index (0..3)."""
    return bisect_right(VINTAGE_BIN_EDGES, year)


@dataclass
class TaskLabels:
    """Aligned per-record targets for the task pool."""

    program_index: np.ndarray  # (n,) int
    vintage_bin: np.ndarray  # (n,) int
    height_gray: np.ndarray  # (n,) float32 in [0, 1]
    program_map: dict[str, int]


def build_program_map(records: list[FootprintRecord]) -> dict[str, int]:
    """Stable program -> index mapping, lexicographic over distinct names."""
    names = sorted({r.program for r in records})
    return {name: i for i, name in enumerate(names)}


def make_task_labels(records: list[FootprintRecord], program_map: dict[str, int] | None = None,
                     height_bounds: tuple[float, float] = (0.0, 100.0)) -> TaskLabels:
    if program_map is None:
        program_map = build_program_map(records)
    try:
        program = np.array([program_map[r.program] for r in records], dtype=np.int64)
    except KeyError as e:
        raise LabelError(f"program {e.args[0]!r} not in the label map") from e
    vintage = np.array([bin_vintage(r.vintage_year) for r in records], dtype=np.int64)
    gray = np.array(
        [encode_height_grayscale(r.height_m, *height_bounds) / 255.0 for r in records],
        dtype=np.float32,
    )
    return TaskLabels(program, vintage, gray, program_map)


class TaskHead:
    """One conv + one fully-connected layer over the latent grid."""

    def __init__(self, name: str, latent_side: int, code_dim: int, output_dim: int,
                 rng: np.random.Generator, conv_channels: int = 16):
        if output_dim < 1:
            raise DimensionError(f"head {name}: output_dim must be >= 1")
        self.name = name
        self.output_dim = output_dim
        self.conv_channels = conv_channels
        self.latent_side = latent_side
        self.code_dim = code_dim
        self.conv = Conv2d(code_dim, conv_channels, 3, stride=2, padding=1,
                           rng=rng, name=f"{name}.conv")
        side = (latent_side + 1) // 2
        self.features = conv_channels * side * side
        self.fc = Linear(self.features, output_dim, rng=rng, name=f"{name}.fc")

    def parameters(self) -> list[Parameter]:
        return self.conv.parameters() + self.fc.parameters()

    def forward(self, z_nchw: Tensor) -> Tensor:
        """Logits (or scalar prediction) from (n, D, H, W) latents."""
        h = ad.relu(self.conv(z_nchw))
        n = h.shape[0]
        return self.fc(ad.reshape(h, (n, self.features)))

    def predict(self, z_e: np.ndarray) -> np.ndarray:
        """Inference on (n, H, W, D) or (H, W, D) latent grids."""
        squeeze = z_e.ndim == 3
        if squeeze:
            z_e = z_e[None]
        z = np.ascontiguousarray(z_e.transpose(0, 3, 1, 2).astype(np.float32))
        out = self.forward(Tensor(z)).data
        return out[0] if squeeze else out

    def spec(self) -> dict:
        return {
            "name": self.name,
            "latent_side": self.latent_side,
            "code_dim": self.code_dim,
            "output_dim": self.output_dim,
            "conv_channels": self.conv_channels,
        }

    @classmethod
    def from_spec(cls, spec: dict, rng: np.random.Generator) -> "TaskHead":
        return cls(spec["name"], spec["latent_side"], spec["code_dim"],
                   spec["output_dim"], rng, spec["conv_channels"])


def build_heads(latent_side: int, code_dim: int, program_count: int, seed: int,
                conv_channels: int = 16) -> dict[str, TaskHead]:
    """The standard three-head pool, deterministically initialized."""
    rng = np.random.default_rng(seed)
    return {
        "program": TaskHead("program", latent_side, code_dim, program_count, rng, conv_channels),
        "vintage": TaskHead("vintage", latent_side, code_dim, VINTAGE_BIN_COUNT, rng, conv_channels),
        "height": TaskHead("height", latent_side, code_dim, 1, rng, conv_channels),
    }


def task_loss(name: str, output: Tensor, labels: TaskLabels, batch: np.ndarray) -> Tensor:
    """Per-task training loss on one batch: cross-entropy or squared error."""
    if name == "program":
        return ad.softmax_cross_entropy(output, labels.program_index[batch])
    if name == "vintage":
        return ad.softmax_cross_entropy(output, labels.vintage_bin[batch])
    if name == "height":
        target = Tensor(labels.height_gray[batch])
        pred = ad.reshape(output, (output.shape[0],))
        d = ad.sub(pred, target)
        return ad.mean_all(ad.mul(d, d))
    raise LabelError(f"unknown task {name!r}")


def dtp_loss(model: VqModel, heads: dict[str, TaskHead], x: Tensor,
             labels: TaskLabels, batch: np.ndarray,
             weights: dict[str, float]) -> tuple[Tensor, dict]:
    """Joint loss graph: autoencoding terms plus weighted task terms.

    Heads with zero weight contribute exactly nothing and are skipped.
    Returns (total, breakdown) where breakdown holds per-term Tensors.
    """
    parts = model.training_losses(x)
    total = parts["total"]
    z_nchw = ad.transpose(
        ad.reshape(parts["z_flat"],
                   (x.shape[0], model.cfg.latent_side, model.cfg.latent_side, model.cfg.code_dim)),
        (0, 3, 1, 2))
    for name in TASK_NAMES:
        w = float(weights.get(name, 0.0))
        if w == 0.0:
            continue
        if name not in heads:
            raise LabelError(f"task {name!r} has weight {w} but no head")
        out = heads[name].forward(z_nchw)
        loss = task_loss(name, out, labels, batch)
        parts[f"task_{name}"] = loss
        total = ad.add(total, ad.mul(loss, w))
    parts["weighted_total"] = total
    return total, parts


def finetune(model: VqModel, heads: dict[str, TaskHead], images: np.ndarray,
             labels: TaskLabels, weights: dict[str, float], seed: int,
             batch_size: int = 16, learning_rate: float = 1e-3) -> dict:
    """Exactly one joint epoch over all model and head parameters.

    A fresh optimizer is used (no carried moments), and the shuffle consumes
    the seed identically to one pretraining epoch, so zero task weights
    reproduce a single pretraining epoch bit for bit.
    """
    x_all = np.asarray(images, dtype=np.float32)
    if x_all.ndim != 4:
        raise DimensionError(f"images must be (n, c, s, s), got {x_all.shape}")
    n = x_all.shape[0]
    if labels.program_index.shape[0] != n:
        raise DimensionError(f"{labels.program_index.shape[0]} labels for {n} images")
    params = list(model.parameters())
    for head in heads.values():
        params.extend(head.parameters())
    optimizer = Adam(params, lr=learning_rate)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    keys = ["reconstruction", "codebook", "commitment", "total", "weighted_total"] + \
        [f"task_{t}" for t in TASK_NAMES if float(weights.get(t, 0.0)) != 0.0]
    sums = dict.fromkeys(keys, 0.0)
    epoch_usage = np.zeros(model.codebook.size, dtype=np.int64)
    reservoir: np.ndarray | None = None
    for start in range(0, n, batch_size):
        batch = perm[start : start + batch_size]
        total, parts = dtp_loss(model, heads, Tensor(x_all[batch]), labels, batch, weights)
        if not np.isfinite(total.data):
            raise TrainingDivergedError("non-finite loss during fine-tuning", epoch=0)
        optimizer.zero_grad()
        total.backward()
        optimizer.step(epoch=0)
        for key in keys:
            sums[key] += parts[key].item() * len(batch)
        epoch_usage += np.bincount(parts["indices"], minlength=model.codebook.size)
        reservoir = parts["z_flat"].data
    # same end-of-epoch dead-code policy as pretraining, same rng stream
    model.codebook.usage_counts = model.codebook.usage_counts + epoch_usage
    dead = np.flatnonzero(epoch_usage == 0)
    if dead.size and reservoir is not None:
        picks = rng.integers(0, reservoir.shape[0], size=dead.size)
        entries = model.codebook.entries.data.copy()
        entries[dead] = reservoir[picks].astype(entries.dtype)
        model.codebook.entries.data = entries
    return {k: v / n for k, v in sums.items()}
