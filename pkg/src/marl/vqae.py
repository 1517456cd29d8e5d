"""Vector-quantized autoencoder over multi-scale footprint stacks.

Encoder: three convs (stride 2, 2, 1) plus one residual block, mapping a
(3, S, S) stack to a (S/4, S/4, D) latent grid. Each latent site snaps to its
nearest codebook entry; the decoder mirrors the encoder with one residual
block and three upsampling convs back to (3, S, S) in [0, 1].

Training minimizes

    MSE(x, x_hat) + ||sg(z_e) - e||^2 + beta * ||z_e - sg(e)||^2

with gradients flowing straight through the quantizer into the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, TrainingDivergedError
from .nn import autodiff as ad
from .nn.autodiff import Parameter, Tensor
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.layers import LayerSpec, Network
from .nn.optim import Adam

DOWNSCALE = 4  # two stride-2 convs


@dataclass
class VqConfig:
    side_px: int = 112
    in_channels: int = 3
    channels: tuple[int, int, int] = (32, 64, 32)
    code_dim: int = 32
    codebook_size: int = 512
    beta: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.side_px % DOWNSCALE != 0 or self.side_px < DOWNSCALE * 2:
            raise ConfigError(f"side_px must be a multiple of {DOWNSCALE}, got {self.side_px}")
        if len(self.channels) != 3:
            raise ConfigError(f"need 3 encoder channel counts, got {self.channels}")
        if self.code_dim != self.channels[-1]:
            raise ConfigError(
                f"code_dim {self.code_dim} must equal last encoder channels {self.channels[-1]}")
        if self.codebook_size < 2:
            raise ConfigError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")

    @property
    def latent_side(self) -> int:
        return self.side_px // DOWNSCALE

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VqConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class Codebook:
    """K x D table of code vectors plus usage counters."""

    entries: Parameter
    usage_counts: np.ndarray

    @classmethod
    def initialize(cls, size: int, dim: int, rng: np.random.Generator) -> "Codebook":
        lim = 1.0 / size
        table = rng.uniform(-lim, lim, size=(size, dim)).astype(np.float32)
        return cls(Parameter(table, "codebook"), np.zeros(size, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.entries.data.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.data.shape[1]


@dataclass
class LatentCode:
    """Continuous and quantized latents for one input; grids are (..., D)."""

    z_e: np.ndarray
    z_q: np.ndarray
    indices: np.ndarray


def nearest_codebook_indices(z_flat: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the nearest entry per row, squared-L2, ties to lowest index.

    Scores are computed in float64 so results match an exact brute-force
    search even for near-ties.
    """
    if entries.size == 0:
        raise ConfigError("empty codebook")
    z = z_flat.astype(np.float64, copy=False)
    e = entries.astype(np.float64, copy=False)
    scores = z @ e.T
    scores *= -2.0
    scores += (e * e).sum(axis=1)
    return scores.argmin(axis=1)


def quantize(z_e: np.ndarray, codebook: Codebook) -> tuple[LatentCode, dict[str, float]]:
    """Snap each latent site to its nearest code vector.

    Accepts any (..., D) grid. Returns the LatentCode plus the two
    quantization losses, each a mean over sites of the squared distance
    (summed over D). Pure: neither input is modified.
    """
    entries = codebook.entries.data
    if z_e.shape[-1] != entries.shape[1]:
        raise DimensionError(f"latent dim {z_e.shape[-1]} != codebook dim {entries.shape[1]}")
    flat = z_e.reshape(-1, entries.shape[1])
    idx = nearest_codebook_indices(flat, entries)
    z_q = entries[idx].reshape(z_e.shape).astype(z_e.dtype, copy=False).copy()
    d = flat.astype(np.float64) - entries[idx].astype(np.float64)
    per_site = (d * d).sum(axis=1)
    loss = float(per_site.mean())
    losses = {"codebook": loss, "commitment": loss}
    return LatentCode(z_e=z_e.copy(), z_q=z_q, indices=idx.reshape(z_e.shape[:-1])), losses


def reconstruction_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean squared error over every pixel and channel, in float64."""
    if x.shape != x_hat.shape:
        raise DimensionError(f"shapes {x.shape} vs {x_hat.shape}")
    d = x.astype(np.float64) - x_hat.astype(np.float64)
    return float((d * d).mean())


def _encoder_specs(cfg: VqConfig) -> list[LayerSpec]:
    c1, c2, c3 = cfg.channels
    return [
        LayerSpec("conv2d", {"in_ch": cfg.in_channels, "out_ch": c1, "kernel": 4, "stride": 2, "padding": 1}),
        LayerSpec("relu", {}),
        LayerSpec("conv2d", {"in_ch": c1, "out_ch": c2, "kernel": 4, "stride": 2, "padding": 1}),
        LayerSpec("relu", {}),
        LayerSpec("conv2d", {"in_ch": c2, "out_ch": c3, "kernel": 3, "stride": 1, "padding": 1}),
        LayerSpec("residual_block", {"channels": c3, "kernel": 3}),
    ]


def _decoder_specs(cfg: VqConfig) -> list[LayerSpec]:
    c1, c2, c3 = cfg.channels
    return [
        LayerSpec("residual_block", {"channels": c3, "kernel": 3}),
        LayerSpec("transposed_upsample2d", {"in_ch": c3, "out_ch": c2, "kernel": 3}),
        LayerSpec("relu", {}),
        LayerSpec("transposed_upsample2d", {"in_ch": c2, "out_ch": c1, "kernel": 3}),
        LayerSpec("relu", {}),
        LayerSpec("conv2d", {"in_ch": c1, "out_ch": cfg.in_channels, "kernel": 3, "stride": 1, "padding": 1}),
        LayerSpec("sigmoid", {}),
    ]


class VqModel:
    """Encoder + codebook + decoder with seeded deterministic initialization."""

    def __init__(self, cfg: VqConfig, encoder: Network, codebook: Codebook, decoder: Network):
        self.cfg = cfg
        self.encoder = encoder
        self.codebook = codebook
        self.decoder = decoder

    @classmethod
    def build(cls, cfg: VqConfig) -> "VqModel":
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        encoder = Network.from_specs(_encoder_specs(cfg), rng, name="enc")
        codebook = Codebook.initialize(cfg.codebook_size, cfg.code_dim, rng)
        decoder = Network.from_specs(_decoder_specs(cfg), rng, name="dec")
        return cls(cfg, encoder, codebook, decoder)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + [self.codebook.entries] + self.decoder.parameters()

    # ---- inference -------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or x.shape[2] != self.cfg.side_px \
                or x.shape[3] != self.cfg.side_px:
            raise DimensionError(
                f"expected (n, {self.cfg.in_channels}, {self.cfg.side_px}, {self.cfg.side_px}), "
                f"got {x.shape}")
        return x

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Continuous latents as (n, H, W, D); squeezed to (H, W, D) for one input."""
        squeeze = x.ndim == 3
        xb = self._check_input(np.asarray(x, dtype=np.float32))
        z = self.encoder.forward(Tensor(xb)).data
        self.encoder.reset()
        z = np.ascontiguousarray(z.transpose(0, 2, 3, 1))
        return z[0] if squeeze else z

    def decode(self, z_q: np.ndarray) -> np.ndarray:
        """Images from (n, H, W, D) quantized latents; squeezed like encode."""
        squeeze = z_q.ndim == 3
        if squeeze:
            z_q = z_q[None]
        ls = self.cfg.latent_side
        if z_q.shape[1:] != (ls, ls, self.cfg.code_dim):
            raise DimensionError(f"expected (n, {ls}, {ls}, {self.cfg.code_dim}), got {z_q.shape}")
        z = np.ascontiguousarray(z_q.transpose(0, 3, 1, 2).astype(np.float32))
        out = self.decoder.forward(Tensor(z)).data
        self.decoder.reset()
        return out[0] if squeeze else out

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        code, _ = quantize(self.encode(x), self.codebook)
        return self.decode(code.z_q)

    # ---- training graph --------------------------------------------------

    def training_losses(self, x: Tensor) -> dict:
        """Forward pass returning loss Tensors and quantization bookkeeping."""
        n = x.shape[0]
        ls = self.cfg.latent_side
        d = self.cfg.code_dim
        m = n * ls * ls

        z_e = self.encoder.forward(x)
        z_flat = ad.reshape(ad.transpose(z_e, (0, 2, 3, 1)), (m, d))
        idx = nearest_codebook_indices(z_flat.data, self.codebook.entries.data)
        selected = ad.gather_rows(self.codebook.entries, idx)

        d_cb = ad.sub(ad.stop_gradient(z_flat), selected)
        codebook_loss = ad.mul(ad.sum_all(ad.mul(d_cb, d_cb)), 1.0 / m)
        d_cm = ad.sub(z_flat, ad.stop_gradient(selected))
        commitment_loss = ad.mul(ad.sum_all(ad.mul(d_cm, d_cm)), 1.0 / m)

        straight_through = ad.add(z_flat, ad.stop_gradient(ad.sub(selected, z_flat)))
        z_q = ad.transpose(ad.reshape(straight_through, (n, ls, ls, d)), (0, 3, 1, 2))
        x_hat = self.decoder.forward(z_q)
        recon = ad.mse(x_hat, x)

        total = ad.add(ad.add(recon, codebook_loss), ad.mul(commitment_loss, self.cfg.beta))
        return {
            "reconstruction": recon,
            "codebook": codebook_loss,
            "commitment": commitment_loss,
            "total": total,
            "indices": idx,
            "z_flat": z_flat,
            "x_hat": x_hat,
        }

    # ---- persistence -----------------------------------------------------

    def save(self, path: str | Path, extra_sections: dict[str, list[Parameter]] | None = None,
             meta: dict | None = None) -> None:
        sections = {"model": self.parameters()}
        if extra_sections:
            sections.update(extra_sections)
        header = {
            "config": self.cfg.to_dict(),
            "encoder_specs": [s.to_dict() for s in self.encoder.specs()],
            "decoder_specs": [s.to_dict() for s in self.decoder.specs()],
            "seed": self.cfg.seed,
            "meta": meta or {},
        }
        save_checkpoint(path, sections, header)

    @classmethod
    def load(cls, path: str | Path) -> tuple["VqModel", dict, dict[str, list[np.ndarray]]]:
        """Rebuild the model; returns (model, header, remaining_sections)."""
        header, sections = load_checkpoint(path)
        cfg = VqConfig.from_dict(header["config"])
        model = cls.build(cfg)
        params = model.parameters()
        arrays = sections.pop("model")
        if len(arrays) != len(params):
            raise DimensionError(f"checkpoint has {len(arrays)} model arrays, expected {len(params)}")
        for p, arr in zip(params, arrays):
            if p.data.shape != arr.shape:
                raise DimensionError(f"{p.name}: checkpoint shape {arr.shape} != {p.data.shape}")
            p.data = arr
        return model, header, sections


def pretrain(model: VqModel, images: np.ndarray, epochs: int, seed: int,
             batch_size: int = 16, learning_rate: float = 1e-3,
             on_epoch=None) -> list[dict]:
    """Reconstruction-only training; returns one history row per epoch.

    Shuffling, batching, and dead-code reseeding all derive from the given
    seed, so two runs from identical initial states produce bitwise-identical
    parameter trajectories and loss histories. Codebook entries unused for a
    full epoch are reseeded to encoder outputs sampled from the last batch.
    """
    x_all = np.asarray(images, dtype=np.float32)
    if x_all.ndim != 4:
        raise DimensionError(f"images must be (n, c, s, s), got {x_all.shape}")
    n = x_all.shape[0]
    if n == 0 and epochs > 0:
        raise DimensionError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    optimizer = Adam(model.parameters(), lr=learning_rate)
    history: list[dict] = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        sums = {"reconstruction": 0.0, "codebook": 0.0, "commitment": 0.0, "total": 0.0}
        epoch_usage = np.zeros(model.codebook.size, dtype=np.int64)
        reservoir: np.ndarray | None = None
        for start in range(0, n, batch_size):
            batch = perm[start : start + batch_size]
            losses = model.training_losses(Tensor(x_all[batch]))
            total = losses["total"]
            if not np.isfinite(total.data):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}", epoch=epoch)
            optimizer.zero_grad()
            total.backward()
            optimizer.step(epoch=epoch)
            for key in ("reconstruction", "codebook", "commitment", "total"):
                sums[key] += losses[key].item() * len(batch)
            epoch_usage += np.bincount(losses["indices"], minlength=model.codebook.size)
            reservoir = losses["z_flat"].data
        model.codebook.usage_counts = model.codebook.usage_counts + epoch_usage
        dead = np.flatnonzero(epoch_usage == 0)
        if dead.size and reservoir is not None:
            picks = rng.integers(0, reservoir.shape[0], size=dead.size)
            entries = model.codebook.entries.data.copy()
            entries[dead] = reservoir[picks].astype(entries.dtype)
            model.codebook.entries.data = entries
        row = {"epoch": epoch}
        row.update({k: sums[k] / n for k in sums})
        history.append(row)
        if on_epoch is not None:
            on_epoch(epoch, row, model)
    return history
