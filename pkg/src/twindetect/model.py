"""Digital twin model: encoder-decoder transformer with two output heads.

The encoder ingests the normalized input window; the decoder attends over h
learned horizon queries and cross-attends to the encoder memory (single-pass,
non-autoregressive). A linear head emits the forecast and a small MLP head
re-derives the forecast from the same decoder states; the gap between the two
is the reconstruction signal used downstream for OOD detection.

Dropout is routed through an explicit torch.Generator so that stochastic
forward passes are reproducible per (seed, pass) without touching torch's
global RNG.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .rng import derive_seed, stream
from .timeseries import Normalizer, WindowPair

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "LossBreakdown",
    "DTModel",
    "loss_forecast",
    "loss_recon",
    "loss_total",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"TWINCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_features: int
    w: int = 60
    h: int = 60
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.1
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2

    def __post_init__(self):
        if min(self.d_features, self.w, self.h, self.d_model,
               self.n_heads, self.d_ff) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_encoder_layers < 1 or self.n_decoder_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")

    def to_dict(self) -> dict:
        return {
            "d_features": self.d_features, "w": self.w, "h": self.h,
            "d_model": self.d_model, "n_heads": self.n_heads, "d_ff": self.d_ff,
            "dropout": self.dropout,
            "n_encoder_layers": self.n_encoder_layers,
            "n_decoder_layers": self.n_decoder_layers,
        }


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_patience: Optional[int] = None  # epochs without val improvement
    plateau_min_delta: float = 1e-5

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("invalid training configuration")


@dataclass(frozen=True)
class LossBreakdown:
    forecast: float
    recon: float

    @property
    def total(self) -> float:
        return self.forecast + self.recon


def _dropout(x: torch.Tensor, p: float,
             generator: Optional[torch.Generator]) -> torch.Tensor:
    if p <= 0.0 or generator is None:
        return x
    keep = (torch.rand(x.shape, generator=generator, device=x.device) >= p)
    return x * keep / (1.0 - p)


def sinusoidal_encoding(length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32)
                    * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: (d_model + 1) // 2])
    return pe


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; no internal dropout (applied by layers)."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        B, Lq, D = query.shape
        Lk = memory.shape[1]
        q = self.q_proj(query).view(B, Lq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(memory).view(B, Lk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(memory).view(B, Lk, self.n_heads, self.d_head).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.d_head), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Lq, D)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.p = cfg.dropout

    def forward(self, x, generator):
        x = self.norm1(x + _dropout(self.attn(x, x), self.p, generator))
        x = self.norm2(x + _dropout(self.ff(x), self.p, generator))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.p = cfg.dropout

    def forward(self, q, memory, generator):
        q = self.norm1(q + _dropout(self.self_attn(q, q), self.p, generator))
        q = self.norm2(q + _dropout(self.cross_attn(q, memory), self.p, generator))
        q = self.norm3(q + _dropout(self.ff(q), self.p, generator))
        return q


class DTModel(nn.Module):
    """Forecast + reconstruction transformer over normalized state windows."""

    def __init__(self, cfg: ModelConfig, init_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.d_features, cfg.d_model)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(cfg) for _ in range(cfg.n_encoder_layers))
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(cfg) for _ in range(cfg.n_decoder_layers))
        self.horizon_queries = nn.Parameter(torch.zeros(cfg.h, cfg.d_model))
        self.forecast_head = nn.Linear(cfg.d_model, cfg.d_features)
        self.recon_head = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff), nn.ReLU(),
            nn.Linear(cfg.d_ff, cfg.d_features))
        self.register_buffer("pe_in", sinusoidal_encoding(cfg.w, cfg.d_model))
        self.register_buffer("pe_out", sinusoidal_encoding(cfg.h, cfg.d_model))
        self.init_parameters(init_seed)

    def init_parameters(self, seed: int) -> None:
        """Seeded uniform init scaled by fan-in; layer norms to identity."""
        gen = torch.Generator().manual_seed(derive_seed(seed, "init"))
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.in_features)
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    mod.bias.uniform_(-bound, bound, generator=gen)
                elif isinstance(mod, nn.LayerNorm):
                    mod.weight.fill_(1.0)
                    mod.bias.fill_(0.0)
            self.horizon_queries.uniform_(
                -1.0 / math.sqrt(self.cfg.d_model),
                1.0 / math.sqrt(self.cfg.d_model), generator=gen)

    def forward(self, x: torch.Tensor, mode: str = "eval",
                generator: Optional[torch.Generator] = None):
        """Returns (forecast, reconstruction), each (..., h, D).

        mode "eval" disables dropout; "train"/"mc" sample dropout masks from
        `generator` (required when model dropout > 0).
        """
        if mode not in ("train", "eval", "mc"):
            raise ValueError(f"unknown mode {mode!r}")
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[-2] != self.cfg.w or x.shape[-1] != self.cfg.d_features:
            raise ValueError(
                f"input shape {tuple(x.shape[-2:])} does not match "
                f"(w, D) = ({self.cfg.w}, {self.cfg.d_features})")
        gen = None
        if mode in ("train", "mc") and self.cfg.dropout > 0.0:
            if generator is None:
                raise ValueError(f"mode {mode!r} requires an RNG generator")
            gen = generator

        h = self.input_proj(x) + self.pe_in
        for layer in self.encoder_layers:
            h = layer(h, gen)
        q = (self.horizon_queries + self.pe_out).unsqueeze(0).expand(
            x.shape[0], -1, -1)
        for layer in self.decoder_layers:
            q = layer(q, h, gen)
        forecast = self.forecast_head(q)
        recon = self.recon_head(q)
        if squeeze:
            forecast, recon = forecast.squeeze(0), recon.squeeze(0)
        return forecast, recon

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def loss_forecast(pred, target) -> torch.Tensor:
    """Mean over horizon steps of the squared Euclidean error across features.

    Batched inputs are averaged over the batch dimension.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).sum(dim=-1).mean()


def loss_recon(recon, pred) -> torch.Tensor:
    """Same form as the forecast loss, against the detached forecast."""
    recon, pred = _as_tensor(recon), _as_tensor(pred)
    if recon.shape != pred.shape:
        raise ValueError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(pred.shape)}")
    return ((recon - pred.detach()) ** 2).sum(dim=-1).mean()


def loss_total(forecast_part, recon_part) -> LossBreakdown:
    f = float(forecast_part)
    r = float(recon_part)
    return LossBreakdown(forecast=f, recon=r)


def _stack_windows(windows: Sequence[WindowPair]):
    xs = torch.as_tensor(np.stack([w.input for w in windows]), dtype=torch.float32)
    ys = torch.as_tensor(np.stack([w.target for w in windows]), dtype=torch.float32)
    return xs, ys


def _eval_losses(model: DTModel, xs: torch.Tensor, ys: torch.Tensor,
                 batch_size: int = 256) -> LossBreakdown:
    model.eval()
    f_sum = r_sum = 0.0
    n = xs.shape[0]
    with torch.no_grad():
        for i in range(0, n, batch_size):
            xb, yb = xs[i : i + batch_size], ys[i : i + batch_size]
            pred, rec = model(xb, mode="eval")
            f_sum += float(loss_forecast(pred, yb)) * xb.shape[0]
            r_sum += float(loss_recon(rec, pred)) * xb.shape[0]
    return LossBreakdown(forecast=f_sum / n, recon=r_sum / n)


def train(
    model: DTModel,
    train_windows: Sequence[WindowPair],
    val_windows: Sequence[WindowPair],
    cfg: TrainConfig,
) -> tuple[DTModel, list[dict]]:
    """Minibatch Adam training on the combined forecast + reconstruction loss.

    Returns the trained model and a per-epoch history of train/val loss
    breakdowns. Deterministic given cfg.seed.
    """
    if not train_windows or not val_windows:
        raise ValueError("train and val window sets must be non-empty")
    xs, ys = _stack_windows(train_windows)
    vx, vy = _stack_windows(val_windows)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                           betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    n = xs.shape[0]
    history: list[dict] = []
    best_val = math.inf
    stale = 0
    for epoch in range(cfg.epochs):
        perm = stream(cfg.seed, "shuffle", epoch).permutation(n)
        drop_gen = torch.Generator().manual_seed(
            derive_seed(cfg.seed, "dropout", epoch))
        model.train()
        f_sum = r_sum = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            xb = xs[torch.as_tensor(idx, dtype=torch.long)]
            yb = ys[torch.as_tensor(idx, dtype=torch.long)]
            pred, rec = model(xb, mode="train", generator=drop_gen)
            lf = loss_forecast(pred, yb)
            lr = loss_recon(rec, pred)
            loss = lf + lr
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {b}: "
                    f"forecast={float(lf)}, recon={float(lr)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            f_sum += float(lf.detach()) * xb.shape[0]
            r_sum += float(lr.detach()) * xb.shape[0]
        train_loss = LossBreakdown(forecast=f_sum / n, recon=r_sum / n)
        val_loss = _eval_losses(model, vx, vy)
        history.append({"epoch": epoch, "train": train_loss, "val": val_loss})
        if cfg.plateau_patience is not None:
            if val_loss.total < best_val - cfg.plateau_min_delta:
                best_val = val_loss.total
                stale = 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience:
                    break
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints: versioned header + raw little-endian tensor payload. Byte
# layout is fully determined by the model state, so identical training runs
# produce identical files.


def save_checkpoint(model: DTModel, cfg: ModelConfig, normalizer: Normalizer,
                    path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    tensors = []
    payload = bytearray()
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        tensors.append({"name": name, "shape": list(arr.shape),
                        "dtype": str(arr.dtype)})
        payload.extend(arr.tobytes())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "normalizer": {
            "mean": [float(v) for v in normalizer.mean],
            "std": [float(v) for v in normalizer.std],
        },
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(bytes(payload))
    return path


def load_checkpoint(path) -> tuple[DTModel, ModelConfig, Normalizer]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a twindetect checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: corrupt checkpoint header: {e}") from None
    off += hlen
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint format version: "
            f"expected {CHECKPOINT_VERSION}, found {version}")
    cfg = ModelConfig(**header["model_config"])
    normalizer = Normalizer(
        mean=np.array(header["normalizer"]["mean"], dtype=np.float64),
        std=np.array(header["normalizer"]["std"], dtype=np.float64))
    model = DTModel(cfg)
    state = {}
    for meta in header["tensors"]:
        dtype = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        nbytes = count * dtype.itemsize
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += nbytes
        state[meta["name"]] = torch.as_tensor(
            arr.reshape(meta["shape"]).copy())
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    model.load_state_dict(state)
    model.eval()
    return model, cfg, normalizer
