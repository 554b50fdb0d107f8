"""Compact U-shaped segmentation network, Adam updates, EMA shadow, checkpoints."""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "advaug-checkpoint"
CHECKPOINT_VERSION = 1


def _block(c_in: int, c_out: int) -> nn.Sequential:
    # smooth activations keep finite-difference gradient checks well conditioned
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.SiLU(),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.SiLU(),
    )


class SegNet(nn.Module):
    """Two-stage encoder-decoder with skip connections and a softmax head.

    Input ``(B, in_channels, H, W)`` with ``H, W`` divisible by 4; output a
    ``(B, n_classes, H, W)`` probability map.
    """

    stages = 2

    def __init__(self, n_classes: int = 4, width: int = 8, in_channels: int = 1):
        super().__init__()
        self.config = {"n_classes": n_classes, "width": width, "in_channels": in_channels}
        w = width
        self.enc1 = _block(in_channels, w)
        self.enc2 = _block(w, 2 * w)
        self.bottom = _block(2 * w, 4 * w)
        self.dec2 = _block(6 * w, 2 * w)
        self.dec1 = _block(3 * w, w)
        self.head = nn.Conv2d(w, n_classes, 1)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.zero_()

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2**self.stages
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"input size {tuple(x.shape[-2:])} is not divisible by {factor}")
        e1 = self.enc1(x)
        e2 = self.enc2(F.avg_pool2d(e1, 2))
        b = self.bottom(F.avg_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(b, scale_factor=2, mode="bilinear", align_corners=False), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="bilinear", align_corners=False), e1], 1))
        return self.head(d1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict(f: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Probability map for ``x``; accepts ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)``."""
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return f(x)


class NumericalError(RuntimeError):
    """Raised when a loss or parameter becomes NaN or infinite.

    The trainer attaches the last finite model as ``model`` before re-raising.
    """

    model = None


def make_optimizer(model: nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


def train_step(model: nn.Module, optimizer: torch.optim.Optimizer, loss: torch.Tensor) -> float:
    """Backpropagate ``loss`` and take one optimizer step."""
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericalError(f"parameter {name} became non-finite")
    return value


class EmaShadow:
    """Exponential moving average of a model's parameters."""

    def __init__(self, model: nn.Module, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {decay}")
        self.decay = decay
        self.updates = 0
        self.model = copy.deepcopy(model)
        for p in self.model.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        shadow = dict(self.model.named_parameters())
        for name, p in model.named_parameters():
            s = shadow[name]
            if s.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(p.shape)}")
            s.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)
        self.updates += 1

    @torch.no_grad()
    def evaluate(self, x: torch.Tensor) -> torch.Tensor:
        return predict(self.model, x)


def ema_update(shadow: EmaShadow, model: nn.Module) -> None:
    shadow.update(model)


def ema_evaluate(shadow: EmaShadow, x: torch.Tensor) -> torch.Tensor:
    return shadow.evaluate(x)


# ---------------------------------------------------------------- checkpoints


def _flatten(model: nn.Module) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_checkpoint(path, model: nn.Module, ema: EmaShadow | None = None, meta: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``weights.bin`` (raw little-endian float32) into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, raw = _flatten(model)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "endianness": "little",
        "arch": getattr(model, "config", {}),
        "params": entries,
        "meta": meta or {},
    }
    if ema is not None:
        ema_entries, ema_raw = _flatten(ema.model)
        for e in ema_entries:
            e["offset"] += len(raw)
        manifest["ema"] = {"decay": ema.decay, "updates": ema.updates, "params": ema_entries}
        raw += ema_raw
    (path / "weights.bin").write_bytes(raw)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def _restore(model: nn.Module, entries: list[dict], raw: bytes) -> None:
    state = model.state_dict()
    if [e["name"] for e in entries] != list(state):
        raise ValueError("checkpoint parameter names do not match the model")
    loaded = {}
    for e in entries:
        end = e["offset"] + e["nbytes"]
        if end > len(raw):
            raise ValueError(f"weights file truncated at {e['name']}")
        arr = np.frombuffer(raw[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        if tuple(arr.shape) != tuple(state[e["name"]].shape):
            raise ValueError(f"shape mismatch for {e['name']}")
        loaded[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(loaded)


def load_checkpoint(path) -> tuple[SegNet, EmaShadow | None, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    raw = (path / "weights.bin").read_bytes()
    model = SegNet(**manifest["arch"])
    _restore(model, manifest["params"], raw)
    ema = None
    if "ema" in manifest:
        ema = EmaShadow(model, manifest["ema"]["decay"])
        ema.updates = manifest["ema"]["updates"]
        _restore(ema.model, manifest["ema"]["params"], raw)
    return model, ema, manifest.get("meta", {})
