"""Run configuration: one JSON document, strict keys, content hash, and a
provenance label (reference / toy / choice) for every tunable."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

from .numerics import ContractError

# (value, provenance). "reference": stated in the source method; "toy": desk-scale
# analog of a stated value; "choice": unspecified there, picked here.
_DEFAULTS: dict[str, dict[str, tuple[Any, str]]] = {
    "data": {
        "count": (50, "toy"),
        "seed": (7, "choice"),
        "frames": (9, "toy"),
        "size": (32, "toy"),
        "num_points": (49, "toy"),
        "max_speed": (1.5, "choice"),
    },
    "autoencoder": {
        "epochs": (300, "choice"),
        "hidden": (64, "choice"),
        "lr": (2e-3, "choice"),
        "batch": (64, "choice"),
        "latent_channels": (4, "toy"),
    },
    "diffusion": {
        "t_steps": (50, "toy"),
        "dim": (64, "toy"),
        "depth": (4, "toy"),
        "heads": (4, "choice"),
        "controlled": (2, "toy"),
        "patch": (2, "choice"),
        "sample_steps": (25, "choice"),
    },
    "degradation": {
        "p_apply": (0.2, "reference"),
        "p_encoding": (0.2, "reference"),
        "k_min": (0, "reference"),
        "k_max": (10, "reference"),
        "t_set": ([1, 5, 8, 10, 12], "reference"),
        "severity_ratio": (0.7, "choice"),
    },
    "control": {
        "alpha": (0.15, "reference"),
        "beta": (0.10, "reference"),
        "lambda_min": (0.05, "reference"),
        "lambda_max": (1.0, "reference"),
        "fusion_n": (5, "reference"),
        "blur_kernels": ([3, 5, 7], "choice"),
    },
    "history": {
        "n_hist_max": (4, "toy"),
        "n_hist_max_full": (16, "reference"),
        "boundary_weights": ([0.05, 0.325, 0.757], "reference"),
        "boundary_mode": ("loss", "choice"),
        "lambda_deg": (0.2, "reference"),
        "lambda_gt": (0.15, "reference"),
        "lambda_cons": (0.5, "reference"),
        "lowpass_kernel": (3, "choice"),
    },
    "rollout": {
        "clip_frames": (9, "toy"),
        "clip_frames_full": (81, "reference"),
        "overlap": (1, "reference"),
        "fps": (16, "reference"),
        "percentiles": ([5, 95], "reference"),
        "windows": (40, "toy"),
        "unified_noise": (True, "reference"),
        "global_norm": (True, "reference"),
    },
    "train": {
        "seed": (0, "choice"),
        "batch": ([16, 16, 16, 16], "choice"),
        "iters": ([3000, 300, 100, 200], "toy"),
        "lr": ([1e-3, 1e-4, 1e-4, 5e-5], "toy"),
        "lr_decay": ([True, False, False, False], "choice"),
        "base_loss": ("v", "choice"),
        "weight_decay": (0.01, "choice"),
        "warmup_fraction": (2 / 3, "toy"),
        "cond_drop": (0.1, "choice"),
        "ckpt_every": (50, "choice"),
    },
    "bench": {
        "seeds": ([0, 1, 2, 3, 4], "choice"),
        "windows": (6, "toy"),
    },
}


def defaults() -> dict:
    return {sec: {k: copy.deepcopy(v[0]) for k, v in keys.items()} for sec, keys in _DEFAULTS.items()}


def provenance() -> dict:
    return {sec: {k: v[1] for k, v in keys.items()} for sec, keys in _DEFAULTS.items()}


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for sec, vals in override.items():
        if sec == "provenance":
            continue
        if sec not in out:
            raise ContractError(f"unknown config section {sec!r}")
        if not isinstance(vals, dict):
            raise ContractError(f"config section {sec!r} must be an object")
        for k, v in vals.items():
            if k not in out[sec]:
                raise ContractError(f"unknown config key {sec}.{k}")
            out[sec][k] = v
    return out


_POSITIVE = {("data", "count"), ("data", "frames"), ("data", "size"), ("data", "num_points"),
             ("autoencoder", "hidden"), ("autoencoder", "batch"), ("autoencoder", "latent_channels"),
             ("diffusion", "t_steps"), ("diffusion", "dim"), ("diffusion", "depth"), ("diffusion", "heads"),
             ("diffusion", "patch"), ("diffusion", "sample_steps"), ("history", "n_hist_max"),
             ("rollout", "clip_frames"), ("rollout", "windows"), ("bench", "windows")}
_PROBABILITIES = {("degradation", "p_apply"), ("degradation", "p_encoding"), ("control", "alpha"),
                  ("control", "beta"), ("train", "warmup_fraction"), ("train", "cond_drop")}


def _same_kind(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list) and all(_same_kind(v, default[0]) for v in value) if default else True
    return isinstance(value, type(default))


def validate(cfg: dict) -> dict:
    """Type and range checks against the defaults; raises ContractError."""
    base = defaults()
    for sec, vals in cfg.items():
        for k, v in vals.items():
            if not _same_kind(v, base[sec][k]):
                raise ContractError(f"{sec}.{k} must look like {base[sec][k]!r}, got {v!r}")
            if (sec, k) in _POSITIVE and v <= 0:
                raise ContractError(f"{sec}.{k} must be positive, got {v!r}")
            if (sec, k) in _PROBABILITIES and not 0.0 <= v <= 1.0:
                raise ContractError(f"{sec}.{k} must lie in [0, 1], got {v!r}")
    if cfg["data"]["seed"] < 0 or cfg["train"]["seed"] < 0 or cfg["autoencoder"]["epochs"] < 0:
        raise ContractError("seeds and epoch counts must be non-negative")
    if cfg["train"]["base_loss"] not in ("v", "eps"):
        raise ContractError("train.base_loss must be 'v' or 'eps'")
    if any(len(cfg["train"][k]) != 4 for k in ("iters", "lr", "lr_decay", "batch")) or min(cfg["train"]["iters"]) < 0:
        raise ContractError("train.iters, lr, lr_decay and batch need one entry per stage 0..3")
    if min(cfg["train"]["batch"]) <= 0:
        raise ContractError("train.batch entries must be positive")
    return cfg


def load(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = defaults()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from exc
        cfg = merge(cfg, doc)
    if overrides:
        cfg = merge(cfg, overrides)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def document(cfg: dict) -> dict:
    """The config as written to run metadata, with its provenance table."""
    return {**cfg, "provenance": provenance()}
