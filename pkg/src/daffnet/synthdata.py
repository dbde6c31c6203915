"""Synthetic brain-like phantoms, deformed pairs, and on-disk corpora.

A phantom is three nested, smoothly perturbed ellipsoids: class 1 (CSF
analogue) outermost, class 2 (GM analogue) inside it, class 3 (WM analogue)
at the core. A pair is a phantom (fixed) and the same phantom resampled
through a smooth random diffeomorphism (moving).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import fields, fileio, ops
from .errors import ConfigError, ContractViolation

__all__ = [
    "CLASS_MEANS",
    "ArrayCorpus",
    "Corpus",
    "PairSample",
    "Phantom",
    "gen_pair",
    "gen_phantom",
    "random_velocity",
    "write_corpus",
]

CLASS_MEANS = (0.0, 0.3, 0.55, 0.8)
NOISE_SIGMA = 0.02
MARGIN = 2
MANIFEST_VERSION = 1


@dataclass
class Phantom:
    volume: np.ndarray  # float32 (D, H, W) in [0, 1]
    labels: np.ndarray  # int64 (D, H, W) in {0..3}
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class PairSample:
    moving: Phantom
    fixed: Phantom
    field: np.ndarray  # float32 (3, D, H, W), moving = fixed sampled at p + field(p)


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ContractViolation("dims must have three entries")
    if any(d % 16 for d in dims):
        raise ContractViolation(f"dims must be divisible by 16, got {dims}")
    if min(dims) < 32:
        raise ContractViolation(f"dims too small for the default margins (need >= 32 per axis), got {dims}")
    return dims


def _smooth_noise(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    noise = gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    return noise / (np.abs(noise).max() + 1e-12)


def gen_phantom(seed: int, dims=(32, 32, 32)) -> Phantom:
    dims = _check_dims(dims)
    rng = np.random.default_rng(seed)
    grid = np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"))
    half = np.array(dims, dtype=np.float64) / 2.0
    wobble = 0.08
    shift = rng.uniform(-1.5, 1.5, size=3)
    # outer extent (1 + wobble) * axes + |shift| stays inside the margin
    room = half - MARGIN - 1.0 - np.abs(shift)
    axes = [room / (1 + wobble) * rng.uniform(0.85, 1.0, size=3)]
    axes.append(axes[0] * rng.uniform(0.74, 0.8, size=3))
    axes.append(axes[1] * rng.uniform(0.66, 0.74, size=3))
    inside = []
    for a in axes:
        centre = half - 0.5 + shift
        rho = np.sqrt((((grid - centre[:, None, None, None]) / a[:, None, None, None]) ** 2).sum(0))
        bump = wobble * _smooth_noise(rng, dims, sigma=4.0)
        inside.append(rho < 1.0 + bump)
    labels = np.zeros(dims, dtype=np.int64)
    labels[inside[0]] = 1
    labels[inside[0] & inside[1]] = 2
    labels[inside[0] & inside[1] & inside[2]] = 3
    means = np.asarray(CLASS_MEANS)
    volume = means[labels] + NOISE_SIGMA * rng.standard_normal(dims)
    volume = np.clip(volume, 0.0, 1.0).astype(np.float32)
    return Phantom(volume=volume, labels=labels)


def random_velocity(rng: np.random.Generator, dims, coarse: int = 8) -> torch.Tensor:
    """Smooth random velocity ``[1,3,D,H,W]`` with unit maximum vector norm.

    Drawn on a grid ``coarse`` times smaller, then trilinearly upsampled.
    """
    low = [d // coarse for d in dims]
    v = torch.from_numpy(rng.standard_normal((1, 3, *low))).to(torch.float64)
    while v.shape[2] < dims[0]:
        v = ops.trilinear_resize(v, 2.0)
    return v / v.norm(dim=1).max()


def _max_norm(u: torch.Tensor) -> float:
    return float(u.norm(dim=1).max())


def gen_pair(seed: int, dims=(32, 32, 32), max_disp: float = 4.0) -> PairSample:
    """Fixed phantom plus its warped copy through a fold-free smooth field."""
    dims = _check_dims(dims)
    if max_disp < 0 or max_disp > min(dims) / 8:
        raise ContractViolation(f"max_disp must lie in [0, {min(dims) / 8}], got {max_disp}")
    fixed = gen_phantom(seed, dims)
    rng = np.random.default_rng([seed, 1])
    if max_disp == 0:
        u = torch.zeros((1, 3, *dims), dtype=torch.float64)
    else:
        v = random_velocity(rng, dims)
        target = max_disp * rng.uniform(0.9, 1.0)
        scale = target
        with torch.no_grad():
            for _ in range(50):
                u = fields.integrate_velocity(v * scale, fields.DEFAULT_INTEGRATION_STEPS)
                m = _max_norm(u)
                folded = bool((fields.jacobian_det(u) <= 0).any())
                if m <= max_disp and not folded:
                    break
                scale *= min(max_disp / m, 1.0) * 0.95
            else:  # pragma: no cover - 50 shrink steps always suffice
                raise RuntimeError("could not draw a fold-free field")
    u = u.to(torch.float32)
    with torch.no_grad():
        vol = torch.from_numpy(fixed.volume)[None, None]
        lab = torch.from_numpy(fixed.labels)[None, None]
        moving_vol = fields.warp(vol, u).numpy()[0, 0]
        moving_lab = fields.warp(lab, u, interp="nearest").numpy()[0, 0]
    moving = Phantom(volume=moving_vol.astype(np.float32), labels=moving_lab.astype(np.int64))
    return PairSample(moving=moving, fixed=fixed, field=u.numpy()[0])


def _pair_seeds(master: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(master).generate_state(n, dtype=np.uint32)]


def write_corpus(
    out_dir,
    pairs: int = 45,
    dims=(32, 32, 32),
    seed: int = 0,
    max_disp: float = 4.0,
    held_out: int | None = None,
    labels: bool = True,
) -> Path:
    """Generate ``pairs`` pairs under ``out_dir`` and write ``manifest.json``.

    The last ``held_out`` pairs (default ``pairs // 9``, i.e. 5 of 45) form
    the evaluation split.
    """
    dims = _check_dims(dims)
    if pairs < 1:
        raise ContractViolation("pairs must be >= 1")
    held_out = pairs // 9 if held_out is None else held_out
    if not 0 <= held_out <= pairs:
        raise ContractViolation("held_out must lie in [0, pairs]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(_pair_seeds(seed, pairs)):
        pid = f"pair_{i:03d}"
        sample = gen_pair(s, dims, max_disp)
        (out / pid).mkdir(exist_ok=True)
        rec = {
            "id": pid,
            "seed": s,
            "split": "test" if i >= pairs - held_out else "train",
            "moving": f"{pid}/moving.dvol",
            "fixed": f"{pid}/fixed.dvol",
            "field": f"{pid}/field.dvol",
        }
        fileio.write_volume(out / rec["moving"], sample.moving.volume, "intensity")
        fileio.write_volume(out / rec["fixed"], sample.fixed.volume, "intensity")
        fileio.write_volume(out / rec["field"], sample.field, "field")
        if labels:
            rec["moving_labels"] = f"{pid}/moving_labels.dvol"
            rec["fixed_labels"] = f"{pid}/fixed_labels.dvol"
            fileio.write_volume(out / rec["moving_labels"], sample.moving.labels, "labels")
            fileio.write_volume(out / rec["fixed_labels"], sample.fixed.labels, "labels")
        records.append(rec)
    manifest = {
        "version": MANIFEST_VERSION,
        "dims": list(dims),
        "seed": seed,
        "max_disp": max_disp,
        "pairs": records,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


class Corpus:
    """Read-only view of a generated corpus; volumes are loaded on first use."""

    def __init__(self, manifest_path):
        path = Path(manifest_path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.is_file():
            raise ConfigError(f"corpus manifest not found: {path}")
        self.root = path.parent
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {self.manifest.get('version')!r}")
        self.pairs = self.manifest["pairs"]
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def ids(self, split: str | None = None) -> list[str]:
        return [p["id"] for p in self.pairs if split is None or p["split"] == split]

    @property
    def has_labels(self) -> bool:
        return all("moving_labels" in p and "fixed_labels" in p for p in self.pairs)

    def record(self, pid: str) -> dict:
        for p in self.pairs:
            if p["id"] == pid:
                return p
        raise KeyError(pid)

    def array(self, pid: str, key: str) -> np.ndarray:
        k = (pid, key)
        if k not in self._cache:
            rec = self.record(pid)
            if key not in rec:
                raise ConfigError(f"pair {pid} has no {key!r} file")
            self._cache[k] = fileio.read_volume(self.root / rec[key]).data
        return self._cache[k]

    def tensors(self, pid: str, labels: bool = True) -> dict[str, torch.Tensor]:
        """``moving``/``fixed`` as ``[1,1,D,H,W]`` float tensors, labels as int64."""
        dtype = torch.get_default_dtype()
        out = {
            "moving": torch.from_numpy(self.array(pid, "moving")).to(dtype)[None, None],
            "fixed": torch.from_numpy(self.array(pid, "fixed")).to(dtype)[None, None],
        }
        if labels:
            out["moving_labels"] = torch.from_numpy(self.array(pid, "moving_labels"))[None, None]
            out["fixed_labels"] = torch.from_numpy(self.array(pid, "fixed_labels"))[None, None]
        return out


class ArrayCorpus:
    """In-memory stand-in for :class:`Corpus` built from stacked arrays.

    ``pairs`` is ``(n, 2, D, H, W)`` with moving then fixed; ``labels`` has
    the same layout with integer classes. All pairs form the training split.
    """

    def __init__(self, pairs: np.ndarray, labels: np.ndarray | None = None, split: str = "train"):
        self._pairs = np.asarray(pairs, dtype=np.float32)
        self._labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.pairs = [{"id": f"pair_{i:03d}", "split": split} for i in range(len(self._pairs))]
        self.manifest = {"dims": list(self._pairs.shape[2:])}

    def ids(self, split: str | None = None) -> list[str]:
        return [p["id"] for p in self.pairs if split is None or p["split"] == split]

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    def tensors(self, pid: str, labels: bool = True) -> dict[str, torch.Tensor]:
        i = int(pid.rsplit("_", 1)[1])
        dtype = torch.get_default_dtype()
        out = {
            "moving": torch.from_numpy(self._pairs[i, 0]).to(dtype)[None, None],
            "fixed": torch.from_numpy(self._pairs[i, 1]).to(dtype)[None, None],
        }
        if labels:
            if self._labels is None:
                raise ConfigError("labels requested but none were given")
            out["moving_labels"] = torch.from_numpy(self._labels[i, 0])[None, None]
            out["fixed_labels"] = torch.from_numpy(self._labels[i, 1])[None, None]
        return out
