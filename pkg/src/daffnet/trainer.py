"""Training loop, evaluation, and the ablation / loss-weight sweep harnesses.

All randomness in a run is derived from ``(seed, iteration)``: the pair
drawn at iteration ``t`` and the velocity noise used in its forward pass do
not depend on anything that happened before ``t``. Resuming from a
checkpoint therefore continues the exact same trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses, metrics
from .errors import ConfigError, NumericFault
from .network import ArchitectureConfig, RegistrationNet, build_variant, load_checkpoint, save_checkpoint
from .synthdata import Corpus

__all__ = [
    "ABLATION_VARIANTS",
    "Adam",
    "TrainConfig",
    "TrainResult",
    "default_sweep_grid",
    "evaluate_model",
    "run_ablation",
    "run_lambda_sweep",
    "train",
]

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("PyramidReg", "AuxReg", "SimSReg", "GloSReg", "CcSReg", "DAFFNet")
_CKPT = re.compile(r"iter_(\d+)\.dckp$")


@dataclass
class TrainConfig:
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    corpus: str = ""
    output_dir: str = "runs/default"
    learning_rate: float = 1e-4
    batch_size: int = 1
    iterations: int = 300
    seed: int = 0
    checkpoint_interval: int = 100
    grad_clip: float | None = 10.0

    def __post_init__(self):
        if isinstance(self.architecture, dict):
            self.architecture = ArchitectureConfig.from_dict(self.architecture)
        if isinstance(self.loss, dict):
            self.loss = losses.LossConfig(**self.loss)
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")

    @property
    def variant(self) -> str:
        return self.architecture.variant

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


class Adam:
    """Bias-corrected Adam over a name -> parameter mapping."""

    def __init__(self, params: dict[str, torch.nn.Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}
        self.step_count = 0

    def load_state(self, step: int, m: dict, v: dict) -> None:
        self.step_count = int(step)
        for k, p in self.params.items():
            self.m[k] = torch.as_tensor(np.array(m[k])).to(p.dtype)
            self.v[k] = torch.as_tensor(np.array(v[k])).to(p.dtype)

    @torch.no_grad()
    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                raise NumericFault(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + self.eps))
            p.grad = None


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    history: list[dict]
    model: RegistrationNet | None = None


def _sample_pair(ids: list[str], seed: int, iteration: int, slot: int) -> str:
    rng = np.random.default_rng([seed, iteration, slot])
    return ids[int(rng.integers(len(ids)))]


def _generator(seed: int, iteration: int, slot: int) -> torch.Generator:
    s = np.random.SeedSequence([seed, iteration, slot, 7]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(s))


def _latest_checkpoint(ckpt_dir: Path, limit: int) -> tuple[int, Path] | None:
    found = []
    for p in ckpt_dir.glob("iter_*.dckp"):
        m = _CKPT.search(p.name)
        if m and int(m.group(1)) <= limit:
            found.append((int(m.group(1)), p))
    return max(found) if found else None


def step_loss(model: RegistrationNet, batch: dict, cfg: TrainConfig, generator=None, mode="train"):
    """Forward one pair and return its :class:`~daffnet.losses.LossReport`."""
    out = model(batch["moving"], batch["fixed"], mode=mode, generator=generator)
    kw = {}
    if cfg.architecture.uses_labels:
        k = cfg.architecture.num_classes
        kw = dict(
            labels_m=losses.one_hot(batch["moving_labels"], k),
            labels_f=losses.one_hot(batch["fixed_labels"], k),
            seg_m=out.seg_moving,
            seg_f=out.seg_fixed,
        )
    return losses.total_loss(cfg.variant, batch["fixed"], batch["moving"], out.field, cfg.loss, **kw)


def train(cfg: TrainConfig, corpus: Corpus | None = None, resume: bool = True) -> TrainResult:
    """Optimise one variant on the training split; checkpoints land in ``output_dir/checkpoints``."""
    corpus = corpus or Corpus(cfg.corpus)
    needs_labels = cfg.architecture.uses_labels
    if needs_labels and not corpus.has_labels:
        raise ConfigError(f"variant {cfg.variant} needs label files but the corpus has none")
    ids = corpus.ids("train")
    if not ids:
        raise ConfigError("corpus has no training pairs")
    cfg.architecture.check_input(corpus.manifest["dims"])

    out = Path(cfg.output_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    log_path = out / "train_log.jsonl"
    # the output location is not part of the model, so two identical runs
    # written to different directories produce identical checkpoint bytes
    run_cfg = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    meta = {"variant": cfg.variant, "train_config": run_cfg}

    model = build_variant(cfg.architecture, cfg.seed)
    params = dict(model.named_parameters())
    opt = Adam(params)
    start = 0
    history: list[dict] = []
    latest = _latest_checkpoint(ckpt_dir, cfg.iterations) if resume else None
    if latest is not None:
        model, _, start, opt_state = load_checkpoint(latest[1])
        params = dict(model.named_parameters())
        opt = Adam(params)
        if opt_state is not None:
            opt.load_state(*opt_state)
        if log_path.exists():
            for line in log_path.read_text().splitlines():
                rec = json.loads(line)
                if rec["iteration"] <= start:
                    history.append(rec)
        log.info("resuming %s from iteration %d", cfg.variant, start)
    with log_path.open("w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    final = out / "final.dckp"
    model.train()
    t0 = time.perf_counter()
    for it in range(start + 1, cfg.iterations + 1):
        sums: dict[str, float] = {}
        for slot in range(cfg.batch_size):
            pid = _sample_pair(ids, cfg.seed, it, slot)
            batch = corpus.tensors(pid, labels=needs_labels)
            report = step_loss(model, batch, cfg, _generator(cfg.seed, it, slot))
            values = report.as_floats()
            bad = [k for k, v in values.items() if not np.isfinite(v)]
            if bad:
                raise NumericFault(f"non-finite loss component(s) {bad} at iteration {it}")
            (report.total / cfg.batch_size).backward()
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v / cfg.batch_size
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(list(params.values()), cfg.grad_clip)
        try:
            opt.step(cfg.learning_rate)
        except NumericFault as exc:
            raise NumericFault(f"{exc} at iteration {it}") from exc
        rec = {"iteration": it, **sums, "wall_time": round(time.perf_counter() - t0, 3)}
        history.append(rec)
        with log_path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if it % cfg.checkpoint_interval == 0 or it == cfg.iterations:
            save_checkpoint(ckpt_dir / f"iter_{it:06d}.dckp", model, meta, it, opt)
    if not (ckpt_dir / f"iter_{cfg.iterations:06d}.dckp").exists():
        save_checkpoint(ckpt_dir / f"iter_{cfg.iterations:06d}.dckp", model, meta, cfg.iterations, opt)
    final.write_bytes((ckpt_dir / f"iter_{cfg.iterations:06d}.dckp").read_bytes())
    return TrainResult(checkpoint=final, log_path=log_path, history=history, model=model)


def smoothed_loss(history: list[dict], iteration: int, window: int = 50, key: str = "total") -> float:
    """Mean of ``key`` over the ``window`` iterations ending at ``iteration``."""
    vals = [h[key] for h in history if iteration - window < h["iteration"] <= iteration]
    if not vals:
        raise ValueError(f"no log records up to iteration {iteration}")
    return float(np.mean(vals))


def evaluate_model(model: RegistrationNet, corpus: Corpus, split: str = "test", label: str = "") -> metrics.MetricsReport:
    report = metrics.MetricsReport(label=label or model.variant)
    for pid in corpus.ids(split):
        b = corpus.tensors(pid, labels=True)
        report.pairs.append(
            metrics.evaluate_pair(model, b["moving"], b["fixed"], b["moving_labels"], b["fixed_labels"], pid)
        )
    return report


def _write_report(path: Path, report: metrics.MetricsReport) -> None:
    path.write_text(report.to_jsonl())


def train_and_evaluate(cfg: TrainConfig, corpus: Corpus | None = None) -> metrics.MetricsReport:
    corpus = corpus or Corpus(cfg.corpus)
    result = train(cfg, corpus)
    model, *_ = load_checkpoint(result.checkpoint)
    report = evaluate_model(model, corpus, "test", cfg.variant)
    _write_report(Path(cfg.output_dir) / "eval_report.jsonl", report)
    return report


def run_ablation(base: TrainConfig, variants=ABLATION_VARIANTS, corpus: Corpus | None = None) -> dict:
    """Train every variant with the same seed and budget; returns reports and the table text."""
    corpus = corpus or Corpus(base.corpus)
    root = Path(base.output_dir)
    reports = {}
    for v in variants:
        arch = dataclasses.replace(base.architecture, variant=v)
        cfg = base.replace(architecture=arch, output_dir=str(root / "ablation" / v))
        reports[v] = train_and_evaluate(cfg, corpus)
    rows = [reports[v].summary_row() for v in variants]
    table = metrics.format_table(rows)
    (root / "ablation_table.txt").write_text(table)
    with (root / "ablation_report.jsonl").open("w") as fh:
        for row in rows:
            fh.write(json.dumps(_row_record(row), sort_keys=True) + "\n")
    return {"reports": reports, "rows": rows, "table": table}


def _row_record(row: dict) -> dict:
    def num(x):
        return None if x is None or (isinstance(x, float) and np.isnan(x)) else x

    rec = {}
    for k, v in row.items():
        if isinstance(v, tuple):
            rec[k] = {"mean": num(v[0]), "std": num(v[1])}
        else:
            rec[k] = v
    return rec


def default_sweep_grid() -> list[tuple[float, float]]:
    """One weight fixed at 1 while the other takes 0.5, 1, 5, 10 (seven distinct cells)."""
    grid = [(l1, 1.0) for l1 in (0.5, 1.0, 5.0, 10.0)]
    grid += [(1.0, l2) for l2 in (0.5, 5.0, 10.0)]
    return grid


def run_lambda_sweep(base: TrainConfig, grid=None, corpus: Corpus | None = None) -> dict:
    """Train the full model per ``(lambda_seg, lambda_fuse)`` cell and tabulate the results."""
    corpus = corpus or Corpus(base.corpus)
    grid = list(grid or default_sweep_grid())
    root = Path(base.output_dir)
    arch = dataclasses.replace(base.architecture, variant="DAFFNet")
    rows = []
    for l1, l2 in grid:
        loss = dataclasses.replace(base.loss, lambda_seg=l1, lambda_fuse=l2)
        cfg = base.replace(architecture=arch, loss=loss, output_dir=str(root / "sweep" / f"l1_{l1:g}_l2_{l2:g}"))
        report = train_and_evaluate(cfg, corpus)
        row = report.summary_row()
        row["method"] = f"l1={l1:g}/l2={l2:g}"
        row["lambda_seg"], row["lambda_fuse"] = l1, l2
        rows.append(row)
    table = metrics.format_table(rows, extra_columns=["lambda_seg", "lambda_fuse"])
    (root / "sweep_table.txt").write_text(table)
    with (root / "sweep_report.jsonl").open("w") as fh:
        for row in rows:
            fh.write(json.dumps(_row_record(row), sort_keys=True) + "\n")
    return {"rows": rows, "table": table}
