"""Normalized loss, learning-rate schedule, and the training loop.

The loss normalizes each channel's squared error by that channel's mean
absolute label over free cells, so weak channels (vertical wind, calm
samples) are not drowned out by strong horizontal winds. The sum runs
over free cells only and is divided by the free-cell count N, which keeps
samples with much terrain from being underrepresented. Per-channel scales
are floored at a small fraction of the dataset speed scale; without the
floor a zero-flow sample would divide by zero.

Training composes inputs on the fly: every epoch each training terrain
contributes one freshly windowed, masked, and noised sample, so the model
never sees the same input twice. Validation inputs are fixed and
noise-free, making the validation curve a pure measure of the weights.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import extract_window, sample_window
from .gridcore import FlowGrid, GridError, distance_transform, read_wsgrid
from .net import Checkpoint, ModelSpec, WindNet, build_model, save_checkpoint
from .sparse import (
    ComposedSample,
    FillMode,
    NoiseSpec,
    compose_input,
    sample_trajectory_mask,
)
from .synthflow import ManifestRow, read_manifest

DIST_CHANNEL = "dist"


class TrainAbort(GridError):
    """Training stopped on a non-finite loss; the message names the samples."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3000
    batch_size: int = 35
    lr0: float = 1.0e-5
    lr_decay: float = 0.25
    lr_decay_every: int = 700
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1.0e-8
    noise: NoiseSpec = NoiseSpec()
    fill: FillMode = FillMode.AVERAGE
    traj_min_len: int = 3
    traj_max_len: int = 500
    traj_segments: int = 1
    rotate: bool = True
    out_dims: tuple[int, int, int] = (64, 64, 64)
    include_uz: bool = False
    seed: int = 0
    checkpoint_every: int = 0       # 0 = only best and final
    fixed_inputs: bool = False      # regression-test mode: no resampling
    scale_floor_frac: float = 1.0e-3
    workers: int = 1

    def __post_init__(self):
        # zero is legal so regression tests can freeze the weights
        if self.lr0 < 0:
            raise GridError("lr0 must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise GridError("batch_size and epochs must be >= 1")
        if self.workers < 1:
            raise GridError("workers must be >= 1")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise GridError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def scaled_mse_loss(pred: torch.Tensor, label: torch.Tensor,
                    terrain: torch.Tensor, scales: torch.Tensor,
                    n_free: torch.Tensor, floor: float = 0.0) -> torch.Tensor:
    """Mean over the batch of (1/N) sum_c sum_free ((X - Y) / max(s_c, floor))^2.

    Terrain cells are zeroed out of the residual before squaring, so the
    loss is bitwise invariant to whatever the model predicts there.
    Accepts a single sample or a batch (leading dim).
    """
    scales = torch.as_tensor(scales, dtype=pred.dtype, device=pred.device)
    n_free = torch.as_tensor(n_free, dtype=pred.dtype, device=pred.device)
    if pred.ndim == 4:
        pred, label = pred[None], label[None]
        terrain, scales = terrain[None], scales[None]
        n_free = n_free.reshape(1)
    if pred.shape != label.shape:
        raise GridError(f"pred {tuple(pred.shape)} vs label {tuple(label.shape)}")
    if (n_free <= 0).any():
        raise GridError("every sample needs at least one free cell")
    eff = torch.clamp(scales, min=floor)
    if (eff <= 0).any():
        raise GridError("a label scale is zero and no positive floor is set")
    diff = pred - label
    diff = torch.where(terrain[:, None], torch.zeros((), dtype=diff.dtype), diff)
    diff = diff / eff[:, :, None, None, None]
    per_sample = diff.square().sum(dim=(1, 2, 3, 4)) / n_free
    return per_sample.mean()


# --- data plumbing ---------------------------------------------------------------

@dataclass
class _Source:
    terrain_id: str
    case_id: str
    grid: FlowGrid                  # label channels plus the distance field

    @property
    def sample_id(self) -> str:
        return f"{self.terrain_id}/{self.case_id}"


def _load_sources(rows: list[ManifestRow]) -> list[_Source]:
    out = []
    for r in rows:
        grid = read_wsgrid(r.path)
        grid.add_channel(DIST_CHANNEL,
                         distance_transform(grid.terrain, grid.res))
        out.append(_Source(r.terrain_id, r.case_id, grid))
    return out


def _speed_scale(sources: list[_Source]) -> float:
    """Mean free-cell wind speed across the split; anchors the loss floor."""
    means = []
    for s in sources:
        free = s.grid.free
        if not free.any():
            continue
        u = s.grid.channels["ux"][free]
        v = s.grid.channels["uy"][free]
        w = s.grid.channels["uz"][free]
        means.append(float(np.sqrt(u ** 2 + v ** 2 + w ** 2).mean()))
    return float(np.mean(means)) if means else 0.0


def prepare_sample(source: _Source, cfg: TrainConfig,
                   rng: np.random.Generator, *,
                   with_noise: bool = True) -> ComposedSample:
    """Window + trajectory + noise + fill for one source grid."""
    win = extract_window(
        source.grid, cfg.out_dims,
        sample_window(rng, source.grid.dims, cfg.out_dims, rotate=cfg.rotate))
    mask = sample_trajectory_mask(
        win.dims, win.terrain, rng, min_len=cfg.traj_min_len,
        max_len=cfg.traj_max_len, segments=cfg.traj_segments)
    noise = cfg.noise if with_noise else NoiseSpec(0.0, 0.0)
    return compose_input(win, win.channels[DIST_CHANNEL], mask, noise,
                         cfg.fill, rng, include_uz=cfg.include_uz)


def _to_batch(samples: list[ComposedSample], device):
    x = torch.from_numpy(np.stack([s.inputs for s in samples])).to(device)
    y = torch.from_numpy(np.stack([s.labels for s in samples])).to(device)
    t = torch.from_numpy(np.stack([s.terrain for s in samples])).to(device)
    sc = torch.from_numpy(
        np.stack([s.label_scales for s in samples]).astype(np.float32)).to(device)
    n = torch.tensor([s.n_free for s in samples], dtype=torch.float32,
                     device=device)
    return x, y, t, sc, n


def trailing_mean(values, k: int = 10) -> float:
    tail = list(values)[-k:]
    return float(np.mean(tail))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    final_path: Path
    best_path: Path
    metrics_path: Path
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    floored_batches: int = 0


def train_loop(manifest_path, model_spec: ModelSpec, cfg: TrainConfig,
               out_dir, *, device: str = "cpu",
               log=lambda s: None) -> TrainResult:
    """Run the full recipe and leave final/best checkpoints plus a metrics
    file (epoch, lr, train loss, val loss per line) in out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_manifest(manifest_path)
    train_sources = _load_sources([r for r in rows if r.split == "train"])
    val_sources = _load_sources([r for r in rows if r.split == "val"])
    if not train_sources:
        raise GridError("manifest has no train split")
    by_terrain: dict[str, list[_Source]] = {}
    for s in train_sources:
        by_terrain.setdefault(s.terrain_id, []).append(s)
    terrain_ids = sorted(by_terrain)
    floor = cfg.scale_floor_frac * _speed_scale(train_sources)

    model = build_model(model_spec).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=cfg.betas,
                           eps=cfg.eps)
    root = np.random.SeedSequence(cfg.seed)
    epoch_seed, val_seed = root.spawn(2)

    # fixed noise-free validation inputs, one window per val terrain
    val_rng = np.random.default_rng(val_seed)
    val_by_terrain: dict[str, list[_Source]] = {}
    for s in val_sources:
        val_by_terrain.setdefault(s.terrain_id, []).append(s)
    val_samples = []
    for tid in sorted(val_by_terrain):
        cases = val_by_terrain[tid]
        src = cases[int(val_rng.integers(len(cases)))]
        val_samples.append(prepare_sample(src, cfg, val_rng, with_noise=False))
    val_batches = [_to_batch(val_samples[i:i + cfg.batch_size], device)
                   for i in range(0, len(val_samples), cfg.batch_size)]

    metrics_path = out_dir / "metrics.tsv"
    best_path = out_dir / "best.wsnn"
    final_path = out_dir / "final.wsnn"
    history: list[tuple[int, float, float, float]] = []
    best_val = float("inf")
    floored_batches = 0
    fixed_cache: list[tuple[list[str], list[ComposedSample]]] | None = None

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        with metrics_path.open("w") as metrics:
            for epoch in range(cfg.epochs):
                lr = lr_schedule(epoch, cfg)
                for group in opt.param_groups:
                    group["lr"] = lr

                if cfg.fixed_inputs and fixed_cache is not None:
                    batches = fixed_cache
                else:
                    rng = np.random.default_rng(epoch_seed.spawn(1)[0])
                    order = rng.permutation(len(terrain_ids))
                    picks = []
                    for idx in order:
                        cases = by_terrain[terrain_ids[idx]]
                        picks.append(cases[int(rng.integers(len(cases)))])
                    sample_rngs = [np.random.default_rng(s)
                                   for s in epoch_seed.spawn(len(picks))]
                    prep = (pool.map if pool else map)(
                        lambda a: prepare_sample(a[0], cfg, a[1]),
                        zip(picks, sample_rngs))
                    samples = list(prep)
                    batches = []
                    for i in range(0, len(samples), cfg.batch_size):
                        chunk = samples[i:i + cfg.batch_size]
                        ids = [p.sample_id for p in picks[i:i + cfg.batch_size]]
                        batches.append((ids, chunk))
                    if cfg.fixed_inputs:
                        fixed_cache = batches

                model.train()
                total, count = 0.0, 0
                for ids, chunk in batches:
                    x, y, t, sc, n = _to_batch(chunk, device)
                    if (sc < floor).any():
                        floored_batches += 1
                    opt.zero_grad()
                    loss = scaled_mse_loss(model(x), y, t, sc, n, floor)
                    if not torch.isfinite(loss):
                        raise TrainAbort(
                            f"non-finite loss at epoch {epoch} on {ids}")
                    loss.backward()
                    opt.step()
                    total += float(loss.detach()) * len(chunk)
                    count += len(chunk)
                train_loss = total / count

                model.eval()
                val_loss = float("nan")
                if val_batches:
                    vt, vc = 0.0, 0
                    with torch.no_grad():
                        for batch in val_batches:
                            x, y, t, sc, n = batch
                            vl = scaled_mse_loss(model(x), y, t, sc, n, floor)
                            vt += float(vl) * len(n)
                            vc += len(n)
                    val_loss = vt / vc

                history.append((epoch, lr, train_loss, val_loss))
                metrics.write(f"{epoch}\t{lr:.8e}\t{train_loss:.6e}\t{val_loss:.6e}\n")
                metrics.flush()
                log(f"epoch {epoch}: lr {lr:.3e} train {train_loss:.4e} "
                    f"val {val_loss:.4e}")

                digest = hashlib.sha256(
                    "".join(f"{h}" for h in history).encode()).hexdigest()[:16]
                if val_batches and val_loss < best_val:
                    best_val = val_loss
                    save_checkpoint(best_path, model, epoch=epoch,
                                    loss_digest=digest)
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"epoch_{epoch:05d}.wsnn", model,
                                    epoch=epoch, loss_digest=digest)
    finally:
        if pool:
            pool.shutdown()

    digest = hashlib.sha256(
        "".join(f"{h}" for h in history).encode()).hexdigest()[:16]
    save_checkpoint(final_path, model, epoch=cfg.epochs - 1, loss_digest=digest)
    if not val_batches:
        save_checkpoint(best_path, model, epoch=cfg.epochs - 1,
                        loss_digest=digest)
    state = {k: v.detach().cpu().numpy().astype(np.float32)
             for k, v in model.state_dict().items()}
    ck = Checkpoint(model_spec, state, epoch=cfg.epochs - 1, loss_digest=digest)
    return TrainResult(ck, final_path, best_path, metrics_path, history,
                       floored_batches)
