"""Adversarial training loop, augmentation, early stopping and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import platform
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cgan import (
    INIT_STD,
    DiscriminatorConfig,
    GeneratorConfig,
    LossWeights,
    adversarial_loss,
    build_discriminator,
    build_generator,
    generator_adversarial_loss,
    l1_loss,
    total_generator_loss,
)
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigurationError,
    NonFiniteLossError,
)
from .preprocess import ClaheConfig, preprocess_image
from .raster import plan_patch_grid
from .synth import derive_seed, philox

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "d_loss", "g_adv", "l1", "total", "val_total")
MIN_VALID_FRACTION = 0.95


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 150
    lambda_l1: float = 100.0
    adv_weight: float = 1.0
    patch_size: int = 512
    augment_hflip: bool = True
    augment_intensity_scale: tuple[float, float] = (0.9, 1.1)
    checkpoint_every: int = 5
    early_stop_patience: int = 10
    d_steps: int = 1
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "augment_intensity_scale", tuple(self.augment_intensity_scale))
        for name in ("learning_rate", "batch_size", "epochs", "patch_size", "checkpoint_every", "early_stop_patience"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        lo, hi = self.augment_intensity_scale
        if not 0 < lo <= hi:
            raise ConfigurationError("augment_intensity_scale must satisfy 0 < lo <= hi")
        if self.d_steps < 0:
            raise ConfigurationError("d_steps must be >= 0")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_l1, self.adv_weight)

    def to_dict(self):
        return asdict(self)


@dataclass
class RunArtifacts:
    out_dir: Path
    checkpoint_paths: list
    loss_history: list
    manifest_path: Path
    history_path: Path
    best_epoch: int
    stopped_early: bool = False


# -- data -----------------------------------------------------------------------


def augment(pair, rng: np.random.Generator, hflip: bool = True, scale_range=(1.0, 1.0)):
    """Same flip for both patches; intensity scale on the input only, clamped to [0, 1]."""
    inp, ref = pair
    if hflip and rng.random() < 0.5:
        inp, ref = inp[..., ::-1], ref[..., ::-1]
    lo, hi = scale_range
    if hi > lo or lo != 1.0:
        inp = np.clip(inp * rng.uniform(lo, hi), 0.0, 1.0)
    return np.ascontiguousarray(inp), np.ascontiguousarray(ref)


def pair_patches(entry, patch_size: int, clahe_cfg: ClaheConfig | None, apply_clahe: bool):
    """Non-overlapping input/reference patches of one manifest pair, in [0, 1]."""
    degraded = preprocess_image(entry.load_degraded(), clahe_cfg, apply_clahe)
    reference = entry.load_reference()
    mask = degraded.mask_or_true() & reference.mask_or_true()
    grid = plan_patch_grid(*degraded.shape, patch_size, patch_size)
    inputs, targets = [], []
    s = patch_size
    for x, y in grid.origins:
        if mask[x : x + s, y : y + s].mean() < MIN_VALID_FRACTION:
            continue
        inputs.append(degraded.values[x : x + s, y : y + s])
        targets.append(reference.values[x : x + s, y : y + s])
    return inputs, targets


def load_split(entries, split, patch_size, clahe_cfg=None, apply_clahe=True):
    xs, ys = [], []
    for e in entries:
        if e.split != split:
            continue
        a, b = pair_patches(e, patch_size, clahe_cfg, apply_clahe)
        xs.extend(a)
        ys.extend(b)
    if not xs:
        return np.zeros((0, patch_size, patch_size), np.float32), np.zeros((0, patch_size, patch_size), np.float32)
    return np.asarray(xs, dtype=np.float32), np.asarray(ys, dtype=np.float32)


def to_model(arr: np.ndarray) -> torch.Tensor:
    """[0, 1] patches (B x s x s) -> B x 1 x s x s tensor in [-1, 1]."""
    return torch.from_numpy(np.asarray(arr, dtype=np.float32) * 2.0 - 1.0).unsqueeze(1)


def from_model(t: torch.Tensor) -> np.ndarray:
    return np.clip((t.detach().cpu().numpy()[:, 0] + 1.0) / 2.0, 0.0, 1.0)


# -- optimisation -----------------------------------------------------------------


@dataclass
class TrainState:
    G: torch.nn.Module
    D: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    gen_cfg: GeneratorConfig
    disc_cfg: DiscriminatorConfig
    step: int = 0
    epoch: int = 0


def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def init_state(gen_cfg, disc_cfg, cfg: TrainConfig) -> TrainState:
    G = build_generator(gen_cfg, seed=derive_seed(cfg.seed, "G") % 2**63)
    D = build_discriminator(disc_cfg, seed=derive_seed(cfg.seed, "D") % 2**63)
    betas = (cfg.beta1, cfg.beta2)
    return TrainState(
        G,
        D,
        torch.optim.Adam(G.parameters(), lr=cfg.learning_rate, betas=betas),
        torch.optim.Adam(D.parameters(), lr=cfg.learning_rate, betas=betas),
        gen_cfg,
        disc_cfg,
    )


def _diagnostics(inp, ref):
    def stats(t):
        return {
            "min": float(torch.nan_to_num(t).min()),
            "max": float(torch.nan_to_num(t).max()),
            "mean": float(torch.nan_to_num(t).mean()),
            "non_finite": int((~torch.isfinite(t)).sum()),
        }

    return {"input": stats(inp), "reference": stats(ref), "shape": list(inp.shape)}


def _check_finite(values: dict, inp, ref, dump_dir=None):
    bad = [k for k, v in values.items() if not np.isfinite(v)]
    if not bad:
        return
    diag = {"losses": {k: repr(v) for k, v in values.items()}, "batch": _diagnostics(inp, ref)}
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        (Path(dump_dir) / "nonfinite_batch.json").write_text(json.dumps(diag, indent=2))
    raise NonFiniteLossError(f"non-finite loss in {bad}: {diag}", diag)


def discriminator_step(inp, ref, state: TrainState) -> float:
    """One D update on a real pair and a detached fake pair; returns d_loss before the step."""
    with torch.no_grad():
        fake = state.G(inp)
    d_loss, _ = adversarial_loss(state.D(inp, ref), state.D(inp, fake))
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    state.opt_d.step()
    return float(d_loss.detach())


def train_step(batch, state: TrainState, weights: LossWeights, d_steps: int = 1, dump_dir=None) -> dict:
    """One (or ``d_steps``) discriminator update followed by one generator update.

    ``batch`` is ``(input, reference)`` as B x 1 x s x s tensors in [-1, 1].
    """
    inp, ref = batch
    state.G.train()
    state.D.train()
    d_val = float("nan")
    for _ in range(d_steps):
        d_val = discriminator_step(inp, ref, state)
        if not np.isfinite(d_val):
            _check_finite({"d_loss": d_val}, inp, ref, dump_dir)

    fake = state.G(inp)
    g_adv = generator_adversarial_loss(state.D(inp, fake))
    l1 = l1_loss(fake, ref)
    total = total_generator_loss(g_adv, l1, weights)
    record = {"d_loss": d_val, "g_adv": g_adv.item(), "l1": l1.item(), "total": total.item()}
    _check_finite({k: v for k, v in record.items() if d_steps or k != "d_loss"}, inp, ref, dump_dir)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    for p in state.D.parameters():
        p.grad = None
    state.opt_g.step()
    state.step += 1
    return record


@torch.no_grad()
def validation_loss(state: TrainState, xs, ys, weights: LossWeights, batch_size: int) -> float:
    state.G.eval()
    state.D.eval()
    total, n = 0.0, 0
    for i in range(0, len(xs), batch_size):
        inp, ref = to_model(xs[i : i + batch_size]), to_model(ys[i : i + batch_size])
        fake = state.G(inp)
        g_adv = generator_adversarial_loss(state.D(inp, fake))
        loss = total_generator_loss(g_adv, l1_loss(fake, ref), weights)
        total += float(loss) * len(inp)
        n += len(inp)
    state.G.train()
    state.D.train()
    return total / max(n, 1)


class EarlyStopping:
    """Stop once ``patience`` epochs pass without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.epoch = 0

    def update(self, value: float) -> bool:
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


# -- checkpoints --------------------------------------------------------------------

CKPT_MAGIC = b"SLNRCKPT"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sIQ")


def checkpoint_save(state, path, meta: dict | None = None) -> Path:
    """Write G/D parameters and configs to a versioned container.

    Layout: magic, uint32 version, uint64 header length, UTF-8 JSON header,
    then raw little-endian tensor bytes at the offsets listed in the header.
    The file is written to a temporary name and renamed, so an interrupted
    write never clobbers an existing checkpoint.
    """
    path = Path(path)
    if isinstance(state, TrainState):
        modules = {"G": state.G, "D": state.D}
        gen_cfg, disc_cfg, epoch = state.gen_cfg, state.disc_cfg, state.epoch
    else:
        modules = {k: state[k] for k in ("G", "D") if state.get(k) is not None}
        gen_cfg, disc_cfg, epoch = state["gen_cfg"], state.get("disc_cfg"), state.get("epoch", 0)
    blobs, index, offset = [], [], 0
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().contiguous().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            index.append({"name": f"{prefix}.{name}", "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "format_version": CKPT_VERSION,
        "package_version": __version__,
        "generator_config": gen_cfg.to_dict(),
        "discriminator_config": disc_cfg.to_dict() if disc_cfg is not None else None,
        "epoch": epoch,
        "init": {"scheme": "normal", "std": INIT_STD, "bias": 0.0},
        "meta": meta or {},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)))
            fh.write(head)
            for raw in blobs:
                fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def checkpoint_load(path) -> dict:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a selenorm checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads version {CKPT_VERSION}"
        )
    start = _CKPT_HEAD.size
    if len(data) < start + hlen:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[start : start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    body = start + hlen
    states = {"G": {}, "D": {}}
    for t in header["tensors"]:
        lo = body + t["offset"]
        hi = lo + t["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: truncated tensor data for {t['name']}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        prefix, name = t["name"].split(".", 1)
        states[prefix][name] = torch.from_numpy(arr.copy())
    gen_cfg = GeneratorConfig(**header["generator_config"])
    disc_cfg = DiscriminatorConfig(**header["discriminator_config"]) if header["discriminator_config"] else None
    return {
        "header": header,
        "gen_cfg": gen_cfg,
        "disc_cfg": disc_cfg,
        "G_state": states["G"],
        "D_state": states["D"],
        "epoch": header["epoch"],
        "meta": header.get("meta", {}),
    }


def load_generator(path, overrides: dict | None = None):
    """Generator from a checkpoint in eval mode.

    ``overrides`` (e.g. from CLI flags) must agree with the stored
    architecture; a conflict raises instead of silently rebuilding.
    """
    ckpt = checkpoint_load(path)
    stored = ckpt["gen_cfg"].to_dict()
    for key, value in (overrides or {}).items():
        if value is not None and key in stored and stored[key] != value:
            raise ConfigurationError(
                f"checkpoint has {key}={stored[key]!r} but {value!r} was requested"
            )
    G = build_generator(ckpt["gen_cfg"])
    G.load_state_dict(ckpt["G_state"])
    G.eval()
    return G, ckpt


def restore_discriminator(ckpt: dict):
    D = build_discriminator(ckpt["disc_cfg"])
    D.load_state_dict(ckpt["D_state"])
    D.eval()
    return D


# -- run loop ---------------------------------------------------------------------------


def environment_descriptor() -> dict:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "selenorm": __version__,
        "threads": torch.get_num_threads(),
    }


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow([rec["epoch"]] + [repr(float(rec[k])) for k in HISTORY_FIELDS[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def train(
    dataset,
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    out_dir,
    clahe_cfg: ClaheConfig | None = None,
    apply_clahe: bool = True,
    dataset_manifest_path=None,
    extra_manifest: dict | None = None,
) -> RunArtifacts:
    """Full training run over the train split with validation-driven early stopping.

    Every grid patch of every training pair is visited once per epoch in a
    freshly shuffled order. Checkpoints land in ``out_dir/checkpoints``; the
    per-epoch loss history is rewritten to ``loss_history.csv`` after each
    epoch and the run manifest to ``run_manifest.json``.
    """
    if cfg.patch_size % gen_cfg.multiple:
        raise ConfigurationError(
            f"patch_size {cfg.patch_size} not divisible by 2^depth = {gen_cfg.multiple}"
        )
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        set_deterministic(True)

    entries = list(dataset)
    xs, ys = load_split(entries, "train", cfg.patch_size, clahe_cfg, apply_clahe)
    vx, vy = load_split(entries, "val", cfg.patch_size, clahe_cfg, apply_clahe)
    if len(xs) == 0 or len(vx) == 0:
        raise ConfigurationError("training needs non-empty train and val splits")
    log.info("training on %d patches, validating on %d", len(xs), len(vx))

    state = init_state(gen_cfg, disc_cfg, cfg)
    weights = cfg.loss_weights
    rng = philox(derive_seed(cfg.seed, "shuffle"))
    stopper = EarlyStopping(cfg.early_stop_patience)
    history, checkpoints = [], []
    history_path = out / "loss_history.csv"
    manifest_path = out / "run_manifest.json"
    manifest = {
        "schema": "selenorm.run/1",
        "train_config": cfg.to_dict(),
        "generator_config": gen_cfg.to_dict(),
        "discriminator_config": disc_cfg.to_dict(),
        "clahe_config": asdict(clahe_cfg or ClaheConfig()),
        "clahe_applied_to": "inputs" if apply_clahe else "none",
        "weight_init": {"scheme": "normal", "std": INIT_STD, "bias": 0.0},
        "seeds": {"root": cfg.seed, "G": derive_seed(cfg.seed, "G"), "D": derive_seed(cfg.seed, "D")},
        "dataset_manifest_sha256": file_digest(dataset_manifest_path) if dataset_manifest_path else None,
        "train_patches": int(len(xs)),
        "val_patches": int(len(vx)),
        "environment": environment_descriptor(),
    }
    manifest.update(extra_manifest or {})
    stopped_early = False

    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        order = rng.permutation(len(xs))
        sums = {k: 0.0 for k in HISTORY_FIELDS[1:5]}
        steps = 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            pairs = [
                augment((xs[j], ys[j]), rng, cfg.augment_hflip, cfg.augment_intensity_scale)
                for j in idx
            ]
            batch = (to_model([p[0] for p in pairs]), to_model([p[1] for p in pairs]))
            rec = train_step(batch, state, weights, cfg.d_steps, dump_dir=out)
            for k in sums:
                sums[k] += rec[k]
            steps += 1
        val_total = validation_loss(state, vx, vy, weights, cfg.batch_size)
        record = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}, "val_total": val_total}
        history.append(record)
        write_history(history_path, history)
        stop = stopper.update(val_total)
        log.info("epoch %d: %s", epoch, record)
        meta = {"val_total": val_total}
        if stopper.improved:
            checkpoint_save(state, ckpt_dir / "best.ckpt", meta)
            if ckpt_dir / "best.ckpt" not in checkpoints:
                checkpoints.append(ckpt_dir / "best.ckpt")
        if epoch % cfg.checkpoint_every == 0:
            checkpoints.append(checkpoint_save(state, ckpt_dir / f"epoch_{epoch:04d}.ckpt", meta))
        if stop:
            stopped_early = epoch < cfg.epochs
            break

    last = ckpt_dir / "last.ckpt"
    checkpoint_save(state, last, {"val_total": history[-1]["val_total"]})
    checkpoints.append(last)
    manifest.update(
        {
            "completed_epochs": len(history),
            "best_epoch": stopper.best_epoch,
            "best_val_total": stopper.best,
            "stopped_early": stopped_early,
            "checkpoints": [str(p.relative_to(out)) for p in checkpoints],
        }
    )
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return RunArtifacts(out, checkpoints, history, manifest_path, history_path, stopper.best_epoch, stopped_early)


def with_overrides(cfg, **overrides):
    """dataclasses.replace that ignores ``None`` values."""
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


__all__ = [
    "EarlyStopping",
    "RunArtifacts",
    "TrainConfig",
    "TrainState",
    "augment",
    "checkpoint_load",
    "checkpoint_save",
    "init_state",
    "load_generator",
    "train",
    "train_step",
]
