"""Training loops, early stopping and the ablation grid.

Three paradigms share one loop:

* ``pix2pix_unet`` / ``pix2pix_resnet``: one PatchGAN step then one generator
  step per batch; generator objective ``L_GAN + lambda_l1 * L1``.
* ``regression_unet``: ``L1``.
* ``ddpm``: noise-prediction MSE; the variance term, when enabled, is applied
  to the denoised estimate reconstructed from the predicted noise.

Validation loss is the reconstruction objective without the adversarial term
(``lambda_l1 * L1`` for pix2pix, ``L1`` for regression, noise MSE at fixed
seeded timesteps for ddpm) plus ``lambda_var * L_var`` when enabled.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import to_unit_range
from .errors import ConfigurationError, DataError, NumericalError
from .losses import (
    LossConfig, base_loss, discriminator_loss, total_loss, variance_loss,
)
from .models import (
    DiffusionSchedule, DiscriminatorSpec, GeneratorSpec, build_denoiser, build_discriminator,
    build_generator, ddpm_train_step, predict_x0, save_checkpoint,
)
from .prior import IntensityBackend, binarize, generate_soft_prior
from .runs import config_hash, update_run_manifest, write_run_manifest

log = logging.getLogger(__name__)

ARCHS = ("pix2pix_unet", "pix2pix_resnet", "regression_unet", "ddpm")
PRIOR_MODES = ("none", "binary", "soft")
CONDITIONS = (
    ("None", "none", False),
    ("Binary", "binary", False),
    ("Soft", "soft", False),
    ("Soft+Var", "soft", True),
)
CONTROLLED_KEYS = frozenset({"in_channels", "prior_mode", "use_var_loss"})
CONFIG_SCHEMA_VERSION = 1
IMPROVEMENT_EPS = 1e-6

# Optimizer settings and epoch budgets per architecture.
PAPER_DEFAULTS = {
    "pix2pix_unet": {"lr": 2e-4, "beta1": 0.5, "beta2": 0.999, "epochs": 1000},
    "pix2pix_resnet": {"lr": 2e-4, "beta1": 0.5, "beta2": 0.999, "epochs": 1000},
    "regression_unet": {"lr": 1e-4, "beta1": 0.9, "beta2": 0.999, "epochs": 150},
    "ddpm": {"lr": 2e-4, "beta1": 0.9, "beta2": 0.999, "epochs": 1000},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, versioned run description.  Every field is a CLI ``--set key=value`` override."""

    schema_version: int = CONFIG_SCHEMA_VERSION
    arch: str = "regression_unet"
    prior_mode: str = "soft"
    use_var_loss: bool = True
    in_channels: int = 4
    out_channels: int = 3
    lambda_var: float = 50.0
    kernel_k: int = 15
    lambda_l1: float = 100.0
    optimizer: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 150
    batch_size: int = 16
    patience: int = 20
    seed: int = 0
    dataset: str = ""
    layout: str = "deepliif_like"
    image_size: int = 256
    base_width: int = 32
    depth: int = 4
    n_blocks: int = 6
    disc_width: int = 64
    disc_layers: int = 3
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    binarize_threshold: float = 0.5
    prior_backend: str = "file"
    deterministic: bool = True

    @property
    def base_kind(self) -> str:
        if self.arch.startswith("pix2pix"):
            return "adversarial_l1"
        return "diffusion_noise" if self.arch == "ddpm" else "l1_regression"

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_var, self.kernel_k, self.lambda_l1, self.base_kind)

    @property
    def condition(self) -> str:
        for name, mode, var in CONDITIONS:
            if mode == self.prior_mode and var == self.use_var_loss:
                return name
        return f"{self.prior_mode}{'+var' if self.use_var_loss else ''}"

    def validate(self) -> None:
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported config schema version {self.schema_version}")
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown arch {self.arch!r}; choose from {ARCHS}")
        if self.prior_mode not in PRIOR_MODES:
            raise ConfigurationError(f"unknown prior_mode {self.prior_mode!r}")
        expected = 3 if self.prior_mode == "none" else 4
        if self.in_channels != expected:
            raise ConfigurationError(
                f"prior_mode={self.prior_mode!r} requires in_channels={expected}, got {self.in_channels}"
            )
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if self.kernel_k > self.image_size:
            raise ConfigurationError("kernel_k exceeds image_size")
        if self.prior_backend not in ("file", "intensity"):
            raise ConfigurationError(f"unknown prior_backend {self.prior_backend!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("epochs, batch_size and patience must be positive")
        self.loss  # LossConfig validates k and weights
        multiple = 4 if self.arch == "pix2pix_resnet" else 2 ** self.depth
        if self.image_size % multiple:
            raise ConfigurationError(f"image_size must be divisible by {multiple} for {self.arch}")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**{k: _coerce(k, v) for k, v in d.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    kind = _FIELD_TYPES.get(key)
    if kind in ("bool", bool):
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigurationError(f"cannot read {value!r} as a boolean for {key}")
        return bool(value)
    try:
        if kind in ("int", int):
            return int(value)
        if kind in ("float", float):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad value {value!r} for {key}") from exc
    return str(value) if kind in ("str", str) else value


def apply_overrides(cfg: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """Apply ``key=value`` strings.  ``prior_mode`` changes also fix ``in_channels``."""
    updates = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in _FIELD_TYPES:
            raise ConfigurationError(f"bad override {item!r}")
        updates[key] = _coerce(key, value.strip())
    if "prior_mode" in updates and "in_channels" not in updates:
        updates["in_channels"] = 3 if updates["prior_mode"] == "none" else 4
    return replace(cfg, **updates)


def paper_config(arch: str, **overrides) -> ExperimentConfig:
    """Config with the published optimizer settings and budget for ``arch``."""
    if arch not in ARCHS:
        raise ConfigurationError(f"unknown arch {arch!r}")
    d = dict(PAPER_DEFAULTS[arch], arch=arch)
    if arch == "ddpm":
        d["use_var_loss"] = False
    d.update(overrides)
    if "prior_mode" in d and "in_channels" not in d:
        d["in_channels"] = 3 if d["prior_mode"] == "none" else 4
    return ExperimentConfig(**d)


def with_condition(cfg: ExperimentConfig, prior_mode: str, use_var_loss: bool) -> ExperimentConfig:
    return replace(cfg, prior_mode=prior_mode, use_var_loss=use_var_loss,
                   in_channels=3 if prior_mode == "none" else 4)


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> set[str]:
    da, db = a.to_dict(), b.to_dict()
    return {k for k in da if da[k] != db[k]}


def check_controlled_comparison(baseline: ExperimentConfig, proposed: ExperimentConfig) -> None:
    """Baseline and +Prior configs may differ only in the prior input and the variance term."""
    diff = config_diff(baseline, proposed)
    if diff != CONTROLLED_KEYS:
        raise ConfigurationError(
            f"baseline and +Prior configs must differ in exactly {sorted(CONTROLLED_KEYS)}, got {sorted(diff)}"
        )


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    improvements: list[tuple[int, float]] = field(default_factory=list)

    def update(self, val_loss: float) -> bool:
        """Record one completed validation pass; returns whether it improved."""
        self.epoch += 1
        if val_loss < self.best_val_loss - IMPROVEMENT_EPS:
            self.best_val_loss = float(val_loss)
            self.best_epoch = self.epoch
            self.epochs_since_improvement = 0
            self.improvements.append((self.epoch, float(val_loss)))
            return True
        self.epochs_since_improvement += 1
        return False


def early_stop_check(state: TrainState, patience: int) -> str:
    return "stop" if state.epochs_since_improvement >= patience else "continue"


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

def prior_map(sample, cfg: ExperimentConfig) -> np.ndarray:
    """[0,1] prior for ``sample`` under ``cfg.prior_mode`` (soft map or binarized mask)."""
    if sample.prior is not None and cfg.prior_backend == "file":
        prior = sample.prior
    elif cfg.prior_backend == "intensity":
        prior = generate_soft_prior(sample.ihc, IntensityBackend(), sample.key)
    else:
        raise DataError(f"{sample.key}: no precomputed prior and prior_backend={cfg.prior_backend!r}")
    if cfg.prior_mode == "binary":
        return binarize(prior, cfg.binarize_threshold).mask.astype(np.float32)
    return prior.prob


def input_tensor(samples, cfg: ExperimentConfig) -> torch.Tensor:
    """N x in_channels x H x W network input in [-1, 1]."""
    xs = []
    for s in samples:
        x = to_unit_range(s.ihc.data, s.ihc.value_range)
        if cfg.prior_mode != "none":
            x = np.concatenate([x, prior_map(s, cfg)[:, :, None]], axis=2)
        xs.append(x.transpose(2, 0, 1) * 2.0 - 1.0)
    return torch.tensor(np.stack(xs), dtype=torch.float32)


def target_tensor(samples) -> torch.Tensor:
    ys = [to_unit_range(s.mif.data, s.mif.value_range).transpose(2, 0, 1) * 2.0 - 1.0 for s in samples]
    return torch.tensor(np.stack(ys), dtype=torch.float32)


def select_split(samples, splits, split: str) -> list:
    cases = set(splits.cases(split))
    return [s for s in samples if s.case_id in cases]


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Holds networks and optimizers for one experiment and runs single steps."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.loss_cfg = cfg.loss
        if cfg.arch == "ddpm":
            self.schedule = DiffusionSchedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
            self.model = build_denoiser(cfg.in_channels, cfg.out_channels, cfg.base_width, cfg.depth)
        else:
            self.schedule = None
            g_arch = "resnet" if cfg.arch == "pix2pix_resnet" else "unet"
            self.model = build_generator(GeneratorSpec(g_arch, cfg.in_channels, cfg.out_channels,
                                                       cfg.base_width, cfg.depth, cfg.n_blocks))
        betas = (cfg.beta1, cfg.beta2)
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, betas=betas)
        self.disc = None
        if cfg.base_kind == "adversarial_l1":
            self.disc = build_discriminator(
                DiscriminatorSpec(cfg.in_channels + cfg.out_channels, cfg.disc_width, cfg.disc_layers))
            self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr, betas=betas)
        self.noise_gen = torch.Generator().manual_seed(cfg.seed + 1)

    def _var(self, pred, target):
        if not self.cfg.use_var_loss:
            return None
        return variance_loss(pred, target, self.cfg.kernel_k)

    def step(self, x, y, batch_id) -> dict:
        cfg = self.cfg
        self.model.train()
        if cfg.arch == "ddpm":
            n = y.shape[0]
            t = torch.randint(1, self.schedule.T + 1, (n,), generator=self.noise_gen)
            noise = torch.randn(y.shape, generator=self.noise_gen)
            eps, y_t = ddpm_train_step(self.schedule, self.model, x, y, t, noise, return_noisy=True)
            base = base_loss("diffusion_noise", eps, noise)
            var = self._var(predict_x0(self.schedule, y_t, t, eps), y) if cfg.use_var_loss else None
        else:
            pred = self.model(x)
            if self.disc is not None:
                self.disc.train()
                self.opt_d.zero_grad()
                d_loss = discriminator_loss(self.disc(x, y), self.disc(x, pred.detach()))
                if not torch.isfinite(d_loss):
                    raise NumericalError(f"non-finite discriminator loss at batch {batch_id}")
                d_loss.backward()
                self.opt_d.step()
                base = base_loss("adversarial_l1", pred, y, self.disc(x, pred), cfg.lambda_l1)
            else:
                base = base_loss("l1_regression", pred, y)
            var = self._var(pred, y)
        var_term = var if var is not None else torch.zeros((), dtype=base.dtype)
        total = total_loss(base, var_term, self.loss_cfg, batch_id)
        self.opt.zero_grad()
        total.backward()
        self.opt.step()
        return {"L_base": base.item(), "L_var": var.item() if var is not None else None,
                "L_total": total.item()}

    @torch.no_grad()
    def validation_loss(self, x, y) -> float:
        cfg = self.cfg
        self.model.eval()
        gen = torch.Generator().manual_seed(cfg.seed + 12345)
        totals, count = 0.0, 0
        for i in range(0, x.shape[0], cfg.batch_size):
            xb, yb = x[i:i + cfg.batch_size], y[i:i + cfg.batch_size]
            if cfg.arch == "ddpm":
                t = torch.randint(1, self.schedule.T + 1, (yb.shape[0],), generator=gen)
                noise = torch.randn(yb.shape, generator=gen)
                eps, y_t = ddpm_train_step(self.schedule, self.model, xb, yb, t, noise, return_noisy=True)
                loss = F.mse_loss(eps, noise)
                if cfg.use_var_loss:
                    loss = loss + cfg.lambda_var * variance_loss(predict_x0(self.schedule, y_t, t, eps), yb, cfg.kernel_k)
            else:
                pred = self.model(xb)
                l1 = F.l1_loss(pred, yb)
                loss = cfg.lambda_l1 * l1 if self.disc is not None else l1
                if cfg.use_var_loss:
                    loss = loss + cfg.lambda_var * variance_loss(pred, yb, cfg.kernel_k)
            totals += float(loss) * xb.shape[0]
            count += xb.shape[0]
        return totals / count

    def save(self, path, extra: dict) -> None:
        spec = self.model.spec
        save_checkpoint(
            path, config=self.cfg.to_dict(), generator_spec=spec,
            generator_state={k: v.clone() for k, v in self.model.state_dict().items()},
            discriminator_state=self.disc.state_dict() if self.disc is not None else None,
            schedule=self.schedule, extra=extra,
        )


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path | None
    epochs_run: int
    final_train_loss: float
    best_val_loss: float
    best_epoch: int
    stopped_early: bool
    epoch_log: list[dict]


STEP_FIELDS = ["step", "L_base", "L_var", "L_total", "lambda_var", "k"]
EPOCH_FIELDS = ["epoch", "train_L_base", "train_L_var", "train_L_total", "val_loss",
                "best_val_loss", "epochs_since_improvement", "improved"]


def _fmt(v):
    return "" if v is None else v


def train(cfg: ExperimentConfig, samples, splits, out_dir, command: str = "train") -> TrainResult:
    """Train one experiment on the train split, early-stopping on the val split.

    Writes ``run_manifest.json`` (first), ``config.json``, ``train.log``,
    ``epoch_log.csv``, ``step_log.csv`` and ``checkpoint.pt`` (best validation
    weights) into ``out_dir``.
    """
    cfg.validate()
    out = Path(out_dir)
    train_samples = select_split(samples, splits, "train")
    val_samples = select_split(samples, splits, "val")
    test_cases = set(splits.cases("test"))
    seen = {s.case_id for s in train_samples} | {s.case_id for s in val_samples}
    if seen & test_cases:
        raise DataError(f"test cases reached the optimizer: {sorted(seen & test_cases)}")
    if not train_samples or not val_samples:
        raise DataError("training needs non-empty train and val splits")
    k = train_samples[0].mif.channels
    if k != cfg.out_channels:
        raise ConfigurationError(f"config out_channels={cfg.out_channels} but dataset has {k} channels")
    if train_samples[0].ihc.height != cfg.image_size:
        raise ConfigurationError(f"samples are {train_samples[0].ihc.height}px, config image_size={cfg.image_size}")

    write_run_manifest(out, command, cfg.to_dict(), cfg.seed, condition=cfg.condition,
                       arch=cfg.arch)
    cfg.save(out / "config.json")
    handler = logging.FileHandler(out / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    prev_level, prev_propagate = log.level, log.propagate
    log.setLevel(logging.INFO)
    log.propagate = logging.getLogger().isEnabledFor(logging.INFO)
    prev_det = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(cfg.deterministic)
    try:
        return _train_loop(cfg, train_samples, val_samples, out, splits)
    finally:
        torch.use_deterministic_algorithms(prev_det)
        log.removeHandler(handler)
        log.setLevel(prev_level)
        log.propagate = prev_propagate
        handler.close()


def _train_loop(cfg, train_samples, val_samples, out: Path, splits) -> TrainResult:
    log.info("config %s", json.dumps(cfg.to_dict(), sort_keys=True))
    log.info("train cases=%d patches=%d; val cases=%d patches=%d",
             len({s.case_id for s in train_samples}), len(train_samples),
             len({s.case_id for s in val_samples}), len(val_samples))
    update_run_manifest(out, accessed_cases={
        s.case_id: splits.split_of(s.case_id) for s in train_samples + val_samples})
    x_train, y_train = input_tensor(train_samples, cfg), target_tensor(train_samples)
    x_val, y_val = input_tensor(val_samples, cfg), target_tensor(val_samples)

    trainer = Trainer(cfg)
    state = TrainState()
    shuffle = torch.Generator().manual_seed(cfg.seed)
    ckpt = out / "checkpoint.pt"
    step = 0
    epoch_rows: list[dict] = []
    final_train_loss = math.nan
    stopped = False
    with open(out / "step_log.csv", "w", newline="") as sfh, open(out / "epoch_log.csv", "w", newline="") as efh:
        step_w = csv.DictWriter(sfh, fieldnames=STEP_FIELDS)
        epoch_w = csv.DictWriter(efh, fieldnames=EPOCH_FIELDS)
        step_w.writeheader()
        epoch_w.writeheader()
        for epoch in range(1, cfg.epochs + 1):
            order = torch.randperm(x_train.shape[0], generator=shuffle)
            sums = {"L_base": 0.0, "L_var": 0.0, "L_total": 0.0}
            n_batches = 0
            for b in range(0, len(order), cfg.batch_size):
                idx = order[b:b + cfg.batch_size]
                step += 1
                try:
                    terms = trainer.step(x_train[idx], y_train[idx], f"epoch{epoch}/batch{b // cfg.batch_size}")
                except NumericalError:
                    log.error("aborting on non-finite loss; best checkpoint kept at %s", ckpt)
                    raise
                step_w.writerow({"step": step, "L_base": terms["L_base"], "L_var": _fmt(terms["L_var"]),
                                 "L_total": terms["L_total"], "lambda_var": cfg.lambda_var, "k": cfg.kernel_k})
                for key in sums:
                    sums[key] += terms[key] or 0.0
                n_batches += 1
            final_train_loss = sums["L_total"] / n_batches
            val = trainer.validation_loss(x_val, y_val)
            if not math.isfinite(val):
                raise NumericalError(f"non-finite validation loss at epoch {epoch}")
            improved = state.update(val)
            if improved:
                trainer.save(ckpt, {"epoch": epoch, "val_loss": val})
            row = {
                "epoch": epoch,
                "train_L_base": sums["L_base"] / n_batches,
                "train_L_var": sums["L_var"] / n_batches if cfg.use_var_loss else "",
                "train_L_total": final_train_loss,
                "val_loss": val,
                "best_val_loss": state.best_val_loss,
                "epochs_since_improvement": state.epochs_since_improvement,
                "improved": int(improved),
            }
            epoch_w.writerow(row)
            efh.flush()
            epoch_rows.append(row)
            log.info("epoch %d train %.6f val %.6f best %.6f", epoch, final_train_loss, val, state.best_val_loss)
            if early_stop_check(state, cfg.patience) == "stop":
                log.info("early stop after epoch %d (best epoch %d)", epoch, state.best_epoch)
                stopped = True
                break
    return TrainResult(out, ckpt if ckpt.exists() else None, state.epoch, final_train_loss,
                       state.best_val_loss, state.best_epoch, stopped, epoch_rows)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

@dataclass
class GridCell:
    arch: str
    condition: str
    config: ExperimentConfig
    run_dir: Path
    checkpoint: Path | None = None
    report: object | None = None
    error: str | None = None
    logged_var: bool = False


def grid_configs(base_cfg: ExperimentConfig, archs: Sequence[str],
                 conditions=CONDITIONS, paper_optimizers: bool = True) -> list[tuple[str, str, ExperimentConfig]]:
    """Configs in table order (architecture-major, then None/Binary/Soft/Soft+Var)."""
    out = []
    for arch in archs:
        arch_cfg = replace(base_cfg, arch=arch)
        if paper_optimizers:
            opt = {k: v for k, v in PAPER_DEFAULTS[arch].items() if k != "epochs"}
            arch_cfg = replace(arch_cfg, **opt)
        by_name = {}
        for name, mode, var in conditions:
            by_name[name] = with_condition(arch_cfg, mode, var)
            out.append((arch, name, by_name[name]))
        if "None" in by_name and "Soft+Var" in by_name:
            check_controlled_comparison(by_name["None"], by_name["Soft+Var"])
        for cfg in by_name.values():
            extra = config_diff(by_name[next(iter(by_name))], cfg) - CONTROLLED_KEYS
            if extra:
                raise ConfigurationError(f"grid cells differ outside the controlled keys: {sorted(extra)}")
    return out


def _step_log_has_var(run_dir: Path) -> bool:
    path = run_dir / "step_log.csv"
    if not path.exists():
        return False
    with open(path) as fh:
        return any(row["L_var"] not in ("", None) for row in csv.DictReader(fh))


def _run_cell(args):
    arch, name, cfg, samples, splits, run_dir, evaluate = args
    from .evaluation import evaluate_protocol

    cell = GridCell(arch, name, cfg, Path(run_dir))
    try:
        res = train(cfg, samples, splits, run_dir, command=f"ablate:{arch}:{name}")
        cell.checkpoint = res.checkpoint
        if evaluate:
            cell.report = evaluate_protocol(res.checkpoint, samples, splits, Path(run_dir) / "eval")
    except Exception as exc:  # one failed cell must not stop the grid
        cell.error = f"{type(exc).__name__}: {exc}"
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        (Path(run_dir) / "error.txt").write_text(traceback.format_exc())
    cell.logged_var = _step_log_has_var(Path(run_dir))
    return cell


def run_ablation_grid(base_cfg: ExperimentConfig, samples, splits, out_dir,
                      archs: Sequence[str] = ("regression_unet", "pix2pix_unet"),
                      conditions=CONDITIONS, evaluate: bool = True, parallel: int = 1) -> list[GridCell]:
    """Train (and evaluate) every architecture x condition cell; failures are recorded per cell."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [
        (arch, name, cfg, samples, splits, out / f"{arch}__{name.replace('+', '_')}", evaluate)
        for arch, name, cfg in grid_configs(base_cfg, archs, conditions)
    ]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    write_grid_table(cells, out)
    return cells


def write_grid_table(cells: Sequence[GridCell], out_dir) -> None:
    from .report import format_markdown, table_rows_from_cells, write_csv

    rows = table_rows_from_cells(cells)
    write_csv(rows, Path(out_dir) / "ablation.csv")
    (Path(out_dir) / "ablation.md").write_text(format_markdown(rows))
