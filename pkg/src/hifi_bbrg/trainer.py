"""Joint training of the bridge predictor and the reconstruction cGAN.

Each batch runs one discriminator update followed by one update of the
predictor and generator together::

    t ~ U{1..T}, noise ~ N(0, I)
    x_t     = forward_sample(x_0, x_T, t, noise)
    pred    = eps(x_t, x_T, t)                 -> l_diff
    x0_hat  = x_t - pred
    xT_hat  = G(x0_hat)                        -> l_fidelity
    D step on (xT_hat.detach(), x_T)           -> l_adv_d
    eps + G step on l_diff + lam * l_fidelity + l_adv_g

The ablation flags switch terms off to give the plain bridge (no condition,
no reconstruction), the conditional bridge (condition only) and the full
model (everything on).
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import torch

from .bridge import ScheduleParams, forward_sample
from .data import PairedDataset
from .nets import ModelBundle, ModelConfig, build_models, epsilon_forward
from .objectives import (
    LossRecord,
    NonFiniteLossError,
    diffusion_loss,
    discriminator_loss,
    fidelity_loss,
    generator_adversarial_loss,
    total_generator_loss,
)

log = logging.getLogger(__name__)

ABLATIONS = {
    "bbrg": dict(use_condition=False, use_reconstruction=False, use_adversarial=False),
    "conditional-bbrg": dict(use_condition=True, use_reconstruction=False, use_adversarial=False),
    "hifi-bbrg": dict(use_condition=True, use_reconstruction=True, use_adversarial=True),
}
HISTORY_COLUMNS = ("step", "l_diff", "l_fidelity", "l_adv_d", "l_adv_g", "l_total_gen")

CHECKPOINT_MAGIC = b"HBBRGCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    Defaults follow the reference setup: Adam at 2e-5 for the predictor and
    generator, 2e-4 for the discriminator, fidelity weight 1 and 1000 bridge
    steps.  Desk-scale runs usually raise the learning rates and cut epochs.
    """

    total_steps: int = 1000
    lambda_fidelity: float = 1.0
    lr_epsilon: float = 2e-5
    lr_generator: float = 2e-5
    lr_discriminator: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    epochs: int = 1000
    seed: int = 0
    use_condition: bool = True
    use_reconstruction: bool = True
    use_adversarial: bool = True
    norm_kind: str = "l1"
    per_sample_t: bool = False
    checkpoint_every: int = 0
    early_stop_patience: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if min(self.lr_epsilon, self.lr_generator, self.lr_discriminator) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lambda_fidelity < 0:
            raise ConfigError("lambda_fidelity must be non-negative")
        if self.norm_kind not in ("l1", "l2"):
            raise ConfigError(f"norm_kind must be 'l1' or 'l2', got {self.norm_kind!r}")
        if self.use_adversarial and not self.use_reconstruction:
            raise ConfigError("use_adversarial requires use_reconstruction")
        object.__setattr__(self, "betas", tuple(self.betas))

    @property
    def effective_lambda(self) -> float:
        return self.lambda_fidelity if self.use_reconstruction else 0.0

    def with_ablation(self, name: str) -> "TrainConfig":
        try:
            return replace(self, **ABLATIONS[name])
        except KeyError:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}") from None

    @property
    def variant(self) -> str:
        for name, flags in ABLATIONS.items():
            if all(getattr(self, k) == v for k, v in flags.items()):
                return name
        return "custom"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CheckpointMeta:
    config: dict
    epoch: int
    step: int
    batch_index: int
    models: dict[str, dict]
    optimizers: dict[str, dict]
    rng_state: torch.Tensor
    history: list[dict]
    model_spec: dict | None = None
    format_version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)


def _param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Owns the models, their optimizers, the training RNG and the loss history."""

    def __init__(self, models: ModelBundle, cfg: TrainConfig, model_spec: dict | None = None):
        if models.conditional != cfg.use_condition:
            raise ConfigError(
                f"epsilon net conditional={models.conditional} does not match use_condition={cfg.use_condition}"
            )
        self.models = models
        self.cfg = cfg
        self.model_spec = model_spec
        self.sched = ScheduleParams(cfg.total_steps)
        self.opt_epsilon = torch.optim.Adam(models.epsilon_net.parameters(), lr=cfg.lr_epsilon, betas=cfg.betas)
        self.opt_generator = torch.optim.Adam(models.generator.parameters(), lr=cfg.lr_generator, betas=cfg.betas)
        self.opt_discriminator = torch.optim.Adam(
            models.discriminator.parameters(), lr=cfg.lr_discriminator, betas=cfg.betas
        )
        self.rng = torch.Generator().manual_seed(int(cfg.seed))
        self.step = 0
        self.epoch = 0
        self.batch_index = 0
        self.history: list[dict] = []

    @classmethod
    def from_config(cls, model_cfg: ModelConfig, cfg: TrainConfig, image_channels: int,
                    image_size: int | None = None) -> "Trainer":
        models = build_models(model_cfg, image_channels, cfg.seed, conditional=cfg.use_condition,
                              image_size=image_size)
        spec = {"model_config": model_cfg.to_dict(), "image_channels": image_channels, "image_size": image_size}
        return cls(models, cfg, model_spec=spec)

    # -- one batch -------------------------------------------------------

    def _draw_time(self, batch: int):
        T = self.cfg.total_steps
        if self.cfg.per_sample_t:
            return torch.randint(1, T + 1, (batch,), generator=self.rng)
        return int(torch.randint(1, T + 1, (1,), generator=self.rng))

    def train_step(self, x_T: torch.Tensor, x_0: torch.Tensor) -> LossRecord:
        if x_T.shape != x_0.shape:
            raise ValueError(f"batch shape mismatch: {tuple(x_T.shape)} vs {tuple(x_0.shape)}")
        cfg, m = self.cfg, self.models
        T = cfg.total_steps
        t = self._draw_time(x_0.shape[0])
        noise = torch.randn(x_0.shape, generator=self.rng, dtype=torch.float64).to(x_0.dtype)
        x_t = forward_sample(x_0, x_T, t, noise, self.sched)

        pred = epsilon_forward(m.epsilon_net, x_t, x_T, t, T)
        l_diff = diffusion_loss(pred, x_t, x_0, cfg.norm_kind)
        x0_hat = x_t - pred
        zero = torch.zeros((), dtype=x_0.dtype)
        l_fid, l_adv_d, l_adv_g = zero, zero, zero

        if cfg.use_reconstruction:
            xT_hat = m.generator(x0_hat)
            l_fid = fidelity_loss(x_T, xT_hat, cfg.norm_kind)
        if cfg.use_adversarial:
            self.opt_discriminator.zero_grad(set_to_none=True)
            l_adv_d = discriminator_loss(m.discriminator(xT_hat.detach()), m.discriminator(x_T))
            self._check_finite("l_adv_d", l_adv_d)
            l_adv_d.backward()
            self.opt_discriminator.step()
            m.discriminator.requires_grad_(False)
            try:
                l_adv_g = generator_adversarial_loss(m.discriminator(xT_hat))
            finally:
                m.discriminator.requires_grad_(True)

        for name, v in (("l_diff", l_diff), ("l_fidelity", l_fid), ("l_adv_g", l_adv_g)):
            self._check_finite(name, v)
        total = total_generator_loss(l_diff, l_fid, l_adv_g, cfg.effective_lambda)
        self.opt_epsilon.zero_grad(set_to_none=True)
        self.opt_generator.zero_grad(set_to_none=True)
        total.backward()
        self.opt_epsilon.step()
        if cfg.use_reconstruction:
            self.opt_generator.step()

        self.step += 1
        rec = LossRecord(
            l_diff=float(l_diff.detach()), l_fidelity=float(l_fid.detach()), l_adv_d=float(l_adv_d.detach()),
            l_adv_g=float(l_adv_g.detach()), l_total_gen=float(total.detach()),
        )
        self.history.append({"step": self.step, **rec.as_dict()})
        return rec

    @staticmethod
    def _check_finite(name: str, value: torch.Tensor) -> None:
        if not bool(torch.isfinite(value).all()):
            raise NonFiniteLossError(name, float(value))

    # -- epochs ----------------------------------------------------------

    def epoch_order(self, n: int, epoch: int) -> torch.Tensor:
        gen = torch.Generator().manual_seed(int(self.cfg.seed) * 1_000_003 + epoch)
        return torch.randperm(n, generator=gen)

    def fit(
        self,
        dataset: PairedDataset,
        out_dir: str | Path | None = None,
        val_dataset: PairedDataset | None = None,
        max_batches: int | None = None,
        on_epoch: Callable[["Trainer", dict], None] | None = None,
    ) -> list[dict]:
        """Train until the epoch budget is spent (or validation PSNR plateaus).

        Resumes from ``self.epoch`` / ``self.batch_index``, so calling ``fit``
        on a trainer restored from a checkpoint continues the exact same run.
        ``max_batches`` stops after that many train steps in this call, which
        is how a run is paused mid-epoch.
        """
        n = len(dataset)
        if n == 0:
            raise ValueError("empty dataset")
        bs = self.cfg.batch_size
        out_dir = Path(out_dir) if out_dir is not None else None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        best, stale = float("-inf"), 0
        done = 0

        while self.epoch < self.cfg.epochs:
            order = self.epoch_order(n, self.epoch)
            n_batches = (n + bs - 1) // bs
            while self.batch_index < n_batches:
                if max_batches is not None and done >= max_batches:
                    return self.history
                idx = order[self.batch_index * bs:(self.batch_index + 1) * bs]
                self.train_step(dataset.source[idx], dataset.target[idx])
                self.batch_index += 1
                done += 1
            epoch_rows = self.history[-n_batches:]
            summary = {
                "epoch": self.epoch,
                "l_diff": sum(r["l_diff"] for r in epoch_rows) / len(epoch_rows),
                "l_total_gen": sum(r["l_total_gen"] for r in epoch_rows) / len(epoch_rows),
            }
            self.epoch += 1
            self.batch_index = 0
            if val_dataset is not None and len(val_dataset):
                summary["val_psnr"] = self.validate(val_dataset)
            log.info("epoch %d/%d %s", self.epoch, self.cfg.epochs,
                     " ".join(f"{k}={v:.5g}" for k, v in summary.items() if k != "epoch"))
            if on_epoch is not None:
                on_epoch(self, summary)
            if out_dir is not None and self.cfg.checkpoint_every and self.epoch % self.cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / f"epoch_{self.epoch:05d}.ckpt", self)
            if self.cfg.early_stop_patience and "val_psnr" in summary:
                if summary["val_psnr"] > best:
                    best, stale = summary["val_psnr"], 0
                else:
                    stale += 1
                    if stale >= self.cfg.early_stop_patience:
                        log.info("validation PSNR plateaued for %d epochs; stopping", stale)
                        break

        if out_dir is not None:
            save_checkpoint(out_dir / "final.ckpt", self)
            write_history_csv(out_dir / "history.csv", self.history)
        return self.history

    def validate(self, dataset: PairedDataset, batch_size: int = 32) -> float:
        from .metrics import psnr
        from .sampler import sample_one_step

        preds = torch.cat([
            sample_one_step(dataset.source[i:i + batch_size], self.models.epsilon_net, self.sched)
            for i in range(0, len(dataset), batch_size)
        ])
        return sum(psnr(p, r) for p, r in zip(preds, dataset.target)) / len(dataset)

    # -- state -----------------------------------------------------------

    def parameter_digests(self) -> dict[str, str]:
        return {name: _param_digest(mod) for name, mod in self.models.modules().items()}

    def to_meta(self) -> CheckpointMeta:
        return CheckpointMeta(
            config=self.cfg.to_dict(),
            epoch=self.epoch,
            step=self.step,
            batch_index=self.batch_index,
            models={k: v.state_dict() for k, v in self.models.modules().items()},
            optimizers={
                "epsilon_net": self.opt_epsilon.state_dict(),
                "generator": self.opt_generator.state_dict(),
                "discriminator": self.opt_discriminator.state_dict(),
            },
            rng_state=self.rng.get_state(),
            history=[dict(r) for r in self.history],
            model_spec=self.model_spec,
        )

    def load_meta(self, meta: CheckpointMeta) -> None:
        for name, mod in self.models.modules().items():
            mod.load_state_dict(meta.models[name])
        self.opt_epsilon.load_state_dict(meta.optimizers["epsilon_net"])
        self.opt_generator.load_state_dict(meta.optimizers["generator"])
        self.opt_discriminator.load_state_dict(meta.optimizers["discriminator"])
        self.rng.set_state(meta.rng_state)
        self.epoch, self.step, self.batch_index = meta.epoch, meta.step, meta.batch_index
        self.history = [dict(r) for r in meta.history]

    @classmethod
    def from_checkpoint(cls, path: str | Path, models: ModelBundle | None = None) -> "Trainer":
        """Rebuild a trainer from disk; ``models`` is needed for custom (non-UNet) nets."""
        meta = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta.config)
        if models is None:
            if meta.model_spec is None:
                raise CheckpointError("checkpoint has no model spec; pass the model bundle explicitly")
            spec = meta.model_spec
            trainer = cls.from_config(ModelConfig(**spec["model_config"]), cfg, spec["image_channels"],
                                      spec.get("image_size"))
        else:
            trainer = cls(models, cfg, model_spec=meta.model_spec)
        trainer.load_meta(meta)
        return trainer


# -- checkpoint container ---------------------------------------------------

def save_checkpoint(path: str | Path, state: Trainer | CheckpointMeta, version: int = CHECKPOINT_VERSION) -> Path:
    """Write a checksummed, versioned checkpoint.

    Layout: ``magic(8) | version u32 | payload length u64 | sha256(32) | payload``
    where the payload is a ``torch.save`` archive of the checkpoint fields.
    """
    meta = state.to_meta() if isinstance(state, Trainer) else state
    buf = io.BytesIO()
    payload_obj = asdict(meta)
    payload_obj["format_version"] = version
    torch.save(payload_obj, buf)
    payload = buf.getvalue()
    header = _HEADER.pack(CHECKPOINT_MAGIC, version, len(payload), hashlib.sha256(payload).digest())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> CheckpointMeta:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CheckpointCorruptError(f"{path}: truncated header")
    magic, version, length, digest = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    payload = blob[_HEADER.size:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise CheckpointCorruptError(f"{path}: checksum mismatch (file truncated or modified)")
    obj = torch.load(io.BytesIO(payload), weights_only=True)
    return CheckpointMeta(**obj)


def write_history_csv(path: str | Path, history: list[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
    return path
