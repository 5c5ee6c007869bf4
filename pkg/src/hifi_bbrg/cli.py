"""Command-line entry point: ``hifi-bbrg <command> [options]``.

Every command reads an optional TOML config, applies flag overrides (flags
win), writes the fully resolved config next to its outputs and logs to
stderr.  Exit codes: 0 success, 1 internal error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .bridge import ScheduleParams, schedule_curve, write_schedule_csv
from .data import (
    DatasetError,
    PairedDataset,
    SyntheticTaskSpec,
    generate_synthetic_pairs,
    load_image_folder,
    load_paired_folder,
    split,
    write_paired_folder,
)
from .imagefiles import read_raw, write_heatmap, write_png, write_raw
from .metrics import MetricReport, MetricRow, emit_report, evaluate_pair_set, format_markdown
from .nets import ModelConfig
from .objectives import NonFiniteLossError
from .sampler import SampleRequest, sample_multi_step
from .trainer import ABLATIONS, CheckpointError, ConfigError, TrainConfig, Trainer

log = logging.getLogger("hifi_bbrg")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2
RESOLVED_NAME = "config.resolved.toml"


class UsageError(Exception):
    pass


@dataclass
class DataOptions:
    root: str = ""
    size: int = 64
    val_fraction: float = 0.0
    test_fraction: float = 0.2
    split_seed: int = 0


@dataclass
class SampleOptions:
    steps: int = 1
    stochastic: bool = False
    trials: int = 1
    seed: int = 0
    record_limit: int = 16
    batch_size: int = 16
    write_raw: bool = True


@dataclass
class MetricOptions:
    data_range: float = 2.0


@dataclass
class AblateOptions:
    sampling_steps: list[int] = field(default_factory=lambda: [1000, 200, 1])
    training_steps: list[int] = field(default_factory=lambda: [1, 200, 1000])
    std_trials: int = 3
    std_images: int = 4


@dataclass
class RunConfig:
    """Everything a command needs, one TOML table per section."""

    data: DataOptions = field(default_factory=DataOptions)
    synthetic: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleOptions = field(default_factory=SampleOptions)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    ablate: AblateOptions = field(default_factory=AblateOptions)
    out: str = "runs/default"
    log_level: str = "INFO"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["betas"] = list(self.train.betas)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


_SECTIONS = {f.name: f for f in fields(RunConfig)}
_SCALARS = {"out", "log_level"}


def _build_section(name: str, cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {unknown}")
    try:
        if cls is TrainConfig:
            return TrainConfig.from_dict(values)
        return cls(**values)
    except (TypeError, DatasetError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def parse_run_config(raw: dict) -> RunConfig:
    """Strictly convert a TOML mapping into a :class:`RunConfig`."""
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SCALARS:
            if not isinstance(value, str):
                raise ConfigError(f"{key} must be a string")
            kwargs[key] = value
            continue
        if not isinstance(value, dict):
            raise ConfigError(f"[{key}] must be a table")
        cls = type(_SECTIONS[key].default_factory())
        kwargs[key] = _build_section(key, cls, value)
    return RunConfig(**kwargs)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_run_config(raw)


def write_resolved(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_NAME
    path.write_text(tomli_w.dumps(cfg.to_dict()))
    return path


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    train, sample, synth = cfg.train, cfg.sample, cfg.synthetic
    try:
        if getattr(args, "ablation", None):
            train = train.with_ablation(args.ablation)
        if getattr(args, "lambda_", None) is not None:
            train = replace(train, lambda_fidelity=args.lambda_)
        if getattr(args, "epochs", None) is not None:
            train = replace(train, epochs=args.epochs)
        if args.seed is not None:
            train = replace(train, seed=args.seed)
            sample = replace(sample, seed=args.seed)
            synth = replace(synth, seed=args.seed)
    except (ValueError, DatasetError) as exc:
        raise ConfigError(str(exc)) from exc
    if getattr(args, "steps", None) is not None:
        sample = replace(sample, steps=args.steps)
    if getattr(args, "trials", None) is not None:
        sample = replace(sample, trials=args.trials)
    if getattr(args, "stochastic", False):
        sample = replace(sample, stochastic=True)
    if sample.steps < 1 or sample.trials < 1:
        raise ConfigError("steps and trials must be >= 1")
    out = args.out if args.out is not None else cfg.out
    return replace(cfg, train=train, sample=sample, synthetic=synth, out=str(out))


# -- dataset plumbing ---------------------------------------------------------

def load_dataset(root: str | Path, size: int) -> PairedDataset:
    """Load an ``A/`` + ``B/`` folder, preferring exact raw dumps when present."""
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"dataset not found: {root}")
    src, tgt, manifest = root / "source.raw", root / "target.raw", root / "manifest.json"
    if src.is_file() and tgt.is_file() and manifest.is_file():
        meta = json.loads(manifest.read_text())
        names = sorted(k[2:] for k in meta["files"] if k.startswith("A/"))
        source = torch.from_numpy(read_raw(src).astype(np.float32))
        target = torch.from_numpy(read_raw(tgt).astype(np.float32))
        if source.shape[-1] == size:
            return PairedDataset(source, target, names, {"root": str(root), "raw": True})
    return load_paired_folder(root / "A", root / "B", size)


def resolve_dataset(cfg: RunConfig, data_arg: str | None) -> tuple[PairedDataset, str]:
    root = data_arg or cfg.data.root
    if root:
        ds = load_dataset(root, cfg.data.size)
        return ds, Path(root).name
    ds = generate_synthetic_pairs(cfg.synthetic)
    return ds, f"{cfg.synthetic.kind}-{cfg.synthetic.seed}"


def holdout_split(cfg: RunConfig, ds: PairedDataset):
    d = cfg.data
    train_frac = 1.0 - d.val_fraction - d.test_fraction
    try:
        return split(ds, (train_frac, d.val_fraction, d.test_fraction), d.split_seed)
    except DatasetError as exc:
        raise ConfigError(str(exc)) from exc


def predict(trainer_or_net, sched: ScheduleParams, x_T: torch.Tensor, opts: SampleOptions,
            steps: int, trials: int, stochastic: bool):
    """Batched multi-step sampling; returns first-trial outputs and the per-batch records."""
    net = trainer_or_net.models.epsilon_net if isinstance(trainer_or_net, Trainer) else trainer_or_net
    net.eval()
    outs, records = [], []
    for i in range(0, x_T.shape[0], opts.batch_size):
        req = SampleRequest(x_T[i:i + opts.batch_size], n_steps=steps, stochastic=stochastic, trials=trials,
                            seed=opts.seed + i, record_limit=opts.record_limit)
        out, rec = sample_multi_step(req, net, sched)
        outs.append(out)
        records.append(rec)
    return torch.cat(outs), records


# -- commands ---------------------------------------------------------------

def cmd_synth_data(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    ds = generate_synthetic_pairs(cfg.synthetic)
    write_paired_folder(ds, out, raw=True)
    write_resolved(cfg, out)
    log.info("wrote %d %s pairs to %s (digest %s)", len(ds), cfg.synthetic.kind, out, ds.digest()[:12])
    return EXIT_OK


def train_variant(cfg: RunConfig, train_cfg: TrainConfig, train_ds: PairedDataset, out_dir: Path | None,
                  val_ds: PairedDataset | None = None) -> Trainer:
    trainer = Trainer.from_config(cfg.model, train_cfg, train_ds.channels, train_ds.image_size[0])
    log.info("training %s (T=%d, lambda=%g, seed=%d) on %d pairs; params %s", train_cfg.variant,
             train_cfg.total_steps, train_cfg.effective_lambda, train_cfg.seed, len(train_ds),
             trainer.models.param_counts)
    trainer.fit(train_ds, out_dir=out_dir, val_dataset=val_ds)
    return trainer


def cmd_train(cfg: RunConfig, args) -> int:
    ds, _ = resolve_dataset(cfg, args.data)
    out = Path(cfg.out)
    write_resolved(cfg, out)
    if cfg.data.val_fraction > 0:
        train_ds, val_ds, _ = holdout_split(replace(cfg, data=replace(cfg.data, test_fraction=0.0)), ds)
    else:
        train_ds, val_ds = ds, None
    train_variant(cfg, cfg.train, train_ds, out, val_ds)
    log.info("checkpoint written to %s", out / "final.ckpt")
    return EXIT_OK


def cmd_sample(cfg: RunConfig, args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    trainer = Trainer.from_checkpoint(ckpt)
    size = (trainer.model_spec or {}).get("image_size") or cfg.data.size
    x_T, names = load_image_folder(args.input, size)
    opts = cfg.sample
    out = Path(cfg.out)
    write_resolved(cfg, out)
    preds, records = predict(trainer, trainer.sched, x_T, opts, opts.steps, opts.trials, opts.stochastic)

    (out / "images").mkdir(parents=True, exist_ok=True)
    for name, img in zip(names, preds):
        write_png(out / "images" / (Path(name).stem + ".png"), img)
        if opts.write_raw:
            (out / "raw").mkdir(exist_ok=True)
            write_raw(out / "raw" / (Path(name).stem + ".raw"), img)

    summary = {"checkpoint": str(ckpt), "steps": opts.steps, "trials": opts.trials,
               "stochastic": opts.stochastic, "seed": opts.seed, "n_images": len(names)}
    if opts.trials >= 2:
        (out / "std").mkdir(exist_ok=True)
        maps = torch.cat([rec.std_maps[-1] for rec in records])
        for name, smap in zip(names, maps):
            write_heatmap(out / "std" / (Path(name).stem + ".png"), smap.mean(0).numpy())
        per_step = np.mean([rec.step_mean_std for rec in records], axis=0, dtype=np.float64)
        steps = records[0].steps
        with (out / "trajectory.csv").open("w") as fh:
            fh.write("step,mean_std\n")
            for s, v in zip(steps, per_step):
                fh.write(f"{s},{v:.10g}\n")
        summary["std"] = float(maps.mean())
        log.info("std over %d trials: %.4f", opts.trials, summary["std"])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    log.info("wrote %d predictions to %s", len(names), out / "images")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    for p in (pred_dir, ref_dir):
        if not p.is_dir():
            raise UsageError(f"not a directory: {p}")
    pairs = load_paired_folder(pred_dir, ref_dir, cfg.data.size)
    res = evaluate_pair_set(pairs.source, pairs.target, cfg.metrics.data_range)
    row = MetricRow(args.model, cfg.sample.steps, psnr=res["psnr"], ssim=res["ssim"], std=0.0, lpips=res["lpips"],
                    seed=cfg.sample.seed, extra={"n_images": len(pairs)})
    report = MetricReport([row], dataset_id=ref_dir.name, seed=cfg.sample.seed, config_hash=cfg.digest(),
                          title="evaluation")
    out = Path(cfg.out)
    write_resolved(cfg, out)
    for p in emit_report(report, out):
        log.info("wrote %s", p)
    print(format_markdown(report))
    return EXIT_OK


def _score(cfg: RunConfig, trainer: Trainer, test: PairedDataset, model: str, steps: int) -> MetricRow:
    """Metrics on the full held-out set plus a trial-spread estimate on its first images."""
    opts, ab = cfg.sample, cfg.ablate
    steps = min(steps, trainer.cfg.total_steps)
    stochastic = steps > 1
    preds, _ = predict(trainer, trainer.sched, test.source, opts, steps, 1, stochastic)
    res = evaluate_pair_set(preds, test.target, cfg.metrics.data_range)
    probe = test.source[: ab.std_images]
    _, recs = predict(trainer, trainer.sched, probe, replace(opts, batch_size=len(probe)), steps,
                      max(ab.std_trials, 2), stochastic)
    std = recs[0].mean_std
    log.info("%s T=%d steps=%d psnr=%.2f ssim=%.4f std=%.4f", model, trainer.cfg.total_steps, steps,
             res["psnr"], res["ssim"], std)
    return MetricRow(model, steps, psnr=res["psnr"], ssim=res["ssim"], std=std, lpips=res["lpips"],
                     seed=trainer.cfg.seed,
                     extra={"training_steps": trainer.cfg.total_steps,
                            "sampler": "re-bridging" if steps > 1 else "one-step"})


def cmd_ablate(cfg: RunConfig, args) -> int:
    ds, dataset_id = resolve_dataset(cfg, args.data)
    train_ds, _, test_ds = holdout_split(cfg, ds)
    if len(test_ds) == 0:
        raise ConfigError("ablation needs a non-empty held-out split (data.test_fraction)")
    out = Path(cfg.out)
    write_resolved(cfg, out)
    ab = cfg.ablate
    max_steps = max(ab.sampling_steps)
    trained: dict[tuple[str, int], Trainer] = {}

    def get(variant: str, total_steps: int) -> Trainer:
        key = (variant, total_steps)
        if key not in trained:
            tcfg = replace(cfg.train.with_ablation(variant), total_steps=total_steps)
            trained[key] = train_variant(cfg, tcfg, train_ds, out / f"{variant}_T{total_steps}")
        return trained[key]

    T = cfg.train.total_steps
    rows = [_score(cfg, get("bbrg", T), test_ds, "bbrg", max_steps),
            _score(cfg, get("conditional-bbrg", T), test_ds, "conditional-bbrg", max_steps)]
    hifi_steps = sorted({min(n, T) for n in ab.sampling_steps}, reverse=True)
    rows += [_score(cfg, get("hifi-bbrg", T), test_ds, "hifi-bbrg", n) for n in hifi_steps]
    components = MetricReport(rows, dataset_id=dataset_id, seed=cfg.train.seed, config_hash=cfg.digest(),
                              title="components and sampling steps")

    t_rows = []
    for total in ab.training_steps:
        row = _score(cfg, get("hifi-bbrg", total), test_ds, "hifi-bbrg", 1)
        t_rows.append(replace(row, model=f"hifi-bbrg-T{total}"))
    training = MetricReport(t_rows, dataset_id=dataset_id, seed=cfg.train.seed, config_hash=cfg.digest(),
                            title="training time steps")

    for rep, stem in ((components, "components"), (training, "training_steps")):
        for p in emit_report(rep, out, stem=f"{stem}_{dataset_id}_{cfg.digest()}"):
            log.info("wrote %s", p)
        print(f"## {rep.title}\n{format_markdown(rep)}")
    return EXIT_OK


def cmd_inspect_schedule(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_schedule_csv(out / "schedule.csv", args.points)
    s, b = schedule_curve(args.points)
    i = int(np.argmax(b))
    log.info("wrote %s; peak B=%.6f at s=%.6f", path, b[i], s[i])
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        from matplotlib import pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(s, b)
        ax.set_xlabel("s = t / T")
        ax.set_ylabel("B(s)")
        fig.tight_layout()
        fig.savefig(out / "schedule.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-schedule": cmd_inspect_schedule,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--steps", type=int, help="sampling steps (default 1)")
    common.add_argument("--trials", type=int, help="repeated sampling trials")
    common.add_argument("--stochastic", action="store_true", help="add bridge noise between sampling steps")
    common.add_argument("--lambda", dest="lambda_", type=float, help="fidelity loss weight")
    common.add_argument("--ablation", choices=sorted(ABLATIONS), help="model variant")
    common.add_argument("--log-level", default=None, help="logging level (default from config)")

    parser = argparse.ArgumentParser(prog="hifi-bbrg", description="Deterministic bridge-diffusion image translation")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", parents=[common], help="write a synthetic paired dataset")

    p = sub.add_parser("train", parents=[common], help="train one model variant")
    p.add_argument("--data", help="dataset folder with A/ and B/ (default: synthesize from config)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("sample", parents=[common], help="translate a folder of source images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="folder of source images")

    p = sub.add_parser("eval", parents=[common], help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--model", default="predictions", help="row label in the report")

    p = sub.add_parser("ablate", parents=[common], help="train and score the variant and training-T grids")
    p.add_argument("--data", help="dataset folder (default: synthesize from config)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("inspect-schedule", parents=[common], help="write the noise-scale curve")
    p.add_argument("--points", type=int, default=1001)
    p.add_argument("--plot", action="store_true", help="also write schedule.png")
    return parser


def _configure_threads() -> None:
    value = os.environ.get("HIFI_BBRG_NUM_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise UsageError(f"HIFI_BBRG_NUM_THREADS must be an integer, got {value!r}") from None
        if n < 1:
            raise UsageError("HIFI_BBRG_NUM_THREADS must be >= 1")
        torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_run_config(args.config), args)
        level = (args.log_level or cfg.log_level).upper()
        if not isinstance(logging.getLevelName(level), int):
            raise UsageError(f"unknown log level {level!r}")
        log.setLevel(level)
        _configure_threads()
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, DatasetError, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
