"""Command-line entry point.

Subcommands: gen-data, train, eval, infer, localize, bench.  Settings
come from documented defaults, then a ``key = value`` config file, then
the ``AGNET_SEED`` environment variable, then explicit flags, in that
order.  The merged configuration is echoed to ``config.txt`` in every
output directory; feeding that file back via ``--config`` reproduces
the run.

Exit codes: 0 success, 1 usage or configuration error, 2 data or
checkpoint error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data as D
from . import kernels
from . import localization as L
from . import tensor as T
from . import training as TR
from .errors import AgnetError, ConfigError, DataError, NumericalAbort
from .formats import load_checkpoint, read_agt, write_agt, write_pgm
from .models import Model, ModelSpec, build_ag_sononet, build_sononet, init_from_sononet
from .tensor import Tensor

VARIANTS = ("sononet", "ag", "ag_mean", "ag_ds", "ag_ft")


@dataclass
class RunConfig:
    """Every tunable of every subcommand, with its default."""

    variant: str = "sononet"        # sononet | ag | ag_mean | ag_ds | ag_ft
    n_initial: int = 8              # channel width of the first block
    num_classes: int = 6            # plane classes + 1 background
    input_h: int = 64
    input_w: int = 80
    normalization: str = "minsum"   # attention normalization mode
    aggregation: str = "mean"       # AG scale aggregation: mean | ds | ft
    seed: int = 0
    epochs: int = 120
    batch: int = 64
    lr0: float = 0.1
    warm_lr: float = 0.01
    warm_epochs: int = 5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    data_root: str = "data"
    out_dir: str = "out"
    blur_sigma: float = 2.0         # localization: Gaussian blur
    threshold_frac: float = 0.5     # localization: mask threshold vs peak
    n_per_class: int = 40           # gen-data: samples per plane class

    def resolved_variant(self) -> str:
        return "sononet" if self.variant == "sononet" else "ag"

    def resolved_aggregation(self) -> str:
        if self.variant in ("ag_mean", "ag_ds", "ag_ft"):
            return self.variant.split("_", 1)[1]
        return self.aggregation


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {kind}") from exc


def parse_config_file(path) -> Dict[str, object]:
    """Read ``key = value`` lines; '#' starts a comment, blanks ignored."""
    values: Dict[str, object] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def config_echo_text(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def build_config(args: argparse.Namespace) -> RunConfig:
    """defaults < config file < AGNET_SEED < explicit flags."""
    values: Dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    env_seed = os.environ.get("AGNET_SEED")
    if env_seed is not None:
        values["seed"] = _coerce("seed", env_seed)
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    cfg = RunConfig(**values)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    if cfg.resolved_aggregation() not in ("mean", "ds", "ft"):
        raise ConfigError(f"aggregation must be mean|ds|ft, got {cfg.aggregation!r}")
    if cfg.num_classes < 2:
        raise ConfigError("num_classes must be >= 2 (planes + background)")
    if cfg.input_h % 16 or cfg.input_w % 16:
        raise ConfigError("input_h and input_w must be divisible by 16")
    return cfg


def _write_echo(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_echo_text(cfg), encoding="utf-8")


def build_model(cfg: RunConfig) -> Model:
    if cfg.resolved_variant() == "sononet":
        return build_sononet(cfg.num_classes, cfg.n_initial, 1, seed=cfg.seed)
    agg = cfg.resolved_aggregation()
    # the learned aggregation head is bolted on after the averaging phase
    build_agg = "mean" if agg == "ft" else agg
    return build_ag_sononet(
        cfg.num_classes, cfg.n_initial, 1,
        aggregation=build_agg, normalization=cfg.normalization, seed=cfg.seed,
    )


def model_from_checkpoint(path):
    """Rebuild the architecture from a checkpoint's config echo and load it."""
    tensors, echo = load_checkpoint(path)
    if not echo.strip():
        raise DataError(f"{path}: checkpoint carries no config echo; cannot rebuild the model")
    values = {}
    for line in echo.splitlines():
        line = line.split("#", 1)[0].strip()
        if line and "=" in line:
            key, raw = (p.strip() for p in line.split("=", 1))
            values[key] = _coerce(key, raw)
    cfg = RunConfig(**values)
    spec_agg = cfg.resolved_aggregation()
    state = {
        k: v for k, v in tensors.items()
        if not k.startswith("opt/") and not k.startswith("meta/")
    }
    if cfg.resolved_variant() == "sononet":
        model = build_sononet(cfg.num_classes, cfg.n_initial, 1, seed=cfg.seed)
    else:
        # an FT run's checkpoint holds the aggregation head iff phase 2 ran
        agg = spec_agg if (spec_agg != "ft" or "ft.w" in state) else "mean"
        model = build_ag_sononet(
            cfg.num_classes, cfg.n_initial, 1,
            aggregation=agg, normalization=cfg.normalization, seed=cfg.seed,
        )
    model.load_state_dict(state)
    model.train(False)
    return model, cfg


def _train_config(cfg: RunConfig) -> TR.TrainConfig:
    return TR.TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch,
        seed=cfg.seed,
        base_lr=cfg.lr0,
        warmup_lr=cfg.warm_lr,
        warmup_epochs=cfg.warm_epochs,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        checkpoint_every=1,
    )


def _load_split(cfg: RunConfig, split: str) -> D.Dataset:
    index = "index.tsv" if split == "all" else f"{split}.idx"
    return D.load_dataset(cfg.data_root, index)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = build_config(args)
    root = Path(cfg.data_root)
    if root.exists() and any(root.iterdir()) and not args.force:
        raise ConfigError(
            f"dataset directory {root} is not empty; pass --force to overwrite"
        )
    spec = D.SyntheticSpec(
        num_plane_classes=cfg.num_classes - 1,
        n_per_class=cfg.n_per_class,
        height=cfg.input_h,
        width=cfg.input_w,
        seed=cfg.seed,
    )
    ds = D.generate(spec)
    tr, va, te = D.split_indices(spec)
    D.save_dataset(root, ds, splits={"train": tr, "val": va, "test": te})
    _write_echo(cfg, root)
    print(f"wrote {len(ds)} images to {root} "
          f"(train {len(tr)}, val {len(va)}, test {len(te)})")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    out_dir = Path(cfg.out_dir)
    echo = config_echo_text(cfg)
    train_ds = _load_split(cfg, "train")
    val_ds = _load_split(cfg, "val")
    model = build_model(cfg)
    if args.init_from:
        donor, _ = model_from_checkpoint(args.init_from)
        if model.spec.variant != "ag" or donor.spec.variant != "sononet":
            raise ConfigError("--init-from transfers a sononet extractor into an AG model")
        init_from_sononet(model, donor)
    tcfg = _train_config(cfg)
    two_phase = cfg.resolved_variant() == "ag" and cfg.resolved_aggregation() == "ft"
    if args.resume and two_phase:
        raise ConfigError("--resume is not supported for the two-phase ft protocol")
    _write_echo(cfg, out_dir)

    optimizer = None
    start_epoch = 0
    history: List[dict] = []
    if args.resume:
        ckpt = out_dir / "last.agck"
        optimizer = TR.SGDNesterov(
            model.parameters(), model.decay_mask(), tcfg.momentum, tcfg.weight_decay
        )
        epoch, seed, _ = TR.load_training_checkpoint(ckpt, model, optimizer)
        if seed != cfg.seed:
            raise ConfigError(f"resume seed mismatch: checkpoint {seed}, config {cfg.seed}")
        start_epoch = epoch + 1
        hist_path = out_dir / "history.csv"
        if hist_path.exists():
            history = [r for r in TR.read_history_csv(hist_path) if r["epoch"] <= epoch]

    if two_phase:
        result = TR.train_two_phase(
            model, train_ds.images, train_ds.labels, val_ds.images, val_ds.labels,
            tcfg, out_dir=out_dir, config_echo=echo,
        )
        last = result.phase2.history[-1]
        print(f"phase boundary at epoch {result.boundary_epoch}; "
              f"ft initial val_macro_f1={result.ft_initial.macro_f1:.4f}")
    else:
        res = TR.train(
            model, train_ds.images, train_ds.labels, val_ds.images, val_ds.labels,
            tcfg, out_dir=out_dir, config_echo=echo,
            optimizer=optimizer, start_epoch=start_epoch, history=history,
        )
        last = res.history[-1]
        model.load_state_dict(res.best_state)
    print(f"done: epochs={int(last['epoch']) + 1} "
          f"val_acc={last['val_acc']:.4f} val_macro_f1={last['val_macro_f1']:.4f}")
    print(f"checkpoints and history in {out_dir}")
    return 0


def _print_metrics(m: TR.Metrics, num_classes: int) -> None:
    print(f"accuracy={m.accuracy:.4f} macro_p={m.macro_precision:.4f} "
          f"macro_r={m.macro_recall:.4f} macro_f1={m.macro_f1:.4f}")
    print("class precision recall f1 support")
    support = m.confusion.sum(axis=1)
    for c in range(num_classes):
        print(f"{c:5d} {m.precision[c]:9.4f} {m.recall[c]:6.4f} {m.f1[c]:6.4f} {support[c]:7d}")


def cmd_eval(args) -> int:
    cfg = build_config(args)
    model, ckpt_cfg = model_from_checkpoint(args.checkpoint)
    ds = _load_split(cfg, args.split)
    n_classes = int(ds.labels.max()) + 1
    if n_classes > model.spec.num_classes:
        raise DataError(
            f"dataset has {n_classes} classes but checkpoint was trained with "
            f"{model.spec.num_classes}"
        )
    metrics = TR.evaluate(model, ds.images, ds.labels, cfg.batch)
    _print_metrics(metrics, model.spec.num_classes)
    return 0


def cmd_infer(args) -> int:
    cfg = build_config(args)
    model, _ = model_from_checkpoint(args.checkpoint)
    img = read_agt(args.image)
    if img.ndim != 2:
        raise DataError(f"{args.image}: expected a 2-D image, got shape {img.shape}")
    x = Tensor(D.whiten(img[None, None]))
    with T.no_grad():
        out = model.forward(x)
        probs = [
            np.exp(z.data[0] - z.data[0].max())
            / np.exp(z.data[0] - z.data[0].max()).sum()
            for z in out.scale_logits
        ]
        pred = int(out.logits.data.argmax())
    print(f"predicted_class={pred}")
    for si, p in enumerate(probs, 1):
        print(f"scale{si}_probs=" + ",".join(f"{v:.4f}" for v in p))
    if args.export_maps:
        if model.spec.variant != "ag":
            raise ConfigError(
                "this checkpoint has no attention gates; map export needs an AG variant"
            )
        out_dir = Path(args.export_maps)
        out_dir.mkdir(parents=True, exist_ok=True)
        a1 = out.attention[0].data[0, 0]
        a2 = out.attention[1].data[0, 0]
        cam_map = L.cam(out.cam_features.data, out.cam_weights, np.array([pred]))[0]
        agall = L.combine_maps([a1, a2, cam_map], img.shape[0], img.shape[1])
        for name, m in (("ag1", a1), ("ag2", a2), ("ag3", cam_map), ("agall", agall)):
            write_agt(out_dir / f"{name}.agt1", m)
            write_pgm(out_dir / f"{name}.pgm", m)
        print(f"maps written to {out_dir}")
    return 0


def cmd_localize(args) -> int:
    cfg = build_config(args)
    model, _ = model_from_checkpoint(args.checkpoint)
    ds = _load_split(cfg, args.split)
    if all(b is None for b in ds.boxes):
        raise DataError(f"{cfg.data_root}: no ground-truth boxes in split {args.split!r}")
    mode = args.map_mode or ("cam" if model.spec.variant == "sononet" else "ag-all")
    if model.spec.variant == "sononet" and mode != "cam":
        raise ConfigError(f"map mode {mode!r} needs attention gates; this checkpoint has none")
    result = L.localize(
        model, ds.images, mode=mode,
        blur_sigma=cfg.blur_sigma, threshold_frac=cfg.threshold_frac,
        batch_size=cfg.batch,
    )
    per_class = L.localization_metrics(
        ds.labels, ds.boxes, result.boxes, model.spec.num_classes - 1
    )
    ious_by_class = {}
    for c, stats in per_class.items():
        idx = [i for i in range(len(ds)) if ds.labels[i] == c and ds.boxes[i] is not None]
        ious_by_class[c] = np.array([L.iou(result.boxes[i], ds.boxes[i]) for i in idx])
    print("class | IoU mean (std) | Cor. (%) | Rel. (%)")
    for c in sorted(per_class):
        s = per_class[c]
        std = float(ious_by_class[c].std())
        print(f"{c:5d} | {s['mean_iou']:.3f} ({std:.3f}) | "
              f"{100 * s['correctness']:8.1f} | {100 * s['rel_correctness']:8.1f}")
    mean_iou = float(np.mean([s["mean_iou"] for s in per_class.values()]))
    print(f"mean IoU over classes: {mean_iou:.3f} (mode={mode})")
    return 0


def cmd_bench(args) -> int:
    cfg = build_config(args)
    if args.checkpoint:
        model, _ = model_from_checkpoint(args.checkpoint)
    else:
        model = build_model(cfg)
    model.train(False)
    rng = np.random.default_rng(cfg.seed)
    x_np = rng.standard_normal((cfg.batch, 1, cfg.input_h, cfg.input_w)).astype(np.float32)
    labels = rng.integers(0, model.spec.num_classes, cfg.batch)

    def timed(fn, iters):
        for _ in range(10):
            fn()
        samples = []
        for _ in range(iters):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1000.0)
        arr = np.sort(np.asarray(samples))
        return float(np.median(arr)), float(arr[min(len(arr) - 1, int(0.95 * len(arr)))])

    def fwd():
        with T.no_grad():
            model.forward(Tensor(x_np))

    def fwd_bwd():
        model.train(True)
        model.zero_grad()
        with T.recording() as tape:
            loss = TR.batch_loss(model, Tensor(x_np), labels)
            T.backward(loss, tape=tape)
        model.train(False)

    fwd_med, fwd_p95 = timed(fwd, args.iters)
    bwd_med, bwd_p95 = timed(fwd_bwd, args.iters)
    print(f"backend={kernels.BACKEND} batch={cfg.batch} variant={cfg.variant}")
    print(f"fwd_ms_median={fwd_med:.2f}, fwd_ms_p95={fwd_p95:.2f}, "
          f"bwd_ms_median={bwd_med:.2f}, bwd_ms_p95={bwd_p95:.2f}")
    if args.localization:
        counter_before = T.backward_pass_count
        loc_med, loc_p95 = timed(
            lambda: L.localize(model, x_np[: min(8, cfg.batch)],
                               mode="cam" if model.spec.variant == "sononet" else "ag-all"),
            max(1, args.iters // 10),
        )
        print(f"loc_ms_median={loc_med:.2f}, loc_ms_p95={loc_p95:.2f}, "
              f"backward_passes={T.backward_pass_count - counter_before}")
    return 0


# ---------------------------------------------------------------------------
# parser plumbing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract reserves 2 for data
    errors, so remap usage problems to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float}.get(f.type, str)
        p.add_argument(flag, type=kind, default=None,
                       help=f"override {f.name} (default {f.default})")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agnet", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty dataset dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--init-from", help="sononet checkpoint to seed the AG extractor")
    p.add_argument("--resume", action="store_true", help="continue from out_dir/last.agck")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="classify one AGT1 image")
    _add_config_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--export-maps", metavar="DIR", help="write attention/CAM maps here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("localize", help="weakly supervised localization report")
    _add_config_flags(p)
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--map-mode", choices=L.MAP_MODES, default=None,
                   help="map source (default: ag-all, or cam for the baseline)")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("bench", help="forward/backward timing")
    _add_config_flags(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--localization", action="store_true",
                   help="also time the localization pipeline")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except AgnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
