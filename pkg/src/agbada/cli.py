"""Command-line entry point: ``agbada {train,evaluate,predict,inspect-weights}``.

Exit codes: 0 success, 2 configuration/validation error, 3 I/O error
(missing files, unreadable images, malformed weight files), 4 training
aborted on a non-finite loss.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (AugmentConfig, ImageSource, SplitAssignment, class_distribution, load_image,
                   load_index, stratified_split)
from .errors import AgbadaError, TrainingDivergedError, ValidationError
from .evaluation import evaluate_model, export_history, render_confusion, render_report
from .model import build_model, load_weights, save_weights, set_trainable
from .plots import render_plots
from .tensor import set_num_threads
from .train import EarlyStopConfig, ReduceLRConfig, TrainConfig, run_training
from .weights import read_weight_file, write_weight_file

log = logging.getLogger("agbada")


@dataclass
class RunConfig:
    data_dir: str | None = None
    index_csv: str | None = None
    out_dir: str = "runs/latest"
    input_size: int = 180
    batch_size: int = 128
    epochs: int = 50
    learning_rate: float = 1e-3
    seed: int = 0
    arch: str = "vgg16"
    unfreeze_k: int = 4  # -1 unfreezes every conv layer
    dropout_rate: float = 0.5
    pretrained_weights: str | None = None
    augment: bool = True
    flip_prob: float = 0.5
    rotation_deg: float = 15.0
    shift_frac: float = 0.1
    zoom_frac: float = 0.1
    lr_factor: float = 0.5
    lr_patience: int = 3
    min_lr: float = 1e-6
    stop_patience: int = 10
    min_delta: float = 1e-4

    def train_config(self) -> TrainConfig:
        aug = AugmentConfig(self.flip_prob, self.rotation_deg, self.shift_frac, self.zoom_frac,
                            enabled=self.augment)
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            reduce_lr=ReduceLRConfig(self.lr_factor, self.lr_patience, self.min_lr),
            early_stop=EarlyStopConfig(self.stop_patience, self.min_delta),
            checkpoint_path=str(Path(self.out_dir) / "best.weights"),
            seed=self.seed, augment=aug if self.augment else None)

    def require_data(self) -> None:
        missing = [f"--{n.replace('_', '-')}" for n in ("data_dir", "index_csv") if not getattr(self, n)]
        if missing:
            raise ValidationError(f"missing required setting(s): {', '.join(missing)}")
        if self.input_size < 1:
            raise ValidationError(f"input_size must be >= 1, got {self.input_size}")


_DEFAULTS = RunConfig()
_TYPES = {f.name: type(getattr(_DEFAULTS, f.name)) for f in fields(RunConfig)}
for _name in ("data_dir", "index_csv", "pretrained_weights"):
    _TYPES[_name] = str
_ALIASES = {"lr": "learning_rate", "dropout": "dropout_rate", "pretrained": "pretrained_weights"}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError as exc:
        raise ValidationError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc


def parse_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys may use dashes."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        if key not in _TYPES:
            raise ValidationError(f"{path}:{lineno}: unknown setting {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for name in _TYPES:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig(**values)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file (flags override it)")
    for name, kind in _TYPES.items():
        flags = [f"--{name.replace('_', '-')}"]
        flags += [f"--{a}" for a, target in _ALIASES.items() if target == name]
        if kind is bool:
            p.add_argument(*flags, dest=name, default=None, type=lambda s, n=name: _coerce(n, s),
                           metavar="{true,false}")
        else:
            p.add_argument(*flags, dest=name, default=None, type=kind)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load_corpus(cfg: RunConfig):
    cfg.require_data()
    rows = load_index(cfg.index_csv)
    source = ImageSource(cfg.data_dir, cfg.input_size)
    source.check(rows)
    return rows, source


def _build(cfg: RunConfig):
    return build_model(cfg.arch, cfg.input_size, cfg.dropout_rate, cfg.seed)


def cmd_train(cfg: RunConfig) -> int:
    tcfg = cfg.train_config()
    rows, source = _load_corpus(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = stratified_split(rows, seed=cfg.seed)
    (out / "split.json").write_text(split.to_json() + "\n", encoding="utf-8")

    model = _build(cfg)
    if cfg.pretrained_weights:
        applied = load_weights(model, cfg.pretrained_weights, strict=False)
        log.info("loaded %d pretrained tensors from %s", len(applied), cfg.pretrained_weights)
    if cfg.unfreeze_k < 0:
        set_trainable(model, "all")
    else:
        set_trainable(model, "last_k_convs", cfg.unfreeze_k)
    log.info("%d parameters, %d trainable", model.parameter_count(), model.trainable_parameter_count())

    train_rows = [rows[i] for i in split.train]
    val_rows = [rows[i] for i in split.val]
    result = run_training(model, train_rows, val_rows, tcfg, source)

    write_weight_file(out / "final.weights", result.final_state)
    save_weights(result.model, out / "best.weights")
    (out / "history.csv").write_text(export_history(result.history), encoding="utf-8")
    render_plots(out, records=result.history, distribution=class_distribution(rows))
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch} "
          f"val_loss {result.best_val_loss:.4f}; last val_acc {last.val_acc:.4f}"
          f"{' (early stop)' if result.stopped_early else ''}")
    return 0


def _read_split(cfg: RunConfig, rows) -> SplitAssignment:
    path = Path(cfg.out_dir) / "split.json"
    if path.is_file():
        split = SplitAssignment.from_json(path.read_text(encoding="utf-8"))
        if max((*split.train, *split.val, *split.test), default=-1) >= len(rows):
            raise ValidationError(f"{path} does not match the label index ({len(rows)} rows)")
        return split
    return stratified_split(rows, seed=cfg.seed)


def cmd_evaluate(model_path, cfg: RunConfig) -> int:
    rows, source = _load_corpus(cfg)
    model = _build(cfg)
    model_path = Path(model_path or Path(cfg.out_dir) / "best.weights")
    load_weights(model, model_path, strict=True)
    split = _read_split(cfg, rows)
    test_rows = [rows[i] for i in split.test]
    result = evaluate_model(model, test_rows, cfg.batch_size, source)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = render_report(result.report)
    (out / "report.txt").write_text(report, encoding="utf-8")
    (out / "confusion.txt").write_text(render_confusion(result.confusion), encoding="utf-8")
    render_plots(out, cm=result.confusion)
    print(f"loss\t{result.loss:.4f}")
    print(f"accuracy\t{result.report.accuracy:.4f}")
    print(report, end="")
    return 0


def cmd_predict(model_path, image_path, cfg: RunConfig) -> int:
    model = _build(cfg)
    load_weights(model, model_path, strict=True)
    img = load_image(image_path, (cfg.input_size, cfg.input_size))
    label, p = model.predict(img[None])[0]
    print(f"{label}\t{p:.4f}")
    return 0


def cmd_inspect_weights(path) -> int:
    entries = read_weight_file(path)
    total = 0
    for e in entries:
        total += e.size
        print(f"{e.name}\t{'x'.join(map(str, e.shape))}\t{e.size}")
    print(f"entries\t{len(entries)}")
    print(f"total\t{total}")
    print("crc\tok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agbada", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier and write weights, history and plots")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="evaluate weights on the test split")
    p.add_argument("model", nargs="?", help="weight file (default: OUT_DIR/best.weights)")
    _add_run_flags(p)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("model")
    p.add_argument("image")
    _add_run_flags(p)

    p = sub.add_parser("inspect-weights", help="list the tensors in a weight file and check its CRC")
    p.add_argument("path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        set_num_threads()
        # divergence is detected explicitly; numpy's overflow chatter adds nothing
        with np.errstate(all="ignore"):
            if args.command == "inspect-weights":
                return cmd_inspect_weights(args.path)
            cfg = resolve_config(args)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "evaluate":
                return cmd_evaluate(args.model, cfg)
            return cmd_predict(args.model, args.image, cfg)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (AgbadaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
