"""Command-line interface: train, infer, eval, gradcheck, attnviz.

Exit status: 0 success, 1 validation failure (bad config, data or
checkpoint), 2 numeric failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from PIL import Image

from . import checkpoint
from .attention import GlobalPiCANetConfig, LocalPiCANetConfig, local_offsets
from .certify import DEFAULT_SEEDS, format_table, run_gradcheck
from .data import load_image, load_mask, resize_bilinear, resolve_dataset
from .errors import ConfigurationError, DataError, NumericalError, PicanetError
from .metrics import THRESHOLDS, MetricReport, evaluate_model, evaluate_predictions
from .network import EncoderSpec, NetworkSpec, SaliencyNet, resize_nearest
from .tensor import Tensor, no_grad
from .training import TrainConfig, train

CONFIG_NAME = "config.json"
FINAL_CHECKPOINT = "model.pica"
LOG_NAME = "train_log.jsonl"


# ----------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything a command needs besides its paths."""

    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = "synthetic:7:200"
    test_data: str = ""
    epoch_eval_images: int = 16

    def to_dict(self) -> dict:
        net = self.network
        return {
            "network": {
                "placement": net.placement,
                "input_size": net.input_size,
                "encoder": dataclasses.asdict(net.encoder),
                "global": dataclasses.asdict(net.global_cfg),
                "local": dataclasses.asdict(net.local_cfg),
            },
            "train": dataclasses.asdict(self.train),
            "data": self.data,
            "test_data": self.test_data,
            "epoch_eval_images": self.epoch_eval_images,
        }


def _coerce(value: Any, default: Any, where: str) -> Any:
    """Convert a JSON value to the type of ``default``; reject mismatches."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not value:
            raise ConfigurationError(f"{where}: expected a non-empty list, got {value!r}")
        return tuple(_coerce(v, default[0], f"{where}[{i}]") for i, v in enumerate(value))
    raise ConfigurationError(f"{where}: unsupported option")


def _build(cls, raw: Any, where: str, base=None):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where}: expected an object")
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    updates = {k: _coerce(v, getattr(base, k), f"{where}.{k}") for k, v in raw.items()}
    return dataclasses.replace(base, **updates)


def parse_config(raw: dict) -> RunConfig:
    """Validate a JSON config object; every key and type is checked up front."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = sorted(set(raw) - {"network", "train", "data", "test_data", "epoch_eval_images"})
    if unknown:
        raise ConfigurationError(f"config: unknown keys {unknown}")
    tcfg = _build(TrainConfig, raw.get("train", {}), "train")
    net_raw = raw.get("network", {})
    if not isinstance(net_raw, dict):
        raise ConfigurationError("network: expected an object")
    bad = sorted(set(net_raw) - {"placement", "input_size", "encoder", "global", "local"})
    if bad:
        raise ConfigurationError(f"network: unknown keys {bad}")
    defaults = NetworkSpec()
    placement = _coerce(net_raw.get("placement", defaults.placement), "", "network.placement")
    input_size = _coerce(net_raw.get("input_size", defaults.input_size), 0, "network.input_size")
    spec = NetworkSpec(
        encoder=_build(EncoderSpec, net_raw.get("encoder", {}), "network.encoder"),
        placement=placement,
        loss_weights=tcfg.loss_weights,
        input_size=input_size,
        global_cfg=_build(GlobalPiCANetConfig, net_raw.get("global", {}), "network.global"),
        local_cfg=_build(LocalPiCANetConfig, net_raw.get("local", {}), "network.local"),
    )
    out = RunConfig(network=spec, train=tcfg)
    for key, default in (("data", out.data), ("test_data", out.test_data),
                         ("epoch_eval_images", out.epoch_eval_images)):
        if key in raw:
            setattr(out, key, _coerce(raw[key], default, key))
    return out


def load_config(path: str | None, fallback_dir: str | None = None) -> RunConfig:
    """Read ``path``, else ``config.json`` beside a checkpoint, else defaults."""
    if path is None and fallback_dir is not None:
        candidate = os.path.join(fallback_dir, CONFIG_NAME)
        path = candidate if os.path.exists(candidate) else None
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path!r} is not valid JSON: {exc}") from exc
    return parse_config(raw)


def apply_overrides(cfg: RunConfig, seed=None, placement=None, steps=None) -> RunConfig:
    tcfg = cfg.train
    if seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=seed)
    if steps is not None:
        tcfg = dataclasses.replace(tcfg, max_steps=steps)
    net = cfg.network.with_placement(placement) if placement else cfg.network
    return dataclasses.replace(cfg, train=tcfg, network=net)


# ----------------------------------------------------------------------------
# file helpers


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: str, obj: Any) -> None:
    _atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _png_bytes(gray: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(gray.astype(np.uint8), "L").save(buf, format="PNG")
    return buf.getvalue()


def to_uint8(prob: np.ndarray) -> np.ndarray:
    return np.clip(np.round(255.0 * np.asarray(prob, dtype=np.float64)), 0, 255).astype(np.uint8)


def _load_model(cfg: RunConfig, ckpt: str) -> SaliencyNet:
    if not os.path.exists(ckpt):
        raise DataError(f"checkpoint {ckpt!r} not found")
    net = SaliencyNet(cfg.network, seed=cfg.train.seed)
    try:
        checkpoint.load_into(net.registry, ckpt)
    except ConfigurationError as exc:
        raise ConfigurationError(f"checkpoint {ckpt!r} does not fit the configured network: {exc}") \
            from exc
    return net


# ----------------------------------------------------------------------------
# commands


def run_train(cfg: RunConfig, out_dir: str) -> dict:
    """Train, logging JSON lines; checkpoints at each lr decay boundary and at the end."""
    samples = resolve_dataset(cfg.data, cfg.network.input_size)
    net = SaliencyNet(cfg.network, seed=cfg.train.seed)
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, CONFIG_NAME), cfg.to_dict())
    log_path = os.path.join(out_dir, LOG_NAME)
    probe = samples[:cfg.epoch_eval_images]
    with open(log_path, "w", encoding="utf-8") as log:
        def emit(obj):
            log.write(json.dumps(obj, sort_keys=True) + "\n")

        def on_step(step, loss):
            emit({"event": "step", "step": step + 1, "loss": loss})

        def on_epoch(epoch, step):
            if probe:
                emit({"event": "epoch", "epoch": epoch, "step": step,
                      "metrics": evaluate_model(net, probe).summary()})

        def on_decay(step):
            name = f"checkpoint_step{step:06d}.pica"
            checkpoint.save(net.registry, os.path.join(out_dir, name))
            emit({"event": "checkpoint", "step": step, "path": name})

        state = train(net, samples, cfg.train, on_step, on_epoch, on_decay)
        checkpoint.save(net.registry, os.path.join(out_dir, FINAL_CHECKPOINT))
        emit({"event": "checkpoint", "step": state.step, "path": FINAL_CHECKPOINT})
    result = {"steps": state.step, "final_loss": state.losses[-1] if state.losses else None}
    if cfg.test_data:
        report = evaluate_model(net, resolve_dataset(cfg.test_data, cfg.network.input_size))
        _write_json(os.path.join(out_dir, "test_report.json"), report.summary())
        result["test"] = report.summary()
    return result


def _input_images(path: str) -> list[str]:
    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path) if f.endswith(".png") and not f.endswith("_mask.png"))
        if not files:
            raise DataError(f"no PNG images in {path!r}")
        return [os.path.join(path, f) for f in files]
    if not os.path.exists(path):
        raise DataError(f"input {path!r} not found")
    return [path]


def infer_image(net: SaliencyNet, image: np.ndarray) -> np.ndarray:
    """Saliency of one 3 x H x W image at its own resolution (H x W float map)."""
    size = net.spec.input_size
    h, w = image.shape[1:]
    x = resize_bilinear(image, size, size).astype(np.float32) if (h, w) != (size, size) else image
    prob = net.predict(x[None])[0]
    if (h, w) != (size, size):
        prob = resize_bilinear(prob.astype(np.float64), h, w)
    return np.clip(prob[0], 0.0, 1.0)


def run_infer(cfg: RunConfig, ckpt: str, inputs: str, out_dir: str) -> list[str]:
    net = _load_model(cfg, ckpt)
    written = []
    for path in _input_images(inputs):
        name = os.path.splitext(os.path.basename(path))[0]
        prob = infer_image(net, load_image(path))
        target = os.path.join(out_dir, f"{name}.png")
        _atomic_write(target, _png_bytes(to_uint8(prob)))
        written.append(target)
    return written


def _pair_predictions(pred_dir: str, gt_dir: str) -> tuple[list, list]:
    for d in (pred_dir, gt_dir):
        if not os.path.isdir(d):
            raise DataError(f"directory {d!r} does not exist")
    preds = sorted(f[:-4] for f in os.listdir(pred_dir) if f.endswith(".png"))
    gt_files = set(os.listdir(gt_dir))
    gt_names = {f[:-9] for f in gt_files if f.endswith("_mask.png")}
    if not gt_names:
        gt_names = {f[:-4] for f in gt_files if f.endswith(".png")}
    missing_gt = [n for n in preds if n not in gt_names]
    missing_pred = sorted(n for n in gt_names if n not in set(preds))
    if missing_gt or missing_pred:
        raise DataError(f"unmatched files: predictions without ground truth {missing_gt}, "
                        f"ground truth without predictions {missing_pred}")
    if not preds:
        raise DataError("no predictions to evaluate")
    p_arrays, g_arrays = [], []
    for n in preds:
        with Image.open(os.path.join(pred_dir, f"{n}.png")) as im:
            p = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        gpath = os.path.join(gt_dir, f"{n}_mask.png")
        g = load_mask(gpath if os.path.exists(gpath) else os.path.join(gt_dir, f"{n}.png"))[0]
        if p.shape != g.shape:
            raise DataError(f"{n}: prediction {p.shape} and ground truth {g.shape} differ in size")
        p_arrays.append(p)
        g_arrays.append(g)
    return p_arrays, g_arrays


def write_report(report: MetricReport, out_dir: str) -> None:
    _write_json(os.path.join(out_dir, "report.json"), report.summary())
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["threshold", "precision", "recall"])
    for t, p, r in zip(THRESHOLDS, report.precision, report.recall):
        writer.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
    _atomic_write(os.path.join(out_dir, "pr.csv"), buf.getvalue().encode("utf-8"))


def run_eval(cfg: RunConfig, out_dir: str, pred_dir: str | None = None, gt_dir: str | None = None,
             ckpt: str | None = None, data: str | None = None) -> MetricReport:
    if ckpt is not None:
        net = _load_model(cfg, ckpt)
        report = evaluate_model(net, resolve_dataset(data or cfg.test_data or cfg.data,
                                                     cfg.network.input_size))
    elif pred_dir is not None and gt_dir is not None:
        report = evaluate_predictions(*_pair_predictions(pred_dir, gt_dir))
    else:
        raise ConfigurationError("eval needs --pred and --gt, or --checkpoint")
    write_report(report, out_dir)
    return report


def run_gradcheck_cmd(seeds, out_dir: str | None = None, ops=None) -> tuple[bool, str]:
    rows = run_gradcheck(seeds, ops)
    table = format_table(rows)
    if out_dir:
        _write_json(os.path.join(out_dir, "gradcheck.json"),
                    [{"op": r.op, "max_rel_error": r.max_rel_error, "passed": r.passed,
                      "checked": r.checked, "kinked": r.kinked, "seeds": list(r.seeds)}
                     for r in rows])
    failed = [r.op for r in rows if not r.passed]
    if failed:
        table += "\nFAILED: " + ", ".join(failed)
    return not failed, table


def _context_offsets(field_) -> np.ndarray:
    """Per grid cell (row, col) offsets (local) or absolute anchors (global)."""
    if field_.kind == "global":
        return np.asarray(field_.positions)
    return np.array(list(local_offsets(field_.grid, field_.dilation)))


def _expand_grid(weights: np.ndarray, footprint: tuple[int, int]) -> np.ndarray:
    fh, fw = footprint
    gh, gw = weights.shape
    ri = np.minimum(((np.arange(fh) + 0.5) * gh / fh).astype(int), gh - 1)
    ci = np.minimum(((np.arange(fw) + 0.5) * gw / fw).astype(int), gw - 1)
    return weights[ri[:, None], ci[None, :]]


def attention_mass(field_, mask: np.ndarray) -> dict:
    """Mean attention mass that foreground pixels place on background context.

    ``mask`` is the binary map at the field's resolution.  Context cells
    outside the map count as neither foreground nor background.
    """
    w = field_.weights.data[0]
    H, W = mask.shape
    offsets = _context_offsets(field_)
    fg = np.argwhere(mask > 0.5)
    if not len(fg):
        return {"pixels": 0, "fg_on_bg_mass": None, "outside_mass": None}
    on_bg, outside = [], []
    for r, c in fg:
        pos = offsets if field_.kind == "global" else offsets + np.array([r, c])
        inside = (pos[:, 0] >= 0) & (pos[:, 0] < H) & (pos[:, 1] >= 0) & (pos[:, 1] < W)
        labels = np.zeros(len(pos))
        labels[inside] = mask[pos[inside, 0], pos[inside, 1]]
        weights = w[:, r, c]
        on_bg.append(float(weights[inside & (labels < 0.5)].sum()))
        outside.append(float(weights[~inside].sum()))
    return {"pixels": int(len(fg)), "fg_on_bg_mass": float(np.mean(on_bg)),
            "outside_mass": float(np.mean(outside))}


def run_attnviz(cfg: RunConfig, ckpt: str, image_path: str, pixels, out_dir: str,
                mask_path: str | None = None) -> list[str]:
    """Heatmap PNG + JSON of raw weights for each requested pixel and attended module."""
    net = _load_model(cfg, ckpt)
    image = load_image(image_path)
    h, w = image.shape[1:]
    size = cfg.network.input_size
    for x, y in pixels:
        if not (0 <= x < w and 0 <= y < h):
            raise DataError(f"pixel ({x}, {y}) outside the {w}x{h} image")
    net_in = resize_bilinear(image, size, size).astype(np.float32) if (h, w) != (size, size) \
        else image
    with no_grad():
        fields = net.forward(Tensor(net_in[None]), training=False).attention
    if not fields:
        raise ConfigurationError(f"placement {cfg.network.placement!r} has no attention modules")
    written = []
    for index, field_ in sorted(fields.items()):
        fh, fw = field_.weights.shape[2:]
        for x, y in pixels:
            row, col = min(int(y * fh / h), fh - 1), min(int(x * fw / w), fw - 1)
            grid = field_.at(0, row, col).astype(np.float64)
            heat = _expand_grid(grid, field_.footprint)
            gray = to_uint8(heat / heat.max()) if heat.max() > 0 else to_uint8(heat)
            stem = os.path.join(out_dir, f"attention_d{index}_x{x}_y{y}")
            _atomic_write(stem + ".png", _png_bytes(gray))
            _write_json(stem + ".json", {
                "module": index, "kind": field_.kind, "pixel": [x, y], "map_pixel": [row, col],
                "grid": list(field_.grid), "dilation": field_.dilation,
                "footprint": list(field_.footprint), "weights": grid.tolist(),
                "context": _context_offsets(field_).tolist(),
            })
            written += [stem + ".png", stem + ".json"]
    if mask_path is not None:
        mask = load_mask(mask_path)
        if mask.shape[1:] != (h, w):
            raise DataError(f"mask size {mask.shape[1:]} != image size {(h, w)}")
        full = mask[0] if (h, w) == (size, size) else \
            (resize_bilinear(mask, size, size)[0] >= 0.5).astype(np.float32)
        report = {}
        for index, field_ in sorted(fields.items()):
            fmask = resize_nearest(full[None, None], field_.weights.shape[-1])[0, 0]
            report[f"d{index}"] = attention_mass(field_, fmask)
        path = os.path.join(out_dir, "attention_mass.json")
        _write_json(path, report)
        written.append(path)
    return written


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _pixel(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pixel must be 'x,y', got {text!r}") from None
    return x, y


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="picanet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--placement", help="decoder placement string, e.g. GGLLN or GGLLN-MP")
        p.add_argument("--steps", type=int, help="override train.max_steps")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("train", help="train a saliency network")
    common(p)
    p.add_argument("--data", help="dataset directory or synthetic:<seed>:<n>")
    p.add_argument("--test-data", help="held-out dataset evaluated after training")

    p = sub.add_parser("infer", help="write saliency PNGs")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory of PNGs")

    p = sub.add_parser("eval", help="score predictions (report.json, pr.csv)")
    common(p)
    p.add_argument("--pred", help="directory of predicted maps <name>.png")
    p.add_argument("--gt", help="directory of masks <name>_mask.png or <name>.png")
    p.add_argument("--checkpoint", help="evaluate a model instead of a prediction directory")
    p.add_argument("--data", help="dataset for --checkpoint mode")

    p = sub.add_parser("gradcheck", help="finite-difference certification of every operator")
    common(p, out_required=False)
    p.add_argument("--num-seeds", type=int, default=len(DEFAULT_SEEDS))
    p.add_argument("--ops", nargs="+", help="subset of rows to check")

    p = sub.add_parser("attnviz", help="export per-pixel attention heatmaps")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--pixel", type=_pixel, action="append", required=True, help="x,y (repeatable)")
    p.add_argument("--mask", help="ground-truth mask for the attention-mass diagnostic")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "gradcheck":
            start = args.seed if args.seed is not None else 0
            ok, table = run_gradcheck_cmd(range(start, start + args.num_seeds), args.out, args.ops)
            print(table)
            return 0 if ok else 2
        ckpt_dir = os.path.dirname(os.path.abspath(args.checkpoint)) \
            if getattr(args, "checkpoint", None) else None
        cfg = apply_overrides(load_config(args.config, ckpt_dir), args.seed, args.placement,
                              args.steps)
        if args.command == "train":
            if args.data:
                cfg = dataclasses.replace(cfg, data=args.data)
            if args.test_data:
                cfg = dataclasses.replace(cfg, test_data=args.test_data)
            result = run_train(cfg, args.out)
            print(json.dumps(result, sort_keys=True))
        elif args.command == "infer":
            for path in run_infer(cfg, args.checkpoint, args.input, args.out):
                print(path)
        elif args.command == "eval":
            report = run_eval(cfg, args.out, args.pred, args.gt, args.checkpoint, args.data)
            print(json.dumps(report.summary(), sort_keys=True))
        elif args.command == "attnviz":
            for path in run_attnviz(cfg, args.checkpoint, args.image, args.pixel, args.out,
                                    args.mask):
                print(path)
        return 0
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (PicanetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
