"""Command-line interface: ``genaug {augment,score,eval,zoo-gen}``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from ._parallel import ENV_THREADS, resolve_threads
from .evaluation import evaluate_zoo
from .metric import load_penalty_config, score_model
from .nn import load_model
from .rng import RngStream
from .zoo import (Dataset, generate_synthetic_zoo, load_cifar10, load_dataset,
                  make_texture_shape_dataset, resolve_grid, save_dataset)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
FORMAT_VERSION = 1


class CliError(ValueError):
    pass


# -- image files --------------------------------------------------------------------

def _read_token(raw: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(raw) and not raw[pos:pos + 1].isspace():
        pos += 1
    return raw[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read an 8-bit binary PPM (P6) or PGM (P5) into a ``[H, W, C]`` image."""
    raw = Path(path).read_bytes()
    magic, pos = _read_token(raw, 0)
    if magic not in (b"P5", b"P6"):
        raise CliError(f"{path}: not a binary PPM/PGM file")
    try:
        w, pos = _read_token(raw, pos)
        h, pos = _read_token(raw, pos)
        maxval, pos = _read_token(raw, pos)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise CliError(f"{path}: malformed header") from None
    if maxval != 255:
        raise CliError(f"{path}: only 8-bit images (maxval 255) are supported")
    c = 3 if magic == b"P6" else 1
    data = raw[pos + 1:]
    if len(data) != w * h * c:
        raise CliError(f"{path}: expected {w * h * c} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, c).astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, img: np.ndarray) -> None:
    h, w, c = img.shape
    magic = b"P6" if c == 3 else b"P5"
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + quantize(img).tobytes())


def read_image(path, index: int | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head in (b"P5", b"P6"):
        return read_pnm(path)
    data = load_dataset(path)
    if index is None:
        raise CliError(f"{path} is a dataset container; pass --index to pick an image")
    if not 0 <= index < len(data):
        raise CliError(f"--index {index} out of range for {len(data)} images")
    return data.images[index]


class _RecordingStream(RngStream):
    def __init__(self, seed):
        super().__init__(seed)
        self.draws = []

    def uniform(self, lo=0.0, hi=1.0):
        v = super().uniform(lo, hi)
        self.draws.append({"uniform": [lo, hi], "value": v})
        return v

    def integers(self, lo, hi):
        v = super().integers(lo, hi)
        self.draws.append({"integers": [lo, hi], "value": v})
        return v

    def normal(self, shape):
        self.draws.append({"normal": list(shape)})
        return super().normal(shape)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_op(op: str, params: list[str]) -> aug.AugmentationSpec:
    kv = {}
    for item in params or []:
        if "=" not in item:
            raise CliError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = _parse_value(v.strip())
    parts = [p for p in op.split("+") if p]
    if len(parts) > 1:
        if kv:
            raise CliError("--param is not supported with composed ops")
        return aug.AugmentationSpec("compose", children=parts)
    return aug.AugmentationSpec(op, params=kv)


# -- commands -------------------------------------------------------------------------

def cmd_augment(args) -> int:
    img = read_image(args.input, args.index)
    spec = parse_op(args.op, args.param)
    model = load_model(args.model) if args.model else None
    rng = _RecordingStream(args.seed)
    out = aug.apply(spec, img, rng, model=model)
    write_pnm(args.out, out)
    print(json.dumps({"format_version": FORMAT_VERSION, "op": spec.to_dict(with_penalty=False),
                      "seed": args.seed, "draws": rng.draws, "out": str(args.out)}, sort_keys=True))
    return EXIT_OK


def _load_data(path) -> Dataset:
    p = Path(path)
    if p.is_dir():
        return load_cifar10(p, "train")
    return load_dataset(p)


def cmd_score(args) -> int:
    model = load_model(args.model)
    data = _load_data(args.data)
    config = load_penalty_config(args.config)
    if args.sample_count is not None:
        config.sample_count = args.sample_count
    model_id = args.model_id or model.metadata.get("model_id") or Path(args.model).stem
    report = score_model(model, data, config, threads=args.threads, model_id=model_id)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    summary = {"model_id": model_id, "phi_total": report.phi_total,
               "phi_per_sample": report.phi_per_sample, "samples_scored": report.samples_scored}
    for note in report.notes:
        print(f"note: {note}", file=sys.stderr)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.reports).is_dir():
        raise CliError(f"--reports must be a directory: {args.reports}")
    report = evaluate_zoo(args.zoo, args.reports, args.k)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"cmi_score": report["cmi"]["score"], "kendall_tau": report["kendall_tau"],
                      "n_models": report["n_models"]}, sort_keys=True))
    return EXIT_OK


def cmd_zoo_gen(args) -> int:
    grid = None
    if args.grid:
        text = Path(args.grid).read_text() if Path(args.grid).exists() else args.grid
        try:
            grid = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError(f"--grid is neither a JSON file nor inline JSON: {exc}") from None
    grid = resolve_grid(grid)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}") from None
    size = int(grid["image_size"])
    train = make_texture_shape_dataset(int(grid["n_train"]), args.seed, size, "train")
    test = make_texture_shape_dataset(int(grid["n_test"]), args.seed, size, "test")
    save_dataset(out / "train.gds", train)
    save_dataset(out / "test.gds", test)
    manifest = generate_synthetic_zoo(grid, train, test, out, seed=args.seed, threads=args.threads)
    summary = {
        "format_version": FORMAT_VERSION,
        "seed": args.seed,
        "n_models": len(manifest.entries),
        "manifest": str(out / "zoo.json"),
        "train_data": str(out / "train.gds"),
        "test_data": str(out / "test.gds"),
        "models": [{"model_id": e.model_id, "train_acc": e.train_acc, "test_acc": e.test_acc}
                   for e in manifest.entries],
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genaug", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker cap (default: ${ENV_THREADS} or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("augment", help="augment one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--op", required=True, help="kind, or kinds joined by '+' to compose")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", default=[], metavar="K=V")
    p.add_argument("--index", type=int, default=None, help="image index in a dataset container")
    p.add_argument("--model", default=None, help="model manifest (vap only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("score", help="score a model with the augmentation metric")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="dataset container or CIFAR-10 binary directory")
    p.add_argument("--config", required=True, help="penalty config JSON or preset name")
    p.add_argument("--out", required=True)
    p.add_argument("--sample-count", type=int, default=None)
    p.add_argument("--model-id", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate metric reports against a zoo")
    p.add_argument("--zoo", required=True)
    p.add_argument("--reports", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("zoo-gen", aliases=["zoo_gen"], help="train a synthetic model zoo")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default=None, help="grid JSON file or inline JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_zoo_gen)

    for sp in {id(sp): sp for sp in sub.choices.values()}.values():
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.threads = resolve_threads(args.threads)
        return args.func(args)
    except ArithmeticError as exc:
        print(f"genaug: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"genaug: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
