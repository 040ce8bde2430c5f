"""Command-line entry point: ``msseg {phantom,train,segment,evaluate,kernels}``.

Exit codes: 0 success, 1 usage or configuration error, 2 file format or
geometry error, 3 numeric failure during optimization.
"""

import argparse
import configparser
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_model, save_model
from .errors import ConfigurationError, MssegError
from .inference import dump_kernels, kernel_response, segment
from .io import read_volume, write_volume
from .metrics import evaluate, format_csv, format_table
from .network import Model, default_config
from .phantom import DEFAULT_EXTENTS, DEFAULT_NOISE, generate_phantom
from .training import TrainingConfig, train, write_history
from .volume import Volume, scale_intensities

TRAINING_KEYS = {
    "samples_per_class": int, "epochs": int, "batch_size": int, "learning_rate": float,
    "rho": float, "epsilon": float, "keep_prob": float, "seed": int,
}
NETWORK_KEYS = {"num_classes": int, "patch_sizes": str}
# file keys of a training triplet, also the volume kind each is read as
TRIPLET_KEYS = ("image", "labels", "mask")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageExit(f"{self.prog}: error: {message}")


class _UsageExit(Exception):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _volume_hashes(path):
    """Hash a volume file and, for raw-sidecar headers, its payload too."""
    path = Path(path)
    out = {str(path): sha256_file(path)}
    raw = path.with_suffix(".raw")
    if path.suffix != ".nii" and raw.exists():
        out[str(raw)] = sha256_file(raw)
    return out


def _line_of(path, section, key):
    current = None
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=", 1)[0].split(":", 1)[0].strip().lower() == key:
            return n
    return None


def _convert(path, section, key, value, kind):
    try:
        return kind(value)
    except ValueError:
        line = _line_of(path, section, key)
        raise ConfigurationError(
            f"{path}:{line}: [{section}] {key} = {value!r} is not a valid {kind.__name__}") from None


def load_train_config(path):
    """Parse a training config file.

    Returns ``(network_kwargs, TrainingConfig, images, validation)`` where
    ``images`` is a list of ``(image, labels, mask)`` path triplets. Relative
    paths are resolved against the config file's directory.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    base = path.parent
    training, network, images, validation = {}, {}, [], None
    for section in parser.sections():
        items = parser[section]
        if section in ("training", "network"):
            schema = TRAINING_KEYS if section == "training" else NETWORK_KEYS
            target = training if section == "training" else network
            for key, value in items.items():
                if key not in schema:
                    line = _line_of(path, section, key)
                    raise ConfigurationError(
                        f"{path}:{line}: unknown key '{key}' in [{section}]")
                target[key] = _convert(path, section, key, value, schema[key])
        elif section == "validation" or section.startswith("image"):
            for key in items:
                if key not in TRIPLET_KEYS:
                    line = _line_of(path, section, key)
                    raise ConfigurationError(
                        f"{path}:{line}: unknown key '{key}' in [{section}]")
            missing = [k for k in TRIPLET_KEYS if k not in items]
            if missing:
                raise ConfigurationError(f"{path}: [{section}] lacks '{missing[0]}'")
            triplet = tuple(base / items[k] for k in TRIPLET_KEYS)
            if section == "validation":
                validation = triplet
            else:
                images.append(triplet)
        else:
            raise ConfigurationError(f"{path}: unknown section [{section}]")
    if not images:
        raise ConfigurationError(f"{path}: no [image ...] sections")
    if "num_classes" not in network:
        raise ConfigurationError(f"{path}: [network] num_classes is required")
    if "patch_sizes" in network:
        try:
            network["patch_sizes"] = [int(s) for s in network["patch_sizes"].replace(",", " ").split()]
        except ValueError:
            line = _line_of(path, "network", "patch_sizes")
            raise ConfigurationError(f"{path}:{line}: patch_sizes must be integers") from None
    return network, TrainingConfig(**training), images, validation


def _load_triplet(paths):
    image, labels, mask = (read_volume(p, kind) for p, kind in zip(paths, TRIPLET_KEYS))
    return scale_intensities(image, mask), labels, mask


def cmd_phantom(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    image, labels, mask = generate_phantom(
        extents=args.extents, num_classes=args.classes, noise_sigma=args.noise, seed=args.seed)
    ext = ".nii" if args.format == "nifti" else ".hdr"
    for name, vol in (("image", image), ("labels", labels), ("mask", mask)):
        path = out / f"{args.prefix}_{name}{ext}"
        write_volume(vol, path)
        print(path)
    return 0


def cmd_train(args):
    network, cfg, triplets, val_paths = load_train_config(args.config)
    if args.seed is not None:
        cfg = TrainingConfig(**{**cfg.to_dict(), "seed": args.seed})
    if args.epochs is not None:
        cfg = TrainingConfig(**{**cfg.to_dict(), "epochs": args.epochs})
    # all inputs are read and checked before any training starts
    images = [_load_triplet(t) for t in triplets]
    validation = _load_triplet(val_paths) if val_paths else None
    net_cfg = default_config(network["num_classes"], network.get("patch_sizes"),
                             keep_prob=cfg.keep_prob, seed=cfg.seed)
    model = Model(net_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, history = train(model, images, cfg, validation=validation)
    ckpt = out / "model.ckpt"
    save_model(model, ckpt, extra={"training": cfg.to_dict()})
    write_history(history, out / "history.tsv")
    hashes = {}
    for t in triplets + ([val_paths] if val_paths else []):
        for p in t:
            hashes.update(_volume_hashes(p))
    manifest = {
        "version": __version__,
        "command": "train",
        "config_file": str(Path(args.config)),
        "config_sha256": sha256_file(args.config),
        "network": net_cfg.to_dict(),
        "training": cfg.to_dict(),
        "images": [[str(p) for p in t] for t in triplets],
        "validation": [str(p) for p in val_paths] if val_paths else None,
        "input_sha256": hashes,
        "threads": args.threads,
        "checkpoint_sha256": sha256_file(ckpt),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(ckpt)
    return 0


def _prob_path(out, c):
    out = Path(out)
    return out.with_name(f"{out.stem}_prob{c}{out.suffix}")


def cmd_segment(args):
    model, _ = load_model(args.model)
    image = read_volume(args.image, "image")
    mask = read_volume(args.mask, "mask")
    result = segment(scale_intensities(image, mask), mask, model,
                     batch_size=args.batch_size, return_probs=args.probs)
    labels, probs = result if args.probs else (result, None)
    write_volume(labels, args.out)
    print(args.out)
    if probs is not None:
        for c in range(probs.shape[0]):
            path = _prob_path(args.out, c)
            write_volume(Volume(probs[c], image.spacing, image.slice_axis), path)
            print(path)
    return 0


def cmd_evaluate(args):
    pred = read_volume(args.pred, "labels")
    ref = read_volume(args.ref, "labels")
    n = args.classes or max(pred.num_classes, ref.num_classes)
    report = evaluate(pred, ref, num_classes=n, case=Path(args.pred).stem)
    text = format_csv(report) if args.format == "csv" else format_table(report) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_kernels(args):
    model, _ = load_model(args.model)
    png, tsv = dump_kernels(model, args.out, layer=args.layer)
    print(png)
    print(tsv)
    if args.image:
        if not args.mask:
            raise _UsageExit("kernels: --image needs --mask for intensity scaling")
        image = read_volume(args.image, "image")
        mask = read_volume(args.mask, "mask")
        scaled = scale_intensities(image, mask)
        n = dict(model.named_params())[args.layer].weights.shape[0]
        maps = np.stack([kernel_response(model, scaled, args.slice, args.layer, k)
                         for k in range(n)], axis=-1)
        in_plane = [image.spacing[a] for a in image.in_plane_axes]
        path = Path(args.out).with_name(Path(args.out).stem + "_response.hdr")
        write_volume(Volume(maps.astype(np.float32), in_plane + [1.0], slice_axis=2), path)
        print(path)
    return 0


def build_parser():
    p = _Parser(prog="msseg", description="Multi-scale patch CNN voxel segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS/FFT worker threads (1 is the bit-exact reference mode)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="write a synthetic (image, labels, mask) triplet")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--noise", type=float, default=DEFAULT_NOISE)
    s.add_argument("--extents", type=int, nargs=3, default=list(DEFAULT_EXTENTS))
    s.add_argument("--format", choices=("sidecar", "nifti"), default="sidecar")
    s.add_argument("--prefix", default="phantom")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train a network from a config file")
    s.add_argument("config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override [training] seed")
    s.add_argument("--epochs", type=int, help="override [training] epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", help="label every masked voxel of an image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--probs", action="store_true", help="also write per-class probability volumes")
    s.add_argument("--batch-size", type=int, default=256)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("evaluate", help="per-class Dice and mean surface distance")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--classes", type=int, help="class count (default: from the files)")
    s.add_argument("--format", choices=("table", "csv"), default="table")
    s.add_argument("--out", help="also write the report here")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("kernels", help="dump convolution kernels (and optional responses)")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True, help="PNG path; raw values go next to it as .tsv")
    s.add_argument("--layer", default="branch0.conv0")
    s.add_argument("--image", help="also write first-layer responses on this image")
    s.add_argument("--mask")
    s.add_argument("--slice", type=int, default=0)
    s.set_defaults(func=cmd_kernels)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("msseg: error: --threads must be >= 1", file=sys.stderr)
        return 1
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return 1
    except MssegError as exc:
        print(f"msseg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"msseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
