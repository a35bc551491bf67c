"""Command-line entry point: ``hebnn keygen|train|serve|infer|bench``.

Exit codes: 0 success, 2 usage, 3 protocol or transport failure, 4 model or data error.
Settings resolve as flags, then ``HEBNN_ADDR`` / ``HEBNN_PRESET``, then defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bfv
from .bnn import (
    DatasetError,
    ModelFormatError,
    TrainConfig,
    TrainingDivergedError,
    load_dataset,
    load_model,
    read_idx,
    save_model,
    train,
)
from .bnn.data import load_mnist
from .encoding import EncodingError
from .net import InferenceServer, TransportError, infer_remote, run_bench
from .protocol import ProtocolError, check_model_headroom
from .ring import PRESETS, RingError, SecureRng, get_preset

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL, EXIT_DATA = 0, 2, 3, 4
DEFAULT_ADDR = "127.0.0.1:7700"
PUBLIC_KEY_FILE = "public.key"
SECRET_KEY_FILE = "secret.key"

log = logging.getLogger("hebnn")


class UsageError(Exception):
    pass


def _addr(args) -> str:
    return args.addr or os.environ.get("HEBNN_ADDR") or DEFAULT_ADDR


def _params(args):
    name = getattr(args, "preset", None) or os.environ.get("HEBNN_PRESET") or "default"
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return get_preset(name)


def load_keys(directory, params):
    d = Path(directory)
    try:
        pk = bfv.deserialize_public_key((d / PUBLIC_KEY_FILE).read_bytes(), params)
        sk = bfv.deserialize_secret_key((d / SECRET_KEY_FILE).read_bytes(), params)
    except OSError as exc:
        raise DatasetError(f"cannot read keys from {d}: {exc}") from exc
    except bfv.SerializationError as exc:
        raise DatasetError(f"key files in {d} do not match preset {params.name!r}: {exc}") from exc
    return pk, sk


def load_input(path, index: int = 0) -> np.ndarray:
    """One input vector from ``.npy``, IDX (``index`` selects the image) or CSV/text."""
    p = Path(path)
    try:
        if p.suffix == ".npy":
            x = np.load(p, allow_pickle=False)
            batched = x.ndim == 3
        elif p.suffix in (".csv", ".txt"):
            x = np.loadtxt(p, delimiter="," if p.suffix == ".csv" else None, ndmin=2)
            if x.shape[1] == 1:  # a single vector written one value per line
                x = x[:, 0]
            batched = x.ndim == 2  # otherwise one image per row
        else:
            x = read_idx(p)
            batched = x.ndim >= 2
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read input {p}: {exc}") from exc
    if batched:
        if not 0 <= index < len(x):
            raise DatasetError(f"index {index} out of range for {len(x)} inputs")
        x = x[index]
    x = x.astype(np.float64)
    if x.max(initial=0) > 1.0:
        x = x / 255.0
    if not np.all(np.isfinite(x)):
        raise DatasetError("input has non-finite values")
    return x.ravel()


def _load_data(path):
    """A directory holding the MNIST files yields ``(train, test)``; a single file yields ``(data, None)``."""
    p = Path(path)
    if p.is_dir():
        return load_mnist(p)
    return load_dataset(p), None


# -- commands -------------------------------------------------------------------------------

def cmd_keygen(args) -> int:
    params = _params(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pk, sk = bfv.keygen(params, np.random.default_rng(args.seed) if args.seed is not None else SecureRng())
    (out / PUBLIC_KEY_FILE).write_bytes(bfv.serialize_public_key(pk))
    sk_path = out / SECRET_KEY_FILE
    sk_path.write_bytes(bfv.serialize_secret_key(sk))
    sk_path.chmod(0o600)
    print(json.dumps({"keys": str(out), "preset": params.name}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise DatasetError(f"cannot read training config: {exc}") from exc
    for key in ("epochs", "mode", "seed", "S"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    try:
        config = TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    train_set, test_set = _load_data(args.data)
    if args.limit:
        train_set = train_set.subset(min(args.limit, len(train_set)))
    result = train(config, train_set, test_set)
    meta = {"config": config.to_dict(), "train_accuracy": result.train_accuracy,
            "test_accuracy": result.test_accuracy, "history": result.history}
    save_model(args.out, result.network, result.stats, meta)
    print(json.dumps({"model": str(args.out), "train_accuracy": result.train_accuracy,
                      "test_accuracy": result.test_accuracy, "stats": result.stats}))
    return EXIT_OK


def _open_server(args):
    params = _params(args)
    network, stats, _ = load_model(args.model)
    server = InferenceServer(network, params, args.samples, args.listen or os.environ.get("HEBNN_ADDR")
                             or DEFAULT_ADDR, seed=args.seed, theta_dir=args.theta_dir, chunking=args.chunking)
    check_model_headroom(stats, server.manifest.scale, params.t)
    return server


def cmd_serve(args) -> int:
    server = _open_server(args)
    print(json.dumps({"listening": server.address, "S": args.samples, "preset": server.params.name}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


def cmd_infer(args) -> int:
    params = _params(args)
    keys = load_keys(args.keys, params) if args.keys else None
    x = load_input(args.input, args.index)
    result = infer_remote(_addr(args), x, params, keys)
    print(json.dumps({"label": result.label, "probabilities": [float(v) for v in result.probabilities],
                      "session": f"{result.session_id:016x}", "latency_s": result.seconds,
                      "bytes_sent": result.bytes_sent, "bytes_received": result.bytes_received}))
    return EXIT_OK


def cmd_bench(args) -> int:
    params = _params(args)
    keys = load_keys(args.keys, params) if args.keys else None
    p = Path(args.data)
    data = load_mnist(p)[1] if p.is_dir() else load_dataset(p)
    report = run_bench(_addr(args), data.images[:args.count], args.count, params, keys,
                       model_id=args.model_id)
    text = report.to_table() if args.format == "table" else report.to_jsonl()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hebnn", description="Encrypted Bayesian neural network inference.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def preset(p):
        p.add_argument("--preset", choices=sorted(PRESETS), help="ring parameter preset (env HEBNN_PRESET)")

    p = sub.add_parser("keygen", help="generate a key pair")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="deterministic keys (testing only)")
    preset(p)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--data", required=True, help="MNIST directory or dataset file")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--epochs", type=int)
    p.add_argument("--mode", choices=("bayes", "normal"))
    p.add_argument("--seed", type=int)
    p.add_argument("--S", type=int, help="ensemble size used for evaluation")
    p.add_argument("--limit", type=int, help="train on the first N examples only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("serve", help="serve encrypted inference")
    p.add_argument("--model", required=True)
    p.add_argument("--listen", help=f"HOST:PORT (env HEBNN_ADDR, default {DEFAULT_ADDR})")
    p.add_argument("--samples", type=int, default=4, help="ensemble size S")
    p.add_argument("--seed", type=int, help="reproducible per-session sampling")
    p.add_argument("--theta-dir", help="debug: export each session's sampled weights here")
    p.add_argument("--chunking", choices=("auto", "none"), default="auto")
    preset(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("infer", help="classify one input")
    p.add_argument("--addr", help=f"server HOST:PORT (env HEBNN_ADDR, default {DEFAULT_ADDR})")
    p.add_argument("--input", required=True, help=".npy, IDX or CSV input")
    p.add_argument("--index", type=int, default=0, help="image index within a multi-image file")
    p.add_argument("--keys", help="key directory from keygen (fresh keys if omitted)")
    preset(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="measure latency and traffic")
    p.add_argument("--addr")
    p.add_argument("--data", required=True, help="MNIST directory or dataset file")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--format", choices=("table", "jsonl"), default="table")
    p.add_argument("--keys")
    p.add_argument("--out", help="also write the report here")
    p.add_argument("--model-id", default="model")
    preset(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hebnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProtocolError, TransportError) as exc:
        print(f"hebnn: protocol failure: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (DatasetError, ModelFormatError, EncodingError, TrainingDivergedError, RingError,
            OSError) as exc:
        print(f"hebnn: model/data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
