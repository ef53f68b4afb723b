"""``scar`` command line.

    scar gen     --config C --seed S --out cloud.anc
    scar train   --config C --seed S --out codec.npz [--cloud cloud.anc]
    scar encode  --codec codec.npz --cloud cloud.anc --out scene.scar
    scar decode  --in scene.scar [--layers L] --out recon.anc
    scar eval    --config C --seed S --out DIR
    scar ablate  --config C --seed S --out DIR [--tags gru-attn,gru,mlp]
    scar inspect scene.scar

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 integrity error.
``SCAR_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .bitstream import decode_layers
from .core import ARCH_TAGS, AnchorCloud, IntegrityError, ParameterError, ScarError
from .harness import (PipelineError, cmd_ablate, cmd_inspect, cmd_pipeline, encode_trained, load_codec,
                      load_config, save_codec, scene_cloud, train_codec)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTEGRITY = 0, 2, 3, 4


def _thread_limit():
    value = os.environ.get("SCAR_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ParameterError(f"SCAR_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ParameterError(f"SCAR_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in u64")
    return value


def _common(p, out_required=True):
    p.add_argument("--config", help="JSON object of overrides on the desk preset")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=out_required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scar", description="Progressive anchor-feature codec.")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("gen", help="write a synthetic anchor cloud"))
    p = sub.add_parser("train", help="run the training curriculum and save the codec")
    _common(p)
    p.add_argument("--cloud", help="train on this .anc file instead of a generated scene")
    p = sub.add_parser("encode", help="code a cloud with a trained codec")
    _common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--cloud", required=True)
    p = sub.add_parser("decode", help="decode a prefix of a bitstream")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--layers", type=int, help="number of layers to decode (default: all complete)")
    _common(sub.add_parser("eval", help="train, code, decode every prefix and write the report"))
    p = sub.add_parser("ablate", help="compare entropy-model architectures on one scene")
    _common(p)
    p.add_argument("--tags", default=",".join(ARCH_TAGS))
    p = sub.add_parser("inspect", help="summarize a bitstream")
    _common(p, out_required=False)
    p.add_argument("path")
    return parser


def _run(args) -> int:
    if args.command == "inspect":
        summary = cmd_inspect(args.path)
        text = "\n".join(summary.lines) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        sys.stdout.write(text)
        return EXIT_OK if summary.ok else EXIT_INTEGRITY
    if args.command == "decode":
        out = decode_layers(Path(args.input).read_bytes(), args.layers)
        out.cloud.save(args.out)
        print(f"decoded {out.layers} layer(s); {int(out.mask.levels[-1].sum())} of {out.cloud.n} anchors visible")
        return EXIT_OK

    config = load_config(args.config).replace(seed=args.seed)
    if args.command == "gen":
        scene_cloud(config, args.seed).save(args.out)
    elif args.command == "train":
        cloud = AnchorCloud.load(args.cloud) if args.cloud else scene_cloud(config, args.seed)
        save_codec(args.out, train_codec(cloud, config, args.seed))
    elif args.command == "encode":
        cloud = AnchorCloud.load(args.cloud)
        Path(args.out).write_bytes(encode_trained(cloud, load_codec(args.codec, cloud)).to_bytes())
    elif args.command == "eval":
        report, _ = cmd_pipeline(config, args.seed, args.out)
        sys.stdout.write(report.to_csv())
    elif args.command == "ablate":
        rows = cmd_ablate(config, [t for t in args.tags.split(",") if t], args.seed, args.out)
        for r in rows:
            print(f"{r.tag:<14}{r.file_bytes:>10}{r.payload_bytes:>10}  {r.mse:.6g}")
    return EXIT_OK


def _exit_code(exc: BaseException) -> int:
    while isinstance(exc, PipelineError) and exc.__cause__ is not None:
        exc = exc.__cause__
    if isinstance(exc, IntegrityError):
        return EXIT_INTEGRITY
    if isinstance(exc, ParameterError):
        return EXIT_CONFIG
    return EXIT_DATA


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return _run(args)
    except (ScarError, OSError) as exc:
        print(f"scar {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
