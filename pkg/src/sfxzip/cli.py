"""Command-line entry point.

Exit codes: 0 ok, 1 usage / invalid argument, 2 data or format error
(including missing checkpoints), 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import bitstream, metrics, nn as fnn, sampler
from .config import RunConfig, desk_config
from .corpus import load_latents
from .errors import FormatError, InvalidArgument, MissingCheckpoint, NumericFailure

log = logging.getLogger("sfxzip")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "SFXZIP_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_cfg(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
    elif getattr(args, "run", None) and (Path(args.run) / "config.yaml").exists():
        cfg = RunConfig.load(Path(args.run) / "config.yaml")
    else:
        raise InvalidArgument("pass --config FILE (or --run DIR holding config.yaml)")
    if getattr(args, "run", None):
        cfg.run_dir = str(args.run)
    if getattr(args, "seed", None) is not None and getattr(args, "command", "") == "train":
        cfg.seed = cfg.train.seed = args.seed
    return cfg


def _kv(d: dict):
    for k, v in d.items():
        print(f"{k}={v}")


# -- commands -------------------------------------------------------------------------------

def cmd_init_config(args):
    cfg = desk_config() if args.preset == "desk" else RunConfig()
    out = Path(args.out)
    if out.exists() and not args.force:
        raise InvalidArgument(f"{out} exists (use --force to overwrite)")
    cfg.dump(out)
    print(f"wrote {out} ({args.preset} preset)")


def cmd_gen_corpus(args):
    from .corpus import write_corpus

    if args.clips < 1:
        raise InvalidArgument("--clips must be >= 1")
    if not args.duration > 0:
        raise InvalidArgument("--duration must be positive")
    path = write_corpus(args.out, args.clips, args.duration, args.seed, args.force)
    print(f"wrote {args.clips} clips and {path}")


def cmd_train(args):
    from .training import run_stage, smoothed

    cfg = _load_cfg(args)
    last = [time.time()]

    def progress(stage, rec):
        if (rec.step + 1) % args.log_every == 0 or time.time() - last[0] > 30:
            last[0] = time.time()
            log.info("stage %s step %d loss %.4f mse %.4f", stage, rec.step + 1, rec.loss, rec.mse)

    res = run_stage(args.stage, cfg, resume=args.resume, progress=progress)
    summary = {"stage": res.stage, "checkpoint": res.checkpoint, "seconds": f"{res.seconds:.1f}"}
    if res.loss_curve is not None:
        sm = smoothed(res.losses)
        summary.update(loss_curve=res.loss_curve, steps=len(res.losses),
                       smoothed_initial=f"{sm[min(49, len(sm) - 1)]:.5g}", smoothed_final=f"{sm[-1]:.5g}")
    else:
        summary.update(codebooks=len(res.losses), final_stage_mse=f"{res.losses[-1]:.5g}")
    _kv(summary)


def _codec(args, adapters="auto"):
    from .pipeline import Codec

    cfg = _load_cfg(args) if getattr(args, "config", None) else None
    run = Path(args.run) if args.run else Path(cfg.run_dir)
    return Codec.load(run, cfg, adapters=adapters)


def cmd_encode(args):
    from .pipeline import encode_file

    codec = _codec(args)
    summary = encode_file(args.input, codec, args.m_use, args.output, seed=args.seed)
    br = summary.pop("bitrate")
    nominal = summary.pop("nominal_bitrate")
    _kv(summary)
    print(f"bitrate={float(br):g} bps")
    print(f"nominal_bitrate={float(nominal):g} bps")


def cmd_decode(args):
    from .pipeline import decode_file

    codec = _codec(args)
    out = decode_file(args.input, codec, steps=args.steps, seed=args.seed, out_path=args.output)
    _kv({"output": args.output, "samples": len(out), "steps": args.steps or codec.cfg.sampler.steps,
         "seed": args.seed if args.seed is not None else "header"})


def cmd_eval(args):
    from .pipeline import Variant, eval_suite, write_table
    from .training import load_frontend, split

    cfg = _load_cfg(args)
    run = Path(cfg.run_dir)
    fe = load_frontend(run, cfg)
    if args.testset:
        testset = load_latents(args.testset, fe)
    else:
        _, testset = split(load_latents(cfg.corpus, fe), cfg.train)
    if args.limit:
        testset = testset.subset(range(min(args.limit, len(testset))))
    default_ad = "3" if (run / "stage3.safetensors").exists() else "1"
    variants = [Variant.parse(v.strip(), default_ad) for v in args.variants.split(",") if v.strip()]
    if args.sweep:
        from .training import load_quantizer

        M = load_quantizer(run).M
        variants += [Variant(f"discrete:{m}@{default_ad}", m, default_ad) for m in range(1, M + 1)]
    if not variants:
        raise InvalidArgument("no variants given")
    rows = eval_suite(run, testset, variants, steps=args.steps, seed=args.seed, sample=not args.no_sample)
    write_table(args.out, rows)
    print(Path(args.out).read_text(), end="")


# -- selftest ----------------------------------------------------------------------------------

def _selftest_checks():
    def grads():
        rng = torch.Generator().manual_seed(0)
        x = torch.randn(3, 4, generator=rng, dtype=torch.float64)
        W = torch.randn(5, 4, generator=rng, dtype=torch.float64)
        b = torch.randn(5, generator=rng, dtype=torch.float64)
        g = torch.rand(4, generator=rng, dtype=torch.float64) + 0.5
        errs = {
            "linear": fnn.grad_check(fnn.linear, [x, W, b]),
            "rmsnorm": fnn.grad_check(fnn.rmsnorm, [x, g]),
            "gelu": fnn.grad_check(fnn.gelu, [x]),
        }
        xs = torch.randn(1, 4, 8, generator=rng, dtype=torch.float64)
        rope = fnn.RopeTable(torch.arange(4), 4)
        Ws = [torch.randn(8, 8, generator=rng, dtype=torch.float64) * 0.3 for _ in range(4)]
        errs["attention"] = fnn.grad_check(
            lambda x, q, k, v, o: fnn.mha(x, None, rope, None, 2, {"Wq": q, "Wk": k, "Wv": v, "Wo": o}), [xs, *Ws])
        bad = {k: v for k, v in errs.items() if not v <= 1e-4}
        return not bad, f"gradient check errors {bad}"

    def fuzz():
        rng = np.random.default_rng(0)
        for i in range(300):
            M, log2K, T = int(rng.integers(1, 33)), int(rng.integers(1, 17)), int(rng.integers(0, 65))
            codes = rng.integers(0, 1 << log2K, size=(M, T))
            blob = bitstream.pack_codes(codes, log2K)
            back = bitstream.unpack_codes(blob, M, log2K, T).codes
            if len(blob) != bitstream.payload_bytes(M, log2K, T) or not np.array_equal(back, codes):
                return False, f"pack/unpack round trip failed for case {i} (M={M}, log2K={log2K}, frames={T})"
        if bitstream.pack_codes(np.array([[3], [1], [2]]), 2) != b"\xd8":
            return False, "hand packing [3,1,2] @ 2 bits != 0xD8"
        return True, ""

    def schedule():
        s = sampler.build_schedule(64).sigmas
        ok = s[0] == 80 and s[63] == 0.002 and s[64] == 0 and bool(torch.all(s[1:] < s[:-1]))
        return ok, f"schedule endpoints {float(s[0])}, {float(s[63])}, {float(s[64])}"

    def sisdr():
        rng = np.random.default_rng(1)
        r = rng.standard_normal(2000)
        n = rng.standard_normal(2000)
        n -= n @ r / (r @ r) * r
        n *= np.linalg.norm(r) / np.linalg.norm(n)
        e = rng.standard_normal(2000)
        base = metrics.si_sdr(r, e)
        ok = (metrics.si_sdr(r, r) == 100 and abs(metrics.si_sdr(r, r + n)) < 1e-6
              and abs(metrics.si_sdr(r, -3.7 * e) - base) < 1e-9)
        return ok, "Si-SDR identities"

    def frechet():
        S = metrics.EmbeddingStats
        d1 = metrics.frechet_distance(S(np.zeros(1), np.eye(1), 2), S(np.ones(1), np.eye(1), 2))
        d2 = metrics.frechet_distance(S(np.zeros(1), np.eye(1), 2), S(np.zeros(1), 4 * np.eye(1), 2))
        return abs(d1 - 1) < 1e-9 and abs(d2 - 1) < 1e-9, f"Frechet analytic cases gave {d1}, {d2}"

    return [("gradient checks", grads), ("pack/unpack fuzz", fuzz), ("sigma schedule", schedule),
            ("si-sdr identities", sisdr), ("frechet analytic", frechet)]


def selftest(stream=None) -> int:
    stream = stream or sys.stdout
    t0 = time.time()
    for name, check in _selftest_checks():
        try:
            ok, msg = check()
        except Exception as exc:  # report, do not crash
            ok, msg = False, f"{type(exc).__name__}: {exc}"
        print(f"{'PASS' if ok else 'FAIL'} {name}" + ("" if ok else f": {msg}"), file=stream)
        if not ok:
            return EXIT_NUMERIC
    print(f"selftest ok in {time.time() - t0:.1f}s", file=stream)
    return EXIT_OK


def cmd_selftest(args):
    return selftest()


# -- parser ---------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sfxzip", description="Diffusion-autoencoder sound-effect codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init-config", help="write a config file with every default")
    s.add_argument("--out", default="config.yaml")
    s.add_argument("--preset", choices=("reference", "desk"), default="desk")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init_config)

    s = sub.add_parser("gen-corpus", help="write a synthetic sound-effect corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, default=512)
    s.add_argument("--duration", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--stage", required=True, choices=("pretrain", "1", "q", "3"))
    s.add_argument("--config", required=True)
    s.add_argument("--run", help="run directory (overrides the config)")
    s.add_argument("--seed", type=int, help="override the global seed")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    for name, fn, help_ in (("encode", cmd_encode, "WAV -> .spz"), ("decode", cmd_decode, ".spz -> WAV")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("input")
        s.add_argument("output")
        s.add_argument("--run", help="run directory holding config.yaml and checkpoints")
        s.add_argument("--config")
        if name == "encode":
            s.add_argument("--m-use", type=int, default=None, help="codebooks to transmit (default: all)")
            s.add_argument("--seed", type=int, default=0, help="decode seed stored in the header")
        else:
            s.add_argument("--steps", type=int, default=None, help="Heun steps (default from config, 64)")
            s.add_argument("--seed", type=int, default=None, help="override the header seed")
        s.set_defaults(func=fn)

    s = sub.add_parser("eval", help="evaluate codec variants on a test set")
    s.add_argument("--config", required=True)
    s.add_argument("--run")
    s.add_argument("--testset", help="corpus dir/manifest (default: held-out clips of the training corpus)")
    s.add_argument("--variants", default="continuous,discrete:10",
                   help="comma list of continuous | discrete:<m_use>, each optionally @1 or @3")
    s.add_argument("--sweep", action="store_true", help="add discrete:1..M")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--limit", type=int, default=0, help="use at most this many test clips")
    s.add_argument("--no-sample", action="store_true", help="latent metrics only, skip sampling")
    s.add_argument("--out", default="results.tsv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="fast property checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    if os.environ.get(THREADS_ENV):
        torch.set_num_threads(int(os.environ[THREADS_ENV]))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"sfxzip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
        return EXIT_OK if rc is None else rc
    except NumericFailure as exc:
        print(f"sfxzip: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, MissingCheckpoint, FileNotFoundError, IsADirectoryError) as exc:
        print(f"sfxzip: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidArgument as exc:
        print(f"sfxzip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
