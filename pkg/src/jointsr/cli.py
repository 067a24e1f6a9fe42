"""Command-line surface: upscale, train-dict, train-epitome, evaluate,
metrics, bt-rank.

A key=value config file (via --config) can preset any long flag of the
invoked subcommand; values given on the command line win. The JSR_THREADS
environment variable supplies the worker count when --threads is absent,
and --threads 0 means one worker per CPU.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import epitome as ep_mod
from . import harness, imagecore, joint, metrics, ranking, sparse
from ._parallel import resolve_threads

__all__ = ["main", "build_parser", "build_joint_config"]

_IMAGE_SUFFIXES = (".png", ".pgm", ".jpg", ".jpeg", ".bmp")


@dataclass
class RunConfig:
    """Validated settings of one upscale invocation."""

    mode: str
    factor: int
    input: str
    output: str
    dict_path: str | None
    epitome_path: str | None
    weight_map: str | None
    trace: str | None
    fixed_omega: float | None
    seed: int
    threads: int
    joint: joint.JointConfig
    nn_radius: int


def _add_joint_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch", type=int, default=5, help="low-resolution patch size")
    p.add_argument("--overlap", type=int, default=1, help="patch overlap in pixels")
    p.add_argument("--iters", type=int, default=10, help="outer coordinate-descent iterations")
    p.add_argument("--lam", type=float, default=10.0, help="L1 weight of the sparse coder")
    p.add_argument("--sharpness", type=float, default=1.0,
                   help="exponent scale p of the adaptive weight")
    p.add_argument("--top-k", type=int, default=5, help="stored match candidates per patch")
    p.add_argument("--em-iters", type=int, default=10, help="epitome EM iterations")
    p.add_argument("--nn-radius", type=int, default=7, help="local NN search window radius")
    p.add_argument("--shd", action="store_true",
                   help="preset for very large images: patch 25, overlap 5, 5 iterations")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (0 = one per CPU; default: JSR_THREADS or 1)")
    p.add_argument("--config", default=None,
                   help="key=value file presetting any long flag of this subcommand")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointsr",
        description="Single-image super-resolution from external and internal examples.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("upscale", help="super-resolve one image",
                       formatter_class=fmt, allow_abbrev=False)
    p.add_argument("input", help="input image (PNG/PGM; RGB or grayscale)")
    p.add_argument("output", help="output image path (PNG)")
    p.add_argument("--mode", choices=harness.MODES, default="bicubic",
                   help="super-resolution method")
    p.add_argument("--factor", type=int, choices=(2, 3, 4), default=2, help="upscaling factor")
    p.add_argument("--dict", dest="dict_path", default=None,
                   help="trained dictionary file (required for csc/joint modes)")
    p.add_argument("--epitome", dest="epitome_path", default=None,
                   help="pretrained epitome file to reuse")
    p.add_argument("--weight-map", default=None,
                   help="write the per-patch weight map here (PNG; CSV written alongside)")
    p.add_argument("--trace", default=None, help="write the objective trace CSV here")
    p.add_argument("--fixed-omega", type=float, default=None,
                   help="freeze the balance weight at this value (joint-fixed mode)")
    p.add_argument("--shave", type=int, default=None, help=argparse.SUPPRESS)
    _add_joint_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("train-dict", help="train a coupled dictionary from a corpus directory",
                       formatter_class=fmt, allow_abbrev=False)
    p.add_argument("corpus", help="directory of training images")
    p.add_argument("output", help="output dictionary file")
    p.add_argument("--atoms", type=int, default=512, help="dictionary size k")
    p.add_argument("--lam", type=float, default=5.0, help="L1 weight during training")
    p.add_argument("--epochs", type=int, default=10, help="training alternations")
    p.add_argument("--factor", type=int, choices=(2, 3, 4), default=2, help="upscaling factor")
    p.add_argument("--patch", type=int, default=5, help="low-resolution patch size")
    p.add_argument("--samples", type=int, default=20000, help="training patch pairs to sample")
    _add_common(p)
    p.set_defaults(func=cmd_train_dict)

    p = sub.add_parser("train-epitome", help="train and store an epitome for reuse",
                       formatter_class=fmt, allow_abbrev=False)
    p.add_argument("input", help="input image (the LR image the pipeline will see)")
    p.add_argument("output", help="output epitome file")
    p.add_argument("--factor", type=int, choices=(2, 3, 4), default=2, help="upscaling factor")
    p.add_argument("--patch", type=int, default=None,
                   help="matching patch size (default: 5 * factor, the joint-pipeline size)")
    p.add_argument("--em-iters", type=int, default=10, help="EM iterations")
    p.add_argument("--size-frac", type=float, default=0.25,
                   help="epitome area as a fraction of the source area")
    p.add_argument("--var-floor", type=float, default=1e-4, help="variance floor")
    p.add_argument("--top-k", type=int, default=5, help="stored candidates per position")
    p.add_argument("--direct", action="store_true",
                   help="train on the input image itself instead of its smoothed version")
    _add_common(p)
    p.set_defaults(func=cmd_train_epitome)

    p = sub.add_parser("evaluate", help="run the metric harness over a manifest",
                       formatter_class=fmt, allow_abbrev=False)
    p.add_argument("manifest", help="CSV manifest with header lr,gt,factor")
    p.add_argument("--modes", required=True,
                   help="comma-separated methods, e.g. bicubic,csc,joint")
    p.add_argument("--out", default=None, help="write the results table CSV here")
    p.add_argument("--dict", dest="dict_path", default=None, help="trained dictionary file")
    p.add_argument("--shave", type=int, default=None,
                   help="metric border shave (default: the row's factor)")
    _add_joint_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two images",
                       formatter_class=fmt, allow_abbrev=False)
    p.add_argument("image_a", help="test image")
    p.add_argument("image_b", help="reference image")
    p.add_argument("--factor", type=int, default=None,
                   help="scale factor (sets the default border shave)")
    p.add_argument("--shave", type=int, default=None,
                   help="border pixels to ignore per side (default: factor, else 0)")
    p.add_argument("--csv", default=None, help="append a CSV row (image,method,factor,psnr,ssim)")
    p.add_argument("--method", default="unknown", help="method label for the CSV row")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bt-rank", help="fit pairwise-preference scores from a winning matrix",
                       formatter_class=fmt, allow_abbrev=False)
    p.add_argument("matrix", help="winning-matrix CSV (header of labels, then count rows)")
    p.add_argument("--anchor", required=True, help="label whose score is pinned to 1")
    p.add_argument("--out", default=None, help="write the fitted scores CSV here")
    p.add_argument("--tol", type=float, default=1e-9, help="gradient tolerance")
    p.set_defaults(func=cmd_bt_rank)

    return parser


def _load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value' lines")
            key, _, val = line.partition("=")
            values[key.strip().lower().replace("-", "_")] = val.strip()
    return values


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _apply_config_file(args: argparse.Namespace, argv: list[str]) -> None:
    if not getattr(args, "config", None):
        return
    values = _load_config_file(args.config)
    explicit = {tok.split("=", 1)[0] for tok in argv if tok.startswith("--")}
    for key, raw in values.items():
        if not hasattr(args, key):
            raise ValueError(f"config file sets unknown option {key!r}")
        if f"--{key.replace('_', '-')}" in explicit:
            continue  # the command line wins
        current = getattr(args, key)
        if isinstance(current, bool):
            low = raw.lower()
            if low in _BOOL_TRUE:
                value = True
            elif low in _BOOL_FALSE:
                value = False
            else:
                raise ValueError(f"config option {key!r} expects a boolean, got {raw!r}")
        elif isinstance(current, int) and not isinstance(current, bool):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        else:
            try:
                value = int(raw)
            except ValueError:
                try:
                    value = float(raw)
                except ValueError:
                    value = raw
        setattr(args, key, value)


def build_joint_config(args: argparse.Namespace, argv: list[str]) -> joint.JointConfig:
    """Assemble the solver config; --shd presets patch/overlap/iters unless
    those flags were given explicitly."""
    explicit = {tok.split("=", 1)[0] for tok in argv if tok.startswith("--")}
    patch, overlap, iters = args.patch, args.overlap, args.iters
    if args.shd:
        if "--patch" not in explicit:
            patch = 25
        if "--overlap" not in explicit:
            overlap = 5
        if "--iters" not in explicit:
            iters = 5
    return joint.JointConfig(
        patch=patch,
        overlap=overlap,
        lam=args.lam,
        sharpness=args.sharpness,
        max_iters=iters,
        top_k=args.top_k,
        em_iters=args.em_iters,
        seed=args.seed,
    )


def _load_luma_planes(path: str):
    """Returns (luma, color) where color is None for grayscale inputs."""
    if str(path).lower().endswith(".pgm"):
        return imagecore.load_pgm(path), None
    img = imagecore.load_image(path)
    if img.ndim == 2:
        return img, None
    cc = imagecore.rgb_to_ycbcr(img)
    return cc.y, cc


def cmd_upscale(args: argparse.Namespace) -> int:
    threads = resolve_threads(args.threads)
    cfg = build_joint_config(args, args._argv)
    mode = args.mode
    if mode in ("csc", "joint", "joint-fixed") and not args.dict_path:
        raise ValueError(f"mode {mode!r} requires --dict")

    y, color = _load_luma_planes(args.input)
    pair = sparse.DictionaryPair.load(args.dict_path) if args.dict_path else None
    if pair is not None and pair.patch != cfg.patch:
        raise ValueError(f"dictionary patch {pair.patch} != requested patch {cfg.patch}")
    epit = ep_mod.Epitome.load(args.epitome_path) if args.epitome_path else None

    out = harness.run_pipeline(
        mode, y, args.factor, pair=pair, config=cfg, fixed_omega=args.fixed_omega,
        epitome=epit, nn_radius=args.nn_radius, threads=threads,
    )
    if color is None:
        imagecore.save_image(args.output, out.image)
    else:
        cb = np.clip(imagecore.upsample(color.cb, args.factor), 0.0, 1.0)
        cr = np.clip(imagecore.upsample(color.cr, args.factor), 0.0, 1.0)
        rgb = imagecore.ycbcr_to_rgb(imagecore.ColorImage(y=out.image, cb=cb, cr=cr))
        imagecore.save_image(args.output, np.clip(rgb, 0.0, 1.0))

    if args.weight_map:
        if out.weights is None:
            raise ValueError("--weight-map is only produced by the joint modes")
        imagecore.save_image(args.weight_map, out.weights.to_image())
        out.weights.save_csv(str(Path(args.weight_map).with_suffix(".csv")))
    if args.trace:
        if out.trace is None:
            raise ValueError("--trace is only produced by the joint modes")
        result = joint.JointResult(image=out.image, weights=out.weights,
                                   objective_trace=out.trace)
        result.save_trace_csv(args.trace)
    print(f"wrote {args.output} ({mode}, x{args.factor})")
    return 0


def _corpus_lumas(corpus: str) -> list[np.ndarray]:
    root = Path(corpus)
    if not root.is_dir():
        raise ValueError(f"corpus directory not found: {corpus}")
    paths = sorted(p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not paths:
        raise ValueError(f"no readable images under {corpus}")
    return [_load_luma_planes(str(p))[0] for p in paths]


def cmd_train_dict(args: argparse.Namespace) -> int:
    threads = resolve_threads(args.threads)
    lumas = _corpus_lumas(args.corpus)
    pairs = sparse.sample_training_pairs(
        lumas, factor=args.factor, patch=args.patch, count=args.samples, seed=args.seed,
    )
    pair, trace = sparse.train_coupled_dictionary(
        pairs, atoms=args.atoms, lam=args.lam, epochs=args.epochs,
        patch=args.patch, factor=args.factor, seed=args.seed, threads=threads,
    )
    pair.save(args.output)
    print(f"trained {args.atoms}-atom dictionary on {len(pairs)} pairs "
          f"(objective {trace[0]:.4f} -> {trace[-1]:.4f}); wrote {args.output}")
    return 0


def cmd_train_epitome(args: argparse.Namespace) -> int:
    threads = resolve_threads(args.threads)
    y, _ = _load_luma_planes(args.input)
    source = y if args.direct else imagecore.smooth_input(y, args.factor)
    patch = args.patch if args.patch is not None else 5 * args.factor
    cfg = ep_mod.EpitomeConfig(
        patch=patch, size_frac=args.size_frac, em_iters=args.em_iters,
        var_floor=args.var_floor, top_k=args.top_k, seed=args.seed,
    )
    epit = ep_mod.train_epitome(source, cfg, threads=threads)
    epit.save(args.output)
    trace = epit.loglik_trace
    print(f"trained {epit.shape[0]}x{epit.shape[1]} epitome "
          f"(log-likelihood {trace[0]:.2f} -> {trace[-1]:.2f}); wrote {args.output}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    threads = resolve_threads(args.threads)
    cfg = build_joint_config(args, args._argv)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ValueError("--modes lists no methods")
    manifest = harness.load_manifest(args.manifest)
    pair = sparse.DictionaryPair.load(args.dict_path) if args.dict_path else None
    results = harness.evaluate(
        manifest, modes, pair=pair, config=cfg, shave=args.shave,
        nn_radius=args.nn_radius, threads=threads,
    )
    print(harness.format_table(results))
    if args.out:
        harness.write_results_csv(args.out, results)
        print(f"wrote {args.out}")
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    a, _ = _load_luma_planes(args.image_a)
    b, _ = _load_luma_planes(args.image_b)
    shave = args.shave
    if shave is None:
        shave = args.factor if args.factor is not None else 0
    rep = metrics.report(a, b, shave=shave)
    psnr_txt = "inf" if rep.psnr == float("inf") else f"{rep.psnr:.4f}"
    print(f"psnr  {psnr_txt} dB")
    print(f"ssim  {rep.ssim:.6f}")
    print(f"shave {rep.border_shave} px")
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a", newline="") as fh:
            if new:
                fh.write("image,method,factor,psnr,ssim\n")
            row = rep.row(Path(args.image_a).name, args.method, args.factor or 0)
            fh.write(",".join(str(v) for v in row) + "\n")
    return 0


def cmd_bt_rank(args: argparse.Namespace) -> int:
    matrix = ranking.load_winning_matrix(args.matrix)
    if args.anchor not in matrix.labels:
        raise ValueError(
            f"anchor label {args.anchor!r} not found; available: {', '.join(matrix.labels)}"
        )
    scores = ranking.bt_fit(matrix, matrix.labels.index(args.anchor), tol=args.tol)
    print(ranking.format_score_bars(scores))
    if args.out:
        ranking.save_scores(args.out, scores)
        print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = argv
    try:
        _apply_config_file(args, argv)
        return args.func(args)
    except (ValueError, OSError, ranking.UnderDeterminedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
