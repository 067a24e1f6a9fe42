"""Batch evaluation: mode dispatch, manifest parsing, and metric tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import epitome as ep_mod
from . import imagecore, joint, metrics, sparse

__all__ = [
    "MODES",
    "FIXED_OMEGA_SWEEP",
    "PipelineOutput",
    "ManifestRow",
    "ExperimentManifest",
    "ResultRow",
    "run_pipeline",
    "load_manifest",
    "evaluate",
    "format_table",
    "write_results_csv",
]

MODES = ("bicubic", "csc", "epi", "nn-lse", "joint", "joint-fixed")

# fixed global weights swept by the joint-fixed evaluation mode
FIXED_OMEGA_SWEEP = (0.1, 1.0, 3.0, 5.0, 10.0)


@dataclass
class PipelineOutput:
    image: np.ndarray
    weights: joint.WeightMap | None = None
    trace: list[float] | None = None


def run_pipeline(
    mode: str,
    y: np.ndarray,
    factor: int,
    *,
    pair: sparse.DictionaryPair | None = None,
    config: joint.JointConfig | None = None,
    fixed_omega: float | None = None,
    epitome: ep_mod.Epitome | None = None,
    init_codes=None,
    nn_radius: int = 7,
    threads: int = 1,
) -> PipelineOutput:
    """Super-resolve one luminance plane with the selected method."""
    cfg = config or joint.JointConfig()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    if mode in ("csc", "joint", "joint-fixed"):
        if pair is None:
            raise ValueError(f"mode {mode!r} requires a trained dictionary (--dict)")
        if pair.factor != factor:
            raise ValueError(f"dictionary was trained for x{pair.factor}, run asks x{factor}")

    if mode == "bicubic":
        return PipelineOutput(image=np.clip(imagecore.upsample(y, factor), 0.0, 1.0))
    if mode == "csc":
        scfg = sparse.SparseConfig(lam=cfg.lam, max_iter=cfg.solver_max_iter, tol=cfg.solver_tol)
        return PipelineOutput(
            image=sparse.csc_upscale(y, pair, scfg, overlap=cfg.overlap, threads=threads)
        )
    if mode == "epi":
        ep_cfg = ep_mod.EpitomeConfig(
            patch=cfg.patch, em_iters=cfg.em_iters, var_floor=cfg.var_floor,
            top_k=cfg.top_k, seed=cfg.seed,
        )
        img = ep_mod.epi_upscale(
            y, factor, patch=cfg.patch, overlap=cfg.overlap, nn_radius=nn_radius,
            epitome=epitome, ep_config=ep_cfg, threads=threads,
        )
        return PipelineOutput(image=img)
    if mode == "nn-lse":
        img = ep_mod.nn_lse_upscale(
            y, factor, patch=cfg.patch, overlap=cfg.overlap,
            nn_radius=nn_radius, threads=threads,
        )
        return PipelineOutput(image=img)
    if mode == "joint-fixed":
        omega = 1.0 if fixed_omega is None else fixed_omega
        result = joint.joint_upscale(
            y, pair, cfg, epitome=epitome, init_codes=init_codes,
            fixed_omega=omega, threads=threads,
        )
    else:
        result = joint.joint_upscale(
            y, pair, cfg, epitome=epitome, init_codes=init_codes, threads=threads,
        )
    return PipelineOutput(image=result.image, weights=result.weights, trace=result.objective_trace)


@dataclass
class ManifestRow:
    lr_path: str | None
    gt_path: str | None
    factor: int


@dataclass
class ExperimentManifest:
    rows: list[ManifestRow]


def load_manifest(path) -> ExperimentManifest:
    """Read an evaluation manifest CSV with header columns lr, gt, factor.

    Each row names a low-resolution input, a ground truth, or both. When only
    a ground truth is given the LR input is generated by downsampling it.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"lr", "gt", "factor"} <= set(reader.fieldnames):
            raise ValueError("manifest needs a header row with columns: lr, gt, factor")
        rows = []
        for rec in reader:
            lr = (rec.get("lr") or "").strip() or None
            gt = (rec.get("gt") or "").strip() or None
            if lr is None and gt is None:
                raise ValueError("manifest row names neither an LR input nor a ground truth")
            rows.append(ManifestRow(lr_path=lr, gt_path=gt, factor=int(rec["factor"])))
    if not rows:
        raise ValueError("manifest lists no images")
    return ExperimentManifest(rows=rows)


@dataclass
class ResultRow:
    image: str
    mode: str
    factor: int
    psnr: float | None = None
    ssim: float | None = None
    status: str = "ok"


@dataclass
class _RowContext:
    """Shared per-image intermediates so modes do not redo common work."""

    y: np.ndarray
    factor: int
    epitomes: dict = field(default_factory=dict)
    init_codes: list | None = None

    def joint_epitome(self, cfg: joint.JointConfig, threads: int) -> ep_mod.Epitome:
        hp = cfg.patch * self.factor
        if hp not in self.epitomes:
            smooth = imagecore.smooth_input(self.y, self.factor)
            ep_cfg = ep_mod.EpitomeConfig(
                patch=hp, em_iters=cfg.em_iters, var_floor=cfg.var_floor,
                top_k=cfg.top_k, seed=cfg.seed,
            )
            self.epitomes[hp] = ep_mod.train_epitome(smooth, ep_cfg, threads=threads)
        return self.epitomes[hp]

    def csc_codes(self, pair, cfg: joint.JointConfig, threads: int):
        if self.init_codes is None:
            _, self.init_codes = sparse.csc_initialize(
                self.y, pair,
                config=sparse.SparseConfig(lam=cfg.lam, max_iter=cfg.solver_max_iter,
                                           tol=cfg.solver_tol),
                overlap=cfg.overlap, threads=threads,
            )
        return self.init_codes


def evaluate(
    manifest: ExperimentManifest,
    modes,
    *,
    pair: sparse.DictionaryPair | None = None,
    config: joint.JointConfig | None = None,
    shave: int | None = None,
    nn_radius: int = 7,
    threads: int = 1,
) -> list[ResultRow]:
    """Run every (image, mode) cell of the evaluation grid.

    Ground truths are mod-cropped to the factor before LR generation so every
    comparison is self-consistent. joint-fixed expands into one row per swept
    global weight. Failures are recorded in the row status and the run
    continues.
    """
    modes = list(modes)
    if not modes:
        raise ValueError("no evaluation modes requested")
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    cfg = config or joint.JointConfig()

    results: list[ResultRow] = []
    for row in manifest.rows:
        name = row.gt_path or row.lr_path
        gt = None
        try:
            if row.gt_path:
                gt_img = imagecore.load_image(row.gt_path)
                gt_luma = gt_img if gt_img.ndim == 2 else imagecore.rgb_to_ycbcr(gt_img).y
                gt = imagecore.mod_crop(gt_luma, row.factor)
            if row.lr_path:
                lr_img = imagecore.load_image(row.lr_path)
                y = lr_img if lr_img.ndim == 2 else imagecore.rgb_to_ycbcr(lr_img).y
                if gt is not None and (y.shape[0] * row.factor, y.shape[1] * row.factor) != gt.shape:
                    raise ValueError(
                        f"LR {y.shape} x{row.factor} does not match ground truth {gt.shape}"
                    )
            else:
                y = imagecore.downsample(gt, row.factor)
        except Exception as exc:  # noqa: BLE001 - per-row failures must not stop the run
            for mode in modes:
                results.append(ResultRow(image=str(name), mode=mode, factor=row.factor,
                                         status=f"error: {exc}"))
            continue

        ctx = _RowContext(y=y, factor=row.factor)
        row_shave = row.factor if shave is None else shave
        for mode in modes:
            sweep = FIXED_OMEGA_SWEEP if mode == "joint-fixed" else (None,)
            for omega in sweep:
                label = mode if omega is None else f"{mode}(w={omega:g})"
                try:
                    kwargs = dict(pair=pair, config=cfg, nn_radius=nn_radius, threads=threads)
                    if mode in ("joint", "joint-fixed"):
                        kwargs["epitome"] = ctx.joint_epitome(cfg, threads)
                        kwargs["init_codes"] = ctx.csc_codes(pair, cfg, threads)
                    out = run_pipeline(mode, y, row.factor, fixed_omega=omega, **kwargs)
                    rec = ResultRow(image=str(name), mode=label, factor=row.factor)
                    if gt is not None:
                        rec.psnr = metrics.psnr(out.image, gt, shave=row_shave)
                        rec.ssim = metrics.ssim(out.image, gt, shave=row_shave)
                    results.append(rec)
                except Exception as exc:  # noqa: BLE001
                    results.append(ResultRow(image=str(name), mode=label, factor=row.factor,
                                             status=f"error: {exc}"))
    return results


def format_table(results: list[ResultRow]) -> str:
    headers = ["image", "mode", "factor", "psnr", "ssim", "status"]
    body = []
    for r in results:
        body.append([
            r.image,
            r.mode,
            str(r.factor),
            "" if r.psnr is None else f"{r.psnr:.2f}",
            "" if r.ssim is None else f"{r.ssim:.4f}",
            r.status,
        ])
    widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in body:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def write_results_csv(path, results: list[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "mode", "factor", "psnr", "ssim", "status"])
        for r in results:
            writer.writerow([
                r.image, r.mode, r.factor,
                "" if r.psnr is None else f"{r.psnr:.4f}",
                "" if r.ssim is None else f"{r.ssim:.6f}",
                r.status,
            ])
