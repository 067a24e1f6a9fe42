"""Internal-example branch: epitome model, EM training, patch matching,
high-frequency transfer, and the standalone internal upscalers.

An epitome condenses the patch distribution of an image into a small map of
Gaussian means/variances plus a mixture prior over positional hidden
mappings. Matching a query patch returns the most probable mapping, the K
source-patch candidates stored for that mapping, and the candidate with the
smallest squared distance to the query.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import imagecore
from ._parallel import parallel_map

__all__ = [
    "Epitome",
    "EpitomeConfig",
    "MatchResult",
    "train_epitome",
    "posterior",
    "epitomic_match",
    "match_batch",
    "nn_match",
    "transfer_high_frequency",
    "internal_noise",
    "epi_upscale",
    "nn_lse_upscale",
]

_EPITOME_MAGIC = b"JSRE"
_EPITOME_VERSION = 1
_ESTEP_CHUNK = 2048  # fixed work decomposition; never depends on thread count
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class EpitomeConfig:
    """Training knobs; the epitome area defaults to 1/4 of the source pixels."""

    patch: int = 5
    size_frac: float = 0.25
    em_iters: int = 10
    var_floor: float = 1e-4
    var_init: float = 0.1
    top_k: int = 5
    max_patches: int = 40000
    wrap: bool = True
    seed: int = 0


@dataclass
class Epitome:
    """Trained epitome plus the precomputed candidate index into its source."""

    mu: np.ndarray
    var: np.ndarray
    prior: np.ndarray
    patch: int
    wrap: bool
    source_shape: tuple[int, int]
    candidates: np.ndarray  # (n_mappings, K) linear source-patch origins, -1 padded
    loglik_trace: list[float] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu.shape

    @property
    def n_mappings(self) -> int:
        return len(self.prior)

    def mapping_grid(self) -> tuple[int, int]:
        me, ne = self.mu.shape
        if self.wrap:
            return me, ne
        return me - self.patch + 1, ne - self.patch + 1

    def save(self, path) -> None:
        me, ne = self.mu.shape
        header = struct.pack(
            "<4sIIIIIIIII",
            _EPITOME_MAGIC,
            _EPITOME_VERSION,
            me,
            ne,
            self.patch,
            self.candidates.shape[1],
            1 if self.wrap else 0,
            self.source_shape[0],
            self.source_shape[1],
            self.n_mappings,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.mu, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.var, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.prior, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.candidates, dtype="<i4").tobytes())

    @classmethod
    def load(cls, path) -> "Epitome":
        fmt = "<4sIIIIIIIII"
        with open(path, "rb") as fh:
            magic, version, me, ne, patch, k, wrap, ms, ns, n_map = struct.unpack(
                fmt, fh.read(struct.calcsize(fmt))
            )
            if magic != _EPITOME_MAGIC:
                raise ValueError(f"not an epitome file: magic {magic!r}")
            if version != _EPITOME_VERSION:
                raise ValueError(f"unsupported epitome version {version}")
            mu = np.frombuffer(fh.read(8 * me * ne), dtype="<f8").reshape(me, ne)
            var = np.frombuffer(fh.read(8 * me * ne), dtype="<f8").reshape(me, ne)
            prior = np.frombuffer(fh.read(8 * n_map), dtype="<f8")
            cand = np.frombuffer(fh.read(4 * n_map * k), dtype="<i4").reshape(n_map, k)
        return cls(
            mu=mu.copy(),
            var=var.copy(),
            prior=prior.copy(),
            patch=patch,
            wrap=bool(wrap),
            source_shape=(ms, ns),
            candidates=cand.copy(),
        )


@dataclass
class MatchResult:
    """Best source match for one query patch plus the ranked candidate list."""

    row: int
    col: int
    error: float
    weight: float
    candidates: np.ndarray  # (c, 2) source origins, ascending error
    errors: np.ndarray  # (c,)


def _window_index(me, ne, patch, wrap) -> np.ndarray:
    """Flat pixel indices of every mapping's patch-sized window, (n_map, patch^2)."""
    if wrap:
        us = np.arange(me)
        vs = np.arange(ne)
    else:
        us = np.arange(me - patch + 1)
        vs = np.arange(ne - patch + 1)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    uu = uu.ravel()
    vv = vv.ravel()
    aa, bb = np.meshgrid(np.arange(patch), np.arange(patch), indexing="ij")
    aa = aa.ravel()
    bb = bb.ravel()
    rows = uu[:, None] + aa[None, :]
    cols = vv[:, None] + bb[None, :]
    if wrap:
        rows %= me
        cols %= ne
    return rows * ne + cols


def _scatter_windows(values, me, ne, patch, wrap) -> np.ndarray:
    """Accumulate per-mapping, per-offset values back onto the epitome canvas.

    ``values`` has shape (patch^2, n_map); entry [(a, b), (u, v)] is added at
    epitome pixel (u + a, v + b), wrapped when the epitome is toroidal.
    """
    if wrap:
        mm, nn = me, ne
    else:
        mm, nn = me - patch + 1, ne - patch + 1
    maps = values.reshape(patch * patch, mm, nn)
    out = np.zeros((me, ne), dtype=np.float64)
    idx = 0
    for a in range(patch):
        for b in range(patch):
            if wrap:
                out += np.roll(maps[idx], shift=(a, b), axis=(0, 1))
            else:
                out[a : a + mm, b : b + nn] += maps[idx]
            idx += 1
    return out


def _log_posterior_chunk(Z, win_idx, mu, var, prior):
    """Joint log-density of patch rows Z against every mapping; (q, n_map)."""
    inv = 1.0 / var
    wa = inv.ravel()[win_idx]
    wb = (mu * inv).ravel()[win_idx]
    wc = ((mu * mu) * inv + np.log(var) + _LOG_2PI).ravel()[win_idx].sum(axis=1)
    quad = (Z * Z) @ wa.T - 2.0 * (Z @ wb.T) + wc[None, :]
    with np.errstate(divide="ignore"):
        log_prior = np.where(prior > 0.0, np.log(np.maximum(prior, 1e-300)), -np.inf)
    return -0.5 * quad + log_prior[None, :]


def _normalize_rows(logp):
    m = logp.max(axis=1)
    shifted = np.exp(logp - m[:, None])
    total = shifted.sum(axis=1)
    return shifted / total[:, None], m + np.log(total)


def _merge_topk(best_val, best_idx, post, first_index, k):
    """Keep, per mapping, the k largest posteriors (ties -> smaller patch index)."""
    q = post.shape[0]
    idx_rows = np.broadcast_to(
        np.arange(first_index, first_index + q, dtype=np.int64)[:, None], post.shape
    )
    cat_val = np.vstack([best_val, post])
    cat_idx = np.vstack([best_idx, idx_rows])
    order = np.argsort(cat_idx, axis=0, kind="stable")
    cat_val = np.take_along_axis(cat_val, order, axis=0)
    cat_idx = np.take_along_axis(cat_idx, order, axis=0)
    order = np.argsort(-cat_val, axis=0, kind="stable")[:k]
    return (
        np.take_along_axis(cat_val, order, axis=0),
        np.take_along_axis(cat_idx, order, axis=0),
    )


def _chunk_slices(total, chunk):
    return [slice(s, min(s + chunk, total)) for s in range(0, total, chunk)]


def train_epitome(
    source: np.ndarray,
    config: EpitomeConfig | None = None,
    *,
    threads: int = 1,
) -> Epitome:
    """Fit an epitome to one image by EM over its densely sampled patches.

    The data log-likelihood is non-decreasing across iterations, and the
    candidate index (top-K source patches per mapping, by posterior) is built
    from one final inference pass over the training patches.
    """
    cfg = config or EpitomeConfig()
    source = np.asarray(source, dtype=np.float64)
    m, n = source.shape
    p = cfg.patch
    if p > min(m, n):
        raise ValueError(f"patch size {p} exceeds source dimensions {source.shape}")
    if cfg.em_iters < 1:
        raise ValueError("need at least one EM iteration")

    rng = np.random.default_rng(cfg.seed)
    side = np.sqrt(cfg.size_frac)
    me = max(p, int(round(m * side)))
    ne = max(p, int(round(n * side)))

    # seed the mean map with a mosaic of random source crops
    mu = np.empty((me, ne), dtype=np.float64)
    for r0 in range(0, me, p):
        for c0 in range(0, ne, p):
            th = min(p, me - r0)
            tw = min(p, ne - c0)
            sr = int(rng.integers(0, m - th + 1))
            sc = int(rng.integers(0, n - tw + 1))
            mu[r0 : r0 + th, c0 : c0 + tw] = source[sr : sr + th, sc : sc + tw]
    var = np.full((me, ne), cfg.var_init, dtype=np.float64)

    win_idx = _window_index(me, ne, p, cfg.wrap)
    n_map = win_idx.shape[0]
    prior = np.full(n_map, 1.0 / n_map, dtype=np.float64)

    all_patches = sliding_window_view(source, (p, p)).reshape(-1, p * p)
    q_total = all_patches.shape[0]
    if q_total > cfg.max_patches:
        keep = np.sort(rng.choice(q_total, size=cfg.max_patches, replace=False))
        patch_ids = keep.astype(np.int64)
    else:
        patch_ids = np.arange(q_total, dtype=np.int64)
    Z = np.ascontiguousarray(all_patches[patch_ids])
    q_used = Z.shape[0]
    slices = _chunk_slices(q_used, _ESTEP_CHUNK)

    def e_chunk(sl, collect_topk=False):
        logp = _log_posterior_chunk(Z[sl], win_idx, mu, var, prior)
        post, lse = _normalize_rows(logp)
        sz = Z[sl].T @ post
        sz2 = (Z[sl] * Z[sl]).T @ post
        s1 = post.sum(axis=0)
        top = post if collect_topk else None
        return float(lse.sum()), sz, sz2, s1, top

    trace: list[float] = []
    for _ in range(cfg.em_iters):
        results = parallel_map(lambda sl: e_chunk(sl), slices, threads)
        loglik = 0.0
        sz = np.zeros((p * p, n_map))
        sz2 = np.zeros((p * p, n_map))
        s1 = np.zeros(n_map)
        for ll_c, sz_c, sz2_c, s1_c, _ in results:
            loglik += ll_c
            sz += sz_c
            sz2 += sz2_c
            s1 += s1_c
        trace.append(loglik)

        prior = s1 / q_used
        den = _scatter_windows(np.broadcast_to(s1, (p * p, n_map)), me, ne, p, cfg.wrap)
        num_mu = _scatter_windows(sz, me, ne, p, cfg.wrap)
        num_z2 = _scatter_windows(sz2, me, ne, p, cfg.wrap)
        ok = den > 1e-12
        mu = np.where(ok, num_mu / np.where(ok, den, 1.0), mu)
        ex2 = np.where(ok, num_z2 / np.where(ok, den, 1.0), var + mu * mu)
        var = np.maximum(ex2 - mu * mu, cfg.var_floor)

    # final inference pass under the trained parameters: final log-likelihood
    # plus the stored top-K candidate patches per mapping
    best_val = np.full((cfg.top_k, n_map), -np.inf)
    best_idx = np.full((cfg.top_k, n_map), np.iinfo(np.int64).max, dtype=np.int64)
    results = parallel_map(lambda sl: e_chunk(sl, collect_topk=True), slices, threads)
    loglik = 0.0
    for sl, (ll_c, _, _, _, post) in zip(slices, results):
        loglik += ll_c
        best_val, best_idx = _merge_topk(best_val, best_idx, post, sl.start, cfg.top_k)
    trace.append(loglik)

    valid = best_val > -np.inf
    cand_local = np.where(valid, best_idx, -1).T  # (n_map, K) indices into patch_ids
    cand = np.full(cand_local.shape, -1, dtype=np.int32)
    picked = cand_local >= 0
    cand[picked] = patch_ids[cand_local[picked]].astype(np.int32)

    return Epitome(
        mu=mu,
        var=var,
        prior=prior,
        patch=p,
        wrap=cfg.wrap,
        source_shape=(m, n),
        candidates=cand,
        loglik_trace=trace,
    )


def posterior(ep: Epitome, patch: np.ndarray) -> np.ndarray:
    """Posterior distribution over hidden mappings for one query patch."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (ep.patch, ep.patch):
        raise ValueError(f"query must be {ep.patch}x{ep.patch}, got {patch.shape}")
    win_idx = _window_index(*ep.mu.shape, ep.patch, ep.wrap)
    logp = _log_posterior_chunk(patch.reshape(1, -1), win_idx, ep.mu, ep.var, ep.prior)
    post, _ = _normalize_rows(logp)
    return post[0]


def _candidate_match(ep, source_view, query_vec, post_row, n_cols):
    """Resolve one query: argmax mapping, ranked candidates, SSD-best choice."""
    t_star = int(np.argmax(post_row))
    weight = float(post_row[t_star])
    linear = ep.candidates[t_star]
    linear = linear[linear >= 0]
    rows = linear // n_cols
    cols = linear % n_cols
    patches = source_view[rows, cols].reshape(len(linear), -1)
    errs = ((patches - query_vec[None, :]) ** 2).sum(axis=1)
    order = np.lexsort((linear, errs))
    rows, cols, errs = rows[order], cols[order], errs[order]
    return MatchResult(
        row=int(rows[0]),
        col=int(cols[0]),
        error=float(errs[0]),
        weight=weight,
        candidates=np.stack([rows, cols], axis=1).astype(np.int64),
        errors=errs.astype(np.float64),
    )


def match_batch(ep: Epitome, source: np.ndarray, queries: np.ndarray) -> list[MatchResult]:
    """Epitomic matching of many query patches against the epitome's source image."""
    source = np.asarray(source, dtype=np.float64)
    if source.shape != ep.source_shape:
        raise ValueError(f"source shape {source.shape} != trained {ep.source_shape}")
    queries = np.asarray(queries, dtype=np.float64).reshape(len(queries), -1)
    win_idx = _window_index(*ep.mu.shape, ep.patch, ep.wrap)
    view = sliding_window_view(source, (ep.patch, ep.patch))
    n_cols = source.shape[1] - ep.patch + 1
    out = []
    for sl in _chunk_slices(len(queries), _ESTEP_CHUNK):
        logp = _log_posterior_chunk(queries[sl], win_idx, ep.mu, ep.var, ep.prior)
        post, _ = _normalize_rows(logp)
        for i in range(post.shape[0]):
            out.append(_candidate_match(ep, view, queries[sl][i], post[i], n_cols))
    return out


def epitomic_match(ep: Epitome, source: np.ndarray, patch: np.ndarray) -> MatchResult:
    """Match one query patch; the most probable mapping supplies the candidates."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (ep.patch, ep.patch):
        raise ValueError(f"query must be {ep.patch}x{ep.patch}, got {patch.shape}")
    return match_batch(ep, source, patch.reshape(1, -1))[0]


def nn_match(source: np.ndarray, patch: np.ndarray, center: tuple[int, int], radius: int) -> MatchResult:
    """Exhaustive SSD matching over a local window of patch origins.

    ``center`` names the preferred origin; the window is clamped to valid
    origins. The convention weight is 0 (no posterior exists for NN matches).
    """
    source = np.asarray(source, dtype=np.float64)
    patch = np.asarray(patch, dtype=np.float64)
    p = patch.shape[0]
    max_r = source.shape[0] - p
    max_c = source.shape[1] - p
    if max_r < 0 or max_c < 0:
        raise ValueError("patch larger than source image")
    cr = min(max(int(center[0]), 0), max_r)
    cc = min(max(int(center[1]), 0), max_c)
    r0, r1 = max(0, cr - radius), min(max_r, cr + radius)
    c0, c1 = max(0, cc - radius), min(max_c, cc + radius)
    view = sliding_window_view(source, (p, p))[r0 : r1 + 1, c0 : c1 + 1]
    ssd = ((view - patch[None, None]) ** 2).sum(axis=(2, 3))
    flat = int(np.argmin(ssd))
    dr, dc = divmod(flat, ssd.shape[1])
    err = float(ssd[dr, dc])
    pos = np.array([[r0 + dr, c0 + dc]], dtype=np.int64)
    return MatchResult(
        row=r0 + dr,
        col=c0 + dc,
        error=err,
        weight=0.0,
        candidates=pos,
        errors=np.array([err]),
    )


def transfer_high_frequency(
    y: np.ndarray,
    y_smooth: np.ndarray,
    match: MatchResult,
    query: np.ndarray,
    nn: MatchResult | None = None,
) -> np.ndarray:
    """Paste the matched high-frequency band onto the interpolated query patch.

    With both an epitomic and an NN match the bands blend as
    w * H_epitome + (1 - w) * H_nn, w being the epitomic posterior weight.
    """
    p = query.shape[0]
    h = y[match.row : match.row + p, match.col : match.col + p] - y_smooth[
        match.row : match.row + p, match.col : match.col + p
    ]
    if nn is not None:
        h_nn = y[nn.row : nn.row + p, nn.col : nn.col + p] - y_smooth[
            nn.row : nn.row + p, nn.col : nn.col + p
        ]
        h = match.weight * h + (1.0 - match.weight) * h_nn
    return query + h


def internal_noise(match: MatchResult) -> float:
    """Matching error of the chosen candidate (the internal 'noise' measure)."""
    return match.error


def _hf_pipeline(y, factor, patch, overlap, nn_radius, use_epitome, ep, ep_config, threads):
    y = np.asarray(y, dtype=np.float64)
    up = imagecore.upsample(y, factor)
    smooth = imagecore.downsample(up, factor)
    grid = imagecore.make_grid(up.shape[0], up.shape[1], patch, overlap)
    queries = imagecore.extract_patches(up, grid)

    matches = None
    if use_epitome:
        if ep is None:
            cfg = ep_config or EpitomeConfig()
            if cfg.patch != patch:
                cfg = EpitomeConfig(**{**cfg.__dict__, "patch": patch})
            ep = train_epitome(smooth, cfg, threads=threads)
        if ep.patch != patch or ep.source_shape != smooth.shape:
            raise ValueError("epitome geometry does not match this pipeline")
        matches = match_batch(ep, smooth, queries.reshape(len(grid), -1))

    view = sliding_window_view(smooth, (patch, patch))
    out_patches = np.empty_like(queries)

    def transfer_one(idx):
        r, c = divmod(idx, len(grid.cols))
        orow, ocol = grid.rows[r], grid.cols[c]
        center = (int(round(orow / factor)), int(round(ocol / factor)))
        q = queries[idx]
        nn = nn_match(smooth, q, center, nn_radius)
        if matches is None:
            return transfer_high_frequency(y, smooth, nn, q)
        return transfer_high_frequency(y, smooth, matches[idx], q, nn)

    results = parallel_map(transfer_one, range(len(grid)), threads)
    for idx, patch_out in enumerate(results):
        out_patches[idx] = patch_out
    hr = imagecore.assemble_patches(out_patches, grid)
    return np.clip(hr, 0.0, 1.0), ep


def epi_upscale(
    y: np.ndarray,
    factor: int,
    *,
    patch: int = 5,
    overlap: int = 1,
    nn_radius: int = 7,
    epitome: Epitome | None = None,
    ep_config: EpitomeConfig | None = None,
    threads: int = 1,
    return_epitome: bool = False,
):
    """Standalone internal super-resolution with blended epitomic/NN matching."""
    hr, ep = _hf_pipeline(
        y, factor, patch, overlap, nn_radius, True, epitome, ep_config, threads
    )
    if return_epitome:
        return hr, ep
    return hr


def nn_lse_upscale(
    y: np.ndarray,
    factor: int,
    *,
    patch: int = 5,
    overlap: int = 1,
    nn_radius: int = 7,
    threads: int = 1,
) -> np.ndarray:
    """Internal super-resolution with plain local NN matching (no epitome)."""
    hr, _ = _hf_pipeline(y, factor, patch, overlap, nn_radius, False, None, None, threads)
    return hr
