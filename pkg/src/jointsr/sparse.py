"""Exact L1 sparse coding and the coupled low/high-resolution dictionary.

The solver minimizes

    lam * ||a||_1 + ||D a - y||^2 + sum_i w_i * ||B_i a - z_i||^2

with an active-set (feature-sign) search, so one routine serves both the
plain coding problem and the reweighted variant used inside the joint
super-resolution loop.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import imagecore
from ._parallel import parallel_map

__all__ = [
    "SparseCode",
    "SparseConfig",
    "DictionaryPair",
    "ConvergenceError",
    "l1_solve",
    "external_noise",
    "train_coupled_dictionary",
    "csc_initialize",
    "csc_upscale",
]

_DICT_MAGIC = b"JSRD"
_DICT_VERSION = 1

# Patch vectors are coded at the 8-bit intensity scale: the reference L1
# weight of 1 is calibrated against grey-level magnitudes, not [0, 1] ones
# (at unit scale it would zero out almost every code).
CODING_SCALE = 255.0


@dataclass
class SparseCode:
    """Coefficient vector of one coding problem."""

    coefficients: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients)


@dataclass
class SparseConfig:
    """Solver settings. The default L1 weight is calibrated for grey-scale
    (8-bit magnitude) patch vectors; see CODING_SCALE."""

    lam: float = 10.0
    max_iter: int = 1000
    tol: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")


class ConvergenceError(RuntimeError):
    """Raised when the solver hits its iteration cap; carries the best iterate."""

    def __init__(self, message: str, best: SparseCode):
        super().__init__(message)
        self.best = best


def _quadratic_terms(D, y, extras, gram, extra_grams):
    """Collapse the stacked quadratics into (Q, b, const) with f = a'Qa - 2b'a + const."""
    Q = gram if gram is not None else D.T @ D
    Q = np.array(Q, dtype=np.float64, copy=True)
    b = D.T @ y
    const = float(y @ y)
    for i, (B, z, w) in enumerate(extras):
        if w < 0:
            raise ValueError(f"extra quadratic weights must be >= 0, got {w}")
        g = extra_grams[i] if extra_grams is not None else B.T @ B
        Q += w * g
        b += w * (B.T @ z)
        const += w * float(z @ z)
    return Q, b, const


def _objective(Q, b, const, lam, a):
    return float(a @ (Q @ a) - 2.0 * (b @ a) + const + lam * np.abs(a).sum())


def _coordinate_descent(Q, b, lam, a, tol, max_iter):
    """Monotone proximal coordinate descent; fallback path for sign cycles."""
    k = len(b)
    diag = np.diag(Q)
    for _ in range(max_iter):
        for i in range(k):
            if diag[i] <= 0.0:
                continue
            r = b[i] - (Q[i] @ a) + diag[i] * a[i]
            a[i] = np.sign(r) * max(abs(r) - 0.5 * lam, 0.0) / diag[i]
        grad = 2.0 * (Q @ a - b)
        active = a != 0.0
        kkt = 0.0
        if np.any(active):
            kkt = np.max(np.abs(grad[active] + lam * np.sign(a[active])))
        if np.any(~active):
            kkt = max(kkt, max(np.max(np.abs(grad[~active])) - lam, 0.0))
        if kkt <= tol:
            return a, True
    return a, False


def l1_solve(
    D: np.ndarray,
    y: np.ndarray,
    lam: float,
    extra_quadratics=None,
    *,
    x0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 1000,
    gram: np.ndarray | None = None,
    extra_grams=None,
) -> SparseCode:
    """Globally minimize lam*||a||_1 + ||Da - y||^2 + sum w_i*||B_i a - z_i||^2.

    Precomputed Gram matrices may be supplied through ``gram`` / ``extra_grams``
    when the same dictionaries are coded against repeatedly. ``x0`` warm-starts
    the active set. Raises ConvergenceError (carrying the best iterate) if the
    KKT conditions are not met within ``max_iter`` steps.
    """
    D = np.asarray(D, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    extras = [] if extra_quadratics is None else list(extra_quadratics)
    if not np.all(np.isfinite(D)) or not np.all(np.isfinite(y)):
        raise ValueError("non-finite values in solver inputs")
    for B, z, w in extras:
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(z)) and np.isfinite(w)):
            raise ValueError("non-finite values in extra quadratic terms")
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")

    Q, b, const = _quadratic_terms(D, y, extras, gram, extra_grams)
    k = len(b)

    if lam == 0.0:
        rows = [D] + [np.sqrt(w) * np.asarray(B, dtype=np.float64) for B, z, w in extras]
        rhs = [y] + [np.sqrt(w) * np.asarray(z, dtype=np.float64) for B, z, w in extras]
        a, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
        return SparseCode(coefficients=a)

    a = np.zeros(k, dtype=np.float64)
    if x0 is not None:
        a[:] = x0
    if not np.any(a) and np.max(np.abs(2.0 * b), initial=0.0) <= lam:
        return SparseCode(coefficients=a)

    signs = np.sign(a)
    cur_obj = _objective(Q, b, const, lam, a)
    seen_patterns: set[bytes] = set()
    stalled = False

    for _ in range(max_iter):
        active = np.flatnonzero(signs)
        grad = 2.0 * ((Q[:, active] @ a[active]) - b) if len(active) else -2.0 * b

        nz_kkt = np.max(np.abs(grad[active] + lam * signs[active])) if len(active) else 0.0
        if nz_kkt <= tol:
            inactive = signs == 0.0
            z_kkt = np.max(np.abs(grad[inactive])) if np.any(inactive) else 0.0
            if z_kkt <= lam + tol:
                return SparseCode(coefficients=a)
            # activate the most violating zero coefficient
            cand = np.where(inactive, np.abs(grad), -np.inf)
            i = int(np.argmax(cand))
            signs[i] = -np.sign(grad[i])
            active = np.flatnonzero(signs)

        pattern = signs.tobytes()
        if pattern in seen_patterns:
            stalled = True  # sign cycle
            break
        seen_patterns.add(pattern)

        # analytic minimizer over the active set with signs fixed
        Qaa = Q[np.ix_(active, active)]
        rhs = b[active] - 0.5 * lam * signs[active]
        try:
            a_new = np.linalg.solve(Qaa, rhs)
        except np.linalg.LinAlgError:
            a_new, *_ = np.linalg.lstsq(Qaa, rhs, rcond=None)
        if not np.all(np.isfinite(a_new)):
            stalled = True
            break

        a_old = a[active]
        candidates = [a_new]
        flips = np.flatnonzero(np.sign(a_new) != signs[active])
        for idx in flips:
            denom = a_old[idx] - a_new[idx]
            if denom == 0.0:
                continue
            t = a_old[idx] / denom
            if 0.0 < t <= 1.0:
                candidates.append(a_old + t * (a_new - a_old))
        full = np.zeros(k, dtype=np.float64)
        best_step, best_step_obj = None, np.inf
        for cand_vec in candidates:
            full[:] = 0.0
            full[active] = cand_vec
            obj = _objective(Q, b, const, lam, full)
            if obj < best_step_obj:
                best_step_obj, best_step = obj, cand_vec.copy()

        if best_step_obj > cur_obj:
            stalled = True  # degenerate active-set system offered no descent
            break
        cur_obj = best_step_obj
        a = np.zeros(k, dtype=np.float64)
        a[active] = best_step
        a[np.abs(a) < 1e-14] = 0.0
        signs = np.sign(a)

    if stalled:
        a, ok = _coordinate_descent(Q, b, lam, a, tol, max(200, 50 * k))
        if ok:
            return SparseCode(coefficients=a)
    raise ConvergenceError(
        f"feature-sign search failed to satisfy KKT within {max_iter} iterations",
        best=SparseCode(coefficients=a),
    )


def external_noise(code: SparseCode | np.ndarray, D_lr: np.ndarray, y: np.ndarray) -> float:
    """Sparse-coding residual ||D_lr a - y||^2 for one low-resolution patch."""
    a = code.coefficients if isinstance(code, SparseCode) else np.asarray(code)
    r = D_lr @ a - y
    return float(r @ r)


@dataclass
class DictionaryPair:
    """Coupled dictionaries sharing one sparse code per patch.

    ``lr`` columns have unit norm; ``hr`` columns carry the matching joint
    scale and are never renormalized on their own.
    """

    lr: np.ndarray
    hr: np.ndarray
    patch: int
    factor: int

    @property
    def atoms(self) -> int:
        return self.lr.shape[1]

    @property
    def dim_lr(self) -> int:
        return self.lr.shape[0]

    @property
    def dim_hr(self) -> int:
        return self.hr.shape[0]

    def validate(self) -> None:
        if self.lr.shape[1] != self.hr.shape[1]:
            raise ValueError("lr/hr dictionaries disagree on atom count")
        if self.dim_lr != self.patch**2:
            raise ValueError(f"lr rows {self.dim_lr} != patch^2 {self.patch ** 2}")
        if self.dim_hr != (self.patch * self.factor) ** 2:
            raise ValueError(f"hr rows {self.dim_hr} != (patch*factor)^2")
        norms = np.linalg.norm(self.lr, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-8):
            raise ValueError("lr dictionary columns must have unit norm")

    def save(self, path) -> None:
        header = struct.pack(
            "<4sIIIIII",
            _DICT_MAGIC,
            _DICT_VERSION,
            self.patch,
            self.factor,
            self.atoms,
            self.dim_lr,
            self.dim_hr,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(self.lr, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.hr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "DictionaryPair":
        with open(path, "rb") as fh:
            head = fh.read(struct.calcsize("<4sIIIIII"))
            magic, version, patch, factor, k, d_lr, d_hr = struct.unpack("<4sIIIIII", head)
            if magic != _DICT_MAGIC:
                raise ValueError(f"not a dictionary file: magic {magic!r}")
            if version != _DICT_VERSION:
                raise ValueError(f"unsupported dictionary version {version}")
            lr = np.frombuffer(fh.read(8 * d_lr * k), dtype="<f8").reshape(d_lr, k)
            hr = np.frombuffer(fh.read(8 * d_hr * k), dtype="<f8").reshape(d_hr, k)
        pair = cls(lr=lr.copy(), hr=hr.copy(), patch=patch, factor=factor)
        pair.validate()
        return pair


def _coding_pass(D, V, A, lam, tol, max_iter, threads):
    """Re-code every column of V against D, never letting a sample's objective rise."""
    G = D.T @ D
    corr = 2.0 * np.abs(D.T @ V).max(axis=0)

    def code_one(i):
        prev = A[:, i]
        if not np.any(prev) and corr[i] <= lam:
            return prev
        try:
            new = l1_solve(D, V[:, i], lam, x0=prev if np.any(prev) else None,
                           tol=tol, max_iter=max_iter, gram=G).coefficients
        except ConvergenceError as err:
            new = err.best.coefficients
        r_new = V[:, i] - D @ new
        r_old = V[:, i] - D @ prev
        obj_new = lam * np.abs(new).sum() + float(r_new @ r_new)
        obj_old = lam * np.abs(prev).sum() + float(r_old @ r_old)
        return new if obj_new <= obj_old else prev

    cols = parallel_map(code_one, range(V.shape[1]), threads)
    return np.stack(cols, axis=1)


def train_coupled_dictionary(
    pairs,
    atoms: int,
    lam: float = 5.0,
    epochs: int = 10,
    *,
    patch: int = 5,
    factor: int = 2,
    seed: int = 0,
    tol: float = 1e-7,
    max_iter: int = 200,
    threads: int = 1,
) -> tuple[DictionaryPair, list[float]]:
    """Learn a coupled dictionary from (lr_vector, hr_vector) training pairs.

    LR/HR vectors are concatenated after 1/sqrt(dim) balancing and fit by
    alternating exact sparse coding with a per-atom constrained least-squares
    dictionary update, so the training objective never increases across an
    alternation. Returns the pair and the per-epoch objective trace.
    """
    lr_list = [np.asarray(p[0], dtype=np.float64).ravel() for p in pairs]
    hr_list = [np.asarray(p[1], dtype=np.float64).ravel() for p in pairs]
    if len(lr_list) < atoms:
        raise ValueError(f"need at least {atoms} training pairs, got {len(lr_list)}")
    d_lr = len(lr_list[0])
    d_hr = len(hr_list[0])
    if any(len(v) != d_lr for v in lr_list) or any(len(v) != d_hr for v in hr_list):
        raise ValueError("inconsistent training vector dimensions")
    Y = np.stack(lr_list, axis=1)
    X = np.stack(hr_list, axis=1)
    if not np.any(Y) and not np.any(X):
        raise ValueError("degenerate training data: all vectors are zero")

    V = np.vstack([Y / np.sqrt(d_lr), X / np.sqrt(d_hr)])
    n_samples = V.shape[1]
    rng = np.random.default_rng(seed)

    idx = rng.choice(n_samples, size=atoms, replace=False)
    D = V[:, idx].copy()
    norms = np.linalg.norm(D, axis=0)
    dead = norms < 1e-12
    if np.any(dead):
        D[:, dead] = rng.standard_normal((V.shape[0], int(dead.sum())))
        norms = np.linalg.norm(D, axis=0)
    D /= norms

    A = np.zeros((atoms, n_samples), dtype=np.float64)
    trace: list[float] = []
    for _ in range(epochs):
        A = _coding_pass(D, V, A, lam, tol, max_iter, threads)
        resid = V - D @ A
        trace.append(lam * np.abs(A).sum() + float((resid * resid).sum()))

        # dictionary update: atom-wise least squares constrained to the unit ball
        P = V @ A.T
        S = A @ A.T
        resid_norms = ((V - D @ A) ** 2).sum(axis=0)
        reseed_order = list(np.argsort(-resid_norms))
        for j in range(atoms):
            sjj = S[j, j]
            if sjj <= 1e-12:
                if reseed_order:
                    src = V[:, reseed_order.pop(0)]
                    nrm = np.linalg.norm(src)
                    if nrm > 1e-12:
                        D[:, j] = src / nrm
                continue
            dj = (P[:, j] - D @ S[:, j] + D[:, j] * sjj) / sjj
            nrm = np.linalg.norm(dj)
            if nrm > 1.0:
                dj /= nrm
            D[:, j] = dj

    lr_part = D[:d_lr] * np.sqrt(d_lr)
    hr_part = D[d_lr:] * np.sqrt(d_hr)
    scale = np.linalg.norm(lr_part, axis=0)
    weak = scale < 1e-10
    if np.any(weak):
        repl = rng.standard_normal((d_lr, int(weak.sum())))
        lr_part[:, weak] = repl
        hr_part[:, weak] = 0.0
        scale = np.linalg.norm(lr_part, axis=0)
    pair = DictionaryPair(lr=lr_part / scale, hr=hr_part / scale, patch=patch, factor=factor)
    pair.validate()
    return pair, trace


def sample_training_pairs(
    images,
    factor: int = 2,
    patch: int = 5,
    count: int = 20000,
    seed: int = 0,
    flat_std: float = 0.01,
):
    """Draw co-located (LR, HR) patch-vector pairs from a corpus of images.

    Each image is mod-cropped, downsampled by the factor, and sampled at
    random LR origins; the matching HR patch sits at the factor-scaled origin.
    Both vectors are shifted by the LR patch mean. Near-flat patches are only
    used to fill up the budget once textured candidates run out.
    """
    rng = np.random.default_rng(seed)
    textured: list[tuple[int, int, int]] = []
    flat: list[tuple[int, int, int]] = []
    lrs, gts = [], []
    for idx, img in enumerate(images):
        gt = imagecore.mod_crop(np.asarray(img, dtype=np.float64), factor)
        if min(gt.shape) < patch * factor:
            continue
        lr = imagecore.downsample(gt, factor)
        lrs.append(lr)
        gts.append(gt)
        from numpy.lib.stride_tricks import sliding_window_view

        views = sliding_window_view(lr, (patch, patch))
        stds = views.std(axis=(2, 3))
        for r in range(stds.shape[0]):
            for c in range(stds.shape[1]):
                (textured if stds[r, c] >= flat_std else flat).append((len(lrs) - 1, r, c))
    if not textured and not flat:
        raise ValueError("corpus images are too small for the requested patch geometry")

    def pick(pool, want):
        if want >= len(pool):
            return list(pool)
        sel = rng.choice(len(pool), size=want, replace=False)
        return [pool[i] for i in np.sort(sel)]

    chosen = pick(textured, count)
    if len(chosen) < count:
        chosen += pick(flat, count - len(chosen))

    pairs = []
    hp = patch * factor
    for idx, r, c in chosen:
        lr_patch = lrs[idx][r : r + patch, c : c + patch].ravel()
        hr_patch = gts[idx][r * factor : r * factor + hp, c * factor : c * factor + hp].ravel()
        mean = lr_patch.mean()
        pairs.append(((lr_patch - mean) * CODING_SCALE, (hr_patch - mean) * CODING_SCALE))
    return pairs


def csc_initialize(
    y_img: np.ndarray,
    pair: DictionaryPair,
    grid: imagecore.PatchGrid | None = None,
    config: SparseConfig | None = None,
    *,
    overlap: int = 1,
    threads: int = 1,
) -> tuple[np.ndarray, list[SparseCode]]:
    """Coupled sparse coding of every LR patch; assembles the HR estimate.

    Each mean-subtracted low-resolution patch is coded against the LR
    dictionary and its high-resolution patch reconstructed as
    ``hr_dict @ code + mean``. Returns the (unclamped) assembled HR image and
    the per-patch codes in grid order.
    """
    cfg = config or SparseConfig()
    y_img = np.asarray(y_img, dtype=np.float64)
    if grid is None:
        grid = imagecore.make_grid(y_img.shape[0], y_img.shape[1], pair.patch, overlap)
    if grid.patch != pair.patch:
        raise ValueError(f"grid patch {grid.patch} != dictionary patch {pair.patch}")

    vecs = imagecore.extract_patches(y_img, grid).reshape(len(grid), -1)
    means = vecs.mean(axis=1)
    resid = (vecs - means[:, None]) * CODING_SCALE
    gram = pair.lr.T @ pair.lr

    def code_one(i):
        return l1_solve(pair.lr, resid[i], cfg.lam, tol=cfg.tol,
                        max_iter=cfg.max_iter, gram=gram)

    codes = parallel_map(code_one, range(len(grid)), threads)
    coeff = np.stack([c.coefficients for c in codes], axis=1)
    hr_vecs = (pair.hr @ coeff).T / CODING_SCALE + means[:, None]
    hr_grid = imagecore.scale_grid(grid, pair.factor)
    hr = imagecore.assemble_patches(hr_vecs.reshape(-1, hr_grid.patch, hr_grid.patch), hr_grid)
    return hr, codes


def csc_upscale(
    y_img: np.ndarray,
    pair: DictionaryPair,
    config: SparseConfig | None = None,
    *,
    overlap: int = 1,
    threads: int = 1,
) -> np.ndarray:
    """Standalone external-example baseline; output clamped to [0, 1]."""
    hr, _ = csc_initialize(y_img, pair, config=config, overlap=overlap, threads=threads)
    return np.clip(hr, 0.0, 1.0)
