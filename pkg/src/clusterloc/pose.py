"""Absolute pose from 2D-3D correspondences.

Minimal three-point solver (Grunert's quartic), RANSAC consensus with
reprojection-error scoring, and Levenberg-Marquardt refinement over a
rotation tangent vector and the camera center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import CameraPose, Intrinsics, orthonormalize, reprojection_errors


class PoseEstimationError(ValueError):
    pass


class InsufficientCorrespondences(PoseEstimationError):
    pass


@dataclass(frozen=True)
class PoseConfig:
    epsilon: float = 6.0
    min_inliers: int = 12
    max_ransac_iters: int = 10000
    confidence: float = 0.99
    refine: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be at least 4")
        if self.max_ransac_iters < 1:
            raise ValueError("max_ransac_iters must be at least 1")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass
class PoseResult:
    pose: CameraPose | None
    inlier_ids: np.ndarray
    residuals: np.ndarray
    iterations_used: int
    success: bool
    flags: set[str] = field(default_factory=set)

    @property
    def num_inliers(self) -> int:
        return int(len(self.inlier_ids))

    @property
    def inlier_ratio(self) -> float:
        n = len(self.residuals)
        return self.num_inliers / n if n else 0.0


class P3PSolutions(NamedTuple):
    poses: list[CameraPose]
    degenerate: bool


def bearings(pixels: np.ndarray, intrinsics: Intrinsics) -> np.ndarray:
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    rays = np.column_stack([
        (pixels[:, 0] - intrinsics.cx) / intrinsics.focal,
        (pixels[:, 1] - intrinsics.cy) / intrinsics.focal,
        np.ones(len(pixels)),
    ])
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _grunert_quartic(a2, b2, c2, ca, cb, cg):
    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * ca**2
    A3 = 4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
    A2 = 2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2
              - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2)
    A1 = 4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - apc) * ca * cg)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cg**2
    return np.array([A4, A3, A2, A1, A0])


def _real_positive_roots(coeffs: np.ndarray) -> list[float]:
    scale = np.abs(coeffs).max()
    if scale == 0:
        return []
    c = coeffs / scale
    while len(c) > 1 and abs(c[0]) < 1e-14:
        c = c[1:]
    if len(c) < 2:
        return []
    dc = np.polyder(c)
    out = []
    for r in np.roots(c):
        if abs(r.imag) > 1e-4 * (1 + abs(r.real)):
            continue
        x = r.real
        for _ in range(8):
            d = np.polyval(dc, x)
            if d == 0:
                break
            step = np.polyval(c, x) / d
            x -= step
            if abs(step) <= 1e-16 * (1 + abs(x)):
                break
        if x > 0:
            out.append(float(x))
    return out


def _polish_depths(s, f, d2):
    """Newton iterations on the three law-of-cosines equations."""
    pairs = ((1, 2), (0, 2), (0, 1))
    cos = np.array([f[i] @ f[j] for i, j in pairs])
    for _ in range(6):
        F = np.array([s[i] ** 2 + s[j] ** 2 - 2 * s[i] * s[j] * cos[n] - d2[n]
                      for n, (i, j) in enumerate(pairs)])
        J = np.zeros((3, 3))
        for n, (i, j) in enumerate(pairs):
            J[n, i] = 2 * s[i] - 2 * s[j] * cos[n]
            J[n, j] = 2 * s[j] - 2 * s[i] * cos[n]
        try:
            step = np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            break
        s_new = s - step
        F_new = np.array([s_new[i] ** 2 + s_new[j] ** 2 - 2 * s_new[i] * s_new[j] * cos[n] - d2[n]
                          for n, (i, j) in enumerate(pairs)])
        if np.abs(F_new).sum() >= np.abs(F).sum():
            break
        s = s_new
    return s


def _absolute_orientation(world: np.ndarray, cam: np.ndarray):
    """R, t with ``cam ~ R @ world + t`` (Kabsch)."""
    mw = world.mean(axis=0)
    mc = cam.mean(axis=0)
    H = (world - mw).T @ (cam - mc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mc - R @ mw


def p3p_solve(pixels, points, intrinsics: Intrinsics) -> P3PSolutions:
    """All camera poses consistent with three 2D-3D correspondences (0 to 4)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(3, 2)
    P = np.asarray(points, dtype=np.float64).reshape(3, 3)
    scale = max(np.abs(P - P.mean(axis=0)).max(), 1e-300)
    if np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0])) <= 1e-10 * scale * scale:
        return P3PSolutions([], True)
    f = bearings(pixels, intrinsics)
    if min(np.linalg.norm(np.cross(f[i], f[j])) for i, j in ((0, 1), (0, 2), (1, 2))) < 1e-12:
        return P3PSolutions([], True)

    a2 = float(np.sum((P[1] - P[2]) ** 2))
    b2 = float(np.sum((P[0] - P[2]) ** 2))
    c2 = float(np.sum((P[0] - P[1]) ** 2))
    ca, cb, cg = f[1] @ f[2], f[0] @ f[2], f[0] @ f[1]

    poses: list[CameraPose] = []
    seen: list[np.ndarray] = []
    for v in _real_positive_roots(_grunert_quartic(a2, b2, c2, ca, cb, cg)):
        denom = 1 + v * v - 2 * v * cb
        if denom <= 0:
            continue
        s1 = math.sqrt(b2 / denom)
        s3 = v * s1
        disc = s1 * s1 * cg * cg - s1 * s1 + c2
        if disc < 0:
            if disc < -1e-8 * c2:
                continue
            disc = 0.0
        cands = [s1 * cg + math.sqrt(disc), s1 * cg - math.sqrt(disc)]
        cands = [s2 for s2 in cands if s2 > 0]
        if not cands:
            continue
        s2 = min(cands, key=lambda s2: abs(s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2))
        s = _polish_depths(np.array([s1, s2, s3]), f, np.array([a2, b2, c2]))
        err = abs(s[1] ** 2 + s[2] ** 2 - 2 * s[1] * s[2] * ca - a2) / a2
        if not np.all(s > 0) or err > 1e-6:
            continue
        R, t = _absolute_orientation(P, s[:, None] * f)
        key = np.concatenate([R.ravel(), t])
        if any(np.abs(key - k).max() < 1e-9 * (1 + np.abs(k).max()) for k in seen):
            continue
        seen.append(key)
        poses.append(CameraPose.from_intrinsics(orthonormalize(R), -R.T @ t, intrinsics))
    return P3PSolutions(poses, False)


def _companion_roots(coeffs: np.ndarray) -> np.ndarray:
    """Complex roots of quartics, one row of 5 coefficients each (leading first)."""
    c = coeffs[:, 1:] / coeffs[:, :1]
    M = np.zeros((len(c), 4, 4))
    M[:, 0, :] = -c
    M[:, 1, 0] = M[:, 2, 1] = M[:, 3, 2] = 1.0
    return np.linalg.eigvals(M)


def p3p_batch(f: np.ndarray, X: np.ndarray, samples: np.ndarray):
    """Vectorized three-point solver over many samples.

    ``f`` holds unit bearings and ``X`` world points for all correspondences;
    ``samples`` is ``(B, 3)`` row indices.  Returns ``(R, t, owner, valid)``
    where ``R, t`` map world to camera for each hypothesis, ``owner`` is the
    sample row it came from and ``valid[b]`` says sample ``b`` was not
    degenerate.  Intended for hypothesis generation: no depth polishing or
    duplicate removal, unlike :func:`p3p_solve`.
    """
    F = f[samples]  # (B, 3, 3)
    P = X[samples]
    B = len(samples)
    scale = np.abs(P - P.mean(axis=1, keepdims=True)).max(axis=(1, 2))
    area = np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=1)
    spread = np.min([np.linalg.norm(np.cross(F[:, i], F[:, j]), axis=1) for i, j in ((0, 1), (0, 2), (1, 2))],
                    axis=0)
    valid = (area > 1e-10 * scale * scale) & (spread >= 1e-12)

    a2 = np.sum((P[:, 1] - P[:, 2]) ** 2, axis=1)
    b2 = np.sum((P[:, 0] - P[:, 2]) ** 2, axis=1)
    c2 = np.sum((P[:, 0] - P[:, 1]) ** 2, axis=1)
    ca = np.einsum("bi,bi->b", F[:, 1], F[:, 2])
    cb = np.einsum("bi,bi->b", F[:, 0], F[:, 2])
    cg = np.einsum("bi,bi->b", F[:, 0], F[:, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        coeffs = _grunert_quartic(a2, b2, c2, ca, cb, cg).T  # (B, 5)
        coeffs = coeffs / np.abs(coeffs).max(axis=1, keepdims=True)
    valid &= np.all(np.isfinite(coeffs), axis=1)
    roots = np.full((B, 4), np.nan, dtype=complex)
    regular = valid & (np.abs(coeffs[:, 0]) > 1e-10)
    if np.any(regular):
        roots[regular] = _companion_roots(coeffs[regular])
    for b in np.flatnonzero(valid & ~regular):  # leading coefficient vanishes
        r = _real_positive_roots(coeffs[b])
        roots[b, : len(r)] = r

    real = np.abs(roots.imag) <= 1e-4 * (1 + np.abs(roots.real))
    owner, slot = np.nonzero(real & valid[:, None])
    v = roots.real[owner, slot]
    cf = coeffs[owner]
    dcf = cf[:, :4] * np.array([4.0, 3.0, 2.0, 1.0])
    for _ in range(6):
        pv = (((cf[:, 0] * v + cf[:, 1]) * v + cf[:, 2]) * v + cf[:, 3]) * v + cf[:, 4]
        dv = ((dcf[:, 0] * v + dcf[:, 1]) * v + dcf[:, 2]) * v + dcf[:, 3]
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.where(dv != 0, v - pv / dv, v)

    a2, b2, c2, ca, cb, cg = (x[owner] for x in (a2, b2, c2, ca, cb, cg))
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1 + v * v - 2 * v * cb
        s1 = np.sqrt(b2 / denom)
        s3 = v * s1
        disc = s1 * s1 * cg * cg - s1 * s1 + c2
        ok = (v > 0) & (denom > 0) & (disc >= -1e-8 * c2)
        root = np.sqrt(np.maximum(disc, 0.0))
        cand = np.stack([s1 * cg + root, s1 * cg - root], axis=1)
        resid = np.abs(cand**2 + (s3 * s3)[:, None] - 2 * cand * (s3 * ca)[:, None] - a2[:, None])
        resid[cand <= 0] = np.inf
        pick = np.argmin(resid, axis=1)
        s2 = cand[np.arange(len(cand)), pick]
        ok &= np.isfinite(resid[np.arange(len(cand)), pick]) & (resid.min(axis=1) <= 1e-4 * a2)
    owner, s = owner[ok], np.stack([s1, s2, s3], axis=1)[ok]

    Pw = P[owner]
    Pc = s[:, :, None] * F[owner]
    mw, mc = Pw.mean(axis=1), Pc.mean(axis=1)
    H = np.einsum("hni,hnj->hij", Pw - mw[:, None], Pc - mc[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("hji,hkj->hik", Vt, U)))
    Vt[:, 2, :] *= d[:, None]
    R = np.einsum("hji,hkj->hik", Vt, U)
    t = mc - np.einsum("hij,hj->hi", R, mw)
    return R, t, owner, valid


def _score_hypotheses(R, t, pixels, X, intrinsics: Intrinsics, epsilon: float):
    """Per-hypothesis inlier counts and summed inlier residuals."""
    Y = np.einsum("hij,nj->hni", R, X) + t[:, None, :]
    z = Y[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = intrinsics.focal * Y[..., 0] / z + intrinsics.cx - pixels[:, 0]
        dv = intrinsics.focal * Y[..., 1] / z + intrinsics.cy - pixels[:, 1]
    res = np.sqrt(du * du + dv * dv)
    inl = (z > 0) & (res <= epsilon)
    return inl.sum(axis=1), np.where(inl, res, 0.0).sum(axis=1)


def _adaptive_iterations(inlier_frac: float, confidence: float, sample_size: int = 3) -> float:
    w = inlier_frac**sample_size
    if w >= 1.0:
        return 0.0
    if w <= 0.0:
        return math.inf
    return math.ceil(math.log(1.0 - confidence) / math.log(1.0 - w))


def _random_triples(rng, n: int, size: int) -> np.ndarray:
    """Uniform samples of 3 distinct indices in ``range(n)``."""
    a = rng.integers(0, n, size)
    b = rng.integers(0, n - 1, size)
    b = b + (b >= a)
    c = rng.integers(0, n - 2, size)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c = c + (c >= lo)
    c = c + (c >= hi)
    return np.stack([a, b, c], axis=1)


RANSAC_BATCH = 64


def ransac_pnp(pixels, points, intrinsics: Intrinsics, cfg: PoseConfig = PoseConfig(),
               seed=None) -> PoseResult:
    """Robust pose: P3P hypotheses scored by inliers, ties by summed inlier residual.

    Minimal samples are drawn and solved in batches of ``RANSAC_BATCH``; the
    adaptive iteration bound is checked between batches.  ``seed`` overrides
    ``cfg.seed`` (anything ``numpy.random.default_rng`` accepts).
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pixels)
    if n < 4:
        raise InsufficientCorrespondences(f"insufficient correspondences: {n} < 4")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    f = bearings(pixels, intrinsics)

    best_key = None
    best_Rt = None
    needed = math.inf
    iters = 0
    any_valid = False
    while iters < cfg.max_ransac_iters and iters < needed:
        size = min(RANSAC_BATCH, cfg.max_ransac_iters - iters)
        iters += size
        R, t, owner, valid = p3p_batch(f, points, _random_triples(rng, n, size))
        any_valid |= bool(valid.any())
        if len(R) == 0:
            continue
        count, total = _score_hypotheses(R, t, pixels, points, intrinsics, cfg.epsilon)
        # first hypothesis in sampling order wins exact ties
        h = int(np.lexsort((np.arange(len(count)), total, -count))[0])
        key = (int(count[h]), -float(total[h]))
        if best_key is None or key > best_key:
            best_key, best_Rt = key, (R[h], t[h])
            needed = _adaptive_iterations(key[0] / n, cfg.confidence)
    if not any_valid:
        raise PoseEstimationError("all minimal samples were degenerate")

    flags: set[str] = set()
    if best_Rt is None:
        return PoseResult(None, np.array([], dtype=np.int64), np.full(n, np.inf), iters, False,
                          {"no hypothesis"})

    R = orthonormalize(best_Rt[0])
    pose = CameraPose.from_intrinsics(R, -R.T @ best_Rt[1], intrinsics)
    res = reprojection_errors(pose, pixels, points)
    inliers = np.flatnonzero(res <= cfg.epsilon)
    if cfg.refine and len(inliers) >= 4:
        ref = refine_pose(pose, pixels[inliers], points[inliers])
        res_ref = reprojection_errors(ref.pose, pixels, points)
        inl_ref = np.flatnonzero(res_ref <= cfg.epsilon)
        if ref.improved and len(inl_ref) >= len(inliers):
            pose, res, inliers = ref.pose, res_ref, inl_ref
        else:
            flags.add("refinement rejected")
    return PoseResult(pose, inliers, res, iters, len(inliers) >= cfg.min_inliers, flags)


class Refinement(NamedTuple):
    pose: CameraPose
    initial_cost: float
    final_cost: float
    improved: bool


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def perturb(pose: CameraPose, params: np.ndarray) -> CameraPose:
    """Apply a tangent update ``(omega, dC)``: ``R <- exp([omega]x) R``, ``C <- C + dC``."""
    dR = Rotation.from_rotvec(params[:3]).as_matrix()
    return CameraPose(orthonormalize(dR @ pose.rotation), pose.center + params[3:6],
                      pose.focal, pose.principal_point)


def residual_vector(pose: CameraPose, pixels: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Stacked ``(u_proj - u, v_proj - v)`` residuals; undefined behind the camera."""
    Xc = pose.to_camera(points)
    u = pose.focal * Xc[:, 0] / Xc[:, 2] + pose.principal_point[0]
    v = pose.focal * Xc[:, 1] / Xc[:, 2] + pose.principal_point[1]
    return np.column_stack([u - pixels[:, 0], v - pixels[:, 1]]).ravel()


def reprojection_jacobian(pose: CameraPose, points: np.ndarray) -> np.ndarray:
    """``(2n, 6)`` Jacobian of :func:`residual_vector` w.r.t. the tangent update at zero."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    Y = pose.to_camera(points)
    f = pose.focal
    x, y, z = Y[:, 0], Y[:, 1], Y[:, 2]
    n = len(points)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = f / z
    dproj[:, 0, 2] = -f * x / z**2
    dproj[:, 1, 1] = f / z
    dproj[:, 1, 2] = -f * y / z**2
    # Y(omega) = exp([omega]x) Y  ->  dY/domega = -[Y]x ;  dY/dC = -R
    dY = np.zeros((n, 3, 6))
    dY[:, 0, 1], dY[:, 0, 2] = z, -y
    dY[:, 1, 0], dY[:, 1, 2] = -z, x
    dY[:, 2, 0], dY[:, 2, 1] = y, -x
    dY[:, :, 3:] = -pose.rotation
    return np.einsum("nij,njk->nik", dproj, dY).reshape(2 * n, 6)


def refine_pose(pose: CameraPose, pixels, points, max_iters: int = 50) -> Refinement:
    """Levenberg-Marquardt on squared reprojection error; never increases the cost."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 4:
        raise InsufficientCorrespondences("refinement needs at least 4 correspondences")

    def cost_of(p):
        if np.any(p.to_camera(points)[:, 2] <= 0):
            return math.inf
        r = residual_vector(p, pixels, points)
        return float(r @ r)

    initial = cost_of(pose)
    if not math.isfinite(initial):
        return Refinement(pose, initial, initial, False)
    current, cost = pose, initial
    lam = 1e-3
    for _ in range(max_iters):
        if cost <= 1e-28:
            break
        r = residual_vector(current, pixels, points)
        J = reprojection_jacobian(current, points)
        A = J.T @ J
        g = J.T @ r
        accepted = False
        for _ in range(10):
            try:
                step = -np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            cand = perturb(current, step)
            c = cost_of(cand)
            if c < cost:
                accepted = True
                rel = (cost - c) / cost
                current, cost = cand, c
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not accepted or rel < 1e-15:
            break
    return Refinement(current, initial, cost, cost < initial)
