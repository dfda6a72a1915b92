"""Eight-Lorentzian ODMR line model and a Levenberg-Marquardt fitter.

The model is ``baseline - sum_i C_i * (g^2 / ((nu - c_i)^2 + g^2))`` with
``g = gamma / 2``, so ``gamma`` is the full width at half maximum shared by
every dip. Internally frequencies are mapped onto [-1, 1] over the sweep
window; raw hertz values near 3 GHz ruin the normal equations otherwise.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from .errors import InsufficientStructureError, InvalidInputError, NotConvergedError
from .nvframe import D as ZERO_FIELD_SPLITTING

N_DIPS = 8


@dataclass(frozen=True)
class LorentzianModelParams:
    baseline: float
    gamma: float
    centers: np.ndarray
    contrasts: np.ndarray
    # Dips with active=False keep their contrast pinned at zero.
    active: np.ndarray = None

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float)
        contrasts = np.asarray(self.contrasts, dtype=float)
        if centers.shape != contrasts.shape:
            raise InvalidInputError("centers and contrasts must have the same length")
        active = np.ones(centers.shape, bool) if self.active is None else np.asarray(self.active, bool)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "contrasts", np.where(active, contrasts, 0.0))
        object.__setattr__(self, "active", active)

    @property
    def n_active(self):
        return int(self.active.sum())

    def canonical(self):
        order = np.argsort(self.centers, kind="stable")
        return replace(
            self, centers=self.centers[order], contrasts=self.contrasts[order], active=self.active[order]
        )


@dataclass
class FitResult:
    params: LorentzianModelParams
    residual_rms: float
    n_iterations: int
    converged: bool
    # Variances in the order baseline, gamma, centers..., contrasts...; NaN for pinned entries.
    covariance_diag: np.ndarray
    cost_history: list = field(default_factory=list)
    near_edge: bool = False


def model_eval(params, frequency):
    nu = np.asarray(frequency, dtype=float)
    g2 = (0.5 * params.gamma) ** 2
    d = nu[..., None] - params.centers
    return params.baseline - np.sum(params.contrasts * g2 / (d * d + g2), axis=-1)


def _model_and_jacobian(x, theta, n):
    """Model and Jacobian in scaled units.

    theta = [baseline, gamma, c_1..c_n, C_1..C_n].
    """
    gamma = theta[1]
    c = theta[2 : 2 + n]
    C = theta[2 + n : 2 + 2 * n]
    g = 0.5 * gamma
    g2 = g * g
    d = x[:, None] - c
    q = d * d + g2
    L = g2 / q
    f = theta[0] - L @ C
    J = np.empty((x.size, 2 + 2 * n))
    J[:, 0] = 1.0
    J[:, 1] = -((g * d * d / (q * q)) @ C)
    J[:, 2 : 2 + n] = -C * (2.0 * g2 * d / (q * q))
    J[:, 2 + n :] = -L
    return f, J


class _Scaling:
    def __init__(self, frequencies):
        f = np.asarray(frequencies, dtype=float)
        self.mid = 0.5 * (f[0] + f[-1])
        self.half = 0.5 * (f[-1] - f[0])
        if not self.half > 0:
            raise InvalidInputError("frequency window must span a positive range")

    def to_x(self, nu):
        return (np.asarray(nu, dtype=float) - self.mid) / self.half

    def to_nu(self, x):
        return np.asarray(x) * self.half + self.mid


def jacobian(params, frequency):
    """Analytic Jacobian in physical units, columns [baseline, gamma, centers, contrasts]."""
    nu = np.asarray(frequency, dtype=float)
    n = params.centers.size
    theta = np.concatenate([[params.baseline, params.gamma], params.centers, params.contrasts])
    _, J = _model_and_jacobian(nu, theta, n)
    return J


def _pack(params, sc):
    a = params.active
    theta = np.concatenate(
        [[params.baseline, params.gamma / sc.half], sc.to_x(params.centers[a]), params.contrasts[a]]
    )
    return theta


def _unpack(theta, template, sc):
    a = template.active
    n = int(a.sum())
    centers = template.centers.copy()
    contrasts = np.zeros_like(template.contrasts)
    centers[a] = sc.to_nu(theta[2 : 2 + n])
    contrasts[a] = theta[2 + n : 2 + 2 * n]
    return LorentzianModelParams(float(theta[0]), float(theta[1] * sc.half), centers, contrasts, a.copy())


def _project(theta, n, gamma_min):
    theta = theta.copy()
    theta[1] = max(theta[1], gamma_min)
    np.clip(theta[2 : 2 + n], -1.0, 1.0, out=theta[2 : 2 + n])
    np.maximum(theta[2 + n :], 0.0, out=theta[2 + n :])
    return theta


def _levenberg_marquardt(fun, theta, project, max_iter, lambda0, tol_residual, tol_step):
    """Shared LM loop. ``fun(theta)`` returns (residual, jacobian)."""
    theta = project(theta)
    r, J = fun(theta)
    cost = float(r @ r)
    history = [cost]
    lam = lambda0
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        A = J.T @ J
        g = J.T @ r
        scale = np.maximum(np.diag(A), 1e-12 * max(1.0, float(np.max(np.diag(A)))))
        accepted = False
        while lam <= 1e16:
            try:
                delta = np.linalg.solve(A + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            trial = project(theta + delta)
            if float(np.linalg.norm(trial - theta)) < tol_step:
                converged = True
                break
            r_t, J_t = fun(trial)
            cost_t = float(r_t @ r_t)
            if cost_t < cost:
                accepted = True
                break
            lam *= 10.0
        if converged or not accepted:
            break
        rel = (cost - cost_t) / max(cost, 1e-300)
        theta, r, J, cost = trial, r_t, J_t, cost_t
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if rel < tol_residual or cost == 0.0:
            converged = True
            break
    return theta, cost, J, history, it, converged


def lm_fit(spectrum, guess, max_iter=500, lambda0=1e-3, tol_residual=1e-10, tol_step=1e-12):
    """Levenberg-Marquardt least squares of the dip model against a spectrum.

    Damping uses Marquardt's diagonal scaling. lambda is divided by ten on an
    accepted step and multiplied by ten on a rejected one; only steps that
    lower the cost are accepted. Contrasts are projected onto C >= 0 and
    centers onto the sweep window after every trial step. Convergence is a
    relative cost decrease below ``tol_residual`` or a scaled step norm below
    ``tol_step``; running out of iterations (or of damping headroom) returns
    ``converged=False`` instead of raising.
    """
    nu = np.asarray(spectrum.frequencies, dtype=float)
    y = np.asarray(spectrum.intensity, dtype=float)
    sc = _Scaling(nu)
    x = sc.to_x(nu)
    n = guess.n_active
    gamma_min = 0.25 * float(np.min(np.abs(np.diff(x))))

    def fun(theta):
        f, J = _model_and_jacobian(x, theta, n)
        return f - y, J

    theta, cost, J, history, it, converged = _levenberg_marquardt(
        fun, _pack(guess, sc), lambda t: _project(t, n, gamma_min), max_iter, lambda0, tol_residual, tol_step
    )

    params = _unpack(theta, guess, sc)
    dof = max(x.size - theta.size, 1)
    cov = np.linalg.pinv(J.T @ J) * (cost / dof)
    var_scaled = np.diag(cov)
    m = guess.centers.size
    var = np.full(2 + 2 * m, np.nan)
    var[0] = var_scaled[0]
    var[1] = var_scaled[1] * sc.half**2
    a_idx = np.flatnonzero(guess.active)
    var[2 + a_idx] = var_scaled[2 : 2 + n] * sc.half**2
    var[2 + m + a_idx] = var_scaled[2 + n :]

    canon = params.canonical()
    order = np.argsort(params.centers, kind="stable")
    var[2 : 2 + m] = var[2 : 2 + m][order]
    var[2 + m :] = var[2 + m :][order]
    active_centers = canon.centers[canon.active]
    near_edge = bool(
        active_centers.size
        and (active_centers.min() - nu[0] < 2 * canon.gamma or nu[-1] - active_centers.max() < 2 * canon.gamma)
    )
    return FitResult(
        params=canon,
        residual_rms=math.sqrt(cost / x.size),
        n_iterations=it,
        converged=converged,
        covariance_diag=var,
        cost_history=history,
        near_edge=near_edge,
    )


def noise_sigma(y):
    """Robust per-sample noise from second differences (var = 6 sigma^2 for white noise).

    Second differences cancel the steep dip flanks that inflate a first-difference estimate.
    """
    d = np.diff(np.asarray(y, dtype=float), n=2)
    if d.size == 0:
        return 0.0
    return float(1.4826 * np.median(np.abs(d - np.median(d))) / math.sqrt(6.0))


@dataclass(frozen=True)
class _Peak:
    freq: float
    depth: float
    width_hz: float
    prominence: float


def _find_dips(freqs, y, baseline, prominence_sigma=6.0):
    n = y.size
    w = max(3, n // 100)
    if w % 2 == 0:
        w += 1
    inv = uniform_filter1d(baseline - y, size=w, mode="nearest")
    sigma_s = noise_sigma(y) / math.sqrt(w)
    floor = max(prominence_sigma * sigma_s, 1e-6 * max(abs(baseline), 1e-12))
    idx, props = find_peaks(inv, prominence=floor, width=0, rel_height=0.5)
    if idx.size == 0:
        return [], w
    sample = np.arange(n)
    left = np.interp(props["left_ips"], sample, freqs)
    right = np.interp(props["right_ips"], sample, freqs)
    peaks = [
        _Peak(float(freqs[i]), float(inv[i]), float(rh - lh), float(p))
        for i, lh, rh, p in zip(idx, left, right, props["prominences"])
    ]
    peaks.sort(key=lambda p: -p.prominence)
    return peaks, w


def initial_guess(spectrum, expected_pairs=4, D=ZERO_FIELD_SPLITTING):
    """Seed parameters for :func:`lm_fit` from the spectrum's prominent dips.

    Dips are located on a moving-average smoothed copy of the inverted
    spectrum (window ``max(3, n // 100)`` samples), ranked by prominence and
    matched into mirror pairs about ``D``. The width seed is the median dip
    width at half prominence. Pairs that were not found are seeded at
    ``D +/- median splitting`` with their contrast pinned at zero.
    """
    if not 1 <= expected_pairs <= 4:
        raise InvalidInputError("expected_pairs must be between 1 and 4")
    freqs = np.asarray(spectrum.frequencies, dtype=float)
    y = np.asarray(spectrum.intensity, dtype=float)
    if freqs.size < 10:
        raise InvalidInputError(f"need at least 10 samples to seed a fit, got {freqs.size}")
    k = max(1, int(round(0.1 * y.size)))
    baseline = float(np.mean(np.sort(y)[-k:]))

    peaks, _ = _find_dips(freqs, y, baseline)
    peaks = peaks[: 2 * expected_pairs]
    if not peaks:
        raise InsufficientStructureError("no prominent dips found")
    step = float(np.median(np.diff(freqs)))
    gamma0 = max(float(np.median([p.width_hz for p in peaks])), 2 * step)

    pairs = []  # (half_splitting, depth)
    used = set()
    for i, p in enumerate(peaks):
        if i in used:
            continue
        used.add(i)
        dp = p.freq - D
        best, best_err = None, 0.5 * gamma0
        for j, q in enumerate(peaks):
            if j in used or np.sign(q.freq - D) == np.sign(dp):
                continue
            err = abs(dp + (q.freq - D))
            if err < best_err:
                best, best_err = j, err
        if best is not None:
            used.add(best)
            q = peaks[best]
            pairs.append((0.5 * (abs(dp) + abs(q.freq - D)), 0.5 * (p.depth + q.depth)))
        else:
            pairs.append((abs(dp), p.depth))

    # A dip at D is a degenerate pair; keep its two centers slightly apart so
    # the fit has a gradient to separate them.
    pairs = [(max(h, 0.1 * gamma0), depth) for h, depth in pairs]
    merged = []
    for h, depth in sorted(pairs):
        if merged and h - merged[-1][0] < 0.25 * gamma0:
            continue
        merged.append((h, depth))
    pairs = sorted(merged, key=lambda t: -t[1])[:expected_pairs]

    found = len(pairs)
    median_h = float(np.median([h for h, _ in pairs]))
    centers, contrasts, active = [], [], []
    for n in range(4):
        on = n < found
        h, depth = pairs[n] if on else (median_h, 0.0)
        c = float(np.clip(depth, 1e-4, 0.3)) if on else 0.0
        centers += [float(np.clip(D - h, freqs[0], freqs[-1])), float(np.clip(D + h, freqs[0], freqs[-1]))]
        contrasts += [c, c]
        active += [on, on]
    return LorentzianModelParams(baseline, gamma0, np.array(centers), np.array(contrasts), np.array(active)).canonical()


def _pair_model(x, theta, k):
    """Mirror-pair model and Jacobian: dips at d0 -/+ h_j, both of depth C_j.

    theta = [baseline, gamma, d0, h_1..h_k, C_1..C_k] in scaled units.
    """
    g = 0.5 * theta[1]
    g2 = g * g
    d0 = theta[2]
    h = theta[3 : 3 + k]
    C = theta[3 + k : 3 + 2 * k]
    um = x[:, None] - (d0 - h)
    up = x[:, None] - (d0 + h)
    qm = um * um + g2
    qp = up * up + g2
    Lm = g2 / qm
    Lp = g2 / qp
    dm = 2 * g2 * um / (qm * qm)
    dp = 2 * g2 * up / (qp * qp)
    f = theta[0] - (Lm + Lp) @ C
    J = np.empty((x.size, 3 + 2 * k))
    J[:, 0] = 1.0
    J[:, 1] = -((g * um * um / (qm * qm) + g * up * up / (qp * qp)) @ C)
    J[:, 2] = -((dm + dp) @ C)
    J[:, 3 : 3 + k] = -C * (dp - dm)
    J[:, 3 + k :] = -(Lm + Lp)
    return f, J


def _fit_pairs(x, y, theta, k, gamma_min, max_iter=200):
    def fun(t):
        f, J = _pair_model(x, t, k)
        return f - y, J

    def project(t):
        t = t.copy()
        t[1] = max(t[1], gamma_min)
        t[2] = min(max(t[2], -1.0), 1.0)
        t[3 : 3 + 2 * k] = np.maximum(t[3 : 3 + 2 * k], 0.0)
        return t

    theta, cost, *_ = _levenberg_marquardt(fun, theta, project, max_iter, 1e-3, 1e-8, 1e-10)
    return theta, cost


def _folded_residual_minima(x, r, d0, w, n_best=2):
    """Locations (as half-splittings) where the mirror-averaged residual dips most."""
    mirror = np.interp(2 * d0 - x, x, r, left=np.nan, right=np.nan)
    fold = 0.5 * (r + np.where(np.isfinite(mirror), mirror, r))
    fold = uniform_filter1d(-fold, size=w, mode="nearest")
    side = x >= d0
    xs, fs = x[side] - d0, fold[side]
    if xs.size < 3:
        return []
    idx, _ = find_peaks(np.concatenate([[-np.inf], fs, [-np.inf]]))
    idx = idx - 1
    idx = idx[np.argsort(-fs[idx])][:n_best]
    return [float(xs[i]) for i in idx]


def _pair_staging(spectrum, guess, D, expected_pairs):
    """Grow the mirror-pair model one pair at a time; pick the count by BIC.

    Candidate positions for each new pair are the deepest minima of the
    mirror-averaged residual and an even split of every existing pair (two
    merged pairs look like one broad pair). Returns eight-dip seed params.
    """
    nu = np.asarray(spectrum.frequencies, dtype=float)
    y = np.asarray(spectrum.intensity, dtype=float)
    sc = _Scaling(nu)
    x = sc.to_x(nu)
    n = x.size
    w = max(3, n // 100) | 1
    gamma_min = 0.25 * float(np.min(np.diff(x)))
    g0 = guess.gamma / sc.half
    d0 = (D - sc.mid) / sc.half

    a = guess.active
    hs = list(0.5 * (guess.centers[a][::-1][: guess.n_active // 2] - guess.centers[a][: guess.n_active // 2]) / sc.half)
    cs = list(guess.contrasts[a][: guess.n_active // 2])
    k0 = len(hs)
    theta = np.concatenate([[guess.baseline, g0, d0], hs, cs])
    stages = {k0: _fit_pairs(x, y, theta, k0, gamma_min)}

    def offer(kk, t0):
        t1, c1 = _fit_pairs(x, y, t0, kk, gamma_min)
        if kk not in stages or c1 < stages[kk][1]:
            stages[kk] = (t1, c1)

    for k in range(k0, expected_pairs):
        base_theta = stages[k][0]
        b, gam, dd = base_theta[:3]
        h_old = list(base_theta[3 : 3 + k])
        c_old = list(base_theta[3 + k :])
        head = [b, gam, dd]
        f, _ = _pair_model(x, base_theta, k)
        for h_new in _folded_residual_minima(x, y - f, dd, w):
            offer(k + 1, np.array(head + h_old + [h_new] + c_old + [float(np.median(c_old))]))
        for frac in (0.25, 0.5):
            off = frac * gam
            head = [b, max(2 * off, gamma_min), dd]
            for j in range(k):
                h_split = h_old[:j] + h_old[j + 1 :] + [max(h_old[j] - off, 0.0), h_old[j] + off]
                c_split = c_old[:j] + c_old[j + 1 :] + [c_old[j], c_old[j]]
                offer(k + 1, np.array(head + h_split + c_split))
            # Several merged pairs at once: split all of them.
            if 1 < k and 2 * k <= expected_pairs:
                h_all = [max(h - off, 0.0) for h in h_old] + [h + off for h in h_old]
                offer(2 * k, np.array(head + h_all + c_old + c_old))

    def bic(kk):
        return n * math.log(max(stages[kk][1], 1e-300) / n) + (3 + 2 * kk) * math.log(n)

    k_best = min(stages, key=lambda kk: (bic(kk), -kk))
    theta, _ = stages[k_best]
    b, gam, dd = theta[:3]
    h = theta[3 : 3 + k_best]
    C = theta[3 + k_best :]
    centers, contrasts, active = [], [], []
    for j in range(4):
        on = j < k_best
        hj = h[j] if on else 0.0
        centers += [sc.to_nu(dd - hj), sc.to_nu(dd + hj)]
        cj = max(float(C[j]), 1e-6) if on else 0.0
        contrasts += [cj, cj]
        active += [on, on]
    return LorentzianModelParams(float(b), float(gam * sc.half), np.clip(centers, nu[0], nu[-1]),
                                 np.array(contrasts), np.array(active)).canonical()


def contrast_and_fwhm(fit):
    if not fit.converged:
        raise NotConvergedError("fit did not converge")
    p = fit.params
    return float(np.max(p.contrasts)), float(p.gamma)


def fit_spectrum(spectrum, expected_pairs=4, D=ZERO_FIELD_SPLITTING, **lm_options):
    """Automated seed plus free eight-center fit.

    The prominence-based seed is refined with a mirror-pair model (dips
    symmetric about a common center) that adds missing pairs one at a time;
    the pair count with the best BIC seeds the final :func:`lm_fit`.
    """
    guess = initial_guess(spectrum, expected_pairs, D)
    seed = _pair_staging(spectrum, guess, D, expected_pairs)
    return lm_fit(spectrum, seed, **lm_options)


def fixed_center_contrast(spectrum, centers, gamma):
    """Common dip depth with known centers and width.

    Linear least squares of the spectrum onto a constant, a linear trend and
    the unit-depth dip comb; returns the comb coefficient. The trend term
    keeps a slow gain drift from leaking into the depth estimate.
    """
    nu = np.asarray(spectrum.frequencies, dtype=float)
    y = np.asarray(spectrum.intensity, dtype=float)
    comb = model_eval(
        LorentzianModelParams(0.0, gamma, np.asarray(centers, float), np.ones(len(centers))), nu
    )
    t = (nu - nu.mean()) / (np.ptp(nu) or 1.0)
    A = np.column_stack([np.ones_like(nu), t, comb])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(coef[2])
