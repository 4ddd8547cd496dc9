"""Factor interpretability: stability across seeds, driver validity,
counterfactual forecast shifts, and randomization-test event studies.

Everything here is correlational.  Latent panels carry rotational
indeterminacy, so cross-seed comparisons first absorb an orthogonal
rotation fitted on a disjoint split before any statistic is reported.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import orthogonal_procrustes, subspace_angles

from . import model as M
from .errors import ContractViolationError, InvalidArgumentError, SparseFactorError


@dataclass
class FactorPanel:
    dates: np.ndarray
    latents: np.ndarray  # (T, m)
    active_threshold: float = 1e-3

    def __post_init__(self):
        self.latents = np.asarray(self.latents, float)
        if not np.all(np.isfinite(self.latents)):
            raise InvalidArgumentError("latent panel must be finite")
        if self.active_threshold < 0:
            raise InvalidArgumentError("active threshold must be nonnegative")


@dataclass
class EventSpec:
    event_dates: list[int]          # indices into the panel
    window_half_width: int = 3
    factor_index: int = 0
    num_permutations: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.num_permutations < 100:
            raise InvalidArgumentError("need at least 100 permutations")
        if self.window_half_width < 0:
            raise InvalidArgumentError("window half width must be nonnegative")


def _whiten(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    keep = s > 1e-12 * s.max()
    if not np.all(keep):
        raise SparseFactorError("rank-deficient panel in canonical correlation")
    return u[:, keep] * np.sqrt(x.shape[0])


def canonical_correlations(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Singular values of the cross-covariance of the whitened panels."""
    wa, wb = _whiten(a), _whiten(b)
    cross = wa.T @ wb / a.shape[0]
    return np.clip(np.linalg.svd(cross, compute_uv=False), 0.0, 1.0)


def procrustes_stability(panels: list[FactorPanel], fit_frac: float = 0.5) -> dict:
    """Pairwise cross-seed factor stability after rotation alignment.

    Rotations are fitted on the first ``fit_frac`` of dates; canonical
    correlations and principal angles are reported on the held remainder.
    """
    if len(panels) < 2:
        raise InvalidArgumentError("need at least two panels")
    t_len = panels[0].latents.shape[0]
    if any(p.latents.shape != panels[0].latents.shape for p in panels):
        raise InvalidArgumentError("panels must share dates and dimension")
    n_fit = max(int(t_len * fit_frac), 2)
    mean_ccs, max_angles = [], []
    for i in range(len(panels)):
        for j in range(i + 1, len(panels)):
            a, b = panels[i].latents, panels[j].latents
            rot, _ = orthogonal_procrustes(a[:n_fit], b[:n_fit])
            a_rot = a[n_fit:] @ rot
            ccs = canonical_correlations(a_rot, b[n_fit:])
            angles = subspace_angles(a_rot, b[n_fit:])
            mean_ccs.append(float(np.mean(ccs)))
            max_angles.append(float(np.max(angles)))
    return {"mean_canonical_correlation": float(np.mean(mean_ccs)),
            "max_subspace_angle_rad": float(np.max(max_angles)),
            "pairwise": mean_ccs}


def _residualize(x: np.ndarray, controls: np.ndarray) -> np.ndarray:
    c = np.column_stack([np.ones(controls.shape[0]), controls])
    beta, *_ = np.linalg.lstsq(c, x, rcond=None)
    return x - c @ beta


def driver_regression(panel: FactorPanel, drivers: np.ndarray,
                      driver_names: list[str] | None = None,
                      controls: np.ndarray | None = None,
                      feature_names: set[str] | None = None) -> dict:
    """Pearson r, R-squared, and control-partialled r per (factor, driver).

    Drivers must be disjoint from the model's input features; pass the
    feature name set to enforce that contract.
    """
    z = panel.latents
    d = np.atleast_2d(np.asarray(drivers, float))
    if d.shape[0] != z.shape[0]:
        d = d.T
    if d.shape[0] != z.shape[0]:
        raise InvalidArgumentError("drivers must align with panel dates")
    names = driver_names or [f"driver_{k}" for k in range(d.shape[1])]
    if feature_names is not None:
        overlap = set(names) & feature_names
        if overlap:
            raise ContractViolationError(f"drivers overlap model inputs: {sorted(overlap)}")
    if controls is not None:
        zr = _residualize(z, controls)
        dr = _residualize(d, controls)
    results = {}
    for k in range(z.shape[1]):
        for j, name in enumerate(names):
            zk, dj = z[:, k], d[:, j]
            if zk.std() == 0 or dj.std() == 0:
                r = float("nan")
            else:
                r = float(np.corrcoef(zk, dj)[0, 1])
            entry = {"r": r, "r2": r * r if np.isfinite(r) else float("nan")}
            if controls is not None:
                a, b = zr[:, k], dr[:, j]
                if a.std() < 1e-12 or b.std() < 1e-12:
                    entry["partial_r"] = float("nan")
                    entry["partial_flag"] = "degenerate"
                else:
                    entry["partial_r"] = float(np.corrcoef(a, b)[0, 1])
            results[(k, name)] = entry
    return results


def counterfactual(bundle: M.ModelBundle, x, factor_k: int, delta: float,
                   factor_std: np.ndarray) -> np.ndarray:
    """Per-horizon forecast shift from moving one latent by delta std units."""
    m = bundle.config.latent_dim
    if not 0 <= factor_k < m:
        raise InvalidArgumentError(f"factor index {factor_k} out of range for m={m}")
    feats = x.features[None] if x.features.ndim == 2 else x.features
    masks = x.masks[None] if x.masks.ndim == 2 else x.masks
    z, _ = M.enc_forward_batch(feats, masks, bundle)
    h, _ = M.pred_forward_batch(feats, masks, bundle)
    shift_vec = np.zeros(m)
    shift_vec[factor_k] = delta * float(factor_std[factor_k])
    base = M.dec_forward_values(z, h, bundle)
    moved = M.dec_forward_values(z + shift_vec, h, bundle)
    out = moved - base
    return out[0] if x.features.ndim == 2 else out


def _event_windows(spec: EventSpec, t_len: int) -> np.ndarray:
    mask = np.zeros(t_len, bool)
    merged = 0
    for e in spec.event_dates:
        lo = max(e - spec.window_half_width, 0)
        hi = min(e + spec.window_half_width, t_len - 1)
        if lo < 0 or hi >= t_len:
            raise InvalidArgumentError("event window outside sample")
        if mask[lo:hi + 1].any():
            merged += 1
        mask[lo:hi + 1] = True
    if merged:
        warnings.warn(f"{merged} overlapping event windows collapsed")
    return mask


def event_study(panel: FactorPanel, spec: EventSpec) -> dict:
    """Mean factor shift in event windows vs outside, with a randomization p.

    The null redraws the same number of event dates uniformly (windows kept
    within sample); p is the fraction of permutations whose absolute shift
    is at least the observed one.
    """
    if len(spec.event_dates) < 2:
        raise InvalidArgumentError("need at least two events")
    z = panel.latents[:, spec.factor_index]
    t_len = z.size
    sd = z.std()
    if sd == 0:
        return {"shift_sd": 0.0, "t_stat": 0.0, "p_value": 1.0, "cohens_d": 0.0}
    mask = _event_windows(spec, t_len)

    def shift_of(m):
        inside, outside = z[m], z[~m]
        return inside.mean() - outside.mean()

    obs = shift_of(mask)
    inside, outside = z[mask], z[~mask]
    pooled = np.sqrt(((inside.size - 1) * inside.var(ddof=1)
                      + (outside.size - 1) * outside.var(ddof=1))
                     / (inside.size + outside.size - 2))
    t_stat = obs / (pooled * np.sqrt(1.0 / inside.size + 1.0 / outside.size))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5eed]))
    lo = spec.window_half_width
    hi = t_len - 1 - spec.window_half_width
    count = 0
    n_events = len(spec.event_dates)
    for _ in range(spec.num_permutations):
        dates = rng.integers(lo, hi + 1, size=n_events)
        m = np.zeros(t_len, bool)
        for e in dates:
            m[e - spec.window_half_width:e + spec.window_half_width + 1] = True
        if m.all() or not m.any():
            continue
        if abs(shift_of(m)) >= abs(obs):
            count += 1
    p = (count + 1) / (spec.num_permutations + 1)
    return {"shift_sd": float(obs / sd), "t_stat": float(t_stat),
            "p_value": float(p), "cohens_d": float(obs / pooled)}


def active_factor_stats(panel: FactorPanel) -> dict:
    counts = np.sum(np.abs(panel.latents) > panel.active_threshold, axis=1)
    return {"mean_count": float(counts.mean()), "per_date_counts": counts}


def fix_signs(panel: FactorPanel, drivers: np.ndarray) -> FactorPanel:
    """Flip factor signs so each factor correlates positively with its best driver."""
    z = panel.latents.copy()
    d = np.atleast_2d(np.asarray(drivers, float))
    if d.shape[0] != z.shape[0]:
        d = d.T
    for k in range(z.shape[1]):
        if z[:, k].std() == 0:
            continue
        corrs = [np.corrcoef(z[:, k], d[:, j])[0, 1] if d[:, j].std() > 0 else 0.0
                 for j in range(d.shape[1])]
        best = int(np.argmax(np.abs(corrs)))
        if corrs[best] < 0:
            z[:, k] = -z[:, k]
    return FactorPanel(dates=panel.dates, latents=z,
                       active_threshold=panel.active_threshold)
